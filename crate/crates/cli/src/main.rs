use clap::Parser;

fn main() {
    let cli = slpca_cli::Cli::parse();
    if let Err(e) = slpca_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
