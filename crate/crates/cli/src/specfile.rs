//! Key-value simulation spec files.
//!
//! One `key = value` pair per line; `#` starts a comment. Keys are the
//! fields of [`SimulationSpec`]:
//!
//! ```text
//! n = 100
//! d = 200
//! k_true = 2            # optional, defaults to the number of snr entries
//! snr = 3, 2
//! support = 1-20; 21-40 # 1-based variables, one group per component
//! replicates = 20
//! seed = 1
//! baseline_reps = 100   # optional
//! baseline = 248        # optional; estimated from noise fits when absent
//! baseline_tol = 1e-5   # optional
//! ```

use std::collections::BTreeMap;

use slpca::simulation::{Mode, RankChoice, SimulationSpec, BASELINE_TOL};

use crate::error::CliError;

const KEYS: [&str; 10] = [
    "n",
    "d",
    "k_true",
    "snr",
    "support",
    "replicates",
    "seed",
    "baseline_reps",
    "baseline",
    "baseline_tol",
];

fn bad(line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::validation(format!("spec line {line}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T, CliError> {
    v.parse().map_err(|_| bad(line, format!("cannot parse {key} = '{v}'")))
}

/// Parses `3-7, 9` style lists of 1-based indices into 0-based ones.
pub fn parse_index_list(s: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let one = |t: &str| -> Result<usize, String> {
            match t.trim().parse::<usize>() {
                Ok(0) | Err(_) => Err(format!("'{t}' is not a 1-based index")),
                Ok(v) => Ok(v - 1),
            }
        };
        match tok.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (one(a)?, one(b)?);
                if a > b {
                    return Err(format!("empty range '{tok}'"));
                }
                out.extend(a..=b);
            }
            None => out.push(one(tok)?),
        }
    }
    Ok(out)
}

pub fn parse_spec(text: &str) -> Result<SimulationSpec, CliError> {
    let mut fields: BTreeMap<&str, (String, usize)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or_else(|| bad(line, "expected key = value"))?;
        let k = k.trim();
        let key = KEYS
            .iter()
            .find(|&&known| known == k)
            .ok_or_else(|| bad(line, format!("unknown key '{k}'")))?;
        if fields.insert(key, (v.trim().to_string(), line)).is_some() {
            return Err(bad(line, format!("duplicate key '{k}'")));
        }
    }
    let required = |k: &str| {
        fields
            .get(k)
            .cloned()
            .ok_or_else(|| CliError::validation(format!("spec is missing '{k}'")))
    };

    let (v, l) = required("n")?;
    let n: usize = parse_num("n", &v, l)?;
    let (v, l) = required("d")?;
    let d: usize = parse_num("d", &v, l)?;
    let (v, l) = required("snr")?;
    let snr = v
        .split(',')
        .map(|t| parse_num::<f64>("snr", t.trim(), l))
        .collect::<Result<Vec<_>, _>>()?;
    let (v, l) = required("support")?;
    let support = v
        .split(';')
        .map(|g| parse_index_list(g).map_err(|e| bad(l, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let (v, l) = required("replicates")?;
    let replicates: usize = parse_num("replicates", &v, l)?;
    let (v, l) = required("seed")?;
    let seed: u64 = parse_num("seed", &v, l)?;
    let k_true = match fields.get("k_true") {
        Some((v, l)) => parse_num("k_true", v, *l)?,
        None => snr.len(),
    };
    let baseline_reps = match fields.get("baseline_reps") {
        Some((v, l)) => parse_num("baseline_reps", v, *l)?,
        None => 100,
    };
    let baseline = match fields.get("baseline") {
        Some((v, l)) => Some(parse_num("baseline", v, *l)?),
        None => None,
    };
    let baseline_tol = match fields.get("baseline_tol") {
        Some((v, l)) => parse_num("baseline_tol", v, *l)?,
        None => BASELINE_TOL,
    };
    let spec = SimulationSpec {
        n,
        d,
        k_true,
        snr,
        support,
        replicates,
        seed,
        baseline_reps,
        baseline,
        baseline_tol,
    };
    spec.validate()?;
    Ok(spec)
}

/// Parses a mode list such as `reg:true, nonreg:true, reg:select, reg:3`.
pub fn parse_modes(s: &str) -> Result<Vec<Mode>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|tok| {
            let err = || CliError::validation(format!("bad mode '{tok}'; expected reg|nonreg:true|select|<k>"));
            let (r, k) = tok.split_once(':').ok_or_else(err)?;
            let regularized = match r.trim() {
                "reg" | "regularized" => true,
                "nonreg" | "nonregularized" => false,
                _ => return Err(err()),
            };
            let rank = match k.trim() {
                "true" => RankChoice::True,
                "select" => RankChoice::Select,
                v => RankChoice::Fixed(v.parse().map_err(|_| err())?),
            };
            Ok(Mode { regularized, rank })
        })
        .collect()
}
