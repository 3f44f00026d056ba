//! Link functions and the scalar densities they need.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Result, SlpcaError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Logit,
    Probit,
}

impl Link {
    /// Success probability for canonical parameter `theta`.
    #[inline]
    pub fn inverse(self, theta: f64) -> f64 {
        match self {
            Link::Logit => logistic(theta),
            Link::Probit => normal_cdf(theta),
        }
    }

    /// `log P(y)` where `x = q·θ`, unclamped.
    #[inline]
    pub fn log_prob(self, x: f64) -> f64 {
        match self {
            Link::Logit => log_logistic(x),
            Link::Probit => log_normal_cdf(x),
        }
    }
}

impl std::str::FromStr for Link {
    type Err = SlpcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logit" => Ok(Link::Logit),
            "probit" => Ok(Link::Probit),
            other => Err(SlpcaError::config(format!("unknown link '{other}'"))),
        }
    }
}

/// The inverse logit `1/(1+e^{−θ})`. Rejects non-finite input.
pub fn inverse_logit(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(SlpcaError::invalid(format!("inverse_logit of non-finite value {theta}")));
    }
    Ok(logistic(theta))
}

/// Unchecked inverse logit, evaluated without overflow on either tail.
#[inline]
pub fn logistic(theta: f64) -> f64 {
    if theta >= 0.0 {
        1.0 / (1.0 + (-theta).exp())
    } else {
        let e = theta.exp();
        e / (1.0 + e)
    }
}

/// `log π(x) = −log(1 + e^{−x})`.
#[inline]
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Below this argument the ratio `φ(x)/Φ(x)` is evaluated by continued fraction.
const MILLS_TAIL: f64 = -8.0;

/// `φ(x)/Φ(x)`, finite for every finite `x`.
///
/// For `x < −8` both densities underflow long before their ratio does, so the
/// lower tail uses the Laplace continued fraction
/// `Φ(x)/φ(x) = 1/(t + 1/(t + 2/(t + 3/(t + …))))` with `t = −x`.
pub fn inverse_mills_ratio(x: f64) -> f64 {
    if x >= MILLS_TAIL {
        return normal_pdf(x) / normal_cdf(x);
    }
    let t = -x;
    let mut tail = t;
    for k in (1..=40).rev() {
        tail = t + k as f64 / tail;
    }
    tail
}

/// `log Φ(x)`, accurate in both tails.
pub fn log_normal_cdf(x: f64) -> f64 {
    if x >= MILLS_TAIL {
        if x > 0.0 {
            (-0.5 * erfc(x / SQRT_2)).ln_1p()
        } else {
            normal_cdf(x).ln()
        }
    } else {
        -0.5 * x * x - 0.5 * (2.0 * PI).ln() - inverse_mills_ratio(x).ln()
    }
}
