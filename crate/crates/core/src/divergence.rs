//! The four f-divergences between discrete distributions, and their partial
//! derivatives with respect to the second argument.
//!
//! | kind      | `D(p || q)`                           | `dD/dq_k`                    |
//! |-----------|---------------------------------------|------------------------------|
//! | KL        | `sum p ln(p/q)`                       | `-p_k / q_k`                 |
//! | TV        | `1/2 sum |p - q|`                     | `1/2 sign(q_k - p_k)`        |
//! | JSD       | `1/2 KL(p || m) + 1/2 KL(q || m)`     | `1/2 ln(2 q_k / (p_k + q_k))`|
//! | Hellinger | `1/2 sum (sqrt p - sqrt q)^2`         | `1/2 (1 - sqrt(p_k / q_k))`  |
//!
//! with `m = (p + q) / 2`, natural logarithms, `0 ln 0 = 0` and `sign(0) = 0`.
//! Hellinger is the squared convention, so it is bounded by 1.
//!
//! `q` (and the JSD mixture) is floored at [`EPSILON`] before every log,
//! square root or division. The derivative formulas treat each `q_k` as a free
//! coordinate, without renormalizing onto the simplex.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before logs, roots and divisions.
pub const EPSILON: f64 = 1e-12;

/// Tolerance on the row sum of a probability vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Divergence {
    #[serde(rename = "KL")]
    Kl,
    #[serde(rename = "TV")]
    Tv,
    #[serde(rename = "JSD")]
    Jsd,
    #[serde(rename = "Hellinger")]
    Hellinger,
}

impl Divergence {
    pub const ALL: [Divergence; 4] = [
        Divergence::Kl,
        Divergence::Tv,
        Divergence::Jsd,
        Divergence::Hellinger,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Divergence::Kl => "KL",
            Divergence::Tv => "TV",
            Divergence::Jsd => "JSD",
            Divergence::Hellinger => "Hellinger",
        }
    }

    /// Whether the divergence stays bounded as `q -> 0`.
    pub fn is_bounded(self) -> bool {
        !matches!(self, Divergence::Kl)
    }

    /// `D(p || q)` without validating the inputs.
    pub fn value(self, p: &[f64], q: &[f64]) -> f64 {
        debug_assert_eq!(p.len(), q.len());
        let pairs = p.iter().zip(q);
        match self {
            Divergence::Kl => pairs.map(|(&pi, &qi)| xlogy_ratio(pi, qi)).sum(),
            Divergence::Tv => 0.5 * pairs.map(|(&pi, &qi)| (pi - qi).abs()).sum::<f64>(),
            Divergence::Jsd => {
                0.5 * pairs
                    .map(|(&pi, &qi)| {
                        let m = 0.5 * (pi + qi);
                        xlogy_ratio(pi, m) + xlogy_ratio(qi, m)
                    })
                    .sum::<f64>()
            }
            Divergence::Hellinger => {
                0.5 * pairs
                    .map(|(&pi, &qi)| {
                        let d = pi.max(0.0).sqrt() - qi.max(0.0).sqrt();
                        d * d
                    })
                    .sum::<f64>()
            }
        }
    }

    /// `dD/dq_k` for one coordinate.
    #[inline]
    pub fn grad_entry(self, pk: f64, qk: f64) -> f64 {
        match self {
            Divergence::Kl => -pk / qk.max(EPSILON),
            Divergence::Tv => 0.5 * sign(qk - pk),
            Divergence::Jsd => {
                let q = qk.max(EPSILON);
                0.5 * (2.0 * q / (pk + q)).ln()
            }
            Divergence::Hellinger => 0.5 * (1.0 - (pk.max(0.0) / qk.max(EPSILON)).sqrt()),
        }
    }

    /// Gradient with respect to `q` without validating the inputs.
    pub fn grad(self, p: &[f64], q: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(q)
            .map(|(&pk, &qk)| self.grad_entry(pk, qk))
            .collect()
    }
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(Divergence::Kl),
            "tv" => Ok(Divergence::Tv),
            "jsd" | "js" => Ok(Divergence::Jsd),
            "hellinger" => Ok(Divergence::Hellinger),
            _ => Err(Error::Config(format!(
                "unknown divergence {s:?}; expected one of KL, TV, JSD, Hellinger"
            ))),
        }
    }
}

/// `x ln(x / y)` with `0 ln 0 = 0` and `y` floored at [`EPSILON`].
#[inline]
fn xlogy_ratio(x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * (x / y.max(EPSILON)).ln()
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Checks that `v` is a probability vector of length at least 2.
pub fn check_probability_vector(v: &[f64]) -> Result<()> {
    if v.len() < 2 {
        return Err(Error::Dimension(format!(
            "probability vector needs length >= 2, got {}",
            v.len()
        )));
    }
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !x.is_finite() || **x < 0.0) {
        return Err(Error::Domain(format!("entry {i} = {x} is not a probability")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Domain(format!("entries sum to {sum}, not 1")));
    }
    Ok(())
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "distributions have different lengths: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_probability_vector(p)?;
    check_probability_vector(q)
}

/// `D(p || q)` for validated probability vectors.
pub fn divergence(kind: Divergence, p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(kind.value(p, q))
}

/// `dD(p || q)/dq` for validated probability vectors.
pub fn divergence_grad_q(kind: Divergence, p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    check_pair(p, q)?;
    Ok(kind.grad(p, q))
}
