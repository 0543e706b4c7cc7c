//! Log-space arithmetic and the small set of random draws used throughout.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

/// Tolerance for "sums to one" checks on stored distributions.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// `log(exp(a) + exp(b))`, exact for infinite arguments.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let max = a.max(b);
    max + ((a - max).exp() + (b - max).exp()).ln()
}

/// `log(sum(exp(x)))` over an iterator; `-inf` for an empty input.
pub fn log_sum_exp<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64>,
    I::IntoIter: Clone,
{
    let iter = values.into_iter();
    let max = iter.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + iter.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log(mean(exp(x)))`.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    log_sum_exp(values.iter().copied()) - (values.len() as f64).ln()
}

pub fn ln_vec(p: &[f64]) -> Vec<f64> {
    p.iter().map(|x| x.ln()).collect()
}

/// Checks that `p` is a probability vector within [`SIMPLEX_TOL`].
pub fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidParameter(format!("{what} is empty")));
    }
    if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InvalidParameter(format!("{what} has invalid entry {x}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidParameter(format!("{what} sums to {sum}")));
    }
    Ok(())
}

/// Rescales non-negative weights to sum to one. All-zero input becomes
/// uniform.
pub fn normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / weights.len() as f64; weights.len()]
    }
}

/// Draws an index with probability proportional to `weights`.
pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numerical(format!("categorical weights sum to {total}")));
    }
    let mut target = rng.random::<f64>() * total;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if target < w {
                return Ok(i);
            }
            target -= w;
            last_positive = i;
        }
    }
    // Rounding left a sliver of mass past the end.
    Ok(last_positive)
}

/// Draws an index with probability proportional to `exp(log_weights)`.
pub fn sample_log_categorical<R: Rng + ?Sized>(rng: &mut R, log_weights: &[f64]) -> Result<usize> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::Numerical("every candidate has zero probability".into()));
    }
    let weights: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
    sample_categorical(rng, &weights)
}

/// Log of a Gamma(shape, 1) draw. Small shapes use the boost
/// `G(a) = G(a + 1) * U^(1/a)` in log-space so the draw does not underflow.
pub fn sample_log_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) {
        return Err(Error::InvalidParameter(format!("gamma shape {shape}")));
    }
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        return Ok(g.sample(rng).ln());
    }
    let g = Gamma::new(shape + 1.0, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let u: f64 = 1.0 - rng.random::<f64>();
    Ok(g.sample(rng).ln() + u.ln() / shape)
}

/// Dirichlet draw. Zero concentrations give exactly zero weight.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Result<Vec<f64>> {
    let mut logs = Vec::with_capacity(alpha.len());
    for &a in alpha {
        if a == 0.0 {
            logs.push(f64::NEG_INFINITY);
        } else {
            logs.push(sample_log_gamma(rng, a)?);
        }
    }
    let total = log_sum_exp(logs.iter().copied());
    if total == f64::NEG_INFINITY {
        return Err(Error::InvalidParameter(
            "Dirichlet needs at least one positive concentration".into(),
        ));
    }
    Ok(logs.iter().map(|l| (l - total).exp()).collect())
}

/// `Beta(a, b)` draw built from two log-gamma draws.
pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> Result<f64> {
    let x = sample_log_gamma(rng, a)?;
    let y = sample_log_gamma(rng, b)?;
    Ok((x - log_add(x, y)).exp())
}

/// Number of occupied tables after seating `customers` in a Chinese
/// restaurant with the given concentration.
pub fn sample_table_count<R: Rng + ?Sized>(rng: &mut R, customers: u64, concentration: f64) -> u64 {
    if customers == 0 {
        return 0;
    }
    // The first customer always opens a table.
    let mut tables = 1;
    for i in 1..customers {
        let p = concentration / (concentration + i as f64);
        if rng.random::<f64>() < p {
            tables += 1;
        }
    }
    tables
}
