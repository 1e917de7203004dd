//! Special functions used by the Dirichlet algebra: `ln Γ`, digamma, trigamma
//! and the log multinomial beta function.
//!
//! All three gamma-family functions shift the argument above [`ASYMPTOTIC_THRESHOLD`]
//! with the upward recurrence and then evaluate a Stirling-type asymptotic series.

use crate::error::{Error, Result};

const ASYMPTOTIC_THRESHOLD: f64 = 10.0;

/// `0.5 * ln(2π)`
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// B_{2k} / (2k (2k-1)) for k = 1..8, the Stirling series for ln Γ.
const LGAMMA_SERIES: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
    1.0 / 156.0,
    -3617.0 / 122_400.0,
];

/// B_{2k} / (2k) for k = 1..8.
const DIGAMMA_SERIES: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32_760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
];

/// B_{2k} for k = 1..8.
const TRIGAMMA_SERIES: [f64; 8] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
];

fn check_positive(func: &'static str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(func, format!("argument must be finite and > 0, got {x}")))
    }
}

/// Evaluates `Σ c_k · t^k` for `k = 1..` (Horner form, `t` usually `1/x²`).
fn series(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| (acc + c) * t)
}

/// Natural log of the gamma function for `x > 0`.
pub fn lgamma(x: f64) -> Result<f64> {
    check_positive("lgamma", x)?;
    Ok(lgamma_unchecked(x))
}

pub(crate) fn lgamma_unchecked(x: f64) -> f64 {
    // ln Γ(x) = ln Γ(x + n) - ln(x (x+1) ... (x+n-1))
    let mut shift_product = 1.0;
    let mut z = x;
    while z < ASYMPTOTIC_THRESHOLD {
        shift_product *= z;
        z += 1.0;
    }
    let inv = 1.0 / z;
    // Σ B_{2k} / (2k(2k-1) z^{2k-1}) = z · Σ c_k (1/z²)^k
    let stirling = (z - 0.5) * z.ln() - z + HALF_LN_2PI + z * series(&LGAMMA_SERIES, inv * inv);
    if shift_product == 1.0 {
        stirling
    } else {
        stirling - shift_product.ln()
    }
}

/// Digamma function ψ(x) = d/dx ln Γ(x) for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma", x)?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(x: f64) -> f64 {
    let mut acc = 0.0;
    let mut z = x;
    while z < ASYMPTOTIC_THRESHOLD {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv2 = 1.0 / (z * z);
    acc + z.ln() - 0.5 / z - series(&DIGAMMA_SERIES, inv2)
}

/// Trigamma function ψ′(x) for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive("trigamma", x)?;
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(x: f64) -> f64 {
    let mut acc = 0.0;
    let mut z = x;
    while z < ASYMPTOTIC_THRESHOLD {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // ψ′(z) ~ 1/z + 1/(2z²) + Σ B_{2k} / z^{2k+1}
    acc + inv + 0.5 * inv2 + inv * series(&TRIGAMMA_SERIES, inv2)
}

/// `ln B(α) = Σ ln Γ(α_k) − ln Γ(Σ α_k)`.
pub fn ln_multinomial_beta(alpha: &[f64]) -> Result<f64> {
    if alpha.len() < 2 {
        return Err(Error::domain(
            "ln_multinomial_beta",
            format!("need at least 2 parameters, got {}", alpha.len()),
        ));
    }
    for &a in alpha {
        check_positive("ln_multinomial_beta", a)?;
    }
    Ok(ln_multinomial_beta_unchecked(alpha))
}

pub(crate) fn ln_multinomial_beta_unchecked(alpha: &[f64]) -> f64 {
    let total: f64 = alpha.iter().sum();
    alpha.iter().map(|&a| lgamma_unchecked(a)).sum::<f64>() - lgamma_unchecked(total)
}

/// Numerically safe `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp()
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
