//! Evidential training objectives and their closed-form gradients with
//! respect to the Dirichlet parameters.
//!
//! Every function here works on a single sample; batch reduction (a mean in
//! sample order) happens in the model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{digamma_unchecked, lgamma_unchecked, trigamma_unchecked};
use crate::opinion::DirichletOpinion;

/// Ground-truth class as a one-hot vector over `K` classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotLabel {
    class: usize,
    num_classes: usize,
}

impl OneHotLabel {
    pub fn new(class: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 || class >= num_classes {
            return Err(Error::domain(
                "OneHotLabel",
                format!("class {class} not in [0, {num_classes}) or K < 2"),
            ));
        }
        Ok(Self { class, num_classes })
    }

    pub fn from_vec(y: &[f64]) -> Result<Self> {
        let ones: Vec<usize> = y
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == 1.0).then_some(i))
            .collect();
        if ones.len() != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::domain("OneHotLabel", format!("not one-hot: {y:?}")));
        }
        Self::new(ones[0], y.len())
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn to_vec(&self) -> Vec<f64> {
        (0..self.num_classes)
            .map(|k| if k == self.class { 1.0 } else { 0.0 })
            .collect()
    }
}

fn check_alpha(func: &'static str, alpha: &[f64], y: Option<&OneHotLabel>) -> Result<()> {
    if let Some(y) = y {
        if y.num_classes != alpha.len() {
            return Err(Error::DimensionMismatch {
                expected: alpha.len(),
                got: y.num_classes,
            });
        }
    }
    if alpha.len() < 2 {
        return Err(Error::domain(func, "need at least 2 classes"));
    }
    match alpha.iter().find(|a| !a.is_finite() || **a <= 0.0) {
        Some(bad) => Err(Error::domain(func, format!("alpha must be finite and > 0, got {bad}"))),
        None => Ok(()),
    }
}

/// Expected cross-entropy under `Dir(α)`: `ψ(S) − ψ(α_y)`.
pub fn adjusted_cross_entropy(alpha: &[f64], y: &OneHotLabel) -> Result<f64> {
    check_alpha("adjusted_cross_entropy", alpha, Some(y))?;
    Ok(ace_unchecked(alpha, y))
}

fn ace_unchecked(alpha: &[f64], y: &OneHotLabel) -> f64 {
    let s: f64 = alpha.iter().sum();
    digamma_unchecked(s) - digamma_unchecked(alpha[y.class])
}

/// `α̃ = y + (1 − y) ⊙ α`: the true class's evidence is removed so that
/// only misleading evidence remains.
pub fn misleading_alpha(alpha: &[f64], y: &OneHotLabel) -> Vec<f64> {
    let mut out = alpha.to_vec();
    out[y.class] = 1.0;
    out
}

/// `KL[Dir(α̃) ‖ Dir(1,…,1)]`.
pub fn kl_to_uniform(alpha_tilde: &[f64]) -> Result<f64> {
    check_alpha("kl_to_uniform", alpha_tilde, None)?;
    Ok(kl_unchecked(alpha_tilde))
}

fn kl_unchecked(alpha: &[f64]) -> f64 {
    let k = alpha.len() as f64;
    let s: f64 = alpha.iter().sum();
    let psi_s = digamma_unchecked(s);
    let mut acc = lgamma_unchecked(s) - lgamma_unchecked(k);
    for &a in alpha {
        acc += (a - 1.0) * (digamma_unchecked(a) - psi_s) - lgamma_unchecked(a);
    }
    // Exact zero at the uniform Dirichlet; rounding can leave a tiny negative.
    acc.max(0.0)
}

/// `∂KL/∂α̃_k = (α̃_k − 1) ψ′(α̃_k) − (S̃ − K) ψ′(S̃)`.
fn kl_grad_unchecked(alpha: &[f64]) -> Vec<f64> {
    let k = alpha.len() as f64;
    let s: f64 = alpha.iter().sum();
    let common = (s - k) * trigamma_unchecked(s);
    alpha
        .iter()
        .map(|&a| (a - 1.0) * trigamma_unchecked(a) - common)
        .collect()
}

/// `λ_t = min(1, t/10)` for epoch index `t`.
pub fn annealing_coefficient(epoch: usize) -> f64 {
    (epoch as f64 / 10.0).min(1.0)
}

/// Per-sample evidential cross-entropy split into its two parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EceTerms {
    pub ace: f64,
    pub kl: f64,
}

impl EceTerms {
    pub fn value(&self, lambda: f64) -> f64 {
        self.ace + lambda * self.kl
    }
}

pub fn evidential_ce_terms(alpha: &[f64], y: &OneHotLabel) -> Result<EceTerms> {
    check_alpha("evidential_ce", alpha, Some(y))?;
    Ok(EceTerms {
        ace: ace_unchecked(alpha, y),
        kl: kl_unchecked(&misleading_alpha(alpha, y)),
    })
}

/// `L_ece = L_ace + λ_t · KL[Dir(α̃) ‖ Dir(1)]`.
pub fn evidential_ce(alpha: &[f64], y: &OneHotLabel, epoch: usize) -> Result<f64> {
    Ok(evidential_ce_terms(alpha, y)?.value(annealing_coefficient(epoch)))
}

/// Gradient of [`evidential_ce`] with respect to `α`.
pub fn grad_evidential_ce(alpha: &[f64], y: &OneHotLabel, epoch: usize) -> Result<Vec<f64>> {
    check_alpha("grad_evidential_ce", alpha, Some(y))?;
    Ok(grad_ece_unchecked(alpha, y, annealing_coefficient(epoch)))
}

pub(crate) fn grad_ece_unchecked(alpha: &[f64], y: &OneHotLabel, lambda: f64) -> Vec<f64> {
    let s: f64 = alpha.iter().sum();
    let psi1_s = trigamma_unchecked(s);
    let mut grad = vec![psi1_s; alpha.len()];
    grad[y.class] -= trigamma_unchecked(alpha[y.class]);
    if lambda > 0.0 {
        let kl_grad = kl_grad_unchecked(&misleading_alpha(alpha, y));
        for (k, (g, kg)) in grad.iter_mut().zip(kl_grad).enumerate() {
            // ∂α̃_k/∂α_j = (1 − y_k) δ_kj
            if k != y.class {
                *g += lambda * kg;
            }
        }
    }
    grad
}

/// Certainty-weighted disagreement over all ordered pairs of opinions,
/// divided by `M − 1`. A single opinion has no conflict.
pub fn conflict_loss(opinions: &[DirichletOpinion]) -> Result<f64> {
    match opinions.len() {
        0 => Err(Error::Empty("conflict_loss")),
        _ => {
            let alphas: Vec<&[f64]> = opinions.iter().map(DirichletOpinion::alpha).collect();
            for a in &alphas[1..] {
                if a.len() != alphas[0].len() {
                    return Err(Error::DimensionMismatch {
                        expected: alphas[0].len(),
                        got: a.len(),
                    });
                }
            }
            Ok(conflict_unchecked(&alphas))
        }
    }
}

struct ProjectedView {
    p: Vec<f64>,
    certainty: f64,
    strength: f64,
}

fn projected_view(alpha: &[f64]) -> ProjectedView {
    let s: f64 = alpha.iter().sum();
    ProjectedView {
        p: alpha.iter().map(|a| a / s).collect(),
        certainty: 1.0 - alpha.len() as f64 / s,
        strength: s,
    }
}

pub(crate) fn conflict_unchecked(alphas: &[&[f64]]) -> f64 {
    let m = alphas.len();
    if m < 2 {
        return 0.0;
    }
    let views: Vec<ProjectedView> = alphas.iter().map(|a| projected_view(a)).collect();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let tv: f64 = views[i]
                .p
                .iter()
                .zip(&views[j].p)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 2.0;
            total += tv * views[i].certainty * views[j].certainty;
        }
    }
    total / (m - 1) as f64
}

/// Gradient of the conflict loss with respect to every opinion's `α`.
pub(crate) fn conflict_grad_unchecked(alphas: &[&[f64]]) -> Vec<Vec<f64>> {
    let m = alphas.len();
    let mut grads: Vec<Vec<f64>> = alphas.iter().map(|a| vec![0.0; a.len()]).collect();
    if m < 2 {
        return grads;
    }
    let views: Vec<ProjectedView> = alphas.iter().map(|a| projected_view(a)).collect();
    let k = alphas[0].len() as f64;
    // Ordered pairs (i, j) and (j, i) contribute identical terms, hence the 2.
    let scale = 2.0 / (m - 1) as f64;
    for i in 0..m {
        for j in (i + 1)..m {
            let (vi, vj) = (&views[i], &views[j]);
            let signs: Vec<f64> = vi
                .p
                .iter()
                .zip(&vj.p)
                .map(|(a, b)| match a.partial_cmp(b) {
                    Some(std::cmp::Ordering::Greater) => 1.0,
                    Some(std::cmp::Ordering::Less) => -1.0,
                    _ => 0.0,
                })
                .collect();
            let tv: f64 = vi.p.iter().zip(&vj.p).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            for (this, other, grad, sign) in [(vi, vj, i, 1.0), (vj, vi, j, -1.0)] {
                // d tv / d α_q = ½ Σ_k s_k (δ_kq − p_k) / S, with s the sign of (p_this − p_other)
                let dot: f64 = signs.iter().zip(&this.p).map(|(s, p)| s * p).sum::<f64>() * sign;
                // d certainty / d α_q = K / S²
                let dcert = k / (this.strength * this.strength);
                for (q, g) in grads[grad].iter_mut().enumerate() {
                    let dtv = 0.5 * (sign * signs[q] - dot) / this.strength;
                    *g += scale * (dtv * this.certainty * other.certainty + tv * dcert * other.certainty);
                }
            }
        }
    }
    grads
}

/// `L_tl = L_ece(α) + Σ_i L_ece(α^i) + L_con` for one sample.
pub fn trusted_loss(
    fused_alpha: &[f64],
    stage_opinions: &[DirichletOpinion],
    y: &OneHotLabel,
    epoch: usize,
) -> Result<f64> {
    let lambda = annealing_coefficient(epoch);
    let mut total = evidential_ce_terms(fused_alpha, y)?.value(lambda);
    for m in stage_opinions {
        total += evidential_ce_terms(m.alpha(), y)?.value(lambda);
    }
    Ok(total + conflict_loss(stage_opinions)?)
}

/// `L_total = (1 − γ) L_tl + γ (L_ce^V + L_ce^C)` with `γ ∈ (0, 1)`.
pub fn total_loss(l_tl: f64, l_ce_v: f64, l_ce_c: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::domain("total_loss", format!("gamma must lie in (0, 1), got {gamma}")));
    }
    Ok(weighted_total(l_tl, l_ce_v, l_ce_c, gamma))
}

pub(crate) fn weighted_total(l_tl: f64, l_ce_v: f64, l_ce_c: f64, gamma: f64) -> f64 {
    (1.0 - gamma) * l_tl + gamma * (l_ce_v + l_ce_c)
}

/// Softmax cross-entropy of `logits` against class `y`, with its gradient `softmax − y`.
pub fn softmax_cross_entropy(logits: &[f64], y: &OneHotLabel) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[y.class];
    let mut grad: Vec<f64> = exps.into_iter().map(|e| e / sum).collect();
    grad[y.class] -= 1.0;
    (loss, grad)
}

/// Per-term loss values for one batch (or the mean over an epoch).
///
/// `l_ace` and `l_kl` sum over the fused opinion and every stage opinion, so
/// `l_ece = l_ace + lambda_t · l_kl` and `l_tl = l_ece + l_con`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub lambda_t: f64,
    pub gamma: f64,
    pub l_ace: f64,
    pub l_kl: f64,
    pub l_ece: f64,
    pub l_con: f64,
    pub l_tl: f64,
    pub l_ce_v: f64,
    pub l_ce_c: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: [&'static str; 11] = [
        "epoch", "lambda_t", "gamma", "l_ace", "l_kl", "l_ece", "l_con", "l_tl", "l_ce_v", "l_ce_c", "l_total",
    ];

    /// Returns the name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("l_ace", self.l_ace),
            ("l_kl", self.l_kl),
            ("l_con", self.l_con),
            ("l_ce_v", self.l_ce_v),
            ("l_ce_c", self.l_ce_c),
            ("l_total", self.l_total),
        ]
        .into_iter()
        .find_map(|(name, v)| (!v.is_finite()).then_some(name))
    }
}
