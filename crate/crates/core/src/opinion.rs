//! Subjective-logic opinions backed by Dirichlet distributions, and the
//! trusted fusion operator that averages Dirichlet parameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics;

/// Nonnegative per-class evidence collected by an evidential head.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceVector(Vec<f64>);

impl EvidenceVector {
    pub fn new(evidence: Vec<f64>) -> Result<Self> {
        if evidence.len() < 2 {
            return Err(Error::domain(
                "EvidenceVector",
                format!("need at least 2 classes, got {}", evidence.len()),
            ));
        }
        if let Some(bad) = evidence.iter().find(|e| !e.is_finite() || **e < 0.0) {
            return Err(Error::domain(
                "EvidenceVector",
                format!("evidence must be finite and nonnegative, got {bad}"),
            ));
        }
        Ok(Self(evidence))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

/// A multinomial opinion in one-to-one correspondence with `Dir(α)`.
///
/// Only `alpha` and `base_rate` are stored; belief, uncertainty and
/// strength are always derived from `alpha`, so they cannot disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletOpinion {
    alpha: Vec<f64>,
    strength: f64,
    base_rate: Vec<f64>,
}

impl DirichletOpinion {
    /// Builds an opinion from Dirichlet parameters with a uniform base rate.
    pub fn from_alpha(alpha: Vec<f64>) -> Result<Self> {
        let k = alpha.len();
        Self::with_base_rate(alpha, vec![1.0 / k as f64; k.max(1)])
    }

    pub fn with_base_rate(alpha: Vec<f64>, base_rate: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::domain(
                "DirichletOpinion",
                format!("need at least 2 classes, got {}", alpha.len()),
            ));
        }
        if let Some(bad) = alpha.iter().find(|a| !a.is_finite() || **a <= 0.0) {
            return Err(Error::domain(
                "DirichletOpinion",
                format!("alpha must be finite and > 0, got {bad}"),
            ));
        }
        if base_rate.len() != alpha.len() {
            return Err(Error::DimensionMismatch {
                expected: alpha.len(),
                got: base_rate.len(),
            });
        }
        let rate_sum: f64 = base_rate.iter().sum();
        if base_rate.iter().any(|a| !a.is_finite() || *a < 0.0) || (rate_sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain(
                "DirichletOpinion",
                format!("base rate must be a probability vector (sum {rate_sum})"),
            ));
        }
        let strength = alpha.iter().sum();
        Ok(Self {
            alpha,
            strength,
            base_rate,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn base_rate(&self) -> &[f64] {
        &self.base_rate
    }

    /// Dirichlet strength `S = Σ α_k`.
    pub fn strength(&self) -> f64 {
        self.strength
    }

    /// Belief masses `b_k = (α_k − 1) / S`.
    pub fn belief(&self) -> Vec<f64> {
        self.alpha.iter().map(|a| (a - 1.0) / self.strength).collect()
    }

    /// Uncertainty mass `u = K / S`.
    pub fn uncertainty(&self) -> f64 {
        self.num_classes() as f64 / self.strength
    }

    /// The Dirichlet mean `α / S`.
    pub fn projected_probability(&self) -> Vec<f64> {
        self.alpha.iter().map(|a| a / self.strength).collect()
    }

    /// Index of the largest projected probability (first one on ties).
    pub fn predicted_class(&self) -> usize {
        argmax(&self.alpha)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// `α = e + 1`, `b = e / S`, `u = K / S`.
pub fn opinion_from_evidence(evidence: &EvidenceVector) -> DirichletOpinion {
    let alpha = evidence.as_slice().iter().map(|e| e + 1.0).collect();
    DirichletOpinion::from_alpha(alpha).expect("evidence vector invariants imply a valid opinion")
}

pub fn projected_probability(opinion: &DirichletOpinion) -> Vec<f64> {
    opinion.projected_probability()
}

/// Log-density of `Dir(α)` at `p`. Points outside the open simplex are an
/// error instead of `-∞`.
pub fn dirichlet_log_density(p: &[f64], alpha: &[f64]) -> Result<f64> {
    if p.len() != alpha.len() {
        return Err(Error::DimensionMismatch {
            expected: alpha.len(),
            got: p.len(),
        });
    }
    let ln_b = numerics::ln_multinomial_beta(alpha)?;
    let total: f64 = p.iter().sum();
    if p.iter().any(|x| !x.is_finite() || *x <= 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::OffSimplex(format!("{p:?} (sum {total})")));
    }
    Ok(-ln_b
        + p.iter()
            .zip(alpha)
            .map(|(pi, ai)| (ai - 1.0) * pi.ln())
            .sum::<f64>())
}

/// Belief/uncertainty route of the pairwise fusion rule:
/// `b = (b¹u² + b²u¹) / (u¹ + u²)`, `u = 2u¹u² / (u¹ + u²)`.
pub fn fuse_belief_uncertainty(b1: &[f64], u1: f64, b2: &[f64], u2: f64) -> (Vec<f64>, f64) {
    let denom = u1 + u2;
    let belief = b1
        .iter()
        .zip(b2)
        .map(|(x, y)| (x * u2 + y * u1) / denom)
        .collect();
    (belief, 2.0 * u1 * u2 / denom)
}

fn check_same_k(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Trusted fusion `m1 ⊕ m2`: Dirichlet parameters are averaged.
///
/// The result's belief and uncertainty coincide with the belief/uncertainty
/// route ([`fuse_belief_uncertainty`]); debug builds assert it.
pub fn fuse_pair(m1: &DirichletOpinion, m2: &DirichletOpinion) -> Result<DirichletOpinion> {
    check_same_k(m1.num_classes(), m2.num_classes())?;
    let alpha = m1
        .alpha
        .iter()
        .zip(&m2.alpha)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let fused = DirichletOpinion::with_base_rate(alpha, m1.base_rate.clone())?;

    #[cfg(debug_assertions)]
    {
        let (b, u) = fuse_belief_uncertainty(&m1.belief(), m1.uncertainty(), &m2.belief(), m2.uncertainty());
        debug_assert!((u - fused.uncertainty()).abs() <= 1e-12, "fusion routes disagree on u");
        for (x, y) in b.iter().zip(fused.belief()) {
            debug_assert!((x - y).abs() <= 1e-12, "fusion routes disagree on b");
        }
    }
    Ok(fused)
}

/// How a set of stage opinions is reduced to a single joint opinion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// `((M₁ ⊕ M₂) ⊕ M₃) ⊕ …` in chain order.
    #[default]
    LeftFold,
    /// Arithmetic mean of all `α`, independent of order.
    Balanced,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "left-fold" | "leftfold" | "chain" => Ok(FusionMode::LeftFold),
            "balanced" => Ok(FusionMode::Balanced),
            other => Err(Error::InvalidConfig(format!("unknown fusion mode `{other}`"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::LeftFold => "left-fold",
            FusionMode::Balanced => "balanced",
        })
    }
}

/// Left fold of [`fuse_pair`] over `opinions` in the given order.
pub fn fuse_chain<'a, I>(opinions: I) -> Result<DirichletOpinion>
where
    I: IntoIterator<Item = &'a DirichletOpinion>,
{
    let mut iter = opinions.into_iter();
    let first = iter.next().ok_or(Error::Empty("fuse_chain"))?.clone();
    iter.try_fold(first, |acc, m| fuse_pair(&acc, m))
}

/// Order-independent fusion: `α = (1/M) Σ_m α^m`.
pub fn fuse_balanced<'a, I>(opinions: I) -> Result<DirichletOpinion>
where
    I: IntoIterator<Item = &'a DirichletOpinion>,
{
    let mut iter = opinions.into_iter();
    let first = iter.next().ok_or(Error::Empty("fuse_balanced"))?;
    let mut sum = first.alpha.clone();
    let mut count = 1usize;
    for m in iter {
        check_same_k(sum.len(), m.num_classes())?;
        for (s, a) in sum.iter_mut().zip(&m.alpha) {
            *s += a;
        }
        count += 1;
    }
    if count == 1 {
        return Ok(first.clone());
    }
    let alpha = sum.into_iter().map(|s| s / count as f64).collect();
    DirichletOpinion::with_base_rate(alpha, first.base_rate.clone())
}

pub fn fuse(mode: FusionMode, opinions: &[DirichletOpinion]) -> Result<DirichletOpinion> {
    match mode {
        FusionMode::LeftFold => fuse_chain(opinions),
        FusionMode::Balanced => fuse_balanced(opinions),
    }
}

/// Linear weights `w_m` such that the fused `α = Σ_m w_m α^m` for `count` opinions.
///
/// Left fold: the last opinion weighs 1/2, the one before 1/4, …, and the
/// first two share the smallest weight `1/2^(M−1)`.
pub fn fusion_weights(mode: FusionMode, count: usize) -> Vec<f64> {
    match (mode, count) {
        (_, 0) => Vec::new(),
        (_, 1) => vec![1.0],
        (FusionMode::Balanced, m) => vec![1.0 / m as f64; m],
        (FusionMode::LeftFold, m) => (0..m)
            .map(|i| {
                let depth = if i == 0 { m - 1 } else { m - i };
                0.5f64.powi(depth as i32)
            })
            .collect(),
    }
}

/// Which branch of the hybrid model produced an opinion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Branch {
    /// Local-pattern branch, tagged `C`.
    Local,
    /// Global branch, tagged `V`.
    Global,
}

impl Branch {
    pub fn letter(self) -> char {
        match self {
            Branch::Local => 'C',
            Branch::Global => 'V',
        }
    }
}

/// Identifies an opinion by branch and 1-based stage index, e.g. `C3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SourceTag {
    pub branch: Branch,
    pub stage: usize,
}

impl SourceTag {
    pub fn new(branch: Branch, stage: usize) -> Self {
        Self { branch, stage }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.branch.letter(), self.stage)
    }
}

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let mut chars = s.chars();
        let branch = match chars.next().map(|c| c.to_ascii_uppercase()) {
            Some('C') => Branch::Local,
            Some('V') => Branch::Global,
            _ => return Err(Error::InvalidConfig(format!("bad stage tag `{s}`"))),
        };
        let stage: usize = chars
            .as_str()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad stage index in `{s}`")))?;
        if stage == 0 {
            return Err(Error::InvalidConfig(format!("stage indices are 1-based: `{s}`")));
        }
        Ok(Self { branch, stage })
    }
}

/// Stage opinions in chain order: all `C` stages ascending, then all `V` stages.
#[derive(Debug, Clone, PartialEq)]
pub struct OpinionSet {
    tags: Vec<SourceTag>,
    opinions: Vec<DirichletOpinion>,
}

impl OpinionSet {
    pub fn new(entries: Vec<(SourceTag, DirichletOpinion)>) -> Result<Self> {
        let (tags, opinions): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        if let Some(first) = opinions.first() {
            let k = first.num_classes();
            for m in &opinions {
                check_same_k(k, m.num_classes())?;
            }
        }
        if tags.windows(2).any(|w| w[0] >= w[1]) {
            let listed: Vec<String> = tags.iter().map(ToString::to_string).collect();
            return Err(Error::InvalidConfig(format!(
                "opinions out of chain order: {}",
                listed.join(",")
            )));
        }
        Ok(Self { tags, opinions })
    }

    pub fn len(&self) -> usize {
        self.opinions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opinions.is_empty()
    }

    pub fn tags(&self) -> &[SourceTag] {
        &self.tags
    }

    pub fn opinions(&self) -> &[DirichletOpinion] {
        &self.opinions
    }

    pub fn iter(&self) -> impl Iterator<Item = (SourceTag, &DirichletOpinion)> {
        self.tags.iter().copied().zip(&self.opinions)
    }

    pub fn fuse(&self, mode: FusionMode) -> Result<DirichletOpinion> {
        fuse(mode, &self.opinions)
    }
}

/// Wire form of an opinion. Belief, uncertainty and strength are derived
/// on load and never serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpinionRecord {
    pub alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_rate: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl OpinionRecord {
    pub fn from_opinion(opinion: &DirichletOpinion, tag: Option<SourceTag>) -> Self {
        Self {
            alpha: opinion.alpha.clone(),
            base_rate: Some(opinion.base_rate.clone()),
            tag: tag.map(|t| t.to_string()),
        }
    }

    pub fn to_opinion(&self) -> Result<DirichletOpinion> {
        match &self.base_rate {
            Some(rate) => DirichletOpinion::with_base_rate(self.alpha.clone(), rate.clone()),
            None => DirichletOpinion::from_alpha(self.alpha.clone()),
        }
    }

    pub fn source_tag(&self) -> Result<Option<SourceTag>> {
        self.tag.as_deref().map(str::parse).transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(alpha: &[f64]) -> DirichletOpinion {
        DirichletOpinion::from_alpha(alpha.to_vec()).unwrap()
    }

    fn assert_vec_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn no_evidence_means_full_uncertainty() {
        let m = opinion_from_evidence(&EvidenceVector::new(vec![0.0; 5]).unwrap());
        assert_vec_close(&m.belief(), &[0.0; 5], 0.0);
        assert_eq!(m.uncertainty(), 1.0);
    }

    #[test]
    fn evidence_arithmetic() {
        let m = opinion_from_evidence(&EvidenceVector::new(vec![4.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        assert_eq!(m.strength(), 9.0);
        assert_vec_close(&m.belief(), &[4.0 / 9.0, 0.0, 0.0, 0.0, 0.0], 1e-15);
        assert!((m.uncertainty() - 5.0 / 9.0).abs() < 1e-15);

        let m = opinion_from_evidence(&EvidenceVector::new(vec![1.0, 1.0]).unwrap());
        assert_eq!(m.strength(), 4.0);
        assert_vec_close(&m.belief(), &[0.25, 0.25], 1e-15);
        assert_eq!(m.uncertainty(), 0.5);
    }

    #[test]
    fn evidence_rejects_bad_values() {
        assert!(EvidenceVector::new(vec![1.0, -0.1]).is_err());
        assert!(EvidenceVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EvidenceVector::new(vec![f64::INFINITY, 0.0]).is_err());
        assert!(EvidenceVector::new(vec![1.0]).is_err());
    }

    #[test]
    fn projected_probabilities() {
        assert_vec_close(&op(&[1.0; 5]).projected_probability(), &[0.2; 5], 1e-15);
        assert_vec_close(
            &op(&[5.0, 1.0, 1.0, 1.0, 1.0]).projected_probability(),
            &[5.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0],
            1e-15,
        );
        assert_vec_close(&op(&[2.0, 6.0]).projected_probability(), &[0.25, 0.75], 1e-15);
    }

    #[test]
    fn log_density_examples() {
        let v = dirichlet_log_density(&[0.2, 0.3, 0.5], &[1.0, 1.0, 1.0]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-13);
        let v = dirichlet_log_density(&[0.5, 0.5], &[2.0, 2.0]).unwrap();
        assert!((v - (6f64.ln() + 0.25f64.ln())).abs() < 1e-13);
        assert!((v - 0.405_465_108_108_164_4).abs() < 1e-12);
        let v = dirichlet_log_density(&[0.3, 0.7], &[1.0, 1.0]).unwrap();
        assert!(v.abs() < 1e-14);
    }

    #[test]
    fn log_density_off_simplex() {
        assert!(matches!(
            dirichlet_log_density(&[0.0, 1.0], &[2.0, 2.0]),
            Err(Error::OffSimplex(_))
        ));
        assert!(matches!(
            dirichlet_log_density(&[0.4, 0.4], &[2.0, 2.0]),
            Err(Error::OffSimplex(_))
        ));
        assert!(dirichlet_log_density(&[0.5, 0.5], &[2.0, 2.0, 1.0]).is_err());
    }

    #[test]
    fn fuse_pair_worked_example() {
        let fused = fuse_pair(&op(&[2.0, 1.0, 1.0, 1.0, 1.0]), &op(&[6.0, 1.0, 1.0, 1.0, 1.0])).unwrap();
        assert_vec_close(fused.alpha(), &[4.0, 1.0, 1.0, 1.0, 1.0], 0.0);
        assert_eq!(fused.strength(), 8.0);
        assert!((fused.belief()[0] - 3.0 / 8.0).abs() < 1e-15);
        assert!((fused.uncertainty() - 5.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn fuse_pair_identical_is_idempotent() {
        let m = op(&[3.5, 1.2, 7.0]);
        assert_eq!(fuse_pair(&m, &m).unwrap().alpha(), m.alpha());
    }

    #[test]
    fn fuse_pair_dimension_mismatch() {
        assert!(matches!(
            fuse_pair(&op(&[1.0, 2.0]), &op(&[1.0, 2.0, 3.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn chain_is_left_fold_and_not_associative() {
        let ms = [op(&[2.0, 1.0]), op(&[4.0, 1.0]), op(&[8.0, 1.0])];
        let left = fuse_chain(&ms).unwrap();
        assert_vec_close(left.alpha(), &[5.5, 1.0], 1e-15);
        let right = fuse_pair(&ms[0], &fuse_pair(&ms[1], &ms[2]).unwrap()).unwrap();
        assert_vec_close(right.alpha(), &[4.0, 1.0], 1e-15);
        assert_ne!(left.alpha(), right.alpha());
        assert_eq!(fuse_chain(&ms[..1]).unwrap(), ms[0]);
        assert!(matches!(fuse_chain(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn balanced_is_mean() {
        let ms = [op(&[2.0, 1.0]), op(&[4.0, 1.0]), op(&[8.0, 1.0])];
        let fused = fuse_balanced(&ms).unwrap();
        assert_vec_close(fused.alpha(), &[14.0 / 3.0, 1.0], 1e-15);
        let permuted = [ms[2].clone(), ms[0].clone(), ms[1].clone()];
        assert_eq!(fuse_balanced(&permuted).unwrap(), fused);
        assert_eq!(fuse_balanced(&ms[1..2]).unwrap(), ms[1]);
        assert!(fuse_balanced(&[]).is_err());
    }

    #[test]
    fn fusion_weights_reproduce_fold() {
        let ms: Vec<_> = (1..=5).map(|i| op(&[i as f64 * 1.7, 1.0 + i as f64 * 0.3])).collect();
        for mode in [FusionMode::LeftFold, FusionMode::Balanced] {
            for m in 1..=ms.len() {
                let w = fusion_weights(mode, m);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
                let fused = fuse(mode, &ms[..m]).unwrap();
                for k in 0..2 {
                    let lin: f64 = w.iter().zip(&ms[..m]).map(|(w, o)| w * o.alpha()[k]).sum();
                    assert!((lin - fused.alpha()[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tags_and_set_order() {
        let t: SourceTag = "C3".parse().unwrap();
        assert_eq!(t, SourceTag::new(Branch::Local, 3));
        assert_eq!(t.to_string(), "C3");
        assert_eq!("v4".parse::<SourceTag>().unwrap().to_string(), "V4");
        assert!("X1".parse::<SourceTag>().is_err());
        assert!("C0".parse::<SourceTag>().is_err());
        assert!("C".parse::<SourceTag>().is_err());

        let m = op(&[1.0, 2.0]);
        let ok = OpinionSet::new(vec![
            ("C3".parse().unwrap(), m.clone()),
            ("C4".parse().unwrap(), m.clone()),
            ("V1".parse().unwrap(), m.clone()),
        ]);
        assert_eq!(ok.unwrap().len(), 3);
        let bad = OpinionSet::new(vec![
            ("V1".parse().unwrap(), m.clone()),
            ("C4".parse().unwrap(), m.clone()),
        ]);
        assert!(bad.is_err());
        let mixed_k = OpinionSet::new(vec![
            ("C1".parse().unwrap(), m.clone()),
            ("C2".parse().unwrap(), op(&[1.0, 1.0, 1.0])),
        ]);
        assert!(matches!(mixed_k, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn record_json_shape() {
        let rec: OpinionRecord =
            serde_json::from_str(r#"{"alpha":[2,1,1],"base_rate":[0.5,0.25,0.25],"tag":"C3"}"#).unwrap();
        let m = rec.to_opinion().unwrap();
        assert_eq!(m.alpha(), &[2.0, 1.0, 1.0]);
        assert_eq!(rec.source_tag().unwrap(), Some("C3".parse().unwrap()));
        let json = serde_json::to_value(OpinionRecord::from_opinion(&m, None)).unwrap();
        assert!(json.get("belief").is_none() && json.get("uncertainty").is_none());
        assert!(serde_json::from_str::<OpinionRecord>(r#"{"alpha":[2,1],"uncertainty":0.5}"#).is_err());
        let only_alpha: OpinionRecord = serde_json::from_str(r#"{"alpha":[3,1]}"#).unwrap();
        assert_eq!(only_alpha.to_opinion().unwrap().base_rate(), &[0.5, 0.5]);
    }
}
