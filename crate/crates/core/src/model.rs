//! Desk-scale two-branch hybrid classifier.
//!
//! Each branch is a stack of fully-connected stages with the activation
//! `z·exp(−z²/2)`: slope one at the origin, bounded, and fading back to zero
//! far from it, so inputs far outside the training data yield weak features
//! instead of saturated ones (and hence little evidence). The local branch
//! uses banded weight masks (every unit sees a small window of the previous
//! stage), the global branch is dense. Selected stages feed an evidential
//! head (affine + softplus) whose evidence becomes a Dirichlet opinion; the
//! opinions are fused into the joint prediction. Each branch also carries a
//! softmax classification head on its final stage.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::losses::{
    annealing_coefficient, conflict_grad_unchecked, conflict_unchecked, evidential_ce_terms, grad_ece_unchecked,
    softmax_cross_entropy, weighted_total, LossBreakdown, OneHotLabel,
};
use crate::numerics::{sigmoid, softplus};
use crate::opinion::{
    fusion_weights, opinion_from_evidence, Branch, DirichletOpinion, EvidenceVector, FusionMode, OpinionSet, SourceTag,
};

/// Half-width of the local receptive window, in units of the stage's input/output ratio.
const LOCAL_BAND_HALF_WIDTH: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub kind: Branch,
    /// First input coordinate this branch reads.
    pub input_offset: usize,
    pub input_dim: usize,
    pub stage_widths: Vec<usize>,
}

impl BranchConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_widths.len()
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "branch {} needs input_dim >= 1 and at least one stage of width >= 1",
                self.kind.letter()
            )));
        }
        Ok(())
    }
}

/// Stages whose opinions take part in fusion, kept in chain order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageMask(Vec<SourceTag>);

impl StageMask {
    pub fn new(mut tags: Vec<SourceTag>) -> Result<Self> {
        tags.sort();
        tags.dedup();
        if tags.is_empty() {
            return Err(Error::InvalidConfig("stage mask selects no stages".into()));
        }
        Ok(Self(tags))
    }

    /// The last `count` stages of both branches.
    pub fn last_stages(num_stages: usize, count: usize) -> Self {
        let first = num_stages.saturating_sub(count) + 1;
        let tags = [Branch::Local, Branch::Global]
            .into_iter()
            .flat_map(|b| (first..=num_stages).map(move |s| SourceTag::new(b, s)))
            .collect();
        Self(tags)
    }

    pub fn tags(&self) -> &[SourceTag] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromStr for StageMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tags = s
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<SourceTag>>>()?;
        Self::new(tags)
    }
}

impl fmt::Display for StageMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl Serialize for StageMask {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StageMask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub local: BranchConfig,
    pub global: BranchConfig,
    pub stage_mask: StageMask,
    pub fusion_mode: FusionMode,
}

impl ModelConfig {
    /// Two branches reading disjoint views `[0, dim_local)` and
    /// `[dim_local, dim_local + dim_global)`, four stages each, fusing the
    /// last two stages of both.
    pub fn two_view(num_classes: usize, dim_local: usize, dim_global: usize, stage_widths: Vec<usize>) -> Self {
        let num_stages = stage_widths.len();
        Self {
            num_classes,
            local: BranchConfig {
                kind: Branch::Local,
                input_offset: 0,
                input_dim: dim_local,
                stage_widths: stage_widths.clone(),
            },
            global: BranchConfig {
                kind: Branch::Global,
                input_offset: dim_local,
                input_dim: dim_global,
                stage_widths,
            },
            stage_mask: StageMask::last_stages(num_stages, 2),
            fusion_mode: FusionMode::LeftFold,
        }
    }

    pub fn branch(&self, kind: Branch) -> &BranchConfig {
        match kind {
            Branch::Local => &self.local,
            Branch::Global => &self.global,
        }
    }

    /// Length of the input vectors this model accepts.
    pub fn input_dim(&self) -> usize {
        (self.local.input_offset + self.local.input_dim).max(self.global.input_offset + self.global.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.local.kind != Branch::Local || self.global.kind != Branch::Global {
            return Err(Error::InvalidConfig("branch kinds must be local then global".into()));
        }
        self.local.validate()?;
        self.global.validate()?;
        if self.stage_mask.is_empty() {
            return Err(Error::InvalidConfig("stage mask selects no stages".into()));
        }
        for tag in self.stage_mask.tags() {
            let n = self.branch(tag.branch).num_stages();
            if tag.stage > n {
                return Err(Error::InvalidConfig(format!("stage mask entry {tag} exceeds {n} stages")));
            }
        }
        Ok(())
    }
}

/// Affine map `z = W x + b` with `W` stored row-major (`rows × cols`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.weight
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    fn backward(&self, x: &[f64], dz: &[f64], grad: &mut Dense, need_dx: bool) -> Vec<f64> {
        let mut dx = if need_dx { vec![0.0; self.cols] } else { Vec::new() };
        for (i, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.bias[i] += d;
            let row = i * self.cols..(i + 1) * self.cols;
            for (g, v) in grad.weight[row.clone()].iter_mut().zip(x) {
                *g += d * v;
            }
            if need_dx {
                for (dxj, w) in dx.iter_mut().zip(&self.weight[row]) {
                    *dxj += d * w;
                }
            }
        }
        dx
    }

    fn axpy(&mut self, scale: f64, other: &Dense) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }
}

/// All trainable tensors of a [`ToyHybridModel`]; also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub local_stages: Vec<Dense>,
    pub global_stages: Vec<Dense>,
    /// One evidential head per selected stage, in stage-mask order.
    pub heads: Vec<Dense>,
    pub cls_local: Dense,
    pub cls_global: Dense,
}

impl Parameters {
    fn zeros_like(config: &ModelConfig) -> Self {
        let stages = |b: &BranchConfig| {
            let mut prev = b.input_dim;
            b.stage_widths
                .iter()
                .map(|&w| {
                    let d = Dense::zeros(w, prev);
                    prev = w;
                    d
                })
                .collect::<Vec<_>>()
        };
        let heads = config
            .stage_mask
            .tags()
            .iter()
            .map(|t| Dense::zeros(config.num_classes, config.branch(t.branch).stage_widths[t.stage - 1]))
            .collect();
        let last = |b: &BranchConfig| *b.stage_widths.last().expect("validated nonempty");
        Self {
            local_stages: stages(&config.local),
            global_stages: stages(&config.global),
            heads,
            cls_local: Dense::zeros(config.num_classes, last(&config.local)),
            cls_global: Dense::zeros(config.num_classes, last(&config.global)),
        }
    }

    /// Named tensors in the same order as [`Parameters::flatten`].
    fn named<'a>(&'a self, mask: &'a StageMask) -> Vec<(String, &'a Dense)> {
        let mut out = Vec::new();
        for (i, d) in self.local_stages.iter().enumerate() {
            out.push((format!("C.stage{}", i + 1), d));
        }
        for (i, d) in self.global_stages.iter().enumerate() {
            out.push((format!("V.stage{}", i + 1), d));
        }
        for (tag, d) in mask.tags().iter().zip(&self.heads) {
            out.push((format!("{}.head{}", tag.branch.letter(), tag.stage), d));
        }
        out.push(("C.cls".into(), &self.cls_local));
        out.push(("V.cls".into(), &self.cls_global));
        out
    }

    fn all_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.local_stages
            .iter_mut()
            .chain(self.global_stages.iter_mut())
            .chain(self.heads.iter_mut())
            .chain([&mut self.cls_local, &mut self.cls_global])
    }

    fn all(&self) -> impl Iterator<Item = &Dense> {
        self.local_stages
            .iter()
            .chain(&self.global_stages)
            .chain(&self.heads)
            .chain([&self.cls_local, &self.cls_global])
    }

    /// `self += scale · other`
    pub fn axpy(&mut self, scale: f64, other: &Parameters) {
        for (a, b) in self.all_mut().zip(other.all()) {
            a.axpy(scale, b);
        }
    }

    /// Flat view of every scalar, in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        self.all()
            .flat_map(|d| d.weight.iter().chain(&d.bias).copied())
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.all().map(|d| d.weight.len() + d.bias.len()).sum()
    }

    /// Mutable access to the scalar at `index` of [`Parameters::flatten`].
    pub fn scalar_mut(&mut self, mut index: usize) -> &mut f64 {
        for d in self.all_mut() {
            if index < d.weight.len() {
                return &mut d.weight[index];
            }
            index -= d.weight.len();
            if index < d.bias.len() {
                return &mut d.bias[index];
            }
            index -= d.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.all().all(|d| d.weight.iter().chain(&d.bias).all(|v| v.is_finite()))
    }

    /// Squared norm of the evidential-head parameters.
    pub fn heads_norm_sqr(&self) -> f64 {
        self.heads
            .iter()
            .flat_map(|d| d.weight.iter().chain(&d.bias))
            .map(|v| v * v)
            .sum()
    }
}

/// Banded connectivity for a local stage: unit `i` sees inputs near the
/// proportional position `(i + ½)·cols/rows`.
fn band_mask(rows: usize, cols: usize) -> Vec<bool> {
    let ratio = cols as f64 / rows as f64;
    let half = LOCAL_BAND_HALF_WIDTH * ratio.max(1.0);
    let mut mask = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let center = (i as f64 + 0.5) * ratio - 0.5;
        for j in 0..cols {
            mask.push((j as f64 - center).abs() <= half);
        }
    }
    mask
}

/// What one forward pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub opinions: OpinionSet,
    pub fused: DirichletOpinion,
    pub logits_local: Vec<f64>,
    pub logits_global: Vec<f64>,
}

impl ModelOutput {
    pub fn predicted_local(&self) -> usize {
        crate::opinion::argmax(&self.logits_local)
    }

    pub fn predicted_global(&self) -> usize {
        crate::opinion::argmax(&self.logits_global)
    }
}

/// Intermediate values kept for backpropagation.
struct Trace {
    /// `acts[0]` is the branch input, `acts[n]` the output of stage `n`.
    local_acts: Vec<Vec<f64>>,
    global_acts: Vec<Vec<f64>>,
    head_pre: Vec<Vec<f64>>,
    stage_alphas: Vec<Vec<f64>>,
    fused_alpha: Vec<f64>,
    logits_local: Vec<f64>,
    logits_global: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyHybridModel {
    config: ModelConfig,
    params: Parameters,
    local_masks: Vec<Vec<bool>>,
}

impl ToyHybridModel {
    /// Random initialization: weights uniform in `±√(3 / fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        let masks = model.local_masks.clone();
        let init = |d: &mut Dense, mask: Option<&Vec<bool>>, rng: &mut R| {
            for i in 0..d.rows {
                let row = i * d.cols..(i + 1) * d.cols;
                let fan_in = match mask {
                    Some(m) => m[row.clone()].iter().filter(|&&b| b).count(),
                    None => d.cols,
                }
                .max(1);
                let bound = (3.0 / fan_in as f64).sqrt();
                for j in row {
                    let allowed = mask.is_none_or(|m| m[j]);
                    let v = rng.random_range(-bound..=bound);
                    d.weight[j] = if allowed { v } else { 0.0 };
                }
            }
        };
        for (d, m) in model.params.local_stages.iter_mut().zip(&masks) {
            init(d, Some(m), rng);
        }
        for d in model.params.global_stages.iter_mut() {
            init(d, None, rng);
        }
        for d in model.params.heads.iter_mut() {
            init(d, None, rng);
        }
        init(&mut model.params.cls_local, None, rng);
        init(&mut model.params.cls_global, None, rng);
        Ok(model)
    }

    /// All parameters zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Parameters::zeros_like(&config);
        let local_masks = params
            .local_stages
            .iter()
            .map(|d| band_mask(d.rows, d.cols))
            .collect();
        Ok(Self {
            config,
            params,
            local_masks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    /// Replaces all parameters; masked local weights are forced to zero.
    pub fn set_params(&mut self, params: Parameters) -> Result<()> {
        let reference = Parameters::zeros_like(&self.config);
        for (a, b) in reference.all().zip(params.all()) {
            if a.rows != b.rows || a.cols != b.cols {
                return Err(Error::DimensionMismatch {
                    expected: a.weight.len(),
                    got: b.weight.len(),
                });
            }
        }
        let mut params = params;
        self.apply_masks_to(&mut params);
        self.params = params;
        Ok(())
    }

    fn apply_masks_to(&self, params: &mut Parameters) {
        for (d, m) in params.local_stages.iter_mut().zip(&self.local_masks) {
            for (w, &keep) in d.weight.iter_mut().zip(m) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }

    /// `self.params -= lr · grads`
    pub fn sgd_step(&mut self, lr: f64, grads: &Parameters) {
        self.params.axpy(-lr, grads);
    }

    /// Stage activations of one branch: entry `n − 1` is the output of stage `n`.
    pub fn branch_forward(&self, kind: Branch, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let mut acts = self.branch_acts(kind, x);
        acts.remove(0);
        Ok(acts)
    }

    fn branch_acts(&self, kind: Branch, x: &[f64]) -> Vec<Vec<f64>> {
        let cfg = self.config.branch(kind);
        let stages = match kind {
            Branch::Local => &self.params.local_stages,
            Branch::Global => &self.params.global_stages,
        };
        let mut acts = Vec::with_capacity(stages.len() + 1);
        acts.push(x[cfg.input_offset..cfg.input_offset + cfg.input_dim].to_vec());
        for stage in stages {
            let z = stage.forward(acts.last().expect("nonempty"));
            acts.push(z.into_iter().map(activation).collect());
        }
        acts
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let expected = self.config.input_dim();
        if x.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: x.len() });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let local_acts = self.branch_acts(Branch::Local, x);
        let global_acts = self.branch_acts(Branch::Global, x);
        let mut head_pre = Vec::with_capacity(self.params.heads.len());
        let mut stage_alphas = Vec::with_capacity(self.params.heads.len());
        for (tag, head) in self.config.stage_mask.tags().iter().zip(&self.params.heads) {
            let acts = match tag.branch {
                Branch::Local => &local_acts,
                Branch::Global => &global_acts,
            };
            let z = head.forward(&acts[tag.stage]);
            stage_alphas.push(z.iter().map(|&v| softplus(v) + 1.0).collect());
            head_pre.push(z);
        }
        let weights = fusion_weights(self.config.fusion_mode, stage_alphas.len());
        let mut fused_alpha = vec![0.0; self.config.num_classes];
        for (w, alpha) in weights.iter().zip(&stage_alphas) {
            for (f, a) in fused_alpha.iter_mut().zip(alpha) {
                *f += w * a;
            }
        }
        let logits_local = self.params.cls_local.forward(local_acts.last().expect("nonempty"));
        let logits_global = self.params.cls_global.forward(global_acts.last().expect("nonempty"));
        Trace {
            local_acts,
            global_acts,
            head_pre,
            stage_alphas,
            fused_alpha,
            logits_local,
            logits_global,
        }
    }

    /// Evidence produced by the head of stage `tag` for input `x`.
    pub fn stage_evidence(&self, tag: SourceTag, x: &[f64]) -> Result<EvidenceVector> {
        self.check_input(x)?;
        let idx = self
            .config
            .stage_mask
            .tags()
            .iter()
            .position(|t| *t == tag)
            .ok_or_else(|| Error::InvalidConfig(format!("stage {tag} is not in the stage mask")))?;
        let acts = self.branch_acts(tag.branch, x);
        evidence_head_forward(&self.params.heads[idx], &acts[tag.stage])
    }

    /// Runs both branches, builds stage opinions, and fuses them.
    pub fn forward(&self, x: &[f64]) -> Result<ModelOutput> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let entries = self
            .config
            .stage_mask
            .tags()
            .iter()
            .zip(&trace.head_pre)
            .map(|(tag, z)| {
                let evidence = EvidenceVector::new(z.iter().map(|&v| softplus(v)).collect())?;
                Ok((*tag, opinion_from_evidence(&evidence)))
            })
            .collect::<Result<Vec<_>>>()?;
        let opinions = OpinionSet::new(entries)?;
        let fused = opinions.fuse(self.config.fusion_mode)?;
        Ok(ModelOutput {
            opinions,
            fused,
            logits_local: trace.logits_local,
            logits_global: trace.logits_global,
        })
    }

    /// Batch-mean loss breakdown without gradients.
    pub fn loss(&self, batch: &[(&[f64], OneHotLabel)], epoch: usize, gamma: f64) -> Result<LossBreakdown> {
        self.run_batch(batch, epoch, gamma, false).map(|(l, _)| l)
    }

    /// Batch-mean loss breakdown and the gradient of `l_total` with respect to
    /// every parameter. `gamma` may be pinned to the closed interval `[0, 1]`.
    pub fn backward(
        &self,
        batch: &[(&[f64], OneHotLabel)],
        epoch: usize,
        gamma: f64,
    ) -> Result<(LossBreakdown, Parameters)> {
        self.run_batch(batch, epoch, gamma, true)
            .map(|(l, g)| (l, g.expect("gradients requested")))
    }

    fn run_batch(
        &self,
        batch: &[(&[f64], OneHotLabel)],
        epoch: usize,
        gamma: f64,
        with_grad: bool,
    ) -> Result<(LossBreakdown, Option<Parameters>)> {
        if batch.is_empty() {
            return Err(Error::Empty("model_backward"));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::domain("model_backward", format!("gamma must lie in [0, 1], got {gamma}")));
        }
        for (x, y) in batch {
            self.check_input(x)?;
            if y.num_classes() != self.config.num_classes {
                return Err(Error::DimensionMismatch {
                    expected: self.config.num_classes,
                    got: y.num_classes(),
                });
            }
        }
        let lambda = annealing_coefficient(epoch);
        let scale = 1.0 / batch.len() as f64;
        let mut grads = with_grad.then(|| Parameters::zeros_like(&self.config));
        let mut sums = LossBreakdown::default();
        let weights = fusion_weights(self.config.fusion_mode, self.config.stage_mask.len());

        for (x, y) in batch {
            let trace = self.trace(x);
            let alphas: Vec<&[f64]> = trace.stage_alphas.iter().map(Vec::as_slice).collect();
            let fused_terms = evidential_ce_terms(&trace.fused_alpha, y)?;
            let mut ace = fused_terms.ace;
            let mut kl = fused_terms.kl;
            for a in &alphas {
                let t = evidential_ce_terms(a, y)?;
                ace += t.ace;
                kl += t.kl;
            }
            let con = conflict_unchecked(&alphas);
            let (ce_c, dlogits_c) = softmax_cross_entropy(&trace.logits_local, y);
            let (ce_v, dlogits_v) = softmax_cross_entropy(&trace.logits_global, y);
            sums.l_ace += ace;
            sums.l_kl += kl;
            sums.l_con += con;
            sums.l_ce_c += ce_c;
            sums.l_ce_v += ce_v;

            if let Some(grads) = grads.as_mut() {
                self.accumulate_sample_grad(&trace, y, lambda, gamma, scale, &weights, &dlogits_c, &dlogits_v, grads);
            }
        }

        let mut out = LossBreakdown {
            epoch,
            lambda_t: lambda,
            gamma,
            l_ace: sums.l_ace * scale,
            l_kl: sums.l_kl * scale,
            l_con: sums.l_con * scale,
            l_ce_c: sums.l_ce_c * scale,
            l_ce_v: sums.l_ce_v * scale,
            ..LossBreakdown::default()
        };
        out.l_ece = out.l_ace + lambda * out.l_kl;
        out.l_tl = out.l_ece + out.l_con;
        out.l_total = weighted_total(out.l_tl, out.l_ce_v, out.l_ce_c, gamma);
        if let Some(term) = out.first_non_finite() {
            return Err(Error::NonFiniteLoss {
                term,
                context: format!("epoch {epoch}, batch of {}", batch.len()),
            });
        }
        if let Some(g) = grads.as_mut() {
            self.apply_masks_to(g);
        }
        Ok((out, grads))
    }

    #[allow(clippy::too_many_arguments)]
    fn accumulate_sample_grad(
        &self,
        trace: &Trace,
        y: &OneHotLabel,
        lambda: f64,
        gamma: f64,
        scale: f64,
        weights: &[f64],
        dlogits_c: &[f64],
        dlogits_v: &[f64],
        grads: &mut Parameters,
    ) {
        let trusted = (1.0 - gamma) * scale;
        let ce = gamma * scale;
        let mut dlocal: Vec<Vec<f64>> = trace.local_acts.iter().map(|a| vec![0.0; a.len()]).collect();
        let mut dglobal: Vec<Vec<f64>> = trace.global_acts.iter().map(|a| vec![0.0; a.len()]).collect();

        if trusted != 0.0 {
            let alphas: Vec<&[f64]> = trace.stage_alphas.iter().map(Vec::as_slice).collect();
            let g_fused = grad_ece_unchecked(&trace.fused_alpha, y, lambda);
            let g_con = conflict_grad_unchecked(&alphas);
            for (m, tag) in self.config.stage_mask.tags().iter().enumerate() {
                let g_stage = grad_ece_unchecked(alphas[m], y, lambda);
                let dz: Vec<f64> = (0..self.config.num_classes)
                    .map(|k| {
                        let dalpha = weights[m] * g_fused[k] + g_stage[k] + g_con[m][k];
                        trusted * dalpha * sigmoid(trace.head_pre[m][k])
                    })
                    .collect();
                let (acts, dacts) = match tag.branch {
                    Branch::Local => (&trace.local_acts, &mut dlocal),
                    Branch::Global => (&trace.global_acts, &mut dglobal),
                };
                let dh = self.params.heads[m].backward(&acts[tag.stage], &dz, &mut grads.heads[m], true);
                for (a, b) in dacts[tag.stage].iter_mut().zip(dh) {
                    *a += b;
                }
            }
        }

        if ce != 0.0 {
            let dz_c: Vec<f64> = dlogits_c.iter().map(|d| ce * d).collect();
            let dz_v: Vec<f64> = dlogits_v.iter().map(|d| ce * d).collect();
            let n_c = trace.local_acts.len() - 1;
            let n_v = trace.global_acts.len() - 1;
            let dh = self
                .params
                .cls_local
                .backward(&trace.local_acts[n_c], &dz_c, &mut grads.cls_local, true);
            for (a, b) in dlocal[n_c].iter_mut().zip(dh) {
                *a += b;
            }
            let dh = self
                .params
                .cls_global
                .backward(&trace.global_acts[n_v], &dz_v, &mut grads.cls_global, true);
            for (a, b) in dglobal[n_v].iter_mut().zip(dh) {
                *a += b;
            }
        }

        backprop_stages(&self.params.local_stages, &trace.local_acts, dlocal, &mut grads.local_stages);
        backprop_stages(&self.params.global_stages, &trace.global_acts, dglobal, &mut grads.global_stages);
    }

    pub fn to_checkpoint(&self, rng_seed: u64) -> Checkpoint {
        let params = self
            .params
            .named(&self.config.stage_mask)
            .into_iter()
            .flat_map(|(name, d)| {
                [
                    (
                        format!("{name}.weight"),
                        ParamRecord {
                            shape: vec![d.rows, d.cols],
                            data: d.weight.clone(),
                        },
                    ),
                    (
                        format!("{name}.bias"),
                        ParamRecord {
                            shape: vec![d.rows],
                            data: d.bias.clone(),
                        },
                    ),
                ]
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            rng_seed,
            params,
            metrics: BTreeMap::new(),
            training: None,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        let mut model = Self::zeroed(ckpt.config.clone())?;
        let mut params = model.params.clone();
        let names: Vec<String> = params
            .named(&ckpt.config.stage_mask)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut targets: Vec<&mut Dense> = params.all_mut().collect();
        for (name, d) in names.iter().zip(targets.iter_mut()) {
            for (suffix, shape, dest) in [
                ("weight", vec![d.rows, d.cols], &mut d.weight),
                ("bias", vec![d.rows], &mut d.bias),
            ] {
                let key = format!("{name}.{suffix}");
                let rec = ckpt
                    .params
                    .get(&key)
                    .ok_or_else(|| Error::InvalidConfig(format!("checkpoint is missing `{key}`")))?;
                if rec.shape != shape || rec.data.len() != dest.len() {
                    return Err(Error::InvalidConfig(format!(
                        "`{key}` has shape {:?}, expected {:?}",
                        rec.shape, shape
                    )));
                }
                if rec.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidConfig(format!("`{key}` holds non-finite values")));
                }
                dest.copy_from_slice(&rec.data);
            }
        }
        model.set_params(params)?;
        Ok(model)
    }
}

/// Stage nonlinearity `z·exp(−z²/2)`.
pub fn activation(z: f64) -> f64 {
    z * (-0.5 * z * z).exp()
}

pub fn activation_grad(z: f64) -> f64 {
    (1.0 - z * z) * (-0.5 * z * z).exp()
}

fn backprop_stages(stages: &[Dense], acts: &[Vec<f64>], mut dacts: Vec<Vec<f64>>, grads: &mut [Dense]) {
    for n in (1..=stages.len()).rev() {
        let z = stages[n - 1].forward(&acts[n - 1]);
        let dz: Vec<f64> = dacts[n].iter().zip(&z).map(|(d, &z)| d * activation_grad(z)).collect();
        if dz.iter().all(|&v| v == 0.0) {
            continue;
        }
        let dx = stages[n - 1].backward(&acts[n - 1], &dz, &mut grads[n - 1], n > 1);
        if n > 1 {
            for (a, b) in dacts[n - 1].iter_mut().zip(dx) {
                *a += b;
            }
        }
    }
}

/// `e = softplus(W f + b)`.
pub fn evidence_head_forward(head: &Dense, feature: &[f64]) -> Result<EvidenceVector> {
    if feature.len() != head.cols {
        return Err(Error::DimensionMismatch {
            expected: head.cols,
            got: feature.len(),
        });
    }
    EvidenceVector::new(head.forward(feature).into_iter().map(softplus).collect())
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized model: configuration, seed, and every parameter tensor by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub rng_seed: u64,
    pub params: BTreeMap<String, ParamRecord>,
    /// Metrics recorded when the checkpoint was written (e.g. `val_accuracy`).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    /// Training configuration that produced the checkpoint, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a checkpoint, reporting syntax errors with their byte offset.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint {
            offset: byte_offset(text, e.line(), e.column()),
            detail: e.to_string(),
        })
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}
