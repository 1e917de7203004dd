//! Accuracy, quadratic weighted kappa, and per-stage uncertainty histograms.

use std::collections::BTreeMap;
use std::io::Write;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::ToyHybridModel;
use crate::opinion::SourceTag;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidConfig("confusion matrix must be square".into()));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(num_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                got: predicted.len(),
            });
        }
        let mut cm = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.k || predicted >= self.k {
            return Err(Error::domain(
                "ConfusionMatrix",
                format!("class ({truth}, {predicted}) outside [0, {})", self.k),
            ));
        }
        self.counts[truth * self.k + predicted] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::new(self.k);
        for i in 0..self.k {
            for j in 0..self.k {
                t.counts[j * self.k + i] = self.get(i, j);
            }
        }
        t
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("accuracy"));
    }
    let trace: u64 = (0..cm.k).map(|i| cm.get(i, i)).sum();
    Ok(trace as f64 / total as f64)
}

/// Cohen's kappa with quadratic weights `(i − j)² / (K − 1)²`; the chance
/// matrix is the outer product of the marginals scaled to the observed total.
#[allow(clippy::needless_range_loop)]
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.k;
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("quadratic_weighted_kappa"));
    }
    if k < 2 {
        return Err(Error::domain("quadratic_weighted_kappa", "need at least 2 classes"));
    }
    let n = total as f64;
    let rows: Vec<f64> = (0..k).map(|i| (0..k).map(|j| cm.get(i, j)).sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..k).map(|j| (0..k).map(|i| cm.get(i, j)).sum::<u64>() as f64).collect();
    let denom_w = ((k - 1) * (k - 1)) as f64;
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..k {
        for j in 0..k {
            let d = i as f64 - j as f64;
            let w = d * d / denom_w;
            observed += w * cm.get(i, j) as f64;
            expected += w * rows[i] * cols[j] / n;
        }
    }
    if expected == 0.0 {
        return Err(Error::domain(
            "quadratic_weighted_kappa",
            "degenerate marginals: expected weighted disagreement is zero",
        ));
    }
    Ok(1.0 - observed / expected)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub accuracy: f64,
    pub kappa: f64,
}

impl Scores {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            accuracy: accuracy(cm)?,
            kappa: quadratic_weighted_kappa(cm)?,
        })
    }
}

/// Scores of the fused opinion and of each branch's classification head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub fused: Scores,
    pub local: Scores,
    pub global: Scores,
}

pub fn evaluate(model: &ToyHybridModel, samples: &[&Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let k = model.config().num_classes;
    let mut fused = ConfusionMatrix::new(k);
    let mut local = ConfusionMatrix::new(k);
    let mut global = ConfusionMatrix::new(k);
    for s in samples {
        let out = model.forward(&s.x)?;
        fused.record(s.label, out.fused.predicted_class())?;
        local.record(s.label, out.predicted_local())?;
        global.record(s.label, out.predicted_global())?;
    }
    Ok(Evaluation {
        fused: Scores::from_confusion(&fused)?,
        local: Scores::from_confusion(&local)?,
        global: Scores::from_confusion(&global)?,
    })
}

pub const HISTOGRAM_BINS: usize = 64;

/// Fixed-width histogram over `[0, 1]`; the value 1 falls into the last bin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UncertaintyHistogram {
    pub counts: [u64; HISTOGRAM_BINS],
}

impl Default for UncertaintyHistogram {
    fn default() -> Self {
        Self {
            counts: [0; HISTOGRAM_BINS],
        }
    }
}

impl UncertaintyHistogram {
    pub fn bin_of(u: f64) -> usize {
        ((u.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
    }

    pub fn add(&mut self, u: f64) {
        self.counts[Self::bin_of(u)] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_edges(bin: usize) -> (f64, f64) {
        let w = 1.0 / HISTOGRAM_BINS as f64;
        (bin as f64 * w, (bin + 1) as f64 * w)
    }
}

/// Label for a row of the uncertainty report: a stage tag or the fused opinion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageLabel {
    Stage(SourceTag),
    Fused,
}

impl std::fmt::Display for StageLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageLabel::Stage(t) => write!(f, "{t}"),
            StageLabel::Fused => f.write_str("fused"),
        }
    }
}

/// Per-sample uncertainties of every stage opinion and the fused opinion.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UncertaintySet {
    /// `values[label][sample]`
    pub values: BTreeMap<StageLabel, Vec<f64>>,
}

impl UncertaintySet {
    pub fn collect<'a, I>(model: &ToyHybridModel, inputs: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut set = Self::default();
        for x in inputs {
            let out = model.forward(x)?;
            for (tag, m) in out.opinions.iter() {
                set.values.entry(StageLabel::Stage(tag)).or_default().push(m.uncertainty());
            }
            set.values.entry(StageLabel::Fused).or_default().push(out.fused.uncertainty());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.values.values().next().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self, label: StageLabel) -> Option<f64> {
        self.values
            .get(&label)
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn histogram(&self, label: StageLabel) -> UncertaintyHistogram {
        let mut h = UncertaintyHistogram::default();
        for &u in self.values.get(&label).into_iter().flatten() {
            h.add(u);
        }
        h
    }

    /// `sample_id,stage_tag,u`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sample_id", "stage_tag", "u"])?;
        for i in 0..self.len() {
            for (label, values) in &self.values {
                w.write_record([i.to_string(), label.to_string(), values[i].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Uncertainty of in-distribution and OOD samples, with histograms per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub in_distribution: UncertaintySet,
    pub ood: UncertaintySet,
}

impl UncertaintyReport {
    /// `stage_tag,bin_lo,bin_hi,count_id,count_ood`
    pub fn write_histogram_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stage_tag", "bin_lo", "bin_hi", "count_id", "count_ood"])?;
        for label in self.in_distribution.values.keys() {
            let id = self.in_distribution.histogram(*label);
            let ood = self.ood.histogram(*label);
            for bin in 0..HISTOGRAM_BINS {
                let (lo, hi) = UncertaintyHistogram::bin_edges(bin);
                w.write_record([
                    label.to_string(),
                    lo.to_string(),
                    hi.to_string(),
                    id.counts[bin].to_string(),
                    ood.counts[bin].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Collects stage and fused uncertainties for `test` and `ood` inputs.
/// `ood` may be empty; `test` may not.
pub fn uncertainty_report(model: &ToyHybridModel, test: &[&[f64]], ood: &[&[f64]]) -> Result<UncertaintyReport> {
    if test.is_empty() {
        return Err(Error::Empty("uncertainty_report"));
    }
    Ok(UncertaintyReport {
        in_distribution: UncertaintySet::collect(model, test.iter().copied())?,
        ood: UncertaintySet::collect(model, ood.iter().copied())?,
    })
}
