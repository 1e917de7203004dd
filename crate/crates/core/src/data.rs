//! Synthetic two-view datasets with complementary class structure, OOD
//! sampling, and CSV import/export.
//!
//! Every class has a Gaussian prototype in a "local" view and a "global"
//! view. Some class pairs share their local prototype (separable only in the
//! global view) and an equal number of disjoint pairs share their global
//! prototype (separable only in the local view), so neither view alone
//! resolves every class while the concatenation does.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROTOTYPE_STREAM: u64 = 0;
const OOD_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
            Split::Ood => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Samples per class in each split.
    pub n_per_class: SplitCounts,
    pub dim_local: usize,
    pub dim_global: usize,
    /// Fraction of classes distinguishable in only one view.
    pub complementarity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            n_per_class: SplitCounts {
                train: 200,
                val: 40,
                test: 80,
            },
            dim_local: 16,
            dim_global: 16,
            complementarity: 0.8,
            noise_sigma: 1.0,
            seed: 2024,
        }
    }
}

impl SyntheticSpec {
    /// Number of colliding class pairs in each view.
    pub fn collision_pairs(&self) -> usize {
        (self.complementarity * self.num_classes as f64 / 4.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.dim_local < 2 || self.dim_global < 2 {
            return fail("view dimensions must be >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.complementarity) {
            return fail(format!("complementarity must lie in [0, 1], got {}", self.complementarity));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return fail(format!("noise_sigma must be > 0, got {}", self.noise_sigma));
        }
        let pairs = self.collision_pairs();
        if 4 * pairs > self.num_classes {
            return fail(format!(
                "complementarity {} with K={} needs {} disjoint colliding pairs ({} classes)",
                self.complementarity,
                self.num_classes,
                2 * pairs,
                4 * pairs
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dim_local + self.dim_global
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Ood,
}

impl Split {
    pub const LABELED: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "ood" => Ok(Split::Ood),
            other => Err(Error::InvalidConfig(format!("unknown split token `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Writes the samples of one split (or all, with `None`) as CSV.
    pub fn write_csv<W: Write>(&self, out: W, split: Option<Split>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        header.push("split".into());
        w.write_record(&header)?;
        for s in self.samples.iter().filter(|s| split.is_none_or(|sp| sp == s.split)) {
            let mut row: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
            row.push(s.label.to_string());
            row.push(s.split.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Appends the rows of `other`; dimensions must agree.
    pub fn extend(&mut self, other: Dataset) -> Result<()> {
        if other.samples.is_empty() {
            return Ok(());
        }
        if self.samples.is_empty() {
            self.dim = other.dim;
        } else if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        self.num_classes = self.num_classes.max(other.num_classes);
        self.samples.extend(other.samples);
        Ok(())
    }
}

/// Class means in both views, `local[k]` and `global[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub local: Vec<Vec<f64>>,
    pub global: Vec<Vec<f64>>,
}

impl Prototypes {
    /// Concatenated mean of class `k`.
    pub fn mean(&self, k: usize) -> Vec<f64> {
        self.local[k].iter().chain(&self.global[k]).copied().collect()
    }
}

fn spec_rng(spec: &SyntheticSpec, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

fn draw_prototypes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Prototypes {
    let k = spec.num_classes;
    let mut local: Vec<Vec<f64>> = (0..k).map(|_| gaussian_vec(rng, spec.dim_local, 1.0)).collect();
    let mut global: Vec<Vec<f64>> = (0..k).map(|_| gaussian_vec(rng, spec.dim_global, 1.0)).collect();
    let pairs = spec.collision_pairs();
    for i in 0..pairs {
        // classes (2i, 2i+1) collide locally
        local[2 * i + 1] = local[2 * i].clone();
        // classes (2p + 2i, 2p + 2i + 1) collide globally
        let a = 2 * pairs + 2 * i;
        global[a + 1] = global[a].clone();
    }
    Prototypes { local, global }
}

/// Class prototypes implied by `spec` (the first draws of its generator).
pub fn prototypes(spec: &SyntheticSpec) -> Result<Prototypes> {
    spec.validate()?;
    Ok(draw_prototypes(spec, &mut spec_rng(spec, PROTOTYPE_STREAM)))
}

/// Deterministic train/val/test dataset for `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = spec_rng(spec, PROTOTYPE_STREAM);
    let protos = draw_prototypes(spec, &mut rng);
    let mut samples = Vec::new();
    for split in Split::LABELED {
        for label in 0..spec.num_classes {
            let mean = protos.mean(label);
            for _ in 0..spec.n_per_class.get(split) {
                let x = mean
                    .iter()
                    .map(|m| m + spec.noise_sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>();
                samples.push(Sample { x, label, split });
            }
        }
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        dim: spec.input_dim(),
        samples,
    })
}

/// Broad out-of-distribution samples: centered beyond every prototype with
/// ten times the class noise. Labels are meaningless and set to 0.
pub fn sample_ood(spec: &SyntheticSpec, count: usize) -> Result<Vec<Sample>> {
    let protos = prototypes(spec)?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let dim = spec.input_dim();
    let sigma = 10.0 * spec.noise_sigma;
    let radius = (0..spec.num_classes)
        .map(|k| protos.mean(k).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let mut rng = spec_rng(spec, OOD_STREAM);
    let dir = gaussian_vec(&mut rng, dim, 1.0);
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let center: Vec<f64> = dir.iter().map(|v| v / norm * (radius + sigma)).collect();
    Ok((0..count)
        .map(|_| Sample {
            x: center
                .iter()
                .map(|c| c + sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect(),
            label: 0,
            split: Split::Ood,
        })
        .collect())
}

/// Reads a `f0,…,fD,label,split` CSV file.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: display.clone(),
        line,
        detail,
    };
    let header = reader.headers()?.clone();
    let n = header.len();
    if n < 3 || &header[n - 2] != "label" || &header[n - 1] != "split" {
        return Err(parse_err(1, "header must be f0,...,fD,label,split".into()));
    }
    for (i, name) in header.iter().take(n - 2).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(1, format!("expected column f{i}, found `{name}`")));
        }
    }
    let dim = n - 2;
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != n {
            return Err(parse_err(line, format!("expected {n} fields, found {}", record.len())));
        }
        let mut x = Vec::with_capacity(dim);
        for (i, field) in record.iter().take(dim).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("f{i}: `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("f{i}: non-finite value `{field}`")));
            }
            x.push(v);
        }
        let label: usize = record[dim]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad label `{}`", &record[dim])))?;
        let split: Split = record[dim + 1]
            .parse()
            .map_err(|e: Error| parse_err(line, e.to_string()))?;
        samples.push(Sample { x, label, split });
    }
    if samples.is_empty() {
        eprintln!("warning: {display} contains no data rows");
    }
    let num_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0).max(2);
    Ok(Dataset {
        num_classes,
        dim,
        samples,
    })
}
