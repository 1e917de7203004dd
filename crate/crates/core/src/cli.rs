//! `evifuse generate | train | eval | fuse`

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{self, Dataset, Sample, Split, SplitCounts, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, uncertainty_report, Evaluation};
use crate::model::{Checkpoint, ModelConfig, StageMask, ToyHybridModel};
use crate::opinion::{fuse, DirichletOpinion, FusionMode, OpinionRecord};
use crate::training::{self, TrainConfig};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const SPEC_FILE: &str = "spec.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "evifuse", version, about = "Evidential fusion of multi-branch classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic complementary two-view dataset.
    Generate(GenerateArgs),
    /// Train the two-branch evidential model.
    Train(TrainArgs),
    /// Re-evaluate a checkpoint and write uncertainty reports.
    Eval(EvalArgs),
    /// Fuse opinion JSON files.
    Fuse(FuseArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long, default_value_t = 40)]
    pub n_val: usize,
    #[arg(long, default_value_t = 80)]
    pub n_test: usize,
    #[arg(long, default_value_t = 16)]
    pub dim_local: usize,
    #[arg(long, default_value_t = 16)]
    pub dim_global: usize,
    #[arg(long, default_value_t = 0.8)]
    pub complementarity: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
}

impl GenerateArgs {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            n_per_class: SplitCounts {
                train: self.n_train,
                val: self.n_val,
                test: self.n_test,
            },
            dim_local: self.dim_local,
            dim_global: self.dim_global,
            complementarity: self.complementarity,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `generate`, or a single CSV file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr0: f64,
    #[arg(long, default_value_t = 0.9)]
    pub poly_power: f64,
    #[arg(long, default_value_t = 0.8)]
    pub gamma0: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value = "C3,C4,V3,V4")]
    pub stage_mask: String,
    #[arg(long, default_value = "left-fold")]
    pub fusion_mode: String,
    #[arg(long, default_value = "16,16,16,16")]
    pub stage_widths: String,
    /// Number of leading input columns read by the local branch; taken from
    /// `spec.json` when the dataset directory has one.
    #[arg(long)]
    pub dim_local: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of out-of-distribution samples to add to the uncertainty report.
    #[arg(long, default_value_t = 0)]
    pub ood: usize,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    #[arg(long, default_value = "left-fold")]
    pub mode: String,
}

/// Parses arguments and runs, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn run<W: Write>(cli: Cli, out: &mut W) -> Result<()> {
    match cli.command {
        Command::Generate(args) => cmd_generate(&args, out),
        Command::Train(args) => cmd_train(&args, out),
        Command::Eval(args) => cmd_eval(&args, out),
        Command::Fuse(args) => cmd_fuse(&args, out),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn cmd_generate<W: Write>(args: &GenerateArgs, out: &mut W) -> Result<()> {
    let spec = args.spec();
    let dataset = data::generate(&spec)?;
    create_dir(&args.out)?;
    for split in Split::LABELED {
        let mut buf = Vec::new();
        dataset.write_csv(&mut buf, Some(split))?;
        write_file(&args.out.join(format!("{split}.csv")), buf)?;
    }
    write_file(&args.out.join(SPEC_FILE), serde_json::to_string_pretty(&spec)?)?;
    writeln!(
        out,
        "wrote {} train / {} val / {} test samples ({} classes) to {}",
        dataset.count(Split::Train),
        dataset.count(Split::Val),
        dataset.count(Split::Test),
        spec.num_classes,
        args.out.display()
    )?;
    Ok(())
}

/// A dataset plus the view layout needed to build a model for it.
pub struct LoadedData {
    pub dataset: Dataset,
    pub spec: Option<SyntheticSpec>,
}

pub fn load_dataset(path: &Path) -> Result<LoadedData> {
    if path.is_file() {
        return Ok(LoadedData {
            dataset: data::load_csv(path)?,
            spec: None,
        });
    }
    if !path.is_dir() {
        return Err(Error::InvalidConfig(format!("dataset {} does not exist", path.display())));
    }
    let spec_path = path.join(SPEC_FILE);
    let spec: Option<SyntheticSpec> = if spec_path.is_file() {
        Some(serde_json::from_str(&fs::read_to_string(&spec_path)?)?)
    } else {
        None
    };
    let mut dataset = Dataset {
        num_classes: spec.as_ref().map_or(2, |s| s.num_classes),
        dim: spec.as_ref().map_or(0, SyntheticSpec::input_dim),
        samples: Vec::new(),
    };
    for split in Split::LABELED {
        let file = path.join(format!("{split}.csv"));
        if file.is_file() {
            dataset.extend(data::load_csv(&file)?)?;
        }
    }
    if dataset.samples.is_empty() {
        return Err(Error::InvalidConfig(format!("no samples found under {}", path.display())));
    }
    if let Some(s) = &spec {
        if dataset.dim != s.input_dim() || dataset.num_classes > s.num_classes {
            return Err(Error::InvalidConfig(format!(
                "{} disagrees with the CSV files (dim {}, {} classes)",
                SPEC_FILE, dataset.dim, dataset.num_classes
            )));
        }
        dataset.num_classes = s.num_classes;
    }
    Ok(LoadedData { dataset, spec })
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::InvalidConfig(format!("bad stage width `{w}`")))
        })
        .collect()
}

impl TrainArgs {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            lr0: self.lr0,
            poly_power: self.poly_power,
            gamma0: self.gamma0,
            batch_size: self.batch_size,
            seed: self.seed,
            stage_mask: self.stage_mask.parse::<StageMask>()?,
            fusion_mode: self.fusion_mode.parse::<FusionMode>()?,
            gamma_override: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    split: &'a str,
    accuracy: f64,
    kappa: f64,
}

fn metrics_rows(model: &ToyHybridModel, dataset: &Dataset) -> Result<Vec<(String, Evaluation)>> {
    let mut rows = Vec::new();
    for split in Split::LABELED {
        let samples: Vec<&Sample> = dataset.split(split).collect();
        if !samples.is_empty() {
            rows.push((split.to_string(), evaluate(model, &samples)?));
        }
    }
    Ok(rows)
}

/// `split,accuracy,kappa`: fused rows per split, then each branch head's rows.
fn write_metrics_csv(path: &Path, rows: &[(String, Evaluation)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (split, e) in rows {
        w.serialize(MetricsRow {
            split,
            accuracy: e.fused.accuracy,
            kappa: e.fused.kappa,
        })?;
    }
    for (split, e) in rows {
        for (suffix, s) in [("local_head", e.local), ("global_head", e.global)] {
            w.serialize(MetricsRow {
                split: &format!("{split}_{suffix}"),
                accuracy: s.accuracy,
                kappa: s.kappa,
            })?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_file(path, bytes)
}

pub fn cmd_train<W: Write>(args: &TrainArgs, out: &mut W) -> Result<()> {
    let cfg = args.train_config()?;
    let widths = parse_widths(&args.stage_widths)?;
    let loaded = load_dataset(&args.data)?;
    let dataset = &loaded.dataset;
    let dim_local = match (&loaded.spec, args.dim_local) {
        (_, Some(d)) => d,
        (Some(spec), None) => spec.dim_local,
        (None, None) => {
            return Err(Error::InvalidConfig(
                "--dim-local is required when the dataset has no spec.json".into(),
            ))
        }
    };
    if dim_local == 0 || dim_local >= dataset.dim {
        return Err(Error::InvalidConfig(format!(
            "dim_local {dim_local} must split the {} input columns",
            dataset.dim
        )));
    }
    let model_config = ModelConfig::two_view(dataset.num_classes, dim_local, dataset.dim - dim_local, widths);
    let model = training::init_model(model_config, &cfg)?;
    let outcome = training::train(model, dataset, &cfg)?;

    create_dir(&args.out)?;
    let ckpt = outcome.best_checkpoint(&cfg, dataset)?;
    write_file(&args.out.join(CHECKPOINT_FILE), ckpt.to_json()?)?;
    let mut log = Vec::new();
    training::write_loss_log(&mut log, &outcome.log)?;
    write_file(&args.out.join(LOSS_LOG_FILE), log)?;
    let rows = metrics_rows(&outcome.best_model, dataset)?;
    write_metrics_csv(&args.out.join(METRICS_FILE), &rows)?;

    writeln!(out, "best epoch: {}", outcome.best_epoch)?;
    for (split, e) in &rows {
        writeln!(
            out,
            "{split}: accuracy {:.4} kappa {:.4} (local head {:.4}, global head {:.4})",
            e.fused.accuracy, e.fused.kappa, e.local.accuracy, e.global.accuracy
        )?;
    }
    Ok(())
}

pub fn cmd_eval<W: Write>(args: &EvalArgs, out: &mut W) -> Result<()> {
    let text = fs::read_to_string(&args.checkpoint)?;
    let ckpt = Checkpoint::from_json(&text)?;
    let model = ToyHybridModel::from_checkpoint(&ckpt)?;
    let loaded = load_dataset(&args.data)?;
    let dataset = &loaded.dataset;
    let cfg = model.config();
    if dataset.dim != cfg.input_dim() || dataset.num_classes != cfg.num_classes {
        return Err(Error::InvalidConfig(format!(
            "checkpoint expects {} inputs and {} classes; dataset has {} inputs and {} classes",
            cfg.input_dim(),
            cfg.num_classes,
            dataset.dim,
            dataset.num_classes
        )));
    }

    create_dir(&args.out)?;
    let rows = metrics_rows(&model, dataset)?;
    write_metrics_csv(&args.out.join(METRICS_FILE), &rows)?;
    for (split, e) in &rows {
        for (name, value) in [("accuracy", e.fused.accuracy), ("kappa", e.fused.kappa)] {
            if let Some(&recorded) = ckpt.metrics.get(&format!("{split}_{name}")) {
                if recorded != value {
                    return Err(Error::InvalidConfig(format!(
                        "{split} {name} {value} differs from recorded {recorded}"
                    )));
                }
            }
        }
        writeln!(out, "{split}: accuracy {:.4} kappa {:.4}", e.fused.accuracy, e.fused.kappa)?;
    }

    let test: Vec<&[f64]> = dataset.split(Split::Test).map(|s| s.x.as_slice()).collect();
    let ood_samples = if args.ood > 0 {
        let spec = loaded.spec.as_ref().ok_or_else(|| {
            Error::InvalidConfig("--ood needs a dataset directory with spec.json".into())
        })?;
        data::sample_ood(spec, args.ood)?
    } else {
        Vec::new()
    };
    let ood: Vec<&[f64]> = ood_samples.iter().map(|s| s.x.as_slice()).collect();
    let report = uncertainty_report(&model, &test, &ood)?;

    let mut buf = Vec::new();
    report.in_distribution.write_csv(&mut buf)?;
    write_file(&args.out.join("uncertainty_test.csv"), buf)?;
    if !ood.is_empty() {
        let mut buf = Vec::new();
        report.ood.write_csv(&mut buf)?;
        write_file(&args.out.join("uncertainty_ood.csv"), buf)?;
    }
    let mut buf = Vec::new();
    report.write_histogram_csv(&mut buf)?;
    write_file(&args.out.join("uncertainty_hist.csv"), buf)?;

    for label in report.in_distribution.values.keys() {
        let id = report.in_distribution.mean(*label).unwrap_or(f64::NAN);
        match report.ood.mean(*label) {
            Some(o) => writeln!(out, "mean u {label}: test {id:.4} ood {o:.4}")?,
            None => writeln!(out, "mean u {label}: test {id:.4}")?,
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct FusedReport {
    pub alpha: Vec<f64>,
    pub base_rate: Vec<f64>,
    pub belief: Vec<f64>,
    pub uncertainty: f64,
    pub strength: f64,
    pub projected_probability: Vec<f64>,
    pub predicted_class: usize,
}

impl From<&DirichletOpinion> for FusedReport {
    fn from(m: &DirichletOpinion) -> Self {
        Self {
            alpha: m.alpha().to_vec(),
            base_rate: m.base_rate().to_vec(),
            belief: m.belief(),
            uncertainty: m.uncertainty(),
            strength: m.strength(),
            projected_probability: m.projected_probability(),
            predicted_class: m.predicted_class(),
        }
    }
}

pub fn cmd_fuse<W: Write>(args: &FuseArgs, out: &mut W) -> Result<()> {
    let mode: FusionMode = args.mode.parse()?;
    let mut opinions = Vec::with_capacity(args.files.len());
    for path in &args.files {
        let text = fs::read_to_string(path)?;
        let record: OpinionRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            detail: e.to_string(),
        })?;
        record.source_tag()?;
        opinions.push(record.to_opinion()?);
    }
    let fused = fuse(mode, &opinions)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&FusedReport::from(&fused))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> Result<String> {
        let cli = Cli::try_parse_from(std::iter::once("evifuse").chain(args.iter().copied()))
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut buf = Vec::new();
        run(cli, &mut buf)?;
        Ok(String::from_utf8(buf).unwrap())
    }

    #[test]
    fn fuse_worked_example() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        fs::write(&a, r#"{"alpha":[2,1,1,1,1],"tag":"C3"}"#).unwrap();
        fs::write(&b, r#"{"alpha":[6,1,1,1,1],"tag":"C4"}"#).unwrap();
        let text = run_capture(&["fuse", a.to_str().unwrap(), b.to_str().unwrap()]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["alpha"], serde_json::json!([4.0, 1.0, 1.0, 1.0, 1.0]));
        assert_eq!(v["uncertainty"], serde_json::json!(0.625));
        assert_eq!(v["predicted_class"], serde_json::json!(0));
    }

    #[test]
    fn fuse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        let c = dir.path().join("c.json");
        fs::write(&a, r#"{"alpha":[2,1]}"#).unwrap();
        fs::write(&b, r#"{"alpha":[2,1,1]}"#).unwrap();
        fs::write(&c, r#"{"alpha":[2,1"#).unwrap();
        let e = run_capture(&["fuse", a.to_str().unwrap(), b.to_str().unwrap()]).unwrap_err();
        assert!(matches!(e, Error::DimensionMismatch { .. }));
        let e = run_capture(&["fuse", c.to_str().unwrap()]).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
        let e = run_capture(&["fuse", a.to_str().unwrap(), "--mode", "median"]).unwrap_err();
        assert!(e.is_validation());
    }

    #[test]
    fn generate_validates_flags() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        let e = run_capture(&["generate", "--out", out.to_str().unwrap(), "--complementarity", "2.0"]).unwrap_err();
        assert!(e.is_validation());
        assert!(!out.exists());
    }

    #[test]
    fn widths_parse() {
        assert_eq!(parse_widths("4, 8,2").unwrap(), vec![4, 8, 2]);
        assert!(parse_widths("4,0").is_err());
        assert!(parse_widths("a").is_err());
    }
}
