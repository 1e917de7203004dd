//! Mini-batch SGD over the total objective with polynomial learning-rate
//! decay, KL annealing and a linearly decaying branch/fusion weight.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, OneHotLabel};
use crate::metrics::{evaluate, Evaluation};
use crate::model::{Checkpoint, ModelConfig, StageMask, ToyHybridModel};
use crate::opinion::FusionMode;

const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub poly_power: f64,
    pub gamma0: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub stage_mask: StageMask,
    pub fusion_mode: FusionMode,
    /// Debug override pinning γ for every epoch (may be 0 or 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_override: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr0: 0.1,
            poly_power: 0.9,
            gamma0: 0.8,
            batch_size: 32,
            seed: 7,
            stage_mask: StageMask::last_stages(4, 2),
            fusion_mode: FusionMode::LeftFold,
            gamma_override: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return fail(format!("lr0 must be >= 0, got {}", self.lr0));
        }
        if !(self.poly_power.is_finite() && self.poly_power > 0.0) {
            return fail(format!("poly_power must be > 0, got {}", self.poly_power));
        }
        if !(self.gamma0 > 0.5 && self.gamma0 < 1.0) {
            return fail(format!("gamma0 must lie in (0.5, 1), got {}", self.gamma0));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if let Some(g) = self.gamma_override {
            if !(0.0..=1.0).contains(&g) {
                return fail(format!("gamma override must lie in [0, 1], got {g}"));
            }
        }
        Ok(())
    }
}

/// `lr0 · (1 − epoch/epochs)^power`
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * (1.0 - epoch as f64 / cfg.epochs as f64).powf(cfg.poly_power)
}

/// Linear decay from `γ₀` at the first epoch to `1 − γ₀` at the last.
pub fn gamma_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.gamma0;
    }
    cfg.gamma0 + (1.0 - 2.0 * cfg.gamma0) * epoch as f64 / (cfg.epochs - 1) as f64
}

fn effective_gamma(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.gamma_override.unwrap_or_else(|| gamma_schedule(epoch, cfg))
}

/// Builds a fresh model for `cfg`, seeded from `cfg.seed`.
pub fn init_model(mut model_config: ModelConfig, cfg: &TrainConfig) -> Result<ToyHybridModel> {
    model_config.stage_mask = cfg.stage_mask.clone();
    model_config.fusion_mode = cfg.fusion_mode;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ToyHybridModel::new(model_config, &mut rng)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub final_model: ToyHybridModel,
    /// Model with the best validation score.
    pub best_model: ToyHybridModel,
    pub best_epoch: usize,
    pub log: Vec<LossBreakdown>,
    /// Validation metrics of the best model.
    pub best_val: Evaluation,
}

impl TrainOutcome {
    /// Checkpoint of the best model with validation/test metrics recorded.
    pub fn best_checkpoint(&self, cfg: &TrainConfig, dataset: &Dataset) -> Result<Checkpoint> {
        let mut ckpt = self.best_model.to_checkpoint(cfg.seed);
        ckpt.training = Some(serde_json::to_value(cfg)?);
        ckpt.metrics.insert("best_epoch".into(), self.best_epoch as f64);
        for split in Split::LABELED {
            let samples: Vec<&Sample> = dataset.split(split).collect();
            if samples.is_empty() {
                continue;
            }
            let eval = evaluate(&self.best_model, &samples)?;
            ckpt.metrics.insert(format!("{split}_accuracy"), eval.fused.accuracy);
            ckpt.metrics.insert(format!("{split}_kappa"), eval.fused.kappa);
        }
        Ok(ckpt)
    }
}

/// Trains `model` on the train split, selecting the best epoch by validation
/// accuracy (ties: higher kappa, then the earlier epoch).
pub fn train(model: ToyHybridModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k = model.config().num_classes;
    if dataset.dim != model.config().input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.config().input_dim(),
            got: dataset.dim,
        });
    }
    let train_set: Vec<(&[f64], OneHotLabel)> = dataset
        .split(Split::Train)
        .map(|s| Ok((s.x.as_slice(), OneHotLabel::new(s.label, k)?)))
        .collect::<Result<_>>()?;
    if train_set.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let val: Vec<&Sample> = dataset.split(Split::Val).collect();
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut model = model;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ToyHybridModel, usize, Evaluation)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let gamma = effective_gamma(epoch, cfg);
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&[f64], OneHotLabel)> = chunk.iter().map(|&i| train_set[i]).collect();
            let (loss, grads) = model.backward(&batch, epoch, gamma).map_err(|e| match e {
                Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss {
                    term,
                    context: format!("epoch {epoch}, batch {batch_idx}"),
                },
                other => other,
            })?;
            let w = chunk.len() as f64;
            sums.l_ace += w * loss.l_ace;
            sums.l_kl += w * loss.l_kl;
            sums.l_con += w * loss.l_con;
            sums.l_ce_v += w * loss.l_ce_v;
            sums.l_ce_c += w * loss.l_ce_c;
            if lr != 0.0 {
                model.sgd_step(lr, &grads);
            }
            if !model.params().is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: "parameters",
                    context: format!("epoch {epoch}, batch {batch_idx}"),
                });
            }
        }
        let n = train_set.len() as f64;
        let lambda = crate::losses::annealing_coefficient(epoch);
        let mut entry = LossBreakdown {
            epoch,
            lambda_t: lambda,
            gamma,
            l_ace: sums.l_ace / n,
            l_kl: sums.l_kl / n,
            l_con: sums.l_con / n,
            l_ce_v: sums.l_ce_v / n,
            l_ce_c: sums.l_ce_c / n,
            ..LossBreakdown::default()
        };
        entry.l_ece = entry.l_ace + lambda * entry.l_kl;
        entry.l_tl = entry.l_ece + entry.l_con;
        entry.l_total = crate::losses::weighted_total(entry.l_tl, entry.l_ce_v, entry.l_ce_c, gamma);
        log.push(entry);

        let eval = evaluate(&model, &val)?;
        let better = match &best {
            None => true,
            Some((_, _, b)) => {
                eval.fused.accuracy > b.fused.accuracy
                    || (eval.fused.accuracy == b.fused.accuracy && eval.fused.kappa > b.fused.kappa)
            }
        };
        if better {
            best = Some((model.clone(), epoch, eval));
        }
    }

    let (best_model, best_epoch, best_val) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        best_epoch,
        log,
        best_val,
    })
}

/// Writes the per-epoch loss log with the fixed column order.
pub fn write_loss_log<W: std::io::Write>(out: W, log: &[LossBreakdown]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LossBreakdown::CSV_HEADER)?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            e.lambda_t.to_string(),
            e.gamma.to_string(),
            e.l_ace.to_string(),
            e.l_kl.to_string(),
            e.l_ece.to_string(),
            e.l_con.to_string(),
            e.l_tl.to_string(),
            e.l_ce_v.to_string(),
            e.l_ce_c.to_string(),
            e.l_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_values() {
        let cfg = TrainConfig {
            epochs: 500,
            lr0: 0.001,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.001);
        let last = lr_schedule(499, &cfg);
        assert!((last - 0.001 * (1.0f64 / 500.0).powf(0.9)).abs() < 1e-18);
        let linear = TrainConfig {
            poly_power: 1.0,
            epochs: 100,
            ..cfg
        };
        assert!((lr_schedule(50, &linear) - 0.0005).abs() < 1e-18);
    }

    #[test]
    fn gamma_schedule_values() {
        let cfg = TrainConfig {
            epochs: 11,
            gamma0: 0.8,
            ..TrainConfig::default()
        };
        assert_eq!(gamma_schedule(0, &cfg), 0.8);
        assert!((gamma_schedule(10, &cfg) - 0.2).abs() < 1e-15);
        assert!((gamma_schedule(5, &cfg) - 0.5).abs() < 1e-15);
        let single = TrainConfig { epochs: 1, ..cfg };
        assert_eq!(gamma_schedule(0, &single), 0.8);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                gamma0: 0.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                gamma0: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr0: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                gamma_override: Some(1.5),
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
