//! The five-step training protocol and its outputs.
//!
//! Steps: (1) pretrain encoder + flux heads on synthetic data, MSE only;
//! (2) add the yield head, joint MSE; (3) continue on synthetic with knowledge
//! penalties and L2 enabled; (4) fine-tune on observed daily fluxes at a
//! reduced learning rate; (5) fine-tune yield on observed annual yields with
//! the encoder learning rate scaled down. Location-dependent-parameter models
//! run steps 4-5 once per region, all starting from the same synthetic
//! checkpoint; pooled models run them once on the union of the per-region
//! training splits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SplitFractions};
use crate::error::{Error, Result};
use crate::kgloss::{total_loss, LossBreakdown, LossWeights};
use crate::levels::AwarenessStrategy;
use crate::model::{self, AwarenessLevel, ModelConfig, ModelParams};
use crate::ndmath::RngStream;
use crate::pipeline::data::Dataset;
use crate::pipeline::optim::{adam_step, AdamHyper, AdamState};
use crate::pipeline::preprocess::{fit_normalizer, prepare_sample, NormStats, PreparedSample};
use crate::regions::{partition, RegionId};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Train/val/test indices into one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn split_indices(
    mut indexed_ids: Vec<(String, usize)>,
    fractions: &SplitFractions,
    rng: &mut RngStream,
) -> Splits {
    indexed_ids.sort();
    rng.shuffle(&mut indexed_ids);
    let n = indexed_ids.len();
    let n_train = ((n as f64) * fractions.train).floor() as usize;
    let n_val = ((n as f64) * fractions.val).floor() as usize;
    let idx: Vec<usize> = indexed_ids.into_iter().map(|(_, i)| i).collect();
    Splits {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    }
}

/// Deterministic per-region 70/15/15-style splits, seeded by
/// (base_seed, "split:<region>") so they are independent of dataset order.
pub fn region_splits(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<BTreeMap<RegionId, Splits>> {
    let buckets = partition(&dataset.samples, &cfg.regions)?;
    let base = RngStream::new(cfg.base_seed);
    let mut out = BTreeMap::new();
    for (region, indices) in buckets {
        let ids = indices
            .iter()
            .map(|&i| (dataset.samples[i].sample_id.clone(), i))
            .collect();
        let mut rng = base.derive(&format!("split:{region}"));
        out.insert(region, split_indices(ids, &cfg.splits, &mut rng));
    }
    Ok(out)
}

/// Pooled split over the whole synthetic pretraining dataset.
pub fn synthetic_splits(dataset: &Dataset, cfg: &ExperimentConfig) -> Splits {
    let ids = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.sample_id.clone(), i))
        .collect();
    let mut rng = RngStream::new(cfg.base_seed).derive("split:synthetic");
    split_indices(ids, &cfg.splits, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub step: u8,
    pub epoch: u32,
    pub train: LossBreakdown,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub params: ModelParams,
    pub norm: NormStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// A trained model family: one entry per region for level 3, a single
/// "pooled" entry otherwise, plus training history and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedBundle {
    pub format_version: u32,
    pub level: AwarenessLevel,
    pub entries: BTreeMap<String, BundleEntry>,
    pub history: BTreeMap<String, Vec<EpochRecord>>,
    pub provenance: Provenance,
}

struct StepSettings {
    step_no: u8,
    weights: LossWeights,
    hyper: AdamHyper,
    epochs: usize,
    patience: usize,
    batch_size: usize,
    encoder_lr_scale: Option<f64>,
}

/// Data-only validation metric: flux/yield weighted MSE, no penalties.
fn validation_mse(
    params: &ModelParams,
    val: &[&PreparedSample],
    weights: &LossWeights,
) -> Result<f64> {
    let mut acc = 0.0;
    for sample in val {
        let (pred, _) = model::forward(&sample.features, params)?;
        if weights.flux_weight > 0.0 {
            let mut se = 0.0;
            let mut n = 0usize;
            for t in 0..sample.mask.len() {
                if sample.mask[t] {
                    let da = pred.ra_hat[t] - sample.ra_norm[t];
                    let dr = pred.rh_hat[t] - sample.rh_norm[t];
                    se += da * da + dr * dr;
                    n += 2;
                }
            }
            if n > 0 {
                acc += weights.flux_weight * se / n as f64;
            }
        }
        if weights.yield_weight > 0.0 && sample.yield_observed {
            let d = pred.yield_hat - sample.yield_norm;
            acc += weights.yield_weight * d * d;
        }
    }
    Ok(acc / val.len().max(1) as f64)
}

fn run_step(
    params: &mut ModelParams,
    train: &[&PreparedSample],
    val: &[&PreparedSample],
    norm: &NormStats,
    settings: &StepSettings,
    shuffle_rng: &mut RngStream,
    history: &mut Vec<EpochRecord>,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config(format!("step {}: empty training split", settings.step_no)));
    }
    let lr_scale: Option<Vec<f64>> = settings.encoder_lr_scale.map(|scale| {
        params
            .block_kinds_flat()
            .iter()
            .map(|k| if k.is_encoder { scale } else { 1.0 })
            .collect()
    });
    let mut state = AdamState::new(params.n_params());
    let mut best_val = f64::INFINITY;
    let mut best_flat = params.flatten();
    let mut wait = 0usize;

    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut sums = LossBreakdown {
            total: 0.0,
            mse_flux: 0.0,
            mse_yield: 0.0,
            pen_nonneg: 0.0,
            pen_budget: 0.0,
            pen_response: 0.0,
            reg_l2: 0.0,
            n_observed_flux_days: 0,
        };
        let mut n_batches = 0usize;
        for batch_idx in order.chunks(settings.batch_size) {
            let batch: Vec<&PreparedSample> = batch_idx.iter().map(|&i| train[i]).collect();
            let (breakdown, grads) = total_loss(params, &batch, &settings.weights, norm)?;
            let mut flat = params.flatten();
            adam_step(
                &mut flat,
                &grads.flatten(),
                &mut state,
                &settings.hyper,
                lr_scale.as_deref(),
            )?;
            params.set_from_flat(&flat)?;

            sums.total += breakdown.total;
            sums.mse_flux += breakdown.mse_flux;
            sums.mse_yield += breakdown.mse_yield;
            sums.pen_nonneg += breakdown.pen_nonneg;
            sums.pen_budget += breakdown.pen_budget;
            sums.pen_response += breakdown.pen_response;
            sums.reg_l2 += breakdown.reg_l2;
            sums.n_observed_flux_days += breakdown.n_observed_flux_days;
            n_batches += 1;
        }
        let inv = 1.0 / n_batches as f64;
        let train_mean = LossBreakdown {
            total: sums.total * inv,
            mse_flux: sums.mse_flux * inv,
            mse_yield: sums.mse_yield * inv,
            pen_nonneg: sums.pen_nonneg * inv,
            pen_budget: sums.pen_budget * inv,
            pen_response: sums.pen_response * inv,
            reg_l2: sums.reg_l2 * inv,
            n_observed_flux_days: sums.n_observed_flux_days,
        };
        let val_mse = if val.is_empty() {
            train_mean.total
        } else {
            validation_mse(params, val, &settings.weights)?
        };
        history.push(EpochRecord {
            step: settings.step_no,
            epoch: epoch as u32,
            train: train_mean,
            val_mse,
        });

        if val_mse < best_val {
            best_val = val_mse;
            best_flat = params.flatten();
            wait = 0;
        } else {
            wait += 1;
            if wait >= settings.patience {
                break;
            }
        }
    }
    params.set_from_flat(&best_flat)?;
    Ok(())
}

fn prepare_all(dataset: &Dataset, norm: &NormStats) -> Result<Vec<PreparedSample>> {
    dataset
        .samples
        .iter()
        .zip(&dataset.targets)
        .map(|(s, t)| prepare_sample(s, t, norm))
        .collect()
}

fn select<'a>(prepared: &'a [PreparedSample], indices: &[usize]) -> Vec<&'a PreparedSample> {
    indices.iter().map(|&i| &prepared[i]).collect()
}

/// Run the full five-step protocol for one awareness strategy.
pub fn train_five_step(
    cfg: &ExperimentConfig,
    strategy: &dyn AwarenessStrategy,
    synthetic: &Dataset,
    observed: &Dataset,
) -> Result<TrainedBundle> {
    cfg.validate()?;
    if cfg.loss.flux_weight <= 0.0 || cfg.loss.yield_weight <= 0.0 {
        return Err(Error::Config(
            "the five-step protocol needs positive flux_weight and yield_weight".into(),
        ));
    }
    let layout = strategy.feature_layout();
    let model_cfg = ModelConfig {
        input_dim: layout.input_dim(),
        hidden_dim: cfg.model.hidden_dim,
        n_layers: cfg.model.n_layers,
        att_dim: cfg.model.att_dim,
        awareness_level: strategy.level(),
    };
    let base = RngStream::new(cfg.base_seed);
    let level_label = strategy.level().number();

    // Normalizer is fitted once, on the synthetic pretraining train split, and
    // shared by every entry of the bundle.
    let synth_splits = synthetic_splits(synthetic, cfg);
    let train_samples: Vec<_> = synth_splits.train.iter().map(|&i| &synthetic.samples[i]).collect();
    let train_targets: Vec<_> = synth_splits.train.iter().map(|&i| &synthetic.targets[i]).collect();
    let norm = fit_normalizer(layout, &train_samples, &train_targets)?;

    let synth_prepared = prepare_all(synthetic, &norm)?;
    let synth_train = select(&synth_prepared, &synth_splits.train);
    let synth_val = select(&synth_prepared, &synth_splits.val);

    let mut params = model::init_params(&model_cfg, &mut base.derive(&format!("init:level{level_label}")))?;
    let hyper = |lr| AdamHyper {
        lr,
        beta1: cfg.protocol.beta1,
        beta2: cfg.protocol.beta2,
        eps: cfg.protocol.eps,
    };
    let silent = LossWeights {
        lambda_nonneg: 0.0,
        lambda_budget: 0.0,
        lambda_response: 0.0,
        lambda_l2: 0.0,
        ..cfg.loss
    };

    let mut history: BTreeMap<String, Vec<EpochRecord>> = BTreeMap::new();
    let mut pretrain_history = Vec::new();

    let pretrain_steps = [
        StepSettings {
            step_no: 1,
            weights: LossWeights {
                yield_weight: 0.0,
                ..silent
            },
            hyper: hyper(cfg.protocol.lr_pretrain),
            epochs: cfg.protocol.epochs[0],
            patience: cfg.protocol.patience,
            batch_size: cfg.protocol.batch_size,
            encoder_lr_scale: None,
        },
        StepSettings {
            step_no: 2,
            weights: silent,
            hyper: hyper(cfg.protocol.lr_pretrain),
            epochs: cfg.protocol.epochs[1],
            patience: cfg.protocol.patience,
            batch_size: cfg.protocol.batch_size,
            encoder_lr_scale: None,
        },
        StepSettings {
            step_no: 3,
            weights: cfg.loss,
            hyper: hyper(cfg.protocol.lr_pretrain),
            epochs: cfg.protocol.epochs[2],
            patience: cfg.protocol.patience,
            batch_size: cfg.protocol.batch_size,
            encoder_lr_scale: None,
        },
    ];
    for settings in &pretrain_steps {
        let mut rng = base.derive(&format!("shuffle:level{level_label}:step{}", settings.step_no));
        run_step(
            &mut params,
            &synth_train,
            &synth_val,
            &norm,
            settings,
            &mut rng,
            &mut pretrain_history,
        )?;
    }
    history.insert("pretrain".to_string(), pretrain_history);

    // Observed fine-tuning, per entry.
    let observed_splits = region_splits(observed, cfg)?;
    let observed_prepared = prepare_all(observed, &norm)?;

    let mut entries = BTreeMap::new();
    for key in strategy.entry_keys(&cfg.regions) {
        let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = if strategy.level().location_dependent_params() {
            let region = RegionId::new(key.clone());
            let splits = observed_splits.get(&region).ok_or_else(|| {
                Error::Config(format!("region {region} has no observed samples to fine-tune on"))
            })?;
            (splits.train.clone(), splits.val.clone())
        } else {
            // Union of per-region train splits, so pooled and regional models
            // see identical training samples.
            let mut train = Vec::new();
            let mut val = Vec::new();
            for splits in observed_splits.values() {
                train.extend_from_slice(&splits.train);
                val.extend_from_slice(&splits.val);
            }
            (train, val)
        };
        let obs_train = select(&observed_prepared, &train_idx);
        let obs_val = select(&observed_prepared, &val_idx);

        let mut entry_params = params.clone();
        entry_params.region_tag = strategy
            .level()
            .location_dependent_params()
            .then(|| RegionId::new(key.clone()));

        let mut entry_history = Vec::new();
        let finetune_steps = [
            StepSettings {
                step_no: 4,
                weights: LossWeights {
                    yield_weight: 0.0,
                    ..cfg.loss
                },
                hyper: hyper(cfg.protocol.lr_finetune_flux),
                epochs: cfg.protocol.epochs[3],
                patience: cfg.protocol.patience,
                batch_size: cfg.protocol.batch_size,
                encoder_lr_scale: None,
            },
            StepSettings {
                step_no: 5,
                weights: LossWeights {
                    flux_weight: 0.0,
                    ..cfg.loss
                },
                hyper: hyper(cfg.protocol.lr_finetune_yield),
                epochs: cfg.protocol.epochs[4],
                patience: cfg.protocol.patience,
                batch_size: cfg.protocol.batch_size,
                encoder_lr_scale: Some(cfg.protocol.encoder_lr_multiplier),
            },
        ];
        for settings in &finetune_steps {
            let mut rng = base.derive(&format!(
                "shuffle:level{level_label}:step{}:{key}",
                settings.step_no
            ));
            run_step(
                &mut entry_params,
                &obs_train,
                &obs_val,
                &norm,
                settings,
                &mut rng,
                &mut entry_history,
            )?;
        }
        history.insert(key.clone(), entry_history);
        entries.insert(
            key,
            BundleEntry {
                params: entry_params,
                norm: norm.clone(),
            },
        );
    }

    Ok(TrainedBundle {
        format_version: BUNDLE_FORMAT_VERSION,
        level: strategy.level(),
        entries,
        history,
        provenance: Provenance {
            config_hash: cfg.hash(),
            seed: cfg.base_seed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levels::strategy_named;
    use crate::pipeline::data::Manifest;
    use crate::synthgen::{self, GenerateOptions};

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.generator.n_samples = 8;
        cfg.generator.n_days = 20;
        cfg.model.hidden_dim = 6;
        cfg.model.att_dim = 4;
        cfg.model.n_layers = 1;
        cfg.protocol.epochs = [3, 2, 2, 3, 2];
        cfg.protocol.batch_size = 4;
        cfg
    }

    fn make_dataset(cfg: &ExperimentConfig, label: &str) -> Dataset {
        let base = RngStream::new(cfg.base_seed).derive(label);
        let mut samples = Vec::new();
        let mut targets = Vec::new();
        let mut origin = BTreeMap::new();
        for (region, preset) in &cfg.generator.presets {
            let rng = base.derive(&format!("region:{region}"));
            let (s, t) = synthgen::generate_region_dataset(
                region,
                preset,
                &cfg.regions,
                GenerateOptions {
                    n_samples: cfg.generator.n_samples,
                    n_days: cfg.generator.n_days,
                    flux_observed_frac: 1.0,
                },
                &rng,
            )
            .unwrap();
            for sample in &s {
                origin.insert(sample.sample_id.clone(), region.clone());
            }
            samples.extend(s);
            targets.extend(t);
        }
        Dataset {
            samples,
            targets,
            manifest: Manifest {
                schema_version: 1,
                seed: cfg.base_seed,
                presets: cfg.generator.presets.clone(),
                region_of_origin: origin,
            },
        }
    }

    #[test]
    fn splits_are_deterministic_and_disjoint() {
        let cfg = tiny_config();
        let ds = make_dataset(&cfg, "observed");
        let a = region_splits(&ds, &cfg).unwrap();
        let b = region_splits(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        for splits in a.values() {
            let mut all: Vec<usize> = splits
                .train
                .iter()
                .chain(&splits.val)
                .chain(&splits.test)
                .cloned()
                .collect();
            let n = all.len();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), n);
            assert!(!splits.train.is_empty() && !splits.test.is_empty());
        }
    }

    #[test]
    fn level3_bundle_has_one_entry_per_region_sharing_ancestry() {
        let cfg = tiny_config();
        let synth = make_dataset(&cfg, "synthetic");
        let obs = make_dataset(&cfg, "observed");
        let bundle = train_five_step(&cfg, strategy_named("3").unwrap(), &synth, &obs).unwrap();
        assert_eq!(bundle.entries.len(), 3);
        let keys: Vec<&String> = bundle.entries.keys().collect();
        assert_eq!(keys, vec!["illinois", "indiana", "iowa"]);
        for (key, entry) in &bundle.entries {
            assert_eq!(entry.params.region_tag.as_ref().unwrap().as_str(), key);
        }
        // Shared pretraining: all entries carry the same normalizer and the
        // history holds exactly one pretrain record set.
        let norms: Vec<&NormStats> = bundle.entries.values().map(|e| &e.norm).collect();
        assert!(norms.windows(2).all(|w| w[0] == w[1]));
        assert!(bundle.history.contains_key("pretrain"));
    }

    #[test]
    fn pooled_bundle_has_single_untagged_entry() {
        let cfg = tiny_config();
        let synth = make_dataset(&cfg, "synthetic");
        let obs = make_dataset(&cfg, "observed");
        for level in ["1", "2"] {
            let bundle =
                train_five_step(&cfg, strategy_named(level).unwrap(), &synth, &obs).unwrap();
            assert_eq!(bundle.entries.len(), 1);
            let entry = &bundle.entries["pooled"];
            assert!(entry.params.region_tag.is_none());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let synth = make_dataset(&cfg, "synthetic");
        let obs = make_dataset(&cfg, "observed");
        let s = strategy_named("1").unwrap();
        let a = train_five_step(&cfg, s, &synth, &obs).unwrap();
        let b = train_five_step(&cfg, s, &synth, &obs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step1_training_loss_trends_down() {
        let mut cfg = tiny_config();
        cfg.protocol.epochs = [6, 1, 1, 1, 1];
        let synth = make_dataset(&cfg, "synthetic");
        let obs = make_dataset(&cfg, "observed");
        let bundle = train_five_step(&cfg, strategy_named("1").unwrap(), &synth, &obs).unwrap();
        let step1: Vec<f64> = bundle.history["pretrain"]
            .iter()
            .filter(|r| r.step == 1)
            .map(|r| r.train.total)
            .collect();
        assert!(step1.len() >= 5);
        let mut upticks = 0;
        for w in step1.windows(2).take(5) {
            if w[1] > w[0] {
                upticks += 1;
            }
        }
        assert!(upticks <= 1, "step-1 losses: {step1:?}");
        assert!(step1.last().unwrap() < step1.first().unwrap());
    }

    #[test]
    fn missing_region_split_names_region_at_level3() {
        let cfg = tiny_config();
        let synth = make_dataset(&cfg, "synthetic");
        let mut obs = make_dataset(&cfg, "observed");
        // Drop every iowa sample from the observed set.
        let keep: Vec<usize> = (0..obs.samples.len())
            .filter(|&i| !obs.samples[i].sample_id.starts_with("iowa"))
            .collect();
        obs.samples = keep.iter().map(|&i| obs.samples[i].clone()).collect();
        obs.targets = keep.iter().map(|&i| obs.targets[i].clone()).collect();
        let err = train_five_step(&cfg, strategy_named("3").unwrap(), &synth, &obs).unwrap_err();
        assert!(err.to_string().contains("iowa"), "{err}");
    }

    #[test]
    fn overfits_tiny_noiseless_dataset() {
        let mut cfg = tiny_config();
        for preset in cfg.generator.presets.values_mut() {
            preset.noise_sigma = 0.0;
        }
        cfg.generator.n_samples = 2;
        cfg.generator.n_days = 15;
        cfg.protocol.epochs = [400, 5, 5, 400, 5];
        cfg.protocol.patience = 1000;
        cfg.protocol.batch_size = 6;
        cfg.protocol.lr_pretrain = 3e-3;
        cfg.protocol.lr_finetune_flux = 3e-3;
        let synth = make_dataset(&cfg, "synthetic");
        let obs = make_dataset(&cfg, "observed");
        let bundle = train_five_step(&cfg, strategy_named("1").unwrap(), &synth, &obs).unwrap();
        // Normalized targets have unit variance on the fit split, so an
        // overfit model drives normalized flux MSE well below 0.01.
        let last_step4 = bundle.history["pooled"]
            .iter()
            .filter(|r| r.step == 4)
            .next_back()
            .unwrap();
        assert!(
            last_step4.train.mse_flux < 0.01,
            "final step-4 flux MSE {}",
            last_step4.train.mse_flux
        );
    }
}
