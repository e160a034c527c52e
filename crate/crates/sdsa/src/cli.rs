//! Command implementations behind the `sdsa` binary. Each command is a plain
//! function so integration tests can drive the pipeline without spawning a
//! process.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::levels::strategy_named;
use crate::ndmath::RngStream;
use crate::pipeline::bundle::{load_bundle, save_bundle};
use crate::pipeline::data::{atomic_write, Dataset, Manifest, SCHEMA_VERSION};
use crate::pipeline::eval::{cross_region_matrix, summarize, MetricsFile, TestSet};
use crate::pipeline::train::{region_splits, train_five_step, TrainedBundle};
use crate::regions::RegionId;
use crate::synthgen::{generate_region_dataset, GenerateOptions};

pub const SYNTHETIC_DIR: &str = "synthetic";
pub const OBSERVED_DIR: &str = "observed";

fn build_dataset(cfg: &ExperimentConfig, label: &str, flux_observed_frac: f64) -> Result<Dataset> {
    let base = RngStream::new(cfg.base_seed).derive(label);
    let mut samples = Vec::new();
    let mut targets = Vec::new();
    let mut region_of_origin = BTreeMap::new();
    for (region, preset) in &cfg.generator.presets {
        let rng = base.derive(&format!("region:{region}"));
        let (s, t) = generate_region_dataset(
            region,
            preset,
            &cfg.regions,
            GenerateOptions {
                n_samples: cfg.generator.n_samples,
                n_days: cfg.generator.n_days,
                flux_observed_frac,
            },
            &rng,
        )?;
        for sample in &s {
            region_of_origin.insert(sample.sample_id.clone(), region.clone());
        }
        samples.extend(s);
        targets.extend(t);
    }
    Ok(Dataset {
        samples,
        targets,
        manifest: Manifest {
            schema_version: SCHEMA_VERSION,
            seed: cfg.base_seed,
            presets: cfg.generator.presets.clone(),
            region_of_origin,
        },
    })
}

/// Both draws of one experiment: a fully observed synthetic pretraining set
/// and an independently noised "observed" set with the configured flux mask.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let synthetic = build_dataset(cfg, "synthetic", 1.0)?;
    let observed = build_dataset(cfg, "observed", cfg.generator.flux_observed_frac)?;
    Ok((synthetic, observed))
}

pub fn cmd_gen(config_path: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        cfg.base_seed = seed;
    }
    let (synthetic, observed) = build_datasets(&cfg)?;
    synthetic.write(&out_dir.join(SYNTHETIC_DIR))?;
    observed.write(&out_dir.join(OBSERVED_DIR))?;
    Ok(())
}

fn load_experiment_data(cfg: &ExperimentConfig, data_dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut synthetic = Dataset::load(&data_dir.join(SYNTHETIC_DIR))?;
    let mut observed = Dataset::load(&data_dir.join(OBSERVED_DIR))?;
    for sample in synthetic.samples.iter_mut().chain(observed.samples.iter_mut()) {
        crate::pipeline::data::interpolate_gaps(sample, cfg.preprocess.max_gap)?;
    }
    Ok((synthetic, observed))
}

pub fn cmd_train(config_path: &Path, data_dir: &Path, level: &str, out_dir: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let strategy = strategy_named(level)?;
    let (synthetic, observed) = load_experiment_data(&cfg, data_dir)?;
    let bundle = train_five_step(&cfg, strategy, &synthetic, &observed)?;
    save_bundle(&bundle, out_dir)
}

/// Evaluate bundles on the per-region held-out test splits of the observed
/// dataset and write the metrics file.
pub fn cmd_eval(
    config_path: &Path,
    data_dir: &Path,
    bundle_dirs: &[&Path],
    out_path: &Path,
) -> Result<()> {
    if bundle_dirs.is_empty() {
        return Err(Error::Usage("eval needs at least one --bundle".into()));
    }
    let cfg = ExperimentConfig::load(config_path)?;
    let (_, observed) = load_experiment_data(&cfg, data_dir)?;
    let bundles: Vec<TrainedBundle> = bundle_dirs
        .iter()
        .map(|dir| load_bundle(dir))
        .collect::<Result<_>>()?;
    let metrics = evaluate_on_test_splits(&cfg, &observed, &bundles)?;
    write_metrics(&metrics, out_path)
}

pub fn evaluate_on_test_splits(
    cfg: &ExperimentConfig,
    observed: &Dataset,
    bundles: &[TrainedBundle],
) -> Result<MetricsFile> {
    let splits = region_splits(observed, cfg)?;
    let mut test_sets: BTreeMap<RegionId, TestSet<'_>> = BTreeMap::new();
    for (region, split) in &splits {
        let samples = split.test.iter().map(|&i| &observed.samples[i]).collect();
        let targets = split.test.iter().map(|&i| &observed.targets[i]).collect();
        test_sets.insert(region.clone(), (samples, targets));
    }
    let bundle_refs: Vec<&TrainedBundle> = bundles.iter().collect();
    let records = cross_region_matrix(&bundle_refs, &test_sets)?;
    Ok(summarize(&records))
}

pub fn write_metrics(metrics: &MetricsFile, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut text = serde_json::to_string_pretty(metrics)
        .map_err(|e| Error::Format(format!("serialize metrics: {e}")))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn load_metrics(path: &Path) -> Result<MetricsFile> {
    let text = std::fs::read_to_string(path)?;
    let metrics: MetricsFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if metrics.format_version != crate::pipeline::eval::METRICS_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: metrics format {} but this build reads {}",
            path.display(),
            metrics.format_version,
            crate::pipeline::eval::METRICS_FORMAT_VERSION
        )));
    }
    Ok(metrics)
}

/// Long-format CSV plus a per-region winners table, both derived purely from
/// the metrics file.
pub fn render_report(metrics: &MetricsFile) -> Result<(String, String)> {
    if metrics.records.is_empty() {
        return Err(Error::Data("metrics file has no records".into()));
    }
    let mut csv = String::from("source,test_region,target,mse\n");
    for rec in &metrics.records {
        let mut rows: Vec<(&str, f64)> = vec![("ra", rec.cell.mse_ra), ("rh", rec.cell.mse_rh)];
        if let Some(y) = rec.cell.mse_yield {
            rows.push(("yield", y));
        }
        for (target, value) in rows {
            csv.push_str(&format!("{},{},{},{}\n", rec.source, rec.test_region, target, value));
        }
    }

    let mut md = String::from("# Cross-region evaluation\n\n");
    md.push_str("Lowest-MSE source per test region and target:\n\n");
    md.push_str("| test_region | target | winner | mse |\n|---|---|---|---|\n");
    let mut regions: Vec<&RegionId> = metrics.records.iter().map(|r| &r.test_region).collect();
    regions.sort();
    regions.dedup();
    for region in &regions {
        for target in ["ra", "rh", "yield"] {
            let best = metrics
                .records
                .iter()
                .filter(|r| &&r.test_region == region)
                .filter_map(|r| {
                    let v = match target {
                        "ra" => Some(r.cell.mse_ra),
                        "rh" => Some(r.cell.mse_rh),
                        _ => r.cell.mse_yield,
                    }?;
                    Some((r.source.as_str(), v))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((source, v)) = best {
                md.push_str(&format!("| {region} | {target} | {source} | {v} |\n"));
            }
        }
    }
    if !metrics.summary.is_empty() {
        md.push_str("\nRegion-specific model vs every pooled model on its own region:\n\n");
        md.push_str("| region | beats pooled on ra | beats pooled on rh |\n|---|---|---|\n");
        for (region, s) in &metrics.summary {
            md.push_str(&format!(
                "| {region} | {} | {} |\n",
                s.beats_pooled_on_ra, s.beats_pooled_on_rh
            ));
        }
    }
    Ok((csv, md))
}

pub fn cmd_report(metrics_path: &Path, out_dir: &Path) -> Result<()> {
    let metrics = load_metrics(metrics_path)?;
    let (csv, md) = render_report(&metrics)?;
    std::fs::create_dir_all(out_dir)?;
    atomic_write(&out_dir.join("mse_by_source_and_region.csv"), csv.as_bytes())?;
    atomic_write(&out_dir.join("summary.md"), md.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::eval::{EvalRecord, MetricCell, METRICS_FORMAT_VERSION};

    fn cell(mse_ra: f64, mse_rh: f64, mse_yield: Option<f64>) -> MetricCell {
        MetricCell {
            mse_ra,
            mse_rh,
            mse_yield,
            r2_ra: Some(0.5),
            r2_rh: None,
            pearson_ra: None,
            pearson_rh: None,
            n_samples: 3,
        }
    }

    fn sample_metrics() -> MetricsFile {
        let records = vec![
            EvalRecord {
                source: "level1:pooled".into(),
                test_region: RegionId::new("iowa"),
                cell: cell(1.5, 2.25, Some(0.125)),
            },
            EvalRecord {
                source: "level3:iowa".into(),
                test_region: RegionId::new("iowa"),
                cell: cell(1.0, 1.0, Some(0.25)),
            },
        ];
        summarize(&records)
    }

    #[test]
    fn report_csv_matches_metrics_exactly() {
        let metrics = sample_metrics();
        let (csv, md) = render_report(&metrics).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 6); // 2 sources × 3 targets
        for rec in &metrics.records {
            for (target, value) in [
                ("ra", rec.cell.mse_ra),
                ("rh", rec.cell.mse_rh),
                ("yield", rec.cell.mse_yield.unwrap()),
            ] {
                let row = format!("{},{},{},{}", rec.source, rec.test_region, target, value);
                assert!(rows.contains(&row.as_str()), "missing {row}");
                let back: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
                assert_eq!(back, value);
            }
        }
        assert!(md.contains("| iowa | rh | level3:iowa | 1 |"), "{md}");
        assert!(md.contains("| iowa | yield | level1:pooled | 0.125 |"), "{md}");
    }

    #[test]
    fn empty_metrics_is_an_error_and_writes_nothing() {
        let metrics = MetricsFile {
            format_version: METRICS_FORMAT_VERSION,
            records: vec![],
            summary: BTreeMap::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.json");
        write_metrics(&metrics, &path).unwrap();
        let out = dir.path().join("report");
        assert!(cmd_report(&path, &out).is_err());
        assert!(!out.join("mse_by_source_and_region.csv").exists());
        assert!(!out.join("summary.md").exists());
    }

    #[test]
    fn metrics_round_trip_through_disk() {
        let metrics = sample_metrics();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.json");
        write_metrics(&metrics, &path).unwrap();
        assert_eq!(load_metrics(&path).unwrap(), metrics);
    }
}
