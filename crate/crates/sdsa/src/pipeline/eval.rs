//! Cross-region evaluation: per-cell metrics in physical units and the
//! train-source × test-region matrix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model;
use crate::pipeline::data::{SampleSeries, TargetSeries};
use crate::pipeline::preprocess::prepare_sample;
use crate::pipeline::train::{BundleEntry, TrainedBundle};
use crate::regions::RegionId;

pub const METRICS_FORMAT_VERSION: u32 = 1;

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n as f64
}

/// R² about the test-set mean; `None` when SST = 0 (constant targets).
pub fn r_squared(pred: &[f64], target: &[f64]) -> Option<f64> {
    let n = target.len();
    if n == 0 {
        return None;
    }
    let mean = target.iter().sum::<f64>() / n as f64;
    let sst: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if sst == 0.0 {
        return None;
    }
    let sse: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Some(1.0 - sse / sst)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(pred: &[f64], target: &[f64]) -> Option<f64> {
    let n = pred.len();
    if n == 0 {
        return None;
    }
    let mx = pred.iter().sum::<f64>() / n as f64;
    let my = target.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in pred.iter().zip(target) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub mse_ra: f64,
    pub mse_rh: f64,
    pub mse_yield: Option<f64>,
    pub r2_ra: Option<f64>,
    pub r2_rh: Option<f64>,
    pub pearson_ra: Option<f64>,
    pub pearson_rh: Option<f64>,
    pub n_samples: usize,
}

/// Evaluate one bundle entry on a test set, in physical units, over observed
/// days only. Yield metrics cover only samples with observed yield.
pub fn evaluate(
    entry: &BundleEntry,
    samples: &[&SampleSeries],
    targets: &[&TargetSeries],
) -> Result<MetricCell> {
    if samples.len() != targets.len() {
        return Err(Error::Shape(format!(
            "evaluate: {} samples vs {} targets",
            samples.len(),
            targets.len()
        )));
    }
    let mut ra_pred = Vec::new();
    let mut ra_true = Vec::new();
    let mut rh_pred = Vec::new();
    let mut rh_true = Vec::new();
    let mut yield_pred = Vec::new();
    let mut yield_true = Vec::new();
    for (sample, target) in samples.iter().zip(targets) {
        let prepared = prepare_sample(sample, target, &entry.norm)?;
        let (pred, _) = model::forward(&prepared.features, &entry.params)?;
        for t in 0..target.mask.len() {
            if target.mask[t] {
                ra_pred.push(entry.norm.denorm_ra(pred.ra_hat[t]));
                ra_true.push(target.ra[t]);
                rh_pred.push(entry.norm.denorm_rh(pred.rh_hat[t]));
                rh_true.push(target.rh[t]);
            }
        }
        if target.yield_observed {
            yield_pred.push(entry.norm.denorm_yield(pred.yield_hat));
            yield_true.push(target.yield_target);
        }
    }
    if ra_true.is_empty() {
        return Err(Error::Data("evaluate: test set has no observed flux days".into()));
    }
    Ok(MetricCell {
        mse_ra: mse(&ra_pred, &ra_true),
        mse_rh: mse(&rh_pred, &rh_true),
        mse_yield: (!yield_true.is_empty()).then(|| mse(&yield_pred, &yield_true)),
        r2_ra: r_squared(&ra_pred, &ra_true),
        r2_rh: r_squared(&rh_pred, &rh_true),
        pearson_ra: pearson(&ra_pred, &ra_true),
        pearson_rh: pearson(&rh_pred, &rh_true),
        n_samples: samples.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub source: String,
    pub test_region: RegionId,
    #[serde(flatten)]
    pub cell: MetricCell,
}

/// One test set: parallel sample/target index views into a dataset.
pub type TestSet<'a> = (Vec<&'a SampleSeries>, Vec<&'a TargetSeries>);

/// Every model source (each bundle entry) evaluated on every region's test
/// set. Sources are named `level<N>:<entry>`, e.g. `level1:pooled`,
/// `level3:iowa`. Records are sorted by (source, test_region).
pub fn cross_region_matrix(
    bundles: &[&TrainedBundle],
    test_sets: &BTreeMap<RegionId, TestSet<'_>>,
) -> Result<Vec<EvalRecord>> {
    if test_sets.is_empty() {
        return Err(Error::Config("cross_region_matrix: no test sets".into()));
    }
    let mut records = Vec::new();
    for bundle in bundles {
        for (key, entry) in &bundle.entries {
            let source = format!("level{}:{key}", bundle.level.number());
            for (region, (samples, targets)) in test_sets {
                records.push(EvalRecord {
                    source: source.clone(),
                    test_region: region.clone(),
                    cell: evaluate(entry, samples, targets)?,
                });
            }
        }
    }
    records.sort_by(|a, b| (&a.source, &a.test_region).cmp(&(&b.source, &b.test_region)));
    Ok(records)
}

/// Per-region comparison of the region-specific model against every pooled
/// source, on that region's own test column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub beats_pooled_on_ra: bool,
    pub beats_pooled_on_rh: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub format_version: u32,
    pub records: Vec<EvalRecord>,
    /// Present only for regions that have both a region-specific source and
    /// at least one pooled source in `records`.
    pub summary: BTreeMap<RegionId, RegionSummary>,
}

pub fn summarize(records: &[EvalRecord]) -> MetricsFile {
    let mut summary = BTreeMap::new();
    let regions: Vec<RegionId> = {
        let mut r: Vec<RegionId> = records.iter().map(|rec| rec.test_region.clone()).collect();
        r.sort();
        r.dedup();
        r
    };
    for region in regions {
        let own = records.iter().find(|rec| {
            rec.test_region == region && rec.source == format!("level3:{region}")
        });
        let pooled: Vec<&EvalRecord> = records
            .iter()
            .filter(|rec| rec.test_region == region && rec.source.ends_with(":pooled"))
            .collect();
        if let (Some(own), false) = (own, pooled.is_empty()) {
            summary.insert(
                region,
                RegionSummary {
                    beats_pooled_on_ra: pooled.iter().all(|p| own.cell.mse_ra < p.cell.mse_ra),
                    beats_pooled_on_rh: pooled.iter().all(|p| own.cell.mse_rh < p.cell.mse_rh),
                },
            );
        }
    }
    MetricsFile {
        format_version: METRICS_FORMAT_VERSION,
        records: records.to_vec(),
        summary,
    }
}
