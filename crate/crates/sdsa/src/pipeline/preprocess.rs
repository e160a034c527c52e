//! Feature layout and Z-normalization. Statistics are always fitted on a
//! training split and applied unchanged everywhere else.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AwarenessLevel;
use crate::ndmath::Vector;
use crate::pipeline::data::{SampleSeries, TargetSeries};

const BASE_FEATURES: [&str; 7] = [
    "t_air_c",
    "srad_mj",
    "precip_mm",
    "moisture_frac",
    "gpp",
    "clay_frac",
    "om_pct",
];
const LOCATION_FEATURES: [&str; 2] = ["lat", "lon"];

/// Index of the air-temperature feature, needed by the response penalty.
pub const TEMP_FEATURE_INDEX: usize = 0;
/// Index of the GPP driver within the feature vector.
pub const GPP_FEATURE_INDEX: usize = 4;

/// Per-day feature ordering. Levels 1 and 3 exclude lat/lon; level 2 appends
/// them after the static soil fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub includes_location: bool,
}

impl FeatureLayout {
    pub fn for_level(level: AwarenessLevel) -> Self {
        Self {
            includes_location: level.includes_location_features(),
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = BASE_FEATURES.to_vec();
        if self.includes_location {
            names.extend(LOCATION_FEATURES);
        }
        names
    }

    pub fn input_dim(&self) -> usize {
        BASE_FEATURES.len() + if self.includes_location { 2 } else { 0 }
    }

    /// Physical-unit feature vectors, one per day, statics broadcast.
    pub fn raw_features(&self, sample: &SampleSeries) -> Vec<Vector> {
        sample
            .days
            .iter()
            .map(|d| {
                let mut v = vec![
                    d.t_air_c,
                    d.srad_mj,
                    d.precip_mm,
                    d.moisture_frac,
                    d.gpp,
                    sample.clay_frac,
                    sample.om_pct,
                ];
                if self.includes_location {
                    v.push(sample.lat);
                    v.push(sample.lon);
                }
                Vector::from_raw(v)
            })
            .collect()
    }
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature and per-target Z-normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub feature_names: Vec<String>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub ra_mean: f64,
    pub ra_std: f64,
    pub rh_mean: f64,
    pub rh_std: f64,
    pub yield_mean: f64,
    pub yield_std: f64,
}

fn mean_std_floored(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return (0.0, STD_FLOOR);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt().max(STD_FLOOR))
}

/// Fit normalization statistics on the training split. Flux statistics use
/// observed days only; yield statistics use yield-observed samples only.
pub fn fit_normalizer(
    layout: FeatureLayout,
    samples: &[&SampleSeries],
    targets: &[&TargetSeries],
) -> Result<NormStats> {
    if samples.is_empty() {
        return Err(Error::Config("cannot fit a normalizer on an empty training split".into()));
    }
    let dim = layout.input_dim();
    let mut feature_mean = Vec::with_capacity(dim);
    let mut feature_std = Vec::with_capacity(dim);
    let per_sample_features: Vec<Vec<Vector>> =
        samples.iter().map(|s| layout.raw_features(s)).collect();
    for i in 0..dim {
        let values = per_sample_features
            .iter()
            .flat_map(|fs| fs.iter().map(move |v| v[i]));
        let (m, s) = mean_std_floored(values);
        feature_mean.push(m);
        feature_std.push(s);
    }

    let ra_values = targets
        .iter()
        .flat_map(|t| t.ra.iter().zip(&t.mask).filter(|(_, &m)| m).map(|(v, _)| *v));
    let (ra_mean, ra_std) = mean_std_floored(ra_values);
    let rh_values = targets
        .iter()
        .flat_map(|t| t.rh.iter().zip(&t.mask).filter(|(_, &m)| m).map(|(v, _)| *v));
    let (rh_mean, rh_std) = mean_std_floored(rh_values);
    let yields = targets
        .iter()
        .filter(|t| t.yield_observed)
        .map(|t| t.yield_target);
    let (yield_mean, yield_std) = mean_std_floored(yields);

    Ok(NormStats {
        feature_names: layout.names().iter().map(|s| s.to_string()).collect(),
        feature_mean,
        feature_std,
        ra_mean,
        ra_std,
        rh_mean,
        rh_std,
        yield_mean,
        yield_std,
    })
}

impl NormStats {
    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            includes_location: self.feature_names.iter().any(|n| n == "lat"),
        }
    }

    pub fn normalize_feature(&self, i: usize, v: f64) -> f64 {
        (v - self.feature_mean[i]) / self.feature_std[i]
    }

    pub fn denormalize_feature(&self, i: usize, z: f64) -> f64 {
        z * self.feature_std[i] + self.feature_mean[i]
    }

    pub fn denorm_ra(&self, z: f64) -> f64 {
        z * self.ra_std + self.ra_mean
    }

    pub fn denorm_rh(&self, z: f64) -> f64 {
        z * self.rh_std + self.rh_mean
    }

    pub fn denorm_yield(&self, z: f64) -> f64 {
        z * self.yield_std + self.yield_mean
    }
}

/// A sample with normalized features and targets, ready for the model, plus
/// the physical-unit values the knowledge penalties need.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub sample_id: String,
    pub features: Vec<Vector>,
    pub ra_norm: Vec<f64>,
    pub rh_norm: Vec<f64>,
    pub mask: Vec<bool>,
    pub gpp_phys: Vec<f64>,
    pub yield_norm: f64,
    pub yield_observed: bool,
}

pub fn prepare_sample(
    sample: &SampleSeries,
    target: &TargetSeries,
    norm: &NormStats,
) -> Result<PreparedSample> {
    let layout = norm.layout();
    let raw = layout.raw_features(sample);
    if target.ra.len() != sample.days.len() || target.mask.len() != sample.days.len() {
        return Err(Error::Shape(format!(
            "sample {}: target length {} does not match {} days",
            sample.sample_id,
            target.ra.len(),
            sample.days.len()
        )));
    }
    let features = raw
        .into_iter()
        .map(|v| {
            Vector::from_raw(
                v.iter()
                    .enumerate()
                    .map(|(i, &x)| norm.normalize_feature(i, x))
                    .collect(),
            )
        })
        .collect();
    Ok(PreparedSample {
        sample_id: sample.sample_id.clone(),
        features,
        ra_norm: target.ra.iter().map(|&v| (v - norm.ra_mean) / norm.ra_std).collect(),
        rh_norm: target.rh.iter().map(|&v| (v - norm.rh_mean) / norm.rh_std).collect(),
        mask: target.mask.clone(),
        gpp_phys: sample.days.iter().map(|d| d.gpp).collect(),
        yield_norm: (target.yield_target - norm.yield_mean) / norm.yield_std,
        yield_observed: target.yield_observed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::RngStream;
    use crate::pipeline::data::DailyDrivers;

    fn mk_sample(id: &str, rng: &mut RngStream, t: usize) -> (SampleSeries, TargetSeries) {
        let days: Vec<DailyDrivers> = (0..t)
            .map(|_| DailyDrivers {
                t_air_c: rng.uniform(-5.0, 30.0),
                srad_mj: rng.uniform(0.0, 25.0),
                precip_mm: rng.uniform(0.0, 12.0),
                moisture_frac: rng.uniform(0.05, 0.95),
                gpp: rng.uniform(0.0, 1.2),
            })
            .collect();
        let target = TargetSeries {
            ra: (0..t).map(|_| rng.uniform(0.0, 0.6)).collect(),
            rh: (0..t).map(|_| rng.uniform(0.0, 3.0)).collect(),
            mask: vec![true; t],
            yield_target: rng.uniform(0.0, 0.1),
            yield_observed: true,
        };
        (
            SampleSeries {
                sample_id: id.into(),
                lat: rng.uniform(40.0, 43.0),
                lon: rng.uniform(-96.0, -90.0),
                clay_frac: rng.uniform(0.1, 0.4),
                om_pct: rng.uniform(1.0, 6.0),
                days,
            },
            target,
        )
    }

    #[test]
    fn layouts_differ_exactly_by_lat_lon() {
        let l1 = FeatureLayout::for_level(AwarenessLevel::Level1);
        let l2 = FeatureLayout::for_level(AwarenessLevel::Level2);
        let l3 = FeatureLayout::for_level(AwarenessLevel::Level3);
        assert_eq!(l1, l3);
        let n1 = l1.names();
        let n2 = l2.names();
        assert_eq!(n2.len(), n1.len() + 2);
        assert_eq!(&n2[..n1.len()], &n1[..]);
        assert_eq!(&n2[n1.len()..], &["lat", "lon"]);
        assert!(!n1.contains(&"lat") && !n1.contains(&"lon"));
    }

    #[test]
    fn normalized_train_features_have_zero_mean_unit_std() {
        let mut rng = RngStream::new(42);
        let pairs: Vec<_> = (0..20).map(|i| mk_sample(&format!("s{i}"), &mut rng, 30)).collect();
        let samples: Vec<&SampleSeries> = pairs.iter().map(|(s, _)| s).collect();
        let targets: Vec<&TargetSeries> = pairs.iter().map(|(_, t)| t).collect();
        let layout = FeatureLayout::for_level(AwarenessLevel::Level2);
        let norm = fit_normalizer(layout, &samples, &targets).unwrap();

        for i in 0..layout.input_dim() {
            let mut vals = Vec::new();
            for s in &samples {
                for f in layout.raw_features(s) {
                    vals.push(norm.normalize_feature(i, f[i]));
                }
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10, "feature {i} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "feature {i} std {}", var.sqrt());
        }
    }

    #[test]
    fn constant_feature_normalizes_to_zero() {
        let mut rng = RngStream::new(1);
        let (mut s, t) = mk_sample("s0", &mut rng, 5);
        for d in &mut s.days {
            d.precip_mm = 3.25;
        }
        let layout = FeatureLayout::for_level(AwarenessLevel::Level1);
        let norm = fit_normalizer(layout, &[&s], &[&t]).unwrap();
        assert_eq!(norm.feature_std[2], STD_FLOOR);
        assert_eq!(norm.normalize_feature(2, 3.25), 0.0);
    }

    #[test]
    fn apply_then_denormalize_is_identity() {
        let mut rng = RngStream::new(7);
        let pairs: Vec<_> = (0..5).map(|i| mk_sample(&format!("s{i}"), &mut rng, 10)).collect();
        let samples: Vec<&SampleSeries> = pairs.iter().map(|(s, _)| s).collect();
        let targets: Vec<&TargetSeries> = pairs.iter().map(|(_, t)| t).collect();
        let layout = FeatureLayout::for_level(AwarenessLevel::Level1);
        let norm = fit_normalizer(layout, &samples, &targets).unwrap();
        for _ in 0..200 {
            let i = (rng.next_u64() % layout.input_dim() as u64) as usize;
            let v = rng.uniform(-100.0, 100.0);
            let round = norm.denormalize_feature(i, norm.normalize_feature(i, v));
            assert!((round - v).abs() < 1e-12 * v.abs().max(1.0));
        }
        for _ in 0..50 {
            let v = rng.uniform(-10.0, 10.0);
            assert!((norm.denorm_ra((v - norm.ra_mean) / norm.ra_std) - v).abs() < 1e-12);
            assert!((norm.denorm_rh((v - norm.rh_mean) / norm.rh_std) - v).abs() < 1e-12);
            assert!((norm.denorm_yield((v - norm.yield_mean) / norm.yield_std) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_split_is_config_error() {
        let layout = FeatureLayout::for_level(AwarenessLevel::Level1);
        assert!(fit_normalizer(layout, &[], &[]).is_err());
    }
}
