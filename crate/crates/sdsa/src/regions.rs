//! Rule-based region detection: classify samples into configured bounding
//! boxes, partition datasets by region, and quantify the distribution shift
//! between partitions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::data::SampleSeries;

/// Short region identifier, e.g. "iowa".
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionId(pub String);

impl RegionId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for RegionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Axis-aligned bounding box in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.lat_min && lat <= self.lat_max && lon >= self.lon_min && lon <= self.lon_max
    }

    pub fn centroid(&self) -> (f64, f64) {
        (
            0.5 * (self.lat_min + self.lat_max),
            0.5 * (self.lon_min + self.lon_max),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfRegionPolicy {
    Reject,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionDef {
    pub id: RegionId,
    #[serde(flatten)]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub regions: Vec<RegionDef>,
    pub out_of_region_policy: OutOfRegionPolicy,
}

impl RegionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::Config("no regions configured".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for def in &self.regions {
            if def.id.as_str().is_empty() {
                return Err(Error::Config("empty region name".into()));
            }
            if !seen.insert(def.id.as_str()) {
                return Err(Error::Config(format!("duplicate region name {}", def.id)));
            }
            let b = &def.bbox;
            if !(b.lat_min < b.lat_max && b.lon_min < b.lon_max) {
                return Err(Error::Config(format!(
                    "region {} has a degenerate bounding box",
                    def.id
                )));
            }
        }
        Ok(())
    }

    pub fn region_ids(&self) -> Vec<RegionId> {
        self.regions.iter().map(|r| r.id.clone()).collect()
    }

    pub fn get(&self, id: &RegionId) -> Option<&RegionDef> {
        self.regions.iter().find(|r| &r.id == id)
    }

    /// Illinois / Iowa / Indiana boxes used throughout the synthetic experiments.
    pub fn midwest_default() -> Self {
        let mk = |name: &str, lat_min, lat_max, lon_min, lon_max| RegionDef {
            id: RegionId::new(name),
            bbox: BoundingBox {
                lat_min,
                lat_max,
                lon_min,
                lon_max,
            },
        };
        Self {
            regions: vec![
                mk("illinois", 36.9, 42.6, -91.6, -87.4),
                mk("iowa", 40.3, 43.6, -96.7, -90.1),
                mk("indiana", 37.7, 41.8, -88.1, -84.7),
            ],
            out_of_region_policy: OutOfRegionPolicy::Reject,
        }
    }
}

fn centroid_dist2(def: &RegionDef, lat: f64, lon: f64) -> f64 {
    let (clat, clon) = def.bbox.centroid();
    (clat - lat).powi(2) + (clon - lon).powi(2)
}

/// Classify a point. Containment wins; ties between overlapping boxes and the
/// `nearest` fallback both resolve by centroid distance in degree space.
pub fn detect_region(lat: f64, lon: f64, cfg: &RegionConfig) -> Result<RegionId> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::Domain(format!("coordinates ({lat}, {lon}) out of range")));
    }
    let mut candidates: Vec<&RegionDef> = cfg
        .regions
        .iter()
        .filter(|r| r.bbox.contains(lat, lon))
        .collect();
    if candidates.is_empty() {
        match cfg.out_of_region_policy {
            OutOfRegionPolicy::Reject => return Err(Error::OutOfRegion { lat, lon }),
            OutOfRegionPolicy::Nearest => candidates = cfg.regions.iter().collect(),
        }
    }
    let best = candidates
        .iter()
        .min_by(|a, b| {
            centroid_dist2(a, lat, lon)
                .partial_cmp(&centroid_dist2(b, lat, lon))
                .unwrap()
        })
        .unwrap();
    Ok(best.id.clone())
}

/// Bucket dataset indices by detected region. Every index lands in exactly one
/// bucket; a rejected point aborts with the offending sample id.
pub fn partition(
    dataset: &[SampleSeries],
    cfg: &RegionConfig,
) -> Result<BTreeMap<RegionId, Vec<usize>>> {
    let mut buckets: BTreeMap<RegionId, Vec<usize>> = BTreeMap::new();
    for (idx, sample) in dataset.iter().enumerate() {
        let region = detect_region(sample.lat, sample.lon, cfg).map_err(|e| {
            Error::Data(format!("sample {}: {e}", sample.sample_id))
        })?;
        buckets.entry(region).or_default().push(idx);
    }
    Ok(buckets)
}

/// Per-region statistics for one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    /// None when the bucket holds fewer than two samples.
    pub std: Option<f64>,
    pub n_samples: usize,
}

/// Standardized mean differences between region pairs, per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub feature_names: Vec<String>,
    /// (region, feature) -> stats over per-day values pooled within the region.
    pub stats: BTreeMap<RegionId, BTreeMap<String, FeatureStats>>,
    /// Region pairs stored with the lexicographically smaller id first.
    pub smd: BTreeMap<(RegionId, RegionId), BTreeMap<String, Option<f64>>>,
}

impl ShiftReport {
    pub fn smd_for(&self, a: &RegionId, b: &RegionId, feature: &str) -> Option<f64> {
        let key = if a <= b {
            (a.clone(), b.clone())
        } else {
            (b.clone(), a.clone())
        };
        self.smd.get(&key).and_then(|m| m.get(feature).copied().flatten())
    }
}

const SHIFT_FEATURES: [&str; 5] = ["t_air_c", "srad_mj", "precip_mm", "moisture_frac", "gpp"];

fn pooled_feature_values(dataset: &[SampleSeries], indices: &[usize], feature: &str) -> Vec<f64> {
    let mut vals = Vec::new();
    for &i in indices {
        for day in &dataset[i].days {
            vals.push(match feature {
                "t_air_c" => day.t_air_c,
                "srad_mj" => day.srad_mj,
                "precip_mm" => day.precip_mm,
                "moisture_frac" => day.moisture_frac,
                "gpp" => day.gpp,
                _ => unreachable!(),
            });
        }
    }
    vals
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Distribution-shift summary across a partition of the dataset.
pub fn shift_report(
    dataset: &[SampleSeries],
    buckets: &BTreeMap<RegionId, Vec<usize>>,
) -> ShiftReport {
    let mut stats: BTreeMap<RegionId, BTreeMap<String, FeatureStats>> = BTreeMap::new();
    for (region, indices) in buckets {
        let mut per_feature = BTreeMap::new();
        for feature in SHIFT_FEATURES {
            let vals = pooled_feature_values(dataset, indices, feature);
            let (mean, std) = if vals.is_empty() {
                (0.0, 0.0)
            } else {
                mean_std(&vals)
            };
            per_feature.insert(
                feature.to_string(),
                FeatureStats {
                    mean,
                    std: (indices.len() >= 2).then_some(std),
                    n_samples: indices.len(),
                },
            );
        }
        stats.insert(region.clone(), per_feature);
    }

    let regions: Vec<&RegionId> = buckets.keys().collect();
    let mut smd = BTreeMap::new();
    for i in 0..regions.len() {
        for j in i + 1..regions.len() {
            let (a, b) = (regions[i], regions[j]);
            let mut per_feature = BTreeMap::new();
            for feature in SHIFT_FEATURES {
                let sa = &stats[a][feature];
                let sb = &stats[b][feature];
                let value = match (sa.std, sb.std) {
                    (Some(da), Some(db)) => {
                        let diff = (sa.mean - sb.mean).abs();
                        let denom = ((da * da + db * db) / 2.0).sqrt();
                        if diff == 0.0 {
                            Some(0.0)
                        } else if denom == 0.0 {
                            None
                        } else {
                            Some(diff / denom)
                        }
                    }
                    _ => None,
                };
                per_feature.insert(feature.to_string(), value);
            }
            smd.insert((a.clone(), b.clone()), per_feature);
        }
    }

    ShiftReport {
        feature_names: SHIFT_FEATURES.iter().map(|s| s.to_string()).collect(),
        stats,
        smd,
    }
}
