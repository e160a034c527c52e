//! Dataset types and CSV/manifest I/O.
//!
//! On-disk layout of a dataset directory:
//!   static.csv   sample_id,lat,lon,clay_frac,om_pct,yield_target,yield_observed
//!   daily.csv    sample_id,day_index,t_air_c,srad_mj,precip_mm,moisture_frac,gpp,ra,rh,flux_observed
//!   manifest.json  generator presets, seed, region of origin per sample, schema version
//!
//! Unobserved flux targets are empty strings; missing driver cells load as NaN
//! and must be filled by [`interpolate_gaps`] before modeling.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::RegionId;
use crate::synthgen::RegionProcessParams;

pub const SCHEMA_VERSION: u32 = 1;

/// One day of model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyDrivers {
    pub t_air_c: f64,
    pub srad_mj: f64,
    pub precip_mm: f64,
    pub moisture_frac: f64,
    pub gpp: f64,
}

/// One field-site sample: static descriptors plus the daily driver sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSeries {
    pub sample_id: String,
    pub lat: f64,
    pub lon: f64,
    pub clay_frac: f64,
    pub om_pct: f64,
    pub days: Vec<DailyDrivers>,
}

/// Daily Ra/Rh targets with an observation mask, plus the annual yield.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSeries {
    pub ra: Vec<f64>,
    pub rh: Vec<f64>,
    pub mask: Vec<bool>,
    pub yield_target: f64,
    pub yield_observed: bool,
}

/// Provenance record written next to the CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub presets: BTreeMap<RegionId, RegionProcessParams>,
    pub region_of_origin: BTreeMap<String, RegionId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SampleSeries>,
    pub targets: Vec<TargetSeries>,
    pub manifest: Manifest,
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Write a file atomically (temp file + rename) so failed runs leave no
/// partial primary outputs.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::Io(std::io::Error::other("path has no parent directory")))?;
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().unwrap_or_default().to_string_lossy()
    ));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut static_csv = String::from("sample_id,lat,lon,clay_frac,om_pct,yield_target,yield_observed\n");
    for (s, t) in dataset.samples.iter().zip(&dataset.targets) {
        static_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.sample_id,
            s.lat,
            s.lon,
            s.clay_frac,
            s.om_pct,
            t.yield_target,
            t.yield_observed as u8
        ));
    }
    atomic_write(&dir.join("static.csv"), static_csv.as_bytes())?;

    let mut daily_csv =
        String::from("sample_id,day_index,t_air_c,srad_mj,precip_mm,moisture_frac,gpp,ra,rh,flux_observed\n");
    for (s, t) in dataset.samples.iter().zip(&dataset.targets) {
        for (d_idx, day) in s.days.iter().enumerate() {
            let observed = t.mask[d_idx];
            let (ra, rh) = if observed {
                (fmt_f64(t.ra[d_idx]), fmt_f64(t.rh[d_idx]))
            } else {
                (String::new(), String::new())
            };
            daily_csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                s.sample_id,
                d_idx,
                fmt_f64(day.t_air_c),
                fmt_f64(day.srad_mj),
                fmt_f64(day.precip_mm),
                fmt_f64(day.moisture_frac),
                fmt_f64(day.gpp),
                ra,
                rh,
                observed as u8
            ));
        }
    }
    atomic_write(&dir.join("daily.csv"), daily_csv.as_bytes())?;

    let manifest = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    atomic_write(&dir.join("manifest.json"), manifest.as_bytes())?;
    Ok(())
}

fn parse_f64(field: &str, record_desc: &str) -> Result<f64> {
    if field.is_empty() {
        return Ok(f64::NAN);
    }
    field
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("bad numeric field {field:?} in {record_desc}")))
}

fn parse_bool01(field: &str, record_desc: &str) -> Result<bool> {
    match field {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::Data(format!("expected 0/1, got {field:?} in {record_desc}"))),
    }
}

struct DailyRow {
    day_index: usize,
    drivers: DailyDrivers,
    ra: f64,
    rh: f64,
    observed: bool,
}

/// Load samples and targets from the two CSV files, joining on sample_id and
/// sorting days by day_index. Drivers may contain NaN (missing cells).
pub fn load_dataset(static_path: &Path, daily_path: &Path) -> Result<(Vec<SampleSeries>, Vec<TargetSeries>)> {
    let mut static_reader = csv::Reader::from_path(static_path)
        .map_err(|e| Error::Data(format!("{}: {e}", static_path.display())))?;

    struct StaticRow {
        lat: f64,
        lon: f64,
        clay_frac: f64,
        om_pct: f64,
        yield_target: f64,
        yield_observed: bool,
    }
    let mut order: Vec<String> = Vec::new();
    let mut statics: BTreeMap<String, StaticRow> = BTreeMap::new();
    for rec in static_reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("static.csv: {e}")))?;
        if rec.len() != 7 {
            return Err(Error::Data(format!("static.csv: expected 7 fields, got {}", rec.len())));
        }
        let id = rec[0].to_string();
        let desc = format!("static.csv row for {id}");
        let row = StaticRow {
            lat: parse_f64(&rec[1], &desc)?,
            lon: parse_f64(&rec[2], &desc)?,
            clay_frac: parse_f64(&rec[3], &desc)?,
            om_pct: parse_f64(&rec[4], &desc)?,
            yield_target: parse_f64(&rec[5], &desc)?,
            yield_observed: parse_bool01(&rec[6], &desc)?,
        };
        if statics.insert(id.clone(), row).is_some() {
            return Err(Error::Data(format!("duplicate sample_id {id} in static.csv")));
        }
        order.push(id);
    }

    let mut daily_reader = csv::Reader::from_path(daily_path)
        .map_err(|e| Error::Data(format!("{}: {e}", daily_path.display())))?;
    let mut daily: BTreeMap<String, Vec<DailyRow>> = BTreeMap::new();
    let mut any_daily = false;
    for rec in daily_reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("daily.csv: {e}")))?;
        if rec.len() != 10 {
            return Err(Error::Data(format!("daily.csv: expected 10 fields, got {}", rec.len())));
        }
        any_daily = true;
        let id = rec[0].to_string();
        if !statics.contains_key(&id) {
            return Err(Error::Data(format!("daily.csv sample_id {id} missing from static.csv")));
        }
        let desc = format!("daily.csv row for {id}");
        let day_index: usize = rec[1]
            .parse()
            .map_err(|_| Error::Data(format!("bad day_index {:?} in {desc}", &rec[1])))?;
        daily.entry(id).or_default().push(DailyRow {
            day_index,
            drivers: DailyDrivers {
                t_air_c: parse_f64(&rec[2], &desc)?,
                srad_mj: parse_f64(&rec[3], &desc)?,
                precip_mm: parse_f64(&rec[4], &desc)?,
                moisture_frac: parse_f64(&rec[5], &desc)?,
                gpp: parse_f64(&rec[6], &desc)?,
            },
            ra: parse_f64(&rec[7], &desc)?,
            rh: parse_f64(&rec[8], &desc)?,
            observed: parse_bool01(&rec[9], &desc)?,
        });
    }
    if !any_daily {
        return Err(Error::Data(format!("{} contains no rows", daily_path.display())));
    }

    let mut samples = Vec::with_capacity(order.len());
    let mut targets = Vec::with_capacity(order.len());
    for id in order {
        let s = &statics[&id];
        let mut rows = daily
            .remove(&id)
            .ok_or_else(|| Error::Data(format!("sample_id {id} has no daily rows")))?;
        rows.sort_by_key(|r| r.day_index);
        for (expect, row) in rows.iter().enumerate() {
            if row.day_index != expect {
                return Err(Error::Data(format!(
                    "sample_id {id}: day_index not contiguous at {}",
                    row.day_index
                )));
            }
        }
        let mut days = Vec::with_capacity(rows.len());
        let (mut ra, mut rh, mut mask) = (Vec::new(), Vec::new(), Vec::new());
        for row in rows {
            days.push(row.drivers);
            mask.push(row.observed);
            ra.push(if row.observed { row.ra } else { 0.0 });
            rh.push(if row.observed { row.rh } else { 0.0 });
        }
        samples.push(SampleSeries {
            sample_id: id,
            lat: s.lat,
            lon: s.lon,
            clay_frac: s.clay_frac,
            om_pct: s.om_pct,
            days,
        });
        targets.push(TargetSeries {
            ra,
            rh,
            mask,
            yield_target: s.yield_target,
            yield_observed: s.yield_observed,
        });
    }
    Ok((samples, targets))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "manifest schema version {} but this build reads {}",
            manifest.schema_version, SCHEMA_VERSION
        )));
    }
    Ok(manifest)
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_dataset(dir, self)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let (samples, targets) = load_dataset(&dir.join("static.csv"), &dir.join("daily.csv"))?;
        let manifest = load_manifest(&dir.join("manifest.json"))?;
        Ok(Dataset {
            samples,
            targets,
            manifest,
        })
    }
}

/// Linearly fill interior NaN runs of length <= max_gap per driver feature;
/// boundary runs of the same length are filled by nearest-value extension.
pub fn interpolate_gaps(sample: &mut SampleSeries, max_gap: usize) -> Result<()> {
    let n = sample.days.len();
    let features: [(&str, fn(&DailyDrivers) -> f64, fn(&mut DailyDrivers, f64)); 5] = [
        ("t_air_c", |d| d.t_air_c, |d, v| d.t_air_c = v),
        ("srad_mj", |d| d.srad_mj, |d, v| d.srad_mj = v),
        ("precip_mm", |d| d.precip_mm, |d, v| d.precip_mm = v),
        ("moisture_frac", |d| d.moisture_frac, |d, v| d.moisture_frac = v),
        ("gpp", |d| d.gpp, |d, v| d.gpp = v),
    ];
    for (name, get, set) in features {
        let mut values: Vec<f64> = sample.days.iter().map(get).collect();
        let mut i = 0;
        while i < n {
            if !values[i].is_nan() {
                i += 1;
                continue;
            }
            let start = i;
            while i < n && values[i].is_nan() {
                i += 1;
            }
            let end = i; // run is [start, end)
            let run = end - start;
            if run > max_gap {
                return Err(Error::Data(format!(
                    "sample {}: feature {name} missing for days {start}..{} exceeds max gap {max_gap}",
                    sample.sample_id,
                    end - 1
                )));
            }
            let left = start.checked_sub(1).map(|j| values[j]);
            let right = (end < n).then(|| values[end]);
            match (left, right) {
                (Some(lo), Some(hi)) => {
                    for (k, v) in values[start..end].iter_mut().enumerate() {
                        let frac = (k + 1) as f64 / (run + 1) as f64;
                        *v = lo + frac * (hi - lo);
                    }
                }
                (Some(lo), None) => values[start..end].fill(lo),
                (None, Some(hi)) => values[start..end].fill(hi),
                (None, None) => {
                    return Err(Error::Data(format!(
                        "sample {}: feature {name} has no observed values",
                        sample.sample_id
                    )))
                }
            }
        }
        for (day, v) in sample.days.iter_mut().zip(values) {
            set(day, v);
        }
    }
    Ok(())
}
