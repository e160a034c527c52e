//! Awareness-level strategies. Each level of the spatial-variability taxonomy
//! is an interchangeable strategy behind one trait: it decides the feature
//! layout, which model entries exist, and which entry serves a given sample.
//! Strategies are registered by name and selected at runtime from the CLI.

use crate::error::{Error, Result};
use crate::model::AwarenessLevel;
use crate::pipeline::data::SampleSeries;
use crate::pipeline::preprocess::FeatureLayout;
use crate::regions::{detect_region, RegionConfig};

pub const POOLED_KEY: &str = "pooled";

pub trait AwarenessStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn level(&self) -> AwarenessLevel;

    fn feature_layout(&self) -> FeatureLayout {
        FeatureLayout::for_level(self.level())
    }

    /// Keys of the parameter sets this strategy trains: one per region for
    /// location-dependent parameters, a single pooled entry otherwise.
    fn entry_keys(&self, regions: &RegionConfig) -> Vec<String>;

    /// Which entry serves a sample at its location.
    fn entry_for_sample(&self, sample: &SampleSeries, regions: &RegionConfig) -> Result<String>;
}

/// Level 1: one size fits all. No location anywhere.
struct OneSizeFitsAll;

impl AwarenessStrategy for OneSizeFitsAll {
    fn name(&self) -> &'static str {
        "one-size-fits-all"
    }

    fn level(&self) -> AwarenessLevel {
        AwarenessLevel::Level1
    }

    fn entry_keys(&self, _regions: &RegionConfig) -> Vec<String> {
        vec![POOLED_KEY.to_string()]
    }

    fn entry_for_sample(&self, _sample: &SampleSeries, _regions: &RegionConfig) -> Result<String> {
        Ok(POOLED_KEY.to_string())
    }
}

/// Level 2: spatially explicit. Location enters as input features; parameters
/// stay shared.
struct SpatialExplicit;

impl AwarenessStrategy for SpatialExplicit {
    fn name(&self) -> &'static str {
        "spatial-explicit"
    }

    fn level(&self) -> AwarenessLevel {
        AwarenessLevel::Level2
    }

    fn entry_keys(&self, _regions: &RegionConfig) -> Vec<String> {
        vec![POOLED_KEY.to_string()]
    }

    fn entry_for_sample(&self, _sample: &SampleSeries, _regions: &RegionConfig) -> Result<String> {
        Ok(POOLED_KEY.to_string())
    }
}

/// Level 3: spatial variability aware. One parameter set per detected region.
struct SpatialVariabilityAware;

impl AwarenessStrategy for SpatialVariabilityAware {
    fn name(&self) -> &'static str {
        "spatial-variability-aware"
    }

    fn level(&self) -> AwarenessLevel {
        AwarenessLevel::Level3
    }

    fn entry_keys(&self, regions: &RegionConfig) -> Vec<String> {
        regions.region_ids().iter().map(|r| r.to_string()).collect()
    }

    fn entry_for_sample(&self, sample: &SampleSeries, regions: &RegionConfig) -> Result<String> {
        Ok(detect_region(sample.lat, sample.lon, regions)?.to_string())
    }
}

static LEVEL1: OneSizeFitsAll = OneSizeFitsAll;
static LEVEL2: SpatialExplicit = SpatialExplicit;
static LEVEL3: SpatialVariabilityAware = SpatialVariabilityAware;

/// All registered strategies, in taxonomy order.
pub fn registry() -> [&'static dyn AwarenessStrategy; 3] {
    [&LEVEL1, &LEVEL2, &LEVEL3]
}

/// Look a strategy up by registered name or by level number ("1".."3").
pub fn strategy_named(name: &str) -> Result<&'static dyn AwarenessStrategy> {
    for s in registry() {
        if s.name() == name || s.level().number().to_string() == name {
            return Ok(s);
        }
    }
    Err(Error::Config(format!(
        "unknown awareness strategy {name:?}; known: {}",
        registry().map(|s| s.name()).join(", ")
    )))
}

pub fn strategy_for_level(level: AwarenessLevel) -> &'static dyn AwarenessStrategy {
    registry()
        .into_iter()
        .find(|s| s.level() == level)
        .unwrap()
}
