//! Synthetic crop-phenology time series and the dataset plumbing around them:
//! CSV I/O, region-disjoint splits, temporal subsampling and band statistics.

mod generate;
mod io;
mod split;

use serde::{Deserialize, Serialize};

use crate::diffcore::Array;

pub use generate::{default_class_specs, generate, load_class_specs, save_class_specs, GeneratorConfig};
pub use io::{load_dataset, parse_dataset, render_dataset, save_dataset};
pub use split::{fit_normalization, split_by_region, subsample, DatasetSplit, Subsample};

pub const DAYS_PER_YEAR: f64 = 365.0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid class specification: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),
    #[error("invalid generator settings: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("sample {id} has {available} observations, cannot draw {requested}")]
    TooShort {
        id: u64,
        available: usize,
        requested: usize,
    },
    #[error("split: {0}")]
    Split(String),
    #[error("cannot fit normalization statistics on an empty training split")]
    EmptyTrainingSet,
}

/// One labeled, parcel-aggregated time series.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesSample {
    pub id: u64,
    pub region_id: u32,
    pub label: usize,
    /// Day of year of each observation, strictly increasing, in `[0, 365)`.
    pub days: Vec<f64>,
    /// `T_raw × D` reflectances.
    pub observations: Array,
}

impl TimeSeriesSample {
    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn bands(&self) -> usize {
        self.observations.cols()
    }
}

/// Seasonal profile of one class: a Gaussian bump per band on top of a
/// base reflectance, optionally falling back to the base after harvest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhenologyClassSpec {
    pub name: String,
    /// Day of year of maximal growth.
    pub peak_day: f64,
    /// Standard deviation of the bump, in days.
    pub season_width: f64,
    pub amplitude: Vec<f64>,
    pub base: Vec<f64>,
    #[serde(default)]
    pub harvest_drop_day: Option<f64>,
}

/// Values before noise must stay inside this range.
pub const REFLECTANCE_RANGE: (f64, f64) = (0.0, 1.5);

impl PhenologyClassSpec {
    pub fn bands(&self) -> usize {
        self.base.len()
    }

    /// Noise-free value of `band` on `day`, with the bump centred on `peak`
    /// and the amplitude scaled by `scale ∈ [0, 1]`.
    pub fn profile(&self, band: usize, day: f64, peak: f64, scale: f64, harvest: Option<f64>) -> f64 {
        let base = self.base[band];
        if harvest.is_some_and(|h| day > h) {
            return base;
        }
        let z = (day - peak) / self.season_width;
        base + scale * self.amplitude[band] * (-0.5 * z * z).exp()
    }

    fn problems(&self, bands: usize) -> Vec<String> {
        let mut out = Vec::new();
        let name = &self.name;
        if !(self.season_width > 0.0) {
            out.push(format!("{name}: season_width must be > 0, got {}", self.season_width));
        }
        if !(0.0..DAYS_PER_YEAR).contains(&self.peak_day) {
            out.push(format!("{name}: peak_day {} outside [0, 365)", self.peak_day));
        }
        if let Some(h) = self.harvest_drop_day {
            if !(0.0..DAYS_PER_YEAR).contains(&h) {
                out.push(format!("{name}: harvest_drop_day {h} outside [0, 365)"));
            }
        }
        if self.base.len() != bands || self.amplitude.len() != bands {
            out.push(format!(
                "{name}: expected {bands} bands, got base {} / amplitude {}",
                self.base.len(),
                self.amplitude.len()
            ));
            return out;
        }
        let (lo, hi) = REFLECTANCE_RANGE;
        for (b, (&base, &amp)) in self.base.iter().zip(&self.amplitude).enumerate() {
            let peak = base + amp;
            if !(lo..=hi).contains(&base) || !(lo..=hi).contains(&peak) {
                out.push(format!(
                    "{name}: band {b} spans [{}, {}] outside [{lo}, {hi}]",
                    base.min(peak),
                    base.max(peak)
                ));
            }
        }
        out
    }
}

/// Checks a class catalogue; all offending entries are reported together.
pub fn validate_specs(specs: &[PhenologyClassSpec]) -> Result<(), DataError> {
    let mut problems = Vec::new();
    if specs.len() < 2 {
        problems.push(format!("need at least 2 classes, got {}", specs.len()));
    }
    let bands = specs.first().map_or(0, PhenologyClassSpec::bands);
    if bands == 0 && !specs.is_empty() {
        problems.push("classes must have at least one band".to_string());
    }
    for spec in specs {
        problems.extend(spec.problems(bands));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(DataError::InvalidSpec(problems))
    }
}

/// SplitMix64 finalizer; used to derive independent seeds from tuples.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
