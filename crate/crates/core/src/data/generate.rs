use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{mix_seed, validate_specs, DataError, PhenologyClassSpec, TimeSeriesSample, DAYS_PER_YEAR};
use crate::diffcore::Array;

const REGION_STREAM: u64 = 0x5245_4749_4f4e; // "REGION"
const SAMPLE_STREAM: u64 = 0x5341_4d50_4c45; // "SAMPLE"

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub samples_per_class: usize,
    pub regions: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Nominal spacing of the acquisition grid, in days.
    pub revisit_days: f64,
    /// Uniform jitter applied to each acquisition day, `±` this many days.
    pub revisit_jitter_days: f64,
    /// Fraction of acquisitions lost to clouds.
    pub cloud_fraction: f64,
    /// Cloud loss never leaves fewer acquisitions than this.
    pub min_observations: usize,
    /// Per-parcel phenology shift, standard deviation in days.
    pub peak_jitter_days: f64,
    /// Per-region phenology shift, uniform `±` this many days.
    pub region_shift_days: f64,
    /// Per-parcel amplitude scale is drawn from `[1 − j, 1]`.
    pub amplitude_jitter: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 500,
            regions: 20,
            noise_std: 0.01,
            seed: 0,
            revisit_days: 4.0,
            revisit_jitter_days: 1.0,
            cloud_fraction: 0.2,
            min_observations: 70,
            peak_jitter_days: 4.0,
            region_shift_days: 3.0,
            amplitude_jitter: 0.15,
        }
    }
}

impl GeneratorConfig {
    fn grid_len(&self) -> usize {
        (DAYS_PER_YEAR / self.revisit_days).ceil() as usize
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut problems = Vec::new();
        if self.samples_per_class == 0 {
            problems.push("samples_per_class must be ≥ 1".to_string());
        }
        if self.regions < 3 {
            problems.push(format!("regions must be ≥ 3, got {}", self.regions));
        }
        if !(self.noise_std >= 0.0) {
            problems.push(format!("noise_std must be ≥ 0, got {}", self.noise_std));
        }
        if !(self.revisit_days > 0.0) {
            problems.push(format!("revisit_days must be > 0, got {}", self.revisit_days));
        } else {
            if !(self.revisit_jitter_days >= 0.0 && 2.0 * self.revisit_jitter_days < self.revisit_days) {
                problems.push(format!(
                    "revisit_jitter_days must lie in [0, revisit_days/2), got {}",
                    self.revisit_jitter_days
                ));
            }
            // the first and last grid slots may fall outside the year
            if self.min_observations + 2 > self.grid_len() {
                problems.push(format!(
                    "min_observations {} needs a denser grid than every {} days",
                    self.min_observations, self.revisit_days
                ));
            }
        }
        if !(0.0..1.0).contains(&self.cloud_fraction) {
            problems.push(format!("cloud_fraction must lie in [0, 1), got {}", self.cloud_fraction));
        }
        for (name, v) in [
            ("peak_jitter_days", self.peak_jitter_days),
            ("region_shift_days", self.region_shift_days),
        ] {
            if !(v >= 0.0) {
                problems.push(format!("{name} must be ≥ 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.amplitude_jitter) {
            problems.push(format!("amplitude_jitter must lie in [0, 1], got {}", self.amplitude_jitter));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DataError::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Acquisition days for one parcel: a jittered regular grid with cloud gaps.
fn acquisition_days(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let offset = rng.random_range(0.0..cfg.revisit_days);
    let jitter = cfg.revisit_jitter_days;
    let mut days: Vec<f64> = (0..=cfg.grid_len())
        .map(|k| {
            let j = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
            offset + k as f64 * cfg.revisit_days + j
        })
        .filter(|d| (0.0..DAYS_PER_YEAR).contains(d))
        .collect();

    let n = days.len();
    let clouded = (0..n).filter(|_| rng.random::<f64>() < cfg.cloud_fraction).count();
    let drop = clouded.min(n.saturating_sub(cfg.min_observations));
    if drop > 0 {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let mut keep = vec![true; n];
        for &i in &idx[..drop] {
            keep[i] = false;
        }
        let mut k = keep.iter();
        days.retain(|_| *k.next().expect("same length"));
    }
    days
}

/// Draws `samples_per_class` parcels per class.
///
/// Each parcel gets its own acquisition calendar, a phenology shift
/// (region-level plus parcel-level), an amplitude scale, and i.i.d. Gaussian
/// noise on every band. Parcels are assigned to regions by a seeded hash.
pub fn generate(
    specs: &[PhenologyClassSpec],
    cfg: &GeneratorConfig,
) -> Result<Vec<TimeSeriesSample>, DataError> {
    validate_specs(specs)?;
    cfg.validate()?;
    let bands = specs[0].bands();
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| DataError::InvalidConfig(format!("noise_std: {e}")))?;
    let peak_noise = Normal::new(0.0, cfg.peak_jitter_days)
        .map_err(|e| DataError::InvalidConfig(format!("peak_jitter_days: {e}")))?;

    let region_shift: Vec<f64> = (0..cfg.regions)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, REGION_STREAM, r as u64]));
            if cfg.region_shift_days > 0.0 {
                rng.random_range(-cfg.region_shift_days..=cfg.region_shift_days)
            } else {
                0.0
            }
        })
        .collect();

    let mut out = Vec::with_capacity(specs.len() * cfg.samples_per_class);
    for (label, spec) in specs.iter().enumerate() {
        for i in 0..cfg.samples_per_class {
            let id = (label * cfg.samples_per_class + i) as u64;
            let region = (mix_seed(&[cfg.seed, REGION_STREAM, id]) % cfg.regions as u64) as u32;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, SAMPLE_STREAM, id]));

            let days = acquisition_days(cfg, &mut rng);
            let shift = region_shift[region as usize] + peak_noise.sample(&mut rng);
            let scale = 1.0 - cfg.amplitude_jitter * rng.random::<f64>();
            let peak = spec.peak_day + shift;
            let harvest = spec.harvest_drop_day.map(|h| h + shift);

            let mut data = Vec::with_capacity(days.len() * bands);
            for &day in &days {
                for b in 0..bands {
                    data.push(spec.profile(b, day, peak, scale, harvest) + noise.sample(&mut rng));
                }
            }
            out.push(TimeSeriesSample {
                id,
                region_id: region,
                label,
                observations: Array::new(days.len(), bands, data).expect("sized"),
                days,
            });
        }
    }
    Ok(out)
}

// Sentinel-2 band order: B1 B2 B3 B4 B5 B6 B7 B8 B8A B9 B10 B11 B12
const SOIL: [f64; 13] = [0.14, 0.12, 0.12, 0.14, 0.17, 0.20, 0.22, 0.23, 0.24, 0.06, 0.01, 0.30, 0.24];
const CANOPY: [f64; 13] = [-0.03, -0.05, 0.0, -0.09, 0.03, 0.18, 0.26, 0.30, 0.31, 0.06, 0.0, -0.10, -0.13];

fn crop(
    name: &str,
    peak_day: f64,
    season_width: f64,
    harvest: Option<f64>,
    vigor: f64,
    tweaks: &[(usize, f64)],
) -> PhenologyClassSpec {
    let mut amplitude: Vec<f64> = CANOPY.iter().map(|a| a * vigor).collect();
    for &(band, delta) in tweaks {
        amplitude[band] += delta;
    }
    PhenologyClassSpec {
        name: name.to_string(),
        peak_day,
        season_width,
        amplitude,
        base: SOIL.to_vec(),
        harvest_drop_day: harvest,
    }
}

/// Nine-class catalogue of central-European crops with staggered seasons.
pub fn default_class_specs() -> Vec<PhenologyClassSpec> {
    vec![
        crop("meadow", 120.0, 55.0, None, 0.7, &[(2, 0.03), (11, 0.06)]),
        crop("winter barley", 125.0, 22.0, Some(180.0), 1.0, &[(5, -0.06), (12, 0.04)]),
        crop("winter wheat", 150.0, 26.0, Some(210.0), 1.1, &[(4, -0.06), (8, 0.05)]),
        crop("corn", 215.0, 22.0, Some(270.0), 1.15, &[(2, 0.06), (12, -0.06)]),
        crop("rapeseed", 110.0, 18.0, Some(195.0), 0.9, &[(2, 0.10), (3, 0.08)]),
        crop("summer barley", 170.0, 20.0, Some(215.0), 0.95, &[(1, 0.05), (6, -0.05)]),
        crop("summer oat", 180.0, 20.0, Some(225.0), 0.9, &[(5, 0.07), (11, -0.04)]),
        crop("winter triticale", 140.0, 25.0, Some(205.0), 1.05, &[(7, -0.08), (9, 0.04)]),
        crop("fallow", 160.0, 45.0, None, 0.35, &[(11, 0.08)]),
    ]
}

pub fn save_class_specs(path: &Path, specs: &[PhenologyClassSpec]) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(specs).expect("specs serialize") + "\n";
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_class_specs(path: &Path) -> Result<Vec<PhenologyClassSpec>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let specs: Vec<PhenologyClassSpec> = serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.display().to_string(),
        source,
    })?;
    validate_specs(&specs)?;
    Ok(specs)
}
