use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, TimeSeriesSample};
use crate::diffcore::Array;
use crate::model::STD_FLOOR;

/// Indices into the sample list, partitioned by region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub train_regions: Vec<u32>,
    pub val_regions: Vec<u32>,
    pub test_regions: Vec<u32>,
}

/// Region-disjoint split. Regions are shuffled by `seed`; the first three go
/// one to each partition, every later region goes to the partition furthest
/// below its target sample count.
pub fn split_by_region(
    samples: &[TimeSeriesSample],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|x| !(*x > 0.0)) || ((f[0] + f[1] + f[2]) - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!(
            "fractions must be positive and sum to 1, got ({}, {}, {})",
            f[0], f[1], f[2]
        )));
    }
    let mut regions: Vec<u32> = samples.iter().map(|s| s.region_id).collect();
    regions.sort_unstable();
    regions.dedup();
    if regions.len() < 3 {
        return Err(DataError::Split(format!(
            "need at least 3 regions for 3 partitions, found {}",
            regions.len()
        )));
    }
    regions.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let count = |r: u32| samples.iter().filter(|s| s.region_id == r).count();
    let total = samples.len() as f64;
    let mut sizes = [0usize; 3];
    let mut assigned: [Vec<u32>; 3] = Default::default();
    for (k, &r) in regions.iter().enumerate() {
        let part = if k < 3 {
            k
        } else {
            let deficit = |p: usize| f[p] * total - sizes[p] as f64;
            // ties go to the earlier partition
            (0..3).fold(0, |best, p| if deficit(p) > deficit(best) { p } else { best })
        };
        sizes[part] += count(r);
        assigned[part].push(r);
    }

    let mut parts: [Vec<usize>; 3] = Default::default();
    for (i, s) in samples.iter().enumerate() {
        let p = (0..3).find(|&p| assigned[p].contains(&s.region_id)).expect("every region assigned");
        parts[p].push(i);
    }
    for a in &mut assigned {
        a.sort_unstable();
    }
    let [train, val, test] = parts;
    let [train_regions, val_regions, test_regions] = assigned;
    Ok(DatasetSplit {
        train,
        val,
        test,
        train_regions,
        val_regions,
        test_regions,
    })
}

/// `T` observations of one sample, in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct Subsample {
    pub observations: Array,
    pub days: Vec<f64>,
    /// Row indices into the raw sample.
    pub rows: Vec<usize>,
}

/// Draws `t` rows uniformly without replacement and restores time order.
pub fn subsample(sample: &TimeSeriesSample, t: usize, seed: u64) -> Result<Subsample, DataError> {
    let available = sample.len();
    if available < t || t == 0 {
        return Err(DataError::TooShort {
            id: sample.id,
            available,
            requested: t,
        });
    }
    let mut rows = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), available, t).into_vec();
    rows.sort_unstable();
    let bands = sample.bands();
    let mut data = Vec::with_capacity(t * bands);
    for &r in &rows {
        data.extend_from_slice(sample.observations.row_slice(r));
    }
    Ok(Subsample {
        observations: Array::new(t, bands, data).expect("sized"),
        days: rows.iter().map(|&r| sample.days[r]).collect(),
        rows,
    })
}

/// Per-band mean and population standard deviation over every observation
/// of every sample; the deviation is floored.
pub fn fit_normalization<'a, I>(samples: I) -> Result<(Vec<f64>, Vec<f64>), DataError>
where
    I: IntoIterator<Item = &'a TimeSeriesSample>,
{
    let mut n = 0usize;
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    for s in samples {
        if mean.is_empty() {
            mean = vec![0.0; s.bands()];
            m2 = vec![0.0; s.bands()];
        }
        for t in 0..s.len() {
            n += 1;
            for (b, &x) in s.observations.row_slice(t).iter().enumerate() {
                let d = x - mean[b];
                mean[b] += d / n as f64;
                m2[b] += d * (x - mean[b]);
            }
        }
    }
    if n == 0 {
        return Err(DataError::EmptyTrainingSet);
    }
    let std = m2.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
    Ok((mean, std))
}
