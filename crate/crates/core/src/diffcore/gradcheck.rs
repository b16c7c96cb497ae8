use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, DiffError, Tape, Var};

/// Gradients below this magnitude are beneath the resolution of a central
/// difference in f64, so relative errors are measured against it instead.
const GRAD_FLOOR: f64 = 1e-10;

/// Which parameter entries to probe.
#[derive(Clone, Copy, Debug)]
pub enum Selection {
    All,
    /// `count` entries drawn uniformly over all parameters without replacement.
    Sample { count: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        return 0.0;
    }
    (analytic - numeric).abs() / scale.max(GRAD_FLOOR)
}

/// Compares tape gradients of `f` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for the selected entries of `params`.
///
/// `f` receives a fresh tape with `params` registered as trainable leaves
/// (in order) and must return a scalar.
pub fn check_gradients<F, E>(
    f: F,
    params: &[Array],
    eps: f64,
    tolerance: f64,
    selection: Selection,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<DiffError>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let eval = |values: &[Array]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        v.item().ok_or_else(|| DiffError::NotScalar { shape: v.shape() }.into())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Array> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Array::zeros(p.rows(), p.cols()))
        })
        .collect();

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.len();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(Array::len).sum();
    let mut flat: Vec<usize> = match selection {
        Selection::All => (0..total).collect(),
        Selection::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, total, count.min(total)).into_vec()
        }
    };
    flat.sort_unstable();

    let mut work = params.to_vec();
    let mut entries = Vec::with_capacity(flat.len());
    for k in flat {
        let param = offsets.partition_point(|&o| o <= k) - 1;
        let index = k - offsets[param];
        let orig = work[param].data()[index];
        work[param].data_mut()[index] = orig + eps;
        let plus = eval(&work)?;
        work[param].data_mut()[index] = orig - eps;
        let minus = eval(&work)?;
        work[param].data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[param].data()[index];
        entries.push(GradCheckEntry {
            param,
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}
