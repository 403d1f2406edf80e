//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{DArray, Result, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per input; all coordinates when the input is smaller.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per input: `max |analytic - numeric| / max(max |numeric|, 1e-8)` over
    /// the probed coordinates.
    pub rel_errors: Vec<f64>,
    pub probed: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences.
///
/// `f` receives a fresh tape with every input registered as a leaf and must
/// return a single-element var.
pub fn check<F>(f: F, inputs: &[DArray], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[DArray]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out).data()[0];
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<DArray> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| DArray::zeros(x.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut probed = 0;
    let mut work: Vec<DArray> = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut max_diff: f64 = 0.0;
        let mut max_num: f64 = 0.0;
        for &c in &coords {
            let orig = x.data()[c];
            work[k].data_mut()[c] = orig + opts.step;
            let plus = eval(&work)?;
            work[k].data_mut()[c] = orig - opts.step;
            let minus = eval(&work)?;
            work[k].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            max_diff = max_diff.max((numeric - analytic[k].data()[c]).abs());
            max_num = max_num.max(numeric.abs());
        }
        probed += coords.len();
        rel_errors.push(max_diff / max_num.max(1e-8));
    }
    Ok(GradCheckReport { rel_errors, probed })
}
