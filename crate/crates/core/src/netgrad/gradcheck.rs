//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Mode, ParameterStore, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error, so near-zero gradients compare absolutely.
    pub rel_floor: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked exhaustively.
    pub coords_per_param: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, rel_floor: 1e-5, coords_per_param: 16, mode: Mode::Train, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU, floor or margin branch.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self { max_rel_err: 0.0, worst: None, checked: 0, skipped: 0 }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the scalar built by `forward` against central differences for every
/// trainable parameter in `store`. The store is restored before returning.
pub fn grad_check<F>(store: &mut ParameterStore, forward: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore, &mut Graph) -> Result<Var>,
{
    let eval = |store: &ParameterStore| -> Result<(f64, u64)> {
        let mut g = Graph::new(opts.mode).track_branches();
        let out = forward(store, &mut g)?;
        Ok((g.value(out).data()[0], g.branch_signature()))
    };
    let mut g = Graph::new(opts.mode).track_branches();
    let out = forward(store, &mut g)?;
    let signature = g.branch_signature();
    let grads = g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for name in store.trainable_names() {
        let analytic = match grads.param(&name) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; store.value(&name)?.len()],
        };
        let n = analytic.len();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            let mut picked = sample(&mut rng, n, opts.coords_per_param).into_vec();
            picked.sort_unstable();
            picked
        };
        for idx in coords {
            let original = store.value(&name)?.data()[idx];
            store.value_mut(&name)?.data_mut()[idx] = original + opts.step;
            let plus = eval(store);
            store.value_mut(&name)?.data_mut()[idx] = original - opts.step;
            let minus = eval(store);
            store.value_mut(&name)?.data_mut()[idx] = original;
            let ((lp, sp), (lm, sm)) = (plus?, minus?);
            if sp != signature || sm != signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            let err = relative_error(analytic[idx], numeric, opts.rel_floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((name.clone(), idx));
                }
            }
        }
    }
    Ok(report)
}
