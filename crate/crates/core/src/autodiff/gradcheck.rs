//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::tensor::{ParamStore, Tensor};
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per tensor (sampled with `seed`). `None` checks all.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: FD_STEP,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Tape and finite-difference values at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
}

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compare the tape gradient of `f` with central differences for every trainable
/// tensor in `store`. `f` must be deterministic: any randomness it uses has to be
/// re-seeded identically on every call.
pub fn grad_check_store<F>(store: &ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = f(&mut g)?;
        Ok(g.scalar(loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coords_checked: 0,
    };
    for id in store.ids() {
        let tensor = store.get(id);
        if !tensor.requires_grad {
            continue;
        }
        let n = tensor.len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let zeros;
        let grad = match analytic.get(id) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; n];
                &zeros
            }
        };
        for i in coords {
            let orig = tensor.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(grad[i], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
                report.worst_values = (grad[i], numeric);
            }
        }
    }
    Ok(report)
}

/// Single-input form: checks `d f(x) / dx` for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let mut x = x.clone();
    x.requires_grad = true;
    let id = store.insert("x", x);
    let report = grad_check_store(
        &store,
        |g| {
            let v = g.param(id);
            f(g, v)
        },
        GradCheckOptions::default(),
    )?;
    Ok(report.max_rel_error)
}
