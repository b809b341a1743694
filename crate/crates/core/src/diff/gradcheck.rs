//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Denominator floor for the relative error, so that gradients which are zero
    /// analytically compare on an absolute scale.
    pub floor: f64,
    /// Checks at most this many coordinates per input (sampled with `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    /// Coordinates with a kink within `eps`. These are compared against the closer
    /// one-sided difference, which sees only the piece the point lies on.
    pub kinks: usize,
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// One-sided slopes differing by more than this (relative) mark a kink inside
/// `[x - eps, x + eps]`; for a smooth function they differ by only `|f''| eps`.
pub const KINK_REL_JUMP: f64 = 1e-4;

/// Whether `f(x - eps), f(x), f(x + eps)` straddle a kink.
pub fn straddles_kink(fm: f64, f0: f64, fp: f64, eps: f64, floor: f64) -> bool {
    rel_err((fp - f0) / eps, (f0 - fm) / eps, floor) > KINK_REL_JUMP
}

/// Compares the gradient of the scalar `loss(graph, inputs)` against central
/// differences `(f(x + eps) - f(x - eps)) / 2 eps` for every (or a sample of every)
/// coordinate of every input.
pub fn grad_check<F>(loss: F, inputs: &[Tensor], opts: GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = loss(&mut g, &vars);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = loss(&mut g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < t.len() => {
                let mut c = sample(&mut rng, t.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..t.len()).collect(),
        };
        for j in coords {
            let orig = t.data()[j];
            work[i].data_mut()[j] = orig + opts.eps;
            let fp = eval(&work);
            work[i].data_mut()[j] = orig - opts.eps;
            let fm = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[i].data()[j];
            let e = rel_err(a, numeric, opts.floor);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    report
}
