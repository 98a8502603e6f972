//! Central-difference verification of tape gradients.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dmff::{dmff_forward_on, DmffConfig, DmffWeights};
use crate::error::{Error, Result};
use crate::graph::{GradRecord, Graph, Var};
use crate::params::Parameters;
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`]. Below this magnitude the
/// comparison is effectively absolute: with `tol = 1e-4` two gradients
/// under `1e-6` must agree to `1e-10`, which is still well above the
/// round-off of a central difference at `eps = 1e-5`.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates drawn per tensor; all of them when the tensor is smaller.
    pub samples: usize,
    pub seed: u64,
    /// Overrides α, β, γ, δ of every CFE module after initialization.
    pub coefficients: Option<[f64; 4]>,
    /// Negates the analytic gradient of this tensor before comparison.
    /// Used to confirm the checker catches a wrong adjoint.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            samples: 20,
            seed: 0,
            coefficients: None,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub sampled: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.tensors
            .iter()
            .filter(|t| !(t.max_rel_error < self.tol))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn to_text(&self) -> String {
        let width = self.tensors.iter().map(|t| t.name.len()).max().unwrap_or(4);
        let mut out = String::new();
        for t in &self.tensors {
            let verdict = if t.max_rel_error < self.tol { "ok" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{:<width$}  n={:<4} max_rel={:.3e}  at {:<5} analytic={:+.6e} numeric={:+.6e}  {verdict}",
                t.name, t.sampled, t.max_rel_error, t.worst_index, t.analytic, t.numeric
            );
        }
        let _ = writeln!(
            out,
            "max relative error {:.3e} (tol {:.1e}, eps {:.1e}): {}",
            self.max_rel_error(),
            self.tol,
            self.eps,
            if self.passed() { "pass" } else { "fail" }
        );
        out
    }
}

fn nudge<P: Parameters<f64>>(params: &mut P, name: &str, index: usize, delta: f64) {
    params.visit_mut("", &mut |n, _, t| {
        if n == name {
            let d = t.data_mut();
            d[index] += delta;
        }
    });
}

/// Compares analytic gradients of `loss` against central differences on a
/// seeded sample of coordinates of every tensor in `params`.
///
/// Tensors absent from the gradient record are treated as having zero
/// gradient. `tamper` sees the record before comparison.
pub fn check_parameters<P, F>(
    params: &mut P,
    loss: F,
    opts: &GradCheckOptions,
    tamper: impl FnOnce(&mut GradRecord<f64>),
) -> Result<GradCheckReport>
where
    P: Parameters<f64>,
    F: Fn(&mut Graph<f64>, &P) -> Result<Var>,
{
    let eval = |p: &P| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, p)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let out = loss(&mut g, params)?;
    if g.value(out).numel() != 1 {
        return Err(Error::dim("gradient check loss", &[1], g.shape(out)));
    }
    let mut grads = g.backward_scalar(out)?;
    tamper(&mut grads);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tensors = Vec::new();
    for (name, _, tensor) in params.named_tensors() {
        let numel = tensor.numel();
        let mut picks = sample(&mut rng, numel, opts.samples.min(numel)).into_vec();
        picks.sort_unstable();
        let mut check = TensorCheck {
            name: name.clone(),
            numel,
            sampled: picks.len(),
            max_rel_error: 0.0,
            worst_index: picks[0],
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &picks {
            let analytic = grads.get(&name).map_or(0.0, |t| t.data()[i]);
            nudge(params, &name, i, opts.eps);
            let plus = eval(params);
            nudge(params, &name, i, -2.0 * opts.eps);
            let minus = eval(params);
            nudge(params, &name, i, opts.eps);
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let err = relative_error(analytic, numeric);
            let err = if err.is_nan() { f64::INFINITY } else { err };
            if i == picks[0] || err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        eps: opts.eps,
        tol: opts.tol,
        tensors,
    })
}

/// Seeded weights and input triple for a pipeline check.
pub fn check_fixture(
    cfg: &DmffConfig,
    seed: u64,
) -> Result<(DmffWeights<f64>, [Tensor<f64>; 3])> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wts = DmffWeights::<f64>::init(cfg, &mut rng)?;
    let shape = [cfg.height, cfg.width, cfg.channels];
    let inputs = [
        Tensor::uniform(&shape, 1.0, &mut rng),
        Tensor::uniform(&shape, 1.0, &mut rng),
        Tensor::uniform(&shape, 1.0, &mut rng),
    ];
    Ok((wts, inputs))
}

/// Checks every weight tensor of the pipeline under `cfg` against central
/// differences, with loss = mean squared error to a random target.
pub fn grad_check(cfg: &DmffConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (mut wts, [f_r, f_t, target]) = check_fixture(cfg, opts.seed)?;
    if let Some([a, b, c, d]) = opts.coefficients {
        wts.set_coefficients(a, b, c, d);
    }
    let loss = |g: &mut Graph<f64>, w: &DmffWeights<f64>| -> Result<Var> {
        let r = g.input(f_r.clone());
        let t = g.input(f_t.clone());
        let out = dmff_forward_on(g, r, t, cfg, w)?;
        g.mse(out.output, target.clone())
    };
    let corrupt = opts.corrupt.clone();
    check_parameters(&mut wts, loss, opts, |grads| {
        if let Some(name) = corrupt {
            if let Some(t) = grads.get_mut(&name) {
                *t = t.scale(-1.0);
            }
        }
    })
}
