//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    /// Check at most this many (randomly chosen) elements of the input.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-8,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ElementCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub elements: Vec<ElementCheck>,
    /// Elements skipped because the perturbation crossed a ReLU or max-pool kink.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Checks `d f(x) / dx` for a function `f` built on a fresh [`Graph`].
///
/// Non-scalar outputs are reduced to a scalar with a fixed pseudo-random
/// weighting so every output element contributes.
pub fn finite_diff_check<F>(f: F, x: &Tensor, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_surrogate(&f, &f, x, cfg)
}

/// Like [`finite_diff_check`], but differentiates `analytic` while the finite
/// differences are taken on `numeric`.
///
/// This is how stop-gradient constructs are checked: `numeric` is the
/// surrogate with the barred term frozen at the base point.
pub fn finite_diff_check_surrogate<A, N>(
    analytic: A,
    numeric: N,
    x: &Tensor,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    A: Fn(&mut Graph, Var) -> Result<Var>,
    N: Fn(&mut Graph, Var) -> Result<Var>,
{
    if cfg.h <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = analytic(&mut g, xv)?;
    let weights = reduction_weights(g.value(out).len(), cfg.seed);
    let loss = reduce(&mut g, out, &weights)?;
    g.backward(loss)?;
    let grad = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let xv = g.constant(t);
        let out = numeric(&mut g, xv)?;
        let loss = reduce(&mut g, out, &weights)?;
        Ok((g.value(loss).item(), g.kink_signature()))
    };

    let (base, base_sig) = eval(x.clone())?;
    let (again, _) = eval(x.clone())?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::contract(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }

    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut indices: Vec<usize> = match cfg.max_elements {
        Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
        _ => (0..n).collect(),
    };
    indices.sort_unstable();

    let mut elements = Vec::with_capacity(indices.len());
    let mut skipped = 0;
    for i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += cfg.h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= cfg.h;
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        if sp != base_sig || sm != base_sig {
            skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * cfg.h);
        let analytic = grad.data()[i];
        let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
        elements.push(ElementCheck {
            index: i,
            analytic,
            numeric,
            rel_err: (analytic - numeric).abs() / denom,
        });
    }
    let max_rel_err = elements.iter().fold(0.0_f64, |m, e| m.max(e.rel_err));
    Ok(GradCheckReport {
        passed: max_rel_err < cfg.tol && !elements.is_empty(),
        elements,
        skipped_kinks: skipped,
        max_rel_err,
    })
}

fn reduction_weights(n: usize, seed: u64) -> Option<Tensor> {
    if n == 1 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let w = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Some(Tensor::from_parts(vec![n], w))
}

fn reduce(g: &mut Graph, out: Var, weights: &Option<Tensor>) -> Result<Var> {
    match weights {
        None => Ok(out),
        Some(w) => {
            let shape = g.shape(out).to_vec();
            let w = g.constant(w.reshape(&shape)?);
            let prod = g.mul(out, w)?;
            Ok(g.sum(prod))
        }
    }
}
