//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    match tape.value(out) {
        [v] => Ok(*v),
        _ => Err(Error::NonScalarLoss(tape.shape(out).to_vec())),
    }
}

/// Relative error used throughout: `|a - c| / max(|a|, |c|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn check_entries<F>(f: &F, params: &[Tensor], eps: f64, entries: &[Vec<usize>]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Contract(format!(
            "finite-difference eps {eps} outside [1e-6, 1e-4]"
        )));
    }
    let mut work: Vec<Tensor> = params.iter().map(|p| p.clone().with_grad(true)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = work.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&work)
        .map(|(v, p)| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    for (ti, idxs) in entries.iter().enumerate() {
        for &j in idxs {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let plus = eval(f, &work)?;
            work[ti].data_mut()[j] = orig - eps;
            let minus = eval(f, &work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[ti][j], numeric));
        }
    }
    Ok(worst)
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients over every entry of every tensor in `params`.
///
/// `f` must build a deterministic scalar on the given tape from leaves
/// bound to `params` (in order). `eps` must lie in `[1e-6, 1e-4]`.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let entries: Vec<Vec<usize>> = params.iter().map(|p| (0..p.numel()).collect()).collect();
    check_entries(&f, params, eps, &entries)
}

/// Like [`finite_difference_check`], but probes at most `per_tensor`
/// seeded-random entries of each tensor. Meant for models too large to
/// perturb exhaustively.
pub fn finite_difference_check_sampled<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            let n = p.numel();
            if n <= per_tensor {
                (0..n).collect()
            } else {
                let mut v = sample(&mut rng, n, per_tensor).into_vec();
                v.sort_unstable();
                v
            }
        })
        .collect();
    check_entries(&f, params, eps, &entries)
}
