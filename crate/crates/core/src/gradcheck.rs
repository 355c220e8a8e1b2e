//! Central finite-difference checks against the tape's analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps <= 1e-2 {
        Ok(())
    } else {
        Err(Error::Config(format!("finite-difference step {eps} outside (0, 1e-2]")))
    }
}

/// Maximum relative error between the analytic gradient of `f` at `x` and
/// central differences with step `eps`, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let errs = grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        eps,
        None,
    )?;
    Ok(errs[0])
}

/// Which coordinates of each input get probed.
#[derive(Clone, Copy, Debug)]
pub struct CoordSample {
    pub max_per_input: usize,
    pub seed: u64,
}

/// Per-input maximum relative error for a function of several tensors.
///
/// With `sample` set, at most `max_per_input` coordinates of each input are
/// probed, chosen by a seeded generator; otherwise every coordinate is.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    sample_coords: Option<CoordSample>,
) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = sample_coords.map(|s| ChaCha8Rng::seed_from_u64(s.seed));
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for (k, var) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let coords: Vec<usize> = match (&mut rng, sample_coords) {
            (Some(rng), Some(s)) if s.max_per_input < n => {
                let mut c = sample(rng, n, s.max_per_input).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*var).unwrap_or(&zero);
        let mut worst = 0.0f64;
        for i in coords {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        report.push(worst);
    }
    Ok(report)
}
