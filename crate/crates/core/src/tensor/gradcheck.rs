//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Settings for comparing analytic gradients against central differences.
///
/// The checked function must be deterministic: build any dropout RNG inside
/// it from a fixed seed.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Number of coordinates to sample; `None` checks all of them.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples: Some(64),
            seed: 0,
        }
    }
}

/// `|analytic - numeric| / max(1, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn evaluate<F>(params: &ParamSet, f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    f(&tape, &bound)?.item()
}

/// `(f(p + eps) - f(p - eps)) / 2 eps` along one coordinate.
pub fn central_difference<F>(params: &mut ParamSet, f: &F, param: usize, index: usize, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let original = params.tensors()[param].data()[index];
    params.tensors_mut()[param].data_mut()[index] = original + eps;
    let plus = evaluate(params, f);
    params.tensors_mut()[param].data_mut()[index] = original - eps;
    let minus = evaluate(params, f);
    params.tensors_mut()[param].data_mut()[index] = original;
    Ok((plus? - minus?) / (2.0 * eps))
}

/// Pins a closure to the higher-ranked signature the checker expects; plain
/// closures bound to a `let` otherwise infer a single lifetime.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    f
}

impl GradCheck {
    pub fn analytic<F>(params: &ParamSet, f: &F) -> Result<Vec<Tensor>>
    where
        F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
    {
        let tape = Tape::new();
        let bound = params.bind(&tape, true);
        let loss = f(&tape, &bound)?;
        Ok(tape.backward(loss)?.for_params(&bound))
    }

    /// Maximum relative error over the sampled coordinates.
    pub fn run<F>(&self, params: &ParamSet, f: F) -> Result<f64>
    where
        F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
    {
        let analytic = Self::analytic(params, &f)?;
        self.compare(params, &f, &analytic)
    }

    /// Like [`run`](Self::run) but against caller-supplied gradients.
    pub fn compare<F>(&self, params: &ParamSet, f: &F, analytic: &[Tensor]) -> Result<f64>
    where
        F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
    {
        if !(1e-5..=1e-2).contains(&self.eps) {
            return Err(Error::InvalidArgument(format!("grad-check step {} out of range", self.eps)));
        }
        let coords: Vec<(usize, usize)> = params
            .tensors()
            .iter()
            .enumerate()
            .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
            .collect();
        let chosen: Vec<usize> = match self.samples {
            Some(n) if n < coords.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut idx = sample(&mut rng, coords.len(), n).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..coords.len()).collect(),
        };
        let mut work = params.clone();
        let mut worst = 0.0f64;
        for c in chosen {
            let (p, i) = coords[c];
            let numeric = central_difference(&mut work, f, p, i, self.eps)?;
            worst = worst.max(relative_error(analytic[p].data()[i], numeric));
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::from_rows(&[[0.3, -1.2], [2.0, 0.1]]).unwrap());
        let x = Tensor::from_rows(&[[1.5, -0.5]]).unwrap();
        let check = GradCheck {
            samples: None,
            ..Default::default()
        };
        let err = check
            .run(&params, |tape, b| tape.constant(x.clone()).matmul(b[w])?.sum())
            .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::from_rows(&[[0.4, 0.9, -0.3]]).unwrap());
        let f = objective(|_, b| b[w].tanh()?.scale(3.0)?.sum());
        let mut grads = GradCheck::analytic(&params, &f).unwrap();
        grads[0].data_mut()[0] *= 2.0;
        let check = GradCheck {
            samples: None,
            ..Default::default()
        };
        let err = check.compare(&params, &f, &grads).unwrap();
        assert!(err > 0.4, "{err}");
    }
}
