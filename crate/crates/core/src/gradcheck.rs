//! Central finite-difference verification of tape gradients.

pub mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Lower bound on the relative-error denominator. Components smaller than
    /// this are effectively compared in absolute terms.
    pub rel_floor: f64,
    /// Check at most this many coordinates per parameter, chosen by `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            rel_floor: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_error < tol)
    }
}

fn evaluate<F, E>(f: &F, params: &[Tensor]) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares the tape gradient of the scalar `f(params)` with central
/// differences, one report entry per named parameter.
pub fn gradcheck<F, E>(f: F, params: &[(String, Tensor)], opts: &GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, p)| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor> = params.iter().map(|(_, p)| p.clone()).collect();
    let mut report = GradCheckReport::default();
    for (pi, (name, p)) in params.iter().enumerate() {
        let analytic = tape
            .grad(vars[pi])
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; p.len()]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < p.len() => {
                let mut c = sample(&mut rng, p.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.len()).collect(),
        };
        let mut entry = ParamCheck {
            name: name.clone(),
            checked: coords.len(),
            max_abs_error: 0.0,
            max_rel_error: 0.0,
        };
        for &i in &coords {
            let orig = p.data()[i];
            values[pi].data_mut()[i] = orig + opts.eps;
            let plus = evaluate(&f, &values)?;
            values[pi].data_mut()[i] = orig - opts.eps;
            let minus = evaluate(&f, &values)?;
            values[pi].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let abs = (numeric - analytic[i]).abs();
            let denom = numeric.abs().max(analytic[i].abs()).max(opts.rel_floor);
            entry.max_abs_error = entry.max_abs_error.max(abs);
            entry.max_rel_error = entry.max_rel_error.max(abs / denom);
        }
        report.params.push(entry);
    }
    Ok(report)
}
