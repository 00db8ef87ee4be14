//! Ready-made gradient checks: every tape primitive on random inputs, and a
//! two-layer encoder trained through the combined CTC objective.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, GradCheckOptions, GradCheckReport};
use crate::ctc::{ctc_loss_node, LabelSequence};
use crate::encoder::{EncoderConfig, LayerKind};
use crate::model::{Model, ModelConfig};
use crate::objective::{total_loss, IntermediateLossSpec, LossPlan, ObjectiveError, Variant};
use crate::params::Bound;
use crate::tape::{Primitive, Tape, Var};
use crate::tensor::Tensor;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// A few trials per primitive and sampled encoder coordinates.
    Small,
    /// Fifty trials per primitive and every encoder coordinate.
    Full,
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(Scale::Small),
            "full" => Ok(Scale::Full),
            _ => Err(format!("unknown scale `{s}` (expected small or full)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, ObjectiveError>>;

fn uniform<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("valid shape")
}

/// Random linear functional of a matrix: `sum(out · w)` with `w` a fixed
/// column, so every output coordinate reaches the loss with its own weight.
fn project(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var, ObjectiveError> {
    let w = tape.leaf(w.clone());
    let col = tape.matmul(out, w)?;
    Ok(tape.sum(col)?)
}

fn case<R: Rng>(prim: Primitive, trial: usize, rng: &mut R) -> (Vec<(String, Tensor)>, Objective) {
    let named = |pairs: Vec<(&str, Tensor)>| pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    let w = |rng: &mut R, n: usize| uniform(rng, &[n, 1]);
    match prim {
        Primitive::MatMul => {
            let params = named(vec![("a", uniform(rng, &[3, 4])), ("b", uniform(rng, &[4, 2]))]);
            // The usual readout is itself a product; a flipped rule would cancel out.
            let f = move |t: &mut Tape, v: &[Var]| {
                let o = t.matmul(v[0], v[1])?;
                let s = t.sigmoid(o)?;
                Ok(t.sum(s)?)
            };
            (params, Box::new(f))
        }
        Primitive::Transpose => {
            let probe = w(rng, 3);
            let params = named(vec![("a", uniform(rng, &[3, 4]))]);
            let f = move |t: &mut Tape, v: &[Var]| {
                let o = t.transpose(v[0])?;
                project(t, o, &probe)
            };
            (params, Box::new(f))
        }
        Primitive::Add => {
            let probe = w(rng, 4);
            let params = named(vec![("a", uniform(rng, &[3, 4])), ("b", uniform(rng, &[3, 4]))]);
            let f = move |t: &mut Tape, v: &[Var]| {
                let o = t.add(v[0], v[1])?;
                project(t, o, &probe)
            };
            (params, Box::new(f))
        }
        Primitive::AddRow => {
            let probe = w(rng, 4);
            let params = named(vec![("a", uniform(rng, &[3, 4])), ("row", uniform(rng, &[4]))]);
            let f = move |t: &mut Tape, v: &[Var]| {
                let o = t.add_row(v[0], v[1])?;
                project(t, o, &probe)
            };
            (params, Box::new(f))
        }
        Primitive::Scale => {
            let probe = w(rng, 4);
            let c = rng.random_range(-2.0..2.0);
            let params = named(vec![("a", uniform(rng, &[3, 4]))]);
            let f = move |t: &mut Tape, v: &[Var]| {
                let o = t.scale(v[0], c)?;
                project(t, o, &probe)
            };
            (params, Box::new(f))
        }
        Primitive::Relu | Primitive::Sigmoid | Primitive::Swish => {
            let probe = w(rng, 4);
            let params = named(vec![("a", uniform(rng, &[3, 4]))]);
            let f = move |t: &mut Tape, v: &[Var]| {
                let o = match prim {
                    Primitive::Relu => t.relu(v[0])?,
                    Primitive::Sigmoid => t.sigmoid(v[0])?,
                    _ => t.swish(v[0])?,
                };
                project(t, o, &probe)
            };
            (params, Box::new(f))
        }
        Primitive::Glu => {
            let probe = w(rng, 3);
            let params = named(vec![("a", uniform(rng, &[3, 6]))]);
            let f = move |t: &mut Tape, v: &[Var]| {
                let o = t.glu(v[0])?;
                project(t, o, &probe)
            };
            (params, Box::new(f))
        }
        Primitive::Softmax | Primitive::LogSoftmax => {
            let axis = trial % 2;
            let probe = w(rng, 4);
            let params = named(vec![("a", uniform(rng, &[3, 4]))]);
            let f = move |t: &mut Tape, v: &[Var]| {
                let o = if prim == Primitive::Softmax {
                    t.softmax(v[0], axis)?
                } else {
                    t.log_softmax(v[0], axis)?
                };
                project(t, o, &probe)
            };
            (params, Box::new(f))
        }
        Primitive::LayerNorm => {
            let probe = w(rng, 4);
            let params = named(vec![
                ("x", uniform(rng, &[3, 4])),
                ("gain", uniform(rng, &[4])),
                ("bias", uniform(rng, &[4])),
            ]);
            let f = move |t: &mut Tape, v: &[Var]| {
                let o = t.layer_norm(v[0], v[1], v[2], crate::LAYER_NORM_EPS)?;
                project(t, o, &probe)
            };
            (params, Box::new(f))
        }
        Primitive::DepthwiseConv => {
            let probe = w(rng, 3);
            let params = named(vec![("x", uniform(rng, &[5, 3])), ("kernel", uniform(rng, &[3, 3]))]);
            let f = move |t: &mut Tape, v: &[Var]| {
                let o = t.depthwise_conv1d(v[0], v[1])?;
                project(t, o, &probe)
            };
            (params, Box::new(f))
        }
        Primitive::SliceCols => {
            let probe = w(rng, 3);
            let params = named(vec![("a", uniform(rng, &[3, 5]))]);
            let f = move |t: &mut Tape, v: &[Var]| {
                let o = t.slice_cols(v[0], 1, 4)?;
                project(t, o, &probe)
            };
            (params, Box::new(f))
        }
        Primitive::ConcatCols => {
            let probe = w(rng, 5);
            let params = named(vec![("a", uniform(rng, &[3, 2])), ("b", uniform(rng, &[3, 3]))]);
            let f = move |t: &mut Tape, v: &[Var]| {
                let o = t.concat_cols(&[v[0], v[1]])?;
                project(t, o, &probe)
            };
            (params, Box::new(f))
        }
        Primitive::Sum => {
            let params = named(vec![("a", uniform(rng, &[3, 4]))]);
            let f = |t: &mut Tape, v: &[Var]| Ok(t.sum(v[0])?);
            (params, Box::new(f))
        }
        Primitive::External => {
            let frames = rng.random_range(2..=5);
            // A repeated label needs a blank between its copies.
            let tokens = if frames >= 4 { vec![1, 2, 2] } else { vec![1, 2] };
            let labels = LabelSequence::new(tokens).expect("non-blank labels");
            let params = named(vec![("logits", uniform(rng, &[frames, 3]))]);
            let f = move |t: &mut Tape, v: &[Var]| {
                let logp = t.log_softmax(v[0], 1)?;
                Ok(ctc_loss_node(t, logp, &labels)?)
            };
            (params, Box::new(f))
        }
    }
}

fn merge(into: &mut GradCheckReport, other: GradCheckReport) {
    for p in other.params {
        match into.params.iter_mut().find(|q| q.name == p.name) {
            Some(q) => {
                q.checked += p.checked;
                q.max_abs_error = q.max_abs_error.max(p.max_abs_error);
                q.max_rel_error = q.max_rel_error.max(p.max_rel_error);
            }
            None => into.params.push(p),
        }
    }
}

/// `trials` independent random instances of one primitive, errors merged
/// per input name.
pub fn check_primitive(prim: Primitive, trials: usize, seed: u64) -> Result<GradCheckReport, ObjectiveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for trial in 0..trials {
        let (params, f) = case(prim, trial, &mut rng);
        merge(&mut report, gradcheck(f, &params, &GradCheckOptions::default())?);
    }
    Ok(report)
}

/// Two-layer model of `kind` with a separate intermediate head, four input
/// frames, a middle intermediate loss at `w = 0.3`, and stochastic-depth
/// branch scaling active with every layer kept.
pub fn check_composite(
    kind: LayerKind,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, ObjectiveError> {
    let config = ModelConfig {
        encoder: EncoderConfig {
            layers: 2,
            kind,
            d_model: 8,
            heads: 2,
            d_ff: 8,
            conv_kernel: 3,
            p_last: 0.7,
            input_dim: 3,
        },
        vocab: 3,
        shared_head: false,
        seed,
    };
    let model = Model::new(config).expect("valid composite config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = uniform(&mut rng, &[4, 3]);
    let y = LabelSequence::new(vec![1, 3]).expect("labels");
    let spec = IntermediateLossSpec {
        variant: Variant::Middle,
        weight: 0.3,
    };
    let plan = LossPlan::sample(&spec, 2, &mut rng)?;
    let params: Vec<(String, Tensor)> = model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let f = |t: &mut Tape, v: &[Var]| {
        let p = Bound::from_vars(v.to_vec());
        let trace = model.encoder.forward_masked(t, &p, &x, &[true, true])?;
        let (loss, _) = total_loss(t, &p, &trace, &y, &plan, &model.heads)?;
        Ok(loss)
    };
    let opts = GradCheckOptions {
        max_coords,
        seed,
        ..Default::default()
    };
    gradcheck(f, &params, &opts)
}

/// Every primitive, then the composite for both layer kinds.
pub fn run(scale: Scale, seed: u64) -> Result<Vec<SuiteEntry>, ObjectiveError> {
    let (trials, coords, composites) = match scale {
        Scale::Small => (3, Some(6), 1),
        Scale::Full => (50, None, 3),
    };
    let mut out = Vec::new();
    for (i, prim) in Primitive::ALL.into_iter().enumerate() {
        out.push(SuiteEntry {
            name: prim.name().to_string(),
            report: check_primitive(prim, trials, seed.wrapping_add(i as u64))?,
        });
    }
    for kind in [LayerKind::Transformer, LayerKind::Conformer] {
        let mut report = GradCheckReport::default();
        for c in 0..composites {
            merge(&mut report, check_composite(kind, coords, seed.wrapping_add(100 + c))?);
        }
        out.push(SuiteEntry {
            name: format!("{}+ctc", kind.name()),
            report,
        });
    }
    Ok(out)
}
