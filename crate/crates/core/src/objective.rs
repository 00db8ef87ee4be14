//! Training objective: final-layer CTC plus intermediate-layer CTC terms.
//!
//! Deterministic variants mix `(1 - w) L_ctc + w L_inter`, where `L_inter`
//! is the mean CTC loss over the resolved intermediate positions. The
//! stochastic variant instead picks one of the two losses per step with
//! `P(intermediate) = w`, matching the deterministic mix in expectation.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ctc::{ctc_loss_node, greedy_decode, CtcError, LabelSequence, LogPosteriorGrid};
use crate::encoder::LayerTrace;
use crate::model::CtcHeads;
use crate::params::Bound;
use crate::tape::{Tape, Var};
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("intermediate losses need at least 2 layers, got {0}")]
    TooFewLayers(usize),
    #[error("intermediate position {position} outside 1..{layers}")]
    Position { position: usize, layers: usize },
    #[error("loss weight {0} outside [0, 1]")]
    Weight(f64),
    #[error("number of intermediate losses must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

impl From<TensorError> for ObjectiveError {
    fn from(e: TensorError) -> Self {
        ObjectiveError::Ctc(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Plain CTC on the last layer.
    None,
    /// One intermediate loss at `⌊L/2⌋`.
    Middle,
    /// One intermediate loss at a fixed lower layer.
    Lower(usize),
    /// `K` intermediate losses at `⌊kL/(K+1)⌋`, `k = 1..K`.
    Multiple(usize),
    /// One intermediate loss at a layer drawn uniformly from `⌊L/2⌋..=L-1` each step.
    Random,
    /// Either the final or the middle loss, chosen per step.
    Stochastic,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::None => f.write_str("none"),
            Variant::Middle => f.write_str("middle"),
            Variant::Lower(_) => f.write_str("lower"),
            Variant::Multiple(_) => f.write_str("multiple"),
            Variant::Random => f.write_str("random"),
            Variant::Stochastic => f.write_str("stochastic"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntermediateLossSpec {
    pub variant: Variant,
    pub weight: f64,
}

impl Default for IntermediateLossSpec {
    fn default() -> Self {
        Self {
            variant: Variant::Middle,
            weight: 0.3,
        }
    }
}

impl IntermediateLossSpec {
    pub fn none() -> Self {
        Self {
            variant: Variant::None,
            weight: 0.0,
        }
    }

    pub fn validate(&self, layers: usize) -> Result<(), ObjectiveError> {
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(ObjectiveError::Weight(self.weight));
        }
        if self.variant == Variant::None {
            return Ok(());
        }
        if layers < 2 {
            return Err(ObjectiveError::TooFewLayers(layers));
        }
        match self.variant {
            Variant::Multiple(0) => Err(ObjectiveError::ZeroK),
            // Random draws always land in range; the rest are fixed.
            v => resolve_positions(v, layers, &mut ChaCha8Rng::seed_from_u64(0)).map(|_| ()),
        }
    }
}

/// Layer indices (1-based) carrying an intermediate loss. Only the random
/// variant consumes `rng`.
pub fn resolve_positions<R: Rng + ?Sized>(
    variant: Variant,
    layers: usize,
    rng: &mut R,
) -> Result<Vec<usize>, ObjectiveError> {
    if variant == Variant::None {
        return Ok(Vec::new());
    }
    if layers < 2 {
        return Err(ObjectiveError::TooFewLayers(layers));
    }
    let positions = match variant {
        Variant::None => unreachable!(),
        Variant::Middle | Variant::Stochastic => vec![layers / 2],
        Variant::Lower(p) => vec![p],
        Variant::Multiple(0) => return Err(ObjectiveError::ZeroK),
        Variant::Multiple(k) => (1..=k).map(|i| i * layers / (k + 1)).collect(),
        Variant::Random => vec![rng.random_range(layers / 2..layers)],
    };
    if let Some(&position) = positions.iter().find(|&&p| p == 0 || p >= layers) {
        return Err(ObjectiveError::Position { position, layers });
    }
    Ok(positions)
}

/// Per-step resolution of a spec: where the intermediate losses sit and,
/// for the stochastic variant, which branch was drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPlan {
    pub variant: Variant,
    pub weight: f64,
    pub positions: Vec<usize>,
    /// `Some(true)` when the stochastic draw selected the intermediate loss.
    pub intermediate_drawn: Option<bool>,
}

impl LossPlan {
    pub fn sample<R: Rng + ?Sized>(
        spec: &IntermediateLossSpec,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self, ObjectiveError> {
        spec.validate(layers)?;
        let positions = resolve_positions(spec.variant, layers, rng)?;
        let intermediate_drawn = (spec.variant == Variant::Stochastic).then(|| rng.random_bool(spec.weight));
        Ok(Self {
            variant: spec.variant,
            weight: spec.weight,
            positions,
            intermediate_drawn,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ctc_final: f64,
    /// `(layer, loss)` for each intermediate term.
    pub ctc_intermediate: Vec<(usize, f64)>,
    pub intermediate_drawn: Option<bool>,
}

impl LossBreakdown {
    /// Mean of the intermediate terms, if any.
    pub fn intermediate_mean(&self) -> Option<f64> {
        (!self.ctc_intermediate.is_empty())
            .then(|| self.ctc_intermediate.iter().map(|(_, l)| l).sum::<f64>() / self.ctc_intermediate.len() as f64)
    }
}

/// Builds the training loss on `tape` for one utterance.
pub fn total_loss(
    tape: &mut Tape,
    p: &Bound,
    trace: &LayerTrace,
    y: &LabelSequence,
    plan: &LossPlan,
    heads: &CtcHeads,
) -> Result<(Var, LossBreakdown), ObjectiveError> {
    let logp = heads.final_head.log_posteriors(tape, p, trace.last())?;
    let final_loss = ctc_loss_node(tape, logp, y)?;
    let mut breakdown = LossBreakdown {
        total: 0.0,
        ctc_final: tape.value(final_loss).item(),
        ctc_intermediate: Vec::with_capacity(plan.positions.len()),
        intermediate_drawn: plan.intermediate_drawn,
    };
    if plan.positions.is_empty() {
        breakdown.total = breakdown.ctc_final;
        return Ok((final_loss, breakdown));
    }

    let mut inter_sum = None;
    for &pos in &plan.positions {
        let logp = heads.intermediate().log_posteriors(tape, p, trace.layer(pos))?;
        let l = ctc_loss_node(tape, logp, y)?;
        breakdown.ctc_intermediate.push((pos, tape.value(l).item()));
        inter_sum = Some(match inter_sum {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let inter_sum = inter_sum.expect("non-empty positions");
    let inter = match plan.positions.len() {
        1 => inter_sum,
        k => tape.scale(inter_sum, 1.0 / k as f64)?,
    };

    let total = match plan.intermediate_drawn {
        Some(true) => inter,
        Some(false) => final_loss,
        None => {
            let a = tape.scale(final_loss, 1.0 - plan.weight)?;
            let b = tape.scale(inter, plan.weight)?;
            tape.add(a, b)?
        }
    };
    breakdown.total = tape.value(total).item();
    Ok((total, breakdown))
}

/// Greedy decode from the final layer only; intermediate heads are never
/// consulted at inference.
pub fn eval_decode(
    tape: &mut Tape,
    p: &Bound,
    trace: &LayerTrace,
    heads: &CtcHeads,
) -> Result<LabelSequence, ObjectiveError> {
    let logp = heads.final_head.log_posteriors(tape, p, trace.last())?;
    let grid = LogPosteriorGrid::from_tensor(tape.value(logp))?;
    Ok(greedy_decode(&grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn position_examples() {
        assert_eq!(resolve_positions(Variant::Middle, 12, &mut rng()).unwrap(), vec![6]);
        assert_eq!(
            resolve_positions(Variant::Multiple(3), 24, &mut rng()).unwrap(),
            vec![6, 12, 18]
        );
        assert_eq!(
            resolve_positions(Variant::Multiple(7), 48, &mut rng()).unwrap(),
            vec![6, 12, 18, 24, 30, 36, 42]
        );
        assert_eq!(resolve_positions(Variant::Lower(3), 12, &mut rng()).unwrap(), vec![3]);
        assert_eq!(resolve_positions(Variant::Stochastic, 9, &mut rng()).unwrap(), vec![4]);
        assert!(resolve_positions(Variant::None, 1, &mut rng()).unwrap().is_empty());
    }

    #[test]
    fn position_errors() {
        assert!(matches!(
            resolve_positions(Variant::Lower(12), 12, &mut rng()),
            Err(ObjectiveError::Position {
                position: 12,
                layers: 12
            })
        ));
        assert!(matches!(
            resolve_positions(Variant::Lower(0), 12, &mut rng()),
            Err(ObjectiveError::Position { position: 0, .. })
        ));
        assert!(matches!(
            resolve_positions(Variant::Middle, 1, &mut rng()),
            Err(ObjectiveError::TooFewLayers(1))
        ));
        assert!(matches!(
            resolve_positions(Variant::Multiple(0), 6, &mut rng()),
            Err(ObjectiveError::ZeroK)
        ));
        // ⌊1·2/5⌋ = 0 is below the first layer.
        assert!(resolve_positions(Variant::Multiple(4), 2, &mut rng()).is_err());
    }

    #[test]
    fn multiple_with_one_equals_middle() {
        for layers in 2..64 {
            assert_eq!(
                resolve_positions(Variant::Multiple(1), layers, &mut rng()).unwrap(),
                resolve_positions(Variant::Middle, layers, &mut rng()).unwrap()
            );
        }
    }

    #[test]
    fn random_positions_in_upper_half() {
        let mut r = rng();
        for layers in 2..20 {
            for _ in 0..200 {
                let pos = resolve_positions(Variant::Random, layers, &mut r).unwrap();
                assert!(pos[0] >= layers / 2 && pos[0] < layers);
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(IntermediateLossSpec {
            variant: Variant::Middle,
            weight: 1.5
        }
        .validate(4)
        .is_err());
        assert!(IntermediateLossSpec {
            variant: Variant::Lower(4),
            weight: 0.3
        }
        .validate(4)
        .is_err());
        assert!(IntermediateLossSpec {
            variant: Variant::Random,
            weight: 0.3
        }
        .validate(2)
        .is_ok());
        assert!(IntermediateLossSpec::none().validate(1).is_ok());
    }

    #[test]
    fn stochastic_plan_draws_with_weight() {
        let spec = IntermediateLossSpec {
            variant: Variant::Stochastic,
            weight: 0.3,
        };
        let mut r = rng();
        let n = 20_000;
        let hits = (0..n)
            .filter(|_| LossPlan::sample(&spec, 8, &mut r).unwrap().intermediate_drawn.unwrap())
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.3).abs() < 0.015, "{rate}");
    }
}
