use interctc::ctc::{ctc_loss_node, format_logits, parse_logits};
use interctc::{
    ctc_loss, ctc_loss_bruteforce, greedy_decode, oracle_trials, required_length, CtcError, LabelSequence,
    LogPosteriorGrid, Tape, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_from_logits(frames: usize, classes: usize, logits: &[f64]) -> LogPosteriorGrid {
    LogPosteriorGrid::from_logits(frames, classes, logits).unwrap()
}

#[test]
fn recursion_matches_enumeration() {
    let report = oracle_trials(400, &mut ChaCha8Rng::seed_from_u64(2024));
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert!(report.feasible >= 200, "only {} feasible trials", report.feasible);
    assert!(report.max_abs_diff <= 1e-10, "{}", report.max_abs_diff);
}

#[test]
fn oracle_trials_are_seeded() {
    let a = oracle_trials(50, &mut ChaCha8Rng::seed_from_u64(5));
    let b = oracle_trials(50, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, b);
}

#[test]
fn occupancy_gradient_is_a_distribution_per_frame() {
    // d loss / d log y(t, k) = -posterior occupancy, which sums to -1 per frame.
    for frames in 4..9 {
        let logits: Vec<f64> = (0..frames * 4).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let grid = grid_from_logits(frames, 4, &logits);
        let out = ctc_loss(&grid, &LabelSequence::new(vec![1, 3, 3]).unwrap()).unwrap();
        for t in 0..frames {
            let s: f64 = out.grad[t * 4..(t + 1) * 4].iter().sum();
            assert!((s + 1.0).abs() < 1e-12, "frame {t}: {s}");
        }
    }
}

#[test]
fn logits_gradient_sums_to_zero_per_frame() {
    let frames = 6;
    let logits = Tensor::new(&[frames, 4], (0..24).map(|i| (i as f64 * 0.7).sin() * 2.0).collect()).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(logits);
    let logp = tape.log_softmax(x, 1).unwrap();
    let loss = ctc_loss_node(&mut tape, logp, &LabelSequence::new(vec![2, 1, 2]).unwrap()).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    for t in 0..frames {
        assert!(g.row(t).iter().sum::<f64>().abs() < 1e-12);
    }
}

#[test]
fn uniform_grid_counts_alignments() {
    // Under a uniform grid P(y) = |alignments of y| / C^T; count them by enumeration.
    for (frames, tokens) in [(3, vec![1]), (4, vec![1, 2]), (5, vec![2, 2]), (4, vec![])] {
        let classes: usize = 3;
        let y = LabelSequence::new(tokens).unwrap();
        let mut count = 0u32;
        for code in 0..classes.pow(frames as u32) {
            let mut c = code;
            let path: Vec<usize> = (0..frames)
                .map(|_| {
                    let k = c % classes;
                    c /= classes;
                    k
                })
                .collect();
            if interctc::collapse(&interctc::Alignment(path)) == y {
                count += 1;
            }
        }
        let v = -(classes as f64).ln();
        let grid = LogPosteriorGrid::new(frames, classes, vec![v; frames * classes]).unwrap();
        let expected = -(count as f64).ln() + frames as f64 * (classes as f64).ln();
        assert!((ctc_loss(&grid, &y).unwrap().loss - expected).abs() < 1e-12);
    }
}

#[test]
fn golden_greedy_decodes() {
    let grid = grid_from_logits(
        4,
        3,
        &[-0.1, -3.0, -2.5, -2.0, -0.2, -2.0, -2.0, -0.3, -1.6, -1.9, -2.2, -0.3],
    );
    assert_eq!(greedy_decode(&grid).tokens(), &[1, 2]);
    let again = parse_logits(&format_logits(&grid)).unwrap();
    assert_eq!(again, grid);

    let uniform = format!("2 1\n{v} {v}\n{v} {v}\n", v = -(2f64).ln());
    assert!(greedy_decode(&parse_logits(&uniform).unwrap()).is_empty());
}

#[test]
fn infeasible_and_guard() {
    let grid = grid_from_logits(2, 3, &[0.0; 6]);
    let y = LabelSequence::new(vec![1, 1]).unwrap();
    assert_eq!(required_length(&y), 3);
    assert!(matches!(
        ctc_loss(&grid, &y),
        Err(CtcError::Infeasible { required: 3, frames: 2 })
    ));
    assert_eq!(ctc_loss_bruteforce(&grid, &y).unwrap(), f64::INFINITY);
    let big = grid_from_logits(10, 4, &[0.0; 40]);
    assert!(matches!(
        ctc_loss_bruteforce(&big, &y),
        Err(CtcError::GuardExceeded { .. })
    ));
}

proptest! {
    #[test]
    fn loss_is_non_negative_and_matches_oracle(
        frames in 1usize..6,
        logits in prop::collection::vec(-4.0f64..4.0, 24),
        tokens in prop::collection::vec(1usize..=3, 0..4),
    ) {
        let grid = grid_from_logits(frames, 4, &logits[..frames * 4]);
        let y = LabelSequence::new(tokens).unwrap();
        let reference = ctc_loss_bruteforce(&grid, &y).unwrap();
        match ctc_loss(&grid, &y) {
            Ok(out) => {
                prop_assert!(out.loss >= -1e-12);
                prop_assert!((out.loss - reference).abs() <= 1e-10);
            }
            Err(CtcError::Infeasible { .. }) => prop_assert_eq!(reference, f64::INFINITY),
            Err(e) => prop_assert!(false, "{}", e),
        }
    }
}
