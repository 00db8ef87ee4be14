//! Connectionist temporal classification: exact likelihood over the
//! blank-interleaved label lattice, its gradient, a brute-force enumeration
//! reference, and greedy decoding.

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::LAYER_NORM_EPS;

pub const BLANK: usize = 0;

/// Largest `(V+1)^T` the enumeration reference accepts.
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("target needs at least {required} frames, input has {frames}")]
    Infeasible { required: usize, frames: usize },
    #[error("blank id 0 cannot appear in a target")]
    BlankInTarget,
    #[error("label id {id} outside 1..={max}")]
    InvalidLabel { id: usize, max: usize },
    #[error("enumeration of {classes}^{frames} alignments exceeds the limit of {BRUTE_FORCE_LIMIT}")]
    GuardExceeded { classes: usize, frames: usize },
    #[error("invalid posterior grid: {0}")]
    InvalidGrid(String),
    #[error("logits file: {0}")]
    Parse(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Target token ids. Blank (0) never appears.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(tokens: Vec<usize>) -> Result<Self, CtcError> {
        if tokens.contains(&BLANK) {
            return Err(CtcError::BlankInTarget);
        }
        Ok(Self(tokens))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Errors if any id exceeds `vocab` (the number of non-blank tokens).
    pub fn check_vocab(&self, vocab: usize) -> Result<(), CtcError> {
        match self.0.iter().find(|&&t| t > vocab) {
            Some(&id) => Err(CtcError::InvalidLabel { id, max: vocab }),
            None => Ok(()),
        }
    }
}

impl fmt::Display for LabelSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Frame-level symbol sequence over `0..=V`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Alignment(pub Vec<usize>);

/// Merge adjacent repeats, then drop blanks.
pub fn collapse(alignment: &Alignment) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in &alignment.0 {
        if prev != Some(s) && s != BLANK {
            out.push(s);
        }
        prev = Some(s);
    }
    LabelSequence(out)
}

/// Fewest frames any alignment of `y` can have: one per label plus a blank
/// between each pair of equal neighbours.
pub fn required_length(y: &LabelSequence) -> usize {
    let repeats = y.0.windows(2).filter(|w| w[0] == w[1]).count();
    y.len() + repeats
}

/// Per-frame log-probabilities, `T × (V+1)`, blank in column 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LogPosteriorGrid {
    frames: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LogPosteriorGrid {
    /// Validates that every row exponentiates to a distribution (within 1e-6).
    pub fn new(frames: usize, classes: usize, data: Vec<f64>) -> Result<Self, CtcError> {
        if frames == 0 || classes < 2 || data.len() != frames * classes {
            return Err(CtcError::InvalidGrid(format!(
                "{} values for {frames} frames of {classes} classes",
                data.len()
            )));
        }
        for (t, row) in data.chunks(classes).enumerate() {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) || (total - 1.0).abs() > 1e-6 {
                return Err(CtcError::InvalidGrid(format!("frame {t} probabilities sum to {total}")));
            }
        }
        Ok(Self { frames, classes, data })
    }

    /// Row-wise log-softmax of arbitrary scores.
    pub fn from_logits(frames: usize, classes: usize, logits: &[f64]) -> Result<Self, CtcError> {
        let data = logits
            .chunks(classes)
            .flat_map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter().map(move |v| v - lse)
            })
            .collect();
        Self::new(frames, classes, data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, CtcError> {
        match *t.shape() {
            [frames, classes] => Self::new(frames, classes, t.data().to_vec()),
            ref s => Err(CtcError::InvalidGrid(format!("expected T×C, got {s:?}"))),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `V + 1`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn vocab(&self) -> usize {
        self.classes - 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    #[inline]
    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.data[t * self.classes + k]
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcOutput {
    /// `-log P(y | x)`.
    pub loss: f64,
    /// d loss / d grid, row-major `T × (V+1)`.
    pub grad: Vec<f64>,
}

/// Negative log-likelihood of `y` by the forward–backward recursion in the
/// log domain, with its gradient with respect to every grid entry.
pub fn ctc_loss(grid: &LogPosteriorGrid, y: &LabelSequence) -> Result<CtcOutput, CtcError> {
    y.check_vocab(grid.vocab())?;
    let frames = grid.frames();
    let required = required_length(y);
    if frames < required {
        return Err(CtcError::Infeasible { required, frames });
    }

    let mut ext = Vec::with_capacity(2 * y.len() + 1);
    ext.push(BLANK);
    for &l in y.tokens() {
        ext.push(l);
        ext.push(BLANK);
    }
    let states = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let idx = |t: usize, s: usize| t * states + s;

    let mut alpha = vec![f64::NEG_INFINITY; frames * states];
    alpha[0] = grid.get(0, ext[0]);
    if states > 1 {
        alpha[1] = grid.get(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[idx(t - 1, s)];
            if s >= 1 {
                acc = log_add(acc, alpha[idx(t - 1, s - 1)]);
            }
            if can_skip(s) {
                acc = log_add(acc, alpha[idx(t - 1, s - 2)]);
            }
            if acc != f64::NEG_INFINITY {
                alpha[idx(t, s)] = acc + grid.get(t, ext[s]);
            }
        }
    }

    // beta[t][s]: log-probability of emitting frames t+1.. given state s at t.
    let mut beta = vec![f64::NEG_INFINITY; frames * states];
    beta[idx(frames - 1, states - 1)] = 0.0;
    if states > 1 {
        beta[idx(frames - 1, states - 2)] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let next = |s2: usize| beta[idx(t + 1, s2)] + grid.get(t + 1, ext[s2]);
            let mut acc = next(s);
            if s + 1 < states {
                acc = log_add(acc, next(s + 1));
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = log_add(acc, next(s + 2));
            }
            beta[idx(t, s)] = acc;
        }
    }

    let mut log_p = alpha[idx(frames - 1, states - 1)];
    if states > 1 {
        log_p = log_add(log_p, alpha[idx(frames - 1, states - 2)]);
    }
    if !log_p.is_finite() {
        return Err(CtcError::Infeasible { required, frames });
    }

    let classes = grid.classes();
    let mut occupancy = vec![f64::NEG_INFINITY; frames * classes];
    for t in 0..frames {
        for s in 0..states {
            let o = &mut occupancy[t * classes + ext[s]];
            *o = log_add(*o, alpha[idx(t, s)] + beta[idx(t, s)]);
        }
    }
    let grad = occupancy.iter().map(|&o| -(o - log_p).exp()).collect();
    Ok(CtcOutput { loss: -log_p, grad })
}

/// Reference likelihood by summing `P(a)` over every alignment `a` that
/// collapses to `y`. Returns `+inf` when no alignment does.
pub fn ctc_loss_bruteforce(grid: &LogPosteriorGrid, y: &LabelSequence) -> Result<f64, CtcError> {
    y.check_vocab(grid.vocab())?;
    let (frames, classes) = (grid.frames(), grid.classes());
    let combos = (classes as u64).checked_pow(frames as u32);
    if combos.is_none_or(|c| c > BRUTE_FORCE_LIMIT) {
        return Err(CtcError::GuardExceeded { classes, frames });
    }
    let mut symbols = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        let a = Alignment(symbols.clone());
        if collapse(&a) == *y {
            let log_pa: f64 = symbols.iter().enumerate().map(|(t, &k)| grid.get(t, k)).sum();
            total += log_pa.exp();
        }
        // Odometer increment; stop after wrapping the last digit.
        let mut pos = 0;
        loop {
            if pos == frames {
                return Ok(-total.ln());
            }
            symbols[pos] += 1;
            if symbols[pos] < classes {
                break;
            }
            symbols[pos] = 0;
            pos += 1;
        }
    }
}

/// Per-frame argmax (lowest id wins ties), then collapse.
pub fn greedy_decode(grid: &LogPosteriorGrid) -> LabelSequence {
    let path = (0..grid.frames())
        .map(|t| {
            grid.row(t)
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (k, &v)| if v > best.1 { (k, v) } else { best },
                )
                .0
        })
        .collect();
    collapse(&Alignment(path))
}

/// Output layer mapping `x_l` (`T × d`) to log-posteriors over blank and
/// `V` tokens: layer norm, affine projection, log-softmax.
#[derive(Clone, Debug)]
pub struct CtcHead {
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

impl CtcHead {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_model: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            norm_gain: store.add(format!("{prefix}.norm.gain"), Tensor::full(&[d_model], 1.0)),
            norm_bias: store.add(format!("{prefix}.norm.bias"), Tensor::zeros(&[d_model])),
            weight: store.add_uniform(format!("{prefix}.proj.weight"), d_model, classes, rng),
            bias: store.add(format!("{prefix}.proj.bias"), Tensor::zeros(&[classes])),
            classes,
        }
    }

    pub fn log_posteriors(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let d = tape.value(p.var(self.weight)).shape()[0];
        if tape.value(x).last_dim() != d {
            return Err(TensorError::ShapeMismatch {
                op: "ctc_output_layer",
                left: tape.value(x).shape().to_vec(),
                right: tape.value(p.var(self.weight)).shape().to_vec(),
            });
        }
        let h = tape.layer_norm(x, p.var(self.norm_gain), p.var(self.norm_bias), LAYER_NORM_EPS)?;
        let z = tape.matmul(h, p.var(self.weight))?;
        let z = tape.add_row(z, p.var(self.bias))?;
        tape.log_softmax(z, 1)
    }
}

/// CTC loss node on the tape, differentiable with respect to `log_probs`.
pub fn ctc_loss_node(tape: &mut Tape, log_probs: Var, y: &LabelSequence) -> Result<Var, CtcError> {
    let grid = LogPosteriorGrid::from_tensor(tape.value(log_probs))?;
    let out = ctc_loss(&grid, y)?;
    Ok(tape.external_scalar(log_probs, out.loss, out.grad)?)
}

/// Parses the decode input format: a `T V` header line, then `T` lines of
/// `V+1` whitespace-separated log-probabilities.
pub fn parse_logits(text: &str) -> Result<LogPosteriorGrid, CtcError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| CtcError::Parse("empty input".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| CtcError::Parse(format!("header `{header}`: {e}")))?;
    let [frames, vocab] = dims[..] else {
        return Err(CtcError::Parse(format!("header `{header}` must be `T V`")));
    };
    let classes = vocab + 1;
    let mut data = Vec::with_capacity(frames * classes);
    for t in 0..frames {
        let line = lines
            .next()
            .ok_or_else(|| CtcError::Parse(format!("expected {frames} frames, found {t}")))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| CtcError::Parse(format!("frame {t}: {e}")))?;
        if row.len() != classes {
            return Err(CtcError::Parse(format!(
                "frame {t} has {} values, expected {classes}",
                row.len()
            )));
        }
        data.extend(row);
    }
    if lines.next().is_some() {
        return Err(CtcError::Parse(format!("more than {frames} frames")));
    }
    LogPosteriorGrid::new(frames, classes, data)
}

pub fn format_logits(grid: &LogPosteriorGrid) -> String {
    let mut out = format!("{} {}\n", grid.frames(), grid.vocab());
    for t in 0..grid.frames() {
        let row: Vec<String> = grid.row(t).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Outcome of comparing [`ctc_loss`] with [`ctc_loss_bruteforce`] on
/// random small problems.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub trials: usize,
    /// Trials where some alignment exists.
    pub feasible: usize,
    pub max_abs_diff: f64,
    /// Descriptions of disagreeing trials.
    pub failures: Vec<String>,
}

impl OracleReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.failures.is_empty() && self.max_abs_diff <= tol
    }
}

/// Random grids with `T <= 6`, `V <= 3`, `U <= 3` (logits uniform in
/// `[-3, 3]`). Infeasible targets must be reported infeasible by both.
pub fn oracle_trials<R: Rng>(trials: usize, rng: &mut R) -> OracleReport {
    let mut report = OracleReport {
        trials,
        feasible: 0,
        max_abs_diff: 0.0,
        failures: Vec::new(),
    };
    for trial in 0..trials {
        let frames = rng.random_range(1..=6);
        let vocab = rng.random_range(1..=3);
        let classes = vocab + 1;
        let logits: Vec<f64> = (0..frames * classes).map(|_| rng.random_range(-3.0..3.0)).collect();
        let grid = LogPosteriorGrid::from_logits(frames, classes, &logits).expect("finite logits");
        let len = rng.random_range(0..=3);
        let y = LabelSequence((0..len).map(|_| rng.random_range(1..=vocab)).collect());
        let reference = ctc_loss_bruteforce(&grid, &y).expect("within enumeration guard");
        match ctc_loss(&grid, &y) {
            Ok(out) => {
                report.feasible += 1;
                let diff = (out.loss - reference).abs();
                report.max_abs_diff = report.max_abs_diff.max(diff);
                if diff.is_nan() {
                    report.failures.push(format!(
                        "trial {trial}: T={frames} V={vocab} y=[{y}] recursion {} vs enumeration {reference}",
                        out.loss
                    ));
                }
            }
            Err(CtcError::Infeasible { .. }) if reference == f64::INFINITY => {}
            Err(e) => report
                .failures
                .push(format!("trial {trial}: y=[{y}] {e} vs enumeration {reference}")),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels(t: &[usize]) -> LabelSequence {
        LabelSequence::new(t.to_vec()).unwrap()
    }

    fn uniform(frames: usize, classes: usize) -> LogPosteriorGrid {
        let v = -(classes as f64).ln();
        LogPosteriorGrid::new(frames, classes, vec![v; frames * classes]).unwrap()
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse(&Alignment(vec![1, 1, 0, 2, 2])), labels(&[1, 2]));
        assert_eq!(collapse(&Alignment(vec![0, 0, 0])), labels(&[]));
        assert_eq!(collapse(&Alignment(vec![1, 0, 1])), labels(&[1, 1]));
    }

    #[test]
    fn required_length_examples() {
        assert_eq!(required_length(&labels(&[1, 2])), 2);
        assert_eq!(required_length(&labels(&[1, 1])), 3);
        assert_eq!(required_length(&labels(&[])), 0);
    }

    #[test]
    fn blank_is_not_a_label() {
        assert!(LabelSequence::new(vec![1, 0]).is_err());
    }

    #[test]
    fn two_frame_single_label() {
        // Alignments (1,0), (0,1), (1,1) each have probability 1/4.
        let out = ctc_loss(&uniform(2, 2), &labels(&[1])).unwrap();
        assert!((out.loss - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((out.loss - 0.28768).abs() < 1e-5);
    }

    #[test]
    fn infeasible_target() {
        let err = ctc_loss(&uniform(1, 2), &labels(&[1, 1])).unwrap_err();
        assert_eq!(err, CtcError::Infeasible { required: 3, frames: 1 });
        let bf = ctc_loss_bruteforce(&uniform(1, 2), &labels(&[1, 1])).unwrap();
        assert_eq!(bf, f64::INFINITY);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let out = ctc_loss(&uniform(3, 2), &labels(&[])).unwrap();
        assert!((out.loss - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert!((ctc_loss_bruteforce(&uniform(3, 2), &labels(&[])).unwrap() - out.loss).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_vocab() {
        assert!(matches!(
            ctc_loss(&uniform(3, 2), &labels(&[2])),
            Err(CtcError::InvalidLabel { id: 2, max: 1 })
        ));
    }

    #[test]
    fn bruteforce_guard() {
        assert!(matches!(
            ctc_loss_bruteforce(&uniform(10, 4), &labels(&[1])),
            Err(CtcError::GuardExceeded { .. })
        ));
    }

    #[test]
    fn grid_rows_must_normalize() {
        assert!(LogPosteriorGrid::new(1, 2, vec![0.0, 0.0]).is_err());
        assert!(LogPosteriorGrid::new(1, 2, vec![0.0, f64::NEG_INFINITY]).is_ok());
    }

    #[test]
    fn greedy_examples() {
        let path = [1usize, 1, 0, 2];
        let mut data = vec![-5.0; 4 * 3];
        for (t, &k) in path.iter().enumerate() {
            data[t * 3 + k] = 0.0;
        }
        let grid = LogPosteriorGrid::from_logits(4, 3, &data).unwrap();
        assert_eq!(greedy_decode(&grid), labels(&[1, 2]));

        let mut data = vec![-9.0; 5 * 3];
        for t in 0..5 {
            data[t * 3] = 0.0;
        }
        let grid = LogPosteriorGrid::from_logits(5, 3, &data).unwrap();
        assert!(greedy_decode(&grid).is_empty());

        // Ties resolve to the lowest id, here blank.
        assert!(greedy_decode(&uniform(2, 2)).is_empty());
    }

    #[test]
    fn logits_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let grid = LogPosteriorGrid::from_logits(4, 3, &raw).unwrap();
        let parsed = parse_logits(&format_logits(&grid)).unwrap();
        assert_eq!(parsed, grid);
    }

    #[test]
    fn logits_file_errors() {
        assert!(matches!(parse_logits(""), Err(CtcError::Parse(_))));
        assert!(matches!(parse_logits("2\n"), Err(CtcError::Parse(_))));
        assert!(matches!(parse_logits("x y\n"), Err(CtcError::Parse(_))));
        assert!(matches!(parse_logits("1 1\n0.0\n"), Err(CtcError::Parse(_))));
        assert!(matches!(
            parse_logits("2 1\n-0.69314718056 -0.69314718056\n"),
            Err(CtcError::Parse(_))
        ));
    }

    #[test]
    fn zero_head_gives_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = CtcHead::new(&mut store, "head", 4, 3, &mut rng);
        store.set(head.weight, Tensor::zeros(&[4, 3]));
        for frames in [1, 5] {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let x = tape.leaf(Tensor::new(&[frames, 4], (0..frames * 4).map(|i| i as f64).collect()).unwrap());
            let out = head.log_posteriors(&mut tape, &p, x).unwrap();
            assert_eq!(tape.value(out).shape(), &[frames, 3]);
            for v in tape.value(out).data() {
                assert!((v + 3f64.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_rejects_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = CtcHead::new(&mut store, "head", 4, 3, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros(&[2, 5]));
        assert!(head.log_posteriors(&mut tape, &p, x).is_err());
    }
}
