//! Levenshtein alignment counts and corpus error rates.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("cannot score an empty corpus")]
pub struct EmptyCorpus;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_len: usize,
}

impl ErrorCounts {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Distance over reference length (at least 1).
    pub fn rate(&self) -> f64 {
        self.distance() as f64 / self.reference_len.max(1) as f64
    }
}

/// Minimal unit-cost edit distance, split into operation counts. When several
/// optimal alignments exist the backtrace prefers substitution (or match),
/// then insertion, then deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> ErrorCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for (j, cell) in dp.iter_mut().take(w).enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        dp[i * w] = i;
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = dp[i * w + j - 1] + 1;
            let del = dp[(i - 1) * w + j] + 1;
            dp[i * w + j] = sub.min(ins).min(del);
        }
    }

    let mut counts = ErrorCounts {
        reference_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let differs = reference[i - 1] != hypothesis[j - 1];
            if dp[(i - 1) * w + j - 1] + usize::from(differs) == here {
                counts.substitutions += usize::from(differs);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && dp[i * w + j - 1] + 1 == here {
            counts.insertions += 1;
            j -= 1;
        } else {
            counts.deletions += 1;
            i -= 1;
        }
    }
    counts
}

/// Micro-averaged rate: total edits over total reference tokens.
pub fn corpus_rate<'a, T, I>(pairs: I) -> Result<f64, EmptyCorpus>
where
    T: PartialEq + 'a,
    I: IntoIterator<Item = (&'a [T], &'a [T])>,
{
    let mut seen = false;
    let (mut edits, mut words) = (0usize, 0usize);
    for (r, h) in pairs {
        seen = true;
        let c = edit_distance(r, h);
        edits += c.distance();
        words += c.reference_len;
    }
    if !seen {
        return Err(EmptyCorpus);
    }
    Ok(edits as f64 / words.max(1) as f64)
}
