use serde::{Deserialize, Serialize};

use crate::ctc::LabelSequence;

/// Unit-cost Levenshtein alignment counts of a hypothesis against a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Errors per reference token; an empty reference counts as length one.
    pub fn rate(&self, ref_len: usize) -> f64 {
        self.total() as f64 / ref_len.max(1) as f64
    }

    pub fn add(&mut self, other: EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
    }
}

/// Minimum-cost alignment. Among equal-cost alignments the backtrace prefers
/// match/substitution, then deletion, then insertion.
pub fn edit_distance(hyp: &LabelSequence, reference: &LabelSequence) -> EditCounts {
    let (h, r) = (hyp.tokens(), reference.tokens());
    let cols = h.len() + 1;
    // cost[i][j]: reference prefix i against hypothesis prefix j.
    let mut cost = vec![0usize; (r.len() + 1) * cols];
    for j in 0..cols {
        cost[j] = j;
    }
    for i in 1..=r.len() {
        cost[i * cols] = i;
        for j in 1..cols {
            let diag = cost[(i - 1) * cols + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = cost[(i - 1) * cols + j] + 1;
            let ins = cost[i * cols + j - 1] + 1;
            cost[i * cols + j] = diag.min(del).min(ins);
        }
    }
    let mut out = EditCounts::default();
    let (mut i, mut j) = (r.len(), h.len());
    while i > 0 || j > 0 {
        let here = cost[i * cols + j];
        if i > 0 && j > 0 {
            let sub = usize::from(r[i - 1] != h[j - 1]);
            if cost[(i - 1) * cols + j - 1] + sub == here {
                out.substitutions += sub;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[(i - 1) * cols + j] + 1 == here {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out
}
