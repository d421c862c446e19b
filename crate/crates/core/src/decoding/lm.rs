//! Backoff n-gram language model over the CTC vocabulary.
//!
//! Text format (ARPA style). Lines starting with `#` and blank lines are
//! ignored. Probabilities and backoff weights are base-10 logarithms.
//!
//! ```text
//! \data\
//! ngram 1=<count>
//! ngram 2=<count>
//!
//! \1-grams:
//! <log10 p> <w> [<log10 backoff>]
//!
//! \2-grams:
//! <log10 p> <w1> <w2> [<log10 backoff>]
//!
//! \end\
//! ```
//!
//! Tokens are vocabulary symbols plus `<s>` and `</s>`. For a history `h`
//! and token `w`, `P(w | h)` is the listed entry when `(h, w)` exists and
//! otherwise `backoff(h) · P(w | h[1..])`, with a missing backoff counting as
//! one. Every listed history must define a distribution over the symbols and
//! `</s>` that sums to one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::ctc::{LabelSequence, Vocab};
use crate::error::{Error, Result};

pub const LM_NORMALIZATION_TOL: f64 = 1e-6;

/// Absolute discount applied to every observed higher-order count.
const DISCOUNT: f64 = 0.5;
/// `log10` of probability zero in the text format.
const LOG10_ZERO: f64 = -99.0;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    log10_prob: f64,
    log10_backoff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NGramLm {
    order: usize,
    vocab: Vocab,
    /// `tables[n − 1]` holds the n-grams.
    tables: Vec<BTreeMap<Vec<usize>, Entry>>,
}

impl NGramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn num_symbols(&self) -> usize {
        self.vocab.len()
    }

    fn bos(&self) -> usize {
        self.vocab.len()
    }

    fn eos(&self) -> usize {
        self.vocab.len() + 1
    }

    fn token_name(&self, id: usize) -> &str {
        if id == self.bos() {
            "<s>"
        } else if id == self.eos() {
            "</s>"
        } else {
            self.vocab.symbol(id).expect("symbol id")
        }
    }

    fn token_id(&self, s: &str) -> Result<usize> {
        match s {
            "<s>" => Ok(self.bos()),
            "</s>" => Ok(self.eos()),
            _ => self
                .vocab
                .index_of(s)
                .ok_or_else(|| Error::Format(format!("token {s:?} is not in the vocabulary"))),
        }
    }

    /// `log10 P(w | history)` with backoff; `history` may be any length.
    fn log10_prob_ids(&self, history: &[usize], w: usize) -> f64 {
        let keep = history.len().min(self.order - 1);
        let mut h = &history[history.len() - keep..];
        let mut acc = 0.0;
        loop {
            let mut key = h.to_vec();
            key.push(w);
            if let Some(e) = self.tables[h.len()].get(&key) {
                return acc + e.log10_prob;
            }
            if h.is_empty() {
                return LOG10_ZERO;
            }
            if let Some(e) = self.tables[h.len() - 1].get(h) {
                acc += e.log10_backoff;
            }
            h = &h[1..];
        }
    }

    /// Natural-log probability of `token` (or `</s>` when `None`) after the
    /// symbols in `context`; `at_start` prefixes the history with `<s>`.
    pub fn log_prob(&self, context: &[usize], at_start: bool, token: Option<usize>) -> f64 {
        let mut h = Vec::with_capacity(context.len() + 1);
        if at_start {
            h.push(self.bos());
        }
        h.extend_from_slice(context);
        let w = token.unwrap_or(self.eos());
        self.log10_prob_ids(&h, w) * std::f64::consts::LN_10
    }

    /// Natural-log probability of a whole sentence including `</s>`.
    pub fn sentence_log_prob(&self, y: &LabelSequence) -> f64 {
        let mut h = vec![self.bos()];
        let mut total = 0.0;
        for &w in y.tokens().iter().chain(std::iter::once(&self.eos())) {
            total += self.log10_prob_ids(&h, w);
            h.push(w);
        }
        total * std::f64::consts::LN_10
    }

    /// Checks that every listed history normalizes over symbols and `</s>`.
    pub fn validate(&self) -> Result<()> {
        let outcomes: Vec<usize> = (0..self.vocab.len()).chain(std::iter::once(self.eos())).collect();
        let mut histories: Vec<Vec<usize>> = vec![vec![]];
        for table in &self.tables[..self.order - 1] {
            histories.extend(table.keys().filter(|k| *k.last().unwrap() != self.eos()).cloned());
        }
        for h in histories {
            let total: f64 = outcomes.iter().map(|&w| 10f64.powf(self.log10_prob_ids(&h, w))).sum();
            if !((total - 1.0).abs() <= LM_NORMALIZATION_TOL) {
                let names: Vec<&str> = h.iter().map(|&t| self.token_name(t)).collect();
                return Err(Error::Format(format!(
                    "distribution after [{}] sums to {total}",
                    names.join(" ")
                )));
            }
        }
        Ok(())
    }

    /// Estimates a backoff model from transcripts: add-one unigrams and
    /// absolutely discounted higher orders with backoff weights chosen so
    /// every history normalizes exactly.
    pub fn train(vocab: &Vocab, order: usize, corpus: &[LabelSequence]) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("lm order must be at least 1".into()));
        }
        let mut lm = NGramLm {
            order,
            vocab: vocab.clone(),
            tables: vec![BTreeMap::new(); order],
        };
        let (bos, eos) = (lm.bos(), lm.eos());
        // counts[n − 1][history][w]
        let mut counts: Vec<BTreeMap<Vec<usize>, BTreeMap<usize, f64>>> = vec![BTreeMap::new(); order];
        for y in corpus {
            if let Some(&bad) = y.tokens().iter().find(|&&t| t >= vocab.len()) {
                return Err(Error::Contract(format!("token {bad} outside the vocabulary")));
            }
            let mut s = vec![bos];
            s.extend_from_slice(y.tokens());
            s.push(eos);
            for i in 1..s.len() {
                for n in 1..=order.min(i + 1) {
                    let h = s[i + 1 - n..i].to_vec();
                    *counts[n - 1].entry(h).or_default().entry(s[i]).or_default() += 1.0;
                }
            }
        }

        let outcomes = vocab.len() + 1;
        let unigram = counts[0].remove(&vec![]).unwrap_or_default();
        let total: f64 = unigram.values().sum::<f64>() + outcomes as f64;
        for w in (0..vocab.len()).chain(std::iter::once(eos)) {
            let c = unigram.get(&w).copied().unwrap_or(0.0);
            lm.tables[0].insert(
                vec![w],
                Entry {
                    log10_prob: ((c + 1.0) / total).log10(),
                    log10_backoff: 0.0,
                },
            );
        }
        lm.tables[0].insert(
            vec![bos],
            Entry {
                log10_prob: LOG10_ZERO,
                log10_backoff: 0.0,
            },
        );

        for n in 2..=order {
            let by_history = std::mem::take(&mut counts[n - 1]);
            let mut backoffs = Vec::new();
            for (h, ws) in by_history {
                let c_h: f64 = ws.values().sum();
                let d = if ws.len() == outcomes { 0.0 } else { DISCOUNT };
                let mut seen = 0.0;
                let mut seen_lower = 0.0;
                for (&w, &c) in &ws {
                    let p = (c - d) / c_h;
                    seen += p;
                    seen_lower += 10f64.powf(lm.log10_prob_ids(&h[1..], w));
                    let mut key = h.clone();
                    key.push(w);
                    lm.tables[n - 1].insert(
                        key,
                        Entry {
                            log10_prob: p.log10(),
                            log10_backoff: 0.0,
                        },
                    );
                }
                // A history that saw every outcome never backs off.
                let bo = if d == 0.0 {
                    0.0
                } else {
                    ((1.0 - seen) / (1.0 - seen_lower)).log10()
                };
                backoffs.push((h, bo));
            }
            for (h, bo) in backoffs {
                let e = lm.tables[n - 2]
                    .get_mut(&h)
                    .expect("every history was counted at the lower order");
                e.log10_backoff = bo;
            }
        }
        lm.validate()?;
        Ok(lm)
    }

    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for (n, t) in self.tables.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", n + 1, t.len());
        }
        for (n, t) in self.tables.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", n + 1);
            for (key, e) in t {
                let words: Vec<&str> = key.iter().map(|&id| self.token_name(id)).collect();
                let _ = write!(out, "{} {}", e.log10_prob, words.join(" "));
                if n + 1 < self.order && e.log10_backoff != 0.0 {
                    let _ = write!(out, " {}", e.log10_backoff);
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    /// Parses the text format and validates normalization.
    pub fn from_arpa(text: &str, vocab: &Vocab) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .enumerate()
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let bad = |i: usize, msg: &str| Error::Format(format!("lm line {}: {msg}", i + 1));

        match lines.next() {
            Some((_, "\\data\\")) => {}
            Some((i, _)) => return Err(bad(i, "expected \\data\\")),
            None => return Err(Error::Format("empty lm file".into())),
        }
        let mut declared = Vec::new();
        let mut pending = None;
        for (i, l) in lines.by_ref() {
            if let Some(rest) = l.strip_prefix("ngram ") {
                let (n, c) = rest.split_once('=').ok_or_else(|| bad(i, "malformed count"))?;
                let n: usize = n.trim().parse().map_err(|_| bad(i, "malformed order"))?;
                let c: usize = c.trim().parse().map_err(|_| bad(i, "malformed count"))?;
                if n != declared.len() + 1 {
                    return Err(bad(i, "orders must be listed 1, 2, ..."));
                }
                declared.push(c);
            } else {
                pending = Some((i, l));
                break;
            }
        }
        if declared.is_empty() {
            return Err(Error::Format("lm declares no n-gram orders".into()));
        }
        let mut lm = NGramLm {
            order: declared.len(),
            vocab: vocab.clone(),
            tables: vec![BTreeMap::new(); declared.len()],
        };
        let mut section: Option<usize> = None;
        let mut ended = false;
        let mut next_line = pending;
        while let Some((i, l)) = next_line.take().or_else(|| lines.next()) {
            if l == "\\end\\" {
                ended = true;
                break;
            }
            if let Some(n) = l.strip_prefix('\\').and_then(|r| r.strip_suffix("-grams:")) {
                let n: usize = n.parse().map_err(|_| bad(i, "malformed section"))?;
                if n == 0 || n > lm.order {
                    return Err(bad(i, "section order out of range"));
                }
                section = Some(n);
                continue;
            }
            let n = section.ok_or_else(|| bad(i, "entry outside a section"))?;
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != n + 1 && fields.len() != n + 2 {
                return Err(bad(i, "wrong number of fields"));
            }
            let log10_prob: f64 = fields[0].parse().map_err(|_| bad(i, "malformed probability"))?;
            let key = fields[1..=n]
                .iter()
                .map(|t| lm.token_id(t))
                .collect::<Result<Vec<_>>>()?;
            let log10_backoff = match fields.get(n + 1) {
                Some(b) => b.parse().map_err(|_| bad(i, "malformed backoff"))?,
                None => 0.0,
            };
            if !log10_prob.is_finite() || !f64::is_finite(log10_backoff) || log10_prob > 0.0 {
                return Err(bad(i, "probability out of range"));
            }
            if lm.tables[n - 1]
                .insert(
                    key,
                    Entry {
                        log10_prob,
                        log10_backoff,
                    },
                )
                .is_some()
            {
                return Err(bad(i, "duplicate n-gram"));
            }
        }
        if !ended {
            return Err(Error::Format("lm file is missing \\end\\".into()));
        }
        for (n, (&want, t)) in declared.iter().zip(&lm.tables).enumerate() {
            if want != t.len() {
                return Err(Error::Format(format!(
                    "{}-gram count declared {want}, found {}",
                    n + 1,
                    t.len()
                )));
            }
        }
        lm.validate()?;
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_arpa())?;
        Ok(())
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self> {
        Self::from_arpa(&std::fs::read_to_string(path)?, vocab)
    }
}
