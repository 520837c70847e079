//! CTC decoders. The blank is the last column of the frame matrix.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::ctc::log_add;
use crate::error::{arg_err, Result};

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
pub fn greedy_decode(log_probs: &[Vec<f64>]) -> Vec<usize> {
    let Some(blank) = log_probs.first().map(|r| r.len().saturating_sub(1)) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut prev = None;
    for row in log_probs {
        let k = argmax(row);
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

#[derive(Clone, Copy)]
struct PrefixScore {
    blank: f64,
    label: f64,
}

impl PrefixScore {
    const EMPTY: PrefixScore = PrefixScore {
        blank: f64::NEG_INFINITY,
        label: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        log_add(self.blank, self.label)
    }
}

/// Prefix beam search over collapsed labelings.
///
/// Each prefix keeps the log-probability of all paths that produce it and end
/// in a blank, and of those ending in its last label. Without pruning the
/// scores are exact labeling probabilities.
pub fn beam_decode(log_probs: &[Vec<f64>], beam_width: usize) -> Result<Vec<usize>> {
    if beam_width == 0 {
        return arg_err("beam width must be at least 1");
    }
    let Some(classes) = log_probs.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    let blank = classes - 1;

    let mut beam: Vec<(Vec<usize>, PrefixScore)> = vec![(
        Vec::new(),
        PrefixScore {
            blank: 0.0,
            label: f64::NEG_INFINITY,
        },
    )];
    for row in log_probs {
        let mut next: BTreeMap<Vec<usize>, PrefixScore> = BTreeMap::new();
        for (prefix, score) in &beam {
            let e = next.entry(prefix.clone()).or_insert(PrefixScore::EMPTY);
            e.blank = log_add(e.blank, score.total() + row[blank]);

            for (c, &y) in row.iter().enumerate().take(blank) {
                let mut extended = prefix.clone();
                extended.push(c);
                if prefix.last() == Some(&c) {
                    // repeat without a blank in between collapses into the prefix
                    let same = next.entry(prefix.clone()).or_insert(PrefixScore::EMPTY);
                    same.label = log_add(same.label, score.label + y);
                    let ext = next.entry(extended).or_insert(PrefixScore::EMPTY);
                    ext.label = log_add(ext.label, score.blank + y);
                } else {
                    let ext = next.entry(extended).or_insert(PrefixScore::EMPTY);
                    ext.label = log_add(ext.label, score.total() + y);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, PrefixScore)> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total()
                .partial_cmp(&a.1.total())
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(beam_width);
        beam = ranked;
    }
    Ok(beam.into_iter().next().map(|(p, _)| p).unwrap_or_default())
}
