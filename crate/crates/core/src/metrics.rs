//! Edit distance with alignments, error rates, positional error histograms
//! and confusion matrices.

use serde::{Deserialize, Serialize};

use crate::dataio::Alphabet;
use crate::error::{arg_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Match,
    Substitute,
    /// Hypothesis symbol with no reference counterpart.
    Insert,
    /// Reference symbol missing from the hypothesis.
    Delete,
}

/// One alignment column. For `Insert`, `ref_pos` is the insertion point in
/// the reference; for `Delete`, `hyp_pos` is the insertion point in the
/// hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    pub kind: EditKind,
    pub ref_pos: usize,
    pub hyp_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditScript {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ops: Vec<EditOp>,
}

impl EditScript {
    /// Replays the alignment on `hypothesis`, returning the sequence it
    /// produces, or `None` when the ops do not describe a valid alignment of
    /// the two sequences.
    pub fn apply<T: Clone + PartialEq>(&self, reference: &[T], hypothesis: &[T]) -> Option<Vec<T>> {
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::with_capacity(reference.len());
        for op in &self.ops {
            match op.kind {
                EditKind::Match | EditKind::Substitute => {
                    if op.ref_pos != i || op.hyp_pos != j {
                        return None;
                    }
                    let (r, h) = (reference.get(i)?, hypothesis.get(j)?);
                    if (op.kind == EditKind::Match) != (r == h) {
                        return None;
                    }
                    out.push(if op.kind == EditKind::Match { h.clone() } else { r.clone() });
                    i += 1;
                    j += 1;
                }
                EditKind::Delete => {
                    if op.ref_pos != i {
                        return None;
                    }
                    out.push(reference.get(i)?.clone());
                    i += 1;
                }
                EditKind::Insert => {
                    if op.hyp_pos != j || j >= hypothesis.len() {
                        return None;
                    }
                    j += 1;
                }
            }
        }
        (i == reference.len() && j == hypothesis.len()).then_some(out)
    }
}

/// Unit-cost edit distance between `reference` and `hypothesis` with a
/// deterministic alignment.
///
/// The traceback walks back from the bottom-right cell and prefers, in
/// order, match, substitution, deletion and insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditScript {
    let (r, n) = (reference.len(), hypothesis.len());
    let w = n + 1;
    let mut ed = vec![0usize; (r + 1) * w];
    for i in 0..=r {
        ed[i * w] = i;
    }
    for j in 0..=n {
        ed[j] = j;
    }
    for i in 1..=r {
        for j in 1..=n {
            ed[i * w + j] = if reference[i - 1] == hypothesis[j - 1] {
                ed[(i - 1) * w + j - 1]
            } else {
                (ed[(i - 1) * w + j] + 1)
                    .min(ed[i * w + j - 1] + 1)
                    .min(ed[(i - 1) * w + j - 1] + 1)
            };
        }
    }

    let mut ops = Vec::with_capacity(r.max(n));
    let (mut i, mut j) = (r, n);
    let (mut subs, mut ins, mut dels) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = ed[i * w + j];
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && here == ed[(i - 1) * w + j - 1] {
            i -= 1;
            j -= 1;
            ops.push(EditOp { kind: EditKind::Match, ref_pos: i, hyp_pos: j });
        } else if i > 0 && j > 0 && here == ed[(i - 1) * w + j - 1] + 1 {
            i -= 1;
            j -= 1;
            subs += 1;
            ops.push(EditOp { kind: EditKind::Substitute, ref_pos: i, hyp_pos: j });
        } else if i > 0 && here == ed[(i - 1) * w + j] + 1 {
            i -= 1;
            dels += 1;
            ops.push(EditOp { kind: EditKind::Delete, ref_pos: i, hyp_pos: j });
        } else {
            j -= 1;
            ins += 1;
            ops.push(EditOp { kind: EditKind::Insert, ref_pos: i, hyp_pos: j });
        }
    }
    ops.reverse();
    EditScript {
        distance: ed[r * w + n],
        substitutions: subs,
        insertions: ins,
        deletions: dels,
        ops,
    }
}

fn error_rate<T: PartialEq, R: AsRef<[T]>>(references: &[R], hypotheses: &[R]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return arg_err(format!(
            "{} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        ));
    }
    let total: usize = references.iter().map(|r| r.as_ref().len()).sum();
    if total == 0 {
        return arg_err("references contain no symbols");
    }
    let errors: usize = references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| edit_distance(r.as_ref(), h.as_ref()).distance)
        .sum();
    Ok(errors as f64 / total as f64)
}

/// Character error rate: summed edit operations over reference characters.
pub fn cer<T: PartialEq, R: AsRef<[T]>>(references: &[R], hypotheses: &[R]) -> Result<f64> {
    error_rate(references, hypotheses)
}

/// Word error rate. Each entry is a pre-tokenized word sequence.
pub fn wer<T: PartialEq, R: AsRef<[T]>>(references: &[R], hypotheses: &[R]) -> Result<f64> {
    error_rate(references, hypotheses)
}

/// Character recognition rate over single-symbol predictions.
pub fn crr<T: PartialEq, R: AsRef<[T]>>(references: &[R], hypotheses: &[R]) -> Result<f64> {
    if references.is_empty() || references.len() != hypotheses.len() {
        return arg_err("CRR needs equally many references and hypotheses, at least one");
    }
    let mut correct = 0usize;
    for (r, h) in references.iter().zip(hypotheses) {
        let (r, h) = (r.as_ref(), h.as_ref());
        if r.len() != 1 || h.len() != 1 {
            return arg_err("CRR entries must hold exactly one symbol");
        }
        correct += usize::from(r[0] == h[0]);
    }
    Ok(correct as f64 / references.len() as f64)
}

/// Error counts binned by normalized reference position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionHistograms {
    pub mismatch: Vec<u64>,
    pub insert: Vec<u64>,
    pub delete: Vec<u64>,
}

pub fn error_positions(
    scripts: &[EditScript],
    ref_lengths: &[usize],
    bins: usize,
) -> Result<PositionHistograms> {
    if bins == 0 {
        return arg_err("need at least one bin");
    }
    if scripts.len() != ref_lengths.len() {
        return arg_err("one reference length per script required");
    }
    let mut h = PositionHistograms {
        mismatch: vec![0; bins],
        insert: vec![0; bins],
        delete: vec![0; bins],
    };
    for (script, &len) in scripts.iter().zip(ref_lengths) {
        if len == 0 {
            return arg_err("reference lengths must be positive");
        }
        for op in &script.ops {
            let bin = (bins * op.ref_pos / len).min(bins - 1);
            match op.kind {
                EditKind::Match => {}
                EditKind::Substitute => h.mismatch[bin] += 1,
                EditKind::Insert => h.insert[bin] += 1,
                EditKind::Delete => h.delete[bin] += 1,
            }
        }
    }
    Ok(h)
}

/// `K x K` counts of (reference, hypothesis) symbol pairs over aligned
/// match and substitution columns.
pub fn confusion_matrix(
    references: &[Vec<usize>],
    hypotheses: &[Vec<usize>],
    scripts: &[EditScript],
    alphabet: &Alphabet,
) -> Result<Vec<Vec<u64>>> {
    if references.len() != scripts.len() || hypotheses.len() != scripts.len() {
        return arg_err("references, hypotheses and scripts must align");
    }
    let k = alphabet.len();
    let mut m = vec![vec![0u64; k]; k];
    for ((r, h), s) in references.iter().zip(hypotheses).zip(scripts) {
        for op in &s.ops {
            if matches!(op.kind, EditKind::Match | EditKind::Substitute) {
                let (g, p) = (r[op.ref_pos], h[op.hyp_pos]);
                if g >= k || p >= k {
                    return Err(Error::Range(format!("symbol index outside alphabet of {k}")));
                }
                m[g][p] += 1;
            }
        }
    }
    Ok(m)
}
