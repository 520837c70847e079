//! Force-based stroke detection and splitting of equation recordings into
//! single-character samples.
//!
//! Each character of an equation is written with a small, known set of
//! possible stroke counts. Given the strokes detected on the force channel,
//! the splitter searches for stroke-count assignments that add up to the
//! detected total.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataio::{decode_label, Alphabet, Sample};
use crate::error::{arg_err, Error, Result};

/// Inclusive `(start, end)` timestep pairs of pen-down intervals.
pub type StrokeIntervals = Vec<(usize, usize)>;

/// Allowed stroke counts per symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrokeConstraintTable {
    table: BTreeMap<String, BTreeSet<usize>>,
}

impl StrokeConstraintTable {
    pub fn new(table: BTreeMap<String, BTreeSet<usize>>) -> Result<Self> {
        for (sym, counts) in &table {
            if counts.is_empty() || counts.contains(&0) {
                return arg_err(format!("symbol {sym:?} needs stroke counts >= 1"));
            }
        }
        Ok(StrokeConstraintTable { table })
    }

    pub fn lookup(&self, symbol: &str) -> Result<&BTreeSet<usize>> {
        self.table
            .get(symbol)
            .ok_or_else(|| Error::Argument(format!("no stroke constraint for symbol {symbol:?}")))
    }

    pub fn symbols(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(String::as_str)
    }
}

/// Stroke counts of the equations alphabet.
pub fn default_constraints() -> StrokeConstraintTable {
    let counts: [(&str, &[usize]); 15] = [
        ("0", &[1]),
        ("1", &[1]),
        ("2", &[1]),
        ("3", &[1]),
        ("4", &[1, 2]),
        ("5", &[2]),
        ("6", &[1]),
        ("7", &[1, 2]),
        ("8", &[1]),
        ("9", &[1]),
        ("+", &[2]),
        ("-", &[1]),
        ("·", &[1]),
        (":", &[2]),
        ("=", &[2]),
    ];
    let table = counts
        .iter()
        .map(|(s, c)| (s.to_string(), c.iter().copied().collect()))
        .collect();
    StrokeConstraintTable::new(table).expect("static table is valid")
}

/// Stroke detection parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrokeParams {
    /// Force (N) above which the pen counts as touching the paper.
    pub threshold: f64,
    /// Runs shorter than this many timesteps are dropped.
    pub min_len: usize,
}

impl Default for StrokeParams {
    fn default() -> Self {
        StrokeParams {
            threshold: 0.02,
            min_len: 3,
        }
    }
}

/// Maximal runs with `force > threshold` that last at least `min_len` steps.
pub fn detect_strokes(force: &[f64], threshold: f64, min_len: usize) -> Result<StrokeIntervals> {
    if !(threshold > 0.0) {
        return arg_err(format!("stroke threshold must be positive, got {threshold}"));
    }
    let min_len = min_len.max(1);
    let mut out = Vec::new();
    let mut start = None;
    for (t, &f) in force.iter().enumerate() {
        match (f > threshold, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                if t - s >= min_len {
                    out.push((s, t - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        if force.len() - s >= min_len {
            out.push((s, force.len() - 1));
        }
    }
    Ok(out)
}

/// Result of splitting one equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationSplit {
    /// One single-character sample per label symbol.
    #[serde(skip)]
    pub characters: Vec<Sample>,
    /// Stroke count assigned to each symbol.
    pub assignment: Vec<usize>,
    /// Inclusive timestep extent of each character.
    pub boundaries: Vec<(usize, usize)>,
    pub strokes: StrokeIntervals,
    /// More than one assignment was feasible; the lexicographically
    /// smallest was taken.
    pub ambiguous: bool,
    pub feasible_assignments: u64,
}

/// Finds the lexicographically smallest stroke-count assignment summing to
/// `total` and counts all feasible assignments (saturating).
pub fn assign_strokes(allowed: &[&BTreeSet<usize>], total: usize) -> Option<(Vec<usize>, u64)> {
    let n = allowed.len();
    // ways[j][s]: number of assignments of symbols j.. that use exactly s strokes
    let mut ways = vec![vec![0u64; total + 1]; n + 1];
    ways[n][0] = 1;
    for j in (0..n).rev() {
        for s in 0..=total {
            ways[j][s] = allowed[j]
                .iter()
                .filter(|&&c| c <= s)
                .fold(0u64, |acc, &c| acc.saturating_add(ways[j + 1][s - c]));
        }
    }
    if ways[0][total] == 0 {
        return None;
    }
    let mut remaining = total;
    let mut pick = Vec::with_capacity(n);
    for j in 0..n {
        let c = allowed[j]
            .iter()
            .copied()
            .find(|&c| c <= remaining && ways[j + 1][remaining - c] > 0)?;
        pick.push(c);
        remaining -= c;
    }
    Some((pick, ways[0][total]))
}

/// Splits an equation sample into its characters using the force channel
/// (the last channel).
///
/// The j-th character spans from the start of its first stroke to the end of
/// its last stroke; pen-up gaps between characters belong to neither.
pub fn split_equation(
    sample: &Sample,
    alphabet: &Alphabet,
    constraints: &StrokeConstraintTable,
    params: &StrokeParams,
) -> Result<EquationSplit> {
    let label_text = decode_label(sample.label(), alphabet)?;
    let symbols: Vec<&str> = sample
        .label()
        .iter()
        .map(|&i| alphabet.decode(i))
        .collect::<Result<_>>()?;
    let allowed: Vec<&BTreeSet<usize>> = symbols
        .iter()
        .map(|s| constraints.lookup(s))
        .collect::<Result<_>>()?;

    let force = sample.channel(sample.channels() - 1);
    let strokes = detect_strokes(&force, params.threshold, params.min_len)?;
    let seg_err = |msg: &str| Error::Segmentation {
        label: label_text.clone(),
        strokes: strokes.len(),
        msg: msg.to_string(),
    };
    if strokes.is_empty() {
        return Err(seg_err("no strokes detected"));
    }
    let (assignment, feasible) =
        assign_strokes(&allowed, strokes.len()).ok_or_else(|| seg_err("no feasible stroke assignment"))?;

    let mut characters = Vec::with_capacity(symbols.len());
    let mut boundaries = Vec::with_capacity(symbols.len());
    let mut next = 0;
    for (&count, &sym) in assignment.iter().zip(sample.label()) {
        let (start, end) = (strokes[next].0, strokes[next + count - 1].1);
        next += count;
        boundaries.push((start, end));
        let l = sample.channels();
        characters.push(sample.with_label(
            sample.values()[start * l..(end + 1) * l].to_vec(),
            vec![sym],
        ));
    }
    Ok(EquationSplit {
        characters,
        assignment,
        boundaries,
        strokes,
        ambiguous: feasible > 1,
        feasible_assignments: feasible,
    })
}
