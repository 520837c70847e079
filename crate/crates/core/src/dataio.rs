//! Recording ingestion, alphabets and cross-validation splits.
//!
//! A recording is a pair of UTF-8 text files. The data file starts with a
//! header line `channels:<l>,rate_hz:<r>` followed by CSV rows
//! `t,c1,...,cl`. The labels file holds one JSON object per line:
//!
//! ```text
//! {"label":"1+2=3","start":0,"end":412,"writer_id":7}
//! ```
//!
//! `start` and `end` are inclusive row indices into the data file (the header
//! is not counted). The leading timestep column is read and checked for being
//! numeric but the sample itself is stored on an implicit uniform time base.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::rng;

/// Number of sensor channels of the pen.
pub const STANDARD_CHANNELS: usize = 13;
/// Front accelerometer (x, y, z) followed by rear accelerometer (x, y, z).
pub const ACCEL_CHANNELS: [usize; 6] = [0, 1, 2, 3, 4, 5];
pub const GYRO_CHANNELS: [usize; 3] = [6, 7, 8];
pub const MAG_CHANNELS: [usize; 3] = [9, 10, 11];
pub const FORCE_CHANNEL: usize = 12;

/// One multivariate time series with its label sequence.
///
/// Values are stored row-major, `len` timesteps by `channels` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    values: Vec<f64>,
    len: usize,
    channels: usize,
    label: Vec<usize>,
    writer_id: u32,
    rate_hz: f64,
}

impl Sample {
    pub fn new(
        values: Vec<f64>,
        channels: usize,
        label: Vec<usize>,
        writer_id: u32,
        rate_hz: f64,
    ) -> Result<Self> {
        if channels == 0 {
            return arg_err("sample needs at least one channel");
        }
        if values.is_empty() || !values.len().is_multiple_of(channels) {
            return Err(Error::Shape(format!(
                "{} values do not form rows of {channels} channels",
                values.len()
            )));
        }
        if label.is_empty() {
            return Err(Error::Value("sample label must not be empty".into()));
        }
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::Value(format!("sampling rate {rate_hz} is not positive")));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!(
                "non-finite value at row {}, channel {}",
                pos / channels,
                pos % channels
            )));
        }
        let sample = Sample {
            len: values.len() / channels,
            values,
            channels,
            label,
            writer_id,
            rate_hz,
        };
        if channels == STANDARD_CHANNELS {
            if let Some(t) = (0..sample.len).find(|&t| sample.get(t, FORCE_CHANNEL) < 0.0) {
                return Err(Error::Value(format!("negative force at row {t}")));
            }
        }
        Ok(sample)
    }

    /// Copy of `self` with different values of identical shape. Used by the
    /// transforms, which may legitimately push the force channel below zero.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Sample {
        debug_assert_eq!(values.len() % self.channels, 0);
        Sample {
            len: values.len() / self.channels,
            values,
            channels: self.channels,
            label: self.label.clone(),
            writer_id: self.writer_id,
            rate_hz: self.rate_hz,
        }
    }

    pub(crate) fn with_label(&self, values: Vec<f64>, label: Vec<usize>) -> Sample {
        let mut s = self.with_values(values);
        s.label = label;
        s
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn label(&self) -> &[usize] {
        &self.label
    }

    pub fn writer_id(&self) -> u32 {
        self.writer_id
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels + c]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    /// Column `c` as an owned vector.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.get(t, c)).collect()
    }

    /// Rows `start..=end` as a new sample with the given label.
    pub fn slice(&self, start: usize, end: usize, label: Vec<usize>) -> Result<Sample> {
        if start > end || end >= self.len {
            return Err(Error::Range(format!(
                "window [{start}, {end}] outside 0..{}",
                self.len
            )));
        }
        let values = self.values[start * self.channels..(end + 1) * self.channels].to_vec();
        Sample::new(values, self.channels, label, self.writer_id, self.rate_hz)
    }
}

/// Ordered symbol set. The CTC blank sits one past the last symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AlphabetRepr", into = "AlphabetRepr")]
pub struct Alphabet {
    symbols: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct AlphabetRepr {
    symbols: Vec<String>,
    blank_index: usize,
}

impl TryFrom<AlphabetRepr> for Alphabet {
    type Error = Error;

    fn try_from(r: AlphabetRepr) -> Result<Self> {
        let a = Alphabet::new(r.symbols)?;
        if a.blank_index() != r.blank_index {
            return Err(Error::Value(format!(
                "blank index {} does not equal symbol count {}",
                r.blank_index,
                a.len()
            )));
        }
        Ok(a)
    }
}

impl From<Alphabet> for AlphabetRepr {
    fn from(a: Alphabet) -> Self {
        AlphabetRepr {
            blank_index: a.blank_index(),
            symbols: a.symbols,
        }
    }
}

impl Alphabet {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.is_empty() {
            return arg_err("alphabet needs at least one symbol");
        }
        let mut seen = BTreeSet::new();
        for s in &symbols {
            if s.is_empty() {
                return arg_err("alphabet symbols must be non-empty");
            }
            if !seen.insert(s.as_str()) {
                return arg_err(format!("duplicate symbol {s:?}"));
            }
        }
        Ok(Alphabet { symbols })
    }

    /// Number of non-blank classes K.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn blank_index(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn encode(&self, symbol: &str) -> Result<usize> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| Error::Encoding(symbol.to_string()))
    }

    pub fn decode(&self, index: usize) -> Result<&str> {
        self.symbols.get(index).map(String::as_str).ok_or_else(|| {
            Error::Range(format!(
                "index {index} is not a symbol (K = {}, blank = {})",
                self.len(),
                self.blank_index()
            ))
        })
    }
}

/// The 15-class alphabet of handwritten equations: digits, `+ - · : =`.
pub fn equations_alphabet() -> Alphabet {
    let symbols = "0123456789+-·:="
        .chars()
        .map(String::from)
        .collect::<Vec<_>>();
    Alphabet::new(symbols).expect("static alphabet is valid")
}

/// Alphabet of the distinct characters in `labels`, sorted by code point.
pub fn build_alphabet<S: AsRef<str>>(labels: &[S]) -> Result<Alphabet> {
    let chars: BTreeSet<char> = labels.iter().flat_map(|l| l.as_ref().chars()).collect();
    if chars.is_empty() {
        return arg_err("cannot build an alphabet from empty labels");
    }
    Alphabet::new(chars.into_iter().map(String::from).collect())
}

/// Maps every character of `text` to its symbol index.
pub fn encode_label(text: &str, alphabet: &Alphabet) -> Result<Vec<usize>> {
    let mut buf = [0u8; 4];
    text.chars()
        .map(|c| alphabet.encode(c.encode_utf8(&mut buf)))
        .collect()
}

pub fn decode_label(indices: &[usize], alphabet: &Alphabet) -> Result<String> {
    indices.iter().map(|&i| alphabet.decode(i)).collect()
}

/// One line of a labels file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelWindow {
    pub label: String,
    pub start: usize,
    pub end: usize,
    pub writer_id: u32,
}

/// Reads the labels file without touching the data file, e.g. to build an
/// alphabet before parsing.
pub fn parse_label_lines(labels_text: &str) -> Result<Vec<LabelWindow>> {
    let mut out = Vec::new();
    for (i, line) in labels_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let w: LabelWindow = serde_json::from_str(line).map_err(|e| Error::Format {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if w.label.is_empty() {
            return Err(Error::Format {
                line: i + 1,
                msg: "empty label".into(),
            });
        }
        out.push(w);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Header {
    channels: usize,
    rate_hz: f64,
}

fn parse_header(line: &str) -> Result<Header> {
    let bad = |msg: String| Error::Format { line: 1, msg };
    let mut channels = None;
    let mut rate = None;
    for field in line.trim().split(',') {
        let (key, value) = field
            .split_once(':')
            .ok_or_else(|| bad(format!("expected key:value, got {field:?}")))?;
        match key.trim() {
            "channels" => {
                channels = Some(
                    value
                        .trim()
                        .parse::<usize>()
                        .map_err(|e| bad(format!("channels: {e}")))?,
                )
            }
            "rate_hz" => {
                rate = Some(
                    value
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| bad(format!("rate_hz: {e}")))?,
                )
            }
            other => return Err(bad(format!("unknown header key {other:?}"))),
        }
    }
    match (channels, rate) {
        (Some(c), Some(r)) if c >= 1 && r.is_finite() && r > 0.0 => Ok(Header {
            channels: c,
            rate_hz: r,
        }),
        (Some(_), Some(_)) => Err(bad("channels must be >= 1 and rate_hz > 0".into())),
        _ => Err(bad("header must declare channels and rate_hz".into())),
    }
}

/// Parses a data file and its labels file into one sample per label line.
pub fn parse_recording(raw_text: &str, labels_text: &str, alphabet: &Alphabet) -> Result<Vec<Sample>> {
    let mut lines = raw_text.lines();
    let header = parse_header(lines.next().ok_or_else(|| Error::Format {
        line: 1,
        msg: "missing header".into(),
    })?)?;

    let mut rows: Vec<f64> = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.channels + 1 {
            return Err(Error::Format {
                line: lineno,
                msg: format!(
                    "expected {} fields (timestep + {} channels), found {}",
                    header.channels + 1,
                    header.channels,
                    fields.len()
                ),
            });
        }
        for (j, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| Error::Format {
                line: lineno,
                msg: format!("field {} is not a number: {f:?}", j + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Value(format!(
                    "non-finite value in field {} on line {lineno}",
                    j + 1
                )));
            }
            if j > 0 {
                rows.push(v);
            }
        }
    }
    let n_rows = rows.len() / header.channels;

    parse_label_lines(labels_text)?
        .into_iter()
        .map(|w| {
            if w.start > w.end || w.end >= n_rows {
                return Err(Error::Range(format!(
                    "label {:?} window [{}, {}] outside {} data rows",
                    w.label, w.start, w.end, n_rows
                )));
            }
            let label = encode_label(&w.label, alphabet)?;
            let values = rows[w.start * header.channels..(w.end + 1) * header.channels].to_vec();
            Sample::new(values, header.channels, label, w.writer_id, header.rate_hz)
        })
        .collect()
}

/// Inverse of [`parse_recording`]: the samples are laid out back to back.
/// All samples must share channel count and sampling rate.
pub fn write_recording(samples: &[Sample], alphabet: &Alphabet) -> Result<(String, String)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("no samples to write".into()))?;
    let mut raw = format!("channels:{},rate_hz:{}\n", first.channels, first.rate_hz);
    let mut labels = String::new();
    let mut row = 0usize;
    for s in samples {
        if s.channels != first.channels || s.rate_hz != first.rate_hz {
            return arg_err("samples in one recording must share channels and rate");
        }
        let window = LabelWindow {
            label: decode_label(&s.label, alphabet)?,
            start: row,
            end: row + s.len - 1,
            writer_id: s.writer_id,
        };
        for t in 0..s.len {
            raw.push_str(&row.to_string());
            for v in s.row(t) {
                raw.push(',');
                raw.push_str(&v.to_string());
            }
            raw.push('\n');
            row += 1;
        }
        labels.push_str(&serde_json::to_string(&window)?);
        labels.push('\n');
    }
    Ok((raw, labels))
}

/// Consolidated dataset as written by the `ingest` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub alphabet: Alphabet,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ds: Dataset = serde_json::from_str(&text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    /// Checks label indices against the alphabet.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(&bad) = s.label.iter().find(|&&l| l >= self.alphabet.len()) {
                return Err(Error::Range(format!(
                    "sample {i}: label index {bad} outside alphabet of {} symbols",
                    self.alphabet.len()
                )));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary::of(&self.samples, &self.alphabet)
    }
}

/// Timestep statistics for samples of one label length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub label_len: usize,
    pub count: usize,
    pub mean_timesteps: f64,
    pub std_timesteps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub samples: usize,
    pub writers: usize,
    pub class_histogram: BTreeMap<String, usize>,
    pub lengths: Vec<LengthStats>,
}

impl DatasetSummary {
    pub fn of(samples: &[Sample], alphabet: &Alphabet) -> Self {
        let mut class_histogram: BTreeMap<String, usize> =
            alphabet.symbols().iter().map(|s| (s.clone(), 0)).collect();
        let mut by_len: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut writers = BTreeSet::new();
        for s in samples {
            writers.insert(s.writer_id);
            for &l in &s.label {
                if let Ok(sym) = alphabet.decode(l) {
                    *class_histogram.entry(sym.to_string()).or_default() += 1;
                }
            }
            by_len.entry(s.label.len()).or_default().push(s.len as f64);
        }
        let lengths = by_len
            .into_iter()
            .map(|(label_len, xs)| {
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                LengthStats {
                    label_len,
                    count: xs.len(),
                    mean_timesteps: mean,
                    std_timesteps: var.sqrt(),
                }
            })
            .collect();
        DatasetSummary {
            samples: samples.len(),
            writers: writers.len(),
            class_histogram,
            lengths,
        }
    }
}

/// Writer-dependent or writer-independent evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitMode {
    #[serde(rename = "WD")]
    WriterDependent,
    #[serde(rename = "WI")]
    WriterIndependent,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::WriterDependent => "WD",
            SplitMode::WriterIndependent => "WI",
        })
    }
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "WD" => Ok(SplitMode::WriterDependent),
            "WI" => Ok(SplitMode::WriterIndependent),
            _ => arg_err(format!("unknown split mode {s:?}, expected WD or WI")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub mode: SplitMode,
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

const WD_STREAM: u64 = 0x5744;
const WI_STREAM: u64 = 0x5749;

/// K-fold partition of `samples`.
///
/// WD shuffles each writer's samples and deals them over the folds, so every
/// writer contributes `floor(n/k)` or `ceil(n/k)` validation samples per
/// fold. WI shuffles the writers and deals whole writers round-robin.
pub fn make_splits(samples: &[Sample], mode: SplitMode, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return arg_err(format!("need at least 2 folds, got {k}"));
    }
    let mut by_writer: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_writer.entry(s.writer_id).or_default().push(i);
    }

    let mut fold_of = vec![0usize; samples.len()];
    match mode {
        SplitMode::WriterDependent => {
            let mut dealt = 0usize;
            for (&writer, idx) in &by_writer {
                let mut idx = idx.clone();
                idx.shuffle(&mut rng::stream(seed, &[WD_STREAM, u64::from(writer)]));
                for i in idx {
                    fold_of[i] = dealt % k;
                    dealt += 1;
                }
            }
        }
        SplitMode::WriterIndependent => {
            if by_writer.len() < k {
                return arg_err(format!(
                    "writer-independent split needs at least {k} writers, found {}",
                    by_writer.len()
                ));
            }
            let mut writers: Vec<u32> = by_writer.keys().copied().collect();
            writers.shuffle(&mut rng::stream(seed, &[WI_STREAM]));
            for (pos, w) in writers.iter().enumerate() {
                for &i in &by_writer[w] {
                    fold_of[i] = pos % k;
                }
            }
        }
    }

    let folds = (0..k)
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) =
                (0..samples.len()).partition(|&i| fold_of[i] == f);
            Fold { train, val }
        })
        .collect();
    Ok(FoldPlan {
        mode,
        k,
        seed,
        folds,
    })
}
