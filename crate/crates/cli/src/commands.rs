use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context as _, Result};
use onhw_core::dataio::{
    build_alphabet, decode_label, equations_alphabet, make_splits, parse_label_lines, parse_recording, write_recording,
    Alphabet, Dataset, Fold, FoldPlan, Sample,
};
use onhw_core::gradcheck::{self, CheckReport};
use onhw_core::losses::{beam_decode, greedy_decode};
use onhw_core::metrics::{self, PositionHistograms};
use onhw_core::netcore::{predict_log_probs, Checkpoint, LossSelector, Model, Task, Trainer};
use onhw_core::preprocess::{augment, interpolate, AugmentMethod};
use onhw_core::rng::derive_seed;
use onhw_core::segment::{default_constraints, split_equation};
use onhw_core::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{input_path, AlphabetSource, Context};
use crate::{AugmentArgs, DecodeArgs, EvaluateArgs, GradcheckArgs, IngestArgs, SegmentArgs, SplitArgs, TrainArgs};

const CHECKPOINT_FILE: &str = "checkpoint.onhw";
const HISTORY_FILE: &str = "history.jsonl";

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// Attaches `path:line` to format errors.
fn located(path: &Path, err: Error) -> anyhow::Error {
    match err {
        Error::Format { line, msg } => anyhow::anyhow!("{}:{line}: {msg}", path.display()),
        e => anyhow::Error::new(e).context(format!("parsing {}", path.display())),
    }
}

pub fn ingest(ctx: &Context, args: IngestArgs) -> Result<()> {
    let data = input_path(args.data, &ctx.cfg.data, "data")?;
    let labels = input_path(args.labels, &ctx.cfg.labels, "labels")?;
    let raw_text = read_text(&data)?;
    let labels_text = read_text(&labels)?;

    // label errors are reported against the labels file before the data is parsed
    let windows = parse_label_lines(&labels_text).map_err(|e| located(&labels, e))?;
    let alphabet = match args.alphabet.unwrap_or(ctx.cfg.alphabet) {
        AlphabetSource::Equations => equations_alphabet(),
        AlphabetSource::Auto => {
            let texts: Vec<&str> = windows.iter().map(|w| w.label.as_str()).collect();
            build_alphabet(&texts)?
        }
    };
    let samples = parse_recording(&raw_text, &labels_text, &alphabet).map_err(|e| located(&data, e))?;

    let dataset = Dataset { alphabet, samples };
    let out = ctx.out_dir()?.join("dataset.json");
    dataset.save(&out)?;
    log::info!("wrote {}", out.display());
    print_json(&dataset.summary())
}

#[derive(Serialize)]
struct SplitReport<'a> {
    mode: String,
    k: usize,
    seed: u64,
    folds: Vec<[usize; 2]>,
    path: &'a Path,
}

pub fn split(ctx: &Context, args: SplitArgs) -> Result<()> {
    let dataset = load_dataset(&input_path(args.dataset, &ctx.cfg.dataset, "dataset")?)?;
    let mode = args.mode.map(|m| m.parse()).transpose()?.unwrap_or(ctx.cfg.mode);
    let k = args.k.unwrap_or(ctx.cfg.k);
    let seed = ctx.seed()?;
    let plan = make_splits(&dataset.samples, mode, k, seed)?;
    let out = ctx.out_dir()?.join("folds.json");
    plan.save(&out)?;
    print_json(&SplitReport {
        mode: mode.to_string(),
        k,
        seed,
        folds: plan.folds.iter().map(|f| [f.train.len(), f.val.len()]).collect(),
        path: &out,
    })
}

#[derive(Serialize)]
struct AugmentReport<'a> {
    samples: usize,
    methods: Vec<String>,
    sha256: String,
    path: &'a Path,
}

pub fn augment_cmd(ctx: &Context, args: AugmentArgs) -> Result<()> {
    let dataset = load_dataset(&input_path(args.dataset, &ctx.cfg.dataset, "dataset")?)?;
    let seed = ctx.seed()?;
    let methods: BTreeSet<AugmentMethod> = match args.methods {
        Some(list) => list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()?,
        None => ctx.cfg.augment_methods.iter().copied().collect(),
    };
    let cfg = &ctx.cfg.augment;
    cfg.validate()?;
    ensure!(args.copies >= 1, "--copies must be at least 1");

    let mut samples = Vec::with_capacity(dataset.samples.len() * args.copies);
    for copy in 0..args.copies {
        for (i, s) in dataset.samples.iter().enumerate() {
            samples.push(augment(s, cfg, &methods, derive_seed(seed, &[copy as u64, i as u64]))?);
        }
    }
    let augmented = Dataset {
        alphabet: dataset.alphabet,
        samples,
    };
    let bytes = serde_json::to_vec(&augmented)?;
    let out = ctx.out_dir()?.join("augmented.json");
    fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    print_json(&AugmentReport {
        samples: augmented.samples.len(),
        methods: methods.iter().map(ToString::to_string).collect(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        path: &out,
    })
}

#[derive(Serialize)]
struct SegmentEntry {
    sample: usize,
    label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    assignment: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    boundaries: Option<Vec<(usize, usize)>>,
    strokes: usize,
    ambiguous: bool,
    files: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct SegmentSummary {
    equations: usize,
    split: usize,
    ambiguous: usize,
    failed: usize,
    characters: usize,
}

pub fn segment(ctx: &Context, args: SegmentArgs) -> Result<()> {
    let dataset = load_dataset(&input_path(args.dataset, &ctx.cfg.dataset, "dataset")?)?;
    let mut params = ctx.cfg.strokes;
    if let Some(t) = args.threshold {
        params.threshold = t;
    }
    if let Some(m) = args.min_len {
        params.min_len = m;
    }
    let constraints = default_constraints();
    let out = ctx.out_dir()?;
    let char_dir = out.join("characters");
    fs::create_dir_all(&char_dir)?;

    let mut manifest = Vec::with_capacity(dataset.samples.len());
    let mut characters = Vec::new();
    let mut summary = SegmentSummary {
        equations: dataset.samples.len(),
        split: 0,
        ambiguous: 0,
        failed: 0,
        characters: 0,
    };
    for (i, sample) in dataset.samples.iter().enumerate() {
        let label = decode_label(sample.label(), &dataset.alphabet)?;
        match split_equation(sample, &dataset.alphabet, &constraints, &params) {
            Ok(split) => {
                let mut files = Vec::new();
                for (j, ch) in split.characters.iter().enumerate() {
                    let (raw, labels) = write_recording(std::slice::from_ref(ch), &dataset.alphabet)?;
                    let stem = format!("{i:05}_{j:02}");
                    fs::write(char_dir.join(format!("{stem}.csv")), raw)?;
                    fs::write(char_dir.join(format!("{stem}.labels.jsonl")), labels)?;
                    files.push(format!("characters/{stem}.csv"));
                }
                summary.split += 1;
                summary.ambiguous += usize::from(split.ambiguous);
                summary.characters += split.characters.len();
                characters.extend(split.characters);
                manifest.push(SegmentEntry {
                    sample: i,
                    label,
                    assignment: Some(split.assignment),
                    boundaries: Some(split.boundaries),
                    strokes: split.strokes.len(),
                    ambiguous: split.ambiguous,
                    files,
                    error: None,
                });
            }
            Err(e @ Error::Segmentation { .. }) => {
                log::warn!("sample {i}: {e}");
                let strokes = match &e {
                    Error::Segmentation { strokes, .. } => *strokes,
                    _ => 0,
                };
                summary.failed += 1;
                manifest.push(SegmentEntry {
                    sample: i,
                    label,
                    assignment: None,
                    boundaries: None,
                    strokes,
                    ambiguous: false,
                    files: Vec::new(),
                    error: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e).with_context(|| format!("segmenting sample {i}")),
        }
    }
    write_json(&out.join("segmentation.json"), &manifest)?;
    Dataset {
        alphabet: dataset.alphabet,
        samples: characters,
    }
    .save(out.join("characters.json"))?;
    print_json(&summary)
}

fn load_folds(path: &Path, n_samples: usize) -> Result<FoldPlan> {
    let plan = FoldPlan::load(path).with_context(|| format!("loading folds {}", path.display()))?;
    let worst = plan.folds.iter().flat_map(|f| f.train.iter().chain(&f.val)).max();
    if let Some(&i) = worst.filter(|&&i| i >= n_samples) {
        bail!("fold plan refers to sample {i} but the dataset has {n_samples}");
    }
    Ok(plan)
}

fn pick_fold(plan: &FoldPlan, fold: usize) -> Result<Fold> {
    plan.folds
        .get(fold)
        .cloned()
        .ok_or_else(|| anyhow::anyhow!("fold {fold} out of range for a {}-fold plan", plan.folds.len()))
}

/// Writes to a sibling file first so an interrupted run never leaves a
/// truncated checkpoint behind.
fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("onhw.tmp");
    ckpt.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    epochs: usize,
    last: Option<&'a onhw_core::netcore::EpochRecord>,
    checkpoint: PathBuf,
    history: PathBuf,
}

pub fn train(ctx: &Context, args: TrainArgs) -> Result<()> {
    let dataset_path = input_path(args.dataset, &ctx.cfg.dataset, "dataset")?;
    let folds_path = input_path(args.folds, &ctx.cfg.folds, "folds")?;
    let resume = args.resume.map(|p| input_path(Some(p), &None, "resume")).transpose()?;
    let dataset = load_dataset(&dataset_path)?;
    let plan = load_folds(&folds_path, dataset.samples.len())?;
    let fold = pick_fold(&plan, args.fold.unwrap_or(ctx.cfg.fold))?;

    let mut trainer = match &resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if let Some(a) = &ckpt.alphabet {
                ensure!(*a == dataset.alphabet, "checkpoint alphabet differs from the dataset alphabet");
            }
            let mut trainer = ckpt.into_trainer()?;
            if let Some(seed) = ctx.seed_opt() {
                ensure!(
                    seed == trainer.config.seed,
                    "--seed {seed} differs from the checkpoint seed {}",
                    trainer.config.seed
                );
            }
            if let Some(e) = args.epochs {
                trainer.config.epochs = e;
            }
            trainer
        }
        None => {
            let loss: LossSelector = match args.loss {
                Some(l) => l.parse()?,
                None => ctx.cfg.loss,
            };
            let mut model_cfg = ctx.cfg.model.clone();
            model_cfg.task = match loss {
                LossSelector::Ctc => Task::Sequence,
                LossSelector::Char(_) => Task::Character,
            };
            model_cfg.num_classes = dataset.alphabet.len();
            if let Some(s) = dataset.samples.first() {
                model_cfg.input_channels = s.channels();
            }
            let mut train_cfg = ctx.cfg.train.clone();
            train_cfg.seed = ctx.seed()?;
            if let Some(e) = args.epochs {
                train_cfg.epochs = e;
            }
            model_cfg.validate()?;
            let model = Model::new(model_cfg, train_cfg.seed)?;
            Trainer::new(model, train_cfg, loss, ctx.cfg.loss_params.clone())?
        }
    };

    let out = ctx.out_dir()?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let history_path = out.join(HISTORY_FILE);
    let mut history = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&history_path)
    } else {
        File::create(&history_path)
    }
    .with_context(|| format!("opening {}", history_path.display()))?;

    let alphabet = dataset.alphabet.clone();
    let records = trainer.fit_with(&dataset.samples, &fold, |t, record| {
        let line = serde_json::to_string(record)?;
        writeln!(history, "{line}")?;
        history.flush()?;
        save_checkpoint(&Checkpoint::from_trainer(t, Some(alphabet.clone())), &ckpt_path)
            .map_err(|e| Error::State(format!("{e:#}")))
    })?;
    if records.is_empty() {
        // nothing left to run; still leave a checkpoint for downstream commands
        save_checkpoint(&Checkpoint::from_trainer(&trainer, Some(alphabet)), &ckpt_path)?;
    }
    print_json(&TrainReport {
        epochs: trainer.epoch,
        last: records.last(),
        checkpoint: ckpt_path,
        history: history_path,
    })
}

struct Decoded {
    alphabet: Alphabet,
    references: Vec<Vec<usize>>,
    hypotheses: Vec<Vec<usize>>,
}

fn decode_with_checkpoint(
    ctx: &Context,
    checkpoint: PathBuf,
    dataset: Option<PathBuf>,
    folds: Option<PathBuf>,
    fold: Option<usize>,
    beam: Option<usize>,
) -> Result<Decoded> {
    let dataset = load_dataset(&input_path(dataset, &ctx.cfg.dataset, "dataset")?)?;
    let ckpt_path = input_path(Some(checkpoint), &None, "checkpoint")?;
    let ckpt = Checkpoint::load(&ckpt_path).with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    if let Some(a) = &ckpt.alphabet {
        ensure!(*a == dataset.alphabet, "checkpoint alphabet differs from the dataset alphabet");
    }
    let indices: Vec<usize> = match folds {
        Some(p) => {
            let plan = load_folds(&input_path(Some(p), &None, "folds")?, dataset.samples.len())?;
            pick_fold(&plan, fold.unwrap_or(ctx.cfg.fold))?.val
        }
        None => (0..dataset.samples.len()).collect(),
    };
    let (target_len, batch) = match &ckpt.training {
        Some(t) => (t.config.target_len, t.config.batch_size),
        None => (ctx.cfg.train.target_len, ctx.cfg.train.batch_size),
    };
    let prepared: Vec<Sample> = indices
        .iter()
        .map(|&i| interpolate(&dataset.samples[i], target_len))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Sample> = prepared.iter().collect();
    let log_probs = predict_log_probs(&ckpt.model, &refs, batch)?;
    let hypotheses = match ckpt.model.config().task {
        Task::Sequence => log_probs
            .iter()
            .map(|lp| match beam {
                Some(w) => beam_decode(lp, w),
                None => Ok(greedy_decode(lp)),
            })
            .collect::<Result<_, _>>()?,
        Task::Character => log_probs
            .iter()
            .map(|lp| {
                let row = &lp[0];
                vec![(0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })]
            })
            .collect(),
    };
    Ok(Decoded {
        alphabet: dataset.alphabet,
        references: prepared.iter().map(|s| s.label().to_vec()).collect(),
        hypotheses,
    })
}

#[derive(Serialize)]
struct DecodeReport {
    samples: usize,
    predictions: PathBuf,
    references: PathBuf,
}

pub fn decode(ctx: &Context, args: DecodeArgs) -> Result<()> {
    let decoded = decode_with_checkpoint(ctx, args.checkpoint, args.dataset, args.folds, args.fold, args.beam)?;
    let out = ctx.out_dir()?;
    let lines = |labels: &[Vec<usize>]| -> Result<String> {
        let mut s = String::new();
        for l in labels {
            s.push_str(&decode_label(l, &decoded.alphabet)?);
            s.push('\n');
        }
        Ok(s)
    };
    let report = DecodeReport {
        samples: decoded.hypotheses.len(),
        predictions: out.join("predictions.txt"),
        references: out.join("references.txt"),
    };
    fs::write(&report.predictions, lines(&decoded.hypotheses)?)?;
    fs::write(&report.references, lines(&decoded.references)?)?;
    print_json(&report)
}

#[derive(Debug, Serialize)]
pub struct Confusion {
    pub symbols: Vec<String>,
    pub matrix: Vec<Vec<u64>>,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub cer: f64,
    pub wer: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crr: Option<f64>,
    pub histograms: PositionHistograms,
    pub confusion: Confusion,
}

/// Metrics over aligned index sequences. WER splits each sequence at
/// `word_break` symbols, or treats it as one word when there is none.
pub fn evaluate_labels(
    references: &[Vec<usize>],
    hypotheses: &[Vec<usize>],
    alphabet: &Alphabet,
    word_break: Option<usize>,
    bins: usize,
) -> Result<EvalReport> {
    ensure!(
        references.len() == hypotheses.len(),
        "{} references but {} hypotheses",
        references.len(),
        hypotheses.len()
    );
    if let Some(i) = references.iter().position(Vec::is_empty) {
        bail!("reference {} is empty", i + 1);
    }
    let words = |seqs: &[Vec<usize>]| -> Vec<Vec<Vec<usize>>> {
        seqs.iter()
            .map(|s| match word_break {
                Some(b) => s
                    .split(|&c| c == b)
                    .filter(|w| !w.is_empty())
                    .map(<[usize]>::to_vec)
                    .collect(),
                None => vec![s.clone()],
            })
            .collect()
    };
    let scripts: Vec<_> = references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| metrics::edit_distance(r, h))
        .collect();
    let ref_lengths: Vec<usize> = references.iter().map(Vec::len).collect();
    let single = references.iter().chain(hypotheses).all(|s| s.len() == 1);
    Ok(EvalReport {
        samples: references.len(),
        cer: metrics::cer(references, hypotheses)?,
        wer: metrics::wer(&words(references), &words(hypotheses))?,
        crr: if single {
            Some(metrics::crr(references, hypotheses)?)
        } else {
            None
        },
        histograms: metrics::error_positions(&scripts, &ref_lengths, bins)?,
        confusion: Confusion {
            symbols: alphabet.symbols().to_vec(),
            matrix: metrics::confusion_matrix(references, hypotheses, &scripts, alphabet)?,
        },
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

pub fn evaluate(ctx: &Context, args: EvaluateArgs) -> Result<()> {
    let report = match (args.reference, args.hypothesis, args.checkpoint) {
        (Some(r), Some(h), None) => {
            let r = input_path(Some(r), &None, "reference")?;
            let h = input_path(Some(h), &None, "hypothesis")?;
            let refs = read_lines(&r)?;
            let hyps = read_lines(&h)?;
            let all: Vec<&str> = refs.iter().chain(&hyps).map(String::as_str).filter(|s| !s.is_empty()).collect();
            ensure!(!all.is_empty(), "reference and hypothesis files hold no symbols");
            let alphabet = build_alphabet(&all)?;
            let encode = |lines: &[String]| -> Result<Vec<Vec<usize>>> {
                Ok(lines
                    .iter()
                    .map(|l| onhw_core::dataio::encode_label(l, &alphabet))
                    .collect::<Result<_, _>>()?)
            };
            let space = alphabet.encode(" ").ok();
            evaluate_labels(&encode(&refs)?, &encode(&hyps)?, &alphabet, space, args.bins)?
        }
        (None, None, Some(ckpt)) => {
            let d = decode_with_checkpoint(ctx, ckpt, args.dataset, args.folds, args.fold, args.beam)?;
            evaluate_labels(&d.references, &d.hypotheses, &d.alphabet, None, args.bins)?
        }
        _ => bail!("pass either --reference and --hypothesis, or --checkpoint"),
    };
    if ctx.has_out() {
        write_json(&ctx.out_dir()?.join("evaluation.json"), &report)?;
    }
    print_json(&report)
}

/// Returns whether every check passed.
pub fn gradcheck(ctx: &Context, args: GradcheckArgs) -> Result<bool> {
    let reports: Vec<CheckReport> = gradcheck::run_suite(args.draws, ctx.seed()?)?;
    println!("{:<28} {:>6} {:>14}  status", "check", "draws", "max rel err");
    for r in &reports {
        println!(
            "{:<28} {:>6} {:>14.3e}  {}",
            r.name,
            r.draws,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} of {} checks below {:e}", reports.len() - failed, reports.len(), gradcheck::TOLERANCE);
    if ctx.has_out() {
        write_json(&ctx.out_dir()?.join("gradcheck.json"), &reports)?;
    }
    Ok(failed == 0)
}
