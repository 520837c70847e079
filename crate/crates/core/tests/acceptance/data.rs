use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use onhw_core::dataio::{encode_label, equations_alphabet, make_splits, Sample, SplitMode, STANDARD_CHANNELS};
use onhw_core::preprocess::{augment, AugmentConfig, AugmentMethod};
use onhw_core::segment::{default_constraints, split_equation, StrokeParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

const FORCE: usize = STANDARD_CHANNELS - 1;

fn stroke_table() -> BTreeMap<&'static str, Vec<usize>> {
    BTreeMap::from([
        ("0", vec![1]),
        ("1", vec![1]),
        ("2", vec![1]),
        ("3", vec![1]),
        ("4", vec![1, 2]),
        ("5", vec![2]),
        ("6", vec![1]),
        ("7", vec![1, 2]),
        ("8", vec![1]),
        ("9", vec![1]),
        ("+", vec![2]),
        ("-", vec![1]),
        ("·", vec![1]),
        (":", vec![2]),
        ("=", vec![2]),
    ])
}

/// All stroke-count assignments for `symbols` that sum to `total`, in
/// lexicographic order.
fn enumerate_assignments(options: &[Vec<usize>], total: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for opts in options {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                opts.iter().map(move |&c| {
                    let mut p = prefix.clone();
                    p.push(c);
                    p
                })
            })
            .collect();
    }
    out.retain(|a| a.iter().sum::<usize>() == total);
    out.sort();
    out
}

/// Pen trace with the given strokes per character; returns the sample and
/// the true inclusive extent of every character.
fn synth_equation(rng: &mut ChaCha8Rng, text: &str, strokes: &[usize]) -> (Sample, Vec<(usize, usize)>) {
    let mut force = vec![0.0; rng.random_range(3..8)];
    let mut extents = Vec::new();
    for (ci, &count) in strokes.iter().enumerate() {
        if ci > 0 {
            force.extend(std::iter::repeat_n(0.0, rng.random_range(8..14)));
        }
        let start = force.len();
        for si in 0..count {
            if si > 0 {
                force.extend(std::iter::repeat_n(0.0, rng.random_range(3..6)));
            }
            for _ in 0..rng.random_range(5..15) {
                force.push(rng.random_range(0.3..1.5));
            }
        }
        extents.push((start, force.len() - 1));
    }
    force.extend(std::iter::repeat_n(0.0, rng.random_range(3..8)));
    let mut values = Vec::with_capacity(force.len() * STANDARD_CHANNELS);
    for f in force {
        for _ in 0..FORCE {
            values.push(rng.random_range(-1.0..1.0));
        }
        values.push(f);
    }
    let label = encode_label(text, &equations_alphabet()).expect("known symbols");
    (Sample::new(values, STANDARD_CHANNELS, label, 0, 100.0).expect("valid"), extents)
}

pub fn segmentation() -> Outcome {
    let table = stroke_table();
    let symbols: Vec<&str> = table.keys().copied().collect();
    let alphabet = equations_alphabet();
    let constraints = default_constraints();
    let params = StrokeParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut unique, mut ambiguous) = (0usize, 0usize);
    while unique < 200 {
        let len = rng.random_range(2..=8);
        let chars: Vec<&str> = (0..len).map(|_| symbols[rng.random_range(0..symbols.len())]).collect();
        let options: Vec<Vec<usize>> = chars.iter().map(|c| table[c].clone()).collect();
        let strokes: Vec<usize> = options.iter().map(|o| o[rng.random_range(0..o.len())]).collect();
        let text: String = chars.concat();
        let (sample, extents) = synth_equation(&mut rng, &text, &strokes);
        let feasible = enumerate_assignments(&options, strokes.iter().sum());
        let split = split_equation(&sample, &alphabet, &constraints, &params).map_err(|e| e.to_string())?;
        ensure!(
            split.feasible_assignments == feasible.len() as u64,
            "{text}: {} feasible assignments reported, {} exist",
            split.feasible_assignments,
            feasible.len()
        );
        ensure!(split.strokes.len() == strokes.iter().sum::<usize>(), "{text}: stroke count");
        if feasible.len() == 1 {
            ensure!(split.assignment == strokes, "{text}: counts {:?} != {strokes:?}", split.assignment);
            ensure!(split.boundaries == extents, "{text}: boundaries {:?} != {extents:?}", split.boundaries);
            ensure!(!split.ambiguous, "{text}: unique case flagged ambiguous");
            for (c, &(s, e)) in split.characters.iter().zip(&extents) {
                ensure!(c.len() == e - s + 1, "{text}: character sample length");
            }
            unique += 1;
        } else {
            ensure!(split.ambiguous, "{text}: ambiguous case not flagged");
            ensure!(split.assignment == feasible[0], "{text}: not the lexicographic minimum");
            ambiguous += 1;
        }
    }

    let (s47, _) = synth_equation(&mut rng, "47", &[1, 2]);
    let split = split_equation(&s47, &alphabet, &constraints, &params).map_err(|e| e.to_string())?;
    ensure!(split.ambiguous && split.feasible_assignments == 2, "\"47\" with 3 strokes not ambiguous");
    ensure!(split.assignment == vec![1, 2], "\"47\" picked {:?}", split.assignment);
    Ok(format!(
        "{unique} unique equations exact, {ambiguous} ambiguous ones flagged with lexicographic choice; \"47\" -> (1, 2) ambiguous"
    ))
}

pub fn splits() -> Outcome {
    let samples: Vec<Sample> = (0..50u32)
        .flat_map(|w| (0..20).map(move |i| Sample::new(vec![i as f64, 1.0], 2, vec![0], w, 100.0).unwrap()))
        .collect();
    let n = samples.len();
    let mut checked = 0;
    for k in [2, 3, 5, 7, 10] {
        for seed in [0u64, 1, 99] {
            let wi = make_splits(&samples, SplitMode::WriterIndependent, k, seed).map_err(|e| e.to_string())?;
            let wd = make_splits(&samples, SplitMode::WriterDependent, k, seed).map_err(|e| e.to_string())?;
            for plan in [&wi, &wd] {
                ensure!(plan.folds.len() == k, "k={k}: {} folds", plan.folds.len());
                let mut seen = vec![0usize; n];
                for f in &plan.folds {
                    let train: BTreeSet<usize> = f.train.iter().copied().collect();
                    let val: BTreeSet<usize> = f.val.iter().copied().collect();
                    ensure!(train.is_disjoint(&val), "train and val overlap");
                    ensure!(train.len() + val.len() == n, "fold does not cover the dataset");
                    f.val.iter().for_each(|&i| seen[i] += 1);
                }
                ensure!(seen.iter().all(|&c| c == 1), "a sample is not validated exactly once");
            }
            for f in &wi.folds {
                let tw: BTreeSet<u32> = f.train.iter().map(|&i| samples[i].writer_id()).collect();
                let vw: BTreeSet<u32> = f.val.iter().map(|&i| samples[i].writer_id()).collect();
                ensure!(tw.is_disjoint(&vw), "k={k} seed={seed}: WI fold shares writers");
            }
            for w in 0..50u32 {
                let per_fold: Vec<usize> = wd
                    .folds
                    .iter()
                    .map(|f| f.val.iter().filter(|&&i| samples[i].writer_id() == w).count())
                    .collect();
                let (lo, hi) = (per_fold.iter().min().unwrap(), per_fold.iter().max().unwrap());
                ensure!(hi - lo <= 1, "k={k} seed={seed}: writer {w} spread {per_fold:?}");
            }
            let again = make_splits(&samples, SplitMode::WriterIndependent, k, seed).map_err(|e| e.to_string())?;
            ensure!(again == wi, "WI plan not reproducible");
            let again = make_splits(&samples, SplitMode::WriterDependent, k, seed).map_err(|e| e.to_string())?;
            ensure!(again == wd, "WD plan not reproducible");
            ensure!(
                serde_json::to_string(&again).unwrap() == serde_json::to_string(&wd).unwrap(),
                "serialized plans differ"
            );
            checked += 2;
        }
    }
    let a = make_splits(&samples, SplitMode::WriterIndependent, 5, 1).unwrap();
    let b = make_splits(&samples, SplitMode::WriterIndependent, 5, 2).unwrap();
    ensure!(a != b, "different seeds gave identical WI plans");
    Ok(format!("{checked} plans over 50 writers x 20 samples: WI writer-disjoint, WD balanced within 1, reproducible"))
}

fn pen_sample(rng: &mut ChaCha8Rng, len: usize) -> Sample {
    let mut values = Vec::with_capacity(len * STANDARD_CHANNELS);
    for t in 0..len {
        for c in 0..STANDARD_CHANNELS {
            let base = ((t as f64) * 0.1 * (c + 1) as f64).sin() * (c + 1) as f64;
            let v = base + rng.random_range(-0.5..0.5);
            values.push(if c == FORCE { v.abs() + 0.1 } else { v });
        }
    }
    Sample::new(values, STANDARD_CHANNELS, vec![0], 1, 100.0).unwrap()
}

fn digest(s: &Sample) -> u64 {
    let mut h = DefaultHasher::new();
    s.values().iter().for_each(|v| v.to_bits().hash(&mut h));
    h.finish()
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn augmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = pen_sample(&mut rng, 120);
    let all: BTreeSet<AugmentMethod> = AugmentMethod::ALL.into_iter().collect();
    let cfg = AugmentConfig::default();
    let e = |err: onhw_core::Error| err.to_string();

    for seed in 0..50 {
        let a = augment(&base, &cfg, &all, seed).map_err(e)?;
        let b = augment(&base, &cfg, &all, seed).map_err(e)?;
        ensure!(digest(&a) == digest(&b), "seed {seed}: outputs differ between runs");
    }
    let distinct: BTreeSet<u64> = (0..50).map(|s| digest(&augment(&base, &cfg, &all, s).unwrap())).collect();
    ensure!(distinct.len() > 45, "seeds barely change the output");

    let off = AugmentConfig { p_apply: 0.0, ..cfg.clone() };
    for seed in 0..50 {
        ensure!(augment(&base, &off, &all, seed).map_err(e)? == base, "p_apply=0 changed the sample");
    }

    let on = AugmentConfig { p_apply: 1.0, ..cfg.clone() };
    let scale = BTreeSet::from([AugmentMethod::Scale]);
    for seed in 0..200 {
        let out = augment(&base, &on, &scale, seed).map_err(e)?;
        for c in 0..STANDARD_CHANNELS {
            let (x, y) = (base.channel(c), out.channel(c));
            let ratio = y[0] / x[0];
            ensure!((0.9..=1.1).contains(&ratio), "scale ratio {ratio} outside [0.9, 1.1]");
            for (a, b) in x.iter().zip(&y) {
                ensure!((b - ratio * a).abs() <= 1e-9 * a.abs().max(1.0), "scale ratio not constant");
            }
        }
    }

    // 10,000 jitter draws; noise pooled per channel and normalized by sigma * std
    let short = pen_sample(&mut rng, 40);
    let jitter = BTreeSet::from([AugmentMethod::Jitter]);
    let stds: Vec<f64> = (0..STANDARD_CHANNELS).map(|c| std_dev(&short.channel(c))).collect();
    let mut pooled = vec![Vec::with_capacity(10_000 * 40); STANDARD_CHANNELS];
    for seed in 0..10_000 {
        let out = augment(&short, &on, &jitter, seed).map_err(e)?;
        for (t, (a, b)) in short.values().iter().zip(out.values()).enumerate() {
            let c = t % STANDARD_CHANNELS;
            pooled[c].push((b - a) / (on.jitter_sigma * stds[c]));
        }
    }
    let mut worst_jitter = 0.0f64;
    for (c, noise) in pooled.iter().enumerate() {
        let ratio = std_dev(noise);
        worst_jitter = worst_jitter.max((ratio - 1.0).abs());
        ensure!((ratio - 1.0).abs() <= 0.1, "channel {c}: jitter std ratio {ratio}");
    }

    let warp = BTreeSet::from([AugmentMethod::TimeWarp]);
    for seed in 0..500 {
        let out = augment(&base, &on, &warp, seed).map_err(e)?;
        ensure!(out.len() == base.len(), "time warp changed the length");
        for c in 0..STANDARD_CHANNELS {
            let last = base.len() - 1;
            ensure!((out.get(0, c) - base.get(0, c)).abs() <= 1e-9, "first row moved");
            ensure!((out.get(last, c) - base.get(last, c)).abs() <= 1e-9, "last row moved");
        }
    }
    Ok(format!(
        "deterministic over 50 seeds, p=0 identity, scale ratios constant in [0.9, 1.1], jitter std within {:.1}% over 10,000 draws, warp endpoints fixed",
        worst_jitter * 100.0
    ))
}
