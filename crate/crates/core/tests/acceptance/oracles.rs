use std::collections::BTreeMap;

use onhw_core::losses::{beam_decode, ctc_loss, ctc_min_frames};
use onhw_core::metrics;
use onhw_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

/// Edit distance straight from its recursive definition, memoized per pair.
fn recursive_ed(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut [Option<usize>], w: usize) -> usize {
        if let Some(v) = memo[i * w + j] {
            return v;
        }
        let v = if i.min(j) == 0 {
            i.max(j)
        } else {
            let del = go(a, b, i - 1, j, memo, w) + 1;
            let ins = go(a, b, i, j - 1, memo, w) + 1;
            let sub = go(a, b, i - 1, j - 1, memo, w) + usize::from(a[i - 1] != b[j - 1]);
            del.min(ins).min(sub)
        };
        memo[i * w + j] = Some(v);
        v
    }
    let w = b.len() + 1;
    let mut memo = vec![None; (a.len() + 1) * w];
    go(a, b, a.len(), b.len(), &mut memo, w)
}

fn all_strings(max_len: usize, symbols: u8) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..symbols {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub fn edit_distance_oracle() -> Outcome {
    let words = all_strings(6, 3);
    let mut pairs = 0usize;
    for a in &words {
        for b in &words {
            let script = metrics::edit_distance(a, b);
            let expected = recursive_ed(a, b);
            ensure!(script.distance == expected, "{a:?} vs {b:?}: {} != {expected}", script.distance);
            ensure!(
                script.substitutions + script.insertions + script.deletions == expected,
                "{a:?} vs {b:?}: operation counts do not sum to the distance"
            );
            ensure!(script.apply(a, b).as_deref() == Some(&a[..]), "{a:?} vs {b:?}: alignment does not replay");
            pairs += 1;
        }
    }
    let k = metrics::edit_distance(&"kitten".chars().collect::<Vec<_>>(), &"sitting".chars().collect::<Vec<_>>());
    ensure!(k.distance == 3, "kitten/sitting gave {}", k.distance);
    Ok(format!("{pairs} pairs equal the recursive definition; kitten/sitting = 3"))
}

/// Labeling probabilities by enumerating every frame path.
fn labeling_probs(probs: &[Vec<f64>]) -> BTreeMap<Vec<usize>, f64> {
    let (t_len, classes) = (probs.len(), probs[0].len());
    let blank = classes - 1;
    let mut out = BTreeMap::new();
    let mut path = vec![0usize; t_len];
    loop {
        let p: f64 = path.iter().enumerate().map(|(t, &c)| probs[t][c]).product();
        let mut labeling = Vec::new();
        let mut prev = None;
        for &c in &path {
            if Some(c) != prev && c != blank {
                labeling.push(c);
            }
            prev = Some(c);
        }
        *out.entry(labeling).or_insert(0.0) += p;
        // odometer increment
        let mut i = 0;
        loop {
            if i == t_len {
                return out;
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

pub fn ctc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut compared, mut infeasible, mut beams) = (0usize, 0usize, 0usize);
    let mut worst = 0.0f64;
    for t_len in 1..=6 {
        for k in 1..=3usize {
            let targets: Vec<Vec<usize>> = all_strings(3, k as u8)
                .into_iter()
                .map(|s| s.into_iter().map(usize::from).collect())
                .collect();
            for _ in 0..20 {
                let probs: Vec<Vec<f64>> = (0..t_len)
                    .map(|_| {
                        let raw: Vec<f64> = (0..=k).map(|_| rng.random_range(0.05..1.0)).collect();
                        let s: f64 = raw.iter().sum();
                        raw.into_iter().map(|v| v / s).collect()
                    })
                    .collect();
                let lp: Vec<Vec<f64>> = probs.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
                let brute = labeling_probs(&probs);
                for target in &targets {
                    if ctc_min_frames(target) > t_len {
                        ensure!(
                            matches!(ctc_loss(&lp, target), Err(Error::Infeasible(_))),
                            "T={t_len} target {target:?} should be infeasible"
                        );
                        ensure!(!brute.contains_key(target), "brute force emitted an infeasible target");
                        infeasible += 1;
                        continue;
                    }
                    let expected = -brute[target].ln();
                    let got = ctc_loss(&lp, target).map_err(|e| e.to_string())?.value;
                    let err = (got - expected).abs();
                    worst = worst.max(err);
                    ensure!(err <= 1e-9, "T={t_len} K={k} {target:?}: {got} vs {expected}");
                    compared += 1;
                }
                let best = brute.values().copied().fold(0.0, f64::max);
                let decoded = beam_decode(&lp, 1 << 12).map_err(|e| e.to_string())?;
                let got = brute.get(&decoded).copied().unwrap_or(0.0);
                ensure!(
                    got >= best * (1.0 - 1e-12),
                    "T={t_len} K={k}: beam picked {decoded:?} with p={got}, best p={best}"
                );
                beams += 1;
            }
        }
    }
    Ok(format!(
        "{compared} losses within 1e-9 (max err {worst:.1e}), {infeasible} infeasible rejected, {beams} beam decodes exact"
    ))
}
