//! Central-difference checks with h = 1e-5 in double precision.

use onhw_core::losses::{ctc_loss, ctc_min_frames, CharLoss, LossParams};
use onhw_core::netcore::{Mode, Model, ModelConfig, RecurrentKind, Tape, Task, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

const H: f64 = 1e-5;
const DRAWS: usize = 100;
const TOL: f64 = 1e-4;
/// Absolute scale below which differences count as rounding noise.
const FLOOR: f64 = 1e-5;

type R<T> = Result<T, String>;

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Largest relative error between `grad` and central differences of `f`
/// around `x`.
fn max_error(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> R<f64>) -> R<f64> {
    let mut w = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        w[i] = x[i] + H;
        let up = f(&w)?;
        w[i] = x[i] - H;
        let down = f(&w)?;
        w[i] = x[i];
        worst = worst.max(rel(grad[i], (up - down) / (2.0 * H)));
    }
    Ok(worst)
}

fn gauss(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    // Box-Muller keeps this harness independent of the library's samplers
    (0..n)
        .map(|_| {
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random();
            scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

/// Flattens several tensors, rebuilds them on a fresh tape for every
/// evaluation, and reduces the output with a fixed random projection.
fn tape_error(
    rng: &mut ChaCha8Rng,
    shapes: &[Vec<usize>],
    x: Vec<f64>,
    build: &dyn Fn(&mut Tape, &[Var]) -> onhw_core::Result<Var>,
) -> R<f64> {
    let e = |err: onhw_core::Error| err.to_string();
    let eval = |flat: &[f64]| -> R<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let mut off = 0;
        let mut vars = Vec::new();
        for s in shapes {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), flat[off..off + n].to_vec()).map_err(e)?;
            vars.push(tape.leaf(t).map_err(e)?);
            off += n;
        }
        let out = build(&mut tape, &vars).map_err(e)?;
        Ok((tape, vars, out))
    };
    let (mut tape, vars, out) = eval(&x)?;
    let proj = gauss(rng, tape.value(out).len(), 1.0);
    tape.backward(out, proj.clone()).map_err(e)?;
    let mut grad = Vec::with_capacity(x.len());
    for v in &vars {
        match tape.grad(*v) {
            Some(g) => grad.extend_from_slice(g),
            None => grad.extend(std::iter::repeat_n(0.0, tape.value(*v).len())),
        }
    }
    max_error(&x, &grad, |w| {
        let (tape, _, out) = eval(w)?;
        Ok(tape.value(out).data().iter().zip(&proj).map(|(a, b)| a * b).sum())
    })
}

fn n(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn distinct(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|i| i as f64 * 0.05).collect();
    v.shuffle(rng);
    v
}

type Check = Box<dyn Fn(&mut ChaCha8Rng) -> R<f64>>;

fn checks() -> Vec<(String, Check)> {
    let mut out: Vec<(String, Check)> = Vec::new();
    for loss in CharLoss::ALL {
        out.push((
            format!("{loss}"),
            Box::new(move |rng| {
                let p = LossParams::default();
                let k = rng.random_range(2..=10);
                let b = if loss == CharLoss::JointOpt { rng.random_range(1..=4) } else { 1 };
                let z: Vec<f64> = loop {
                    // keep boot_hard's argmax stable under the perturbation
                    let z = gauss(rng, b * k, 1.5);
                    let ok = z.chunks(k).all(|row| {
                        let mut s = row.to_vec();
                        s.sort_by(|a, b| b.total_cmp(a));
                        s[0] - s[1] > 1e-3
                    });
                    if ok {
                        break z;
                    }
                };
                let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
                let prior: Vec<f64> = raw.iter().map(|v| v / raw.iter().sum::<f64>()).collect();
                let f = |w: &[f64]| -> R<(f64, Vec<f64>)> {
                    let rows: Vec<Vec<f64>> = w.chunks(k).map(<[f64]>::to_vec).collect();
                    let o = loss
                        .eval_batch(&rows, &targets, &p, Some(&prior))
                        .map_err(|e| e.to_string())?;
                    Ok((o.value, o.grads.concat()))
                };
                let (_, g) = f(&z)?;
                max_error(&z, &g, |w| Ok(f(w)?.0))
            }),
        ));
    }
    out.push((
        "ctc".into(),
        Box::new(|rng| {
            let k = rng.random_range(1..=3);
            let t = rng.random_range(1..=8);
            let target: Vec<usize> = loop {
                let l = rng.random_range(0..=4);
                let c: Vec<usize> = (0..l).map(|_| rng.random_range(0..k)).collect();
                if ctc_min_frames(&c) <= t {
                    break c;
                }
            };
            let x = gauss(rng, t * (k + 1), 1.0);
            let f = |w: &[f64]| -> R<(f64, Vec<f64>)> {
                let rows: Vec<Vec<f64>> = w.chunks(k + 1).map(<[f64]>::to_vec).collect();
                let o = ctc_loss(&rows, &target).map_err(|e| e.to_string())?;
                Ok((o.value, o.grad))
            };
            let (_, g) = f(&x)?;
            max_error(&x, &g, |w| Ok(f(w)?.0))
        }),
    ));

    macro_rules! layer {
        ($name:expr, |$rng:ident| $setup:block) => {
            out.push(($name.into(), Box::new(move |$rng: &mut ChaCha8Rng| $setup)));
        };
    }
    layer!("conv1d", |rng| {
        let (t, k) = (rng.random_range(1..=7), rng.random_range(1..=5));
        let shapes = vec![vec![2, t, 3], vec![4, 3, k], vec![4]];
        let x = gauss(rng, shapes.iter().map(|s| n(s)).sum(), 1.0);
        tape_error(rng, &shapes, x, &|tp, v| tp.conv1d(v[0], v[1], v[2]))
    });
    layer!("maxpool1d", |rng| {
        let (t, p) = (rng.random_range(1..=8), rng.random_range(1..=3));
        let shapes = vec![vec![2, t, 2]];
        let x = distinct(rng, n(&shapes[0]));
        tape_error(rng, &shapes, x, &move |tp, v| tp.maxpool1d(v[0], p))
    });
    layer!("batchnorm (train)", |rng| {
        let t = rng.random_range(2..=6);
        let shapes = vec![vec![2, t, 3], vec![3], vec![3]];
        let x = gauss(rng, shapes.iter().map(|s| n(s)).sum(), 1.5);
        tape_error(rng, &shapes, x, &|tp, v| tp.batchnorm_train(v[0], v[1], v[2], 1e-5))
    });
    layer!("batchnorm (eval)", |rng| {
        let mean = gauss(rng, 3, 1.0);
        let var: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..3.0)).collect();
        let shapes = vec![vec![2, 4, 3], vec![3], vec![3]];
        let x = gauss(rng, shapes.iter().map(|s| n(s)).sum(), 1.0);
        tape_error(rng, &shapes, x, &move |tp, v| tp.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5))
    });
    layer!("dropout", |rng| {
        let seed = rng.random();
        let shapes = vec![vec![2, 5, 3]];
        let x = gauss(rng, 30, 1.0);
        tape_error(rng, &shapes, x, &move |tp, v| tp.dropout(v[0], 0.2, seed))
    });
    for reverse in [false, true] {
        let name = if reverse { "lstm (reverse)" } else { "lstm" };
        layer!(name, |rng| {
            let (t, c, h) = (3, 2, 2);
            let shapes = vec![vec![2, t, c], vec![4 * h, c], vec![4 * h, h], vec![4 * h]];
            let x = gauss(rng, shapes.iter().map(|s| n(s)).sum(), 0.8);
            tape_error(rng, &shapes, x, &move |tp, v| tp.lstm(v[0], v[1], v[2], v[3], reverse))
        });
    }
    layer!("bilstm", |rng| {
        let (t, c, h) = (rng.random_range(1..=4), 2, 2);
        let mut shapes = vec![vec![1, t, c]];
        for _ in 0..2 {
            shapes.extend([vec![4 * h, c], vec![4 * h, h], vec![4 * h]]);
        }
        let x = gauss(rng, shapes.iter().map(|s| n(s)).sum(), 0.8);
        tape_error(rng, &shapes, x, &|tp, v| {
            let f = tp.lstm(v[0], v[1], v[2], v[3], false)?;
            let b = tp.lstm(v[0], v[4], v[5], v[6], true)?;
            tp.concat(f, b)
        })
    });
    layer!("dense", |rng| {
        let shapes = vec![vec![2, 3, 4], vec![5, 4], vec![5]];
        let x = gauss(rng, shapes.iter().map(|s| n(s)).sum(), 1.0);
        tape_error(rng, &shapes, x, &|tp, v| tp.dense(v[0], v[1], v[2]))
    });
    layer!("relu", |rng| {
        let shapes = vec![vec![3, 4]];
        let x: Vec<f64> = gauss(rng, 12, 1.0)
            .into_iter()
            .map(|v| if v.abs() < 1e-2 { v.signum() * 0.5 } else { v })
            .collect();
        tape_error(rng, &shapes, x, &|tp, v| tp.relu(v[0]))
    });
    layer!("log_softmax", |rng| {
        let shapes = vec![vec![2, 3, 5]];
        let x = gauss(rng, 30, 2.0);
        tape_error(rng, &shapes, x, &|tp, v| tp.log_softmax(v[0]))
    });
    layer!("mean over time", |rng| {
        let t = rng.random_range(1..=6);
        let shapes = vec![vec![2, t, 3]];
        let x = gauss(rng, n(&shapes[0]), 1.0);
        tape_error(rng, &shapes, x, &|tp, v| tp.mean_time(v[0]))
    });
    layer!("concat", |rng| {
        let shapes = vec![vec![2, 3, 2], vec![2, 3, 3]];
        let x = gauss(rng, 30, 1.0);
        tape_error(rng, &shapes, x, &|tp, v| tp.concat(v[0], v[1]))
    });
    for (task, kind) in [
        (Task::Sequence, RecurrentKind::Lstm),
        (Task::Sequence, RecurrentKind::BiLstm),
        (Task::Character, RecurrentKind::BiLstm),
    ] {
        out.push((
            format!("model {task:?}/{kind:?}"),
            Box::new(move |rng| model_error(rng, task, kind)),
        ));
    }
    out
}

/// Whole network: gradients with respect to the input and every parameter.
fn model_error(rng: &mut ChaCha8Rng, task: Task, kind: RecurrentKind) -> R<f64> {
    let e = |err: onhw_core::Error| err.to_string();
    let cfg = ModelConfig {
        task,
        input_channels: 3,
        conv_filters: 3,
        conv_kernel: rng.random_range(1..=4),
        pool_size: rng.random_range(1..=2),
        recurrent_kind: kind,
        lstm_units: 2,
        bilstm_units: 2,
        bilstm_layers: 2,
        dense_units: 3,
        num_classes: 3,
        ..Default::default()
    };
    let model = Model::new(cfg, rng.random()).map_err(e)?;
    let t = rng.random_range(2..=5);
    let mode = Mode::Train { seed: rng.random() };
    let mut x = gauss(rng, 2 * t * 3, 1.0);
    for p in model.params() {
        x.extend_from_slice(p.data());
    }
    let sizes: Vec<usize> = model.params().iter().map(Tensor::len).collect();
    let run = |flat: &[f64]| -> R<onhw_core::netcore::ForwardPass> {
        let mut m = model.clone();
        let mut off = 2 * t * 3;
        for (p, &len) in m.params_mut().iter_mut().zip(&sizes) {
            p.data_mut().copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        let input = Tensor::new(vec![2, t, 3], flat[..2 * t * 3].to_vec()).map_err(e)?;
        m.forward(input, mode).map_err(e)
    };
    let mut pass = run(&x)?;
    let proj = gauss(rng, pass.tape.value(pass.output).len(), 1.0);
    pass.tape.backward(pass.output, proj.clone()).map_err(e)?;
    let mut grad = pass.tape.grad(pass.input).map(<[f64]>::to_vec).unwrap_or_default();
    grad.extend(pass.param_grads().concat());
    max_error(&x, &grad, |w| {
        let p = run(w)?;
        Ok(p.tape.value(p.output).data().iter().zip(&proj).map(|(a, b)| a * b).sum())
    })
}

pub fn suite() -> Outcome {
    let mut lines = Vec::new();
    let mut overall = 0.0f64;
    for (i, (name, check)) in checks().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for d in 0..DRAWS {
            let mut rng = ChaCha8Rng::seed_from_u64((i as u64) << 32 | d as u64);
            worst = worst.max(check(&mut rng)?);
        }
        ensure!(worst < TOL, "{name}: max relative error {worst:.2e} over {DRAWS} draws");
        overall = overall.max(worst);
        lines.push(format!("{name} {worst:.1e}"));
    }
    Ok(format!(
        "{} checks x {DRAWS} draws, max rel error {overall:.2e} [{}]",
        lines.len(),
        lines.join(", ")
    ))
}
