//! Central finite-difference checks of every analytic gradient.
//!
//! Each check draws random inputs, reduces the op's output to a scalar with a
//! random projection, and compares backpropagated gradients with
//! `(f(x + h) - f(x - h)) / 2h` element by element.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::losses::{ctc_loss, ctc_min_frames, CharLoss, LossParams};
use crate::netcore::{Mode, Model, ModelConfig, RecurrentKind, Tape, Task, Tensor, Var};
use crate::rng::stream;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms; central
/// differences carry rounding noise near `1e-16 * |f| / STEP`.
pub const ABS_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub draws: usize,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::new(shape.to_vec(), normal(rng, shape.iter().product(), scale)).expect("shape")
}

/// Max relative error of a scalar function of flat vectors.
pub fn check_scalar(
    inputs: &[Vec<f64>],
    analytic: &[Vec<f64>],
    f: impl Fn(&[Vec<f64>]) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            work[i][j] = input[j] + STEP;
            let up = f(&work)?;
            work[i][j] = input[j] - STEP;
            let down = f(&work)?;
            work[i][j] = input[j];
            let n = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[i][j], n));
        }
    }
    Ok(worst)
}

/// Checks a tape-built function of `inputs` under the objective `sum(r * y)`.
pub fn check_tape(
    inputs: &[Tensor],
    projection_seed: u64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let run = |values: &[Vec<f64>]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let leaves = inputs
            .iter()
            .zip(values)
            .map(|(t, v)| tape.leaf(Tensor::new(t.shape().to_vec(), v.clone())?))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &leaves)?;
        Ok((tape, leaves, out))
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
    let (mut tape, leaves, out) = run(&base)?;
    let proj = normal(&mut stream(projection_seed, &[0x50524f4a]), tape.value(out).len(), 1.0);
    tape.backward(out, proj.clone())?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(&base)
        .map(|(&v, b)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; b.len()]))
        .collect();
    check_scalar(&base, &analytic, |vals| {
        let (tape, _, out) = run(vals)?;
        Ok(tape.value(out).data().iter().zip(&proj).map(|(a, b)| a * b).sum())
    })
}

fn distinct_values(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let data = order
        .into_iter()
        .map(|k| k as f64 * 0.1 - n as f64 * 0.05 + rng.random_range(0.0..0.01))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.01..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn logits_with_margin(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    loop {
        let z = normal(rng, k, 2.0);
        let mut sorted = z.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[0] - sorted[1] > 1e-3 {
            return z;
        }
    }
}

fn char_loss_check(loss: CharLoss, draws: usize, seed: u64) -> Result<f64> {
    let params = LossParams::default();
    let mut worst = 0.0f64;
    for d in 0..draws {
        let mut rng = stream(seed, &[0x4c4f5353, loss as u64, d as u64]);
        let k = rng.random_range(2..=10);
        if loss == CharLoss::JointOpt {
            let b = rng.random_range(1..=4);
            let logits: Vec<Vec<f64>> = (0..b).map(|_| logits_with_margin(&mut rng, k)).collect();
            let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let prior: Vec<f64> = raw.iter().map(|v| v / raw.iter().sum::<f64>()).collect();
            let out = loss.eval_batch(&logits, &targets, &params, Some(&prior))?;
            let e = check_scalar(&logits, &out.grads, |z| {
                Ok(loss.eval_batch(z, &targets, &params, Some(&prior))?.value)
            })?;
            worst = worst.max(e);
        } else {
            let z = logits_with_margin(&mut rng, k);
            let t = rng.random_range(0..k);
            let out = loss.eval(&z, t, &params)?;
            let e = check_scalar(&[z], &[out.grad], |zz| Ok(loss.eval(&zz[0], t, &params)?.value))?;
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

fn ctc_check(draws: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for d in 0..draws {
        let mut rng = stream(seed, &[0x435443, d as u64]);
        let k = rng.random_range(1..=3);
        let t_len = rng.random_range(1..=6);
        let target = loop {
            let l = rng.random_range(0..=3usize.min(t_len));
            let cand: Vec<usize> = (0..l).map(|_| rng.random_range(0..k)).collect();
            if ctc_min_frames(&cand) <= t_len {
                break cand;
            }
        };
        let lp: Vec<Vec<f64>> = (0..t_len).map(|_| normal(&mut rng, k + 1, 1.0)).collect();
        let out = ctc_loss(&lp, &target)?;
        let flat = vec![lp.concat()];
        let e = check_scalar(&flat, &[out.grad], |v| {
            let rows: Vec<Vec<f64>> = v[0].chunks(k + 1).map(<[f64]>::to_vec).collect();
            Ok(ctc_loss(&rows, &target)?.value)
        })?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn model_check(task: Task, kind: RecurrentKind, draws: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for d in 0..draws {
        let mut rng = stream(seed, &[0x4d4f44, task as u64, kind as u64, d as u64]);
        let cfg = ModelConfig {
            task,
            input_channels: 2,
            conv_filters: 3,
            conv_kernel: rng.random_range(1..=4),
            pool_size: rng.random_range(1..=2),
            dropout_rate: 0.2,
            recurrent_kind: kind,
            lstm_units: 2,
            bilstm_units: 2,
            bilstm_layers: 2,
            dense_units: 3,
            num_classes: 3,
            use_batchnorm: true,
            ..Default::default()
        };
        let model = Model::new(cfg, rng.random())?;
        let t = rng.random_range(3..=5);
        let x = tensor(&mut rng, &[2, t, 2], 1.0);
        let mode = Mode::Train { seed: rng.random() };

        let mut pass = model.forward(x.clone(), mode)?;
        let proj = normal(&mut rng, pass.tape.value(pass.output).len(), 1.0);
        pass.tape.backward(pass.output, proj.clone())?;
        let mut analytic = vec![pass.tape.grad(pass.input).map(<[f64]>::to_vec).unwrap_or_default()];
        analytic.extend(pass.param_grads());

        let mut inputs = vec![x.data().to_vec()];
        inputs.extend(model.params().iter().map(|p| p.data().to_vec()));
        let e = check_scalar(&inputs, &analytic, |vals| {
            let mut m = model.clone();
            for (p, v) in m.params_mut().iter_mut().zip(&vals[1..]) {
                p.data_mut().copy_from_slice(v);
            }
            let input = Tensor::new(x.shape().to_vec(), vals[0].clone())?;
            let pass = m.forward(input, mode)?;
            Ok(pass.tape.value(pass.output).data().iter().zip(&proj).map(|(a, b)| a * b).sum())
        })?;
        worst = worst.max(e);
    }
    Ok(worst)
}

type LayerCheck = fn(&mut ChaCha8Rng, u64) -> Result<f64>;

fn layer_checks() -> Vec<(&'static str, LayerCheck)> {
    vec![
        ("conv1d", |rng, s| {
            let (b, t, cin, cout, k) = (2, rng.random_range(1..=6), 2, 3, rng.random_range(1..=5));
            let ins = [tensor(rng, &[b, t, cin], 1.0), tensor(rng, &[cout, cin, k], 1.0), tensor(rng, &[cout], 1.0)];
            check_tape(&ins, s, |tp, v| tp.conv1d(v[0], v[1], v[2]))
        }),
        ("maxpool1d", |rng, s| {
            let (t, p) = (rng.random_range(1..=7), rng.random_range(1..=3));
            let ins = [distinct_values(rng, &[2, t, 2])];
            check_tape(&ins, s, move |tp, v| tp.maxpool1d(v[0], p))
        }),
        ("batchnorm_train", |rng, s| {
            let t = rng.random_range(2..=5);
            let ins = [tensor(rng, &[2, t, 3], 2.0), tensor(rng, &[3], 1.0), tensor(rng, &[3], 1.0)];
            check_tape(&ins, s, |tp, v| tp.batchnorm_train(v[0], v[1], v[2], 1e-5))
        }),
        ("batchnorm_eval", |rng, s| {
            let mean = normal(rng, 3, 1.0);
            let var: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..2.0)).collect();
            let ins = [tensor(rng, &[2, 3, 3], 1.0), tensor(rng, &[3], 1.0), tensor(rng, &[3], 1.0)];
            check_tape(&ins, s, move |tp, v| tp.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5))
        }),
        ("dropout", |rng, s| {
            let seed = rng.random();
            let ins = [tensor(rng, &[2, 4, 3], 1.0)];
            check_tape(&ins, s, move |tp, v| tp.dropout(v[0], 0.3, seed))
        }),
        ("lstm", |rng, s| {
            let (t, c, h) = (3, 2, 2);
            let ins = [
                tensor(rng, &[2, t, c], 1.0),
                tensor(rng, &[4 * h, c], 0.7),
                tensor(rng, &[4 * h, h], 0.7),
                tensor(rng, &[4 * h], 0.5),
            ];
            check_tape(&ins, s, |tp, v| tp.lstm(v[0], v[1], v[2], v[3], false))
        }),
        ("lstm_reverse", |rng, s| {
            let (t, c, h) = (rng.random_range(1..=4), 2, 3);
            let ins = [
                tensor(rng, &[1, t, c], 1.0),
                tensor(rng, &[4 * h, c], 0.7),
                tensor(rng, &[4 * h, h], 0.7),
                tensor(rng, &[4 * h], 0.5),
            ];
            check_tape(&ins, s, |tp, v| tp.lstm(v[0], v[1], v[2], v[3], true))
        }),
        ("bilstm", |rng, s| {
            let (t, c, h) = (3, 2, 2);
            let mut ins = vec![tensor(rng, &[2, t, c], 1.0)];
            for _ in 0..2 {
                ins.push(tensor(rng, &[4 * h, c], 0.7));
                ins.push(tensor(rng, &[4 * h, h], 0.7));
                ins.push(tensor(rng, &[4 * h], 0.5));
            }
            check_tape(&ins, s, |tp, v| {
                let f = tp.lstm(v[0], v[1], v[2], v[3], false)?;
                let b = tp.lstm(v[0], v[4], v[5], v[6], true)?;
                tp.concat(f, b)
            })
        }),
        ("dense", |rng, s| {
            let ins = [tensor(rng, &[2, 3, 4], 1.0), tensor(rng, &[5, 4], 1.0), tensor(rng, &[5], 1.0)];
            check_tape(&ins, s, |tp, v| tp.dense(v[0], v[1], v[2]))
        }),
        ("relu", |rng, s| {
            let ins = [away_from_zero(rng, &[2, 3, 4])];
            check_tape(&ins, s, |tp, v| tp.relu(v[0]))
        }),
        ("log_softmax", |rng, s| {
            let ins = [tensor(rng, &[2, 3, 4], 2.0)];
            check_tape(&ins, s, |tp, v| tp.log_softmax(v[0]))
        }),
        ("mean_time", |rng, s| {
            let t = rng.random_range(1..=5);
            let ins = [tensor(rng, &[2, t, 3], 1.0)];
            check_tape(&ins, s, |tp, v| tp.mean_time(v[0]))
        }),
        ("concat", |rng, s| {
            let ins = [tensor(rng, &[2, 3, 2], 1.0), tensor(rng, &[2, 3, 1], 1.0)];
            check_tape(&ins, s, |tp, v| tp.concat(v[0], v[1]))
        }),
    ]
}

/// Runs every check with `draws` random draws each.
pub fn run_suite(draws: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for loss in CharLoss::ALL {
        out.push(CheckReport {
            name: format!("loss/{loss}"),
            draws,
            max_rel_error: char_loss_check(loss, draws, seed)?,
        });
    }
    out.push(CheckReport {
        name: "loss/ctc".into(),
        draws,
        max_rel_error: ctc_check(draws, seed)?,
    });
    for (i, (name, check)) in layer_checks().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for d in 0..draws {
            let mut rng = stream(seed, &[0x4c4159, i as u64, d as u64]);
            let proj_seed = rng.random();
            worst = worst.max(check(&mut rng, proj_seed)?);
        }
        out.push(CheckReport {
            name: format!("layer/{name}"),
            draws,
            max_rel_error: worst,
        });
    }
    for (task, kind, name) in [
        (Task::Sequence, RecurrentKind::Lstm, "model/seq2seq_lstm"),
        (Task::Sequence, RecurrentKind::BiLstm, "model/seq2seq_bilstm"),
        (Task::Character, RecurrentKind::BiLstm, "model/char_bilstm"),
    ] {
        out.push(CheckReport {
            name: name.into(),
            draws,
            max_rel_error: model_check(task, kind, draws, seed)?,
        });
    }
    Ok(out)
}
