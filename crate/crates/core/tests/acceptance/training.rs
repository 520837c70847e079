use std::time::Instant;

use onhw_core::dataio::{Fold, Sample, STANDARD_CHANNELS};
use onhw_core::losses::LossParams;
use onhw_core::metrics::cer;
use onhw_core::netcore::{predict, LossSelector, Model, ModelConfig, RecurrentKind, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

const CLASSES: usize = 4;
const SEGMENT: usize = 10;
const GAP: usize = 2;

/// Each class drives its own group of three channels with a class-specific
/// waveform; the force channel is high while a symbol is written.
fn synth(rng: &mut ChaCha8Rng, label: &[usize]) -> Sample {
    let mut rows: Vec<[f64; STANDARD_CHANNELS]> = Vec::new();
    for &c in label {
        for s in 0..SEGMENT {
            let phase = std::f64::consts::PI * s as f64 / SEGMENT as f64;
            let mut row = [0.0; STANDARD_CHANNELS];
            for (j, v) in row.iter_mut().take(12).enumerate() {
                *v = rng.random_range(-0.05..0.05);
                if j / 3 == c {
                    *v += phase.sin() * (1.0 + (c * (j % 3)) as f64 * 0.3) * if c % 2 == 0 { 1.0 } else { -1.0 };
                }
            }
            row[12] = 1.0;
            rows.push(row);
        }
        for _ in 0..GAP {
            let mut row = [0.0; STANDARD_CHANNELS];
            row.iter_mut().take(12).for_each(|v| *v = rng.random_range(-0.05..0.05));
            rows.push(row);
        }
    }
    Sample::new(rows.concat(), STANDARD_CHANNELS, label.to_vec(), 0, 100.0).expect("valid sample")
}

pub fn overfit() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<Sample> = (0..20)
        .map(|_| {
            let len = rng.random_range(3..=5);
            let label: Vec<usize> = (0..len).map(|_| rng.random_range(0..CLASSES)).collect();
            synth(&mut rng, &label)
        })
        .collect();
    let fold = Fold {
        train: (0..samples.len()).collect(),
        val: Vec::new(),
    };
    let model_cfg = ModelConfig {
        conv_filters: 8,
        conv_kernel: 4,
        pool_size: 2,
        dropout_rate: 0.0,
        recurrent_kind: RecurrentKind::BiLstm,
        bilstm_units: 8,
        bilstm_layers: 1,
        num_classes: CLASSES,
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 5,
        epochs: 300,
        seed: 17,
        target_len: 64,
        track_train_metrics: true,
        ..Default::default()
    };
    let model = Model::new(model_cfg, train_cfg.seed).map_err(|e| e.to_string())?;
    let mut trainer =
        Trainer::new(model, train_cfg, LossSelector::Ctc, LossParams::default()).map_err(|e| e.to_string())?;
    let history = trainer.fit(&samples, &fold).map_err(|e| e.to_string())?;

    let first_zero = history.iter().find(|r| r.train_cer == Some(0.0)).map(|r| r.epoch);
    let first_loss = history[0].train_loss.unwrap_or(f64::NAN);
    let last_loss = history.last().and_then(|r| r.train_loss).unwrap_or(f64::NAN);

    // recompute the final CER independently of the training loop
    let prepared: Vec<Sample> = samples
        .iter()
        .map(|s| onhw_core::preprocess::interpolate(s, 64).unwrap())
        .collect();
    let refs: Vec<&Sample> = prepared.iter().collect();
    let hyps = predict(&trainer.model, &refs, 20).map_err(|e| e.to_string())?;
    let labels: Vec<Vec<usize>> = samples.iter().map(|s| s.label().to_vec()).collect();
    let final_cer = cer(&labels, &hyps).map_err(|e| e.to_string())?;

    ensure!(
        first_zero.is_some() && final_cer == 0.0,
        "training CER never reached 0 (final {final_cer:.3}, loss {first_loss:.3} -> {last_loss:.3})"
    );
    ensure!(
        last_loss < 0.1 * first_loss,
        "loss fell only from {first_loss:.3} to {last_loss:.3}"
    );
    Ok(format!(
        "CER 0 first at epoch {}, final CER {final_cer}, loss {first_loss:.3} -> {last_loss:.4}, {:.1?}",
        first_zero.unwrap_or(0),
        start.elapsed()
    ))
}
