use onhw_core::losses::{log_softmax, CharLoss, LossParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

fn value(loss: CharLoss, z: &[f64], t: usize, p: &LossParams) -> Result<f64, String> {
    loss.eval(z, t, p).map(|o| o.value).map_err(|e| e.to_string())
}

pub fn reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let base = LossParams::default();
    let mut worst = 0.0f64;
    let mut worst_gce = 0.0f64;
    for draw in 0..2000 {
        let k = rng.random_range(2..=15);
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
        let t = rng.random_range(0..k);
        let cce = value(CharLoss::Cce, &z, t, &base)?;
        let sce_alpha = rng.random_range(0.1..2.0);
        let cases = [
            (CharLoss::Focal, LossParams { fl_gamma: 0.0, fl_alpha: 1.0, ..base.clone() }, cce),
            (CharLoss::Lsr, LossParams { lsr_beta: 0.0, ..base.clone() }, cce),
            (CharLoss::BootSoft, LossParams { sbs_beta: 1.0, ..base.clone() }, cce),
            (CharLoss::BootHard, LossParams { hbs_beta: 1.0, ..base.clone() }, cce),
            (
                CharLoss::Sce,
                LossParams { sce_beta: 0.0, sce_alpha, ..base.clone() },
                sce_alpha * cce,
            ),
        ];
        for (loss, params, expected) in cases {
            let got = value(loss, &z, t, &params)?;
            let err = (got - expected).abs();
            worst = worst.max(err);
            ensure!(err <= 1e-12, "draw {draw}: {loss} reduced to {got}, expected {expected}");
        }

        // GCE is not class-averaged, so it is compared with -log p_t itself.
        let zg: Vec<f64> = (0..rng.random_range(2..=10)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tg = rng.random_range(0..zg.len());
        let gce = value(CharLoss::Gce, &zg, tg, &LossParams { gce_alpha: 1e-4, ..base.clone() })?;
        let nll = -log_softmax(&zg).map_err(|e| e.to_string())?[tg];
        let err = (gce - nll).abs();
        worst_gce = worst_gce.max(err);
        ensure!(err <= 1e-3, "draw {draw}: GCE(1e-4) = {gce}, -log p_t = {nll}");
    }
    Ok(format!(
        "2000 draws: max reduction error {worst:.1e}, GCE(alpha=1e-4) vs -log p_t max error {worst_gce:.1e}"
    ))
}

pub fn spot_checks() -> Outcome {
    let p = LossParams::default();
    let cce = value(CharLoss::Cce, &[0.0; 15], 3, &p)?;
    let expected = 15f64.ln() / 15.0;
    ensure!((cce - expected).abs() <= 1e-12, "CCE(K=15, uniform) = {cce}, expected {expected}");

    // K = 2, logits [0, 0], target 0: the entropy bonus is maximal at ln 2
    let ln2 = std::f64::consts::LN_2;
    let lsr = value(CharLoss::Lsr, &[0.0, 0.0], 0, &p)?;
    let lsr_expected = ln2 / 2.0 - 0.1 * ln2 / 2.0;
    ensure!((lsr - 0.311916).abs() <= 1e-6, "LSR example = {lsr}");
    ensure!((lsr - lsr_expected).abs() <= 1e-12, "LSR {lsr} vs direct evaluation {lsr_expected}");

    // alpha = beta = 0.5, log 0 replaced by -4
    let sce = value(CharLoss::Sce, &[0.0, 0.0], 0, &p)?;
    let sce_expected = 0.5 * ln2 / 2.0 + 0.5 * (-0.5 * (0.5 * 0.0 + 0.5 * -4.0));
    ensure!((sce - 0.673287).abs() <= 1e-6, "SCE example = {sce}");
    ensure!((sce - sce_expected).abs() <= 1e-12, "SCE {sce} vs direct evaluation {sce_expected}");
    Ok(format!("CCE {cce:.10}, LSR {lsr:.6}, SCE {sce:.6}"))
}
