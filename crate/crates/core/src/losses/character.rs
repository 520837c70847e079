//! Cross-entropy variants for single-character classification.
//!
//! Each loss is written as a function of the softmax probabilities `p` and
//! the clamped log-probabilities `lc = log(max(p, eps))`. The partial
//! derivatives with respect to both are pushed back through the softmax by
//! [`SoftmaxParts::backprop`].

use super::{log_softmax, LossOutput, LossParams};
use crate::error::{arg_err, Result};

struct SoftmaxParts {
    p: Vec<f64>,
    lc: Vec<f64>,
    /// `false` where the log was clamped (zero derivative).
    live: Vec<bool>,
}

impl SoftmaxParts {
    fn new(logits: &[f64], eps: f64) -> Result<Self> {
        let lp = log_softmax(logits)?;
        let floor = eps.ln();
        Ok(SoftmaxParts {
            p: lp.iter().map(|v| v.exp()).collect(),
            lc: lp.iter().map(|&v| v.max(floor)).collect(),
            live: lp.iter().map(|&v| v > floor).collect(),
        })
    }

    fn k(&self) -> usize {
        self.p.len()
    }

    /// Gradient with respect to the logits given `dL/dp` and `dL/dlc`.
    fn backprop(&self, g_p: &[f64], g_l: &[f64]) -> Vec<f64> {
        let sp: f64 = g_p.iter().zip(&self.p).map(|(g, p)| g * p).sum();
        let gl: Vec<f64> = g_l
            .iter()
            .zip(&self.live)
            .map(|(&g, &live)| if live { g } else { 0.0 })
            .collect();
        let sl: f64 = gl.iter().sum();
        (0..self.k())
            .map(|j| self.p[j] * (g_p[j] - sp) + gl[j] - self.p[j] * sl)
            .collect()
    }

    fn entropy(&self) -> f64 {
        -self.p.iter().zip(&self.lc).map(|(p, l)| p * l).sum::<f64>()
    }

    fn argmax(&self) -> usize {
        self.p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }
}

fn prepare(logits: &[f64], target: usize, params: &LossParams) -> Result<(SoftmaxParts, f64)> {
    if target >= logits.len() {
        return arg_err(format!(
            "target {target} outside [0, {}]",
            logits.len().saturating_sub(1)
        ));
    }
    if !(params.log_clamp_eps > 0.0) {
        return arg_err("log_clamp_eps must be positive");
    }
    let sm = SoftmaxParts::new(logits, params.log_clamp_eps)?;
    let scale = if params.class_average { 1.0 / sm.k() as f64 } else { 1.0 };
    Ok((sm, scale))
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        arg_err(format!("{name} = {v} outside [0, 1]"))
    }
}

/// Categorical cross entropy, `-(1/K) log p_t`.
pub fn cce(logits: &[f64], target: usize, params: &LossParams) -> Result<LossOutput> {
    let (sm, s) = prepare(logits, target, params)?;
    let g_p = vec![0.0; sm.k()];
    let mut g_l = vec![0.0; sm.k()];
    g_l[target] = -s;
    Ok(LossOutput {
        value: -s * sm.lc[target],
        grad: sm.backprop(&g_p, &g_l),
    })
}

/// Focal loss, `-(1/K) α (1 - p_t)^γ log p_t`.
pub fn focal(logits: &[f64], target: usize, params: &LossParams) -> Result<LossOutput> {
    check_unit("fl_alpha", params.fl_alpha)?;
    if !(params.fl_gamma >= 0.0) {
        return arg_err("fl_gamma must be non-negative");
    }
    let (sm, s) = prepare(logits, target, params)?;
    let (a, g) = (params.fl_alpha, params.fl_gamma);
    let q = 1.0 - sm.p[target];
    let modulator = q.powf(g);
    let d_modulator = if g == 0.0 { 0.0 } else { -g * q.powf(g - 1.0) };
    let mut g_p = vec![0.0; sm.k()];
    let mut g_l = vec![0.0; sm.k()];
    g_p[target] = -s * a * d_modulator * sm.lc[target];
    g_l[target] = -s * a * modulator;
    Ok(LossOutput {
        value: -s * a * modulator * sm.lc[target],
        grad: sm.backprop(&g_p, &g_l),
    })
}

/// Cross entropy with a confidence penalty, `CCE - β H(p) / K`.
pub fn lsr(logits: &[f64], target: usize, params: &LossParams) -> Result<LossOutput> {
    check_unit("lsr_beta", params.lsr_beta)?;
    let (sm, s) = prepare(logits, target, params)?;
    let b = params.lsr_beta;
    let g_p: Vec<f64> = sm.lc.iter().map(|l| s * b * l).collect();
    let mut g_l: Vec<f64> = sm.p.iter().map(|p| s * b * p).collect();
    g_l[target] -= s;
    Ok(LossOutput {
        value: -s * sm.lc[target] - s * b * sm.entropy(),
        grad: sm.backprop(&g_p, &g_l),
    })
}

/// Soft bootstrapping: the target is mixed with the prediction itself.
pub fn boot_soft(logits: &[f64], target: usize, params: &LossParams) -> Result<LossOutput> {
    check_unit("sbs_beta", params.sbs_beta)?;
    let (sm, s) = prepare(logits, target, params)?;
    let b = params.sbs_beta;
    let g_p: Vec<f64> = sm.lc.iter().map(|l| -s * (1.0 - b) * l).collect();
    let mut g_l: Vec<f64> = sm.p.iter().map(|p| -s * (1.0 - b) * p).collect();
    g_l[target] -= s * b;
    let value = -s * (b * sm.lc[target]
        + (1.0 - b) * sm.p.iter().zip(&sm.lc).map(|(p, l)| p * l).sum::<f64>());
    Ok(LossOutput {
        value,
        grad: sm.backprop(&g_p, &g_l),
    })
}

/// Hard bootstrapping: the target is mixed with the one-hot argmax of the
/// prediction.
pub fn boot_hard(logits: &[f64], target: usize, params: &LossParams) -> Result<LossOutput> {
    check_unit("hbs_beta", params.hbs_beta)?;
    let (sm, s) = prepare(logits, target, params)?;
    let b = params.hbs_beta;
    let z = sm.argmax();
    let g_p = vec![0.0; sm.k()];
    let mut g_l = vec![0.0; sm.k()];
    g_l[target] -= s * b;
    g_l[z] -= s * (1.0 - b);
    Ok(LossOutput {
        value: -s * (b * sm.lc[target] + (1.0 - b) * sm.lc[z]),
        grad: sm.backprop(&g_p, &g_l),
    })
}

/// Generalized cross entropy, `(1 - p_t^α) / α` on the true class.
///
/// Tends to `-log p_t` as α goes to 0 and equals `1 - p_t` at α = 1; it is
/// not scaled by `1/K`.
pub fn gce(logits: &[f64], target: usize, params: &LossParams) -> Result<LossOutput> {
    let a = params.gce_alpha;
    if !(a > 0.0 && a <= 1.0) {
        return arg_err(format!("gce_alpha = {a} outside (0, 1]"));
    }
    let (sm, _) = prepare(logits, target, params)?;
    let pa = (a * sm.lc[target]).exp();
    let g_p = vec![0.0; sm.k()];
    let mut g_l = vec![0.0; sm.k()];
    g_l[target] = -pa;
    Ok(LossOutput {
        value: -(pa - 1.0) / a,
        grad: sm.backprop(&g_p, &g_l),
    })
}

/// Symmetric cross entropy, `α CCE + β RCE`, where the reverse term uses
/// `rce_log_zero` in place of `log 0` for the non-target classes.
pub fn sce(logits: &[f64], target: usize, params: &LossParams) -> Result<LossOutput> {
    check_unit("sce_beta", params.sce_beta)?;
    let (sm, s) = prepare(logits, target, params)?;
    let (a, b, log_zero) = (params.sce_alpha, params.sce_beta, params.rce_log_zero);
    let mut g_p = vec![-s * b * log_zero; sm.k()];
    g_p[target] = 0.0;
    let mut g_l = vec![0.0; sm.k()];
    g_l[target] = -s * a;
    let rce = -s * log_zero * (1.0 - sm.p[target]);
    Ok(LossOutput {
        value: -a * s * sm.lc[target] + b * rce,
        grad: sm.backprop(&g_p, &g_l),
    })
}

/// Loss over a whole batch with one gradient row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossOutput {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Joint optimization: mean CCE plus `jo_alpha · KL(prior ‖ mean p)` plus
/// `jo_beta ·` mean prediction entropy.
pub fn joint_opt(
    logits_batch: &[Vec<f64>],
    targets: &[usize],
    params: &LossParams,
    class_prior: &[f64],
) -> Result<BatchLossOutput> {
    if logits_batch.is_empty() {
        return arg_err("joint optimization needs a non-empty batch");
    }
    if logits_batch.len() != targets.len() {
        return arg_err("one target per sample required");
    }
    let k = class_prior.len();
    if logits_batch.iter().any(|z| z.len() != k) {
        return arg_err("class prior and logits disagree on the number of classes");
    }
    if class_prior.iter().any(|&q| !(q >= 0.0)) || (class_prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return arg_err("class prior must be a probability vector");
    }

    let parts: Vec<(SoftmaxParts, f64)> = logits_batch
        .iter()
        .zip(targets)
        .map(|(z, &t)| prepare(z, t, params))
        .collect::<Result<_>>()?;
    let b = logits_batch.len() as f64;
    let eps = params.log_clamp_eps;

    let mut mean_p = vec![0.0; k];
    for (sm, _) in &parts {
        for (m, p) in mean_p.iter_mut().zip(&sm.p) {
            *m += p / b;
        }
    }
    let mut kl = 0.0;
    // dKL/d(mean p)
    let mut d_mean = vec![0.0; k];
    for c in 0..k {
        if class_prior[c] > 0.0 {
            let m = mean_p[c].max(eps);
            kl += class_prior[c] * (class_prior[c].ln() - m.ln());
            if mean_p[c] > eps {
                d_mean[c] = -class_prior[c] / mean_p[c];
            }
        }
    }

    let (ja, jb) = (params.jo_alpha, params.jo_beta);
    let mut ce = 0.0;
    let mut ent = 0.0;
    let mut grads = Vec::with_capacity(parts.len());
    for ((sm, s), &t) in parts.iter().zip(targets) {
        ce -= s * sm.lc[t] / b;
        ent += sm.entropy() / b;
        let g_p: Vec<f64> = (0..k)
            .map(|c| (ja * d_mean[c] - jb * sm.lc[c]) / b)
            .collect();
        let mut g_l: Vec<f64> = sm.p.iter().map(|p| -jb * p / b).collect();
        g_l[t] -= s / b;
        grads.push(sm.backprop(&g_p, &g_l));
    }
    Ok(BatchLossOutput {
        value: ce + ja * kl + jb * ent,
        grads,
    })
}
