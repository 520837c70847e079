//! Connectionist temporal classification loss.
//!
//! Inputs are per-frame log-probabilities over `K + 1` classes where the last
//! class is the blank. The forward and backward variables are computed in log
//! space over the blank-extended target of length `2L + 1`.

use super::LossOutput;
use crate::error::{arg_err, Error, Result};

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum number of frames that can emit `target`: one per label plus one
/// blank between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Forward/backward variables of one utterance.
///
/// `log_alpha[t][s]` includes the emission at frame `t`; `log_beta[t][s]`
/// covers frames `t+1..T` only, so `sum_s exp(alpha + beta)` equals the
/// total likelihood at every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcLattice {
    pub extended: Vec<usize>,
    pub log_alpha: Vec<Vec<f64>>,
    pub log_beta: Vec<Vec<f64>>,
    pub log_likelihood: f64,
}

fn check_inputs(log_probs: &[Vec<f64>], target: &[usize]) -> Result<usize> {
    let t_len = log_probs.len();
    if t_len == 0 {
        return arg_err("CTC needs at least one frame");
    }
    let classes = log_probs[0].len();
    if classes < 2 {
        return arg_err("CTC needs at least one label class plus the blank");
    }
    if log_probs.iter().any(|r| r.len() != classes) {
        return Err(Error::Shape("CTC frames differ in width".into()));
    }
    if log_probs.iter().flatten().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Value("CTC log-probabilities must be finite or -inf".into()));
    }
    let blank = classes - 1;
    if let Some(&bad) = target.iter().find(|&&l| l >= blank) {
        return arg_err(if bad == blank {
            format!("target contains the blank index {blank}")
        } else {
            format!("target label {bad} outside [0, {}]", blank - 1)
        });
    }
    let need = ctc_min_frames(target);
    if t_len < need {
        return Err(Error::Infeasible(format!(
            "{t_len} frames cannot emit a target that needs {need}"
        )));
    }
    Ok(blank)
}

pub fn ctc_forward_backward(log_probs: &[Vec<f64>], target: &[usize]) -> Result<CtcLattice> {
    let blank = check_inputs(log_probs, target)?;
    let t_len = log_probs.len();
    let mut extended = Vec::with_capacity(2 * target.len() + 1);
    extended.push(blank);
    for &l in target {
        extended.push(l);
        extended.push(blank);
    }
    let s_len = extended.len();
    let skip_ok = |s: usize| s >= 2 && extended[s] != blank && extended[s] != extended[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![vec![ninf; s_len]; t_len];
    alpha[0][0] = log_probs[0][blank];
    if s_len > 1 {
        alpha[0][1] = log_probs[0][extended[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = acc + log_probs[t][extended[s]];
        }
    }

    let mut beta = vec![vec![ninf; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s] + log_probs[t + 1][extended[s]];
            if s + 1 < s_len {
                acc = log_add(acc, beta[t + 1][s + 1] + log_probs[t + 1][extended[s + 1]]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, beta[t + 1][s + 2] + log_probs[t + 1][extended[s + 2]]);
            }
            beta[t][s] = acc;
        }
    }

    let last = &alpha[t_len - 1];
    let log_likelihood = if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    Ok(CtcLattice {
        extended,
        log_alpha: alpha,
        log_beta: beta,
        log_likelihood,
    })
}

/// Negative log-likelihood of `target` under the frame distributions.
///
/// The gradient is taken with respect to the log-probabilities themselves
/// (flattened row-major, `T x (K+1)`): minus the posterior occupancy of each
/// class at each frame. Composing with a log-softmax turns it into the usual
/// `softmax - occupancy` gradient on logits.
pub fn ctc_loss(log_probs: &[Vec<f64>], target: &[usize]) -> Result<LossOutput> {
    let lattice = ctc_forward_backward(log_probs, target)?;
    let ll = lattice.log_likelihood;
    if !ll.is_finite() {
        return Err(Error::Value("target has zero probability under the frames".into()));
    }
    let classes = log_probs[0].len();
    let mut grad = vec![0.0; log_probs.len() * classes];
    for (t, (a_row, b_row)) in lattice.log_alpha.iter().zip(&lattice.log_beta).enumerate() {
        for (s, &k) in lattice.extended.iter().enumerate() {
            let lg = a_row[s] + b_row[s] - ll;
            if lg > f64::NEG_INFINITY {
                grad[t * classes + k] -= lg.exp();
            }
        }
    }
    Ok(LossOutput { value: -ll, grad })
}
