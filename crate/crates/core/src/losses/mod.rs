//! Sequence (CTC) and single-character classification losses.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to its input: logits for the character losses, log-probabilities
//! for CTC.

mod character;
mod ctc;
mod decode;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

pub use character::{
    boot_hard, boot_soft, cce, focal, gce, joint_opt, lsr, sce, BatchLossOutput,
};
pub use ctc::{ctc_forward_backward, ctc_loss, ctc_min_frames, CtcLattice};
pub use decode::{beam_decode, greedy_decode};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient shaped like the loss input.
    pub grad: Vec<f64>,
}

/// Hyperparameters of the character losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossParams {
    pub fl_alpha: f64,
    pub fl_gamma: f64,
    pub lsr_beta: f64,
    pub sbs_beta: f64,
    pub hbs_beta: f64,
    pub gce_alpha: f64,
    pub sce_alpha: f64,
    pub sce_beta: f64,
    pub jo_alpha: f64,
    pub jo_beta: f64,
    /// Probabilities are clamped to at least this value before taking logs.
    pub log_clamp_eps: f64,
    /// Stand-in for `log 0` in the reverse cross entropy.
    pub rce_log_zero: f64,
    /// Multiply the cross-entropy family by `1/K`. Disabling it only
    /// rescales values and gradients.
    pub class_average: bool,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            fl_alpha: 0.75,
            fl_gamma: 8.0,
            lsr_beta: 0.1,
            sbs_beta: 0.95,
            hbs_beta: 0.8,
            gce_alpha: 0.95,
            sce_alpha: 0.5,
            sce_beta: 0.5,
            jo_alpha: 1.2,
            jo_beta: 0.8,
            log_clamp_eps: 1e-12,
            rce_log_zero: -4.0,
            class_average: true,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fl_alpha) {
            return arg_err("fl_alpha must lie in [0, 1]");
        }
        if !(self.fl_gamma >= 0.0) {
            return arg_err("fl_gamma must be non-negative");
        }
        if !(self.gce_alpha > 0.0 && self.gce_alpha <= 1.0) {
            return arg_err("gce_alpha must lie in (0, 1]");
        }
        for (name, b) in [
            ("lsr_beta", self.lsr_beta),
            ("sbs_beta", self.sbs_beta),
            ("hbs_beta", self.hbs_beta),
            ("sce_beta", self.sce_beta),
        ] {
            if !(0.0..=1.0).contains(&b) {
                return arg_err(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.log_clamp_eps > 0.0) {
            return arg_err("log_clamp_eps must be positive");
        }
        if !self.rce_log_zero.is_finite() {
            return arg_err("rce_log_zero must be finite");
        }
        Ok(())
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return arg_err("log_softmax of an empty vector");
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Value("log_softmax input is not finite".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|v| v - lse).collect())
}

/// Character-level loss selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CharLoss {
    Cce,
    Focal,
    Lsr,
    BootSoft,
    BootHard,
    Gce,
    Sce,
    JointOpt,
}

impl CharLoss {
    pub const ALL: [CharLoss; 8] = [
        CharLoss::Cce,
        CharLoss::Focal,
        CharLoss::Lsr,
        CharLoss::BootSoft,
        CharLoss::BootHard,
        CharLoss::Gce,
        CharLoss::Sce,
        CharLoss::JointOpt,
    ];

    /// Single-sample evaluation. Joint optimization degenerates to a batch of
    /// one with a uniform prior.
    pub fn eval(self, logits: &[f64], target: usize, params: &LossParams) -> Result<LossOutput> {
        match self {
            CharLoss::Cce => cce(logits, target, params),
            CharLoss::Focal => focal(logits, target, params),
            CharLoss::Lsr => lsr(logits, target, params),
            CharLoss::BootSoft => boot_soft(logits, target, params),
            CharLoss::BootHard => boot_hard(logits, target, params),
            CharLoss::Gce => gce(logits, target, params),
            CharLoss::Sce => sce(logits, target, params),
            CharLoss::JointOpt => {
                let k = logits.len();
                let prior = vec![1.0 / k as f64; k];
                let out = joint_opt(&[logits.to_vec()], &[target], params, &prior)?;
                Ok(LossOutput {
                    value: out.value,
                    grad: out.grads.into_iter().next().unwrap_or_default(),
                })
            }
        }
    }

    /// Batch evaluation: mean over samples. `prior` is only used by joint
    /// optimization and defaults to uniform.
    pub fn eval_batch(
        self,
        logits: &[Vec<f64>],
        targets: &[usize],
        params: &LossParams,
        prior: Option<&[f64]>,
    ) -> Result<BatchLossOutput> {
        if logits.is_empty() || logits.len() != targets.len() {
            return arg_err("batch needs one target per logit row, at least one row");
        }
        if self == CharLoss::JointOpt {
            let k = logits[0].len();
            let uniform = vec![1.0 / k as f64; k];
            return joint_opt(logits, targets, params, prior.unwrap_or(&uniform));
        }
        let b = logits.len() as f64;
        let mut value = 0.0;
        let mut grads = Vec::with_capacity(logits.len());
        for (z, &t) in logits.iter().zip(targets) {
            let out = self.eval(z, t, params)?;
            value += out.value / b;
            grads.push(out.grad.into_iter().map(|g| g / b).collect());
        }
        Ok(BatchLossOutput { value, grads })
    }
}

impl fmt::Display for CharLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CharLoss::Cce => "cce",
            CharLoss::Focal => "focal",
            CharLoss::Lsr => "lsr",
            CharLoss::BootSoft => "boot_soft",
            CharLoss::BootHard => "boot_hard",
            CharLoss::Gce => "gce",
            CharLoss::Sce => "sce",
            CharLoss::JointOpt => "joint_opt",
        })
    }
}

impl FromStr for CharLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CharLoss::ALL
            .into_iter()
            .find(|l| l.to_string() == s)
            .ok_or_else(|| Error::Argument(format!("unknown loss {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_softmax_cases() {
        let ln2 = std::f64::consts::LN_2;
        let v = log_softmax(&[0.0, 0.0]).unwrap();
        assert!((v[0] + ln2).abs() < 1e-15 && (v[1] + ln2).abs() < 1e-15);
        for c in [-50.0, 0.0, 3.5, 700.0] {
            let v = log_softmax(&[c; 4]).unwrap();
            assert!(v.iter().all(|x| (x + 4f64.ln()).abs() < 1e-12));
        }
        let v = log_softmax(&[1000.0, 0.0]).unwrap();
        assert!(v[0].abs() < 1e-300 && (v[1] + 1000.0).abs() < 1e-9);
        assert!(log_softmax(&[f64::NAN, 0.0]).is_err());
        let s: f64 = log_softmax(&[0.3, -1.2, 2.0, 0.0]).unwrap().iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn params_json_and_validation() {
        let v = serde_json::to_value(LossParams::default()).unwrap();
        assert_eq!(v["fl_gamma"], 8.0);
        assert_eq!(v["jo_alpha"], 1.2);
        assert_eq!(v["rce_log_zero"], -4.0);
        assert!(LossParams::default().validate().is_ok());
        let bad = LossParams { gce_alpha: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn loss_names_round_trip() {
        for l in CharLoss::ALL {
            assert_eq!(l.to_string().parse::<CharLoss>().unwrap(), l);
        }
    }
}
