//! Length normalization and label-preserving augmentation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Sample, ACCEL_CHANNELS, FORCE_CHANNEL};
use crate::error::{arg_err, Error, Result};
use crate::rng;

/// Augmentation parameters. Serializes as a flat JSON object; missing fields
/// take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Probability that a method is applied to a given channel.
    pub p_apply: f64,
    pub scale_sigma: f64,
    pub jitter_sigma: f64,
    pub shift_force: f64,
    pub shift_other: f64,
    pub mag_warp_low: f64,
    pub mag_warp_high: f64,
    pub warp_sigma: f64,
    pub bezier_control_points: usize,
    /// Channels eligible for magnitude warping.
    pub accelerometer_channels: Vec<usize>,
    pub force_channel: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_apply: 0.5,
            scale_sigma: 0.1,
            jitter_sigma: 0.1,
            shift_force: 200.0,
            shift_other: 20.0,
            mag_warp_low: 0.7,
            mag_warp_high: 1.3,
            warp_sigma: 0.1,
            bezier_control_points: 10,
            accelerometer_channels: ACCEL_CHANNELS.to_vec(),
            force_channel: FORCE_CHANNEL,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_apply) {
            return arg_err(format!("p_apply {} outside [0, 1]", self.p_apply));
        }
        if !(self.mag_warp_low < self.mag_warp_high) {
            return arg_err("mag_warp_low must be below mag_warp_high");
        }
        if self.bezier_control_points < 2 {
            return arg_err("bezier_control_points must be at least 2");
        }
        // speeds of the time map must stay positive
        if !(0.0..1.0).contains(&self.warp_sigma) {
            return arg_err(format!("warp_sigma {} outside [0, 1)", self.warp_sigma));
        }
        for (name, v) in [
            ("scale_sigma", self.scale_sigma),
            ("jitter_sigma", self.jitter_sigma),
            ("shift_force", self.shift_force),
            ("shift_other", self.shift_other),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return arg_err(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    fn check_channels(&self, channels: usize) -> Result<()> {
        if self.force_channel >= channels {
            return arg_err(format!(
                "force channel {} out of range for {channels} channels",
                self.force_channel
            ));
        }
        if let Some(c) = self.accelerometer_channels.iter().find(|&&c| c >= channels) {
            return arg_err(format!("accelerometer channel {c} out of range for {channels} channels"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    Scale,
    Shift,
    Jitter,
    MagWarp,
    TimeWarp,
}

impl AugmentMethod {
    pub const ALL: [AugmentMethod; 5] = [
        AugmentMethod::Scale,
        AugmentMethod::Shift,
        AugmentMethod::Jitter,
        AugmentMethod::MagWarp,
        AugmentMethod::TimeWarp,
    ];

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for AugmentMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentMethod::Scale => "scale",
            AugmentMethod::Shift => "shift",
            AugmentMethod::Jitter => "jitter",
            AugmentMethod::MagWarp => "mag_warp",
            AugmentMethod::TimeWarp => "time_warp",
        })
    }
}

impl FromStr for AugmentMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentMethod::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Argument(format!("unknown augmentation {s:?}")))
    }
}

/// Linearly samples `xs` at fractional index `pos`, clamped to the ends.
fn sample_at(xs: &[f64], pos: f64) -> f64 {
    let last = xs.len() - 1;
    if pos <= 0.0 {
        return xs[0];
    }
    let i = pos.floor() as usize;
    if i >= last {
        return xs[last];
    }
    let frac = pos - i as f64;
    if frac == 0.0 {
        xs[i]
    } else {
        xs[i] + frac * (xs[i + 1] - xs[i])
    }
}

/// Resamples `xs` onto `target_len` equidistant points spanning the same
/// index range, preserving both endpoints.
pub fn resample_linear(xs: &[f64], target_len: usize) -> Result<Vec<f64>> {
    if xs.is_empty() || target_len == 0 {
        return arg_err("resampling needs a non-empty input and target");
    }
    if target_len == 1 {
        return Ok(vec![xs[0]]);
    }
    let span = (xs.len() - 1) as f64;
    let denom = (target_len - 1) as f64;
    Ok((0..target_len)
        .map(|i| sample_at(xs, i as f64 * span / denom))
        .collect())
}

/// Brings `sample` to exactly `target_len` rows: longer samples are linearly
/// resampled, shorter ones are zero-padded at the end.
pub fn interpolate(sample: &Sample, target_len: usize) -> Result<Sample> {
    if target_len == 0 {
        return arg_err("target length must be positive");
    }
    let (m, l) = (sample.len(), sample.channels());
    if m <= target_len {
        let mut values = sample.values().to_vec();
        values.resize(target_len * l, 0.0);
        return Ok(sample.with_values(values));
    }
    let mut values = vec![0.0; target_len * l];
    for c in 0..l {
        for (t, v) in resample_linear(&sample.channel(c), target_len)?
            .into_iter()
            .enumerate()
        {
            values[t * l + c] = v;
        }
    }
    Ok(sample.with_values(values))
}

/// Evaluates the Bézier curve with scalar control values `points` at
/// `samples` equidistant parameters in [0, 1] (de Casteljau).
pub fn bezier(points: &[f64], samples: usize) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return arg_err(format!("Bézier curve needs at least 2 control points, got {}", points.len()));
    }
    if samples < 2 {
        return arg_err(format!("Bézier evaluation needs at least 2 samples, got {samples}"));
    }
    let mut work = vec![0.0; points.len()];
    Ok((0..samples)
        .map(|i| {
            let t = i as f64 / (samples - 1) as f64;
            work.copy_from_slice(points);
            for level in (1..points.len()).rev() {
                for j in 0..level {
                    work[j] = (1.0 - t) * work[j] + t * work[j + 1];
                }
            }
            work[0]
        })
        .collect())
}

/// Strictly increasing map of `m` output rows onto source positions in
/// [0, m-1], built by integrating a Bézier speed profile.
pub fn time_warp_map(m: usize, speed_points: &[f64]) -> Result<Vec<f64>> {
    if m <= 2 {
        return Ok((0..m).map(|i| i as f64).collect());
    }
    let speeds = bezier(speed_points, m - 1)?;
    if let Some(s) = speeds.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Value(format!("time-warp speed {s} is not positive")));
    }
    let mut tau = Vec::with_capacity(m);
    let mut acc = 0.0;
    tau.push(0.0);
    for s in &speeds {
        acc += s;
        tau.push(acc);
    }
    let scale = (m - 1) as f64 / acc;
    for x in tau.iter_mut() {
        *x *= scale;
    }
    tau[m - 1] = (m - 1) as f64;
    Ok(tau)
}

fn uniform_points<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Applies the enabled `methods` to `sample`.
///
/// Scale, shift, jitter and magnitude warping act per channel, each decided by
/// an independent coin with probability `p_apply`. Time warping is decided
/// once and resamples all channels along the same time map. Methods run in
/// the fixed order of [`AugmentMethod::ALL`]; every (method, channel) pair
/// draws from its own stream derived from `seed`.
pub fn augment(
    sample: &Sample,
    cfg: &AugmentConfig,
    methods: &BTreeSet<AugmentMethod>,
    seed: u64,
) -> Result<Sample> {
    if methods.is_empty() {
        return Ok(sample.clone());
    }
    cfg.validate()?;
    cfg.check_channels(sample.channels())?;

    let (m, l) = (sample.len(), sample.channels());
    let mut chans: Vec<Vec<f64>> = (0..l).map(|c| sample.channel(c)).collect();

    for &method in methods {
        if method == AugmentMethod::TimeWarp {
            continue;
        }
        for (c, chan) in chans.iter_mut().enumerate() {
            if method == AugmentMethod::MagWarp && !cfg.accelerometer_channels.contains(&c) {
                continue;
            }
            let mut rng = rng::stream(seed, &[method.tag(), c as u64]);
            if rng.random::<f64>() >= cfg.p_apply {
                continue;
            }
            match method {
                AugmentMethod::Scale => {
                    let s = cfg.scale_sigma;
                    let factor = rng.random_range(1.0 - s..=1.0 + s);
                    chan.iter_mut().for_each(|v| *v *= factor);
                }
                AugmentMethod::Shift => {
                    let a = if c == cfg.force_channel {
                        cfg.shift_force
                    } else {
                        cfg.shift_other
                    };
                    let offset = rng.random_range(-a..=a);
                    chan.iter_mut().for_each(|v| *v += offset);
                }
                AugmentMethod::Jitter => {
                    let sd = cfg.jitter_sigma * std_dev(chan);
                    if sd > 0.0 {
                        let noise = Normal::new(0.0, sd)
                            .map_err(|e| Error::Value(e.to_string()))?;
                        chan.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                    }
                }
                AugmentMethod::MagWarp => {
                    let pts = uniform_points(
                        &mut rng,
                        cfg.bezier_control_points,
                        cfg.mag_warp_low,
                        cfg.mag_warp_high,
                    );
                    let curve = if m >= 2 { bezier(&pts, m)? } else { vec![pts[0]] };
                    chan.iter_mut().zip(&curve).for_each(|(v, w)| *v *= w);
                }
                AugmentMethod::TimeWarp => unreachable!(),
            }
        }
    }

    if methods.contains(&AugmentMethod::TimeWarp) {
        let mut rng = rng::stream(seed, &[AugmentMethod::TimeWarp.tag(), u64::MAX]);
        if rng.random::<f64>() < cfg.p_apply {
            let s = cfg.warp_sigma;
            let pts = uniform_points(&mut rng, cfg.bezier_control_points, 1.0 - s, 1.0 + s);
            let tau = time_warp_map(m, &pts)?;
            for chan in chans.iter_mut() {
                *chan = tau.iter().map(|&p| sample_at(chan, p)).collect();
            }
        }
    }

    let mut values = vec![0.0; m * l];
    for (c, chan) in chans.iter().enumerate() {
        for (t, v) in chan.iter().enumerate() {
            values[t * l + c] = *v;
        }
    }
    Ok(sample.with_values(values))
}
