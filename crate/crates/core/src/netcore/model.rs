use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::dataio::Sample;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecurrentKind {
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "BiLSTM")]
    BiLstm,
}

/// Which head sits on top of the shared trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Per-frame log-probabilities over `K + 1` classes (last is the CTC blank).
    Sequence,
    /// One distribution over `K` classes per sample.
    Character,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub task: Task,
    pub input_channels: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub pool_size: usize,
    pub dropout_rate: f64,
    pub recurrent_kind: RecurrentKind,
    pub lstm_units: usize,
    /// Units per direction.
    pub bilstm_units: usize,
    pub bilstm_layers: usize,
    /// Width of the extra dense layer of the character head.
    pub dense_units: usize,
    pub num_classes: usize,
    pub use_batchnorm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            task: Task::Sequence,
            input_channels: crate::dataio::STANDARD_CHANNELS,
            conv_filters: 200,
            conv_kernel: 4,
            pool_size: 2,
            dropout_rate: 0.2,
            recurrent_kind: RecurrentKind::BiLstm,
            lstm_units: 100,
            bilstm_units: 60,
            bilstm_layers: 2,
            dense_units: 100,
            num_classes: 15,
            use_batchnorm: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("input_channels", self.input_channels),
            ("conv_filters", self.conv_filters),
            ("conv_kernel", self.conv_kernel),
            ("pool_size", self.pool_size),
            ("lstm_units", self.lstm_units),
            ("bilstm_units", self.bilstm_units),
            ("bilstm_layers", self.bilstm_layers),
            ("dense_units", self.dense_units),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return arg_err(format!("{name} must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return arg_err("dropout_rate must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return arg_err("bn_momentum must lie in [0, 1]");
        }
        if !(self.bn_eps > 0.0) {
            return arg_err("bn_eps must be positive");
        }
        Ok(())
    }

    /// Width of the output layer.
    pub fn output_classes(&self) -> usize {
        match self.task {
            Task::Sequence => self.num_classes + 1,
            Task::Character => self.num_classes,
        }
    }

    /// Output frames for an input of `target_len` timesteps.
    pub fn output_frames(&self, target_len: usize) -> usize {
        target_len.div_ceil(self.pool_size)
    }

    fn recurrent_width(&self) -> usize {
        match self.recurrent_kind {
            RecurrentKind::Lstm => self.lstm_units,
            RecurrentKind::BiLstm => 2 * self.bilstm_units,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout; `seed` drives the dropout masks.
    Train { seed: u64 },
    Eval,
}

/// Running batch-norm statistics. Not trained by gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub initialized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    bn: Option<BatchNormState>,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

/// Trunk and head outputs of one forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub input: Var,
    /// Log-probabilities: `[B, T', K+1]` or `[B, K]`.
    pub output: Var,
    /// Logits feeding the final log-softmax.
    pub logits: Var,
    /// One leaf per model parameter, in [`Model::param_names`] order.
    pub params: Vec<Var>,
    batchnorm: Option<Var>,
}

impl ForwardPass {
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|&v| {
                self.tape
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.tape.value(v).len()])
            })
            .collect()
    }
}

impl Model {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[0x494e4954]);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, t: Tensor| {
            names.push(name);
            params.push(t);
        };
        let (f, k, cin) = (config.conv_filters, config.conv_kernel, config.input_channels);
        add("conv.weight".into(), glorot(&[f, cin, k], cin * k, f * k, &mut rng));
        add("conv.bias".into(), Tensor::zeros(&[f]));
        if config.use_batchnorm {
            add("bn.gamma".into(), Tensor::filled(&[f], 1.0));
            add("bn.beta".into(), Tensor::zeros(&[f]));
        }
        let mut lstm = |prefix: String, input: usize, h: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let bound = 1.0 / (h as f64).sqrt();
            let mut bias = Tensor::zeros(&[4 * h]);
            bias.data_mut()[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
            add(format!("{prefix}.w_ih"), uniform(&[4 * h, input], bound, rng));
            add(format!("{prefix}.w_hh"), uniform(&[4 * h, h], bound, rng));
            add(format!("{prefix}.bias"), bias);
        };
        match config.recurrent_kind {
            RecurrentKind::Lstm => lstm("lstm0".into(), f, config.lstm_units, &mut rng),
            RecurrentKind::BiLstm => {
                let h = config.bilstm_units;
                for layer in 0..config.bilstm_layers {
                    let input = if layer == 0 { f } else { 2 * h };
                    lstm(format!("bilstm{layer}.fwd"), input, h, &mut rng);
                    lstm(format!("bilstm{layer}.bwd"), input, h, &mut rng);
                }
            }
        }
        let width = config.recurrent_width();
        let out = config.output_classes();
        match config.task {
            Task::Sequence => {
                add("out.weight".into(), glorot(&[out, width], width, out, &mut rng));
                add("out.bias".into(), Tensor::zeros(&[out]));
            }
            Task::Character => {
                let d = config.dense_units;
                add("fc.weight".into(), glorot(&[d, width], width, d, &mut rng));
                add("fc.bias".into(), Tensor::zeros(&[d]));
                add("out.weight".into(), glorot(&[out, d], d, out, &mut rng));
                add("out.bias".into(), Tensor::zeros(&[out]));
            }
        }
        let bn = config.use_batchnorm.then(|| BatchNormState {
            running_mean: vec![0.0; f],
            running_var: vec![1.0; f],
            initialized: false,
        });
        Ok(Model {
            config,
            names,
            params,
            bn,
        })
    }

    /// Rebuilds a model from stored parameters; shapes must match a fresh
    /// model of the same config.
    pub fn from_parts(
        config: ModelConfig,
        params: Vec<(String, Tensor)>,
        bn: Option<BatchNormState>,
    ) -> Result<Self> {
        let template = Model::new(config, 0)?;
        if params.len() != template.params.len() {
            return shape_err(format!(
                "expected {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            ));
        }
        for ((name, t), (tn, tt)) in params.iter().zip(template.names.iter().zip(&template.params)) {
            if name != tn || t.shape() != tt.shape() {
                return shape_err(format!(
                    "parameter {name} {:?} does not match {tn} {:?}",
                    t.shape(),
                    tt.shape()
                ));
            }
        }
        match (&template.bn, &bn) {
            (None, None) => {}
            (Some(a), Some(b))
                if a.running_mean.len() == b.running_mean.len()
                    && a.running_var.len() == b.running_var.len() => {}
            _ => return shape_err("batch-norm state does not match the config"),
        }
        let (names, params) = params.into_iter().unzip();
        Ok(Model {
            config: template.config,
            names,
            params,
            bn,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn batchnorm_state(&self) -> Option<&BatchNormState> {
        self.bn.as_ref()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Stacks equal-length samples into a `[B, T, C]` tensor.
    pub fn batch_input(&self, samples: &[&Sample]) -> Result<Tensor> {
        let Some(first) = samples.first() else {
            return arg_err("empty batch");
        };
        let (t, c) = (first.len(), first.channels());
        if c != self.config.input_channels {
            return shape_err(format!(
                "model expects {} channels, sample has {c}",
                self.config.input_channels
            ));
        }
        let mut data = Vec::with_capacity(samples.len() * t * c);
        for s in samples {
            if s.len() != t || s.channels() != c {
                return shape_err("samples in a batch must share length and channel count");
            }
            data.extend_from_slice(s.values());
        }
        Tensor::new(vec![samples.len(), t, c], data)
    }

    /// Runs the network on a `[B, T, C]` batch and keeps the tape for
    /// backpropagation.
    pub fn forward(&self, input: Tensor, mode: Mode) -> Result<ForwardPass> {
        let (_, _, c) = input.dims3("model input")?;
        if c != self.config.input_channels {
            return shape_err(format!("model expects {} channels, got {c}", self.config.input_channels));
        }
        let cfg = &self.config;
        let mut tape = Tape::new();
        let x = tape.leaf(input)?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<_>>()?;
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter layout fixed at construction");

        let (cw, cb) = (take(), take());
        let mut h = tape.conv1d(x, cw, cb)?;
        h = tape.maxpool1d(h, cfg.pool_size)?;
        let mut bn_var = None;
        if cfg.use_batchnorm {
            let (g, b) = (take(), take());
            h = match mode {
                Mode::Train { .. } => {
                    let v = tape.batchnorm_train(h, g, b, cfg.bn_eps)?;
                    bn_var = Some(v);
                    v
                }
                Mode::Eval => {
                    let st = self.bn.as_ref().expect("batch norm state exists when enabled");
                    if !st.initialized {
                        return Err(Error::State(
                            "batch norm evaluated before any training step".into(),
                        ));
                    }
                    tape.batchnorm_eval(h, g, b, &st.running_mean, &st.running_var, cfg.bn_eps)?
                }
            };
        }
        if let Mode::Train { seed } = mode {
            if cfg.dropout_rate > 0.0 {
                h = tape.dropout(h, cfg.dropout_rate, derive_seed(seed, &[0x44524f50]))?;
            }
        }
        match cfg.recurrent_kind {
            RecurrentKind::Lstm => {
                let (wi, wh, b) = (take(), take(), take());
                h = tape.lstm(h, wi, wh, b, false)?;
            }
            RecurrentKind::BiLstm => {
                for _ in 0..cfg.bilstm_layers {
                    let (fi, fh, fb) = (take(), take(), take());
                    let (bi, bh, bb) = (take(), take(), take());
                    let fwd = tape.lstm(h, fi, fh, fb, false)?;
                    let bwd = tape.lstm(h, bi, bh, bb, true)?;
                    h = tape.concat(fwd, bwd)?;
                }
            }
        }
        let logits = match cfg.task {
            Task::Sequence => {
                let (w, b) = (take(), take());
                tape.dense(h, w, b)?
            }
            Task::Character => {
                let pooled = tape.mean_time(h)?;
                let (fw, fb) = (take(), take());
                let hidden = tape.dense(pooled, fw, fb)?;
                let hidden = tape.relu(hidden)?;
                let (w, b) = (take(), take());
                tape.dense(hidden, w, b)?
            }
        };
        let output = tape.log_softmax(logits)?;
        Ok(ForwardPass {
            tape,
            input: x,
            output,
            logits,
            params,
            batchnorm: bn_var,
        })
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// estimates: `r <- (1 - m) r + m s`, with the unbiased batch variance.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        let (Some(st), Some(v)) = (self.bn.as_mut(), pass.batchnorm) else {
            return;
        };
        let Some((mean, var, count)) = pass.tape.batch_stats(v) else {
            return;
        };
        let m = self.config.bn_momentum;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        if !st.initialized {
            st.running_mean.copy_from_slice(mean);
            st.running_var.iter_mut().zip(var).for_each(|(r, v)| *r = v * unbias);
            st.initialized = true;
            return;
        }
        for (r, s) in st.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in st.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * s * unbias;
        }
    }

    fn check_task(&self, task: Task) -> Result<()> {
        if self.config.task != task {
            return arg_err(format!("model was built for the {:?} task", self.config.task));
        }
        Ok(())
    }

    /// Per-frame log-probabilities `T' x (K+1)` for one sample.
    pub fn forward_seq2seq(&self, sample: &Sample, mode: Mode) -> Result<Vec<Vec<f64>>> {
        self.check_task(Task::Sequence)?;
        let pass = self.forward(self.batch_input(&[sample])?, mode)?;
        let out = pass.tape.value(pass.output);
        let k = out.shape()[2];
        Ok(out.data().chunks(k).map(<[f64]>::to_vec).collect())
    }

    /// Class log-probabilities for one sample.
    pub fn forward_char(&self, sample: &Sample, mode: Mode) -> Result<Vec<f64>> {
        self.check_task(Task::Character)?;
        let pass = self.forward(self.batch_input(&[sample])?, mode)?;
        Ok(pass.tape.value(pass.output).data().to_vec())
    }
}

/// Free-function form of [`Model::forward_seq2seq`].
pub fn forward_seq2seq(sample: &Sample, model: &Model, mode: Mode) -> Result<Vec<Vec<f64>>> {
    model.forward_seq2seq(sample, mode)
}

/// Free-function form of [`Model::forward_char`].
pub fn forward_char(sample: &Sample, model: &Model, mode: Mode) -> Result<Vec<f64>> {
    model.forward_char(sample, mode)
}
