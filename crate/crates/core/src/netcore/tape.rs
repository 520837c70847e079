//! Reverse-mode differentiation over a linear tape of fused layer ops.

use super::layers::{self, BatchNormCache, LstmCache, LstmParams};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d { x: Var, w: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, cache: BatchNormCache },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, var: Vec<f64>, eps: f64 },
    Mask { x: Var, mask: Vec<f64> },
    Lstm { x: Var, w_ih: Var, w_hh: Var, bias: Var, cache: LstmCache },
    Dense { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Concat { a: Var, b: Var },
    LogSoftmax { x: Var },
    MeanTime { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Value("non-finite value produced in forward pass".into()));
        }
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = layers::conv1d(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::Conv1d { x, w, b })
    }

    pub fn maxpool1d(&mut self, x: Var, pool: usize) -> Result<Var> {
        let (y, argmax) = layers::maxpool1d(self.value(x), pool)?;
        self.push(y, Op::MaxPool { x, argmax })
    }

    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, cache) = layers::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(y, Op::BatchNormTrain { x, gamma, beta, cache })
    }

    /// Batch mean, biased variance and element count of a training-mode
    /// batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64], usize)> {
        match &self.nodes[v.0].op {
            Op::BatchNormTrain { cache, .. } => Some((&cache.mean, &cache.var, cache.count)),
            _ => None,
        }
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let y = layers::batchnorm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
                eps,
            },
        )
    }

    /// Inverted dropout with a seeded mask.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        let mask = layers::dropout_mask(self.value(x).len(), rate, seed)?;
        self.mask(x, mask)
    }

    /// Elementwise product with a fixed mask.
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return shape_err("mask length differs from input");
        }
        let y = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let y = Tensor::new(xv.shape().to_vec(), y)?;
        self.push(y, Op::Mask { x, mask })
    }

    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Result<Var> {
        let p = LstmParams {
            w_ih: self.value(w_ih),
            w_hh: self.value(w_hh),
            bias: self.value(bias),
        };
        let (y, cache) = layers::lstm(self.value(x), p, reverse)?;
        self.push(y, Op::Lstm { x, w_ih, w_hh, bias, cache })
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = layers::dense(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::Dense { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = layers::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = layers::concat_last(self.value(a), self.value(b))?;
        self.push(y, Op::Concat { a, b })
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let y = layers::log_softmax_last(self.value(x))?;
        self.push(y, Op::LogSoftmax { x })
    }

    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let y = layers::mean_time(self.value(x))?;
        self.push(y, Op::MeanTime { x })
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let slot = &mut self.nodes[v.0].grad;
        match slot {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        }
    }

    /// Backpropagates `seed`, the gradient of a scalar objective with respect
    /// to `out`, to every node recorded before it. Earlier gradients are
    /// cleared first.
    pub fn backward(&mut self, out: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return shape_err("backward seed does not match the output shape");
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[out.0].grad = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(gy) = self.nodes[idx].grad.take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut pending: Vec<(Var, Vec<f64>)> = Vec::with_capacity(4);
            match &node.op {
                Op::Leaf => {}
                Op::Conv1d { x, w, b } => {
                    let (gx, gw, gb) =
                        layers::conv1d_backward(self.value(*x), self.value(*w), self.value(*b), &gy)?;
                    pending.extend([(*x, gx), (*w, gw), (*b, gb)]);
                }
                Op::MaxPool { x, argmax } => {
                    let gx = layers::maxpool1d_backward(self.value(*x).len(), argmax, &gy);
                    pending.push((*x, gx));
                }
                Op::BatchNormTrain { x, gamma, beta, cache } => {
                    let (gx, gg, gb) = layers::batchnorm_train_backward(cache, self.value(*gamma), &gy);
                    pending.extend([(*x, gx), (*gamma, gg), (*beta, gb)]);
                }
                Op::BatchNormEval { x, gamma, beta, mean, var, eps } => {
                    let (gx, gg, gb) = layers::batchnorm_eval_backward(
                        self.value(*x),
                        self.value(*gamma),
                        mean,
                        var,
                        *eps,
                        &gy,
                    );
                    pending.extend([(*x, gx), (*gamma, gg), (*beta, gb)]);
                }
                Op::Mask { x, mask } => {
                    pending.push((*x, gy.iter().zip(mask).map(|(g, m)| g * m).collect()));
                }
                Op::Lstm { x, w_ih, w_hh, bias, cache } => {
                    let p = LstmParams {
                        w_ih: self.value(*w_ih),
                        w_hh: self.value(*w_hh),
                        bias: self.value(*bias),
                    };
                    let (gx, gwi, gwh, gb) = layers::lstm_backward(self.value(*x), p, cache, &gy)?;
                    pending.extend([(*x, gx), (*w_ih, gwi), (*w_hh, gwh), (*bias, gb)]);
                }
                Op::Dense { x, w, b } => {
                    let (gx, gw, gb) = layers::dense_backward(self.value(*x), self.value(*w), &gy);
                    pending.extend([(*x, gx), (*w, gw), (*b, gb)]);
                }
                Op::Relu { x } => pending.push((*x, layers::relu_backward(self.value(*x), &gy))),
                Op::Concat { a, b } => {
                    let ca = *self.value(*a).shape().last().expect("rank >= 1");
                    let cb = *self.value(*b).shape().last().expect("rank >= 1");
                    let (ga, gb) = layers::concat_last_backward(ca, cb, &gy);
                    pending.extend([(*a, ga), (*b, gb)]);
                }
                Op::LogSoftmax { x } => {
                    pending.push((*x, layers::log_softmax_last_backward(&node.value, &gy)));
                }
                Op::MeanTime { x } => {
                    pending.push((*x, layers::mean_time_backward(self.value(*x).shape(), &gy)));
                }
            }
            // leaves keep their gradient for the caller
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].grad = Some(gy);
            }
            for (v, g) in pending {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }
}
