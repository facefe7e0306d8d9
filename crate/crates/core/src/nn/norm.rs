//! Batch normalization and channel-wise layer normalization for NCHW maps.

use super::params::{Ctx, ParamId, ParamStore};
use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{split_axis, Scalar, Tensor};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-channel statistics produced by a training-mode batch-norm pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    pub count: usize,
}

struct BatchNormFn<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    training: bool,
}

impl<T: Scalar> Function<T> for BatchNormFn<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }

    fn backward(&self, g: &Graph<T>, _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let s = grad.shape();
        let (batch, c, plane) = (s[0], s[1], s[2] * s[3]);
        let gamma = g.value(self.gamma).data();
        let xh = self.xhat.data();
        let dy = grad.data();

        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xh = vec![T::zero(); c];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    sum_dy[ch] = sum_dy[ch] + dy[i];
                    sum_dy_xh[ch] = sum_dy_xh[ch] + dy[i] * xh[i];
                }
            }
        }

        let dx = g.requires_grad(self.x).then(|| {
            let mut dx = Tensor::zeros(s);
            let m = T::from_usize(batch * plane);
            let d = dx.data_mut();
            for b in 0..batch {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let k = gamma[ch] * self.inv_std[ch];
                    for i in base..base + plane {
                        d[i] = if self.training {
                            k * (dy[i] - sum_dy[ch] / m - xh[i] * sum_dy_xh[ch] / m)
                        } else {
                            k * dy[i]
                        };
                    }
                }
            }
            dx
        });
        vec![
            dx,
            Some(Tensor::new(&[c], sum_dy_xh).unwrap()),
            Some(Tensor::new(&[c], sum_dy).unwrap()),
        ]
    }
}

/// Batch normalization over `(N, H, W)` per channel.
///
/// Training mode normalizes with batch statistics and returns them so the
/// caller can update running estimates; inference mode uses the provided
/// running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
    training: bool,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("batch_norm", format!("expected NCHW, got {s:?}")));
    }
    let (batch, c, plane) = (s[0], s[1], s[2] * s[3]);
    for v in [gamma, beta] {
        if g.shape(v) != [c] {
            return Err(Error::shape("batch_norm", &s, g.shape(v)));
        }
    }
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::shape("batch_norm", &s, running_mean.shape()));
    }
    let count = batch * plane;
    if training && count < 2 {
        return Err(Error::invalid(
            "batch_norm",
            format!("training needs at least 2 values per channel, got {count}"),
        ));
    }

    let xd = g.value(x).data();
    let eps = T::from_f64(eps);
    let (mean, var) = if training {
        let n = T::from_usize(count);
        let mut mean = vec![T::zero(); c];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                mean[ch] = xd[base..base + plane].iter().fold(mean[ch], |a, &v| a + v);
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); c];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                var[ch] = xd[base..base + plane]
                    .iter()
                    .fold(var[ch], |a, &v| a + (v - mean[ch]) * (v - mean[ch]));
            }
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        (mean, var)
    } else {
        (running_mean.data().to_vec(), running_var.data().to_vec())
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let gd = g.value(gamma).data();
    let bd = g.value(beta).data();
    let mut xhat = Tensor::zeros(&s);
    let mut out = Tensor::zeros(&s);
    for b in 0..batch {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = h;
                out.data_mut()[i] = gd[ch] * h + bd[ch];
            }
        }
    }
    let stats = training.then_some(BatchStats {
        mean,
        var,
        count,
    });
    let y = g.record(
        out,
        Box::new(BatchNormFn {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        }),
    );
    Ok((y, stats))
}

struct LayerNormFn<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Function<T> for LayerNormFn<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }

    fn backward(&self, g: &Graph<T>, _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (outer, c, inner) = split_axis(grad.shape(), 1);
        let gamma = g.value(self.gamma).data();
        let xh = self.xhat.data();
        let dy = grad.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = Tensor::zeros(grad.shape());
        let n = T::from_usize(c);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * c * inner + i;
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for ch in 0..c {
                    let idx = base + ch * inner;
                    let dxh = dy[idx] * gamma[ch];
                    sum_d = sum_d + dxh;
                    sum_dx = sum_dx + dxh * xh[idx];
                    dgamma[ch] = dgamma[ch] + dy[idx] * xh[idx];
                    dbeta[ch] = dbeta[ch] + dy[idx];
                }
                let inv = self.inv_std[o * inner + i];
                for ch in 0..c {
                    let idx = base + ch * inner;
                    let dxh = dy[idx] * gamma[ch];
                    dx.data_mut()[idx] = inv / n * (n * dxh - sum_d - xh[idx] * sum_dx);
                }
            }
        }
        vec![
            Some(dx),
            Some(Tensor::new(&[c], dgamma).unwrap()),
            Some(Tensor::new(&[c], dbeta).unwrap()),
        ]
    }
}

/// Normalize over the channel axis (axis 1) independently at every other
/// index, then scale and shift per channel.
pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() < 2 || s[1] < 1 {
        return Err(Error::invalid("layer_norm", format!("need a channel axis, got {s:?}")));
    }
    let (outer, c, inner) = split_axis(&s, 1);
    for v in [gamma, beta] {
        if g.shape(v) != [c] {
            return Err(Error::shape("layer_norm", &s, g.shape(v)));
        }
    }
    let xd = g.value(x).data();
    let gd = g.value(gamma).data();
    let bd = g.value(beta).data();
    let n = T::from_usize(c);
    let eps = T::from_f64(eps);
    let mut xhat = Tensor::zeros(&s);
    let mut out = Tensor::zeros(&s);
    let mut inv_std = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * c * inner + i;
            let mut mean = T::zero();
            for ch in 0..c {
                mean = mean + xd[base + ch * inner];
            }
            mean = mean / n;
            let mut var = T::zero();
            for ch in 0..c {
                let d = xd[base + ch * inner] - mean;
                var = var + d * d;
            }
            var = var / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[o * inner + i] = inv;
            for ch in 0..c {
                let idx = base + ch * inner;
                let h = (xd[idx] - mean) * inv;
                xhat.data_mut()[idx] = h;
                out.data_mut()[idx] = gd[ch] * h + bd[ch];
            }
        }
    }
    Ok(g.record(
        out,
        Box::new(LayerNormFn {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        }),
    ))
}

/// Batch-norm layer: affine parameters plus running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            eps: BATCH_NORM_EPS,
            momentum: BATCH_NORM_MOMENTUM,
        }
    }

    /// Runs batch norm; in training mode also folds the batch statistics
    /// into the running estimates (unbiased variance).
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.var(self.gamma);
        let beta = ctx.var(self.beta);
        let (y, stats) = batch_norm(
            ctx.graph,
            x,
            gamma,
            beta,
            ctx.store.get(self.running_mean),
            ctx.store.get(self.running_var),
            self.eps,
            ctx.training,
        )?;
        if let Some(stats) = stats {
            let mom = T::from_f64(self.momentum);
            let keep = T::one() - mom;
            let n = T::from_usize(stats.count);
            let unbias = n / (n - T::one());
            let rm = ctx.store.get_mut(self.running_mean).data_mut();
            for (r, &m) in rm.iter_mut().zip(&stats.mean) {
                *r = keep * *r + mom * m;
            }
            let rv = ctx.store.get_mut(self.running_var).data_mut();
            for (r, &v) in rv.iter_mut().zip(&stats.var) {
                *r = keep * *r + mom * v * unbias;
            }
        }
        Ok(y)
    }
}

/// Channel layer norm (per-location normalization over C).
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.var(self.gamma);
        let beta = ctx.var(self.beta);
        layer_norm(ctx.graph, x, gamma, beta, self.eps)
    }
}
