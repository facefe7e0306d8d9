//! Training: losses, learning-rate schedules, augmentation, SGD and the
//! seeded training loop.
//!
//! All randomness comes from xoshiro256** generators seeded through
//! SplitMix64 (`rand_xoshiro::Xoshiro256StarStar::seed_from_u64`). The
//! epoch shuffle uses the stream for `(seed, epoch)`, each sample's
//! augmentation the stream for `(seed, epoch, sample index)`, so results
//! depend only on the seed and never on batch composition or timing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Function, Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::LabelMap;
use crate::model::StaUnet;
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Random generator used throughout training.
pub type TrainRng = Xoshiro256StarStar;

/// Floor applied to probabilities inside the logarithm of the cross-entropy.
pub const CE_CLAMP: f64 = 1e-12;

fn mix(a: u64, b: u64) -> u64 {
    a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9).rotate_left(31)
}

pub fn seeded_rng(seed: u64) -> TrainRng {
    TrainRng::seed_from_u64(seed)
}

fn epoch_rng(seed: u64, epoch: usize) -> TrainRng {
    TrainRng::seed_from_u64(mix(seed, epoch as u64))
}

fn sample_rng(seed: u64, epoch: usize, index: usize) -> TrainRng {
    TrainRng::seed_from_u64(mix(mix(seed, epoch as u64 | 1 << 63), index as u64))
}

/// `lr_initial · (1 − t/N)^power`.
pub fn poly_lr(lr_initial: f64, t: usize, n: usize, power: f64) -> Result<f64> {
    if n == 0 || t > n {
        return Err(Error::InvalidArgument(format!("poly_lr: need 0 <= t <= N, N > 0 (t={t}, N={n})")));
    }
    Ok(lr_initial * (1.0 - t as f64 / n as f64).powf(power))
}

/// `lr_min + ½(lr_initial − lr_min)(1 + cos(πt/N))`.
pub fn cosine_lr(lr_initial: f64, lr_min: f64, t: usize, n: usize) -> Result<f64> {
    if n == 0 || t > n {
        return Err(Error::InvalidArgument(format!("cosine_lr: need 0 <= t <= N, N > 0 (t={t}, N={n})")));
    }
    let phase = std::f64::consts::PI * t as f64 / n as f64;
    Ok(lr_min + 0.5 * (lr_initial - lr_min) * (1.0 + phase.cos()))
}

fn check_target<T: Scalar>(g: &Graph<T>, probs: Var, target: &LabelMap, op: &'static str) -> Result<(usize, usize)> {
    let s = g.shape(probs);
    if s.len() != 4 || s[0] != target.batch || s[2] != target.height || s[3] != target.width {
        return Err(Error::shape(op, s, &[target.batch, target.height, target.width]));
    }
    target.check_classes(s[1])?;
    Ok((s[1], s[2] * s[3]))
}

struct CrossEntropyFn {
    probs: Var,
    target: LabelMap,
}

impl<T: Scalar> Function<T> for CrossEntropyFn {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.probs]
    }

    fn backward(&self, g: &Graph<T>, _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let p = g.value(self.probs);
        let (k, plane) = (p.shape()[1], p.shape()[2] * p.shape()[3]);
        let scale = grad.item() / T::from_usize(self.target.data.len());
        let floor = T::from_f64(CE_CLAMP);
        let mut dp = Tensor::zeros(p.shape());
        for (idx, &c) in self.target.data.iter().enumerate() {
            let (b, px) = (idx / plane, idx % plane);
            let at = (b * k + c as usize) * plane + px;
            let v = p.data()[at];
            if v >= floor {
                dp.data_mut()[at] = -scale / v;
            }
        }
        vec![Some(dp)]
    }
}

/// Mean over pixels of `−ln max(p[target], 1e-12)`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, probs: Var, target: &LabelMap) -> Result<Var> {
    let (k, plane) = check_target(g, probs, target, "cross_entropy")?;
    let p = g.value(probs).data();
    let floor = T::from_f64(CE_CLAMP);
    let mut total = T::zero();
    for (idx, &c) in target.data.iter().enumerate() {
        let (b, px) = (idx / plane, idx % plane);
        total = total - p[(b * k + c as usize) * plane + px].max(floor).ln();
    }
    let value = Tensor::scalar(total / T::from_usize(target.data.len()));
    Ok(g.record(
        value,
        Box::new(CrossEntropyFn {
            probs,
            target: target.clone(),
        }),
    ))
}

struct DiceFn<T> {
    probs: Var,
    target: LabelMap,
    /// Per class: (2·I + ε, P + G + ε).
    terms: Vec<(T, T)>,
}

impl<T: Scalar> Function<T> for DiceFn<T> {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.probs]
    }

    fn backward(&self, g: &Graph<T>, _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let p = g.value(self.probs);
        let (batch, k, plane) = (p.shape()[0], p.shape()[1], p.shape()[2] * p.shape()[3]);
        let scale = -grad.item() / T::from_usize(k);
        let two = T::from_f64(2.0);
        let mut dp = Tensor::zeros(p.shape());
        for b in 0..batch {
            for c in 0..k {
                let (num, den) = self.terms[c];
                let base = -num / (den * den);
                let hit = two / den;
                for px in 0..plane {
                    let is_c = self.target.data[b * plane + px] as usize == c;
                    let d = if is_c { hit + base } else { base };
                    dp.data_mut()[(b * k + c) * plane + px] = scale * d;
                }
            }
        }
        vec![Some(dp)]
    }
}

/// Soft Dice loss `1 − mean_c (2·Σ p·g + ε) / (Σ p + Σ g + ε)` over all
/// classes, sums running over the whole batch.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, target: &LabelMap, epsilon: f64) -> Result<Var> {
    let (k, plane) = check_target(g, probs, target, "dice_loss")?;
    let p = g.value(probs).data();
    let mut inter = vec![T::zero(); k];
    let mut psum = vec![T::zero(); k];
    let mut gsum = vec![0usize; k];
    for b in 0..target.batch {
        for c in 0..k {
            let row = &p[(b * k + c) * plane..][..plane];
            psum[c] = row.iter().fold(psum[c], |a, &v| a + v);
        }
        for px in 0..plane {
            let c = target.data[b * plane + px] as usize;
            inter[c] = inter[c] + p[(b * k + c) * plane + px];
            gsum[c] += 1;
        }
    }
    let eps = T::from_f64(epsilon);
    let two = T::from_f64(2.0);
    let terms: Vec<(T, T)> = (0..k)
        .map(|c| (two * inter[c] + eps, psum[c] + T::from_usize(gsum[c]) + eps))
        .collect();
    let mean = terms.iter().fold(T::zero(), |a, &(n, d)| a + n / d) / T::from_usize(k);
    Ok(g.record(
        Tensor::scalar(T::one() - mean),
        Box::new(DiceFn {
            probs,
            target: target.clone(),
            terms,
        }),
    ))
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
}

/// `w_ce · CE + w_dice · Dice`.
pub fn composite_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    target: &LabelMap,
    w_ce: f64,
    w_dice: f64,
    epsilon: f64,
) -> Result<LossParts> {
    let ce = cross_entropy(g, probs, target)?;
    let dice = dice_loss(g, probs, target, epsilon)?;
    let a = g.scale(ce, w_ce);
    let b = g.scale(dice, w_dice);
    let total = g.add(a, b)?;
    Ok(LossParts { total, ce, dice })
}

fn transform<E: Copy>(src: &[E], h: usize, w: usize, flip: bool, quarter_turns: usize) -> Vec<E> {
    let flipped: Vec<E> = if flip {
        (0..h * w).map(|i| src[(i / w) * w + (w - 1 - i % w)]).collect()
    } else {
        src.to_vec()
    };
    let mut cur = flipped;
    let (mut ch, mut cw) = (h, w);
    for _ in 0..quarter_turns {
        // counter-clockwise: out[r][c] = in[c][cw-1-r], out extent cw x ch
        let next = (0..ch * cw)
            .map(|i| {
                let (r, c) = (i / ch, i % ch);
                cur[c * cw + (cw - 1 - r)]
            })
            .collect();
        cur = next;
        std::mem::swap(&mut ch, &mut cw);
    }
    cur
}

/// Random horizontal flip with probability `p`, then, independently with
/// probability `p`, a rotation by `k·90°` (`k` uniform in 1..=3). Image and
/// mask receive the same pixel permutation. Non-square inputs only use the
/// half turn so the extent is preserved.
pub fn augment(image: &[u8], mask: &[u8], height: usize, width: usize, rng: &mut impl Rng, p: f64) -> (Vec<u8>, Vec<u8>) {
    let flip = rng.gen_bool(p);
    let rotate = rng.gen_bool(p);
    let k = rng.gen_range(1..=3usize);
    let turns = match (rotate, height == width) {
        (false, _) => 0,
        (true, true) => k,
        (true, false) => 2,
    };
    (
        transform(image, height, width, flip, turns),
        transform(mask, height, width, flip, turns),
    )
}

/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::shape("sgd_step", param.shape(), grad.shape()));
    }
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Momentum buffers for every trainable entry of a parameter store.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store
            .entries()
            .iter()
            .map(|e| e.trainable.then(|| Tensor::zeros(e.value.shape())))
            .collect();
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// Update every entry that has a gradient; missing gradients count as zero.
    pub fn step<'a>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: impl IntoIterator<Item = (crate::nn::ParamId, Option<&'a Tensor<T>>)>,
        lr: f64,
    ) -> Result<()> {
        for (id, grad) in grads {
            let zero;
            let grad = match grad {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(store.get(id).shape());
                    &zero
                }
            };
            let v = self.velocity[id.index()]
                .as_mut()
                .ok_or_else(|| Error::InvalidArgument("gradient for a frozen parameter".into()))?;
            sgd_step(store.get_mut(id), grad, v, lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Poly,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub schedule: Schedule,
    pub poly_power: f64,
    /// Restart the poly decay every epoch (N = iterations per epoch).
    pub poly_per_epoch: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub w_ce: f64,
    pub w_dice: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub aug_probability: f64,
    pub dice_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 1e-2,
            schedule: Schedule::Poly,
            poly_power: 0.9,
            poly_per_epoch: false,
            epochs: 300,
            batch_size: 8,
            w_ce: 0.4,
            w_dice: 0.6,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            aug_probability: 0.5,
            dice_epsilon: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if (self.w_ce + self.w_dice - 1.0).abs() > 1e-9 {
            return bad("w_ce + w_dice must equal 1");
        }
        if self.lr_initial.is_nan() || self.lr_initial <= 0.0 {
            return bad("lr_initial must be positive");
        }
        if !(0.0..=1.0).contains(&self.aug_probability) {
            return bad("aug_probability must lie in [0, 1]");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.dice_epsilon.is_nan() || self.dice_epsilon <= 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return bad("dice_epsilon must be positive, momentum and weight_decay non-negative");
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    /// Learning rate for 0-based global iteration `t`.
    pub fn lr_at(&self, t: usize, batches_per_epoch: usize) -> Result<f64> {
        let total = self.epochs * batches_per_epoch;
        match self.schedule {
            Schedule::Poly if self.poly_per_epoch => {
                poly_lr(self.lr_initial, t % batches_per_epoch, batches_per_epoch, self.poly_power)
            }
            Schedule::Poly => poly_lr(self.lr_initial, t, total, self.poly_power),
            Schedule::Cosine => cosine_lr(self.lr_initial, 0.0, t, total),
        }
    }
}

/// One optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub dice_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<IterRecord>,
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
}

pub const METRICS_HEADER: &str = "epoch,iter,lr,loss,ce,dice_loss";

impl TrainReport {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lr).collect()
    }

    /// Metric log; floats use shortest round-trip formatting.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{:?},{:?},{:?},{:?}\n",
                r.epoch, r.iter, r.lr, r.loss, r.ce, r.dice_loss
            ));
        }
        s
    }
}

/// Train `model` on `data`. `on_iter` sees every record as it is produced.
pub fn train<T: Scalar>(
    model: &mut StaUnet<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(&IterRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    data.validate()?;
    let mc = &model.config;
    if data.num_classes != mc.num_classes || (data.height, data.width) != mc.input_extent || mc.input_channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "dataset ({} classes, {}x{}, 1 channel) does not fit model ({} classes, {}x{}, {} channels)",
            data.num_classes,
            data.height,
            data.width,
            mc.num_classes,
            mc.input_extent.0,
            mc.input_extent.1,
            mc.input_channels
        )));
    }
    let per_epoch = cfg.batches_per_epoch(data.len());
    let mut sgd = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
    let mut report = TrainReport::default();
    let mut t = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut epoch_loss = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let augmented: Vec<(Vec<u8>, Vec<u8>)> = chunk
                .iter()
                .map(|&i| {
                    let s = &data.samples[i];
                    let mut rng = sample_rng(cfg.seed, epoch, i);
                    augment(&s.image, &s.mask, data.height, data.width, &mut rng, cfg.aug_probability)
                })
                .collect();
            let pairs: Vec<(&[u8], &[u8])> = augmented.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
            let (images, labels) = data.stack::<T>(&pairs);

            let lr = cfg.lr_at(t, per_epoch)?;
            let mut g = Graph::new();
            let x = g.constant(images);
            let (out, bindings) = model.forward(&mut g, x, true, true)?;
            let parts = composite_loss(&mut g, out.probs, &labels, cfg.w_ce, cfg.w_dice, cfg.dice_epsilon)?;
            let loss = g.value(parts.total).item();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    iteration: t,
                });
            }
            g.backward(parts.total)?;
            sgd.step(&mut model.params, bindings.grads(&g), lr)?;

            let record = IterRecord {
                epoch,
                iter: t,
                lr,
                loss: loss.as_f64(),
                ce: g.value(parts.ce).item().as_f64(),
                dice_loss: g.value(parts.dice).item().as_f64(),
            };
            log::debug!("epoch {epoch} iter {t} lr {lr:.6} loss {:.5}", record.loss);
            on_iter(&record);
            epoch_loss += record.loss;
            report.records.push(record);
            t += 1;
        }
        report.epoch_losses.push(epoch_loss / per_epoch as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_endpoints() {
        assert_eq!(poly_lr(1e-2, 0, 100, 0.9).unwrap(), 1e-2);
        assert_eq!(poly_lr(1e-2, 100, 100, 0.9).unwrap(), 0.0);
        assert!(poly_lr(1e-2, 101, 100, 0.9).is_err());
        assert_eq!(cosine_lr(1e-3, 0.0, 0, 10).unwrap(), 1e-3);
        assert_eq!(cosine_lr(1e-3, 0.0, 10, 10).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[1, 2, 1, 1], &[0.7, 0.3]).unwrap());
        let t = LabelMap::new(1, 1, 1, vec![0]).unwrap();
        let ce = cross_entropy(&mut g, p, &t).unwrap();
        assert!((g.value(ce).item() + 0.7f64.ln()).abs() < 1e-15);
        let u = g.constant(Tensor::full(&[1, 9, 2, 2], 1.0 / 9.0));
        let t = LabelMap::new(1, 2, 2, vec![0, 3, 8, 5]).unwrap();
        let ce = cross_entropy(&mut g, u, &t).unwrap();
        assert!((g.value(ce).item() - 9f64.ln()).abs() < 1e-12);
        let bad = LabelMap::new(1, 2, 2, vec![0, 9, 0, 0]).unwrap();
        assert!(cross_entropy(&mut g, u, &bad).is_err());
    }

    #[test]
    fn dice_of_exact_prediction_is_zero() {
        let mut g = Graph::<f64>::new();
        let t = LabelMap::new(1, 2, 2, vec![0, 1, 1, 0]).unwrap();
        let p = g.constant(Tensor::from_f64(&[1, 2, 2, 2], &[1., 0., 0., 1., 0., 1., 1., 0.]).unwrap());
        let d = dice_loss(&mut g, p, &t, 1e-5).unwrap();
        assert!(g.value(d).item().abs() < 1e-12);
        let wrong = g.constant(Tensor::from_f64(&[1, 2, 2, 2], &[0., 1., 1., 0., 1., 0., 0., 1.]).unwrap());
        let d = dice_loss(&mut g, wrong, &t, 1e-5).unwrap();
        assert!((g.value(d).item() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rotations_compose() {
        let img: Vec<u8> = (0..12).collect();
        let once = transform(&img, 3, 4, false, 1);
        assert_eq!(once[..3], [3, 7, 11]);
        assert_eq!(transform(&img, 3, 4, false, 4), img);
        assert_eq!(transform(&transform(&img, 3, 4, true, 0), 3, 4, true, 0), img);
        let mut rng = seeded_rng(3);
        let (a, b) = augment(&img, &img, 3, 4, &mut rng, 0.0);
        assert_eq!((a, b), (img.clone(), img));
    }

    #[test]
    fn sgd_recurrence() {
        let mut p = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        let g = Tensor::from_f64(&[1], &[0.5]).unwrap();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        // v1 = 0.5, p1 = 0.95; v2 = 0.45 + 0.5 = 0.95, p2 = 0.95 - 0.095
        assert!((p.data()[0] - 0.855).abs() < 1e-15);
        assert!(sgd_step(&mut p, &Tensor::zeros(&[2]), &mut v, 0.1, 0.9, 0.0).is_err());
    }
}
