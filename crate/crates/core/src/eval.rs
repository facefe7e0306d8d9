//! Segmentation metrics and RBF-CKA redundancy analysis.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::StaUnet;
use crate::tensor::{Scalar, Tensor};

/// Integer class ids `[N, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(Error::invalid(
                "LabelMap",
                format!("{} labels for extent {batch}x{height}x{width}", data.len()),
            ));
        }
        Ok(Self {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= num_classes) {
            Some(v) => Err(Error::InvalidArgument(format!(
                "class id {v} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Per-pixel argmax of probabilities `[N, K, H, W]` (first max wins).
    pub fn argmax<T: Scalar>(probs: &Tensor<T>) -> Result<Self> {
        let s = probs.shape();
        if s.len() != 4 {
            return Err(Error::invalid("argmax", format!("expected [N, K, H, W], got {s:?}")));
        }
        let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
        let d = probs.data();
        let mut out = Vec::with_capacity(n * plane);
        for b in 0..n {
            for p in 0..plane {
                let mut best = 0;
                for c in 1..k {
                    if d[(b * k + c) * plane + p] > d[(b * k + best) * plane + p] {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
        Self::new(n, s[2], s[3], out)
    }

    /// Labels of sample `i` as a single-sample map.
    pub fn sample(&self, i: usize) -> LabelMap {
        let p = self.pixels();
        LabelMap {
            batch: 1,
            height: self.height,
            width: self.width,
            data: self.data[i * p..(i + 1) * p].to_vec(),
        }
    }
}

/// Per-class scores and their mean over the evaluated classes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassScores {
    /// Score for every class id (excluded classes included).
    pub per_class: Vec<f64>,
    pub mean: f64,
    pub evaluated: Vec<usize>,
}

fn confusion(pred: &LabelMap, gt: &LabelMap, k: usize) -> Result<Vec<(u64, u64, u64)>> {
    if (pred.batch, pred.height, pred.width) != (gt.batch, gt.height, gt.width) {
        return Err(Error::shape(
            "score",
            &[pred.batch, pred.height, pred.width],
            &[gt.batch, gt.height, gt.width],
        ));
    }
    pred.check_classes(k)?;
    gt.check_classes(k)?;
    // (|P|, |G|, |P∩G|) per class
    let mut counts = vec![(0u64, 0u64, 0u64); k];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        counts[p as usize].0 += 1;
        counts[g as usize].1 += 1;
        if p == g {
            counts[p as usize].2 += 1;
        }
    }
    Ok(counts)
}

fn summarize(per_class: Vec<f64>, exclude: &[usize]) -> ClassScores {
    let evaluated: Vec<usize> = (0..per_class.len()).filter(|c| !exclude.contains(c)).collect();
    let mean = if evaluated.is_empty() {
        f64::NAN
    } else {
        evaluated.iter().map(|&c| per_class[c]).sum::<f64>() / evaluated.len() as f64
    };
    ClassScores {
        per_class,
        mean,
        evaluated,
    }
}

/// Dice similarity `2|P∩G|/(|P|+|G|)` per class; 1 when both sets are empty.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap, num_classes: usize, exclude: &[usize]) -> Result<ClassScores> {
    let per_class = confusion(pred, gt, num_classes)?
        .into_iter()
        .map(|(p, g, i)| if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
        .collect();
    Ok(summarize(per_class, exclude))
}

/// Intersection over union per class; 1 when both sets are empty.
pub fn iou_score(pred: &LabelMap, gt: &LabelMap, num_classes: usize, exclude: &[usize]) -> Result<ClassScores> {
    let per_class = confusion(pred, gt, num_classes)?
        .into_iter()
        .map(|(p, g, i)| {
            let union = p + g - i;
            if union == 0 { 1.0 } else { i as f64 / union as f64 }
        })
        .collect();
    Ok(summarize(per_class, exclude))
}

/// Row-major `rows × cols` matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid("Matrix", format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Kernel bandwidth for [`rbf_gram`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `exp(-‖xi − xj‖²)`.
    #[default]
    Unit,
    /// `exp(-‖xi − xj‖² / (2σ²))` with σ the median pairwise distance.
    Median,
}

fn squared_distances(x: &Matrix) -> Vec<f64> {
    let n = x.rows;
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// RBF Gram matrix of the rows of `x`.
pub fn rbf_gram(x: &Matrix, bandwidth: Bandwidth) -> Result<Matrix> {
    let n = x.rows;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("rbf_gram needs at least 2 samples, got {n}")));
    }
    let d = squared_distances(x);
    let scale = match bandwidth {
        Bandwidth::Unit => 1.0,
        Bandwidth::Median => {
            let mut off: Vec<f64> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| d[i * n + j])
                .collect();
            off.sort_by(f64::total_cmp);
            let mid = off.len() / 2;
            let median_sq = if off.len() % 2 == 1 { off[mid] } else { 0.5 * (off[mid - 1] + off[mid]) };
            if median_sq > 0.0 {
                1.0 / (2.0 * median_sq)
            } else {
                1.0
            }
        }
    };
    Matrix::new(n, n, d.into_iter().map(|v| (-v * scale).exp()).collect())
}

/// `H K H` with `H = I − 11ᵀ/n`, by subtracting row/column means.
fn center(k: &Matrix) -> Vec<f64> {
    let n = k.rows;
    let row_mean: Vec<f64> = (0..n).map(|i| k.row(i).iter().sum::<f64>() / n as f64).collect();
    let col_mean: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k.at(i, j)).sum::<f64>() / n as f64).collect();
    let total = row_mean.iter().sum::<f64>() / n as f64;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k.at(i, j) - row_mean[i] - col_mean[j] + total;
        }
    }
    out
}

fn hsic(kc: &[f64], lc: &[f64]) -> f64 {
    kc.iter().zip(lc).map(|(a, b)| a * b).sum()
}

/// CKA between two precomputed Gram matrices.
pub fn cka_from_grams(k: &Matrix, l: &Matrix) -> Result<f64> {
    if k.rows != l.rows || k.rows != k.cols || l.rows != l.cols {
        return Err(Error::shape("cka", &[k.rows, k.cols], &[l.rows, l.cols]));
    }
    let (kc, lc) = (center(k), center(l));
    Ok(cka_centered(&kc, &lc))
}

fn cka_centered(kc: &[f64], lc: &[f64]) -> f64 {
    let denom = (hsic(kc, kc) * hsic(lc, lc)).sqrt();
    if denom == 0.0 || !denom.is_finite() {
        log::warn!("cka: constant representation (zero denominator), returning 0");
        return 0.0;
    }
    hsic(kc, lc) / denom
}

/// RBF-CKA `tr(KHLH) / √(tr(KHKH)·tr(LHLH))` of two sample × feature matrices.
pub fn cka(x: &Matrix, y: &Matrix, bandwidth: Bandwidth) -> Result<f64> {
    if x.rows != y.rows {
        return Err(Error::InvalidArgument(format!(
            "cka: sample counts differ ({} vs {})",
            x.rows, y.rows
        )));
    }
    cka_from_grams(&rbf_gram(x, bandwidth)?, &rbf_gram(y, bandwidth)?)
}

/// Named per-block activations, each `n_samples × n_features`, shallow first.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub blocks: Vec<(String, Matrix)>,
}

impl ActivationDump {
    pub fn samples(&self) -> Option<usize> {
        self.blocks.first().map(|(_, m)| m.rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    MinMax,
}

/// Symmetric block-by-block similarity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CkaMatrix {
    pub names: Vec<String>,
    pub values: Matrix,
    pub normalization: Normalization,
}

impl CkaMatrix {
    /// Rescale to `[0, 1]`; a constant matrix maps to all zeros.
    pub fn min_max(&self) -> CkaMatrix {
        let lo = self.values.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let data = self
            .values
            .data
            .iter()
            .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        CkaMatrix {
            names: self.names.clone(),
            values: Matrix {
                rows: self.values.rows,
                cols: self.values.cols,
                data,
            },
            normalization: Normalization::MinMax,
        }
    }

    /// CSV with a header row of block names and one row per block.
    pub fn to_csv(&self) -> String {
        let mut s = format!("block,{}\n", self.names.join(","));
        for (i, name) in self.names.iter().enumerate() {
            let row: Vec<String> = self.values.row(i).iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{name},{}\n", row.join(",")));
        }
        s
    }

    /// 8-bit grayscale rendering (`round(255·v)`), values clamped to `[0, 1]`.
    pub fn to_gray(&self) -> Vec<u8> {
        self.values
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Mean off-diagonal similarity within the first half of the blocks and
    /// within the second half, as `(shallow, deep)`.
    pub fn shallow_redundancy(&self) -> (f64, f64) {
        let b = self.names.len();
        let half = b / 2;
        let mean_off = |lo: usize, hi: usize| {
            let mut acc = (0.0, 0usize);
            for i in lo..hi {
                for j in lo..hi {
                    if i != j {
                        acc.0 += self.values.at(i, j);
                        acc.1 += 1;
                    }
                }
            }
            if acc.1 == 0 { f64::NAN } else { acc.0 / acc.1 as f64 }
        };
        (mean_off(0, half), mean_off(half, b))
    }
}

/// CKA between every pair of blocks in `dump`.
pub fn block_similarity(dump: &ActivationDump, bandwidth: Bandwidth) -> Result<CkaMatrix> {
    let b = dump.blocks.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!("block_similarity needs >= 2 blocks, got {b}")));
    }
    let n = dump.blocks[0].1.rows;
    if let Some((name, m)) = dump.blocks.iter().find(|(_, m)| m.rows != n) {
        return Err(Error::InvalidArgument(format!(
            "block {name} has {} samples, expected {n}",
            m.rows
        )));
    }
    let centered = dump
        .blocks
        .iter()
        .map(|(_, m)| rbf_gram(m, bandwidth).map(|k| center(&k)))
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![0.0; b * b];
    for i in 0..b {
        for j in i..b {
            let v = cka_centered(&centered[i], &centered[j]);
            values[i * b + j] = v;
            values[j * b + i] = v;
        }
    }
    Ok(CkaMatrix {
        names: dump.blocks.iter().map(|(n, _)| n.clone()).collect(),
        values: Matrix::new(b, b, values)?,
        normalization: Normalization::Raw,
    })
}

/// Run `model` in inference mode on `images` and flatten the outputs of the
/// selected attention blocks per sample. With `max_features`, each block
/// keeps a seeded random subset of that many feature columns (sorted).
pub fn capture_activations<T: Scalar>(
    model: &mut StaUnet<T>,
    images: &Tensor<T>,
    selector: &[String],
    max_features: Option<usize>,
    seed: u64,
) -> Result<ActivationDump> {
    if selector.is_empty() {
        return Err(Error::InvalidArgument("empty block selection".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let (out, _) = model.forward(&mut g, x, false, false)?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(selector.len());
    for name in selector {
        let var = out
            .blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown block {name}")))?;
        let t = g.value(var);
        let n = t.shape()[0];
        let p = t.numel() / n;
        let cols: Option<Vec<usize>> = max_features.filter(|&cap| cap < p).map(|cap| {
            let mut idx = sample(&mut rng, p, cap).into_vec();
            idx.sort_unstable();
            idx
        });
        let mut data = Vec::new();
        for i in 0..n {
            let row = &t.data()[i * p..(i + 1) * p];
            match &cols {
                Some(idx) => data.extend(idx.iter().map(|&c| row[c].as_f64())),
                None => data.extend(row.iter().map(|v| v.as_f64())),
            }
        }
        let width = cols.as_ref().map_or(p, Vec::len);
        blocks.push((name.clone(), Matrix::new(n, width, data)?));
    }
    Ok(ActivationDump { blocks })
}
