//! Super token attention.
//!
//! A feature map is viewed as `N = H·W` tokens of `C` channels. Tokens are
//! grouped into a regular grid of `h×w` cells, one super token per cell.
//! Each block then
//!
//! 1. adds a residual 3×3 depthwise convolution (positional embedding),
//! 2. layer-normalizes the tokens and seeds super tokens with cell means,
//! 3. associates every token with the super tokens of a 3×3 window of cells
//!    around its own cell (softmax over `⟨x_i, s_j⟩/√C`),
//! 4. re-estimates each super token as the association-weighted average of
//!    the tokens pointing at it (one iteration by default),
//! 5. runs multi-head self-attention among the super tokens, and
//! 6. maps attended super tokens back to tokens through the same
//!    association weights, adding the result to the residual stream.
//!
//! Windows are always the 3×3 block of cells nearest to a token's cell: at
//! the grid border the window is shifted inward rather than truncated, and
//! grids narrower than three cells use every cell along that axis. Every
//! window therefore holds `min(gh,3)·min(gw,3)` distinct super tokens, and
//! grids no larger than 3×3 reduce exactly to dense association.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, dot};
use crate::nn::{depthwise_conv3x3, Ctx, LayerNorm2d, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Maximum number of super tokens a token associates with.
pub const WINDOW: usize = 9;
const NO_NEIGHBOR: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaConfig {
    pub channels: usize,
    /// Super-token cell extent in pixels (rows, cols).
    pub token_size: (usize, usize),
    pub heads: usize,
    /// Association / update rounds; 1 unless experimenting.
    pub iterations: usize,
}

impl StaConfig {
    pub fn new(channels: usize, token_size: (usize, usize), heads: usize) -> Self {
        Self {
            channels,
            token_size,
            heads,
            iterations: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.token_size.0 == 0 || self.token_size.1 == 0 {
            return Err(Error::InvalidArgument("token size must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Token grid of one feature-map resolution and its association windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaGeometry {
    pub height: usize,
    pub width: usize,
    pub cell_h: usize,
    pub cell_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Window of each cell; unused slots hold `u32::MAX`.
    windows: Vec<[u32; WINDOW]>,
}

fn window_start(cell: usize, grid: usize) -> usize {
    if grid <= 3 {
        0
    } else {
        cell.saturating_sub(1).min(grid - 3)
    }
}

impl StaGeometry {
    pub fn new(height: usize, width: usize, cell_h: usize, cell_w: usize) -> Result<Self> {
        if cell_h == 0 || cell_w == 0 || !height.is_multiple_of(cell_h) || !width.is_multiple_of(cell_w) {
            return Err(Error::Geometry(format!(
                "feature map {height}x{width} is not divisible into {cell_h}x{cell_w} token cells"
            )));
        }
        let (grid_h, grid_w) = (height / cell_h, width / cell_w);
        let (span_h, span_w) = (grid_h.min(3), grid_w.min(3));
        let mut windows = Vec::with_capacity(grid_h * grid_w);
        for r in 0..grid_h {
            for c in 0..grid_w {
                let (r0, c0) = (window_start(r, grid_h), window_start(c, grid_w));
                let mut slots = [NO_NEIGHBOR; WINDOW];
                for dr in 0..span_h {
                    for dc in 0..span_w {
                        slots[dr * span_w + dc] = ((r0 + dr) * grid_w + c0 + dc) as u32;
                    }
                }
                windows.push(slots);
            }
        }
        Ok(Self {
            height,
            width,
            cell_h,
            cell_w,
            grid_h,
            grid_w,
            windows,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn num_super_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Super tokens per association window.
    pub fn window_len(&self) -> usize {
        self.grid_h.min(3) * self.grid_w.min(3)
    }

    pub fn cell_of(&self, token: usize) -> usize {
        let (r, c) = (token / self.width, token % self.width);
        (r / self.cell_h) * self.grid_w + c / self.cell_w
    }

    /// Window slots of `token`; only the first [`Self::window_len`] are used.
    fn slots(&self, token: usize) -> &[u32; WINDOW] {
        &self.windows[self.cell_of(token)]
    }

    /// Super-token indices `token` associates with, in slot order.
    pub fn neighbors(&self, token: usize) -> impl Iterator<Item = usize> + '_ {
        self.slots(token)[..self.window_len()]
            .iter()
            .map(|&j| j as usize)
    }
}

/// Tokens `[B, N, C]` of a feature map with spatial extent `height×width`.
#[derive(Clone, Copy, Debug)]
pub struct TokenMatrix {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

/// Super tokens `[B, m, C]`.
#[derive(Clone, Debug)]
pub struct SuperTokenGrid {
    pub var: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `(batch, super token)` pairs that received no association weight and
    /// kept their initial value during the last update.
    pub unassigned: Vec<(usize, usize)>,
}

/// Sparse token→super-token weights `[B, N, 9]`, zero in unused slots.
#[derive(Clone, Debug)]
pub struct SparseAssociation {
    pub var: Var,
    pub geometry: Arc<StaGeometry>,
}

fn check_tokens<T: Scalar>(g: &Graph<T>, x: &TokenMatrix, geom: &StaGeometry) -> Result<(usize, usize)> {
    let s = g.shape(x.var);
    if s.len() != 3 || s[1] != x.height * x.width {
        return Err(Error::Geometry(format!(
            "token matrix shape {s:?} does not match {}x{} tokens",
            x.height, x.width
        )));
    }
    if (x.height, x.width) != (geom.height, geom.width) {
        return Err(Error::Geometry(format!(
            "tokens are {}x{} but geometry is {}x{}",
            x.height, x.width, geom.height, geom.width
        )));
    }
    Ok((s[0], s[2]))
}

fn check_grid<T: Scalar>(g: &Graph<T>, s: &SuperTokenGrid, geom: &StaGeometry, batch: usize, c: usize) -> Result<()> {
    let shape = g.shape(s.var);
    if (s.grid_h, s.grid_w) != (geom.grid_h, geom.grid_w)
        || shape != [batch, geom.num_super_tokens(), c]
    {
        return Err(Error::Geometry(format!(
            "super-token grid {}x{} with shape {shape:?} does not match geometry {}x{} (batch {batch}, C {c})",
            s.grid_h, s.grid_w, geom.grid_h, geom.grid_w
        )));
    }
    Ok(())
}

/// NCHW feature map → tokens `[B, H·W, C]`.
pub fn to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<TokenMatrix> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("to_tokens", format!("expected NCHW, got {s:?}")));
    }
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    let var = g.transpose(flat)?;
    Ok(TokenMatrix {
        var,
        height: s[2],
        width: s[3],
    })
}

/// Tokens `[B, H·W, C]` → NCHW feature map.
pub fn from_tokens<T: Scalar>(g: &mut Graph<T>, x: &TokenMatrix) -> Result<Var> {
    let s = g.shape(x.var).to_vec();
    let t = g.transpose(x.var)?;
    g.reshape(t, &[s[0], s[2], x.height, x.width])
}

struct CellMeanFn {
    x: Var,
    geometry: Arc<StaGeometry>,
}

impl<T: Scalar> Function<T> for CellMeanFn {
    fn name(&self) -> &'static str {
        "init_super_tokens"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, g: &Graph<T>, out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let shape = g.shape(self.x);
        let (batch, n, c) = (shape[0], shape[1], shape[2]);
        let m = out.shape()[1];
        let inv = T::one() / T::from_usize(self.geometry.cell_h * self.geometry.cell_w);
        let mut dx = Tensor::zeros(shape);
        for b in 0..batch {
            for i in 0..n {
                let j = self.geometry.cell_of(i);
                let src = &grad.data()[(b * m + j) * c..][..c];
                let dst = &mut dx.data_mut()[(b * n + i) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s * inv;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Seed super tokens with the mean token of each grid cell.
pub fn init_super_tokens<T: Scalar>(
    g: &mut Graph<T>,
    x: &TokenMatrix,
    geometry: &Arc<StaGeometry>,
) -> Result<SuperTokenGrid> {
    let (batch, c) = check_tokens(g, x, geometry)?;
    let (n, m) = (geometry.num_tokens(), geometry.num_super_tokens());
    let mut out = Tensor::zeros(&[batch, m, c]);
    let xd = g.value(x.var).data();
    for b in 0..batch {
        for i in 0..n {
            let j = geometry.cell_of(i);
            let src = &xd[(b * n + i) * c..][..c];
            let dst = &mut out.data_mut()[(b * m + j) * c..][..c];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    let inv = T::one() / T::from_usize(geometry.cell_h * geometry.cell_w);
    out.data_mut().iter_mut().for_each(|v| *v = *v * inv);
    let var = g.record(
        out,
        Box::new(CellMeanFn {
            x: x.var,
            geometry: geometry.clone(),
        }),
    );
    Ok(SuperTokenGrid {
        var,
        grid_h: geometry.grid_h,
        grid_w: geometry.grid_w,
        unassigned: Vec::new(),
    })
}

struct AssociateFn {
    x: Var,
    s: Var,
    geometry: Arc<StaGeometry>,
    scale: f64,
}

impl<T: Scalar> Function<T> for AssociateFn {
    fn name(&self) -> &'static str {
        "associate"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.s]
    }

    fn backward(&self, g: &Graph<T>, out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let xt = g.value(self.x);
        let st = g.value(self.s);
        let (batch, n, c) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let m = st.shape()[1];
        let k = self.geometry.window_len();
        let scale = T::from_f64(self.scale);
        let mut dx = Tensor::zeros(xt.shape());
        let mut ds = Tensor::zeros(st.shape());
        let mut dlogit = [T::zero(); WINDOW];
        for b in 0..batch {
            for i in 0..n {
                let q = &out.data()[(b * n + i) * WINDOW..][..WINDOW];
                let dq = &grad.data()[(b * n + i) * WINDOW..][..WINDOW];
                let mut inner = T::zero();
                for t in 0..k {
                    inner = inner + q[t] * dq[t];
                }
                for t in 0..k {
                    dlogit[t] = q[t] * (dq[t] - inner) * scale;
                }
                let xi = &xt.data()[(b * n + i) * c..][..c];
                for (t, &j) in self.geometry.slots(i)[..k].iter().enumerate() {
                    let j = j as usize;
                    let sj = &st.data()[(b * m + j) * c..][..c];
                    kernels::axpy(dlogit[t], sj, &mut dx.data_mut()[(b * n + i) * c..][..c]);
                    kernels::axpy(dlogit[t], xi, &mut ds.data_mut()[(b * m + j) * c..][..c]);
                }
            }
        }
        vec![Some(dx), Some(ds)]
    }
}

/// Token→super-token association: for token `i`,
/// `Q_i = softmax_{j ∈ window(i)} ⟨x_i, s_j⟩ / √C`.
pub fn associate<T: Scalar>(
    g: &mut Graph<T>,
    x: &TokenMatrix,
    s: &SuperTokenGrid,
    geometry: &Arc<StaGeometry>,
) -> Result<SparseAssociation> {
    let (batch, c) = check_tokens(g, x, geometry)?;
    check_grid(g, s, geometry, batch, c)?;
    let (n, m, k) = (geometry.num_tokens(), geometry.num_super_tokens(), geometry.window_len());
    let scale = 1.0 / (c as f64).sqrt();
    let sc = T::from_f64(scale);
    let xd = g.value(x.var).data();
    let sd = g.value(s.var).data();
    let mut q = Tensor::zeros(&[batch, n, WINDOW]);
    let mut logits = [T::zero(); WINDOW];
    for b in 0..batch {
        for i in 0..n {
            let xi = &xd[(b * n + i) * c..][..c];
            let mut max = T::neg_infinity();
            for (t, &j) in geometry.slots(i)[..k].iter().enumerate() {
                let sj = &sd[(b * m + j as usize) * c..][..c];
                logits[t] = dot(xi, sj) * sc;
                max = max.max(logits[t]);
            }
            let row = &mut q.data_mut()[(b * n + i) * WINDOW..][..WINDOW];
            let mut total = T::zero();
            for t in 0..k {
                row[t] = (logits[t] - max).exp();
                total = total + row[t];
            }
            for v in &mut row[..k] {
                *v = *v / total;
            }
        }
    }
    let var = g.record(
        q,
        Box::new(AssociateFn {
            x: x.var,
            s: s.var,
            geometry: geometry.clone(),
            scale,
        }),
    );
    Ok(SparseAssociation {
        var,
        geometry: geometry.clone(),
    })
}

struct UpdateFn<T> {
    q: Var,
    x: Var,
    init: Var,
    geometry: Arc<StaGeometry>,
    /// Column sums of Q per (batch, super token); zero marks "kept init".
    column_sums: Vec<T>,
}

impl<T: Scalar> Function<T> for UpdateFn<T> {
    fn name(&self) -> &'static str {
        "update_super_tokens"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.q, self.x, self.init]
    }

    fn backward(&self, g: &Graph<T>, out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let qt = g.value(self.q);
        let xt = g.value(self.x);
        let (batch, n, c) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let m = out.shape()[1];
        let k = self.geometry.window_len();
        let mut dq = Tensor::zeros(qt.shape());
        let mut dx = Tensor::zeros(xt.shape());
        let mut dinit = Tensor::zeros(out.shape());
        for b in 0..batch {
            for j in 0..m {
                if self.column_sums[b * m + j] == T::zero() {
                    let src = &grad.data()[(b * m + j) * c..][..c];
                    dinit.data_mut()[(b * m + j) * c..][..c].copy_from_slice(src);
                }
            }
            for i in 0..n {
                let xi = &xt.data()[(b * n + i) * c..][..c];
                for (t, &j) in self.geometry.slots(i)[..k].iter().enumerate() {
                    let j = j as usize;
                    let total = self.column_sums[b * m + j];
                    if total == T::zero() {
                        continue;
                    }
                    let gj = &grad.data()[(b * m + j) * c..][..c];
                    let sj = &out.data()[(b * m + j) * c..][..c];
                    let w = qt.data()[(b * n + i) * WINDOW + t] / total;
                    kernels::axpy(w, gj, &mut dx.data_mut()[(b * n + i) * c..][..c]);
                    dq.data_mut()[(b * n + i) * WINDOW + t] = (dot(xi, gj) - dot(sj, gj)) / total;
                }
            }
        }
        vec![Some(dq), Some(dx), Some(dinit)]
    }
}

/// Re-estimate super tokens as `S = Q̄ᵀX`, where `Q̄` is `Q` normalized so
/// each super token's incoming weights sum to one. A super token with zero
/// incoming weight keeps its value from `init` and is listed in
/// [`SuperTokenGrid::unassigned`].
pub fn update_super_tokens<T: Scalar>(
    g: &mut Graph<T>,
    q: &SparseAssociation,
    x: &TokenMatrix,
    init: &SuperTokenGrid,
) -> Result<SuperTokenGrid> {
    let geometry = &q.geometry;
    let (batch, c) = check_tokens(g, x, geometry)?;
    check_grid(g, init, geometry, batch, c)?;
    let (n, m, k) = (geometry.num_tokens(), geometry.num_super_tokens(), geometry.window_len());
    if g.shape(q.var) != [batch, n, WINDOW] {
        return Err(Error::Geometry(format!(
            "association shape {:?} does not match {batch} x {n} tokens",
            g.shape(q.var)
        )));
    }
    let qd = g.value(q.var).data();
    let xd = g.value(x.var).data();
    let mut sums = vec![T::zero(); batch * m];
    let mut out = Tensor::zeros(&[batch, m, c]);
    for b in 0..batch {
        for i in 0..n {
            let xi = &xd[(b * n + i) * c..][..c];
            for (t, &j) in geometry.slots(i)[..k].iter().enumerate() {
                let j = j as usize;
                let w = qd[(b * n + i) * WINDOW + t];
                sums[b * m + j] = sums[b * m + j] + w;
                kernels::axpy(w, xi, &mut out.data_mut()[(b * m + j) * c..][..c]);
                kernels::mac_counter::add(c);
            }
        }
    }
    let mut unassigned = Vec::new();
    let init_d = g.value(init.var).data();
    for b in 0..batch {
        for j in 0..m {
            let row = &mut out.data_mut()[(b * m + j) * c..][..c];
            let total = sums[b * m + j];
            if total == T::zero() {
                row.copy_from_slice(&init_d[(b * m + j) * c..][..c]);
                unassigned.push((b, j));
            } else {
                row.iter_mut().for_each(|v| *v = *v / total);
            }
        }
    }
    let var = g.record(
        out,
        Box::new(UpdateFn {
            q: q.var,
            x: x.var,
            init: init.var,
            geometry: geometry.clone(),
            column_sums: sums,
        }),
    );
    Ok(SuperTokenGrid {
        var,
        grid_h: geometry.grid_h,
        grid_w: geometry.grid_w,
        unassigned,
    })
}

struct AttentionFn<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    /// Softmax weights `[B, heads, m, m]`.
    probs: Vec<T>,
}

impl<T: Scalar> Function<T> for AttentionFn<T> {
    fn name(&self) -> &'static str {
        "multi_head_attention"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.q, self.k, self.v]
    }

    fn backward(&self, g: &Graph<T>, _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (qt, kt, vt) = (g.value(self.q), g.value(self.k), g.value(self.v));
        let (batch, m, c) = (qt.shape()[0], qt.shape()[1], qt.shape()[2]);
        let d = c / self.heads;
        let scale = T::one() / T::from_usize(d).sqrt();
        let mut dq = Tensor::zeros(qt.shape());
        let mut dk = Tensor::zeros(kt.shape());
        let mut dv = Tensor::zeros(vt.shape());
        let mut dp = vec![T::zero(); m];
        let row = |b: usize, r: usize, h: usize| (b * m + r) * c + h * d;
        for b in 0..batch {
            for h in 0..self.heads {
                let p = &self.probs[(b * self.heads + h) * m * m..][..m * m];
                for r in 0..m {
                    let go = &grad.data()[row(b, r, h)..][..d];
                    for col in 0..m {
                        kernels::axpy(p[r * m + col], go, &mut dv.data_mut()[row(b, col, h)..][..d]);
                        dp[col] = dot(go, &vt.data()[row(b, col, h)..][..d]);
                    }
                    let inner = (0..m).fold(T::zero(), |a, col| a + p[r * m + col] * dp[col]);
                    for col in 0..m {
                        let ds = p[r * m + col] * (dp[col] - inner) * scale;
                        kernels::axpy(ds, &kt.data()[row(b, col, h)..][..d], &mut dq.data_mut()[row(b, r, h)..][..d]);
                        kernels::axpy(ds, &qt.data()[row(b, r, h)..][..d], &mut dk.data_mut()[row(b, col, h)..][..d]);
                    }
                }
            }
        }
        vec![Some(dq), Some(dk), Some(dv)]
    }
}

/// Scaled dot-product attention over `[B, m, C]` with channels split into
/// `heads` contiguous slices, scale `1/√(C/heads)`, heads concatenated back.
pub fn multi_head_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let s = g.shape(q).to_vec();
    if s.len() != 3 || g.shape(k) != s.as_slice() || g.shape(v) != s.as_slice() {
        return Err(Error::shape("multi_head_attention", &s, g.shape(k)));
    }
    let (batch, m, c) = (s[0], s[1], s[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "channels {c} not divisible by heads {heads}"
        )));
    }
    let d = c / heads;
    let scale = T::one() / T::from_usize(d).sqrt();
    let (qt, kt, vt) = (g.value(q), g.value(k), g.value(v));
    let mut out = Tensor::zeros(&s);
    let mut probs = vec![T::zero(); batch * heads * m * m];
    let row = |b: usize, r: usize, h: usize| (b * m + r) * c + h * d;
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * m * m..][..m * m];
            for r in 0..m {
                let qr = &qt.data()[row(b, r, h)..][..d];
                let pr = &mut p[r * m..(r + 1) * m];
                let mut max = T::neg_infinity();
                for (col, pv) in pr.iter_mut().enumerate() {
                    *pv = dot(qr, &kt.data()[row(b, col, h)..][..d]) * scale;
                    max = max.max(*pv);
                }
                let mut total = T::zero();
                for pv in pr.iter_mut() {
                    *pv = (*pv - max).exp();
                    total = total + *pv;
                }
                for pv in pr.iter_mut() {
                    *pv = *pv / total;
                }
                let dst = &mut out.data_mut()[row(b, r, h)..][..d];
                for (col, &pv) in pr.iter().enumerate() {
                    kernels::axpy(pv, &vt.data()[row(b, col, h)..][..d], dst);
                    kernels::mac_counter::add(d);
                }
            }
        }
    }
    Ok(g.record(
        out,
        Box::new(AttentionFn {
            q,
            k,
            v,
            heads,
            probs,
        }),
    ))
}

/// Self-attention among super tokens with bias-free projections
/// `q = S·W_q`, `k = S·W_k`, `v = S·W_v` (each `C×C`) and no output projection.
pub fn super_attention<T: Scalar>(
    g: &mut Graph<T>,
    s: &SuperTokenGrid,
    heads: usize,
    w_q: Var,
    w_k: Var,
    w_v: Var,
) -> Result<SuperTokenGrid> {
    let q = g.linear(s.var, w_q, None)?;
    let k = g.linear(s.var, w_k, None)?;
    let v = g.linear(s.var, w_v, None)?;
    let var = multi_head_attention(g, q, k, v, heads)?;
    Ok(SuperTokenGrid {
        var,
        grid_h: s.grid_h,
        grid_w: s.grid_w,
        unassigned: Vec::new(),
    })
}

struct UpsampleFn {
    q: Var,
    a: Var,
    geometry: Arc<StaGeometry>,
}

impl<T: Scalar> Function<T> for UpsampleFn {
    fn name(&self) -> &'static str {
        "upsample_tokens"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.q, self.a]
    }

    fn backward(&self, g: &Graph<T>, _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let qt = g.value(self.q);
        let at = g.value(self.a);
        let (batch, m, c) = (at.shape()[0], at.shape()[1], at.shape()[2]);
        let n = qt.shape()[1];
        let k = self.geometry.window_len();
        let mut dq = Tensor::zeros(qt.shape());
        let mut da = Tensor::zeros(at.shape());
        for b in 0..batch {
            for i in 0..n {
                let go = &grad.data()[(b * n + i) * c..][..c];
                for (t, &j) in self.geometry.slots(i)[..k].iter().enumerate() {
                    let j = j as usize;
                    let w = qt.data()[(b * n + i) * WINDOW + t];
                    dq.data_mut()[(b * n + i) * WINDOW + t] = dot(go, &at.data()[(b * m + j) * c..][..c]);
                    kernels::axpy(w, go, &mut da.data_mut()[(b * m + j) * c..][..c]);
                }
            }
        }
        vec![Some(dq), Some(da)]
    }
}

/// Map super tokens back to tokens: `X_out = Q · A`.
pub fn upsample_tokens<T: Scalar>(
    g: &mut Graph<T>,
    q: &SparseAssociation,
    attended: &SuperTokenGrid,
) -> Result<TokenMatrix> {
    let geometry = &q.geometry;
    let qs = g.shape(q.var).to_vec();
    let batch = qs[0];
    let c = *g.shape(attended.var).last().unwrap_or(&0);
    check_grid(g, attended, geometry, batch, c)?;
    let (n, m, k) = (geometry.num_tokens(), geometry.num_super_tokens(), geometry.window_len());
    if qs != [batch, n, WINDOW] {
        return Err(Error::Geometry(format!(
            "association shape {qs:?} does not match {n} tokens"
        )));
    }
    let qd = g.value(q.var).data();
    let ad = g.value(attended.var).data();
    let mut out = Tensor::zeros(&[batch, n, c]);
    for b in 0..batch {
        for i in 0..n {
            let dst = &mut out.data_mut()[(b * n + i) * c..][..c];
            for (t, &j) in geometry.slots(i)[..k].iter().enumerate() {
                let w = qd[(b * n + i) * WINDOW + t];
                kernels::axpy(w, &ad[(b * m + j as usize) * c..][..c], dst);
                kernels::mac_counter::add(c);
            }
        }
    }
    let var = g.record(
        out,
        Box::new(UpsampleFn {
            q: q.var,
            a: attended.var,
            geometry: geometry.clone(),
        }),
    );
    Ok(TokenMatrix {
        var,
        height: geometry.height,
        width: geometry.width,
    })
}

/// Convolutional position embedding: `x + depthwise3x3(x)` (no bias).
pub fn cpe<T: Scalar>(g: &mut Graph<T>, x: Var, kernel: Var) -> Result<Var> {
    let y = depthwise_conv3x3(g, x, kernel, None)?;
    g.add(y, x)
}

/// Graph handles of one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct StaBlockVars {
    pub cpe_kernel: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Full block: `X = x + CPE(x)`, `Y = X + Upsample(Attn(Update(Assoc(LN(X)))))`.
pub fn sta_block<T: Scalar>(g: &mut Graph<T>, x_in: Var, p: &StaBlockVars, cfg: &StaConfig) -> Result<Var> {
    cfg.validate()?;
    let s = g.shape(x_in).to_vec();
    if s.len() != 4 || s[1] != cfg.channels {
        return Err(Error::invalid(
            "sta_block",
            format!("expected [N, {}, H, W], got {s:?}", cfg.channels),
        ));
    }
    let geometry = Arc::new(StaGeometry::new(s[2], s[3], cfg.token_size.0, cfg.token_size.1)?);
    let x = cpe(g, x_in, p.cpe_kernel)?;
    let normed = crate::nn::layer_norm(g, x, p.ln_gamma, p.ln_beta, crate::nn::norm::LAYER_NORM_EPS)?;
    let tokens = to_tokens(g, normed)?;
    let init = init_super_tokens(g, &tokens, &geometry)?;
    let mut assoc = associate(g, &tokens, &init, &geometry)?;
    let mut supers = update_super_tokens(g, &assoc, &tokens, &init)?;
    for _ in 1..cfg.iterations {
        assoc = associate(g, &tokens, &supers, &geometry)?;
        supers = update_super_tokens(g, &assoc, &tokens, &supers)?;
    }
    let attended = super_attention(g, &supers, cfg.heads, p.w_q, p.w_k, p.w_v)?;
    let up = upsample_tokens(g, &assoc, &attended)?;
    let y = from_tokens(g, &up)?;
    g.add(y, x)
}

/// STA block layer with its own parameters.
#[derive(Clone, Debug)]
pub struct StaBlock {
    pub cfg: StaConfig,
    pub cpe_kernel: ParamId,
    pub norm: LayerNorm2d,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl StaBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: StaConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let cpe_kernel = store.add_uniform(format!("{name}.cpe.weight"), &[c, 1, 3, 3], 1.0 / 3.0, rng);
        let norm = LayerNorm2d::new(store, &format!("{name}.norm"), c);
        let bound = 1.0 / (c as f64).sqrt();
        let w_q = store.add_uniform(format!("{name}.w_q"), &[c, c], bound, rng);
        let w_k = store.add_uniform(format!("{name}.w_k"), &[c, c], bound, rng);
        let w_v = store.add_uniform(format!("{name}.w_v"), &[c, c], bound, rng);
        Ok(Self {
            cfg,
            cpe_kernel,
            norm,
            w_q,
            w_k,
            w_v,
        })
    }

    pub fn vars<T: Scalar>(&self, ctx: &Ctx<'_, T>) -> StaBlockVars {
        StaBlockVars {
            cpe_kernel: ctx.var(self.cpe_kernel),
            ln_gamma: ctx.var(self.norm.gamma),
            ln_beta: ctx.var(self.norm.beta),
            w_q: ctx.var(self.w_q),
            w_k: ctx.var(self.w_k),
            w_v: ctx.var(self.w_v),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let vars = self.vars(ctx);
        sta_block(ctx.graph, x, &vars, &self.cfg)
    }

    /// Trainable scalars of a block with `c` channels: CPE `9c`, norm `2c`, projections `3c²`.
    pub fn parameter_count(c: usize) -> usize {
        9 * c + 2 * c + 3 * c * c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens_from(g: &mut Graph<f64>, h: usize, w: usize, c: usize, f: impl Fn(usize) -> f64) -> TokenMatrix {
        let data = (0..h * w * c).map(f).collect();
        let var = g.constant(Tensor::new(&[1, h * w, c], data).unwrap());
        TokenMatrix { var, height: h, width: w }
    }

    #[test]
    fn super_token_count() {
        let geo = StaGeometry::new(32, 32, 16, 16).unwrap();
        assert_eq!(geo.num_super_tokens(), 4);
        let err = StaGeometry::new(30, 32, 16, 16).unwrap_err().to_string();
        assert!(err.contains("30x32") && err.contains("16x16"), "{err}");
    }

    #[test]
    fn windows_are_shifted_at_borders() {
        let geo = StaGeometry::new(5, 5, 1, 1).unwrap();
        assert_eq!(geo.window_len(), 9);
        let corner: Vec<usize> = geo.neighbors(0).collect();
        assert_eq!(corner, vec![0, 1, 2, 5, 6, 7, 10, 11, 12]);
        let center: Vec<usize> = geo.neighbors(12).collect();
        assert_eq!(center, vec![6, 7, 8, 11, 12, 13, 16, 17, 18]);
        let geo = StaGeometry::new(4, 2, 2, 1).unwrap();
        assert_eq!(geo.window_len(), 4);
        assert_eq!(geo.neighbors(7).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        for i in 0..geo.num_tokens() {
            let mut v: Vec<usize> = geo.neighbors(i).collect();
            v.sort();
            v.dedup();
            assert_eq!(v.len(), geo.window_len());
        }
    }

    #[test]
    fn init_means_constant_and_degenerate() {
        let mut g = Graph::new();
        let geo = Arc::new(StaGeometry::new(4, 4, 2, 2).unwrap());
        let x = tokens_from(&mut g, 4, 4, 3, |_| 1.5);
        let s = init_super_tokens(&mut g, &x, &geo).unwrap();
        assert!(g.value(s.var).data().iter().all(|&v| v == 1.5));

        let geo1 = Arc::new(StaGeometry::new(3, 2, 1, 1).unwrap());
        let x = tokens_from(&mut g, 3, 2, 2, |i| i as f64 * 0.3);
        let s = init_super_tokens(&mut g, &x, &geo1).unwrap();
        assert_eq!(g.value(s.var), g.value(x.var));
    }

    #[test]
    fn identical_super_tokens_give_uniform_weights() {
        let mut g = Graph::new();
        let geo = Arc::new(StaGeometry::new(8, 8, 2, 2).unwrap());
        let x = tokens_from(&mut g, 8, 8, 3, |i| (i as f64).sin());
        let s_var = g.constant(Tensor::full(&[1, 16, 3], 0.4));
        let s = SuperTokenGrid { var: s_var, grid_h: 4, grid_w: 4, unassigned: vec![] };
        let q = associate(&mut g, &x, &s, &geo).unwrap();
        for row in g.value(q.var).data().chunks(WINDOW) {
            for &v in &row[..9] {
                assert!((v - 1.0 / 9.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn update_keeps_constants_and_identity() {
        let mut g = Graph::new();
        let geo = Arc::new(StaGeometry::new(4, 4, 2, 2).unwrap());
        let x = tokens_from(&mut g, 4, 4, 2, |_| -0.25);
        let s0 = init_super_tokens(&mut g, &x, &geo).unwrap();
        let q = associate(&mut g, &x, &s0, &geo).unwrap();
        let s = update_super_tokens(&mut g, &q, &x, &s0).unwrap();
        assert!(g.value(s.var).data().iter().all(|&v| (v + 0.25).abs() < 1e-15));
        assert!(s.unassigned.is_empty());
    }

    #[test]
    fn attention_degenerate_cases() {
        let mut g = Graph::<f64>::new();
        let s_t = Tensor::from_f64(&[1, 3, 2], &[1., 2., -3., 0.5, 4., 1.]).unwrap();
        let s = SuperTokenGrid { var: g.constant(s_t.clone()), grid_h: 3, grid_w: 1, unassigned: vec![] };
        let zero = g.constant(Tensor::zeros(&[2, 2]));
        let eye = g.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
        let out = super_attention(&mut g, &s, 1, zero, zero, eye).unwrap();
        let v = g.value(out.var);
        let means = [(1.0 - 3.0 + 4.0) / 3.0, (2.0 + 0.5 + 1.0) / 3.0];
        for r in 0..3 {
            for c in 0..2 {
                assert!((v.at(&[0, r, c]) - means[c]).abs() < 1e-14);
            }
        }

        let one = SuperTokenGrid {
            var: g.constant(Tensor::from_f64(&[1, 1, 2], &[0.3, -0.8]).unwrap()),
            grid_h: 1,
            grid_w: 1,
            unassigned: vec![],
        };
        let wv = g.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
        let wq = g.constant(Tensor::from_f64(&[2, 2], &[0.5, -1., 2., 0.]).unwrap());
        let out = super_attention(&mut g, &one, 2, wq, wq, wv).unwrap();
        let v = g.value(out.var).data();
        assert!((v[0] - (0.3 - 2.4)).abs() < 1e-14);
        assert!((v[1] - (0.6 - 3.2)).abs() < 1e-14);
    }

    #[test]
    fn head_divisibility_checked() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[1, 2, 6]));
        assert!(multi_head_attention(&mut g, q, q, q, 4).is_err());
        assert!(StaConfig::new(6, (2, 2), 4).validate().is_err());
    }

    #[test]
    fn upsample_of_constant_super_tokens() {
        let mut g = Graph::new();
        let geo = Arc::new(StaGeometry::new(6, 6, 2, 3).unwrap());
        let x = tokens_from(&mut g, 6, 6, 2, |i| (i as f64 * 0.7).cos());
        let s0 = init_super_tokens(&mut g, &x, &geo).unwrap();
        let q = associate(&mut g, &x, &s0, &geo).unwrap();
        let a = SuperTokenGrid {
            var: g.constant(Tensor::full(&[1, geo.num_super_tokens(), 2], 2.5)),
            grid_h: geo.grid_h,
            grid_w: geo.grid_w,
            unassigned: vec![],
        };
        let up = upsample_tokens(&mut g, &q, &a).unwrap();
        assert!(g.value(up.var).data().iter().all(|&v| (v - 2.5).abs() < 1e-14));
    }

    #[test]
    fn geometry_mismatch_detected() {
        let mut g = Graph::new();
        let geo = Arc::new(StaGeometry::new(4, 4, 2, 2).unwrap());
        let other = Arc::new(StaGeometry::new(4, 4, 1, 1).unwrap());
        let x = tokens_from(&mut g, 4, 4, 2, |i| i as f64);
        let s = init_super_tokens(&mut g, &x, &geo).unwrap();
        assert!(matches!(associate(&mut g, &x, &s, &other), Err(Error::Geometry(_))));
        let y = tokens_from(&mut g, 2, 8, 2, |i| i as f64);
        assert!(init_super_tokens(&mut g, &y, &geo).is_err());
    }

    #[test]
    fn cpe_residual_identities() {
        let mut g = Graph::new();
        let xt = Tensor::new(&[1, 2, 3, 3], (0..18).map(|i| i as f64 - 4.0).collect()).unwrap();
        let x = g.constant(xt.clone());
        let zero = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y = cpe(&mut g, x, zero).unwrap();
        assert_eq!(g.value(y), &xt);
        let mut k = Tensor::zeros(&[2, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        k.data_mut()[13] = 1.0;
        let center = g.constant(k);
        let y = cpe(&mut g, x, center).unwrap();
        assert_eq!(g.value(y), &xt.map(|v| 2.0 * v));
    }
}
