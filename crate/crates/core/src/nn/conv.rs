//! 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Convention: cross-correlation (the kernel is not flipped), NCHW layout,
//! conv weights `[Cout, Cin/groups, K, K]`, transposed-conv weights
//! `[Cin, Cout, K, K]`. With these layouts a transposed convolution is the
//! exact adjoint of the convolution that shares its weight tensor.

use rand::Rng;

use super::params::{Ctx, ParamId, ParamStore};
use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl ConvOptions {
    pub fn same3x3() -> Self {
        Self {
            stride: 1,
            padding: 1,
            groups: 1,
        }
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    ((input - 1) * stride + kernel).checked_sub(2 * padding).filter(|&v| v > 0)
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::invalid(op, format!("expected NCHW input, got {shape:?}"))),
    }
}

struct Conv2dFn {
    x: Var,
    w: Var,
    b: Option<Var>,
    opts: ConvOptions,
}

impl Conv2dFn {
    fn geom(&self, x: &[usize], w: &[usize]) -> ConvGeom {
        ConvGeom {
            channels: x[1] / self.opts.groups,
            height: x[2],
            width: x[3],
            kernel_h: w[2],
            kernel_w: w[3],
            stride: self.opts.stride,
            padding: self.opts.padding,
        }
    }
}

impl<T: Scalar> Function<T> for Conv2dFn {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn backward(&self, g: &Graph<T>, out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = g.value(self.x);
        let w = g.value(self.w);
        let geom = self.geom(x.shape(), w.shape());
        let groups = self.opts.groups;
        let [batch, cin, h, wd] = dims4("conv2d", x.shape()).unwrap();
        let cout = out.shape()[1];
        let cout_g = cout / groups;
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let plane_in = (cin / groups) * h * wd;

        let need_x = g.requires_grad(self.x);
        let need_w = g.requires_grad(self.w);
        let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
        let mut dw = need_w.then(|| Tensor::zeros(w.shape()));
        let mut col = vec![T::zero(); rows * cols];
        let mut dcol = vec![T::zero(); rows * cols];

        for b in 0..batch {
            for grp in 0..groups {
                let go = &grad.data()[(b * cout + grp * cout_g) * cols..][..cout_g * cols];
                let wg = &w.data()[grp * cout_g * rows..][..cout_g * rows];
                if let Some(dw) = dw.as_mut() {
                    let xi = &x.data()[(b * cin) * h * wd + grp * plane_in..][..plane_in];
                    kernels::im2col(&geom, xi, &mut col);
                    let dwg = &mut dw.data_mut()[grp * cout_g * rows..][..cout_g * rows];
                    kernels::gemm_nt(cout_g, cols, rows, go, &col, dwg);
                }
                if let Some(dx) = dx.as_mut() {
                    dcol.fill(T::zero());
                    kernels::gemm_tn(rows, cout_g, cols, wg, go, &mut dcol);
                    let dxi = &mut dx.data_mut()[(b * cin) * h * wd + grp * plane_in..][..plane_in];
                    kernels::col2im(&geom, &dcol, dxi);
                }
            }
        }
        let mut grads = vec![dx, dw];
        if self.b.is_some() {
            grads.push(Some(channel_sums(grad)));
        }
        grads
    }
}

/// Per-channel sums of an NCHW tensor (bias gradient).
pub(crate) fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (batch, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut out = Tensor::zeros(&[c]);
    for b in 0..batch {
        for ch in 0..c {
            let v = t.data()[(b * c + ch) * plane..][..plane]
                .iter()
                .fold(T::zero(), |a, &x| a + x);
            out.data_mut()[ch] = out.data_mut()[ch] + v;
        }
    }
    out
}

fn add_channel_bias<T: Scalar>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let s = out.shape().to_vec();
    let (c, plane) = (s[1], s[2] * s[3]);
    for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let bv = bias.data()[i % c];
        chunk.iter_mut().for_each(|v| *v = *v + bv);
    }
}

/// 2-D cross-correlation. `x: [N, Cin, H, W]`, `w: [Cout, Cin/groups, K, K]`.
pub fn conv2d<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    opts: ConvOptions,
) -> Result<Var> {
    let xs = dims4("conv2d", g.shape(x))?;
    let ws = dims4("conv2d", g.shape(w))?;
    let [batch, cin, h, wd] = xs;
    let [cout, cin_g, kh, kw] = ws;
    let groups = opts.groups;
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
        return Err(Error::shape("conv2d", &xs, &ws));
    }
    if let Some(b) = b {
        if g.shape(b) != [cout] {
            return Err(Error::shape("conv2d bias", g.shape(b), &[cout]));
        }
    }
    let (oh, ow) = match (
        conv_out_extent(h, kh, opts.stride, opts.padding),
        conv_out_extent(wd, kw, opts.stride, opts.padding),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::invalid(
                "conv2d",
                format!("non-positive output extent for input {h}x{wd}, kernel {kh}x{kw}"),
            ))
        }
    };
    let f = Conv2dFn { x, w, b, opts };
    let geom = f.geom(&xs, &ws);
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    debug_assert_eq!(cols, oh * ow);
    let cout_g = cout / groups;
    let plane_in = cin_g * h * wd;

    let mut out = Tensor::zeros(&[batch, cout, oh, ow]);
    if let Some(b) = b {
        add_channel_bias(&mut out, g.value(b));
    }
    let tx = g.value(x);
    let tw = g.value(w);
    let mut col = vec![T::zero(); rows * cols];
    for bi in 0..batch {
        for grp in 0..groups {
            let xi = &tx.data()[bi * cin * h * wd + grp * plane_in..][..plane_in];
            kernels::im2col(&geom, xi, &mut col);
            let wg = &tw.data()[grp * cout_g * rows..][..cout_g * rows];
            let dst = &mut out.data_mut()[(bi * cout + grp * cout_g) * cols..][..cout_g * cols];
            kernels::gemm_nn(cout_g, rows, cols, wg, &col, dst);
        }
    }
    Ok(g.record(out, Box::new(f)))
}

/// Shape-preserving 3×3 depthwise convolution (`groups = C`, stride 1, pad 1).
pub fn depthwise_conv3x3<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let xs = dims4("depthwise_conv3x3", g.shape(x))?;
    let ws = dims4("depthwise_conv3x3", g.shape(w))?;
    if ws != [xs[1], 1, 3, 3] {
        return Err(Error::shape("depthwise_conv3x3", &xs, &ws));
    }
    conv2d(
        g,
        x,
        w,
        b,
        ConvOptions {
            stride: 1,
            padding: 1,
            groups: xs[1],
        },
    )
}

struct ConvTranspose2dFn {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
}

impl<T: Scalar> Function<T> for ConvTranspose2dFn {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn backward(&self, g: &Graph<T>, out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = g.value(self.x);
        let w = g.value(self.w);
        let [batch, cin, h, wd] = dims4("conv_transpose2d", x.shape()).unwrap();
        let cout = out.shape()[1];
        let (rows, cols) = (self.geom.col_rows(), h * wd);
        let plane_out = cout * out.shape()[2] * out.shape()[3];

        let mut dx = g.requires_grad(self.x).then(|| Tensor::zeros(x.shape()));
        let mut dw = g.requires_grad(self.w).then(|| Tensor::zeros(w.shape()));
        let mut col = vec![T::zero(); rows * cols];
        for b in 0..batch {
            let go = &grad.data()[b * plane_out..][..plane_out];
            kernels::im2col(&self.geom, go, &mut col);
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx.data_mut()[b * cin * cols..][..cin * cols];
                kernels::gemm_nn(cin, rows, cols, w.data(), &col, dst);
            }
            if let Some(dw) = dw.as_mut() {
                let xi = &x.data()[b * cin * cols..][..cin * cols];
                kernels::gemm_nt(cin, cols, rows, xi, &col, dw.data_mut());
            }
        }
        let mut grads = vec![dx, dw];
        if self.b.is_some() {
            grads.push(Some(channel_sums(grad)));
        }
        grads
    }
}

/// Transposed convolution. `x: [N, Cin, H, W]`, `w: [Cin, Cout, K, K]`,
/// output extent `(H−1)·stride + K − 2·padding`.
pub fn conv_transpose2d<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xs = dims4("conv_transpose2d", g.shape(x))?;
    let ws = dims4("conv_transpose2d", g.shape(w))?;
    let [batch, cin, h, wd] = xs;
    let [wcin, cout, kh, kw] = ws;
    if wcin != cin || stride == 0 {
        return Err(Error::shape("conv_transpose2d", &xs, &ws));
    }
    if let Some(b) = b {
        if g.shape(b) != [cout] {
            return Err(Error::shape("conv_transpose2d bias", g.shape(b), &[cout]));
        }
    }
    let (oh, ow) = match (
        conv_transpose_out_extent(h, kh, stride, padding),
        conv_transpose_out_extent(wd, kw, stride, padding),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::invalid(
                "conv_transpose2d",
                format!("non-positive output extent for input {h}x{wd}"),
            ))
        }
    };
    let geom = ConvGeom {
        channels: cout,
        height: oh,
        width: ow,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
    };
    debug_assert_eq!((geom.out_h(), geom.out_w()), (h, wd));
    let (rows, cols) = (geom.col_rows(), h * wd);

    let mut out = Tensor::zeros(&[batch, cout, oh, ow]);
    let tx = g.value(x);
    let tw = g.value(w);
    let mut col = vec![T::zero(); rows * cols];
    let plane_out = cout * oh * ow;
    for bi in 0..batch {
        col.fill(T::zero());
        let xi = &tx.data()[bi * cin * cols..][..cin * cols];
        kernels::gemm_tn(rows, cin, cols, tw.data(), xi, &mut col);
        kernels::col2im(&geom, &col, &mut out.data_mut()[bi * plane_out..][..plane_out]);
    }
    if let Some(b) = b {
        add_channel_bias(&mut out, g.value(b));
    }
    Ok(g.record(out, Box::new(ConvTranspose2dFn { x, w, b, geom })))
}

/// Convolution layer with fan-in scaled uniform init.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: ConvOptions,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        opts: ConvOptions,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let cin_g = in_channels / opts.groups;
        let bound = 1.0 / ((cin_g * kernel * kernel) as f64).sqrt();
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[out_channels, cin_g, kernel, kernel],
            bound,
            rng,
        );
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), &[out_channels], bound, rng));
        Self {
            weight,
            bias,
            opts,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        conv2d(ctx.graph, x, w, b, self.opts)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((out_channels * kernel * kernel) as f64).sqrt();
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[in_channels, out_channels, kernel, kernel],
            bound,
            rng,
        );
        let bias = Some(store.add_uniform(format!("{name}.bias"), &[out_channels], bound, rng));
        Self {
            weight,
            bias,
            stride,
            padding,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        conv_transpose2d(ctx.graph, x, w, b, self.stride, self.padding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], phase: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| (i as f64 * 0.731 + phase).sin()).collect()).unwrap()
    }

    #[test]
    fn box_sum_with_padding() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = conv2d(&mut g, x, w, None, ConvOptions::same3x3()).unwrap();
        let v = g.value(y);
        assert_eq!(v.at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(v.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(v.at(&[0, 0, 2, 2]), 4.0);
        assert_eq!(v.at(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn identity_kernel() {
        let mut g = Graph::<f64>::new();
        let xt = ramp(&[2, 1, 4, 5], 0.2);
        let x = g.constant(xt.clone());
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let w = g.constant(k);
        let y = conv2d(&mut g, x, w, None, ConvOptions::same3x3()).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn strided_shape() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 32, 32]));
        let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let opts = ConvOptions {
            stride: 2,
            padding: 1,
            groups: 1,
        };
        let y = conv2d(&mut g, x, w, None, opts).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 16, 16]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(conv2d(&mut g, x, w, None, ConvOptions::same3x3()).is_err());
        let x = g.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(conv2d(&mut g, x, w, None, ConvOptions::default()).is_err());
    }

    #[test]
    fn depthwise_constant_interior() {
        let mut g = Graph::<f64>::new();
        let mut xt = Tensor::zeros(&[1, 2, 5, 5]);
        for (i, v) in xt.data_mut().iter_mut().enumerate() {
            *v = if i < 25 { 2.0 } else { -1.0 };
        }
        let x = g.constant(xt);
        let k = ramp(&[2, 1, 3, 3], 0.0);
        let sums: Vec<f64> = k.data().chunks(9).map(|c| c.iter().sum()).collect();
        let w = g.constant(k);
        let y = depthwise_conv3x3(&mut g, x, w, None).unwrap();
        let v = g.value(y);
        assert!((v.at(&[0, 0, 2, 2]) - 2.0 * sums[0]).abs() < 1e-12);
        assert!((v.at(&[0, 1, 3, 1]) + sums[1]).abs() < 1e-12);
        assert_eq!(v.shape(), &[1, 2, 5, 5]);
    }

    #[test]
    fn transposed_shape_and_unit_impulse() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let w = g.constant(Tensor::zeros(&[3, 5, 2, 2]));
        let y = conv_transpose2d(&mut g, x, w, None, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 5, 16, 16]);

        let mut xt = Tensor::zeros(&[1, 1, 3, 3]);
        xt.data_mut()[0] = 1.0;
        let x = g.constant(xt);
        let w = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = conv_transpose2d(&mut g, x, w, None, 2, 0).unwrap();
        let v = g.value(y);
        for r in 0..6 {
            for c in 0..6 {
                let want = if r < 2 && c < 2 { 1.0 } else { 0.0 };
                assert_eq!(v.at(&[0, 0, r, c]), want);
            }
        }
    }
}
