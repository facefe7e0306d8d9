use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct MaxPoolFn {
    x: Var,
    /// Flat input index of the winner for every output element.
    argmax: Vec<u32>,
}

impl<T: Scalar> Function<T> for MaxPoolFn {
    fn name(&self) -> &'static str {
        "max_pool2x2"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, g: &Graph<T>, _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(g.shape(self.x));
        for (&src, &d) in self.argmax.iter().zip(grad.data()) {
            let slot = &mut dx.data_mut()[src as usize];
            *slot = *slot + d;
        }
        vec![Some(dx)]
    }
}

/// 2×2 max pooling with stride 2. Ties go to the first element in
/// row-major window order.
pub fn max_pool2x2<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::invalid("max_pool2x2", format!("need NCHW with H,W >= 2, got {s:?}")));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = g.value(x).data();
    let mut out = Tensor::zeros(&[s[0], s[1], oh, ow]);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = p * h * w + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = p * h * w + (2 * y + dy) * w + 2 * xo + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.data_mut()[(p * oh + y) * ow + xo] = xd[best];
                argmax.push(best as u32);
            }
        }
    }
    Ok(g.record(out, Box::new(MaxPoolFn { x, argmax })))
}
