//! Differentiable backward warping and occlusion masks.

use std::marker::PhantomData;
use std::sync::Arc;

use gradcore::{CustomOp, Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowsynth::FlowField;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Border {
    /// sample coordinates are clamped to the image
    #[default]
    Clamp,
    /// out-of-image neighbours contribute zero
    Zero,
}

/// Up to four `(source index, weight)` pairs per output pixel. Taps with
/// zero weight are dropped so integer flows are exact gathers.
struct Taps {
    start: Vec<u32>,
    index: Vec<u32>,
    weight: Vec<f64>,
}

impl Taps {
    fn build(flow: &FlowField, border: Border) -> Self {
        let (w, h) = (flow.width(), flow.height());
        let mut start = Vec::with_capacity(w * h + 1);
        let mut index = Vec::with_capacity(w * h * 4);
        let mut weight = Vec::with_capacity(w * h * 4);
        let axis = |pos: f64, len: usize| -> [(isize, f64); 2] {
            match border {
                Border::Clamp => {
                    let p = pos.clamp(0.0, (len - 1) as f64);
                    let i0 = p.floor();
                    let t = p - i0;
                    let i0 = i0 as isize;
                    let i1 = (i0 + 1).min(len as isize - 1);
                    [(i0, 1.0 - t), (i1, t)]
                }
                Border::Zero => {
                    let i0 = pos.floor();
                    let t = pos - i0;
                    let i0 = i0 as isize;
                    [(i0, 1.0 - t), (i0 + 1, t)]
                }
            }
        };
        for y in 0..h {
            for x in 0..w {
                start.push(index.len() as u32);
                let (fx, fy) = flow.at(x, y);
                let xs = axis(x as f64 + f64::from(fx), w);
                let ys = axis(y as f64 + f64::from(fy), h);
                for &(iy, wy) in &ys {
                    for &(ix, wx) in &xs {
                        let wt = wx * wy;
                        if wt == 0.0 || ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize {
                            continue;
                        }
                        let src = iy as usize * w + ix as usize;
                        // clamping can map both taps onto one pixel
                        let s = *start.last().unwrap() as usize;
                        if let Some(k) = index[s..].iter().position(|&i| i as usize == src) {
                            weight[s + k] += wt;
                        } else {
                            index.push(src as u32);
                            weight.push(wt);
                        }
                    }
                }
            }
        }
        start.push(index.len() as u32);
        Taps { start, index, weight }
    }

    fn gather<T: Element>(&self, src: &[T], dst: &mut [T]) {
        for (p, out) in dst.iter_mut().enumerate() {
            let (a, b) = (self.start[p] as usize, self.start[p + 1] as usize);
            let mut acc = T::zero();
            for k in a..b {
                acc = acc + src[self.index[k] as usize] * T::from_f64_lossy(self.weight[k]);
            }
            *out = acc;
        }
    }

    fn scatter<T: Element>(&self, grad_out: &[T], grad_in: &mut [T]) {
        for (p, &g) in grad_out.iter().enumerate() {
            let (a, b) = (self.start[p] as usize, self.start[p + 1] as usize);
            for k in a..b {
                let i = self.index[k] as usize;
                grad_in[i] = grad_in[i] + g * T::from_f64_lossy(self.weight[k]);
            }
        }
    }
}

fn plane_dims<T: Element>(image: &Tensor<T>, flow: &FlowField) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() < 2 {
        return Err(Error::dim("warp", "CHW or NCHW image", format!("{s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if (w, h) != (flow.width(), flow.height()) {
        return Err(Error::dim(
            "warp",
            format!("{}x{} image", flow.width(), flow.height()),
            format!("{w}x{h}"),
        ));
    }
    Ok((h, w))
}

/// `F(x, f)`: output pixel `p` is the bilinear sample of `image` at
/// `p + f(p)`. Works on any tensor whose last two axes are `H x W`.
pub fn backward_warp<T: Element>(image: &Tensor<T>, flow: &FlowField, border: Border) -> Result<Tensor<T>> {
    let (h, w) = plane_dims(image, flow)?;
    let taps = Taps::build(flow, border);
    let mut out = vec![T::zero(); image.numel()];
    for (src, dst) in image.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        taps.gather(src, dst);
    }
    Ok(Tensor::from_vec(image.shape(), out)?)
}

/// Tape op for [`backward_warp`]; the flow is a constant.
pub struct WarpOp<T> {
    flow: Arc<FlowField>,
    border: Border,
    _elem: PhantomData<fn() -> T>,
}

impl<T> WarpOp<T> {
    pub fn new(flow: Arc<FlowField>, border: Border) -> Self {
        WarpOp {
            flow,
            border,
            _elem: PhantomData,
        }
    }
}

impl<T: Element> CustomOp<T> for WarpOp<T> {
    fn name(&self) -> &str {
        "backward_warp"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> gradcore::Result<Tensor<T>> {
        backward_warp(inputs[0], &self.flow, self.border).map_err(to_grad_error)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> gradcore::Result<Vec<Option<Tensor<T>>>> {
        let (h, w) = plane_dims(inputs[0], &self.flow).map_err(to_grad_error)?;
        let taps = Taps::build(&self.flow, self.border);
        let mut gin = vec![T::zero(); inputs[0].numel()];
        for (go, gi) in grad_out.data().chunks(h * w).zip(gin.chunks_mut(h * w)) {
            taps.scatter(go, gi);
        }
        Ok(vec![Some(Tensor::from_vec(inputs[0].shape(), gin)?)])
    }
}

fn to_grad_error(e: Error) -> gradcore::GradError {
    match e {
        Error::Grad(g) => g,
        Error::Dimension { expected, got, .. } => gradcore::GradError::Shape {
            op: "backward_warp",
            expected,
            got,
        },
        other => gradcore::GradError::Format(other.to_string()),
    }
}

/// Record a warp of `x` on the tape.
pub fn warp_var<T: Element>(tape: &mut Tape<T>, x: Var, flow: &Arc<FlowField>, border: Border) -> Result<Var> {
    Ok(tape.custom(Arc::new(WarpOp::new(Arc::clone(flow), border)), &[x])?)
}

/// Per-pixel weights `exp(-alpha * d)` with `d >= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
}

impl OcclusionMask {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.width + x]
    }
}

/// `exp(-alpha * || x_cur(p) - F(x_prev, flow)(p) ||_2)`, the norm taken
/// over the channel vector. Frames are `CHW`.
pub fn occlusion_mask<T: Element>(
    x_prev: &Tensor<T>,
    x_cur: &Tensor<T>,
    flow: &FlowField,
    alpha: f64,
) -> Result<OcclusionMask> {
    if x_prev.shape() != x_cur.shape() {
        return Err(Error::dim(
            "occlusion mask",
            format!("{:?}", x_prev.shape()),
            format!("{:?}", x_cur.shape()),
        ));
    }
    if x_cur.shape().len() != 3 {
        return Err(Error::dim("occlusion mask", "CHW frames", format!("{:?}", x_cur.shape())));
    }
    let warped = backward_warp(x_prev, flow, Border::Clamp)?;
    let (c, h, w) = (x_cur.shape()[0], x_cur.shape()[1], x_cur.shape()[2]);
    let hw = h * w;
    let cur = x_cur.data();
    let wd = warped.data();
    let weights = (0..hw)
        .map(|p| {
            let d2: f64 = (0..c)
                .map(|ch| {
                    let d = (cur[ch * hw + p] - wd[ch * hw + p]).to_f64_lossy();
                    d * d
                })
                .sum();
            (-alpha * d2.sqrt()).exp()
        })
        .collect();
    Ok(OcclusionMask {
        width: w,
        height: h,
        weights,
    })
}
