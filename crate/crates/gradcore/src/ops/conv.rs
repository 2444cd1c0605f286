//! Convolution and resize kernels on raw NCHW buffers.

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{GradError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Padding {
    pub mode: PadMode,
    pub size: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        mode: PadMode::Zero,
        size: 0,
    };

    pub fn zero(size: usize) -> Self {
        Padding {
            mode: PadMode::Zero,
            size,
        }
    }

    pub fn reflect(size: usize) -> Self {
        Padding {
            mode: PadMode::Reflect,
            size,
        }
    }
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    /// padded row index -> source row
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

fn axis_map(len: usize, pad: Padding) -> Vec<Option<usize>> {
    let p = pad.size as isize;
    let n = len as isize;
    (-p..n + p)
        .map(|i| {
            if (0..n).contains(&i) {
                Some(i as usize)
            } else {
                match pad.mode {
                    PadMode::Zero => None,
                    PadMode::Reflect => {
                        let r = if i < 0 { -i } else { 2 * (n - 1) - i };
                        Some(r as usize)
                    }
                }
            }
        })
        .collect()
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: Padding) -> Result<Self> {
        let (n, c, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(GradError::shape("conv2d", "NCHW input", format!("{input:?}"))),
        };
        let (o, wc, kh, kw) = match *weight {
            [o, wc, kh, kw] => (o, wc, kh, kw),
            _ => return Err(GradError::shape("conv2d", "OIkk weight", format!("{weight:?}"))),
        };
        if wc != c {
            return Err(GradError::shape(
                "conv2d",
                format!("weight with {c} input channels"),
                format!("{weight:?}"),
            ));
        }
        if stride == 0 {
            return Err(GradError::shape("conv2d", "stride >= 1", "0"));
        }
        if pad.mode == PadMode::Reflect && (pad.size >= h || pad.size >= w) {
            return Err(GradError::shape(
                "conv2d",
                format!("reflect pad {} smaller than spatial dims", pad.size),
                format!("{h}x{w}"),
            ));
        }
        let hp = h + 2 * pad.size;
        let wp = w + 2 * pad.size;
        if hp < kh || wp < kw || kh == 0 || kw == 0 {
            return Err(GradError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} fitting padded input"),
                format!("{hp}x{wp}"),
            ));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
            stride,
            rows: axis_map(h, pad),
            cols: axis_map(w, pad),
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfold one sample into a `[c*kh*kw, ho*wo]` matrix.
    fn im2col<T: Element>(&self, x: &[T], col: &mut [T]) {
        let hw = self.h * self.w;
        let ol = self.out_len();
        for ci in 0..self.c {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[r * ol..(r + 1) * ol];
                    for oy in 0..self.ho {
                        let row = self.rows[oy * self.stride + ky];
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        match row {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, slot) in line.iter_mut().enumerate() {
                                    *slot = match self.cols[ox * self.stride + kx] {
                                        Some(ix) => src[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatter-add columns back into one sample.
    fn col2im<T: Element>(&self, col: &[T], dx: &mut [T]) {
        let hw = self.h * self.w;
        let ol = self.out_len();
        for ci in 0..self.c {
            let plane = &mut dx[ci * hw..(ci + 1) * hw];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[r * ol..(r + 1) * ol];
                    for oy in 0..self.ho {
                        let Some(iy) = self.rows[oy * self.stride + ky] else {
                            continue;
                        };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.cols[ox * self.stride + kx] {
                                plane[iy * self.w + ix] = plane[iy * self.w + ix] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: Padding,
) -> Result<(Tensor<T>, ConvGeom)> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.o {
            return Err(GradError::shape(
                "conv2d",
                format!("bias of length {}", g.o),
                format!("{:?}", b.shape()),
            ));
        }
    }
    let pl = g.patch_len();
    let ol = g.out_len();
    let in_len = g.c * g.h * g.w;
    let mut col = vec![T::zero(); pl * ol];
    let mut out = vec![T::zero(); g.n * g.o * ol];
    for ni in 0..g.n {
        g.im2col(&input.data()[ni * in_len..(ni + 1) * in_len], &mut col);
        let dst = &mut out[ni * g.o * ol..(ni + 1) * g.o * ol];
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_mut(ol).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        T::gemm(
            g.o,
            pl,
            ol,
            weight.data(),
            pl as isize,
            1,
            &col,
            ol as isize,
            1,
            if bias.is_some() { T::one() } else { T::zero() },
            dst,
            ol as isize,
            1,
        );
    }
    let out = Tensor::from_vec(&[g.n, g.o, g.ho, g.wo], out)?;
    Ok((out, g))
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let pl = g.patch_len();
    let ol = g.out_len();
    let in_len = g.c * g.h * g.w;
    let mut dx = need_input.then(|| vec![T::zero(); input.numel()]);
    let mut dw = need_weight.then(|| vec![T::zero(); weight.numel()]);
    let mut db = need_bias.then(|| vec![T::zero(); g.o]);
    let mut col = vec![T::zero(); pl * ol];
    for ni in 0..g.n {
        let go = &grad_out[ni * g.o * ol..(ni + 1) * g.o * ol];
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in go.chunks(ol).enumerate() {
                db[oc] = db[oc] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            g.im2col(&input.data()[ni * in_len..(ni + 1) * in_len], &mut col);
            // dW[o, p] += go[o, l] * col[p, l]
            T::gemm(
                g.o,
                ol,
                pl,
                go,
                ol as isize,
                1,
                &col,
                1,
                ol as isize,
                T::one(),
                dw,
                pl as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[p, l] = W[o, p] * go[o, l]
            T::gemm(
                pl,
                g.o,
                ol,
                weight.data(),
                1,
                pl as isize,
                go,
                ol as isize,
                1,
                T::zero(),
                &mut col,
                ol as isize,
                1,
            );
            g.col2im(&col, &mut dx[ni * in_len..(ni + 1) * in_len]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

pub(crate) fn upsample_nearest_forward<T: Element>(input: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if scale == 0 {
        return Err(GradError::shape("upsample", "scale >= 1", "0"));
    }
    let (ho, wo) = (h * scale, w * scale);
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in src.chunks(h * w) {
        for oy in 0..ho {
            let row = &plane[(oy / scale) * w..(oy / scale + 1) * w];
            for ox in 0..wo {
                out.push(row[ox / scale]);
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

pub(crate) fn upsample_nearest_backward<T: Element>(
    in_shape: &[usize],
    grad_out: &[T],
    scale: usize,
) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h * scale, w * scale);
    let planes = in_shape[0] * in_shape[1];
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let go = &grad_out[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = (oy / scale) * w + ox / scale;
                d[i] = d[i] + go[oy * wo + ox];
            }
        }
    }
    dx
}
