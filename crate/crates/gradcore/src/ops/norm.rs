use crate::element::Element;
use crate::error::{GradError, Result};
use crate::tensor::Tensor;

/// Saved statistics of an instance-norm forward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormCache<T> {
    /// standardized input, same layout as the input
    pub xhat: Vec<T>,
    /// `1 / sqrt(var + eps)` per (sample, channel)
    pub inv_std: Vec<T>,
}

pub(crate) fn instance_norm_forward<T: Element>(
    input: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    if hw < 2 {
        return Err(GradError::shape("instance_norm", "H*W >= 2", format!("{h}x{w}")));
    }
    if gain.numel() != c || bias.numel() != c {
        return Err(GradError::shape(
            "instance_norm",
            format!("gain/bias of length {c}"),
            format!("{:?}/{:?}", gain.shape(), bias.shape()),
        ));
    }
    let count = T::from_usize(hw).unwrap();
    let mut xhat = Vec::with_capacity(input.numel());
    let mut out = Vec::with_capacity(input.numel());
    let mut inv_std = Vec::with_capacity(n * c);
    for (p, plane) in input.data().chunks(hw).enumerate() {
        let ch = p % c;
        let mean = plane.iter().copied().sum::<T>() / count;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let (g, b) = (gain.data()[ch], bias.data()[ch]);
        for &v in plane {
            let xh = (v - mean) * is;
            xhat.push(xh);
            out.push(g * xh + b);
        }
    }
    let out = Tensor::from_vec(input.shape(), out)?;
    Ok((out, NormCache { xhat, inv_std }))
}

pub(crate) struct NormGrads<T> {
    pub input: Vec<T>,
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn instance_norm_backward<T: Element>(
    shape: &[usize],
    gain: &Tensor<T>,
    cache: &NormCache<T>,
    grad_out: &[T],
) -> NormGrads<T> {
    let c = shape[1];
    let hw = shape[2] * shape[3];
    let count = T::from_usize(hw).unwrap();
    let mut dx = vec![T::zero(); grad_out.len()];
    let mut dgain = vec![T::zero(); c];
    let mut dbias = vec![T::zero(); c];
    for (p, go) in grad_out.chunks(hw).enumerate() {
        let ch = p % c;
        let xh = &cache.xhat[p * hw..(p + 1) * hw];
        let g = gain.data()[ch];
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for (&d, &x) in go.iter().zip(xh) {
            sum_dy = sum_dy + d;
            sum_dy_xh = sum_dy_xh + d * x;
        }
        dgain[ch] = dgain[ch] + sum_dy_xh;
        dbias[ch] = dbias[ch] + sum_dy;
        // dx = g * inv_std / N * (N*dy - sum(dy) - xhat * sum(dy*xhat))
        let k = g * cache.inv_std[p] / count;
        let dst = &mut dx[p * hw..(p + 1) * hw];
        for ((slot, &d), &x) in dst.iter_mut().zip(go).zip(xh) {
            *slot = k * (count * d - sum_dy - x * sum_dy_xh);
        }
    }
    NormGrads {
        input: dx,
        gain: dgain,
        bias: dbias,
    }
}
