//! On-disk formats: PNG frames, Middlebury `.flo`, label maps.

use std::fs;
use std::path::Path;

use gradcore::Tensor;
use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::flowsynth::FlowField;

pub const FLO_MAGIC: f32 = 202021.25;

/// `[-1, 1] -> [0, 255]`
pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// `[0, 255] -> [-1, 1]`
pub fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

fn chw(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] if c == 1 || c == 3 => Ok((c, h, w)),
        [1, c, h, w] if c == 1 || c == 3 => Ok((c, h, w)),
        ref s => Err(Error::dim("frame", "1 or 3 channel CHW", format!("{s:?}"))),
    }
}

/// Write a `CHW` (or single-batch `NCHW`) frame as an 8-bit PNG.
pub fn write_png(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = chw(frame)?;
    let d = frame.data();
    let plane = h * w;
    let res = if c == 1 {
        GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(d[y as usize * w + x as usize])]))
            .save(path)
    } else {
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
        })
        .save(path)
    };
    res.map_err(|e| Error::format(path, e.to_string()))
}

/// Read a PNG as a `CHW` tensor in `[-1, 1]`; grayscale stays one channel,
/// alpha is dropped.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        e => Error::format(path, e.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.into_rgb8();
        let mut out = vec![0f32; 3 * w * h];
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                out[c * w * h + i] = from_u8(p.0[c]);
            }
        }
        Ok(Tensor::from_vec(&[3, h, w], out)?)
    } else {
        let g = img.into_luma8();
        Ok(Tensor::from_vec(&[1, h, w], g.pixels().map(|p| from_u8(p.0[0])).collect())?)
    }
}

pub fn flo_bytes(flow: &FlowField) -> Vec<u8> {
    let (w, h) = (flow.width(), flow.height());
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (dx, dy) in flow.dx().iter().zip(flow.dy()) {
        out.extend_from_slice(&dx.to_le_bytes());
        out.extend_from_slice(&dy.to_le_bytes());
    }
    out
}

pub fn flo_from_bytes(path: &Path, bytes: &[u8]) -> Result<FlowField> {
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|s| s.try_into().unwrap())
            .ok_or_else(|| Error::format(path, format!("truncated .flo header ({} bytes)", bytes.len())))
    };
    let magic = f32::from_le_bytes(word(0)?);
    if magic != FLO_MAGIC {
        return Err(Error::format(path, format!("bad .flo magic {magic}")));
    }
    let w = i32::from_le_bytes(word(1)?);
    let h = i32::from_le_bytes(word(2)?);
    if w < 0 || h < 0 {
        return Err(Error::format(path, format!("negative .flo size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + 8 * w * h;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(".flo length {} does not match {w}x{h} (expected {expected})", bytes.len()),
        ));
    }
    let vals: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let dx = vals.iter().step_by(2).copied().collect();
    let dy = vals.iter().skip(1).step_by(2).copied().collect();
    FlowField::new(w, h, dx, dy)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    fs::write(path, flo_bytes(flow)).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    flo_from_bytes(path, &bytes)
}

/// Debug rendering of a flow field: hue is direction, saturation is
/// magnitude relative to `max_mag` (the field maximum when `None`).
pub fn flow_to_rgb(flow: &FlowField, max_mag: Option<f32>) -> Tensor<f32> {
    let (w, h) = (flow.width(), flow.height());
    let mags: Vec<f32> = flow.dx().iter().zip(flow.dy()).map(|(x, y)| x.hypot(*y)).collect();
    let max = max_mag.unwrap_or_else(|| mags.iter().copied().fold(0.0, f32::max)).max(1e-6);
    let plane = w * h;
    let mut out = vec![0f32; 3 * plane];
    for i in 0..plane {
        let (dx, dy) = (flow.dx()[i], flow.dy()[i]);
        let hue = (dy.atan2(dx) / std::f32::consts::TAU).rem_euclid(1.0) * 6.0;
        let sat = (mags[i] / max).min(1.0);
        let k = |n: f32| {
            let k = (n + hue) % 6.0;
            1.0 - sat * (k.min(4.0 - k)).clamp(0.0, 1.0)
        };
        for (c, v) in [k(5.0), k(3.0), k(1.0)].into_iter().enumerate() {
            out[c * plane + i] = v * 2.0 - 1.0;
        }
    }
    Tensor::from_vec(&[3, h, w], out).expect("sized by construction")
}

/// Per-pixel class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::dim("label map", width * height, ids.len()));
        }
        Ok(LabelMap { width, height, ids })
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }
}

/// Class ids stored directly as gray levels.
pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    GrayImage::from_raw(labels.width as u32, labels.height as u32, labels.ids.clone())
        .expect("label buffer sized by construction")
        .save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        e => Error::format(path, e.to_string()),
    })?;
    let g = img.into_luma8();
    LabelMap::new(g.width() as usize, g.height() as usize, g.into_raw())
}

/// Class colors for label-style images.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            colors: vec![[32, 32, 32], [224, 64, 64], [64, 208, 80], [72, 96, 232]],
        }
    }
}

impl Palette {
    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn color(&self, id: u8) -> Result<[f32; 3]> {
        let c = self.colors.get(id as usize).ok_or(Error::UnknownClass(id))?;
        Ok([from_u8(c[0]), from_u8(c[1]), from_u8(c[2])])
    }

    /// Label map to a `3xHxW` image in `[-1, 1]`.
    pub fn encode(&self, labels: &LabelMap) -> Result<Tensor<f32>> {
        let plane = labels.width * labels.height;
        let mut out = vec![0f32; 3 * plane];
        for (i, &id) in labels.ids.iter().enumerate() {
            let c = self.color(id)?;
            for k in 0..3 {
                out[k * plane + i] = c[k];
            }
        }
        Ok(Tensor::from_vec(&[3, labels.height, labels.width], out)?)
    }

    /// Nearest palette color per pixel; ties go to the lowest id.
    pub fn decode(&self, image: &Tensor<f32>) -> Result<LabelMap> {
        let (c, h, w) = chw(image)?;
        if c != 3 {
            return Err(Error::dim("palette decode", "3 channels", c));
        }
        let colors: Vec<[f32; 3]> = (0..self.len() as u8).map(|i| self.color(i)).collect::<Result<_>>()?;
        let d = image.data();
        let plane = h * w;
        let ids = (0..plane)
            .map(|i| {
                let p = [d[i], d[plane + i], d[2 * plane + i]];
                let mut best = (f32::INFINITY, 0u8);
                for (id, col) in colors.iter().enumerate() {
                    let dist: f32 = (0..3).map(|k| (p[k] - col[k]).powi(2)).sum();
                    if dist < best.0 {
                        best = (dist, id as u8);
                    }
                }
                best.1
            })
            .collect();
        LabelMap::new(w, h, ids)
    }
}

pub fn labels_encode(labels: &LabelMap) -> Result<Tensor<f32>> {
    Palette::default().encode(labels)
}

pub fn labels_decode(image: &Tensor<f32>) -> Result<LabelMap> {
    Palette::default().decode(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flo_header_bytes() {
        let b = flo_bytes(&FlowField::constant(1, 1, 1.5, -2.0));
        assert_eq!(&b[..4], &[0x50, 0x49, 0x45, 0x48]); // "PIEH"
        assert_eq!(&b[4..12], &[1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[12..], &[0, 0, 0xc0, 0x3f, 0, 0, 0, 0xc0]);
    }

    #[test]
    fn flo_rejects_bad_input() {
        let p = Path::new("x.flo");
        let mut b = flo_bytes(&FlowField::zeros(3, 2));
        assert!(flo_from_bytes(p, &b[..b.len() - 1]).is_err());
        assert!(flo_from_bytes(p, &b[..6]).is_err());
        b[0] = 0;
        assert!(flo_from_bytes(p, &b).is_err());
    }

    #[test]
    fn palette_tie_goes_to_lower_id() {
        let pal = Palette::default();
        let (a, b) = (pal.color(1).unwrap(), pal.color(2).unwrap());
        let mid: Vec<f32> = (0..3).map(|k| 0.5 * (a[k] + b[k])).collect();
        let t = Tensor::from_vec(&[3, 1, 1], mid).unwrap();
        assert_eq!(pal.decode(&t).unwrap().ids, vec![1]);
    }

    #[test]
    fn encode_rejects_unknown_class() {
        let l = LabelMap::new(1, 1, vec![9]).unwrap();
        assert!(matches!(labels_encode(&l), Err(Error::UnknownClass(9))));
    }

    #[test]
    fn u8_mapping_endpoints() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(from_u8(0), -1.0);
        assert_eq!(from_u8(255), 1.0);
    }
}
