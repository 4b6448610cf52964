//! 8-bit PNG images as `[C, H, W]` tensors in `[-1, 1]`.

use std::path::Path;

use image::{ColorType, DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[-1, 1] → {0..255}`: clamp, then round half up.
pub fn quantize(v: f64) -> u8 {
    let x = (v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0;
    (x + 0.5).floor().min(255.0) as u8
}

/// `{0..255} → [-1, 1]`.
pub fn dequantize(q: u8) -> f64 {
    q as f64 / 255.0 * 2.0 - 1.0
}

/// Quantized bytes, channel-major, of a `[C, H, W]` or `[1, C, H, W]` tensor.
fn to_bytes<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (c, h, w) = match t.shape() {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        s => return Err(shape_err("save_png", format!("expected [C,H,W], got {s:?}"))),
    };
    if c != 1 && c != 3 {
        return Err(shape_err("save_png", format!("{c} channels; PNG output supports 1 or 3")));
    }
    let mut bytes = vec![0u8; c * h * w];
    for (i, v) in t.data().iter().enumerate() {
        let (ch, p) = (i / (h * w), i % (h * w));
        bytes[p * c + ch] = quantize(v.as_f64());
    }
    Ok((c, h, w, bytes))
}

/// Encode a tensor as PNG bytes.
pub fn encode_png<S: Scalar>(t: &Tensor<S>) -> Result<Vec<u8>> {
    let (c, h, w, bytes) = to_bytes(t)?;
    let img = if c == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer"))
    };
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Image(format!("encode: {e}")))?;
    Ok(out.into_inner())
}

/// Decode 8-bit grayscale or RGB PNG bytes.
pub fn decode_png<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Image(format!("decode: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = match img.color() {
        ColorType::L8 => (1, img.into_luma8().into_raw()),
        ColorType::Rgb8 => (3, img.into_rgb8().into_raw()),
        other => return Err(Error::Image(format!("unsupported pixel format {other:?}; need 8-bit gray or RGB"))),
    };
    let mut data = vec![S::zero(); c * h * w];
    for (i, &q) in raw.iter().enumerate() {
        let (p, ch) = (i / c, i % c);
        data[ch * h * w + p] = S::of(dequantize(q));
    }
    Tensor::new(&[c, h, w], data)
}

pub fn save_png<S: Scalar>(t: &Tensor<S>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_png(t)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn load_png<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    decode_png(&bytes).map_err(|e| match e {
        Error::Image(m) => Error::Image(format!("{}: {m}", path.as_ref().display())),
        other => other,
    })
}

/// PSNR in dB between images in `[-1, 1]` (peak-to-peak range 2).
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(10.0 * (4.0 / mse).log10())
}
