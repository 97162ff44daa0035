//! 8-bit PNG ingestion and output for `[3,h,w]` tensors in `[0,1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::backend::Tensor;
use crate::error::{contract, Error, Result};

/// `[0,1]` value to an 8-bit level, rounding half to even.
pub fn to_u8(v: f32) -> u8 {
    let x = v.clamp(0.0, 1.0) * 255.0;
    x.round_ties_even() as u8
}

/// Snaps every value to the nearest representable 8-bit level.
pub fn quantize_8bit(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| to_u8(v) as f32 / 255.0)
}

pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let step = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Parse(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    let bytes = &buf[..info.buffer_size()];
    let mut data = vec![0f32; 3 * h * w];
    for i in 0..h * w {
        let px = &bytes[i * step..(i + 1) * step];
        for c in 0..3 {
            let v = if step <= 2 { px[0] } else { px[c] };
            data[c * h * w + i] = v as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn write_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(contract!("write_png expects 3 channels, got {c}"));
    }
    let d = image.data();
    let mut bytes = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            bytes[i * 3 + ch] = to_u8(d[ch * h * w + i]);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let perr = |e: png::EncodingError| Error::Parse(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(perr)?;
    writer.write_image_data(&bytes).map_err(perr)?;
    writer.finish().map_err(perr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_even_rounding() {
        assert_eq!(to_u8(0.5 / 255.0), 0);
        assert_eq!(to_u8(1.5 / 255.0), 2);
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(2.0), 255);
    }

    #[test]
    fn png_roundtrip_matches_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Tensor::from_fn(&[3, 5, 7], |i| (i as f32 * 0.0137) % 1.0);
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back.shape(), &[3, 5, 7]);
        assert_eq!(back, quantize_8bit(&img));
        assert_eq!(quantize_8bit(&back), back);
    }
}
