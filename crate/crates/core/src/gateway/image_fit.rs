use std::io::Cursor;

use image::{imageops::FilterType, ImageFormat};

/// Largest image payload sent to an endpoint.
pub const MAX_IMAGE_BYTES: usize = 1 << 20;

/// Returns `png` unchanged if it fits in `max_bytes`, otherwise a
/// downscaled PNG that does.
pub fn fit_image(png: &[u8], max_bytes: usize) -> Result<Vec<u8>, image::ImageError> {
    if png.len() <= max_bytes {
        return Ok(png.to_vec());
    }
    let mut img = image::load_from_memory_with_format(png, ImageFormat::Png)?;
    let mut size = png.len();
    loop {
        let scale = ((max_bytes as f64 / size as f64).sqrt() * 0.9).min(0.9);
        let w = ((img.width() as f64 * scale) as u32).max(1);
        let h = ((img.height() as f64 * scale) as u32).max(1);
        img = img.resize_exact(w, h, FilterType::Triangle);
        let mut out = Vec::new();
        img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
        if out.len() <= max_bytes || (w == 1 && h == 1) {
            return Ok(out);
        }
        size = out.len();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn noisy_png(side: u32) -> Vec<u8> {
        let img = RgbImage::from_fn(side, side, |x, y| {
            let v = x.wrapping_mul(2654435761).wrapping_add(y.wrapping_mul(40503));
            Rgb([v as u8, (v >> 8) as u8, (v >> 16) as u8])
        });
        let mut out = Vec::new();
        img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png).unwrap();
        out
    }

    #[test]
    fn small_images_pass_through() {
        let png = noisy_png(8);
        assert_eq!(fit_image(&png, MAX_IMAGE_BYTES).unwrap(), png);
    }

    #[test]
    fn large_images_shrink_below_limit() {
        let png = noisy_png(256);
        let limit = png.len() / 4;
        let out = fit_image(&png, limit).unwrap();
        assert!(out.len() <= limit);
        let decoded = image::load_from_memory(&out).unwrap();
        assert!(decoded.width() < 256);
    }
}
