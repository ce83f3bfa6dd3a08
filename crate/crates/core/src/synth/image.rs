use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    /// Black image.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
            w.write_image_data(&self.pixels).map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(bytes);
        let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Image(format!(
                "expected 8-bit RGB, got {:?} at {:?}",
                info.color_type, info.bit_depth
            )));
        }
        buf.truncate(info.buffer_size());
        Ok(Self {
            width: info.width as usize,
            height: info.height as usize,
            pixels: buf,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }
}

/// Mean absolute per-channel difference scaled to [0, 1].
pub fn identity_distance(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Contract(format!(
            "cannot compare {}×{} with {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let total: u64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| x.abs_diff(y) as u64)
        .sum();
    Ok(total as f64 / (a.pixels.len() as f64 * 255.0))
}

/// Fraction of pixels whose value differs in any channel.
pub fn changed_fraction(a: &Image, b: &Image) -> f64 {
    let changed = a
        .pixels
        .chunks_exact(3)
        .zip(b.pixels.chunks_exact(3))
        .filter(|(x, y)| x != y)
        .count();
    changed as f64 / (a.width * a.height) as f64
}

/// Quality proxy: one minus the fraction of channel values clipped at 0 or
/// 255.
pub fn quality_score(image: &Image) -> f64 {
    let clipped = image.pixels.iter().filter(|&&v| v == 0 || v == 255).count();
    1.0 - clipped as f64 / image.pixels.len() as f64
}

/// Indices of the images whose quality score reaches `threshold`.
pub fn quality_filter(images: &[Image], threshold: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("quality threshold {threshold} outside [0, 1]")));
    }
    Ok((0..images.len())
        .filter(|&i| quality_score(&images[i]) >= threshold)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let mut img = Image::new(5, 3);
        for (i, v) in img.pixels.iter_mut().enumerate() {
            *v = (i * 17 % 256) as u8;
        }
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn distance_extremes_and_symmetry() {
        let black = Image::new(4, 4);
        let white = Image::filled(4, 4, [255; 3]);
        assert_eq!(identity_distance(&black, &black).unwrap(), 0.0);
        assert_eq!(identity_distance(&black, &white).unwrap(), 1.0);
        let mut grey = Image::filled(4, 4, [10, 200, 30]);
        grey.set(1, 2, [0, 0, 0]);
        assert_eq!(
            identity_distance(&grey, &white).unwrap(),
            identity_distance(&white, &grey).unwrap()
        );
        assert!(identity_distance(&black, &Image::new(4, 5)).is_err());
    }

    #[test]
    fn quality_threshold_extremes() {
        let clean = Image::filled(2, 2, [10, 20, 30]);
        let mut clipped = clean.clone();
        clipped.set(0, 0, [255, 20, 30]);
        let imgs = [clean, clipped];
        assert_eq!(quality_filter(&imgs, 0.0).unwrap(), [0, 1]);
        assert_eq!(quality_filter(&imgs, 1.0).unwrap(), [0]);
        assert!(quality_filter(&imgs, 1.5).is_err());
    }
}
