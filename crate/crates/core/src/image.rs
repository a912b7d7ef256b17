use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Square 8-bit RGB image, row-major `S x S x 3`. Values read as `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    size: usize,
    rgb: Vec<u8>,
}

impl Image {
    pub fn new(size: usize, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != size * size * 3 {
            return Err(Error::shape(
                "image",
                format!(
                    "{size}x{size}x3 image needs {} bytes, got {}",
                    size * size * 3,
                    rgb.len()
                ),
            ));
        }
        Ok(Self { size, rgb })
    }

    pub fn black(size: usize) -> Self {
        Self {
            size,
            rgb: vec![0; size * size * 3],
        }
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut rgb = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                for c in f(y, x) {
                    rgb.push(quantize(c));
                }
            }
        }
        Self { size, rgb }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bytes(&self) -> &[u8] {
        &self.rgb
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.size + x) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, v: [u8; 3]) {
        let o = (y * self.size + x) * 3;
        self.rgb[o..o + 3].copy_from_slice(&v);
    }

    /// Channel value in `[0, 1]`.
    pub fn value(&self, y: usize, x: usize, c: usize) -> f64 {
        self.rgb[(y * self.size + x) * 3 + c] as f64 / 255.0
    }

    pub fn flipped_horizontal(&self) -> Self {
        let s = self.size;
        let mut out = self.clone();
        for y in 0..s {
            for x in 0..s {
                out.set_pixel(y, x, self.pixel(y, s - 1 - x));
            }
        }
        out
    }

    /// Channel-first `[3, S, S]` tensor.
    pub fn to_chw<T: Real>(&self) -> Tensor<T> {
        let s = self.size;
        let mut data = vec![T::zero(); 3 * s * s];
        let lut: Vec<T> = (0..256).map(|v| T::from_f64(v as f64 / 255.0)).collect();
        for (p, px) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * s * s + p] = lut[px[c] as usize];
            }
        }
        Tensor::new(vec![3, s, s], data).expect("consistent size")
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_layout() {
        let img = Image::new(2, vec![255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 51, 51]).unwrap();
        let t = img.to_chw::<f64>();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(t.at(&[0, 0, 0]), 1.0);
        assert_eq!(t.at(&[1, 0, 1]), 1.0);
        assert_eq!(t.at(&[2, 1, 0]), 1.0);
        assert!((t.at(&[0, 1, 1]) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = Image::from_fn(5, |y, x| [x as f64 / 5.0, y as f64 / 5.0, 0.5]);
        assert_eq!(img.flipped_horizontal().flipped_horizontal(), img);
        assert_eq!(img.flipped_horizontal().pixel(0, 0), img.pixel(0, 4));
    }
}
