use ndiff::Tensor;

/// RGB image, row-major HWC, pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mse(&self, other: &Image) -> f64 {
        let n = self.data.len() as f64;
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
    }

    /// Stack images into a `[B, 3, H, W]` tensor.
    pub fn batch_chw(images: &[&Image]) -> Tensor {
        let (w, h) = (images[0].width, images[0].height);
        let mut out = Vec::with_capacity(images.len() * 3 * w * h);
        for img in images {
            for c in 0..3 {
                out.extend(img.data.iter().skip(c).step_by(3).copied());
            }
        }
        Tensor::new(vec![images.len(), 3, h, w], out).expect("consistent image sizes")
    }

    /// Inverse of [`batch_chw`](Self::batch_chw) for one batch row.
    pub fn from_chw(t: &Tensor, index: usize) -> Self {
        let s = t.shape();
        let (h, w) = (s[2], s[3]);
        let plane = h * w;
        let base = index * 3 * plane;
        let src = t.data();
        let mut data = vec![0.0; 3 * plane];
        for c in 0..3 {
            for p in 0..plane {
                data[p * 3 + c] = src[base + c * plane + p];
            }
        }
        Self { width: w, height: h, data }
    }
}
