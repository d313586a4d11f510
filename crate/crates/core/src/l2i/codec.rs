//! Invertible image <-> latent transforms.
//!
//! `Patch` is space-to-depth: every `f × f × 3` patch becomes one latent pixel
//! with `3 f²` channels ordered `(dy, dx, rgb)`, values mapped `v -> 2v - 1`.
//! `Pca` additionally rotates each patch vector into a basis fitted on data
//! (a full-rank orthonormal basis, so it stays exactly invertible).

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::FaceImage;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LatentImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape("latent", height * width * channels, data.len()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    #[default]
    Patch,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Codec {
    Patch {
        factor: usize,
    },
    Pca {
        factor: usize,
        mean: Vec<f64>,
        /// Row-major `d × d`, columns are basis vectors.
        basis: Vec<f64>,
    },
}

impl Codec {
    pub fn patch(factor: usize) -> Self {
        Codec::Patch { factor }
    }

    /// Fits a PCA basis to the shifted patch vectors of `images`.
    pub fn fit_pca(factor: usize, images: &[FaceImage]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyInput("codec fitting images"));
        }
        let patch = Codec::patch(factor);
        let d = 3 * factor * factor;
        let mut mean = vec![0.0; d];
        let mut rows = Vec::new();
        for img in images {
            let lat = patch.encode(img)?;
            for px in lat.data.chunks(d) {
                mean.iter_mut().zip(px).for_each(|(m, v)| *m += v);
                rows.push(px.to_vec());
            }
        }
        let n = rows.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in &rows {
            for i in 0..d {
                let a = r[i] - mean[i];
                for j in i..d {
                    cov[(i, j)] += a * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / n;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = vec![0.0; d * d];
        for (col, &k) in order.iter().enumerate() {
            for row in 0..d {
                basis[row * d + col] = eig.eigenvectors[(row, k)];
            }
        }
        Ok(Codec::Pca { factor, mean, basis })
    }

    pub fn factor(&self) -> usize {
        match self {
            Codec::Patch { factor } | Codec::Pca { factor, .. } => *factor,
        }
    }

    pub fn channels(&self) -> usize {
        3 * self.factor() * self.factor()
    }

    pub fn latent_side(&self, image_size: usize) -> Result<usize> {
        let f = self.factor();
        if f == 0 || image_size == 0 || image_size % f != 0 {
            return Err(Error::shape("image size divisible by codec factor", f, image_size));
        }
        Ok(image_size / f)
    }

    pub fn encode(&self, img: &FaceImage) -> Result<LatentImage> {
        let f = self.factor();
        let side = self.latent_side(img.size())?;
        let c = self.channels();
        let mut data = Vec::with_capacity(side * side * c);
        for r in 0..side {
            for col in 0..side {
                for dy in 0..f {
                    for dx in 0..f {
                        let px = img.get(r * f + dy, col * f + dx);
                        data.extend(px.iter().map(|&v| 2.0 * v as f64 - 1.0));
                    }
                }
            }
        }
        if let Codec::Pca { mean, basis, .. } = self {
            for chunk in data.chunks_mut(c) {
                let centered: Vec<f64> = chunk.iter().zip(mean).map(|(v, m)| v - m).collect();
                for (k, out) in chunk.iter_mut().enumerate() {
                    *out = (0..c).map(|i| basis[i * c + k] * centered[i]).sum();
                }
            }
        }
        LatentImage::new(side, side, c, data)
    }

    /// Inverse of [`Codec::encode`]; values outside `[0, 1]` are clamped.
    pub fn decode(&self, lat: &LatentImage) -> Result<FaceImage> {
        let f = self.factor();
        let c = self.channels();
        if lat.channels != c || lat.height != lat.width {
            return Err(Error::shape("latent channels", c, lat.channels));
        }
        let mut data = lat.data.clone();
        if let Codec::Pca { mean, basis, .. } = self {
            for chunk in data.chunks_mut(c) {
                let coeffs = chunk.to_vec();
                for (i, out) in chunk.iter_mut().enumerate() {
                    *out = mean[i] + (0..c).map(|k| basis[i * c + k] * coeffs[k]).sum::<f64>();
                }
            }
        }
        let size = lat.height * f;
        let mut img = FaceImage::new(size);
        for r in 0..lat.height {
            for col in 0..lat.width {
                let base = (r * lat.width + col) * c;
                for dy in 0..f {
                    for dx in 0..f {
                        let o = base + (dy * f + dx) * 3;
                        let px = [0, 1, 2].map(|k| {
                            let v = (data[o + k] + 1.0) / 2.0;
                            if v.is_finite() { v.clamp(0.0, 1.0) as f32 } else { 0.0 }
                        });
                        img.set(r * f + dy, col * f + dx, px);
                    }
                }
            }
        }
        Ok(img)
    }
}
