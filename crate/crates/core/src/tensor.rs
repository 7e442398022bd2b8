//! Dense row-major f64 tensors. Everything in the pipeline (rasters, feature
//! maps, parameter blocks) is one of these; shape is dynamic.

use rand::Rng;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Standard-normal fill, Box-Muller over the given generator.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(r * theta.cos());
            if data.len() < n {
                data.push(r * theta.sin());
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "shape mismatch in zip");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value at (row, col) of a 2-D tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        self.data[r * w + c] = v;
    }

    /// Value at (channel, row, col) of a 3-D tensor.
    pub fn at3(&self, ch: usize, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(ch * self.shape[1] + r) * self.shape[2] + c]
    }

    pub fn set3(&mut self, ch: usize, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        debug_assert!(r < h && c < w);
        self.data[(ch * h + r) * w + c] = v;
    }
}

/// Bilinear resize of a 2-D tensor to (out_h, out_w).
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    assert_eq!(src.shape().len(), 2);
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let mut out = Tensor::zeros(&[out_h, out_w]);
    for y in 0..out_h {
        for x in 0..out_w {
            let sy = if out_h > 1 {
                y as f64 * (h - 1) as f64 / (out_h - 1) as f64
            } else {
                0.0
            };
            let sx = if out_w > 1 {
                x as f64 * (w - 1) as f64 / (out_w - 1) as f64
            } else {
                0.0
            };
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            let v = src.at2(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + src.at2(y0, x1) * (1.0 - fy) * fx
                + src.at2(y1, x0) * fy * (1.0 - fx)
                + src.at2(y1, x1) * fy * fx;
            out.set2(y, x, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn construction_and_indexing() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect());
        assert_eq!(t.at2(1, 2), 5.0);
        assert_eq!(t.sum(), 15.0);
    }

    #[test]
    fn randn_is_deterministic_under_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(Tensor::randn(&[4, 4], &mut a), Tensor::randn(&[4, 4], &mut b));
    }

    #[test]
    fn resize_identity() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(resize_bilinear(&t, 2, 2), t);
    }

    #[test]
    fn resize_interpolates_midpoints() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 1.0]);
        let r = resize_bilinear(&t, 1, 3);
        assert!((r.at2(0, 1) - 0.5).abs() < 1e-12);
    }
}
