//! Truncated, renormalized 2-D Gaussian kernels and reflect-boundary
//! convolution over row-major planes.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    sigma: f64,
    radius: usize,
    /// Normalized 1-D profile of length `2·radius + 1`; the 2-D kernel is its
    /// outer product.
    profile: Vec<f64>,
}

/// Continuous 2-D Gaussian density at offset `(x, y)`.
pub fn gaussian_density(x: f64, y: f64, sigma: f64) -> f64 {
    (-(x * x + y * y) / (2.0 * sigma * sigma)).exp() / (2.0 * PI * sigma * sigma)
}

impl GaussianKernel {
    /// Discretizes the density on `[-r, r]²` with `r = ceil(3σ)` and
    /// renormalizes. `σ = 0` yields the single-tap identity kernel.
    pub fn new(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "sigma {sigma} must be finite and non-negative"
            )));
        }
        if sigma == 0.0 {
            return Ok(Self {
                sigma,
                radius: 0,
                profile: vec![1.0],
            });
        }
        let radius = (3.0 * sigma).ceil() as usize;
        let raw: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let x = i as f64 - radius as f64;
                (-(x * x) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        Ok(Self {
            sigma,
            radius,
            profile: raw.into_iter().map(|v| v / sum).collect(),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn profile(&self) -> &[f64] {
        &self.profile
    }

    /// Normalized weight at integer offset `(dx, dy)`; zero outside the
    /// support.
    pub fn weight(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        if dx.abs() > r || dy.abs() > r {
            return 0.0;
        }
        self.profile[(dx + r) as usize] * self.profile[(dy + r) as usize]
    }

    /// Full `(2r+1)²` weight matrix, row-major by `dy` then `dx`.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.side();
        let mut out = Vec::with_capacity(n * n);
        for wy in &self.profile {
            out.extend(self.profile.iter().map(|wx| wx * wy));
        }
        out
    }
}

pub fn gaussian_kernel(sigma: f64) -> Result<GaussianKernel> {
    GaussianKernel::new(sigma)
}

/// Mirror index into `0..n` without repeating the edge element
/// (`-1 → 1`, `n → n-2`), folding repeatedly for offsets wider than `n`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Separable reflect-boundary convolution of an `rows × cols` plane.
pub fn convolve_reflect(plane: &[f64], rows: usize, cols: usize, kernel: &GaussianKernel) -> Vec<f64> {
    debug_assert_eq!(plane.len(), rows * cols);
    if kernel.radius == 0 {
        return plane.to_vec();
    }
    let r = kernel.radius as isize;
    let k = &kernel.profile;
    let mut tmp = vec![0.0; rows * cols];
    for y in 0..rows {
        let row = &plane[y * cols..(y + 1) * cols];
        for x in 0..cols {
            let mut acc = 0.0;
            for (t, w) in k.iter().enumerate() {
                acc += w * row[reflect_index(x as isize + t as isize - r, cols)];
            }
            tmp[y * cols + x] = acc;
        }
    }
    let mut out = vec![0.0; rows * cols];
    for y in 0..rows {
        for (t, w) in k.iter().enumerate() {
            let sy = reflect_index(y as isize + t as isize - r, rows);
            let src = &tmp[sy * cols..(sy + 1) * cols];
            let dst = &mut out[y * cols..(y + 1) * cols];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity_tap() {
        let k = gaussian_kernel(0.0).unwrap();
        assert_eq!(k.weights(), vec![1.0]);
        assert_eq!(k.radius(), 0);
    }

    #[test]
    fn invalid_sigma_rejected() {
        assert!(gaussian_kernel(-0.1).is_err());
        assert!(gaussian_kernel(f64::NAN).is_err());
        assert!(gaussian_kernel(f64::INFINITY).is_err());
    }

    #[test]
    fn unit_sigma_density_and_ratio() {
        assert!((gaussian_density(0.0, 0.0, 1.0) - 0.159_154_9).abs() < 1e-7);
        let k = gaussian_kernel(1.0).unwrap();
        assert_eq!(k.radius(), 3);
        let ratio = k.weight(1, 0) / k.weight(0, 0);
        assert!((ratio - (-0.5f64).exp()).abs() < 1e-14);
        assert!((ratio - 0.606_531).abs() < 1e-6);
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        for sigma in [0.25, 0.5, 1.0, 1.5, 2.0, 5.0] {
            let k = gaussian_kernel(sigma).unwrap();
            let sum: f64 = k.weights().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sigma {sigma}: {sum}");
            let r = k.radius() as isize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let w = k.weight(dx, dy);
                    assert_eq!(w, k.weight(-dx, dy));
                    assert_eq!(w, k.weight(dx, -dy));
                    assert_eq!(w, k.weight(dy, dx));
                }
            }
        }
    }

    #[test]
    fn reflect_does_not_repeat_edge() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        // wider than the axis: keeps folding
        assert_eq!(reflect_index(-3, 2), 1);
        assert_eq!(reflect_index(9, 3), 1);
        assert_eq!(reflect_index(7, 1), 0);
    }
}
