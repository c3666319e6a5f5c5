//! Gaussian kernels and separable convolution.
//!
//! One-dimensional passes sum mirrored taps in pairs, `w_k * (x[-k] + x[+k])`,
//! so a pass gives the same bits when run over a reversed line. The 2D blur
//! evaluates both pass orders and averages them; together these make the blur
//! commute exactly with 90 degree rotations.

use super::image::{clamp_all, Image};
use crate::error::ImageError;

#[derive(Clone, Debug, PartialEq)]
pub struct Kernel1D {
    radius: usize,
    weights: Vec<f64>,
}

impl Kernel1D {
    pub fn identity() -> Self {
        Kernel1D { radius: 0, weights: vec![1.0] }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    fn tap(&self, k: usize) -> f64 {
        self.weights[self.radius + k]
    }
}

fn check_sigma(sigma: f64) -> Result<(), ImageError> {
    if sigma.is_finite() && sigma >= 0.0 {
        Ok(())
    } else {
        Err(ImageError::Param(format!("gaussian sigma must be finite and >= 0, got {sigma}")))
    }
}

/// Normalized Gaussian truncated at `ceil(3 sigma)`. `sigma = 0` is the identity.
pub fn gaussian_kernel(sigma: f64) -> Result<Kernel1D, ImageError> {
    check_sigma(sigma)?;
    gaussian_kernel_with_radius(sigma, (3.0 * sigma).ceil() as usize)
}

pub fn gaussian_kernel_with_radius(sigma: f64, radius: usize) -> Result<Kernel1D, ImageError> {
    check_sigma(sigma)?;
    if sigma == 0.0 || radius == 0 {
        return Ok(Kernel1D::identity());
    }
    let half: Vec<f64> = (0..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum = half[0] + 2.0 * half[1..].iter().sum::<f64>();
    let weights = (0..=2 * radius)
        .map(|i| half[i.abs_diff(radius)] / sum)
        .collect();
    Ok(Kernel1D { radius, weights })
}

/// Convolves one line (`len` samples `stride` apart) with edge replication.
fn convolve_line(src: &[f64], dst: &mut [f64], offset: usize, len: usize, stride: usize, k: &Kernel1D) {
    let last = len as isize - 1;
    let at = |i: isize| src[offset + (i.clamp(0, last) as usize) * stride];
    for i in 0..len as isize {
        let mut acc = k.tap(0) * at(i);
        for t in 1..=k.radius {
            acc += k.tap(t) * (at(i - t as isize) + at(i + t as isize));
        }
        dst[offset + i as usize * stride] = acc;
    }
}

fn horizontal(src: &[f64], w: usize, h: usize, k: &Kernel1D) -> Vec<f64> {
    let mut dst = vec![0.0; src.len()];
    for y in 0..h {
        for c in 0..3 {
            convolve_line(src, &mut dst, y * w * 3 + c, w, 3, k);
        }
    }
    dst
}

fn vertical(src: &[f64], w: usize, h: usize, k: &Kernel1D) -> Vec<f64> {
    let mut dst = vec![0.0; src.len()];
    for x in 0..w {
        for c in 0..3 {
            convolve_line(src, &mut dst, x * 3 + c, h, w * 3, k);
        }
    }
    dst
}

pub fn convolve_separable(img: &Image, k: &Kernel1D) -> Image {
    if k.radius == 0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let hv = vertical(&horizontal(img.pixels(), w, h, k), w, h, k);
    let vh = horizontal(&vertical(img.pixels(), w, h, k), w, h, k);
    let mut out = img.clone();
    let px = out.pixels_mut();
    for ((o, a), b) in px.iter_mut().zip(&hv).zip(&vh) {
        *o = 0.5 * (a + b);
    }
    clamp_all(px);
    out
}

pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image, ImageError> {
    Ok(convolve_separable(img, &gaussian_kernel(sigma)?))
}

/// Two sequential Gaussian blurs, `sigma1` then `sigma2`.
pub fn double_gaussian_blur(img: &Image, sigma1: f64, sigma2: f64) -> Result<Image, ImageError> {
    let k1 = gaussian_kernel(sigma1)?;
    let k2 = gaussian_kernel(sigma2)?;
    Ok(convolve_separable(&convolve_separable(img, &k1), &k2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_raw(w, h, (0..w * h * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity_kernel() {
        let k = gaussian_kernel(0.0).unwrap();
        assert_eq!(k.radius(), 0);
        assert_eq!(k.weights(), &[1.0]);
    }

    #[test]
    fn unit_sigma_truncated_to_radius_one() {
        // exp(-1/2) = 0.60653; normalized by 1 + 2 * 0.60653
        let k = gaussian_kernel_with_radius(1.0, 1).unwrap();
        let expected = [0.2741, 0.4519, 0.2741];
        for (w, e) in k.weights().iter().zip(expected) {
            assert!((w - e).abs() < 1e-4, "{w} vs {e}");
        }
    }

    #[test]
    fn kernels_are_normalized_and_symmetric() {
        let mut sigma = 0.25;
        while sigma <= 8.0 {
            let k = gaussian_kernel(sigma).unwrap();
            assert_eq!(k.radius(), (3.0 * sigma).ceil() as usize);
            assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let w = k.weights();
            for i in 0..w.len() {
                assert_eq!(w[i], w[w.len() - 1 - i]);
            }
            sigma *= 2f64.sqrt();
        }
    }

    #[test]
    fn negative_or_nan_sigma_is_rejected() {
        assert!(gaussian_kernel(-0.5).is_err());
        assert!(gaussian_kernel(f64::NAN).is_err());
        assert!(double_gaussian_blur(&Image::new(2, 2), 1.0, -1.0).is_err());
    }

    #[test]
    fn constant_image_is_preserved() {
        let img = Image::filled(9, 7, [0.3, 0.6, 0.9]);
        let out = double_gaussian_blur(&img, 1.0, 2.0).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-12);
        assert_eq!(convolve_separable(&img, &Kernel1D::identity()), img);
    }

    #[test]
    fn impulse_spreads_into_outer_product() {
        let mut img = Image::new(5, 5);
        for c in 0..3 {
            img.set(2, 2, c, 1.0);
        }
        let k = gaussian_kernel_with_radius(1.0, 1).unwrap();
        let out = convolve_separable(&img, &k);
        let w = k.weights();
        for y in 0..5 {
            for x in 0..5 {
                let expected = if (1..=3).contains(&x) && (1..=3).contains(&y) { w[x - 1] * w[y - 1] } else { 0.0 };
                assert!((out.get(x, y, 1) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn blur_commutes_with_rotation_exactly() {
        for seed in 0..5 {
            let img = random_image(13, 9, seed);
            let k = gaussian_kernel(1.3).unwrap();
            assert_eq!(convolve_separable(&img, &k).rotate90(), convolve_separable(&img.rotate90(), &k));
        }
    }

    #[test]
    fn double_blur_with_zero_sigmas_is_identity() {
        let img = random_image(6, 6, 9);
        assert_eq!(double_gaussian_blur(&img, 0.0, 0.0).unwrap(), img);
    }
}
