//! Discretised gaussian and logistic probability masses with derivatives.
//!
//! Shared by the differentiable rate terms in the graph and by the CDF table
//! builders of the entropy coder, so both see the same probabilities.

use std::f64::consts::{LN_2, SQRT_2};

/// Probabilities below this are clamped before taking the logarithm.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Mass of the unit-width bin centred on offset `d` under `N(0, sigma^2)`.
pub fn gaussian_mass(d: f64, sigma: f64) -> f64 {
    let a = d.abs();
    normal_cdf((0.5 - a) / sigma) - normal_cdf((-0.5 - a) / sigma)
}

/// `(bits, d bits/d d, d bits/d sigma)` for one sample.
pub fn gaussian_bits_grad(d: f64, sigma: f64) -> (f64, f64, f64) {
    let mass = gaussian_mass(d, sigma);
    if mass < LIKELIHOOD_FLOOR {
        return (-LIKELIHOOD_FLOOR.log2(), 0.0, 0.0);
    }
    let u1 = (d + 0.5) / sigma;
    let u0 = (d - 0.5) / sigma;
    let (p1, p0) = (normal_pdf(u1), normal_pdf(u0));
    let dm_dd = (p1 - p0) / sigma;
    let dm_ds = -(u1 * p1 - u0 * p0) / sigma;
    let k = -1.0 / (mass * LN_2);
    (-mass.log2(), k * dm_dd, k * dm_ds)
}

/// `-log2` of the gaussian bin mass, floored like the differentiable path.
pub fn gaussian_bits(d: f64, sigma: f64) -> f64 {
    -gaussian_mass(d, sigma).max(LIKELIHOOD_FLOOR).log2()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mass of the unit-width bin centred on offset `d` under a logistic with
/// the given scale.
pub fn logistic_mass(d: f64, scale: f64) -> f64 {
    let a = d.abs();
    sigmoid((0.5 - a) / scale) - sigmoid((-0.5 - a) / scale)
}

/// `(bits, d bits/d d, d bits/d scale)` for one sample.
pub fn logistic_bits_grad(d: f64, scale: f64) -> (f64, f64, f64) {
    let mass = logistic_mass(d, scale);
    if mass < LIKELIHOOD_FLOOR {
        return (-LIKELIHOOD_FLOOR.log2(), 0.0, 0.0);
    }
    let u1 = (d + 0.5) / scale;
    let u0 = (d - 0.5) / scale;
    let (s1, s0) = (sigmoid(u1), sigmoid(u0));
    let (p1, p0) = (s1 * (1.0 - s1), s0 * (1.0 - s0));
    let dm_dd = (p1 - p0) / scale;
    let dm_ds = -(u1 * p1 - u0 * p0) / scale;
    let k = -1.0 / (mass * LN_2);
    (-mass.log2(), k * dm_dd, k * dm_ds)
}

pub fn logistic_bits(d: f64, scale: f64) -> f64 {
    -logistic_mass(d, scale).max(LIKELIHOOD_FLOOR).log2()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_sigma_centre_bin() {
        // -log2(Phi(0.5) - Phi(-0.5)) for sigma = 1.
        let bits = gaussian_bits(0.0, 1.0);
        assert!((bits - 1.385_f64).abs() < 1e-3, "{bits}");
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for &(d, s) in &[(0.3, 0.7), (-1.2, 2.0), (2.5, 0.4), (0.0, 0.11)] {
            let (_, gd, gs) = gaussian_bits_grad(d, s);
            let fd = (gaussian_bits(d + h, s) - gaussian_bits(d - h, s)) / (2.0 * h);
            let fs = (gaussian_bits(d, s + h) - gaussian_bits(d, s - h)) / (2.0 * h);
            assert!((gd - fd).abs() < 1e-4 * (1.0 + fd.abs()), "{gd} {fd}");
            assert!((gs - fs).abs() < 1e-4 * (1.0 + fs.abs()), "{gs} {fs}");
            let (_, ld, ls) = logistic_bits_grad(d, s);
            let fd = (logistic_bits(d + h, s) - logistic_bits(d - h, s)) / (2.0 * h);
            let fs = (logistic_bits(d, s + h) - logistic_bits(d, s - h)) / (2.0 * h);
            assert!((ld - fd).abs() < 1e-4 * (1.0 + fd.abs()));
            assert!((ls - fs).abs() < 1e-4 * (1.0 + fs.abs()));
        }
    }

    #[test]
    fn masses_sum_to_one() {
        for &s in &[0.11, 0.5, 1.0, 3.0] {
            let g: f64 = (-200..=200).map(|i| gaussian_mass(i as f64, s)).sum();
            let l: f64 = (-2000..=2000).map(|i| logistic_mass(i as f64, s)).sum();
            assert!((g - 1.0).abs() < 1e-9);
            assert!((l - 1.0).abs() < 1e-6);
        }
    }
}
