use zeromotion::metrics::{bd_rate, bd_rate_psnr, ms_ssim, psnr, BdFit, RdPoint};
use zeromotion::nn::Tensor;

const SIDE: usize = 192;

/// Smooth test image; the same formula generated the reference values.
fn image() -> Tensor {
    let mut data = Vec::with_capacity(3 * SIDE * SIDE);
    for c in 0..3 {
        let c = c as f64;
        for y in 0..SIDE {
            for x in 0..SIDE {
                let (x, y) = (x as f64, y as f64);
                let v = 0.5 + 0.3 * (0.11 * x + 0.07 * y + c).sin() + 0.1 * (0.002 * x * y + 0.5 * c).cos();
                data.push(v as f32);
            }
        }
    }
    Tensor::from_vec([1, 3, SIDE, SIDE], data)
}

fn noisy(a: &Tensor, sigma: f64) -> Tensor {
    let mut out = a.clone();
    let plane = SIDE * SIDE;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane) as f64;
        let (y, x) = (((i % plane) / SIDE) as f64, (i % SIDE) as f64);
        let n = (1.7 * x + 2.3 * y + 0.9 * c).sin() * (0.31 * x - 0.17 * y * y / 7.0 + c).cos();
        *v = (*v as f64 + sigma * n) as f32;
    }
    out
}

#[test]
fn psnr_of_one_code_value_error() {
    let a = Tensor::full([1, 3, 16, 16], 0.25);
    let b = a.map(|v| v + 1.0 / 255.0);
    let p = psnr(&a, &b).unwrap();
    assert!((p - 48.13).abs() < 0.01, "{p}");
    assert_eq!(p, psnr(&b, &a).unwrap());
    assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    assert!(psnr(&a, &Tensor::full([1, 3, 16, 8], 0.0)).is_err());
}

#[test]
fn ms_ssim_matches_reference_values() {
    // tf.image.ssim_multiscale(max_val=1, filter_size=11, filter_sigma=1.5,
    // k1=0.01, k2=0.03) on the same image pair.
    let reference = [(0.01, 0.999_475_78), (0.05, 0.988_358_50), (0.1, 0.963_166_95)];
    let a = image();
    assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let mut last = 1.0;
    for (sigma, want) in reference {
        let b = noisy(&a, sigma);
        let got = ms_ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 2e-4, "sigma {sigma}: {got} vs {want}");
        assert!(got < last, "not decreasing at sigma {sigma}");
        assert!((got - ms_ssim(&b, &a).unwrap()).abs() < 1e-12);
        last = got;
    }
}

#[test]
fn ms_ssim_rejects_small_frames() {
    let a = Tensor::full([1, 3, 128, 256], 0.5);
    assert!(ms_ssim(&a, &a).is_err());
}

/// Trapezoid integration of piecewise-linear log-rate curves over the
/// shared quality range.
fn numeric_bd(anchor: &[(f64, f64)], test: &[(f64, f64)]) -> f64 {
    let curve = |p: &[(f64, f64)]| {
        let mut c: Vec<(f64, f64)> = p.iter().map(|&(r, q)| (q, r.log10())).collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0));
        c
    };
    let (ca, ct) = (curve(anchor), curve(test));
    let at = |c: &[(f64, f64)], q: f64| {
        let i = c.windows(2).position(|w| q <= w[1].0).unwrap_or(c.len() - 2);
        let (a, b) = (c[i], c[i + 1]);
        a.1 + (b.1 - a.1) * (q - a.0) / (b.0 - a.0)
    };
    let lo = ca[0].0.max(ct[0].0);
    let hi = ca.last().unwrap().0.min(ct.last().unwrap().0);
    let steps = 20_000;
    let h = (hi - lo) / steps as f64;
    let mut sum = 0.0;
    for i in 0..=steps {
        let q = lo + h * i as f64;
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
        sum += w * (at(&ct, q) - at(&ca, q));
    }
    100.0 * (10f64.powf(sum * h / (hi - lo)) - 1.0)
}

fn anchor_curve() -> Vec<(f64, f64)> {
    vec![(0.02, 30.1), (0.045, 32.4), (0.09, 34.6), (0.17, 36.5), (0.3, 38.2)]
}

#[test]
fn bd_rate_constant_offsets() {
    let a = anchor_curve();
    let scaled = |k: f64| a.iter().map(|&(r, q)| (r * k, q)).collect::<Vec<_>>();
    for (k, want) in [(1.0, 0.0), (2.0, 100.0), (0.5, -50.0)] {
        let got = bd_rate(&a, &scaled(k)).unwrap().percent;
        let oracle = numeric_bd(&a, &scaled(k));
        assert!((got - want).abs() < 0.1, "k={k}: {got}");
        assert!((got - oracle).abs() < 0.1, "k={k}: {got} vs oracle {oracle}");
    }
}

#[test]
fn bd_rate_tracks_numeric_integration_on_smooth_curves() {
    // log10 rate is exactly linear in quality, so every fit is exact.
    let line = |q0: f64, slope: f64| -> Vec<(f64, f64)> {
        (0..5)
            .map(|i| {
                let q = 30.0 + 2.0 * i as f64;
                (10f64.powf(slope * (q - q0)), q)
            })
            .collect()
    };
    let (a, t) = (line(40.0, 0.12), line(39.0, 0.1));
    let got = bd_rate(&a, &t).unwrap();
    assert_eq!(got.fit, BdFit::Cubic);
    assert!((got.percent - numeric_bd(&a, &t)).abs() < 0.05);
}

#[test]
fn bd_rate_is_approximately_antisymmetric() {
    let a = anchor_curve();
    let t: Vec<(f64, f64)> = a.iter().map(|&(r, q)| (r * 0.8, q + 0.1 * (q - 30.0))).collect();
    let ab = bd_rate(&a, &t).unwrap().percent;
    let ba = bd_rate(&t, &a).unwrap().percent;
    let predicted = -ba / (1.0 + ba / 100.0);
    assert!((ab - predicted).abs() < 0.1, "{ab} vs {predicted}");
}

#[test]
fn bd_rate_errors_and_fallback() {
    let a = anchor_curve();
    assert!(bd_rate(&a[..3], &a).is_err());
    let far: Vec<(f64, f64)> = a.iter().map(|&(r, q)| (r, q + 50.0)).collect();
    assert!(bd_rate(&a, &far).is_err());
    // A wiggly curve the cubic cannot fit monotonically.
    let wiggly = vec![(0.02, 30.0), (0.021, 36.0), (0.2, 36.5), (0.21, 38.0), (0.3, 38.2)];
    let r = bd_rate(&a, &wiggly).unwrap();
    assert!(r.percent.is_finite());
    let points = |c: &[(f64, f64)]| {
        c.iter()
            .map(|&(bpp, psnr)| RdPoint { bpp, psnr, msssim: f64::NAN })
            .collect::<Vec<_>>()
    };
    assert!(bd_rate_psnr(&points(&a), &points(&a)).unwrap().percent.abs() < 1e-9);
}
