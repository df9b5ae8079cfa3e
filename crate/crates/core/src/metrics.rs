//! Quality metrics and Bjøntegaard delta rate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{SSIM_SIGMA, SSIM_WINDOW};
use crate::nn::{Graph, Tensor, Var};

pub const PSNR_CAP: f64 = 100.0;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MS_SSIM_MIN_SIDE: usize = 160;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// `10 log10(1 / MSE)` for `[0, 1]` data, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0f64; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            tmp[y * ow + ox] = (0..n).map(|i| x[y * w + ox + i] * k[i]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| tmp[(oy + i) * ow + ox] * k[i]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of one plane. Planes smaller
/// than the window shrink the window, scaling sigma alike.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let size = SSIM_WINDOW.min(h).min(w);
    let k = kernel(size, SSIM_SIGMA * size as f64 / SSIM_WINDOW as f64);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, _, _) = filter_valid(a, h, w, &k);
    let (mu_b, _, _) = filter_valid(b, h, w, &k);
    let (aa, _, _) = filter_valid(&prod(a, a), h, w, &k);
    let (bb, _, _) = filter_valid(&prod(b, b), h, w, &k);
    let (ab, _, _) = filter_valid(&prod(a, b), h, w, &k);
    let n = mu_a.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let c = (2.0 * cov + C2) / (va + vb + C2);
        cs += c;
        ssim += c * (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
    }
    (ssim / n, cs / n)
}

fn halve(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = 0.25
                * (x[2 * y * w + 2 * xx]
                    + x[2 * y * w + 2 * xx + 1]
                    + x[(2 * y + 1) * w + 2 * xx]
                    + x[(2 * y + 1) * w + 2 * xx + 1]);
        }
    }
    (out, oh, ow)
}

/// Five-scale MS-SSIM, averaged over channels and batch items.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let [n, c, h, w] = a.shape();
    if h.min(w) < MS_SSIM_MIN_SIDE {
        return Err(Error::Dimension(format!(
            "MS-SSIM needs both sides >= {MS_SSIM_MIN_SIDE}, got {w}x{h}"
        )));
    }
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..n * c {
        let mut x: Vec<f64> = a.data()[p * plane..(p + 1) * plane].iter().map(|&v| v as f64).collect();
        let mut y: Vec<f64> = b.data()[p * plane..(p + 1) * plane].iter().map(|&v| v as f64).collect();
        let (mut ph, mut pw) = (h, w);
        let mut score = 1.0;
        for (scale, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (ssim, cs) = ssim_plane(&x, &y, ph, pw);
            let term = if scale == MS_SSIM_WEIGHTS.len() - 1 { ssim } else { cs };
            score *= term.max(0.0).powf(wt);
            if scale + 1 < MS_SSIM_WEIGHTS.len() {
                (x, _, _) = halve(&x, ph, pw);
                (y, ph, pw) = halve(&y, ph, pw);
            }
        }
        total += score;
    }
    Ok(total / (n * c) as f64)
}

/// Differentiable MS-SSIM on the graph. Needs sides divisible by 16 with
/// the coarsest scale at least the window size (so at least 176).
pub fn ms_ssim_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let [_, _, h, w] = g.shape(a);
    assert!(
        h % 16 == 0 && w % 16 == 0 && h / 16 >= SSIM_WINDOW && w / 16 >= SSIM_WINDOW,
        "differentiable MS-SSIM needs 16-divisible sides of at least {}",
        16 * SSIM_WINDOW
    );
    let (mut x, mut y) = (a, b);
    let mut log_score: Option<Var> = None;
    for (scale, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let mu_x = g.blur(x);
        let mu_y = g.blur(y);
        let xx = g.mul(x, x);
        let yy = g.mul(y, y);
        let xy = g.mul(x, y);
        let sxx = g.blur(xx);
        let syy = g.blur(yy);
        let sxy = g.blur(xy);
        let mxx = g.mul(mu_x, mu_x);
        let myy = g.mul(mu_y, mu_y);
        let mxy = g.mul(mu_x, mu_y);
        let vx = g.sub(sxx, mxx);
        let vy = g.sub(syy, myy);
        let cov = g.sub(sxy, mxy);
        let num = g.scale(cov, 2.0);
        let num = g.add_scalar(num, C2 as f32);
        let den = g.add(vx, vy);
        let den = g.add_scalar(den, C2 as f32);
        let mut term = g.div(num, den);
        if scale == MS_SSIM_WEIGHTS.len() - 1 {
            let ln = g.scale(mxy, 2.0);
            let ln = g.add_scalar(ln, C1 as f32);
            let ld = g.add(mxx, myy);
            let ld = g.add_scalar(ld, C1 as f32);
            let l = g.div(ln, ld);
            term = g.mul(term, l);
        }
        // Per-plane mean, rectified, raised to the scale weight.
        let m = g.mean_spatial(term);
        let m = g.relu(m);
        let m = g.pow(m, wt as f32);
        log_score = Some(match log_score {
            None => m,
            Some(s) => g.mul(s, m),
        });
        if scale + 1 < MS_SSIM_WEIGHTS.len() {
            x = g.avg_pool(x, 2);
            y = g.avg_pool(y, 2);
        }
    }
    g.mean_all(log_score.expect("five scales"))
}

// ---- BD-rate ------------------------------------------------------------------

/// Distortion measure a model is trained for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityMetric {
    #[default]
    Mse,
    Msssim,
}

impl QualityMetric {
    pub fn code(self) -> u8 {
        match self {
            QualityMetric::Mse => 0,
            QualityMetric::Msssim => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(QualityMetric::Mse),
            1 => Ok(QualityMetric::Msssim),
            c => Err(Error::Corrupt(format!("unknown metric code {c}"))),
        }
    }

    /// Differentiable distortion: MSE, or `1 - MS-SSIM`.
    pub fn distortion(self, g: &mut Graph, a: Var, b: Var) -> Var {
        match self {
            QualityMetric::Mse => g.mse(a, b),
            QualityMetric::Msssim => {
                let s = ms_ssim_graph(g, a, b);
                g.one_minus(s)
            }
        }
    }
}

impl std::str::FromStr for QualityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" | "psnr" => Ok(QualityMetric::Mse),
            "msssim" | "ms-ssim" => Ok(QualityMetric::Msssim),
            _ => Err(Error::InvalidArgument(format!("unknown quality metric {s:?}"))),
        }
    }
}

impl std::fmt::Display for QualityMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QualityMetric::Mse => "mse",
            QualityMetric::Msssim => "msssim",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BdFit {
    Cubic,
    /// Piecewise cubic Hermite, used when the cubic is not monotone.
    Pchip,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BdRate {
    /// Average rate difference of `test` against `anchor`, in percent.
    pub percent: f64,
    pub fit: BdFit,
    /// Set when either input curve is itself non-monotone in quality.
    pub non_monotone_input: bool,
}

/// One RD curve as `(quality, log10 rate)` samples sorted by quality.
fn curve(points: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    if points.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "BD-rate needs at least 4 points per curve, got {}",
            points.len()
        )));
    }
    let mut c: Vec<(f64, f64)> = points
        .iter()
        .map(|&(rate, q)| {
            if rate > 0.0 && q.is_finite() {
                Ok((q, rate.log10()))
            } else {
                Err(Error::InvalidArgument(format!("invalid RD point ({rate}, {q})")))
            }
        })
        .collect::<Result<_>>()?;
    c.sort_by(|a, b| a.0.total_cmp(&b.0));
    if c.windows(2).any(|w| w[1].0 - w[0].0 <= 0.0) {
        return Err(Error::InvalidArgument("duplicate quality values".into()));
    }
    Ok(c)
}

/// Least-squares cubic `log10 rate = p0 + p1 q + p2 q^2 + p3 q^3`, with `q`
/// centred and scaled for conditioning.
struct Cubic {
    coef: [f64; 4],
    shift: f64,
    scale: f64,
}

impl Cubic {
    fn fit(c: &[(f64, f64)]) -> Self {
        let shift = c.iter().map(|p| p.0).sum::<f64>() / c.len() as f64;
        let scale = c.iter().map(|p| (p.0 - shift).abs()).fold(1e-12, f64::max);
        let a = DMatrix::from_fn(c.len(), 4, |i, j| ((c[i].0 - shift) / scale).powi(j as i32));
        let b = DVector::from_iterator(c.len(), c.iter().map(|p| p.1));
        let x = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .expect("SVD with both factors");
        Cubic {
            coef: [x[0], x[1], x[2], x[3]],
            shift,
            scale,
        }
    }

    fn antiderivative(&self, q: f64) -> f64 {
        let t = (q - self.shift) / self.scale;
        let p = &self.coef;
        self.scale * (p[0] * t + p[1] * t * t / 2.0 + p[2] * t.powi(3) / 3.0 + p[3] * t.powi(4) / 4.0)
    }

    fn integral(&self, lo: f64, hi: f64) -> f64 {
        self.antiderivative(hi) - self.antiderivative(lo)
    }

    /// Whether the derivative keeps one sign on `[lo, hi]`.
    fn monotone(&self, lo: f64, hi: f64) -> bool {
        let p = &self.coef;
        let d = |q: f64| {
            let t = (q - self.shift) / self.scale;
            p[1] + 2.0 * p[2] * t + 3.0 * p[3] * t * t
        };
        let samples: Vec<f64> = (0..=200).map(|i| d(lo + (hi - lo) * i as f64 / 200.0)).collect();
        samples.iter().all(|&v| v >= 0.0) || samples.iter().all(|&v| v <= 0.0)
    }
}

/// Fritsch-Carlson monotone piecewise cubic Hermite interpolant.
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn new(c: &[(f64, f64)]) -> Self {
        let x: Vec<f64> = c.iter().map(|p| p.0).collect();
        let y: Vec<f64> = c.iter().map(|p| p.1).collect();
        let n = x.len();
        let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        for i in 1..n - 1 {
            if delta[i - 1] * delta[i] > 0.0 {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
            let v = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
            if v.signum() != d0.signum() {
                0.0
            } else if d0.signum() != d1.signum() && v.abs() > 3.0 * d0.abs() {
                3.0 * d0
            } else {
                v
            }
        };
        d[0] = end(h[0], h[1], delta[0], delta[1]);
        d[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        Pchip { x, y, d }
    }

    /// Exact integral of the Hermite pieces over `[lo, hi]`.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.x.len() - 1 {
            let (a, b) = (self.x[i].max(lo), self.x[i + 1].min(hi));
            if b <= a {
                continue;
            }
            let h = self.x[i + 1] - self.x[i];
            let piece = |q: f64| {
                // Antiderivative of the Hermite basis in t = (q - x_i) / h.
                let t = (q - self.x[i]) / h;
                let (t2, t3, t4) = (t * t, t * t * t, t * t * t * t);
                let h00 = t4 / 2.0 - t3 + t;
                let h10 = t4 / 4.0 - 2.0 * t3 / 3.0 + t2 / 2.0;
                let h01 = -t4 / 2.0 + t3;
                let h11 = t4 / 4.0 - t3 / 3.0;
                h * (h00 * self.y[i] + h10 * h * self.d[i] + h01 * self.y[i + 1] + h11 * h * self.d[i + 1])
            };
            total += piece(b) - piece(a);
        }
        total
    }
}

fn strictly_monotone(c: &[(f64, f64)]) -> bool {
    c.windows(2).all(|w| w[1].1 > w[0].1) || c.windows(2).all(|w| w[1].1 < w[0].1)
}

/// Average bitrate difference of `test` against `anchor` at equal quality.
/// Points are `(rate, quality)`.
pub fn bd_rate(anchor: &[(f64, f64)], test: &[(f64, f64)]) -> Result<BdRate> {
    let ca = curve(anchor)?;
    let ct = curve(test)?;
    let lo = ca[0].0.max(ct[0].0);
    let hi = ca[ca.len() - 1].0.min(ct[ct.len() - 1].0);
    if hi <= lo {
        return Err(Error::InvalidArgument("quality ranges do not overlap".into()));
    }
    let (pa, pt) = (Cubic::fit(&ca), Cubic::fit(&ct));
    let (fit, diff) = if pa.monotone(lo, hi) && pt.monotone(lo, hi) {
        (BdFit::Cubic, pt.integral(lo, hi) - pa.integral(lo, hi))
    } else {
        let (ha, ht) = (Pchip::new(&ca), Pchip::new(&ct));
        (BdFit::Pchip, ht.integral(lo, hi) - ha.integral(lo, hi))
    };
    let avg = diff / (hi - lo);
    Ok(BdRate {
        percent: (10f64.powf(avg) - 1.0) * 100.0,
        fit,
        non_monotone_input: !(strictly_monotone(&ca) && strictly_monotone(&ct)),
    })
}

/// BD-rate over PSNR for RD points.
pub fn bd_rate_psnr(anchor: &[RdPoint], test: &[RdPoint]) -> Result<BdRate> {
    let f = |p: &[RdPoint]| p.iter().map(|r| (r.bpp, r.psnr)).collect::<Vec<_>>();
    bd_rate(&f(anchor), &f(test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_reference_values() {
        let a = Tensor::full([1, 3, 4, 4], 0.5);
        let b = a.map(|v| v + 1.0 / 255.0);
        assert!((psnr(&a, &b).unwrap() - 48.1308).abs() < 1e-3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn pchip_reproduces_lines_exactly() {
        let c: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
        let p = Pchip::new(&c);
        // Integral of 2q + 1 over [0.5, 3.5].
        assert!((p.integral(0.5, 3.5) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn cubic_fit_interpolates_four_points() {
        let c = vec![(30.0, -1.0), (32.0, -0.7), (35.0, -0.3), (37.0, 0.1)];
        let p = Cubic::fit(&c);
        let eval = |q: f64| {
            let t = (q - p.shift) / p.scale;
            p.coef.iter().enumerate().map(|(j, c)| c * t.powi(j as i32)).sum::<f64>()
        };
        for &(q, v) in &c {
            assert!((eval(q) - v).abs() < 1e-9);
        }
    }
}
