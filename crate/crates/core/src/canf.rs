//! Conditional augmented normalizing flow compressor with a hyperprior.
//!
//! Two additive autoencoding steps map `(x, cond)` to a latent `z2` and a
//! residual image `y2`:
//!
//! ```text
//! z1 = enc1(x | cond)          x1 = x  - dec1(z1 | cond')
//! z2 = z1 + enc2(x1 | cond)    x2 = x1 - dec2(z2 | cond')    y2 = x2
//! ```
//!
//! with `cond' = avgpool16(cond)`. Decoding inverts the steps with `x2 := cond`.
//! The same type serves the base layer, the enhancement layer and intra
//! frames (`cond = 0`).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::entropy::cdf::{logistic_table, snap_sigma, SIGMA_MIN};
use crate::entropy::coding::{decode_factorized, decode_gaussian, encode_factorized, encode_gaussian};
use crate::error::{Error, Result};
use crate::nn::layers::{act, Builder, Conv2d, ConvT2d, Fwd, ResBlock};
use crate::nn::{Graph, Init, ParamId, Tensor, Var};

/// Downsampling factor between an image and its latent.
pub const LATENT_STRIDE: usize = 16;
const SYMBOL_LIMIT: f32 = 1.0e6;
/// Fixed gain between the transforms and the latent. Equivalent to a
/// quantisation step of `1 / LATENT_GAIN` in transform units, so an
/// untrained analysis already produces latents that survive rounding.
pub const LATENT_GAIN: f32 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Additive uniform noise stands in for quantisation.
    Train,
    /// Hard quantisation with estimated rates.
    Estimate,
    /// Hard quantisation plus real entropy coding.
    Real,
}

#[derive(Clone, Copy, Debug)]
pub struct CompressorDims {
    pub ch: usize,
    pub latent: usize,
    pub hyper: usize,
}

struct Analysis {
    c: [Conv2d; 4],
    res: ResBlock,
}

impl Analysis {
    fn new(b: &mut Builder, d: CompressorDims) -> Self {
        Analysis {
            c: [
                b.conv_init("conv1", 6, d.ch, 3, 2, Init::He(6 * 9)),
                b.conv_init("conv2", d.ch, d.ch, 3, 2, Init::He(d.ch * 9)),
                b.conv_init("conv3", d.ch, d.ch, 3, 2, Init::He(d.ch * 9)),
                b.conv_init("conv4", d.ch, d.latent, 3, 2, Init::He(d.ch * 9)),
            ],
            res: b.res_block("res", d.latent),
        }
    }

    /// Sees `(x - cond, cond)`, a linear reparametrisation of `(x, cond)`
    /// that exposes the residual the latent has to carry.
    fn forward(&self, g: &mut Graph, cx: &Fwd, x: Var, cond: Var) -> Var {
        let r = g.sub(x, cond);
        let mut h = g.concat(&[r, cond]);
        for (i, c) in self.c.iter().enumerate() {
            h = c.forward(g, cx, h);
            if i < 3 {
                h = act(g, h);
            }
        }
        let h = self.res.forward(g, cx, h);
        g.scale(h, LATENT_GAIN)
    }
}

struct Synthesis {
    head: Conv2d,
    res: ResBlock,
    up: [ConvT2d; 4],
}

impl Synthesis {
    fn new(b: &mut Builder, d: CompressorDims, zero_out: bool) -> Self {
        let out_init = if zero_out {
            Init::Const(0.0)
        } else {
            Init::Uniform(0.1 * (6.0 / (d.ch * 4) as f32).sqrt())
        };
        Synthesis {
            head: b.conv_init("head", d.latent + 3, d.ch, 3, 1, Init::He((d.latent + 3) * 9)),
            res: b.res_block("res", d.ch),
            up: [
                b.tconv_init("up1", d.ch, d.ch, Init::He(d.ch * 4)),
                b.tconv_init("up2", d.ch, d.ch, Init::He(d.ch * 4)),
                b.tconv_init("up3", d.ch, d.ch, Init::He(d.ch * 4)),
                b.tconv_init("up4", d.ch, 3, out_init),
            ],
        }
    }

    fn forward(&self, g: &mut Graph, cx: &Fwd, z: Var, cond_small: Var) -> Var {
        let z = g.scale(z, 1.0 / LATENT_GAIN);
        let h = g.concat(&[z, cond_small]);
        let h = self.head.forward(g, cx, h);
        let h = act(g, h);
        let mut h = self.res.forward(g, cx, h);
        for (i, u) in self.up.iter().enumerate() {
            h = u.forward(g, cx, h);
            if i < 3 {
                h = act(g, h);
            }
        }
        h
    }
}

struct Hyper {
    a: [Conv2d; 3],
    s1: ConvT2d,
    s2: ConvT2d,
    s_out: Conv2d,
    loc: ParamId,
    log_scale: ParamId,
}

impl Hyper {
    fn new(b: &mut Builder, d: CompressorDims) -> Self {
        Hyper {
            a: [
                b.conv("analysis1", d.latent, d.hyper, 3, 1),
                b.conv("analysis2", d.hyper, d.hyper, 3, 2),
                b.conv("analysis3", d.hyper, d.hyper, 3, 2),
            ],
            s1: b.tconv("synthesis1", d.hyper, d.hyper),
            s2: b.tconv("synthesis2", d.hyper, d.hyper),
            s_out: b.conv("synthesis3", d.hyper, 2 * d.latent, 3, 1),
            loc: b.param("prior.loc", [1, d.hyper, 1, 1], Init::Const(0.0)),
            log_scale: b.param("prior.log_scale", [1, d.hyper, 1, 1], Init::Const(0.0)),
        }
    }
}

/// Encoder-side intermediate state between hyperprior and latent coding.
pub struct Analyzed {
    pub z: Var,
    pub y2: Var,
    pub mu: Var,
    pub sigma: Var,
    pub side_bits: Var,
    side_payload: Option<Vec<u8>>,
}

pub struct Coded {
    pub recon: Var,
    /// Quantised latent after skip substitution.
    pub z_hat: Var,
    pub latent_bits: Var,
    pub side_bits: Var,
    /// `[u32 side length][side][latent]`, only in [`Mode::Real`].
    pub payload: Option<Vec<u8>>,
}

/// Decoder-side state after the side information is parsed.
pub struct SideDecoded<'p> {
    pub mu: Var,
    pub sigma: Var,
    latent_bytes: &'p [u8],
}

pub struct Compressor {
    enc1: Analysis,
    dec1: Synthesis,
    enc2: Analysis,
    dec2: Synthesis,
    hyper: Hyper,
    dims: CompressorDims,
    scope: String,
}

fn uniform_noise(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect())
}

fn quantize(v: f32) -> i32 {
    v.clamp(-SYMBOL_LIMIT, SYMBOL_LIMIT).round() as i32
}

impl Compressor {
    /// `zero_coupling` zero-initialises the last layer of both synthesis
    /// transforms so an untrained model reproduces `cond`. The codec uses a
    /// small random init instead: a zero layer blocks the distortion gradient
    /// to every other layer, and the rate term then collapses the latent onto
    /// its mean before the decoder learns to use it.
    pub fn new(b: &mut Builder, scope: &str, dims: CompressorDims, zero_coupling: bool) -> Self {
        Compressor {
            enc1: Analysis::new(&mut b.sub("enc1"), dims),
            dec1: Synthesis::new(&mut b.sub("dec1"), dims, zero_coupling),
            enc2: Analysis::new(&mut b.sub("enc2"), dims),
            dec2: Synthesis::new(&mut b.sub("dec2"), dims, zero_coupling),
            hyper: Hyper::new(&mut b.sub("hyper"), dims),
            dims,
            scope: scope.to_string(),
        }
    }

    pub fn dims(&self) -> CompressorDims {
        self.dims
    }

    /// Latent shape for an `[n, 3, h, w]` input.
    pub fn latent_shape(&self, input: [usize; 4]) -> [usize; 4] {
        [
            input[0],
            self.dims.latent,
            input[2] / LATENT_STRIDE,
            input[3] / LATENT_STRIDE,
        ]
    }

    fn side_shape(&self, input: [usize; 4]) -> [usize; 4] {
        let l = self.latent_shape(input);
        [l[0], self.dims.hyper, l[2].div_ceil(4), l[3].div_ceil(4)]
    }

    fn check_input(&self, g: &Graph, x: Var) {
        let [_, c, h, w] = g.shape(x);
        assert!(
            c == 3 && h % LATENT_STRIDE == 0 && w % LATENT_STRIDE == 0,
            "compressor input {:?} must be 3-channel with sides divisible by {LATENT_STRIDE}",
            g.shape(x)
        );
    }

    /// `(z2, y2)`.
    pub fn flow_forward(&self, g: &mut Graph, cx: &Fwd, x: Var, cond: Var) -> (Var, Var) {
        self.check_input(g, x);
        let small = g.avg_pool(cond, LATENT_STRIDE);
        let z1 = g.scoped("enc1", |g| self.enc1.forward(g, cx, x, cond));
        let d1 = g.scoped("dec1", |g| self.dec1.forward(g, cx, z1, small));
        let x1 = g.sub(x, d1);
        let e2 = g.scoped("enc2", |g| self.enc2.forward(g, cx, x1, cond));
        let z2 = g.add(z1, e2);
        let d2 = g.scoped("dec2", |g| self.dec2.forward(g, cx, z2, small));
        let x2 = g.sub(x1, d2);
        (z2, x2)
    }

    /// Inverts [`Self::flow_forward`] given the latent and the residual image.
    pub fn flow_inverse(&self, g: &mut Graph, cx: &Fwd, z2: Var, y2: Var, cond: Var) -> Var {
        let small = g.avg_pool(cond, LATENT_STRIDE);
        let d2 = g.scoped("dec2", |g| self.dec2.forward(g, cx, z2, small));
        let x1 = g.add(y2, d2);
        let e2 = g.scoped("enc2", |g| self.enc2.forward(g, cx, x1, cond));
        let z1 = g.sub(z2, e2);
        let d1 = g.scoped("dec1", |g| self.dec1.forward(g, cx, z1, small));
        g.add(x1, d1)
    }

    fn synthesize(&self, g: &mut Graph, cx: &Fwd, z_hat: Var, cond: Var, mode: Mode) -> Var {
        let x = self.flow_inverse(g, cx, z_hat, cond, cond);
        if mode == Mode::Train {
            x
        } else {
            g.clamp(x, 0.0, 1.0)
        }
    }

    fn prior(&self, g: &mut Graph, cx: &Fwd, shape: [usize; 4]) -> (Var, Var) {
        let loc = g.param(cx.store, self.hyper.loc);
        let ls = g.param(cx.store, self.hyper.log_scale);
        let ls = g.clamp(ls, -10.0, 10.0);
        let scale = g.exp(ls);
        let scale = g.add_scalar(scale, SIGMA_MIN);
        (g.broadcast(loc, shape), g.broadcast(scale, shape))
    }

    fn prior_tables(&self, cx: &Fwd) -> Vec<crate::entropy::CdfTable> {
        cx.store
            .get(self.hyper.log_scale)
            .data()
            .iter()
            .map(|&ls| logistic_table(ls.clamp(-10.0, 10.0).exp() + SIGMA_MIN))
            .collect()
    }

    /// `(mu, sigma)` for the latent from a quantised side latent.
    fn hyper_synthesis(&self, g: &mut Graph, cx: &Fwd, v_hat: Var, latent: [usize; 4], mode: Mode) -> (Var, Var) {
        let h = &self.hyper;
        let t = h.s1.forward(g, cx, v_hat);
        let t = act(g, t);
        let t = h.s2.forward(g, cx, t);
        let t = act(g, t);
        let t = h.s_out.forward(g, cx, t);
        let t = g.crop(t, latent[2], latent[3]);
        let mu = g.narrow(t, 0, self.dims.latent);
        let raw = g.narrow(t, self.dims.latent, self.dims.latent);
        let raw = g.clamp(raw, -10.0, 10.0);
        let sigma = g.exp(raw);
        let sigma = g.add_scalar(sigma, SIGMA_MIN);
        if mode == Mode::Train || g.is_dry() {
            (mu, sigma)
        } else {
            let snapped = g.value(sigma).map(snap_sigma);
            (mu, g.constant(snapped))
        }
    }

    /// Runs the flow and the hyperprior; the latent itself is not yet
    /// quantised so a skip mask can be derived from `(mu, sigma)`.
    pub fn analyze(&self, g: &mut Graph, cx: &Fwd, x: Var, cond: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Analyzed> {
        let scope = self.scope.clone();
        g.scoped(&scope, |g| self.analyze_inner(g, cx, x, cond, mode, rng))
    }

    fn analyze_inner(&self, g: &mut Graph, cx: &Fwd, x: Var, cond: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Analyzed> {
        let (z, y2) = self.flow_forward(g, cx, x, cond);
        let latent = g.shape(z);
        let v = g.scoped("hyper", |g| {
            let mut v = z;
            for (i, c) in self.hyper.a.iter().enumerate() {
                v = c.forward(g, cx, v);
                if i < 2 {
                    v = act(g, v);
                }
            }
            v
        });
        let side = g.shape(v);
        let (loc, scale) = self.prior(g, cx, side);
        let mut side_payload = None;
        let v_hat = if mode == Mode::Train {
            let noise = g.constant(uniform_noise(side, rng));
            g.add(v, noise)
        } else if g.is_dry() {
            v
        } else {
            let symbols = self.side_symbols(g, cx, v);
            if mode == Mode::Real {
                let plane = side[2] * side[3];
                side_payload = Some(encode_factorized(&symbols, plane, &self.prior_tables(cx))?);
            }
            self.side_from_symbols(g, cx, side, &symbols)
        };
        let side_bits = g.logistic_bits(v_hat, loc, scale);
        let (mu, sigma) = g.scoped("hyper", |g| self.hyper_synthesis(g, cx, v_hat, latent, mode));
        Ok(Analyzed {
            z,
            y2,
            mu,
            sigma,
            side_bits,
            side_payload,
        })
    }

    fn side_symbols(&self, g: &Graph, cx: &Fwd, v: Var) -> Vec<i32> {
        let [_, c, h, w] = g.shape(v);
        let loc = cx.store.get(self.hyper.loc).data();
        let plane = h * w;
        g.value(v)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| quantize(x - loc[(i / plane) % c]))
            .collect()
    }

    fn side_from_symbols(&self, g: &mut Graph, cx: &Fwd, shape: [usize; 4], symbols: &[i32]) -> Var {
        let loc = cx.store.get(self.hyper.loc).data();
        let plane = shape[2] * shape[3];
        let data = symbols
            .iter()
            .enumerate()
            .map(|(i, &s)| s as f32 + loc[(i / plane) % shape[1]])
            .collect();
        g.constant(Tensor::from_vec(shape, data))
    }

    /// Quantises and codes the latent, substituting `mu` where `mask` is 0,
    /// and reconstructs the input.
    #[allow(clippy::too_many_arguments)]
    pub fn finish(
        &self,
        g: &mut Graph,
        cx: &Fwd,
        a: Analyzed,
        cond: Var,
        mask: Option<Var>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Coded> {
        let scope = self.scope.clone();
        g.scoped(&scope, |g| self.finish_inner(g, cx, a, cond, mask, mode, rng))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_inner(
        &self,
        g: &mut Graph,
        cx: &Fwd,
        a: Analyzed,
        cond: Var,
        mask: Option<Var>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Coded> {
        let shape = g.shape(a.z);
        let (z_hat, latent_bits, payload) = if mode == Mode::Train {
            let noise = g.constant(uniform_noise(shape, rng));
            let z_tilde = g.add(a.z, noise);
            let bits = g.gaussian_bits(z_tilde, a.mu, a.sigma, mask);
            (apply_skip(g, z_tilde, a.mu, mask), bits, None)
        } else if g.is_dry() {
            let bits = g.gaussian_bits(a.z, a.mu, a.sigma, mask);
            (apply_skip(g, a.z, a.mu, mask), bits, None)
        } else {
            let keep = mask.map(|m| mask_bools(g.value(m)));
            let mu = g.value(a.mu).data();
            let mut symbols: Vec<i32> = g
                .value(a.z)
                .data()
                .iter()
                .zip(mu)
                .map(|(&z, &m)| quantize(z - m))
                .collect();
            if let Some(k) = &keep {
                for (s, &on) in symbols.iter_mut().zip(k) {
                    if !on {
                        *s = 0;
                    }
                }
            }
            let z_hat = latent_from_symbols(g, a.mu, &symbols);
            let bits = g.gaussian_bits(z_hat, a.mu, a.sigma, mask);
            let payload = if mode == Mode::Real {
                let sigma = g.value(a.sigma).data();
                let latent = encode_gaussian(&symbols, sigma, keep.as_deref())?;
                Some(pack(a.side_payload.as_deref().unwrap_or(&[]), &latent))
            } else {
                None
            };
            (z_hat, bits, payload)
        };
        let recon = self.synthesize(g, cx, z_hat, cond, mode);
        Ok(Coded {
            recon,
            z_hat,
            latent_bits,
            side_bits: a.side_bits,
            payload,
        })
    }

    /// Parses the side information of `payload` and predicts the latent
    /// distribution for an input of shape `input`.
    pub fn decode_side<'p>(&self, g: &mut Graph, cx: &Fwd, payload: &'p [u8], input: [usize; 4]) -> Result<SideDecoded<'p>> {
        let (side_bytes, latent_bytes) = unpack(payload)?;
        let scope = self.scope.clone();
        g.scoped(&scope, |g| {
            let side = self.side_shape(input);
            let plane = side[2] * side[3];
            let len = side.iter().product();
            let symbols = decode_factorized(side_bytes, len, plane, &self.prior_tables(cx))?;
            let v_hat = self.side_from_symbols(g, cx, side, &symbols);
            let (mu, sigma) =
                g.scoped("hyper", |g| self.hyper_synthesis(g, cx, v_hat, self.latent_shape(input), Mode::Real));
            Ok(SideDecoded {
                mu,
                sigma,
                latent_bytes,
            })
        })
    }

    /// Decodes the latent under `mask` and reconstructs the frame.
    pub fn decode_latent(&self, g: &mut Graph, cx: &Fwd, side: SideDecoded, cond: Var, mask: Option<Var>) -> Result<Var> {
        let scope = self.scope.clone();
        g.scoped(&scope, |g| {
            let keep = mask.map(|m| mask_bools(g.value(m)));
            let sigma = g.value(side.sigma).data().to_vec();
            let symbols = decode_gaussian(side.latent_bytes, &sigma, keep.as_deref())?;
            let z_hat = latent_from_symbols(g, side.mu, &symbols);
            Ok(self.synthesize(g, cx, z_hat, cond, Mode::Real))
        })
    }

    /// Shape-only hyperprior decode for complexity profiling; returns `(mu, sigma)`.
    pub fn decode_side_dry(&self, g: &mut Graph, cx: &Fwd, input: [usize; 4]) -> (Var, Var) {
        let scope = self.scope.clone();
        g.scoped(&scope, |g| {
            let v_hat = g.placeholder(self.side_shape(input));
            g.scoped("hyper", |g| self.hyper_synthesis(g, cx, v_hat, self.latent_shape(input), Mode::Real))
        })
    }

    /// Shape-only synthesis for complexity profiling.
    pub fn decode_latent_dry(&self, g: &mut Graph, cx: &Fwd, z_hat: Var, cond: Var) -> Var {
        let scope = self.scope.clone();
        g.scoped(&scope, |g| self.synthesize(g, cx, z_hat, cond, Mode::Real))
    }
}

/// `m * z + (1 - m) * mu`.
pub fn apply_skip(g: &mut Graph, z: Var, mu: Var, mask: Option<Var>) -> Var {
    match mask {
        None => z,
        Some(m) => {
            let d = g.sub(z, mu);
            let kept = g.mul(m, d);
            g.add(mu, kept)
        }
    }
}

pub fn mask_bools(t: &Tensor) -> Vec<bool> {
    t.data().iter().map(|&v| v >= 0.5).collect()
}

fn latent_from_symbols(g: &mut Graph, mu: Var, symbols: &[i32]) -> Var {
    let m = g.value(mu);
    let data = m.data().iter().zip(symbols).map(|(&m, &s)| m + s as f32).collect();
    let t = Tensor::from_vec(m.shape(), data);
    g.constant(t)
}

fn pack(side: &[u8], latent: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + side.len() + latent.len());
    out.extend_from_slice(&(side.len() as u32).to_le_bytes());
    out.extend_from_slice(side);
    out.extend_from_slice(latent);
    out
}

fn unpack(payload: &[u8]) -> Result<(&[u8], &[u8])> {
    if payload.len() < 4 {
        return Err(Error::Truncated("payload shorter than its side-length field".into()));
    }
    let n = u32::from_le_bytes([payload[0], payload[1], payload[2], payload[3]]) as usize;
    let rest = &payload[4..];
    if rest.len() < n {
        return Err(Error::Truncated(format!("side information needs {n} bytes, {} left", rest.len())));
    }
    Ok(rest.split_at(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;

    fn dims() -> CompressorDims {
        CompressorDims { ch: 8, latent: 8, hyper: 4 }
    }

    #[test]
    fn zero_coupling_reproduces_cond() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Compressor::new(&mut Builder::new(&mut store, &mut rng), "c", dims(), true);
        let mut g = Graph::inference();
        let cx = Fwd::new(&store);
        let x = g.constant(Tensor::full([1, 3, 32, 32], 0.7));
        let cond = g.constant(Tensor::full([1, 3, 32, 32], 0.25));
        let a = c.analyze(&mut g, &cx, x, cond, Mode::Real, &mut rng).unwrap();
        let out = c.finish(&mut g, &cx, a, cond, None, Mode::Real, &mut rng).unwrap();
        assert!(g.value(out.recon).data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert!(out.payload.is_some());
    }

    #[test]
    fn pack_round_trip() {
        let p = pack(&[1, 2], &[3, 4, 5]);
        assert_eq!(unpack(&p).unwrap(), (&[1u8, 2][..], &[3u8, 4, 5][..]));
        assert!(unpack(&p[..3]).is_err());
        assert!(unpack(&[9, 0, 0, 0, 1]).is_err());
    }
}
