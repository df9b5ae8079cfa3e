//! The complete codec network and its on-disk bundle.
//!
//! Bundle layout: `"TLZW" | u32 header length | JSON header | f32 LE weights`
//! in header order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base::{Downsampler, SuperRes, SCALE};
use crate::canf::{Analyzed, Coded, Compressor, CompressorDims, Mode, LATENT_STRIDE};
use crate::enhance::{MergeNet, Merged, SkipGenerator, SkipInputs, SkipMask};
use crate::error::{Error, Result};
use crate::gop::FrameType;
use crate::interp::{Interpolation, Interpolator};
use crate::metrics::QualityMetric;
use crate::nn::{Builder, Fwd, Graph, ParamStore, Tensor, Var};

pub const BUNDLE_MAGIC: &[u8; 4] = b"TLZW";

/// Rate points per metric, indexed by the container's lambda index.
pub fn lambda_table(metric: QualityMetric) -> [f64; 4] {
    match metric {
        QualityMetric::Mse => [256.0, 512.0, 1024.0, 2048.0],
        QualityMetric::Msssim => [4.0, 8.0, 16.0, 32.0],
    }
}

pub fn lambda_index(metric: QualityMetric, lambda: f64) -> Option<u8> {
    lambda_table(metric).iter().position(|&l| l == lambda).map(|i| i as u8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent: usize,
    pub canf_ch: usize,
    pub hyper: usize,
    pub interp_ch: usize,
    pub ds_ch: usize,
    pub sr_ch: usize,
    pub mfmn_ch: usize,
    pub skip_ch: usize,
    /// Frame-type adaptive modulation in the base-layer compressor.
    pub base_fa: bool,
    #[serde(default)]
    pub skip_inputs: SkipInputs,
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            latent: 128,
            canf_ch: 128,
            hyper: 128,
            interp_ch: 64,
            ds_ch: 32,
            sr_ch: 32,
            mfmn_ch: 64,
            skip_ch: 64,
            base_fa: true,
            skip_inputs: SkipInputs::default(),
        }
    }

    /// Roughly 1/8 of the full channel widths.
    pub fn toy() -> Self {
        ModelConfig {
            latent: 16,
            canf_ch: 16,
            hyper: 16,
            interp_ch: 8,
            ds_ch: 4,
            sr_ch: 4,
            mfmn_ch: 8,
            skip_ch: 8,
            base_fa: true,
            skip_inputs: SkipInputs::default(),
        }
    }

    fn dims(&self) -> CompressorDims {
        CompressorDims {
            ch: self.canf_ch,
            latent: self.latent,
            hyper: self.hyper,
        }
    }
}

/// B-frame inputs must tile the quarter-resolution latent grid exactly.
fn check_b_shape(shape: [usize; 4]) -> Result<()> {
    crate::base::check_downsample_shape(shape)?;
    let m = SCALE * LATENT_STRIDE;
    if !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) {
        return Err(Error::Dimension(format!(
            "B frames need sides divisible by {m}, got {}x{}",
            shape[3], shape[2]
        )));
    }
    Ok(())
}

/// Provenance carried inside a bundle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub lambda: f64,
    pub metric: QualityMetric,
    /// Completed training stages, oldest first.
    pub lineage: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    config: ModelConfig,
    meta: BundleMeta,
    skip_active: bool,
    tensors: Vec<(String, [usize; 4])>,
}

/// Parameter-name prefixes of the separately trained modules.
pub mod groups {
    pub const INTERP: &str = "interp.";
    pub const BASE_DS: &str = "base.ds.";
    pub const BASE_SR: &str = "base.sr.";
    pub const BASE_CANF: &str = "base.canf.";
    pub const BASE_FA: &str = "fa.base.";
    pub const ENH_MFMN: &str = "enh.mfmn.";
    pub const ENH_SKIP: &str = "enh.skip.";
    pub const ENH_CANF: &str = "enh.canf.";
    pub const ENH_FA: &str = "fa.enh.";
    pub const INTRA: &str = "intra.";
}

pub struct Model {
    pub config: ModelConfig,
    pub meta: BundleMeta,
    pub store: ParamStore,
    pub interp: Interpolator,
    pub ds: Downsampler,
    pub sr: SuperRes,
    pub base: Compressor,
    pub mfmn: MergeNet,
    pub skip: SkipGenerator,
    pub enh: Compressor,
    pub intra: Compressor,
    /// Skip coding in the enhancement layer; off until its training stage.
    pub skip_active: bool,
}

/// How far [`Model::forward_b`] runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Interp,
    /// `SR(DS(x))` without compression.
    Resample,
    /// Base layer coded, then super-resolved.
    Base,
    /// Base layer plus the multi-frame merge.
    Merge,
    Full,
}

/// Every intermediate a B-frame pass produces, for losses and statistics.
pub struct BTrace {
    pub interp: Interpolation,
    /// `DS(x)`.
    pub x_ds: Option<Var>,
    /// Base-layer reconstruction at quarter resolution.
    pub base_recon: Option<Var>,
    pub base_y2: Option<Var>,
    pub base_cond: Option<Var>,
    pub base_bits: Option<Var>,
    pub sr: Option<Var>,
    pub merged: Option<Merged>,
    pub skip: Option<SkipMask>,
    pub enh_y2: Option<Var>,
    pub enh_bits: Option<Var>,
    pub recon: Option<Var>,
    pub base_payload: Option<Vec<u8>>,
    pub enh_payload: Option<Vec<u8>>,
}

fn total_bits(g: &mut Graph, c: &Coded) -> Var {
    g.add(c.latent_bits, c.side_bits)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let interp = Interpolator::new(&mut b.sub("interp"), config.interp_ch);
        let ds = Downsampler::new(&mut b.sub("base").sub("ds"), config.ds_ch);
        let sr = SuperRes::new(&mut b.sub("base").sub("sr"), config.sr_ch);
        let base = {
            let mut s = b.sub("base");
            let mut s = s.sub("canf");
            Compressor::new(&mut s.with_fa(config.base_fa), "base.canf", config.dims(), false)
        };
        let mfmn = MergeNet::new(&mut b.sub("enh").sub("mfmn"), config.mfmn_ch);
        let skip = SkipGenerator::new(&mut b.sub("enh").sub("skip"), config.skip_ch, config.latent, config.skip_inputs);
        let enh = {
            let mut s = b.sub("enh");
            let mut s = s.sub("canf");
            Compressor::new(&mut s.with_fa(true), "enh.canf", config.dims(), false)
        };
        let intra = Compressor::new(&mut b.sub("intra"), "intra", config.dims(), false);
        Model {
            config,
            meta: BundleMeta::default(),
            store,
            interp,
            ds,
            sr,
            base,
            mfmn,
            skip,
            enh,
            intra,
            skip_active: false,
        }
    }

    pub fn fwd(&self) -> Fwd<'_> {
        Fwd::new(&self.store)
    }

    fn fa_fwd(&self, ftype: FrameType, on: bool) -> Fwd<'_> {
        self.fwd().with_fa(if on { ftype.fa_slot() } else { None })
    }

    /// Codes an intra frame; `recon` is clamped outside training.
    pub fn code_intra(&self, g: &mut Graph, x: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Coded> {
        let cx = self.fwd();
        let shape = g.shape(x);
        let zero = g.placeholder(shape);
        let a = self.intra.analyze(g, &cx, x, zero, mode, rng)?;
        self.intra.finish(g, &cx, a, zero, None, mode, rng)
    }

    pub fn decode_intra(&self, g: &mut Graph, payload: &[u8], shape: [usize; 4]) -> Result<Var> {
        let cx = self.fwd();
        let zero = g.placeholder(shape);
        let side = self.intra.decode_side(g, &cx, payload, shape)?;
        self.intra.decode_latent(g, &cx, side, zero, None)
    }

    /// Runs the B-frame pipeline for `x` between two decoded references up
    /// to `stage`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_b(
        &self,
        g: &mut Graph,
        x: Var,
        ref_prev: Var,
        ref_next: Var,
        ftype: FrameType,
        mode: Mode,
        stage: Stage,
        rng: &mut ChaCha8Rng,
    ) -> Result<BTrace> {
        let cx = self.fwd();
        check_b_shape(g.shape(x))?;
        let interp = self.interp.forward(g, &cx, ref_prev, ref_next);
        let mut t = BTrace {
            interp,
            x_ds: None,
            base_recon: None,
            base_y2: None,
            base_cond: None,
            base_bits: None,
            sr: None,
            merged: None,
            skip: None,
            enh_y2: None,
            enh_bits: None,
            recon: None,
            base_payload: None,
            enh_payload: None,
        };
        if stage == Stage::Interp {
            return Ok(t);
        }
        let x_ds = self.ds.forward(g, &cx, x);
        t.x_ds = Some(x_ds);
        if stage == Stage::Resample {
            t.sr = Some(self.sr.forward(g, &cx, x_ds));
            return Ok(t);
        }
        let cond = self.ds.forward(g, &cx, t.interp.frame);
        let bcx = self.fa_fwd(ftype, self.config.base_fa);
        let a = self.base.analyze(g, &bcx, x_ds, cond, mode, rng)?;
        let y2 = a.y2;
        let coded = self.base.finish(g, &bcx, a, cond, None, mode, rng)?;
        t.base_y2 = Some(y2);
        t.base_cond = Some(cond);
        t.base_bits = Some(total_bits(g, &coded));
        t.base_recon = Some(coded.recon);
        t.base_payload = coded.payload;
        let sr = self.sr.forward(g, &cx, coded.recon);
        t.sr = Some(sr);
        if stage == Stage::Base {
            return Ok(t);
        }
        let merged = self
            .mfmn
            .forward(g, &cx, sr, t.interp.warped_prev, t.interp.warped_next);
        let x_merged = merged.frame;
        t.merged = Some(merged);
        if stage == Stage::Merge {
            return Ok(t);
        }
        let ecx = self.fa_fwd(ftype, true);
        let a: Analyzed = self.enh.analyze(g, &ecx, x, x_merged, mode, rng)?;
        let skip = self.skip_active.then(|| {
            self.skip
                .forward(g, &cx, t.interp.flow_prev, t.interp.flow_next, x_merged, a.mu, a.sigma)
        });
        let y2 = a.y2;
        let coded = self
            .enh
            .finish(g, &ecx, a, x_merged, skip.as_ref().map(|s| s.mask), mode, rng)?;
        t.skip = skip;
        t.enh_y2 = Some(y2);
        t.enh_bits = Some(total_bits(g, &coded));
        t.recon = Some(coded.recon);
        t.enh_payload = coded.payload;
        Ok(t)
    }

    /// Decodes a B frame from its base and enhancement payloads. Returns the
    /// reconstruction and the regenerated skip mask.
    pub fn decode_b(
        &self,
        g: &mut Graph,
        base_payload: &[u8],
        enh_payload: &[u8],
        ref_prev: Var,
        ref_next: Var,
        ftype: FrameType,
    ) -> Result<(Var, Option<Var>)> {
        let cx = self.fwd();
        let shape = g.shape(ref_prev);
        let interp = self.interp.forward(g, &cx, ref_prev, ref_next);
        let cond = self.ds.forward(g, &cx, interp.frame);
        let bcx = self.fa_fwd(ftype, self.config.base_fa);
        let cs = g.shape(cond);
        let side = self.base.decode_side(g, &bcx, base_payload, cs)?;
        let base_recon = self.base.decode_latent(g, &bcx, side, cond, None)?;
        let sr = self.sr.forward(g, &cx, base_recon);
        let merged = self
            .mfmn
            .forward(g, &cx, sr, interp.warped_prev, interp.warped_next);
        let ecx = self.fa_fwd(ftype, true);
        let side = self.enh.decode_side(g, &ecx, enh_payload, shape)?;
        let mask = self.skip_active.then(|| {
            self.skip
                .forward(g, &cx, interp.flow_prev, interp.flow_next, merged.frame, side.mu, side.sigma)
                .mask
        });
        let recon = self.enh.decode_latent(g, &ecx, side, merged.frame, mask)?;
        Ok((recon, mask))
    }

    /// Shape-only decoder pass for one B frame, for MAC accounting.
    pub fn decode_b_dry(&self, g: &mut Graph, shape: [usize; 4], ftype: FrameType) {
        let cx = self.fwd();
        let ref_prev = g.placeholder(shape);
        let ref_next = g.placeholder(shape);
        let interp = self.interp.forward(g, &cx, ref_prev, ref_next);
        let cond = self.ds.forward(g, &cx, interp.frame);
        let bcx = self.fa_fwd(ftype, self.config.base_fa);
        let cs = g.shape(cond);
        let (mu, _) = self.base.decode_side_dry(g, &bcx, cs);
        let base_recon = self.base.decode_latent_dry(g, &bcx, mu, cond);
        let sr = self.sr.forward(g, &cx, base_recon);
        let merged = self
            .mfmn
            .forward(g, &cx, sr, interp.warped_prev, interp.warped_next);
        let ecx = self.fa_fwd(ftype, true);
        let (mu, sigma) = self.enh.decode_side_dry(g, &ecx, shape);
        if self.skip_active {
            self.skip
                .forward(g, &cx, interp.flow_prev, interp.flow_next, merged.frame, mu, sigma);
        }
        self.enh.decode_latent_dry(g, &ecx, mu, merged.frame);
    }

    pub fn param_count(&self, prefix: &str) -> usize {
        self.store.count_prefix(prefix)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, [usize; 4])> = self
            .store
            .ids()
            .map(|id| (self.store.name(id).to_string(), self.store.get(id).shape()))
            .collect();
        let header = BundleHeader {
            config: self.config,
            meta: self.meta.clone(),
            skip_active: self.skip_active,
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Bundle(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + json.len() + 4 * self.store.total_count());
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for id in self.store.ids() {
            for v in self.store.get(id).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != BUNDLE_MAGIC {
            return Err(Error::Bundle("not a model bundle".into()));
        }
        let n = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let json = bytes
            .get(8..8 + n)
            .ok_or_else(|| Error::Bundle("truncated header".into()))?;
        let header: BundleHeader = serde_json::from_slice(json).map_err(|e| Error::Bundle(e.to_string()))?;
        let mut model = Model::new(header.config, 0);
        model.meta = header.meta;
        model.skip_active = header.skip_active;
        if header.tensors.len() != model.store.len() {
            return Err(Error::Bundle(format!(
                "bundle has {} tensors, architecture expects {}",
                header.tensors.len(),
                model.store.len()
            )));
        }
        let mut pos = 8 + n;
        for (name, shape) in header.tensors {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Bundle(format!("unknown tensor {name}")))?;
            if model.store.get(id).shape() != shape {
                return Err(Error::Bundle(format!("shape mismatch for {name}")));
            }
            let count: usize = shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * count)
                .ok_or_else(|| Error::Bundle(format!("truncated weights for {name}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            *model.store.get_mut(id) = Tensor::from_vec(shape, data);
            pos += 4 * count;
        }
        if pos != bytes.len() {
            return Err(Error::Bundle("trailing bytes after weights".into()));
        }
        Ok(model)
    }
}
