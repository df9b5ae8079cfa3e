//! Staged training: loss formulas, freezing schedule, plateau learning-rate
//! decay and rate-point fine-tuning.
//!
//! Rates are bits per full-resolution pixel. Sub-steps that carry a rate term
//! weight distortion by `lambda`; pure-distortion sub-steps use `D` alone.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canf::{Mode, LATENT_STRIDE};
use crate::data::{augment, triplet, triplet_sampler, SyntheticClips, TrainingClip, CLIP_LEN};
use crate::error::{Error, Result};
use crate::gop::FrameType;
use crate::metrics::{psnr_from_mse, QualityMetric};
use crate::model::{groups, Model, Stage};
use crate::nn::{Adam, Graph, Tensor, Var};

/// Weight of the auxiliary distortions relative to `lambda`.
pub const AUX_WEIGHT: f64 = 0.01;

/// One sub-step of the schedule. Phases 2 and 3 have three each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    /// Intra compressor, trained before the B-frame phases.
    Intra,
    Interp,
    Resample,
    BaseCode,
    BaseJoint,
    Merge,
    Enhance,
    Skip,
    Joint,
}

impl Step {
    pub const ALL: [Step; 9] = [
        Step::Intra,
        Step::Interp,
        Step::Resample,
        Step::BaseCode,
        Step::BaseJoint,
        Step::Merge,
        Step::Enhance,
        Step::Skip,
        Step::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::Intra => "intra",
            Step::Interp => "1",
            Step::Resample => "2.1",
            Step::BaseCode => "2.2",
            Step::BaseJoint => "2.3",
            Step::Merge => "3.1",
            Step::Enhance => "3.2",
            Step::Skip => "3.3",
            Step::Joint => "4",
        }
    }

    pub fn phase(self) -> u8 {
        match self {
            Step::Intra => 0,
            Step::Interp => 1,
            Step::Resample | Step::BaseCode | Step::BaseJoint => 2,
            Step::Merge | Step::Enhance | Step::Skip => 3,
            Step::Joint => 4,
        }
    }

    /// Parameter prefixes updated in this step; everything else is frozen.
    pub fn trained(self) -> &'static [&'static str] {
        use groups::*;
        match self {
            Step::Intra => &[INTRA],
            Step::Interp => &[INTERP],
            Step::Resample => &[BASE_DS, BASE_SR],
            Step::BaseCode => &[BASE_CANF, BASE_FA],
            Step::BaseJoint => &[BASE_DS, BASE_SR, BASE_CANF, BASE_FA],
            Step::Merge => &[ENH_MFMN],
            Step::Enhance => &[ENH_MFMN, ENH_CANF, ENH_FA],
            Step::Skip => &[ENH_MFMN, ENH_CANF, ENH_FA, ENH_SKIP],
            Step::Joint => &[INTERP, BASE_DS, BASE_SR, BASE_CANF, BASE_FA, ENH_MFMN, ENH_CANF, ENH_FA, ENH_SKIP],
        }
    }

    fn stage(self) -> Stage {
        match self {
            Step::Intra | Step::Interp => Stage::Interp,
            Step::Resample => Stage::Resample,
            Step::BaseCode | Step::BaseJoint => Stage::Base,
            Step::Merge => Stage::Merge,
            Step::Enhance | Step::Skip | Step::Joint => Stage::Full,
        }
    }

    fn uses_skip(self) -> bool {
        matches!(self, Step::Skip | Step::Joint)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Distortion of the step's target pair.
    pub d: f64,
    /// Base-layer rate (bpp).
    pub r_b: f64,
    /// Enhancement-layer rate (bpp); the intra rate in [`Step::Intra`].
    pub r_e: f64,
    pub aux: f64,
    pub total: f64,
}

/// Measured components a step's formula consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossInputs {
    pub d: Option<f64>,
    pub r_b: Option<f64>,
    pub r_e: Option<f64>,
    /// `D(y2, x')`, `D(x', x)`, `D(SR, x)`.
    pub aux: Option<[f64; 3]>,
}

fn need(v: Option<f64>, what: &str, step: Step) -> Result<f64> {
    v.ok_or_else(|| Error::InvalidArgument(format!("step {} needs {what}", step.name())))
}

/// Evaluates the step's loss formula:
///
/// | step | total |
/// |---|---|
/// | 1, 2.1, 3.1 | `D` |
/// | 2.2, 2.3 | `lambda D + R_b` |
/// | 3.2, 3.3 | `lambda D + R_b + R_e` |
/// | 4 | `lambda D + epsilon R_b + R_e + Aux` |
/// | intra | `lambda D + R_e` |
///
/// with `Aux = 0.01 lambda (D(y2, x') + D(x', x) + D(SR, x))`.
pub fn loss_phase(step: Step, lambda: f64, epsilon: f64, inp: &LossInputs) -> Result<LossTerms> {
    let d = need(inp.d, "a distortion", step)?;
    let mut t = LossTerms { d, ..LossTerms::default() };
    match step {
        Step::Interp | Step::Resample | Step::Merge => t.total = d,
        Step::BaseCode | Step::BaseJoint => {
            t.r_b = need(inp.r_b, "a base rate", step)?;
            t.total = lambda * d + t.r_b;
        }
        Step::Enhance | Step::Skip => {
            t.r_b = need(inp.r_b, "a base rate", step)?;
            t.r_e = need(inp.r_e, "an enhancement rate", step)?;
            t.total = lambda * d + t.r_b + t.r_e;
        }
        Step::Joint => {
            t.r_b = need(inp.r_b, "a base rate", step)?;
            t.r_e = need(inp.r_e, "an enhancement rate", step)?;
            let a = inp
                .aux
                .ok_or_else(|| Error::InvalidArgument("step 4 needs the auxiliary distortions".into()))?;
            t.aux = (a[0] + a[1] + a[2]) * AUX_WEIGHT * lambda;
            t.total = lambda * d + epsilon * t.r_b + t.r_e + t.aux;
        }
        Step::Intra => {
            t.r_e = need(inp.r_e, "an intra rate", step)?;
            t.total = lambda * d + t.r_e;
        }
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub metric: QualityMetric,
    pub lr: f64,
    pub batch: usize,
    /// Epochs for phases 1 to 4.
    pub epochs: [usize; 4],
    pub intra_epochs: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    /// Square training crop side.
    pub crop: usize,
    pub validate_every: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Largest temporal distance sampled for training triplets.
    pub max_k: usize,
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 2048.0,
            epsilon: 4.0,
            metric: QualityMetric::Mse,
            lr: 1e-4,
            batch: 8,
            epochs: [5, 5, 5, 25],
            intra_epochs: 5,
            finetune_epochs: 5,
            seed: 0,
            crop: 256,
            validate_every: 500,
            plateau_patience: 3,
            plateau_factor: 0.5,
            max_k: 3,
            log_path: None,
            checkpoint_dir: None,
        }
    }
}

/// One training or validation example set, stacked along the batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub prev: Tensor,
    pub cur: Tensor,
    pub next: Tensor,
    pub frame_type: FrameType,
}

impl Batch {
    pub fn pixels(&self) -> f64 {
        let [n, _, h, w] = self.cur.shape();
        (n * h * w) as f64
    }
}

pub struct Dataset {
    pub train: Vec<TrainingClip>,
    /// Fixed validation batches, one per temporal distance.
    pub val: Vec<Batch>,
}

fn frame_type_for(k: usize) -> FrameType {
    if k == 1 {
        FrameType::BNonref
    } else {
        FrameType::BRef
    }
}

impl Dataset {
    /// Validation batches use centred triplets of centre-cropped clips.
    pub fn new(train: Vec<TrainingClip>, val_clips: &[TrainingClip], crop: usize, max_k: usize) -> Result<Self> {
        if train.is_empty() || val_clips.is_empty() {
            return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
        }
        let mut val = Vec::new();
        for k in 1..=max_k {
            let mut items = Vec::new();
            for clip in val_clips {
                let x0 = (clip.width() - crop.min(clip.width())) / 2;
                let y0 = (clip.height() - crop.min(clip.height())) / 2;
                let aug = crate::data::Augmentation {
                    x0,
                    y0,
                    size: crop,
                    flip_h: false,
                    flip_v: false,
                };
                let c = aug.apply(clip)?;
                items.push(triplet(&c, k, CLIP_LEN / 2)?);
            }
            val.push(stack(&items, frame_type_for(k)));
        }
        Ok(Dataset { train, val })
    }

    /// `count` training clips plus `val_count` held-out clips.
    pub fn synthetic(count: usize, val_count: usize, side: usize, crop: usize, max_k: usize, seed: u64) -> Result<Self> {
        let src = SyntheticClips {
            count: count + val_count,
            width: side,
            height: side,
            seed,
        };
        let train = (0..count).map(|i| src.clip(i)).collect();
        let val: Vec<TrainingClip> = (count..count + val_count).map(|i| src.clip(i)).collect();
        Dataset::new(train, &val, crop, max_k)
    }

    fn sample(&self, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let k = rng.random_range(1..=cfg.max_k);
        let mut items = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let clip = &self.train[rng.random_range(0..self.train.len())];
            let c = augment(clip, rng.random(), cfg.crop)?;
            items.push(triplet_sampler(&c, k, rng)?);
        }
        Ok(stack(&items, frame_type_for(k)))
    }
}

fn stack(items: &[(crate::data::Frame, crate::data::Frame, crate::data::Frame)], frame_type: FrameType) -> Batch {
    let pick = |f: fn(&(crate::data::Frame, crate::data::Frame, crate::data::Frame)) -> &crate::data::Frame| {
        Tensor::stack(&items.iter().map(|t| f(t).data.clone()).collect::<Vec<_>>())
    };
    Batch {
        prev: pick(|t| &t.0),
        cur: pick(|t| &t.1),
        next: pick(|t| &t.2),
        frame_type,
    }
}

/// Builds the step's loss in the graph and reports its terms.
pub fn step_loss(
    model: &Model,
    g: &mut Graph,
    batch: &Batch,
    step: Step,
    cfg: &TrainConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossTerms)> {
    let metric = cfg.metric;
    let x = g.constant(batch.cur.clone());
    let px = batch.pixels() as f32;
    let bpp = |g: &mut Graph, bits: Var| g.scale(bits, 1.0 / px);
    let mut parts = LossParts::default();
    if step == Step::Intra {
        let coded = model.code_intra(g, x, mode, rng)?;
        let bits = g.add(coded.latent_bits, coded.side_bits);
        parts.d = Some(metric.distortion(g, coded.recon, x));
        parts.r_e = Some(bpp(g, bits));
    } else {
        let rp = g.constant(batch.prev.clone());
        let rn = g.constant(batch.next.clone());
        let t = model.forward_b(g, x, rp, rn, batch.frame_type, mode, step.stage(), rng)?;
        match step {
            Step::Interp => parts.d = Some(metric.distortion(g, t.interp.frame, x)),
            Step::Resample => parts.d = Some(metric.distortion(g, t.sr.expect("sr"), x)),
            Step::BaseCode => {
                let target = g.detach(t.x_ds.expect("ds"));
                parts.d = Some(metric_lowres(g, metric, t.base_recon.expect("base"), target));
                parts.r_b = Some(bpp(g, t.base_bits.expect("base bits")));
            }
            Step::BaseJoint => {
                parts.d = Some(metric.distortion(g, t.sr.expect("sr"), x));
                parts.r_b = Some(bpp(g, t.base_bits.expect("base bits")));
            }
            Step::Merge => parts.d = Some(metric.distortion(g, t.merged.as_ref().expect("merge").frame, x)),
            Step::Enhance | Step::Skip | Step::Joint => {
                parts.d = Some(metric.distortion(g, t.recon.expect("recon"), x));
                parts.r_b = Some(bpp(g, t.base_bits.expect("base bits")));
                parts.r_e = Some(bpp(g, t.enh_bits.expect("enh bits")));
                if step == Step::Joint {
                    let xm = t.merged.as_ref().expect("merge").frame;
                    parts.aux = Some([
                        metric.distortion(g, t.enh_y2.expect("y2"), xm),
                        metric.distortion(g, xm, x),
                        metric.distortion(g, t.sr.expect("sr"), x),
                    ]);
                }
            }
            Step::Intra => unreachable!(),
        }
    }
    parts.combine(g, step, cfg)
}

/// MS-SSIM needs larger planes than the quarter-resolution base layer has,
/// so low-resolution distortion falls back to MSE there.
fn metric_lowres(g: &mut Graph, metric: QualityMetric, a: Var, b: Var) -> Var {
    let [_, _, h, w] = g.shape(a);
    if metric == QualityMetric::Msssim && h.min(w) >= 176 {
        metric.distortion(g, a, b)
    } else {
        g.mse(a, b)
    }
}

#[derive(Default)]
struct LossParts {
    d: Option<Var>,
    r_b: Option<Var>,
    r_e: Option<Var>,
    aux: Option<[Var; 3]>,
}

impl LossParts {
    fn combine(self, g: &mut Graph, step: Step, cfg: &TrainConfig) -> Result<(Var, LossTerms)> {
        let val = |g: &Graph, v: Option<Var>| v.map(|v| g.scalar_value(v));
        let inputs = LossInputs {
            d: val(g, self.d),
            r_b: val(g, self.r_b),
            r_e: val(g, self.r_e),
            aux: self.aux.map(|a| a.map(|v| g.scalar_value(v))),
        };
        let terms = loss_phase(step, cfg.lambda, cfg.epsilon, &inputs)?;
        let d = self.d.expect("checked by loss_phase");
        let lam = cfg.lambda as f32;
        let mut total = match step {
            Step::Interp | Step::Resample | Step::Merge => d,
            _ => g.scale(d, lam),
        };
        if let Some(rb) = self.r_b {
            let rb = if step == Step::Joint { g.scale(rb, cfg.epsilon as f32) } else { rb };
            total = g.add(total, rb);
        }
        if let Some(re) = self.r_e {
            total = g.add(total, re);
        }
        if let Some([a, b, c]) = self.aux {
            let s = g.add(a, b);
            let s = g.add(s, c);
            let s = g.scale(s, (AUX_WEIGHT * cfg.lambda) as f32);
            total = g.add(total, s);
        }
        Ok((total, terms))
    }
}

/// Learning-rate decay on validation plateaus.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Plateau {
            factor,
            patience,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Records a validation loss; returns the multiplier for the learning
    /// rate (1 unless `patience` rounds passed without improvement).
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
            1.0
        } else {
            self.bad += 1;
            if self.bad > self.patience {
                self.bad = 0;
                self.factor
            } else {
                1.0
            }
        }
    }
}

/// Fires when the validation loss improves by less than `rel` over each of
/// `rounds` consecutive validations.
#[derive(Clone, Debug)]
pub struct Convergence {
    pub rel: f64,
    pub rounds: usize,
    last: Option<f64>,
    slow: usize,
}

impl Convergence {
    pub fn new(rel: f64, rounds: usize) -> Self {
        Convergence {
            rel,
            rounds,
            last: None,
            slow: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> bool {
        if let Some(prev) = self.last {
            if prev - loss < self.rel * prev.abs() {
                self.slow += 1;
            } else {
                self.slow = 0;
            }
        }
        self.last = Some(loss);
        self.slow >= self.rounds
    }
}

/// Outcome of one sub-step.
#[derive(Clone, Debug, Serialize)]
pub struct StepReport {
    pub step: Step,
    pub iterations: usize,
    /// Validation loss before the first and after the last update.
    pub val_start: f64,
    pub val_end: f64,
    pub final_lr: f64,
    /// Every parameter outside [`Step::trained`] kept its exact bits.
    pub frozen_unchanged: bool,
}

/// JSON-lines training log.
pub struct TrainLog {
    out: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn open(path: Option<&std::path::Path>) -> Result<Self> {
        let out = match path {
            None => None,
            Some(p) => Some(BufWriter::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?,
            )),
        };
        Ok(TrainLog { out })
    }

    fn write(&mut self, record: serde_json::Value) -> Result<()> {
        if let Some(w) = &mut self.out {
            writeln!(w, "{record}").map_err(|e| Error::io("training log", e))?;
            w.flush().map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// Mean validation loss of `step` over the fixed validation batches.
pub fn validate(model: &Model, data: &Dataset, step: Step, cfg: &TrainConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sum = 0.0;
    for b in &data.val {
        let mut g = Graph::inference();
        let (_, terms) = step_loss(model, &mut g, b, step, cfg, Mode::Estimate, &mut rng)?;
        sum += terms.total;
    }
    Ok(sum / data.val.len() as f64)
}

fn snapshot_frozen(model: &Model, step: Step) -> Vec<(usize, Vec<u32>)> {
    let trained = step.trained();
    model
        .store
        .ids()
        .enumerate()
        .filter(|(_, id)| !trained.iter().any(|p| model.store.name(*id).starts_with(p)))
        .map(|(i, id)| (i, model.store.get(id).data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn frozen_intact(model: &Model, before: &[(usize, Vec<u32>)]) -> bool {
    let ids: Vec<_> = model.store.ids().collect();
    before.iter().all(|(i, bits)| {
        model
            .store
            .get(ids[*i])
            .data()
            .iter()
            .map(|v| v.to_bits())
            .eq(bits.iter().copied())
    })
}

fn set_trainable(model: &mut Model, step: Step) {
    model.store.set_all_trainable(false);
    for p in step.trained() {
        model.store.set_trainable_prefix(p, true);
    }
}

/// Trains `step` for at most `iterations` updates, stopping early when
/// `stop` fires on a validation round.
pub fn run_step(
    model: &mut Model,
    data: &Dataset,
    step: Step,
    cfg: &TrainConfig,
    iterations: usize,
    mut stop: Option<Convergence>,
    log: &mut TrainLog,
) -> Result<StepReport> {
    if step.uses_skip() {
        model.skip_active = true;
    }
    set_trainable(model, step);
    let frozen = snapshot_frozen(model, step);
    let mut opt = Adam::new(cfg.lr);
    let mut plateau = Plateau::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (step as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407));
    let val_start = validate(model, data, step, cfg)?;
    log.write(serde_json::json!({"kind": "val", "step": step.name(), "iter": 0, "loss": val_start, "lr": opt.lr}))?;
    let mut val_end = val_start;
    let spe = steps_per_epoch(data, cfg);
    let mut done = 0;
    while done < iterations {
        let batch = data.sample(cfg, &mut rng)?;
        let mut g = Graph::new();
        let (loss, terms) = step_loss(model, &mut g, &batch, step, cfg, Mode::Train, &mut rng)?;
        if !terms.total.is_finite() {
            return Err(Error::Diverged {
                phase: step.name().to_string(),
                step: done,
            });
        }
        let grads = g.backward(loss);
        drop(g);
        opt.step(&mut model.store, grads.params());
        done += 1;
        log.write(serde_json::json!({
            "kind": "train", "step": step.name(), "iter": done,
            "d": terms.d, "r_b": terms.r_b, "r_e": terms.r_e, "aux": terms.aux,
            "total": terms.total, "lr": opt.lr,
        }))?;
        let validate_now = done % cfg.validate_every == 0 || done == iterations;
        if validate_now {
            val_end = validate(model, data, step, cfg)?;
            if !val_end.is_finite() {
                return Err(Error::Diverged {
                    phase: step.name().to_string(),
                    step: done,
                });
            }
            opt.lr *= plateau.observe(val_end);
            log.write(serde_json::json!({"kind": "val", "step": step.name(), "iter": done, "loss": val_end, "lr": opt.lr}))?;
            if stop.as_mut().is_some_and(|s| s.observe(val_end)) {
                break;
            }
        }
        if done % spe == 0 {
            checkpoint(model, cfg, step)?;
        }
    }
    checkpoint(model, cfg, step)?;
    model.meta.lineage.push(step.name().to_string());
    model.meta.lambda = cfg.lambda;
    model.meta.metric = cfg.metric;
    model.store.set_all_trainable(true);
    Ok(StepReport {
        step,
        iterations: done,
        val_start,
        val_end,
        final_lr: opt.lr,
        frozen_unchanged: frozen_intact(model, &frozen),
    })
}

fn checkpoint(model: &Model, cfg: &TrainConfig, step: Step) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.save(&dir.join(format!("step-{}.tlzw", step.name())))?;
    }
    Ok(())
}

pub fn steps_per_epoch(data: &Dataset, cfg: &TrainConfig) -> usize {
    data.train.len().div_ceil(cfg.batch).max(1)
}

/// Intra stage, then phases 1 to 4 with their sub-step budgets.
pub fn train_all(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<StepReport>> {
    let mut log = TrainLog::open(cfg.log_path.as_deref())?;
    let spe = steps_per_epoch(data, cfg);
    let [e1, e2, e3, e4] = cfg.epochs.map(|e| e * spe);
    let mut reports: Vec<StepReport> = Vec::new();
    let mut run = |model: &mut Model, reports: &mut Vec<StepReport>, step, n, stop| -> Result<()> {
        if n > 0 {
            reports.push(run_step(model, data, step, cfg, n, stop, &mut log)?);
        }
        Ok(())
    };
    run(model, &mut reports, Step::Intra, cfg.intra_epochs * spe, None)?;
    run(model, &mut reports, Step::Interp, e1, None)?;
    run(model, &mut reports, Step::Resample, e2 / 3, None)?;
    run(model, &mut reports, Step::BaseCode, e2 / 3, None)?;
    run(model, &mut reports, Step::BaseJoint, e2 - 2 * (e2 / 3), None)?;
    run(model, &mut reports, Step::Merge, e3 / 3, None)?;
    run(model, &mut reports, Step::Enhance, e3 / 3, Some(Convergence::new(0.01, 2)))?;
    let used: usize = reports
        .iter()
        .filter(|r| r.step.phase() == 3)
        .map(|r| r.iterations)
        .sum();
    run(model, &mut reports, Step::Skip, e3.saturating_sub(used), None)?;
    run(model, &mut reports, Step::Joint, e4, None)?;
    Ok(reports)
}

/// Phase-4 fine-tuning of a trained model at a new rate point.
pub fn finetune_rate_point(model: &mut Model, data: &Dataset, cfg: &TrainConfig, lambda: f64) -> Result<StepReport> {
    let cfg = TrainConfig { lambda, ..cfg.clone() };
    let mut log = TrainLog::open(cfg.log_path.as_deref())?;
    let n = cfg.finetune_epochs * steps_per_epoch(data, &cfg);
    run_step(model, data, Step::Joint, &cfg, n, None, &mut log)
}

/// Rate, quality and skip statistics of a full B-frame pass with real
/// entropy coding, averaged over the validation batches.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RdSummary {
    pub bpp: f64,
    pub psnr: f64,
    pub retained: f64,
}

pub fn evaluate_rd(model: &Model, data: &Dataset) -> Result<RdSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut bits, mut px, mut mse_sum, mut kept, mut kept_n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for b in &data.val {
        let mut g = Graph::inference();
        let x = g.constant(b.cur.clone());
        let rp = g.constant(b.prev.clone());
        let rn = g.constant(b.next.clone());
        let t = model.forward_b(&mut g, x, rp, rn, b.frame_type, Mode::Real, Stage::Full, &mut rng)?;
        let payload = t.base_payload.as_ref().map_or(0, Vec::len) + t.enh_payload.as_ref().map_or(0, Vec::len);
        bits += 8.0 * payload as f64;
        px += b.pixels();
        mse_sum += crate::metrics::mse(g.value(t.recon.expect("full")), &b.cur)?;
        let [n, _, h, w] = b.cur.shape();
        let elements = (n * model.config.latent * (h / LATENT_STRIDE) * (w / LATENT_STRIDE)) as f64;
        kept += t.skip.map_or(elements, |s| g.value(s.mask).sum());
        kept_n += elements;
    }
    Ok(RdSummary {
        bpp: bits / px,
        psnr: psnr_from_mse(mse_sum / data.val.len() as f64),
        retained: kept / kept_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_halves_after_patience() {
        let mut p = Plateau::new(0.5, 3);
        assert_eq!(p.observe(1.0), 1.0);
        for _ in 0..3 {
            assert_eq!(p.observe(1.0), 1.0);
        }
        assert_eq!(p.observe(1.0), 0.5);
        assert_eq!(p.observe(0.9), 1.0);
    }

    #[test]
    fn convergence_needs_consecutive_slow_rounds() {
        let mut c = Convergence::new(0.01, 2);
        assert!(!c.observe(1.0));
        assert!(!c.observe(0.995));
        assert!(!c.observe(0.9));
        assert!(!c.observe(0.899));
        assert!(c.observe(0.898));
    }
}
