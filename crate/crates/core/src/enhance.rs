//! Enhancement layer: the multi-frame merge and the latent skip mask.

use serde::{Deserialize, Serialize};

use crate::nn::layers::{act, Builder, Conv2d, Fwd, ResBlock};
use crate::nn::{Graph, Init, Var};

/// Merges the super-resolved base frame with the two warped references by a
/// per-pixel softmax over the three candidates, then refines the blend.
pub struct MergeNet {
    map_in: Conv2d,
    map_res: [ResBlock; 2],
    map_mid: [Conv2d; 2],
    map_out: Conv2d,
    refine_in: Conv2d,
    refine_res: [ResBlock; 3],
    refine_out: Conv2d,
}

pub struct Merged {
    /// Convex combination of the candidates before refinement.
    pub blend: Var,
    /// Per-candidate weights `[n, 3, h, w]` summing to 1 at every pixel.
    pub weights: Var,
    pub frame: Var,
}

impl MergeNet {
    pub fn new(b: &mut Builder, ch: usize) -> Self {
        let mut m = b.sub("map");
        let map_in = m.conv("conv1", 9, ch, 3, 1);
        let map_res = [m.res_block("res1", ch), m.res_block("res2", ch)];
        let map_mid = [m.conv("conv2", ch, ch, 3, 1), m.conv("conv3", ch, ch, 3, 1)];
        let map_out = m.conv("conv4", ch, 3, 3, 1);
        let mut r = b.sub("refine");
        MergeNet {
            map_in,
            map_res,
            map_mid,
            map_out,
            refine_in: r.conv("conv1", 3, ch, 3, 1),
            refine_res: [r.res_block("res1", ch), r.res_block("res2", ch), r.res_block("res3", ch)],
            refine_out: r.conv_init("conv2", ch, 3, 3, 1, Init::Const(0.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, cx: &Fwd, sr: Var, warped_prev: Var, warped_next: Var) -> Merged {
        g.scoped("enh.mfmn", |g| {
            let shape = g.shape(sr);
            let input = g.concat(&[sr, warped_prev, warped_next]);
            let h = self.map_in.forward(g, cx, input);
            let mut h = act(g, h);
            for r in &self.map_res {
                h = r.forward(g, cx, h);
            }
            for c in &self.map_mid {
                h = c.forward(g, cx, h);
                h = act(g, h);
            }
            let logits = self.map_out.forward(g, cx, h);
            let weights = g.softmax_channels(logits);
            let mut blend = None;
            for (i, cand) in [sr, warped_prev, warped_next].into_iter().enumerate() {
                let w = g.narrow(weights, i, 1);
                let w = g.broadcast(w, shape);
                let t = g.mul(w, cand);
                blend = Some(match blend {
                    None => t,
                    Some(acc) => g.add(acc, t),
                });
            }
            let blend = blend.expect("three candidates");
            let h = self.refine_in.forward(g, cx, blend);
            let mut h = act(g, h);
            for r in &self.refine_res {
                h = r.forward(g, cx, h);
            }
            let d = self.refine_out.forward(g, cx, h);
            let frame = g.add(blend, d);
            Merged { blend, weights, frame }
        })
    }
}

/// Predicts a binary keep-mask over the enhancement latent from information
/// the decoder already holds: both flows, the merged frame and the latent
/// distribution.
pub struct SkipGenerator {
    stage1: [Conv2d; 4],
    fuse: Conv2d,
    res: [ResBlock; 2],
    out: Conv2d,
    inputs: SkipInputs,
}

/// Initial logit bias; `sigmoid(3) ~ 0.95` keeps nearly every element.
pub const SKIP_INIT_BIAS: f32 = 3.0;

/// Which signals reach the skip-mask generator. A disabled input is fed as
/// zeros of the same shape, so the architecture is unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipInputs {
    pub flows: bool,
    pub merged: bool,
    pub hyper: bool,
}

impl Default for SkipInputs {
    fn default() -> Self {
        SkipInputs {
            flows: true,
            merged: true,
            hyper: true,
        }
    }
}

pub struct SkipMask {
    /// Binary mask, straight-through to the soft probabilities in training.
    pub mask: Var,
    pub prob: Var,
}

impl SkipGenerator {
    pub fn new(b: &mut Builder, ch: usize, latent: usize, inputs: SkipInputs) -> Self {
        let mut s1 = b.sub("stage1");
        let stage1 = [
            s1.conv("conv1", 7, ch, 3, 2),
            s1.conv("conv2", ch, ch, 3, 2),
            s1.conv("conv3", ch, ch, 3, 2),
            s1.conv("conv4", ch, ch, 3, 2),
        ];
        let mut s2 = b.sub("stage2");
        let fuse = s2.conv("conv1", ch + 2 * latent, ch, 3, 1);
        let res = [s2.res_block("res1", ch), s2.res_block("res2", ch)];
        let out = s2.conv_full("conv2", ch, latent, 3, 1, Init::FanIn(ch * 9), Init::Const(SKIP_INIT_BIAS));
        SkipGenerator {
            stage1,
            fuse,
            res,
            out,
            inputs,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(&self, g: &mut Graph, cx: &Fwd, flow_prev: Var, flow_next: Var, merged: Var, mu: Var, sigma: Var) -> SkipMask {
        g.scoped("enh.skip", |g| {
            let keep = |g: &mut Graph, v: Var, on: bool| if on { v } else { g.scale(v, 0.0) };
            let flow_prev = keep(g, flow_prev, self.inputs.flows);
            let flow_next = keep(g, flow_next, self.inputs.flows);
            let merged = keep(g, merged, self.inputs.merged);
            let mu = keep(g, mu, self.inputs.hyper);
            let mut h = g.concat(&[flow_prev, flow_next, merged]);
            for c in &self.stage1 {
                h = c.forward(g, cx, h);
                h = act(g, h);
            }
            let log_sigma = g.log(sigma);
            let log_sigma = keep(g, log_sigma, self.inputs.hyper);
            let h = g.concat(&[h, mu, log_sigma]);
            let h = self.fuse.forward(g, cx, h);
            let mut h = act(g, h);
            for r in &self.res {
                h = r.forward(g, cx, h);
            }
            let logits = self.out.forward(g, cx, h);
            let prob = g.sigmoid(logits);
            let mask = g.straight_through(prob, |p| if p >= 0.5 { 1.0 } else { 0.0 });
            SkipMask { mask, prob }
        })
    }
}

/// Fraction of latent elements the mask keeps.
pub fn retained_fraction(g: &Graph, mask: Var) -> f64 {
    g.value(mask).mean()
}
