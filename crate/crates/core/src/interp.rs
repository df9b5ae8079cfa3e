//! Coarse-to-fine midpoint interpolator.
//!
//! Three levels at 1/4, 1/2 and full resolution each refine a pair of
//! backward flows `(t -> t-k, t -> t+k)` from the two references, the warped
//! references and the current flows. A fusion head blends the warped
//! references through a soft occlusion mask.

use crate::nn::layers::{act, Builder, Conv2d, ConvT2d, Fwd};
use crate::nn::{Graph, Init, Var};

pub const LEVELS: usize = 3;

struct FlowBlock {
    head: Conv2d,
    down: Conv2d,
    mid: Conv2d,
    up: ConvT2d,
    out: Conv2d,
}

impl FlowBlock {
    fn new(b: &mut Builder, ch: usize) -> Self {
        FlowBlock {
            head: b.conv("head", 16, ch, 3, 1),
            down: b.conv("down", ch, ch, 3, 2),
            mid: b.conv("mid", ch, ch, 3, 1),
            up: b.tconv("up", ch, ch),
            out: b.conv_init("out", 2 * ch, 4, 3, 1, Init::Const(0.0)),
        }
    }

    fn forward(&self, g: &mut Graph, cx: &Fwd, x: Var) -> Var {
        let h = self.head.forward(g, cx, x);
        let h = act(g, h);
        let d = self.down.forward(g, cx, h);
        let d = act(g, d);
        let d = self.mid.forward(g, cx, d);
        let d = act(g, d);
        let u = self.up.forward(g, cx, d);
        let u = act(g, u);
        let cat = g.concat(&[h, u]);
        self.out.forward(g, cx, cat)
    }
}

pub struct Interpolator {
    blocks: Vec<FlowBlock>,
    fuse1: Conv2d,
    fuse2: Conv2d,
    fuse_out: Conv2d,
}

pub struct Interpolation {
    pub frame: Var,
    pub flow_prev: Var,
    pub flow_next: Var,
    pub warped_prev: Var,
    pub warped_next: Var,
}

impl Interpolator {
    pub fn new(b: &mut Builder, ch: usize) -> Self {
        let blocks = (0..LEVELS)
            .map(|l| FlowBlock::new(&mut b.sub(&format!("level{l}")), ch))
            .collect();
        let mut f = b.sub("fusion");
        Interpolator {
            blocks,
            fuse1: f.conv("conv1", 10, ch, 3, 1),
            fuse2: f.conv("conv2", ch, ch, 3, 1),
            fuse_out: f.conv_init("out", ch, 1, 3, 1, Init::Const(0.0)),
        }
    }

    /// Input sides must be divisible by `2^LEVELS`.
    pub fn forward(&self, g: &mut Graph, cx: &Fwd, ref_prev: Var, ref_next: Var) -> Interpolation {
        g.scoped("interp", |g| self.run(g, cx, ref_prev, ref_next))
    }

    fn run(&self, g: &mut Graph, cx: &Fwd, ref_prev: Var, ref_next: Var) -> Interpolation {
        let [n, _, h, w] = g.shape(ref_prev);
        let coarse = 1 << (LEVELS - 1);
        let mut flows = g.placeholder([n, 4, h / coarse, w / coarse]);
        for (l, block) in self.blocks.iter().enumerate() {
            let f = 1 << (LEVELS - 1 - l);
            if l > 0 {
                let up = g.upsample(flows, 2);
                flows = g.scale(up, 2.0);
            }
            let rp = g.avg_pool(ref_prev, f);
            let rn = g.avg_pool(ref_next, f);
            let fp = g.narrow(flows, 0, 2);
            let fnx = g.narrow(flows, 2, 2);
            let wp = g.warp(rp, fp);
            let wn = g.warp(rn, fnx);
            let input = g.concat(&[rp, rn, wp, wn, flows]);
            let delta = block.forward(g, cx, input);
            flows = g.add(flows, delta);
        }
        let flow_prev = g.narrow(flows, 0, 2);
        let flow_next = g.narrow(flows, 2, 2);
        let warped_prev = g.warp(ref_prev, flow_prev);
        let warped_next = g.warp(ref_next, flow_next);
        let input = g.concat(&[warped_prev, warped_next, flows]);
        let h1 = self.fuse1.forward(g, cx, input);
        let h1 = act(g, h1);
        let h2 = self.fuse2.forward(g, cx, h1);
        let h2 = act(g, h2);
        let logit = self.fuse_out.forward(g, cx, h2);
        let m = g.sigmoid(logit);
        let m = g.broadcast(m, [n, 3, h, w]);
        let a = g.mul(m, warped_prev);
        let inv = g.one_minus(m);
        let b = g.mul(inv, warped_next);
        let frame = g.add(a, b);
        Interpolation {
            frame,
            flow_prev,
            flow_next,
            warped_prev,
            warped_next,
        }
    }
}

/// Backward bilinear warp of a single frame, outside any graph.
pub fn warp_frame(src: &crate::nn::Tensor, flow: &crate::nn::Tensor) -> crate::nn::Tensor {
    let mut g = Graph::inference();
    let s = g.constant(src.clone());
    let f = g.constant(flow.clone());
    let out = g.warp(s, f);
    g.value(out).clone()
}
