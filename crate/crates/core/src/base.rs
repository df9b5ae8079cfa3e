//! Base layer: 4x learned downsampling, a conditional compressor at quarter
//! resolution, and 4x super-resolution back to full size.
//!
//! Both resamplers wrap a fixed path (box filter down, nearest up) with a
//! learned residual whose last layer starts at zero.

use crate::nn::layers::{act, Builder, Conv2d, ConvT2d, Fwd, ResBlock};
use crate::error::{Error, Result};
use crate::nn::{Graph, Init, Var};

pub const SCALE: usize = 4;

/// Spatial size check for the downsampler input.
pub fn check_downsample_shape(shape: [usize; 4]) -> Result<()> {
    if !shape[2].is_multiple_of(SCALE) || !shape[3].is_multiple_of(SCALE) {
        return Err(Error::Dimension(format!(
            "{}x{} is not divisible by {SCALE}",
            shape[3], shape[2]
        )));
    }
    Ok(())
}

pub struct Downsampler {
    head: Conv2d,
    res: [ResBlock; 2],
    out: Conv2d,
}

impl Downsampler {
    pub fn new(b: &mut Builder, ch: usize) -> Self {
        Downsampler {
            head: b.conv("conv1", 3, ch, 3, 2),
            res: [b.res_block("res1", ch), b.res_block("res2", ch)],
            out: b.conv_init("conv2", ch, 3, 3, 2, Init::Const(0.0)),
        }
    }

    /// Like `forward`, but rejects sizes the 4x grid cannot represent.
    pub fn apply(&self, g: &mut Graph, cx: &Fwd, x: Var) -> Result<Var> {
        check_downsample_shape(g.shape(x))?;
        Ok(self.forward(g, cx, x))
    }

    pub fn forward(&self, g: &mut Graph, cx: &Fwd, x: Var) -> Var {
        g.scoped("base.ds", |g| {
            let h = self.head.forward(g, cx, x);
            let mut h = act(g, h);
            for r in &self.res {
                h = r.forward(g, cx, h);
            }
            let d = self.out.forward(g, cx, h);
            let pooled = g.avg_pool(x, SCALE);
            g.add(pooled, d)
        })
    }
}

pub struct SuperRes {
    head: Conv2d,
    res: [ResBlock; 2],
    up1: ConvT2d,
    up2: ConvT2d,
}

impl SuperRes {
    pub fn new(b: &mut Builder, ch: usize) -> Self {
        SuperRes {
            head: b.conv("conv1", 3, ch, 3, 1),
            res: [b.res_block("res1", ch), b.res_block("res2", ch)],
            up1: b.tconv("up1", ch, ch),
            up2: b.tconv_init("up2", ch, 3, Init::Const(0.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, cx: &Fwd, x: Var) -> Var {
        g.scoped("base.sr", |g| {
            let h = self.head.forward(g, cx, x);
            let mut h = act(g, h);
            for r in &self.res {
                h = r.forward(g, cx, h);
            }
            let h = self.up1.forward(g, cx, h);
            let h = act(g, h);
            let d = self.up2.forward(g, cx, h);
            let up = g.upsample(x, SCALE);
            g.add(up, d)
        })
    }
}
