//! Convolutional building blocks with optional frame-type adaptive (FA)
//! channel modulation.

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};

/// Negative slope of every hidden activation.
pub const LEAKY_SLOPE: f32 = 0.1;

/// Which FA parameter set a forward pass selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaSlot {
    Ref,
    NonRef,
}

impl FaSlot {
    fn index(self) -> usize {
        match self {
            FaSlot::Ref => 0,
            FaSlot::NonRef => 1,
        }
    }

    fn tag(i: usize) -> &'static str {
        ["b_ref", "b_nonref"][i]
    }
}

/// Read-only state shared by every layer during one forward pass.
#[derive(Clone, Copy)]
pub struct Fwd<'a> {
    pub store: &'a ParamStore,
    pub fa: Option<FaSlot>,
}

impl<'a> Fwd<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Fwd { store, fa: None }
    }

    pub fn with_fa(self, fa: Option<FaSlot>) -> Self {
        Fwd { fa, ..self }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
    /// Prefix for FA parameters, or `None` when layers built here are not
    /// modulated.
    fa_prefix: Option<String>,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
            fa_prefix: None,
        }
    }

    fn join(prefix: &str, name: &str) -> String {
        if prefix.is_empty() {
            name.to_string()
        } else {
            format!("{prefix}.{name}")
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        Builder {
            prefix: Self::join(&self.prefix, name),
            fa_prefix: self.fa_prefix.as_ref().map(|p| Self::join(p, name)),
            store: self.store,
            rng: self.rng,
        }
    }

    /// Enables FA modulation for layers built through the returned builder;
    /// their FA parameters live under `fa.<prefix>`.
    pub fn with_fa(&mut self, on: bool) -> Builder<'_> {
        Builder {
            prefix: self.prefix.clone(),
            fa_prefix: on.then(|| Self::join("fa", &self.prefix)),
            store: self.store,
            rng: self.rng,
        }
    }

    pub fn param(&mut self, name: &str, shape: [usize; 4], init: Init) -> ParamId {
        let t = init.tensor(shape, self.rng);
        self.store.add(Self::join(&self.prefix, name), t)
    }

    fn fa_params(&mut self, name: &str, c: usize) -> Option<[(ParamId, ParamId); 2]> {
        let p = Self::join(self.fa_prefix.as_ref()?, name);
        let mut slot = |i: usize| {
            let base = format!("{p}.{}", FaSlot::tag(i));
            (
                self.store
                    .add(format!("{base}.scale"), Init::Const(1.0).tensor([1, c, 1, 1], self.rng)),
                self.store
                    .add(format!("{base}.bias"), Init::Const(0.0).tensor([1, c, 1, 1], self.rng)),
            )
        };
        Some([slot(0), slot(1)])
    }

    /// `k x k` convolution with "same"-style padding `k / 2`.
    pub fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize, stride: usize) -> Conv2d {
        self.conv_init(name, ci, co, k, stride, Init::FanIn(ci * k * k))
    }

    pub fn conv_init(
        &mut self,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Conv2d {
        self.conv_full(name, ci, co, k, stride, init, Init::Const(0.0))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_full(
        &mut self,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        init: Init,
        bias: Init,
    ) -> Conv2d {
        let w = self.param(&format!("{name}.weight"), [co, ci, k, k], init);
        let b = self.param(&format!("{name}.bias"), [1, co, 1, 1], bias);
        Conv2d {
            w,
            b,
            stride,
            pad: k / 2,
            fa: self.fa_params(name, co),
        }
    }

    /// Exact 2x upsampling transposed convolution (kernel 4, stride 2, pad 1).
    pub fn tconv(&mut self, name: &str, ci: usize, co: usize) -> ConvT2d {
        self.tconv_init(name, ci, co, Init::FanIn(ci * 4))
    }

    pub fn tconv_init(&mut self, name: &str, ci: usize, co: usize, init: Init) -> ConvT2d {
        let w = self.param(&format!("{name}.weight"), [ci, co, 4, 4], init);
        let b = self.param(&format!("{name}.bias"), [1, co, 1, 1], Init::Const(0.0));
        ConvT2d {
            w,
            b,
            fa: self.fa_params(name, co),
        }
    }

    pub fn res_block(&mut self, name: &str, c: usize) -> ResBlock {
        let mut s = self.sub(name);
        ResBlock {
            a: s.conv("conv1", c, c, 3, 1),
            b: s.conv("conv2", c, c, 3, 1),
        }
    }
}

fn modulate(
    g: &mut Graph,
    cx: &Fwd,
    fa: &Option<[(ParamId, ParamId); 2]>,
    y: Var,
) -> Var {
    match (fa, cx.fa) {
        (Some(sets), Some(slot)) => {
            let (s, b) = sets[slot.index()];
            let s = g.param(cx.store, s);
            let b = g.param(cx.store, b);
            g.channel_affine(y, s, b)
        }
        _ => y,
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    fa: Option<[(ParamId, ParamId); 2]>,
}

impl Conv2d {
    pub fn forward(&self, g: &mut Graph, cx: &Fwd, x: Var) -> Var {
        let w = g.param(cx.store, self.w);
        let b = g.param(cx.store, self.b);
        let y = g.conv2d(x, w, Some(b), self.stride, self.pad);
        modulate(g, cx, &self.fa, y)
    }

    pub fn has_fa(&self) -> bool {
        self.fa.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct ConvT2d {
    pub w: ParamId,
    pub b: ParamId,
    fa: Option<[(ParamId, ParamId); 2]>,
}

impl ConvT2d {
    pub fn forward(&self, g: &mut Graph, cx: &Fwd, x: Var) -> Var {
        let w = g.param(cx.store, self.w);
        let b = g.param(cx.store, self.b);
        let y = g.conv_transpose2d(x, w, Some(b), 2, 1);
        modulate(g, cx, &self.fa, y)
    }
}

/// `x + conv2(act(conv1(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    pub fn forward(&self, g: &mut Graph, cx: &Fwd, x: Var) -> Var {
        let h = self.a.forward(g, cx, x);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.b.forward(g, cx, h);
        g.add(x, h)
    }
}

pub fn act(g: &mut Graph, x: Var) -> Var {
    g.leaky_relu(x, LEAKY_SLOPE)
}
