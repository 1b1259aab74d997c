//! Building blocks shared by the fusion/encoding and decoding/reconstruction
//! networks: convolutions, (inverse) GDN, residual blocks, simplified
//! attention and the causal 5×5 masked convolution.
//!
//! Every block is a plain description (names, channel counts, strides). Its
//! weights live in a [`ParamStore`](crate::params::ParamStore) under the
//! block's name prefix, which is also the checkpoint key.

use std::rc::Rc;

use crate::autograd::Var;
use crate::params::{Ctx, Init};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const GDN_BETA_MIN: f64 = 1e-6;
/// Initial value of off-diagonal reparameterized γ entries; keeps them off
/// the zero-gradient point of the square.
const GDN_GAMMA_OFF_DIAG: f64 = 3.814_697_265_625e-6; // 2^-18

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Conv {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, init: &mut Init) {
        let k = self.kernel;
        init.fan_in_normal(self.weight_name(), &[self.out_ch, self.in_ch, k, k], self.in_ch * k * k);
        init.constant(self.bias_name(), &[self.out_ch], 0.0);
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let w = ctx.param(&self.weight_name());
        let b = ctx.param(&self.bias_name());
        x.conv2d(w, Some(b), self.stride)
    }
}

/// Transposed convolution; doubles the spatial dims when `stride == 2`.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        ConvTranspose {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn init(&self, init: &mut Init) {
        let k = self.kernel;
        let fan_in = self.in_ch * k * k / (self.stride * self.stride);
        init.fan_in_normal(format!("{}.weight", self.name), &[self.in_ch, self.out_ch, k, k], fan_in.max(1));
        init.constant(format!("{}.bias", self.name), &[self.out_ch], 0.0);
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let w = ctx.param(&format!("{}.weight", self.name));
        let b = ctx.param(&format!("{}.bias", self.name));
        let shape = x.shape();
        let out_hw = (shape[1] * self.stride, shape[2] * self.stride);
        x.conv_transpose2d(w, Some(b), self.stride, out_hw)
    }
}

/// 3×3 convolution to `4·out` channels followed by a 2× pixel shuffle.
#[derive(Clone, Debug)]
pub struct SubpixelConv {
    pub conv: Conv,
}

impl SubpixelConv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        SubpixelConv {
            conv: Conv::new(name, in_ch, out_ch * 4, 3, 1),
        }
    }

    pub fn init(&self, init: &mut Init) {
        self.conv.init(init);
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        self.conv.forward(ctx, x).pixel_shuffle()
    }
}

/// GDN (`inverse == false`) or IGDN. Stored parameters are square roots:
/// β = β_r² + β_min, γ = γ_r².
#[derive(Clone, Debug)]
pub struct Gdn {
    pub name: String,
    pub channels: usize,
    pub inverse: bool,
}

impl Gdn {
    pub fn new(name: impl Into<String>, channels: usize, inverse: bool) -> Self {
        Gdn {
            name: name.into(),
            channels,
            inverse,
        }
    }

    pub fn init(&self, init: &mut Init) {
        let c = self.channels;
        init.constant(format!("{}.beta", self.name), &[c], (1.0 - GDN_BETA_MIN).sqrt());
        let mut gamma = Tensor::full(&[c, c], GDN_GAMMA_OFF_DIAG);
        for i in 0..c {
            gamma.data_mut()[i * c + i] = 0.1f64.sqrt();
        }
        init.tensor(format!("{}.gamma", self.name), gamma);
    }

    /// Effective `(β, γ)` as graph values.
    pub fn effective<'g>(&self, ctx: &Ctx<'g>) -> (Var<'g>, Var<'g>) {
        let beta = ctx.param(&format!("{}.beta", self.name)).square().add_scalar(GDN_BETA_MIN);
        let gamma = ctx.param(&format!("{}.gamma", self.name)).square();
        (beta, gamma)
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let (beta, gamma) = self.effective(ctx);
        x.gdn(beta, gamma, self.inverse)
    }
}

/// `y = x + f(x)`, f = conv3×3 → LeakyReLU → conv3×3 → LeakyReLU.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResidualBlock {
    pub fn new(name: &str, channels: usize) -> Self {
        ResidualBlock {
            conv1: Conv::new(format!("{name}.conv1"), channels, channels, 3, 1),
            conv2: Conv::new(format!("{name}.conv2"), channels, channels, 3, 1),
        }
    }

    pub fn init(&self, init: &mut Init) {
        self.conv1.init(init);
        self.conv2.init(init);
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.conv1.forward(ctx, x).leaky_relu(LEAKY_SLOPE);
        let h = self.conv2.forward(ctx, h).leaky_relu(LEAKY_SLOPE);
        x.add(h)
    }
}

/// Stride-2 residual block: conv3×3/s2 → LeakyReLU → conv3×3 → GDN, with a
/// 1×1/s2 projection on the skip path.
#[derive(Clone, Debug)]
pub struct ResidualBlockDown {
    pub conv1: Conv,
    pub conv2: Conv,
    pub gdn: Gdn,
    pub skip: Conv,
}

impl ResidualBlockDown {
    pub fn new(name: &str, in_ch: usize, out_ch: usize) -> Self {
        ResidualBlockDown {
            conv1: Conv::new(format!("{name}.conv1"), in_ch, out_ch, 3, 2),
            conv2: Conv::new(format!("{name}.conv2"), out_ch, out_ch, 3, 1),
            gdn: Gdn::new(format!("{name}.gdn"), out_ch, false),
            skip: Conv::new(format!("{name}.skip"), in_ch, out_ch, 1, 2),
        }
    }

    pub fn init(&self, init: &mut Init) {
        self.conv1.init(init);
        self.conv2.init(init);
        self.gdn.init(init);
        self.skip.init(init);
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.conv1.forward(ctx, x).leaky_relu(LEAKY_SLOPE);
        let h = self.gdn.forward(ctx, self.conv2.forward(ctx, h));
        h.add(self.skip.forward(ctx, x))
    }
}

/// 2× upsampling residual block: subpixel3×3 → LeakyReLU → conv3×3 → IGDN,
/// with a subpixel3×3 skip path.
#[derive(Clone, Debug)]
pub struct ResidualBlockUp {
    pub subpel: SubpixelConv,
    pub conv: Conv,
    pub igdn: Gdn,
    pub skip: SubpixelConv,
}

impl ResidualBlockUp {
    pub fn new(name: &str, in_ch: usize, out_ch: usize) -> Self {
        ResidualBlockUp {
            subpel: SubpixelConv::new(format!("{name}.subpel"), in_ch, out_ch),
            conv: Conv::new(format!("{name}.conv"), out_ch, out_ch, 3, 1),
            igdn: Gdn::new(format!("{name}.igdn"), out_ch, true),
            skip: SubpixelConv::new(format!("{name}.skip"), in_ch, out_ch),
        }
    }

    pub fn init(&self, init: &mut Init) {
        self.subpel.init(init);
        self.conv.init(init);
        self.igdn.init(init);
        self.skip.init(init);
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.subpel.forward(ctx, x).leaky_relu(LEAKY_SLOPE);
        let h = self.igdn.forward(ctx, self.conv.forward(ctx, h));
        h.add(self.skip.forward(ctx, x))
    }
}

/// Simplified attention: `x + trunk(x) ⊙ sigmoid(mask(x))`, trunk and mask
/// each three residual blocks, the mask closed by a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct Attention {
    pub trunk: Vec<ResidualBlock>,
    pub mask: Vec<ResidualBlock>,
    pub mask_conv: Conv,
}

impl Attention {
    pub fn new(name: &str, channels: usize) -> Self {
        Attention {
            trunk: (0..3).map(|i| ResidualBlock::new(&format!("{name}.trunk{i}"), channels)).collect(),
            mask: (0..3).map(|i| ResidualBlock::new(&format!("{name}.mask{i}"), channels)).collect(),
            mask_conv: Conv::new(format!("{name}.mask_conv"), channels, channels, 1, 1),
        }
    }

    pub fn init(&self, init: &mut Init) {
        for b in self.trunk.iter().chain(&self.mask) {
            b.init(init);
        }
        self.mask_conv.init(init);
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let trunk = self.trunk.iter().fold(x, |h, b| b.forward(ctx, h));
        let mask = self.mask.iter().fold(x, |h, b| b.forward(ctx, h));
        let mask = self.mask_conv.forward(ctx, mask).sigmoid();
        x.add(trunk.mul(mask))
    }
}

/// Type-A mask for a `k×k` kernel: taps strictly before the centre in raster
/// order are 1, the centre and everything after are 0.
pub fn causal_mask(out_ch: usize, in_ch: usize, k: usize) -> Tensor {
    let centre = (k / 2) * k + k / 2;
    let mut m = Tensor::zeros(&[out_ch, in_ch, k, k]);
    for (i, v) in m.data_mut().iter_mut().enumerate() {
        if i % (k * k) < centre {
            *v = 1.0;
        }
    }
    m
}

/// 5×5 causal convolution used as the autoregressive context model.
#[derive(Clone, Debug)]
pub struct MaskedConv5 {
    pub conv: Conv,
    mask: Rc<Tensor>,
}

impl MaskedConv5 {
    pub const KERNEL: usize = 5;

    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        MaskedConv5 {
            conv: Conv::new(name, in_ch, out_ch, Self::KERNEL, 1),
            mask: Rc::new(causal_mask(out_ch, in_ch, Self::KERNEL)),
        }
    }

    pub fn init(&self, init: &mut Init) {
        self.conv.init(init);
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let w = ctx.param(&self.conv.weight_name()).mul_fixed(self.mask.clone());
        let b = ctx.param(&self.conv.bias_name());
        x.conv2d(w, Some(b), 1)
    }

    /// Output at a single position `(row, col)` from the causal neighbourhood
    /// of `x`; only taps strictly before the centre are read. This is the
    /// routine both the sequential encoder and decoder run, so its
    /// accumulation order is fixed.
    pub fn at_position(weight: &Tensor, bias: &Tensor, x: &Tensor, row: usize, col: usize, out: &mut [f64]) {
        let (ci, h, w) = x.chw();
        let k = Self::KERNEL;
        let half = (k / 2) as isize;
        let co = bias.len();
        let wd = weight.data();
        let xd = x.data();
        for (o, slot) in out.iter_mut().enumerate().take(co) {
            let mut acc = bias.data()[o];
            for c in 0..ci {
                for ky in 0..=half as usize {
                    let iy = row as isize + ky as isize - half;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let kx_end = if ky as isize == half { half as usize } else { k };
                    for kx in 0..kx_end {
                        let ix = col as isize + kx as isize - half;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += wd[((o * ci + c) * k + ky) * k + kx] * xd[(c * h + iy as usize) * w + ix as usize];
                    }
                }
            }
            *slot = acc;
        }
    }
}
