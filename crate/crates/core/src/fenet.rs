//! Fusion-and-encoding network: maps {p2..p5} to the latent `y`, folding
//! each coarser pyramid level into the running latent once the spatial
//! dims agree.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Var;
use crate::blocks::{Attention, Conv, ResidualBlock, ResidualBlockDown};
use crate::params::{Ctx, Init};

#[derive(Debug, Error, PartialEq)]
pub enum FuseError {
    #[error("cannot fuse latent {latent:?} with pyramid level {level:?}: spatial dims differ")]
    DimMismatch { latent: (usize, usize), level: (usize, usize) },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeNetConfig {
    /// Latent channel count.
    pub n: usize,
    /// Pyramid channel count.
    pub channels: usize,
    /// Plain residual blocks after the strided block in encoding blocks 1..3.
    pub residual_units: usize,
    /// Simplified attention at the end of each encoding block.
    pub attention: [bool; 4],
}

impl FeNetConfig {
    pub fn new(n: usize, channels: usize) -> Self {
        FeNetConfig {
            n,
            channels,
            residual_units: 1,
            attention: [false, true, false, true],
        }
    }
}

#[derive(Clone, Debug)]
enum Head {
    Residual(ResidualBlockDown),
    Conv(Conv),
}

#[derive(Clone, Debug)]
struct EncodeBlock {
    head: Head,
    units: Vec<ResidualBlock>,
    attention: Option<Attention>,
}

impl EncodeBlock {
    fn init(&self, init: &mut Init) {
        match &self.head {
            Head::Residual(b) => b.init(init),
            Head::Conv(c) => c.init(init),
        }
        for u in &self.units {
            u.init(init);
        }
        if let Some(a) = &self.attention {
            a.init(init);
        }
    }

    fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let mut h = match &self.head {
            Head::Residual(b) => b.forward(ctx, x),
            Head::Conv(c) => c.forward(ctx, x),
        };
        for u in &self.units {
            h = u.forward(ctx, h);
        }
        match &self.attention {
            Some(a) => a.forward(ctx, h),
            None => h,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeNet {
    pub config: FeNetConfig,
    blocks: Vec<EncodeBlock>,
}

/// Channel concatenation, latent first.
pub fn fuse<'g>(latent: Var<'g>, level: Var<'g>) -> Result<Var<'g>, FuseError> {
    let (a, b) = (latent.shape(), level.shape());
    if a[1..] != b[1..] {
        return Err(FuseError::DimMismatch {
            latent: (a[1], a[2]),
            level: (b[1], b[2]),
        });
    }
    Ok(Var::concat(&[latent, level]))
}

impl FeNet {
    pub fn new(config: FeNetConfig) -> Self {
        let (n, c) = (config.n, config.channels);
        let blocks = (0..4)
            .map(|k| {
                let name = format!("fenet.block{}", k + 1);
                let in_ch = if k == 0 { c } else { n + c };
                let attention = config.attention[k].then(|| Attention::new(&format!("{name}.attention"), n));
                if k == 3 {
                    EncodeBlock {
                        head: Head::Conv(Conv::new(format!("{name}.conv"), in_ch, n, 3, 2)),
                        units: Vec::new(),
                        attention,
                    }
                } else {
                    EncodeBlock {
                        head: Head::Residual(ResidualBlockDown::new(&format!("{name}.down"), in_ch, n)),
                        units: (0..config.residual_units)
                            .map(|u| ResidualBlock::new(&format!("{name}.res{u}"), n))
                            .collect(),
                        attention,
                    }
                }
            })
            .collect();
        FeNet { config, blocks }
    }

    pub fn init(&self, init: &mut Init) {
        for b in &self.blocks {
            b.init(init);
        }
    }

    /// `layers` are the padded p2..p5.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, layers: [Var<'g>; 4]) -> Result<Var<'g>, FuseError> {
        let mut h = self.blocks[0].forward(ctx, layers[0]);
        for k in 1..4 {
            h = self.blocks[k].forward(ctx, fuse(h, layers[k])?);
        }
        Ok(h)
    }
}
