//! Decoding-and-reconstruction network: per-level upsampling branches from
//! the decoded latent, then a mixing pass that lets neighbouring levels
//! refine each other.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::blocks::{Attention, Conv, ConvTranspose, ResidualBlock, ResidualBlockUp};
use crate::params::{Ctx, Init};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    /// Finer levels refine coarser ones (default).
    BottomUp,
    /// Coarser levels refine finer ones through transposed convolutions.
    TopDown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrNetConfig {
    pub n: usize,
    pub channels: usize,
    pub pathway: Pathway,
}

/// Number of 2× stages for the branch producing level `level`.
pub fn branch_depth(level: u8) -> usize {
    6 - level as usize
}

/// Stage after which the branch for `level` runs simplified attention.
fn attention_after(level: u8) -> Option<usize> {
    match level {
        2 => Some(2),
        3 => Some(1),
        _ => None,
    }
}

#[derive(Clone, Debug)]
struct Branch {
    stages: Vec<(ResidualBlockUp, ResidualBlock)>,
    attention: Option<(usize, Attention)>,
    out: Conv,
}

impl Branch {
    fn new(level: u8, n: usize, channels: usize) -> Self {
        let name = format!("drnet.branch{level}");
        Branch {
            stages: (0..branch_depth(level))
                .map(|s| {
                    (
                        ResidualBlockUp::new(&format!("{name}.stage{s}.up"), n, n),
                        ResidualBlock::new(&format!("{name}.stage{s}.res"), n),
                    )
                })
                .collect(),
            attention: attention_after(level).map(|s| (s, Attention::new(&format!("{name}.attention"), n))),
            out: Conv::new(format!("{name}.out"), n, channels, 3, 1),
        }
    }

    fn init(&self, init: &mut Init) {
        for (up, res) in &self.stages {
            up.init(init);
            res.init(init);
        }
        if let Some((_, a)) = &self.attention {
            a.init(init);
        }
        self.out.init(init);
    }

    fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let mut h = x;
        for (s, (up, res)) in self.stages.iter().enumerate() {
            h = res.forward(ctx, up.forward(ctx, h));
            if let Some((after, a)) = &self.attention {
                if *after == s + 1 {
                    h = a.forward(ctx, h);
                }
            }
        }
        self.out.forward(ctx, h)
    }
}

/// `target + conv3×3(concat(resample(source), target))` where `resample`
/// brings `source` to the resolution of `target`.
#[derive(Clone, Debug)]
enum Resample {
    Down(Conv),
    Up(ConvTranspose),
}

#[derive(Clone, Debug)]
pub struct MixingBlock {
    resample: Resample,
    merge: Conv,
}

impl MixingBlock {
    pub fn new(name: &str, channels: usize, pathway: Pathway) -> Self {
        let resample = match pathway {
            Pathway::BottomUp => Resample::Down(Conv::new(format!("{name}.down"), channels, channels, 5, 2)),
            Pathway::TopDown => Resample::Up(ConvTranspose::new(format!("{name}.up"), channels, channels, 5, 2)),
        };
        MixingBlock {
            resample,
            merge: Conv::new(format!("{name}.merge"), 2 * channels, channels, 3, 1),
        }
    }

    pub fn init(&self, init: &mut Init) {
        match &self.resample {
            Resample::Down(c) => c.init(init),
            Resample::Up(c) => c.init(init),
        }
        self.merge.init(init);
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, source: Var<'g>, target: Var<'g>) -> Var<'g> {
        let r = match &self.resample {
            Resample::Down(c) => c.forward(ctx, source),
            Resample::Up(c) => c.forward(ctx, source),
        };
        assert_eq!(r.shape(), target.shape(), "mixing operands disagree");
        target.add(self.merge.forward(ctx, Var::concat(&[r, target])))
    }

    /// Parameter names of this block.
    pub fn param_names(&self) -> Vec<String> {
        let resample = match &self.resample {
            Resample::Down(c) => &c.name,
            Resample::Up(c) => &c.name,
        };
        [resample, &self.merge.name]
            .iter()
            .flat_map(|n| [format!("{n}.weight"), format!("{n}.bias")])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct DrNet {
    pub config: DrNetConfig,
    attention: Attention,
    branches: Vec<Branch>,
    /// Indexed by the refined level minus 2; bottom-up uses 3..=5,
    /// top-down 2..=4.
    mixing: Vec<(u8, MixingBlock)>,
}

impl DrNet {
    pub fn new(config: DrNetConfig) -> Self {
        let (n, c) = (config.n, config.channels);
        let levels: Vec<u8> = match config.pathway {
            Pathway::BottomUp => vec![3, 4, 5],
            Pathway::TopDown => vec![4, 3, 2],
        };
        DrNet {
            attention: Attention::new("drnet.attention", n),
            branches: (2..=5).map(|l| Branch::new(l, n, c)).collect(),
            mixing: levels
                .into_iter()
                .map(|l| (l, MixingBlock::new(&format!("drnet.mix{l}"), c, config.pathway)))
                .collect(),
            config,
        }
    }

    pub fn init(&self, init: &mut Init) {
        self.attention.init(init);
        for b in &self.branches {
            b.init(init);
        }
        for (_, m) in &self.mixing {
            m.init(init);
        }
    }

    pub fn mixing_param_names(&self) -> Vec<String> {
        self.mixing.iter().flat_map(|(_, m)| m.param_names()).collect()
    }

    /// Reconstructs p̂2..p̂6 at padded resolution, before cropping.
    pub fn forward_padded<'g>(&self, ctx: &Ctx<'g>, y_hat: Var<'g>) -> [Var<'g>; 4] {
        let a = self.attention.forward(ctx, y_hat);
        let mut out: Vec<Var<'g>> = self.branches.iter().map(|b| b.forward(ctx, a)).collect();
        for (level, block) in &self.mixing {
            let i = (*level - 2) as usize;
            let source = match self.config.pathway {
                Pathway::BottomUp => out[i - 1],
                Pathway::TopDown => out[i + 1],
            };
            out[i] = block.forward(ctx, source, out[i]);
        }
        [out[0], out[1], out[2], out[3]]
    }

    /// p̂2..p̂6 cropped to the unpadded per-level dims of p2..p5; p̂6 is
    /// subsampled from the cropped p̂5.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, y_hat: Var<'g>, dims: &[(usize, usize); 4]) -> [Var<'g>; 5] {
        let padded = self.forward_padded(ctx, y_hat);
        let c = [0, 1, 2, 3].map(|i| padded[i].crop(dims[i].0, dims[i].1));
        [c[0], c[1], c[2], c[3], c[3].subsample2()]
    }
}
