//! Entropy model for the latent pair: hyper encoder/decoder, causal context
//! model, entropy-parameter network, Gaussian conditional for `ŷ`, learned
//! factorized prior for `ẑ`, and the integer CDF tables handed to the coder.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{gaussian_bin, normal_cdf, sigmoid, Var};
use crate::blocks::{Conv, MaskedConv5, SubpixelConv, LEAKY_SLOPE};
use crate::coder::{CdfTables, CDF_TOTAL};
use crate::params::{Ctx, Init, ParamStore};
use crate::tensor::Tensor;

/// Lower bound on the Gaussian scale.
pub const SCALE_FLOOR: f64 = 0.11;
pub const SCALE_CEIL: f64 = 256.0;
pub const SCALE_LEVELS: usize = 64;
/// Smallest bin probability used for rate estimation.
pub const P_MIN: f64 = 1.0 / 65536.0;
/// Probability mass allowed outside a table's support.
pub const TAIL_MASS: f64 = 1.0 / 65536.0;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("latent channels N = {0} must be even")]
    OddLatentChannels(usize),
    #[error("latent channels N must be positive")]
    ZeroLatentChannels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Additive uniform noise in (−0.5, 0.5), for training.
    Noise,
    /// `round(y − μ) + μ`.
    Round,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyConfig {
    pub n: usize,
    pub context_model: bool,
    /// Hidden widths of the entropy-parameter network, `round(10N/3)` and
    /// `round(8N/3)`.
    pub param_widths: [usize; 2],
}

impl EntropyConfig {
    pub fn new(n: usize, context_model: bool) -> Result<Self, ConfigError> {
        if n == 0 {
            return Err(ConfigError::ZeroLatentChannels);
        }
        if n % 2 != 0 {
            return Err(ConfigError::OddLatentChannels(n));
        }
        let w = |num: usize| (num as f64 * n as f64 / 3.0).round() as usize;
        Ok(EntropyConfig {
            n,
            context_model,
            param_widths: [w(10), w(8)],
        })
    }
}

/// Mean-offset rounding of one value.
pub fn quantize_round(y: f64, mu: f64) -> f64 {
    (y - mu).round() + mu
}

pub fn uniform_noise(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
}

/// Bin probability of integer offset `s` from the mean under N(0, σ²),
/// floored at [`P_MIN`].
pub fn gaussian_bin_probability(symbol: f64, mean: f64, scale: f64) -> f64 {
    gaussian_bin(symbol - mean, scale).max(P_MIN)
}

/// `Σ −log2 p` over a likelihood tensor.
pub fn estimate_bits(likelihoods: &Tensor) -> f64 {
    likelihoods.data().iter().map(|p| -p.log2()).sum()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Per-channel monotone cumulative `c(x) = sigmoid(f(x))`, with `f` a chain
/// of four affine maps of widths 1→3→3→3→1 (non-negative matrices through
/// softplus) and `h + tanh(a)·tanh(h)` gates between them.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub name: String,
    pub channels: usize,
}

const PRIOR_DIMS: [usize; 5] = [1, 3, 3, 3, 1];
const PRIOR_STAGES: usize = 4;

/// One channel's prior with transformed parameters.
struct ChannelPrior {
    matrices: [Vec<f64>; PRIOR_STAGES],
    matrix_slopes: [Vec<f64>; PRIOR_STAGES],
    biases: [Vec<f64>; PRIOR_STAGES],
    factors: [Vec<f64>; PRIOR_STAGES - 1],
}

/// Gradient of `f(x)` with respect to the input and the raw parameters.
struct LogitGrad {
    dx: f64,
    matrices: [Vec<f64>; PRIOR_STAGES],
    biases: [Vec<f64>; PRIOR_STAGES],
    factors: [Vec<f64>; PRIOR_STAGES - 1],
}

impl ChannelPrior {
    fn from_raw(raw: &[Rc<Tensor>], c: usize) -> Self {
        let slice = |t: &Tensor| {
            let per = t.len() / t.shape()[0];
            t.data()[c * per..(c + 1) * per].to_vec()
        };
        let m: [Vec<f64>; 4] = std::array::from_fn(|k| slice(&raw[k]));
        ChannelPrior {
            matrices: std::array::from_fn(|k| m[k].iter().map(|&v| softplus(v)).collect()),
            matrix_slopes: std::array::from_fn(|k| m[k].iter().map(|&v| sigmoid(v)).collect()),
            biases: std::array::from_fn(|k| slice(&raw[4 + k])),
            factors: std::array::from_fn(|k| slice(&raw[8 + k]).iter().map(|v| v.tanh()).collect()),
        }
    }

    fn logit(&self, x: f64) -> f64 {
        let mut h = vec![x];
        for k in 0..PRIOR_STAGES {
            let (i, o) = (PRIOR_DIMS[k], PRIOR_DIMS[k + 1]);
            let mut z = self.biases[k].clone();
            for r in 0..o {
                for j in 0..i {
                    z[r] += self.matrices[k][r * i + j] * h[j];
                }
            }
            if k < PRIOR_STAGES - 1 {
                for r in 0..o {
                    z[r] += self.factors[k][r] * z[r].tanh();
                }
            }
            h = z;
        }
        h[0]
    }

    fn logit_grad(&self, x: f64) -> (f64, LogitGrad) {
        let mut inputs = Vec::with_capacity(PRIOR_STAGES);
        let mut pre = Vec::with_capacity(PRIOR_STAGES);
        let mut h = vec![x];
        for k in 0..PRIOR_STAGES {
            let (i, o) = (PRIOR_DIMS[k], PRIOR_DIMS[k + 1]);
            let mut z = self.biases[k].clone();
            for r in 0..o {
                for j in 0..i {
                    z[r] += self.matrices[k][r * i + j] * h[j];
                }
            }
            inputs.push(h);
            let mut out = z.clone();
            if k < PRIOR_STAGES - 1 {
                for r in 0..o {
                    out[r] += self.factors[k][r] * z[r].tanh();
                }
            }
            pre.push(z);
            h = out;
        }
        let value = h[0];
        let mut grad = LogitGrad {
            dx: 0.0,
            matrices: std::array::from_fn(|k| vec![0.0; PRIOR_DIMS[k] * PRIOR_DIMS[k + 1]]),
            biases: std::array::from_fn(|k| vec![0.0; PRIOR_DIMS[k + 1]]),
            factors: std::array::from_fn(|k| vec![0.0; PRIOR_DIMS[k + 1]]),
        };
        let mut g_out = vec![1.0];
        for k in (0..PRIOR_STAGES).rev() {
            let (i, o) = (PRIOR_DIMS[k], PRIOR_DIMS[k + 1]);
            let mut g_z = g_out.clone();
            if k < PRIOR_STAGES - 1 {
                for r in 0..o {
                    let t = pre[k][r].tanh();
                    grad.factors[k][r] = g_out[r] * t * (1.0 - self.factors[k][r] * self.factors[k][r]);
                    g_z[r] = g_out[r] * (1.0 + self.factors[k][r] * (1.0 - t * t));
                }
            }
            let mut g_in = vec![0.0; i];
            for r in 0..o {
                grad.biases[k][r] = g_z[r];
                for j in 0..i {
                    let idx = r * i + j;
                    grad.matrices[k][idx] = g_z[r] * inputs[k][j] * self.matrix_slopes[k][idx];
                    g_in[j] += self.matrices[k][idx] * g_z[r];
                }
            }
            g_out = g_in;
        }
        grad.dx = g_out[0];
        (value, grad)
    }

    fn cdf(&self, x: f64) -> f64 {
        sigmoid(self.logit(x))
    }

    /// `c(x + 0.5) − c(x − 0.5)` evaluated on whichever sigmoid tail keeps
    /// precision.
    fn bin(&self, x: f64) -> f64 {
        let (lo, hi) = (self.logit(x - 0.5), self.logit(x + 0.5));
        let s = if lo + hi > 0.0 { -1.0 } else { 1.0 };
        (sigmoid(s * hi) - sigmoid(s * lo)).abs()
    }
}

fn sigmoid_slope(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

impl FactorizedPrior {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        FactorizedPrior {
            name: name.into(),
            channels,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for k in 0..PRIOR_STAGES {
            names.push(format!("{}.matrix{k}", self.name));
        }
        for k in 0..PRIOR_STAGES {
            names.push(format!("{}.bias{k}", self.name));
        }
        for k in 0..PRIOR_STAGES - 1 {
            names.push(format!("{}.factor{k}", self.name));
        }
        names
    }

    /// Matrices start so the chain's slope is 1; factors start at 0.
    pub fn init(&self, init: &mut Init) {
        let c = self.channels;
        for k in 0..PRIOR_STAGES {
            let (i, o) = (PRIOR_DIMS[k], PRIOR_DIMS[k + 1]);
            let raw = (1.0 / o as f64).exp_m1().ln();
            init.constant(format!("{}.matrix{k}", self.name), &[c, o, i], raw);
            init.uniform(format!("{}.bias{k}", self.name), &[c, o, 1], -0.5, 0.5);
            if k < PRIOR_STAGES - 1 {
                init.constant(format!("{}.factor{k}", self.name), &[c, o, 1], 0.0);
            }
        }
    }

    fn channels_from_store(&self, store: &ParamStore) -> Vec<ChannelPrior> {
        let raw: Vec<Rc<Tensor>> = self
            .param_names()
            .iter()
            .map(|n| Rc::new(store.get(n).unwrap_or_else(|| panic!("missing parameter {n}")).clone()))
            .collect();
        (0..self.channels).map(|c| ChannelPrior::from_raw(&raw, c)).collect()
    }

    /// Cumulative `c(x)` of channel `c`.
    pub fn cdf(&self, store: &ParamStore, channel: usize, x: f64) -> f64 {
        self.channels_from_store(store)[channel].cdf(x)
    }

    /// Unfloored bin mass `c(s + 0.5) − c(s − 0.5)` of channel `channel`.
    pub fn bin_mass(&self, store: &ParamStore, channel: usize, s: f64) -> f64 {
        self.channels_from_store(store)[channel].bin(s)
    }

    /// Floored bin probabilities of every element of `z` (shape `[C, H, W]`).
    pub fn likelihood_values(&self, store: &ParamStore, z: &Tensor) -> Tensor {
        let priors = self.channels_from_store(store);
        let (c, h, w) = z.chw();
        let per = h * w;
        let data = (0..c * per).map(|i| priors[i / per].bin(z.data()[i]).max(P_MIN)).collect();
        Tensor::new(&[c, h, w], data)
    }

    /// Differentiable bin probabilities, floored at [`P_MIN`].
    pub fn likelihood<'g>(&self, ctx: &Ctx<'g>, z: Var<'g>) -> Var<'g> {
        let names = self.param_names();
        let params: Vec<Var<'g>> = names.iter().map(|n| ctx.param(n)).collect();
        let raw: Vec<Rc<Tensor>> = params.iter().map(|p| p.value()).collect();
        let priors: Vec<ChannelPrior> = (0..self.channels).map(|c| ChannelPrior::from_raw(&raw, c)).collect();
        let zv = z.value();
        let (c, h, w) = zv.chw();
        let per = h * w;
        let lik: Vec<f64> = (0..c * per).map(|i| priors[i / per].bin(zv.data()[i]).max(P_MIN)).collect();
        let lik_t = Tensor::new(&[c, h, w], lik.clone());
        let mut parents = vec![z];
        parents.extend(params);
        let shapes: Vec<Vec<usize>> = raw.iter().map(|t| t.shape().to_vec()).collect();
        ctx.graph().op(lik_t, &parents, move |g, needs| {
            let mut dz = vec![0.0; c * per];
            let mut dparams: Vec<Vec<f64>> = shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect();
            for i in 0..c * per {
                if lik[i] <= P_MIN || g.data()[i] == 0.0 {
                    continue;
                }
                let ch = i / per;
                let prior = &priors[ch];
                let x = zv.data()[i];
                let (hi, g_hi) = prior.logit_grad(x + 0.5);
                let (lo, g_lo) = prior.logit_grad(x - 0.5);
                let (w_hi, w_lo) = (g.data()[i] * sigmoid_slope(hi), g.data()[i] * sigmoid_slope(lo));
                dz[i] = w_hi * g_hi.dx - w_lo * g_lo.dx;
                for k in 0..PRIOR_STAGES {
                    let m = &mut dparams[k];
                    let per_m = g_hi.matrices[k].len();
                    for j in 0..per_m {
                        m[ch * per_m + j] += w_hi * g_hi.matrices[k][j] - w_lo * g_lo.matrices[k][j];
                    }
                    let b = &mut dparams[4 + k];
                    let per_b = g_hi.biases[k].len();
                    for j in 0..per_b {
                        b[ch * per_b + j] += w_hi * g_hi.biases[k][j] - w_lo * g_lo.biases[k][j];
                    }
                    if k < PRIOR_STAGES - 1 {
                        let a = &mut dparams[8 + k];
                        for j in 0..per_b {
                            a[ch * per_b + j] += w_hi * g_hi.factors[k][j] - w_lo * g_lo.factors[k][j];
                        }
                    }
                }
            }
            let mut out = vec![needs[0].then(|| Tensor::new(&[c, h, w], dz))];
            out.extend(
                dparams
                    .into_iter()
                    .zip(&shapes)
                    .enumerate()
                    .map(|(k, (d, s))| needs[k + 1].then(|| Tensor::new(s, d))),
            );
            out
        })
    }

    /// One table per channel over the integers whose bins hold all but
    /// [`TAIL_MASS`] of the distribution, followed by an escape bin holding
    /// the rest (see [`crate::escape`]).
    pub fn build_tables(&self, store: &ParamStore) -> CdfTables {
        let mut tables = CdfTables::new();
        for prior in self.channels_from_store(store) {
            let quantile = |p: f64| {
                let (mut lo, mut hi) = (-1.0e4, 1.0e4);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if prior.cdf(mid) < p {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            };
            let first = (quantile(TAIL_MASS / 2.0) + 0.5).floor() as i64;
            let mut last = (quantile(1.0 - TAIL_MASS / 2.0) - 0.5).ceil() as i64;
            last = last.clamp(first, first + MAX_TABLE_SYMBOLS as i64 - 2);
            let mut pmf: Vec<f64> = (first..=last)
                .map(|s| {
                    let s = s as f64;
                    (prior.cdf(s + 0.5) - prior.cdf(s - 0.5)).max(0.0)
                })
                .collect();
            let outside = prior.cdf(first as f64 - 0.5) + (1.0 - prior.cdf(last as f64 + 0.5));
            pmf.push(outside.max(0.0));
            tables.push_frequencies(first as i32, &quantize_pmf(&pmf));
        }
        tables
    }
}

/// Longest table support.
pub const MAX_TABLE_SYMBOLS: usize = 8192;

/// Integer frequencies summing to [`CDF_TOTAL`], each at least 1. The
/// rounding remainder goes to the most probable bin.
pub fn quantize_pmf(pmf: &[f64]) -> Vec<u32> {
    let n = pmf.len();
    assert!(n >= 1 && n < CDF_TOTAL as usize);
    let total: f64 = pmf.iter().sum();
    let spare = (CDF_TOTAL as usize - n) as f64;
    let mut freqs: Vec<u32> = pmf.iter().map(|p| 1 + (p / total * spare).floor() as u32).collect();
    let used: u32 = freqs.iter().sum();
    let mut best = 0;
    for i in 1..n {
        if pmf[i] > pmf[best] {
            best = i;
        }
    }
    freqs[best] += CDF_TOTAL - used;
    freqs
}

/// `SCALE_LEVELS` log-spaced scales from [`SCALE_FLOOR`] to [`SCALE_CEIL`].
pub fn scale_table() -> Vec<f64> {
    let (a, b) = (SCALE_FLOOR.ln(), SCALE_CEIL.ln());
    let last = (SCALE_LEVELS - 1) as f64;
    (0..SCALE_LEVELS)
        .map(|k| match k {
            0 => SCALE_FLOOR,
            k if k == SCALE_LEVELS - 1 => SCALE_CEIL,
            k => (a + (b - a) * k as f64 / last).exp(),
        })
        .collect()
}

/// Index of the smallest table scale ≥ `scale`, saturating at the top.
pub fn scale_index(scales: &[f64], scale: f64) -> usize {
    scales.partition_point(|&s| s < scale).min(scales.len() - 1)
}

/// Gaussian tables for offsets `round(y − μ)`, one per scale level. Each
/// covers `[−T, T]` with `T` the smallest half-width leaving less than
/// [`TAIL_MASS`] outside, followed by an escape bin holding that remainder.
pub fn gaussian_tables(scales: &[f64]) -> CdfTables {
    let mut tables = CdfTables::new();
    for &s in scales {
        let mut t = 0i64;
        while 2.0 * normal_cdf(-(t as f64 + 0.5) / s) >= TAIL_MASS {
            t += 1;
        }
        let mut pmf: Vec<f64> = (-t..=t)
            .map(|k| {
                let k = k as f64;
                normal_cdf((k + 0.5) / s) - normal_cdf((k - 0.5) / s)
            })
            .collect();
        pmf.push(2.0 * normal_cdf(-(t as f64 + 0.5) / s));
        tables.push_frequencies(-t as i32, &quantize_pmf(&pmf));
    }
    tables
}

/// Everything the coder needs from a trained entropy model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelTables {
    pub scales: Vec<f64>,
    pub gaussian: CdfTables,
    pub factorized: CdfTables,
}

#[derive(Clone, Debug)]
pub struct EntropyModel {
    pub config: EntropyConfig,
    hyper_encoder: Vec<Conv>,
    hyper_decoder: Vec<HyperDecoderLayer>,
    pub context: Option<MaskedConv5>,
    pub param_net: [Conv; 3],
    pub prior: FactorizedPrior,
}

#[derive(Clone, Debug)]
enum HyperDecoderLayer {
    Conv(Conv),
    Subpixel(SubpixelConv),
}

/// Entropy parameters at one latent position.
pub struct PositionParams {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl EntropyModel {
    pub fn new(config: EntropyConfig) -> Self {
        let n = config.n;
        let hyper_encoder = (0..5)
            .map(|i| Conv::new(format!("entropy.hyper_enc.{i}"), n, n, 3, if i == 2 || i == 4 { 2 } else { 1 }))
            .collect();
        let hd = |i: usize| format!("entropy.hyper_dec.{i}");
        let hyper_decoder = vec![
            HyperDecoderLayer::Conv(Conv::new(hd(0), n, n, 3, 1)),
            HyperDecoderLayer::Subpixel(SubpixelConv::new(hd(1), n, n)),
            HyperDecoderLayer::Conv(Conv::new(hd(2), n, 3 * n / 2, 3, 1)),
            HyperDecoderLayer::Subpixel(SubpixelConv::new(hd(3), 3 * n / 2, 3 * n / 2)),
            HyperDecoderLayer::Conv(Conv::new(hd(4), 3 * n / 2, 2 * n, 3, 1)),
        ];
        let in_ch = if config.context_model { 3 * n } else { 2 * n };
        let [w1, w2] = config.param_widths;
        EntropyModel {
            hyper_encoder,
            hyper_decoder,
            context: config.context_model.then(|| MaskedConv5::new("entropy.context", n, n)),
            param_net: [
                Conv::new("entropy.params.0", in_ch, w1, 1, 1),
                Conv::new("entropy.params.1", w1, w2, 1, 1),
                Conv::new("entropy.params.2", w2, 2 * n, 1, 1),
            ],
            prior: FactorizedPrior::new("entropy.prior", n),
            config,
        }
    }

    pub fn init(&self, init: &mut Init) {
        for c in &self.hyper_encoder {
            c.init(init);
        }
        for l in &self.hyper_decoder {
            match l {
                HyperDecoderLayer::Conv(c) => c.init(init),
                HyperDecoderLayer::Subpixel(s) => s.init(init),
            }
        }
        if let Some(cm) = &self.context {
            cm.init(init);
        }
        for c in &self.param_net {
            c.init(init);
        }
        // Start every scale well above the floor so its gradient is live.
        let n = self.config.n;
        let mut bias = vec![0.0; 2 * n];
        bias[n..].fill(1.0);
        init.tensor(self.param_net[2].bias_name(), Tensor::new(&[2 * n], bias));
        self.prior.init(init);
    }

    pub fn hyper_encode<'g>(&self, ctx: &Ctx<'g>, y: Var<'g>) -> Var<'g> {
        let mut h = y;
        for (i, c) in self.hyper_encoder.iter().enumerate() {
            h = c.forward(ctx, h);
            if i + 1 < self.hyper_encoder.len() {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
        }
        h
    }

    /// ψ with `2N` channels, cropped to the latent dims.
    pub fn hyper_decode<'g>(&self, ctx: &Ctx<'g>, z_hat: Var<'g>, y_dims: (usize, usize)) -> Var<'g> {
        let mut h = z_hat;
        for (i, l) in self.hyper_decoder.iter().enumerate() {
            h = match l {
                HyperDecoderLayer::Conv(c) => c.forward(ctx, h),
                HyperDecoderLayer::Subpixel(s) => s.forward(ctx, h),
            };
            if i + 1 < self.hyper_decoder.len() {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
        }
        h.crop(y_dims.0, y_dims.1)
    }

    /// μ and σ (clamped at [`SCALE_FLOOR`]) from ψ and, with the context
    /// model, the causal context of `ŷ`.
    pub fn parameters<'g>(&self, ctx: &Ctx<'g>, psi: Var<'g>, y_hat: Option<Var<'g>>) -> (Var<'g>, Var<'g>) {
        let input = match (&self.context, y_hat) {
            (Some(cm), Some(y)) => Var::concat(&[psi, cm.forward(ctx, y)]),
            (None, _) => psi,
            (Some(_), None) => panic!("context model needs ŷ"),
        };
        let h = self.param_net[0].forward(ctx, input).leaky_relu(LEAKY_SLOPE);
        let h = self.param_net[1].forward(ctx, h).leaky_relu(LEAKY_SLOPE);
        let out = self.param_net[2].forward(ctx, h);
        let n = self.config.n;
        (out.channel_range(0, n), out.channel_range(n, 2 * n).clamp_min(SCALE_FLOOR))
    }

    /// Per-position entropy parameters with a fixed accumulation order,
    /// reading only ψ at `(row, col)` and `ŷ` strictly before it in raster
    /// order. Encoder and decoder both go through this routine.
    pub fn parameters_at(&self, store: &ParamStore, psi: &Tensor, y_hat: &Tensor, row: usize, col: usize) -> PositionParams {
        let n = self.config.n;
        let (_, h, w) = psi.chw();
        let mut input: Vec<f64> = (0..2 * n).map(|c| psi.data()[(c * h + row) * w + col]).collect();
        if let Some(cm) = &self.context {
            let weight = store.get(&cm.conv.weight_name()).expect("context weight");
            let bias = store.get(&cm.conv.bias_name()).expect("context bias");
            let mut ctx_out = vec![0.0; n];
            MaskedConv5::at_position(weight, bias, y_hat, row, col, &mut ctx_out);
            input.extend(ctx_out);
        }
        for (i, conv) in self.param_net.iter().enumerate() {
            let weight = store.get(&conv.weight_name()).expect("param weight");
            let bias = store.get(&conv.bias_name()).expect("param bias");
            let (o, k) = (conv.out_ch, conv.in_ch);
            let mut out = vec![0.0; o];
            for (r, slot) in out.iter_mut().enumerate() {
                let row_w = &weight.data()[r * k..(r + 1) * k];
                let mut acc = bias.data()[r];
                for (a, b) in row_w.iter().zip(&input) {
                    acc += a * b;
                }
                *slot = if i < 2 && acc < 0.0 { acc * LEAKY_SLOPE } else { acc };
            }
            input = out;
        }
        PositionParams {
            mean: input[..n].to_vec(),
            scale: input[n..].iter().map(|&s| s.max(SCALE_FLOOR)).collect(),
        }
    }

    pub fn build_tables(&self, store: &ParamStore) -> ModelTables {
        let scales = scale_table();
        ModelTables {
            gaussian: gaussian_tables(&scales),
            factorized: self.prior.build_tables(store),
            scales,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::SeedableRng;

    fn model(n: usize, cm: bool) -> (EntropyModel, ParamStore) {
        let m = EntropyModel::new(EntropyConfig::new(n, cm).unwrap());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        m.init(&mut Init {
            store: &mut store,
            rng: &mut rng,
        });
        (m, store)
    }

    #[test]
    fn config_widths() {
        assert_eq!(EntropyConfig::new(192, true).unwrap().param_widths, [640, 512]);
        assert_eq!(EntropyConfig::new(128, true).unwrap().param_widths, [427, 341]);
        assert_eq!(EntropyConfig::new(32, true).unwrap().param_widths, [107, 85]);
        assert_eq!(EntropyConfig::new(129, true), Err(ConfigError::OddLatentChannels(129)));
    }

    #[test]
    fn quantization_examples() {
        assert_eq!(quantize_round(1.4, 0.0), 1.0);
        assert!((quantize_round(1.4, 0.45) - 1.45).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = uniform_noise(&mut rng, &[1000]);
        assert!(u.data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn gaussian_bin_examples() {
        assert!((gaussian_bin_probability(0.0, 0.0, 1.0) - 0.382925).abs() < 1e-5);
        assert!(gaussian_bin_probability(0.0, 0.0, SCALE_FLOOR) > 0.9999);
        for (mu, sigma) in [(0.3f64, 1.0f64), (-2.2, 7.5), (0.0, 0.11)] {
            let lo = (mu - 40.0 * sigma).floor() as i64;
            let hi = (mu + 40.0 * sigma).ceil() as i64;
            let total: f64 = (lo..=hi).map(|s| gaussian_bin(s as f64 - mu, sigma)).sum();
            assert!((total - 1.0).abs() < 1e-6, "{total}");
        }
    }

    #[test]
    fn rate_examples() {
        assert_eq!(estimate_bits(&Tensor::full(&[1000], 0.5)), 1000.0);
        assert_eq!(estimate_bits(&Tensor::full(&[10], 1.0)), 0.0);
    }

    #[test]
    fn hyper_geometry() {
        let (m, store) = model(8, true);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store);
        let z = m.hyper_encode(&ctx, ctx.input(Tensor::full(&[8, 8, 8], 0.1)));
        assert_eq!(z.shape(), vec![8, 2, 2]);
        let psi = m.hyper_decode(&ctx, z, (8, 8));
        assert_eq!(psi.shape(), vec![16, 8, 8]);
        let z = m.hyper_encode(&ctx, ctx.input(Tensor::full(&[8, 3, 5], 0.1)));
        assert_eq!(z.shape(), vec![8, 1, 2]);
        assert_eq!(m.hyper_decode(&ctx, z, (3, 5)).shape(), vec![16, 3, 5]);
    }

    #[test]
    fn parameters_split_and_floor() {
        for cm in [false, true] {
            let (m, store) = model(4, cm);
            let g = Graph::inference();
            let ctx = Ctx::new(&g, &store);
            let psi = ctx.input(Tensor::new(&[8, 3, 3], (0..72).map(|i| (i as f64 * 0.3).sin() * 3.0).collect()));
            let y = ctx.input(Tensor::new(&[4, 3, 3], (0..36).map(|i| (i as f64).cos()).collect()));
            let (mu, sigma) = m.parameters(&ctx, psi, Some(y));
            assert_eq!(mu.shape(), vec![4, 3, 3]);
            assert!(sigma.value().data().iter().all(|&s| s >= SCALE_FLOOR));
            for r in 0..3 {
                for c in 0..3 {
                    let p = m.parameters_at(&store, &psi.value(), &y.value(), r, c);
                    for ch in 0..4 {
                        assert!((p.mean[ch] - mu.value().at(ch, r, c)).abs() < 1e-10);
                        assert!((p.scale[ch] - sigma.value().at(ch, r, c)).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn no_context_model_never_reads_latent() {
        let (m, store) = model(4, false);
        let psi = Tensor::full(&[8, 2, 2], 0.4);
        let a = m.parameters_at(&store, &psi, &Tensor::zeros(&[4, 2, 2]), 1, 1);
        let b = m.parameters_at(&store, &psi, &Tensor::full(&[4, 2, 2], 9.0), 1, 1);
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.scale, b.scale);
    }

    #[test]
    fn fresh_prior_is_a_distribution() {
        let (m, store) = model(4, false);
        for c in 0..4 {
            assert!(m.prior.cdf(&store, c, -30.0) < 1e-6);
            assert!(m.prior.cdf(&store, c, 30.0) > 1.0 - 1e-6);
            let z = Tensor::new(&[1, 1, 61], (-30..=30).map(|s| s as f64).collect());
            let sub = FactorizedPrior::new("entropy.prior", 4);
            let lik = sub.likelihood_values(&store, &Tensor::concat_channels(&[&z, &z, &z, &z]));
            // The floor adds up to 2^-16 per far-tail bin, so normalization
            // is checked on the unfloored masses.
            let total: f64 = (-30..=30).map(|s| m.prior.bin_mass(&store, c, s as f64)).sum();
            assert!((total - 1.0).abs() < 1e-4, "{total}");
            assert!(lik.data().iter().all(|&p| p >= P_MIN));
            let mut prev = 0.0;
            for i in 0..1000 {
                let v = m.prior.cdf(&store, c, -50.0 + i as f64 * 0.1);
                assert!(v >= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn tables_are_normalized() {
        let scales = scale_table();
        assert_eq!(scales.len(), 64);
        assert_eq!(scales[0], SCALE_FLOOR);
        assert_eq!(scales[63], SCALE_CEIL);
        assert!(scales.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(scale_index(&scales, 0.11), 0);
        assert_eq!(scale_index(&scales, 0.1100001), 1);
        assert_eq!(scale_index(&scales, 1e6), 63);
        let (m, store) = model(4, true);
        let t = m.build_tables(&store);
        for tables in [&t.gaussian, &t.factorized] {
            tables.validate().unwrap();
            for i in 0..tables.len() {
                let (_, cdf) = tables.table(i);
                assert_eq!(*cdf.last().unwrap(), 65536);
                assert!(cdf.windows(2).all(|w| w[1] > w[0]));
            }
        }
        assert_eq!(t.gaussian.len(), 64);
        assert_eq!(t.factorized.len(), 4);
        assert_eq!(t, m.build_tables(&store));
    }

    #[test]
    fn table_probabilities_track_the_model() {
        let scales = scale_table();
        let tables = gaussian_tables(&scales);
        let k = scale_index(&scales, 2.0);
        let s = scales[k];
        let (offset, cdf) = tables.table(k);
        for sym in -3..=3 {
            let i = (sym - offset) as usize;
            let q = (cdf[i + 1] - cdf[i]) as f64 / 65536.0;
            let p = gaussian_bin(sym as f64, s);
            assert!((q - p).abs() < 1e-3, "{sym}: {q} vs {p}");
        }
    }

    #[test]
    fn quantized_pmf_keeps_every_bin() {
        let f = quantize_pmf(&[1.0, 0.0, 1e-12, 0.5]);
        assert_eq!(f.iter().sum::<u32>(), 65536);
        assert!(f.iter().all(|&v| v >= 1));
    }
}
