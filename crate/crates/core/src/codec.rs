//! The full codec: FENet, entropy model and DRNet wired together, with a
//! differentiable training pass, a coding-free inference pass and real
//! encode/decode through an [`EntropyCoder`].

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{gaussian_bin, Graph, Var};
use crate::bitstream::{self, BitstreamError, StreamHeader, FLAG_CONTEXT_MODEL, FLAG_TOP_DOWN};
use crate::coder::{CoderError, EntropyCoder, SymbolDecoder};
use crate::drnet::{DrNet, DrNetConfig, Pathway};
use crate::escape;
use crate::entropy::{
    scale_index, uniform_noise, ConfigError, EntropyConfig, EntropyModel, ModelTables, P_MIN,
};
use crate::fenet::{FeNet, FeNetConfig, FuseError};
use crate::params::{Ctx, Init, ParamStore};
use crate::pyramid::{FeaturePyramid, Plane, PyramidError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Latent channel count.
    pub n: usize,
    /// Pyramid channel count.
    pub channels: usize,
    pub context_model: bool,
    pub pathway: Pathway,
    /// Plain residual blocks per FENet encoding block.
    #[serde(default = "default_residual_units")]
    pub residual_units: usize,
    /// Quality index written into stream headers.
    #[serde(default)]
    pub quality_index: u8,
}

fn default_residual_units() -> usize {
    1
}

impl CodecConfig {
    pub fn new(n: usize, channels: usize, context_model: bool) -> Self {
        CodecConfig {
            n,
            channels,
            context_model,
            pathway: Pathway::BottomUp,
            residual_units: 1,
            quality_index: 0,
        }
    }

    pub fn flags(&self) -> u8 {
        let mut f = 0;
        if self.context_model {
            f |= FLAG_CONTEXT_MODEL;
        }
        if self.pathway == Pathway::TopDown {
            f |= FLAG_TOP_DOWN;
        }
        f
    }
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Fuse(#[from] FuseError),
    #[error("stream does not match the model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub fenet: FeNet,
    pub drnet: DrNet,
    pub entropy: EntropyModel,
}

/// Differentiable outputs of one training pass.
pub struct TrainOutputs<'g> {
    /// p̂2..p̂6 at the unpadded dims.
    pub recon: [Var<'g>; 5],
    pub y_likelihood: Var<'g>,
    pub z_likelihood: Var<'g>,
}

/// Rate estimate in bits, split by latent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub y_bits: f64,
    pub z_bits: f64,
}

impl RateEstimate {
    pub fn total(&self) -> f64 {
        self.y_bits + self.z_bits
    }
}

/// Quantized latents and the symbols that code them.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    pub y_symbols: Vec<i32>,
    pub y_indexes: Vec<u32>,
    pub z_symbols: Vec<i32>,
    pub z_indexes: Vec<u32>,
    pub estimate: RateEstimate,
}

/// Result of the coding-free inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub latents: Latents,
    pub recon: FeaturePyramid,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub stream: Vec<u8>,
    pub latents: Latents,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub header: StreamHeader,
    pub y_hat: Tensor,
    pub recon: FeaturePyramid,
}

/// Rounded latent value as a coded symbol. Anything beyond ±2^30 is far
/// outside every table and saturates there.
fn to_symbol(v: f64) -> i32 {
    v.clamp(-(1 << 30) as f64, (1 << 30) as f64) as i32
}

fn latent_order(c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..h).flat_map(move |r| (0..w).flat_map(move |col| (0..c).map(move |ch| (ch, r, col))))
}

impl Codec {
    pub fn new(config: CodecConfig) -> Result<Self, CodecError> {
        let entropy = EntropyModel::new(EntropyConfig::new(config.n, config.context_model)?);
        let mut fe = FeNetConfig::new(config.n, config.channels);
        fe.residual_units = config.residual_units;
        Ok(Codec {
            fenet: FeNet::new(fe),
            drnet: DrNet::new(DrNetConfig {
                n: config.n,
                channels: config.channels,
                pathway: config.pathway,
            }),
            entropy,
            config,
        })
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        self.fenet.init(&mut init);
        self.entropy.init(&mut init);
        self.drnet.init(&mut init);
        store
    }

    fn check_channels(&self, pyr: &FeaturePyramid) -> Result<(), CodecError> {
        if pyr.channels != self.config.channels {
            return Err(CodecError::Mismatch(format!(
                "pyramid has {} channels, model expects {}",
                pyr.channels, self.config.channels
            )));
        }
        Ok(())
    }

    fn analysis<'g>(&self, ctx: &Ctx<'g>, pyr: &FeaturePyramid) -> Result<Var<'g>, CodecError> {
        self.check_channels(pyr)?;
        let padded = pyr.pad();
        let layers = [0, 1, 2, 3].map(|i| ctx.input(padded.layers[i].to_tensor()));
        Ok(self.fenet.forward(ctx, layers)?)
    }

    /// Training pass with additive-noise quantization.
    pub fn forward_train<'g>(
        &self,
        ctx: &Ctx<'g>,
        pyr: &FeaturePyramid,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainOutputs<'g>, CodecError> {
        let y = self.analysis(ctx, pyr)?;
        let y_shape = y.shape();
        let z = self.entropy.hyper_encode(ctx, y);
        let z_tilde = z.add_fixed(&uniform_noise(rng, &z.shape()));
        let z_likelihood = self.entropy.prior.likelihood(ctx, z_tilde);
        let psi = self.entropy.hyper_decode(ctx, z_tilde, (y_shape[1], y_shape[2]));
        let y_tilde = y.add_fixed(&uniform_noise(rng, &y_shape));
        let (mu, sigma) = self.entropy.parameters(ctx, psi, Some(y_tilde));
        let y_likelihood = y_tilde.gaussian_likelihood(mu, sigma, P_MIN);
        let recon = self.drnet.forward(ctx, y_tilde, &pyr.dims());
        Ok(TrainOutputs {
            recon,
            y_likelihood,
            z_likelihood,
        })
    }

    /// ẑ symbols. Values outside a channel's table go through its escape bin.
    fn quantize_z(&self, z: &Tensor) -> (Tensor, Vec<i32>, Vec<u32>) {
        let (c, h, w) = z.chw();
        let mut symbols = Vec::with_capacity(c * h * w);
        let mut indexes = Vec::with_capacity(c * h * w);
        let mut hat = Tensor::zeros(&[c, h, w]);
        for (ch, r, col) in latent_order(c, h, w) {
            let s = to_symbol(z.at(ch, r, col).round());
            symbols.push(s);
            indexes.push(ch as u32);
            hat.data_mut()[(ch * h + r) * w + col] = s as f64;
        }
        (hat, symbols, indexes)
    }

    fn z_bits(&self, store: &ParamStore, z_hat: &Tensor) -> f64 {
        crate::entropy::estimate_bits(&self.entropy.prior.likelihood_values(store, z_hat))
    }

    fn psi(&self, store: &ParamStore, z_hat: &Tensor, y_dims: (usize, usize)) -> Tensor {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, store);
        let psi = self.entropy.hyper_decode(&ctx, ctx.input(z_hat.clone()), y_dims);
        psi.value().as_ref().clone()
    }

    /// Parallel (context-free) μ and σ.
    fn parallel_parameters(&self, store: &ParamStore, psi: &Tensor) -> (Tensor, Tensor) {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, store);
        let (mu, sigma) = self.entropy.parameters(&ctx, ctx.input(psi.clone()), None);
        (mu.value().as_ref().clone(), sigma.value().as_ref().clone())
    }

    /// Walks the latent in coding order, asking `symbol_at` for each coded
    /// offset given `(channel, row, col, mean, table index)`. The encoder
    /// derives it from `y`, the decoder reads it from the stream; both see
    /// identical means and scales.
    fn quantize_y(
        &self,
        store: &ParamStore,
        psi: &Tensor,
        tables: &ModelTables,
        mut symbol_at: impl FnMut(usize, usize, usize, f64, u32) -> Result<i32, CoderError>,
    ) -> Result<(Tensor, Vec<i32>, Vec<u32>, f64), CoderError> {
        let n = self.config.n;
        let (_, h, w) = psi.chw();
        let mut y_hat = Tensor::zeros(&[n, h, w]);
        let mut symbols = Vec::with_capacity(n * h * w);
        let mut indexes = Vec::with_capacity(n * h * w);
        let mut bits = 0.0;
        let parallel = (!self.config.context_model).then(|| self.parallel_parameters(store, psi));
        for r in 0..h {
            for col in 0..w {
                let (means, scales) = match &parallel {
                    Some((mu, sigma)) => (
                        (0..n).map(|c| mu.at(c, r, col)).collect::<Vec<_>>(),
                        (0..n).map(|c| sigma.at(c, r, col)).collect::<Vec<_>>(),
                    ),
                    None => {
                        let p = self.entropy.parameters_at(store, psi, &y_hat, r, col);
                        (p.mean, p.scale)
                    }
                };
                for ch in 0..n {
                    let idx = scale_index(&tables.scales, scales[ch]) as u32;
                    let s = symbol_at(ch, r, col, means[ch], idx)?;
                    y_hat.data_mut()[(ch * h + r) * w + col] = s as f64 + means[ch];
                    bits -= gaussian_bin(s as f64, scales[ch]).max(P_MIN).log2();
                    symbols.push(s);
                    indexes.push(idx);
                }
            }
        }
        Ok((y_hat, symbols, indexes, bits))
    }

    /// Rounded latents for a pyramid, without entropy coding.
    pub fn latents(&self, store: &ParamStore, tables: &ModelTables, pyr: &FeaturePyramid) -> Result<Latents, CodecError> {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, store);
        let y = self.analysis(&ctx, pyr)?;
        let z = self.entropy.hyper_encode(&ctx, y);
        let y = y.value();
        let (z_hat, z_symbols, z_indexes) = self.quantize_z(&z.value());
        let z_bits = self.z_bits(store, &z_hat);
        let (_, h, w) = y.chw();
        let psi = self.psi(store, &z_hat, (h, w));
        let (y_hat, y_symbols, y_indexes, y_bits) =
            self.quantize_y(store, &psi, tables, |ch, r, col, mu, _| Ok(to_symbol((y.at(ch, r, col) - mu).round())))?;
        Ok(Latents {
            y_hat,
            z_hat,
            y_symbols,
            y_indexes,
            z_symbols,
            z_indexes,
            estimate: RateEstimate { y_bits, z_bits },
        })
    }

    /// Reconstructed pyramid from a quantized latent.
    pub fn synthesize(&self, store: &ParamStore, y_hat: &Tensor, image_width: u32, image_height: u32) -> Result<FeaturePyramid, CodecError> {
        let dims = [2u8, 3, 4, 5].map(|l| crate::pyramid::layer_dims(image_width, image_height, l));
        let mut d = [(0, 0); 4];
        for (slot, r) in d.iter_mut().zip(dims) {
            *slot = r?;
        }
        let g = Graph::inference();
        let ctx = Ctx::new(&g, store);
        let recon = self.drnet.forward(&ctx, ctx.input(y_hat.clone()), &d);
        let layers = [0, 1, 2, 3].map(|i| Plane::from_tensor(&recon[i].value()));
        Ok(FeaturePyramid::new(image_width, image_height, layers)?)
    }

    /// Coding-free inference: rounded latents and their reconstruction.
    pub fn infer(&self, store: &ParamStore, tables: &ModelTables, pyr: &FeaturePyramid) -> Result<Inference, CodecError> {
        let latents = self.latents(store, tables, pyr)?;
        let recon = self.synthesize(store, &latents.y_hat, pyr.image_width, pyr.image_height)?;
        Ok(Inference { latents, recon })
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        tables: &ModelTables,
        coder: &dyn EntropyCoder,
        pyr: &FeaturePyramid,
    ) -> Result<Encoded, CodecError> {
        let latents = self.latents(store, tables, pyr)?;
        let (zs, zi) = escape::expand(&latents.z_symbols, &latents.z_indexes, &tables.factorized);
        let z_bytes = coder.encode(&zs, &zi, &escape::with_group_table(&tables.factorized))?;
        let (ys, yi) = escape::expand(&latents.y_symbols, &latents.y_indexes, &tables.gaussian);
        let y_bytes = coder.encode(&ys, &yi, &escape::with_group_table(&tables.gaussian))?;
        let (_, yh, yw) = latents.y_hat.chw();
        let (_, zh, zw) = latents.z_hat.chw();
        let header = StreamHeader {
            version: bitstream::VERSION,
            flags: self.config.flags(),
            n: self.config.n as u16,
            quality_index: self.config.quality_index,
            channels: self.config.channels as u16,
            image_width: pyr.image_width,
            image_height: pyr.image_height,
            y_height: yh as u16,
            y_width: yw as u16,
            z_height: zh as u16,
            z_width: zw as u16,
            z_len: 0,
            y_len: 0,
        };
        let stream = bitstream::serialize(&header, &z_bytes, &y_bytes)?;
        Ok(Encoded { stream, latents })
    }

    fn check_header(&self, h: &StreamHeader) -> Result<(), CodecError> {
        let mut problems = Vec::new();
        if h.n as usize != self.config.n {
            problems.push(format!("N {} vs model {}", h.n, self.config.n));
        }
        if h.channels as usize != self.config.channels {
            problems.push(format!("channels {} vs model {}", h.channels, self.config.channels));
        }
        if h.context_model() != self.config.context_model {
            problems.push(format!(
                "context model {} vs model {}",
                h.context_model(),
                self.config.context_model
            ));
        }
        if h.top_down() != (self.config.pathway == Pathway::TopDown) {
            problems.push("mixing pathway differs".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CodecError::Mismatch(problems.join("; ")))
        }
    }

    pub fn decode(
        &self,
        store: &ParamStore,
        tables: &ModelTables,
        coder: &dyn EntropyCoder,
        stream: &[u8],
    ) -> Result<Decoded, CodecError> {
        let (header, z_bytes, y_bytes) = bitstream::parse(stream)?;
        self.check_header(&header)?;
        let n = self.config.n;
        let (zh, zw) = (header.z_height as usize, header.z_width as usize);
        let z_blob = escape::with_group_table(&tables.factorized);
        let mut z_dec = coder.stream_decoder(z_bytes, &z_blob)?;
        let mut z_hat = Tensor::zeros(&[n, zh, zw]);
        for (ch, r, col) in latent_order(n, zh, zw) {
            let s = escape::read_symbol(z_dec.as_mut(), &tables.factorized, ch as u32)?;
            z_hat.data_mut()[(ch * zh + r) * zw + col] = s as f64;
        }
        let y_dims = (header.y_height as usize, header.y_width as usize);
        let psi = self.psi(store, &z_hat, y_dims);
        let y_blob = escape::with_group_table(&tables.gaussian);
        let mut dec: Box<dyn SymbolDecoder> = coder.stream_decoder(y_bytes, &y_blob)?;
        let (y_hat, _, _, _) =
            self.quantize_y(store, &psi, tables, |_, _, _, _, idx| escape::read_symbol(dec.as_mut(), &tables.gaussian, idx))?;
        let recon = self.synthesize(store, &y_hat, header.image_width, header.image_height)?;
        Ok(Decoded { header, y_hat, recon })
    }
}
