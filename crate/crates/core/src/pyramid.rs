//! Multi-scale feature pyramids {p2..p6}: geometry, padding, the FPF file
//! format, a synthetic generator and the tiled 10-bit anchor packer.
//!
//! Level `i` has stride `2^i` relative to the input image, so
//! `dims(p_i) = ceil(image_dim / 2^i)`. Only p2..p5 are stored; p6 is always
//! re-derived from p5 by stride-2 subsampling.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::Tensor;

pub const STORED_LEVELS: [u8; 4] = [2, 3, 4, 5];
pub const DEFAULT_CHANNELS: usize = 256;
/// Total downsampling from p2 to the latent.
pub const P2_PAD_MULTIPLE: usize = 16;
pub const MIN_IMAGE_DIM: u32 = 64;

const FPF_MAGIC: &[u8; 4] = b"FPF1";
const FPF_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("level {0} outside 2..=6")]
    LevelOutOfRange(u8),
    #[error("image dims {0}x{1} below the {MIN_IMAGE_DIM}-pixel minimum")]
    ImageTooSmall(u32, u32),
    #[error("bad FPF magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported FPF version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated FPF file")]
    Truncated,
    #[error("level {level}: dims {got:?} do not match {expected:?} for the image size")]
    DimMismatch {
        level: u8,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("channel mismatch: header says {header}, layer has {layer}")]
    ChannelMismatch { header: usize, layer: usize },
    #[error("pyramid must hold levels 2..=5 exactly once, got {0:?}")]
    MissingLevels(Vec<u8>),
    #[error("non-finite feature value")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One feature map, `[channels, height, width]` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Plane {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Plane {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (channels, height, width) = t.chw();
        Plane {
            channels,
            height,
            width,
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Top-left crop.
    pub fn crop(&self, height: usize, width: usize) -> Plane {
        Plane::from_fn(self.channels, height, width, |c, y, x| self.get(c, y, x))
    }

    /// Window starting at `(top, left)`.
    pub fn window(&self, top: usize, left: usize, height: usize, width: usize) -> Plane {
        Plane::from_fn(self.channels, height, width, |c, y, x| self.get(c, top + y, left + x))
    }

    /// Bottom/right extension by replicating the last row and column.
    pub fn pad_replicate(&self, height: usize, width: usize) -> Plane {
        assert!(height >= self.height && width >= self.width);
        Plane::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, y.min(self.height - 1), x.min(self.width - 1))
        })
    }

    pub fn mse(&self, other: &Plane) -> f64 {
        assert_eq!(
            (self.channels, self.height, self.width),
            (other.channels, other.height, other.width)
        );
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        sum / self.data.len() as f64
    }
}

/// `(height, width)` of level `level` for an image of the given size.
pub fn layer_dims(image_width: u32, image_height: u32, level: u8) -> Result<(usize, usize), PyramidError> {
    if !(2..=6).contains(&level) {
        return Err(PyramidError::LevelOutOfRange(level));
    }
    let s = 1u32 << level;
    Ok((image_height.div_ceil(s) as usize, image_width.div_ceil(s) as usize))
}

/// Stride-2 subsampling (1×1 window): keeps every other row and column
/// starting from the origin.
pub fn subsample_p6(p5: &Plane) -> Plane {
    let (h, w) = (p5.height.div_ceil(2), p5.width.div_ceil(2));
    Plane::from_fn(p5.channels, h, w, |c, y, x| p5.get(c, 2 * y, 2 * x))
}

/// Padded per-level dims: p2 rounded up to a multiple of 16, each further
/// level exactly half of the one below.
pub fn padded_dims(p2: (usize, usize)) -> [(usize, usize); 4] {
    let h = p2.0.div_ceil(P2_PAD_MULTIPLE) * P2_PAD_MULTIPLE;
    let w = p2.1.div_ceil(P2_PAD_MULTIPLE) * P2_PAD_MULTIPLE;
    [(h, w), (h / 2, w / 2), (h / 4, w / 4), (h / 8, w / 8)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub image_width: u32,
    pub image_height: u32,
    pub channels: usize,
    /// p2, p3, p4, p5.
    pub layers: [Plane; 4],
    /// Unpadded per-level dims when the layers have been padded.
    pub original_dims: Option<[(usize, usize); 4]>,
}

impl FeaturePyramid {
    /// Validates channel counts, per-level geometry and finiteness.
    pub fn new(image_width: u32, image_height: u32, layers: [Plane; 4]) -> Result<Self, PyramidError> {
        let channels = layers[0].channels;
        for (plane, level) in layers.iter().zip(STORED_LEVELS) {
            if plane.channels != channels {
                return Err(PyramidError::ChannelMismatch {
                    header: channels,
                    layer: plane.channels,
                });
            }
            let expected = layer_dims(image_width, image_height, level)?;
            if plane.dims() != expected {
                return Err(PyramidError::DimMismatch {
                    level,
                    got: plane.dims(),
                    expected,
                });
            }
            if !plane.is_finite() {
                return Err(PyramidError::NonFinite);
            }
        }
        Ok(FeaturePyramid {
            image_width,
            image_height,
            channels,
            layers,
            original_dims: None,
        })
    }

    pub fn layer(&self, level: u8) -> &Plane {
        &self.layers[(level - 2) as usize]
    }

    pub fn p6(&self) -> Plane {
        subsample_p6(&self.layers[3])
    }

    pub fn is_padded(&self) -> bool {
        self.original_dims.is_some()
    }

    pub fn dims(&self) -> [(usize, usize); 4] {
        [0, 1, 2, 3].map(|i| self.layers[i].dims())
    }

    /// Replicate-pads p2 to a multiple of 16 and every higher level to
    /// exactly half of the level below; records the original dims.
    pub fn pad(&self) -> FeaturePyramid {
        if self.is_padded() {
            return self.clone();
        }
        let target = padded_dims(self.layers[0].dims());
        let layers = [0, 1, 2, 3].map(|i| self.layers[i].pad_replicate(target[i].0, target[i].1));
        FeaturePyramid {
            layers,
            original_dims: Some(self.dims()),
            ..self.clone()
        }
    }

    /// Crops a padded pyramid back to its recorded dims.
    pub fn unpad(&self) -> FeaturePyramid {
        match self.original_dims {
            None => self.clone(),
            Some(dims) => FeaturePyramid {
                layers: [0, 1, 2, 3].map(|i| self.layers[i].crop(dims[i].0, dims[i].1)),
                original_dims: None,
                ..self.clone()
            },
        }
    }

    /// Coherent crop across levels of an image-space window. All arguments
    /// must be multiples of 64 so every level is cut on whole samples.
    pub fn crop_image_window(&self, left: u32, top: u32, width: u32, height: u32) -> FeaturePyramid {
        assert!(left % 64 == 0 && top % 64 == 0 && width % 64 == 0 && height % 64 == 0);
        assert!(left + width <= self.image_width && top + height <= self.image_height);
        let layers = [0usize, 1, 2, 3].map(|i| {
            let s = 1u32 << (i + 2);
            self.layers[i].window(
                (top / s) as usize,
                (left / s) as usize,
                (height / s) as usize,
                (width / s) as usize,
            )
        });
        FeaturePyramid {
            image_width: width,
            image_height: height,
            channels: self.channels,
            layers,
            original_dims: None,
        }
    }
}

/// Writes an FPF file body. `layers` may hold any subset of levels.
pub fn write_fpf_layers<W: Write>(
    mut out: W,
    channels: usize,
    image_width: u32,
    image_height: u32,
    layers: &[(u8, &Plane)],
) -> Result<(), PyramidError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FPF_MAGIC);
    buf.push(FPF_VERSION);
    buf.push(layers.len() as u8);
    buf.extend_from_slice(&(channels as u16).to_le_bytes());
    buf.extend_from_slice(&image_width.to_le_bytes());
    buf.extend_from_slice(&image_height.to_le_bytes());
    for (level, plane) in layers {
        if plane.channels != channels {
            return Err(PyramidError::ChannelMismatch {
                header: channels,
                layer: plane.channels,
            });
        }
        buf.push(*level);
        buf.extend_from_slice(&(plane.height as u32).to_le_bytes());
        buf.extend_from_slice(&(plane.width as u32).to_le_bytes());
        buf.reserve(plane.data.len() * 4);
        for v in &plane.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Raw FPF contents before pyramid validation.
#[derive(Clone, Debug, PartialEq)]
pub struct FpfContents {
    pub channels: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub layers: Vec<(u8, Plane)>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PyramidError> {
        if self.bytes.len() - self.pos < n {
            return Err(PyramidError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PyramidError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, PyramidError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PyramidError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn parse_fpf(bytes: &[u8]) -> Result<FpfContents, PyramidError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if &magic != FPF_MAGIC {
        return Err(PyramidError::BadMagic(magic));
    }
    let version = cur.u8()?;
    if version != FPF_VERSION {
        return Err(PyramidError::UnsupportedVersion(version));
    }
    let count = cur.u8()?;
    let channels = cur.u16()? as usize;
    let image_width = cur.u32()?;
    let image_height = cur.u32()?;
    let mut layers = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let level = cur.u8()?;
        let height = cur.u32()? as usize;
        let width = cur.u32()? as usize;
        if (2..=6).contains(&level) {
            let expected = layer_dims(image_width, image_height, level)?;
            if (height, width) != expected {
                return Err(PyramidError::DimMismatch {
                    level,
                    got: (height, width),
                    expected,
                });
            }
        } else {
            return Err(PyramidError::LevelOutOfRange(level));
        }
        let n = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or(PyramidError::Truncated)?;
        let raw = cur.take(n.checked_mul(4).ok_or(PyramidError::Truncated)?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        layers.push((
            level,
            Plane {
                channels,
                height,
                width,
                data,
            },
        ));
    }
    Ok(FpfContents {
        channels,
        image_width,
        image_height,
        layers,
    })
}

pub fn fpf_bytes(pyr: &FeaturePyramid) -> Vec<u8> {
    let pyr = pyr.unpad();
    let layers: Vec<(u8, &Plane)> = STORED_LEVELS.iter().copied().zip(pyr.layers.iter()).collect();
    let mut buf = Vec::new();
    write_fpf_layers(&mut buf, pyr.channels, pyr.image_width, pyr.image_height, &layers)
        .expect("writing to memory");
    buf
}

pub fn pyramid_from_fpf(bytes: &[u8]) -> Result<FeaturePyramid, PyramidError> {
    let contents = parse_fpf(bytes)?;
    let levels: Vec<u8> = contents.layers.iter().map(|(l, _)| *l).collect();
    if levels != STORED_LEVELS {
        return Err(PyramidError::MissingLevels(levels));
    }
    let mut it = contents.layers.into_iter().map(|(_, p)| p);
    let layers = [(); 4].map(|_| it.next().unwrap());
    FeaturePyramid::new(contents.image_width, contents.image_height, layers)
}

pub fn write_fpf(pyr: &FeaturePyramid, path: impl AsRef<Path>) -> Result<(), PyramidError> {
    std::fs::write(path, fpf_bytes(pyr))?;
    Ok(())
}

pub fn read_fpf(path: impl AsRef<Path>) -> Result<FeaturePyramid, PyramidError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    pyramid_from_fpf(&bytes)
}

fn box_blur(plane: &mut Plane, radius: usize) {
    let (h, w) = plane.dims();
    let mut tmp = vec![0f32; h * w];
    for c in 0..plane.channels {
        let base = c * h * w;
        let src = &mut plane.data[base..base + h * w];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                let s: f32 = src[y * w + lo..=y * w + hi].iter().sum();
                tmp[y * w + x] = s / (hi - lo + 1) as f32;
            }
        }
        for x in 0..w {
            for y in 0..h {
                let lo = y.saturating_sub(radius);
                let hi = (y + radius).min(h - 1);
                let s: f32 = (lo..=hi).map(|yy| tmp[yy * w + x]).sum();
                src[y * w + x] = s / (hi - lo + 1) as f32;
            }
        }
    }
}

fn standardize(plane: &mut Plane) {
    let n = plane.height * plane.width;
    for c in 0..plane.channels {
        let s = &mut plane.data[c * n..(c + 1) * n];
        let mean = s.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        for v in s.iter_mut() {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
}

fn noise_plane(rng: &mut ChaCha8Rng, channels: usize, h: usize, w: usize) -> Plane {
    let mut p = Plane::zeros(channels, h, w);
    for v in p.data.iter_mut() {
        let s: f64 = StandardNormal.sample(rng);
        *v = s as f32;
    }
    p
}

/// Blur then keep every other sample: a 2× decimation with ceil dims.
fn blur_decimate(plane: &Plane) -> Plane {
    let mut blurred = plane.clone();
    box_blur(&mut blurred, 1);
    subsample_p6(&blurred)
}

/// Source fields behind every synthetic channel.
const SYNTH_SOURCES: usize = 4;
/// Fresh per-element noise mixed into each synthetic level.
const SYNTH_NOISE: f32 = 0.05;

/// Deterministic synthetic pyramid with the redundancy of real features.
/// p2 mixes a few smooth random fields into all channels through a fixed
/// matrix that depends only on the channel count, so every pyramid of a
/// corpus shares it. Each higher level is a blurred decimation of the one
/// below. All levels get a little fresh noise and are standardized per
/// channel.
pub fn synth_pyramid(seed: u64, image_width: u32, image_height: u32, channels: usize) -> Result<FeaturePyramid, PyramidError> {
    if image_width < MIN_IMAGE_DIM || image_height < MIN_IMAGE_DIM {
        return Err(PyramidError::ImageTooSmall(image_width, image_height));
    }
    let k = SYNTH_SOURCES.min(channels);
    let mut mix_rng = ChaCha8Rng::seed_from_u64(0x6d69_7800 ^ channels as u64);
    let mix: Vec<f32> = (0..channels * k)
        .map(|_| StandardNormal.sample(&mut mix_rng))
        .map(|v: f64| v as f32)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h2, w2) = layer_dims(image_width, image_height, 2)?;
    let mut sources = noise_plane(&mut rng, k, h2, w2);
    for _ in 0..3 {
        box_blur(&mut sources, 3);
    }
    standardize(&mut sources);
    let n = h2 * w2;
    let mut p2 = noise_plane(&mut rng, channels, h2, w2);
    for c in 0..channels {
        for i in 0..n {
            let mixed: f32 = (0..k).map(|j| mix[c * k + j] * sources.data[j * n + i]).sum();
            p2.data[c * n + i] = mixed + SYNTH_NOISE * p2.data[c * n + i];
        }
    }
    standardize(&mut p2);

    let mut layers = vec![p2];
    for _ in 0..3 {
        let below = layers.last().unwrap();
        let mut next = blur_decimate(below);
        let detail = noise_plane(&mut rng, channels, next.height, next.width);
        for (v, d) in next.data.iter_mut().zip(&detail.data) {
            *v += SYNTH_NOISE * d;
        }
        standardize(&mut next);
        layers.push(next);
    }
    let mut it = layers.into_iter();
    let layers = [(); 4].map(|_| it.next().unwrap());
    FeaturePyramid::new(image_width, image_height, layers)
}

/// Tiled single-channel 10-bit picture holding p2..p5.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedFrame {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<u16>,
    /// Tile grid `(columns, rows)` used for every level.
    pub tiling: (usize, usize),
    pub vmin: f32,
    pub vmax: f32,
    /// All inputs equal; the frame is all zeros and unpacks to `vmin`.
    pub constant: bool,
    pub channels: usize,
    pub image_width: u32,
    pub image_height: u32,
}

pub const ANCHOR_MAX: u16 = 1023;

/// Near-square tile grid for `channels` tiles.
pub fn tile_grid(channels: usize) -> (usize, usize) {
    let cols = (channels as f64).sqrt().ceil() as usize;
    let cols = cols.max(1);
    (cols, channels.div_ceil(cols))
}

pub fn quantize_10bit(x: f64, vmin: f64, vmax: f64) -> u16 {
    let q = ((x - vmin) / (vmax - vmin) * ANCHOR_MAX as f64 + 0.5).floor();
    q.clamp(0.0, ANCHOR_MAX as f64) as u16
}

pub fn dequantize_10bit(q: u16, vmin: f64, vmax: f64) -> f64 {
    vmin + q as f64 / ANCHOR_MAX as f64 * (vmax - vmin)
}

/// Row offset of each level's mosaic inside the frame.
fn mosaic_layout(pyr_dims: &[(usize, usize); 4], grid: (usize, usize)) -> ([usize; 4], usize, usize) {
    let mut offsets = [0; 4];
    let mut height = 0;
    let mut width = 0;
    for (i, &(h, w)) in pyr_dims.iter().enumerate() {
        offsets[i] = height;
        height += grid.1 * h;
        width = width.max(grid.0 * w);
    }
    (offsets, width, height)
}

/// Feature-anchor baseline: global min/max 10-bit quantization and channel
/// tiling, one near-square mosaic per level stacked top to bottom.
pub fn pack_and_quantize_10bit(pyr: &FeaturePyramid) -> PackedFrame {
    let pyr = pyr.unpad();
    let (mut vmin, mut vmax) = (f32::INFINITY, f32::NEG_INFINITY);
    for p in &pyr.layers {
        for &v in &p.data {
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
    }
    let constant = vmax == vmin;
    let grid = tile_grid(pyr.channels);
    let dims = pyr.dims();
    let (offsets, width, height) = mosaic_layout(&dims, grid);
    let mut samples = vec![0u16; width * height];
    if !constant {
        for (i, p) in pyr.layers.iter().enumerate() {
            let (h, w) = p.dims();
            for c in 0..p.channels {
                let (tx, ty) = (c % grid.0, c / grid.0);
                for y in 0..h {
                    let row = offsets[i] + ty * h + y;
                    for x in 0..w {
                        samples[row * width + tx * w + x] =
                            quantize_10bit(p.get(c, y, x) as f64, vmin as f64, vmax as f64);
                    }
                }
            }
        }
    }
    PackedFrame {
        width,
        height,
        samples,
        tiling: grid,
        vmin,
        vmax,
        constant,
        channels: pyr.channels,
        image_width: pyr.image_width,
        image_height: pyr.image_height,
    }
}

pub fn unpack_dequantize(frame: &PackedFrame) -> Result<FeaturePyramid, PyramidError> {
    let dims = [2u8, 3, 4, 5].map(|l| layer_dims(frame.image_width, frame.image_height, l));
    let dims = [dims[0].as_ref(), dims[1].as_ref(), dims[2].as_ref(), dims[3].as_ref()]
        .map(|d| *d.map_err(|_| ()).expect("levels 2..=5 are in range"));
    let (offsets, width, height) = mosaic_layout(&dims, frame.tiling);
    if (width, height) != (frame.width, frame.height) || frame.samples.len() != width * height {
        return Err(PyramidError::Truncated);
    }
    let (vmin, vmax) = (frame.vmin as f64, frame.vmax as f64);
    let layers = [0usize, 1, 2, 3].map(|i| {
        let (h, w) = dims[i];
        Plane::from_fn(frame.channels, h, w, |c, y, x| {
            if frame.constant {
                return frame.vmin;
            }
            let (tx, ty) = (c % frame.tiling.0, c / frame.tiling.0);
            let row = offsets[i] + ty * h + y;
            dequantize_10bit(frame.samples[row * width + tx * w + x], vmin, vmax) as f32
        })
    });
    FeaturePyramid::new(frame.image_width, frame.image_height, layers)
}

/// 16-bit binary PGM (maxval 1023) of a packed frame.
pub fn packed_frame_pgm(frame: &PackedFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", frame.width, frame.height, ANCHOR_MAX).into_bytes();
    for s in &frame.samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}
