//! Rate–distortion training: loss assembly, Adam, the plateau-halving
//! learning-rate schedule and the two-stage loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::codec::{Codec, CodecConfig, CodecError};
use crate::entropy::{ModelTables, P_MIN, SCALE_FLOOR};
use crate::params::{Ctx, ParamStore};
use crate::pyramid::{subsample_p6, FeaturePyramid, Plane};
use crate::tensor::Tensor;

/// The six trained quality levels.
pub const LAMBDAS: [f64; 6] = [0.0125, 0.025, 0.125, 0.25, 0.375, 0.5];
pub const DEFAULT_LAYER_WEIGHTS: [f64; 5] = [0.2; 5];

/// Latent width for quality level `index` (0-based): 128 for the three
/// lowest levels with the context model, 192 otherwise.
pub fn latent_channels_for(index: usize, context_model: bool) -> usize {
    if context_model && index < 3 {
        128
    } else {
        192
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("layer weights must sum to 1 (got {0})")]
    BadWeights(f64),
    #[error("lambda must be positive (got {0})")]
    BadLambda(f64),
    #[error("crop {0}x{1} must be a positive multiple of 64 that fits every corpus image")]
    BadCrop(u32, u32),
    #[error("non-finite {term} at step {step}")]
    NonFinite { step: u64, term: String },
    #[error("distortion operands differ in shape at level {0}")]
    DimMismatch(u8),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrConfig {
    pub initial: f64,
    /// Halving stops once the next value would fall below this.
    pub min: f64,
    /// Evaluations without sufficient improvement before halving.
    pub patience: usize,
    /// Minimum relative improvement that resets the patience counter.
    pub threshold: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            initial: 1e-4,
            min: 5e-6,
            patience: 10,
            threshold: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    #[serde(default = "default_weights")]
    pub layer_weights: [f64; 5],
    pub codec: CodecConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub steps: u64,
    /// Image-space crop `[width, height]` for stage 1; full size when absent.
    #[serde(default)]
    pub crop: Option<[u32; 2]>,
    #[serde(default)]
    pub lr: LrConfig,
    #[serde(default = "default_validate_every")]
    pub validate_every: u64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Stage 2: full-size fine-tuning with batch 1.
    #[serde(default)]
    pub finetune_steps: u64,
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_weights() -> [f64; 5] {
    DEFAULT_LAYER_WEIGHTS
}
fn default_batch() -> usize {
    4
}
fn default_validate_every() -> u64 {
    100
}
fn default_validation_fraction() -> f64 {
    0.02
}
fn default_finetune_lr() -> f64 {
    1e-5
}

impl TrainConfig {
    pub fn new(codec: CodecConfig, lambda: f64, steps: u64) -> Self {
        TrainConfig {
            lambda,
            layer_weights: DEFAULT_LAYER_WEIGHTS,
            codec,
            batch_size: 4,
            steps,
            crop: None,
            lr: LrConfig::default(),
            validate_every: default_validate_every(),
            validation_fraction: default_validation_fraction(),
            finetune_steps: 0,
            finetune_lr: default_finetune_lr(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let sum: f64 = self.layer_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(TrainError::BadWeights(sum));
        }
        if !(self.lambda > 0.0) {
            return Err(TrainError::BadLambda(self.lambda));
        }
        if let Some([w, h]) = self.crop {
            if w == 0 || h == 0 || w % 64 != 0 || h % 64 != 0 {
                return Err(TrainError::BadCrop(w, h));
            }
        }
        Ok(())
    }
}

/// One logged step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdLossReport {
    pub step: u64,
    /// Bits per input-image pixel.
    pub rate: f64,
    pub d_total: f64,
    /// MSE of p2..p6.
    pub d: [f64; 5],
    pub loss: f64,
    pub lr: f64,
}

pub fn rd_loss(rate: f64, d_total: f64, lambda: f64) -> f64 {
    rate + lambda * d_total
}

/// Per-layer MSE of p2..p6 (p6 subsampled from p5) and their weighted sum.
pub fn distortion_total(
    original: &FeaturePyramid,
    recon: &FeaturePyramid,
    weights: &[f64; 5],
) -> Result<(f64, [f64; 5]), TrainError> {
    let mut d = [0.0; 5];
    for i in 0..4 {
        if original.layers[i].dims() != recon.layers[i].dims() || original.channels != recon.channels {
            return Err(TrainError::DimMismatch(i as u8 + 2));
        }
        d[i] = original.layers[i].mse(&recon.layers[i]);
    }
    d[4] = original.p6().mse(&recon.p6());
    Ok((weights.iter().zip(&d).map(|(w, v)| w * v).sum(), d))
}

/// Targets p2..p6 as tensors.
fn targets(pyr: &FeaturePyramid) -> [Tensor; 5] {
    let p6 = subsample_p6(&pyr.layers[3]);
    let planes: [&Plane; 5] = [&pyr.layers[0], &pyr.layers[1], &pyr.layers[2], &pyr.layers[3], &p6];
    planes.map(|p| p.to_tensor())
}

/// Differentiable loss for one pyramid: returns `(L, R, D_total, D_i)`.
pub fn sample_loss<'g>(
    codec: &Codec,
    ctx: &Ctx<'g>,
    pyr: &FeaturePyramid,
    lambda: f64,
    weights: &[f64; 5],
    rng: &mut ChaCha8Rng,
) -> Result<(Var<'g>, Var<'g>, Var<'g>, [Var<'g>; 5]), TrainError> {
    let out = codec.forward_train(ctx, pyr, rng)?;
    let pixels = pyr.image_width as f64 * pyr.image_height as f64;
    let rate = out
        .y_likelihood
        .neg_log2_sum()
        .add(out.z_likelihood.neg_log2_sum())
        .scale(1.0 / pixels);
    let t = targets(pyr);
    let d: [Var<'g>; 5] = std::array::from_fn(|i| out.recon[i].mse(ctx.input(t[i].clone())));
    let mut d_total = d[0].scale(weights[0]);
    for i in 1..5 {
        d_total = d_total.add(d[i].scale(weights[i]));
    }
    let loss = rate.add(d_total.scale(lambda));
    Ok((loss, rate, d_total, d))
}

/// Adaptive moment estimation with the usual defaults.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store.get_mut(name).expect("gradient for a known parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Halves the learning rate whenever validation loss stops improving.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    config: LrConfig,
    lr: f64,
    best: f64,
    stale: usize,
}

impl LrSchedule {
    pub fn new(config: LrConfig) -> Self {
        LrSchedule {
            lr: config.initial,
            config,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if !self.best.is_finite() || loss < self.best - self.config.threshold * self.best.abs() {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.config.patience {
                self.stale = 0;
                let next = self.lr / 2.0;
                if next >= self.config.min {
                    self.lr = next;
                }
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub tables: ModelTables,
    pub reports: Vec<RdLossReport>,
    pub validation: Vec<(u64, f64)>,
    pub steps: u64,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig, codec: &Codec) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                format: FORMAT_VERSION,
                codec: config.codec.clone(),
                param_widths: codec.entropy.config.param_widths,
                lambda: config.lambda,
                scale_floor: SCALE_FLOOR,
                p_min: P_MIN,
                rounding: "mean_offset".into(),
                steps: self.steps,
                run_config: serde_json::to_value(config).expect("config serializes"),
            },
            params: self.params.clone(),
            tables: self.tables.clone(),
        }
    }
}

fn check_finite(step: u64, report: &RdLossReport) -> Result<(), TrainError> {
    let terms = [("rate", report.rate), ("distortion", report.d_total), ("loss", report.loss)];
    for (name, v) in terms {
        if !v.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                term: name.into(),
            });
        }
    }
    for (i, v) in report.d.iter().enumerate() {
        if !v.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                term: format!("distortion of p{}", i + 2),
            });
        }
    }
    Ok(())
}

fn random_crop(pyr: &FeaturePyramid, crop: Option<[u32; 2]>, rng: &mut ChaCha8Rng) -> Result<FeaturePyramid, TrainError> {
    let Some([w, h]) = crop else {
        return Ok(pyr.clone());
    };
    if w > pyr.image_width || h > pyr.image_height {
        return Err(TrainError::BadCrop(w, h));
    }
    let left = rng.gen_range(0..=(pyr.image_width - w) / 64) * 64;
    let top = rng.gen_range(0..=(pyr.image_height - h) / 64) * 64;
    Ok(pyr.crop_image_window(left, top, w, h))
}

/// Splits off `fraction` of the corpus for validation, at least one item
/// when the corpus has two or more.
pub fn split_corpus(len: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let n_val = if len < 2 {
        0
    } else {
        ((len as f64 * fraction).round() as usize).clamp(1, len - 1)
    };
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    (train, val)
}

/// Round-mode validation loss: estimated bits of the rounded latents plus
/// λ-weighted distortion of the coding-free reconstruction.
pub fn evaluate(
    codec: &Codec,
    params: &ParamStore,
    tables: &ModelTables,
    items: &[&FeaturePyramid],
    lambda: f64,
    weights: &[f64; 5],
) -> Result<(f64, f64, f64), TrainError> {
    let (mut rate, mut dist) = (0.0, 0.0);
    for pyr in items {
        let inf = codec.infer(params, tables, pyr)?;
        rate += inf.latents.estimate.total() / (pyr.image_width as f64 * pyr.image_height as f64);
        dist += distortion_total(pyr, &inf.recon, weights)?.0;
    }
    let n = items.len().max(1) as f64;
    let (rate, dist) = (rate / n, dist / n);
    Ok((rd_loss(rate, dist, lambda), rate, dist))
}

struct StepResult {
    grads: BTreeMap<String, Tensor>,
    report: RdLossReport,
}

fn batch_step(
    codec: &Codec,
    params: &ParamStore,
    batch: &[FeaturePyramid],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    step: u64,
    lr: f64,
) -> Result<StepResult, TrainError> {
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut report = RdLossReport {
        step,
        rate: 0.0,
        d_total: 0.0,
        d: [0.0; 5],
        loss: 0.0,
        lr,
    };
    let scale = 1.0 / batch.len() as f64;
    for pyr in batch {
        let g = Graph::new();
        let ctx = Ctx::new(&g, params);
        let (loss, rate, d_total, d) = sample_loss(codec, &ctx, pyr, config.lambda, &config.layer_weights, rng)?;
        report.rate += rate.item() * scale;
        report.d_total += d_total.item() * scale;
        for i in 0..5 {
            report.d[i] += d[i].item() * scale;
        }
        report.loss += loss.item() * scale;
        let mut gr = g.backward(loss.scale(scale));
        for (name, t) in ctx.collect_grads(&mut gr) {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    check_finite(step, &report)?;
    Ok(StepResult { grads, report })
}

/// Runs both stages. `log`, when given, receives one JSON line per step.
pub fn train(
    config: &TrainConfig,
    corpus: &[FeaturePyramid],
    mut log: Option<&mut dyn Write>,
) -> Result<(Codec, TrainOutcome), TrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let codec = Codec::new(config.codec.clone())?;
    let mut params = codec.init_params(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let (train_idx, val_idx) = split_corpus(corpus.len(), config.validation_fraction, config.seed);
    let val_items: Vec<&FeaturePyramid> = if val_idx.is_empty() {
        vec![&corpus[train_idx[0]]]
    } else {
        val_idx.iter().map(|&i| &corpus[i]).collect()
    };
    let mut adam = Adam::default();
    let mut schedule = LrSchedule::new(config.lr.clone());
    let mut reports = Vec::new();
    let mut validation = Vec::new();
    let total = config.steps + config.finetune_steps;
    for step in 1..=total {
        let finetune = step > config.steps;
        let (batch_size, lr) = if finetune {
            (1, config.finetune_lr)
        } else {
            (config.batch_size, schedule.lr())
        };
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let item = &corpus[train_idx[rng.gen_range(0..train_idx.len())]];
            batch.push(if finetune {
                item.clone()
            } else {
                random_crop(item, config.crop, &mut rng)?
            });
        }
        let StepResult { grads, report } = batch_step(&codec, &params, &batch, config, &mut rng, step, lr)?;
        adam.step(&mut params, &grads, lr);
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut **w, &report).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
        reports.push(report);
        if !finetune && config.validate_every > 0 && step % config.validate_every == 0 {
            let tables = codec.entropy.build_tables(&params);
            let (loss, _, _) = evaluate(&codec, &params, &tables, &val_items, config.lambda, &config.layer_weights)?;
            validation.push((step, loss));
            schedule.observe(loss);
        }
    }
    let params = params.rounded_to_f32();
    let tables = codec.entropy.build_tables(&params);
    Ok((
        codec,
        TrainOutcome {
            params,
            tables,
            reports,
            validation,
            steps: total,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::synth_pyramid;

    #[test]
    fn loss_examples() {
        assert_eq!(rd_loss(1.0, 0.5, 0.25), 1.125);
        assert_eq!(rd_loss(0.7, 3.0, 0.0), 0.7);
    }

    #[test]
    fn distortion_examples() {
        let p = synth_pyramid(0, 64, 64, 2).unwrap();
        assert_eq!(distortion_total(&p, &p, &DEFAULT_LAYER_WEIGHTS).unwrap().0, 0.0);
        let mut q = p.clone();
        for layer in q.layers.iter_mut() {
            for v in layer.data.iter_mut() {
                *v += 1.0;
            }
        }
        let (total, d) = distortion_total(&p, &q, &DEFAULT_LAYER_WEIGHTS).unwrap();
        assert!(d.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert!((total - 1.0).abs() < 1e-6);
        let other = synth_pyramid(0, 128, 64, 2).unwrap();
        assert!(matches!(distortion_total(&p, &other, &DEFAULT_LAYER_WEIGHTS), Err(TrainError::DimMismatch(2))));
    }

    #[test]
    fn schedule_halves_to_floor() {
        let mut s = LrSchedule::new(LrConfig::default());
        s.observe(1.0);
        assert_eq!(s.lr(), 1e-4);
        let mut lrs = Vec::new();
        for _ in 0..7 {
            for _ in 0..10 {
                s.observe(1.0);
            }
            lrs.push(s.lr());
        }
        assert_eq!(lrs, vec![1e-4 / 2.0, 2.5e-5, 1.25e-5, 6.25e-6, 6.25e-6, 6.25e-6, 6.25e-6]);
    }

    #[test]
    fn schedule_keeps_rate_while_improving() {
        let mut s = LrSchedule::new(LrConfig::default());
        for i in 0..100 {
            s.observe(10.0 - i as f64 * 0.01);
        }
        assert_eq!(s.lr(), 1e-4);
    }

    #[test]
    fn split_is_deterministic() {
        let (t, v) = split_corpus(100, 0.02, 3);
        assert_eq!(v.len(), 2);
        assert_eq!(t.len(), 98);
        assert_eq!((t.clone(), v.clone()), split_corpus(100, 0.02, 3));
        assert_eq!(split_corpus(1, 0.02, 0).1.len(), 0);
        assert_eq!(split_corpus(5, 0.02, 0).1.len(), 1);
    }

    #[test]
    fn table_three_widths() {
        assert_eq!((0..6).map(|i| latent_channels_for(i, true)).collect::<Vec<_>>(), [128, 128, 128, 192, 192, 192]);
        assert!((0..6).all(|i| latent_channels_for(i, false) == 192));
    }

    #[test]
    fn empty_corpus_and_bad_config() {
        let cfg = TrainConfig::new(CodecConfig::new(4, 2, false), 0.1, 1);
        assert!(matches!(train(&cfg, &[], None), Err(TrainError::EmptyCorpus)));
        let mut bad = cfg.clone();
        bad.layer_weights = [0.3; 5];
        assert!(matches!(bad.validate(), Err(TrainError::BadWeights(_))));
        let mut bad = cfg;
        bad.crop = Some([100, 64]);
        assert!(matches!(bad.validate(), Err(TrainError::BadCrop(100, 64))));
    }

    #[test]
    fn short_run_logs_consistent_reports() {
        let corpus: Vec<_> = (0..3).map(|s| synth_pyramid(s, 64, 64, 2).unwrap()).collect();
        let mut cfg = TrainConfig::new(CodecConfig::new(4, 2, true), 0.125, 3);
        cfg.batch_size = 2;
        cfg.validate_every = 2;
        cfg.finetune_steps = 1;
        let mut log = Vec::new();
        let (_, out) = train(&cfg, &corpus, Some(&mut log)).unwrap();
        assert_eq!(out.reports.len(), 4);
        assert_eq!(out.reports[3].lr, 1e-5);
        for r in &out.reports {
            let d: f64 = r.d.iter().zip(&cfg.layer_weights).map(|(a, b)| a * b).sum();
            assert!((r.d_total - d).abs() <= 1e-9 * d.abs().max(1.0));
            assert!((r.loss - rd_loss(r.rate, r.d_total, cfg.lambda)).abs() <= 1e-9 * r.loss.abs());
        }
        let lines: Vec<RdLossReport> = String::from_utf8(log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, out.reports);
        assert_eq!(out.validation.len(), 1);
    }
}
