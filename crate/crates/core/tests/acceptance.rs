//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use lmfc::autograd::{Graph, Var};
use lmfc::blocks::{Attention, Gdn, MaskedConv5, ResidualBlock, ResidualBlockDown, ResidualBlockUp};
use lmfc::checkpoint::{self, Checkpoint};
use lmfc::codec::{Codec, CodecConfig};
use lmfc::coder::{default_coder, native_status};
use lmfc::drnet::Pathway;
use lmfc::evalkit::{bd_rate, near_lossless, uncompressed_bpp, NearLossless, RdCurve, Uncompressed};
use lmfc::params::{Ctx, Init, ParamStore};
use lmfc::pyramid::{fpf_bytes, layer_dims, pack_and_quantize_10bit, synth_pyramid, unpack_dequantize, FeaturePyramid};
use lmfc::tensor::Tensor;
use lmfc::training::{distortion_total, evaluate, sample_loss, train, TrainConfig, DEFAULT_LAYER_WEIGHTS};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- toy models

const TOY_N: usize = 32;
const TOY_C: usize = 16;

fn toy_checkpoint(context_model: bool, dir: &std::path::Path) -> Checkpoint {
    let corpus: Vec<_> = (0..4).map(|s| synth_pyramid(1000 + s, 128, 128, TOY_C).unwrap()).collect();
    let mut codec = CodecConfig::new(TOY_N, TOY_C, context_model);
    if !context_model {
        codec.pathway = Pathway::TopDown;
    }
    let mut cfg = TrainConfig::new(codec, 0.125, 20);
    cfg.crop = Some([64, 64]);
    cfg.batch_size = 2;
    cfg.validate_every = 0;
    cfg.lr.initial = 1e-3;
    let (c, out) = train(&cfg, &corpus, None).unwrap();
    let path = dir.join(format!("toy_cm{}.ckpt", context_model as u8));
    checkpoint::save(&out.checkpoint(&cfg, &c), &path).unwrap();
    checkpoint::load(&path).unwrap()
}

struct RoundTrip {
    label: &'static str,
    estimate_bits: f64,
    actual_bits: f64,
}

/// Round trip on 50 pyramids per model; rate pairs are kept for the
/// fidelity criterion.
fn codec_round_trip(rates: &mut Vec<RoundTrip>) -> Verdict {
    println!("coder: {}", native_status());
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let dims: Vec<(u32, u32)> = (0..50).map(|_| (rng.gen_range(64..=512), rng.gen_range(64..=512))).collect();
    let mut failures = Vec::new();
    let mut checked = 0;
    for cm in [true, false] {
        let ckpt = toy_checkpoint(cm, dir.path());
        let codec = Codec::new(ckpt.meta.codec.clone()).unwrap();
        for (i, &(w, h)) in dims.iter().enumerate() {
            let pyr = synth_pyramid(i as u64, w, h, TOY_C).unwrap();
            let inf = codec.infer(&ckpt.params, &ckpt.tables, &pyr).unwrap();
            let enc = codec.encode(&ckpt.params, &ckpt.tables, default_coder(), &pyr).unwrap();
            let dec = codec.decode(&ckpt.params, &ckpt.tables, default_coder(), &enc.stream).unwrap();
            let same_latent = dec.y_hat == enc.latents.y_hat && dec.y_hat == inf.latents.y_hat;
            let same_bytes = fpf_bytes(&dec.recon) == fpf_bytes(&inf.recon);
            if !(same_latent && same_bytes) {
                failures.push(format!("cm={cm} {w}x{h}"));
            }
            rates.push(RoundTrip {
                label: if cm { "cm" } else { "no-cm" },
                estimate_bits: inf.latents.estimate.total() + (lmfc::bitstream::HEADER_LEN * 8) as f64,
                actual_bits: enc.stream.len() as f64 * 8.0,
            });
            checked += 1;
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "{checked} streams ({} coder, with and without context model), mismatches: {:?}",
            default_coder().name(),
            failures
        ),
    )
}

fn rate_fidelity(rates: &[RoundTrip]) -> Verdict {
    if rates.is_empty() {
        return verdict(false, "no streams from the round-trip corpus");
    }
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_rel: f64 = 0.0;
    let mut bad = Vec::new();
    for r in rates {
        let slack = 0.05 * r.estimate_bits + 512.0;
        let gap = (r.actual_bits - r.estimate_bits).abs();
        worst_excess = worst_excess.max(gap - slack);
        worst_rel = worst_rel.max(gap / r.estimate_bits);
        if gap > slack {
            bad.push(format!("{} est {:.0} actual {:.0}", r.label, r.estimate_bits, r.actual_bits));
        }
    }
    verdict(
        bad.is_empty(),
        format!(
            "{} streams, stream bits vs estimate, both incl. the {}-bit header: worst relative gap {:.3}%, worst margin to 5% + 512 bits {:.0} bits; outside: {:?}",
            rates.len(),
            lmfc::bitstream::HEADER_LEN * 8,
            worst_rel * 100.0,
            -worst_excess,
            bad
        ),
    )
}

// ---------------------------------------------------------------- gradients

fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, amount: f64) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += amount * n;
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Worst relative error `|a − n| / max(|a|, |n|, 1e-6)` between tape
/// gradients and central differences, over up to `per_tensor` coordinates
/// of every stored tensor.
fn grad_check(store: &ParamStore, per_tensor: usize, seed: u64, loss: impl for<'g> Fn(&Ctx<'g>) -> Var<'g>) -> (f64, usize) {
    let g = Graph::new();
    let ctx = Ctx::new(&g, store);
    let l = loss(&ctx);
    let mut grads = g.backward(l);
    let analytic = ctx.collect_grads(&mut grads);
    let eval = |s: &ParamStore| {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, s);
        loss(&ctx).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-6;
    let (mut worst, mut count) = (0.0f64, 0usize);
    for (name, t) in store.iter() {
        let coords: Vec<usize> = if t.len() <= per_tensor {
            (0..t.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..t.len())).collect()
        };
        for i in coords {
            let mut s = store.clone();
            s.get_mut(name).unwrap().data_mut()[i] += eps;
            let up = eval(&s);
            s.get_mut(name).unwrap().data_mut()[i] -= 2.0 * eps;
            let down = eval(&s);
            let fd = (up - down) / (2.0 * eps);
            let a = analytic.get(name).map(|g| g.data()[i]).unwrap_or(0.0);
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
            count += 1;
        }
    }
    (worst, count)
}

/// Block `f` applied to parameter `x`, reduced with fixed random weights.
fn block_case(
    name: &str,
    rng: &mut ChaCha8Rng,
    input: &[usize],
    init: impl Fn(&mut Init),
    f: impl for<'g> Fn(&Ctx<'g>, Var<'g>) -> Var<'g>,
) -> (String, f64, usize) {
    let mut store = ParamStore::new();
    {
        let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut i = Init {
            store: &mut store,
            rng: &mut r,
        };
        init(&mut i);
    }
    jitter(&mut store, rng, 0.05);
    store.insert("x", random_tensor(rng, input));
    let probe = {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store);
        let out = f(&ctx, ctx.param("x"));
        random_tensor(rng, &out.shape())
    };
    let (worst, count) = grad_check(&store, 4, rng.gen(), |ctx| {
        f(ctx, ctx.param("x")).mul(ctx.input(probe.clone())).sum()
    });
    (name.to_string(), worst, count)
}

fn gradient_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = Vec::new();
    let gdn = Gdn::new("gdn", 3, false);
    cases.push(block_case("gdn", &mut rng, &[3, 4, 4], |i| gdn.init(i), |c, x| gdn.forward(c, x)));
    let igdn = Gdn::new("igdn", 3, true);
    cases.push(block_case("igdn", &mut rng, &[3, 4, 4], |i| igdn.init(i), |c, x| igdn.forward(c, x)));
    let att = Attention::new("att", 2);
    cases.push(block_case("attention", &mut rng, &[2, 4, 4], |i| att.init(i), |c, x| att.forward(c, x)));
    let mc = MaskedConv5::new("mc", 2, 3);
    cases.push(block_case("masked conv", &mut rng, &[2, 5, 5], |i| mc.init(i), |c, x| mc.forward(c, x)));
    let rb = ResidualBlock::new("rb", 2);
    cases.push(block_case("residual", &mut rng, &[2, 4, 4], |i| rb.init(i), |c, x| rb.forward(c, x)));
    let rbd = ResidualBlockDown::new("rbd", 2, 3);
    cases.push(block_case("residual down", &mut rng, &[2, 6, 6], |i| rbd.init(i), |c, x| rbd.forward(c, x)));
    let rbu = ResidualBlockUp::new("rbu", 2, 3);
    cases.push(block_case("residual up", &mut rng, &[2, 3, 3], |i| rbu.init(i), |c, x| rbu.forward(c, x)));

    for (cm, pathway) in [(true, Pathway::BottomUp), (false, Pathway::TopDown)] {
        let mut cfg = CodecConfig::new(4, 2, cm);
        cfg.pathway = pathway;
        let codec = Codec::new(cfg).unwrap();
        let mut store = codec.init_params(5);
        jitter(&mut store, &mut rng, 0.02);
        let pyr = synth_pyramid(9, 64, 64, 2).unwrap();
        let (worst, count) = grad_check(&store, 2, rng.gen(), |ctx| {
            let mut noise = ChaCha8Rng::seed_from_u64(77);
            sample_loss(&codec, ctx, &pyr, 0.125, &DEFAULT_LAYER_WEIGHTS, &mut noise).unwrap().0
        });
        cases.push((format!("RD loss (cm={cm})"), worst, count));
    }
    let worst = cases.iter().map(|c| c.1).fold(0.0, f64::max);
    let detail: Vec<String> = cases.iter().map(|(n, w, c)| format!("{n} {w:.1e}/{c}")).collect();
    verdict(worst < 1e-3, format!("max rel err {worst:.2e} (< 1e-3); {}", detail.join(", ")))
}

// ---------------------------------------------------------------- causality

fn causality() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..1000 {
        let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let mc = MaskedConv5::new("mc", ci, co);
        let mut store = ParamStore::new();
        {
            let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
            mc.init(&mut Init {
                store: &mut store,
                rng: &mut r,
            });
        }
        // Unmasked weights are random too, so a leak would show.
        jitter(&mut store, &mut rng, 1.0);
        let x = random_tensor(&mut rng, &[ci, h, w]);
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let mut y = x.clone();
        let first_later = r0 * w + c0;
        for pos in first_later..h * w {
            if rng.gen_bool(0.5) || pos == first_later {
                for c in 0..ci {
                    y.data_mut()[(c * h + pos / w) * w + pos % w] += rng.sample::<f64, _>(StandardNormal) * 10.0;
                }
            }
        }
        let run = |input: &Tensor| {
            let g = Graph::inference();
            let ctx = Ctx::new(&g, &store);
            mc.forward(&ctx, ctx.input(input.clone())).value().as_ref().clone()
        };
        let (a, b) = (run(&x), run(&y));
        let weight = store.get(&mc.conv.weight_name()).unwrap().clone();
        let masked = weight.zip_map(&lmfc::blocks::causal_mask(co, ci, 5), |w, m| w * m);
        let bias = store.get(&mc.conv.bias_name()).unwrap();
        let (mut pa, mut pb) = (vec![0.0; co], vec![0.0; co]);
        MaskedConv5::at_position(&masked, bias, &x, r0, c0, &mut pa);
        MaskedConv5::at_position(&masked, bias, &y, r0, c0, &mut pb);
        let same = (0..co).all(|o| a.at(o, r0, c0).to_bits() == b.at(o, r0, c0).to_bits()) && pa == pb;
        if !same {
            violations += 1;
        }
    }
    verdict(
        violations == 0,
        format!("1000 trials perturbing the centre and raster-later inputs; {violations} outputs changed"),
    )
}

// ---------------------------------------------------------------- RD trend

const RD_LAMBDAS: [f64; 3] = [0.0125, 0.125, 0.5];
const RD_STEPS: u64 = 1000;
const RD_LR: f64 = 1e-3;

/// Mean over p2..p5 of PSNR against each layer's own peak-to-peak range.
fn feature_psnr(original: &FeaturePyramid, recon: &FeaturePyramid) -> f64 {
    let mut total = 0.0;
    for (a, b) in original.layers.iter().zip(&recon.layers) {
        let lo = a.data.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = a.data.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        total += 10.0 * ((hi - lo).powi(2) / a.mse(b)).log10();
    }
    total / 4.0
}

fn rd_monotonicity() -> Verdict {
    let corpus: Vec<_> = (0..32).map(|s| synth_pyramid(s, 128, 128, TOY_C).unwrap()).collect();
    // Held-out pyramids at the training crop size: a model that has only seen
    // 1×1 latents does not transfer to larger ones.
    let test: Vec<_> = (100..116).map(|s| synth_pyramid(s, 64, 64, TOY_C).unwrap()).collect();
    let test_refs: Vec<&FeaturePyramid> = test.iter().collect();
    let mut rows = Vec::new();
    for lambda in RD_LAMBDAS {
        let mut cfg = TrainConfig::new(CodecConfig::new(TOY_N, TOY_C, true), lambda, RD_STEPS);
        cfg.crop = Some([64, 64]);
        cfg.validate_every = 100;
        cfg.lr.initial = RD_LR;
        let (codec, out) = train(&cfg, &corpus, None).unwrap();
        let (_, bpp, d_total) = evaluate(&codec, &out.params, &out.tables, &test_refs, lambda, &DEFAULT_LAYER_WEIGHTS).unwrap();
        let mut psnr = 0.0;
        for p in &test {
            let inf = codec.infer(&out.params, &out.tables, p).unwrap();
            debug_assert!(distortion_total(p, &inf.recon, &DEFAULT_LAYER_WEIGHTS).is_ok());
            psnr += feature_psnr(p, &inf.recon) / test.len() as f64;
        }
        rows.push((lambda, bpp, d_total, psnr));
    }
    let rate_up = rows.windows(2).all(|w| w[1].1 > w[0].1);
    let dist_down = rows.windows(2).all(|w| w[1].2 < w[0].2);
    let mut by_d = rows.clone();
    by_d.sort_by(|a, b| a.2.total_cmp(&b.2));
    let proxy = by_d.windows(2).all(|w| w[1].3 <= w[0].3);
    let table: Vec<String> = rows
        .iter()
        .map(|(l, r, d, p)| format!("λ={l}: {r:.5} bpp, D_total {d:.4}, PSNR {p:.2} dB"))
        .collect();
    verdict(
        rate_up && dist_down && proxy,
        format!(
            "{RD_STEPS} steps, N={TOY_N}, lr {RD_LR}; bpp increasing {rate_up}, D_total decreasing {dist_down}, PSNR monotone in D_total {proxy}; {}",
            table.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- metrics

const DETECTION: [(f64, f64, f64); 6] = [
    (0.0019, 0.654, 37.977),
    (0.0033, 0.524, 60.999),
    (0.0135, 0.306, 77.484),
    (0.0248, 0.236, 78.256),
    (0.0348, 0.194, 78.562),
    (0.0453, 0.176, 78.953),
];

fn metric_reproduction() -> Verdict {
    let pairs: Vec<(f64, f64)> = DETECTION.iter().map(|p| (p.0, p.2)).collect();
    let curve = RdCurve::from_pairs(
        "detection",
        &pairs,
        Some(Uncompressed {
            bpp: 841.940,
            metric: 79.225,
        }),
    )
    .unwrap();
    let (r_nl, cr_nl) = match near_lossless(&curve).unwrap() {
        NearLossless::Reached { r_nl, cr_nl, .. } => (r_nl, cr_nl),
        NearLossless::NotReached { .. } => (f64::NAN, f64::NAN),
    };
    let r_ok = (r_nl - 0.031).abs() <= 0.001;
    let cr_ok = ((cr_nl - 27_555.0) / 27_555.0).abs() < 0.02;
    let dims = [(1024u32, 512u32), (512, 512), (2048, 1024), (256, 128), (64, 32)];
    let bpps: Vec<f64> = dims.iter().map(|&(w, h)| uncompressed_bpp(w, h, 256, 32, None)).collect();
    let u_ok = bpps.iter().all(|&b| b == 680.0);
    // Task metric falls as D_total rises across the published points.
    let mut by_d = DETECTION.to_vec();
    by_d.sort_by(|a, b| a.1.total_cmp(&b.1));
    let fig_ok = by_d.windows(2).all(|w| w[1].2 <= w[0].2);
    verdict(
        r_ok && cr_ok && u_ok && fig_ok,
        format!(
            "R_NL {r_nl:.6} bpp (0.031 ± 0.001), CR_NL {cr_nl:.0} ({:+.2}% vs 27,555; computed from unrounded R_NL), uncompressed {} bpp on {} power-of-two sizes, metric monotone in D_total {fig_ok}",
            (cr_nl / 27_555.0 - 1.0) * 100.0,
            bpps[0],
            dims.len()
        ),
    )
}

fn bd_rate_function() -> Verdict {
    let pairs: Vec<(f64, f64)> = DETECTION.iter().map(|p| (p.0, p.2)).collect();
    let a = RdCurve::from_pairs("a", &pairs, None).unwrap();
    let scaled = |k: f64| RdCurve::from_pairs("b", &pairs.iter().map(|&(r, m)| (r * k, m)).collect::<Vec<_>>(), None).unwrap();
    let zero = bd_rate(&a, &a).unwrap();
    let doubled = bd_rate(&scaled(2.0), &a).unwrap();
    let halved = bd_rate(&a, &scaled(2.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_anti: f64 = 0.0;
    for _ in 0..100 {
        let b = scaled(rng.gen_range(0.2..5.0));
        let prod = (1.0 + bd_rate(&a, &b).unwrap() / 100.0) * (1.0 + bd_rate(&b, &a).unwrap() / 100.0);
        worst_anti = worst_anti.max((prod - 1.0).abs());
    }
    let pass = zero == 0.0 && (doubled - 100.0).abs() <= 0.01 && (halved + 50.0).abs() <= 0.01 && worst_anti <= 1e-6;
    verdict(
        pass,
        format!("identical {zero}%, doubled {doubled:.6}%, halved {halved:.6}%, anti-symmetry max deviation {worst_anti:.1e} over 100 offsets"),
    )
}

// ---------------------------------------------------------------- geometry

fn geometry() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let codec = Codec::new(CodecConfig::new(4, 2, false)).unwrap();
    let store = codec.init_params(0);
    let tables = codec.entropy.build_tables(&store);
    let mut bad = Vec::new();
    for _ in 0..200 {
        let (w, h) = (rng.gen_range(64..=600u32), rng.gen_range(64..=600u32));
        let ceil = |d: u32, s: u32| (d as f64 / s as f64).ceil() as usize;
        let table_ok = [(2u8, 4u32), (3, 8), (4, 16), (5, 32)]
            .iter()
            .all(|&(l, s)| layer_dims(w, h, l).unwrap() == (ceil(h, s), ceil(w, s)));
        let pyr = synth_pyramid(w as u64 * 1000 + h as u64, w, h, 2).unwrap();
        let inf = codec.infer(&store, &tables, &pyr).unwrap();
        let (_, yh, yw) = inf.latents.y_hat.chw();
        let (_, zh, zw) = inf.latents.z_hat.chw();
        let latent_ok = (yh, yw) == (ceil(h, 64), ceil(w, 64)) && (zh, zw) == (ceil(h, 256), ceil(w, 256));
        let recon_ok = inf.recon.dims() == pyr.dims();
        if !(table_ok && latent_ok && recon_ok) {
            bad.push(format!("{w}x{h}"));
        }
    }
    verdict(
        bad.is_empty(),
        format!("200 random sizes in 64..=600: strides 4/8/16/32, y at 64, z at 256, reconstruction dims; failures {bad:?}"),
    )
}

// ---------------------------------------------------------------- anchor

fn anchor_bound() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut samples, mut worst_excess) = (0usize, f64::NEG_INFINITY);
    let mut frames = 0;
    while samples < 100_000 {
        let (w, h, c) = (rng.gen_range(64..=256u32), rng.gen_range(64..=256u32), rng.gen_range(1..=24usize));
        let mut pyr = synth_pyramid(rng.gen(), w, h, c).unwrap();
        let scale = rng.gen_range(0.01..4.0f32);
        for l in pyr.layers.iter_mut() {
            for v in l.data.iter_mut() {
                *v *= scale;
            }
        }
        let frame = pack_and_quantize_10bit(&pyr);
        let back = unpack_dequantize(&frame).unwrap();
        let bound = (frame.vmax as f64 - frame.vmin as f64) / 2046.0 + 1e-6;
        for (a, b) in pyr.layers.iter().zip(&back.layers) {
            for (x, y) in a.data.iter().zip(&b.data) {
                worst_excess = worst_excess.max((*x as f64 - *y as f64).abs() - bound);
                samples += 1;
            }
        }
        frames += 1;
    }
    verdict(
        worst_excess <= 0.0,
        format!("{samples} samples in {frames} frames; worst error minus bound {worst_excess:.3e}"),
    )
}

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut rates = Vec::new();
    let mut results: Vec<(&str, Verdict, f64)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            return;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        println!("{} {name} ({secs:.1}s): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v, secs));
    };
    run("codec round trip", &mut || codec_round_trip(&mut rates));
    let rates_snapshot = std::mem::take(&mut rates);
    run("rate-estimate fidelity", &mut || rate_fidelity(&rates_snapshot));
    run("gradient suite", &mut gradient_suite);
    run("causality", &mut causality);
    run("RD monotonicity", &mut rd_monotonicity);
    run("metric reproduction", &mut metric_reproduction);
    run("BD-rate function", &mut bd_rate_function);
    run("geometry", &mut geometry);
    run("anchor baseline", &mut anchor_bound);
    let failed = results.iter().filter(|r| !r.1.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
