//! Command-line front end. `run` takes the argument list and output sinks so
//! it can be driven from tests; the binary only forwards to it.

use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bitstream;
use crate::checkpoint::{self, Checkpoint};
use crate::codec::Codec;
use crate::coder::{default_coder, native_status};
use crate::evalkit::{
    bd_rate, curves_from_records, derive_metrics, emit_report, layerwise_protocol, near_lossless, read_results,
    NearLossless, RdCurve,
};
use crate::pyramid::{
    fpf_bytes, pack_and_quantize_10bit, packed_frame_pgm, read_fpf, synth_pyramid, unpack_dequantize, write_fpf,
    FeaturePyramid,
};
use crate::training::{self, latent_channels_for, TrainConfig, LAMBDAS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lmfc", version, about = "Learned multi-scale feature pyramid compression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one quality level on a directory of FPF files.
    Train(TrainArgs),
    /// Compress an FPF pyramid into a bitstream.
    Encode(EncodeArgs),
    /// Reconstruct an FPF pyramid from a bitstream.
    Decode(DecodeArgs),
    /// Derive metrics and write CSV/SVG reports from a results file.
    Eval(EvalArgs),
    /// BD-rate of one labelled curve against another.
    Bdrate(BdrateArgs),
    /// Near-lossless rate and compression ratio per curve.
    Nearlossless(NearlosslessArgs),
    /// Layer-wise distortion protocol with hybrid pyramid outputs.
    Layerwise(LayerwiseArgs),
    /// Write a deterministic synthetic pyramid.
    Synth(SynthArgs),
    /// Tile and 10-bit quantize a pyramid into a PGM picture.
    PackAnchor(PackAnchorArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of `.fpf` pyramids.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output checkpoint.
    #[arg(long, short)]
    pub out: PathBuf,
    /// TOML file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a setting, e.g. `--set codec.n=64`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_context_model: bool,
    /// Step log, one JSON object per line.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Compute device; only `cpu` is available.
    #[arg(long, default_value = "cpu")]
    pub device: String,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL or CSV results file.
    #[arg(long)]
    pub results: PathBuf,
    /// Report directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Label of the curve BD-rates are measured against.
    #[arg(long)]
    pub anchor: Option<String>,
}

#[derive(Debug, Args)]
pub struct BdrateArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub test: String,
    #[arg(long)]
    pub anchor: String,
}

#[derive(Debug, Args)]
pub struct NearlosslessArgs {
    #[arg(long)]
    pub results: PathBuf,
    /// Restrict to one label.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct LayerwiseArgs {
    /// Checkpoints, one per quality level. Repeatable.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Lambdas to evaluate; defaults to those of the checkpoints.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    /// Use the model rate estimate instead of coding.
    #[arg(long)]
    pub estimate: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub width: u32,
    #[arg(long, default_value_t = 256)]
    pub height: u32,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct PackAnchorArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Output PGM picture.
    #[arg(long, short)]
    pub output: PathBuf,
    /// Also write the unpacked pyramid here.
    #[arg(long)]
    pub roundtrip: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

fn rt(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(e: impl Display) -> CliError {
    CliError::Usage(e.to_string())
}

type CliResult = Result<(), CliError>;

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, out, err),
        Command::Encode(a) => cmd_encode(a, out, err),
        Command::Decode(a) => cmd_decode(a, out, err),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Bdrate(a) => cmd_bdrate(a, out),
        Command::Nearlossless(a) => cmd_nearlossless(a, out),
        Command::Layerwise(a) => cmd_layerwise(a, out, err),
        Command::Synth(a) => cmd_synth(a, out),
        Command::PackAnchor(a) => cmd_pack_anchor(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_FAILURE
        }
    }
}

/// Sorted `.fpf` files of a directory, or the file itself.
pub fn corpus_files(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !path.exists() {
        return Err(usage(format!("corpus path {} does not exist", path.display())));
    }
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(rt)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "fpf"))
        .collect();
    files.sort();
    Ok(files)
}

fn load_corpus(path: &Path) -> Result<Vec<(String, FeaturePyramid)>, CliError> {
    corpus_files(path)?
        .into_iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            read_fpf(&p).map(|pyr| (name, pyr)).map_err(|e| rt(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Sets `a.b.c = value` in a TOML table, parsing `value` as a TOML literal
/// and falling back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override {assignment:?} is not KEY=VALUE")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| usage(format!("override key {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Layers defaults, the config file, `--set` overrides and explicit flags,
/// in that order, into a validated training config.
pub fn effective_train_config(args: &TrainArgs, corpus_channels: usize) -> Result<TrainConfig, CliError> {
    let mut table = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in &args.overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(l) = args.lambda {
        table.insert("lambda".into(), l.into());
    }
    if let Some(s) = args.steps {
        table.insert("steps".into(), (s as i64).into());
    }
    if let Some(s) = args.seed {
        table.insert("seed".into(), (s as i64).into());
    }
    table.entry("lambda").or_insert(LAMBDAS[2].into());
    table.entry("steps").or_insert(1000i64.into());
    let lambda = table["lambda"].as_float().or_else(|| table["lambda"].as_integer().map(|i| i as f64));
    let codec = table
        .entry("codec")
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| usage("codec must be a table"))?;
    if args.no_context_model {
        codec.insert("context_model".into(), false.into());
    }
    codec.entry("context_model").or_insert(true.into());
    codec.entry("pathway").or_insert("bottom_up".into());
    codec.entry("channels").or_insert((corpus_channels as i64).into());
    if !codec.contains_key("n") {
        let cm = codec["context_model"].as_bool().unwrap_or(true);
        let index = lambda.and_then(|l| LAMBDAS.iter().position(|&k| k == l)).unwrap_or(3);
        codec.insert("n".into(), (latent_channels_for(index, cm) as i64).into());
    }
    let config: TrainConfig = toml::Value::Table(table).try_into().map_err(usage)?;
    config.validate().map_err(usage)?;
    Ok(config)
}

fn cmd_train(args: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    if args.device != "cpu" {
        return Err(usage(format!("device {:?} is not available; use cpu", args.device)));
    }
    let files = corpus_files(&args.corpus)?;
    if files.is_empty() {
        return Err(usage(format!("no .fpf files in {}", args.corpus.display())));
    }
    let corpus: Vec<FeaturePyramid> = load_corpus(&args.corpus)?.into_iter().map(|(_, p)| p).collect();
    let config = effective_train_config(&args, corpus[0].channels)?;
    if !LAMBDAS.contains(&config.lambda) {
        let _ = writeln!(err, "warning: lambda {} is not one of the trained levels {LAMBDAS:?}", config.lambda);
    }
    let echoed = toml::to_string(&config).map_err(rt)?;
    let _ = writeln!(err, "effective config:\n{echoed}");
    let mut log_file = match &args.log {
        Some(p) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(p).map_err(rt)?);
            serde_json::to_writer(&mut f, &serde_json::json!({ "effective_config": config })).map_err(rt)?;
            writeln!(f).map_err(rt)?;
            Some(f)
        }
        None => None,
    };
    let (codec, outcome) = training::train(&config, &corpus, log_file.as_mut().map(|f| f as &mut dyn Write)).map_err(rt)?;
    if let Some(mut f) = log_file {
        f.flush().map_err(rt)?;
    }
    let ckpt = outcome.checkpoint(&config, &codec);
    checkpoint::save(&ckpt, &args.out).map_err(rt)?;
    let last = outcome.reports.last().expect("at least one step");
    let _ = writeln!(
        out,
        "trained {} steps: rate {:.5} bpp, D_total {:.5}, loss {:.5} -> {}",
        outcome.steps,
        last.rate,
        last.d_total,
        last.loss,
        args.out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Checkpoint, Codec), CliError> {
    let ckpt = checkpoint::load(path).map_err(|e| rt(format!("{}: {e}", path.display())))?;
    let codec = Codec::new(ckpt.meta.codec.clone()).map_err(rt)?;
    Ok((ckpt, codec))
}

fn cmd_encode(args: EncodeArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let _ = writeln!(err, "{}", native_status());
    let (ckpt, codec) = load_model(&args.checkpoint)?;
    let pyr = read_fpf(&args.input).map_err(rt)?;
    let enc = codec.encode(&ckpt.params, &ckpt.tables, default_coder(), &pyr).map_err(rt)?;
    std::fs::write(&args.output, &enc.stream).map_err(rt)?;
    let bpp = bitstream::bpp_of(enc.stream.len(), pyr.image_width, pyr.image_height).map_err(rt)?;
    let estimated = enc.latents.estimate.total() + (bitstream::HEADER_LEN * 8) as f64;
    let _ = writeln!(
        out,
        "{} bytes, {bpp:.6} bpp; estimated {estimated:.1} bits, actual {} bits",
        enc.stream.len(),
        enc.stream.len() * 8
    );
    Ok(())
}

fn cmd_decode(args: DecodeArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let _ = writeln!(err, "{}", native_status());
    let (ckpt, codec) = load_model(&args.checkpoint)?;
    let stream = std::fs::read(&args.input).map_err(rt)?;
    let dec = codec.decode(&ckpt.params, &ckpt.tables, default_coder(), &stream).map_err(rt)?;
    write_fpf(&dec.recon, &args.output).map_err(rt)?;
    let bpp = bitstream::bpp_of(stream.len(), dec.header.image_width, dec.header.image_height).map_err(rt)?;
    let _ = writeln!(out, "{} bytes, {bpp:.6} bpp -> {}", stream.len(), args.output.display());
    Ok(())
}

fn load_curves(path: &Path) -> Result<Vec<RdCurve>, CliError> {
    if !path.exists() {
        return Err(usage(format!("results file {} does not exist", path.display())));
    }
    let records = read_results(path).map_err(rt)?;
    curves_from_records(&records).map_err(rt)
}

fn cmd_eval(args: EvalArgs, out: &mut dyn Write) -> CliResult {
    let curves = load_curves(&args.results)?;
    let metrics = derive_metrics(&curves, args.anchor.as_deref());
    let files = emit_report(&args.out, &curves, &metrics).map_err(rt)?;
    for m in &metrics {
        let _ = writeln!(out, "{}\t{}\t{}", m.label, m.name, m.value);
    }
    let _ = writeln!(out, "wrote {}", files.points_csv.parent().unwrap_or(Path::new(".")).display());
    Ok(())
}

fn find<'a>(curves: &'a [RdCurve], label: &str) -> Result<&'a RdCurve, CliError> {
    curves
        .iter()
        .find(|c| c.label == label)
        .ok_or_else(|| usage(format!("no curve labelled {label:?}")))
}

fn cmd_bdrate(args: BdrateArgs, out: &mut dyn Write) -> CliResult {
    let curves = load_curves(&args.results)?;
    let bd = bd_rate(find(&curves, &args.test)?, find(&curves, &args.anchor)?).map_err(rt)?;
    let _ = writeln!(out, "BD-rate {} vs {}: {bd:.4}%", args.test, args.anchor);
    Ok(())
}

fn cmd_nearlossless(args: NearlosslessArgs, out: &mut dyn Write) -> CliResult {
    let curves = load_curves(&args.results)?;
    let selected: Vec<&RdCurve> = match &args.label {
        Some(l) => vec![find(&curves, l)?],
        None => curves.iter().filter(|c| c.reference.is_some()).collect(),
    };
    for c in selected {
        match near_lossless(c).map_err(rt)? {
            NearLossless::Reached { r_nl, cr_nl, .. } => {
                let _ = writeln!(out, "{}: R_NL {r_nl:.6} bpp, CR_NL {cr_nl:.1}", c.label);
            }
            NearLossless::NotReached { threshold, best_metric } => {
                let _ = writeln!(
                    out,
                    "{}: not near-lossless at tested rates (best {best_metric}, threshold {threshold})",
                    c.label
                );
            }
        }
    }
    Ok(())
}

fn cmd_layerwise(args: LayerwiseArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let ckpts: Vec<Checkpoint> = args
        .checkpoints
        .iter()
        .map(|p| checkpoint::load(p).map_err(|e| rt(format!("{}: {e}", p.display()))))
        .collect::<Result<_, _>>()?;
    let pairs: Vec<(f64, &Checkpoint)> = ckpts.iter().map(|c| (c.meta.lambda, c)).collect();
    let lambdas = if args.lambdas.is_empty() {
        pairs.iter().map(|p| p.0).collect()
    } else {
        args.lambdas.clone()
    };
    let corpus = load_corpus(&args.corpus)?;
    let coder = if args.estimate {
        None
    } else {
        let _ = writeln!(err, "{}", native_status());
        Some(default_coder())
    };
    let rows = layerwise_protocol(&pairs, &lambdas, &corpus, coder, &args.out).map_err(rt)?;
    let _ = writeln!(out, "lambda\tbpp\tD_total\tD_2\tD_3\tD_4\tD_5");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.lambda, r.bpp, r.d_total, r.d[0], r.d[1], r.d[2], r.d[3]
        );
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs, out: &mut dyn Write) -> CliResult {
    let pyr = synth_pyramid(args.seed, args.width, args.height, args.channels).map_err(usage)?;
    std::fs::write(&args.output, fpf_bytes(&pyr)).map_err(rt)?;
    let _ = writeln!(out, "wrote {}", args.output.display());
    Ok(())
}

fn cmd_pack_anchor(args: PackAnchorArgs, out: &mut dyn Write) -> CliResult {
    let pyr = read_fpf(&args.input).map_err(rt)?;
    let frame = pack_and_quantize_10bit(&pyr);
    std::fs::write(&args.output, packed_frame_pgm(&frame)).map_err(rt)?;
    let back = unpack_dequantize(&frame).map_err(rt)?;
    let max_err = pyr
        .layers
        .iter()
        .zip(&back.layers)
        .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).abs()))
        .fold(0.0, f64::max);
    let bound = (frame.vmax as f64 - frame.vmin as f64) / 2046.0;
    if let Some(p) = &args.roundtrip {
        write_fpf(&back, p).map_err(rt)?;
    }
    let _ = writeln!(
        out,
        "{}x{} frame, max error {max_err:.3e} (bound {bound:.3e})",
        frame.width, frame.height
    );
    Ok(())
}
