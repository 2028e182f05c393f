//! Subcommand implementations and the argument grammar. `run` owns the
//! exit-code contract: 0 success, 1 usage error (bad flags or semantically
//! impossible requests, nothing written), 2 runtime failure.

use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};
use modellab_core::cost::{count_flops, count_params, to_gflops, Conventions, FlopsReport, ParamsReport};
use modellab_core::lens::{input_lens, output_lens, LensReport};
use modellab_core::masking::{build_mask, render_mask, MaskPolicy, RenderFormat, TokenLayout};
use modellab_core::model::MllmModel;
use modellab_core::synth::{gen_split, SynthSample};
use modellab_core::train::{
    run_ablation, run_stage, run_variant, summarize_outcomes, SharedFeatures, Variant,
    VariantOutcome,
};
use serde::Serialize;

use crate::checkpoint;
use crate::config::{resolve, RunConfig};
use crate::dims;
use crate::fsutil::{atomic_write, atomic_write_json};
use crate::metrics::{self, Record};
use crate::report;

/// Error class that maps to exit code 1: the request itself was malformed.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

// ── Argument grammar ─────────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(
    name = "modellab",
    about = "Desk-scale multimodal transformer laboratory",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML); toy defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Materialize the synthetic dataset as JSONL (and optionally images).
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write each sample's image as a PPM file.
        #[arg(long)]
        images: bool,
    },
    /// Train one variant through both stages; writes checkpoints at stage
    /// boundaries, metrics, and a summary.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "baseline")]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full comparison matrix over the given seeds.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated seeds, one full matrix per seed.
        #[arg(long, value_delimiter = ',', default_value = "11,12,13")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read a checkpoint through both vocabulary lenses on one eval sample.
    Probe {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the eval split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Words reported per visual token.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Overlay pixels per patch.
        #[arg(long, default_value_t = 16)]
        cell: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the attention mask for a token layout.
    Mask {
        /// system,visual,user token counts.
        #[arg(long, value_parser = parse_layout)]
        layout: TokenLayout,
        #[arg(long)]
        policy: MaskPolicy,
        #[arg(long, default_value = "ascii")]
        format: RenderFormat,
        /// Required for binary formats; optional for ascii.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and FLOPs accounting for a named model shape.
    Cost {
        /// Dims preset name (see `data/dims.toml`), e.g. qwen2.5-3b or toy.
        #[arg(long)]
        dims: String,
        /// Total sequence length.
        #[arg(long)]
        seq: usize,
        /// Visual tokens within the sequence.
        #[arg(long)]
        visual: usize,
        #[arg(long)]
        policy: MaskPolicy,
        /// Feature maps concatenated by the connector.
        #[arg(long, default_value_t = 1)]
        taps: u64,
        /// Price the separate visual Q/K/V triple.
        #[arg(long)]
        separate_qkv: bool,
        #[arg(long, default_value = "standard", value_parser = parse_convention)]
        convention: Conventions,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy-decode a checkpoint over the eval split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_layout(s: &str) -> std::result::Result<TokenLayout, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected system,visual,user counts, got '{s}'"));
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse().map_err(|e| format!("bad count '{p}': {e}")))
        .collect::<std::result::Result<_, String>>()?;
    TokenLayout::new(nums[0], nums[1], nums[2]).map_err(|e| e.to_string())
}

fn parse_convention(s: &str) -> std::result::Result<Conventions, String> {
    match s {
        "standard" => Ok(Conventions::standard()),
        "kernel-exact" => Ok(Conventions::kernel_exact()),
        other => Err(format!("unknown convention '{other}' (standard | kernel-exact)")),
    }
}

// ── Entry point ──────────────────────────────────────────────────────────

/// Parses and dispatches; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(argv.iter().cloned()) {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return 1;
        }
        Err(e) => {
            // --help / --version are successful outcomes.
            let _ = e.print();
            return 0;
        }
    };
    let args: Vec<String> =
        argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &args) {
        Ok(()) => 0,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(command: Command, args: &[String]) -> Result<()> {
    match command {
        Command::GenData { common, out, images } => gen_data(common, &out, images, args),
        Command::Train { common, variant, out } => train(common, variant, &out, args),
        Command::Ablate { common, seeds, out } => ablate(common, &seeds, &out, args),
        Command::Probe { common, checkpoint, sample, k, cell, out } => {
            probe(common, &checkpoint, sample, k, cell, &out, args)
        }
        Command::Mask { layout, policy, format, out } => mask_cmd(layout, policy, format, out.as_deref()),
        Command::Cost { dims, seq, visual, policy, taps, separate_qkv, convention, out } => {
            cost_cmd(&dims, seq, visual, policy, taps, separate_qkv, convention, out.as_deref())
        }
        Command::Eval { common, checkpoint, out } => eval_cmd(common, &checkpoint, &out, args),
    }
}

// ── gen-data ─────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
struct CellRecord {
    color: usize,
    shape: usize,
}

#[derive(Debug, Serialize)]
struct DataRecord<'a> {
    index: usize,
    split: &'static str,
    key: u64,
    cells: Vec<CellRecord>,
    caption: &'a [usize],
    question: &'a [usize],
    answer: &'a [usize],
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'static str,
    args: &'a [String],
    seed: u64,
    fingerprint: u64,
    config: &'a RunConfig,
}

fn split_jsonl(
    samples: &[SynthSample],
    split: &'static str,
    out: &Path,
    images: bool,
) -> Result<String> {
    let mut text = String::new();
    for (index, s) in samples.iter().enumerate() {
        let image = if images {
            let rel = format!("images/{split}-{index:04}.ppm");
            atomic_write(&out.join(&rel), &report::image_ppm(&s.image)?)?;
            Some(rel)
        } else {
            None
        };
        let record = DataRecord {
            index,
            split,
            key: s.key,
            cells: s.cells.iter().map(|c| CellRecord { color: c.color, shape: c.shape }).collect(),
            caption: &s.caption,
            question: &s.question,
            answer: &s.answer,
            image,
        };
        text.push_str(&serde_json::to_string(&record)?);
        text.push('\n');
    }
    Ok(text)
}

fn gen_data(common: CommonArgs, out: &Path, images: bool, args: &[String]) -> Result<()> {
    let cfg = resolve(common.config.as_deref(), common.seed)?;
    let plan = cfg.to_plan();
    let (train, eval) =
        gen_split(cfg.seed, cfg.counts.train, cfg.counts.eval, &cfg.data, &cfg.model.vision)
            .map_err(|e| anyhow!("{e}"))?;
    let manifest = RunManifest {
        command: "gen-data",
        args,
        seed: cfg.seed,
        fingerprint: plan.fingerprint(),
        config: &cfg,
    };
    atomic_write_json(&out.join("manifest.json"), &manifest)?;
    atomic_write(&out.join("train.jsonl"), split_jsonl(&train, "train", out, images)?.as_bytes())?;
    atomic_write(&out.join("eval.jsonl"), split_jsonl(&eval, "eval", out, images)?.as_bytes())?;
    println!(
        "wrote {} train + {} eval samples to {}",
        train.len(),
        eval.len(),
        out.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────────

/// Mirrors the matrix runner's staging exactly (tested against it), with
/// checkpoints written at the two stage boundaries.
fn train(common: CommonArgs, variant: Variant, out: &Path, args: &[String]) -> Result<()> {
    let cfg = resolve(common.config.as_deref(), common.seed)?;
    let plan = cfg.to_plan();
    plan.validate().map_err(|e| anyhow!("{e}"))?;
    let seed = cfg.seed;
    let (train_split, eval_split) =
        gen_split(seed, cfg.counts.train, cfg.counts.eval, &cfg.data, &cfg.model.vision)
            .map_err(|e| anyhow!("{e}"))?;

    let model_cfg = variant.apply(&plan.base);
    let mut model = MllmModel::new(model_cfg, seed).map_err(|e| anyhow!("{e}"))?;
    let features: Vec<_> = train_split
        .iter()
        .map(|s| model.encode_features(&s.image))
        .collect::<modellab_core::Result<_>>()
        .map_err(|e| anyhow!("{e}"))?;

    let cut = plan.pretrain_count.min(train_split.len());
    let pretrain_report =
        run_stage(&mut model, &plan.pretrain, &train_split[..cut], Some(&features[..cut]), seed)
            .map_err(|e| anyhow!("{e}"))?;
    checkpoint::save_model(&out.join("checkpoint-pretrain.mlab"), &model)?;
    let finetune_report =
        run_stage(&mut model, &plan.finetune, &train_split, Some(&features), seed)
            .map_err(|e| anyhow!("{e}"))?;
    checkpoint::save_model(&out.join("checkpoint-final.mlab"), &model)?;

    let (samples, accuracy) = decode_split(&model, &eval_split, plan.max_new)?;
    let mut records =
        vec![metrics::manifest("train", args, seed, plan.fingerprint())];
    records.extend(metrics::stage_records(&pretrain_report));
    records.extend(metrics::stage_records(&finetune_report));
    records.extend(samples);
    records.push(Record::Eval { variant: Some(variant), seed, accuracy });
    metrics::write_jsonl(&out.join("metrics.jsonl"), &records)?;

    #[derive(Serialize)]
    struct Summary {
        variant: Variant,
        seed: u64,
        fingerprint: u64,
        accuracy: f32,
    }
    atomic_write_json(
        &out.join("summary.json"),
        &Summary { variant, seed, fingerprint: plan.fingerprint(), accuracy },
    )?;
    println!("{variant}: accuracy {accuracy:.4} ({} eval samples)", eval_split.len());
    Ok(())
}

/// Greedy-decodes every sample, returning per-sample records and the
/// exact-match accuracy (the mean of the `correct` flags).
fn decode_split(
    model: &MllmModel,
    split: &[SynthSample],
    max_new: usize,
) -> Result<(Vec<Record>, f32)> {
    if split.is_empty() {
        bail!("cannot evaluate on an empty split");
    }
    let mut records = Vec::with_capacity(split.len());
    let mut correct_count = 0usize;
    for (index, sample) in split.iter().enumerate() {
        let input = model.assemble(&sample.prompt_view()).map_err(|e| anyhow!("{e}"))?;
        let predicted = model.generate_greedy(&input, max_new).map_err(|e| anyhow!("{e}"))?;
        let correct = predicted == sample.answer;
        correct_count += correct as usize;
        records.push(Record::Sample {
            index,
            key: sample.key,
            predicted,
            expected: sample.answer.clone(),
            correct,
        });
    }
    Ok((records, correct_count as f32 / split.len() as f32))
}

// ── ablate ───────────────────────────────────────────────────────────────

fn worker_threads() -> usize {
    std::env::var("MODELLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn ablate(common: CommonArgs, seeds: &[u64], out: &Path, args: &[String]) -> Result<()> {
    if seeds.is_empty() {
        return Err(usage("at least one seed is required"));
    }
    let cfg = resolve(common.config.as_deref(), common.seed)?;
    let plan = cfg.to_plan();
    let threads = worker_threads();
    let report = if threads == 1 {
        run_ablation(&plan, seeds).map_err(|e| anyhow!("{e}"))?
    } else {
        parallel_ablation(&plan, seeds, threads)?
    };

    let table = report::ablation_table(&report);
    atomic_write_json(&out.join("report.json"), &report)?;
    atomic_write(&out.join("table.txt"), table.as_bytes())?;
    let mut records = vec![metrics::manifest(
        "ablate",
        args,
        seeds[0],
        report.fingerprint,
    )];
    records.extend(report.outcomes.iter().map(|o| Record::Eval {
        variant: Some(o.variant),
        seed: o.seed,
        accuracy: o.accuracy,
    }));
    metrics::write_jsonl(&out.join("metrics.jsonl"), &records)?;
    print!("{table}");
    Ok(())
}

/// Same matrix as the serial runner, with the per-seed variants distributed
/// over `threads` workers. Every run is independent given the shared
/// encoder features, so scheduling cannot change any result.
fn parallel_ablation(
    plan: &modellab_core::train::AblationPlan,
    seeds: &[u64],
    threads: usize,
) -> Result<modellab_core::train::AblationReport> {
    plan.validate().map_err(|e| anyhow!("{e}"))?;
    let variants: Vec<Variant> = Variant::TABLE
        .into_iter()
        .chain([Variant::NoVisualAttention])
        .collect();
    let mut outcomes: Vec<VariantOutcome> = Vec::new();
    for &seed in seeds {
        let (train, eval) =
            gen_split(seed, plan.train_count, plan.eval_count, &plan.data, &plan.base.vision)
                .map_err(|e| anyhow!("{e}"))?;
        let shared =
            SharedFeatures::compute(plan, &train, &eval, seed).map_err(|e| anyhow!("{e}"))?;
        let queue = Mutex::new(variants.iter().copied().collect::<VecDeque<_>>());
        let done: Mutex<Vec<modellab_core::Result<VariantOutcome>>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..threads.min(variants.len()) {
                scope.spawn(|| loop {
                    let Some(variant) = queue.lock().unwrap().pop_front() else {
                        break;
                    };
                    let result = run_variant(variant, plan, &train, &eval, seed, Some(&shared));
                    done.lock().unwrap().push(result);
                });
            }
        });
        for result in done.into_inner().unwrap() {
            outcomes.push(result.map_err(|e| anyhow!("{e}"))?);
        }
    }
    summarize_outcomes(plan, seeds, outcomes).map_err(|e| anyhow!("{e}"))
}

// ── probe ────────────────────────────────────────────────────────────────

fn probe(
    common: CommonArgs,
    ckpt: &Path,
    sample_index: usize,
    k: usize,
    cell: usize,
    out: &Path,
    args: &[String],
) -> Result<()> {
    if cell == 0 {
        return Err(usage("--cell must be positive"));
    }
    let cfg = resolve(common.config.as_deref(), common.seed)?;
    let model = checkpoint::load_model(ckpt)?;
    // Data geometry must match the checkpoint's encoder, not the config
    // file's; only the grid task parameters come from the config.
    let (_, eval) = gen_split(
        cfg.seed,
        cfg.counts.train,
        cfg.counts.eval,
        &cfg.data,
        &model.config().vision,
    )
    .map_err(|e| anyhow!("{e}"))?;
    let sample = eval
        .get(sample_index)
        .ok_or_else(|| usage(format!("--sample {sample_index} out of range (eval has {})", eval.len())))?;

    let input = model.assemble(&sample.prompt_view()).map_err(|e| anyhow!("{e}"))?;
    let reports = [
        ("input-lens", input_lens(&model, &input, k).map_err(|e| anyhow!("{e}"))?),
        ("output-lens", output_lens(&model, &input, k).map_err(|e| anyhow!("{e}"))?),
    ];

    let manifest = RunManifest {
        command: "probe",
        args,
        seed: cfg.seed,
        fingerprint: cfg.to_plan().fingerprint(),
        config: &cfg,
    };
    atomic_write_json(&out.join("manifest.json"), &manifest)?;
    atomic_write(&out.join("sample.ppm"), &report::image_ppm(&sample.image)?)?;
    for (name, lens) in &reports {
        atomic_write_json(&out.join(format!("{name}.json")), lens)?;
        atomic_write(&out.join(format!("{name}.ppm")), &report::lens_overlay_ppm(lens, cell)?)?;
        println!("{name}: {}", top1_grid(lens));
    }
    Ok(())
}

/// One text line per lens: the top-1 word id of each patch, row-major,
/// rows separated by ` | `.
fn top1_grid(lens: &LensReport) -> String {
    let mut rows: Vec<Vec<String>> = Vec::new();
    for e in &lens.entries {
        if rows.len() <= e.row {
            rows.resize_with(e.row + 1, Vec::new);
        }
        let top = e.top.first().map(|&(id, _)| id.to_string()).unwrap_or_else(|| "-".into());
        rows[e.row].push(top);
    }
    rows.iter().map(|r| r.join(" ")).collect::<Vec<_>>().join(" | ")
}

// ── mask ─────────────────────────────────────────────────────────────────

fn mask_cmd(
    layout: TokenLayout,
    policy: MaskPolicy,
    format: RenderFormat,
    out: Option<&Path>,
) -> Result<()> {
    let mask = build_mask(layout, policy);
    let bytes = render_mask(&mask, format).map_err(|e| anyhow!("{e}"))?;
    match (format, out) {
        (_, Some(path)) => {
            atomic_write(path, &bytes)?;
            println!("wrote {} ({} bytes)", path.display(), bytes.len());
        }
        (RenderFormat::Ascii, None) => println!("{}", String::from_utf8_lossy(&bytes)),
        (RenderFormat::Pgm, None) => {
            return Err(usage("pgm output is binary; pass --out FILE"));
        }
    }
    Ok(())
}

// ── cost ─────────────────────────────────────────────────────────────────

/// JSON written by the cost command; field order is the file format.
#[derive(Debug, Serialize)]
struct CostOutput {
    dims: String,
    layout: TokenLayout,
    policy: MaskPolicy,
    conventions: Conventions,
    attention_per_layer_gflops: f64,
    flops: FlopsReport,
    params: ParamsReport,
}

#[allow(clippy::too_many_arguments)]
fn cost_cmd(
    dims_name: &str,
    seq: usize,
    visual: usize,
    policy: MaskPolicy,
    taps: u64,
    separate_qkv: bool,
    convention: Conventions,
    out: Option<&Path>,
) -> Result<()> {
    if taps == 0 {
        return Err(usage("--taps must be positive"));
    }
    if visual > seq {
        return Err(usage(format!("--visual {visual} exceeds --seq {seq}")));
    }
    let preset = dims::resolve(dims_name).map_err(|e| usage(e.to_string()))?;
    let layout = TokenLayout::new(seq - visual, visual, 0).map_err(|e| usage(e.to_string()))?;
    let projector = preset.projector(taps);
    let flops = count_flops(&preset.llm, &projector, layout, policy, convention)
        .map_err(|e| anyhow!("{e}"))?;
    let params = count_params(&preset.llm, &preset.encoder, &projector, separate_qkv);
    let output = CostOutput {
        dims: dims_name.to_string(),
        layout,
        policy,
        conventions: convention,
        attention_per_layer_gflops: to_gflops(flops.attention_per_layer),
        flops,
        params,
    };
    let text = serde_json::to_string_pretty(&output)?;
    println!("{text}");
    if let Some(path) = out {
        atomic_write(path, format!("{text}\n").as_bytes())?;
    }
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────────

fn eval_cmd(common: CommonArgs, ckpt: &Path, out: &Path, args: &[String]) -> Result<()> {
    let cfg = resolve(common.config.as_deref(), common.seed)?;
    let model = checkpoint::load_model(ckpt)?;
    let (_, eval) = gen_split(
        cfg.seed,
        cfg.counts.train,
        cfg.counts.eval,
        &cfg.data,
        &model.config().vision,
    )
    .map_err(|e| anyhow!("{e}"))?;
    let (samples, accuracy) = decode_split(&model, &eval, cfg.max_new)?;
    let mut records = vec![metrics::manifest("eval", args, cfg.seed, cfg.to_plan().fingerprint())];
    records.extend(samples);
    records.push(Record::Eval { variant: None, seed: cfg.seed, accuracy });
    metrics::write_jsonl(&out.join("eval.jsonl"), &records)?;
    println!("accuracy {accuracy:.4} ({} eval samples)", eval.len());
    Ok(())
}
