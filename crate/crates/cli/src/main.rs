//! Command-line driver: synthetic data generation, embedding generation,
//! two-stage training, episodic evaluation, gradient checking, attention
//! dumps, and manifest replay.
//!
//! Every command that writes files also writes a JSON run manifest next to
//! its primary output; `replay --manifest <file>` re-executes the recorded
//! command with the recorded configuration and reproduces the outputs byte
//! for byte.
//!
//! Exit codes: 0 success, 1 runtime or check failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fewshot_core::checkpoint::{load_checkpoint, read_tensor_block, save_checkpoint};
use fewshot_core::data::{
    generate_synthetic_dataset, load_dataset, save_dataset, Split, SplitDataset,
};
use fewshot_core::embeddings::{
    load_embeddings, save_embeddings, synth_embeddings, synth_embeddings_aligned,
    ClassEmbeddingTable,
};
use fewshot_core::encoder::{Encoder, ModelConfig};
use fewshot_core::evaluation::{self, Classifier, DEFAULT_EPISODES};
use fewshot_core::nn::Activation;
use fewshot_core::prompt::{
    CiInner, Mechanism, Pooling, ProjectorKind, PromptConfig, PromptModule,
};
use fewshot_core::training::{
    meta_train, pretrain, toy_gradient_check, ClassifierHead, OptimizerKind, TrainConfig,
};
use fewshot_core::Tensor;

const MANIFEST_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "fewshot",
    about = "Prompt-conditioned few-shot image recognition at desk scale",
    version
)]
struct Cli {
    /// Cap the worker pool used for episode evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Generate synthetic class-name embeddings for a dataset.
    GenEmbeddings(GenEmbeddingsArgs),
    /// Stage one: supervised pre-training of the encoder.
    Pretrain(PretrainArgs),
    /// Stage two: episodic meta-training of encoder and projectors.
    Metatrain(MetatrainArgs),
    /// Episodic evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of every gradient path.
    Gradcheck(GradcheckArgs),
    /// Dump an attention heatmap for one image and class name.
    Attention(AttentionArgs),
    /// Re-run a recorded command from its manifest.
    Replay(ReplayArgs),
}

fn parse_positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a positive finite number, got {s}"))
    }
}

fn parse_nonneg_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a nonnegative finite number, got {s}"))
    }
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct GenDataArgs {
    /// Number of classes (split roughly 1/2 base, 1/4 val, 1/4 novel).
    #[arg(long, default_value_t = 20)]
    classes: usize,
    /// Images per class.
    #[arg(long = "per-class", default_value_t = 20)]
    per_class: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Motif cell side in pixels.
    #[arg(long, default_value_t = 4)]
    cell: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct GenEmbeddingsArgs {
    /// Dataset directory (class names come from classes.tsv).
    #[arg(long)]
    data: PathBuf,
    /// Embedding dimension D_g.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Derive embeddings from the dataset's motifs (requires the dataset
    /// manifest written by gen-data) instead of pure name hashes.
    #[arg(long, default_value_t = false)]
    aligned: bool,
    /// Output embedding file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    patch: usize,
    #[arg(long = "mlp-ratio", default_value_t = 4)]
    mlp_ratio: usize,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct PretrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3, value_parser = parse_positive_f64)]
    lr: f64,
    #[arg(long = "weight-decay", default_value_t = 1e-4, value_parser = parse_nonneg_f64)]
    weight_decay: f64,
    #[arg(long, default_value = "adamw")]
    optimizer: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Optional loss/accuracy curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct MetatrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Pre-trained encoder checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Class-name embedding file.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value = "both")]
    mechanism: String,
    /// 1-based injection layer; defaults to the final third of the depth.
    #[arg(long = "inject-layer")]
    inject_layer: Option<usize>,
    #[arg(long, default_value = "linear")]
    projector: String,
    #[arg(long, default_value = "all")]
    pooling: String,
    #[arg(long = "ci-inner", default_value = "sigmoid")]
    ci_inner: String,
    #[arg(long, default_value_t = 0.2, value_parser = parse_positive_f64)]
    tau: f64,
    #[arg(long = "lr-encoder", default_value_t = 1e-4, value_parser = parse_nonneg_f64)]
    lr_encoder: f64,
    #[arg(long = "lr-projectors", default_value_t = 1e-3, value_parser = parse_nonneg_f64)]
    lr_projectors: f64,
    #[arg(long = "weight-decay", default_value_t = 1e-4, value_parser = parse_nonneg_f64)]
    weight_decay: f64,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    /// Episodes per epoch.
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    /// Queries per class in each training episode.
    #[arg(long, default_value_t = 15)]
    queries: usize,
    /// Validation episodes at the end of each epoch (0 skips).
    #[arg(long = "val-episodes", default_value_t = 0)]
    val_episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Optional curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Embedding file; required when the checkpoint carries a prompt module.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value = "novel")]
    split: String,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 15)]
    queries: usize,
    /// Number of test episodes.
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    episodes: usize,
    /// nn = cosine nearest prototype, lr = logistic regression.
    #[arg(long, default_value = "nn")]
    classifier: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional report base path; writes <base>.txt, <base>.csv.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4, value_parser = parse_positive_f64)]
    epsilon: f64,
    /// Worst relative error accepted.
    #[arg(long, default_value_t = 1e-4, value_parser = parse_positive_f64)]
    tolerance: f64,
    /// Test hook: corrupt one analytic gradient (must make the check fail).
    #[arg(long, hide = true, default_value_t = false)]
    corrupt: bool,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct AttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Record file holding one image tensor block.
    #[arg(long)]
    image: PathBuf,
    /// Class name used as the prompt.
    #[arg(long = "class-name")]
    class_name: String,
    #[arg(long)]
    embeddings: PathBuf,
    /// Output base path; writes <base>.csv and <base>.pgm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ReplayArgs {
    /// Manifest written by a previous run.
    #[arg(long)]
    manifest: PathBuf,
}

/// Everything needed to reproduce a run, written next to its outputs.
#[derive(Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum ManifestBody {
    GenData(GenDataArgs),
    GenEmbeddings(GenEmbeddingsArgs),
    Pretrain(PretrainArgs),
    Metatrain(MetatrainArgs),
    Eval(EvalArgs),
    Attention(AttentionArgs),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    #[serde(flatten)]
    body: ManifestBody,
}

fn write_manifest(path: &Path, body: ManifestBody) -> anyhow::Result<()> {
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        body,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn manifest_sibling(primary_output: &Path) -> PathBuf {
    let mut name = primary_output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    name.push_str(".manifest.json");
    primary_output.with_file_name(name)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
        {
            eprintln!("error: could not configure {threads} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::GenData(args) => run_gen_data(&args),
        Command::GenEmbeddings(args) => run_gen_embeddings(&args),
        Command::Pretrain(args) => run_pretrain(&args),
        Command::Metatrain(args) => run_metatrain(&args),
        Command::Eval(args) => run_eval(&args),
        Command::Gradcheck(args) => return run_gradcheck(&args),
        Command::Attention(args) => run_attention(&args),
        Command::Replay(args) => run_replay(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run_gen_data(args: &GenDataArgs) -> anyhow::Result<()> {
    let ds = generate_synthetic_dataset(args.classes, args.per_class, args.size, args.cell, args.seed)?;
    save_dataset(&args.out, &ds)?;
    write_manifest(
        &args.out.join("manifest.json"),
        ManifestBody::GenData(args.clone()),
    )?;
    let n: usize = [Split::Base, Split::Validation, Split::Novel]
        .iter()
        .map(|s| ds.records(*s).len())
        .sum();
    println!(
        "wrote {} records across {} classes to {}",
        n,
        args.classes,
        args.out.display()
    );
    Ok(())
}

fn dataset_classes(ds: &SplitDataset) -> Vec<(usize, String)> {
    let mut all = ds.classes(Split::Base);
    all.extend(ds.classes(Split::Validation));
    all.extend(ds.classes(Split::Novel));
    all.sort();
    all
}

fn run_gen_embeddings(args: &GenEmbeddingsArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&args.data)?;
    let classes = dataset_classes(&ds);
    let table = if args.aligned {
        let manifest_path = args.data.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).with_context(|| {
            format!(
                "aligned mode needs the dataset manifest at {}",
                manifest_path.display()
            )
        })?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let ManifestBody::GenData(gen) = manifest.body else {
            bail!("{} is not a gen-data manifest", manifest_path.display());
        };
        synth_embeddings_aligned(&classes, args.dim, gen.seed, gen.cell, args.seed)?
    } else {
        let names: Vec<String> = classes.into_iter().map(|(_, n)| n).collect();
        synth_embeddings(&names, args.dim, args.seed)?
    };
    save_embeddings(&args.out, &table)?;
    write_manifest(
        &manifest_sibling(&args.out),
        ManifestBody::GenEmbeddings(args.clone()),
    )?;
    println!(
        "wrote {} embeddings (dim {}) to {}",
        table.len(),
        table.dim(),
        args.out.display()
    );
    Ok(())
}

fn model_config_from(args: &ModelArgs, ds: &SplitDataset) -> anyhow::Result<ModelConfig> {
    let sample = ds
        .base
        .first()
        .ok_or_else(|| anyhow!("dataset has no base records"))?;
    let shape = sample.image.shape();
    let cfg = ModelConfig {
        image_size: shape[0],
        channels: shape[2],
        patch_size: args.patch,
        depth: args.depth,
        width: args.width,
        heads: args.heads,
        mlp_ratio: args.mlp_ratio,
        activation: Activation::GeluTanh,
        ln_eps: 1e-5,
        scale_exponent: 0.25,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run_pretrain(args: &PretrainArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&args.data)?;
    let model = model_config_from(&args.model, &ds)?;
    let mut enc = Encoder::init(model.clone(), args.seed)?;
    let mut head = ClassifierHead::zeros(ds.classes(Split::Base).len(), model.width);
    let mut cfg = TrainConfig::pretrain_desk(args.seed);
    cfg.epochs = args.epochs;
    cfg.batch_size = args.batch;
    cfg.lr_encoder = args.lr;
    cfg.weight_decay = args.weight_decay;
    cfg.optimizer = OptimizerKind::parse(&args.optimizer)?;
    let curve = pretrain(&mut enc, &mut head, &ds, &cfg)?;
    // the classification head is a pre-training scaffold; the checkpoint
    // carries the encoder only
    save_checkpoint(&args.out, &enc, None)?;
    if let Some(curve_path) = &args.curve {
        fs::write(curve_path, curve.to_csv())
            .with_context(|| format!("writing {}", curve_path.display()))?;
    }
    write_manifest(&manifest_sibling(&args.out), ManifestBody::Pretrain(args.clone()))?;
    println!(
        "pre-trained {} epochs; final train loss {:.4}, acc {:.4}; checkpoint at {}",
        args.epochs,
        curve.last("train", "loss").unwrap_or(f64::NAN),
        curve.last("train", "acc").unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn prompt_config_from(
    args: &MetatrainArgs,
    model: &ModelConfig,
    dim: usize,
) -> anyhow::Result<PromptConfig> {
    let cfg = PromptConfig {
        inject_layer: args
            .inject_layer
            .unwrap_or_else(|| PromptConfig::default_inject_layer(model.depth)),
        mechanism: Mechanism::parse(&args.mechanism)?,
        projector_kind: ProjectorKind::parse(&args.projector)?,
        pooling: Pooling::parse(&args.pooling)?,
        semantic_dim: dim,
        ci_inner: CiInner::parse(&args.ci_inner)?,
    };
    cfg.validate(model.depth)?;
    Ok(cfg)
}

fn run_metatrain(args: &MetatrainArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&args.data)?;
    let table = load_embeddings(&args.embeddings)?;
    let loaded = load_checkpoint(&args.checkpoint)?;
    let mut enc = loaded.encoder;
    let pcfg = prompt_config_from(args, &enc.cfg, table.dim())?;
    let mut pm = PromptModule::init(pcfg.clone(), &enc.cfg, args.seed ^ 0x50524f4a)?;
    let mut cfg = TrainConfig::meta_desk(pcfg, args.seed);
    cfg.temperature = args.tau;
    cfg.lr_encoder = args.lr_encoder;
    cfg.lr_projectors = args.lr_projectors;
    cfg.weight_decay = args.weight_decay;
    cfg.epochs = args.epochs;
    cfg.episodes_per_epoch = args.episodes;
    cfg.way = args.ways;
    cfg.shot = args.shots;
    cfg.queries_per_class = args.queries;
    cfg.val_episodes_per_epoch = args.val_episodes;
    let curve = meta_train(&mut enc, &mut pm, &ds, &table, &cfg)?;
    save_checkpoint(&args.out, &enc, Some(&pm))?;
    if let Some(curve_path) = &args.curve {
        fs::write(curve_path, curve.to_csv())
            .with_context(|| format!("writing {}", curve_path.display()))?;
    }
    write_manifest(&manifest_sibling(&args.out), ManifestBody::Metatrain(args.clone()))?;
    println!(
        "meta-trained {} epochs ({} episodes each); final episode acc {:.4}; checkpoint at {}",
        args.epochs,
        args.episodes,
        curve.last("train", "acc").unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&args.data)?;
    let split = Split::parse(&args.split)?;
    let loaded = load_checkpoint(&args.checkpoint)?;
    let classifier = Classifier::parse(&args.classifier)?;
    let table = match &args.embeddings {
        Some(path) => Some(load_embeddings(path)?),
        None => None,
    };
    let prompt: Option<(&PromptModule, &ClassEmbeddingTable)> = match (&loaded.prompt, &table) {
        (Some(pm), Some(t)) if pm.cfg.mechanism != Mechanism::None => Some((pm, t)),
        (Some(pm), None) if pm.cfg.mechanism != Mechanism::None => {
            bail!("checkpoint uses prompting; pass --embeddings")
        }
        _ => None,
    };
    let report = evaluation::evaluate(
        &loaded.encoder,
        prompt,
        ds.records(split),
        args.ways,
        args.shots,
        args.queries,
        args.episodes,
        classifier,
        args.seed,
    )?;
    println!("{}", report.summary_line());
    if let Some(base) = &args.report {
        let txt = base.with_extension("txt");
        let csv = base.with_extension("csv");
        fs::write(&txt, report.summary_text())
            .with_context(|| format!("writing {}", txt.display()))?;
        fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
        write_manifest(&manifest_sibling(base), ManifestBody::Eval(args.clone()))?;
    }
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> ExitCode {
    match toy_gradient_check(args.epsilon, args.corrupt) {
        Ok(summary) => {
            println!("per-parameter worst relative errors (descending):");
            for (name, err) in &summary.merged {
                println!("  {err:.3e}  {name}");
            }
            println!(
                "worst {:.3e} over {} scenarios at epsilon {:.0e} (tolerance {:.0e})",
                summary.worst,
                summary.scenarios.len(),
                args.epsilon,
                args.tolerance
            );
            if summary.passes(args.tolerance) {
                println!("PASS");
                ExitCode::SUCCESS
            } else {
                println!("FAIL");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run_attention(args: &AttentionArgs) -> anyhow::Result<()> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    let table = load_embeddings(&args.embeddings)?;
    if !table.contains(&args.class_name) {
        let names: Vec<&str> = table.names().collect();
        bail!(
            "class {:?} not in the embedding table; available: {}",
            args.class_name,
            names.join(", ")
        );
    }
    let image = read_image_record(&args.image)?;
    let g = table.get(&args.class_name)?;
    let prompt: Option<(&PromptModule, &Tensor)> = loaded
        .prompt
        .as_ref()
        .filter(|pm| pm.cfg.mechanism != Mechanism::None)
        .map(|pm| (pm, g));
    let heat = evaluation::dump_attention(&loaded.encoder, prompt, &image, &args.out)?;
    write_manifest(&manifest_sibling(&args.out), ManifestBody::Attention(args.clone()))?;
    println!(
        "wrote {}x{} heatmap to {}.csv / {}.pgm",
        heat.rows(),
        heat.cols(),
        args.out.display(),
        args.out.display()
    );
    Ok(())
}

fn read_image_record(path: &Path) -> anyhow::Result<Tensor> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = std::io::BufReader::new(file);
    let (_, image) = read_tensor_block(&mut reader, &path.display().to_string())?
        .ok_or_else(|| anyhow!("{} holds no tensor block", path.display()))?;
    Ok(image)
}

fn run_replay(args: &ReplayArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.manifest)
        .with_context(|| format!("reading {}", args.manifest.display()))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != MANIFEST_VERSION {
        bail!(
            "manifest format {} unsupported (expected {})",
            manifest.format_version,
            MANIFEST_VERSION
        );
    }
    match manifest.body {
        ManifestBody::GenData(a) => run_gen_data(&a),
        ManifestBody::GenEmbeddings(a) => run_gen_embeddings(&a),
        ManifestBody::Pretrain(a) => run_pretrain(&a),
        ManifestBody::Metatrain(a) => run_metatrain(&a),
        ManifestBody::Eval(a) => run_eval(&a),
        ManifestBody::Attention(a) => run_attention(&a),
    }
}
