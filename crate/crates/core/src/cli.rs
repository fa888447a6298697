//! Command-line surface: subcommand parsing, checkpoint wiring, and CSV
//! persistence for every pipeline stage.
//!
//! All stages write under one output root (the `--out` flag, else the
//! `ARTIFIX_OUT` environment variable, else `./runs`) and read their
//! hyperparameters from one TOML config. Failures print a single
//! machine-readable JSON line on stderr; missing upstream checkpoints exit
//! with code 2 and kind "dependency".

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    build_dataset, load_manifest, load_record_images, ArtifactClass, SynthModels,
};
use crate::checkpoint::Checkpoint;
use crate::config::{PipelineConfig, Split};
use crate::corpus;
use crate::error::{Error, Result};
use crate::imageio;
use crate::metrics;
use crate::restorer::{
    evaluate, restore, train_restorer, train_uncond, DiffusionModel, EvalExample, EvalMode,
    NetConfig, RestoreExample, RestoreMode, ScheduleConfig,
};
use crate::rng::derive_rng;
use crate::schedule::make_linear_schedule;
use crate::token_model::{train_token_model, TokenModel, TokenModelConfig};
use crate::vqae::{train_autoencoder, VqConfig, Vqae};

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "ARTIFIX_OUT";

/// Corpus index where held-out (test) clean images start, far past any
/// training index so the splits never overlap.
pub const TEST_CORPUS_START: u64 = 1_000_000;

const AE_KIND: &str = "autoencoder";
const TOKENS_KIND: &str = "token-model";
const UNCOND_KIND: &str = "uncond-diffusion";
const RESTORER_KIND: &str = "restorer";

#[derive(Parser)]
#[command(
    name = "artifix",
    version,
    about = "Latent-diffusion restoration of synthesized generative artifacts"
)]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,
    /// Output root (overrides the ARTIFIX_OUT environment variable).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print noise-schedule tables; optionally dump the full schedule CSV.
    InspectSchedule {
        #[arg(long, default_value_t = 1000)]
        t_count: usize,
        #[arg(long, default_value_t = 1e-4)]
        beta_start: f64,
        #[arg(long, default_value_t = 2e-2)]
        beta_end: f64,
        /// Write the whole schedule as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train the vector-quantized autoencoder on the procedural corpus.
    TrainAe {
        /// Validate the config and print the plan without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Train the next-token model on autoencoder token grids.
    TrainTokens {
        #[arg(long)]
        dry_run: bool,
    },
    /// Train the unconditional latent-diffusion model on clean latents.
    TrainUncond {
        #[arg(long)]
        dry_run: bool,
    },
    /// Train the conditional restorer on an artifact dataset.
    TrainRestorer {
        #[arg(long)]
        dry_run: bool,
    },
    /// Synthesize an artifact dataset with a manifest.
    Synth {
        /// Which parameter levels to use (train or test).
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long)]
        dry_run: bool,
    },
    /// Restore one or more artifact images.
    Restore {
        /// Input PNG paths; outputs land beside them with a mode suffix.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Artifact class for nonblind/guided modes.
        #[arg(long)]
        class: Option<String>,
        /// Guidance scale for guided mode.
        #[arg(long)]
        scale: Option<f64>,
        /// Sampler steps.
        #[arg(long, default_value_t = 30)]
        steps: usize,
        /// Noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate restoration quality over a dataset manifest.
    Eval {
        /// Manifest path (default: the test dataset under the output root).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated modes (blind,nonblind,guided).
        #[arg(long, default_value = "blind,nonblind,guided")]
        modes: String,
        /// Sweep the guidance scale over an inclusive integer range lo:hi.
        #[arg(long)]
        sweep_scale: Option<String>,
        /// Sweep sampler steps over a comma-separated list.
        #[arg(long)]
        sweep_steps: Option<String>,
    },
    /// Compare two images and print MSE/PSNR/SSIM.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        /// Also write the metrics as a one-row CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Blind,
    Nonblind,
    Guided,
}

/// Parses argv and runs the selected command.
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    let out_root = resolve_out_root(cli.out.as_deref());
    match cli.cmd {
        Command::InspectSchedule {
            t_count,
            beta_start,
            beta_end,
            csv,
        } => cmd_inspect_schedule(t_count, beta_start, beta_end, csv.as_deref()),
        Command::TrainAe { dry_run } => cmd_train_ae(&cli.config, &out_root, dry_run),
        Command::TrainTokens { dry_run } => cmd_train_tokens(&cli.config, &out_root, dry_run),
        Command::TrainUncond { dry_run } => cmd_train_uncond(&cli.config, &out_root, dry_run),
        Command::TrainRestorer { dry_run } => {
            cmd_train_restorer(&cli.config, &out_root, dry_run)
        }
        Command::Synth { split, dry_run } => {
            cmd_synth(&cli.config, &out_root, split.into(), dry_run)
        }
        Command::Restore {
            inputs,
            mode,
            class,
            scale,
            steps,
            seed,
        } => cmd_restore(&out_root, &inputs, mode, class.as_deref(), scale, steps, seed),
        Command::Eval {
            manifest,
            modes,
            sweep_scale,
            sweep_steps,
        } => cmd_eval(
            &cli.config,
            &out_root,
            manifest.as_deref(),
            &modes,
            sweep_scale.as_deref(),
            sweep_steps.as_deref(),
        ),
        Command::Metrics { a, b, csv } => cmd_metrics(&a, &b, csv.as_deref()),
    }
}

/// One machine-readable stderr line for a failure.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

fn resolve_out_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(env) = std::env::var_os(OUT_ENV) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("runs")
}

/// Stable per-stage RNG seed derived from the pipeline master seed.
fn stage_seed(master: u64, stage: &str) -> u64 {
    derive_rng(master, stage, 0).gen()
}

// Output paths under the root.

pub fn ae_checkpoint(root: &Path) -> PathBuf {
    root.join("ae.ckpt")
}

pub fn tokens_checkpoint(root: &Path) -> PathBuf {
    root.join("tokens.ckpt")
}

pub fn uncond_checkpoint(root: &Path) -> PathBuf {
    root.join("uncond.ckpt")
}

pub fn restorer_checkpoint(root: &Path) -> PathBuf {
    root.join("restorer.ckpt")
}

pub fn dataset_dir(root: &Path, split: Split) -> PathBuf {
    root.join(format!("dataset-{}", split.name()))
}

pub fn dataset_manifest(root: &Path, split: Split) -> PathBuf {
    dataset_dir(root, split).join("manifest.jsonl")
}

/// Snapshot stored in diffusion checkpoints: enough to rebuild the model.
#[derive(Serialize, Deserialize)]
struct DiffusionSnapshot {
    net: NetConfig,
    schedule: ScheduleConfig,
}

fn require_file(path: &Path, what: &str, produce_cmd: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Dependency(format!(
            "{what} {} is missing; run `artifix {produce_cmd}` first",
            path.display()
        )))
    }
}

fn check_kind(ck: &Checkpoint, expected: &str, path: &Path) -> Result<()> {
    if ck.kind == expected {
        Ok(())
    } else {
        Err(Error::corrupt(
            path,
            format!("checkpoint kind {:?}, expected {expected:?}", ck.kind),
        ))
    }
}

/// Loads the autoencoder checkpoint written by `train-ae`.
pub fn load_vqae(path: &Path) -> Result<Vqae> {
    require_file(path, "autoencoder checkpoint", "train-ae")?;
    let ck = Checkpoint::load(path)?;
    check_kind(&ck, AE_KIND, path)?;
    let cfg: VqConfig = ck.config_as()?;
    let mut model = Vqae::new(&cfg, ck.seed)?;
    ck.load_into_store(model.store_mut())?;
    Ok(model)
}

/// Loads the token-model checkpoint written by `train-tokens`.
pub fn load_token_model(path: &Path) -> Result<TokenModel> {
    require_file(path, "token model checkpoint", "train-tokens")?;
    let ck = Checkpoint::load(path)?;
    check_kind(&ck, TOKENS_KIND, path)?;
    let cfg: TokenModelConfig = ck.config_as()?;
    let mut model = TokenModel::new(&cfg, ck.seed)?;
    ck.load_into_store(model.store_mut())?;
    Ok(model)
}

fn load_diffusion(path: &Path, kind: &str, produce_cmd: &str) -> Result<DiffusionModel> {
    require_file(path, &format!("{kind} checkpoint"), produce_cmd)?;
    let ck = Checkpoint::load(path)?;
    check_kind(&ck, kind, path)?;
    let snap: DiffusionSnapshot = ck.config_as()?;
    let mut model = DiffusionModel::new(&snap.net, &snap.schedule, ck.seed)?;
    ck.load_into_store(model.store_mut())?;
    Ok(model)
}

/// Loads the unconditional diffusion checkpoint written by `train-uncond`.
pub fn load_uncond(path: &Path) -> Result<DiffusionModel> {
    load_diffusion(path, UNCOND_KIND, "train-uncond")
}

/// Loads the restorer checkpoint written by `train-restorer`.
pub fn load_restorer(path: &Path) -> Result<DiffusionModel> {
    load_diffusion(path, RESTORER_KIND, "train-restorer")
}

/// Writes rows as a comma-separated file with a header row. Fields must
/// not contain commas, quotes, or newlines; all our tabular values are
/// numbers and simple tokens.
fn write_csv<S: Display>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        let fields: Vec<String> = row.iter().map(|f| f.to_string()).collect();
        debug_assert!(fields
            .iter()
            .all(|f| !f.contains([',', '"', '\n', '\r'])));
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_out_root(root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))
}

fn print_plan<C: Serialize>(stage: &str, section: &C, outputs: &[&Path]) {
    println!("plan: {stage}");
    println!(
        "{}",
        serde_json::to_string_pretty(section).expect("config section serializes")
    );
    for o in outputs {
        println!("would write {}", o.display());
    }
    println!("dry run: nothing executed");
}

fn cmd_inspect_schedule(
    t_count: usize,
    beta_start: f64,
    beta_end: f64,
    csv: Option<&Path>,
) -> Result<()> {
    let s = make_linear_schedule(t_count, beta_start, beta_end)?;
    println!("T = {t_count}, beta {beta_start} .. {beta_end}");
    println!("t,beta,alpha,alpha_bar");
    for t in [1, t_count / 4, t_count / 2, 3 * t_count / 4, t_count] {
        let t = t.max(1);
        println!("{t},{},{},{}", s.beta(t), s.alpha(t), s.alpha_bar(t));
    }
    if let Some(path) = csv {
        let rows: Vec<Vec<String>> = (1..=t_count)
            .map(|t| {
                vec![
                    t.to_string(),
                    s.beta(t).to_string(),
                    s.alpha(t).to_string(),
                    s.alpha_bar(t).to_string(),
                ]
            })
            .collect();
        write_csv(path, &["t", "beta", "alpha", "alpha_bar"], &rows)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<PipelineConfig> {
    let cfg = PipelineConfig::load(path)?;
    if cfg.autoencoder.image_size != corpus::IMAGE_SIZE {
        return Err(Error::Config(format!(
            "autoencoder.image_size must be {} to match the procedural corpus",
            corpus::IMAGE_SIZE
        )));
    }
    Ok(cfg)
}

fn training_corpus(cfg: &PipelineConfig) -> Vec<ArrayD<f64>> {
    corpus::build_corpus(cfg.master_seed, 0, cfg.autoencoder.corpus_size)
}

fn cmd_train_ae(config: &Path, root: &Path, dry_run: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let ckpt = ae_checkpoint(root);
    let curve_path = root.join("ae_curve.csv");
    if dry_run {
        print_plan("train-ae", &cfg.autoencoder, &[&ckpt, &curve_path]);
        return Ok(());
    }
    ensure_out_root(root)?;
    let images = training_corpus(&cfg);
    let seed = stage_seed(cfg.master_seed, "stage/train-ae");
    let training = train_autoencoder(&images, &cfg.vq_config(), &cfg.vq_train_config(seed))?;

    Checkpoint::from_store(AE_KIND, cfg.master_seed, &cfg.vq_config(), training.model.store())?
        .save(&ckpt)?;
    let rows: Vec<Vec<String>> = training
        .curve
        .iter()
        .map(|(s, l)| vec![s.to_string(), l.to_string()])
        .collect();
    write_csv(&curve_path, &["step", "loss"], &rows)?;

    println!("trained autoencoder on {} images", images.len());
    println!(
        "reconstruction mse: {:.6} continuous, {:.6} quantized",
        training.recon_mse_continuous, training.recon_mse_quantized
    );
    println!("codebook usage: {:.3}", training.codebook_usage);
    println!("wrote {}", ckpt.display());
    println!("wrote {}", curve_path.display());
    Ok(())
}

fn cmd_train_tokens(config: &Path, root: &Path, dry_run: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let ckpt = tokens_checkpoint(root);
    let curve_path = root.join("tokens_curve.csv");
    if dry_run {
        print_plan("train-tokens", &cfg.token_model, &[&ckpt, &curve_path]);
        return Ok(());
    }
    let vq = load_vqae(&ae_checkpoint(root))?;
    ensure_out_root(root)?;
    let images = training_corpus(&cfg);
    let mut sequences = Vec::with_capacity(images.len());
    for img in &images {
        sequences.push(vq.tokenize(img)?.as_slice().to_vec());
    }
    let seed = stage_seed(cfg.master_seed, "stage/train-tokens");
    let training = train_token_model(&sequences, &cfg.token_config(), &cfg.token_train_config(seed))?;

    Checkpoint::from_store(
        TOKENS_KIND,
        cfg.master_seed,
        &cfg.token_config(),
        training.model.store(),
    )?
    .save(&ckpt)?;
    let rows: Vec<Vec<String>> = training
        .curve
        .iter()
        .map(|(s, l)| vec![s.to_string(), l.to_string()])
        .collect();
    write_csv(&curve_path, &["step", "loss"], &rows)?;

    println!("trained token model on {} grids", sequences.len());
    println!("holdout perplexity: {:.3}", training.holdout_perplexity);
    println!("wrote {}", ckpt.display());
    println!("wrote {}", curve_path.display());
    Ok(())
}

fn cmd_train_uncond(config: &Path, root: &Path, dry_run: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let ckpt = uncond_checkpoint(root);
    let curve_path = root.join("uncond_curve.csv");
    if dry_run {
        print_plan("train-uncond", &cfg.uncond_diffusion, &[&ckpt, &curve_path]);
        return Ok(());
    }
    let vq = load_vqae(&ae_checkpoint(root))?;
    ensure_out_root(root)?;
    let images = training_corpus(&cfg);
    let mut latents = Vec::with_capacity(images.len());
    for img in &images {
        latents.push(vq.encode(img)?);
    }
    let seed = stage_seed(cfg.master_seed, "stage/train-uncond");
    let training = train_uncond(
        &latents,
        &cfg.uncond_net(),
        &cfg.uncond_schedule(),
        &cfg.uncond_train_config(seed),
    )?;

    let snap = DiffusionSnapshot {
        net: cfg.uncond_net(),
        schedule: cfg.uncond_schedule(),
    };
    Checkpoint::from_store(UNCOND_KIND, cfg.master_seed, &snap, training.model.store())?
        .save(&ckpt)?;
    let rows: Vec<Vec<String>> = training
        .curve
        .iter()
        .map(|(s, l)| vec![s.to_string(), l.to_string()])
        .collect();
    write_csv(&curve_path, &["step", "loss"], &rows)?;

    println!("trained unconditional diffusion on {} latents", latents.len());
    println!("final loss: {:.4}", training.curve.last().map(|r| r.1).unwrap_or(f64::NAN));
    println!("wrote {}", ckpt.display());
    println!("wrote {}", curve_path.display());
    Ok(())
}

fn cmd_synth(config: &Path, root: &Path, split: Split, dry_run: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let dir = dataset_dir(root, split);
    if dry_run {
        print_plan(
            &format!("synth --split {}", split.name()),
            &cfg.artifacts,
            &[&dir],
        );
        return Ok(());
    }
    let vq = load_vqae(&ae_checkpoint(root))?;
    let token = load_token_model(&tokens_checkpoint(root))?;
    let uncond = load_uncond(&uncond_checkpoint(root))?;
    ensure_out_root(root)?;

    let count = cfg.dataset_count(split);
    let (start, seed_label) = match split {
        Split::Train => (0, "stage/synth-train"),
        Split::Test => (TEST_CORPUS_START, "stage/synth-test"),
    };
    let images = corpus::build_corpus(cfg.master_seed, start, count);
    let models = SynthModels {
        vq: &vq,
        token: &token,
        uncond: &uncond,
    };
    let manifest = build_dataset(
        &dir,
        &images,
        &models,
        &cfg.synth_levels(split)?,
        cfg.assignment()?,
        stage_seed(cfg.master_seed, seed_label),
    )?;

    let (_, records) = load_manifest(&manifest)?;
    println!("built {} pairs in {}", records.len(), dir.display());
    for class in ArtifactClass::SYNTHESIZED {
        let n = records.iter().filter(|r| r.label == class).count();
        println!("  {class}: {n}");
    }
    println!("wrote {}", manifest.display());
    Ok(())
}

fn cmd_train_restorer(config: &Path, root: &Path, dry_run: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let ckpt = restorer_checkpoint(root);
    let curve_path = root.join("restorer_curve.csv");
    if dry_run {
        print_plan("train-restorer", &cfg.restorer, &[&ckpt, &curve_path]);
        return Ok(());
    }
    let vq = load_vqae(&ae_checkpoint(root))?;
    let manifest = dataset_manifest(root, Split::Train);
    require_file(&manifest, "training dataset manifest", "synth --split train")?;
    ensure_out_root(root)?;

    let (_, records) = load_manifest(&manifest)?;
    let mut examples = Vec::with_capacity(records.len());
    for record in &records {
        let (clean, artifact) = load_record_images(&manifest, record)?;
        examples.push(RestoreExample {
            artifact: vq.encode(&artifact)?,
            clean: vq.encode(&clean)?,
            class: record.label,
        });
    }
    let seed = stage_seed(cfg.master_seed, "stage/train-restorer");
    let training = train_restorer(
        &examples,
        &cfg.restorer_net()?,
        &cfg.restorer_schedule(),
        &cfg.restorer_train_config(seed),
    )?;

    let snap = DiffusionSnapshot {
        net: cfg.restorer_net()?,
        schedule: cfg.restorer_schedule(),
    };
    Checkpoint::from_store(RESTORER_KIND, cfg.master_seed, &snap, training.model.store())?
        .save(&ckpt)?;
    let rows: Vec<Vec<String>> = training
        .curve
        .iter()
        .map(|(s, l, m)| vec![s.to_string(), l.to_string(), m.to_string()])
        .collect();
    write_csv(&curve_path, &["step", "loss", "masking_rate"], &rows)?;

    println!("trained restorer on {} pairs", examples.len());
    println!("final loss: {:.4}", training.curve.last().map(|r| r.1).unwrap_or(f64::NAN));
    println!("wrote {}", ckpt.display());
    println!("wrote {}", curve_path.display());
    Ok(())
}

fn parse_class(name: &str) -> Result<ArtifactClass> {
    let class = ArtifactClass::from_name(&name.to_uppercase())
        .map_err(|_| Error::Usage(format!("unknown artifact class {name:?}")))?;
    if class.is_mask() {
        return Err(Error::Usage(
            "MASK is not a restorable class; use --mode blind".into(),
        ));
    }
    Ok(class)
}

fn resolve_mode(mode: ModeArg, class: Option<&str>, scale: Option<f64>) -> Result<RestoreMode> {
    match mode {
        ModeArg::Blind => {
            if class.is_some() {
                eprintln!("warning: --class is ignored in blind mode");
            }
            Ok(RestoreMode::Blind)
        }
        ModeArg::Nonblind => {
            let name =
                class.ok_or_else(|| Error::Usage("--mode nonblind requires --class".into()))?;
            Ok(RestoreMode::NonBlind(parse_class(name)?))
        }
        ModeArg::Guided => {
            let name =
                class.ok_or_else(|| Error::Usage("--mode guided requires --class".into()))?;
            Ok(RestoreMode::Guided {
                class: parse_class(name)?,
                scale: scale.unwrap_or(3.0),
            })
        }
    }
}

fn mode_suffix(mode: &RestoreMode) -> String {
    match mode {
        RestoreMode::Blind => "blind".into(),
        RestoreMode::NonBlind(c) => format!("nonblind-{}", c.name().to_lowercase()),
        RestoreMode::Guided { class, scale } => {
            format!("guided-{}-s{scale}", class.name().to_lowercase())
        }
    }
}

fn cmd_restore(
    root: &Path,
    inputs: &[PathBuf],
    mode: ModeArg,
    class: Option<&str>,
    scale: Option<f64>,
    steps: usize,
    seed: u64,
) -> Result<()> {
    let mode = resolve_mode(mode, class, scale)?;
    let vq = load_vqae(&ae_checkpoint(root))?;
    let model = load_restorer(&restorer_checkpoint(root))?;
    for (ix, input) in inputs.iter().enumerate() {
        let image = imageio::load_image_png(input)?;
        let noise_seed = derive_rng(seed, "restore/input", ix as u64).gen();
        let restored = restore(&model, &vq, &image, &mode, steps, noise_seed)?;
        let stem = input
            .file_stem()
            .ok_or_else(|| Error::Usage(format!("bad input path {}", input.display())))?
            .to_string_lossy();
        let out = input.with_file_name(format!("{stem}.restored-{}.png", mode_suffix(&mode)));
        imageio::save_image_png(&out, &restored)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn parse_modes(text: &str, guidance_scale: f64) -> Result<Vec<EvalMode>> {
    let mut modes = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        match part {
            "blind" => modes.push(EvalMode::Blind),
            "nonblind" => modes.push(EvalMode::NonBlind),
            "guided" => modes.push(EvalMode::Guided(guidance_scale)),
            "" => {}
            other => {
                return Err(Error::Usage(format!(
                    "unknown mode {other:?}; expected blind, nonblind, or guided"
                )))
            }
        }
    }
    if modes.is_empty() {
        return Err(Error::Usage("no evaluation modes given".into()));
    }
    Ok(modes)
}

/// Parses an inclusive integer range "lo:hi" into float scales.
fn parse_scale_range(text: &str) -> Result<Vec<f64>> {
    let (lo, hi) = text
        .split_once(':')
        .ok_or_else(|| Error::Usage(format!("bad scale range {text:?}; expected lo:hi")))?;
    let lo: i64 = lo
        .trim()
        .parse()
        .map_err(|_| Error::Usage(format!("bad scale range bound {lo:?}")))?;
    let hi: i64 = hi
        .trim()
        .parse()
        .map_err(|_| Error::Usage(format!("bad scale range bound {hi:?}")))?;
    if lo > hi {
        return Err(Error::Usage(format!("empty scale range {text:?}")));
    }
    Ok((lo..=hi).map(|s| s as f64).collect())
}

fn parse_steps_list(text: &str) -> Result<Vec<usize>> {
    let mut steps = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let n: usize = part
            .parse()
            .map_err(|_| Error::Usage(format!("bad step count {part:?}")))?;
        if n == 0 {
            return Err(Error::Usage("step counts must be positive".into()));
        }
        steps.push(n);
    }
    if steps.is_empty() {
        return Err(Error::Usage("no step counts given".into()));
    }
    Ok(steps)
}

fn eval_examples(manifest: &Path, limit: usize) -> Result<Vec<EvalExample>> {
    let (_, records) = load_manifest(manifest)?;
    let mut examples = Vec::new();
    for record in records.iter().take(limit) {
        let (clean, artifact) = load_record_images(manifest, record)?;
        examples.push(EvalExample {
            clean,
            artifact,
            class: record.label,
        });
    }
    Ok(examples)
}

fn class_field(class: Option<ArtifactClass>) -> String {
    class.map_or_else(|| "OVERALL".to_string(), |c| c.name().to_string())
}

fn cmd_eval(
    config: &Path,
    root: &Path,
    manifest: Option<&Path>,
    modes_text: &str,
    sweep_scale: Option<&str>,
    sweep_steps: Option<&str>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let default_manifest = dataset_manifest(root, Split::Test);
    let manifest = manifest.unwrap_or(&default_manifest);
    require_file(manifest, "evaluation manifest", "synth --split test")?;
    let vq = load_vqae(&ae_checkpoint(root))?;
    let model = load_restorer(&restorer_checkpoint(root))?;
    ensure_out_root(root)?;

    let examples = eval_examples(manifest, cfg.eval.count)?;
    let eval_seed = stage_seed(cfg.master_seed, "stage/eval");
    let modes = parse_modes(modes_text, cfg.eval.guidance_scale)?;

    let rows = evaluate(&model, &vq, &examples, &modes, cfg.eval.steps, eval_seed)?;
    let report_path = root.join("eval_report.csv");
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.mode.clone(),
                class_field(r.class),
                r.count.to_string(),
                r.mse.to_string(),
                r.psnr.to_string(),
                r.ssim.to_string(),
            ]
        })
        .collect();
    write_csv(
        &report_path,
        &["mode", "class", "count", "mse", "psnr", "ssim"],
        &csv_rows,
    )?;
    println!("evaluated {} examples over {} modes", examples.len(), modes.len());
    for r in rows.iter().filter(|r| r.class.is_none()) {
        println!(
            "  {}: mse={:.5} psnr={:.2} ssim={:.3}",
            r.mode, r.mse, r.psnr, r.ssim
        );
    }
    println!("wrote {}", report_path.display());

    if let Some(range) = sweep_scale {
        let path = root.join("sweep_scale.csv");
        let mut csv_rows = Vec::new();
        for scale in parse_scale_range(range)? {
            let rows = evaluate(
                &model,
                &vq,
                &examples,
                &[EvalMode::Guided(scale)],
                cfg.eval.steps,
                eval_seed,
            )?;
            let overall = rows.iter().find(|r| r.class.is_none()).expect("overall row");
            csv_rows.push(vec![
                scale.to_string(),
                overall.mse.to_string(),
                overall.psnr.to_string(),
                overall.ssim.to_string(),
            ]);
        }
        write_csv(&path, &["scale", "mse", "psnr", "ssim"], &csv_rows)?;
        println!("wrote {}", path.display());
    }

    if let Some(list) = sweep_steps {
        let path = root.join("sweep_steps.csv");
        let mut csv_rows = Vec::new();
        for steps in parse_steps_list(list)? {
            let rows = evaluate(
                &model,
                &vq,
                &examples,
                &[EvalMode::Guided(cfg.eval.guidance_scale)],
                steps,
                eval_seed,
            )?;
            let overall = rows.iter().find(|r| r.class.is_none()).expect("overall row");
            csv_rows.push(vec![
                steps.to_string(),
                overall.mse.to_string(),
                overall.psnr.to_string(),
                overall.ssim.to_string(),
            ]);
        }
        write_csv(&path, &["steps", "mse", "psnr", "ssim"], &csv_rows)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_metrics(a: &Path, b: &Path, csv: Option<&Path>) -> Result<()> {
    let img_a = imageio::load_image_png(a)?;
    let img_b = imageio::load_image_png(b)?;
    let m = metrics::compare(
        &metrics::to_unit_range(&img_a),
        &metrics::to_unit_range(&img_b),
    )?;
    println!("mse: {}", m.mse);
    println!("psnr: {}", m.psnr);
    println!("ssim: {}", m.ssim);
    if let Some(path) = csv {
        write_csv(
            path,
            &["mse", "psnr", "ssim"],
            &[vec![m.mse.to_string(), m.psnr.to_string(), m.ssim.to_string()]],
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
