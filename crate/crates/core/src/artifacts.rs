//! Artifact classes and synthesis of degraded/clean image pairs.
//!
//! Each synthesizer degrades one clean image through the generative stack
//! (token replacement, autoregressive resampling, or DDIM inversion round
//! trips) and records the parameters needed to regenerate the artifact
//! bit-for-bit. `build_dataset` runs a synthesizer per image and writes the
//! images plus a line-delimited JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffusion::{ddim_generate, ddim_invert};
use crate::error::{Error, Result};
use crate::imageio;
use crate::restorer::{destandardize, standardize, DiffusionModel};
use crate::rng::{derive_rng, standard_normal};
use crate::token_model::{resample_tokens, SamplingParams, TokenModel};
use crate::vqae::{tokens_to_latent, TokenGrid, Vqae};

/// The four synthesized artifact classes plus the MASK conditioning label.
///
/// MASK is never emitted by a synthesizer; it exists only as the "unknown
/// artifact" label for classifier-free conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ArtifactClass {
    ReplaceToken,
    GptSampling,
    DdimGaussian,
    DdimScale,
    Mask,
}

impl ArtifactClass {
    /// Every label, in embedding-row order.
    pub const ALL: [ArtifactClass; 5] = [
        ArtifactClass::ReplaceToken,
        ArtifactClass::GptSampling,
        ArtifactClass::DdimGaussian,
        ArtifactClass::DdimScale,
        ArtifactClass::Mask,
    ];

    /// The classes a synthesizer can produce (everything but MASK).
    pub const SYNTHESIZED: [ArtifactClass; 4] = [
        ArtifactClass::ReplaceToken,
        ArtifactClass::GptSampling,
        ArtifactClass::DdimGaussian,
        ArtifactClass::DdimScale,
    ];

    /// Stable embedding-row index.
    pub fn index(self) -> usize {
        match self {
            ArtifactClass::ReplaceToken => 0,
            ArtifactClass::GptSampling => 1,
            ArtifactClass::DdimGaussian => 2,
            ArtifactClass::DdimScale => 3,
            ArtifactClass::Mask => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ArtifactClass::ReplaceToken => "REPLACE_TOKEN",
            ArtifactClass::GptSampling => "GPT_SAMPLING",
            ArtifactClass::DdimGaussian => "DDIM_GAUSSIAN",
            ArtifactClass::DdimScale => "DDIM_SCALE",
            ArtifactClass::Mask => "MASK",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown artifact class {name:?}")))
    }

    pub fn is_mask(self) -> bool {
        self == ArtifactClass::Mask
    }
}

impl std::fmt::Display for ArtifactClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}


/// One synthesized artifact: the degraded image plus everything needed to
/// regenerate it (class, parameters; the seed travels separately).
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub artifact: ArrayD<f64>,
    pub label: ArtifactClass,
    pub params: BTreeMap<String, serde_json::Value>,
}

/// Writes i.i.d. uniform codebook indices into a uniformly placed
/// `rect_h x rect_w` rectangle. Returns the edited grid, the rectangle's
/// top-left corner, and the sampled tokens in raster order.
pub fn replace_rect_tokens(
    grid: &TokenGrid,
    rect_h: usize,
    rect_w: usize,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<(TokenGrid, usize, usize, Vec<usize>)> {
    if rect_h > grid.h() || rect_w > grid.w() {
        return Err(Error::invalid(format!(
            "{rect_h}x{rect_w} rectangle does not fit a {}x{} token grid",
            grid.h(),
            grid.w()
        )));
    }
    let top = rng.gen_range(0..=grid.h() - rect_h);
    let left = rng.gen_range(0..=grid.w() - rect_w);
    let mut out = grid.clone();
    let mut sampled = Vec::with_capacity(rect_h * rect_w);
    for i in top..top + rect_h {
        for j in left..left + rect_w {
            let token = rng.gen_range(0..vocab_size);
            out.set(i, j, token);
            sampled.push(token);
        }
    }
    Ok((out, top, left, sampled))
}

/// REPLACE_TOKEN: re-rolls the tokens under a random rectangle and decodes.
pub fn synth_replace_token(
    x: &ArrayD<f64>,
    vq: &Vqae,
    rect_h: usize,
    rect_w: usize,
    seed: u64,
) -> Result<SynthOutput> {
    let grid = vq.tokenize(x)?;
    let mut rng = derive_rng(seed, "synth/replace-token", 0);
    let (edited, top, left, sampled) =
        replace_rect_tokens(&grid, rect_h, rect_w, vq.config().codebook_size, &mut rng)?;
    let codebook = vq.codebook()?;
    let artifact = vq.decode(&tokens_to_latent(&edited, &codebook)?)?;
    Ok(SynthOutput {
        artifact,
        label: ArtifactClass::ReplaceToken,
        params: BTreeMap::from([
            ("rect_h".into(), json!(rect_h)),
            ("rect_w".into(), json!(rect_w)),
            ("top".into(), json!(top)),
            ("left".into(), json!(left)),
            ("tokens".into(), json!(sampled)),
        ]),
    })
}

/// GPT_SAMPLING: resamples a fraction of tokens autoregressively with a
/// hot sampling distribution and decodes.
pub fn synth_gpt_sampling(
    x: &ArrayD<f64>,
    vq: &Vqae,
    tm: &TokenModel,
    p: &SamplingParams,
    keep_fraction: f64,
    seed: u64,
) -> Result<SynthOutput> {
    check_token_model(vq, tm)?;
    let grid = vq.tokenize(x)?;
    let mut rng = derive_rng(seed, "synth/gpt-sampling", 0);
    let resampled = resample_tokens(&grid, tm, keep_fraction, p, &mut rng)?;
    let codebook = vq.codebook()?;
    let artifact = vq.decode(&tokens_to_latent(&resampled, &codebook)?)?;
    Ok(SynthOutput {
        artifact,
        label: ArtifactClass::GptSampling,
        params: BTreeMap::from([
            ("temperature".into(), json!(p.temperature)),
            ("top_k".into(), json!(p.top_k)),
            ("keep_fraction".into(), json!(keep_fraction)),
        ]),
    })
}

/// DDIM_GAUSSIAN: inverts the latent to t0, adds `alpha`-scaled white
/// noise, and generates back down.
pub fn synth_ddim_gaussian(
    x: &ArrayD<f64>,
    vq: &Vqae,
    ud: &DiffusionModel,
    t0: usize,
    n_steps: usize,
    alpha: f64,
    seed: u64,
) -> Result<SynthOutput> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid(format!(
            "noise level alpha must be finite and nonnegative, got {alpha}"
        )));
    }
    let mut latent = invert_latent(x, vq, ud, t0, n_steps)?;
    if alpha > 0.0 {
        let mut rng = derive_rng(seed, "synth/ddim-gaussian", 0);
        let noise = standard_normal(&mut rng, latent.shape());
        latent = latent + noise.mapv(|v| alpha * v);
    }
    let artifact = generate_from_latent(&latent, vq, ud, t0, n_steps)?;
    Ok(SynthOutput {
        artifact,
        label: ArtifactClass::DdimGaussian,
        params: BTreeMap::from([
            ("t0".into(), json!(t0)),
            ("n_steps".into(), json!(n_steps)),
            ("alpha".into(), json!(alpha)),
        ]),
    })
}

/// DDIM_SCALE: inverts the latent to t0, applies `gamma * latent + beta`,
/// and generates back down. Deterministic given weights.
pub fn synth_ddim_scale(
    x: &ArrayD<f64>,
    vq: &Vqae,
    ud: &DiffusionModel,
    t0: usize,
    n_steps: usize,
    gamma: f64,
    beta: f64,
) -> Result<SynthOutput> {
    if !gamma.is_finite() || gamma == 0.0 {
        return Err(Error::invalid(format!(
            "scale gamma must be finite and nonzero, got {gamma}"
        )));
    }
    if !beta.is_finite() {
        return Err(Error::invalid(format!("shift beta must be finite, got {beta}")));
    }
    let latent = invert_latent(x, vq, ud, t0, n_steps)?;
    let perturbed = latent.mapv(|v| gamma * v + beta);
    let artifact = generate_from_latent(&perturbed, vq, ud, t0, n_steps)?;
    Ok(SynthOutput {
        artifact,
        label: ArtifactClass::DdimScale,
        params: BTreeMap::from([
            ("t0".into(), json!(t0)),
            ("n_steps".into(), json!(n_steps)),
            ("gamma".into(), json!(gamma)),
            ("beta".into(), json!(beta)),
        ]),
    })
}

fn check_uncond(vq: &Vqae, ud: &DiffusionModel) -> Result<()> {
    if ud.net_config().conditional {
        return Err(Error::invalid(
            "DDIM artifacts need the unconditional diffusion model",
        ));
    }
    if ud.net_config().latent_dim != vq.config().latent_dim {
        return Err(Error::Dependency(format!(
            "diffusion model latent dimension {} does not match the autoencoder's {}",
            ud.net_config().latent_dim,
            vq.config().latent_dim
        )));
    }
    Ok(())
}

fn check_token_model(vq: &Vqae, tm: &TokenModel) -> Result<()> {
    if tm.config().vocab_size != vq.config().codebook_size {
        return Err(Error::Dependency(format!(
            "token model vocabulary {} does not match the codebook size {}",
            tm.config().vocab_size,
            vq.config().codebook_size
        )));
    }
    let grid = vq.config().grid_size();
    if tm.config().seq_len != grid * grid {
        return Err(Error::Dependency(format!(
            "token model sequence length {} does not match the {}x{} token grid",
            tm.config().seq_len,
            grid,
            grid
        )));
    }
    Ok(())
}

/// Encode, standardize, and invert a clean image up to t0.
fn invert_latent(
    x: &ArrayD<f64>,
    vq: &Vqae,
    ud: &DiffusionModel,
    t0: usize,
    n_steps: usize,
) -> Result<ArrayD<f64>> {
    check_uncond(vq, ud)?;
    let stats = ud.latent_stats();
    let z = standardize(&vq.encode(x)?, &stats);
    ddim_invert(ud, ud.schedule(), &z, t0, n_steps)
}

/// Generate from a (possibly perturbed) t0 latent and decode to pixels.
fn generate_from_latent(
    latent: &ArrayD<f64>,
    vq: &Vqae,
    ud: &DiffusionModel,
    t0: usize,
    n_steps: usize,
) -> Result<ArrayD<f64>> {
    let stats = ud.latent_stats();
    let y = ddim_generate(ud, ud.schedule(), latent, t0, n_steps)?;
    vq.decode(&destandardize(&y, &stats))
}

/// The trained models a synthesizer draws on.
pub struct SynthModels<'a> {
    pub vq: &'a Vqae,
    pub token: &'a TokenModel,
    pub uncond: &'a DiffusionModel,
}

/// Per-class synthesis parameter levels for one dataset split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthLevels {
    pub rect_h: usize,
    pub rect_w: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub keep_fraction: f64,
    pub t0: usize,
    pub n_steps: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl SynthLevels {
    /// Training-split levels.
    pub fn train_defaults() -> Self {
        SynthLevels {
            rect_h: 4,
            rect_w: 4,
            temperature: 3.0,
            top_k: 16,
            keep_fraction: 0.9,
            t0: 840,
            n_steps: 48,
            alpha: 0.3,
            gamma: 1.015,
            beta: 0.01,
        }
    }

    /// Test-split levels: milder DDIM perturbations than training.
    pub fn test_defaults() -> Self {
        SynthLevels {
            alpha: 0.25,
            gamma: 1.009,
            beta: 0.005,
            ..Self::train_defaults()
        }
    }

    /// Checks every level against the models it will be used with.
    pub fn validate(&self, m: &SynthModels) -> Result<()> {
        let grid = m.vq.config().grid_size();
        if self.rect_h > grid || self.rect_w > grid {
            return Err(Error::invalid(format!(
                "{}x{} rectangle does not fit the {grid}x{grid} token grid",
                self.rect_h, self.rect_w
            )));
        }
        let p = SamplingParams {
            temperature: self.temperature,
            top_k: self.top_k,
        };
        p.validate(m.vq.config().codebook_size)?;
        if !(0.0..=1.0).contains(&self.keep_fraction) {
            return Err(Error::invalid(format!(
                "keep fraction must be in [0,1], got {}",
                self.keep_fraction
            )));
        }
        check_token_model(m.vq, m.token)?;
        check_uncond(m.vq, m.uncond)?;
        let t_count = m.uncond.schedule().t_count();
        if self.t0 < 1 || self.t0 > t_count {
            return Err(Error::invalid(format!(
                "t0={} outside the schedule range 1..={t_count}",
                self.t0
            )));
        }
        if self.n_steps < 1 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid(format!(
                "noise level alpha must be finite and nonnegative, got {}",
                self.alpha
            )));
        }
        if !self.gamma.is_finite() || self.gamma == 0.0 {
            return Err(Error::invalid(format!(
                "scale gamma must be finite and nonzero, got {}",
                self.gamma
            )));
        }
        if !self.beta.is_finite() {
            return Err(Error::invalid(format!(
                "shift beta must be finite, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Synthesizes one artifact of the given class.
pub fn synthesize(
    class: ArtifactClass,
    x: &ArrayD<f64>,
    m: &SynthModels,
    lv: &SynthLevels,
    seed: u64,
) -> Result<SynthOutput> {
    match class {
        ArtifactClass::ReplaceToken => synth_replace_token(x, m.vq, lv.rect_h, lv.rect_w, seed),
        ArtifactClass::GptSampling => {
            let p = SamplingParams {
                temperature: lv.temperature,
                top_k: lv.top_k,
            };
            synth_gpt_sampling(x, m.vq, m.token, &p, lv.keep_fraction, seed)
        }
        ArtifactClass::DdimGaussian => {
            synth_ddim_gaussian(x, m.vq, m.uncond, lv.t0, lv.n_steps, lv.alpha, seed)
        }
        ArtifactClass::DdimScale => {
            synth_ddim_scale(x, m.vq, m.uncond, lv.t0, lv.n_steps, lv.gamma, lv.beta)
        }
        ArtifactClass::Mask => Err(Error::invalid(
            "MASK is a conditioning label; no synthesizer produces it",
        )),
    }
}

/// How `build_dataset` assigns a class to each image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassAssignment {
    Fixed(ArtifactClass),
    Uniform,
}

pub(crate) fn assign_classes(
    n: usize,
    assignment: ClassAssignment,
    rng: &mut impl Rng,
) -> Result<Vec<ArtifactClass>> {
    match assignment {
        ClassAssignment::Fixed(c) if c.is_mask() => {
            Err(Error::invalid("cannot build a dataset of MASK artifacts"))
        }
        ClassAssignment::Fixed(c) => Ok(vec![c; n]),
        ClassAssignment::Uniform => Ok((0..n)
            .map(|_| ArtifactClass::SYNTHESIZED[rng.gen_range(0..ArtifactClass::SYNTHESIZED.len())])
            .collect()),
    }
}

/// Manifest schema version written on line 1.
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// First line of every manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub kind: String,
    pub count: usize,
    pub master_seed: u64,
}

/// One clean/artifact pair; paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub clean: String,
    pub artifact: String,
    pub label: ArtifactClass,
    pub params: BTreeMap<String, serde_json::Value>,
    pub seed: u64,
}

/// Synthesizes one artifact per clean image and writes the dataset:
/// `clean/NNNNN.png`, `artifact/NNNNN.png`, and `manifest.jsonl` under
/// `out_dir`. The build is transactional: output lands in a staging
/// directory that replaces `out_dir` only once complete, and any failure
/// cleans the staging directory up and reports a dataset-build error.
/// Returns the manifest path.
pub fn build_dataset(
    out_dir: &Path,
    clean_images: &[ArrayD<f64>],
    models: &SynthModels,
    levels: &SynthLevels,
    assignment: ClassAssignment,
    master_seed: u64,
) -> Result<PathBuf> {
    if clean_images.is_empty() {
        return Err(Error::invalid("no clean images to build a dataset from"));
    }
    levels.validate(models)?;
    let mut assign_rng = derive_rng(master_seed, "dataset/class", 0);
    let classes = assign_classes(clean_images.len(), assignment, &mut assign_rng)?;

    let staging = staging_dir(out_dir)?;
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    match write_dataset(&staging, clean_images, &classes, models, levels, master_seed) {
        Ok(()) => {}
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(Error::Dataset(e.to_string()));
        }
    }
    if out_dir.exists() {
        fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    fs::rename(&staging, out_dir).map_err(|e| Error::io(out_dir, e))?;
    Ok(out_dir.join("manifest.jsonl"))
}

fn staging_dir(out_dir: &Path) -> Result<PathBuf> {
    let name = out_dir
        .file_name()
        .ok_or_else(|| Error::invalid(format!("bad dataset directory {}", out_dir.display())))?;
    let mut staged = name.to_os_string();
    staged.push(".partial");
    Ok(out_dir.with_file_name(staged))
}

fn write_dataset(
    dir: &Path,
    clean_images: &[ArrayD<f64>],
    classes: &[ArtifactClass],
    models: &SynthModels,
    levels: &SynthLevels,
    master_seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir.join("clean")).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(dir.join("artifact")).map_err(|e| Error::io(dir, e))?;

    let mut records = Vec::with_capacity(clean_images.len());
    for (i, (x, &class)) in clean_images.iter().zip(classes).enumerate() {
        let seed = derive_rng(master_seed, "dataset/record-seed", i as u64).gen::<u64>();
        let out = synthesize(class, x, models, levels, seed)?;
        let clean_rel = format!("clean/{i:05}.png");
        let artifact_rel = format!("artifact/{i:05}.png");
        imageio::save_image_png(dir.join(&clean_rel), x)?;
        imageio::save_image_png(dir.join(&artifact_rel), &out.artifact)?;
        records.push(ArtifactRecord {
            clean: clean_rel,
            artifact: artifact_rel,
            label: out.label,
            params: out.params,
            seed,
        });
    }

    let header = ManifestHeader {
        schema_version: MANIFEST_SCHEMA_VERSION,
        kind: "artifact-dataset".into(),
        count: records.len(),
        master_seed,
    };
    let manifest = dir.join("manifest.jsonl");
    let mut lines = Vec::with_capacity(records.len() + 1);
    lines.push(serde_json::to_string(&header).expect("header serializes"));
    for r in &records {
        lines.push(serde_json::to_string(r).expect("record serializes"));
    }
    let mut file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for line in &lines {
        writeln!(file, "{line}").map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(())
}

/// Reads and validates a manifest: schema version, record count, labels,
/// and that every referenced image exists next to the manifest.
pub fn load_manifest(manifest: &Path) -> Result<(ManifestHeader, Vec<ArtifactRecord>)> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::corrupt(manifest, "empty manifest"))?;
    let header: ManifestHeader = serde_json::from_str(header_line)
        .map_err(|e| Error::corrupt(manifest, format!("bad header line: {e}")))?;
    if header.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::corrupt(
            manifest,
            format!(
                "schema version {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
                header.schema_version
            ),
        ));
    }
    let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ArtifactRecord = serde_json::from_str(line)
            .map_err(|e| Error::corrupt(manifest, format!("bad record on line {}: {e}", lineno + 2)))?;
        if record.label.is_mask() {
            return Err(Error::corrupt(
                manifest,
                format!("record on line {} is labeled MASK", lineno + 2),
            ));
        }
        for rel in [&record.clean, &record.artifact] {
            if !dir.join(rel).is_file() {
                return Err(Error::corrupt(
                    manifest,
                    format!("referenced image {rel} is missing"),
                ));
            }
        }
        records.push(record);
    }
    if records.len() != header.count {
        return Err(Error::corrupt(
            manifest,
            format!("header promises {} records, found {}", header.count, records.len()),
        ));
    }
    Ok((header, records))
}

/// Loads a record's (clean, artifact) image pair relative to the manifest.
pub fn load_record_images(
    manifest: &Path,
    record: &ArtifactRecord,
) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
    let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    let clean = imageio::load_image_png(dir.join(&record.clean))?;
    let artifact = imageio::load_image_png(dir.join(&record.artifact))?;
    Ok((clean, artifact))
}
