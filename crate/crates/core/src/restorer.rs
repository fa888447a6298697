//! Conditional noise-prediction network, its training loops, and the
//! restoration sampler.
//!
//! The same U-shaped network backs two models: the conditional restorer
//! (input = condition latent concatenated with the noisy target latent,
//! conditioned on timestep + artifact-class embeddings, with a MASK class
//! for classifier-free training) and the unconditional latent-diffusion
//! model used to synthesize inversion artifacts (input = noisy latent,
//! timestep embedding only).
//!
//! Diffusion runs over standardized encoder latents; the per-channel
//! mean/std travel inside the checkpoint as `latent.mean` / `latent.std`.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::ArtifactClass;
use crate::autograd::{Grads, ParamId, ParamStore, Tape, Var};
use crate::diffusion::{guided_epsilon, predict_x0, step_ladder, ConditionalEpsilon, Epsilon};
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, GroupNorm, Linear, ResBlock, SpatialAttention};
use crate::rng::{derive_rng, standard_normal};
use crate::schedule::NoiseSchedule;
use crate::vqae::Vqae;

/// Full-scale reference width of the timestep/class embedding.
pub const FULL_SCALE_EMBED_DIM: usize = 768;

/// Sinusoidal timestep embedding: `dim/2` sines then `dim/2` cosines over
/// geometrically spaced frequencies from 1 down to 1/10000.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!(
            "embedding dimension must be a positive even number, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = if half > 1 {
            (-(10000.0f64.ln()) * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    Ok(out)
}

/// Schedule hyperparameters, kept alongside the weights so a checkpoint is
/// self-describing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_count: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        crate::schedule::make_linear_schedule(self.t_count, self.beta_start, self.beta_end)
    }
}

/// Architecture of the noise-prediction network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetConfig {
    /// Channels of one latent (d).
    pub latent_dim: usize,
    /// Channel widths at the three resolutions (full, /2, /4).
    pub widths: [usize; 3],
    /// Timestep/class embedding width.
    pub emb_dim: usize,
    /// When true the input is the channel-concatenation [condition, noisy
    /// target] and a class-embedding table with one row per artifact class
    /// (including MASK) is added to the timestep embedding.
    pub conditional: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            latent_dim: 4,
            widths: [32, 48, 64],
            emb_dim: 64,
            conditional: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent dimension must be positive"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("network widths must be positive"));
        }
        if self.emb_dim == 0 || self.emb_dim % 2 != 0 {
            return Err(Error::invalid("embedding dimension must be positive and even"));
        }
        Ok(())
    }

    fn in_channels(&self) -> usize {
        self.latent_dim * if self.conditional { 2 } else { 1 }
    }
}

/// U-shaped epsilon network over latent grids: three resolutions,
/// self-attention at the coarsest, timestep/class conditioning injected
/// into every residual block, zero-initialized output projection.
struct EpsilonNet {
    conv_in: Conv2d,
    res0: ResBlock,
    down1: Conv2d,
    res1: ResBlock,
    down2: Conv2d,
    res2a: ResBlock,
    attn: SpatialAttention,
    res2b: ResBlock,
    up1: Conv2d,
    res_u1: ResBlock,
    up0: Conv2d,
    res_u0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    time_fc1: Linear,
    time_fc2: Linear,
    class_table: Option<ParamId>,
}

impl EpsilonNet {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &NetConfig) -> Self {
        let [w0, w1, w2] = cfg.widths;
        let e = cfg.emb_dim;
        let cin = cfg.in_channels();
        EpsilonNet {
            conv_in: Conv2d::new(store, rng, "net.conv_in", cin, w0, 3, 1, 1),
            res0: ResBlock::new(store, rng, "net.res0", w0, w0, Some(e), true),
            down1: Conv2d::new(store, rng, "net.down1", w0, w1, 3, 2, 1),
            res1: ResBlock::new(store, rng, "net.res1", w1, w1, Some(e), true),
            down2: Conv2d::new(store, rng, "net.down2", w1, w2, 3, 2, 1),
            res2a: ResBlock::new(store, rng, "net.res2a", w2, w2, Some(e), true),
            attn: SpatialAttention::new(store, rng, "net.attn", w2),
            res2b: ResBlock::new(store, rng, "net.res2b", w2, w2, Some(e), true),
            up1: Conv2d::new(store, rng, "net.up1", w2, w1, 3, 1, 1),
            res_u1: ResBlock::new(store, rng, "net.res_u1", 2 * w1, w1, Some(e), true),
            up0: Conv2d::new(store, rng, "net.up0", w1, w0, 3, 1, 1),
            res_u0: ResBlock::new(store, rng, "net.res_u0", 2 * w0, w0, Some(e), true),
            norm_out: GroupNorm::new(store, "net.norm_out", w0),
            conv_out: Conv2d::new_zero(store, "net.conv_out", w0, cfg.latent_dim, 3, 1, 1),
            time_fc1: Linear::new(store, rng, "net.time_fc1", e, e),
            time_fc2: Linear::new(store, rng, "net.time_fc2", e, e),
            class_table: cfg.conditional.then(|| {
                store.add(
                    "net.class_table",
                    crate::nn::normal_init(rng, &[ArtifactClass::ALL.len(), e], 0.1),
                )
            }),
        }
    }

    /// `input` is `[B, C_in, g, g]` with g divisible by 4; `ts` one timestep
    /// per sample; `classes` one class index per sample iff conditional.
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Var,
        ts: &[usize],
        classes: Option<&[usize]>,
        emb_dim: usize,
    ) -> Var {
        let shape = tape.value(input).shape().to_vec();
        assert_eq!(shape.len(), 4, "epsilon net expects [B,C,H,W]");
        let b = shape[0];
        assert_eq!(ts.len(), b, "one timestep per sample");
        assert!(
            shape[2] % 4 == 0 && shape[3] % 4 == 0,
            "latent grid must be divisible by 4"
        );
        assert_eq!(
            classes.is_some(),
            self.class_table.is_some(),
            "class labels must be passed iff the network is conditional"
        );

        let mut emb = ndarray::Array2::<f64>::zeros((b, emb_dim));
        for (row, &t) in ts.iter().enumerate() {
            let v = timestep_embedding(t, emb_dim).expect("validated embedding dim");
            for (col, &x) in v.iter().enumerate() {
                emb[[row, col]] = x;
            }
        }
        let te = tape.input(emb.into_dyn());
        let h = self.time_fc1.forward(tape, store, te);
        let h = tape.swish(h);
        let mut cond = self.time_fc2.forward(tape, store, h);
        if let (Some(table), Some(cls)) = (self.class_table, classes) {
            assert_eq!(cls.len(), b, "one class per sample");
            let table = tape.param(store, table);
            let ce = tape.embed(table, cls);
            cond = tape.add(cond, ce);
        }

        let h0 = self.conv_in.forward(tape, store, input);
        let h0 = self.res0.forward(tape, store, h0, Some(cond));
        let h1 = self.down1.forward(tape, store, h0);
        let h1 = self.res1.forward(tape, store, h1, Some(cond));
        let h2 = self.down2.forward(tape, store, h1);
        let h2 = self.res2a.forward(tape, store, h2, Some(cond));
        let h2 = self.attn.forward(tape, store, h2);
        let h2 = self.res2b.forward(tape, store, h2, Some(cond));

        let u1 = tape.upsample2(h2);
        let u1 = self.up1.forward(tape, store, u1);
        let u1 = tape.concat_channels(u1, h1);
        let u1 = self.res_u1.forward(tape, store, u1, Some(cond));
        let u0 = tape.upsample2(u1);
        let u0 = self.up0.forward(tape, store, u0);
        let u0 = tape.concat_channels(u0, h0);
        let u0 = self.res_u0.forward(tape, store, u0, Some(cond));

        let out = self.norm_out.forward(tape, store, u0);
        let out = tape.swish(out);
        let out = self.conv_out.forward(tape, store, out);

        // The prediction is the noisy latent plus a learned correction:
        // eps approaches y_t itself as alpha_bar -> 0, so with the
        // zero-initialized output projection the fresh network already
        // matches the high-noise optimum instead of predicting 0.
        let d = tape.value(out).shape()[1];
        let y_part = tape.slice_channels(input, shape[1] - d, d);
        tape.add(out, y_part)
    }
}

/// Per-channel standardization of latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn identity(dim: usize) -> Self {
        LatentStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }
}

/// Per-channel mean/std over a set of `[d,h,w]` latents, std floored at
/// 1e-6.
pub fn latent_stats(latents: &[ArrayD<f64>]) -> Result<LatentStats> {
    if latents.is_empty() {
        return Err(Error::invalid("no latents to standardize"));
    }
    let d = latents[0].shape()[0];
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut count = vec![0usize; d];
    for z in latents {
        for c in 0..d {
            for v in z.index_axis(Axis(0), c).iter() {
                sum[c] += v;
                sum_sq[c] += v * v;
                count[c] += 1;
            }
        }
    }
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for c in 0..d {
        mean[c] = sum[c] / count[c] as f64;
        let var = (sum_sq[c] / count[c] as f64 - mean[c] * mean[c]).max(0.0);
        std[c] = var.sqrt().max(1e-6);
    }
    Ok(LatentStats { mean, std })
}

/// (z - mean) / std per channel.
pub fn standardize(z: &ArrayD<f64>, stats: &LatentStats) -> ArrayD<f64> {
    let mut out = z.clone();
    for (c, mut lane) in out.axis_iter_mut(Axis(0)).enumerate() {
        lane.mapv_inplace(|v| (v - stats.mean[c]) / stats.std[c]);
    }
    out
}

/// z * std + mean per channel.
pub fn destandardize(z: &ArrayD<f64>, stats: &LatentStats) -> ArrayD<f64> {
    let mut out = z.clone();
    for (c, mut lane) in out.axis_iter_mut(Axis(0)).enumerate() {
        lane.mapv_inplace(|v| v * stats.std[c] + stats.mean[c]);
    }
    out
}

/// A diffusion model over latents: network weights, schedule, and the
/// latent standardization it was trained with.
pub struct DiffusionModel {
    net_cfg: NetConfig,
    schedule_cfg: ScheduleConfig,
    schedule: NoiseSchedule,
    store: ParamStore,
    net: EpsilonNet,
    stats_mean: ParamId,
    stats_std: ParamId,
}

impl DiffusionModel {
    pub fn new(net_cfg: &NetConfig, schedule_cfg: &ScheduleConfig, seed: u64) -> Result<Self> {
        net_cfg.validate()?;
        let schedule = schedule_cfg.build()?;
        let mut store = ParamStore::new();
        let mut rng = derive_rng(seed, "diffusion/init", 0);
        let net = EpsilonNet::new(&mut store, &mut rng, net_cfg);
        let stats_mean = store.add("latent.mean", ArrayD::zeros(IxDyn(&[net_cfg.latent_dim])));
        let stats_std = store.add(
            "latent.std",
            ArrayD::from_elem(IxDyn(&[net_cfg.latent_dim]), 1.0),
        );
        Ok(DiffusionModel {
            net_cfg: net_cfg.clone(),
            schedule_cfg: schedule_cfg.clone(),
            schedule,
            store,
            net,
            stats_mean,
            stats_std,
        })
    }

    pub fn net_config(&self) -> &NetConfig {
        &self.net_cfg
    }

    pub fn schedule_config(&self) -> &ScheduleConfig {
        &self.schedule_cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn latent_stats(&self) -> LatentStats {
        LatentStats {
            mean: self.store.get(self.stats_mean).iter().copied().collect(),
            std: self.store.get(self.stats_std).iter().copied().collect(),
        }
    }

    pub fn set_latent_stats(&mut self, stats: &LatentStats) {
        assert_eq!(stats.mean.len(), self.net_cfg.latent_dim);
        assert_eq!(stats.std.len(), self.net_cfg.latent_dim);
        *self.store.get_mut(self.stats_mean) =
            ArrayD::from_shape_vec(IxDyn(&[stats.mean.len()]), stats.mean.clone()).unwrap();
        *self.store.get_mut(self.stats_std) =
            ArrayD::from_shape_vec(IxDyn(&[stats.std.len()]), stats.std.clone()).unwrap();
    }

    /// No-grad forward pass over a `[B, C_in, g, g]` batch.
    pub fn epsilon_batch(
        &self,
        input: &ArrayD<f64>,
        ts: &[usize],
        classes: Option<&[usize]>,
    ) -> ArrayD<f64> {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let out = self
            .net
            .forward(&mut tape, &self.store, x, ts, classes, self.net_cfg.emb_dim);
        tape.value(out).clone()
    }

    /// Runs one forward pass and returns the mse loss against `target`
    /// together with its analytic parameter gradients. This is exactly
    /// the quantity a training step differentiates; it exists so the
    /// gradients can be checked against finite differences.
    pub fn loss_gradients(
        &self,
        input: &ArrayD<f64>,
        ts: &[usize],
        classes: Option<&[usize]>,
        target: &ArrayD<f64>,
    ) -> (f64, Grads) {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let pred = self
            .net
            .forward(&mut tape, &self.store, x, ts, classes, self.net_cfg.emb_dim);
        let tgt = tape.input(target.clone());
        let loss = tape.mse_loss(pred, tgt);
        (tape.scalar(loss), tape.backward(loss, &self.store))
    }
}

impl Epsilon for DiffusionModel {
    fn epsilon(&self, y_t: &ArrayD<f64>, t: usize) -> ArrayD<f64> {
        assert!(
            !self.net_cfg.conditional,
            "conditional model used as an unconditional predictor"
        );
        let input = y_t.clone().insert_axis(Axis(0));
        let out = self.epsilon_batch(&input, &[t], None);
        out.index_axis(Axis(0), 0).to_owned()
    }
}

impl ConditionalEpsilon for DiffusionModel {
    fn epsilon(
        &self,
        x: &ArrayD<f64>,
        y_t: &ArrayD<f64>,
        t: usize,
        cls: ArtifactClass,
    ) -> ArrayD<f64> {
        assert!(
            self.net_cfg.conditional,
            "unconditional model used as a conditional predictor"
        );
        assert_eq!(x.shape(), y_t.shape(), "condition/target latent shape mismatch");
        let d = x.shape()[0];
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let mut input = ArrayD::zeros(IxDyn(&[1, 2 * d, h, w]));
        for c in 0..d {
            input
                .index_axis_mut(Axis(0), 0)
                .index_axis_mut(Axis(0), c)
                .assign(&x.index_axis(Axis(0), c));
            input
                .index_axis_mut(Axis(0), 0)
                .index_axis_mut(Axis(0), d + c)
                .assign(&y_t.index_axis(Axis(0), c));
        }
        let out = self.epsilon_batch(&input, &[t], Some(&[cls.index()]));
        out.index_axis(Axis(0), 0).to_owned()
    }
}

/// Shared training hyperparameters for both diffusion trainers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing a sample's class with MASK (conditional
    /// trainer only).
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for DiffTrainConfig {
    fn default() -> Self {
        DiffTrainConfig {
            steps: 6000,
            batch_size: 8,
            learning_rate: 1e-4,
            mask_prob: 0.5,
            seed: 0,
        }
    }
}

impl DiffTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps and batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::invalid(format!(
                "mask probability must be in [0,1], got {}",
                self.mask_prob
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Replaces each class with MASK independently with probability
/// `mask_prob`; returns how many were masked. Training calls this once
/// per batch to drop the class label for classifier-free guidance.
pub fn apply_class_mask(
    classes: &mut [usize],
    mask_prob: f64,
    rng: &mut impl Rng,
) -> usize {
    let mut masked = 0;
    for c in classes.iter_mut() {
        if rng.gen::<f64>() < mask_prob {
            *c = ArtifactClass::Mask.index();
            masked += 1;
        }
    }
    masked
}

fn check_latents(latents: &[ArrayD<f64>], dim: usize, what: &str) -> Result<(usize, usize)> {
    if latents.is_empty() {
        return Err(Error::Training(format!("{what} corpus is empty")));
    }
    let shape = latents[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != dim {
        return Err(Error::Training(format!(
            "{what} latents must be [{dim},h,w], got {shape:?}"
        )));
    }
    if shape[1] % 4 != 0 || shape[2] % 4 != 0 {
        return Err(Error::Training(format!(
            "{what} latent grid {}x{} must be divisible by 4",
            shape[1], shape[2]
        )));
    }
    for (ix, z) in latents.iter().enumerate() {
        if z.shape() != shape.as_slice() {
            return Err(Error::Training(format!(
                "{what} latent {ix} has shape {:?}, expected {shape:?}",
                z.shape()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!("{what} latent {ix} is non-finite")));
        }
    }
    Ok((shape[1], shape[2]))
}

pub struct UncondTraining {
    pub model: DiffusionModel,
    /// (step, loss) per optimization step.
    pub curve: Vec<(usize, f64)>,
}

/// Trains the unconditional latent-diffusion model on clean-image latents.
pub fn train_uncond(
    latents: &[ArrayD<f64>],
    net_cfg: &NetConfig,
    schedule_cfg: &ScheduleConfig,
    tcfg: &DiffTrainConfig,
) -> Result<UncondTraining> {
    if net_cfg.conditional {
        return Err(Error::invalid(
            "unconditional trainer given a conditional network config",
        ));
    }
    tcfg.validate()?;
    let (h, w) = check_latents(latents, net_cfg.latent_dim, "diffusion")?;
    let mut model = DiffusionModel::new(net_cfg, schedule_cfg, tcfg.seed)?;
    let stats = latent_stats(latents)?;
    model.set_latent_stats(&stats);
    let std_latents: Vec<ArrayD<f64>> =
        latents.iter().map(|z| standardize(z, &stats)).collect();

    let t_count = model.schedule.t_count();
    let d = net_cfg.latent_dim;
    let mut opt = Adam::new(&model.store, tcfg.learning_rate);
    let mut rng = derive_rng(tcfg.seed, "uncond/train", 0);
    let mut curve = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let b = tcfg.batch_size;
        let mut input = ArrayD::zeros(IxDyn(&[b, d, h, w]));
        let mut target = ArrayD::zeros(IxDyn(&[b, d, h, w]));
        let mut ts = Vec::with_capacity(b);
        for bi in 0..b {
            let y0 = &std_latents[rng.gen_range(0..std_latents.len())];
            let t = rng.gen_range(1..=t_count);
            let eps = standard_normal(&mut rng, &[d, h, w]);
            let y_t = model.schedule.forward_marginal(y0, t, &eps)?;
            input.index_axis_mut(Axis(0), bi).assign(&y_t);
            target.index_axis_mut(Axis(0), bi).assign(&eps);
            ts.push(t);
        }

        let mut tape = Tape::new();
        let x = tape.input(input);
        let pred = model
            .net
            .forward(&mut tape, &model.store, x, &ts, None, net_cfg.emb_dim);
        let tgt = tape.input(target);
        let loss = tape.mse_loss(pred, tgt);
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {step}")));
        }
        curve.push((step, loss_val));
        let grads = tape.backward(loss, &model.store);
        opt.step(&mut model.store, &grads);
    }

    Ok(UncondTraining { model, curve })
}

/// One training example for the restorer: latents of the artifact image
/// (condition) and the clean target, plus the artifact class.
pub struct RestoreExample {
    pub artifact: ArrayD<f64>,
    pub clean: ArrayD<f64>,
    pub class: ArtifactClass,
}

pub struct RestorerTraining {
    pub model: DiffusionModel,
    /// (step, loss, fraction of the batch whose class was masked).
    pub curve: Vec<(usize, f64, f64)>,
}

/// Trains the conditional restorer with classifier-free class masking.
pub fn train_restorer(
    examples: &[RestoreExample],
    net_cfg: &NetConfig,
    schedule_cfg: &ScheduleConfig,
    tcfg: &DiffTrainConfig,
) -> Result<RestorerTraining> {
    if !net_cfg.conditional {
        return Err(Error::invalid(
            "restorer trainer needs a conditional network config",
        ));
    }
    tcfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Training("restorer corpus is empty".into()));
    }
    if let Some(ix) = examples.iter().position(|e| e.class.is_mask()) {
        return Err(Error::Training(format!(
            "example {ix} is labeled MASK; MASK is a conditioning token, not a dataset label"
        )));
    }
    let cleans: Vec<ArrayD<f64>> = examples.iter().map(|e| e.clean.clone()).collect();
    let arts: Vec<ArrayD<f64>> = examples.iter().map(|e| e.artifact.clone()).collect();
    let (h, w) = check_latents(&cleans, net_cfg.latent_dim, "restorer target")?;
    check_latents(&arts, net_cfg.latent_dim, "restorer condition")?;

    let mut model = DiffusionModel::new(net_cfg, schedule_cfg, tcfg.seed)?;
    let stats = latent_stats(&cleans)?;
    model.set_latent_stats(&stats);
    let std_clean: Vec<ArrayD<f64>> = cleans.iter().map(|z| standardize(z, &stats)).collect();
    let std_art: Vec<ArrayD<f64>> = arts.iter().map(|z| standardize(z, &stats)).collect();

    let t_count = model.schedule.t_count();
    let d = net_cfg.latent_dim;
    let mut opt = Adam::new(&model.store, tcfg.learning_rate);
    let mut rng = derive_rng(tcfg.seed, "restorer/train", 0);
    let mut curve = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let b = tcfg.batch_size;
        let mut input = ArrayD::zeros(IxDyn(&[b, 2 * d, h, w]));
        let mut target = ArrayD::zeros(IxDyn(&[b, d, h, w]));
        let mut ts = Vec::with_capacity(b);
        let mut classes = Vec::with_capacity(b);
        for bi in 0..b {
            let ix = rng.gen_range(0..examples.len());
            let t = rng.gen_range(1..=t_count);
            let eps = standard_normal(&mut rng, &[d, h, w]);
            let y_t = model.schedule.forward_marginal(&std_clean[ix], t, &eps)?;
            for c in 0..d {
                input
                    .index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), c)
                    .assign(&std_art[ix].index_axis(Axis(0), c));
                input
                    .index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), d + c)
                    .assign(&y_t.index_axis(Axis(0), c));
            }
            target.index_axis_mut(Axis(0), bi).assign(&eps);
            ts.push(t);
            classes.push(examples[ix].class.index());
        }
        let masked = apply_class_mask(&mut classes, tcfg.mask_prob, &mut rng);
        let mask_rate = masked as f64 / b as f64;

        let mut tape = Tape::new();
        let x = tape.input(input);
        let pred = model.net.forward(
            &mut tape,
            &model.store,
            x,
            &ts,
            Some(&classes),
            net_cfg.emb_dim,
        );
        let tgt = tape.input(target);
        let loss = tape.mse_loss(pred, tgt);
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {step}")));
        }
        curve.push((step, loss_val, mask_rate));
        let grads = tape.backward(loss, &model.store);
        opt.step(&mut model.store, &grads);
    }

    Ok(RestorerTraining { model, curve })
}

/// How the restoration sampler evaluates the noise predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RestoreMode {
    /// Condition on MASK only (artifact class unknown).
    Blind,
    /// Condition on a known artifact class.
    NonBlind(ArtifactClass),
    /// Classifier-free guidance with the given scale.
    Guided { class: ArtifactClass, scale: f64 },
}

impl RestoreMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            RestoreMode::Blind => Ok(()),
            RestoreMode::NonBlind(cls) | RestoreMode::Guided { class: cls, .. } => {
                if cls.is_mask() {
                    return Err(Error::invalid(
                        "MASK is not a restorable artifact class; use blind mode",
                    ));
                }
                if let RestoreMode::Guided { scale, .. } = self {
                    if !(scale.is_finite() && *scale >= 0.0) {
                        return Err(Error::invalid(format!(
                            "guidance scale must be finite and nonnegative, got {scale}"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RestoreMode::Blind => "blind",
            RestoreMode::NonBlind(_) => "nonblind",
            RestoreMode::Guided { .. } => "guided",
        }
    }

    /// Model evaluations per sampler step.
    pub fn evals_per_step(&self) -> usize {
        match self {
            RestoreMode::Guided { .. } => 2,
            _ => 1,
        }
    }
}

/// Element bound applied to the predicted clean latent between sampler
/// rungs. Standardized latents are zero-mean unit-variance per channel, so
/// ±3 covers the data range; without the bound the 1/√ᾱ_t amplification at
/// t near T turns small epsilon errors into divergent trajectories.
pub const X0_CLAMP: f64 = 3.0;

/// Runs the restoration sampler in standardized latent space: start from
/// pure noise at t = T and walk the shared step ladder down to 0. Each rung
/// predicts the clean latent, bounds it to the standardized data range,
/// and re-noises it to the next rung with the same epsilon estimate.
/// Returns the final latent and the number of model evaluations made.
pub fn restore_core(
    model: &dyn ConditionalEpsilon,
    schedule: &NoiseSchedule,
    z_x: &ArrayD<f64>,
    mode: &RestoreMode,
    n_steps: usize,
    rng: &mut impl Rng,
) -> Result<(ArrayD<f64>, usize)> {
    mode.validate()?;
    let t_count = schedule.t_count();
    if n_steps < 1 || n_steps > t_count {
        return Err(Error::invalid(format!(
            "n_steps={n_steps} outside 1..={t_count}"
        )));
    }
    let ladder = step_ladder(t_count, n_steps);
    let mut y = standard_normal(rng, z_x.shape());
    let mut evals = 0usize;
    for i in (1..ladder.len()).rev() {
        let t = ladder[i];
        let t_prev = ladder[i - 1];
        let eps = match mode {
            RestoreMode::Blind => {
                evals += 1;
                model.epsilon(z_x, &y, t, ArtifactClass::Mask)
            }
            RestoreMode::NonBlind(cls) => {
                evals += 1;
                model.epsilon(z_x, &y, t, *cls)
            }
            RestoreMode::Guided { class, scale } => {
                evals += 2;
                guided_epsilon(model, z_x, &y, t, *class, *scale)?
            }
        };
        let mut x0 = predict_x0(schedule, &y, &eps, t)?;
        x0.mapv_inplace(|v| v.clamp(-X0_CLAMP, X0_CLAMP));
        let ab = schedule.alpha_bar(t_prev);
        x0.mapv_inplace(|v| v * ab.sqrt());
        x0.zip_mut_with(&eps, |o, &e| *o += (1.0 - ab).sqrt() * e);
        y = x0;
    }
    Ok((y, evals))
}

/// Restores one artifact image: encode, standardize, sample, decode.
/// Deterministic given (checkpoint, request, noise_seed).
pub fn restore(
    model: &DiffusionModel,
    vq: &Vqae,
    artifact_image: &ArrayD<f64>,
    mode: &RestoreMode,
    n_steps: usize,
    noise_seed: u64,
) -> Result<ArrayD<f64>> {
    if !model.net_cfg.conditional {
        return Err(Error::invalid("restoration needs the conditional model"));
    }
    if vq.config().latent_dim != model.net_cfg.latent_dim {
        return Err(Error::invalid(format!(
            "autoencoder latent dimension {} does not match restorer dimension {}",
            vq.config().latent_dim,
            model.net_cfg.latent_dim
        )));
    }
    let stats = model.latent_stats();
    let z_x = standardize(&vq.encode(artifact_image)?, &stats);
    let mut rng = derive_rng(noise_seed, "restore/noise", 0);
    let (y0, _) = restore_core(model, &model.schedule, &z_x, mode, n_steps, &mut rng)?;
    vq.decode(&destandardize(&y0, &stats))
}

/// One evaluation pair: clean target and artifact input, as images.
pub struct EvalExample {
    pub clean: ArrayD<f64>,
    pub artifact: ArrayD<f64>,
    pub class: ArtifactClass,
}

/// How the evaluator conditions the sampler. Unlike [`RestoreMode`], the
/// class is not fixed up front: non-blind and guided evaluation condition
/// each example on its own recorded class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    Blind,
    NonBlind,
    Guided(f64),
}

impl EvalMode {
    pub fn validate(&self) -> Result<()> {
        if let EvalMode::Guided(scale) = self {
            if !(scale.is_finite() && *scale >= 0.0) {
                return Err(Error::invalid(format!(
                    "guidance scale must be finite and nonnegative, got {scale}"
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Blind => "blind",
            EvalMode::NonBlind => "nonblind",
            EvalMode::Guided(_) => "guided",
        }
    }

    fn restore_mode(&self, class: ArtifactClass) -> RestoreMode {
        match self {
            EvalMode::Blind => RestoreMode::Blind,
            EvalMode::NonBlind => RestoreMode::NonBlind(class),
            EvalMode::Guided(scale) => RestoreMode::Guided {
                class,
                scale: *scale,
            },
        }
    }
}

/// One row of the evaluation report; `class = None` is the overall row.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub mode: String,
    pub class: Option<ArtifactClass>,
    pub count: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Restores every example under every mode (conditioning non-blind and
/// guided runs on each example's own class) and aggregates MSE/PSNR/SSIM
/// per class plus an overall row per mode (|classes| + 1 rows per mode).
/// Metrics of empty classes are NaN.
pub fn evaluate(
    model: &DiffusionModel,
    vq: &Vqae,
    examples: &[EvalExample],
    modes: &[EvalMode],
    n_steps: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    if modes.is_empty() {
        return Err(Error::invalid("no modes to evaluate"));
    }
    let mut rows = Vec::new();
    for mode in modes {
        mode.validate()?;
        let mut per_class: Vec<Vec<crate::metrics::PairMetrics>> =
            vec![Vec::new(); ArtifactClass::SYNTHESIZED.len()];
        for (ix, ex) in examples.iter().enumerate() {
            if ex.class.is_mask() {
                return Err(Error::invalid(format!(
                    "example {ix} is labeled MASK; evaluation classes must be real artifacts"
                )));
            }
            let noise_seed = derive_rng(seed, "eval/noise-seed", ix as u64).gen::<u64>();
            let restored = restore(
                model,
                vq,
                &ex.artifact,
                &mode.restore_mode(ex.class),
                n_steps,
                noise_seed,
            )?;
            let m = crate::metrics::compare(
                &crate::metrics::to_unit_range(&ex.clean),
                &crate::metrics::to_unit_range(&restored),
            )?;
            per_class[ex.class.index()].push(m);
        }
        let mut all = Vec::new();
        for (ci, cls) in ArtifactClass::SYNTHESIZED.iter().enumerate() {
            let ms = &per_class[ci];
            all.extend(ms.iter().cloned());
            let row = if ms.is_empty() {
                EvalRow {
                    mode: mode.name().to_string(),
                    class: Some(*cls),
                    count: 0,
                    mse: f64::NAN,
                    psnr: f64::NAN,
                    ssim: f64::NAN,
                }
            } else {
                let agg = crate::metrics::aggregate(ms);
                EvalRow {
                    mode: mode.name().to_string(),
                    class: Some(*cls),
                    count: ms.len(),
                    mse: agg.mse,
                    psnr: agg.psnr,
                    ssim: agg.ssim,
                }
            };
            rows.push(row);
        }
        let agg = crate::metrics::aggregate(&all);
        rows.push(EvalRow {
            mode: mode.name().to_string(),
            class: None,
            count: all.len(),
            mse: agg.mse,
            psnr: agg.psnr,
            ssim: agg.ssim,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vqae::VqConfig;
    use std::cell::Cell;

    #[test]
    fn timestep_embedding_zero_and_odd_dim() {
        let e = timestep_embedding(0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert!(timestep_embedding(5, 7).is_err());
        assert!(timestep_embedding(5, 0).is_err());
    }

    #[test]
    fn timestep_embeddings_are_pairwise_distinct() {
        let dim = 64;
        let embs: Vec<Vec<f64>> = (0..=1000)
            .map(|t| timestep_embedding(t, dim).unwrap())
            .collect();
        let mut min_dist = f64::INFINITY;
        for a in 0..embs.len() {
            for b in (a + 1)..embs.len() {
                let d: f64 = embs[a]
                    .iter()
                    .zip(&embs[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                min_dist = min_dist.min(d);
            }
        }
        assert!(min_dist > 0.0, "two timesteps share an embedding");
    }

    fn tiny_net_cfg(conditional: bool) -> NetConfig {
        NetConfig {
            latent_dim: 2,
            widths: [8, 12, 16],
            emb_dim: 8,
            conditional,
        }
    }

    fn tiny_schedule_cfg() -> ScheduleConfig {
        ScheduleConfig {
            t_count: 50,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }

    #[test]
    fn class_table_has_one_row_per_class() {
        let model = DiffusionModel::new(&tiny_net_cfg(true), &tiny_schedule_cfg(), 1).unwrap();
        let id = model.store().find("net.class_table").unwrap();
        assert_eq!(model.store().get(id).shape(), &[5, 8]);

        let uncond = DiffusionModel::new(&tiny_net_cfg(false), &tiny_schedule_cfg(), 1).unwrap();
        assert!(uncond.store().find("net.class_table").is_none());
    }

    #[test]
    fn fresh_net_predicts_the_noisy_input() {
        let model = DiffusionModel::new(&tiny_net_cfg(true), &tiny_schedule_cfg(), 2).unwrap();
        let mut rng = derive_rng(2, "test/fresh-net", 0);
        let x = standard_normal(&mut rng, &[2, 4, 4]);
        let y_t = standard_normal(&mut rng, &[2, 4, 4]);
        let out = ConditionalEpsilon::epsilon(&model, &x, &y_t, 10, ArtifactClass::Mask);
        assert_eq!(out.shape(), y_t.shape());
        // Zero output projection leaves exactly the input shortcut.
        assert_eq!(out, y_t);
    }

    fn random_latents(n: usize, shape: &[usize], seed: u64) -> Vec<ArrayD<f64>> {
        let mut rng = derive_rng(seed, "test/latents", 0);
        (0..n)
            .map(|_| {
                let mut z = standard_normal(&mut rng, shape);
                z.mapv_inplace(|v| 0.5 * v + 0.3);
                z
            })
            .collect()
    }

    #[test]
    fn initial_uncond_loss_matches_zero_predictor_baseline() {
        let latents = random_latents(8, &[2, 4, 4], 3);
        let tcfg = DiffTrainConfig {
            steps: 5,
            batch_size: 8,
            learning_rate: 1e-4,
            mask_prob: 0.0,
            seed: 4,
        };
        let out = train_uncond(&latents, &tiny_net_cfg(false), &tiny_schedule_cfg(), &tcfg)
            .unwrap();
        // With zero-initialized output weights the fresh net predicts y_t,
        // whose per-element error (1-sqrt(1-ab))^2 + ab stays within a
        // factor of 2 of 1 across this schedule (ab in [0.6, 1]).
        let first = out.curve[0].1;
        assert!(
            (0.5..2.0).contains(&first),
            "initial loss {first} not within a factor of 2 of 1.0"
        );
    }

    #[test]
    fn uncond_training_is_deterministic_and_standardizes() {
        let latents = random_latents(6, &[2, 4, 4], 5);
        let tcfg = DiffTrainConfig {
            steps: 12,
            batch_size: 4,
            learning_rate: 1e-4,
            mask_prob: 0.0,
            seed: 6,
        };
        let a = train_uncond(&latents, &tiny_net_cfg(false), &tiny_schedule_cfg(), &tcfg)
            .unwrap();
        let b = train_uncond(&latents, &tiny_net_cfg(false), &tiny_schedule_cfg(), &tcfg)
            .unwrap();
        assert_eq!(a.curve, b.curve);

        let stats = a.model.latent_stats();
        assert!(stats.mean.iter().all(|v| v.is_finite()));
        assert!(stats.std.iter().all(|&v| v > 0.0));
        // Standardize/destandardize round trip.
        let z = &latents[0];
        let back = destandardize(&standardize(z, &stats), &stats);
        let max_err = (&back - z).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(max_err < 1e-12);
    }

    #[test]
    fn mask_boundary_behavior() {
        let mut rng = derive_rng(7, "test/mask-bounds", 0);
        let mut classes = vec![0usize; 100];
        assert_eq!(apply_class_mask(&mut classes, 0.0, &mut rng), 0);
        assert!(classes.iter().all(|&c| c == 0));
        assert_eq!(apply_class_mask(&mut classes, 1.0, &mut rng), 100);
        assert!(classes.iter().all(|&c| c == ArtifactClass::Mask.index()));
    }

    #[test]
    fn masking_rate_concentrates_at_mask_prob() {
        let mut rng = derive_rng(8, "test/mask-rate", 0);
        let n = 10_000;
        let mut classes = vec![0usize; n];
        let masked = apply_class_mask(&mut classes, 0.5, &mut rng);
        let rate = masked as f64 / n as f64;
        assert!(
            (rate - 0.5).abs() < 0.02,
            "masking rate {rate} strays from 0.5"
        );
    }

    fn tiny_examples(n: usize, seed: u64) -> Vec<RestoreExample> {
        let mut rng = derive_rng(seed, "test/examples", 0);
        (0..n)
            .map(|i| {
                let clean = standard_normal(&mut rng, &[2, 4, 4]);
                let mut artifact = clean.clone();
                artifact.mapv_inplace(|v| v + 0.1);
                RestoreExample {
                    artifact,
                    clean,
                    class: ArtifactClass::SYNTHESIZED[i % 4],
                }
            })
            .collect()
    }

    #[test]
    fn restorer_training_runs_and_learns() {
        let examples = tiny_examples(6, 9);
        let tcfg = DiffTrainConfig {
            steps: 400,
            batch_size: 4,
            learning_rate: 2e-3,
            mask_prob: 0.5,
            seed: 10,
        };
        let out =
            train_restorer(&examples, &tiny_net_cfg(true), &tiny_schedule_cfg(), &tcfg).unwrap();
        assert_eq!(out.curve.len(), 400);
        let mean_mask: f64 =
            out.curve.iter().map(|r| r.2).sum::<f64>() / out.curve.len() as f64;
        assert!((mean_mask - 0.5).abs() < 0.1, "mask rate {mean_mask}");

        // Fixed validation batch near t = T, where the noise dominates the
        // noisy latent and prediction quality is easiest to read. A fresh
        // network predicts zero, so its loss is exactly the mean squared
        // noise; training must beat that on the same batch.
        let model = &out.model;
        let stats = model.latent_stats();
        let schedule = model.schedule();
        let t_count = schedule.t_count();
        let mut rng = derive_rng(10, "test/val-batch", 0);
        let b = examples.len();
        let (d, h, w) = (2, 4, 4);
        let mut input = ArrayD::zeros(IxDyn(&[b, 2 * d, h, w]));
        let mut noise = ArrayD::zeros(IxDyn(&[b, d, h, w]));
        let mut ts = Vec::new();
        let mut classes = Vec::new();
        for (bi, ex) in examples.iter().enumerate() {
            let t = t_count - bi % 5;
            let eps = standard_normal(&mut rng, &[d, h, w]);
            let y0 = standardize(&ex.clean, &stats);
            let y_t = schedule.forward_marginal(&y0, t, &eps).unwrap();
            let x = standardize(&ex.artifact, &stats);
            for c in 0..d {
                input
                    .index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), c)
                    .assign(&x.index_axis(Axis(0), c));
                input
                    .index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), d + c)
                    .assign(&y_t.index_axis(Axis(0), c));
            }
            noise.index_axis_mut(Axis(0), bi).assign(&eps);
            ts.push(t);
            classes.push(ex.class.index());
        }
        let pred = model.epsilon_batch(&input, &ts, Some(&classes));
        let trained_loss = (&pred - &noise).mapv(|v| v * v).mean().unwrap();
        let zero_loss = noise.mapv(|v| v * v).mean().unwrap();
        assert!(
            trained_loss < 0.95 * zero_loss,
            "training did not beat the zero predictor: {trained_loss} vs {zero_loss}"
        );
    }

    #[test]
    fn restorer_rejects_mask_labels_and_empty_corpora() {
        let tcfg = DiffTrainConfig::default();
        match train_restorer(&[], &tiny_net_cfg(true), &tiny_schedule_cfg(), &tcfg) {
            Err(e) => assert_eq!(e.kind(), "training"),
            Ok(_) => panic!("empty corpus accepted"),
        }
        let mut examples = tiny_examples(2, 11);
        examples[1].class = ArtifactClass::Mask;
        match train_restorer(&examples, &tiny_net_cfg(true), &tiny_schedule_cfg(), &tcfg) {
            Err(e) => assert_eq!(e.kind(), "training"),
            Ok(_) => panic!("MASK label accepted"),
        }
    }

    /// Counting mock: predicts zero noise and counts evaluations.
    struct CountingModel {
        calls: Cell<usize>,
    }

    impl ConditionalEpsilon for CountingModel {
        fn epsilon(
            &self,
            _x: &ArrayD<f64>,
            y_t: &ArrayD<f64>,
            _t: usize,
            _cls: ArtifactClass,
        ) -> ArrayD<f64> {
            self.calls.set(self.calls.get() + 1);
            ArrayD::zeros(IxDyn(y_t.shape()))
        }
    }

    #[test]
    fn restore_core_makes_exactly_n_steps_evaluations() {
        let schedule = tiny_schedule_cfg().build().unwrap();
        let z_x = ArrayD::zeros(IxDyn(&[2, 4, 4]));
        let n_steps = 7;
        for (mode, expected) in [
            (RestoreMode::Blind, 7usize),
            (RestoreMode::NonBlind(ArtifactClass::DdimGaussian), 7),
            (
                RestoreMode::Guided {
                    class: ArtifactClass::DdimGaussian,
                    scale: 3.0,
                },
                14,
            ),
        ] {
            let model = CountingModel { calls: Cell::new(0) };
            let mut rng = derive_rng(12, "test/eval-count", 0);
            let (out, evals) =
                restore_core(&model, &schedule, &z_x, &mode, n_steps, &mut rng).unwrap();
            assert_eq!(evals, expected, "mode {}", mode.name());
            assert_eq!(model.calls.get(), expected);
            assert_eq!(out.shape(), z_x.shape());
        }
    }

    #[test]
    fn restore_mode_validation() {
        assert!(RestoreMode::Blind.validate().is_ok());
        assert!(RestoreMode::NonBlind(ArtifactClass::Mask).validate().is_err());
        assert!(RestoreMode::Guided {
            class: ArtifactClass::Mask,
            scale: 3.0
        }
        .validate()
        .is_err());
        assert!(RestoreMode::Guided {
            class: ArtifactClass::ReplaceToken,
            scale: f64::NAN
        }
        .validate()
        .is_err());
        assert!(EvalMode::Guided(3.0).validate().is_ok());
        assert!(EvalMode::Guided(f64::NEG_INFINITY).validate().is_err());
    }

    /// A conditional model with random (non-zero) outputs for collapse
    /// tests: perturb the zero-initialized output projection.
    fn perturbed_model(seed: u64) -> DiffusionModel {
        let mut model = DiffusionModel::new(&tiny_net_cfg(true), &tiny_schedule_cfg(), seed).unwrap();
        let id = model.store().find("net.conv_out.w").unwrap();
        let shape = model.store().get(id).shape().to_vec();
        let mut rng = derive_rng(seed, "test/perturb", 1);
        *model.store_mut().get_mut(id) = standard_normal(&mut rng, &shape);
        model
    }

    fn tiny_vq() -> Vqae {
        let cfg = VqConfig {
            image_channels: 3,
            image_size: 16,
            latent_dim: 2,
            codebook_size: 8,
            widths: [6, 8, 10],
        };
        Vqae::new(&cfg, 99).unwrap()
    }

    #[test]
    fn guided_scale_one_collapses_to_nonblind() {
        let model = perturbed_model(13);
        let vq = tiny_vq();
        let mut rng = derive_rng(13, "test/collapse-img", 0);
        let img = standard_normal(&mut rng, &[3, 16, 16]).mapv(|v| v.clamp(-1.0, 1.0));
        let cls = ArtifactClass::GptSampling;

        let guided = restore(
            &model,
            &vq,
            &img,
            &RestoreMode::Guided { class: cls, scale: 1.0 },
            5,
            42,
        )
        .unwrap();
        let nonblind = restore(&model, &vq, &img, &RestoreMode::NonBlind(cls), 5, 42).unwrap();
        assert_eq!(guided, nonblind);

        let guided0 = restore(
            &model,
            &vq,
            &img,
            &RestoreMode::Guided { class: cls, scale: 0.0 },
            5,
            42,
        )
        .unwrap();
        let blind = restore(&model, &vq, &img, &RestoreMode::Blind, 5, 42).unwrap();
        assert_eq!(guided0, blind);
    }

    #[test]
    fn restoration_is_deterministic_in_the_noise_seed() {
        let model = perturbed_model(14);
        let vq = tiny_vq();
        let mut rng = derive_rng(14, "test/determinism-img", 0);
        let img = standard_normal(&mut rng, &[3, 16, 16]).mapv(|v| v.clamp(-1.0, 1.0));
        let mode = RestoreMode::Blind;
        let a = restore(&model, &vq, &img, &mode, 4, 7).unwrap();
        let b = restore(&model, &vq, &img, &mode, 4, 7).unwrap();
        assert_eq!(a, b);
        let c = restore(&model, &vq, &img, &mode, 4, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn evaluate_emits_class_rows_plus_overall_per_mode() {
        let model = perturbed_model(15);
        let vq = tiny_vq();
        let mut rng = derive_rng(15, "test/eval-rows", 0);
        let examples: Vec<EvalExample> = (0..3)
            .map(|i| {
                let clean = standard_normal(&mut rng, &[3, 16, 16]).mapv(|v| v.clamp(-1.0, 1.0));
                let artifact =
                    standard_normal(&mut rng, &[3, 16, 16]).mapv(|v| v.clamp(-1.0, 1.0));
                EvalExample {
                    clean,
                    artifact,
                    class: ArtifactClass::SYNTHESIZED[i % 2],
                }
            })
            .collect();
        let modes = [EvalMode::Blind, EvalMode::NonBlind];
        let rows = evaluate(&model, &vq, &examples, &modes, 3, 77).unwrap();
        assert_eq!(rows.len(), 2 * (ArtifactClass::SYNTHESIZED.len() + 1));
        // Classes 2 and 3 are absent from the examples.
        let empty: Vec<&EvalRow> = rows.iter().filter(|r| r.count == 0).collect();
        assert_eq!(empty.len(), 4);
        assert!(empty.iter().all(|r| r.mse.is_nan()));
        // Overall rows count every example.
        let overall: Vec<&EvalRow> = rows.iter().filter(|r| r.class.is_none()).collect();
        assert_eq!(overall.len(), 2);
        assert!(overall.iter().all(|r| r.count == 3));

        let again = evaluate(&model, &vq, &examples, &modes, 3, 77).unwrap();
        for (a, b) in rows.iter().zip(&again) {
            assert_eq!(a.mode, b.mode);
            assert!(a.mse == b.mse || (a.mse.is_nan() && b.mse.is_nan()));
        }

        assert!(evaluate(&model, &vq, &[], &modes, 3, 77).is_err());
    }
}
