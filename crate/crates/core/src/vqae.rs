//! Vector-quantized autoencoder over 32x32 images.
//!
//! One model serves two roles: the continuous pre-quantization latent `z_e`
//! is the space the restorer's diffusion runs in, and the quantized path
//! (codebook lookup per spatial site) supplies the discrete tokens consumed
//! by the autoregressive token model and the token-level artifact ops. The
//! decoder accepts either kind of latent.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_init, Adam, Conv2d, GroupNorm, ResBlock};
use crate::rng::derive_rng;

/// Spatial downsampling factor of the encoder (two stride-2 stages).
pub const DOWN_FACTOR: usize = 4;

/// Two codebook entries closer than this (max absolute coordinate
/// difference) count as duplicates and are rejected.
pub const CODEBOOK_DUPLICATE_TOL: f64 = 1e-9;

/// Geometry of the autoencoder. The defaults are the toy scale everything
/// in this crate runs at; full-scale analogues (256x256, K=8192) are far
/// outside a single-core budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqConfig {
    pub image_channels: usize,
    pub image_size: usize,
    /// Code dimension d; also the channel count of the latent grid.
    pub latent_dim: usize,
    /// Number of codebook entries K.
    pub codebook_size: usize,
    /// Encoder channel widths per resolution (32, 16, 8). The decoder uses
    /// them in reverse.
    pub widths: [usize; 3],
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            image_channels: 3,
            image_size: 32,
            latent_dim: 4,
            codebook_size: 64,
            widths: [16, 32, 48],
        }
    }
}

impl VqConfig {
    /// Side length of the latent grid (h = w = image_size / 4).
    pub fn grid_size(&self) -> usize {
        self.image_size / DOWN_FACTOR
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.image_size == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("autoencoder geometry must be positive"));
        }
        if self.image_size % DOWN_FACTOR != 0 {
            return Err(Error::invalid(format!(
                "image size {} not divisible by downsampling factor {DOWN_FACTOR}",
                self.image_size
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::invalid(format!(
                "codebook needs at least 2 entries, got {}",
                self.codebook_size
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("encoder widths must be positive"));
        }
        Ok(())
    }
}

/// Discrete code table, K entries of dimension d.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Array2<f64>,
}

impl Codebook {
    /// Validates K >= 2, finiteness, and pairwise-distinct entries.
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let k = entries.nrows();
        if k < 2 {
            return Err(Error::invalid(format!(
                "codebook needs at least 2 entries, got {k}"
            )));
        }
        if entries.ncols() == 0 {
            return Err(Error::invalid("codebook entries must have dimension >= 1"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codebook contains non-finite entries"));
        }
        for a in 0..k {
            for b in a + 1..k {
                let max_diff = entries
                    .row(a)
                    .iter()
                    .zip(entries.row(b).iter())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f64, f64::max);
                if max_diff <= CODEBOOK_DUPLICATE_TOL {
                    return Err(Error::invalid(format!(
                        "codebook entries {a} and {b} are identical within {CODEBOOK_DUPLICATE_TOL:e}"
                    )));
                }
            }
        }
        Ok(Codebook { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }
}

/// Row-major grid of token indices, one per latent site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    h: usize,
    w: usize,
    tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, tokens: Vec<usize>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::invalid("token grid dimensions must be positive"));
        }
        if tokens.len() != h * w {
            return Err(Error::invalid(format!(
                "token grid {h}x{w} needs {} tokens, got {}",
                h * w,
                tokens.len()
            )));
        }
        Ok(TokenGrid { h, w, tokens })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        assert!(i < self.h && j < self.w, "token grid index out of range");
        self.tokens[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, token: usize) {
        assert!(i < self.h && j < self.w, "token grid index out of range");
        self.tokens[i * self.w + j] = token;
    }

    /// Raster-order (row-major) view, the sequence order of the token model.
    pub fn as_slice(&self) -> &[usize] {
        &self.tokens
    }
}

/// Nearest codebook entry for one site, squared Euclidean distance, ties to
/// the lowest index.
fn nearest_entry(site: &[f64], cb: &Codebook) -> usize {
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for k in 0..cb.len() {
        let mut dist = 0.0;
        for (x, e) in site.iter().zip(cb.entries.row(k).iter()) {
            let d = x - e;
            dist += d * d;
        }
        if dist < best_dist {
            best_dist = dist;
            best = k;
        }
    }
    best
}

/// Maps each spatial site of a `[d,h,w]` latent to its nearest codebook
/// entry. Returns the token grid together with the quantized latent `z_q`
/// (each site replaced by its entry). Ties go to the smallest index.
pub fn quantize(z: &ArrayD<f64>, cb: &Codebook) -> Result<(TokenGrid, ArrayD<f64>)> {
    if z.ndim() != 3 {
        return Err(Error::invalid(format!(
            "quantize expects a [d,h,w] latent, got {} axes",
            z.ndim()
        )));
    }
    let (d, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    if d != cb.dim() {
        return Err(Error::invalid(format!(
            "latent dimension {d} does not match codebook dimension {}",
            cb.dim()
        )));
    }
    let mut tokens = Vec::with_capacity(h * w);
    let mut z_q = ArrayD::zeros(IxDyn(&[d, h, w]));
    let mut site = vec![0.0; d];
    for i in 0..h {
        for j in 0..w {
            for (c, s) in site.iter_mut().enumerate() {
                *s = z[[c, i, j]];
            }
            let k = nearest_entry(&site, cb);
            tokens.push(k);
            for c in 0..d {
                z_q[[c, i, j]] = cb.entries[[k, c]];
            }
        }
    }
    Ok((TokenGrid::new(h, w, tokens)?, z_q))
}

/// Table lookup: rebuilds the quantized latent from a token grid.
pub fn tokens_to_latent(grid: &TokenGrid, cb: &Codebook) -> Result<ArrayD<f64>> {
    let d = cb.dim();
    let mut z_q = ArrayD::zeros(IxDyn(&[d, grid.h, grid.w]));
    for i in 0..grid.h {
        for j in 0..grid.w {
            let k = grid.get(i, j);
            if k >= cb.len() {
                return Err(Error::CorruptData(format!(
                    "token {k} at site ({i},{j}) out of range for codebook of {}",
                    cb.len()
                )));
            }
            for c in 0..d {
                z_q[[c, i, j]] = cb.entries[[k, c]];
            }
        }
    }
    Ok(z_q)
}

struct Encoder {
    conv_in: Conv2d,
    down1: Conv2d,
    res1: ResBlock,
    down2: Conv2d,
    res2: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Encoder {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &VqConfig) -> Self {
        let [w0, w1, w2] = cfg.widths;
        Encoder {
            conv_in: Conv2d::new(store, rng, "enc.conv_in", cfg.image_channels, w0, 3, 1, 1),
            down1: Conv2d::new(store, rng, "enc.down1", w0, w1, 3, 2, 1),
            res1: ResBlock::new(store, rng, "enc.res1", w1, w1, None, true),
            down2: Conv2d::new(store, rng, "enc.down2", w1, w2, 3, 2, 1),
            res2: ResBlock::new(store, rng, "enc.res2", w2, w2, None, true),
            norm_out: GroupNorm::new(store, "enc.norm_out", w2),
            conv_out: Conv2d::new(store, rng, "enc.conv_out", w2, cfg.latent_dim, 3, 1, 1),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = self.conv_in.forward(tape, store, x);
        h = self.down1.forward(tape, store, h);
        h = self.res1.forward(tape, store, h, None);
        h = self.down2.forward(tape, store, h);
        h = self.res2.forward(tape, store, h, None);
        h = self.norm_out.forward(tape, store, h);
        h = tape.swish(h);
        self.conv_out.forward(tape, store, h)
    }
}

/// Decoder without normalization layers. GroupNorm couples every output
/// pixel to the whole feature map, so a single-token edit would bleed
/// across the entire image; with plain convolutions the receptive radius
/// of an output pixel is 14 input pixels, keeping token edits local.
struct Decoder {
    conv_in: Conv2d,
    up1: Conv2d,
    res1: ResBlock,
    up2: Conv2d,
    res2: ResBlock,
    conv_out: Conv2d,
}

impl Decoder {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &VqConfig) -> Self {
        let [w0, w1, w2] = cfg.widths;
        Decoder {
            conv_in: Conv2d::new(store, rng, "dec.conv_in", cfg.latent_dim, w2, 3, 1, 1),
            up1: Conv2d::new(store, rng, "dec.up1", w2, w1, 3, 1, 1),
            res1: ResBlock::new(store, rng, "dec.res1", w1, w1, None, false),
            up2: Conv2d::new(store, rng, "dec.up2", w1, w0, 3, 1, 1),
            res2: ResBlock::new(store, rng, "dec.res2", w0, w0, None, false),
            conv_out: Conv2d::new(store, rng, "dec.conv_out", w0, cfg.image_channels, 3, 1, 1),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        let mut h = self.conv_in.forward(tape, store, z);
        h = tape.swish(h);
        h = tape.upsample2(h);
        h = self.up1.forward(tape, store, h);
        h = self.res1.forward(tape, store, h, None);
        h = tape.swish(h);
        h = tape.upsample2(h);
        h = self.up2.forward(tape, store, h);
        h = self.res2.forward(tape, store, h, None);
        h = tape.swish(h);
        self.conv_out.forward(tape, store, h)
    }
}

/// The autoencoder: encoder, decoder and codebook share one parameter store.
pub struct Vqae {
    cfg: VqConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    codebook_id: ParamId,
}

impl Vqae {
    pub fn new(cfg: &VqConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = derive_rng(seed, "vqae/init", 0);
        let encoder = Encoder::new(&mut store, &mut rng, cfg);
        let decoder = Decoder::new(&mut store, &mut rng, cfg);
        let entries = normal_init(&mut rng, &[cfg.codebook_size, cfg.latent_dim], 1.0);
        let codebook_id = store.add("codebook", entries);
        Ok(Vqae {
            cfg: cfg.clone(),
            store,
            encoder,
            decoder,
            codebook_id,
        })
    }

    pub fn config(&self) -> &VqConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Snapshot of the current codebook. Fails if training collapsed two
    /// entries onto each other.
    pub fn codebook(&self) -> Result<Codebook> {
        let raw = self.store.get(self.codebook_id);
        let flat: Vec<f64> = raw.iter().copied().collect();
        let entries = Array2::from_shape_vec((self.cfg.codebook_size, self.cfg.latent_dim), flat)
            .expect("codebook parameter shape");
        Codebook::new(entries)
    }

    fn check_image_shape(&self, shape: &[usize]) -> Result<()> {
        let want_c = self.cfg.image_channels;
        let (c, h, w) = match *shape {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::invalid(format!(
                    "expected a [c,H,W] image, got shape {shape:?}"
                )))
            }
        };
        if c != want_c {
            return Err(Error::invalid(format!(
                "expected {want_c} image channels, got {c}"
            )));
        }
        if h % DOWN_FACTOR != 0 || w % DOWN_FACTOR != 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w} not divisible by downsampling factor {DOWN_FACTOR}"
            )));
        }
        Ok(())
    }

    /// Continuous latent `z_e` of a single `[c,H,W]` image: `[d,H/4,W/4]`.
    pub fn encode(&self, image: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        self.check_image_shape(image.shape())?;
        let batched = image
            .clone()
            .insert_axis(Axis(0));
        let z = self.encode_batch(&batched)?;
        Ok(z.index_axis(Axis(0), 0).to_owned())
    }

    /// Batched encode, `[B,c,H,W]` to `[B,d,H/4,W/4]`.
    pub fn encode_batch(&self, images: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        if images.ndim() != 4 {
            return Err(Error::invalid(format!(
                "expected a [B,c,H,W] batch, got {} axes",
                images.ndim()
            )));
        }
        self.check_image_shape(&images.shape()[1..])?;
        let mut tape = Tape::new();
        let x = tape.input(images.clone());
        let z = self.encoder.forward(&mut tape, &self.store, x);
        Ok(tape.value(z).clone())
    }

    /// Decodes a `[d,h,w]` latent (quantized or continuous) to a `[c,4h,4w]`
    /// image clamped to [-1,1].
    pub fn decode(&self, z: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        if z.ndim() != 3 {
            return Err(Error::invalid(format!(
                "expected a [d,h,w] latent, got {} axes",
                z.ndim()
            )));
        }
        let batched = z.clone().insert_axis(Axis(0));
        let x = self.decode_batch(&batched)?;
        Ok(x.index_axis(Axis(0), 0).to_owned())
    }

    /// Batched decode with the output clamp applied.
    pub fn decode_batch(&self, z: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        if z.ndim() != 4 {
            return Err(Error::invalid(format!(
                "expected a [B,d,h,w] latent batch, got {} axes",
                z.ndim()
            )));
        }
        if z.shape()[1] != self.cfg.latent_dim {
            return Err(Error::invalid(format!(
                "expected latent dimension {}, got {}",
                self.cfg.latent_dim,
                z.shape()[1]
            )));
        }
        if z.shape()[2] == 0 || z.shape()[3] == 0 {
            return Err(Error::invalid("latent grid must be non-empty"));
        }
        let mut tape = Tape::new();
        let zv = tape.input(z.clone());
        let x = self.decoder.forward(&mut tape, &self.store, zv);
        Ok(tape.value(x).mapv(|v| v.clamp(-1.0, 1.0)))
    }

    /// Convenience: encode, quantize, and return the token grid of one image.
    pub fn tokenize(&self, image: &ArrayD<f64>) -> Result<TokenGrid> {
        let z_e = self.encode(image)?;
        let cb = self.codebook()?;
        Ok(quantize(&z_e, &cb)?.0)
    }
}

/// Training hyperparameters for [`train_autoencoder`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the encoder commitment term.
    pub commitment_weight: f64,
    /// Every this many steps, codebook entries unused since the previous
    /// refresh are re-seeded from encoder outputs of the current batch.
    pub refresh_interval: usize,
    pub seed: u64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        VqTrainConfig {
            steps: 2200,
            batch_size: 8,
            learning_rate: 1e-3,
            commitment_weight: 0.25,
            refresh_interval: 250,
            seed: 0,
        }
    }
}

/// Outcome of a training run: the model plus the loss curve and the
/// reconstruction error measured on training images afterwards.
pub struct VqTraining {
    pub model: Vqae,
    /// (step, total loss) per optimization step.
    pub curve: Vec<(usize, f64)>,
    /// Mean squared error of decode(encode(x)) in [-1,1] pixel units.
    pub recon_mse_continuous: f64,
    /// Same, but through the quantized latent.
    pub recon_mse_quantized: f64,
    /// Fraction of codebook entries used when tokenizing the eval images.
    pub codebook_usage: f64,
}

fn stack_batch(images: &[ArrayD<f64>], indices: &[usize]) -> ArrayD<f64> {
    let shape = images[0].shape();
    let mut out = ArrayD::zeros(IxDyn(&[indices.len(), shape[0], shape[1], shape[2]]));
    for (row, &ix) in indices.iter().enumerate() {
        out.index_axis_mut(Axis(0), row).assign(&images[ix]);
    }
    out
}

/// Nearest-entry pass over a `[B,d,h,w]` batch against raw codebook values.
/// Returns row-major tokens (site order, batch-major) and the quantized
/// batch. Used inside training where the codebook may transiently contain
/// near-duplicate rows that `Codebook::new` would reject.
fn quantize_batch_raw(z: &ArrayD<f64>, entries: &Array2<f64>) -> (Vec<usize>, ArrayD<f64>) {
    let (b, d, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]);
    let k = entries.nrows();
    let mut tokens = Vec::with_capacity(b * h * w);
    let mut z_q = ArrayD::zeros(IxDyn(&[b, d, h, w]));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut best = 0usize;
                let mut best_dist = f64::INFINITY;
                for kk in 0..k {
                    let mut dist = 0.0;
                    for c in 0..d {
                        let diff = z[[bi, c, i, j]] - entries[[kk, c]];
                        dist += diff * diff;
                    }
                    if dist < best_dist {
                        best_dist = dist;
                        best = kk;
                    }
                }
                tokens.push(best);
                for c in 0..d {
                    z_q[[bi, c, i, j]] = entries[[best, c]];
                }
            }
        }
    }
    (tokens, z_q)
}

/// Trains the autoencoder with reconstruction, codebook, and commitment
/// losses. Quantization is bridged with a straight-through gradient; the
/// decoder input alternates between the continuous latent and the quantized
/// one so both inference paths are trained.
pub fn train_autoencoder(
    images: &[ArrayD<f64>],
    cfg: &VqConfig,
    tcfg: &VqTrainConfig,
) -> Result<VqTraining> {
    if images.is_empty() {
        return Err(Error::Training("autoencoder corpus is empty".into()));
    }
    if tcfg.steps == 0 || tcfg.batch_size == 0 {
        return Err(Error::invalid("steps and batch size must be positive"));
    }
    let mut model = Vqae::new(cfg, tcfg.seed)?;
    for (ix, img) in images.iter().enumerate() {
        model.check_image_shape(img.shape()).map_err(|e| {
            Error::Training(format!("corpus image {ix} rejected: {e}"))
        })?;
        if img.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!("corpus image {ix} has non-finite values")));
        }
    }

    let mut opt = Adam::new(&model.store, tcfg.learning_rate);
    let mut batch_rng = derive_rng(tcfg.seed, "vqae/batch", 0);
    let mut refresh_rng = derive_rng(tcfg.seed, "vqae/refresh", 0);
    let mut curve = Vec::with_capacity(tcfg.steps);
    let mut used_since_refresh = vec![false; cfg.codebook_size];

    let sites = cfg.grid_size() * cfg.grid_size();
    for step in 0..tcfg.steps {
        let indices: Vec<usize> = (0..tcfg.batch_size)
            .map(|_| batch_rng.gen_range(0..images.len()))
            .collect();
        let batch = stack_batch(images, &indices);

        let mut tape = Tape::new();
        let x = tape.input(batch);
        let z_e = model.encoder.forward(&mut tape, &model.store, x);
        let z_e_val = tape.value(z_e).clone();

        let entries_val = {
            let raw = model.store.get(model.codebook_id);
            Array2::from_shape_vec(
                (cfg.codebook_size, cfg.latent_dim),
                raw.iter().copied().collect(),
            )
            .expect("codebook parameter shape")
        };
        let (tokens, z_q_val) = quantize_batch_raw(&z_e_val, &entries_val);
        for &t in &tokens {
            used_since_refresh[t] = true;
        }

        // Straight-through on odd steps: decoder sees z_q, encoder gradient
        // flows as if the quantizer were the identity.
        let dec_in = if step % 2 == 1 {
            let jump = &z_q_val - &z_e_val;
            tape.add_const(z_e, &jump)
        } else {
            z_e
        };
        let x_hat = model.decoder.forward(&mut tape, &model.store, dec_in);
        let recon = tape.mse_loss(x_hat, x);

        // Codebook loss: pull selected entries toward the (frozen) encoder
        // output at each site.
        let table = tape.param(&model.store, model.codebook_id);
        let selected = tape.embed(table, &tokens);
        let mut site_targets = Array2::<f64>::zeros((tokens.len(), cfg.latent_dim));
        let (bsz, h, w) = (z_e_val.shape()[0], z_e_val.shape()[2], z_e_val.shape()[3]);
        for bi in 0..bsz {
            for i in 0..h {
                for j in 0..w {
                    let row = bi * sites + i * w + j;
                    for c in 0..cfg.latent_dim {
                        site_targets[[row, c]] = z_e_val[[bi, c, i, j]];
                    }
                }
            }
        }
        let targets = tape.input(site_targets.into_dyn());
        let cb_loss = tape.mse_loss(selected, targets);

        // Commitment loss: pull the encoder toward the (frozen) entries.
        let z_q_const = tape.input(z_q_val);
        let commit = tape.mse_loss(z_e, z_q_const);

        let cb_commit = tape.scale(commit, tcfg.commitment_weight);
        let aux = tape.add(cb_loss, cb_commit);
        let loss = tape.add(recon, aux);

        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at step {step}"
            )));
        }
        curve.push((step, loss_val));

        let grads = tape.backward(loss, &model.store);
        opt.step(&mut model.store, &grads);

        // Re-seed entries that went unused for a whole window so the
        // codebook cannot collapse onto a few codes.
        if tcfg.refresh_interval > 0 && (step + 1) % tcfg.refresh_interval == 0 {
            let dead: Vec<usize> = (0..cfg.codebook_size)
                .filter(|&k| !used_since_refresh[k])
                .collect();
            if !dead.is_empty() {
                let (b, _, h, w) = (
                    z_e_val.shape()[0],
                    z_e_val.shape()[1],
                    z_e_val.shape()[2],
                    z_e_val.shape()[3],
                );
                let table = model.store.get_mut(model.codebook_id);
                for &k in &dead {
                    let bi = refresh_rng.gen_range(0..b);
                    let i = refresh_rng.gen_range(0..h);
                    let j = refresh_rng.gen_range(0..w);
                    for c in 0..cfg.latent_dim {
                        let jitter: f64 = refresh_rng.gen_range(-1e-3..1e-3);
                        table[[k, c]] = z_e_val[[bi, c, i, j]] + jitter;
                    }
                }
            }
            used_since_refresh.iter_mut().for_each(|u| *u = false);
        }
    }

    let (recon_mse_continuous, recon_mse_quantized, codebook_usage) =
        evaluate_reconstruction(&model, images)?;
    Ok(VqTraining {
        model,
        curve,
        recon_mse_continuous,
        recon_mse_quantized,
        codebook_usage,
    })
}

/// Reconstruction MSE over (up to) 64 corpus images through both decode
/// paths, plus the fraction of codebook entries in use.
pub fn evaluate_reconstruction(model: &Vqae, images: &[ArrayD<f64>]) -> Result<(f64, f64, f64)> {
    if images.is_empty() {
        return Err(Error::invalid("no images to evaluate"));
    }
    let cb = model.codebook()?;
    let n = images.len().min(64);
    let mut mse_cont = 0.0;
    let mut mse_quant = 0.0;
    let mut used = vec![false; cb.len()];
    for img in &images[..n] {
        let z_e = model.encode(img)?;
        let (grid, z_q) = quantize(&z_e, &cb)?;
        for &t in grid.as_slice() {
            used[t] = true;
        }
        let from_cont = model.decode(&z_e)?;
        let from_quant = model.decode(&z_q)?;
        let len = img.len() as f64;
        mse_cont += (&from_cont - img).mapv(|d| d * d).sum() / len;
        mse_quant += (&from_quant - img).mapv(|d| d * d).sum() / len;
    }
    let usage = used.iter().filter(|&&u| u).count() as f64 / cb.len() as f64;
    Ok((mse_cont / n as f64, mse_quant / n as f64, usage))
}
