//! Autoregressive model over flattened token grids, plus the temperature
//! and top-k sampling machinery that produces token-resampling artifacts.
//!
//! The model is deliberately tiny: two causal self-attention blocks over
//! 64-token sequences. Only the sampling pathology matters here, not
//! generation quality.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, normal_init, Adam, LayerNorm, Linear, TransformerBlock};
use crate::rng::derive_rng;
use crate::vqae::TokenGrid;

/// Full-scale reference settings for token-resampling degradation; the toy
/// pipeline uses values scaled to its 64-entry vocabulary.
pub const FULL_SCALE_TEMPERATURE: f64 = 21.0;
pub const FULL_SCALE_TOP_K: usize = 500;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenModelConfig {
    /// Vocabulary size K (codebook entries).
    pub vocab_size: usize,
    /// Sequence length l = h*w of the flattened grid.
    pub seq_len: usize,
    pub dim: usize,
    pub layers: usize,
}

impl Default for TokenModelConfig {
    fn default() -> Self {
        TokenModelConfig {
            vocab_size: 64,
            seq_len: 64,
            dim: 48,
            layers: 2,
        }
    }
}

impl TokenModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocabulary needs at least 2 tokens"));
        }
        if self.seq_len == 0 || self.dim == 0 || self.layers == 0 {
            return Err(Error::invalid("sequence length, dim and layers must be positive"));
        }
        Ok(())
    }
}

/// Temperature and top-k truncation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: usize,
}

impl SamplingParams {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(Error::invalid(format!(
                "top_k must be in [1, {vocab_size}], got {}",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// The analytic sampling distribution: logits divided by temperature, the
/// top_k largest kept (boundary ties resolved toward lower indices), softmax
/// renormalized over the kept set, zero elsewhere.
pub fn truncated_softmax(logits: &[f64], p: &SamplingParams) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("empty logit vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logits"));
    }
    p.validate(logits.len())?;

    let scaled: Vec<f64> = logits.iter().map(|v| v / p.temperature).collect();
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| {
        scaled[b]
            .partial_cmp(&scaled[a])
            .expect("finite logits compare")
            .then(a.cmp(&b))
    });
    let kept = &order[..p.top_k];

    let max = kept.iter().map(|&i| scaled[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut probs = vec![0.0; scaled.len()];
    let mut sum = 0.0;
    for &i in kept {
        let e = (scaled[i] - max).exp();
        probs[i] = e;
        sum += e;
    }
    for v in &mut probs {
        *v /= sum;
    }
    Ok(probs)
}

/// One categorical draw from the truncated, renormalized softmax.
pub fn sample_token(logits: &[f64], p: &SamplingParams, rng: &mut impl Rng) -> Result<usize> {
    let probs = truncated_softmax(logits, p)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_kept = 0;
    for (i, &pi) in probs.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        acc += pi;
        last_kept = i;
        if u < acc {
            return Ok(i);
        }
    }
    // Rounding can leave acc marginally below 1; the draw lands in the
    // final kept bucket.
    Ok(last_kept)
}

/// Two-layer causal transformer predicting the next token of a sequence.
/// A begin-of-sequence token (index `vocab_size` in the embedding table)
/// anchors the conditional for the first position.
pub struct TokenModel {
    cfg: TokenModelConfig,
    store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
}

impl TokenModel {
    pub fn new(cfg: &TokenModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = derive_rng(seed, "token-model/init", 0);
        let tok_emb = store.add(
            "tok_emb",
            normal_init(&mut rng, &[cfg.vocab_size + 1, cfg.dim], 0.1),
        );
        let pos_emb = store.add("pos_emb", normal_init(&mut rng, &[cfg.seq_len, cfg.dim], 0.1));
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(&mut store, &mut rng, &format!("block{i}"), cfg.dim))
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", cfg.dim);
        let head = Linear::new(&mut store, &mut rng, "head", cfg.dim, cfg.vocab_size);
        Ok(TokenModel {
            cfg: cfg.clone(),
            store,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn config(&self) -> &TokenModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Logits `[batch, len, K]` for `inputs`, a batch-major flat slice of
    /// `batch * len` embedding indices (sequence tokens or the BOS index).
    fn forward_logits(&self, tape: &mut Tape, inputs: &[usize], batch: usize, len: usize) -> Var {
        assert_eq!(inputs.len(), batch * len);
        assert!(len <= self.cfg.seq_len, "sequence longer than positional table");
        let table = tape.param(&self.store, self.tok_emb);
        let tok = tape.embed(table, inputs);
        let tok = tape.reshape(tok, &[batch, len, self.cfg.dim]);
        let pos_table = tape.param(&self.store, self.pos_emb);
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.embed(pos_table, &positions);
        let mut h = tape.broadcast_add(tok, pos);
        let mask = causal_mask(batch, len);
        for block in &self.blocks {
            h = block.forward(tape, &self.store, h, &mask);
        }
        h = self.ln_f.forward(tape, &self.store, h);
        self.head.forward(tape, &self.store, h)
    }

    fn bos(&self) -> usize {
        self.cfg.vocab_size
    }

    /// Logits of the conditional p(s_{|prefix|} | prefix). An empty prefix
    /// gives the distribution of the first token.
    pub fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.len() >= self.cfg.seq_len {
            return Err(Error::invalid(format!(
                "prefix of {} tokens leaves no position to predict (sequence length {})",
                prefix.len(),
                self.cfg.seq_len
            )));
        }
        if let Some(&t) = prefix.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::invalid(format!(
                "token {t} out of range for vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(self.bos());
        inputs.extend_from_slice(prefix);
        let len = inputs.len();
        let mut tape = Tape::new();
        let logits = self.forward_logits(&mut tape, &inputs, 1, len);
        let vals = tape.value(logits);
        let k = self.cfg.vocab_size;
        Ok((0..k).map(|j| vals[[0, len - 1, j]]).collect())
    }

    /// Mean next-token negative log-likelihood of full sequences.
    pub fn sequence_nll(&self, sequences: &[Vec<usize>]) -> Result<f64> {
        if sequences.is_empty() {
            return Err(Error::invalid("no sequences to score"));
        }
        let l = self.cfg.seq_len;
        let mut total = 0.0;
        for seq in sequences {
            if seq.len() != l {
                return Err(Error::invalid(format!(
                    "sequence of length {} does not match model length {l}",
                    seq.len()
                )));
            }
            let mut inputs = Vec::with_capacity(l);
            inputs.push(self.bos());
            inputs.extend_from_slice(&seq[..l - 1]);
            let mut tape = Tape::new();
            let logits = self.forward_logits(&mut tape, &inputs, 1, l);
            let flat = tape.reshape(logits, &[l, self.cfg.vocab_size]);
            let nll = tape.cross_entropy_logits(flat, seq);
            total += tape.scalar(nll);
        }
        Ok(total / sequences.len() as f64)
    }

    /// exp(mean NLL per token) over the given sequences.
    pub fn perplexity(&self, sequences: &[Vec<usize>]) -> Result<f64> {
        Ok(self.sequence_nll(sequences)?.exp())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TokenTrainConfig {
    fn default() -> Self {
        TokenTrainConfig {
            steps: 1500,
            batch_size: 16,
            learning_rate: 3e-4,
            seed: 0,
        }
    }
}

pub struct TokenTraining {
    pub model: TokenModel,
    /// (step, mean next-token NLL) per optimization step.
    pub curve: Vec<(usize, f64)>,
    /// Perplexity on the held-out slice (the corpus itself when it is too
    /// small to split).
    pub holdout_perplexity: f64,
}

/// Trains the next-token model on flattened grids. The last tenth of the
/// corpus is held out for the reported perplexity when there are at least
/// ten sequences.
pub fn train_token_model(
    corpus: &[Vec<usize>],
    cfg: &TokenModelConfig,
    tcfg: &TokenTrainConfig,
) -> Result<TokenTraining> {
    if corpus.is_empty() {
        return Err(Error::Training("token corpus is empty".into()));
    }
    if tcfg.steps == 0 || tcfg.batch_size == 0 {
        return Err(Error::invalid("steps and batch size must be positive"));
    }
    let mut model = TokenModel::new(cfg, tcfg.seed)?;
    for (ix, seq) in corpus.iter().enumerate() {
        if seq.len() != cfg.seq_len {
            return Err(Error::Training(format!(
                "sequence {ix} has length {}, expected {}",
                seq.len(),
                cfg.seq_len
            )));
        }
        if seq.iter().any(|&t| t >= cfg.vocab_size) {
            return Err(Error::Training(format!(
                "sequence {ix} contains tokens outside the vocabulary of {}",
                cfg.vocab_size
            )));
        }
    }

    let holdout_len = if corpus.len() >= 10 { corpus.len() / 10 } else { 0 };
    let train = &corpus[..corpus.len() - holdout_len];
    let holdout = if holdout_len > 0 {
        &corpus[corpus.len() - holdout_len..]
    } else {
        corpus
    };

    let mut opt = Adam::new(&model.store, tcfg.learning_rate);
    let mut batch_rng = derive_rng(tcfg.seed, "token-model/batch", 0);
    let mut curve = Vec::with_capacity(tcfg.steps);
    let l = cfg.seq_len;

    for step in 0..tcfg.steps {
        let mut inputs = Vec::with_capacity(tcfg.batch_size * l);
        let mut targets = Vec::with_capacity(tcfg.batch_size * l);
        for _ in 0..tcfg.batch_size {
            let seq = &train[batch_rng.gen_range(0..train.len())];
            inputs.push(model.bos());
            inputs.extend_from_slice(&seq[..l - 1]);
            targets.extend_from_slice(seq);
        }
        let mut tape = Tape::new();
        let logits = model.forward_logits(&mut tape, &inputs, tcfg.batch_size, l);
        let flat = tape.reshape(logits, &[tcfg.batch_size * l, cfg.vocab_size]);
        let loss = tape.cross_entropy_logits(flat, &targets);
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {step}")));
        }
        curve.push((step, loss_val));
        let grads = tape.backward(loss, &model.store);
        opt.step(&mut model.store, &grads);
    }

    let holdout_perplexity = model.perplexity(holdout)?;
    Ok(TokenTraining {
        model,
        curve,
        holdout_perplexity,
    })
}

/// Resamples a uniformly chosen set of `floor((1 - keep_fraction) * l)`
/// positions from the model's conditionals, sweeping in raster order so
/// later positions condition on already-resampled earlier ones. Unselected
/// tokens never change.
pub fn resample_tokens(
    grid: &TokenGrid,
    model: &TokenModel,
    keep_fraction: f64,
    p: &SamplingParams,
    rng: &mut impl Rng,
) -> Result<TokenGrid> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::invalid(format!(
            "keep fraction must be in [0, 1], got {keep_fraction}"
        )));
    }
    let l = grid.len();
    if l != model.cfg.seq_len {
        return Err(Error::invalid(format!(
            "grid of {l} tokens does not match model sequence length {}",
            model.cfg.seq_len
        )));
    }
    if let Some(&t) = grid.as_slice().iter().find(|&&t| t >= model.cfg.vocab_size) {
        return Err(Error::invalid(format!(
            "grid token {t} out of range for model vocabulary of {}",
            model.cfg.vocab_size
        )));
    }
    p.validate(model.cfg.vocab_size)?;

    let n_resample = ((1.0 - keep_fraction) * l as f64).floor() as usize;
    let mut positions: Vec<usize> = (0..l).collect();
    for i in 0..n_resample {
        let j = rng.gen_range(i..l);
        positions.swap(i, j);
    }
    let mut selected = positions[..n_resample].to_vec();
    selected.sort_unstable();

    let mut seq: Vec<usize> = grid.as_slice().to_vec();
    for &pos in &selected {
        let logits = model.next_logits(&seq[..pos])?;
        seq[pos] = sample_token(&logits, p, rng)?;
    }
    TokenGrid::new(grid.h(), grid.w(), seq)
}
