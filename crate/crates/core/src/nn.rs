//! Layers, initializers and the optimizer used by all three networks.

use crate::autograd::{Grads, ParamId, ParamStore, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

/// Normal init with explicit standard deviation.
pub fn normal_init(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape/product mismatch")
}

/// He init for convolutions feeding a swish/relu-family nonlinearity.
pub fn he_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    normal_init(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// Largest divisor of `c` that is at most 8, used to pick group counts.
pub fn norm_groups(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

/// Fully connected layer. Accepts inputs of any rank whose last axis is
/// `in_dim`; leading axes are flattened and restored.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = store.add(&format!("{name}.w"), normal_init(rng, &[in_dim, out_dim], std));
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_dim])));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let shape = tape.value(x).shape().to_vec();
        assert_eq!(
            *shape.last().unwrap(),
            self.in_dim,
            "linear: input last axis {:?} != {}",
            shape,
            self.in_dim
        );
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, &[rows, self.in_dim]);
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(flat, w);
        let y = tape.broadcast_add(y, b);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, &out_shape)
    }
}

/// 3x3 or 1x1 convolution with channel bias.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            he_init(rng, &[out_ch, in_ch, k, k], in_ch * k * k),
        );
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_ch])));
        Conv2d { w, b, stride, pad }
    }

    /// Zero-initialized variant for output projections, so freshly built
    /// networks predict exactly zero.
    pub fn new_zero(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            ArrayD::zeros(IxDyn(&[out_ch, in_ch, k, k])),
        );
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_ch])));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.conv2d(x, w, self.stride, self.pad);
        tape.bias_channel(y, b)
    }
}

pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels])));
        let beta = store.add(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
        GroupNorm {
            gamma,
            beta,
            groups: norm_groups(channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.group_norm(x, gamma, beta, self.groups, 1e-5)
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[dim])));
        let beta = store.add(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[dim])));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.layer_norm(x, gamma, beta, 1e-5)
    }
}

/// Residual block: `act -> conv -> (+cond) -> act -> conv` plus skip, with
/// optional group norms before each activation and an optional projection of
/// a per-sample conditioning vector onto the channel dimension.
///
/// Norm-free blocks (`normed = false`) keep every output pixel a function of
/// a bounded input neighborhood, which the latent decoder relies on.
pub struct ResBlock {
    norm1: Option<GroupNorm>,
    conv1: Conv2d,
    cond: Option<Linear>,
    norm2: Option<GroupNorm>,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        cond_dim: Option<usize>,
        normed: bool,
    ) -> Self {
        let norm1 = normed.then(|| GroupNorm::new(store, &format!("{name}.norm1"), in_ch));
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1);
        let cond =
            cond_dim.map(|d| Linear::new(store, rng, &format!("{name}.cond"), d, out_ch));
        let norm2 = normed.then(|| GroupNorm::new(store, &format!("{name}.norm2"), out_ch));
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1);
        let skip = (in_ch != out_ch)
            .then(|| Conv2d::new(store, rng, &format!("{name}.skip"), in_ch, out_ch, 1, 1, 0));
        ResBlock {
            norm1,
            conv1,
            cond,
            norm2,
            conv2,
            skip,
        }
    }

    /// `cond` is a `[B,E]` vector injected as a per-sample channel bias.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, cond: Option<Var>) -> Var {
        let mut h = x;
        if let Some(n) = &self.norm1 {
            h = n.forward(tape, store, h);
        }
        h = tape.swish(h);
        h = self.conv1.forward(tape, store, h);
        match (&self.cond, cond) {
            (Some(proj), Some(c)) => {
                let bias = proj.forward(tape, store, c);
                h = tape.bias_per_sample(h, bias);
            }
            (None, None) => {}
            _ => panic!("res block: conditioning presence mismatch"),
        }
        if let Some(n) = &self.norm2 {
            h = n.forward(tape, store, h);
        }
        h = tape.swish(h);
        h = self.conv2.forward(tape, store, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(tape, store, x),
            None => x,
        };
        tape.add(h, s)
    }
}

/// Single-head self-attention over the spatial grid of a `[B,C,H,W]` map,
/// with residual connection.
pub struct SpatialAttention {
    norm: GroupNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    channels: usize,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize) -> Self {
        SpatialAttention {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels),
            wq: Linear::new(store, rng, &format!("{name}.wq"), channels, channels),
            wk: Linear::new(store, rng, &format!("{name}.wk"), channels, channels),
            wv: Linear::new(store, rng, &format!("{name}.wv"), channels, channels),
            wo: Linear::new(store, rng, &format!("{name}.wo"), channels, channels),
            channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c, self.channels, "spatial attention: channel mismatch");
        let n = self.norm.forward(tape, store, x);
        let seq = tape.reshape(n, &[b, c, h * w]);
        let seq = tape.transpose_last2(seq); // [B, HW, C]
        let q = self.wq.forward(tape, store, seq);
        let k = self.wk.forward(tape, store, seq);
        let v = self.wv.forward(tape, store, seq);
        let kt = tape.transpose_last2(k);
        let scores = tape.batch_matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = tape.softmax_last(scores);
        let out = tape.batch_matmul(attn, v);
        let out = self.wo.forward(tape, store, out);
        let out = tape.transpose_last2(out);
        let out = tape.reshape(out, &[b, c, h, w]);
        tape.add(x, out)
    }
}

/// Lower-triangular attention mask: position `i` may attend to `j <= i`.
pub fn causal_mask(batch: usize, len: usize) -> ArrayD<f64> {
    let mut mask = ArrayD::zeros(IxDyn(&[batch, len, len]));
    for b in 0..batch {
        for i in 0..len {
            for j in (i + 1)..len {
                mask[[b, i, j]] = -1e30;
            }
        }
    }
    mask
}

/// Pre-norm transformer block with single-head causal attention and a
/// swish MLP.
pub struct TransformerBlock {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            wq: Linear::new(store, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(store, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(store, rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(store, rng, &format!("{name}.wo"), dim, dim),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, 4 * dim),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), 4 * dim, dim),
            dim,
        }
    }

    /// `x` is `[B,L,D]`; `mask` is an additive `[B,L,L]` attention mask.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: &ArrayD<f64>) -> Var {
        let h = self.ln1.forward(tape, store, x);
        let q = self.wq.forward(tape, store, h);
        let k = self.wk.forward(tape, store, h);
        let v = self.wv.forward(tape, store, h);
        let kt = tape.transpose_last2(k);
        let scores = tape.batch_matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let scores = tape.add_const(scores, mask);
        let attn = tape.softmax_last(scores);
        let out = tape.batch_matmul(attn, v);
        let out = self.wo.forward(tape, store, out);
        let x = tape.add(x, out);

        let h = self.ln2.forward(tape, store, x);
        let h = self.fc1.forward(tape, store, h);
        let h = tape.swish(h);
        let h = self.fc2.forward(tape, store, h);
        tape.add(x, h)
    }
}

/// Adam with bias correction. Slots without a gradient in a given step keep
/// their moment estimates untouched.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.ids().map(|id| ArrayD::zeros(store.get(id).raw_dim())).collect();
        let v = store.ids().map(|id| ArrayD::zeros(store.get(id).raw_dim())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.of(id) else { continue };
            let slot = id.index();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let p = store.get_mut(id);
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::tests::check_grads;
    use crate::rng::{derive_rng, standard_normal};

    #[test]
    fn res_block_gradients() {
        let mut rng = derive_rng(21, "resblock", 0);
        let mut store = ParamStore::new();
        let block = ResBlock::new(&mut store, &mut rng, "rb", 3, 4, Some(5), true);
        let x = standard_normal(&mut rng, &[2, 3, 4, 4]);
        let cond = standard_normal(&mut rng, &[2, 5]);
        let target = standard_normal(&mut rng, &[2, 4, 4, 4]);
        check_grads(&mut store, &|tape, store| {
            let xv = tape.input(x.clone());
            let cv = tape.input(cond.clone());
            let y = block.forward(tape, store, xv, Some(cv));
            let tv = tape.input(target.clone());
            tape.mse_loss(y, tv)
        });
    }

    #[test]
    fn norm_free_res_block_has_no_norm_params() {
        let mut rng = derive_rng(22, "normfree", 0);
        let mut store = ParamStore::new();
        ResBlock::new(&mut store, &mut rng, "rb", 4, 4, None, false);
        assert!(store.iter().all(|(name, _)| !name.contains("norm")));
    }

    #[test]
    fn spatial_attention_gradients() {
        let mut rng = derive_rng(23, "spatial", 0);
        let mut store = ParamStore::new();
        let attn = SpatialAttention::new(&mut store, &mut rng, "attn", 4);
        let x = standard_normal(&mut rng, &[2, 4, 2, 2]);
        let target = standard_normal(&mut rng, &[2, 4, 2, 2]);
        check_grads(&mut store, &|tape, store| {
            let xv = tape.input(x.clone());
            let y = attn.forward(tape, store, xv);
            let tv = tape.input(target.clone());
            tape.mse_loss(y, tv)
        });
    }

    #[test]
    fn transformer_block_gradients() {
        let mut rng = derive_rng(24, "tblock", 0);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, &mut rng, "tb", 4);
        let x = standard_normal(&mut rng, &[2, 3, 4]);
        let target = standard_normal(&mut rng, &[2, 3, 4]);
        let mask = causal_mask(2, 3);
        check_grads(&mut store, &|tape, store| {
            let xv = tape.input(x.clone());
            let y = block.forward(tape, store, xv, &mask);
            let tv = tape.input(target.clone());
            tape.mse_loss(y, tv)
        });
    }

    #[test]
    fn causal_attention_ignores_future_positions() {
        let mut rng = derive_rng(25, "causality", 0);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, &mut rng, "tb", 6);
        let mask = causal_mask(1, 5);
        let x = standard_normal(&mut rng, &[1, 5, 6]);
        let mut x2 = x.clone();
        for j in 0..6 {
            x2[[0, 4, j]] += 10.0; // perturb only the last position
        }

        let run = |input: &ndarray::ArrayD<f64>| {
            let mut tape = Tape::new();
            let xv = tape.input(input.clone());
            let y = block.forward(&mut tape, &store, xv, &mask);
            tape.value(y).clone()
        };
        let y1 = run(&x);
        let y2 = run(&x2);
        for i in 0..4 {
            for j in 0..6 {
                assert_eq!(
                    y1[[0, i, j]],
                    y2[[0, i, j]],
                    "position {i} saw a change at a future position"
                );
            }
        }
        assert_ne!(y1[[0, 4, 0]], y2[[0, 4, 0]]);
    }

    #[test]
    fn zero_init_conv_outputs_zero() {
        let mut rng = derive_rng(26, "zeroconv", 0);
        let mut store = ParamStore::new();
        let conv = Conv2d::new_zero(&mut store, "out", 3, 2, 3, 1, 1);
        let mut tape = Tape::new();
        let x = tape.input(standard_normal(&mut rng, &[1, 3, 4, 4]));
        let y = conv.forward(&mut tape, &store, x);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut rng = derive_rng(27, "adam", 0);
        let mut store = ParamStore::new();
        let w = store.add("w", standard_normal(&mut rng, &[4, 4]));
        let target = standard_normal(&mut rng, &[4, 4]);
        let mut opt = Adam::new(&store, 0.05);
        for _ in 0..300 {
            let mut tape = Tape::new();
            let wv = tape.param(&store, w);
            let tv = tape.input(target.clone());
            let loss = tape.mse_loss(wv, tv);
            let grads = tape.backward(loss, &store);
            opt.step(&mut store, &grads);
        }
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let tv = tape.input(target.clone());
        let loss = tape.mse_loss(wv, tv);
        assert!(tape.scalar(loss) < 1e-4);
    }

    #[test]
    fn norm_groups_divides_channels() {
        for c in 1..=64 {
            let g = norm_groups(c);
            assert!(g >= 1 && g <= 8 && c % g == 0, "c={c} g={g}");
        }
    }
}
