//! A small post-norm transformer encoder with a masked-language-model head,
//! optional bottleneck adapters, and exact reverse-mode gradients.
//!
//! Layer wiring (row vectors, `x` is the layer input):
//!
//! ```text
//! h1  = LN_attn(x + Attn(x))
//! f   = FF(h1)
//! out = LN_out(h1 + f)                          without adapters
//! h   = LN_out(h1 + f)                          with adapters
//! out = LN_out(Adapter(h, f) + h1)
//! Adapter(h, r) = ReLU(h · down) · up + r
//! ```
//!
//! With `up == 0` the adapter returns `f` and the adapter branch reproduces
//! the plain layer exactly.

mod checkpoint;
mod masking;
pub mod ops;
pub mod weights;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind};
pub use masking::{make_masking_plan, MaskAction, MaskingConfig, MaskingPlan};
pub use weights::{
    add_scaled, AdapterWeights, Group, LayerNormWeights, LayerWeights, Linear, Params, TensorMut, TensorRef,
    TrainableSet, Weights,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::PAD;
use ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, log_softmax_row, masked_softmax, softmax_backward, LnCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Bottleneck width; `None` disables adapters.
    #[serde(default)]
    pub adapter_dim: Option<usize>,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.adapter_dim == Some(0) {
            return Err(Error::Config("adapter_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if self.init_std.is_nan() || self.init_std < 0.0 {
            return Err(Error::Config("init_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// `ReLU(h · down) · up + r`, row-wise.
pub fn adapter_apply<T: Scalar>(h: &Array2<T>, r: &Array2<T>, down: &Array2<T>, up: &Array2<T>) -> Result<Array2<T>> {
    let d = h.ncols();
    let b = down.ncols();
    let shape_err = |what: &str, expected: Vec<usize>, actual: &[usize]| Error::Shape {
        what: what.into(),
        expected,
        actual: actual.to_vec(),
    };
    if down.nrows() != d {
        return Err(shape_err("adapter down", vec![d, b], down.shape()));
    }
    if up.shape() != [b, d] {
        return Err(shape_err("adapter up", vec![b, d], up.shape()));
    }
    if r.shape() != h.shape() {
        return Err(shape_err("adapter residual", h.shape().to_vec(), r.shape()));
    }
    let z = h.dot(down).mapv(|v| v.max(T::zero()));
    Ok(z.dot(up) + r)
}

#[derive(Debug, Clone)]
struct AdapterCache<T> {
    h: Array2<T>,
    ln_mid: LnCache<T>,
    pre_relu: Array2<T>,
    act: Array2<T>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    input: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    attn_drop: Option<Array2<T>>,
    h1: Array2<T>,
    ln_attn: LnCache<T>,
    ff_pre: Array2<T>,
    ff_act: Array2<T>,
    ff_drop: Option<Array2<T>>,
    adapter: Option<AdapterCache<T>>,
    ln_out: LnCache<T>,
}

/// Output of a forward pass together with what backward needs.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub ids: Vec<u32>,
    /// Output of every layer, first to last; each is `len(ids) × d`.
    pub hidden: Vec<Array2<T>>,
    key_ok: Vec<bool>,
    ln_emb: LnCache<T>,
    emb_drop: Option<Array2<T>>,
    layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> Forward<T> {
    pub fn last_hidden(&self) -> &Array2<T> {
        self.hidden.last().expect("at least one layer")
    }

    /// Mask of non-padding positions.
    pub fn non_pad(&self) -> &[bool] {
        &self.key_ok
    }
}

/// Mean cross-entropy at the selected positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmLoss<T> {
    pub loss: T,
    /// Set when there were no positions to score; `loss` is then zero.
    pub empty: bool,
}

/// Mean negative log-probability of `targets` under row-wise softmax of `logits`.
pub fn mlm_loss<T: Scalar>(logits: &Array2<T>, targets: &[u32]) -> MlmLoss<T> {
    if targets.is_empty() {
        log::warn!("masked-LM loss over an empty masking plan");
        return MlmLoss {
            loss: T::zero(),
            empty: true,
        };
    }
    let total: T = logits
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, &t)| -log_softmax_row(row)[t as usize])
        .sum();
    MlmLoss {
        loss: total / T::of(targets.len() as f64),
        empty: false,
    }
}

fn dropout_mask<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, rate: f64) -> Array2<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    })
}

/// Encoder parameters plus the set of groups that train.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub weights: Weights<T>,
    pub trainable: TrainableSet,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config, rng);
        Ok(Self {
            config,
            weights,
            trainable: TrainableSet::All,
        })
    }

    /// Inserts freshly initialized adapters (`up = 0`) into every layer and
    /// freezes the base. Existing adapters are kept.
    pub fn add_adapters<R: Rng + ?Sized>(&mut self, adapter_dim: usize, rng: &mut R) -> Result<()> {
        if adapter_dim == 0 {
            return Err(Error::Config("adapter_dim must be positive".into()));
        }
        let d = self.config.hidden_dim;
        for layer in &mut self.weights.layers {
            if layer.adapter.is_none() {
                layer.adapter = Some(AdapterWeights {
                    down: Array2::from_shape_simple_fn((d, adapter_dim), || {
                        weights::truncated_normal(rng, self.config.init_std)
                    }),
                    up: Array2::zeros((adapter_dim, d)),
                });
            }
        }
        self.config.adapter_dim = Some(adapter_dim);
        self.trainable = TrainableSet::AdaptersAndHeads;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            weights: self.weights.cast(),
            trainable: self.trainable,
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Data("empty input sequence".into()));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: id as usize,
                vocab_size: self.config.vocab_size,
            });
        }
        if ids.iter().all(|&id| id == PAD) {
            return Err(Error::Data("sequence consists only of padding".into()));
        }
        Ok(())
    }

    /// Deterministic forward pass (no dropout).
    pub fn forward(&self, ids: &[u32]) -> Result<Forward<T>> {
        self.run(ids, None::<&mut rand_chacha::ChaCha8Rng>)
    }

    /// Forward pass with dropout drawn from `rng` when `dropout_rate > 0`.
    pub fn forward_train<R: Rng + ?Sized>(&self, ids: &[u32], rng: &mut R) -> Result<Forward<T>> {
        self.run(ids, Some(rng))
    }

    fn run<R: Rng + ?Sized>(&self, ids: &[u32], mut rng: Option<&mut R>) -> Result<Forward<T>> {
        self.check_ids(ids)?;
        let cfg = &self.config;
        let w = &self.weights;
        let n = ids.len();
        let d = cfg.hidden_dim;
        let rate = cfg.dropout_rate;
        let mut mask = |rows: usize, cols: usize| -> Option<Array2<T>> {
            match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => Some(dropout_mask(r, rows, cols, rate)),
                _ => None,
            }
        };

        let key_ok: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();
        let mut emb = Array2::zeros((n, d));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = emb.row_mut(i);
            row += &w.token_emb.row(id as usize);
            row += &w.pos_emb.row(i);
        }
        let (mut x, ln_emb) = layer_norm(&emb, &w.ln_emb);
        let emb_drop = mask(n, d);
        if let Some(m) = &emb_drop {
            x *= m;
        }

        let heads = cfg.num_heads;
        let hd = cfg.head_dim();
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut hidden = Vec::with_capacity(w.layers.len());
        let mut caches = Vec::with_capacity(w.layers.len());
        for lw in &w.layers {
            let q = lw.query.forward(&x);
            let k = lw.key.forward(&x);
            let v = lw.value.forward(&x);
            let mut ctx = Array2::zeros((n, d));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                let p = masked_softmax(&scores, &key_ok);
                ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
                probs.push(p);
            }
            let mut attn = lw.attn_out.forward(&ctx);
            let attn_drop = mask(n, d);
            if let Some(m) = &attn_drop {
                attn *= m;
            }
            let (h1, ln_attn) = layer_norm(&(&x + &attn), &lw.ln_attn);
            let ff_pre = lw.ff_in.forward(&h1);
            let ff_act = ff_pre.mapv(gelu);
            let mut ff = lw.ff_out.forward(&ff_act);
            let ff_drop = mask(n, d);
            if let Some(m) = &ff_drop {
                ff *= m;
            }
            let (out, ln_out, adapter) = match &lw.adapter {
                None => {
                    let (out, c) = layer_norm(&(&h1 + &ff), &lw.ln_out);
                    (out, c, None)
                }
                Some(a) => {
                    let (hmid, ln_mid) = layer_norm(&(&h1 + &ff), &lw.ln_out);
                    let pre_relu = hmid.dot(&a.down);
                    let act = pre_relu.mapv(|v| v.max(T::zero()));
                    let adapted = act.dot(&a.up) + &ff;
                    let (out, c) = layer_norm(&(&adapted + &h1), &lw.ln_out);
                    (
                        out,
                        c,
                        Some(AdapterCache {
                            h: hmid,
                            ln_mid,
                            pre_relu,
                            act,
                        }),
                    )
                }
            };
            caches.push(LayerCache {
                input: x,
                q,
                k,
                v,
                probs,
                ctx,
                attn_drop,
                h1,
                ln_attn,
                ff_pre,
                ff_act,
                ff_drop,
                adapter,
                ln_out,
            });
            hidden.push(out.clone());
            x = out;
        }
        Ok(Forward {
            ids: ids.to_vec(),
            hidden,
            key_ok,
            ln_emb,
            emb_drop,
            layers: caches,
        })
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative with
    /// respect to the last layer's output is `d_out`. Tensors outside the
    /// trainable set are left untouched.
    pub fn backward(&self, fwd: &Forward<T>, d_out: &Array2<T>, grads: &mut Weights<T>) {
        let base = self.trainable.includes(Group::Base);
        let cfg = &self.config;
        let hd = cfg.head_dim();
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut dy = d_out.clone();

        for (li, (lw, c)) in self.weights.layers.iter().zip(&fwd.layers).enumerate().rev() {
            let g = &mut grads.layers[li];
            let (mut d_h1, mut d_ff);
            match (&lw.adapter, &c.adapter) {
                (Some(a), Some(ac)) => {
                    let d_pre = layer_norm_backward(&dy, &c.ln_out, &lw.ln_out, base.then_some(&mut g.ln_out));
                    d_h1 = d_pre.clone();
                    d_ff = d_pre.clone();
                    let ga = g.adapter.as_mut().expect("adapter grads");
                    if self.trainable.includes(Group::Adapter) {
                        ga.up += &ac.act.t().dot(&d_pre);
                    }
                    let mut d_pre_relu = d_pre.dot(&a.up.t());
                    ndarray::Zip::from(&mut d_pre_relu)
                        .and(&ac.pre_relu)
                        .for_each(|dz, &z| {
                            if z <= T::zero() {
                                *dz = T::zero();
                            }
                        });
                    if self.trainable.includes(Group::Adapter) {
                        ga.down += &ac.h.t().dot(&d_pre_relu);
                    }
                    let d_h = d_pre_relu.dot(&a.down.t());
                    let d_mid = layer_norm_backward(&d_h, &ac.ln_mid, &lw.ln_out, base.then_some(&mut g.ln_out));
                    d_h1 += &d_mid;
                    d_ff += &d_mid;
                }
                _ => {
                    let d_pre = layer_norm_backward(&dy, &c.ln_out, &lw.ln_out, base.then_some(&mut g.ln_out));
                    d_h1 = d_pre.clone();
                    d_ff = d_pre;
                }
            }
            if let Some(m) = &c.ff_drop {
                d_ff *= m;
            }
            let d_act = lw.ff_out.backward(&c.ff_act, &d_ff, base.then_some(&mut g.ff_out));
            let d_pre_ff = &d_act * &c.ff_pre.mapv(gelu_grad);
            d_h1 += &lw.ff_in.backward(&c.h1, &d_pre_ff, base.then_some(&mut g.ff_in));

            let d_sum = layer_norm_backward(&d_h1, &c.ln_attn, &lw.ln_attn, base.then_some(&mut g.ln_attn));
            let mut d_x = d_sum.clone();
            let mut d_attn = d_sum;
            if let Some(m) = &c.attn_drop {
                d_attn *= m;
            }
            let d_ctx = lw.attn_out.backward(&c.ctx, &d_attn, base.then_some(&mut g.attn_out));
            let mut d_q = Array2::zeros(c.q.raw_dim());
            let mut d_k = Array2::zeros(c.k.raw_dim());
            let mut d_v = Array2::zeros(c.v.raw_dim());
            for (h, p) in c.probs.iter().enumerate() {
                let cols = s![.., h * hd..(h + 1) * hd];
                let dc = d_ctx.slice(cols);
                let dp = dc.dot(&c.v.slice(cols).t());
                d_v.slice_mut(cols).assign(&p.t().dot(&dc));
                let ds = softmax_backward(p, &dp.view()) * scale;
                d_q.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
                d_k.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
            }
            d_x += &lw.query.backward(&c.input, &d_q, base.then_some(&mut g.query));
            d_x += &lw.key.backward(&c.input, &d_k, base.then_some(&mut g.key));
            d_x += &lw.value.backward(&c.input, &d_v, base.then_some(&mut g.value));
            dy = d_x;
        }

        if !base {
            return;
        }
        if let Some(m) = &fwd.emb_drop {
            dy *= m;
        }
        let d_emb = layer_norm_backward(&dy, &fwd.ln_emb, &self.weights.ln_emb, Some(&mut grads.ln_emb));
        for (i, &id) in fwd.ids.iter().enumerate() {
            let row = d_emb.row(i);
            let mut t = grads.token_emb.row_mut(id as usize);
            t += &row;
            let mut p = grads.pos_emb.row_mut(i);
            p += &row;
        }
    }

    /// Masked-LM logits for the given positions of the last layer.
    pub fn mlm_logits(&self, fwd: &Forward<T>, positions: &[usize]) -> Array2<T> {
        let rows = fwd.last_hidden().select(Axis(0), positions);
        self.weights.mlm.forward(&rows)
    }

    /// Computes the masked-LM loss at `positions` and accumulates `weight`
    /// times its gradient into `grads` (head and encoder).
    pub fn mlm_backward(
        &self,
        fwd: &Forward<T>,
        positions: &[usize],
        targets: &[u32],
        weight: T,
        grads: &mut Weights<T>,
    ) -> MlmLoss<T> {
        let logits = self.mlm_logits(fwd, positions);
        let loss = mlm_loss(&logits, targets);
        if loss.empty {
            return loss;
        }
        let k = T::of(targets.len() as f64);
        let mut d_logits = logits;
        for (mut row, &t) in d_logits.rows_mut().into_iter().zip(targets) {
            let lsm = log_softmax_row(row.view());
            row.assign(&lsm.mapv(|v| v.exp()));
            row[t as usize] -= T::one();
            row.mapv_inplace(|v| v * weight / k);
        }
        let rows = fwd.last_hidden().select(Axis(0), positions);
        let head = self.trainable.includes(Group::Head).then_some(&mut grads.mlm);
        let d_rows = self.weights.mlm.backward(&rows, &d_logits, head);
        let mut d_out = Array2::zeros(fwd.last_hidden().raw_dim());
        for (&p, row) in positions.iter().zip(d_rows.rows()) {
            let mut r = d_out.row_mut(p);
            r += &row;
        }
        self.backward(fwd, &d_out, grads);
        loss
    }

    /// Masked-LM loss without gradients.
    pub fn mlm_eval(&self, ids: &[u32], positions: &[usize], targets: &[u32]) -> Result<MlmLoss<T>> {
        let fwd = self.forward(ids)?;
        Ok(mlm_loss(&self.mlm_logits(&fwd, positions), targets))
    }
}

pub type Encoder32 = Encoder<f32>;
pub type Encoder64 = Encoder<f64>;
