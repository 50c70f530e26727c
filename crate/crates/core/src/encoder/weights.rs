//! Named parameter tensors and the traversal used by the optimizer,
//! checkpoints and fingerprints.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

/// Partition a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Base,
    Adapter,
    Head,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Base => "base",
            Group::Adapter => "adapter",
            Group::Head => "head",
        }
    }
}

/// Which groups receive gradients and optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    #[default]
    All,
    AdaptersAndHeads,
}

impl TrainableSet {
    pub fn includes(self, group: Group) -> bool {
        match self {
            TrainableSet::All => true,
            TrainableSet::AdaptersAndHeads => group != Group::Base,
        }
    }
}

pub struct TensorRef<'a, T> {
    pub name: String,
    pub group: Group,
    pub view: ArrayViewD<'a, T>,
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub group: Group,
    pub view: ArrayViewMutD<'a, T>,
}

/// A collection of named tensors with a fixed traversal order.
///
/// Gradient buffers use the same type as the parameters they belong to, so
/// zipping `tensors_mut()` of one with `tensors()` of the other pairs each
/// parameter with its gradient.
pub trait Params<T: Scalar> {
    fn tensors(&self) -> Vec<TensorRef<'_, T>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>>;

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            let mut v = t.view;
            v.fill(T::zero());
        }
    }

    fn num_params(&self, mut filter: impl FnMut(Group) -> bool) -> usize
    where
        Self: Sized,
    {
        self.tensors()
            .iter()
            .filter(|t| filter(t.group))
            .map(|t| t.view.len())
            .sum()
    }

    /// SHA-256 over the little-endian `f64` bytes of every tensor in the
    /// selected groups, in traversal order.
    fn fingerprint(&self, mut filter: impl FnMut(Group) -> bool) -> String
    where
        Self: Sized,
    {
        let mut h = Sha256::new();
        for t in self.tensors().iter().filter(|t| filter(t.group)) {
            h.update(t.name.as_bytes());
            for v in t.view.iter() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Name of the first tensor containing a NaN or infinity.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|t| t.view.iter().any(|v| !v.is_finite()))
            .map(|t| t.name)
    }
}

impl<T: Scalar, P: Params<T>> Params<T> for &mut P {
    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        (**self).tensors()
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        (**self).tensors_mut()
    }
}

impl<T: Scalar, A: Params<T>, B: Params<T>> Params<T> for (A, B) {
    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut v = self.0.tensors();
        v.extend(self.1.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut v = self.0.tensors_mut();
        v.extend(self.1.tensors_mut());
        v
    }
}

/// `dst += a * src`, tensor by tensor.
pub fn add_scaled<T: Scalar, P: Params<T>>(dst: &mut P, src: &P, a: T) {
    for (d, s) in dst.tensors_mut().into_iter().zip(src.tensors()) {
        let mut v = d.view;
        v.zip_mut_with(&s.view, |x, &y| *x += a * y);
    }
}

pub(crate) fn truncated_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, std: f64) -> T {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return T::of(z * std);
        }
    }
}

fn random_matrix<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || truncated_normal(rng, std))
}

/// Affine map `x · weight + bias` on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, std: f64) -> Self {
        Self {
            weight: random_matrix(rng, input, output, std),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: Option<&mut Linear<T>>) -> Array2<T> {
        if let Some(g) = grad {
            g.weight += &x.t().dot(dy);
            g.bias += &dy.sum_axis(ndarray::Axis(0));
        }
        dy.dot(&self.weight.t())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.nrows(), self.weight.ncols())
    }

    fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.mapv(|v| U::of(v.as_f64())),
            bias: self.bias.mapv(|v| U::of(v.as_f64())),
        }
    }

    fn push_refs<'a>(&'a self, out: &mut Vec<TensorRef<'a, T>>, prefix: &str, group: Group) {
        out.push(TensorRef {
            name: format!("{prefix}.weight"),
            group,
            view: self.weight.view().into_dyn(),
        });
        out.push(TensorRef {
            name: format!("{prefix}.bias"),
            group,
            view: self.bias.view().into_dyn(),
        });
    }

    fn push_muts<'a>(&'a mut self, out: &mut Vec<TensorMut<'a, T>>, prefix: &str, group: Group) {
        out.push(TensorMut {
            name: format!("{prefix}.weight"),
            group,
            view: self.weight.view_mut().into_dyn(),
        });
        out.push(TensorMut {
            name: format!("{prefix}.bias"),
            group,
            view: self.bias.view_mut().into_dyn(),
        });
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut v = Vec::new();
        self.push_refs(&mut v, "head", Group::Head);
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut v = Vec::new();
        self.push_muts(&mut v, "head", Group::Head);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

impl<T: Scalar> LayerNormWeights<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    fn cast<U: Scalar>(&self) -> LayerNormWeights<U> {
        LayerNormWeights {
            gamma: self.gamma.mapv(|v| U::of(v.as_f64())),
            beta: self.beta.mapv(|v| U::of(v.as_f64())),
        }
    }
}

/// Bottleneck adapter: `down` is d×b, `up` is b×d, no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights<T> {
    pub down: Array2<T>,
    pub up: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub attn_out: Linear<T>,
    pub ln_attn: LayerNormWeights<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
    pub ln_out: LayerNormWeights<T>,
    pub adapter: Option<AdapterWeights<T>>,
}

/// Every tensor of the encoder plus its masked-language-model head.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub token_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub ln_emb: LayerNormWeights<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub mlm: Linear<T>,
}

impl<T: Scalar> Weights<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &super::EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        let std = cfg.init_std;
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                query: Linear::random(rng, d, d, std),
                key: Linear::random(rng, d, d, std),
                value: Linear::random(rng, d, d, std),
                attn_out: Linear::random(rng, d, d, std),
                ln_attn: LayerNormWeights::identity(d),
                ff_in: Linear::random(rng, d, cfg.ff_dim, std),
                ff_out: Linear::random(rng, cfg.ff_dim, d, std),
                ln_out: LayerNormWeights::identity(d),
                adapter: cfg.adapter_dim.map(|b| AdapterWeights {
                    down: random_matrix(rng, d, b, std),
                    up: Array2::zeros((b, d)),
                }),
            })
            .collect();
        Self {
            token_emb: random_matrix(rng, cfg.vocab_size, d, std),
            pos_emb: random_matrix(rng, cfg.max_seq_len, d, std),
            ln_emb: LayerNormWeights::identity(d),
            layers,
            mlm: Linear::random(rng, d, cfg.vocab_size, std),
        }
    }

    /// Gradient buffer with the same layout.
    pub fn zeros_like(&self) -> Self {
        let d = self.token_emb.ncols();
        Self {
            token_emb: Array2::zeros(self.token_emb.raw_dim()),
            pos_emb: Array2::zeros(self.pos_emb.raw_dim()),
            ln_emb: LayerNormWeights::zeros(d),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    query: l.query.zeros_like(),
                    key: l.key.zeros_like(),
                    value: l.value.zeros_like(),
                    attn_out: l.attn_out.zeros_like(),
                    ln_attn: LayerNormWeights::zeros(d),
                    ff_in: l.ff_in.zeros_like(),
                    ff_out: l.ff_out.zeros_like(),
                    ln_out: LayerNormWeights::zeros(d),
                    adapter: l.adapter.as_ref().map(|a| AdapterWeights {
                        down: Array2::zeros(a.down.raw_dim()),
                        up: Array2::zeros(a.up.raw_dim()),
                    }),
                })
                .collect(),
            mlm: self.mlm.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        let m = |a: &Array2<T>| a.mapv(|v| U::of(v.as_f64()));
        Weights {
            token_emb: m(&self.token_emb),
            pos_emb: m(&self.pos_emb),
            ln_emb: self.ln_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    query: l.query.cast(),
                    key: l.key.cast(),
                    value: l.value.cast(),
                    attn_out: l.attn_out.cast(),
                    ln_attn: l.ln_attn.cast(),
                    ff_in: l.ff_in.cast(),
                    ff_out: l.ff_out.cast(),
                    ln_out: l.ln_out.cast(),
                    adapter: l.adapter.as_ref().map(|a| AdapterWeights {
                        down: m(&a.down),
                        up: m(&a.up),
                    }),
                })
                .collect(),
            mlm: self.mlm.cast(),
        }
    }
}

impl<T: Scalar> Params<T> for Weights<T> {
    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        let base = Group::Base;
        out.push(TensorRef { name: "token_emb".into(), group: base, view: self.token_emb.view().into_dyn() });
        out.push(TensorRef { name: "pos_emb".into(), group: base, view: self.pos_emb.view().into_dyn() });
        out.push(TensorRef { name: "ln_emb.gamma".into(), group: base, view: self.ln_emb.gamma.view().into_dyn() });
        out.push(TensorRef { name: "ln_emb.beta".into(), group: base, view: self.ln_emb.beta.view().into_dyn() });
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layer{i}");
            l.query.push_refs(&mut out, &format!("{p}.query"), base);
            l.key.push_refs(&mut out, &format!("{p}.key"), base);
            l.value.push_refs(&mut out, &format!("{p}.value"), base);
            l.attn_out.push_refs(&mut out, &format!("{p}.attn_out"), base);
            out.push(TensorRef { name: format!("{p}.ln_attn.gamma"), group: base, view: l.ln_attn.gamma.view().into_dyn() });
            out.push(TensorRef { name: format!("{p}.ln_attn.beta"), group: base, view: l.ln_attn.beta.view().into_dyn() });
            l.ff_in.push_refs(&mut out, &format!("{p}.ff_in"), base);
            l.ff_out.push_refs(&mut out, &format!("{p}.ff_out"), base);
            out.push(TensorRef { name: format!("{p}.ln_out.gamma"), group: base, view: l.ln_out.gamma.view().into_dyn() });
            out.push(TensorRef { name: format!("{p}.ln_out.beta"), group: base, view: l.ln_out.beta.view().into_dyn() });
            if let Some(a) = &l.adapter {
                out.push(TensorRef { name: format!("{p}.adapter.down"), group: Group::Adapter, view: a.down.view().into_dyn() });
                out.push(TensorRef { name: format!("{p}.adapter.up"), group: Group::Adapter, view: a.up.view().into_dyn() });
            }
        }
        self.mlm.push_refs(&mut out, "mlm", Group::Head);
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        let base = Group::Base;
        out.push(TensorMut { name: "token_emb".into(), group: base, view: self.token_emb.view_mut().into_dyn() });
        out.push(TensorMut { name: "pos_emb".into(), group: base, view: self.pos_emb.view_mut().into_dyn() });
        out.push(TensorMut { name: "ln_emb.gamma".into(), group: base, view: self.ln_emb.gamma.view_mut().into_dyn() });
        out.push(TensorMut { name: "ln_emb.beta".into(), group: base, view: self.ln_emb.beta.view_mut().into_dyn() });
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layer{i}");
            l.query.push_muts(&mut out, &format!("{p}.query"), base);
            l.key.push_muts(&mut out, &format!("{p}.key"), base);
            l.value.push_muts(&mut out, &format!("{p}.value"), base);
            l.attn_out.push_muts(&mut out, &format!("{p}.attn_out"), base);
            out.push(TensorMut { name: format!("{p}.ln_attn.gamma"), group: base, view: l.ln_attn.gamma.view_mut().into_dyn() });
            out.push(TensorMut { name: format!("{p}.ln_attn.beta"), group: base, view: l.ln_attn.beta.view_mut().into_dyn() });
            l.ff_in.push_muts(&mut out, &format!("{p}.ff_in"), base);
            l.ff_out.push_muts(&mut out, &format!("{p}.ff_out"), base);
            out.push(TensorMut { name: format!("{p}.ln_out.gamma"), group: base, view: l.ln_out.gamma.view_mut().into_dyn() });
            out.push(TensorMut { name: format!("{p}.ln_out.beta"), group: base, view: l.ln_out.beta.view_mut().into_dyn() });
            if let Some(a) = &mut l.adapter {
                out.push(TensorMut { name: format!("{p}.adapter.down"), group: Group::Adapter, view: a.down.view_mut().into_dyn() });
                out.push(TensorMut { name: format!("{p}.adapter.up"), group: Group::Adapter, view: a.up.view_mut().into_dyn() });
            }
        }
        self.mlm.push_muts(&mut out, "mlm", Group::Head);
        out
    }
}
