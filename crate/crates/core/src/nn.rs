//! Named parameter storage and the small set of layers the detector is built
//! from (linear, layer norm, multi-head attention, feed-forward).

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Learnable tensors keyed by canonical dotted names, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn by_index(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// CRC32 over names, shapes and raw little-endian values.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update(&(t.rows() as u64).to_le_bytes());
            h.update(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }

    /// Largest absolute elementwise difference to another store with the same
    /// layout.
    pub fn max_abs_diff(&self, other: &ParamStore) -> f32 {
        assert_eq!(self.names, other.names, "parameter layouts differ");
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f32::max)
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.add_assign(b),
                    None => *a = Some(b.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// A tape plus lazily bound parameters from one [`ParamStore`].
///
/// Parameters are copied onto the tape the first time they are used. A
/// frozen graph binds them as constants, so no gradient can reach them.
pub struct Graph<'p> {
    tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.len()], trainable: true }
    }

    pub fn frozen(store: &'p ParamStore) -> Self {
        Self { trainable: false, ..Self::new(store) }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Binds the named parameter. Panics on unknown names, which indicates
    /// a layout bug rather than a runtime condition.
    pub fn p(&mut self, name: &str) -> Var {
        let i = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(v) = self.bound[i] {
            return v;
        }
        let value = self.store.by_index(i).clone();
        let v = if self.trainable { self.tape.param(value) } else { self.tape.constant(value) };
        self.bound[i] = Some(v);
        v
    }

    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        ParamGrads {
            grads: self.bound.iter().map(|b| b.and_then(|v| grads.get(v).cloned())).collect(),
        }
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Initializes parameters into a store from a seeded generator.
pub struct Init<'a> {
    pub store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self { store: ParamStore::new(), rng }
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f32) {
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.store.insert(name, Tensor::new(rows, cols, data));
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f32) {
        self.store.insert(name, Tensor::full(rows, cols, value));
    }

    /// Xavier-uniform weight `[fan_in, fan_out]` and zero bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        self.uniform(&format!("{prefix}.weight"), fan_in, fan_out, bound);
        self.constant(&format!("{prefix}.bias"), 1, fan_out, 0.0);
    }

    pub fn zero_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.constant(&format!("{prefix}.weight"), fan_in, fan_out, 0.0);
        self.constant(&format!("{prefix}.bias"), 1, fan_out, 0.0);
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.constant(&format!("{prefix}.gain"), 1, dim, 1.0);
        self.constant(&format!("{prefix}.bias"), 1, dim, 0.0);
    }

    pub fn attention(&mut self, prefix: &str, dim: usize) {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{part}"), dim, dim);
        }
    }

    pub fn ffn(&mut self, prefix: &str, dim: usize, hidden: usize) {
        self.linear(&format!("{prefix}.fc1"), dim, hidden);
        self.linear(&format!("{prefix}.fc2"), hidden, dim);
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

pub fn linear(g: &mut Graph<'_>, prefix: &str, x: Var) -> Var {
    let w = g.p(&format!("{prefix}.weight"));
    let b = g.p(&format!("{prefix}.bias"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph<'_>, prefix: &str, x: Var) -> Var {
    let gain = g.p(&format!("{prefix}.gain"));
    let bias = g.p(&format!("{prefix}.bias"));
    g.layer_norm(x, gain, bias)
}

pub fn ffn(g: &mut Graph<'_>, prefix: &str, x: Var) -> Var {
    let h = linear(g, &format!("{prefix}.fc1"), x);
    let h = g.gelu(h);
    linear(g, &format!("{prefix}.fc2"), h)
}

/// Multi-head scaled dot-product attention.
///
/// `queries` attend over `keys`/`values` (same row count). `mask`, when
/// given, is an additive `[n_q, n_k]` constant (0 or a large negative).
pub fn attention(
    g: &mut Graph<'_>,
    prefix: &str,
    heads: usize,
    queries: Var,
    keys: Var,
    values: Var,
    mask: Option<Var>,
) -> Var {
    let q = linear(g, &format!("{prefix}.q"), queries);
    let k = linear(g, &format!("{prefix}.k"), keys);
    let v = linear(g, &format!("{prefix}.v"), values);
    let attended = attend(g, heads, q, k, v, mask);
    linear(g, &format!("{prefix}.o"), attended)
}

/// Attention on already-projected `q`, `k`, `v`; returns concatenated heads.
pub fn attend(g: &mut Graph<'_>, heads: usize, q: Var, k: Var, v: Var, mask: Option<Var>) -> Var {
    let dim = g.value(q).cols();
    assert_eq!(dim % heads, 0, "dim must divide into heads");
    let dh = dim / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
        };
        let s = g.matmul_nt(qh, kh);
        let mut s = g.scale(s, scale);
        if let Some(m) = mask {
            s = g.add(s, m);
        }
        let a = g.softmax_rows(s);
        outs.push(g.matmul(a, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// Fixed sinusoidal embedding of scalars in `[0,1]`: `dim` features per value,
/// half sines and half cosines over frequencies from `pi` to `64 pi`.
fn sine_freqs(half: usize) -> Vec<f64> {
    (0..half).map(|i| std::f64::consts::PI * 64f64.powf(i as f64 / half.max(1) as f64)).collect()
}

pub fn sine_embed(values: &[f64], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let freqs = sine_freqs(half);
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        out.extend(freqs.iter().map(|f| (v * f).sin() as f32));
        out.extend(freqs.iter().map(|f| (v * f).cos() as f32));
        out.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    out
}

/// Differentiable [`sine_embed`] of every column: `[N, k]` to `[N, k * dim]`.
pub fn sine_embed_cols(g: &mut Graph<'_>, x: Var, dim: usize) -> Var {
    let half = dim / 2;
    let (n, k) = g.value(x).shape();
    let freqs = g.constant(Tensor::row(sine_freqs(half).iter().map(|&f| f as f32).collect()));
    let mut parts = Vec::with_capacity(3 * k);
    for c in 0..k {
        let col = g.slice_cols(x, c, 1);
        let arg = g.matmul(col, freqs);
        parts.push(g.sin(arg));
        parts.push(g.cos(arg));
        if dim > 2 * half {
            parts.push(g.constant(Tensor::zeros(n, dim - 2 * half)));
        }
    }
    g.concat_cols(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn frozen_graph_yields_no_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut rng);
        init.linear("l", 3, 2);
        let store = init.finish();
        for trainable in [true, false] {
            let mut g = if trainable { Graph::new(&store) } else { Graph::frozen(&store) };
            let x = g.constant(Tensor::full(4, 3, 0.5));
            let y = linear(&mut g, "l", x);
            let y = g.square(y);
            let s = g.sum(y);
            let grads = g.backward(s);
            let pg = g.param_grads(&grads);
            assert_eq!(pg.grads.iter().all(Option::is_some), trainable);
        }
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0));
        let f0 = s.fingerprint();
        s.get_mut("a").unwrap().data_mut()[0] = 2.0;
        assert_ne!(f0, s.fingerprint());
    }
}
