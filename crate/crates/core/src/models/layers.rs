//! Pre-norm transformer building blocks shared by the three networks.

use std::sync::Arc;

use rand::Rng;

use crate::tensor::{kernels, AttnMask, Graph, ParamId, ParamStore, TensorError, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub(crate) struct LayerNormIds {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNormIds {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.gain"), &[d]),
            bias: store.add_zeros(format!("{name}.bias"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layernorm(x, gain, bias)
    }

    pub fn apply_row(&self, store: &ParamStore, x: &[f64], out: &mut [f64]) {
        kernels::layernorm_row(x, store.get(self.gain).data(), store.get(self.bias).data(), out);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_normal(format!("{name}.weight"), &[d_in, d_out], INIT_STD, rng),
            b: store.add_zeros(format!("{name}.bias"), &[d_out]),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            crate::tensor::Tensor::zeros(&[d_in, d_out]),
            true,
        );
        Self {
            w,
            b: store.add_zeros(format!("{name}.bias"), &[d_out]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, Some(b))
    }

    /// `out = x · W + b` for a block of `rows` rows.
    pub fn apply_rows(&self, store: &ParamStore, rows: usize, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.w);
        let (k, n) = w.dims2().expect("rank-2 weight");
        let mut out: Vec<f64> = store.get(self.b).data().repeat(rows);
        kernels::gemm(rows, k, n, x, false, w.data(), false, 1.0, &mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub n_heads: usize,
}

impl AttentionIds {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, rng: &mut R) -> Self {
        Self {
            q: LinearIds::new(store, &format!("{name}.q"), d, d, rng),
            k: LinearIds::new(store, &format!("{name}.k"), d, d, rng),
            v: LinearIds::new(store, &format!("{name}.v"), d, d, rng),
            o: LinearIds::new(store, &format!("{name}.o"), d, d, rng),
            n_heads,
        }
    }

    /// Multi-head attention of `query` rows over `memory` rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        memory: Var,
        mask: Option<Arc<AttnMask>>,
    ) -> Result<Var, TensorError> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let d = g.shape(q)[1];
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_last_dim(q, h * dh, dh)?;
            let kh = g.slice_last_dim(k, h * dh, dh)?;
            let vh = g.slice_last_dim(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let weights = g.masked_softmax(scores, mask.clone())?;
            heads.push(g.matmul(weights, vh)?);
        }
        let merged = g.concat_last_dim(&heads)?;
        self.o.forward(g, store, merged)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForwardIds {
    up: LinearIds,
    down: LinearIds,
}

impl FeedForwardIds {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            up: LinearIds::new(store, &format!("{name}.up"), d, 4 * d, rng),
            down: LinearIds::new(store, &format!("{name}.down"), 4 * d, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }

    pub fn apply_row(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut h = self.up.apply_rows(store, 1, x);
        h.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        self.down.apply_rows(store, 1, &h)
    }
}

/// Self-attention block followed by a feed-forward block, both residual.
#[derive(Debug, Clone)]
pub(crate) struct EncoderLayerIds {
    pub ln1: LayerNormIds,
    pub attn: AttentionIds,
    pub ln2: LayerNormIds,
    pub ffn: FeedForwardIds,
}

impl EncoderLayerIds {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNormIds::new(store, &format!("{name}.ln1"), d),
            attn: AttentionIds::new(store, &format!("{name}.attn"), d, n_heads, rng),
            ln2: LayerNormIds::new(store, &format!("{name}.ln2"), d),
            ffn: FeedForwardIds::new(store, &format!("{name}.ffn"), d, rng),
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: Option<Arc<AttnMask>>,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, mask)?;
        let a = g.dropout(a, dropout, rng)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        let f = g.dropout(f, dropout, rng)?;
        g.add(x, f)
    }
}

/// Masked self-attention, cross-attention to encoder states, feed-forward.
#[derive(Debug, Clone)]
pub(crate) struct DecoderLayerIds {
    pub ln1: LayerNormIds,
    pub self_attn: AttentionIds,
    pub ln2: LayerNormIds,
    pub cross_attn: AttentionIds,
    pub ln3: LayerNormIds,
    pub ffn: FeedForwardIds,
}

impl DecoderLayerIds {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNormIds::new(store, &format!("{name}.ln1"), d),
            self_attn: AttentionIds::new(store, &format!("{name}.self_attn"), d, n_heads, rng),
            ln2: LayerNormIds::new(store, &format!("{name}.ln2"), d),
            cross_attn: AttentionIds::new(store, &format!("{name}.cross_attn"), d, n_heads, rng),
            ln3: LayerNormIds::new(store, &format!("{name}.ln3"), d),
            ffn: FeedForwardIds::new(store, &format!("{name}.ffn"), d, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        memory: Var,
        self_mask: Arc<AttnMask>,
        cross_mask: Arc<AttnMask>,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.self_attn.forward(g, store, h, h, Some(self_mask))?;
        let a = g.dropout(a, dropout, rng)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let c = self.cross_attn.forward(g, store, h, memory, Some(cross_mask))?;
        let c = g.dropout(c, dropout, rng)?;
        let x = g.add(x, c)?;
        let h = self.ln3.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        let f = g.dropout(f, dropout, rng)?;
        g.add(x, f)
    }
}

/// Keys and values of the positions decoded so far, for one layer.
#[derive(Debug, Clone, Default)]
pub(crate) struct KvCache {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub len: usize,
}

impl AttentionIds {
    /// Causal self-attention output for one new row, appending it to `cache`.
    pub fn step(&self, store: &ParamStore, x: &[f64], cache: &mut KvCache) -> Vec<f64> {
        let d = x.len();
        let dh = d / self.n_heads;
        let q = self.q.apply_rows(store, 1, x);
        cache.keys.extend(self.k.apply_rows(store, 1, x));
        cache.values.extend(self.v.apply_rows(store, 1, x));
        cache.len += 1;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut merged = vec![0.0; d];
        let mut scores = vec![0.0; cache.len];
        for h in 0..self.n_heads {
            let qh = &q[h * dh..(h + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kh = &cache.keys[j * d + h * dh..j * d + (h + 1) * dh];
                *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            kernels::softmax_row(&mut scores, None);
            let out = &mut merged[h * dh..(h + 1) * dh];
            for (j, &w) in scores.iter().enumerate() {
                let vh = &cache.values[j * d + h * dh..j * d + (h + 1) * dh];
                out.iter_mut().zip(vh).for_each(|(o, v)| *o += w * v);
            }
        }
        self.o.apply_rows(store, 1, &merged)
    }
}
