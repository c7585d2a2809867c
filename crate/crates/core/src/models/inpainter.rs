use std::sync::Arc;

use rand::Rng;

use super::layers::{DecoderLayerIds, EncoderLayerIds, KvCache, LayerNormIds, LinearIds};
use super::{build_attention_mask, check_len, AttentionMaskKind, Embeddings, ModelConfig, ModelError, Network};
use crate::remi::BOS_ID;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Encoder-decoder inpainting network.
///
/// The encoder reads the masked sequence plus the regenerate-set channel with
/// anti-causal attention; the decoder reads the right-shifted target with
/// causal attention and sees encoder position `i` only at its own position `i`.
#[derive(Debug, Clone)]
pub struct Inpainter {
    config: ModelConfig,
    params: ParamStore,
    enc_emb: Embeddings,
    enc_layers: Vec<EncoderLayerIds>,
    enc_norm: LayerNormIds,
    dec_emb: Embeddings,
    dec_layers: Vec<DecoderLayerIds>,
    dec_norm: LayerNormIds,
    head: LinearIds,
}

impl Network for Inpainter {
    const KIND: &'static str = "inpainter";

    fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut p = ParamStore::new();
        let enc_emb = Embeddings::new(&mut p, "enc.emb", &config, true, rng);
        let enc_layers = (0..config.n_enc_layers)
            .map(|l| EncoderLayerIds::new(&mut p, &format!("enc.{l}"), d, config.n_heads, rng))
            .collect();
        let enc_norm = LayerNormIds::new(&mut p, "enc.norm", d);
        let dec_emb = Embeddings::new(&mut p, "dec.emb", &config, false, rng);
        let dec_layers = (0..config.n_dec_layers)
            .map(|l| DecoderLayerIds::new(&mut p, &format!("dec.{l}"), d, config.n_heads, rng))
            .collect();
        let dec_norm = LayerNormIds::new(&mut p, "dec.norm", d);
        let head = LinearIds::new(&mut p, "head", d, config.vocab_size, rng);
        Ok(Self {
            config,
            params: p,
            enc_emb,
            enc_layers,
            enc_norm,
            dec_emb,
            dec_layers,
            dec_norm,
            head,
        })
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Inpainter {
    /// `[Bos] ++ targets[..L-1]`.
    pub fn decoder_input(targets: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(targets.len());
        if !targets.is_empty() {
            out.push(BOS_ID);
            out.extend_from_slice(&targets[..targets.len() - 1]);
        }
        out
    }

    /// Final encoder states `[L, d]`.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x_masked: &[u32],
        m_s: &[bool],
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        self.config.check_ids(x_masked)?;
        check_len("m_s", x_masked.len(), m_s.len())?;
        let n = x_masked.len();
        let mask = Arc::new(build_attention_mask(AttentionMaskKind::AntiCausal, n));
        let mut x = self.enc_emb.forward(g, &self.params, x_masked, Some(m_s))?;
        for layer in &self.enc_layers {
            x = layer.forward(g, &self.params, x, Some(mask.clone()), self.config.dropout_p, rng)?;
        }
        Ok(self.enc_norm.forward(g, &self.params, x)?)
    }

    /// Per-position vocabulary logits `[L, vocab]`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x_masked: &[u32],
        m_s: &[bool],
        decoder_input: &[u32],
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        check_len("decoder_input", x_masked.len(), decoder_input.len())?;
        self.config.check_ids(decoder_input)?;
        let memory = self.encode(g, x_masked, m_s, rng)?;
        let n = x_masked.len();
        let self_mask = Arc::new(build_attention_mask(AttentionMaskKind::Causal, n));
        let cross_mask = Arc::new(build_attention_mask(AttentionMaskKind::Identity, n));
        let mut x = self.dec_emb.forward(g, &self.params, decoder_input, None)?;
        for layer in &self.dec_layers {
            x = layer.forward(
                g,
                &self.params,
                x,
                memory,
                self_mask.clone(),
                cross_mask.clone(),
                self.config.dropout_p,
                rng,
            )?;
        }
        let x = self.dec_norm.forward(g, &self.params, x)?;
        Ok(self.head.forward(g, &self.params, x)?)
    }

    /// Runs only the cross-attention block of decoder layer `layer` on raw
    /// query and memory rows.
    pub fn cross_attention_probe(&self, layer: usize, query: &Tensor, memory: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::inference();
        let q = g.constant(query.clone());
        let m = g.constant(memory.clone());
        let n = query.shape()[0];
        let mask = Arc::new(build_attention_mask(AttentionMaskKind::Identity, n));
        let out = self.dec_layers[layer]
            .cross_attn
            .forward(&mut g, &self.params, q, m, Some(mask))?;
        Ok(g.value(out).clone())
    }

    /// Runs the encoder once and prepares a step-wise decoder over it.
    pub fn begin_decode(&self, x_masked: &[u32], m_s: &[bool]) -> Result<IncrementalDecoder<'_>, ModelError> {
        let mut g = Graph::inference();
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        let memory = self.encode(&mut g, x_masked, m_s, &mut no_rng)?;
        let memory = g.value(memory);
        let n = x_masked.len();
        // Identity cross-attention reduces to the projected value row at the
        // same position, so it can be precomputed for every layer.
        let cross = self
            .dec_layers
            .iter()
            .map(|layer| {
                let v = layer.cross_attn.v.apply_rows(&self.params, n, memory.data());
                layer.cross_attn.o.apply_rows(&self.params, n, &v)
            })
            .collect();
        Ok(IncrementalDecoder {
            model: self,
            cross,
            caches: vec![KvCache::default(); self.dec_layers.len()],
            pos: 0,
            len: n,
        })
    }
}

/// Left-to-right decoder with cached keys and values.
#[derive(Debug)]
pub struct IncrementalDecoder<'a> {
    model: &'a Inpainter,
    cross: Vec<Vec<f64>>,
    caches: Vec<KvCache>,
    pos: usize,
    len: usize,
}

impl IncrementalDecoder<'_> {
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_finished(&self) -> bool {
        self.pos >= self.len
    }

    /// Feeds the decoder input at the current position and returns the
    /// vocabulary logits for that position.
    pub fn step(&mut self, input: u32) -> Result<Vec<f64>, ModelError> {
        if self.is_finished() {
            return Err(ModelError::SequenceTooLong {
                len: self.pos + 1,
                max_len: self.len,
            });
        }
        let m = self.model;
        m.config.check_ids(&[input])?;
        let d = m.config.d_model;
        let p = &m.params;
        let mut x = m.dec_emb.row(p, input, self.pos);
        let mut h = vec![0.0; d];
        for (l, layer) in m.dec_layers.iter().enumerate() {
            layer.ln1.apply_row(p, &x, &mut h);
            let a = layer.self_attn.step(p, &h, &mut self.caches[l]);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);
            let c = &self.cross[l][self.pos * d..(self.pos + 1) * d];
            x.iter_mut().zip(c).for_each(|(x, c)| *x += c);
            layer.ln3.apply_row(p, &x, &mut h);
            let f = layer.ffn.apply_row(p, &h);
            x.iter_mut().zip(&f).for_each(|(x, f)| *x += f);
        }
        m.dec_norm.apply_row(p, &x, &mut h);
        self.pos += 1;
        Ok(m.head.apply_rows(p, 1, &h))
    }
}
