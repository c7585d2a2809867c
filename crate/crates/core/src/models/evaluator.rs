use std::sync::Arc;

use rand::Rng;

use super::layers::{EncoderLayerIds, LayerNormIds, LinearIds};
use super::{build_attention_mask, AttentionMaskKind, Embeddings, ModelConfig, ModelError, Network};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Causal decoder-only language model; row `i` predicts token `i + 1`.
#[derive(Debug, Clone)]
pub struct Evaluator {
    config: ModelConfig,
    params: ParamStore,
    emb: Embeddings,
    layers: Vec<EncoderLayerIds>,
    norm: LayerNormIds,
    head: LinearIds,
}

impl Network for Evaluator {
    const KIND: &'static str = "evaluator";

    fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut p = ParamStore::new();
        let emb = Embeddings::new(&mut p, "emb", &config, false, rng);
        let layers = (0..config.n_dec_layers)
            .map(|l| EncoderLayerIds::new(&mut p, &format!("dec.{l}"), d, config.n_heads, rng))
            .collect();
        let norm = LayerNormIds::new(&mut p, "norm", d);
        let head = LinearIds::new(&mut p, "head", d, config.vocab_size, rng);
        Ok(Self {
            config,
            params: p,
            emb,
            layers,
            norm,
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

impl Evaluator {
    /// Next-token logits `[L, vocab]`.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, x: &[u32], rng: &mut R) -> Result<Var, ModelError> {
        self.config.check_ids(x)?;
        let mask = Arc::new(build_attention_mask(AttentionMaskKind::Causal, x.len()));
        let mut h = self.emb.forward(g, &self.params, x, None)?;
        for layer in &self.layers {
            h = layer.forward(g, &self.params, h, Some(mask.clone()), self.config.dropout_p, rng)?;
        }
        let h = self.norm.forward(g, &self.params, h)?;
        Ok(self.head.forward(g, &self.params, h)?)
    }

    pub fn logits(&self, x: &[u32]) -> Result<Tensor, ModelError> {
        let mut g = Graph::inference();
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.forward(&mut g, x, &mut no_rng)?;
        Ok(g.value(out).clone())
    }
}
