use rand::Rng;

use super::layers::{EncoderLayerIds, LayerNormIds, LinearIds};
use super::{check_len, Embeddings, ModelConfig, ModelError, Network};
use crate::tensor::{kernels, Graph, ParamStore, Var};

/// Encoder-only critic scoring each token as real (1) or generated (0).
#[derive(Debug, Clone)]
pub struct Feedback {
    config: ModelConfig,
    params: ParamStore,
    emb: Embeddings,
    layers: Vec<EncoderLayerIds>,
    norm: LayerNormIds,
    head: LinearIds,
}

impl Network for Feedback {
    const KIND: &'static str = "feedback";

    fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut p = ParamStore::new();
        let emb = Embeddings::new(&mut p, "emb", &config, true, rng);
        let layers = (0..config.n_enc_layers)
            .map(|l| EncoderLayerIds::new(&mut p, &format!("enc.{l}"), d, config.n_heads, rng))
            .collect();
        let norm = LayerNormIds::new(&mut p, "norm", d);
        // Zero head: an untrained critic outputs exactly 0.5 everywhere.
        let head = LinearIds::zeros(&mut p, "head", d, 1);
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

impl Feedback {
    /// Realism logits `[L, 1]`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x_hat: &[u32],
        m_u: &[bool],
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        self.config.check_ids(x_hat)?;
        check_len("m_u", x_hat.len(), m_u.len())?;
        let mut x = self.emb.forward(g, &self.params, x_hat, Some(m_u))?;
        for layer in &self.layers {
            x = layer.forward(g, &self.params, x, None, self.config.dropout_p, rng)?;
        }
        let x = self.norm.forward(g, &self.params, x)?;
        Ok(self.head.forward(g, &self.params, x)?)
    }

    pub fn logits(&self, x_hat: &[u32], m_u: &[bool]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::inference();
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.forward(&mut g, x_hat, m_u, &mut no_rng)?;
        Ok(g.value(out).data().to_vec())
    }

    /// P(Real) per position.
    pub fn probabilities(&self, x_hat: &[u32], m_u: &[bool]) -> Result<Vec<f64>, ModelError> {
        Ok(self.logits(x_hat, m_u)?.into_iter().map(kernels::sigmoid).collect())
    }
}
