//! Encoder, predictor and joiner assembled into one transducer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{ContextPlan, DomainId, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::lattice::{LatticeLogits, RestrictionBand, rnnt_loss_grad};
use crate::predictor::{Joiner, Predictor, PredictorConfig};
use crate::tensor::{Gradients, Graph, NodeId, ParamStore, Tensor, load_checkpoint, save_checkpoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
}

impl ModelConfig {
    pub fn toy(domain_vector: bool) -> Self {
        Self {
            encoder: EncoderConfig::toy().with_domain_vector(domain_vector),
            predictor: PredictorConfig::toy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transducer {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub predictor: Predictor,
    pub joiner: Joiner,
}

/// Loss and parameter gradients for one utterance.
#[derive(Debug)]
pub struct UtteranceLoss {
    pub loss: f64,
    pub grads: Gradients,
}

impl Transducer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Self::build(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    fn build(config: ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = Encoder::new(config.encoder.clone(), store, rng)?;
        let predictor = Predictor::new(config.predictor.clone(), store, rng);
        let joiner = Joiner::new(config.encoder.width, &config.predictor, store, rng);
        Ok(Self {
            config,
            encoder,
            predictor,
            joiner,
        })
    }

    pub fn vocab(&self) -> usize {
        self.config.predictor.vocab
    }

    pub fn frame_ms(&self) -> f64 {
        self.config.encoder.frame_ms()
    }

    /// Flattened `(T·(U+1)) × V` lattice log-probabilities on the tape.
    pub fn lattice(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stacked: &Tensor,
        tokens: &[usize],
        plan: &ContextPlan,
        domain: Option<DomainId>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let f = self.encoder.forward(g, store, stacked, plan, domain, dropout)?;
        let p = self.predictor.forward(g, store, tokens)?;
        self.joiner.forward(g, store, f, p)
    }

    /// Transducer loss of one utterance and its gradient for every parameter.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        stacked: &Tensor,
        tokens: &[usize],
        plan: &ContextPlan,
        domain: Option<DomainId>,
        band: Option<&RestrictionBand>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<UtteranceLoss> {
        let mut g = Graph::new();
        let out = self.lattice(&mut g, store, stacked, tokens, plan, domain, dropout)?;
        let lp = g.value(out);
        let logits = LatticeLogits::from_log_probs(stacked.rows(), tokens.len(), self.vocab(), lp.data().to_vec())?;
        let lg = rnnt_loss_grad(&logits, tokens, band)?;
        let seed = Tensor::new(lp.shape().to_vec(), lg.grad)?;
        let grads = g.backward(out, &seed)?;
        Ok(UtteranceLoss { loss: lg.loss, grads })
    }

    /// Loss only, in evaluation mode.
    pub fn loss(
        &self,
        store: &ParamStore,
        stacked: &Tensor,
        tokens: &[usize],
        plan: &ContextPlan,
        domain: Option<DomainId>,
        band: Option<&RestrictionBand>,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let out = self.lattice(&mut g, store, stacked, tokens, plan, domain, None)?;
        let logits = LatticeLogits::from_log_probs(stacked.rows(), tokens.len(), self.vocab(), g.value(out).data().to_vec())?;
        crate::lattice::rnnt_loss(&logits, tokens, band)
    }

    /// Write parameters. The metadata holds the model configuration and an
    /// optional caller-defined `run` record.
    pub fn save(&self, path: &Path, store: &ParamStore, run: Option<&serde_json::Value>) -> Result<()> {
        let meta = serde_json::json!({ "model": self.config, "run": run });
        save_checkpoint(path, &meta.to_string(), store)
    }

    /// Rebuild the model from a checkpoint, checking every tensor's name and shape.
    pub fn load(path: &Path) -> Result<(Self, ParamStore, Option<serde_json::Value>)> {
        let (meta, loaded) = load_checkpoint(path)?;
        let mut meta: serde_json::Value = serde_json::from_str(&meta)?;
        let config: ModelConfig = serde_json::from_value(meta["model"].take())
            .map_err(|e| Error::Checkpoint(format!("model configuration: {e}")))?;
        let run = Some(meta["run"].take()).filter(|v| !v.is_null());
        let mut store = ParamStore::new();
        let model = Self::build(config, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        if loaded.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model needs {}",
                loaded.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let src = loaded
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let value = loaded.get(src);
            if value.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = value.clone();
        }
        Ok((model, store, run))
    }
}

/// Dense per-parameter gradient buffers in store order (zeros for unused parameters).
pub fn dense_grads(store: &ParamStore, grads: &Gradients) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
    for (id, g) in grads.params() {
        out[id.index()].copy_from_slice(g.data());
    }
    out
}
