//! The trainable tile classifier: optional spatial aggregation followed by
//! either the learnable-prompt head (cosine readout against encoded prompts)
//! or a linear probe head.

mod checkpoint;
pub mod prompt;
pub mod spatial;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::CheckpointHeader;
pub use prompt::{PromptBank, PromptCache};
pub use spatial::{GridLayout, SpatialCache, SpatialParams};

use crate::corpus::SlideRecord;
use crate::error::{config, invalid, Result};
use crate::nn;
use crate::optim::Parameters;
use crate::text::FrozenTextEncoder;
use crate::zeroshot::{aggregate_wsi, argmax, cosine_matrix, Aggregation, ClassEmbeddings, TilePredictions, DEFAULT_TAU};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub tau: f64,
    pub heads: usize,
    pub use_spatial: bool,
    pub use_learnable_prompts: bool,
    /// Learnable context tokens per class.
    pub context_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, heads: 4, use_spatial: true, use_learnable_prompts: true, context_len: 32 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return config("tau must be positive and finite");
        }
        if self.heads == 0 {
            return config("at least one attention head is required");
        }
        Ok(())
    }
}

/// `softmax(cos(v̄_m, E_j) / tau)` for every tile row.
pub fn tile_probabilities(features: &Array2<f64>, embeddings: &ClassEmbeddings, tau: f64) -> Result<Array2<f64>> {
    if !(tau > 0.0) {
        return invalid("tau must be positive");
    }
    Ok(nn::softmax_rows(&(cosine_matrix(features.view(), embeddings)? / tau)))
}

/// `logits = (W · v̂ + b) / tau` on unit-normalised features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearHead {
    /// Starts at the zero-shot readout: weights are the class embeddings.
    pub fn from_embeddings(e: &ClassEmbeddings) -> Self {
        Self { weight: e.matrix().clone(), bias: Array1::zeros(e.num_classes()) }
    }
}

impl Parameters for LinearHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("linear.weight", self.weight.as_slice().expect("standard layout"));
        f("linear.bias", self.bias.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("linear.weight", self.weight.as_slice_mut().expect("standard layout"));
        f("linear.bias", self.bias.as_slice_mut().expect("standard layout"));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Prompt(PromptBank),
    Linear(LinearHead),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathPt {
    pub config: ModelConfig,
    pub spatial: Option<SpatialParams>,
    pub head: Head,
}

/// Output of one slide forward pass plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Tile logits, `M × (C+1)`, in tile order.
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    spatial: Option<SpatialCache>,
    norms: Array1<f64>,
    unit: Array2<f64>,
    readout: Array2<f64>,
    prompt: Option<PromptCache>,
}

impl Forward {
    /// Tile labels by logit argmax (ties to the lower class).
    pub fn labels(&self) -> Vec<usize> {
        self.logits.rows().into_iter().map(argmax).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlidePrediction {
    pub tiles: TilePredictions,
    pub slide_label: usize,
}

impl PathPt {
    /// Builds the model for `config`'s ablation flags. The prompt head uses
    /// `bank`; the linear head is initialised from `zero_shot`. Spatial
    /// weights that are not zero-initialised are drawn from `seed`.
    pub fn new(
        config: ModelConfig,
        dim: usize,
        bank: PromptBank,
        zero_shot: &ClassEmbeddings,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if zero_shot.dim() != dim || zero_shot.num_classes() != bank.num_classes() {
            return invalid("zero-shot embeddings do not match the model dimensions");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spatial = if config.use_spatial { Some(SpatialParams::new(dim, config.heads, &mut rng)?) } else { None };
        let head =
            if config.use_learnable_prompts { Head::Prompt(bank) } else { Head::Linear(LinearHead::from_embeddings(zero_shot)) };
        Ok(Self { config, spatial, head })
    }

    pub fn num_classes(&self) -> usize {
        match &self.head {
            Head::Prompt(b) => b.num_classes(),
            Head::Linear(l) => l.weight.nrows(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, p| p.fill(0.0));
        z
    }

    /// Class embeddings used by the prompt head; `None` for the linear head.
    pub fn class_embeddings(&self, encoder: &FrozenTextEncoder) -> Result<Option<ClassEmbeddings>> {
        match &self.head {
            Head::Prompt(b) => Ok(Some(b.encode(encoder)?.0)),
            Head::Linear(_) => Ok(None),
        }
    }

    pub fn forward(&self, slide: &SlideRecord, encoder: &FrozenTextEncoder) -> Result<Forward> {
        let raw = slide.features();
        let (features, spatial) = match &self.spatial {
            Some(p) => {
                let (f, c) = p.forward(slide, &raw)?;
                (f, Some(c))
            }
            None => (raw, None),
        };
        let (norms, unit) = nn::normalize_rows(features.view());
        if norms.iter().any(|n| !(*n > 0.0 && n.is_finite())) {
            return invalid(format!("slide `{}`: tile feature with zero or non-finite norm", slide.slide_id));
        }
        let tau = self.config.tau;
        let (logits, readout, prompt) = match &self.head {
            Head::Prompt(bank) => {
                let (e, cache) = bank.encode(encoder)?;
                let e = e.matrix().clone();
                (unit.dot(&e.t()) / tau, e, Some(cache))
            }
            Head::Linear(l) => ((unit.dot(&l.weight.t()) + &l.bias) / tau, l.weight.clone(), None),
        };
        let probs = nn::softmax_rows(&logits);
        Ok(Forward { logits, probs, spatial, norms, unit, readout, prompt })
    }

    /// Accumulates the gradient of a loss into `grads`, given its gradient
    /// with respect to the tile logits.
    pub fn backward(&self, encoder: &FrozenTextEncoder, fwd: &Forward, d_logits: &Array2<f64>, grads: &mut PathPt) {
        let ds = d_logits / self.config.tau;
        let d_unit = ds.dot(&fwd.readout);
        match (&self.head, &mut grads.head) {
            (Head::Prompt(bank), Head::Prompt(g)) => {
                let d_e = ds.t().dot(&fwd.unit);
                bank.backward(encoder, fwd.prompt.as_ref().expect("prompt cache"), &d_e, g);
            }
            (Head::Linear(_), Head::Linear(g)) => {
                ndarray::linalg::general_mat_mul(1.0, &ds.t(), &fwd.unit, 1.0, &mut g.weight);
                g.bias += &ds.sum_axis(Axis(0));
            }
            _ => panic!("gradient container does not match the model head"),
        }
        if let (Some(p), Some(g), Some(cache)) = (&self.spatial, grads.spatial.as_mut(), fwd.spatial.as_ref()) {
            let d_features = nn::normalize_rows_backward(&fwd.norms, &fwd.unit, &d_unit);
            p.backward(cache, &d_features, g);
        }
    }

    /// Tile probabilities, tile labels and the tumor-ratio slide call.
    pub fn predict_slide(&self, slide: &SlideRecord, encoder: &FrozenTextEncoder) -> Result<SlidePrediction> {
        let fwd = self.forward(slide, encoder)?;
        let tiles = TilePredictions { labels: fwd.labels(), probs: fwd.probs };
        let slide_label = aggregate_wsi(&tiles, Aggregation::TumorRatio)?;
        Ok(SlidePrediction { tiles, slide_label })
    }
}

impl Parameters for PathPt {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        if let Some(s) = &self.spatial {
            s.visit(f);
        }
        match &self.head {
            Head::Prompt(b) => b.visit(f),
            Head::Linear(l) => l.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        if let Some(s) = &mut self.spatial {
            s.visit_mut(f);
        }
        match &mut self.head {
            Head::Prompt(b) => b.visit_mut(f),
            Head::Linear(l) => l.visit_mut(f),
        }
    }
}
