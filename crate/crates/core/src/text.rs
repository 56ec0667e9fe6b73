//! Frozen bag-of-tokens text encoder.
//!
//! The encoder is a single fixed self-attention layer followed by mean pooling
//! and a linear projection, with unit-norm output. Nothing is learned: every
//! weight is drawn once from the construction seed. There is no positional
//! signal, so the encoding of a token sequence is invariant to token order.
//!
//! Queries carry a fixed bias along a "salience" direction and words that
//! belong to class names are offset along that same direction, so attention
//! concentrates on content words and the pooled output is dominated by the
//! class name rather than by template filler.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Result};
use crate::nn;

pub const UNKNOWN_TOKEN: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub seed: u64,
    /// Token embedding width.
    pub token_dim: usize,
    /// Output embedding width (the tile feature dimension).
    pub out_dim: usize,
    /// Offset of content-word embeddings along the salience direction.
    pub salience: f64,
    /// Magnitude of the query bias along the salience direction.
    pub sharpness: f64,
    pub query_scale: f64,
    pub value_scale: f64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            token_dim: 64,
            out_dim: 64,
            salience: 0.5,
            sharpness: 10.0,
            query_scale: 0.5,
            value_scale: 1.5,
        }
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

#[derive(Clone, Debug)]
pub struct FrozenTextEncoder {
    config: TextEncoderConfig,
    vocab: BTreeMap<String, usize>,
    token_embeddings: Array2<f64>,
    query: Array2<f64>,
    query_bias: Array1<f64>,
    value: Array2<f64>,
    projection: Array2<f64>,
}

/// Intermediate values of one encoder pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    input: Array2<f64>,
    queries: Array2<f64>,
    values: Array2<f64>,
    attention: Array2<f64>,
    projected: Array1<f64>,
    output: Array1<f64>,
}

impl EncoderCache {
    pub fn output(&self) -> &Array1<f64> {
        &self.output
    }
}

impl FrozenTextEncoder {
    /// Builds the encoder. `filler_words` and `content_words` are tokenised
    /// and together form the vocabulary; words occurring in `content_words`
    /// receive the salience offset. Each token embedding is a pure function of
    /// the seed and the token string, independent of the rest of the vocabulary.
    pub fn new<S: AsRef<str>, T: AsRef<str>>(
        cfg: TextEncoderConfig,
        filler_words: &[S],
        content_words: &[T],
    ) -> Result<Self> {
        if cfg.token_dim == 0 || cfg.out_dim == 0 {
            return config("text encoder dimensions must be positive");
        }
        for (name, v) in [
            ("salience", cfg.salience),
            ("sharpness", cfg.sharpness),
            ("query_scale", cfg.query_scale),
            ("value_scale", cfg.value_scale),
        ] {
            if !v.is_finite() {
                return config(format!("text encoder {name} must be finite"));
            }
        }
        let t = cfg.token_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e47_e4c0_de00_0001);
        let mut salient_dir: Array1<f64> = Array1::from_shape_simple_fn(t, || StandardNormal.sample(&mut rng));
        let n = salient_dir.dot(&salient_dir).sqrt();
        salient_dir /= n;
        let inv_sqrt = 1.0 / (t as f64).sqrt();
        let query = gaussian_matrix(&mut rng, t, t, cfg.query_scale * inv_sqrt);
        let query_bias = &salient_dir * (cfg.sharpness * (t as f64).sqrt());
        let value = gaussian_matrix(&mut rng, t, t, cfg.value_scale * inv_sqrt);
        let projection = gaussian_matrix(&mut rng, t, cfg.out_dim, inv_sqrt);

        let content: std::collections::BTreeSet<String> =
            content_words.iter().flat_map(|w| tokenize(w.as_ref())).collect();
        let mut words: std::collections::BTreeSet<String> =
            filler_words.iter().flat_map(|w| tokenize(w.as_ref())).collect();
        words.extend(content.iter().cloned());
        words.insert(UNKNOWN_TOKEN.to_string());

        let mut vocab = BTreeMap::new();
        let mut token_embeddings = Array2::zeros((words.len(), t));
        for (id, word) in words.into_iter().enumerate() {
            let mut wrng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(word.as_bytes()));
            let mut row = token_embeddings.row_mut(id);
            for x in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut wrng);
                *x = z * inv_sqrt;
            }
            if content.contains(&word) {
                row.scaled_add(cfg.salience, &salient_dir);
            }
            vocab.insert(word, id);
        }

        Ok(Self { config: cfg, vocab, token_embeddings, query, query_bias, value, projection })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn token_dim(&self) -> usize {
        self.config.token_dim
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.vocab.get(token).copied().unwrap_or_else(|| self.vocab[UNKNOWN_TOKEN])
    }

    pub fn token_embeddings(&self) -> &Array2<f64> {
        &self.token_embeddings
    }

    /// Embedding matrix (one row per token) for a piece of text.
    pub fn embed_text(&self, text: &str) -> Array2<f64> {
        let tokens = tokenize(text);
        self.embed_tokens(tokens.iter().map(String::as_str))
    }

    pub fn embed_tokens<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Array2<f64> {
        let ids: Vec<usize> = tokens.into_iter().map(|t| self.token_id(t)).collect();
        self.token_embeddings.select(Axis(0), &ids)
    }

    /// Encodes a token-embedding sequence into a unit vector.
    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Result<EncoderCache> {
        let (len, t) = input.dim();
        if len == 0 {
            return invalid("cannot encode an empty token sequence");
        }
        if t != self.config.token_dim {
            return invalid(format!("token width {t} does not match encoder width {}", self.config.token_dim));
        }
        let scale = 1.0 / (t as f64).sqrt();
        let queries = input.dot(&self.query) + &self.query_bias;
        let values = input.dot(&self.value);
        let mut attention = queries.dot(&input.t()) * scale;
        nn::softmax_rows_inplace(&mut attention);
        let hidden = &input + &attention.dot(&values);
        let pooled = hidden.mean_axis(Axis(0)).expect("non-empty sequence");
        let projected = pooled.dot(&self.projection);
        let norm = projected.dot(&projected).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return invalid("text encoding has zero or non-finite norm");
        }
        let output = &projected / norm;
        Ok(EncoderCache { input: input.to_owned(), queries, values, attention, projected, output })
    }

    pub fn encode(&self, input: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.forward(input)?.output)
    }

    pub fn encode_text(&self, text: &str) -> Result<Array1<f64>> {
        self.encode(self.embed_text(text).view())
    }

    /// Gradient of a scalar loss with respect to the input token embeddings,
    /// given the gradient with respect to the unit-norm output.
    pub fn backward(&self, cache: &EncoderCache, d_output: &Array1<f64>) -> Array2<f64> {
        let (len, t) = cache.input.dim();
        let scale = 1.0 / (t as f64).sqrt();
        let d_projected = nn::normalize_backward(&cache.projected, &cache.output, d_output);
        let d_pooled = self.projection.dot(&d_projected);
        // mean pooling spreads the gradient evenly over positions
        let d_row = &d_pooled / len as f64;
        let d_hidden = Array2::from_shape_fn((len, t), |(_, j)| d_row[j]);
        let mut d_input = d_hidden.clone();
        let d_attention = d_hidden.dot(&cache.values.t());
        let d_values = cache.attention.t().dot(&d_hidden);
        let d_logits = nn::softmax_rows_backward(&cache.attention, &d_attention) * scale;
        // logits = queries · inputᵀ, so both factors receive gradient
        let d_queries = d_logits.dot(&cache.input);
        d_input += &d_logits.t().dot(&cache.queries);
        d_input += &d_queries.dot(&self.query.t());
        d_input += &d_values.dot(&self.value.t());
        d_input
    }
}
