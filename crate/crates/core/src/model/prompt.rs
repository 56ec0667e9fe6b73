//! Learnable-context prompt head: per class, trainable context token
//! embeddings followed by the frozen class-name token embeddings, encoded by
//! the frozen text encoder.

use ndarray::{concatenate, s, Array2, Axis};

use crate::corpus::LabelSpace;
use crate::error::{invalid, Result};
use crate::optim::Parameters;
use crate::text::{tokenize, EncoderCache, FrozenTextEncoder};
use crate::zeroshot::{ClassEmbeddings, PromptGroup, PromptTemplate};

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    /// `contexts[j]` is `K_j × token_dim`.
    pub contexts: Vec<Array2<f64>>,
    /// Frozen class-name token embeddings, one matrix per class.
    pub class_tokens: Vec<Array2<f64>>,
}

/// Forward state of [`PromptBank::encode`].
#[derive(Clone, Debug)]
pub struct PromptCache {
    caches: Vec<EncoderCache>,
}

impl PromptBank {
    /// A bank with empty contexts: each class is encoded from its name alone.
    pub fn bare(labels: &LabelSpace, encoder: &FrozenTextEncoder) -> Self {
        let class_tokens: Vec<Array2<f64>> = labels.names().iter().map(|n| encoder.embed_text(n)).collect();
        let contexts = class_tokens.iter().map(|_| Array2::zeros((0, encoder.token_dim()))).collect();
        Self { contexts, class_tokens }
    }

    /// Contexts initialised from a manual prompt group: class `j` starts from
    /// the tokens of its template with the placeholder removed, in order.
    /// With `context_len = Some(K)` the sequence is cut or cycled to exactly
    /// `K` tokens; `None` keeps the template's own length.
    pub fn from_group(
        group: &PromptGroup,
        templates: &[PromptTemplate],
        labels: &LabelSpace,
        encoder: &FrozenTextEncoder,
        context_len: Option<usize>,
    ) -> Result<Self> {
        if group.templates.len() != labels.len() {
            return invalid("prompt group does not cover the label space");
        }
        let mut bank = Self::bare(labels, encoder);
        for (j, &t) in group.templates.iter().enumerate() {
            let template = templates.get(t).ok_or_else(|| crate::Error::InvalidInput(format!("template {t}")))?;
            let tokens = tokenize(&template.filler_text());
            let tokens: Vec<&str> = match context_len {
                None => tokens.iter().map(String::as_str).collect(),
                Some(k) if k > 0 && tokens.is_empty() => return invalid("cannot pad an empty context"),
                Some(k) => tokens.iter().cycle().take(k).map(String::as_str).collect(),
            };
            bank.contexts[j] = encoder.embed_tokens(tokens);
        }
        Ok(bank)
    }

    pub fn num_classes(&self) -> usize {
        self.contexts.len()
    }

    pub fn context_lengths(&self) -> Vec<usize> {
        self.contexts.iter().map(|c| c.nrows()).collect()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, p| p.fill(0.0));
        z
    }

    fn sequence(&self, j: usize) -> Array2<f64> {
        concatenate(Axis(0), &[self.contexts[j].view(), self.class_tokens[j].view()]).expect("matching token width")
    }

    pub fn encode(&self, encoder: &FrozenTextEncoder) -> Result<(ClassEmbeddings, PromptCache)> {
        let mut m = Array2::zeros((self.num_classes(), encoder.out_dim()));
        let mut caches = Vec::with_capacity(self.num_classes());
        for j in 0..self.num_classes() {
            let cache = encoder.forward(self.sequence(j).view())?;
            m.row_mut(j).assign(cache.output());
            caches.push(cache);
        }
        Ok((ClassEmbeddings::new(m)?, PromptCache { caches }))
    }

    /// Accumulates context gradients given `d_embeddings` (one row per
    /// class). Class-name tokens receive nothing.
    pub fn backward(
        &self,
        encoder: &FrozenTextEncoder,
        cache: &PromptCache,
        d_embeddings: &Array2<f64>,
        grads: &mut PromptBank,
    ) {
        for (j, c) in cache.caches.iter().enumerate() {
            let k = self.contexts[j].nrows();
            if k == 0 {
                continue;
            }
            let d_seq = encoder.backward(c, &d_embeddings.row(j).to_owned());
            grads.contexts[j] += &d_seq.slice(s![..k, ..]);
        }
    }
}

impl Parameters for PromptBank {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (j, c) in self.contexts.iter().enumerate() {
            f(&format!("prompt.context.{j}"), c.as_slice().expect("standard layout"));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (j, c) in self.contexts.iter_mut().enumerate() {
            f(&format!("prompt.context.{j}"), c.as_slice_mut().expect("standard layout"));
        }
    }
}
