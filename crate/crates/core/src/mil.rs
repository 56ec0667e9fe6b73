//! Slide-level multiple-instance comparators: gated-attention pooling
//! (ABMIL) and plain mean pooling, each followed by a linear classifier over
//! the subtypes.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SlideRecord;
use crate::error::{invalid, Error, Result};
use crate::nn;
use crate::optim::{Adam, Parameters, WarmupSchedule};
use crate::training::{EpochTrace, FewShotSplit, TrainConfig};
use crate::zeroshot::argmax;

pub const ABMIL_HIDDEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MilVariant {
    AbmilGated,
    MeanPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilModel {
    pub variant: MilVariant,
    /// Tanh branch, `d × hidden`.
    pub v: Array2<f64>,
    pub bv: Array1<f64>,
    /// Sigmoid gate branch, `d × hidden`.
    pub u: Array2<f64>,
    pub bu: Array1<f64>,
    pub w: Array1<f64>,
    /// Classifier, `d × C`; column `c` scores subtype `c + 1`.
    pub classifier: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct MilForward {
    /// One logit per subtype.
    pub logits: Array1<f64>,
    pub attention: Array1<f64>,
    pooled: Array1<f64>,
    tanh: Array2<f64>,
    gate: Array2<f64>,
    features: Array2<f64>,
}

impl MilForward {
    /// Predicted subtype in `1..=C`.
    pub fn prediction(&self) -> usize {
        argmax(self.logits.view()) + 1
    }
}

impl MilModel {
    pub fn new(variant: MilVariant, dim: usize, num_subtypes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = if variant == MilVariant::AbmilGated { ABMIL_HIDDEN } else { 0 };
        let w = nn::xavier(&mut rng, hidden, 1).into_shape_with_order(hidden).expect("column vector");
        Self {
            variant,
            v: nn::xavier(&mut rng, dim, hidden),
            bv: Array1::zeros(hidden),
            u: nn::xavier(&mut rng, dim, hidden),
            bu: Array1::zeros(hidden),
            w,
            // zero start: random logits would swamp the few steps a k-shot run gets
            classifier: Array2::zeros((dim, num_subtypes)),
            bias: Array1::zeros(num_subtypes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, p| p.fill(0.0));
        z
    }

    pub fn forward(&self, slide: &SlideRecord) -> Result<MilForward> {
        if slide.tiles.is_empty() {
            return invalid(format!("slide `{}` has no tiles", slide.slide_id));
        }
        let x = slide.features();
        let m = x.nrows();
        let (attention, tanh, gate) = match self.variant {
            MilVariant::MeanPool => (Array1::from_elem(m, 1.0 / m as f64), Array2::zeros((0, 0)), Array2::zeros((0, 0))),
            MilVariant::AbmilGated => {
                let tanh = nn::affine(&x, &self.v, &self.bv).mapv(f64::tanh);
                let gate = nn::affine(&x, &self.u, &self.bu).mapv(nn::sigmoid);
                let scores = (&tanh * &gate).dot(&self.w);
                let mut a = scores.insert_axis(Axis(0));
                nn::softmax_rows_inplace(&mut a);
                (a.remove_axis(Axis(0)), tanh, gate)
            }
        };
        let pooled = attention.dot(&x);
        let logits = pooled.dot(&self.classifier) + &self.bias;
        Ok(MilForward { logits, attention, pooled, tanh, gate, features: x })
    }

    pub fn backward(&self, fwd: &MilForward, d_logits: &Array1<f64>, grads: &mut MilModel) {
        let outer = |a: &Array1<f64>, b: &Array1<f64>| {
            a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
        };
        grads.classifier += &outer(&fwd.pooled, d_logits);
        grads.bias += d_logits;
        if self.variant == MilVariant::MeanPool {
            return;
        }
        let d_pooled = self.classifier.dot(d_logits);
        let d_att = fwd.features.dot(&d_pooled);
        let a = &fwd.attention;
        let d_scores = a * &(&d_att - a.dot(&d_att));
        let hidden = &fwd.tanh * &fwd.gate;
        grads.w += &hidden.t().dot(&d_scores);
        let d_hidden = outer(&d_scores, &self.w);
        let d_tanh_pre = &d_hidden * &fwd.gate * &fwd.tanh.mapv(|t| 1.0 - t * t);
        let d_gate_pre = &d_hidden * &fwd.tanh * &fwd.gate.mapv(|g| g * (1.0 - g));
        nn::affine_backward(&fwd.features, &self.v, &d_tanh_pre, &mut grads.v, &mut grads.bv);
        nn::affine_backward(&fwd.features, &self.u, &d_gate_pre, &mut grads.u, &mut grads.bu);
    }
}

impl Parameters for MilModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        if self.variant == MilVariant::AbmilGated {
            f("mil.v", self.v.as_slice().expect("standard layout"));
            f("mil.bv", self.bv.as_slice().expect("standard layout"));
            f("mil.u", self.u.as_slice().expect("standard layout"));
            f("mil.bu", self.bu.as_slice().expect("standard layout"));
            f("mil.w", self.w.as_slice().expect("standard layout"));
        }
        f("mil.classifier", self.classifier.as_slice().expect("standard layout"));
        f("mil.bias", self.bias.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        if self.variant == MilVariant::AbmilGated {
            f("mil.v", self.v.as_slice_mut().expect("standard layout"));
            f("mil.bv", self.bv.as_slice_mut().expect("standard layout"));
            f("mil.u", self.u.as_slice_mut().expect("standard layout"));
            f("mil.bu", self.bu.as_slice_mut().expect("standard layout"));
            f("mil.w", self.w.as_slice_mut().expect("standard layout"));
        }
        f("mil.classifier", self.classifier.as_slice_mut().expect("standard layout"));
        f("mil.bias", self.bias.as_slice_mut().expect("standard layout"));
    }
}

/// Softmax cross-entropy on one slide label; returns the loss and its logit
/// gradient.
fn slide_ce(logits: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let mut p = logits.clone().insert_axis(Axis(0));
    nn::softmax_rows_inplace(&mut p);
    let mut p = p.remove_axis(Axis(0));
    let loss = -p[label - 1].ln();
    p[label - 1] -= 1.0;
    (loss, p)
}

/// Slide-level cross-entropy training with the same epoch, warm-up and
/// shuffling schedule as the tile model. The trace records the loss under
/// `l_labeled` and `total`.
pub fn mil_train(
    model: &mut MilModel,
    slides: &[SlideRecord],
    split: &FewShotSplit,
    cfg: &TrainConfig,
) -> Result<Vec<EpochTrace>> {
    cfg.validate()?;
    let draws: Vec<usize> = split.train_indices().collect();
    let schedule = WarmupSchedule { base_lr: cfg.lr, warmup_steps: cfg.warmup_epochs * draws.len() };
    let mut adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order = draws.clone();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut lr = schedule.lr(step);
        for &i in &order {
            let fwd = model.forward(&slides[i])?;
            let (loss, d_logits) = slide_ce(&fwd.logits, slides[i].slide_label);
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch, slide: slides[i].slide_id.clone() });
            }
            let mut grads = model.zeros_like();
            model.backward(&fwd, &d_logits, &mut grads);
            lr = schedule.lr(step);
            adam.step(model, &grads, lr);
            step += 1;
            sum += loss;
        }
        let mean = sum / order.len().max(1) as f64;
        trace.push(EpochTrace { epoch, l_labeled: mean, l_unlabeled: 0.0, l_pseudo: 0.0, total: mean, lr });
    }
    Ok(trace)
}
