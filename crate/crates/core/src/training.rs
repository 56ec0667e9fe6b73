//! Few-shot training: the k-shot sampler, the three loss terms, pseudo-label
//! refresh and the optimisation loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SlideRecord, Split};
use crate::error::{config, Error, Result};
use crate::model::PathPt;
use crate::optim::{Adam, WarmupSchedule};
use crate::text::FrozenTextEncoder;
use crate::zeroshot::{pseudo_label_slide, ClassEmbeddings, PseudoLabel, PseudoLabelMap};

/// Floor applied to `p(0) + p(i)` before taking its log.
pub const CANDIDATE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub w_labeled: f64,
    pub w_unlabeled: f64,
    pub w_pseudo: f64,
    /// First epoch (1-based) with the pseudo-label term.
    pub pseudo_start_epoch: usize,
    pub enable_pseudo: bool,
    pub seed: u64,
    pub k_shot: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-4,
            warmup_epochs: 2,
            w_labeled: 1.0,
            w_unlabeled: 0.5,
            w_pseudo: 0.1,
            pseudo_start_epoch: 10,
            enable_pseudo: true,
            seed: 0,
            k_shot: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_labeled", self.w_labeled), ("w_unlabeled", self.w_unlabeled), ("w_pseudo", self.w_pseudo)] {
            if !(w >= 0.0 && w.is_finite()) {
                return config(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return config("lr must be finite and non-negative");
        }
        if self.epochs > 0 && (self.warmup_epochs >= self.epochs || self.pseudo_start_epoch >= self.epochs) {
            return config("warmup_epochs and pseudo_start_epoch must be below epochs");
        }
        Ok(())
    }
}

/// Slide indices (into the slide list the split was drawn from).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    /// `train[c]` holds the k draws for subtype `c + 1`; may repeat.
    pub train: Vec<Vec<usize>>,
    pub test: Vec<usize>,
}

impl FewShotSplit {
    pub fn train_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.train.iter().flatten().copied()
    }
}

/// Draws `k` training slides per subtype from the train split. Each class
/// pool is shuffled by `seed` alone, so samples for smaller `k` are prefixes
/// of those for larger `k`. Classes with fewer than `k` slides are sampled
/// with replacement.
pub fn sample_few_shot(slides: &[SlideRecord], num_subtypes: usize, k: usize, seed: u64) -> Result<FewShotSplit> {
    let mut train = Vec::with_capacity(num_subtypes);
    for class in 1..=num_subtypes {
        let mut pool: Vec<usize> =
            (0..slides.len()).filter(|&i| slides[i].split == Split::Train && slides[i].slide_label == class).collect();
        if pool.is_empty() {
            return config(format!("subtype {class} has no training slides"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        pool.shuffle(&mut rng);
        let draws = if pool.len() >= k {
            pool[..k].to_vec()
        } else {
            (0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        };
        train.push(draws);
    }
    let test = (0..slides.len()).filter(|&i| slides[i].split == Split::Test).collect();
    Ok(FewShotSplit { train, test })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// No tile contributed; the value is zero.
    pub skipped: bool,
}

fn class_weights(labels: &[Option<usize>], num_classes: usize) -> (Vec<f64>, f64) {
    let mut counts = vec![0usize; num_classes];
    for c in labels.iter().flatten() {
        counts[*c] += 1;
    }
    let weights: Vec<f64> = counts.iter().map(|&n| if n > 0 { 1.0 / n as f64 } else { 0.0 }).collect();
    let total = counts.iter().filter(|&&n| n > 0).count() as f64;
    (weights, total)
}

/// Class-balanced cross-entropy over the tiles with `Some(label)`:
/// every present class carries equal total weight.
pub fn balanced_ce(probs: &Array2<f64>, labels: &[Option<usize>]) -> LossValue {
    let (w, total) = class_weights(labels, probs.ncols());
    if total == 0.0 {
        return LossValue { value: 0.0, skipped: true };
    }
    let sum: f64 = labels.iter().enumerate().filter_map(|(m, y)| y.map(|y| -w[y] * probs[[m, y]].ln())).sum();
    LossValue { value: sum / total, skipped: false }
}

/// Gradient of [`balanced_ce`] with respect to the logits behind `probs`.
pub fn balanced_ce_grad(probs: &Array2<f64>, labels: &[Option<usize>]) -> Array2<f64> {
    let (w, total) = class_weights(labels, probs.ncols());
    let mut g = Array2::zeros(probs.raw_dim());
    for (m, y) in labels.iter().enumerate() {
        if let Some(y) = *y {
            let s = w[y] / total;
            let mut row = g.row_mut(m);
            row.scaled_add(s, &probs.row(m));
            row[y] -= s;
        }
    }
    g
}

/// Mean over `tiles` of `-ln(p(0) + p(slide_label))`; zero when empty.
pub fn candidate_loss(probs: &Array2<f64>, slide_label: usize, tiles: &[usize]) -> f64 {
    if tiles.is_empty() {
        return 0.0;
    }
    let sum: f64 = tiles.iter().map(|&m| -(probs[[m, 0]] + probs[[m, slide_label]]).max(CANDIDATE_FLOOR).ln()).sum();
    sum / tiles.len() as f64
}

pub fn candidate_loss_grad(probs: &Array2<f64>, slide_label: usize, tiles: &[usize]) -> Array2<f64> {
    let mut g = Array2::zeros(probs.raw_dim());
    let n = tiles.len() as f64;
    for &m in tiles {
        let p = probs.row(m);
        let q = (p[0] + p[slide_label]).max(CANDIDATE_FLOOR);
        let mut row = g.row_mut(m);
        row.scaled_add(1.0 / n, &p);
        row[0] -= p[0] / q / n;
        row[slide_label] -= p[slide_label] / q / n;
    }
    g
}

/// Fills every unlabeled tile with the restricted argmax over
/// `{normal, slide subtype}` of `probs` (ties go to normal). Labeled tiles
/// are kept as they are.
pub fn refresh_map(map: &PseudoLabelMap, probs: &Array2<f64>) -> PseudoLabelMap {
    let i = map.slide_label;
    let labels = map
        .labels
        .iter()
        .enumerate()
        .map(|(m, l)| match l {
            PseudoLabel::Unlabeled if probs[[m, i]] > probs[[m, 0]] => PseudoLabel::Subtype(i),
            PseudoLabel::Unlabeled => PseudoLabel::Normal,
            kept => *kept,
        })
        .collect();
    PseudoLabelMap { slide_label: i, labels }
}

/// Re-labels unlabeled tiles with the current model.
pub fn pseudo_label_refresh(
    model: &PathPt,
    encoder: &FrozenTextEncoder,
    slides: &[&SlideRecord],
    maps: &[PseudoLabelMap],
) -> Result<Vec<PseudoLabelMap>> {
    slides.iter().zip(maps).map(|(s, m)| Ok(refresh_map(m, &model.forward(s, encoder)?.probs))).collect()
}

/// Mean loss terms over the optimisation steps of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub l_labeled: f64,
    pub l_unlabeled: f64,
    pub l_pseudo: f64,
    pub total: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

pub fn trace_csv(trace: &[EpochTrace]) -> String {
    let mut out = String::from("epoch,L_labeled,L_unlabeled,L_pseudo,total,lr\n");
    for t in trace {
        let _ = writeln!(out, "{},{},{},{},{},{}", t.epoch, t.l_labeled, t.l_unlabeled, t.l_pseudo, t.total, t.lr);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<EpochTrace>,
    /// Tile labels naming a subtype other than their slide's, over every
    /// retained and refreshed map. Always zero unless something is broken.
    pub violations: usize,
}

/// Loss terms and logit gradient for one slide.
struct StepLoss {
    labeled: f64,
    unlabeled: f64,
    pseudo: f64,
    total: f64,
    d_logits: Array2<f64>,
}

fn step_loss(probs: &Array2<f64>, original: &PseudoLabelMap, refreshed: Option<&PseudoLabelMap>, cfg: &TrainConfig) -> StepLoss {
    let targets: Vec<Option<usize>> = original.labels.iter().map(|l| l.class()).collect();
    let unlabeled: Vec<usize> = original.unlabeled().collect();
    let pseudo_targets: Vec<Option<usize>> = match refreshed {
        Some(r) => original
            .labels
            .iter()
            .zip(&r.labels)
            .map(|(o, n)| if *o == PseudoLabel::Unlabeled { n.class() } else { None })
            .collect(),
        None => vec![None; targets.len()],
    };
    let labeled = balanced_ce(probs, &targets).value;
    let unl = candidate_loss(probs, original.slide_label, &unlabeled);
    let pseudo = balanced_ce(probs, &pseudo_targets).value;
    let mut d_logits = Array2::zeros(probs.raw_dim());
    if cfg.w_labeled > 0.0 {
        d_logits.scaled_add(cfg.w_labeled, &balanced_ce_grad(probs, &targets));
    }
    if cfg.w_unlabeled > 0.0 && !unlabeled.is_empty() {
        d_logits.scaled_add(cfg.w_unlabeled, &candidate_loss_grad(probs, original.slide_label, &unlabeled));
    }
    if cfg.w_pseudo > 0.0 && refreshed.is_some() {
        d_logits.scaled_add(cfg.w_pseudo, &balanced_ce_grad(probs, &pseudo_targets));
    }
    let total = cfg.w_labeled * labeled + cfg.w_unlabeled * unl + cfg.w_pseudo * pseudo;
    StepLoss { labeled, unlabeled: unl, pseudo, total, d_logits }
}

/// Trains `model` in place on the few-shot slides of `split`. Tile
/// pseudo-labels come from the zero-shot `zero_shot` embeddings; one
/// optimisation step is taken per slide draw per epoch.
pub fn train(
    model: &mut PathPt,
    encoder: &FrozenTextEncoder,
    slides: &[SlideRecord],
    split: &FewShotSplit,
    zero_shot: &ClassEmbeddings,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let draws: Vec<usize> = split.train_indices().collect();
    let mut originals: BTreeMap<usize, PseudoLabelMap> = BTreeMap::new();
    for &i in &draws {
        if !originals.contains_key(&i) {
            originals.insert(i, pseudo_label_slide(&slides[i], zero_shot)?);
        }
    }
    let mut violations: usize = originals.values().map(PseudoLabelMap::violations).sum();
    let mut refreshed: BTreeMap<usize, PseudoLabelMap> = BTreeMap::new();

    let schedule = WarmupSchedule { base_lr: cfg.lr, warmup_steps: cfg.warmup_epochs * draws.len() };
    let mut adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        if cfg.enable_pseudo && epoch >= cfg.pseudo_start_epoch {
            for (&i, map) in &originals {
                let probs = model.forward(&slides[i], encoder)?.probs;
                let fresh = refresh_map(map, &probs);
                violations += fresh.violations();
                refreshed.insert(i, fresh);
            }
        }
        let mut order = draws.clone();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut lr = schedule.lr(step);
        for &i in &order {
            let slide = &slides[i];
            let fwd = model.forward(slide, encoder)?;
            let loss = step_loss(&fwd.probs, &originals[&i], refreshed.get(&i), cfg);
            if !loss.total.is_finite() {
                return Err(Error::NonFinite { epoch, slide: slide.slide_id.clone() });
            }
            let mut grads = model.zeros_like();
            model.backward(encoder, &fwd, &loss.d_logits, &mut grads);
            lr = schedule.lr(step);
            adam.step(model, &grads, lr);
            step += 1;
            for (s, v) in sums.iter_mut().zip([loss.labeled, loss.unlabeled, loss.pseudo, loss.total]) {
                *s += v;
            }
        }
        let n = order.len().max(1) as f64;
        trace.push(EpochTrace {
            epoch,
            l_labeled: sums[0] / n,
            l_unlabeled: sums[1] / n,
            l_pseudo: sums[2] / n,
            total: sums[3] / n,
            lr,
        });
    }
    Ok(TrainOutcome { trace, violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn slides(per_class: &[usize]) -> Vec<SlideRecord> {
        let mut out = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for s in 0..n {
                out.push(SlideRecord {
                    slide_id: format!("c{c}s{s}"),
                    grid_h: 1,
                    grid_w: 1,
                    tiles: vec![],
                    slide_label: c + 1,
                    split: if s % 4 == 3 { Split::Test } else { Split::Train },
                });
            }
        }
        out
    }

    #[test]
    fn sampler_cases() {
        let s = slides(&[20, 6]);
        let split = sample_few_shot(&s, 2, 10, 3).unwrap();
        let mut a = split.train[0].clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 10);
        assert_eq!(split.train[1].len(), 10);
        assert!(split.train[1].iter().all(|&i| s[i].slide_label == 2 && s[i].split == Split::Train));
        assert!(split.test.iter().all(|i| !split.train_indices().any(|j| j == *i)));
        assert_eq!(split, sample_few_shot(&s, 2, 10, 3).unwrap());
        let five = sample_few_shot(&s, 2, 5, 3).unwrap();
        assert_eq!(five.train[0], split.train[0][..5]);
        assert!(sample_few_shot(&slides(&[4, 0]), 2, 1, 0).is_err());
    }

    #[test]
    fn balanced_ce_closed_forms() {
        let p = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(balanced_ce(&p, &[Some(0), Some(1)]).value, 0.0);
        let half = array![[0.5, 0.5], [0.5, 0.5]];
        assert!((balanced_ce(&half, &[Some(0), Some(1)]).value - 2f64.ln()).abs() < 1e-15);
        assert!(balanced_ce(&half, &[None, None]).skipped);
    }

    #[test]
    fn candidate_closed_forms() {
        let p = array![[0.3, 0.2, 0.5]];
        assert!((candidate_loss(&p, 1, &[0]) - 2f64.ln()).abs() < 1e-15);
        let ok = array![[0.6, 0.4, 0.0]];
        assert_eq!(candidate_loss(&ok, 1, &[0]), 0.0);
        assert_eq!(candidate_loss(&p, 1, &[]), 0.0);
        let zero = array![[0.0, 0.0, 1.0]];
        assert!((candidate_loss(&zero, 1, &[0]) + CANDIDATE_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn refresh_uses_restricted_argmax() {
        let map = PseudoLabelMap {
            slide_label: 2,
            labels: vec![PseudoLabel::Unlabeled, PseudoLabel::Unlabeled, PseudoLabel::Normal, PseudoLabel::Unlabeled],
        };
        let probs = array![[0.6, 0.3, 0.1], [0.1, 0.1, 0.8], [0.0, 0.0, 1.0], [0.1, 0.8, 0.1]];
        let r = refresh_map(&map, &probs);
        assert_eq!(
            r.labels,
            vec![PseudoLabel::Normal, PseudoLabel::Subtype(2), PseudoLabel::Normal, PseudoLabel::Normal]
        );
        let full = PseudoLabelMap { slide_label: 1, labels: vec![PseudoLabel::Normal] };
        assert_eq!(refresh_map(&full, &array![[0.0, 1.0]]), full);
    }

    fn softmax(z: &Array2<f64>) -> Array2<f64> {
        crate::nn::softmax_rows(z)
    }

    proptest! {
        #[test]
        fn loss_gradients_match_finite_differences(
            z in proptest::collection::vec(-3.0f64..3.0, 12),
            labels in proptest::collection::vec(proptest::option::of(0usize..3), 4),
            slide_label in 1usize..3,
        ) {
            let z = Array2::from_shape_vec((4, 3), z).unwrap();
            let tiles: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| l.is_none()).map(|(i, _)| i).collect();
            let gb = balanced_ce_grad(&softmax(&z), &labels);
            let gc = candidate_loss_grad(&softmax(&z), slide_label, &tiles);
            let eps = 1e-6;
            for m in 0..4 {
                for j in 0..3 {
                    let mut zp = z.clone();
                    zp[[m, j]] += eps;
                    let mut zm = z.clone();
                    zm[[m, j]] -= eps;
                    let fb = (balanced_ce(&softmax(&zp), &labels).value - balanced_ce(&softmax(&zm), &labels).value) / (2.0 * eps);
                    let fc = (candidate_loss(&softmax(&zp), slide_label, &tiles) - candidate_loss(&softmax(&zm), slide_label, &tiles)) / (2.0 * eps);
                    prop_assert!((fb - gb[[m, j]]).abs() < 1e-6);
                    prop_assert!((fc - gc[[m, j]]).abs() < 1e-6);
                }
            }
        }
    }
}
