//! Zero-shot tile readout, manual prompt selection, pseudo-labelling and
//! slide-level aggregation.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSpace, SlideRecord};
use crate::error::{config, invalid, Result};
use crate::metrics::balanced_accuracy;
use crate::nn;
use crate::text::FrozenTextEncoder;

pub const PLACEHOLDER: &str = "{category}";

/// Temperature used to turn zero-shot cosines into probabilities.
pub const DEFAULT_TAU: f64 = 0.07;

const DEFAULT_TEMPLATES: &str = include_str!("../assets/templates.txt");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.matches(PLACEHOLDER).count() != 1 {
            return config(format!("template `{text}` must contain {PLACEHOLDER} exactly once"));
        }
        Ok(Self { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn instantiate(&self, class_name: &str) -> String {
        self.text.replace(PLACEHOLDER, class_name)
    }

    /// Template text with the placeholder removed.
    pub fn filler_text(&self) -> String {
        self.text.replace(PLACEHOLDER, " ")
    }
}

/// Parses a registry file: one template per line, blank lines and `#`
/// comments skipped.
pub fn parse_templates(text: &str) -> Result<Vec<PromptTemplate>> {
    let templates = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(PromptTemplate::new)
        .collect::<Result<Vec<_>>>()?;
    if templates.is_empty() {
        return config("template registry is empty");
    }
    Ok(templates)
}

/// The built-in registry. The first entry is the canonical template.
pub fn default_templates() -> Vec<PromptTemplate> {
    parse_templates(DEFAULT_TEMPLATES).expect("built-in template registry is valid")
}

/// One instantiated prompt per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptGroup {
    /// Template index chosen for each class.
    pub templates: Vec<usize>,
    pub prompts: Vec<String>,
}

pub fn build_prompt_groups(
    templates: &[PromptTemplate],
    labels: &LabelSpace,
    n_groups: usize,
    seed: u64,
) -> Result<Vec<PromptGroup>> {
    if templates.is_empty() {
        return config("at least one prompt template is required");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_groups)
        .map(|_| {
            let idx: Vec<usize> = (0..labels.len()).map(|_| rng.gen_range(0..templates.len())).collect();
            let prompts = idx.iter().zip(labels.names()).map(|(&t, name)| templates[t].instantiate(name)).collect();
            PromptGroup { templates: idx, prompts }
        })
        .collect())
}

/// One unit-norm embedding row per class, in label-space order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings(Array2<f64>);

impl ClassEmbeddings {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() < 2 || matrix.ncols() == 0 {
            return invalid("class embeddings need at least two non-empty rows");
        }
        for (i, row) in matrix.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return invalid(format!("class embedding row {i} has norm {n}, expected 1"));
            }
        }
        Ok(Self(matrix))
    }

    /// Normalises every row first.
    pub fn from_unnormalized(matrix: Array2<f64>) -> Result<Self> {
        if matrix.rows().into_iter().any(|r| !(r.dot(&r) > 0.0)) {
            return invalid("class embedding row has zero norm");
        }
        Self::new(nn::normalize_rows(matrix.view()).1)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn encode_prompts(encoder: &FrozenTextEncoder, prompts: &[String]) -> Result<Self> {
        let mut m = Array2::zeros((prompts.len(), encoder.out_dim()));
        for (mut row, p) in m.rows_mut().into_iter().zip(prompts) {
            row.assign(&encoder.encode_text(p)?);
        }
        Self::new(m)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn classify_tile(feature: ArrayView1<'_, f64>, embeddings: &ClassEmbeddings) -> Result<usize> {
    let norm = feature.dot(&feature).sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return invalid("tile feature has zero or non-finite norm");
    }
    if feature.len() != embeddings.dim() {
        return invalid("tile feature dimension does not match class embeddings");
    }
    let cos = embeddings.matrix().dot(&feature) / norm;
    Ok(argmax(cos.view()))
}

/// Per-tile class probabilities and argmax labels for one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct TilePredictions {
    pub labels: Vec<usize>,
    pub probs: Array2<f64>,
}

impl TilePredictions {
    pub fn from_probs(probs: Array2<f64>) -> Self {
        let labels = probs.rows().into_iter().map(argmax).collect();
        Self { labels, probs }
    }
}

/// Cosine similarities of every row of `features` to every class.
pub fn cosine_matrix(features: ArrayView2<'_, f64>, embeddings: &ClassEmbeddings) -> Result<Array2<f64>> {
    if features.ncols() != embeddings.dim() {
        return invalid("feature dimension does not match class embeddings");
    }
    let (norms, unit) = nn::normalize_rows(features);
    if norms.iter().any(|n| !(*n > 0.0 && n.is_finite())) {
        return invalid("tile feature has zero or non-finite norm");
    }
    Ok(unit.dot(&embeddings.matrix().t()))
}

/// Zero-shot readout for every tile of a slide. Labels are the cosine
/// argmax; probabilities are the temperature softmax of the cosines.
pub fn zero_shot_predictions(slide: &SlideRecord, embeddings: &ClassEmbeddings, tau: f64) -> Result<TilePredictions> {
    let cos = cosine_matrix(slide.features().view(), embeddings)?;
    let labels = cos.rows().into_iter().map(argmax).collect();
    let probs = nn::softmax_rows(&(cos / tau));
    Ok(TilePredictions { labels, probs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Majority,
    TopK(usize),
    TumorRatio,
}

fn argmax_mean_tumor_prob(mean: &Array1<f64>) -> usize {
    1 + argmax(mean.slice(ndarray::s![1..]))
}

/// Slide-level subtype from tile predictions. Always returns a class in
/// `1..=C`.
pub fn aggregate_wsi(preds: &TilePredictions, method: Aggregation) -> Result<usize> {
    let m = preds.labels.len();
    if m == 0 || preds.probs.nrows() != m {
        return invalid("aggregation needs at least one tile with probabilities");
    }
    let n_classes = preds.probs.ncols();
    if n_classes < 2 {
        return invalid("aggregation needs at least one tumor class");
    }
    let mean = preds.probs.mean_axis(Axis(0)).expect("non-empty");
    let mut counts = vec![0usize; n_classes];
    for &l in &preds.labels {
        if l >= n_classes {
            return invalid(format!("tile label {l} outside {n_classes} classes"));
        }
        counts[l] += 1;
    }
    let best_count = counts[1..].iter().copied().max().unwrap_or(0);
    if best_count == 0 && !matches!(method, Aggregation::TopK(_)) {
        return Ok(argmax_mean_tumor_prob(&mean));
    }
    match method {
        Aggregation::Majority => Ok((1..n_classes).find(|&c| counts[c] == best_count).expect("max exists")),
        Aggregation::TumorRatio => {
            // equal counts mean equal ratios; break by mean probability, then index
            let mut best = 0;
            for c in 1..n_classes {
                if counts[c] == best_count && (best == 0 || mean[c] > mean[best]) {
                    best = c;
                }
            }
            Ok(best)
        }
        Aggregation::TopK(k) => {
            if k == 0 {
                return invalid("top-k aggregation needs k >= 1");
            }
            let k = k.min(m);
            let mut scores = Array1::zeros(n_classes - 1);
            for c in 1..n_classes {
                let mut col: Vec<f64> = preds.probs.column(c).to_vec();
                col.sort_by(|a, b| b.total_cmp(a));
                scores[c - 1] = col[..k].iter().sum::<f64>() / k as f64;
            }
            Ok(1 + argmax(scores.view()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group: usize,
    pub score: f64,
}

/// Result of ranking prompt groups and pooling the best ones.
#[derive(Clone, Debug)]
pub struct PromptSelection {
    pub embeddings: ClassEmbeddings,
    /// All groups, best first.
    pub ranking: Vec<GroupScore>,
    /// Indices of the pooled groups, best first.
    pub selected: Vec<usize>,
}

impl PromptSelection {
    pub fn best_group(&self) -> usize {
        self.ranking[0].group
    }
}

/// Scores every group by slide-level balanced accuracy on `train` (tile
/// cosine argmax, tumor-ratio readout), keeps the `top_m` best and
/// mean-pools their per-class embeddings.
pub fn rank_and_pool(
    groups: &[PromptGroup],
    train: &[&SlideRecord],
    encoder: &FrozenTextEncoder,
    top_m: usize,
) -> Result<PromptSelection> {
    if groups.is_empty() || top_m == 0 || top_m > groups.len() {
        return config(format!("top_m = {top_m} must lie in 1..={}", groups.len()));
    }
    if train.is_empty() {
        return invalid("prompt ranking needs at least one training slide");
    }
    let mut cache: HashMap<&str, Array1<f64>> = HashMap::new();
    let mut group_embeddings = Vec::with_capacity(groups.len());
    for g in groups {
        let mut m = Array2::zeros((g.prompts.len(), encoder.out_dim()));
        for (mut row, p) in m.rows_mut().into_iter().zip(&g.prompts) {
            if !cache.contains_key(p.as_str()) {
                cache.insert(p.as_str(), encoder.encode_text(p)?);
            }
            row.assign(&cache[p.as_str()]);
        }
        group_embeddings.push(ClassEmbeddings::new(m)?);
    }

    let n_subtypes = group_embeddings[0].num_classes() - 1;
    let features: Vec<Array2<f64>> = train.iter().map(|s| nn::normalize_rows(s.features().view()).1).collect();
    let truth: Vec<usize> = train.iter().map(|s| s.slide_label).collect();
    let mut ranking = Vec::with_capacity(groups.len());
    for (gi, emb) in group_embeddings.iter().enumerate() {
        let mut preds = Vec::with_capacity(train.len());
        for f in &features {
            let cos = f.dot(&emb.matrix().t());
            let tiles = TilePredictions {
                labels: cos.rows().into_iter().map(argmax).collect(),
                probs: nn::softmax_rows(&(cos / DEFAULT_TAU)),
            };
            preds.push(aggregate_wsi(&tiles, Aggregation::TumorRatio)?);
        }
        ranking.push(GroupScore { group: gi, score: balanced_accuracy(&preds, &truth, n_subtypes)? });
    }
    ranking.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.group.cmp(&b.group)));
    let selected: Vec<usize> = ranking[..top_m].iter().map(|g| g.group).collect();
    let mut pooled = Array2::zeros(group_embeddings[0].matrix().raw_dim());
    for &g in &selected {
        pooled += group_embeddings[g].matrix();
    }
    pooled /= top_m as f64;
    Ok(PromptSelection { embeddings: ClassEmbeddings::from_unnormalized(pooled)?, ranking, selected })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PseudoLabel {
    Unlabeled,
    Normal,
    Subtype(usize),
}

impl PseudoLabel {
    pub fn class(self) -> Option<usize> {
        match self {
            PseudoLabel::Unlabeled => None,
            PseudoLabel::Normal => Some(0),
            PseudoLabel::Subtype(i) => Some(i),
        }
    }
}

/// Per-tile supervision state for one slide, in tile order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelMap {
    pub slide_label: usize,
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelMap {
    /// Keeps a predicted class only when it is normal or the slide's subtype.
    pub fn from_predictions(slide_label: usize, predicted: &[usize]) -> Self {
        let labels = predicted
            .iter()
            .map(|&p| match p {
                0 => PseudoLabel::Normal,
                p if p == slide_label => PseudoLabel::Subtype(p),
                _ => PseudoLabel::Unlabeled,
            })
            .collect();
        Self { slide_label, labels }
    }

    /// Supervision from a ground-truth tissue mask.
    pub fn from_ground_truth(slide: &SlideRecord) -> Self {
        let gt: Vec<usize> = slide.tiles.iter().map(|t| t.gt_label.unwrap_or(usize::MAX)).collect();
        Self::from_predictions(slide.slide_label, &gt)
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, l)| **l == PseudoLabel::Unlabeled).map(|(i, _)| i)
    }

    pub fn num_labeled(&self) -> usize {
        self.labels.iter().filter(|l| **l != PseudoLabel::Unlabeled).count()
    }

    /// Entries that name a subtype other than the slide's own.
    pub fn violations(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, PseudoLabel::Subtype(j) if *j != self.slide_label))
            .count()
    }
}

pub fn pseudo_label_slide(slide: &SlideRecord, embeddings: &ClassEmbeddings) -> Result<PseudoLabelMap> {
    if slide.slide_label == 0 || slide.slide_label >= embeddings.num_classes() {
        return invalid(format!("slide `{}` label {} is not a subtype", slide.slide_id, slide.slide_label));
    }
    let cos = cosine_matrix(slide.features().view(), embeddings)?;
    let predicted: Vec<usize> = cos.rows().into_iter().map(argmax).collect();
    Ok(PseudoLabelMap::from_predictions(slide.slide_label, &predicted))
}
