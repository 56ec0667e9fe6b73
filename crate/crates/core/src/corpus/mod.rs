//! Slides, label spaces and the deterministic synthetic frozen-encoder world.

mod store;

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Result};
use crate::text::{FrozenTextEncoder, TextEncoderConfig};
use crate::zeroshot::{default_templates, PromptTemplate};

pub use store::{read_feature_store, write_feature_store, FeatureStore, Manifest, SlideEntry, STORE_SCHEMA_VERSION};

pub const NORMAL_CLASS: &str = "normal tissue";

/// Subtype names used when a config does not supply its own.
const DEFAULT_SUBTYPES: &[&str] = &[
    "glioblastoma",
    "oligodendroglioma",
    "ependymoma",
    "medulloblastoma",
    "meningioma",
    "schwannoma",
    "chordoma",
    "craniopharyngioma",
];

/// Ordered class names; index 0 is always the normal-tissue class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.first().map(String::as_str) != Some(NORMAL_CLASS) {
            return config(format!("class 0 must be `{NORMAL_CLASS}`"));
        }
        if names.len() < 2 {
            return config("label space needs at least one tumor subtype");
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return config("class names must be non-empty");
            }
            if !seen.insert(n.as_str()) {
                return config(format!("duplicate class name `{n}`"));
            }
        }
        Ok(Self { names })
    }

    /// Normal tissue followed by the given subtypes.
    pub fn with_subtypes<S: Into<String>>(subtypes: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut names = vec![NORMAL_CLASS.to_string()];
        names.extend(subtypes.into_iter().map(Into::into));
        Self::new(names)
    }

    /// Number of classes including normal tissue (C + 1).
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of tumor subtypes (C).
    pub fn num_subtypes(&self) -> usize {
        self.names.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn subtypes(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.num_subtypes()
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = crate::Error;
    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(l: LabelSpace) -> Self {
        l.names
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub row: u32,
    pub col: u32,
    pub feature: Vec<f32>,
    /// Ground-truth class from a tissue mask, when one exists.
    pub gt_label: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub grid_h: u32,
    pub grid_w: u32,
    pub tiles: Vec<Tile>,
    /// Subtype in `1..=C`; slides are never labelled normal.
    pub slide_label: usize,
    pub split: Split,
}

impl SlideRecord {
    pub fn num_tiles(&self) -> usize {
        self.tiles.len()
    }

    pub fn dim(&self) -> usize {
        self.tiles.first().map_or(0, |t| t.feature.len())
    }

    /// Tile features as an `M × d` matrix in tile order.
    pub fn features(&self) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((self.tiles.len(), d));
        for (mut row, tile) in out.rows_mut().into_iter().zip(&self.tiles) {
            for (x, &f) in row.iter_mut().zip(&tile.feature) {
                *x = f64::from(f);
            }
        }
        out
    }

    /// Tile indices sorted row-major by grid position.
    pub fn raster_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.tiles.len()).collect();
        idx.sort_by_key(|&i| (self.tiles[i].row, self.tiles[i].col));
        idx
    }

    /// Checks every structural invariant of a slide.
    pub fn validate(&self, dim: usize, num_classes: usize) -> Result<()> {
        let fail = |reason: String| Err(crate::Error::Load { slide: self.slide_id.clone(), reason });
        if self.grid_h == 0 || self.grid_w == 0 {
            return fail("grid dimensions must be positive".into());
        }
        if self.tiles.is_empty() {
            return fail("slide has no tiles".into());
        }
        if self.slide_label == 0 || self.slide_label >= num_classes {
            return fail(format!("slide label {} outside 1..{}", self.slide_label, num_classes - 1));
        }
        let mut seen = HashSet::with_capacity(self.tiles.len());
        for t in &self.tiles {
            if t.row >= self.grid_h || t.col >= self.grid_w {
                return fail(format!("tile ({}, {}) outside {}x{} grid", t.row, t.col, self.grid_h, self.grid_w));
            }
            if !seen.insert((t.row, t.col)) {
                return fail(format!("duplicate tile coordinate ({}, {})", t.row, t.col));
            }
            if t.feature.len() != dim {
                return fail(format!("feature dimension {} does not match {dim}", t.feature.len()));
            }
            if t.feature.iter().any(|x| !x.is_finite()) {
                return fail(format!("non-finite feature at ({}, {})", t.row, t.col));
            }
            if t.feature.iter().all(|&x| x == 0.0) {
                return fail(format!("zero-norm feature at ({}, {})", t.row, t.col));
            }
            if let Some(g) = t.gt_label {
                if g >= num_classes {
                    return fail(format!("gt label {g} outside label space"));
                }
            }
        }
        Ok(())
    }
}

/// Quality presets standing in for stronger or weaker base models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Good,
    Medium,
    Poor,
}

impl Quality {
    pub fn name(self) -> &'static str {
        match self {
            Quality::Good => "good",
            Quality::Medium => "medium",
            Quality::Poor => "poor",
        }
    }

    /// `(sigma_align, sigma_tile)` for the preset.
    pub fn sigmas(self) -> (f64, f64) {
        match self {
            Quality::Good => (0.15, 0.15),
            Quality::Medium => (0.4, 0.2),
            Quality::Poor => (0.6, 0.25),
        }
    }
}

impl std::str::FromStr for Quality {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "good" => Ok(Quality::Good),
            "medium" => Ok(Quality::Medium),
            "poor" => Ok(Quality::Poor),
            other => config(format!("unknown quality preset `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub dim: usize,
    pub num_subtypes: usize,
    /// Overrides the built-in subtype names; length must equal `num_subtypes`.
    pub subtype_names: Option<Vec<String>>,
    pub slides_per_class: usize,
    pub grid_h: u32,
    pub grid_w: u32,
    /// Scale of the Gaussian offset between a class's text embedding and its
    /// visual prototype.
    pub sigma_align: f64,
    /// Scale of the per-tile Gaussian scatter around the prototype.
    pub sigma_tile: f64,
    /// Target share of tissue tiles covered by the tumor region.
    pub tumor_fraction: f64,
    /// Range of the tissue ellipse radius relative to the grid half-size.
    pub tissue_scale: (f64, f64),
    /// Train slides per class when more than this many exist; otherwise ~1:1.
    pub train_per_class: usize,
    pub text_encoder: TextEncoderConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let (sigma_align, sigma_tile) = Quality::Medium.sigmas();
        Self {
            seed: 7,
            dim: 64,
            num_subtypes: 4,
            subtype_names: None,
            slides_per_class: 40,
            grid_h: 16,
            grid_w: 16,
            sigma_align,
            sigma_tile,
            tumor_fraction: 0.5,
            tissue_scale: (0.55, 0.75),
            train_per_class: 15,
            text_encoder: TextEncoderConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn with_quality(mut self, q: Quality) -> Self {
        (self.sigma_align, self.sigma_tile) = q.sigmas();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_subtypes == 0 || self.slides_per_class == 0 || self.grid_h == 0 || self.grid_w == 0
        {
            return config("corpus dimensions must be positive");
        }
        for (name, v) in [("sigma_align", self.sigma_align), ("sigma_tile", self.sigma_tile)] {
            if !v.is_finite() || v < 0.0 {
                return config(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.tumor_fraction > 0.0 && self.tumor_fraction <= 1.0) {
            return config("tumor_fraction must lie in (0, 1]");
        }
        let (lo, hi) = self.tissue_scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return config("tissue_scale must satisfy 0 < lo <= hi");
        }
        if let Some(names) = &self.subtype_names {
            if names.len() != self.num_subtypes {
                return config("subtype_names length must equal num_subtypes");
            }
        }
        Ok(())
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        match &self.subtype_names {
            Some(names) => LabelSpace::with_subtypes(names.iter().cloned()),
            None => LabelSpace::with_subtypes((1..=self.num_subtypes).map(|i| {
                DEFAULT_SUBTYPES.get(i - 1).map_or_else(|| format!("subtype {i}"), |s| s.to_string())
            })),
        }
    }

    fn encoder_config(&self) -> TextEncoderConfig {
        TextEncoderConfig { seed: self.seed, out_dim: self.dim, ..self.text_encoder.clone() }
    }
}

/// Builds the frozen text encoder whose vocabulary covers the template
/// registry and the class names.
pub fn build_text_encoder(
    cfg: TextEncoderConfig,
    templates: &[PromptTemplate],
    labels: &LabelSpace,
) -> Result<FrozenTextEncoder> {
    let filler: Vec<String> = templates.iter().map(|t| t.filler_text()).collect();
    FrozenTextEncoder::new(cfg, &filler, labels.names())
}

/// A generated world: labels, the frozen text encoder, the slides, and the
/// visual class prototypes the slides were sampled around.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub labels: LabelSpace,
    pub encoder: FrozenTextEncoder,
    pub slides: Vec<SlideRecord>,
    pub prototypes: Array2<f64>,
}

impl Corpus {
    pub fn to_store(&self) -> FeatureStore {
        FeatureStore {
            labels: self.labels.clone(),
            dim: self.prototypes.ncols(),
            text_encoder: Some(self.encoder.config().clone()),
            slides: self.slides.clone(),
        }
    }
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(d, || StandardNormal.sample(rng))
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let labels = cfg.label_space()?;
    let templates = default_templates();
    let encoder = build_text_encoder(cfg.encoder_config(), &templates, &labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;

    let mut prototypes = Array2::zeros((labels.len(), d));
    for (c, name) in labels.names().iter().enumerate() {
        let text = encoder.encode_text(&templates[0].instantiate(name))?;
        let offset = gaussian_vec(&mut rng, d) * cfg.sigma_align;
        prototypes.row_mut(c).assign(&unit(text + offset));
    }

    let mut slides = Vec::with_capacity(cfg.num_subtypes * cfg.slides_per_class);
    for label in labels.subtypes() {
        let n_train = train_count(cfg.slides_per_class, cfg.train_per_class);
        let mut order: Vec<usize> = (0..cfg.slides_per_class).collect();
        order.shuffle(&mut rng);
        let train: HashSet<usize> = order[..n_train].iter().copied().collect();
        for s in 0..cfg.slides_per_class {
            let split = if train.contains(&s) { Split::Train } else { Split::Test };
            slides.push(generate_slide(cfg, &prototypes, label, s, split, &mut rng));
        }
    }
    Ok(Corpus { labels, encoder, slides, prototypes })
}

/// Train slides for a class with `n` slides: `per_class` when more exist,
/// otherwise roughly half.
pub fn train_count(n: usize, per_class: usize) -> usize {
    if n > per_class {
        per_class
    } else {
        n.div_ceil(2)
    }
}

fn generate_slide(
    cfg: &CorpusConfig,
    prototypes: &Array2<f64>,
    label: usize,
    index: usize,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> SlideRecord {
    let (h, w) = (cfg.grid_h as usize, cfg.grid_w as usize);
    let tissue = tissue_cells(h, w, cfg.tissue_scale, rng);
    let target = ((cfg.tumor_fraction * tissue.len() as f64).round() as usize).clamp(1, tissue.len());
    let target = if cfg.tumor_fraction < 1.0 && tissue.len() > 1 { target.min(tissue.len() - 1) } else { target };
    let tumor = grow_blob(h, w, &tissue, target, rng);

    let d = cfg.dim;
    let tiles = tissue
        .iter()
        .map(|&(r, c)| {
            let class = if tumor.contains(&(r, c)) { label } else { 0 };
            let noise = gaussian_vec(rng, d) * cfg.sigma_tile;
            let f = unit(&prototypes.row(class) + &noise);
            Tile {
                row: r as u32,
                col: c as u32,
                feature: f.iter().map(|&x| x as f32).collect(),
                gt_label: Some(class),
            }
        })
        .collect();
    SlideRecord {
        slide_id: format!("c{label}_{index:03}"),
        grid_h: cfg.grid_h,
        grid_w: cfg.grid_w,
        tiles,
        slide_label: label,
        split,
    }
}

/// Tissue cells inside a randomly scaled ellipse, in raster order. Always
/// contains the centre cell.
fn tissue_cells(h: usize, w: usize, scale: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let s = if scale.0 < scale.1 { rng.gen_range(scale.0..=scale.1) } else { scale.0 };
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (ry, rx) = (h as f64 / 2.0 * s, w as f64 / 2.0 * s);
    let centre = (h / 2, w / 2);
    let mut cells = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let dy = (r as f64 - cy) / ry;
            let dx = (c as f64 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 || (r, c) == centre {
                cells.push((r, c));
            }
        }
    }
    cells
}

/// Grows a 4-connected region of `target` cells inside `tissue` by a seeded
/// random walk, falling back to frontier growth if the walk stalls.
fn grow_blob(
    h: usize,
    w: usize,
    tissue: &[(usize, usize)],
    target: usize,
    rng: &mut ChaCha8Rng,
) -> HashSet<(usize, usize)> {
    let allowed: HashSet<(usize, usize)> = tissue.iter().copied().collect();
    let neighbours = |(r, c): (usize, usize)| {
        let mut out = Vec::with_capacity(4);
        if r > 0 {
            out.push((r - 1, c));
        }
        if r + 1 < h {
            out.push((r + 1, c));
        }
        if c > 0 {
            out.push((r, c - 1));
        }
        if c + 1 < w {
            out.push((r, c + 1));
        }
        out.retain(|p| allowed.contains(p));
        out
    };
    let mut blob = HashSet::with_capacity(target);
    let mut pos = tissue[rng.gen_range(0..tissue.len())];
    blob.insert(pos);
    let mut steps = 0;
    while blob.len() < target && steps < 50 * tissue.len() {
        let next = neighbours(pos);
        if next.is_empty() {
            break;
        }
        pos = next[rng.gen_range(0..next.len())];
        blob.insert(pos);
        steps += 1;
    }
    while blob.len() < target {
        let mut frontier: Vec<(usize, usize)> = tissue
            .iter()
            .copied()
            .filter(|p| !blob.contains(p) && neighbours(*p).iter().any(|q| blob.contains(q)))
            .collect();
        if frontier.is_empty() {
            break;
        }
        frontier.sort_unstable();
        let pick = frontier[rng.gen_range(0..frontier.len())];
        blob.insert(pick);
    }
    blob
}

/// Index of the prototype row with the highest cosine similarity.
pub fn nearest_prototype(prototypes: &Array2<f64>, feature: &[f32]) -> usize {
    let v: Array1<f64> = feature.iter().map(|&x| f64::from(x)).collect();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (c, p) in prototypes.rows().into_iter().enumerate() {
        let s = crate::nn::cosine(v.view(), p);
        if s > best_score {
            best = c;
            best_score = s;
        }
    }
    best
}

/// Assigns train/test splits per class with the same rule the generator uses.
pub fn assign_splits(slides: &mut [SlideRecord], per_class: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = slides.iter().map(|s| s.slide_label).collect();
    labels.sort_unstable();
    labels.dedup();
    for label in labels {
        let mut members: Vec<usize> = (0..slides.len()).filter(|&i| slides[i].slide_label == label).collect();
        members.shuffle(&mut rng);
        let n_train = train_count(members.len(), per_class);
        for (rank, &i) in members.iter().enumerate() {
            slides[i].split = if rank < n_train { Split::Train } else { Split::Test };
        }
    }
    if slides.is_empty() {
        return invalid("no slides to split");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CorpusConfig {
        CorpusConfig { seed, slides_per_class: 6, grid_h: 8, grid_w: 8, ..Default::default() }
    }

    #[test]
    fn label_space_rejects_bad_inputs() {
        assert!(LabelSpace::new(vec!["tumor".into(), "a".into()]).is_err());
        assert!(LabelSpace::new(vec![NORMAL_CLASS.into()]).is_err());
        assert!(LabelSpace::with_subtypes(["a", "a"]).is_err());
        assert!(LabelSpace::with_subtypes([""]).is_err());
        let l = LabelSpace::with_subtypes(["a", "b"]).unwrap();
        assert_eq!(l.len(), 3);
        assert_eq!(l.num_subtypes(), 2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate_corpus(&CorpusConfig { dim: 0, ..small(1) }).is_err());
        assert!(generate_corpus(&CorpusConfig { sigma_tile: f64::NAN, ..small(1) }).is_err());
        assert!(generate_corpus(&CorpusConfig { tumor_fraction: 0.0, ..small(1) }).is_err());
    }

    #[test]
    fn noise_free_tiles_equal_their_prototype() {
        let cfg = CorpusConfig { sigma_align: 0.0, sigma_tile: 0.0, ..small(3) };
        let corpus = generate_corpus(&cfg).unwrap();
        for s in &corpus.slides {
            for t in &s.tiles {
                let c = t.gt_label.unwrap();
                let proto: Vec<f32> = corpus.prototypes.row(c).iter().map(|&x| x as f32).collect();
                assert_eq!(t.feature, proto);
                assert_eq!(nearest_prototype(&corpus.prototypes, &t.feature), c);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small(11)).unwrap();
        let b = generate_corpus(&small(11)).unwrap();
        assert_eq!(a.slides, b.slides);
        assert_eq!(a.prototypes, b.prototypes);
        let c = generate_corpus(&small(12)).unwrap();
        assert_ne!(a.slides, c.slides);
    }

    #[test]
    fn reference_sized_corpus_has_both_tile_populations() {
        let cfg = CorpusConfig { slides_per_class: 40, ..Default::default() };
        let corpus = generate_corpus(&cfg).unwrap();
        assert_eq!(corpus.slides.len(), 160);
        for s in &corpus.slides {
            s.validate(64, 5).unwrap();
            let tumor = s.tiles.iter().filter(|t| t.gt_label == Some(s.slide_label)).count();
            assert!(tumor >= 1 && tumor < s.num_tiles(), "{}", s.slide_id);
        }
        for label in 1..=4 {
            let train = corpus.slides.iter().filter(|s| s.slide_label == label && s.split == Split::Train).count();
            assert_eq!(train, 15);
        }
    }

    #[test]
    fn tumor_region_is_four_connected() {
        let corpus = generate_corpus(&small(5)).unwrap();
        for s in &corpus.slides {
            let cells: HashSet<(u32, u32)> =
                s.tiles.iter().filter(|t| t.gt_label == Some(s.slide_label)).map(|t| (t.row, t.col)).collect();
            let start = *cells.iter().next().unwrap();
            let mut seen = HashSet::from([start]);
            let mut stack = vec![start];
            while let Some((r, c)) = stack.pop() {
                for n in [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)] {
                    if cells.contains(&n) && seen.insert(n) {
                        stack.push(n);
                    }
                }
            }
            assert_eq!(seen.len(), cells.len(), "{}", s.slide_id);
        }
    }

    #[test]
    fn validate_catches_structural_errors() {
        let corpus = generate_corpus(&small(2)).unwrap();
        let mut s = corpus.slides[0].clone();
        s.tiles[1].row = s.tiles[0].row;
        s.tiles[1].col = s.tiles[0].col;
        assert!(matches!(s.validate(64, 5), Err(crate::Error::Load { .. })));
        let mut s = corpus.slides[0].clone();
        s.tiles[0].row = 99;
        assert!(s.validate(64, 5).is_err());
        let mut s = corpus.slides[0].clone();
        s.slide_label = 0;
        assert!(s.validate(64, 5).is_err());
    }

    #[test]
    fn nearest_prototype_accuracy_falls_with_tile_noise() {
        let median_acc = |sigma: f64| {
            let mut accs: Vec<f64> = (0..5)
                .map(|seed| {
                    let cfg = CorpusConfig { sigma_tile: sigma, ..small(100 + seed) };
                    let corpus = generate_corpus(&cfg).unwrap();
                    let (mut hit, mut n) = (0usize, 0usize);
                    for s in &corpus.slides {
                        for t in &s.tiles {
                            n += 1;
                            hit += usize::from(nearest_prototype(&corpus.prototypes, &t.feature) == t.gt_label.unwrap());
                        }
                    }
                    hit as f64 / n as f64
                })
                .collect();
            accs.sort_by(f64::total_cmp);
            accs[accs.len() / 2]
        };
        let a = median_acc(0.0);
        let b = median_acc(0.3);
        let c = median_acc(1.0);
        assert_eq!(a, 1.0);
        assert!(a >= b && b >= c, "{a} {b} {c}");
    }

    #[test]
    fn assign_splits_follows_the_rule() {
        let mut corpus = generate_corpus(&small(4)).unwrap();
        assign_splits(&mut corpus.slides, 15, 9).unwrap();
        for label in 1..=4 {
            let train = corpus.slides.iter().filter(|s| s.slide_label == label && s.split == Split::Train).count();
            assert_eq!(train, 3);
        }
    }
}
