//! Experiment orchestration: the method × k-shot × repeat matrix, per-run
//! reports, aggregate tables and paired tests.

pub mod plots;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    assign_splits, build_text_encoder, generate_corpus, read_feature_store, CorpusConfig, LabelSpace, Quality,
    SlideRecord, Split,
};
use crate::error::{config, Error, Result};
use crate::metrics::{
    confusion_matrix, dice, paired_ttest, per_class_recall, subtype_mask, tile_auc, EvalReport, GridMask, Quartiles,
};
use crate::mil::{mil_train, MilModel, MilVariant};
use crate::model::{ModelConfig, PathPt, PromptBank};
use crate::text::{FrozenTextEncoder, TextEncoderConfig};
use crate::training::{sample_few_shot, trace_csv, train, EpochTrace, FewShotSplit, TrainConfig};
use crate::zeroshot::{
    aggregate_wsi, build_prompt_groups, default_templates, parse_templates, rank_and_pool, zero_shot_predictions,
    Aggregation, GroupScore, PromptGroup, PromptSelection, PromptTemplate, TilePredictions,
};

/// Environment variable holding the worker thread count.
pub const WORKERS_ENV: &str = "PATHPT_WORKERS";

/// Salt separating the few-shot sampling seed from the training seed.
const SAMPLE_SALT: u64 = 0x5a4d_1e5e_ed00_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Zeroshot,
    Pathpt,
    PromptOnly,
    LinearProbe,
    Abmil,
    MeanPool,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Zeroshot, Method::Pathpt, Method::PromptOnly, Method::LinearProbe, Method::Abmil, Method::MeanPool];

    pub fn name(self) -> &'static str {
        match self {
            Method::Zeroshot => "zeroshot",
            Method::Pathpt => "pathpt",
            Method::PromptOnly => "prompt_only",
            Method::LinearProbe => "linear_probe",
            Method::Abmil => "abmil",
            Method::MeanPool => "mean_pool",
        }
    }

    pub fn variant(self) -> &'static str {
        match self {
            Method::Zeroshot => "pooled manual prompts, tumor-ratio readout",
            Method::Pathpt => "spatial module + learnable prompts",
            Method::PromptOnly => "learnable prompts on raw features",
            Method::LinearProbe => "spatial module + linear probe",
            Method::Abmil => "gated attention MIL, hidden 128, default hyperparameters",
            Method::MeanPool => "mean-pool linear MIL, default hyperparameters",
        }
    }

    /// Ablation flags for the tile-model methods.
    fn model_flags(self) -> Option<(bool, bool)> {
        match self {
            Method::Pathpt => Some((true, true)),
            Method::PromptOnly => Some((false, true)),
            Method::LinearProbe => Some((true, false)),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Generate a synthetic corpus; `quality` overrides the two sigmas.
    Synthetic {
        #[serde(default)]
        quality: Option<Quality>,
        #[serde(default)]
        config: CorpusConfig,
    },
    /// Read a feature store directory (never modified).
    Store {
        path: PathBuf,
        #[serde(default)]
        text_encoder: Option<TextEncoderConfig>,
    },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic { quality: Some(Quality::Medium), config: CorpusConfig::default() }
    }
}

/// Partial per-method settings layered over the global ones.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodOverride {
    pub train: toml::Table,
    pub model: toml::Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub methods: Vec<Method>,
    pub k_shots: Vec<usize>,
    pub n_repeats: usize,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    pub n_groups: usize,
    pub top_m: usize,
    /// Template registry file; the built-in registry when absent.
    pub templates: Option<PathBuf>,
    /// Rebuild the train/test split with this seed instead of using the
    /// split stored with the slides.
    pub resplit_seed: Option<u64>,
    pub train_per_class: usize,
    pub save_checkpoints: bool,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub overrides: BTreeMap<Method, MethodOverride>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSource::default(),
            methods: Method::ALL.to_vec(),
            k_shots: vec![1, 5, 10],
            n_repeats: 10,
            base_seed: 7,
            output_dir: PathBuf::from("pathpt-out"),
            n_groups: 200,
            top_m: 100,
            templates: None,
            resplit_seed: None,
            train_per_class: 15,
            save_checkpoints: false,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            overrides: BTreeMap::new(),
        }
    }
}

fn merge<T: Serialize + for<'de> Deserialize<'de>>(base: &T, layer: &toml::Table) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in layer {
        table.insert(k.clone(), v.clone());
    }
    table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return config("no methods selected");
        }
        if self.k_shots.is_empty() || self.k_shots.contains(&0) {
            return config("k_shots must be a non-empty list of positive values");
        }
        if self.n_repeats == 0 {
            return config("n_repeats must be positive");
        }
        if self.top_m == 0 || self.top_m > self.n_groups {
            return config("top_m must lie in 1..=n_groups");
        }
        for m in &self.methods {
            let (t, mc) = self.settings(*m)?;
            t.validate()?;
            mc.validate()?;
        }
        Ok(())
    }

    /// Train and model settings for `method` after overrides.
    pub fn settings(&self, method: Method) -> Result<(TrainConfig, ModelConfig)> {
        let Some(o) = self.overrides.get(&method) else {
            return Ok((self.train.clone(), self.model.clone()));
        };
        Ok((merge(&self.train, &o.train)?, merge(&self.model, &o.model)?))
    }

    fn quality_name(&self) -> String {
        match &self.corpus {
            CorpusSource::Synthetic { quality: Some(q), .. } => q.name().to_string(),
            CorpusSource::Synthetic { quality: None, .. } => "custom".to_string(),
            CorpusSource::Store { .. } => "store".to_string(),
        }
    }
}

/// Everything shared by the runs of one experiment.
pub struct World {
    pub labels: LabelSpace,
    pub encoder: FrozenTextEncoder,
    pub slides: Vec<SlideRecord>,
    pub templates: Vec<PromptTemplate>,
    pub groups: Vec<PromptGroup>,
    pub dim: usize,
    pub base_quality: String,
}

impl World {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let templates = match &cfg.templates {
            Some(p) => parse_templates(&fs::read_to_string(p)?)?,
            None => default_templates(),
        };
        let (labels, encoder, mut slides, dim) = match &cfg.corpus {
            CorpusSource::Synthetic { quality, config } => {
                let c = match quality {
                    Some(q) => config.clone().with_quality(*q),
                    None => config.clone(),
                };
                let corpus = generate_corpus(&c)?;
                (corpus.labels, corpus.encoder, corpus.slides, c.dim)
            }
            CorpusSource::Store { path, text_encoder } => {
                let store = read_feature_store(path)?;
                let enc_cfg = text_encoder.clone().or(store.text_encoder.clone()).unwrap_or_else(|| {
                    TextEncoderConfig { out_dim: store.dim, ..Default::default() }
                });
                if enc_cfg.out_dim != store.dim {
                    return config("text encoder width does not match the feature store");
                }
                let encoder = build_text_encoder(enc_cfg, &templates, &store.labels)?;
                (store.labels, encoder, store.slides, store.dim)
            }
        };
        if let Some(seed) = cfg.resplit_seed {
            assign_splits(&mut slides, cfg.train_per_class, seed)?;
        }
        for s in &slides {
            s.validate(dim, labels.len())?;
        }
        let groups = build_prompt_groups(&templates, &labels, cfg.n_groups, cfg.base_seed)?;
        Ok(Self { labels, encoder, slides, templates, groups, dim, base_quality: cfg.quality_name() })
    }

    fn train_slides(&self) -> Vec<&SlideRecord> {
        self.slides.iter().filter(|s| s.split == Split::Train).collect()
    }

    fn test_slides(&self) -> Vec<&SlideRecord> {
        self.slides.iter().filter(|s| s.split == Split::Test).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSpec {
    pub method: Method,
    /// 0 for the training-free zero-shot run.
    pub k: usize,
    pub seed: u64,
}

impl RunSpec {
    pub fn stem(&self) -> String {
        format!("{}_k{}_seed{}", self.method, self.k, self.seed)
    }
}

/// The run matrix in output order. Zero-shot has a single run.
pub fn run_specs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for &method in &cfg.methods {
        if method == Method::Zeroshot {
            specs.push(RunSpec { method, k: 0, seed: cfg.base_seed });
            continue;
        }
        for &k in &cfg.k_shots {
            for r in 0..cfg.n_repeats {
                specs.push(RunSpec { method, k, seed: cfg.base_seed + r as u64 });
            }
        }
    }
    specs
}

/// Prompt-ranking record exported for audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptAudit {
    pub ranked_on_slides: usize,
    pub selected_groups: Vec<usize>,
    pub top_scores: Vec<GroupScore>,
    pub best_group_prompts: Vec<String>,
    pub pooled_embeddings: Vec<Vec<f64>>,
}

impl PromptAudit {
    fn new(sel: &PromptSelection, groups: &[PromptGroup], n: usize) -> Self {
        Self {
            ranked_on_slides: n,
            selected_groups: sel.selected.clone(),
            top_scores: sel.ranking[..sel.selected.len()].to_vec(),
            best_group_prompts: groups[sel.best_group()].prompts.clone(),
            pooled_embeddings: sel.embeddings.matrix().rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

pub struct RunArtifacts {
    pub report: EvalReport,
    pub trace: Option<Vec<EpochTrace>>,
    pub audit: Option<PromptAudit>,
    pub model: Option<PathPt>,
}

/// Slide calls and tile outputs on the test slides.
struct TestOutputs {
    slide_preds: Vec<usize>,
    tiles: Option<Vec<TilePredictions>>,
}

fn build_report(world: &World, spec: &RunSpec, test: &[&SlideRecord], out: &TestOutputs, violations: usize) -> Result<EvalReport> {
    let c = world.labels.num_subtypes();
    let truth: Vec<usize> = test.iter().map(|s| s.slide_label).collect();
    let recall = per_class_recall(&out.slide_preds, &truth, c)?;
    let (mut auc, mut dsc, mut tile_acc) = (None, None, None);
    if let Some(tiles) = &out.tiles {
        let (mut aucs, mut dices, mut correct, mut total) = (Vec::new(), Vec::new(), 0usize, 0usize);
        for (s, t) in test.iter().zip(tiles) {
            let target = s.slide_label;
            let scores: Vec<f64> = t.probs.column(target).to_vec();
            let positive: Vec<bool> = s.tiles.iter().map(|x| x.gt_label == Some(target)).collect();
            match tile_auc(&scores, &positive) {
                Ok(a) => aucs.push(a),
                Err(Error::UndefinedMetric(_)) => {}
                Err(e) => return Err(e),
            }
            dices.push(dice(&subtype_mask(s, &t.labels, target)?, &GridMask::ground_truth(s, target))?);
            for (l, x) in t.labels.iter().zip(&s.tiles) {
                if let Some(g) = x.gt_label {
                    correct += usize::from(*l == g);
                    total += 1;
                }
            }
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        auc = mean(&aucs);
        dsc = mean(&dices);
        tile_acc = (total > 0).then(|| correct as f64 / total as f64);
    }
    Ok(EvalReport {
        method: spec.method.name().to_string(),
        variant: spec.method.variant().to_string(),
        base_quality: world.base_quality.clone(),
        k: spec.k,
        seed: spec.seed,
        bacc: recall.mean,
        auc,
        dice: dsc,
        tile_accuracy: tile_acc,
        per_class_recall: recall.recalls,
        confusion: confusion_matrix(&out.slide_preds, &truth, c),
        num_test_slides: test.len(),
        pseudo_label_violations: violations,
    })
}

/// Runs one cell of the matrix.
pub fn execute_run(world: &World, cfg: &ExperimentConfig, spec: &RunSpec) -> Result<RunArtifacts> {
    let test = world.test_slides();
    if test.is_empty() {
        return config("no test slides");
    }
    let (train_cfg, model_cfg) = cfg.settings(spec.method)?;
    let train_cfg = TrainConfig { seed: spec.seed, k_shot: spec.k, ..train_cfg };

    if spec.method == Method::Zeroshot {
        let pool = world.train_slides();
        let sel = rank_and_pool(&world.groups, &pool, &world.encoder, cfg.top_m)?;
        let mut out = TestOutputs { slide_preds: Vec::new(), tiles: Some(Vec::new()) };
        for s in &test {
            let t = zero_shot_predictions(s, &sel.embeddings, model_cfg.tau)?;
            out.slide_preds.push(aggregate_wsi(&t, Aggregation::TumorRatio)?);
            out.tiles.as_mut().expect("tile outputs").push(t);
        }
        let report = build_report(world, spec, &test, &out, 0)?;
        let audit = PromptAudit::new(&sel, &world.groups, pool.len());
        return Ok(RunArtifacts { report, trace: None, audit: Some(audit), model: None });
    }

    let split: FewShotSplit =
        sample_few_shot(&world.slides, world.labels.num_subtypes(), spec.k, spec.seed ^ SAMPLE_SALT)?;
    if let Some((use_spatial, use_learnable_prompts)) = spec.method.model_flags() {
        let mut unique: Vec<usize> = split.train_indices().collect();
        unique.sort_unstable();
        unique.dedup();
        let pool: Vec<&SlideRecord> = unique.iter().map(|&i| &world.slides[i]).collect();
        let sel = rank_and_pool(&world.groups, &pool, &world.encoder, cfg.top_m)?;
        let bank = PromptBank::from_group(
            &world.groups[sel.best_group()],
            &world.templates,
            &world.labels,
            &world.encoder,
            Some(model_cfg.context_len),
        )?;
        let mcfg = ModelConfig { use_spatial, use_learnable_prompts, ..model_cfg };
        let mut model = PathPt::new(mcfg, world.dim, bank, &sel.embeddings, spec.seed)?;
        let outcome = train(&mut model, &world.encoder, &world.slides, &split, &sel.embeddings, &train_cfg)?;
        if outcome.violations > 0 {
            return Err(Error::InvalidInput(format!("{} pseudo-label violations", outcome.violations)));
        }
        let mut out = TestOutputs { slide_preds: Vec::new(), tiles: Some(Vec::new()) };
        for s in &test {
            let p = model.predict_slide(s, &world.encoder)?;
            out.slide_preds.push(p.slide_label);
            out.tiles.as_mut().expect("tile outputs").push(p.tiles);
        }
        let report = build_report(world, spec, &test, &out, outcome.violations)?;
        let audit = PromptAudit::new(&sel, &world.groups, pool.len());
        return Ok(RunArtifacts { report, trace: Some(outcome.trace), audit: Some(audit), model: Some(model) });
    }

    let variant = if spec.method == Method::Abmil { MilVariant::AbmilGated } else { MilVariant::MeanPool };
    let mut model = MilModel::new(variant, world.dim, world.labels.num_subtypes(), spec.seed);
    let trace = mil_train(&mut model, &world.slides, &split, &train_cfg)?;
    let slide_preds = test.iter().map(|s| Ok(model.forward(s)?.prediction())).collect::<Result<Vec<_>>>()?;
    let report = build_report(world, spec, &test, &TestOutputs { slide_preds, tiles: None }, 0)?;
    Ok(RunArtifacts { report, trace: Some(trace), audit: None, model: None })
}

/// One line of `runs.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub base_quality: String,
    pub k: usize,
    pub seed: u64,
    pub bacc: Option<f64>,
    pub auc: Option<f64>,
    pub dice: Option<f64>,
    pub status: String,
    /// Report path relative to the output directory.
    pub report: String,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// One line of `aggregate.csv`: medians and quartiles over successful runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub base_quality: String,
    pub k: usize,
    pub n: usize,
    pub bacc_median: Option<f64>,
    pub bacc_q1: Option<f64>,
    pub bacc_q3: Option<f64>,
    pub auc_median: Option<f64>,
    pub auc_q1: Option<f64>,
    pub auc_q3: Option<f64>,
    pub dice_median: Option<f64>,
    pub dice_q1: Option<f64>,
    pub dice_q3: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestRow {
    pub metric: String,
    pub method_a: String,
    pub method_b: String,
    pub k: usize,
    pub n: usize,
    pub mean_diff: Option<f64>,
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub output_dir: PathBuf,
    pub runs: Vec<RunRecord>,
    pub aggregate: Vec<AggregateRow>,
    pub ttests: Vec<TTestRow>,
    pub reports: Vec<Option<EvalReport>>,
}

impl ExperimentOutcome {
    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| !r.ok()).count()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    if rows.is_empty() && !header.is_empty() {
        w.write_record(header).map_err(csv_err(path))?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Table { path: path.to_path_buf(), reason: e.to_string() }
}

pub(crate) fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

const RUN_HEADER: [&str; 9] = ["method", "base_quality", "k", "seed", "bacc", "auc", "dice", "status", "report"];

fn quartiles(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.flatten().collect();
    match Quartiles::of(&v) {
        Some(q) => (Some(q.median), Some(q.q1), Some(q.q3)),
        None => (None, None, None),
    }
}

/// Medians and quartiles per (method, k) over successful runs, in first
/// appearance order.
pub fn aggregate(runs: &[RunRecord]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in runs {
        let key = (r.method.clone(), r.k);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, k)| {
            let cell: Vec<&RunRecord> = runs.iter().filter(|r| r.method == method && r.k == k && r.ok()).collect();
            let (bacc_median, bacc_q1, bacc_q3) = quartiles(cell.iter().map(|r| r.bacc));
            let (auc_median, auc_q1, auc_q3) = quartiles(cell.iter().map(|r| r.auc));
            let (dice_median, dice_q1, dice_q3) = quartiles(cell.iter().map(|r| r.dice));
            let base_quality = runs.iter().find(|r| r.method == method).map(|r| r.base_quality.clone()).unwrap_or_default();
            AggregateRow {
                method,
                base_quality,
                k,
                n: cell.len(),
                bacc_median,
                bacc_q1,
                bacc_q3,
                auc_median,
                auc_q1,
                auc_q3,
                dice_median,
                dice_q1,
                dice_q3,
            }
        })
        .collect()
}

/// Paired t-tests on BACC of PathPT against every other trained method, per
/// k, over the seeds where both runs succeeded.
pub fn paired_tests(runs: &[RunRecord]) -> Vec<TTestRow> {
    let mut rows = Vec::new();
    let pathpt = Method::Pathpt.name();
    let mut ks: Vec<usize> = runs.iter().filter(|r| r.method == pathpt).map(|r| r.k).collect();
    ks.dedup();
    for k in ks {
        for other in Method::ALL.iter().skip(2).map(|m| m.name()) {
            let pairs: Vec<(f64, f64)> = runs
                .iter()
                .filter(|a| a.method == pathpt && a.k == k && a.ok())
                .filter_map(|a| {
                    let b = runs.iter().find(|b| b.method == other && b.k == k && b.seed == a.seed && b.ok())?;
                    Some((a.bacc?, b.bacc?))
                })
                .collect();
            if !runs.iter().any(|r| r.method == other && r.k == k) {
                continue;
            }
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let test = paired_ttest(&a, &b).ok();
            let n = pairs.len();
            rows.push(TTestRow {
                metric: "bacc".into(),
                method_a: pathpt.into(),
                method_b: other.into(),
                k,
                n,
                mean_diff: (n > 0).then(|| pairs.iter().map(|(x, y)| x - y).sum::<f64>() / n as f64),
                t: test.map(|t| t.t),
                p: test.map(|t| t.p),
                degenerate: test.is_some_and(|t| t.degenerate),
            });
        }
    }
    rows
}

fn cell(median: Option<f64>, q1: Option<f64>, q3: Option<f64>) -> String {
    match (median, q1, q3) {
        (Some(m), Some(a), Some(b)) => format!("{m:.3} ({a:.3}, {b:.3})"),
        _ => "n/a".to_string(),
    }
}

/// Markdown table of `median (Q1, Q3)` per method and k.
pub fn summary_markdown(rows: &[AggregateRow]) -> String {
    let quality = rows.first().map_or("", |r| r.base_quality.as_str());
    let mut out = format!("# Results ({quality})\n\nMedian (Q1, Q3) over repeats.\n\n");
    out.push_str("| method | k | n | BACC | tile AUC | DICE |\n|---|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.method,
            r.k,
            r.n,
            cell(r.bacc_median, r.bacc_q1, r.bacc_q3),
            cell(r.auc_median, r.auc_q1, r.auc_q3),
            cell(r.dice_median, r.dice_q1, r.dice_q3),
        ));
    }
    out
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.parse().map_err(|_| Error::Config(format!("{WORKERS_ENV} must be a positive integer")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

/// Runs the full matrix and writes the report bundle to `cfg.output_dir`.
/// Failed runs are recorded and do not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let world = World::load(cfg)?;
    let dir = cfg.output_dir.clone();
    for sub in ["reports", "traces", "prompts"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    if cfg.save_checkpoints {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let specs = run_specs(cfg);
    info!("{} runs over {} slides", specs.len(), world.slides.len());

    let pool = worker_pool()?;
    let results: Vec<(RunRecord, Option<EvalReport>)> = pool.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                let stem = spec.stem();
                let report_rel = format!("reports/{stem}.json");
                let outcome = execute_run(&world, cfg, spec).and_then(|a| {
                    write_json(&dir.join(&report_rel), &a.report)?;
                    if let Some(t) = &a.trace {
                        fs::write(dir.join(format!("traces/{stem}.csv")), trace_csv(t))?;
                    }
                    if let Some(p) = &a.audit {
                        write_json(&dir.join(format!("prompts/{stem}.json")), p)?;
                    }
                    if let (true, Some(m)) = (cfg.save_checkpoints, &a.model) {
                        m.save(dir.join(format!("checkpoints/{stem}.ptck")), world.dim)?;
                    }
                    Ok(a.report)
                });
                let (status, report) = match outcome {
                    Ok(r) => ("ok".to_string(), Some(r)),
                    Err(e) => {
                        warn!("run {stem} failed: {e}");
                        (format!("failed: {e}"), None)
                    }
                };
                let record = RunRecord {
                    method: spec.method.name().to_string(),
                    base_quality: world.base_quality.clone(),
                    k: spec.k,
                    seed: spec.seed,
                    bacc: report.as_ref().map(|r| r.bacc),
                    auc: report.as_ref().and_then(|r| r.auc),
                    dice: report.as_ref().and_then(|r| r.dice),
                    report: if report.is_some() { report_rel } else { String::new() },
                    status,
                };
                (record, report)
            })
            .collect()
    });
    let (runs, reports): (Vec<RunRecord>, Vec<Option<EvalReport>>) = results.into_iter().unzip();

    let aggregate = aggregate(&runs);
    let ttests = paired_tests(&runs);
    write_csv(&dir.join("runs.csv"), &runs, &RUN_HEADER)?;
    write_csv(&dir.join("aggregate.csv"), &aggregate, &[])?;
    write_csv(&dir.join("ttests.csv"), &ttests, &[])?;
    fs::write(dir.join("summary.md"), summary_markdown(&aggregate))?;
    Ok(ExperimentOutcome { output_dir: dir, runs, aggregate, ttests, reports })
}

/// Rows of a bundle's `runs.csv`.
pub fn read_runs(dir: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    read_csv(&dir.as_ref().join("runs.csv"))
}

/// Rows of a bundle's `aggregate.csv`.
pub fn read_aggregate(dir: impl AsRef<Path>) -> Result<Vec<AggregateRow>> {
    read_csv(&dir.as_ref().join("aggregate.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: &str, k: usize, seed: u64, bacc: f64) -> RunRecord {
        RunRecord {
            method: method.into(),
            base_quality: "medium".into(),
            k,
            seed,
            bacc: Some(bacc),
            auc: None,
            dice: None,
            status: "ok".into(),
            report: String::new(),
        }
    }

    #[test]
    fn config_parses_with_overrides() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            methods = ["zeroshot", "pathpt"]
            k_shots = [1]
            n_repeats = 2
            [corpus]
            source = "synthetic"
            quality = "good"
            [corpus.config]
            slides_per_class = 6
            [train]
            epochs = 4
            warmup_epochs = 1
            pseudo_start_epoch = 2
            [overrides.pathpt.train]
            lr = 0.01
            "#,
        )
        .unwrap();
        let (t, _) = cfg.settings(Method::Pathpt).unwrap();
        assert_eq!((t.lr, t.epochs), (0.01, 4));
        assert_eq!(cfg.settings(Method::Zeroshot).unwrap().0.lr, 1e-4);
        assert!(ExperimentConfig::from_toml("methods = [\"nope\"]").is_err());
        assert!(ExperimentConfig::from_toml("[overrides.pathpt.train]\nbogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("top_m = 500").is_err());
    }

    #[test]
    fn run_matrix_shape() {
        let cfg = ExperimentConfig { n_repeats: 3, ..Default::default() };
        let specs = run_specs(&cfg);
        assert_eq!(specs.len(), 1 + 5 * 3 * 3);
        assert_eq!(specs[0], RunSpec { method: Method::Zeroshot, k: 0, seed: 7 });
        assert_eq!(specs[3].seed, 9);
    }

    #[test]
    fn aggregate_and_tests() {
        let mut runs = vec![];
        for s in 0..4 {
            runs.push(record("pathpt", 5, s, 0.8 + 0.05 * s as f64));
            runs.push(record("prompt_only", 5, s, 0.7 + 0.01 * s as f64));
        }
        let mut failed = record("prompt_only", 5, 9, 0.0);
        failed.status = "failed: boom".into();
        failed.bacc = None;
        runs.push(failed);
        let agg = aggregate(&runs);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[1].n, 4);
        assert!((agg[0].bacc_median.unwrap() - 0.875).abs() < 1e-12);
        let t = paired_tests(&runs);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].n, 4);
        assert!(t[0].p.unwrap() < 0.05);
        assert!(summary_markdown(&agg).contains("| pathpt | 5 | 4 | 0.875 (0.8"));
    }
}
