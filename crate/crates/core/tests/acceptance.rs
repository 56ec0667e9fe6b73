//! End-to-end acceptance checks on the reference synthetic corpus. Prints one
//! PASS/FAIL line per criterion and exits nonzero if any fails.

use std::fs;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pathpt::corpus::{build_text_encoder, generate_corpus, CorpusConfig, LabelSpace, SlideRecord, Split, Tile};
use pathpt::harness::{run_experiment, AggregateRow, ExperimentConfig, ExperimentOutcome, Method};
use pathpt::metrics::{balanced_accuracy, dice, subtype_mask, tile_auc, GridMask};
use pathpt::model::{ModelConfig, PathPt, PromptBank};
use pathpt::nn;
use pathpt::optim::Parameters;
use pathpt::text::TextEncoderConfig;
use pathpt::training::{balanced_ce, candidate_loss};
use pathpt::zeroshot::{
    aggregate_wsi, build_prompt_groups, default_templates, rank_and_pool, zero_shot_predictions, Aggregation,
    ClassEmbeddings, DEFAULT_TAU,
};

type Verdict = Result<String, String>;

/// Gradient norm below which finite differences are compared absolutely.
const GRAD_FLOOR: f64 = 1e-4;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- brute-force oracles ----

fn bacc_oracle(preds: &[usize], labels: &[usize]) -> f64 {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut sum = 0.0;
    for &c in &classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let hits = members.iter().filter(|&&i| preds[i] == c).count();
        sum += hits as f64 / members.len() as f64;
    }
    sum / classes.len() as f64
}

fn auc_oracle(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..scores.len()).filter(|&i| positive[i]) {
        for j in (0..scores.len()).filter(|&j| !positive[j]) {
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn dice_oracle(a: &[bool], b: &[bool]) -> f64 {
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let (na, nb) = (a.iter().filter(|x| **x).count() as f64, b.iter().filter(|x| **x).count() as f64);
    if na + nb == 0.0 {
        1.0
    } else {
        2.0 * both / (na + nb)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Per-class mean of -log p(y), averaged over the classes present.
fn balanced_ce_oracle(logits: &Array2<f64>, labels: &[Option<usize>]) -> f64 {
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); logits.ncols()];
    for (m, y) in labels.iter().enumerate() {
        if let Some(y) = y {
            per_class[*y].push(-log_softmax(&logits.row(m).to_vec())[*y]);
        }
    }
    let means: Vec<f64> =
        per_class.iter().filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    if means.is_empty() {
        0.0
    } else {
        means.iter().sum::<f64>() / means.len() as f64
    }
}

/// Mean of -log(p0 + pi) computed through log-sum-exp of the logits.
fn candidate_oracle(logits: &Array2<f64>, slide_label: usize, tiles: &[usize]) -> f64 {
    if tiles.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &m in tiles {
        let lp = log_softmax(&logits.row(m).to_vec());
        let (a, b) = (lp[0], lp[slide_label]);
        let hi = a.max(b);
        sum -= hi + ((a - hi).exp() + (b - hi).exp()).ln();
    }
    sum / tiles.len() as f64
}

fn ac1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut note = |name: &str, got: f64, want: f64| -> Result<(), String> {
        let err = (got - want).abs();
        worst = worst.max(err);
        if err <= 1e-12 {
            Ok(())
        } else {
            Err(format!("{name}: {got} vs oracle {want}"))
        }
    };
    let trials = 250;
    for _ in 0..trials {
        let c = rng.gen_range(2..6);
        let n = rng.gen_range(1..30);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=c)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=c)).collect();
        note("balanced_accuracy", balanced_accuracy(&preds, &labels, c).map_err(|e| e.to_string())?, bacc_oracle(&preds, &labels))?;

        let m = rng.gen_range(2..40);
        // coarse scores force ties
        let scores: Vec<f64> = (0..m).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
        let mut positive: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.4)).collect();
        positive[0] = true;
        positive[1] = false;
        note("tile_auc", tile_auc(&scores, &positive).map_err(|e| e.to_string())?, auc_oracle(&scores, &positive))?;

        let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let a: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.3)).collect();
        let b: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.3)).collect();
        let got = dice(
            &GridMask { height: h, width: w, cells: a.clone() },
            &GridMask { height: h, width: w, cells: b.clone() },
        )
        .map_err(|e| e.to_string())?;
        note("dice", got, dice_oracle(&a, &b))?;

        let classes = c + 1;
        let logits = Array2::from_shape_fn((m, classes), |_| rng.gen_range(-4.0..4.0));
        let probs = nn::softmax_rows(&logits);
        let targets: Vec<Option<usize>> =
            (0..m).map(|_| rng.gen_bool(0.6).then(|| rng.gen_range(0..classes))).collect();
        note("balanced_ce", balanced_ce(&probs, &targets).value, balanced_ce_oracle(&logits, &targets))?;
        let slide_label = rng.gen_range(1..classes);
        let tiles: Vec<usize> = (0..m).filter(|_| rng.gen_bool(0.5)).collect();
        note("candidate_loss", candidate_loss(&probs, slide_label, &tiles), candidate_oracle(&logits, slide_label, &tiles))?;
    }
    Ok(format!("{trials} instances x 5 functions, worst abs error {worst:.1e}"))
}

fn ac2() -> Verdict {
    let start = Instant::now();
    let d = 8;
    let labels = LabelSpace::with_subtypes(["glioblastoma", "ependymoma", "medulloblastoma", "meningioma"])
        .map_err(|e| e.to_string())?;
    let templates = default_templates();
    let encoder = build_text_encoder(TextEncoderConfig { token_dim: d, out_dim: d, ..Default::default() }, &templates, &labels)
        .map_err(|e| e.to_string())?;
    let groups = build_prompt_groups(&templates, &labels, 1, 3).map_err(|e| e.to_string())?;
    let bank = PromptBank::from_group(&groups[0], &templates, &labels, &encoder, Some(4)).map_err(|e| e.to_string())?;
    let (e, _) = bank.encode(&encoder).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let tiles = (0..9u32)
        .map(|i| Tile {
            row: i / 3,
            col: i % 3,
            feature: (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            gt_label: None,
        })
        .collect();
    let slide = SlideRecord { slide_id: "fd".into(), grid_h: 3, grid_w: 3, tiles, slide_label: 2, split: Split::Train };
    let weights = Array2::from_shape_fn((9, labels.len()), |_| rng.gen_range(-1.0..1.0));

    let (eps, mut worst, mut worst_group, mut groups_checked) = (1e-5, 0.0f64, String::new(), 0);
    let mut zero_groups = std::collections::BTreeSet::new();
    for use_learnable_prompts in [true, false] {
        let cfg = ModelConfig { heads: 2, use_learnable_prompts, ..Default::default() };
        let mut model = PathPt::new(cfg, d, bank.clone(), &e, 5).map_err(|e| e.to_string())?;
        // move off the zero-initialised point so every path carries gradient
        model.visit_mut(&mut |_, p| p.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3)));
        let loss = |m: &PathPt| (m.forward(&slide, &encoder).expect("forward").probs * &weights).sum();
        let fwd = model.forward(&slide, &encoder).map_err(|e| e.to_string())?;
        let mut grads = model.zeros_like();
        model.backward(&encoder, &fwd, &nn::softmax_rows_backward(&fwd.probs, &weights), &mut grads);

        let analytic = grads.snapshot();
        let shapes: Vec<(String, usize)> = analytic.iter().map(|(n, v)| (n.clone(), v.len())).collect();
        for (gi, (name, len)) in shapes.iter().enumerate() {
            let mut numeric = vec![0.0; *len];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    let mut idx = 0;
                    m.visit_mut(&mut |_, p| {
                        if idx == gi {
                            p[j] += delta;
                        }
                        idx += 1;
                    });
                    loss(&m)
                };
                *slot = (eval(eps) - eval(-eps)) / (2.0 * eps);
            }
            let a = &analytic[gi].1;
            let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
            // a group whose true gradient vanishes (the key bias cancels in the
            // attention softmax) is judged against the floor, not against noise
            let rel = diff / scale.max(GRAD_FLOOR);
            if scale < GRAD_FLOOR {
                zero_groups.insert(name.clone());
            }
            if rel > worst {
                (worst, worst_group) = (rel, name.clone());
            }
            groups_checked += 1;
            if rel > 1e-4 {
                return Err(format!("group {name}: relative error {rel:.2e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs < 60.0,
        format!(
            "{groups_checked} parameter groups, worst relative error {worst:.1e} ({worst_group}), {secs:.1}s; zero-gradient groups {zero_groups:?}"
        ),
    )
}

fn ac3() -> Verdict {
    let cfg = CorpusConfig { sigma_align: 0.0, sigma_tile: 0.0, ..Default::default() };
    let corpus = generate_corpus(&cfg).map_err(|e| e.to_string())?;
    let groups = build_prompt_groups(&default_templates(), &corpus.labels, 200, 7).map_err(|e| e.to_string())?;
    let train: Vec<&SlideRecord> = corpus.slides.iter().filter(|s| s.split == Split::Train).collect();
    let sel = rank_and_pool(&groups, &train, &corpus.encoder, 100).map_err(|e| e.to_string())?;
    let (mut correct, mut total, mut preds, mut truth, mut min_dice) = (0, 0, Vec::new(), Vec::new(), 1.0f64);
    for s in corpus.slides.iter().filter(|s| s.split == Split::Test) {
        let t = zero_shot_predictions(s, &sel.embeddings, DEFAULT_TAU).map_err(|e| e.to_string())?;
        for (l, tile) in t.labels.iter().zip(&s.tiles) {
            correct += usize::from(Some(*l) == tile.gt_label);
            total += 1;
        }
        preds.push(aggregate_wsi(&t, Aggregation::TumorRatio).map_err(|e| e.to_string())?);
        truth.push(s.slide_label);
        let mask = subtype_mask(s, &t.labels, s.slide_label).map_err(|e| e.to_string())?;
        min_dice = min_dice.min(dice(&mask, &GridMask::ground_truth(s, s.slide_label)).map_err(|e| e.to_string())?);
    }
    let acc = correct as f64 / total as f64;
    let bacc = balanced_accuracy(&preds, &truth, corpus.labels.num_subtypes()).map_err(|e| e.to_string())?;
    check(
        acc == 1.0 && bacc == 1.0 && min_dice == 1.0,
        format!("tile accuracy {acc}, slide BACC {bacc}, min per-slide DICE {min_dice} over {} test slides", preds.len()),
    )
}

fn ac4() -> Verdict {
    let corpus = generate_corpus(&CorpusConfig::default()).map_err(|e| e.to_string())?;
    let templates = default_templates();
    let groups = build_prompt_groups(&templates, &corpus.labels, 200, 7).map_err(|e| e.to_string())?;
    let train: Vec<&SlideRecord> = corpus.slides.iter().filter(|s| s.split == Split::Train).collect();
    let sel = rank_and_pool(&groups, &train, &corpus.encoder, 100).map_err(|e| e.to_string())?;
    let best = &groups[sel.best_group()];
    let manual = ClassEmbeddings::encode_prompts(&corpus.encoder, &best.prompts).map_err(|e| e.to_string())?;
    let bank = PromptBank::from_group(best, &templates, &corpus.labels, &corpus.encoder, None).map_err(|e| e.to_string())?;
    let model = PathPt::new(ModelConfig::default(), cfg_dim(&corpus.slides), bank, &manual, 7).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut tiles, mut mismatched) = (0, 0);
    for _ in 0..20 {
        let s = &corpus.slides[rng.gen_range(0..corpus.slides.len())];
        let ours = model.predict_slide(s, &corpus.encoder).map_err(|e| e.to_string())?.tiles.labels;
        let zs = zero_shot_predictions(s, &manual, DEFAULT_TAU).map_err(|e| e.to_string())?.labels;
        tiles += zs.len();
        mismatched += ours.iter().zip(&zs).filter(|(a, b)| a != b).count();
    }
    check(mismatched == 0, format!("{mismatched} of {tiles} tile labels differ on 20 random slides"))
}

fn cfg_dim(slides: &[SlideRecord]) -> usize {
    slides[0].dim()
}

fn row<'a>(agg: &'a [AggregateRow], m: Method, k: usize) -> Option<&'a AggregateRow> {
    agg.iter().find(|r| r.method == m.name() && r.k == k)
}

fn med(agg: &[AggregateRow], m: Method, k: usize) -> f64 {
    row(agg, m, k).and_then(|r| r.bacc_median).unwrap_or(f64::NAN)
}

fn ac5(out: &ExperimentOutcome, secs: f64) -> Verdict {
    let agg = &out.aggregate;
    let zs = row(agg, Method::Zeroshot, 0).ok_or("no zero-shot row")?;
    let pt = row(agg, Method::Pathpt, 10).ok_or("no 10-shot PathPT row")?;
    let (zb, pb) = (zs.bacc_median.unwrap_or(f64::NAN), pt.bacc_median.unwrap_or(f64::NAN));
    let (zd, pd) = (zs.dice_median.unwrap_or(f64::NAN), pt.dice_median.unwrap_or(f64::NAN));
    check(
        pb - zb >= 0.10 && pd > zd && secs < 900.0,
        format!("BACC {pb:.3} vs zero-shot {zb:.3} (gain {:.3}); DICE {pd:.3} vs {zd:.3}; matrix {secs:.0}s", pb - zb),
    )
}

fn ac6(out: &ExperimentOutcome) -> Verdict {
    let agg = &out.aggregate;
    let mut parts = Vec::new();
    let mut ok = true;
    for k in [5, 10] {
        let p = med(agg, Method::Pathpt, k);
        for other in [Method::PromptOnly, Method::LinearProbe] {
            let o = med(agg, other, k);
            let tested = out.ttests.iter().any(|t| t.k == k && t.method_b == other.name() && t.n > 0);
            ok &= p >= o && tested;
            parts.push(format!("k={k} pathpt {p:.3} vs {other} {o:.3}{}", if tested { "" } else { " (no t-test)" }));
        }
    }
    check(ok, parts.join("; "))
}

fn ac7(out: &ExperimentOutcome) -> Verdict {
    let agg = &out.aggregate;
    let mut parts = Vec::new();
    let mut ok = true;
    for m in Method::ALL.into_iter().skip(1) {
        let (a, b, c) = (med(agg, m, 1), med(agg, m, 5), med(agg, m, 10));
        ok &= c >= b && b >= a;
        parts.push(format!("{m} {a:.3}/{b:.3}/{c:.3}"));
    }
    check(ok, format!("median BACC at 1/5/10 shots: {}", parts.join(", ")))
}

fn ac8(out: &ExperimentOutcome) -> Verdict {
    let failed: Vec<String> =
        out.runs.iter().filter(|r| !r.ok()).map(|r| format!("{} k={} seed={}: {}", r.method, r.k, r.seed, r.status)).collect();
    let violations: usize = out.reports.iter().flatten().map(|r| r.pseudo_label_violations).sum();
    let trained = out.runs.iter().filter(|r| r.k > 0).count();
    check(
        failed.is_empty() && violations == 0,
        format!("{trained} training runs, {violations} violations, {} failed {:?}", failed.len(), failed),
    )
}

fn ac9(cfg: &ExperimentConfig, first: &std::path::Path) -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig { output_dir: dir.path().to_path_buf(), ..cfg.clone() };
    run_experiment(&cfg).map_err(|e| e.to_string())?;
    let a = fs::read(first.join("aggregate.csv")).map_err(|e| e.to_string())?;
    let b = fs::read(dir.path().join("aggregate.csv")).map_err(|e| e.to_string())?;
    check(a == b, format!("aggregate.csv {} bytes, identical: {}", a.len(), a == b))
}

fn report(name: &str, v: &Verdict, failures: &mut Vec<String>) {
    match v {
        Ok(detail) => println!("{name} PASS: {detail}"),
        Err(detail) => {
            println!("{name} FAIL: {detail}");
            failures.push(name.to_string());
        }
    }
}

fn main() {
    // positional arguments select criteria by name ("AC2", "determinism", ...);
    // the target's own name or no argument runs everything
    let filters: Vec<String> =
        std::env::args().skip(1).filter(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut failures = Vec::new();
    let quick: [(&str, fn() -> Verdict); 4] = [
        ("AC1 oracle equivalence", ac1),
        ("AC2 gradient correctness", ac2),
        ("AC3 zero-shot exactness", ac3),
        ("AC4 initialization equivalence", ac4),
    ];
    for (name, f) in quick {
        if wanted(name) {
            report(name, &f(), &mut failures);
        }
    }

    let matrix =
        ["AC5 few-shot gain", "AC6 ablation ordering", "AC7 monotonicity in shots", "AC8 pseudo-label safety", "AC9 determinism"];
    if matrix.iter().any(|n| wanted(n)) {
        let dir = tempfile::tempdir().expect("temp dir");
        let cfg = ExperimentConfig { output_dir: dir.path().to_path_buf(), ..Default::default() };
        let start = Instant::now();
        match run_experiment(&cfg) {
            Ok(out) => {
                let secs = start.elapsed().as_secs_f64();
                let verdicts: [Box<dyn Fn() -> Verdict>; 5] = [
                    Box::new(|| ac5(&out, secs)),
                    Box::new(|| ac6(&out)),
                    Box::new(|| ac7(&out)),
                    Box::new(|| ac8(&out)),
                    Box::new(|| ac9(&cfg, dir.path())),
                ];
                for (name, v) in matrix.iter().zip(verdicts) {
                    if wanted(name) {
                        report(name, &v(), &mut failures);
                    }
                }
            }
            Err(e) => {
                for name in matrix.iter().filter(|n| wanted(n)) {
                    report(name, &Err(format!("experiment failed: {e}")), &mut failures);
                }
            }
        }
    }
    if !failures.is_empty() {
        eprintln!("failed: {}", failures.join(", "));
        std::process::exit(1);
    }
}
