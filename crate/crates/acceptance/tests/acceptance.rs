//! Release acceptance criteria, each checked against an oracle that shares no
//! code with the implementation. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crop_core::composition::{
    generate_candidates, pad_with_perturbations, propose_combined, propose_layout, propose_placement, rule_seeds,
    CandidateId, CompositionElement, ElementCategory, ProposalConfig, RuleKind,
};
use crop_core::dataset::{build_dpo_pairs, build_sft_decision, read_jsonl_from, MosStrata, ScoredCrop, ScoredImage};
use crop_core::eval::{
    acc_k_n, aggregate, emit_report, join_records, EvalRecord, GroundTruth, GroundTruthRecord, PredictionRecord,
    ReportFormat,
};
use crop_core::geometry::{equivalent, iou, ImageDims, PixelBox, DEFAULT_EQUIVALENCE_EPSILON};
use crop_core::objectives::{dpo_gradient, dpo_loss, DpoConfig, PolicyPairLogProbs, SequenceLogProb};
use crop_core::overlay::{render_enhancement, OverlayStyle, RasterImage};
use crop_core::pipeline::{run_batch, run_pipeline, PipelineConfig, ReplayBackend, Stage, StageOutcome};
use crop_core::prompts::PromptRegistry;
use crop_study::{create_study, distinct_votes, CropOutput, MethodPair, Side, Study, StudyImage, StudyItem, Vote};
use num_bigint::BigInt;
use num_traits::Zero;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ibox(x1: u32, y1: u32, x2: u32, y2: u32) -> PixelBox {
    PixelBox::new(f64::from(x1), f64::from(y1), f64::from(x2), f64::from(y2)).unwrap()
}

/// Non-degenerate integer box inside `w` x `h` with sides of at least `min`.
fn random_box(r: &mut ChaCha8Rng, w: u32, h: u32, min: u32) -> (u32, u32, u32, u32) {
    let bw = r.random_range(min..=w);
    let bh = r.random_range(min..=h);
    let x1 = r.random_range(0..=w - bw);
    let y1 = r.random_range(0..=h - bh);
    (x1, y1, x1 + bw, y1 + bh)
}

// ---------------------------------------------------------------------------
// Geometry and metrics

fn raster_iou(a: (u32, u32, u32, u32), b: (u32, u32, u32, u32), w: u32, h: u32) -> f64 {
    let inside = |c: (u32, u32, u32, u32), x: u32, y: u32| x >= c.0 && x < c.2 && y >= c.1 && y < c.3;
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..h {
        for x in 0..w {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(0x10_0001);
    let mut worst = 0.0f64;
    let mut overlapping = 0;
    for _ in 0..1000 {
        let (w, h) = (r.random_range(1..=64), r.random_range(1..=64));
        let a = random_box(&mut r, w, h, 1);
        let b = random_box(&mut r, w, h, 1);
        let want = raster_iou(a, b, w, h);
        let got = iou(&ibox(a.0, a.1, a.2, a.3), &ibox(b.0, b.1, b.2, b.3));
        overlapping += usize::from(want > 0.0);
        worst = worst.max((got - want).abs());
    }
    let elapsed = start.elapsed();
    ensure!(worst <= 1e-9, "max |iou - raster| = {worst:e}");
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    ensure!(overlapping > 100, "only {overlapping} overlapping pairs; sample is too easy");
    Ok(format!("1000 pairs, max error {worst:.1e}, {overlapping} overlapping, {elapsed:.2?}"))
}

fn epsilon_protocol() -> Outcome {
    let eps = DEFAULT_EQUIVALENCE_EPSILON;
    ensure!(eps == 0.85, "default epsilon is {eps}");
    let gt = ibox(0, 0, 100, 100);
    let at = ibox(0, 0, 100, 85);
    let above = ibox(0, 0, 10_000, 8_501);
    let gt_big = ibox(0, 0, 10_000, 10_000);
    ensure!(iou(&gt, &at) == 0.85, "constructed IoU is {}", iou(&gt, &at));
    ensure!(!equivalent(&gt, &at, eps), "IoU exactly 0.85 counted as equivalent");
    ensure!(equivalent(&gt_big, &above, eps), "IoU 0.8501 not counted as equivalent");

    // The same boundary through ACC scoring.
    let dims = ImageDims::new(10_000, 10_000).unwrap();
    let ranked = |pred: PixelBox, best: PixelBox| {
        let mut crops = vec![ScoredCrop::new(best, 5.0).unwrap()];
        for k in 0..9 {
            crops.push(ScoredCrop::new(ibox(9_000 + k * 10, 9_000, 9_005 + k * 10, 9_005), 1.0).unwrap());
        }
        EvalRecord {
            image: "boundary".into(),
            dims,
            predictions: vec![pred],
            ground_truth: GroundTruth::Ranked { crops },
        }
    };
    let scaled_at = ibox(0, 0, 10_000, 8_500);
    ensure!(!acc_k_n(&ranked(scaled_at, gt_big), 1, 5, eps).unwrap(), "ACC hit at IoU 0.85");
    ensure!(acc_k_n(&ranked(above, gt_big), 1, 5, eps).unwrap(), "ACC miss at IoU 0.8501");
    Ok("0.85 -> not equivalent, 0.8501 -> equivalent (pairwise and ACC)".into())
}

fn self_consistency() -> Outcome {
    let mut r = rng(0x30_0003);
    let (mut preds, mut ranked, mut boxed) = (String::new(), String::new(), String::new());
    for i in 0..20 {
        let (w, h) = (r.random_range(40..=120u32), r.random_range(40..=120u32));
        let mut crops: Vec<(PixelBox, f64)> = Vec::new();
        while crops.len() < 12 {
            let b = random_box(&mut r, w, h, 4);
            let b = ibox(b.0, b.1, b.2, b.3);
            if !crops.iter().any(|(c, _)| *c == b) {
                crops.push((b, 1.0 + 0.25 * crops.len() as f64));
            }
        }
        let mut by_mos = crops.clone();
        by_mos.sort_by(|a, b| b.1.total_cmp(&a.1));
        let best: Vec<&PixelBox> = by_mos.iter().map(|(b, _)| b).collect();
        let cj: Vec<Value> = crops.iter().map(|(b, m)| json!({"box": b, "mos": m})).collect();
        preds += &format!("{}\n", json!({"image": format!("i{i}"), "boxes": best}));
        ranked += &format!("{}\n", json!({"image": format!("i{i}"), "width": w, "height": h, "crops": cj}));
        boxed += &format!("{}\n", json!({"image": format!("i{i}"), "width": w, "height": h, "boxes": best}));
    }
    let p: Vec<PredictionRecord> = read_jsonl_from(Cursor::new(preds)).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    for (kind, gt) in [("ranked", ranked), ("box", boxed)] {
        let g: Vec<GroundTruthRecord> = read_jsonl_from(Cursor::new(gt)).map_err(|e| e.to_string())?;
        let records = join_records(&p, &g).map_err(|e| e.to_string())?;
        let report = aggregate(&records, DEFAULT_EQUIVALENCE_EPSILON).map_err(|e| e.to_string())?;
        let v: Value = serde_json::from_slice(&emit_report(&report, ReportFormat::Json)).unwrap();
        lines.push(format!("{kind}: {}/{}/{}/{}", v["acc_1_5"], v["acc_1_10"], v["mean_iou"], v["mean_bde"]));
        if kind == "ranked" {
            ensure!(v["acc_1_5"] == json!(100.0) && v["acc_1_10"] == json!(100.0), "ACC {v}");
        } else {
            ensure!(v["mean_iou"] == json!(1.0) && v["mean_bde"] == json!(0.0), "IoU/BDE {v}");
        }
    }
    Ok(format!("20 images; {}", lines.join("; ")))
}

/// Exact rational test of IoU > 17/20 on integer boxes.
fn exact_equivalent(a: (u32, u32, u32, u32), b: (u32, u32, u32, u32)) -> bool {
    let area = |c: (u32, u32, u32, u32)| u64::from(c.2 - c.0) * u64::from(c.3 - c.1);
    let iw = u64::from(a.2.min(b.2).saturating_sub(a.0.max(b.0)));
    let ih = u64::from(a.3.min(b.3).saturating_sub(a.1.max(b.1)));
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    20 * inter > 17 * union
}

fn acc_brute_force() -> Outcome {
    let mut r = rng(0x40_0004);
    let (w, h) = (64u32, 48u32);
    let dims = ImageDims::new(w, h).unwrap();
    let mut hits = [0usize; 2];
    for rec in 0..50 {
        let mut gt: Vec<((u32, u32, u32, u32), f64)> = Vec::new();
        let mut scores: Vec<f64> = (0..20).map(|k| 1.0 + 0.2 * f64::from(k)).collect();
        scores.shuffle(&mut r);
        for s in scores {
            gt.push((random_box(&mut r, w, h, 6), s));
        }
        let mut preds = Vec::new();
        for _ in 0..10 {
            if r.random_bool(0.5) {
                // Near one ground-truth crop, so both outcomes occur.
                let g = gt[r.random_range(0..gt.len())].0;
                let j = |v: u32, hi: u32, r: &mut ChaCha8Rng| (v as i64 + r.random_range(-1..=1)).clamp(0, hi as i64) as u32;
                let c = (j(g.0, w, &mut r), j(g.1, h, &mut r), j(g.2, w, &mut r), j(g.3, h, &mut r));
                if c.0 < c.2 && c.1 < c.3 {
                    preds.push(c);
                    continue;
                }
            }
            preds.push(random_box(&mut r, w, h, 4));
        }
        let record = EvalRecord {
            image: format!("r{rec}"),
            dims,
            predictions: preds.iter().map(|c| ibox(c.0, c.1, c.2, c.3)).collect(),
            ground_truth: GroundTruth::Ranked {
                crops: gt.iter().map(|(c, m)| ScoredCrop::new(ibox(c.0, c.1, c.2, c.3), *m).unwrap()).collect(),
            },
        };
        let mut ranked = gt.clone();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        for (slot, (k, n)) in [(1usize, 5usize), (1, 10)].into_iter().enumerate() {
            let oracle = preds[..k].iter().any(|p| ranked[..n].iter().any(|(g, _)| exact_equivalent(*p, *g)));
            let got = acc_k_n(&record, k, n, DEFAULT_EQUIVALENCE_EPSILON).map_err(|e| e.to_string())?;
            ensure!(got == oracle, "record {rec} ({k},{n}): got {got}, oracle {oracle}");
            hits[slot] += usize::from(oracle);
        }
    }
    ensure!(hits.iter().all(|&h| h > 0 && h < 50), "degenerate sample: hits {hits:?}");
    Ok(format!("50 records, hits (1,5)={} (1,10)={}", hits[0], hits[1]))
}

// ---------------------------------------------------------------------------
// Preference objective

fn seq(v: Vec<f64>) -> SequenceLogProb {
    SequenceLogProb::new(v).unwrap()
}

fn pair(pw: Vec<f64>, rw: Vec<f64>, pl: Vec<f64>, rl: Vec<f64>) -> PolicyPairLogProbs {
    PolicyPairLogProbs::new(seq(pw), seq(rw), seq(pl), seq(rl)).unwrap()
}

/// ln(1 + e^(-2/5)) in fixed point with `digits` decimals, by series only.
fn softplus_neg_two_fifths(digits: u32) -> BigInt {
    let s = BigInt::from(10).pow(digits);
    // e^(-2/5) = sum (-2/5)^k / k!
    let mut term = s.clone();
    let mut e = BigInt::zero();
    let mut k = 0i64;
    while !term.is_zero() {
        e += &term;
        k += 1;
        term = term * BigInt::from(-2) / BigInt::from(5 * k);
    }
    // ln z = 2 atanh((z - 1) / (z + 1)) with z = 1 + e.
    let y = &e * &s / (BigInt::from(2) * &s + &e);
    let y2 = &y * &y / &s;
    let mut pow = y;
    let mut sum = BigInt::zero();
    let mut n = 1i64;
    while !pow.is_zero() {
        sum += &pow / BigInt::from(n);
        pow = pow * &y2 / &s;
        n += 2;
    }
    sum * BigInt::from(2)
}

fn fixed_to_f64(v: &BigInt, digits: u32) -> f64 {
    let text = v.to_string();
    let digits = digits as usize;
    let padded = format!("{text:0>width$}", width = digits + 1);
    let (int, frac) = padded.split_at(padded.len() - digits);
    format!("{int}.{frac}").parse().unwrap()
}

fn dpo_math() -> Outcome {
    let start = Instant::now();
    let mut r = rng(0x50_0005);
    let tokens = |r: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(-6.0..-0.01)).collect() };

    let mut worst_ln2 = 0.0f64;
    for _ in 0..50 {
        let (nw, nl) = (r.random_range(1..8), r.random_range(1..8));
        let (w, l) = (tokens(&mut r, nw), tokens(&mut r, nl));
        let cfg = DpoConfig::new(r.random_range(0.01..2.0)).unwrap();
        let loss = dpo_loss(&pair(w.clone(), w, l.clone(), l), &cfg).map_err(|e| e.to_string())?;
        worst_ln2 = worst_ln2.max((loss - std::f64::consts::LN_2).abs());
    }
    ensure!(worst_ln2 <= 1e-12, "policy = reference loss off ln 2 by {worst_ln2:e}");

    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    for _ in 0..100 {
        let lw = r.random_range(1..6);
        let ll = r.random_range(1..6);
        let (pw, rw, pl, rl) = (tokens(&mut r, lw), tokens(&mut r, lw), tokens(&mut r, ll), tokens(&mut r, ll));
        let cfg = DpoConfig::new(r.random_range(0.05..1.0)).unwrap();
        let g = dpo_gradient(&pair(pw.clone(), rw.clone(), pl.clone(), rl.clone()), &cfg).map_err(|e| e.to_string())?;
        let loss_at = |pw: Vec<f64>, pl: Vec<f64>| dpo_loss(&pair(pw, rw.clone(), pl, rl.clone()), &cfg).unwrap();
        for (side, analytic) in [(0, &g.policy_w), (1, &g.policy_l)] {
            for (i, &a) in analytic.iter().enumerate() {
                let bump = |d: f64| {
                    let (mut w, mut l) = (pw.clone(), pl.clone());
                    if side == 0 {
                        w[i] += d;
                    } else {
                        l[i] += d;
                    }
                    loss_at(w, l)
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-300);
                worst_rel = worst_rel.max(rel);
            }
        }
    }
    ensure!(worst_rel <= 1e-5, "finite-difference relative error {worst_rel:e}");

    const DIGITS: u32 = 60;
    let oracle = fixed_to_f64(&softplus_neg_two_fifths(DIGITS), DIGITS);
    let cfg = DpoConfig::new(0.2).unwrap();
    let fixture = pair(vec![-0.75, -0.25], vec![-1.5, -0.5], vec![-3.0], vec![-2.0]);
    let got = dpo_loss(&fixture, &cfg).map_err(|e| e.to_string())?;
    ensure!((got - oracle).abs() <= 1e-9, "beta 0.2 case: {got} vs oracle {oracle}");
    ensure!((oracle - 0.513_015_252_399_952_6).abs() <= 1e-15, "oracle itself drifted: {oracle}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!(
        "ln2 err {worst_ln2:.1e}; 100 FD checks max rel {worst_rel:.1e}; beta=0.2 loss {got:.15} (oracle {oracle:.15}); {elapsed:.2?}"
    ))
}

// ---------------------------------------------------------------------------
// Training corpora

fn synthetic_corpus(seed: u64, images: usize) -> Vec<ScoredImage> {
    let mut r = rng(seed);
    (0..images)
        .map(|i| {
            let (w, h) = (r.random_range(60..=200u32), r.random_range(60..=200u32));
            let n = r.random_range(8..=30);
            let mut crops: Vec<ScoredCrop> = Vec::new();
            while crops.len() < n {
                let b = random_box(&mut r, w, h, 8);
                let b = ibox(b.0, b.1, b.2, b.3);
                if crops.iter().any(|c| c.bbox == b) {
                    continue;
                }
                let mos = f64::from(r.random_range(100..=500u32)) / 100.0;
                crops.push(ScoredCrop::new(b, mos).unwrap());
            }
            ScoredImage {
                image: format!("img{i:03}.png"),
                width: w,
                height: h,
                crops,
            }
        })
        .collect()
}

/// Strictly increasing piecewise-linear map of [1, 5] onto itself.
fn monotone_map(r: &mut ChaCha8Rng) -> impl Fn(f64) -> f64 {
    let knots = 6;
    let mut ys: Vec<f64> = (0..knots).map(|_| r.random_range(0.1..1.0)).collect();
    let total: f64 = ys.iter().sum();
    let mut acc = 0.0;
    for y in &mut ys {
        acc += *y / total;
        *y = acc;
    }
    move |m: f64| {
        let t = ((m - 1.0) / 4.0) * knots as f64;
        let k = (t.floor() as usize).min(knots - 1);
        let lo = if k == 0 { 0.0 } else { ys[k - 1] };
        let v = lo + (ys[k] - lo) * (t - k as f64);
        (1.0 + 4.0 * v).clamp(1.0, 5.0)
    }
}

fn mos_of(img: &ScoredImage, b: &PixelBox) -> Option<f64> {
    img.crops.iter().find(|c| c.bbox == *b).map(|c| c.mos)
}

fn best_crop(img: &ScoredImage) -> PixelBox {
    let top = img.crops.iter().map(|c| c.mos).fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<&ScoredCrop> = img.crops.iter().filter(|c| c.mos == top).collect();
    tied[0].bbox
}

fn letter_box(set: &crop_core::CandidateSet, reply: &str) -> Result<PixelBox, String> {
    let id = reply.trim().chars().next().and_then(CandidateId::from_char).ok_or(format!("reply {reply:?}"))?;
    set.get(id).map(|c| c.bbox).ok_or(format!("{reply:?} is not a candidate"))
}

fn dataset_invariants() -> Outcome {
    let corpus = synthetic_corpus(0x60_0006, 50);
    let strata = MosStrata::default();
    let prompts = PromptRegistry::default();
    let mut r = rng(0x60_0007);
    let maps: Vec<Box<dyn Fn(f64) -> f64>> = (0..5).map(|_| Box::new(monotone_map(&mut r)) as Box<_>).collect();
    let (mut pairs_checked, mut sft_checked, mut unique_top) = (0, 0, 0);
    for (i, img) in corpus.iter().enumerate() {
        let seed = 1000 + i as u64;
        let top = img.crops.iter().map(|c| c.mos).fold(f64::NEG_INFINITY, f64::max);
        let unique = img.crops.iter().filter(|c| c.mos == top).count() == 1;
        unique_top += usize::from(unique);
        let check = |img: &ScoredImage| -> Result<PixelBox, String> {
            for p in build_dpo_pairs(img, &strata, 4, seed, &prompts).map_err(|e| e.to_string())? {
                let chosen = mos_of(img, &letter_box(&p.candidates, &p.chosen)?).ok_or("chosen crop not in record")?;
                let rejected =
                    mos_of(img, &letter_box(&p.candidates, &p.rejected)?).ok_or("rejected crop not in record")?;
                ensure!(chosen > rejected, "{}: chosen MOS {chosen} <= rejected {rejected}", img.image);
            }
            let s = build_sft_decision(img, &strata, seed, &prompts).map_err(|e| e.to_string())?;
            let set = s.candidates.ok_or("decision sample without candidates")?;
            ensure!(set.len() == 8, "{}: {} candidates", img.image, set.len());
            let target = letter_box(&set, &s.target)?;
            let listed: Vec<f64> = set.iter().map(|c| mos_of(img, &c.bbox).unwrap()).collect();
            let best = listed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            ensure!(mos_of(img, &target) == Some(best), "{}: target is not the listed argmax", img.image);
            Ok(target)
        };
        let before = check(img)?;
        pairs_checked += 4;
        sft_checked += 1;
        if unique {
            ensure!(before == best_crop(img), "{}: target is not the image's best crop", img.image);
        }
        for (k, f) in maps.iter().enumerate() {
            let mut warped = img.clone();
            for c in &mut warped.crops {
                c.mos = f(c.mos);
            }
            let after = check(&warped)?;
            pairs_checked += 4;
            sft_checked += 1;
            ensure!(after == before, "{}: target moved under transform {k}", img.image);
        }
    }
    Ok(format!(
        "50 images x 6 scorings: {pairs_checked} pairs ordered, {sft_checked} decision samples with 8 candidates, \
         argmax stable ({unique_top} with a unique best)"
    ))
}

// ---------------------------------------------------------------------------
// Rule engine

fn within_aspect(b: &PixelBox, cfg: &ProposalConfig) -> bool {
    let a = b.width() / b.height();
    a >= cfg.aspect_bounds[0] * (1.0 - 1e-9) && a <= cfg.aspect_bounds[1] * (1.0 + 1e-9)
}

fn in_frame(b: &PixelBox, w: u32, h: u32) -> bool {
    b.x1() >= 0.0 && b.y1() >= 0.0 && b.x2() <= f64::from(w) && b.y2() <= f64::from(h)
}

fn contains(outer: &PixelBox, inner: &PixelBox) -> bool {
    outer.x1() <= inner.x1() && outer.y1() <= inner.y1() && outer.x2() >= inner.x2() && outer.y2() >= inner.y2()
}

fn anchor_error(crop: &PixelBox, point: (f64, f64), anchor: [f64; 2]) -> (f64, f64) {
    (
        ((point.0 - crop.x1()) / crop.width() - anchor[0]).abs(),
        ((point.1 - crop.y1()) / crop.height() - anchor[1]).abs(),
    )
}

fn center(b: &PixelBox) -> (f64, f64) {
    ((b.x1() + b.x2()) / 2.0, (b.y1() + b.y2()) / 2.0)
}

fn union_of(e: &CompositionElement) -> PixelBox {
    let bs = e.boxes();
    let f = |g: fn(&PixelBox) -> f64, pick: fn(f64, f64) -> f64| bs.iter().map(g).reduce(pick).unwrap();
    PixelBox::new(f(PixelBox::x1, f64::min), f(PixelBox::y1, f64::min), f(PixelBox::x2, f64::max), f(PixelBox::y2, f64::max))
        .unwrap()
}

fn rule_engine() -> Outcome {
    let mut r = rng(0x70_0007);
    let (mut anchored, mut layouts, mut combined) = (0, 0, 0);
    for case in 0..200 {
        let (w, h) = (r.random_range(80..=400u32), r.random_range(60..=300u32));
        let dims = ImageDims::new(w, h).unwrap();
        let cfg = ProposalConfig::with_seed(r.random());
        let n = r.random_range(0..=4);
        let elements: Vec<CompositionElement> = (0..n)
            .map(|_| {
                let cat = ElementCategory::ALL[r.random_range(0..ElementCategory::ALL.len())];
                let b = random_box(&mut r, w / 2, h / 2, 4);
                let (ox, oy) = (r.random_range(0..=w / 2), r.random_range(0..=h / 2));
                CompositionElement::single(cat, ibox(b.0 + ox, b.1 + oy, b.2 + ox, b.3 + oy))
            })
            .collect();

        let set = generate_candidates(&elements, dims, &cfg).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(set.len() == 8, "case {case}: {} candidates", set.len());
        for c in set.iter() {
            ensure!(in_frame(&c.bbox, w, h), "case {case}: {:?} leaves {w}x{h}", c.bbox);
            ensure!(within_aspect(&c.bbox, &cfg), "case {case}: aspect of {:?}", c.bbox);
        }

        for e in &elements {
            let subject = e.boxes()[0];
            match e.category.rule_kind() {
                RuleKind::Placement => {
                    for c in propose_placement(e, dims, &cfg).unwrap_or_default() {
                        let (dx, dy) = anchor_error(&c.bbox, center(&subject), c.anchor.ok_or("placement without anchor")?);
                        ensure!(dx <= 0.02 && dy <= 0.02, "case {case}: {} anchor off by {dx:.4}/{dy:.4}", e.category.as_str());
                        ensure!(contains(&c.bbox, &subject), "case {case}: subject cut off");
                        anchored += 1;
                    }
                }
                RuleKind::Layout => {
                    for c in propose_layout(e, dims, &cfg).unwrap_or_default() {
                        ensure!(contains(&c.bbox, &union_of(e)), "case {case}: {} not contained", e.category.as_str());
                        if let Some(a) = c.anchor {
                            let (_, dy) = anchor_error(&c.bbox, center(&subject), a);
                            ensure!(dy <= 0.02, "case {case}: horizon anchor off by {dy:.4}");
                            anchored += 1;
                        }
                        layouts += 1;
                    }
                }
            }
        }
        for p in elements.iter().filter(|e| e.category.rule_kind() == RuleKind::Placement) {
            for l in elements.iter().filter(|e| e.category.rule_kind() == RuleKind::Layout) {
                if let Some(c) = propose_combined(p, l, dims, &cfg).map_err(|e| e.to_string())? {
                    ensure!(contains(&c.bbox, &union_of(l)), "case {case}: combined crop drops the layout");
                    let (dx, dy) = anchor_error(&c.bbox, center(&p.boxes()[0]), c.anchor.ok_or("combined without anchor")?);
                    ensure!(dx <= 0.02 && dy <= 0.02, "case {case}: combined anchor off by {dx:.4}/{dy:.4}");
                    combined += 1;
                }
            }
        }

        let seeds = rule_seeds(&elements, dims, &cfg).map_err(|e| e.to_string())?;
        let a = pad_with_perturbations(seeds.clone(), dims, &cfg);
        let b = pad_with_perturbations(seeds, dims, &cfg);
        ensure!(a.len() == 8, "case {case}: padding returned {}", a.len());
        ensure!(serde_json::to_vec(&a).unwrap() == serde_json::to_vec(&b).unwrap(), "case {case}: padding differs");
    }
    ensure!(anchored > 100 && layouts > 100 && combined > 20, "too few rule crops exercised");
    Ok(format!("200 configurations; {anchored} anchored, {layouts} layout, {combined} combined crops checked"))
}

// ---------------------------------------------------------------------------
// Renderer

fn seg_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    ((a.0 + t * dx - p.0).powi(2) + (a.1 + t * dy - p.1).powi(2)).sqrt()
}

/// Ideal strokes for one element box: the geometry each category should draw.
fn strokes(cat: ElementCategory, b: &PixelBox, w: f64, h: f64) -> Vec<((f64, f64), (f64, f64))> {
    let (x1, y1, x2, y2) = (b.x1(), b.y1(), b.x2(), b.y2());
    let (cx, cy) = center(b);
    let frame = vec![((x1, y1), (x2, y1)), ((x2, y1), (x2, y2)), ((x2, y2), (x1, y2)), ((x1, y2), (x1, y1))];
    use ElementCategory::*;
    match cat {
        RuleOfThirds | Center | GoldenRatio => frame,
        Horizontal => vec![((0.0, cy), (w, cy))],
        Vertical | Symmetric => vec![((cx, 0.0), (cx, h))],
        Diagonal => vec![((x1, y1), (x2, y2))],
        Curved => {
            let pts: Vec<(f64, f64)> = (0..=200)
                .map(|i| {
                    let t = f64::from(i) / 200.0;
                    (x1 + t * (x2 - x1), y2 - (y2 - y1) * 4.0 * t * (1.0 - t))
                })
                .collect();
            frame.into_iter().chain(pts.windows(2).map(|p| (p[0], p[1]))).collect()
        }
        Triangle => {
            let mut s = frame;
            s.extend([((x1, y2), (cx, y1)), ((cx, y1), (x2, y2))]);
            s
        }
        VanishingPoint => vec![((x1, cy), (x2, cy)), ((cx, y1), (cx, y2))],
    }
}

fn fixture_image(k: u32, w: u32, h: u32) -> RasterImage {
    let data = (0..w * h)
        .flat_map(|i| {
            let (x, y) = (i % w, i / w);
            [(x * 5 + k * 17) as u8, (y * 3 + k * 29) as u8, ((x ^ y) + k) as u8, 255]
        })
        .collect();
    RasterImage::new(w, h, data).unwrap()
}

fn renderer_determinism() -> Outcome {
    let style = OverlayStyle::default();
    let band = f64::from(style.stroke_width) + 1.0;
    let mut r = rng(0x80_0008);
    let mut changed_total = 0;
    let mut categories = HashSet::new();
    for k in 0..10u32 {
        let (w, h) = (r.random_range(48..=128u32), r.random_range(40..=100u32));
        let img = fixture_image(k, w, h);
        let elements: Vec<CompositionElement> = (0..3)
            .map(|j| {
                let cat = ElementCategory::ALL[((k * 3 + j) % 10) as usize];
                categories.insert(cat);
                let b = random_box(&mut r, w, h, 6);
                let mut bx = ibox(b.0, b.1, b.2, b.3);
                if j == 2 {
                    bx = PixelBox::new(bx.x1() + 0.4, bx.y1() + 0.3, bx.x2() - 0.2, bx.y2() - 0.6).unwrap();
                }
                CompositionElement::single(cat, bx)
            })
            .collect();

        let empty = render_enhancement(&img, &[], &style).map_err(|e| e.to_string())?;
        ensure!(empty.to_png() == img.to_png(), "fixture {k}: empty render altered the image");
        let a = render_enhancement(&img, &elements, &style).map_err(|e| e.to_string())?;
        let b = render_enhancement(&img, &elements, &style).map_err(|e| e.to_string())?;
        ensure!(a.to_png() == b.to_png(), "fixture {k}: repeated renders differ");

        let segs: Vec<_> = elements
            .iter()
            .flat_map(|e| strokes(e.category, &e.boxes()[0], f64::from(w), f64::from(h)))
            .collect();
        let palette: HashSet<[u8; 4]> = elements.iter().map(|e| style.color(e.category)).collect();
        let mut changed = 0;
        for y in 0..h {
            for x in 0..w {
                if a.pixel(x, y) == img.pixel(x, y) {
                    continue;
                }
                changed += 1;
                let p = (f64::from(x) + 0.5, f64::from(y) + 0.5);
                let d = segs.iter().map(|(s, t)| seg_distance(p, *s, *t)).fold(f64::INFINITY, f64::min);
                ensure!(d <= band, "fixture {k}: pixel ({x},{y}) changed {d:.2}px from any stroke");
                ensure!(palette.contains(&a.pixel(x, y)), "fixture {k}: pixel ({x},{y}) has a foreign color");
            }
        }
        ensure!(changed > 0, "fixture {k}: nothing was drawn");
        changed_total += changed;
    }
    ensure!(categories.len() == 10, "only {} categories exercised", categories.len());
    Ok(format!("10 fixtures, all 10 categories, {changed_total} changed pixels all within {band}px of a stroke"))
}

// ---------------------------------------------------------------------------
// End-to-end replay

const SCENES: [&str; 5] = ["horizon", "subject", "tower", "diagonal", "triangle"];

fn replay_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/replay")
}

fn end_to_end_replay() -> Outcome {
    let dir = replay_dir();
    let backend = ReplayBackend::play(dir.join("store")).map_err(|e| e.to_string())?;
    let mut cfg = PipelineConfig::default();
    cfg.proposal.rng_seed = 7;
    let prompts = PromptRegistry::default();
    let images: Vec<Vec<u8>> = SCENES.iter().map(|n| std::fs::read(dir.join(format!("images/{n}.png"))).unwrap()).collect();
    let render = |workers| -> Result<Vec<String>, String> {
        run_batch(&images, &backend, &cfg, &prompts, workers)
            .into_iter()
            .map(|o| o.map(|o| serde_json::to_string_pretty(&o.result).unwrap() + "\n").map_err(|e| e.to_string()))
            .collect()
    };
    let first = render(1)?;
    let second = render(4)?;
    ensure!(first == second, "bundles differ between runs");
    for (name, bundle) in SCENES.iter().zip(&first) {
        let golden = std::fs::read_to_string(dir.join(format!("golden/{name}.json"))).unwrap();
        ensure!(*bundle == golden, "{name}: bundle differs from the recorded one");
        let v: Value = serde_json::from_str(bundle).unwrap();
        let id = v["final_id"].as_str().ok_or("no final id")?;
        let member = v["candidates"]["candidates"]
            .as_array()
            .unwrap()
            .iter()
            .find(|c| c["id"] == id)
            .ok_or(format!("{name}: final id {id} not in the candidate set"))?;
        ensure!(member["box"] == v["final_box"], "{name}: final crop is not candidate {id}");
    }

    let malformed = std::fs::read(dir.join("images/malformed.png")).unwrap();
    let r = run_pipeline(&malformed, &backend, &cfg, &prompts).map_err(|e| e.to_string())?.result;
    let retried = |s: Stage| {
        r.transcripts.iter().filter(|t| t.stage == s).any(|t| t.attempt > 1)
            && r.transcripts.iter().any(|t| t.stage == s && matches!(t.outcome, StageOutcome::Error(_)))
    };
    ensure!(retried(Stage::Analysis) && retried(Stage::Proposal), "malformed replies were not retried");
    let decisions = r.transcripts.iter().filter(|t| t.stage == Stage::Decision).count();
    ensure!(decisions == cfg.max_retries as usize + 1, "{decisions} decision attempts");
    ensure!(r.fallback && r.final_id.as_char() == 'A', "no fallback to A");
    ensure!(r.candidates.get(r.final_id).map(|c| c.bbox) == Some(r.final_crop), "fallback crop is not A");
    ensure!(!r.warnings.is_empty(), "fallback left no warning");
    Ok(format!(
        "5 scenes byte-identical across runs and to the store; malformed: {} transcripts, fallback A, warning {:?}",
        r.transcripts.len(),
        r.warnings.last().unwrap()
    ))
}

// ---------------------------------------------------------------------------
// Preference study

const METHOD_A: &str = "gaic";
const METHOD_B: &str = "crop";

fn study_items(dir: &Path, n: usize, seed: u64) -> Vec<StudyItem> {
    let images: Vec<StudyImage> = (0..n)
        .map(|i| StudyImage {
            image_id: format!("photo{i:04}"),
            outputs: [METHOD_A, METHOD_B]
                .iter()
                .map(|m| {
                    let png = dir.join(format!("{m}-{i}.png"));
                    std::fs::write(&png, format!("{m}{i}")).unwrap();
                    (m.to_string(), CropOutput { png, bbox: None })
                })
                .collect::<BTreeMap<_, _>>(),
        })
        .collect();
    create_study(&images, &[MethodPair::new(METHOD_A, METHOD_B)], seed).unwrap()
}

fn side_for(item: &StudyItem, method: &str) -> Side {
    if item.left_method == method {
        Side::Left
    } else {
        Side::Right
    }
}

fn study_aggregation() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut r = rng(0x90_0009);

    // 150 images x 10 sessions, 312 of the 1500 votes for the first method.
    let items = study_items(tmp.path(), 150, 5);
    let study = Study::open(items.clone(), 5, &tmp.path().join("headline")).map_err(|e| e.to_string())?;
    let sessions: Vec<String> = (0..10).map(|_| study.new_session().unwrap().session_id).collect();
    let mut slots: Vec<(usize, usize)> = (0..10).flat_map(|s| (0..150).map(move |i| (s, i))).collect();
    slots.shuffle(&mut r);
    for (k, &(s, i)) in slots.iter().enumerate() {
        let method = if k < 312 { METHOD_A } else { METHOD_B };
        study.record_vote(&sessions[s], &items[i].item_id, side_for(&items[i], method)).map_err(|e| e.to_string())?;
    }
    let res = study.results();
    let p = &res.pairs[0];
    ensure!(res.total_votes == 1500 && p.votes_a == 312 && p.votes_b == 1188, "counts {p:?}");
    let shown = (format!("{:.1}", p.preference_rate_a), format!("{:.1}", p.preference_rate_b));
    ensure!(shown == ("20.8".into(), "79.2".into()), "rates {shown:?}");
    drop(study);
    let reopened = Study::open(items, 5, &tmp.path().join("headline")).map_err(|e| e.to_string())?;
    ensure!(reopened.results() == res, "results changed after reopening the log");

    // Random log with duplicates against an independent recount of the file.
    let items = study_items(tmp.path(), 40, 9);
    let study = Study::open(items.clone(), 9, &tmp.path().join("random")).map_err(|e| e.to_string())?;
    let sessions: Vec<String> = (0..7).map(|_| study.new_session().unwrap().session_id).collect();
    for _ in 0..600 {
        let s = &sessions[r.random_range(0..sessions.len())];
        let item = &items[r.random_range(0..items.len())];
        let side = if r.random_bool(0.37) { Side::Left } else { Side::Right };
        study.record_vote(s, &item.item_id, side).map_err(|e| e.to_string())?;
    }
    let by_id: HashMap<&str, &StudyItem> = items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let text = std::fs::read_to_string(study.vote_log_path()).unwrap();
    let mut first: HashSet<(String, String)> = HashSet::new();
    let (mut a, mut b) = (0u64, 0u64);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let key = (v["session"].as_str().unwrap().to_string(), v["item_id"].as_str().unwrap().to_string());
        if !first.insert(key) {
            continue;
        }
        let item = by_id[v["item_id"].as_str().unwrap()];
        let chosen = if v["choice"] == "left" { &item.left_method } else { &item.right_method };
        if chosen == METHOD_A {
            a += 1;
        } else {
            b += 1;
        }
    }
    let res = study.results();
    ensure!((res.pairs[0].votes_a, res.pairs[0].votes_b) == (a, b), "service {:?} vs recount {a}/{b}", res.pairs[0]);

    // Eight concurrent writers.
    let items = study_items(tmp.path(), 200, 13);
    let study = Arc::new(Study::open(items.clone(), 13, &tmp.path().join("stress")).map_err(|e| e.to_string())?);
    std::thread::scope(|scope| {
        for w in 0..8 {
            let study = Arc::clone(&study);
            let items = &items;
            scope.spawn(move || {
                let s = study.new_session().unwrap().session_id;
                for (k, it) in items.iter().enumerate() {
                    let side = if (k + w) % 2 == 0 { Side::Left } else { Side::Right };
                    study.record_vote(&s, &it.item_id, side).unwrap();
                }
            });
        }
    });
    let path = study.vote_log_path();
    drop(study);
    let lines = std::fs::read_to_string(&path).unwrap().lines().count();
    let reopened = Study::open(items, 13, &tmp.path().join("stress")).map_err(|e| e.to_string())?;
    let votes: Vec<Vote> = reopened.votes();
    ensure!(lines == 1600 && votes.len() == 1600, "{lines} lines, {} votes after reopen", votes.len());
    ensure!(distinct_votes(&votes).len() == 1600, "duplicate keys in the stress log");
    Ok(format!("312/1188 -> {}% / {}%; random log of {a}+{b} distinct votes recounted; 8x200 writers -> 1600 votes", shown.0, shown.1))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 10] = [
        ("metric oracle equivalence", metric_oracle),
        ("equivalence threshold exactness", epsilon_protocol),
        ("evaluation self-consistency", self_consistency),
        ("ACC brute-force equivalence", acc_brute_force),
        ("preference objective math", dpo_math),
        ("dataset invariants", dataset_invariants),
        ("rule-engine invariants", rule_engine),
        ("renderer determinism", renderer_determinism),
        ("end-to-end replay", end_to_end_replay),
        ("study aggregation", study_aggregation),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS  {name:<34} {detail} [{took:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<34} {why} [{took:.2?}]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
