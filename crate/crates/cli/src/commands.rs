//! Subcommand bodies. Each resolves its configuration, does its work and
//! records every output in the run manifest.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use crop_core::chat::sha256_hex;
use crop_core::composition::generate_candidates;
use crop_core::dataset::{
    build_crp_samples, build_dpo_pairs, build_sft_decision, enhanced_name, read_jsonl, write_jsonl_to, AnnotatedImage,
    DatasetError, MosStrata, ScoredImage,
};
use crop_core::eval::{aggregate, emit_report, join_records, GroundTruthRecord, PredictionRecord, ReportFormat};
use crop_core::geometry::{ImageDims, DEFAULT_EQUIVALENCE_EPSILON};
use crop_core::objectives::{
    batch_mean, check_dpo_gradient, dpo_loss, reward_margin, sft_loss, DpoConfig, LogProbRecord,
};
use crop_core::overlay::{render_enhancement, RasterImage};
use crop_core::parse::parse_analysis;
use crop_core::pipeline::{
    run_batch, BackendConfig, ChatBackend, HttpChatBackend, PipelineConfig, PipelineMode, ReplayBackend, ReplaySpec,
};
use crop_core::prompts::PromptRegistry;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::CliError;
use crate::manifest::Recorder;
use crate::{
    BuildCrpArgs, BuildDpoArgs, BuildSftArgs, CommonArgs, EnhanceArgs, EvalArgs, FormatArg, LossCheckArgs, ModeArg,
    PromptArgs, ProposeArgs, RunArgs, ServeStudyArgs, StrataArgs,
};

/// Environment variable that overrides `--endpoint`.
pub const ENDPOINT_ENV: &str = "CROP_ENDPOINT";

/// Contents of a `--config` file. Every section is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub epsilon: Option<f64>,
    pub backend: BackendConfig,
    pub pipeline: PipelineConfig,
    pub strata: MosStrata,
    pub dpo: DpoConfig,
}

fn load_config(common: &CommonArgs) -> Result<FileConfig, CliError> {
    match &common.config {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
        }
    }
}

fn resolve_seed(common: &CommonArgs, cfg: &mut FileConfig) -> u64 {
    let seed = common.seed.or(cfg.seed).unwrap_or(cfg.pipeline.proposal.rng_seed);
    cfg.seed = Some(seed);
    cfg.pipeline.proposal.rng_seed = seed;
    seed
}

fn load_prompts(args: &PromptArgs) -> Result<PromptRegistry, CliError> {
    match &args.prompts {
        None => Ok(PromptRegistry::default()),
        Some(p) => PromptRegistry::load_overrides(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display()))),
    }
}

fn strata(args: &StrataArgs, cfg: &FileConfig) -> Result<MosStrata, CliError> {
    let s = MosStrata {
        good_threshold: args.good_threshold.unwrap_or(cfg.strata.good_threshold),
        poor_threshold: args.poor_threshold.unwrap_or(cfg.strata.poor_threshold),
    };
    s.validate().map_err(CliError::usage)?;
    Ok(s)
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    read_jsonl(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn jsonl_bytes<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_jsonl_to(&mut buf, records).expect("in-memory write");
    buf
}

/// Per-image seed that does not depend on input order.
fn image_seed(seed: u64, image: &str) -> u64 {
    let digest = sha256_hex(format!("{seed}:{image}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

fn config_value(cfg: &FileConfig, extra: Value) -> Value {
    let mut v = serde_json::to_value(cfg).expect("configs serialize");
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    v
}

// ---------------------------------------------------------------------------

fn build_backend(backend: &BackendConfig, replay: &ReplaySpec) -> Result<Box<dyn ChatBackend>, CliError> {
    Ok(match replay {
        ReplaySpec::Off => Box::new(HttpChatBackend::new(backend.clone())?),
        ReplaySpec::Record(dir) => Box::new(ReplayBackend::record(dir, Box::new(HttpChatBackend::new(backend.clone())?))?),
        ReplaySpec::Play(dir) => Box::new(ReplayBackend::play(dir)?),
    })
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

pub fn run(a: RunArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let seed = resolve_seed(&a.common, &mut cfg);
    if let Some(v) = &a.endpoint {
        cfg.backend.endpoint = v.clone();
    }
    if let Ok(v) = std::env::var(ENDPOINT_ENV) {
        if !v.is_empty() {
            cfg.backend.endpoint = v;
        }
    }
    if let Some(v) = &a.model {
        cfg.backend.model = v.clone();
    }
    if let Some(v) = a.temperature {
        cfg.backend.temperature = v;
    }
    if let Some(v) = a.top_p {
        cfg.backend.top_p = v;
    }
    if let Some(v) = a.max_retries {
        cfg.pipeline.max_retries = v;
    }
    if let Some(m) = a.mode {
        cfg.pipeline.mode = match m {
            ModeArg::Hybrid => PipelineMode::Hybrid,
            ModeArg::VlmOnly => PipelineMode::VlmOnly,
            ModeArg::Baseline => PipelineMode::Baseline,
        };
    }
    let workers = a.workers.or(cfg.workers).unwrap_or(1).max(1);
    cfg.workers = Some(workers);
    cfg.backend.validate().map_err(CliError::usage)?;
    let replay: ReplaySpec = a.replay.parse().map_err(CliError::usage)?;
    let prompts = load_prompts(&a.prompts)?;

    let mut stems = HashSet::new();
    for p in &a.image {
        if !stems.insert(stem(p)) {
            return Err(CliError::usage(format!("two inputs share the file stem {:?}", stem(p))));
        }
    }
    let backend = build_backend(&cfg.backend, &replay)?;
    let mut rec = Recorder::new(
        "run",
        &a.common.out,
        config_value(&cfg, json!({"replay": a.replay, "prompts": a.prompts.prompts})),
        seed,
    )?;
    let mut images = Vec::with_capacity(a.image.len());
    for p in &a.image {
        rec.input(p);
        images.push(read_file(p)?);
    }

    let mut first_error = None;
    let outcomes = run_batch(&images, &backend, &cfg.pipeline, &prompts, workers);
    for ((path, bytes), outcome) in a.image.iter().zip(&images).zip(outcomes) {
        let dir = stem(path);
        match outcome {
            Ok(out) => {
                let r = &out.result;
                rec.write_json(&format!("{dir}/result.json"), r)?;
                if let Some(e) = &out.enhanced {
                    rec.write(&format!("{dir}/enhanced.png"), &e.to_png())?;
                }
                for (id, thumb) in &out.thumbnails {
                    rec.write(&format!("{dir}/decision/{id}.png"), &thumb.to_png())?;
                }
                let source = RasterImage::from_png(bytes)?;
                rec.write(&format!("{dir}/final.png"), &source.crop_box(&r.final_crop)?.to_png())?;
                for w in &r.warnings {
                    log::warn!("{}: {w}", path.display());
                }
            }
            Err(e) => {
                rec.write_json(
                    &format!("{dir}/error.json"),
                    &json!({"stage": e.stage, "error": e.kind.to_string(), "transcripts": e.transcripts}),
                )?;
                log::error!("{}: {e}", path.display());
                first_error.get_or_insert(CliError::from(e));
            }
        }
    }
    rec.finish()?;
    first_error.map_or(Ok(()), Err)
}

// ---------------------------------------------------------------------------

fn load_elements(path: &Path, dims: ImageDims) -> Result<Vec<crop_core::CompositionElement>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_analysis(&text, dims).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn enhance(a: EnhanceArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let seed = resolve_seed(&a.common, &mut cfg);
    let image = RasterImage::from_png(&read_file(&a.image)?)?;
    let elements = load_elements(&a.elements, image.dims())?;
    let mut rec = Recorder::new("enhance", &a.common.out, serde_json::to_value(&cfg.pipeline.style).unwrap(), seed)?;
    rec.input(&a.image);
    rec.input(&a.elements);
    let out = render_enhancement(&image, &elements, &cfg.pipeline.style)?;
    rec.write(&format!("{}.enhanced.png", stem(&a.image)), &out.to_png())?;
    rec.finish()
}

fn parse_size(s: &str) -> Result<ImageDims, CliError> {
    let bad = || CliError::usage(format!("size must look like 640x480, got {s:?}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (w, h) = (w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?);
    ImageDims::new(w, h).map_err(CliError::usage)
}

pub fn propose(a: ProposeArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let seed = resolve_seed(&a.common, &mut cfg);
    let dims = match (&a.image, &a.size) {
        (Some(p), _) => RasterImage::from_png(&read_file(p)?)?.dims(),
        (None, Some(s)) => parse_size(s)?,
        (None, None) => unreachable!("clap requires one of them"),
    };
    let elements = load_elements(&a.elements, dims)?;
    let mut rec = Recorder::new("propose", &a.common.out, serde_json::to_value(&cfg.pipeline.proposal).unwrap(), seed)?;
    rec.input(&a.elements);
    let set = generate_candidates(&elements, dims, &cfg.pipeline.proposal)?;
    rec.write_json("candidates.json", &set)?;
    rec.finish()
}

// ---------------------------------------------------------------------------

pub fn build_crp(a: BuildCrpArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let seed = resolve_seed(&a.common, &mut cfg);
    let prompts = load_prompts(&a.prompts)?;
    let records: Vec<AnnotatedImage> = read_records(&a.input)?;
    let mut rec = Recorder::new("build-crp", &a.common.out, serde_json::to_value(&cfg.pipeline.proposal).unwrap(), seed)?;
    rec.input(&a.input);
    let (mut analysis, mut proposal) = (Vec::new(), Vec::new());
    for r in &records {
        let mut pc = cfg.pipeline.proposal.clone();
        pc.rng_seed = image_seed(seed, &r.image);
        match build_crp_samples(r, &pc, &prompts) {
            Ok((an, pr)) => {
                analysis.push(an);
                proposal.push(pr);
            }
            Err(DatasetError::EmptyElements) => log::warn!("{}: no elements, skipped", r.image),
            Err(e) => return Err(CliError::data(format!("{}: {e}", r.image))),
        }
        if let Some(dir) = &a.images_dir {
            let src = dir.join(&r.image);
            let img = RasterImage::from_png(&read_file(&src)?)?;
            if img.dims() != r.dims() {
                return Err(CliError::data(format!("{}: size {} does not match the record", src.display(), img.dims())));
            }
            let out = render_enhancement(&img, &r.elements, &cfg.pipeline.style)?;
            rec.write(&enhanced_name(&r.image), &out.to_png())?;
        }
    }
    rec.write("crp_analysis.jsonl", &jsonl_bytes(&analysis))?;
    rec.write("crp_proposal.jsonl", &jsonl_bytes(&proposal))?;
    println!("{} analysis and {} proposal samples", analysis.len(), proposal.len());
    rec.finish()
}

pub fn build_sft(a: BuildSftArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let seed = resolve_seed(&a.common, &mut cfg);
    let strata = strata(&a.strata, &cfg)?;
    let prompts = load_prompts(&a.prompts)?;
    let records: Vec<ScoredImage> = read_records(&a.input)?;
    let mut rec = Recorder::new("build-sft", &a.common.out, serde_json::to_value(strata).unwrap(), seed)?;
    rec.input(&a.input);
    let mut samples = Vec::new();
    for r in &records {
        match build_sft_decision(r, &strata, image_seed(seed, &r.image), &prompts) {
            Ok(s) => samples.push(s),
            Err(e @ DatasetError::InsufficientCrops { .. }) => log::warn!("{}: {e}, skipped", r.image),
            Err(e) => return Err(CliError::data(format!("{}: {e}", r.image))),
        }
    }
    rec.write("sft_decision.jsonl", &jsonl_bytes(&samples))?;
    println!("{} decision samples from {} images", samples.len(), records.len());
    rec.finish()
}

pub fn build_dpo(a: BuildDpoArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let seed = resolve_seed(&a.common, &mut cfg);
    let strata = strata(&a.strata, &cfg)?;
    let prompts = load_prompts(&a.prompts)?;
    let mut rec = Recorder::new(
        "build-dpo",
        &a.common.out,
        json!({"strata": strata, "pairs_per_image": a.pairs_per_image}),
        seed,
    )?;
    let pairs = match (&a.input, &a.votes, &a.study) {
        (Some(input), _, _) => {
            rec.input(input);
            let records: Vec<ScoredImage> = read_records(input)?;
            let mut pairs = Vec::new();
            for r in &records {
                match build_dpo_pairs(r, &strata, a.pairs_per_image, image_seed(seed, &r.image), &prompts) {
                    Ok(p) => pairs.extend(p),
                    Err(e @ DatasetError::NoPreferenceSignal) => log::warn!("{}: {e}, skipped", r.image),
                    Err(e) => return Err(CliError::data(format!("{}: {e}", r.image))),
                }
            }
            pairs
        }
        (None, Some(votes), Some(study)) => {
            rec.input(votes);
            rec.input(study);
            let spec = crop_study::StudySpec::load(study)?;
            let items = spec.items()?;
            let votes: Vec<crop_study::Vote> = read_records(votes)?;
            crop_study::export_votes_to_dpo(&votes, &items, &spec.images, &prompts)?
        }
        _ => return Err(CliError::usage("give --input, or --votes with --study")),
    };
    rec.write("dpo_pairs.jsonl", &jsonl_bytes(&pairs))?;
    println!("{} preference pairs", pairs.len());
    rec.finish()
}

// ---------------------------------------------------------------------------

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let seed = resolve_seed(&a.common, &mut cfg);
    let epsilon = a.epsilon.or(cfg.epsilon).unwrap_or(DEFAULT_EQUIVALENCE_EPSILON);
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(CliError::usage(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    let preds: Vec<PredictionRecord> = read_records(&a.predictions)?;
    let truths: Vec<GroundTruthRecord> = read_records(&a.ground_truth)?;
    let records = join_records(&preds, &truths)?;
    let report = aggregate(&records, epsilon)?;
    let (format, ext) = match a.format {
        FormatArg::Json => (ReportFormat::Json, "json"),
        FormatArg::Csv => (ReportFormat::Csv, "csv"),
        FormatArg::Text => (ReportFormat::Text, "txt"),
    };
    let body = emit_report(&report, format);
    let mut rec = Recorder::new("eval", &a.common.out, json!({"epsilon": epsilon}), seed)?;
    rec.input(&a.predictions);
    rec.input(&a.ground_truth);
    rec.write(&format!("report.{ext}"), &body)?;
    print!("{}", String::from_utf8_lossy(&body));
    rec.finish()
}

#[derive(Serialize)]
struct PairReport {
    pair_id: String,
    sft_loss_chosen: f64,
    reward_margin: f64,
    dpo_loss: f64,
    max_rel_error: f64,
    max_abs_error: f64,
    passes: bool,
}

pub fn loss_check(a: LossCheckArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    let seed = resolve_seed(&a.common, &mut cfg);
    let dpo = DpoConfig::new(a.beta.unwrap_or(cfg.dpo.beta)).map_err(CliError::usage)?;
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(CliError::usage(format!("step must be positive, got {}", a.step)));
    }
    let records: Vec<LogProbRecord> = read_records(&a.input)?;
    let mut rows = Vec::with_capacity(records.len());
    for r in &records {
        let check = check_dpo_gradient(&r.pair, &dpo, a.step)?;
        rows.push(PairReport {
            pair_id: r.pair_id.clone(),
            sft_loss_chosen: sft_loss(&r.pair.policy_w),
            reward_margin: reward_margin(&r.pair, &dpo)?,
            dpo_loss: dpo_loss(&r.pair, &dpo)?,
            max_rel_error: check.max_rel_error,
            max_abs_error: check.max_abs_error,
            passes: check.passes(a.tolerance),
        });
    }
    let losses: Vec<f64> = rows.iter().map(|r| r.dpo_loss).collect();
    let all_pass = rows.iter().all(|r| r.passes);
    let report = json!({
        "beta": dpo.beta,
        "step": a.step,
        "tolerance": a.tolerance,
        "pairs": rows,
        "mean_dpo_loss": batch_mean(&losses).ok(),
        "max_rel_error": rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        "all_pass": all_pass,
    });
    let mut rec = Recorder::new("loss-check", &a.common.out, json!({"dpo": dpo}), seed)?;
    rec.input(&a.input);
    rec.write_json("loss_report.json", &report)?;
    for r in &rows {
        println!(
            "{}\tdpo_loss={:.12}\tmargin={:.6}\tgrad_rel_err={:.2e}\t{}",
            r.pair_id,
            r.dpo_loss,
            r.reward_margin,
            r.max_rel_error,
            if r.passes { "ok" } else { "FAIL" }
        );
    }
    rec.finish()?;
    if all_pass {
        Ok(())
    } else {
        Err(CliError::data(format!("gradient check exceeded tolerance {}", a.tolerance)))
    }
}

// ---------------------------------------------------------------------------

pub fn serve_study(a: ServeStudyArgs) -> Result<(), CliError> {
    let spec = crop_study::StudySpec::load(&a.study)?;
    let items = spec.items()?;
    let mut rec = Recorder::new(
        "serve-study",
        &a.data_dir,
        json!({"bind": a.bind.to_string(), "items": items.len(), "ui_dir": a.ui_dir}),
        spec.seed,
    )?;
    rec.input(&a.study);
    let study = Arc::new(crop_study::Study::open(items, spec.seed, &a.data_dir)?);
    let opts = crop_study::ServeOptions {
        operator_token: a.operator_token.clone(),
        ui_dir: a.ui_dir.clone(),
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::data(format!("runtime: {e}")))?;
    runtime
        .block_on(crop_study::serve(a.bind, study, opts))
        .map_err(|e| CliError::data(format!("{}: {e}", a.bind)))?;
    rec.finish()
}
