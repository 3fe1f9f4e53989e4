use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use exedit_core::dataset::{export_review_queue, ingest_review, load_records, pair_by_instruction, Candidate, Manifest};
use exedit_core::edit_embedding::{AdapterProjection, ImageProjector};
use exedit_core::encoders::ImageEncoder;
use exedit_core::image_ops::{ensure_size, load_image, save_png, IMAGE_SIZE};
use exedit_core::inversion::InversionCache;
use exedit_core::metrics::Metrics;
use exedit_core::pipeline::{
    ablate, apply_edit, lambda_sweep, write_bundle, write_sweep_bundle, EditOptions, EditResult, Editor, ExemplarTriplet,
    Pipeline, Stage, StageObserver, StubEditor,
};
use exedit_core::reference::{ReferenceModels, DEFAULT_SEED};
use exedit_core::vlm::{HeuristicVlm, HttpVlm, VlmBackend};
use exedit_service::{EditorLoader, ServiceConfig};
use serde_json::json;
use tracing::info;

use crate::args::{Backend, ConfigFile, CurateCommand, ServeArgs, Settings, TripletArgs, VlmKind};

const VLM_TIMEOUT: Duration = Duration::from_secs(120);

/// Logs stage boundaries to stderr.
struct LogObserver;

impl StageObserver for LogObserver {
    fn stage_started(&mut self, stage: Stage) -> exedit_core::Result<()> {
        info!("{stage}...");
        Ok(())
    }

    fn stage_finished(&mut self, stage: Stage, seconds: f64) {
        info!("{stage} done in {seconds:.2}s");
    }
}

fn vlm_backend(s: &Settings) -> Result<Arc<dyn VlmBackend>> {
    Ok(match s.vlm {
        VlmKind::Heuristic => Arc::new(HeuristicVlm::new()),
        VlmKind::Http => match &s.vlm_url {
            Some(url) => Arc::new(HttpVlm::new(url.clone(), VLM_TIMEOUT)?),
            None => Arc::new(HttpVlm::from_env(VLM_TIMEOUT)?),
        },
    })
}

pub fn reference_pipeline(s: &Settings) -> Result<Pipeline> {
    let models = ReferenceModels::new(DEFAULT_SEED);
    let mut pipeline = Pipeline::reference(&models, vlm_backend(s)?)?;
    if let Some(path) = &s.adapter_weights {
        let projection = AdapterProjection::from_safetensors(path)
            .with_context(|| format!("loading adapter weights {}", path.display()))?;
        let encoder: Arc<dyn ImageEncoder> = models.image_encoder.clone();
        pipeline = pipeline.with_projector(ImageProjector::new(encoder, Arc::new(projection)));
    }
    if let Some(dir) = &s.cache_dir {
        pipeline = pipeline.with_cache_dir(dir);
    }
    Ok(pipeline)
}

pub fn editor(s: &Settings) -> Result<Arc<dyn Editor>> {
    Ok(match s.backend {
        Backend::Stub => Arc::new(StubEditor),
        Backend::Reference => Arc::new(reference_pipeline(s)?),
    })
}

fn load_triplet(t: &TripletArgs) -> Result<ExemplarTriplet> {
    ExemplarTriplet::load(t.id.clone(), &t.x, &t.xedit, &t.y, None).context("loading input images")
}

fn out_dir(s: &Settings, default: &str) -> PathBuf {
    s.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn result_summary(r: &EditResult) -> serde_json::Value {
    json!({
        "lambda": r.provenance.lambda_used,
        "caption": r.caption(),
        "output_sha256": r.provenance.output_sha256,
        "seconds": r.timings().total(),
    })
}

fn print_plan(editor: &dyn Editor, t: &ExemplarTriplet, lambdas: &[f64], opts: &EditOptions, s: &Settings) -> Result<()> {
    let plan = editor.plan(t, lambdas, opts)?;
    if s.json {
        return print_json(&serde_json::to_value(&plan)?);
    }
    println!("plan for {} on {} (vlm {})", plan.triplet_id, plan.backbone_id, plan.vlm_id);
    println!("lambdas {:?}, seed {}", plan.lambdas, plan.options.seed);
    for st in &plan.stages {
        println!("  {:<11} {:<8} {}", st.stage.to_string(), format!("{:?}", st.action).to_lowercase(), st.detail);
    }
    Ok(())
}

pub fn edit(s: &Settings, inputs: &TripletArgs, opts: &EditOptions) -> Result<()> {
    let editor = editor(s)?;
    let t = load_triplet(inputs)?;
    if s.dry_run {
        return print_plan(editor.as_ref(), &t, &[opts.lambda], opts, s);
    }
    let r = apply_edit(editor.as_ref(), &t, opts, &mut LogObserver)?;
    let dir = out_dir(s, "exedit-out");
    let files = write_bundle(&r, &dir)?;
    if s.json {
        let mut v = result_summary(&r);
        v["out"] = json!(dir);
        v["files"] = json!(files);
        return print_json(&v);
    }
    println!("caption: {}", r.caption());
    println!("wrote {} ({:.1}s)", dir.join("result.png").display(), r.timings().total());
    Ok(())
}

pub fn sweep(s: &Settings, inputs: &TripletArgs, opts: &EditOptions, lambdas: &[f64]) -> Result<()> {
    let editor = editor(s)?;
    let t = load_triplet(inputs)?;
    if s.dry_run {
        return print_plan(editor.as_ref(), &t, lambdas, opts, s);
    }
    let results = lambda_sweep(editor.as_ref(), &t, lambdas, opts, &mut LogObserver)?;
    let dir = out_dir(s, "exedit-sweep");
    let files = write_sweep_bundle(&results, &dir)?;
    if s.json {
        return print_json(&json!({
            "out": dir,
            "files": files,
            "results": results.iter().map(result_summary).collect::<Vec<_>>(),
        }));
    }
    println!("caption: {}", results[0].caption());
    for (i, r) in results.iter().enumerate() {
        println!("lambda {:<6} -> {}", r.provenance.lambda_used, dir.join(format!("result_{i}.png")).display());
    }
    Ok(())
}

pub fn ablate_cmd(s: &Settings, inputs: &TripletArgs, opts: &EditOptions) -> Result<()> {
    let editor = editor(s)?;
    let t = load_triplet(inputs)?;
    if s.dry_run {
        return print_plan(editor.as_ref(), &t, &[opts.lambda], opts, s);
    }
    let results = ablate(editor.as_ref(), &t, opts, &mut LogObserver)?;
    let dir = out_dir(s, "exedit-ablate");
    let mut summary = serde_json::Map::new();
    for (name, r) in &results {
        write_bundle(r, &dir.join(name))?;
        summary.insert(name.clone(), result_summary(r));
    }
    if s.json {
        return print_json(&json!({ "out": dir, "variants": summary }));
    }
    for name in results.keys() {
        println!("{name:<15} {}", dir.join(name).join("result.png").display());
    }
    Ok(())
}

pub fn invert(s: &Settings, y: &Path, steps: Option<usize>, recon: Option<&Path>, cfg: &ConfigFile) -> Result<()> {
    let steps = steps.or(cfg.inversion_steps).unwrap_or(EditOptions::default().inversion_steps);
    if steps == 0 {
        bail!("inversion steps must be positive");
    }
    if s.backend == Backend::Stub {
        bail!("the stub backend has no inversion; use --backend reference");
    }
    let settings = Settings {
        cache_dir: Some(s.cache_dir.clone().unwrap_or_else(|| PathBuf::from(".exedit-cache"))),
        ..s.clone()
    };
    let cache_dir = settings.cache_dir.clone().expect("set above");
    let pipeline = reference_pipeline(&settings)?;
    let image = ensure_size(&load_image(y)?, IMAGE_SIZE, "y");
    let key = pipeline.inversion_key(&image, steps);
    let path = InversionCache::new(&cache_dir).path(&key);
    if s.dry_run {
        let cached = path.exists();
        if s.json {
            return print_json(&json!({ "cache_path": path, "cached": cached, "steps": steps }));
        }
        println!("{} ({})", path.display(), if cached { "cached" } else { "would invert" });
        return Ok(());
    }
    let (inv, hit) = pipeline.invert_cached(&image, steps, &mut |i, n| {
        if i % 100 == 0 || i == n {
            info!("inverting {i}/{n}");
        }
    })?;
    if let Some(out) = recon {
        let img = pipeline.reconstruct(&inv, &mut |_, _| {})?;
        save_png(&img, out)?;
    }
    if s.json {
        return print_json(&json!({ "cache_path": path, "cached": hit, "steps": steps, "seed": s.seed }));
    }
    println!("{}", path.display());
    Ok(())
}

pub fn eval(s: &Settings, manifest_path: &Path, results: &Path, method: &str) -> Result<()> {
    let manifest = Manifest::load(manifest_path).with_context(|| format!("loading {}", manifest_path.display()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    if s.dry_run {
        let found = manifest
            .accepted()
            .filter(|e| results.join(&e.id).join("result.png").exists() || results.join(format!("{}.png", e.id)).exists())
            .count();
        println!("{} accepted entries, {found} with results in {}", manifest.accepted().count(), results.display());
        return Ok(());
    }
    let metrics = Metrics::reference(&ReferenceModels::new(DEFAULT_SEED));
    let mut report = metrics.evaluate(&manifest, base, results);
    report.metadata.options = json!({ "results": results, "method": method, "seed": s.seed });
    let out = out_dir(s, &results.to_string_lossy());
    std::fs::create_dir_all(&out)?;
    report.write_csv(&out.join("metrics.csv"))?;
    report.write_json(&out.join("metrics.json"))?;
    if s.json {
        return print_json(&serde_json::to_value(&report)?);
    }
    print!("{}", report.summary_table(method));
    for row in report.rows.iter().filter(|r| r.is_failed()) {
        println!("  failed {}: {}", row.id, row.error.as_deref().unwrap_or(""));
    }
    Ok(())
}

pub fn curate(s: &Settings, action: &CurateCommand) -> Result<()> {
    match action {
        CurateCommand::Pair { records } => {
            let recs = load_records(records)?;
            let candidates = pair_by_instruction(&recs);
            let out = out_dir(s, "candidates.json");
            if !s.dry_run {
                if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(&out, serde_json::to_string_pretty(&candidates)? + "\n")?;
            }
            if s.json {
                return print_json(&json!({ "records": recs.len(), "candidates": candidates.len(), "out": out }));
            }
            println!("{} records -> {} candidates ({})", recs.len(), candidates.len(), out.display());
        }
        CurateCommand::Export { candidates } => {
            let text = std::fs::read_to_string(candidates).with_context(|| format!("reading {}", candidates.display()))?;
            let cands: Vec<Candidate> = serde_json::from_str(&text)?;
            let out = out_dir(s, "review");
            if s.dry_run {
                println!("would write {} contact sheets and review.csv to {}", cands.len(), out.display());
                return Ok(());
            }
            let export = export_review_queue(&cands, &out)?;
            if s.json {
                return print_json(&json!({ "csv": export.csv, "candidates": export.candidates, "sheets": export.sheets.len() }));
            }
            println!("review queue: {} ({} sheets)", export.csv.display(), export.sheets.len());
        }
        CurateCommand::Ingest { review, manifest_dir } => {
            let report = ingest_review(review, manifest_dir)?;
            let path = manifest_dir.join("manifest.json");
            if !s.dry_run {
                std::fs::create_dir_all(manifest_dir)?;
                report.manifest.save(&path)?;
            }
            if s.json {
                return print_json(&json!({
                    "manifest": path,
                    "accepted": report.accepted,
                    "rejected": report.rejected,
                    "pending": report.pending,
                    "errors": report.errors,
                    "counts": report.manifest.counts,
                }));
            }
            println!(
                "accepted {}, rejected {}, pending {}, errors {} -> {}",
                report.accepted,
                report.rejected,
                report.pending,
                report.errors.len(),
                path.display()
            );
            for e in &report.errors {
                println!("  row {} ({}): {}", e.row, e.id, e.message);
            }
        }
    }
    Ok(())
}

pub fn serve(s: &Settings, args: &ServeArgs, cfg: &ConfigFile) -> Result<()> {
    let d = ServiceConfig::default();
    let config = ServiceConfig {
        bind: args.bind.or(cfg.bind).unwrap_or(d.bind),
        port: args.port.or(cfg.port).unwrap_or(d.port),
        queue_cap: args.queue_cap.or(cfg.queue_cap).unwrap_or(d.queue_cap),
        result_ttl: args
            .result_ttl_secs
            .or(cfg.result_ttl_secs)
            .map(Duration::from_secs)
            .unwrap_or(d.result_ttl),
        results_dir: s.out.clone().unwrap_or(d.results_dir),
        static_dir: args.static_dir.clone().or_else(|| cfg.static_dir.clone()),
        ..d
    };
    if s.dry_run {
        println!("would serve on http://{} with backend {:?}, queue cap {}", config.addr(), s.backend, config.queue_cap);
        return Ok(());
    }
    let settings = s.clone();
    let loader: EditorLoader = Box::new(move || editor(&settings).map_err(|e| exedit_core::Error::Config(format!("{e:#}"))));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(exedit_service::serve(config, loader))?;
    Ok(())
}
