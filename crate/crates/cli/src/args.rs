use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use exedit_core::injection::InjectionConfig;
use exedit_core::pipeline::{Ablations, EditOptions};
use serde::Deserialize;

/// Exemplar-based image editing: learn an edit from a before/after pair and
/// apply it to a new image.
#[derive(Debug, Parser)]
#[command(name = "exedit", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed recorded with every run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Print the resolved plan without running any model.
    #[arg(long, global = true)]
    pub dry_run: bool,

    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// JSON file of defaults. Flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, value_enum, env = "EXEDIT_BACKEND")]
    pub backend: Option<Backend>,

    #[arg(long, global = true, value_enum)]
    pub vlm: Option<VlmKind>,

    /// Remote VLM endpoint, used with `--vlm http`.
    #[arg(long, global = true, env = exedit_core::vlm::VLM_URL_ENV)]
    pub vlm_url: Option<String>,

    /// Image-prompt adapter projection weights (safetensors).
    #[arg(long, global = true, value_name = "FILE")]
    pub adapter_weights: Option<PathBuf>,

    /// Directory for cached inversions.
    #[arg(long, global = true, env = "EXEDIT_CACHE_DIR", value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,

    /// Output directory or file.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Built-in reference models.
    Reference,
    /// Deterministic blur-and-tint fake, no models.
    Stub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VlmKind {
    Heuristic,
    Http,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Apply the edit shown by x -> x_edit to y.
    Edit {
        #[command(flatten)]
        inputs: TripletArgs,
        #[command(flatten)]
        options: OptionArgs,
    },
    /// Run several edit weights, sharing captioning and inversion.
    Sweep {
        #[command(flatten)]
        inputs: TripletArgs,
        #[command(flatten)]
        options: OptionArgs,
        /// Comma-separated edit weights.
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        lambdas: Vec<f64>,
    },
    /// Run the full method and each single-component ablation.
    Ablate {
        #[command(flatten)]
        inputs: TripletArgs,
        #[command(flatten)]
        options: OptionArgs,
    },
    /// Invert an image into the inversion cache and print the entry's path.
    Invert {
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        inversion_steps: Option<usize>,
        /// Also denoise the inversion back and save it here.
        #[arg(long, value_name = "PNG")]
        reconstruct: Option<PathBuf>,
    },
    /// Score results against a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of `{id}/result.png` bundles or `{id}.png` files.
        #[arg(long)]
        results: PathBuf,
        /// Row label in the summary table.
        #[arg(long, default_value = "exedit")]
        method: String,
    },
    /// Dataset curation.
    Curate {
        #[command(subcommand)]
        action: CurateCommand,
    },
    /// Start the HTTP job service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum CurateCommand {
    /// Pair records sharing an instruction into candidate quadruples.
    Pair {
        /// CSV with source_id, image, edited_image, instruction.
        #[arg(long)]
        records: PathBuf,
    },
    /// Write contact sheets and a review CSV for candidates.
    Export {
        #[arg(long)]
        candidates: PathBuf,
    },
    /// Turn a filled-in review CSV into an evaluation manifest.
    Ingest {
        #[arg(long)]
        review: PathBuf,
        /// Directory the manifest is written to; image paths are stored
        /// relative to it.
        #[arg(long)]
        manifest_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TripletArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long, visible_alias = "x-edit")]
    pub xedit: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    /// Identifier recorded in provenance.
    #[arg(long, default_value = "cli")]
    pub id: String,
}

#[derive(Debug, Args, Default)]
pub struct OptionArgs {
    /// Edit weight.
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    #[arg(long)]
    pub gen_steps: Option<usize>,
    #[arg(long)]
    pub inversion_steps: Option<usize>,
    /// Components to disable: no_injection, no_caption, no_image_delta.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Option<Vec<String>>,
    /// Decoder layer whose features are injected.
    #[arg(long)]
    pub feature_layer: Option<usize>,
    /// Inclusive decoder layer range for query/key injection, as `lo..hi`.
    #[arg(long, value_parser = parse_layer_range)]
    pub qk_layers: Option<(usize, usize)>,
    #[arg(long)]
    pub feature_step_fraction: Option<f64>,
    #[arg(long)]
    pub qk_step_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "EXEDIT_PORT")]
    pub port: Option<u16>,
    #[arg(long, env = "EXEDIT_BIND")]
    pub bind: Option<std::net::IpAddr>,
    #[arg(long, env = "EXEDIT_QUEUE_CAP")]
    pub queue_cap: Option<usize>,
    /// How long finished results are kept, in seconds.
    #[arg(long, env = "EXEDIT_RESULT_TTL")]
    pub result_ttl_secs: Option<u64>,
    /// Static web UI assets to serve at `/`.
    #[arg(long, env = "EXEDIT_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
}

fn parse_layer_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once("..")
        .or_else(|| s.split_once('-'))
        .ok_or_else(|| format!("expected lo..hi, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(lo)?, parse(hi)?))
}

/// Defaults read from `--config`. Keys mirror the long flag names.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub lambda: Option<f64>,
    pub guidance_scale: Option<f64>,
    pub gen_steps: Option<usize>,
    pub inversion_steps: Option<usize>,
    pub seed: Option<u64>,
    pub ablate: Option<Vec<String>>,
    pub feature_layer: Option<usize>,
    pub qk_layers: Option<(usize, usize)>,
    pub feature_step_fraction: Option<f64>,
    pub qk_step_fraction: Option<f64>,
    pub backend: Option<Backend>,
    pub vlm: Option<VlmKind>,
    pub vlm_url: Option<String>,
    pub adapter_weights: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub port: Option<u16>,
    pub bind: Option<std::net::IpAddr>,
    pub queue_cap: Option<usize>,
    pub result_ttl_secs: Option<u64>,
    pub static_dir: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }
}

/// Everything a command needs after merging flags, config and defaults.
#[derive(Debug, Clone)]
pub struct Settings {
    pub backend: Backend,
    pub vlm: VlmKind,
    pub vlm_url: Option<String>,
    pub adapter_weights: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub dry_run: bool,
    pub json: bool,
}

impl Settings {
    pub fn resolve(g: &GlobalArgs, cfg: &ConfigFile) -> Self {
        Self {
            backend: g.backend.or(cfg.backend).unwrap_or(Backend::Reference),
            vlm: g.vlm.or(cfg.vlm).unwrap_or(VlmKind::Heuristic),
            vlm_url: g.vlm_url.clone().or_else(|| cfg.vlm_url.clone()),
            adapter_weights: g.adapter_weights.clone().or_else(|| cfg.adapter_weights.clone()),
            cache_dir: g.cache_dir.clone().or_else(|| cfg.cache_dir.clone()),
            out: g.out.clone().or_else(|| cfg.out.clone()),
            seed: g.seed.or(cfg.seed).unwrap_or(0),
            dry_run: g.dry_run,
            json: g.json,
        }
    }
}

/// Flags over config over defaults, validated.
pub fn resolve_options(flags: &OptionArgs, seed: u64, cfg: &ConfigFile) -> Result<EditOptions, String> {
    let d = EditOptions::default();
    let di = InjectionConfig::default();
    let ablate = flags.ablate.as_ref().or(cfg.ablate.as_ref());
    let ablations = match ablate {
        Some(list) => Ablations::parse(list).map_err(|e| e.to_string())?,
        None => Ablations::none(),
    };
    let opts = EditOptions {
        lambda: flags.lambda.or(cfg.lambda).unwrap_or(d.lambda),
        guidance_scale: flags.guidance_scale.or(cfg.guidance_scale).unwrap_or(d.guidance_scale),
        gen_steps: flags.gen_steps.or(cfg.gen_steps).unwrap_or(d.gen_steps),
        inversion_steps: flags.inversion_steps.or(cfg.inversion_steps).unwrap_or(d.inversion_steps),
        seed,
        ablations,
        injection: InjectionConfig {
            feature_layer: flags.feature_layer.or(cfg.feature_layer).unwrap_or(di.feature_layer),
            qk_layers: flags.qk_layers.or(cfg.qk_layers).unwrap_or(di.qk_layers),
            feature_step_fraction: flags
                .feature_step_fraction
                .or(cfg.feature_step_fraction)
                .unwrap_or(di.feature_step_fraction),
            qk_step_fraction: flags.qk_step_fraction.or(cfg.qk_step_fraction).unwrap_or(di.qk_step_fraction),
            guidance_scale: di.guidance_scale,
        },
    };
    opts.validate().map_err(|e| e.to_string())?;
    Ok(opts)
}
