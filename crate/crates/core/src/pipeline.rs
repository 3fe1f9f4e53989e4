//! End-to-end orchestration: verbalize the exemplar edit, build the edit
//! embedding, invert the test image, capture the source pass and run the
//! injected, conditioned generation. Also lambda sweeps, ablations, dry-run
//! plans and result bundles.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::{Autoencoder, Conditioning, DenoisingBackbone, PreparedConditioning};
use crate::edit_embedding::{build_edit_embedding, ImageProjector, ImageTokens, TripletTokens};
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::image_ops::{content_hash, ensure_size, load_image, save_png, sha256_hex, IMAGE_SIZE};
use crate::injection::{guided_denoise, record_source_pass, CaptureStore, InjectionAudit, InjectionConfig};
use crate::inversion::{invert, sampling_schedule, InversionCache, InversionResult};
use crate::reference::ReferenceModels;
use crate::schedule::Ddim;
use crate::vlm::{EditVerbalization, VlmBackend, VlmInstructor, VlmProvenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Captioning,
    Embedding,
    Inverting,
    Capturing,
    Generating,
    Decoding,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Captioning,
        Stage::Embedding,
        Stage::Inverting,
        Stage::Capturing,
        Stage::Generating,
        Stage::Decoding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Captioning => "captioning",
            Stage::Embedding => "embedding",
            Stage::Inverting => "inverting",
            Stage::Capturing => "capturing",
            Stage::Generating => "generating",
            Stage::Decoding => "decoding",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Edit taxonomy of the evaluation dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditType {
    GlobalStyle,
    Background,
    LocalizedStyle,
    ObjectReplacement,
    Motion,
    ObjectInsertion,
}

impl EditType {
    pub const ALL: [EditType; 6] = [
        EditType::GlobalStyle,
        EditType::Background,
        EditType::LocalizedStyle,
        EditType::ObjectReplacement,
        EditType::Motion,
        EditType::ObjectInsertion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EditType::GlobalStyle => "global_style",
            EditType::Background => "background",
            EditType::LocalizedStyle => "localized_style",
            EditType::ObjectReplacement => "object_replacement",
            EditType::Motion => "motion",
            EditType::ObjectInsertion => "object_insertion",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            EditType::GlobalStyle => "Global Style Transfer",
            EditType::Background => "Background Change",
            EditType::LocalizedStyle => "Localized Style Transfer",
            EditType::ObjectReplacement => "Object Replacement",
            EditType::Motion => "Motion Edit",
            EditType::ObjectInsertion => "Object Insertion",
        }
    }
}

impl fmt::Display for EditType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EditType {
    type Err = Error;

    /// Accepts the snake-case label or the display name, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_lowercase().replace([' ', '-'], "_");
        EditType::ALL
            .into_iter()
            .find(|t| t.as_str() == norm || t.display_name().to_lowercase().replace(' ', "_") == norm)
            .ok_or_else(|| Error::Validation(format!("unknown edit type {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct ExemplarTriplet {
    pub id: String,
    pub x: RgbImage,
    pub x_edit: RgbImage,
    pub y: RgbImage,
    pub y_edit: Option<RgbImage>,
    pub edit_type: Option<EditType>,
}

impl ExemplarTriplet {
    pub fn new(id: impl Into<String>, x: RgbImage, x_edit: RgbImage, y: RgbImage) -> Self {
        Self {
            id: id.into(),
            x,
            x_edit,
            y,
            y_edit: None,
            edit_type: None,
        }
    }

    pub fn load(id: impl Into<String>, x: &Path, x_edit: &Path, y: &Path, y_edit: Option<&Path>) -> Result<Self> {
        let mut t = Self::new(id, load_image(x)?, load_image(x_edit)?, load_image(y)?);
        t.y_edit = y_edit.map(load_image).transpose()?;
        Ok(t)
    }

    /// Copy with every image at the working resolution.
    fn prepared(&self) -> Self {
        Self {
            id: self.id.clone(),
            x: ensure_size(&self.x, IMAGE_SIZE, "x"),
            x_edit: ensure_size(&self.x_edit, IMAGE_SIZE, "x_edit"),
            y: ensure_size(&self.y, IMAGE_SIZE, "y"),
            y_edit: self.y_edit.as_ref().map(|i| ensure_size(i, IMAGE_SIZE, "y_edit")),
            edit_type: self.edit_type,
        }
    }

    pub fn hashes(&self) -> InputHashes {
        InputHashes {
            x: content_hash(&self.x),
            x_edit: content_hash(&self.x_edit),
            y: content_hash(&self.y),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Plain conditioned denoising, no feature or Q/K injection.
    pub no_injection: bool,
    /// Empty caption instead of the VLM caption.
    pub no_caption: bool,
    /// Image tokens of `y` alone (lambda forced to 0).
    pub no_image_delta: bool,
}

impl Ablations {
    pub const FLAGS: [&'static str; 3] = ["no_injection", "no_caption", "no_image_delta"];

    pub fn none() -> Self {
        Self::default()
    }

    pub fn only(flag: &str) -> Result<Self> {
        Self::parse(&[flag])
    }

    pub fn parse<S: AsRef<str>>(flags: &[S]) -> Result<Self> {
        let mut a = Self::default();
        for f in flags {
            match f.as_ref().trim() {
                "no_injection" => a.no_injection = true,
                "no_caption" => a.no_caption = true,
                "no_image_delta" => a.no_image_delta = true,
                "" | "none" => {}
                other => return Err(Error::Validation(format!("unknown ablation {other:?}"))),
            }
        }
        Ok(a)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_injection {
            parts.push("no_injection");
        }
        if self.no_caption {
            parts.push("no_caption");
        }
        if self.no_image_delta {
            parts.push("no_image_delta");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditOptions {
    pub lambda: f64,
    /// Classifier-free guidance scale; takes precedence over
    /// `injection.guidance_scale`.
    pub guidance_scale: f64,
    pub gen_steps: usize,
    pub inversion_steps: usize,
    pub seed: u64,
    pub ablations: Ablations,
    pub injection: InjectionConfig,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self {
            lambda: 0.65,
            guidance_scale: 10.0,
            gen_steps: 50,
            inversion_steps: 1000,
            seed: 0,
            ablations: Ablations::default(),
            injection: InjectionConfig::default(),
        }
    }
}

impl EditOptions {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::Validation(format!("lambda must be finite, got {}", self.lambda)));
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale <= 0.0 {
            return Err(Error::Validation(format!(
                "guidance scale must be positive and finite, got {}",
                self.guidance_scale
            )));
        }
        if self.gen_steps == 0 || self.inversion_steps == 0 {
            return Err(Error::Validation("step counts must be positive".into()));
        }
        if self.gen_steps > self.inversion_steps {
            return Err(Error::Validation(format!(
                "gen_steps ({}) must not exceed inversion_steps ({})",
                self.gen_steps, self.inversion_steps
            )));
        }
        for (name, f) in [
            ("feature_step_fraction", self.injection.feature_step_fraction),
            ("qk_step_fraction", self.injection.qk_step_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Validation(format!("{name} must be in [0, 1], got {f}")));
            }
        }
        Ok(())
    }

    pub fn with_ablations(mut self, ablations: Ablations) -> Self {
        self.ablations = ablations;
        self
    }

    /// Lambda actually applied to the image tokens.
    pub fn effective_lambda(&self, lambda: f64) -> f64 {
        if self.ablations.no_image_delta {
            0.0
        } else {
            lambda
        }
    }

    pub fn effective_injection(&self) -> InjectionConfig {
        InjectionConfig {
            guidance_scale: self.guidance_scale,
            ..self.injection
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHashes {
    pub x: String,
    pub x_edit: String,
    pub y: String,
}

/// Wall-clock seconds per stage. Shared stages of a sweep are attributed to
/// every result.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: BTreeMap<Stage, f64>,
}

impl Timings {
    pub fn add(&mut self, stage: Stage, seconds: f64) {
        *self.stages.entry(stage).or_default() += seconds;
    }

    pub fn total(&self) -> f64 {
        self.stages.values().sum()
    }
}

#[derive(Serialize)]
struct TimingsFile<'a> {
    stages: &'a BTreeMap<Stage, f64>,
    total: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheHits {
    pub caption: bool,
    pub inversion: bool,
    pub captures: bool,
}

pub const PROVENANCE_SCHEMA_VERSION: u32 = 1;

/// Everything needed to re-run a job and check that it reproduced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub triplet_id: String,
    pub inputs: InputHashes,
    pub options: EditOptions,
    pub lambda_used: f64,
    pub caption: String,
    pub g_text: String,
    pub vlm: Option<VlmProvenance>,
    pub backbone_id: String,
    pub codec_id: String,
    pub image_encoder_id: String,
    pub text_encoder_id: String,
    pub vlm_id: String,
    pub conditioning_tokens: usize,
    /// SHA-256 of the little-endian f32 image tokens used for conditioning.
    pub image_tokens_sha256: String,
    pub injection_audit: Option<InjectionAudit>,
    pub cache: CacheHits,
    pub timings: Timings,
    pub output_sha256: String,
}

#[derive(Debug, Clone)]
pub struct EditResult {
    pub image: RgbImage,
    pub provenance: Provenance,
}

impl EditResult {
    pub fn caption(&self) -> &str {
        &self.provenance.caption
    }

    pub fn timings(&self) -> &Timings {
        &self.provenance.timings
    }
}

/// Receives stage events. Returning an error from `stage_started` cancels
/// the run at that stage boundary.
pub trait StageObserver: Send {
    fn stage_started(&mut self, _stage: Stage) -> Result<()> {
        Ok(())
    }

    fn progress(&mut self, _stage: Stage, _fraction: f64) {}

    fn stage_finished(&mut self, _stage: Stage, _seconds: f64) {}
}

pub struct NullObserver;

impl StageObserver for NullObserver {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageAction {
    Run,
    Cached,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedStage {
    pub stage: Stage,
    pub action: StageAction,
    pub detail: String,
}

/// Resolved execution plan, computed without model calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub triplet_id: String,
    pub options: EditOptions,
    pub lambdas: Vec<f64>,
    pub backbone_id: String,
    pub vlm_id: String,
    pub stages: Vec<PlannedStage>,
}

/// Anything that can run an exemplar edit.
pub trait Editor: Send + Sync {
    fn backbone_id(&self) -> String;

    fn vlm_id(&self) -> String;

    fn plan(&self, triplet: &ExemplarTriplet, lambdas: &[f64], opts: &EditOptions) -> Result<Plan>;

    /// One result per lambda, sharing captioning, inversion and captures.
    fn sweep(
        &self,
        triplet: &ExemplarTriplet,
        lambdas: &[f64],
        opts: &EditOptions,
        observer: &mut dyn StageObserver,
    ) -> Result<Vec<EditResult>>;
}

pub fn apply_edit(
    editor: &dyn Editor,
    triplet: &ExemplarTriplet,
    opts: &EditOptions,
    observer: &mut dyn StageObserver,
) -> Result<EditResult> {
    let mut results = editor.sweep(triplet, &[opts.lambda], opts, observer)?;
    Ok(results.remove(0))
}

pub fn lambda_sweep(
    editor: &dyn Editor,
    triplet: &ExemplarTriplet,
    lambdas: &[f64],
    opts: &EditOptions,
    observer: &mut dyn StageObserver,
) -> Result<Vec<EditResult>> {
    editor.sweep(triplet, lambdas, opts, observer)
}

/// Runs the full method and each single-flag ablation, keyed by label.
/// Ablation flags already set on `opts` are replaced.
pub fn ablate(
    editor: &dyn Editor,
    triplet: &ExemplarTriplet,
    opts: &EditOptions,
    observer: &mut dyn StageObserver,
) -> Result<BTreeMap<String, EditResult>> {
    let mut out = BTreeMap::new();
    let mut variants = vec![Ablations::none()];
    for flag in Ablations::FLAGS {
        variants.push(Ablations::only(flag)?);
    }
    for a in variants {
        let result = apply_edit(editor, triplet, &opts.with_ablations(a), observer)?;
        out.insert(a.label(), result);
    }
    Ok(out)
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::Validation("lambda list is empty".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !l.is_finite()) {
        return Err(Error::Validation(format!("lambda must be finite, got {l}")));
    }
    Ok(())
}

fn run_stage<T>(
    stage: Stage,
    observer: &mut dyn StageObserver,
    timings: &mut Timings,
    f: impl FnOnce(&mut dyn StageObserver) -> Result<T>,
) -> Result<T> {
    observer.stage_started(stage).map_err(|e| e.in_stage(stage))?;
    let start = Instant::now();
    let out = f(observer).map_err(|e| e.in_stage(stage));
    let seconds = start.elapsed().as_secs_f64();
    timings.add(stage, seconds);
    observer.stage_finished(stage, seconds);
    out
}

fn tokens_digest(tokens: &ImageTokens) -> String {
    let bytes: Vec<u8> = tokens.tokens.iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// The diffusion pipeline over pluggable backbone, codec, encoders and VLM.
pub struct Pipeline {
    backbone: Arc<dyn DenoisingBackbone>,
    codec: Arc<dyn Autoencoder>,
    projector: ImageProjector,
    text_encoder: Arc<dyn TextEncoder>,
    vlm: VlmInstructor,
    null: PreparedConditioning,
    disk_cache: Option<InversionCache>,
    inversions: Mutex<BTreeMap<String, Arc<InversionResult>>>,
    captures: Mutex<Option<(String, Arc<CaptureStore>)>>,
    captions: Mutex<BTreeMap<String, EditVerbalization>>,
}

/// In-memory inversion results kept per pipeline.
const MEMORY_INVERSIONS: usize = 8;

impl Pipeline {
    pub fn new(
        backbone: Arc<dyn DenoisingBackbone>,
        codec: Arc<dyn Autoencoder>,
        projector: ImageProjector,
        text_encoder: Arc<dyn TextEncoder>,
        vlm: VlmInstructor,
    ) -> Result<Self> {
        let null_text = text_encoder.encode("")?.tokens;
        let null = backbone.prepare(&Conditioning::new(null_text, ImageTokens::zeros().tokens)?)?;
        Ok(Self {
            backbone,
            codec,
            projector,
            text_encoder,
            vlm,
            null,
            disk_cache: None,
            inversions: Mutex::new(BTreeMap::new()),
            captures: Mutex::new(None),
            captions: Mutex::new(BTreeMap::new()),
        })
    }

    /// Pipeline over the reference model set.
    pub fn reference(models: &ReferenceModels, vlm: Arc<dyn VlmBackend>) -> Result<Self> {
        Self::new(
            models.unet.clone(),
            models.codec.clone(),
            ImageProjector::new(models.image_encoder.clone(), models.projection.clone()),
            models.text_encoder.clone(),
            VlmInstructor::new(vlm),
        )
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.disk_cache = Some(InversionCache::new(dir));
        self
    }

    pub fn with_projector(mut self, projector: ImageProjector) -> Self {
        self.projector = projector;
        self
    }

    pub fn backbone(&self) -> &dyn DenoisingBackbone {
        self.backbone.as_ref()
    }

    pub fn codec(&self) -> &dyn Autoencoder {
        self.codec.as_ref()
    }

    pub fn null_conditioning(&self) -> &PreparedConditioning {
        &self.null
    }

    pub fn inversion_key(&self, y: &RgbImage, steps: usize) -> String {
        InversionCache::key(y, steps, self.backbone.id(), self.codec.id())
    }

    fn caption_key(&self, t: &ExemplarTriplet) -> String {
        let h = t.hashes();
        let caps = self.vlm.caps();
        sha256_hex(
            format!(
                "{}|{}|{}|{}|{}/{}/{}",
                h.x, h.x_edit, h.y,
                self.vlm.backend_id(),
                caps.g_text, caps.g_caption, caps.g_edit_inst
            )
            .as_bytes(),
        )
    }

    fn capture_key(inversion_key: &str, opts: &EditOptions) -> String {
        let c = opts.injection;
        format!(
            "{inversion_key}|{}|f{}|qk{}-{}",
            opts.gen_steps, c.feature_layer, c.qk_layers.0, c.qk_layers.1
        )
    }

    fn cached_inversion(&self, key: &str) -> Result<Option<Arc<InversionResult>>> {
        if let Some(inv) = self.inversions.lock().expect("inversion cache poisoned").get(key) {
            return Ok(Some(inv.clone()));
        }
        match &self.disk_cache {
            Some(cache) => match cache.get(key) {
                Ok(Some(inv)) => {
                    let inv = Arc::new(inv);
                    self.remember_inversion(key, inv.clone());
                    Ok(Some(inv))
                }
                Ok(None) => Ok(None),
                Err(e) => {
                    tracing::warn!("ignoring unreadable inversion cache entry {key}: {e}");
                    Ok(None)
                }
            },
            None => Ok(None),
        }
    }

    fn remember_inversion(&self, key: &str, inv: Arc<InversionResult>) {
        let mut map = self.inversions.lock().expect("inversion cache poisoned");
        if map.len() >= MEMORY_INVERSIONS && !map.contains_key(key) {
            let oldest = map.keys().next().cloned();
            if let Some(k) = oldest {
                map.remove(&k);
            }
        }
        map.insert(key.to_owned(), inv);
    }

    /// Inverts `y`, reusing memory and disk caches. Returns the result and
    /// whether it was a cache hit.
    pub fn invert_cached(
        &self,
        y: &RgbImage,
        steps: usize,
        on_step: &mut dyn FnMut(usize, usize),
    ) -> Result<(Arc<InversionResult>, bool)> {
        let y = ensure_size(y, IMAGE_SIZE, "y");
        let key = self.inversion_key(&y, steps);
        if let Some(inv) = self.cached_inversion(&key)? {
            return Ok((inv, true));
        }
        let inv = Arc::new(invert(
            self.backbone.as_ref(),
            self.codec.as_ref(),
            &self.null,
            &y,
            &content_hash(&y),
            steps,
            on_step,
        )?);
        if let Some(cache) = &self.disk_cache {
            if let Err(e) = cache.put(&key, &inv) {
                tracing::warn!("could not write inversion cache entry {key}: {e}");
            }
        }
        self.remember_inversion(&key, inv.clone());
        Ok((inv, false))
    }

    /// Denoises an inversion back to an image, unconditionally.
    pub fn reconstruct(&self, inv: &InversionResult, on_step: &mut dyn FnMut(usize, usize)) -> Result<RgbImage> {
        crate::inversion::reconstruct(self.backbone.as_ref(), self.codec.as_ref(), &self.null, inv, on_step)
    }

    fn has_inversion(&self, key: &str) -> bool {
        self.inversions.lock().expect("inversion cache poisoned").contains_key(key)
            || self.disk_cache.as_ref().is_some_and(|c| c.path(key).exists())
    }

    fn verbalize(&self, t: &ExemplarTriplet) -> Result<(EditVerbalization, bool)> {
        let key = self.caption_key(t);
        if let Some(v) = self.captions.lock().expect("caption cache poisoned").get(&key) {
            return Ok((v.clone(), true));
        }
        let v = self.vlm.verbalize(&t.x, &t.x_edit, &t.y, false)?;
        if v.g_caption.trim().is_empty() {
            return Err(Error::Generation("VLM returned an empty caption".into()));
        }
        self.captions
            .lock()
            .expect("caption cache poisoned")
            .insert(key, v.clone());
        Ok((v, false))
    }
}

impl Editor for Pipeline {
    fn backbone_id(&self) -> String {
        self.backbone.id().to_owned()
    }

    fn vlm_id(&self) -> String {
        self.vlm.backend_id()
    }

    fn plan(&self, triplet: &ExemplarTriplet, lambdas: &[f64], opts: &EditOptions) -> Result<Plan> {
        opts.validate()?;
        check_lambdas(lambdas)?;
        let t = triplet.prepared();
        let a = opts.ablations;
        let inv_key = self.inversion_key(&t.y, opts.inversion_steps);
        let cap_key = Self::capture_key(&inv_key, opts);
        let caption_cached = self
            .captions
            .lock()
            .expect("caption cache poisoned")
            .contains_key(&self.caption_key(&t));
        let captures_cached = self
            .captures
            .lock()
            .expect("capture cache poisoned")
            .as_ref()
            .is_some_and(|(k, _)| *k == cap_key);
        let pick = |cached: bool| if cached { StageAction::Cached } else { StageAction::Run };
        let stages = vec![
            PlannedStage {
                stage: Stage::Captioning,
                action: if a.no_caption { StageAction::Skipped } else { pick(caption_cached) },
                detail: format!("vlm {}", self.vlm.backend_id()),
            },
            PlannedStage {
                stage: Stage::Embedding,
                action: StageAction::Run,
                detail: format!(
                    "lambda {:?}",
                    lambdas.iter().map(|&l| opts.effective_lambda(l)).collect::<Vec<_>>()
                ),
            },
            PlannedStage {
                stage: Stage::Inverting,
                action: pick(self.has_inversion(&inv_key)),
                detail: format!("{} steps, key {inv_key}", opts.inversion_steps),
            },
            PlannedStage {
                stage: Stage::Capturing,
                action: if a.no_injection { StageAction::Skipped } else { pick(captures_cached) },
                detail: format!(
                    "{} steps, feature layer {}, q/k layers {}..={}",
                    opts.gen_steps, opts.injection.feature_layer, opts.injection.qk_layers.0, opts.injection.qk_layers.1
                ),
            },
            PlannedStage {
                stage: Stage::Generating,
                action: StageAction::Run,
                detail: format!(
                    "{} steps x {} lambda(s), guidance {}, injection {}",
                    opts.gen_steps,
                    lambdas.len(),
                    opts.guidance_scale,
                    if a.no_injection { "off" } else { "on" }
                ),
            },
            PlannedStage {
                stage: Stage::Decoding,
                action: StageAction::Run,
                detail: format!("codec {}", self.codec.id()),
            },
        ];
        Ok(Plan {
            triplet_id: triplet.id.clone(),
            options: *opts,
            lambdas: lambdas.to_vec(),
            backbone_id: self.backbone_id(),
            vlm_id: self.vlm_id(),
            stages,
        })
    }

    fn sweep(
        &self,
        triplet: &ExemplarTriplet,
        lambdas: &[f64],
        opts: &EditOptions,
        observer: &mut dyn StageObserver,
    ) -> Result<Vec<EditResult>> {
        opts.validate()?;
        check_lambdas(lambdas)?;
        let t = triplet.prepared();
        let inputs = t.hashes();
        let a = opts.ablations;
        let mut shared = Timings::default();
        let mut hits = CacheHits::default();

        let verbal = if a.no_caption {
            None
        } else {
            let (v, hit) = run_stage(Stage::Captioning, observer, &mut shared, |_| self.verbalize(&t))?;
            hits.caption = hit;
            Some(v)
        };

        let tokens = run_stage(Stage::Embedding, observer, &mut shared, |_| {
            TripletTokens::project(&self.projector, &t.x, &t.x_edit, &t.y)
        })?;

        let (inv, hit) = run_stage(Stage::Inverting, observer, &mut shared, |obs| {
            self.invert_cached(&t.y, opts.inversion_steps, &mut |i, n| {
                obs.progress(Stage::Inverting, i as f64 / n as f64)
            })
        })?;
        hits.inversion = hit;
        let inv_key = self.inversion_key(&t.y, opts.inversion_steps);

        let ddim = Ddim::new(self.backbone.schedule_config());
        sampling_schedule(self.backbone.as_ref(), &inv)?;
        let schedule = ddim.timesteps(opts.gen_steps)?;
        let injection = opts.effective_injection();

        let store = if a.no_injection {
            None
        } else {
            let key = Self::capture_key(&inv_key, opts);
            let (store, hit) = run_stage(Stage::Capturing, observer, &mut shared, |obs| {
                let mut slot = self.captures.lock().expect("capture cache poisoned");
                if let Some((k, s)) = slot.as_ref() {
                    if *k == key {
                        return Ok((s.clone(), true));
                    }
                }
                let store = Arc::new(record_source_pass(
                    self.backbone.as_ref(),
                    &self.null,
                    &inv.y_noise,
                    &schedule,
                    &injection,
                    &mut |i, n| obs.progress(Stage::Capturing, i as f64 / n as f64),
                )?);
                *slot = Some((key.clone(), store.clone()));
                Ok((store, false))
            })?;
            hits.captures = hit;
            Some(store)
        };

        let caption = verbal.as_ref().map(|v| v.g_caption.clone()).unwrap_or_default();
        let mut results = Vec::with_capacity(lambdas.len());
        for &lambda in lambdas {
            let mut timings = shared.clone();
            let lambda_used = opts.effective_lambda(lambda);
            let (embedding, prepared) = run_stage(Stage::Embedding, observer, &mut timings, |_| {
                let e = build_edit_embedding(&tokens, self.text_encoder.as_ref(), &caption, lambda_used)?;
                let cond = e.conditioning()?;
                let prepared = self.backbone.prepare(&cond)?;
                Ok((e, prepared))
            })?;
            let out = run_stage(Stage::Generating, observer, &mut timings, |obs| {
                guided_denoise(
                    self.backbone.as_ref(),
                    &inv.y_noise,
                    &schedule,
                    &prepared,
                    &self.null,
                    store.as_deref(),
                    &injection,
                    opts.seed,
                    &mut |i, n| obs.progress(Stage::Generating, i as f64 / n as f64),
                )
            })?;
            if out.audit.mismatches > 0 {
                return Err(Error::Contract(format!(
                    "{} of {} injected tensors differ from the captured ones",
                    out.audit.mismatches, out.audit.sites
                ))
                .in_stage(Stage::Generating));
            }
            let image = run_stage(Stage::Decoding, observer, &mut timings, |_| self.codec.decode(&out.latent))?;
            let provenance = Provenance {
                schema_version: PROVENANCE_SCHEMA_VERSION,
                triplet_id: t.id.clone(),
                inputs: inputs.clone(),
                options: EditOptions { lambda, ..*opts },
                lambda_used,
                caption: caption.clone(),
                g_text: verbal.as_ref().map(|v| v.g_text.clone()).unwrap_or_default(),
                vlm: verbal.as_ref().map(|v| v.provenance.clone()),
                backbone_id: self.backbone_id(),
                codec_id: self.codec.id().to_owned(),
                image_encoder_id: self.projector.id(),
                text_encoder_id: self.text_encoder.id().to_owned(),
                vlm_id: self.vlm_id(),
                conditioning_tokens: prepared.tokens(),
                image_tokens_sha256: tokens_digest(&embedding.image_tokens),
                injection_audit: store.as_ref().map(|_| out.audit),
                cache: hits,
                timings,
                output_sha256: content_hash(&image),
            };
            results.push(EditResult { image, provenance });
        }
        Ok(results)
    }
}

/// Deterministic stand-in editor: blurs `y` and shifts its colours by the
/// exemplar's mean colour change, both scaled by lambda. Used by the
/// service and CLI when no backbone should run.
#[derive(Debug, Clone, Default)]
pub struct StubEditor;

impl StubEditor {
    const ID: &'static str = "stub-editor/v1";

    fn mean_rgb(img: &RgbImage) -> [f64; 3] {
        let mut sum = [0f64; 3];
        for p in img.pixels() {
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
        }
        let n = (img.width() * img.height()).max(1) as f64;
        sum.map(|s| s / n)
    }

    pub fn apply(x: &RgbImage, x_edit: &RgbImage, y: &RgbImage, lambda: f64) -> RgbImage {
        let (mx, me) = (Self::mean_rgb(x), Self::mean_rgb(x_edit));
        let sigma = (lambda.abs() * 2.0) as f32;
        let mut out = if sigma > 0.0 { imageops::blur(y, sigma) } else { y.clone() };
        for p in out.pixels_mut() {
            for c in 0..3 {
                let v = p[c] as f64 + lambda * (me[c] - mx[c]);
                p[c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }
}

impl Editor for StubEditor {
    fn backbone_id(&self) -> String {
        Self::ID.into()
    }

    fn vlm_id(&self) -> String {
        Self::ID.into()
    }

    fn plan(&self, triplet: &ExemplarTriplet, lambdas: &[f64], opts: &EditOptions) -> Result<Plan> {
        opts.validate()?;
        check_lambdas(lambdas)?;
        let stage = |stage, action, detail: &str| PlannedStage {
            stage,
            action,
            detail: detail.into(),
        };
        Ok(Plan {
            triplet_id: triplet.id.clone(),
            options: *opts,
            lambdas: lambdas.to_vec(),
            backbone_id: self.backbone_id(),
            vlm_id: self.vlm_id(),
            stages: vec![
                stage(Stage::Captioning, if opts.ablations.no_caption { StageAction::Skipped } else { StageAction::Run }, "stub caption"),
                stage(Stage::Generating, StageAction::Run, "blur and tint"),
            ],
        })
    }

    fn sweep(
        &self,
        triplet: &ExemplarTriplet,
        lambdas: &[f64],
        opts: &EditOptions,
        observer: &mut dyn StageObserver,
    ) -> Result<Vec<EditResult>> {
        opts.validate()?;
        check_lambdas(lambdas)?;
        let t = triplet.prepared();
        let mut shared = Timings::default();
        let caption = if opts.ablations.no_caption {
            String::new()
        } else {
            run_stage(Stage::Captioning, observer, &mut shared, |_| {
                let (mx, me) = (Self::mean_rgb(&t.x), Self::mean_rgb(&t.x_edit));
                Ok(format!(
                    "A photo with its colours shifted by ({:+.0}, {:+.0}, {:+.0}).",
                    me[0] - mx[0],
                    me[1] - mx[1],
                    me[2] - mx[2]
                ))
            })?
        };
        let mut results = Vec::new();
        for &lambda in lambdas {
            let mut timings = shared.clone();
            let lambda_used = opts.effective_lambda(lambda);
            let image = run_stage(Stage::Generating, observer, &mut timings, |obs| {
                let img = Self::apply(&t.x, &t.x_edit, &t.y, lambda_used);
                obs.progress(Stage::Generating, 1.0);
                Ok(img)
            })?;
            let provenance = Provenance {
                schema_version: PROVENANCE_SCHEMA_VERSION,
                triplet_id: t.id.clone(),
                inputs: t.hashes(),
                options: EditOptions { lambda, ..*opts },
                lambda_used,
                caption: caption.clone(),
                g_text: caption.clone(),
                vlm: None,
                backbone_id: self.backbone_id(),
                codec_id: "none".into(),
                image_encoder_id: "none".into(),
                text_encoder_id: "none".into(),
                vlm_id: self.vlm_id(),
                conditioning_tokens: 0,
                image_tokens_sha256: String::new(),
                injection_audit: None,
                cache: CacheHits::default(),
                timings,
                output_sha256: content_hash(&image),
            };
            results.push(EditResult { image, provenance });
        }
        Ok(results)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `result.png`, `provenance.json`, `timings.json` and `caption.txt`.
pub fn write_bundle(result: &EditResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        dir.join("result.png"),
        dir.join("provenance.json"),
        dir.join("timings.json"),
        dir.join("caption.txt"),
    ];
    save_png(&result.image, &files[0])?;
    write_json(&files[1], &result.provenance)?;
    let t = result.timings();
    write_json(&files[2], &TimingsFile { stages: &t.stages, total: t.total() })?;
    write_text(&files[3], result.caption())?;
    Ok(files.to_vec())
}

/// Sweep bundle: `result_{i}.png` per lambda in order, plus `provenance.json`
/// and `timings.json` as arrays and the shared `caption.txt`.
pub fn write_sweep_bundle(results: &[EditResult], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (i, r) in results.iter().enumerate() {
        let p = dir.join(format!("result_{i}.png"));
        save_png(&r.image, &p)?;
        files.push(p);
    }
    let prov: Vec<&Provenance> = results.iter().map(|r| &r.provenance).collect();
    let p = dir.join("provenance.json");
    write_json(&p, &prov)?;
    files.push(p);
    let timings: Vec<TimingsFile> = results
        .iter()
        .map(|r| TimingsFile {
            stages: &r.provenance.timings.stages,
            total: r.provenance.timings.total(),
        })
        .collect();
    let p = dir.join("timings.json");
    write_json(&p, &timings)?;
    files.push(p);
    let p = dir.join("caption.txt");
    write_text(&p, results.first().map(|r| r.caption()).unwrap_or(""))?;
    files.push(p);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_ops::mean_abs_diff;
    use crate::reference::DEFAULT_SEED;
    use crate::vlm::{HeuristicVlm, ReplayVlm};
    use image::Rgb;

    fn triplet() -> ExemplarTriplet {
        let x = RgbImage::from_fn(512, 512, |i, j| Rgb([(i / 3) as u8 + 20, (j / 3) as u8 + 20, 110]));
        let x_edit = RgbImage::from_fn(512, 512, |i, j| Rgb([(i / 3) as u8 + 70, (j / 3) as u8 + 30, 60]));
        let y = RgbImage::from_fn(512, 512, |i, j| {
            let d = ((i as i32 - 256).pow(2) + (j as i32 - 200).pow(2)) < 120 * 120;
            if d { Rgb([200, 190, 60]) } else { Rgb([40, (j / 4) as u8 + 60, 150]) }
        });
        ExemplarTriplet::new("t0", x, x_edit, y)
    }

    fn small_opts() -> EditOptions {
        EditOptions {
            gen_steps: 4,
            inversion_steps: 8,
            ..Default::default()
        }
    }

    fn pipeline() -> Pipeline {
        Pipeline::reference(&ReferenceModels::new(DEFAULT_SEED), Arc::new(HeuristicVlm::new())).unwrap()
    }

    #[test]
    fn default_options_match_operating_point() {
        let o = EditOptions::default();
        assert_eq!(o.lambda, 0.65);
        assert_eq!(o.guidance_scale, 10.0);
        assert_eq!(o.inversion_steps, 1000);
        assert_eq!(o.gen_steps, 50);
        assert_eq!(o.injection.feature_layer, 4);
        assert_eq!(o.injection.qk_layers, (4, 11));
        o.validate().unwrap();
    }

    #[test]
    fn option_validation() {
        let bad = [
            EditOptions { lambda: f64::NAN, ..Default::default() },
            EditOptions { gen_steps: 0, ..Default::default() },
            EditOptions { gen_steps: 60, inversion_steps: 50, ..Default::default() },
            EditOptions { guidance_scale: f64::INFINITY, ..Default::default() },
        ];
        for o in bad {
            assert!(matches!(o.validate(), Err(Error::Validation(_))), "{o:?}");
        }
    }

    #[test]
    fn partial_option_json_fills_defaults() {
        let o: EditOptions = serde_json::from_str(r#"{"lambda": 0.8, "ablations": {"no_caption": true}}"#).unwrap();
        assert_eq!(o.lambda, 0.8);
        assert_eq!(o.inversion_steps, 1000);
        assert!(o.ablations.no_caption && !o.ablations.no_injection);
    }

    #[test]
    fn edit_types_parse_both_spellings() {
        for t in EditType::ALL {
            assert_eq!(t.as_str().parse::<EditType>().unwrap(), t);
            assert_eq!(t.display_name().parse::<EditType>().unwrap(), t);
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(json, format!("\"{}\"", t.as_str()));
        }
        assert!("zoom".parse::<EditType>().is_err());
    }

    #[test]
    fn ablation_labels() {
        assert_eq!(Ablations::none().label(), "none");
        let all = Ablations::parse(&["no_image_delta", "no_injection", "no_caption"]).unwrap();
        assert_eq!(all.label(), "no_injection+no_caption+no_image_delta");
        assert!(Ablations::parse(&["no_vae"]).is_err());
    }

    #[test]
    fn stub_is_identity_at_zero_lambda() {
        let t = triplet();
        let r = apply_edit(&StubEditor, &t, &EditOptions { lambda: 0.0, ..Default::default() }, &mut NullObserver).unwrap();
        assert_eq!(r.image, t.y);
        let r2 = apply_edit(&StubEditor, &t, &EditOptions { lambda: 0.8, ..Default::default() }, &mut NullObserver).unwrap();
        assert!(mean_abs_diff(&r2.image, &t.y) > 0.01);
    }

    #[test]
    fn sweep_shares_caption_and_inversion() {
        let p = pipeline();
        let t = triplet();
        let opts = small_opts();
        let lambdas = [0.0, 0.6, 0.7, 0.8];
        let results = lambda_sweep(&p, &t, &lambdas, &opts, &mut NullObserver).unwrap();
        assert_eq!(results.len(), 4);
        assert!(!results[0].caption().is_empty());
        assert!(results.iter().all(|r| r.caption() == results[0].caption()));
        assert!(results.iter().all(|r| r.provenance.conditioning_tokens == 81));
        for (r, l) in results.iter().zip(lambdas) {
            assert_eq!(r.provenance.lambda_used, l);
        }
        // lambda 0 conditions on the projected tokens of y alone
        let h_y = p.projector.project_image(&t.y, "y").unwrap();
        assert_eq!(results[0].provenance.image_tokens_sha256, tokens_digest(&h_y));

        let again = apply_edit(&p, &t, &EditOptions { lambda: 0.6, ..opts }, &mut NullObserver).unwrap();
        assert!(again.provenance.cache.inversion && again.provenance.cache.caption && again.provenance.cache.captures);
        assert_eq!(again.image, results[1].image);
    }

    #[test]
    fn all_flags_still_produce_an_image() {
        let p = pipeline();
        let opts = small_opts().with_ablations(Ablations::parse(&["no_injection", "no_caption", "no_image_delta"]).unwrap());
        let r = apply_edit(&p, &triplet(), &opts, &mut NullObserver).unwrap();
        assert_eq!(r.image.dimensions(), (512, 512));
        assert_eq!(r.caption(), "");
        assert!(r.provenance.vlm.is_none());
        assert!(r.provenance.injection_audit.is_none());
        assert_eq!(r.provenance.lambda_used, 0.0);
    }

    struct Recorder {
        events: Vec<String>,
        cancel_at: Option<Stage>,
    }

    impl StageObserver for Recorder {
        fn stage_started(&mut self, stage: Stage) -> Result<()> {
            if self.cancel_at == Some(stage) {
                return Err(Error::Cancelled);
            }
            self.events.push(format!("start {stage}"));
            Ok(())
        }

        fn stage_finished(&mut self, stage: Stage, _seconds: f64) {
            self.events.push(format!("end {stage}"));
        }
    }

    #[test]
    fn stages_run_in_order_and_timings_sum() {
        let p = pipeline();
        let mut rec = Recorder { events: Vec::new(), cancel_at: None };
        let r = apply_edit(&p, &triplet(), &small_opts(), &mut rec).unwrap();
        let starts: Vec<&str> = rec.events.iter().filter_map(|e| e.strip_prefix("start ")).collect();
        assert_eq!(
            starts,
            ["captioning", "embedding", "inverting", "capturing", "embedding", "generating", "decoding"]
        );
        let t = r.timings();
        let sum: f64 = t.stages.values().sum();
        assert!((sum - t.total()).abs() < 1e-12);
        assert_eq!(t.stages.len(), 6);
    }

    #[test]
    fn cancellation_stops_before_the_stage() {
        let p = pipeline();
        let mut rec = Recorder { events: Vec::new(), cancel_at: Some(Stage::Inverting) };
        let err = apply_edit(&p, &triplet(), &small_opts(), &mut rec).unwrap_err();
        assert!(matches!(err, Error::Cancelled));
        assert!(p.inversions.lock().unwrap().is_empty());
    }

    #[test]
    fn errors_carry_their_stage() {
        let p = Pipeline::reference(&ReferenceModels::new(DEFAULT_SEED), Arc::new(ReplayVlm::new(Vec::new()))).unwrap();
        let err = apply_edit(&p, &triplet(), &small_opts(), &mut NullObserver).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: Stage::Captioning, .. }), "{err}");
    }

    #[test]
    fn dry_run_plan_reports_cache_state() {
        let p = pipeline();
        let t = triplet();
        let opts = small_opts();
        let plan = p.plan(&t, &[0.65], &opts).unwrap();
        assert_eq!(plan.stages.len(), 6);
        assert!(plan.stages.iter().all(|s| s.action == StageAction::Run));
        apply_edit(&p, &t, &opts, &mut NullObserver).unwrap();
        let plan = p.plan(&t, &[0.65], &opts.with_ablations(Ablations::only("no_injection").unwrap())).unwrap();
        let action = |s: Stage| plan.stages.iter().find(|p| p.stage == s).unwrap().action;
        assert_eq!(action(Stage::Captioning), StageAction::Cached);
        assert_eq!(action(Stage::Inverting), StageAction::Cached);
        assert_eq!(action(Stage::Capturing), StageAction::Skipped);
    }

    #[test]
    fn disk_cache_survives_a_new_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let t = triplet();
        let opts = small_opts();
        let a = apply_edit(&pipeline().with_cache_dir(dir.path()), &t, &opts, &mut NullObserver).unwrap();
        let b = apply_edit(&pipeline().with_cache_dir(dir.path()), &t, &opts, &mut NullObserver).unwrap();
        assert!(!a.provenance.cache.inversion);
        assert!(b.provenance.cache.inversion);
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn bundles_contain_expected_files() {
        let t = triplet();
        let dir = tempfile::tempdir().unwrap();
        let r = apply_edit(&StubEditor, &t, &EditOptions::default(), &mut NullObserver).unwrap();
        let files = write_bundle(&r, dir.path()).unwrap();
        let names: Vec<String> = files.iter().map(|f| f.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["result.png", "provenance.json", "timings.json", "caption.txt"]);
        let prov: Provenance = serde_json::from_slice(&std::fs::read(&files[1]).unwrap()).unwrap();
        assert_eq!(prov, r.provenance);
        let timings: serde_json::Value = serde_json::from_slice(&std::fs::read(&files[2]).unwrap()).unwrap();
        assert!(timings["total"].is_number());

        let sweep = lambda_sweep(&StubEditor, &t, &[0.0, 0.6, 0.7, 0.8], &EditOptions::default(), &mut NullObserver).unwrap();
        let sdir = dir.path().join("sweep");
        let files = write_sweep_bundle(&sweep, &sdir).unwrap();
        assert_eq!(files.len(), 4 + 3);
        assert!(sdir.join("result_3.png").exists());
    }
}
