//! Source pass with decoder captures, and the conditioned target pass that
//! replaces decoder features and self-attention queries/keys with the
//! captured ones.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{DecoderHooks, DenoisingBackbone, Latent, NoHooks, PreparedConditioning};
use crate::error::{Error, Result};
use crate::schedule::Ddim;
use crate::tensor_file::{read_tensor_file, write_tensor_file};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TensorKind {
    #[serde(rename = "f")]
    Feature,
    #[serde(rename = "Q")]
    Query,
    #[serde(rename = "K")]
    Key,
}

impl fmt::Display for TensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TensorKind::Feature => "f",
            TensorKind::Query => "Q",
            TensorKind::Key => "K",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CaptureKey {
    pub timestep: usize,
    pub layer: usize,
    pub kind: TensorKind,
}

impl fmt::Display for CaptureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(t={}, layer={}, {})", self.timestep, self.layer, self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionConfig {
    pub feature_layer: usize,
    /// First and last (inclusive) decoder layers whose self-attention Q/K are
    /// injected.
    pub qk_layers: (usize, usize),
    /// Fraction of generation steps, from the start, with feature injection.
    pub feature_step_fraction: f64,
    /// Fraction of generation steps, from the start, with Q/K injection.
    pub qk_step_fraction: f64,
    pub guidance_scale: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            feature_layer: 4,
            qk_layers: (4, 11),
            feature_step_fraction: 1.0,
            qk_step_fraction: 1.0,
            guidance_scale: 10.0,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self, decoder_layers: usize) -> Result<()> {
        if self.feature_layer >= decoder_layers {
            return Err(Error::Config(format!(
                "feature layer {} out of range: the decoder has {decoder_layers} layers",
                self.feature_layer
            )));
        }
        let (lo, hi) = self.qk_layers;
        if lo > hi || hi >= decoder_layers {
            return Err(Error::Config(format!(
                "self-attention layers {lo}..={hi} out of range: the decoder has {decoder_layers} layers"
            )));
        }
        for (name, f) in [
            ("feature_step_fraction", self.feature_step_fraction),
            ("qk_step_fraction", self.qk_step_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {f}")));
            }
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::Config("guidance scale must be finite".into()));
        }
        Ok(())
    }

    pub fn qk_layer_range(&self) -> std::ops::RangeInclusive<usize> {
        self.qk_layers.0..=self.qk_layers.1
    }

    /// Number of leading steps with injection for a step fraction.
    pub fn active_steps(fraction: f64, steps: usize) -> usize {
        (fraction * steps as f64).floor() as usize
    }
}

/// Captured decoder tensors of the source pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureStore {
    schedule: Vec<usize>,
    feature_layer: usize,
    qk_layers: (usize, usize),
    entries: BTreeMap<CaptureKey, Array2<f32>>,
    /// Final latent of the source pass.
    pub final_latent: Option<Latent>,
}

impl CaptureStore {
    fn new(schedule: Vec<usize>, config: &InjectionConfig) -> Self {
        Self {
            schedule,
            feature_layer: config.feature_layer,
            qk_layers: config.qk_layers,
            entries: BTreeMap::new(),
            final_latent: None,
        }
    }

    pub fn schedule(&self) -> &[usize] {
        &self.schedule
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &CaptureKey> {
        self.entries.keys()
    }

    pub fn get(&self, key: CaptureKey) -> Result<&Array2<f32>> {
        self.entries
            .get(&key)
            .ok_or_else(|| Error::Contract(format!("capture store has no entry {key}")))
    }

    /// Every key the configuration requires over the schedule.
    pub fn expected_keys(&self) -> Vec<CaptureKey> {
        let mut keys = Vec::new();
        for &timestep in &self.schedule {
            keys.push(CaptureKey {
                timestep,
                layer: self.feature_layer,
                kind: TensorKind::Feature,
            });
            for layer in self.qk_layers.0..=self.qk_layers.1 {
                for kind in [TensorKind::Query, TensorKind::Key] {
                    keys.push(CaptureKey { timestep, layer, kind });
                }
            }
        }
        keys
    }

    pub fn is_complete(&self) -> bool {
        let expected = self.expected_keys();
        expected.len() == self.entries.len() && expected.iter().all(|k| self.entries.contains_key(k))
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Writes the store to a single tensor file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut data = Vec::new();
        let mut index = Vec::with_capacity(self.entries.len());
        for (key, t) in &self.entries {
            index.push(SpillEntry {
                key: *key,
                rows: t.nrows(),
                cols: t.ncols(),
            });
            data.extend(t.iter().copied());
        }
        let meta = SpillMeta {
            schedule: self.schedule.clone(),
            feature_layer: self.feature_layer,
            qk_layers: self.qk_layers,
            entries: index,
        };
        write_tensor_file(path, &[data.len()], &meta, &data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (_, meta, data): (Vec<usize>, SpillMeta, Vec<f32>) = read_tensor_file(path)?;
        let mut entries = BTreeMap::new();
        let mut offset = 0;
        for e in meta.entries {
            let n = e.rows * e.cols;
            let slice = data
                .get(offset..offset + n)
                .ok_or_else(|| Error::Contract("capture file is shorter than its index".into()))?;
            entries.insert(
                e.key,
                Array2::from_shape_vec((e.rows, e.cols), slice.to_vec()).expect("sized slice"),
            );
            offset += n;
        }
        Ok(Self {
            schedule: meta.schedule,
            feature_layer: meta.feature_layer,
            qk_layers: meta.qk_layers,
            entries,
            final_latent: None,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SpillEntry {
    key: CaptureKey,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct SpillMeta {
    schedule: Vec<usize>,
    feature_layer: usize,
    qk_layers: (usize, usize),
    entries: Vec<SpillEntry>,
}

struct RecordingHooks<'a> {
    store: &'a mut CaptureStore,
    timestep: usize,
}

impl DecoderHooks for RecordingHooks<'_> {
    fn feature(&mut self, layer: usize, f: &mut Array2<f32>) -> Result<()> {
        if layer == self.store.feature_layer {
            let key = CaptureKey {
                timestep: self.timestep,
                layer,
                kind: TensorKind::Feature,
            };
            self.store.entries.insert(key, f.clone());
        }
        Ok(())
    }

    fn self_attention(&mut self, layer: usize, q: &mut Array2<f32>, k: &mut Array2<f32>) -> Result<()> {
        let (lo, hi) = self.store.qk_layers;
        if (lo..=hi).contains(&layer) {
            let t = self.timestep;
            self.store.entries.insert(CaptureKey { timestep: t, layer, kind: TensorKind::Query }, q.clone());
            self.store.entries.insert(CaptureKey { timestep: t, layer, kind: TensorKind::Key }, k.clone());
        }
        Ok(())
    }
}

/// Counts of injected sites and of post-injection tensors that were not
/// bit-equal to the stored ones.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionAudit {
    pub sites: usize,
    pub mismatches: usize,
}

struct InjectingHooks<'a> {
    store: &'a CaptureStore,
    config: &'a InjectionConfig,
    timestep: usize,
    features: bool,
    qk: bool,
    audit: &'a mut InjectionAudit,
}

impl InjectingHooks<'_> {
    fn replace(&mut self, layer: usize, kind: TensorKind, target: &mut Array2<f32>) -> Result<()> {
        let key = CaptureKey {
            timestep: self.timestep,
            layer,
            kind,
        };
        let stored = self.store.get(key)?;
        if stored.dim() != target.dim() {
            return Err(Error::Contract(format!(
                "captured {key} has shape {:?} but the target tensor is {:?}",
                stored.dim(),
                target.dim()
            )));
        }
        target.assign(stored);
        self.audit.sites += 1;
        let equal = target
            .iter()
            .zip(stored.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !equal {
            self.audit.mismatches += 1;
        }
        Ok(())
    }
}

impl DecoderHooks for InjectingHooks<'_> {
    fn feature(&mut self, layer: usize, f: &mut Array2<f32>) -> Result<()> {
        if self.features && layer == self.config.feature_layer {
            self.replace(layer, TensorKind::Feature, f)?;
        }
        Ok(())
    }

    fn self_attention(&mut self, layer: usize, q: &mut Array2<f32>, k: &mut Array2<f32>) -> Result<()> {
        if self.qk && self.config.qk_layer_range().contains(&layer) {
            self.replace(layer, TensorKind::Query, q)?;
            self.replace(layer, TensorKind::Key, k)?;
        }
        Ok(())
    }
}

/// Unconditional denoising of `y_noise` over `schedule` (descending),
/// recording the configured decoder tensors at every step.
pub fn record_source_pass(
    backbone: &dyn DenoisingBackbone,
    null_conditioning: &PreparedConditioning,
    y_noise: &Latent,
    schedule: &[usize],
    config: &InjectionConfig,
    on_step: &mut dyn FnMut(usize, usize),
) -> Result<CaptureStore> {
    config.validate(backbone.decoder_layers())?;
    let ddim = Ddim::new(backbone.schedule_config());
    ddim.check_descending(schedule)?;
    backbone.latent_shape().check(y_noise, "source pass input")?;
    let mut store = CaptureStore::new(schedule.to_vec(), config);
    let mut z = y_noise.clone();
    for (i, &t) in schedule.iter().enumerate() {
        let mut hooks = RecordingHooks {
            store: &mut store,
            timestep: t,
        };
        let eps = backbone.predict_noise(&z, t, null_conditioning, &mut hooks)?;
        z = ddim.step(&z, &eps, t, schedule.get(i + 1).copied());
        on_step(i + 1, schedule.len());
    }
    if !store.all_finite() {
        return Err(Error::Computation("non-finite tensors captured in the source pass".into()));
    }
    debug_assert!(store.is_complete());
    store.final_latent = Some(z);
    Ok(store)
}

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub latent: Latent,
    pub audit: InjectionAudit,
}

/// Classifier-free-guided denoising of `y_noise` conditioned on `conditioning`,
/// with the unconditional branch on `null_conditioning`. When `store` is given,
/// captured tensors replace the target's at every step within the configured
/// step fractions, in both guidance branches. A guidance scale of 1 evaluates
/// only the conditional branch.
///
/// DDIM with eta = 0 draws no noise, so the output depends on `seed` only
/// through the inputs; the seed is accepted for provenance.
#[allow(clippy::too_many_arguments)]
pub fn guided_denoise(
    backbone: &dyn DenoisingBackbone,
    y_noise: &Latent,
    schedule: &[usize],
    conditioning: &PreparedConditioning,
    null_conditioning: &PreparedConditioning,
    store: Option<&CaptureStore>,
    config: &InjectionConfig,
    _seed: u64,
    on_step: &mut dyn FnMut(usize, usize),
) -> Result<DenoiseOutput> {
    config.validate(backbone.decoder_layers())?;
    let ddim = Ddim::new(backbone.schedule_config());
    ddim.check_descending(schedule)?;
    backbone.latent_shape().check(y_noise, "target pass input")?;
    if let Some(store) = store {
        if store.schedule() != schedule {
            return Err(Error::Contract(format!(
                "capture schedule ({} steps from t={}) does not match the denoising schedule ({} steps from t={})",
                store.schedule().len(),
                store.schedule().first().copied().unwrap_or(0),
                schedule.len(),
                schedule[0]
            )));
        }
    }
    let n = schedule.len();
    let feature_steps = InjectionConfig::active_steps(config.feature_step_fraction, n);
    let qk_steps = InjectionConfig::active_steps(config.qk_step_fraction, n);
    let g = config.guidance_scale as f32;
    let mut audit = InjectionAudit::default();
    let mut z = y_noise.clone();

    for (i, &t) in schedule.iter().enumerate() {
        let predict = |cond: &PreparedConditioning, audit: &mut InjectionAudit| -> Result<Latent> {
            match store {
                Some(store) if i < feature_steps || i < qk_steps => {
                    let mut hooks = InjectingHooks {
                        store,
                        config,
                        timestep: t,
                        features: i < feature_steps,
                        qk: i < qk_steps,
                        audit,
                    };
                    backbone.predict_noise(&z, t, cond, &mut hooks)
                }
                _ => backbone.predict_noise(&z, t, cond, &mut NoHooks),
            }
        };
        let eps = if g == 1.0 {
            predict(conditioning, &mut audit)?
        } else {
            let eps_u = predict(null_conditioning, &mut audit)?;
            let eps_c = predict(conditioning, &mut audit)?;
            let mut eps = eps_c;
            ndarray::Zip::from(&mut eps)
                .and(&eps_u)
                .for_each(|c, &u| *c = u + g * (*c - u));
            eps
        };
        z = ddim.step(&z, &eps, t, schedule.get(i + 1).copied());
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Computation(format!("non-finite latent at timestep {t}")));
        }
        on_step(i + 1, n);
    }
    Ok(DenoiseOutput { latent: z, audit })
}
