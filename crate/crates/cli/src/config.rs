//! Flat `key = value` run configuration.
//!
//! Every key has a default (see [`KEYS`]); a file only lists what it changes.
//! `#` starts a comment line. Unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use deepblur_core::generator::BlobGeneratorConfig;
use deepblur_core::obfuscation::{DeepBlurSettings, MaskRect};
use deepblur_core::optim::{OptimizerConfig, OptimizerKind};
use deepblur_core::perception::{ExtractorKind, ExtractorSpec};
use deepblur_core::threat::{HarnessConfig, SplitSpec, ThreatModel, TrainConfig};

use crate::error::CliError;

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("generator.blobs", "16", "blob count L (latent rows)"),
    ("generator.size", "64", "output side S in pixels"),
    ("generator.steepness", "4", "logistic squash steepness k"),
    ("extractor.kind", "pixel", "inversion features: pixel | randconv"),
    ("extractor.seed", "0", "randconv filter seed"),
    ("extractor.stages", "3", "randconv stages"),
    ("optimizer.kind", "lbfgs", "sgdm | adagrad | adam | lbfgs"),
    ("optimizer.learning_rate", "auto", "auto picks the per-kind default"),
    ("optimizer.momentum", "0.9", "sgdm momentum"),
    ("optimizer.beta1", "0.9", "adam first-moment decay"),
    ("optimizer.beta2", "0.999", "adam second-moment decay"),
    ("optimizer.epsilon", "1e-8", "adagrad/adam denominator guard"),
    ("optimizer.memory", "10", "lbfgs history length"),
    ("optimizer.max_steps", "200", "update budget"),
    ("optimizer.target_loss", "1e-4", "stop once the loss reaches this"),
    ("inversion.init", "mean", "mean | random"),
    ("inversion.init_seed", "0", "seed for random init"),
    ("obfuscator.kind", "deepblur", "deepblur | deepblur_average | pixel_blur | pixelate | mask | advnoise | identity"),
    ("obfuscator.sigma", "1", "latent Gaussian sigma for deepblur"),
    ("obfuscator.pixel_sigma", "1", "pixel Gaussian sigma for pixel_blur"),
    ("obfuscator.block", "8", "pixelate block size"),
    ("obfuscator.rect", "central", "mask rectangle: central | full | x0:y0:x1:y1"),
    ("obfuscator.epsilon", "0.03", "advnoise L-inf budget"),
    ("obfuscator.steps", "10", "advnoise gradient steps"),
    ("dataset.n_ids", "10", "identities"),
    ("dataset.n_per_id", "10", "images per identity"),
    ("dataset.jitter", "0.05", "per-image latent jitter"),
    ("dataset.seed", "7", "dataset seed"),
    ("split.train", "7", "train images per identity"),
    ("split.val", "1", "validation images per identity"),
    ("split.test", "2", "test images per identity"),
    ("split.seed", "0", "split shuffle seed"),
    ("classifier.extractor_seed", "11", "attacker randconv seed"),
    ("classifier.extractor_stages", "3", "attacker randconv stages"),
    ("classifier.epochs", "60", "attacker training epochs"),
    ("classifier.learning_rate", "0.05", "attacker learning rate"),
    ("classifier.momentum", "0.9", "attacker momentum"),
    ("classifier.batch_size", "16", "attacker mini-batch size"),
    ("classifier.seed", "0", "attacker shuffle seed"),
    ("eval.suite", "standard", "standard sweep or the configured obfuscator only: standard | single"),
    ("eval.sigmas", "0,0.5,1", "deepblur sigmas in the standard sweep"),
    ("eval.threats", "T1,T2,T3", "threat models to run"),
    ("metrics.fid_seed", "11", "randconv seed for FID features"),
    ("metrics.fid_stages", "3", "randconv stages for FID features"),
    ("compare.seed", "0", "benchmark case for compare-optimizers"),
    ("timing.record", "false", "write wall-clock elapsed_ms into trajectory CSVs (true makes them nondeterministic)"),
    ("serve.addr", "127.0.0.1:7878", "mock service listen address"),
    ("serve.backend", "gallery", "gallery (train on enrolled images) | classifier (dataset-trained)"),
    ("paths.out_dir", ".", "directory for outputs given without --out"),
];

/// Where a value came from, for error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Default,
    Line(usize),
    Override,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Default => write!(f, "default"),
            Origin::Line(n) => write!(f, "{n}"),
            Origin::Override => write!(f, "--set"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RawConfig {
    values: BTreeMap<&'static str, (String, Origin)>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, v, _)| (*k, (v.to_string(), Origin::Default)))
                .collect(),
        }
    }
}

fn known_key(key: &str, origin: Origin) -> Result<&'static str, CliError> {
    KEYS.iter()
        .map(|(k, _, _)| *k)
        .find(|k| *k == key)
        .ok_or_else(|| CliError::config(key, origin, "unknown key"))
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let origin = Origin::Line(i + 1);
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::config(line, origin, "expected key = value"));
            };
            let key = known_key(k.trim(), origin)?;
            if let Some(first) = seen.insert(key, i + 1) {
                return Err(CliError::config(
                    key,
                    origin,
                    format!("repeated key, first set on line {first}"),
                ));
            }
            cfg.values.insert(key, (v.trim().to_string(), origin));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` command-line override.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let Some((k, v)) = assignment.split_once('=') else {
            return Err(CliError::config(assignment, Origin::Override, "expected key=value"));
        };
        let key = known_key(k.trim(), Origin::Override)?;
        self.values
            .insert(key, (v.trim().to_string(), Origin::Override));
        Ok(())
    }

    fn raw(&self, key: &str) -> (&str, Origin) {
        let (v, o) = &self.values[key];
        (v.as_str(), *o)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        let (v, origin) = self.raw(key);
        v.parse()
            .map_err(|e: T::Err| CliError::config(key, origin, format!("bad value {v:?}: {e}")))
    }

    fn get_f64(&self, key: &str) -> Result<f64, CliError> {
        let v: f64 = self.get(key)?;
        if !v.is_finite() {
            let (_, origin) = self.raw(key);
            return Err(CliError::config(key, origin, "value must be finite"));
        }
        Ok(v)
    }

    fn invalid(&self, key: &str, msg: impl Into<String>) -> CliError {
        CliError::config(key, self.raw(key).1, msg)
    }

    /// Attributes a struct-level validation message to the key in `section`
    /// whose field name it mentions, else to the first key of the section.
    fn blame(&self, section: &str, msg: &str) -> CliError {
        let lower = msg.to_lowercase();
        let mut keys = KEYS.iter().map(|(k, _, _)| *k).filter(|k| k.starts_with(section));
        let first = keys.clone().next().expect("section has keys");
        let key = keys
            .find(|k| {
                let field = &k[section.len()..];
                lower.contains(field) || lower.contains(&field.replace('_', " "))
            })
            .unwrap_or(first);
        self.invalid(key, msg)
    }

    /// Resolves every key into typed settings.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let generator = BlobGeneratorConfig {
            blobs: self.get("generator.blobs")?,
            size: self.get("generator.size")?,
            steepness: self.get_f64("generator.steepness")?,
            ..Default::default()
        };
        generator
            .validate()
            .map_err(|e| self.blame("generator.", &e.to_string()))?;

        let extractor = match self.raw("extractor.kind").0 {
            "pixel" => ExtractorSpec::pixel(),
            "randconv" => {
                ExtractorSpec::randconv(self.get("extractor.seed")?, self.get("extractor.stages")?)
            }
            other => return Err(self.invalid("extractor.kind", format!("unknown kind {other:?}"))),
        };
        if extractor.kind == ExtractorKind::RandConv && extractor.stages == 0 {
            return Err(self.invalid("extractor.stages", "must be >= 1"));
        }

        let kind = OptimizerKind::parse(self.raw("optimizer.kind").0)
            .map_err(|e| self.invalid("optimizer.kind", e.to_string()))?;
        let mut optimizer = OptimizerConfig::new(kind);
        if self.raw("optimizer.learning_rate").0 != "auto" {
            optimizer.learning_rate = self.get_f64("optimizer.learning_rate")?;
        }
        optimizer.momentum = self.get_f64("optimizer.momentum")?;
        optimizer.beta1 = self.get_f64("optimizer.beta1")?;
        optimizer.beta2 = self.get_f64("optimizer.beta2")?;
        optimizer.epsilon = self.get_f64("optimizer.epsilon")?;
        optimizer.memory = self.get("optimizer.memory")?;
        optimizer.max_steps = self.get("optimizer.max_steps")?;
        optimizer.target_loss = self.get_f64("optimizer.target_loss")?;
        optimizer
            .validate()
            .map_err(|e| self.blame("optimizer.", &e.to_string()))?;

        let init = match self.raw("inversion.init").0 {
            "mean" => InitKind::Mean,
            "random" => InitKind::Random(self.get("inversion.init_seed")?),
            other => return Err(self.invalid("inversion.init", format!("unknown init {other:?}"))),
        };

        let obfuscator = ObfuscatorChoice {
            kind: ObfuscatorKindName::parse(self.raw("obfuscator.kind").0)
                .ok_or_else(|| self.invalid("obfuscator.kind", "unknown kind"))?,
            sigma: self.get_f64("obfuscator.sigma")?,
            pixel_sigma: self.get_f64("obfuscator.pixel_sigma")?,
            block: self.get("obfuscator.block")?,
            rect: RectChoice::parse(self.raw("obfuscator.rect").0)
                .ok_or_else(|| self.invalid("obfuscator.rect", "expected central, full or x0:y0:x1:y1"))?,
            epsilon: self.get_f64("obfuscator.epsilon")?,
            steps: self.get("obfuscator.steps")?,
        };

        let dataset = DatasetChoice {
            n_ids: self.get("dataset.n_ids")?,
            n_per_id: self.get("dataset.n_per_id")?,
            jitter: self.get_f64("dataset.jitter")?,
            seed: self.get("dataset.seed")?,
        };

        let harness = HarnessConfig {
            split: SplitSpec {
                train: self.get("split.train")?,
                val: self.get("split.val")?,
                test: self.get("split.test")?,
                seed: self.get("split.seed")?,
            },
            train: TrainConfig {
                extractor: ExtractorSpec::randconv(
                    self.get("classifier.extractor_seed")?,
                    self.get("classifier.extractor_stages")?,
                ),
                epochs: self.get("classifier.epochs")?,
                learning_rate: self.get_f64("classifier.learning_rate")?,
                momentum: self.get_f64("classifier.momentum")?,
                batch_size: self.get("classifier.batch_size")?,
                seed: self.get("classifier.seed")?,
            },
        };
        harness
            .train
            .validate()
            .map_err(|e| self.blame("classifier.", &e.to_string()))?;

        for key in ["classifier.extractor_stages", "metrics.fid_stages"] {
            if self.get::<usize>(key)? == 0 {
                return Err(self.invalid(key, "must be >= 1"));
            }
        }

        let suite = match self.raw("eval.suite").0 {
            "standard" => EvalSuite::Standard,
            "single" => EvalSuite::Single,
            other => return Err(self.invalid("eval.suite", format!("unknown suite {other:?}"))),
        };
        let sigmas = split_list(self.raw("eval.sigmas").0)
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && *v >= 0.0)
                    .ok_or_else(|| self.invalid("eval.sigmas", format!("bad sigma {s:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let threats = split_list(self.raw("eval.threats").0)
            .map(|s| ThreatModel::parse(s).map_err(|e| self.invalid("eval.threats", e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if threats.is_empty() {
            return Err(self.invalid("eval.threats", "empty list"));
        }

        let backend = match self.raw("serve.backend").0 {
            "gallery" => ServeBackend::Gallery,
            "classifier" => ServeBackend::Classifier,
            other => return Err(self.invalid("serve.backend", format!("unknown backend {other:?}"))),
        };
        let timing = match self.raw("timing.record").0 {
            "true" => true,
            "false" => false,
            other => return Err(self.invalid("timing.record", format!("expected true or false, got {other:?}"))),
        };

        Ok(RunConfig {
            generator,
            extractor,
            optimizer,
            init,
            obfuscator,
            dataset,
            harness,
            eval: EvalChoice { suite, sigmas, threats },
            fid_features: ExtractorSpec::randconv(
                self.get("metrics.fid_seed")?,
                self.get("metrics.fid_stages")?,
            ),
            compare_seed: self.get("compare.seed")?,
            record_timing: timing,
            serve_addr: self.raw("serve.addr").0.to_string(),
            serve_backend: backend,
            out_dir: PathBuf::from(self.raw("paths.out_dir").0),
        })
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty())
}

/// The default configuration as a commented file.
pub fn defaults_file() -> String {
    let mut out = String::new();
    for (k, v, doc) in KEYS {
        out.push_str(&format!("# {doc}\n{k} = {v}\n"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Mean,
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObfuscatorKindName {
    Identity,
    DeepBlur,
    DeepBlurAverage,
    PixelBlur,
    Pixelate,
    Mask,
    AdvNoise,
}

impl ObfuscatorKindName {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "identity" => Self::Identity,
            "deepblur" => Self::DeepBlur,
            "deepblur_average" => Self::DeepBlurAverage,
            "pixel_blur" => Self::PixelBlur,
            "pixelate" => Self::Pixelate,
            "mask" => Self::Mask,
            "advnoise" => Self::AdvNoise,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RectChoice {
    Central,
    Full,
    Explicit(MaskRect),
}

impl RectChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "central" => Some(Self::Central),
            "full" => Some(Self::Full),
            _ => {
                let parts = s
                    .split(':')
                    .map(|p| p.trim().parse::<usize>().ok())
                    .collect::<Option<Vec<_>>>()?;
                match parts[..] {
                    [x0, y0, x1, y1] => Some(Self::Explicit(MaskRect::new(x0, y0, x1, y1))),
                    _ => None,
                }
            }
        }
    }

    pub fn rect(&self, h: usize, w: usize) -> MaskRect {
        match *self {
            Self::Central => MaskRect::central(h, w),
            Self::Full => MaskRect::full(h, w),
            Self::Explicit(r) => r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObfuscatorChoice {
    pub kind: ObfuscatorKindName,
    pub sigma: f64,
    pub pixel_sigma: f64,
    pub block: usize,
    pub rect: RectChoice,
    pub epsilon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetChoice {
    pub n_ids: usize,
    pub n_per_id: usize,
    pub jitter: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSuite {
    Standard,
    Single,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalChoice {
    pub suite: EvalSuite,
    pub sigmas: Vec<f64>,
    pub threats: Vec<ThreatModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeBackend {
    Gallery,
    Classifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub generator: BlobGeneratorConfig,
    pub extractor: ExtractorSpec,
    pub optimizer: OptimizerConfig,
    pub init: InitKind,
    pub obfuscator: ObfuscatorChoice,
    pub dataset: DatasetChoice,
    pub harness: HarnessConfig,
    pub eval: EvalChoice,
    pub fid_features: ExtractorSpec,
    pub compare_seed: u64,
    pub record_timing: bool,
    pub serve_addr: String,
    pub serve_backend: ServeBackend,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RawConfig::default().resolve().expect("defaults resolve")
    }
}

impl RunConfig {
    pub fn deep_blur_settings(&self) -> deepblur_core::Result<DeepBlurSettings> {
        let init = match self.init {
            InitKind::Mean => None,
            InitKind::Random(seed) => {
                Some(deepblur_core::inversion::random_init(&self.generator, seed)?)
            }
        };
        Ok(DeepBlurSettings {
            generator: self.generator,
            extractor: self.extractor,
            optimizer: self.optimizer,
            init,
        })
    }
}
