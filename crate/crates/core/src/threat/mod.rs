//! Re-identification attacks under the three threat models, plus a generic
//! remote recognition client and an in-process mock service.

mod classifier;
mod remote;

use std::fmt::{self, Write as _};
use std::sync::{Arc, Mutex, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use classifier::{
    accuracy_from_ranks, argmax, evaluate, rank_of, softmax, train_classifier, train_linear,
    Accuracy, LinearModel, SurrogateClassifier, TrainConfig,
};
pub use remote::{
    mock_service, remote_enroll, remote_identify, remote_train, MockBackend, RemoteClient,
    Request, Response, ServiceHandle,
};

use crate::error::{Error, Result};
use crate::generator::{LabeledDataset, LatentCode};
use crate::image::ImageTensor;
use crate::obfuscation::{regenerate, DeepBlurSettings, ObfuscatorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThreatModel {
    /// Train on clean images, test on obfuscated ones.
    T1,
    /// Train on obfuscated images, test on clean ones.
    T2,
    /// Train on obfuscated images, test on separately obfuscated ones.
    T3,
}

impl ThreatModel {
    pub const ALL: [ThreatModel; 3] = [ThreatModel::T1, ThreatModel::T2, ThreatModel::T3];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(ThreatModel::T1),
            "T2" => Ok(ThreatModel::T2),
            "T3" => Ok(ThreatModel::T3),
            _ => Err(Error::InvalidParameter(format!("unknown threat model {s:?}"))),
        }
    }

    fn trains_obfuscated(self) -> bool {
        !matches!(self, ThreatModel::T1)
    }

    fn tests_obfuscated(self) -> bool {
        !matches!(self, ThreatModel::T2)
    }
}

impl fmt::Display for ThreatModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ThreatModel::T1 => "T1",
            ThreatModel::T2 => "T2",
            ThreatModel::T3 => "T3",
        };
        f.write_str(s)
    }
}

/// Per-identity image counts for the train/val/test partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 7,
            val: 1,
            test: 2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Item indices into the dataset for each part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded per-identity shuffle, then partition.
pub fn split_dataset(ds: &LabeledDataset, spec: &SplitSpec) -> Result<DatasetSplit> {
    if ds.n_per_id != spec.total() {
        return Err(Error::InvalidParameter(format!(
            "split {}/{}/{} does not cover {} images per identity",
            spec.train, spec.val, spec.test, ds.n_per_id
        )));
    }
    if spec.train == 0 || spec.test == 0 {
        return Err(Error::InvalidParameter("train and test parts must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for label in 0..ds.n_ids {
        let mut idx: Vec<usize> = (0..ds.items.len())
            .filter(|&i| ds.items[i].label == label)
            .collect();
        if idx.len() != spec.total() {
            return Err(Error::InvalidParameter(format!(
                "identity {label} has {} images, split needs {}",
                idx.len(),
                spec.total()
            )));
        }
        idx.shuffle(&mut rng);
        out.train.extend_from_slice(&idx[..spec.train]);
        out.val.extend_from_slice(&idx[spec.train..spec.train + spec.val]);
        out.test.extend_from_slice(&idx[spec.train + spec.val..]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HarnessConfig {
    pub split: SplitSpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThreatReport {
    pub threat: ThreatModel,
    pub method: String,
    pub param: String,
    pub top1: f64,
    pub top5: f64,
    pub n_test: usize,
    /// Split seed; the training seed is folded into `classifier_digest`.
    pub seed: u64,
    pub classifier_digest: String,
    pub n_classes: usize,
}

impl ThreatReport {
    pub const CSV_HEADER: &'static str = "threat,method,param,top1,top5,n_test,seed";

    /// Accuracy of uniform guessing.
    pub fn chance(&self) -> f64 {
        1.0 / self.n_classes as f64
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.threat, self.method, self.param, self.top1, self.top5, self.n_test, self.seed
        )
    }
}

pub fn reports_to_csv(reports: &[ThreatReport]) -> String {
    let mut out = String::from(ThreatReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// DeepBlur sigmas of the standard attack sweep, besides average mode.
pub const STANDARD_SIGMAS: [f64; 3] = [0.0, 0.5, 1.0];

type LatentCache = Mutex<Vec<(DeepBlurSettings, Arc<Vec<LatentCode>>)>>;

/// Runs attacks against one dataset and split, caching the clean classifier
/// and per-image inversions across obfuscators.
pub struct ThreatHarness<'a> {
    ds: &'a LabeledDataset,
    cfg: HarnessConfig,
    split: DatasetSplit,
    clean: OnceLock<SurrogateClassifier>,
    latents: LatentCache,
}

impl<'a> ThreatHarness<'a> {
    pub fn new(ds: &'a LabeledDataset, cfg: HarnessConfig) -> Result<Self> {
        cfg.train.validate()?;
        let split = split_dataset(ds, &cfg.split)?;
        Ok(Self {
            ds,
            cfg,
            split,
            clean: OnceLock::new(),
            latents: Mutex::new(Vec::new()),
        })
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.split
    }

    fn pairs<'b>(&self, idx: &[usize], images: Option<&'b [ImageTensor]>) -> Vec<(&'b ImageTensor, usize)>
    where
        'a: 'b,
    {
        idx.iter()
            .enumerate()
            .map(|(j, &i)| {
                let img = match images {
                    Some(imgs) => &imgs[j],
                    None => &self.ds.items[i].image,
                };
                (img, self.ds.items[i].label)
            })
            .collect()
    }

    fn train(&self, train: &[(&ImageTensor, usize)], val: &[(&ImageTensor, usize)]) -> Result<SurrogateClassifier> {
        train_classifier(train, val, self.ds.n_ids, &self.cfg.train)
    }

    /// Classifier trained on the clean train split, validated on clean val.
    pub fn clean_classifier(&self) -> Result<&SurrogateClassifier> {
        if let Some(c) = self.clean.get() {
            return Ok(c);
        }
        let clf = self.train(
            &self.pairs(&self.split.train, None),
            &self.pairs(&self.split.val, None),
        )?;
        Ok(self.clean.get_or_init(|| clf))
    }

    /// Inverted latents for every dataset item under `settings`.
    pub fn inversions(&self, settings: &DeepBlurSettings) -> Result<Arc<Vec<LatentCode>>> {
        {
            let cache = self.latents.lock().expect("latent cache poisoned");
            if let Some((_, v)) = cache.iter().find(|(s, _)| s == settings) {
                return Ok(v.clone());
            }
        }
        let latents = self
            .ds
            .items
            .par_iter()
            .map(|item| settings.invert(&item.image).map(|r| r.latent))
            .collect::<Result<Vec<_>>>()?;
        let latents = Arc::new(latents);
        self.latents
            .lock()
            .expect("latent cache poisoned")
            .push((settings.clone(), latents.clone()));
        Ok(latents)
    }

    /// Obfuscates the items at `idx`, in order.
    pub fn obfuscate(&self, obf: &ObfuscatorSpec, idx: &[usize]) -> Result<Vec<ImageTensor>> {
        if let (Some(settings), Some(filter)) = (obf.deep_blur_settings(), obf.latent_filter()) {
            let latents = self.inversions(settings)?;
            return idx
                .par_iter()
                .map(|&i| regenerate(&latents[i], filter, &settings.generator).map(|(_, img)| img))
                .collect();
        }
        idx.par_iter()
            .map(|&i| {
                let item = &self.ds.items[i];
                obf.apply(&item.image, item.label)
            })
            .collect()
    }

    pub fn run(&self, obf: &ObfuscatorSpec, threat: ThreatModel) -> Result<ThreatReport> {
        let trained;
        let clf = if threat.trains_obfuscated() {
            let tr = self.obfuscate(obf, &self.split.train)?;
            let va = self.obfuscate(obf, &self.split.val)?;
            trained = self.train(
                &self.pairs(&self.split.train, Some(&tr)),
                &self.pairs(&self.split.val, Some(&va)),
            )?;
            &trained
        } else {
            self.clean_classifier()?
        };
        // T3's test side is a separate obfuscation pass over disjoint items
        let test_imgs = if threat.tests_obfuscated() {
            Some(self.obfuscate(obf, &self.split.test)?)
        } else {
            None
        };
        let acc = evaluate(clf, &self.pairs(&self.split.test, test_imgs.as_deref()))?;
        Ok(ThreatReport {
            threat,
            method: obf.kind_name().to_string(),
            param: obf.param_string(),
            top1: acc.top1,
            top5: acc.top5,
            n_test: acc.n,
            seed: self.cfg.split.seed,
            classifier_digest: self.cfg.train.digest(),
            n_classes: self.ds.n_ids,
        })
    }
}

pub fn run_threat_eval(
    ds: &LabeledDataset,
    obf: &ObfuscatorSpec,
    threat: ThreatModel,
    cfg: &HarnessConfig,
) -> Result<ThreatReport> {
    ThreatHarness::new(ds, *cfg)?.run(obf, threat)
}
