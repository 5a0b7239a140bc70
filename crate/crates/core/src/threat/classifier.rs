//! Multinomial logistic regression over standardized extractor features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::optim::SgdmState;
use crate::perception::{Extractor, ExtractorSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub extractor: ExtractorSpec,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorSpec::randconv(11, 3),
            epochs: 60,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        Ok(())
    }

    /// Short hex digest identifying this configuration.
    pub fn digest(&self) -> String {
        let e = &self.extractor;
        let text = format!(
            "{:?}/{}/{}|{}|{:e}|{:e}|{}|{}",
            e.kind,
            e.seed,
            e.stages,
            self.epochs,
            self.learning_rate,
            self.momentum,
            self.batch_size,
            self.seed
        );
        Sha256::digest(text.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Linear softmax model on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub n_features: usize,
    pub n_classes: usize,
    /// Row-major `F × K`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    /// Per-feature scale; constant features get 1.
    pub scale: Vec<f64>,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Zero-based rank of `label`, counting ties at lower indices as ahead.
pub fn rank_of(p: &[f64], label: usize) -> usize {
    let t = p[label];
    p.iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < label))
        .count()
}

impl LinearModel {
    fn standardized(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn logits_std(&self, x: &[f64], params: &[f64]) -> Vec<f64> {
        let k = self.n_classes;
        let (w, b) = params.split_at(self.n_features * k);
        let mut z = b.to_vec();
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let row = &w[i * k..(i + 1) * k];
            z.iter_mut().zip(row).for_each(|(zj, wj)| *zj += xi * wj);
        }
        z
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let n = self.n_features * self.n_classes;
        self.weights.copy_from_slice(&p[..n]);
        self.bias.copy_from_slice(&p[n..]);
    }

    pub fn probabilities(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.n_features {
            return Err(Error::Shape(format!(
                "model expects {} features, got {}",
                self.n_features,
                features.len()
            )));
        }
        let x = self.standardized(features);
        Ok(softmax(&self.logits_std(&x, &self.params())))
    }

    /// Cross-entropy for `label` and its gradient with respect to the raw
    /// (unstandardized) features.
    pub fn loss_and_feature_grad(&self, features: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        let p = self.probabilities(features)?;
        if label >= self.n_classes {
            return Err(Error::InvalidParameter(format!(
                "label {label} outside {} classes",
                self.n_classes
            )));
        }
        let loss = -p[label].max(f64::MIN_POSITIVE).ln();
        let k = self.n_classes;
        let mut delta = p;
        delta[label] -= 1.0;
        let grad = (0..self.n_features)
            .map(|i| {
                let row = &self.weights[i * k..(i + 1) * k];
                let g: f64 = row.iter().zip(&delta).map(|(w, d)| w * d).sum();
                g / self.scale[i]
            })
            .collect();
        Ok((loss, grad))
    }

    /// Mean cross-entropy and top-1 over standardized inputs with `params`.
    fn score(&self, xs: &[Vec<f64>], labels: &[usize], params: &[f64]) -> (f64, f64) {
        let mut loss = 0.0;
        let mut hits = 0usize;
        for (x, &y) in xs.iter().zip(labels) {
            let p = softmax(&self.logits_std(x, params));
            loss -= p[y].max(f64::MIN_POSITIVE).ln();
            if argmax(&p) == y {
                hits += 1;
            }
        }
        let n = xs.len().max(1) as f64;
        (loss / n, hits as f64 / n)
    }
}

/// Fits a [`LinearModel`] by mini-batch momentum SGD, keeping the epoch with
/// the best validation top-1 (ties: lower validation loss, then earlier).
pub fn train_linear(
    train: &[Vec<f64>],
    train_labels: &[usize],
    val: &[Vec<f64>],
    val_labels: &[usize],
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<LinearModel> {
    cfg.validate()?;
    if train.is_empty() || train.len() != train_labels.len() || val.len() != val_labels.len() {
        return Err(Error::Shape("training features and labels disagree".into()));
    }
    let f = train[0].len();
    if f == 0 || train.iter().chain(val).any(|x| x.len() != f) {
        return Err(Error::Shape("inconsistent feature dimensionality".into()));
    }
    if train_labels.iter().chain(val_labels).any(|&y| y >= n_classes) {
        return Err(Error::InvalidParameter("label outside class range".into()));
    }
    let mut seen = train_labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "{} distinct training label(s); need at least 2",
            seen.len()
        )));
    }

    let n = train.len() as f64;
    let mut mean = vec![0.0; f];
    for x in train {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; f];
    for x in train {
        var.iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    let scale = var
        .into_iter()
        .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    let mut model = LinearModel {
        n_features: f,
        n_classes,
        weights: vec![0.0; f * n_classes],
        bias: vec![0.0; n_classes],
        mean,
        scale,
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|x| model.standardized(x)).collect();
    let vs: Vec<Vec<f64>> = val.iter().map(|x| model.standardized(x)).collect();
    let (eval_x, eval_y) = if vs.is_empty() {
        (&xs, train_labels)
    } else {
        (&vs, val_labels)
    };

    let mut params = model.params();
    let mut best = params.clone();
    let (mut best_loss, mut best_top1) = model.score(eval_x, eval_y, &params);
    let mut opt = SgdmState::new(params.len(), cfg.learning_rate, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let k = n_classes;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; params.len()];
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = &xs[i];
                let mut d = softmax(&model.logits_std(x, &params));
                d[train_labels[i]] -= 1.0;
                let (gw, gb) = grad.split_at_mut(f * k);
                for (j, xj) in x.iter().enumerate() {
                    let row = &mut gw[j * k..(j + 1) * k];
                    row.iter_mut().zip(&d).for_each(|(g, dc)| *g += inv * xj * dc);
                }
                gb.iter_mut().zip(&d).for_each(|(g, dc)| *g += inv * dc);
            }
            opt.step(&mut params, &grad)?;
        }
        let (loss, top1) = model.score(eval_x, eval_y, &params);
        if top1 > best_top1 || (top1 == best_top1 && loss < best_loss) {
            best_top1 = top1;
            best_loss = loss;
            best.copy_from_slice(&params);
        }
    }
    model.set_params(&best);
    Ok(model)
}

/// Identity classifier: a fixed extractor followed by a linear softmax head.
#[derive(Debug, Clone)]
pub struct SurrogateClassifier {
    config: TrainConfig,
    extractor: Extractor,
    model: Option<LinearModel>,
}

impl SurrogateClassifier {
    /// A classifier with no fitted head; refuses to predict.
    pub fn untrained(config: TrainConfig, channels: usize) -> Result<Self> {
        Ok(Self {
            extractor: Extractor::new(config.extractor, channels)?,
            config,
            model: None,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.model.is_some()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> Option<&LinearModel> {
        self.model.as_ref()
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.model.as_ref().map(|m| m.n_classes)
    }

    fn fitted(&self) -> Result<&LinearModel> {
        self.model.as_ref().ok_or(Error::Untrained)
    }

    pub fn features(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        self.extractor.extract(img).map(|f| f.0)
    }

    pub fn probabilities(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let model = self.fitted()?;
        model.probabilities(&self.features(img)?)
    }

    /// Predicted label and its probability.
    pub fn identify(&self, img: &ImageTensor) -> Result<(usize, f64)> {
        let p = self.probabilities(img)?;
        let label = argmax(&p);
        Ok((label, p[label]))
    }

    /// Cross-entropy for `label` and its gradient with respect to the image.
    pub fn loss_and_input_grad(&self, img: &ImageTensor, label: usize) -> Result<(f64, Vec<f64>)> {
        let model = self.fitted()?;
        let (loss, g) = model.loss_and_feature_grad(&self.features(img)?, label)?;
        Ok((loss, self.extractor.vjp(img, &g)?))
    }
}

/// Trains on labeled images. Labels must lie in `0..n_classes`.
pub fn train_classifier(
    train: &[(&ImageTensor, usize)],
    val: &[(&ImageTensor, usize)],
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<SurrogateClassifier> {
    let first = train
        .first()
        .ok_or_else(|| Error::DegenerateData("empty training set".into()))?;
    let mut clf = SurrogateClassifier::untrained(*cfg, first.0.channels())?;
    let feats = |set: &[(&ImageTensor, usize)]| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let xs = set
            .par_iter()
            .map(|(img, _)| clf.features(img))
            .collect::<Result<Vec<_>>>()?;
        Ok((xs, set.iter().map(|(_, y)| *y).collect()))
    };
    let (tx, ty) = feats(train)?;
    let (vx, vy) = feats(val)?;
    let model = train_linear(&tx, &ty, &vx, &vy, n_classes, cfg)?;
    clf.model = Some(model);
    Ok(clf)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
    pub n: usize,
}

/// Top-1 and top-5 accuracy over labeled images.
pub fn evaluate(clf: &SurrogateClassifier, test: &[(&ImageTensor, usize)]) -> Result<Accuracy> {
    if test.is_empty() {
        return Err(Error::InsufficientSamples("empty test set".into()));
    }
    let ranks = test
        .par_iter()
        .map(|(img, y)| {
            let p = clf.probabilities(img)?;
            if *y >= p.len() {
                return Err(Error::InvalidParameter(format!("label {y} outside model")));
            }
            Ok(rank_of(&p, *y))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(accuracy_from_ranks(&ranks))
}

pub fn accuracy_from_ranks(ranks: &[usize]) -> Accuracy {
    let n = ranks.len();
    let top1 = ranks.iter().filter(|&&r| r == 0).count() as f64 / n as f64;
    let top5 = ranks.iter().filter(|&&r| r < 5).count() as f64 / n as f64;
    Accuracy { top1, top5, n }
}
