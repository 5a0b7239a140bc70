//! Feature extraction and the feature-space loss that drives latent search.
//!
//! Two extractors are available: raw pixels, and a fixed random convolutional
//! stack (`stages` × [3×3 conv bank of 8 filters → softplus → 2×2 mean-pool]).
//! Random weights are drawn once from the seed and never trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const RANDCONV_FILTERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExtractorKind {
    Pixel,
    RandConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    pub seed: u64,
    pub stages: usize,
}

impl ExtractorSpec {
    pub fn pixel() -> Self {
        Self {
            kind: ExtractorKind::Pixel,
            seed: 0,
            stages: 3,
        }
    }

    pub fn randconv(seed: u64, stages: usize) -> Self {
        Self {
            kind: ExtractorKind::RandConv,
            seed,
            stages,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Channel-major feature map used inside the conv stack.
#[derive(Debug, Clone)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn from_image(img: &ImageTensor) -> Self {
        let (h, w, c) = img.shape();
        let mut v = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    v[(ch * h + y) * w + x] = img.get(y, x, ch);
                }
            }
        }
        Self { c, h, w, v }
    }
}

/// One conv stage's weights, `[out][in][3][3]`.
#[derive(Debug, Clone)]
struct ConvBank {
    cin: usize,
    weights: Vec<f64>,
}

/// Materialized extractor: the spec plus its weights for one input channel
/// count.
#[derive(Debug, Clone)]
pub struct Extractor {
    spec: ExtractorSpec,
    banks: Vec<ConvBank>,
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct StageCache {
    input: Map,
    pre: Vec<f64>,
}

impl Extractor {
    pub fn new(spec: ExtractorSpec, channels: usize) -> Result<Self> {
        let banks = match spec.kind {
            ExtractorKind::Pixel => Vec::new(),
            ExtractorKind::RandConv => {
                if spec.stages < 1 {
                    return Err(Error::InvalidParameter("randconv needs >= 1 stage".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                let mut cin = channels;
                (0..spec.stages)
                    .map(|_| {
                        let scale = (2.0 / (9.0 * cin as f64)).sqrt();
                        let weights = (0..RANDCONV_FILTERS * cin * 9)
                            .map(|_| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                scale * z
                            })
                            .collect();
                        let bank = ConvBank { cin, weights };
                        cin = RANDCONV_FILTERS;
                        bank
                    })
                    .collect()
            }
        };
        Ok(Self { spec, banks })
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    fn check_input(&self, img: &ImageTensor) -> Result<()> {
        if let ExtractorKind::RandConv = self.spec.kind {
            let need = 1usize << self.spec.stages;
            if img.height() < need || img.width() < need {
                return Err(Error::Shape(format!(
                    "image {}x{} smaller than {need} required by {} stages",
                    img.height(),
                    img.width(),
                    self.spec.stages
                )));
            }
            if self.banks[0].cin != img.channels() {
                return Err(Error::Shape(format!(
                    "extractor built for {} channels, image has {}",
                    self.banks[0].cin,
                    img.channels()
                )));
            }
        }
        Ok(())
    }

    pub fn extract(&self, img: &ImageTensor) -> Result<FeatureVector> {
        self.check_input(img)?;
        match self.spec.kind {
            ExtractorKind::Pixel => Ok(FeatureVector(img.data().to_vec())),
            ExtractorKind::RandConv => {
                let (out, _) = self.forward(img, false);
                Ok(FeatureVector(out.v))
            }
        }
    }

    fn forward(&self, img: &ImageTensor, keep: bool) -> (Map, Vec<StageCache>) {
        let mut x = Map::from_image(img);
        let mut caches = Vec::new();
        for bank in &self.banks {
            let pre = conv3x3(&x, bank);
            let act = Map {
                c: RANDCONV_FILTERS,
                h: x.h,
                w: x.w,
                v: pre.iter().map(|&z| softplus(z)).collect(),
            };
            let pooled = mean_pool(&act);
            if keep {
                caches.push(StageCache { input: x, pre });
            }
            x = pooled;
        }
        (x, caches)
    }

    /// Loss against `target` features and its gradient with respect to the
    /// image entries (HWC layout).
    pub fn loss_and_grad(
        &self,
        target: &FeatureVector,
        img: &ImageTensor,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_input(img)?;
        match self.spec.kind {
            ExtractorKind::Pixel => {
                let y = FeatureVector(img.data().to_vec());
                let loss = feature_loss(target, &y)?;
                let f = y.len() as f64;
                let grad = y.0.iter().zip(&target.0).map(|(a, b)| 2.0 * (a - b) / f).collect();
                Ok((loss, grad))
            }
            ExtractorKind::RandConv => {
                let (out, caches) = self.forward(img, true);
                let yhat = FeatureVector(out.v);
                let loss = feature_loss(target, &yhat)?;
                let f = yhat.len() as f64;
                let upstream = yhat
                    .0
                    .iter()
                    .zip(&target.0)
                    .map(|(a, b)| 2.0 * (a - b) / f)
                    .collect();
                Ok((loss, self.backward(caches, out.c, out.h, out.w, upstream, img)))
            }
        }
    }

    /// Pulls a feature-space cotangent back to the image (HWC layout).
    pub fn vjp(&self, img: &ImageTensor, upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_input(img)?;
        match self.spec.kind {
            ExtractorKind::Pixel => {
                if upstream.len() != img.data().len() {
                    return Err(Error::Shape(format!(
                        "cotangent length {} vs {} features",
                        upstream.len(),
                        img.data().len()
                    )));
                }
                Ok(upstream.to_vec())
            }
            ExtractorKind::RandConv => {
                let (out, caches) = self.forward(img, true);
                if upstream.len() != out.v.len() {
                    return Err(Error::Shape(format!(
                        "cotangent length {} vs {} features",
                        upstream.len(),
                        out.v.len()
                    )));
                }
                Ok(self.backward(caches, out.c, out.h, out.w, upstream.to_vec(), img))
            }
        }
    }

    fn backward(
        &self,
        caches: Vec<StageCache>,
        c: usize,
        h: usize,
        w: usize,
        upstream: Vec<f64>,
        img: &ImageTensor,
    ) -> Vec<f64> {
        let mut g = Map { c, h, w, v: upstream };
        for (bank, cache) in self.banks.iter().zip(caches).rev() {
            let (ih, iw) = (cache.input.h, cache.input.w);
            let mut d_act = unpool(&g, ih, iw);
            for (d, &z) in d_act.v.iter_mut().zip(&cache.pre) {
                *d *= sigmoid(z);
            }
            g = conv3x3_backward_input(&d_act, bank, &cache.input);
        }
        // back to HWC
        let (ih, iw, ic) = img.shape();
        let mut out = vec![0.0; ih * iw * ic];
        for ch in 0..ic {
            for y in 0..ih {
                for x in 0..iw {
                    out[(y * iw + x) * ic + ch] = g.v[(ch * ih + y) * iw + x];
                }
            }
        }
        out
    }
}

fn conv3x3(x: &Map, bank: &ConvBank) -> Vec<f64> {
    let (h, w) = (x.h, x.w);
    let mut out = vec![0.0; RANDCONV_FILTERS * h * w];
    for o in 0..RANDCONV_FILTERS {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        for i in 0..bank.cin {
            let src = &x.v[i * h * w..(i + 1) * h * w];
            let k = &bank.weights[(o * bank.cin + i) * 9..(o * bank.cin + i + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wt = k[ky * 3 + kx];
                    // zero padding: out[y][x] += wt * in[y+ky-1][x+kx-1]
                    let y_lo = if ky == 0 { 1 } else { 0 };
                    let y_hi = if ky == 2 { h - 1 } else { h };
                    let x_lo = if kx == 0 { 1 } else { 0 };
                    let x_hi = if kx == 2 { w - 1 } else { w };
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let orow = &mut plane[y * w..(y + 1) * w];
                        let irow = &src[sy * w..(sy + 1) * w];
                        for xx in x_lo..x_hi {
                            orow[xx] += wt * irow[xx + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_backward_input(d_out: &Map, bank: &ConvBank, input: &Map) -> Map {
    let (h, w) = (input.h, input.w);
    let mut d_in = vec![0.0; bank.cin * h * w];
    for o in 0..RANDCONV_FILTERS {
        let g = &d_out.v[o * h * w..(o + 1) * h * w];
        for i in 0..bank.cin {
            let dst = &mut d_in[i * h * w..(i + 1) * h * w];
            let k = &bank.weights[(o * bank.cin + i) * 9..(o * bank.cin + i + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wt = k[ky * 3 + kx];
                    let y_lo = if ky == 0 { 1 } else { 0 };
                    let y_hi = if ky == 2 { h - 1 } else { h };
                    let x_lo = if kx == 0 { 1 } else { 0 };
                    let x_hi = if kx == 2 { w - 1 } else { w };
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        for xx in x_lo..x_hi {
                            dst[sy * w + xx + kx - 1] += wt * g[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Map {
        c: bank.cin,
        h,
        w,
        v: d_in,
    }
}

/// 2×2 mean pool; a trailing odd row/column is dropped.
fn mean_pool(x: &Map) -> Map {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut v = vec![0.0; x.c * oh * ow];
    for c in 0..x.c {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| x.v[(c * x.h + 2 * y + dy) * x.w + 2 * xx + dx];
                v[(c * oh + y) * ow + xx] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    Map { c: x.c, h: oh, w: ow, v }
}

fn unpool(g: &Map, h: usize, w: usize) -> Map {
    let mut v = vec![0.0; g.c * h * w];
    for c in 0..g.c {
        for y in 0..g.h {
            for x in 0..g.w {
                let d = 0.25 * g.v[(c * g.h + y) * g.w + x];
                for dy in 0..2 {
                    for dx in 0..2 {
                        v[(c * h + 2 * y + dy) * w + 2 * x + dx] = d;
                    }
                }
            }
        }
    }
    Map { c: g.c, h, w, v }
}

pub fn extract(img: &ImageTensor, spec: &ExtractorSpec) -> Result<FeatureVector> {
    Extractor::new(*spec, img.channels())?.extract(img)
}

/// Mean squared difference between two feature vectors.
pub fn feature_loss(y: &FeatureVector, yhat: &FeatureVector) -> Result<f64> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(Error::Shape(format!(
            "feature dimensionality {} vs {}",
            y.len(),
            yhat.len()
        )));
    }
    let sum: f64 = y.0.iter().zip(&yhat.0).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / y.len() as f64)
}

/// Gradient of `feature_loss(y, extract(img))` with respect to the image.
pub fn feature_loss_gradient(
    y: &FeatureVector,
    yhat: &FeatureVector,
    spec: &ExtractorSpec,
    img: &ImageTensor,
) -> Result<Vec<f64>> {
    let ex = Extractor::new(*spec, img.channels())?;
    let fresh = ex.extract(img)?;
    if fresh.len() != yhat.len() || fresh.len() != y.len() {
        return Err(Error::Shape(format!(
            "features ({}, {}) inconsistent with image features {}",
            y.len(),
            yhat.len(),
            fresh.len()
        )));
    }
    let tol = 1e-9;
    if fresh
        .0
        .iter()
        .zip(&yhat.0)
        .any(|(a, b)| (a - b).abs() > tol * (1.0 + a.abs()))
    {
        return Err(Error::InvalidParameter(
            "yhat is not the extraction of the given image".into(),
        ));
    }
    ex.loss_and_grad(y, img).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn pixel_features_flatten() {
        let img = ImageTensor::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let f = extract(&img, &ExtractorSpec::pixel()).unwrap();
        assert_eq!(f.0, vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn randconv_is_deterministic_and_sized() {
        let img = random_image(16, 16, 3, 1);
        let spec = ExtractorSpec::randconv(0, 3);
        let a = extract(&img, &spec).unwrap();
        let b = extract(&img, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), RANDCONV_FILTERS * 2 * 2);
        let small = random_image(4, 16, 3, 1);
        assert!(matches!(extract(&small, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_cases() {
        let a = FeatureVector(vec![0.0, 0.0]);
        let b = FeatureVector(vec![3.0, 4.0]);
        assert_eq!(feature_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(feature_loss(&a, &b).unwrap(), 12.5);
        assert_eq!(feature_loss(&b, &a).unwrap(), feature_loss(&a, &b).unwrap());
        assert!(feature_loss(&a, &FeatureVector(vec![1.0])).is_err());
    }

    #[test]
    fn gradient_vanishes_at_target() {
        let img = random_image(16, 16, 3, 2);
        for spec in [ExtractorSpec::pixel(), ExtractorSpec::randconv(4, 2)] {
            let y = extract(&img, &spec).unwrap();
            let g = feature_loss_gradient(&y, &y, &spec, &img).unwrap();
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn inconsistent_yhat_rejected() {
        let img = random_image(8, 8, 1, 3);
        let spec = ExtractorSpec::pixel();
        let y = extract(&img, &spec).unwrap();
        let bad = FeatureVector(vec![0.0; y.len()]);
        assert!(feature_loss_gradient(&y, &bad, &spec, &img).is_err());
        let short = FeatureVector(vec![0.0; 3]);
        assert!(feature_loss_gradient(&short, &y, &spec, &img).is_err());
    }

    fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    /// Central differences of the feature loss over every image entry.
    fn fd_gradient(y: &FeatureVector, spec: &ExtractorSpec, img: &ImageTensor, h: f64) -> Vec<f64> {
        let (ih, iw, ic) = img.shape();
        let loss = |v: Vec<f64>| {
            // the perturbed image may step outside [0, 1] by h
            let probe = ImageTensor::from_clamped(ih, iw, ic, v).unwrap();
            feature_loss(y, &extract(&probe, spec).unwrap()).unwrap()
        };
        (0..img.data().len())
            .map(|j| {
                let mut plus = img.data().to_vec();
                let mut minus = plus.clone();
                plus[j] += h;
                minus[j] -= h;
                (loss(plus) - loss(minus)) / (2.0 * h)
            })
            .collect()
    }

    /// Random image kept away from the clamp boundaries.
    fn interior_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap()
    }

    #[test]
    fn pixel_gradient_closed_form_and_differences() {
        let spec = ExtractorSpec::pixel();
        let img = interior_image(5, 4, 3, 8);
        let y = extract(&interior_image(5, 4, 3, 9), &spec).unwrap();
        let yhat = extract(&img, &spec).unwrap();
        let g = feature_loss_gradient(&y, &yhat, &spec, &img).unwrap();
        let f = img.data().len() as f64;
        for ((gi, xi), yi) in g.iter().zip(img.data()).zip(&y.0) {
            assert!((gi - 2.0 / f * (xi - yi)).abs() < 1e-15);
        }
        let fd = fd_gradient(&y, &spec, &img, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn randconv_gradient_matches_differences() {
        for (seed, (h, w, c, stages)) in [(8, 8, 3, 2), (16, 16, 3, 3), (12, 10, 1, 2), (9, 11, 3, 3)]
            .into_iter()
            .enumerate()
        {
            let spec = ExtractorSpec::randconv(seed as u64, stages);
            let img = interior_image(h, w, c, 40 + seed as u64);
            let y = extract(&interior_image(h, w, c, 80 + seed as u64), &spec).unwrap();
            let yhat = extract(&img, &spec).unwrap();
            let g = feature_loss_gradient(&y, &yhat, &spec, &img).unwrap();
            let fd = fd_gradient(&y, &spec, &img, 1e-5);
            let err = relative_error(&g, &fd);
            assert!(err < 1e-4, "{h}x{w}x{c} stages {stages}: {err}");
        }
    }

    #[test]
    fn vjp_matches_directional_derivative() {
        use rand::Rng;
        let spec = ExtractorSpec::randconv(5, 2);
        let ex = Extractor::new(spec, 3).unwrap();
        let img = interior_image(8, 8, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = ex.extract(&img).unwrap();
        let u: Vec<f64> = (0..f.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..img.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = ex.vjp(&img, &u).unwrap();
        let along = |t: f64| {
            let v = img.data().iter().zip(&d).map(|(x, dx)| x + t * dx).collect();
            let probe = ImageTensor::from_clamped(8, 8, 3, v).unwrap();
            let fv = ex.extract(&probe).unwrap();
            fv.0.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-5;
        let fd = (along(h) - along(-h)) / (2.0 * h);
        let an: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
        assert!(ex.vjp(&img, &u[1..]).is_err());
    }

    #[test]
    fn randconv_constant_image_golden_checksum() {
        use sha2::{Digest, Sha256};
        let img = ImageTensor::filled(64, 64, 3, 0.5).unwrap();
        let f = extract(&img, &ExtractorSpec::randconv(0, 3)).unwrap();
        assert_eq!(f.len(), RANDCONV_FILTERS * 8 * 8);
        let mut h = Sha256::new();
        for v in &f.0 {
            h.update(v.to_le_bytes());
        }
        let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, "f2162c796239ddc9f01dbe3e2888824d2e146cbdb43fdab8231ab5cd4f9511f8");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn loss_nonnegative_and_zero_only_on_equality(
                a in prop::collection::vec(-5.0f64..5.0, 1..20),
                shift in -1.0f64..1.0,
            ) {
                let y = FeatureVector(a.clone());
                let z = FeatureVector(a.iter().map(|v| v + shift).collect());
                let l = feature_loss(&y, &z).unwrap();
                prop_assert!(l >= 0.0);
                prop_assert_eq!(feature_loss(&y, &y).unwrap(), 0.0);
                if shift.abs() > 1e-5 {
                    prop_assert!(l > 1e-12);
                }
            }
        }
    }
}
