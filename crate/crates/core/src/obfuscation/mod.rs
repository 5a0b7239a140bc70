//! Image obfuscators: DeepBlur (low-pass filtering in latent space, then
//! regeneration) and the pixel-space baselines it is compared against.

mod gaussian;

use std::fmt;
use std::sync::Arc;

pub use gaussian::{
    convolve_reflect, gaussian_density, gaussian_kernel, reflect_index, GaussianKernel,
};

use crate::error::{Error, Result};
use crate::generator::{synth_generate, BlobGeneratorConfig, LatentCode};
use crate::image::ImageTensor;
use crate::inversion::{default_init, invert, InversionResult};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::perception::ExtractorSpec;
use crate::threat::SurrogateClassifier;

/// Largest perturbation budget accepted by [`adv_noise`].
pub const MAX_ADV_EPSILON: f64 = 0.25;

/// Pixel-space Gaussian sigma used by the pixel_blur baseline unless told
/// otherwise.
pub const DEFAULT_PIXEL_BLUR_SIGMA: f64 = 1.0;

/// Gaussian blur of the latent matrix with reflect boundaries.
pub fn blur_latent(w: &LatentCode, sigma: f64) -> Result<LatentCode> {
    let kernel = gaussian_kernel(sigma)?;
    w.with_values(convolve_reflect(w.values(), w.rows(), w.cols(), &kernel))
}

/// Replaces every entry with the global mean.
pub fn average_latent_mode(w: &LatentCode) -> LatentCode {
    // a rounded sum of n copies of m divided by n is often not m
    let first = w.values()[0];
    if w.values().iter().all(|v| v.to_bits() == first.to_bits()) {
        return w.clone();
    }
    let m = w.mean();
    w.with_values(vec![m; w.values().len()])
        .expect("mean of finite values is finite")
}

/// How the latent is filtered before regeneration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatentFilter {
    Gaussian(f64),
    Average,
}

impl LatentFilter {
    pub fn apply(&self, w: &LatentCode) -> Result<LatentCode> {
        match *self {
            LatentFilter::Gaussian(sigma) => blur_latent(w, sigma),
            LatentFilter::Average => Ok(average_latent_mode(w)),
        }
    }
}

/// Everything needed to invert an image before filtering its latent.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepBlurSettings {
    pub generator: BlobGeneratorConfig,
    pub extractor: ExtractorSpec,
    pub optimizer: OptimizerConfig,
    /// `None` starts from the default mean latent.
    pub init: Option<LatentCode>,
}

impl Default for DeepBlurSettings {
    fn default() -> Self {
        Self {
            generator: BlobGeneratorConfig::default(),
            extractor: ExtractorSpec::pixel(),
            optimizer: OptimizerConfig::new(OptimizerKind::Lbfgs),
            init: None,
        }
    }
}

impl DeepBlurSettings {
    pub fn invert(&self, img: &ImageTensor) -> Result<InversionResult> {
        let init = match &self.init {
            Some(w) => w.clone(),
            None => default_init(&self.generator)?,
        };
        invert(img, &self.generator, &self.extractor, &self.optimizer, &init)
    }
}

#[derive(Debug, Clone)]
pub struct DeepBlurOutput {
    pub image: ImageTensor,
    /// Latent found by inversion.
    pub latent: LatentCode,
    /// Latent after filtering, the one that was rendered.
    pub filtered: LatentCode,
    pub inversion: InversionResult,
}

/// Filters an already-inverted latent and renders it.
pub fn regenerate(
    latent: &LatentCode,
    filter: LatentFilter,
    cfg: &BlobGeneratorConfig,
) -> Result<(LatentCode, ImageTensor)> {
    let filtered = filter.apply(latent)?;
    let image = synth_generate(&filtered, cfg)?;
    Ok((filtered, image))
}

pub fn deep_blur(
    img: &ImageTensor,
    filter: LatentFilter,
    settings: &DeepBlurSettings,
) -> Result<DeepBlurOutput> {
    let inversion = settings.invert(img)?;
    let (filtered, image) = regenerate(&inversion.latent, filter, &settings.generator)?;
    Ok(DeepBlurOutput {
        image,
        latent: inversion.latent.clone(),
        filtered,
        inversion,
    })
}

/// Per-channel Gaussian blur of the pixels.
pub fn pixel_blur(img: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    let kernel = gaussian_kernel(sigma)?;
    let (h, w, c) = img.shape();
    let mut data = vec![0.0; h * w * c];
    for ch in 0..c {
        let plane = convolve_reflect(&img.plane(ch), h, w, &kernel);
        for (i, v) in plane.into_iter().enumerate() {
            data[i * c + ch] = v;
        }
    }
    // convex combinations can round a hair outside [0, 1]
    ImageTensor::from_clamped(h, w, c, data)
}

/// Replaces each `block × block` tile, anchored at the top-left, with its
/// per-channel mean. Edge tiles may be smaller.
pub fn pixelate(img: &ImageTensor, block: usize) -> Result<ImageTensor> {
    if block < 1 {
        return Err(Error::InvalidParameter("pixelate block must be >= 1".into()));
    }
    let (h, w, c) = img.shape();
    let mut data = img.data().to_vec();
    for ty in (0..h).step_by(block) {
        for tx in (0..w).step_by(block) {
            let (y1, x1) = ((ty + block).min(h), (tx + block).min(w));
            let n = ((y1 - ty) * (x1 - tx)) as f64;
            for ch in 0..c {
                let mut sum = 0.0;
                for y in ty..y1 {
                    for x in tx..x1 {
                        sum += img.get(y, x, ch);
                    }
                }
                let mean = sum / n;
                for y in ty..y1 {
                    for x in tx..x1 {
                        data[img.index(y, x, ch)] = mean;
                    }
                }
            }
        }
    }
    ImageTensor::from_clamped(h, w, c, data)
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`; x indexes columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl MaskRect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// The whole frame of an `h × w` image.
    pub fn full(h: usize, w: usize) -> Self {
        Self::new(0, 0, w, h)
    }

    /// The central half of the frame along each axis.
    pub fn central(h: usize, w: usize) -> Self {
        Self::new(w / 4, h / 4, w - w / 4, h - h / 4)
    }

    pub fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::InvalidParameter(format!("empty mask rectangle {self}")));
        }
        if self.x1 > w || self.y1 > h {
            return Err(Error::InvalidParameter(format!(
                "mask rectangle {self} exceeds {w}x{h} frame"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for MaskRect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.x0, self.y0, self.x1, self.y1)
    }
}

/// Sets the rectangle to black.
pub fn mask(img: &ImageTensor, rect: MaskRect) -> Result<ImageTensor> {
    let (h, w, c) = img.shape();
    rect.check(h, w)?;
    let mut data = img.data().to_vec();
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            for ch in 0..c {
                data[img.index(y, x, ch)] = 0.0;
            }
        }
    }
    ImageTensor::new(h, w, c, data)
}

/// Projected sign-gradient ascent on the surrogate's cross-entropy for the
/// true label. Stand-in for cloaking tools built on pretrained embeddings.
pub fn adv_noise(
    img: &ImageTensor,
    label: usize,
    surrogate: &SurrogateClassifier,
    epsilon: f64,
    steps: usize,
) -> Result<ImageTensor> {
    check_epsilon(epsilon)?;
    if steps < 1 {
        return Err(Error::InvalidParameter("adv_noise needs >= 1 step".into()));
    }
    if !surrogate.is_trained() {
        return Err(Error::Untrained);
    }
    let (h, w, c) = img.shape();
    let origin = img.data();
    let step = epsilon / steps as f64;
    let mut x = img.clone();
    for _ in 0..steps {
        let (_, grad) = surrogate.loss_and_input_grad(&x, label)?;
        let next: Vec<f64> = x
            .data()
            .iter()
            .zip(&grad)
            .zip(origin)
            .map(|((&v, &g), &o)| {
                let moved = v + step * sign(g);
                moved.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0)
            })
            .collect();
        x = ImageTensor::new(h, w, c, next)?;
    }
    Ok(x)
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon <= MAX_ADV_EPSILON) {
        return Err(Error::InvalidParameter(format!(
            "epsilon {epsilon} outside (0, {MAX_ADV_EPSILON}]"
        )));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    gaussian_kernel(sigma).map(|_| ())
}

/// A fully parameterized obfuscator. Use the constructors, which validate
/// parameters per kind.
#[derive(Debug, Clone)]
pub enum ObfuscatorSpec {
    /// Pass-through, for clean baselines.
    Identity,
    DeepBlur {
        sigma: f64,
        settings: DeepBlurSettings,
    },
    DeepBlurAverage {
        settings: DeepBlurSettings,
    },
    PixelBlur {
        sigma: f64,
    },
    Pixelate {
        block: usize,
    },
    Mask {
        rect: MaskRect,
    },
    AdvNoise {
        epsilon: f64,
        steps: usize,
        surrogate: Arc<SurrogateClassifier>,
    },
}

impl ObfuscatorSpec {
    pub fn deep_blur(sigma: f64, settings: DeepBlurSettings) -> Result<Self> {
        check_sigma(sigma)?;
        settings.generator.validate()?;
        settings.optimizer.validate()?;
        Ok(ObfuscatorSpec::DeepBlur { sigma, settings })
    }

    pub fn deep_blur_average(settings: DeepBlurSettings) -> Result<Self> {
        settings.generator.validate()?;
        settings.optimizer.validate()?;
        Ok(ObfuscatorSpec::DeepBlurAverage { settings })
    }

    pub fn pixel_blur(sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(ObfuscatorSpec::PixelBlur { sigma })
    }

    pub fn pixelate(block: usize) -> Result<Self> {
        if block < 1 {
            return Err(Error::InvalidParameter("pixelate block must be >= 1".into()));
        }
        Ok(ObfuscatorSpec::Pixelate { block })
    }

    pub fn mask(rect: MaskRect) -> Result<Self> {
        if rect.x0 >= rect.x1 || rect.y0 >= rect.y1 {
            return Err(Error::InvalidParameter(format!("empty mask rectangle {rect}")));
        }
        Ok(ObfuscatorSpec::Mask { rect })
    }

    pub fn adv_noise(
        epsilon: f64,
        steps: usize,
        surrogate: Arc<SurrogateClassifier>,
    ) -> Result<Self> {
        check_epsilon(epsilon)?;
        if steps < 1 {
            return Err(Error::InvalidParameter("adv_noise needs >= 1 step".into()));
        }
        if !surrogate.is_trained() {
            return Err(Error::Untrained);
        }
        Ok(ObfuscatorSpec::AdvNoise {
            epsilon,
            steps,
            surrogate,
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ObfuscatorSpec::Identity => "identity",
            ObfuscatorSpec::DeepBlur { .. } => "deepblur",
            ObfuscatorSpec::DeepBlurAverage { .. } => "deepblur_average",
            ObfuscatorSpec::PixelBlur { .. } => "pixel_blur",
            ObfuscatorSpec::Pixelate { .. } => "pixelate",
            ObfuscatorSpec::Mask { .. } => "mask",
            ObfuscatorSpec::AdvNoise { .. } => "advnoise",
        }
    }

    /// Compact parameter string for reports.
    pub fn param_string(&self) -> String {
        match self {
            ObfuscatorSpec::Identity | ObfuscatorSpec::DeepBlurAverage { .. } => "-".into(),
            ObfuscatorSpec::DeepBlur { sigma, .. } | ObfuscatorSpec::PixelBlur { sigma } => {
                format!("sigma={sigma}")
            }
            ObfuscatorSpec::Pixelate { block } => format!("block={block}"),
            ObfuscatorSpec::Mask { rect } => format!("rect={rect}"),
            ObfuscatorSpec::AdvNoise { epsilon, steps, .. } => {
                format!("eps={epsilon};steps={steps}")
            }
        }
    }

    /// Inversion settings for the DeepBlur kinds.
    pub fn deep_blur_settings(&self) -> Option<&DeepBlurSettings> {
        match self {
            ObfuscatorSpec::DeepBlur { settings, .. }
            | ObfuscatorSpec::DeepBlurAverage { settings } => Some(settings),
            _ => None,
        }
    }

    /// Latent filter for the DeepBlur kinds.
    pub fn latent_filter(&self) -> Option<LatentFilter> {
        match self {
            ObfuscatorSpec::DeepBlur { sigma, .. } => Some(LatentFilter::Gaussian(*sigma)),
            ObfuscatorSpec::DeepBlurAverage { .. } => Some(LatentFilter::Average),
            _ => None,
        }
    }

    /// Obfuscates one image. `label` is only read by the adversarial kind.
    pub fn apply(&self, img: &ImageTensor, label: usize) -> Result<ImageTensor> {
        match self {
            ObfuscatorSpec::Identity => Ok(img.clone()),
            ObfuscatorSpec::DeepBlur { .. } | ObfuscatorSpec::DeepBlurAverage { .. } => {
                let settings = self.deep_blur_settings().expect("deep blur kind");
                let filter = self.latent_filter().expect("deep blur kind");
                deep_blur(img, filter, settings).map(|o| o.image)
            }
            ObfuscatorSpec::PixelBlur { sigma } => pixel_blur(img, *sigma),
            ObfuscatorSpec::Pixelate { block } => pixelate(img, *block),
            ObfuscatorSpec::Mask { rect } => mask(img, *rect),
            ObfuscatorSpec::AdvNoise {
                epsilon,
                steps,
                surrogate,
            } => adv_noise(img, label, surrogate, *epsilon, *steps),
        }
    }

    /// Applies to an image whose inversion is already known; non-DeepBlur
    /// kinds ignore `inverted`.
    pub fn apply_with_latent(
        &self,
        img: &ImageTensor,
        label: usize,
        inverted: Option<&LatentCode>,
    ) -> Result<ImageTensor> {
        match (self.latent_filter(), self.deep_blur_settings(), inverted) {
            (Some(filter), Some(settings), Some(w)) => {
                regenerate(w, filter, &settings.generator).map(|(_, img)| img)
            }
            _ => self.apply(img, label),
        }
    }
}
