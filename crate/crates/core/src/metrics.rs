//! Fidelity measures: PSNR, SSIM, MS-SSIM and Fréchet distance between
//! feature distributions.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::obfuscation::gaussian_kernel;
use crate::perception::{Extractor, ExtractorSpec, FeatureVector};

/// Eigenvalues down to this value are treated as rounding noise and clamped.
pub const EIGEN_TOLERANCE: f64 = 1e-8;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    /// Identical inputs.
    Infinite,
}

impl Psnr {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Psnr::Infinite)
    }

    pub fn as_f64(&self) -> f64 {
        match self {
            Psnr::Db(v) => *v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// PSNR for peak 1.0 from a mean squared error.
pub fn psnr_from_mse(mse: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Db(10.0 * (1.0 / mse).log10())
    }
}

pub fn psnr(reference: &ImageTensor, test: &ImageTensor) -> Result<Psnr> {
    mse(reference, test).map(psnr_from_mse)
}

/// Separable "valid" filtering: no padding, output shrinks by `k.len() - 1`.
fn filter_valid(v: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &v[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (t, kt) in k.iter().enumerate() {
            let src = &tmp[(y + t) * ow..(y + t + 1) * ow];
            out[y * ow..(y + 1) * ow]
                .iter_mut()
                .zip(src)
                .for_each(|(o, s)| *o += kt * s);
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term over one plane pair.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64]) -> (f64, f64) {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, ..) = filter_valid(a, h, w, k);
    let (mu_b, ..) = filter_valid(b, h, w, k);
    let (aa, ..) = filter_valid(&prod(a, a), h, w, k);
    let (bb, ..) = filter_valid(&prod(b, b), h, w, k);
    let (ab, ..) = filter_valid(&prod(a, b), h, w, k);
    let n = mu_a.len() as f64;
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        s_sum += l * cs;
        cs_sum += cs;
    }
    (s_sum / n, cs_sum / n)
}

fn ssim_parts(a: &ImageTensor, b: &ImageTensor, k: &[f64]) -> (f64, f64) {
    let (h, w, c) = a.shape();
    let (mut s, mut cs) = (0.0, 0.0);
    for ch in 0..c {
        let (sv, cv) = ssim_plane(&a.plane(ch), &b.plane(ch), h, w, k);
        s += sv;
        cs += cv;
    }
    (s / c as f64, cs / c as f64)
}

fn window() -> Vec<f64> {
    let k = gaussian_kernel(SSIM_SIGMA).expect("valid sigma");
    debug_assert_eq!(k.side(), SSIM_WINDOW);
    k.profile().to_vec()
}

fn check_window(a: &ImageTensor) -> Result<()> {
    if a.height().min(a.width()) < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            a.height(),
            a.width()
        )));
    }
    Ok(())
}

pub fn ssim(reference: &ImageTensor, test: &ImageTensor) -> Result<f64> {
    check_pair(reference, test)?;
    check_window(reference)?;
    Ok(ssim_parts(reference, test, &window()).0)
}

/// Number of MS-SSIM scales an `h × w` image supports (at most 5).
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let mut m = h.min(w);
    let mut n = 0;
    while n < MS_SSIM_WEIGHTS.len() && m >= SSIM_WINDOW {
        n += 1;
        m /= 2;
    }
    n
}

fn pool2(img: &ImageTensor) -> ImageTensor {
    let (h, w, c) = img.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut data = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let s = img.get(2 * y, 2 * x, ch)
                    + img.get(2 * y, 2 * x + 1, ch)
                    + img.get(2 * y + 1, 2 * x, ch)
                    + img.get(2 * y + 1, 2 * x + 1, ch);
                data[(y * ow + x) * c + ch] = 0.25 * s;
            }
        }
    }
    ImageTensor::from_clamped(oh, ow, c, data).expect("pooled image is valid")
}

/// Multi-scale SSIM. Scales whose image would be smaller than the window are
/// dropped and the remaining exponents renormalized. Negative factors are
/// clamped to zero before exponentiation.
pub fn ms_ssim(reference: &ImageTensor, test: &ImageTensor) -> Result<f64> {
    check_pair(reference, test)?;
    check_window(reference)?;
    let m = ms_ssim_scales(reference.height(), reference.width());
    let total: f64 = MS_SSIM_WEIGHTS[..m].iter().sum();
    let k = window();
    let (mut a, mut b) = (reference.clone(), test.clone());
    let mut out = 1.0;
    for (j, w) in MS_SSIM_WEIGHTS[..m].iter().enumerate() {
        let (s, cs) = ssim_parts(&a, &b, &k);
        let factor = if j + 1 == m { s } else { cs };
        out *= factor.max(0.0).powf(w / total);
        if j + 1 < m {
            a = pool2(&a);
            b = pool2(&b);
        }
    }
    Ok(out)
}

/// Mean vector and covariance matrix of a feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    /// Validates symmetry (1e-10) and eigenvalues (≥ −1e-8).
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Shape(format!(
                "mean of length {d} with {}x{} covariance",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("moments".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-10 {
                    return Err(Error::InvalidParameter(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let min = SymmetricEigen::new(cov.clone())
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min < -EIGEN_TOLERANCE {
            return Err(Error::NegativeEigenvalue(min));
        }
        Ok(Self { mean, cov })
    }

    pub fn diagonal(mean: &[f64], var: &[f64]) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Shape("mean and variance lengths differ".into()));
        }
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal(&DVector::from_column_slice(var)),
        )
    }

    /// Sample mean and covariance (denominator n−1).
    pub fn from_samples(xs: &[FeatureVector]) -> Result<Self> {
        let a = centered(xs)?;
        let n = xs.len() as f64;
        let mean = sample_mean(xs);
        let cov = (a.transpose() * &a) / (n - 1.0);
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn sample_mean(xs: &[FeatureVector]) -> DVector<f64> {
    let d = xs[0].len();
    let mut mean = DVector::zeros(d);
    for x in xs {
        mean += DVector::from_column_slice(x.as_slice());
    }
    mean / xs.len() as f64
}

/// `n × d` matrix of mean-centered samples.
fn centered(xs: &[FeatureVector]) -> Result<DMatrix<f64>> {
    if xs.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "{} sample(s); need at least 2",
            xs.len()
        )));
    }
    let d = xs[0].len();
    if d == 0 || xs.iter().any(|x| x.len() != d) {
        return Err(Error::Shape("feature vectors differ in dimensionality".into()));
    }
    let mean = sample_mean(xs);
    Ok(DMatrix::from_fn(xs.len(), d, |i, j| xs[i].0[j] - mean[j]))
}

/// Eigenvalues with the clamp rule applied.
fn clamped_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    for v in e.eigenvalues.iter_mut() {
        if *v < -EIGEN_TOLERANCE {
            return Err(Error::NegativeEigenvalue(*v));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = clamped_eigen(m.clone())?;
    let root = e.eigenvalues.map(f64::sqrt);
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians:
/// `‖μr − μg‖² + tr Σr + tr Σg − 2 tr (Σr^½ Σg Σr^½)^½`.
pub fn fid_from_moments(real: &GaussianMoments, gen: &GaussianMoments) -> Result<f64> {
    if real.dim() != gen.dim() {
        return Err(Error::Shape(format!(
            "moment dimensionality {} vs {}",
            real.dim(),
            gen.dim()
        )));
    }
    let root_r = psd_sqrt(&real.cov)?;
    let product = &root_r * &gen.cov * &root_r;
    let cross: f64 = clamped_eigen(product)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = (&real.mean - &gen.mean).norm_squared();
    Ok((diff + real.cov.trace() + gen.cov.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between two feature samples.
///
/// With centered sample matrices `Ar`, `Ag`, the cross term
/// `tr (Σr^½ Σg Σr^½)^½` equals the nuclear norm of `Ar Agᵀ / √((nr−1)(ng−1))`,
/// which is evaluated by SVD so that null directions contribute exactly zero.
pub fn fid(real: &[FeatureVector], gen: &[FeatureVector]) -> Result<f64> {
    let ar = centered(real)?;
    let ag = centered(gen)?;
    if ar.ncols() != ag.ncols() {
        return Err(Error::Shape(format!(
            "feature dimensionality {} vs {}",
            ar.ncols(),
            ag.ncols()
        )));
    }
    let (nr, ng) = ((real.len() - 1) as f64, (gen.len() - 1) as f64);
    let cross_m = (&ar * ag.transpose()) / (nr * ng).sqrt();
    let cross: f64 = cross_m.singular_values().iter().sum();
    let tr_r = ar.norm_squared() / nr;
    let tr_g = ag.norm_squared() / ng;
    let diff = (sample_mean(real) - sample_mean(gen)).norm_squared();
    Ok((diff + tr_r + tr_g - 2.0 * cross).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub method: String,
    /// From the MSE pooled over every image pair.
    pub psnr: Psnr,
    /// Means over image pairs.
    pub ssim: f64,
    pub ms_ssim: f64,
    pub fid: f64,
    /// Images per side behind the FID estimate.
    pub n: usize,
}

impl QualityReport {
    pub const CSV_HEADER: &'static str = "method,psnr_db,ssim,ms_ssim,fid";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.method, self.psnr, self.ssim, self.ms_ssim, self.fid
        )
    }
}

pub fn quality_reports_to_csv(reports: &[QualityReport]) -> String {
    let mut out = String::from(QualityReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Compares paired reference and obfuscated images; FID uses `spec` features.
pub fn quality_report(
    method: &str,
    reference: &[ImageTensor],
    test: &[ImageTensor],
    spec: &ExtractorSpec,
) -> Result<QualityReport> {
    if reference.len() != test.len() {
        return Err(Error::Shape(format!(
            "{} reference vs {} test images",
            reference.len(),
            test.len()
        )));
    }
    if reference.len() < 2 {
        return Err(Error::InsufficientSamples("quality report needs >= 2 image pairs".into()));
    }
    let per_pair = reference
        .par_iter()
        .zip(test)
        .map(|(a, b)| Ok((mse(a, b)?, ssim(a, b)?, ms_ssim(a, b)?)))
        .collect::<Result<Vec<_>>>()?;
    let n = reference.len() as f64;
    let mean_mse = per_pair.iter().map(|p| p.0).sum::<f64>() / n;
    let extractor = Extractor::new(*spec, reference[0].channels())?;
    let feats = |set: &[ImageTensor]| {
        set.par_iter()
            .map(|img| extractor.extract(img))
            .collect::<Result<Vec<_>>>()
    };
    Ok(QualityReport {
        method: method.to_string(),
        psnr: psnr_from_mse(mean_mse),
        ssim: per_pair.iter().map(|p| p.1).sum::<f64>() / n,
        ms_ssim: per_pair.iter().map(|p| p.2).sum::<f64>() / n,
        fid: fid(&feats(reference)?, &feats(test)?)?,
        n: reference.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(h, w, 3, data).unwrap()
    }

    /// Smooth mid-contrast pattern in [0.25, 0.75].
    fn pattern(h: usize, w: usize) -> ImageTensor {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let t = (x as f64 * 0.3 + c as f64).sin() * (y as f64 * 0.2).cos();
                    data.push(0.5 + 0.25 * t);
                }
            }
        }
        ImageTensor::new(h, w, 3, data).unwrap()
    }

    fn invert(img: &ImageTensor) -> ImageTensor {
        let (h, w, c) = img.shape();
        ImageTensor::new(h, w, c, img.data().iter().map(|v| 1.0 - v).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = ImageTensor::filled(4, 4, 1, 0.0).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), Psnr::Infinite);
        assert_eq!(psnr(&a, &a).unwrap().to_string(), "inf");
        let b = ImageTensor::filled(4, 4, 1, 1.0).unwrap();
        assert_eq!(psnr(&a, &b).unwrap(), Psnr::Db(0.0));
        let c = ImageTensor::filled(4, 4, 1, 0.01).unwrap();
        match psnr(&a, &c).unwrap() {
            Psnr::Db(v) => assert!((v - 40.0).abs() < 1e-9, "{v}"),
            p => panic!("{p:?}"),
        }
        let d = ImageTensor::filled(4, 5, 1, 0.0).unwrap();
        assert!(psnr(&a, &d).is_err());
    }

    #[test]
    fn psnr_monotone_over_noise_sweep() {
        let base = pattern(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dirs: Vec<f64> = (0..base.data().len())
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mut last = f64::INFINITY;
        for level in 1..=10 {
            let amp = 0.02 * level as f64;
            let data = base.data().iter().zip(&dirs).map(|(v, d)| v + amp * d).collect();
            let noisy = ImageTensor::new(16, 16, 3, data).unwrap();
            let p = psnr(&base, &noisy).unwrap().as_f64();
            assert!(p < last, "level {level}: {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = noise_image(24, 20, 1);
        let b = noise_image(24, 20, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(&a, &b).unwrap() < 0.2);
        let small = noise_image(10, 30, 3);
        assert!(ssim(&small, &small).is_err());
    }

    /// Direct per-window evaluation of the SSIM definition.
    fn ssim_oracle(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let (h, w, c) = a.shape();
        let g: Vec<f64> = (0..11)
            .map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp())
            .collect();
        let mut wts = vec![0.0; 121];
        for y in 0..11 {
            for x in 0..11 {
                wts[y * 11 + x] = g[y] * g[x];
            }
        }
        let s: f64 = wts.iter().sum();
        wts.iter_mut().for_each(|v| *v /= s);
        let (c1, c2) = (0.0001, 0.0009);
        let mut total = 0.0;
        for ch in 0..c {
            let mut acc = 0.0;
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for y in 0..11 {
                        for x in 0..11 {
                            ma += wts[y * 11 + x] * a.get(y0 + y, x0 + x, ch);
                            mb += wts[y * 11 + x] * b.get(y0 + y, x0 + x, ch);
                        }
                    }
                    let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
                    for y in 0..11 {
                        for x in 0..11 {
                            let da = a.get(y0 + y, x0 + x, ch) - ma;
                            let db = b.get(y0 + y, x0 + x, ch) - mb;
                            va += wts[y * 11 + x] * da * da;
                            vb += wts[y * 11 + x] * db * db;
                            cv += wts[y * 11 + x] * da * db;
                        }
                    }
                    acc += (2.0 * ma * mb + c1) * (2.0 * cv + c2)
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                }
            }
            total += acc / ((h - 10) * (w - 10)) as f64;
        }
        total / c as f64
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let a = pattern(16, 18);
        let b = noise_image(16, 18, 7);
        let mixed = ImageTensor::new(
            16,
            18,
            3,
            a.data().iter().zip(b.data()).map(|(x, y)| 0.8 * x + 0.2 * y).collect(),
        )
        .unwrap();
        for other in [&b, &mixed, &invert(&a)] {
            let got = ssim(&a, other).unwrap();
            let want = ssim_oracle(&a, other);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn ssim_of_inverted_pattern_is_low() {
        let a = pattern(32, 32);
        let v = ssim(&a, &invert(&a)).unwrap();
        assert!(v < 0.5, "{v}");
        assert!((v - ssim_oracle(&a, &invert(&a))).abs() < 1e-10);
        assert!((v - -0.690_195_642_6).abs() < 1e-9, "{v}");
    }

    #[test]
    fn ms_ssim_scales_and_identity() {
        assert_eq!(ms_ssim_scales(64, 64), 3);
        assert_eq!(ms_ssim_scales(176, 200), 5);
        assert_eq!(ms_ssim_scales(11, 11), 1);
        assert_eq!(ms_ssim_scales(10, 40), 0);
        let a = noise_image(64, 64, 4);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let b = pattern(64, 64);
        let v = ms_ssim(&a, &b).unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert!((v - ms_ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_single_scale_reduces_to_ssim() {
        let a = pattern(12, 14);
        let b = noise_image(12, 14, 9);
        let mixed = ImageTensor::new(
            12,
            14,
            3,
            a.data().iter().zip(b.data()).map(|(x, y)| 0.7 * x + 0.3 * y).collect(),
        )
        .unwrap();
        let s = ssim(&a, &mixed).unwrap();
        assert!(s > 0.0);
        assert!((ms_ssim(&a, &mixed).unwrap() - s).abs() < 1e-12);
    }

    #[test]
    fn fid_one_dimensional_worked_value() {
        let r = GaussianMoments::diagonal(&[0.0], &[1.0]).unwrap();
        let g = GaussianMoments::diagonal(&[1.0], &[4.0]).unwrap();
        assert!((fid_from_moments(&r, &g).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fid_diagonal_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in [1, 3, 8, 20] {
            let mr: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mg: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let vr: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..5.0)).collect();
            let vg: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..5.0)).collect();
            let want: f64 = (0..d)
                .map(|i| (mr[i] - mg[i]).powi(2) + (vr[i].sqrt() - vg[i].sqrt()).powi(2))
                .sum();
            let r = GaussianMoments::diagonal(&mr, &vr).unwrap();
            let g = GaussianMoments::diagonal(&mg, &vg).unwrap();
            let got = fid_from_moments(&r, &g).unwrap();
            assert!((got - want).abs() < 1e-6, "d={d}: {got} vs {want}");
        }
    }

    #[test]
    fn materially_negative_covariance_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        let r = GaussianMoments::new(DVector::zeros(2), cov);
        assert!(matches!(r, Err(Error::NegativeEigenvalue(_))));
        let tiny = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-10]);
        let m = GaussianMoments::new(DVector::zeros(2), tiny).unwrap();
        let ok = GaussianMoments::diagonal(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(fid_from_moments(&m, &ok).unwrap() < 1e-8);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GaussianMoments::new(DVector::zeros(2), asym).is_err());
    }

    fn samples(n: usize, d: usize, seed: u64, shift: f64) -> Vec<FeatureVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| FeatureVector((0..d).map(|j| shift + j as f64 * 0.1 + rng.random::<f64>() * 3.0).collect()))
            .collect()
    }

    #[test]
    fn fid_on_samples_matches_moment_path() {
        let a = samples(40, 6, 1, 0.0);
        let b = samples(30, 6, 2, 0.5);
        let direct = fid(&a, &b).unwrap();
        let via = fid_from_moments(
            &GaussianMoments::from_samples(&a).unwrap(),
            &GaussianMoments::from_samples(&b).unwrap(),
        )
        .unwrap();
        assert!((direct - via).abs() < 1e-8, "{direct} vs {via}");
        assert!((direct - fid(&b, &a).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn fid_self_is_zero_even_when_rank_deficient() {
        for (n, d) in [(5, 40), (30, 6), (12, 512)] {
            let a = samples(n, d, n as u64, 0.2);
            let v = fid(&a, &a).unwrap();
            assert!(v <= 1e-8, "n={n} d={d}: {v}");
        }
    }

    #[test]
    fn fid_input_errors() {
        let a = samples(1, 3, 0, 0.0);
        let b = samples(5, 3, 1, 0.0);
        assert!(matches!(fid(&a, &b), Err(Error::InsufficientSamples(_))));
        let c = samples(5, 4, 2, 0.0);
        assert!(matches!(fid(&b, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn quality_csv_uses_inf_literal() {
        let imgs: Vec<_> = (0..3).map(|s| noise_image(16, 16, s)).collect();
        let r = quality_report("identity", &imgs, &imgs, &ExtractorSpec::randconv(0, 2)).unwrap();
        assert!(r.psnr.is_infinite());
        assert!((r.ssim - 1.0).abs() < 1e-9);
        assert_eq!(r.n, 3);
        let csv = quality_reports_to_csv(&[r]);
        assert!(csv.starts_with("method,psnr_db,ssim,ms_ssim,fid\nidentity,inf,"), "{csv}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn fid_nonnegative_and_self_zero(seed in 0u64..1000, n in 3usize..12, d in 1usize..10) {
            let a = samples(n, d, seed, 0.0);
            let b = samples(n + 2, d, seed + 1, 0.3);
            prop_assert!(fid(&a, &b).unwrap() >= 0.0);
            prop_assert!(fid(&a, &a).unwrap() <= 1e-8);
        }

        #[test]
        fn ssim_bounded_and_symmetric(seed in 0u64..1000) {
            let a = noise_image(16, 16, seed);
            let b = noise_image(16, 16, seed + 1);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
            let m = ms_ssim(&a, &b).unwrap();
            prop_assert!(m <= 1.0);
        }
    }
}
