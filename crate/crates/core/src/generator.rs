//! Closed-form differentiable "blob" generator.
//!
//! Each latent row describes one isotropic Gaussian blob with columns
//! `(cx, cy, r, g, b, log_s)`. Pixel `p` in normalized coordinates gets the
//! activation `A_c(p) = Σ_i color_ic · exp(-|p - center_i|² / (2 s_i²))`, and
//! the output is the logistic `1 / (1 + exp(-k A_c(p)))`.
//!
//! Latent entries are standardized: a fixed per-column affine map turns them
//! into blob parameters (`cx = 0.5 + center_spread·ω`, `color = color_scale·ω`,
//! `log_s = log_scale_mean + log_scale_spread·ω`), so a standard-normal latent
//! renders in-frame blobs away from saturation and the zero latent is the
//! prior mean.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, MIN_PIPELINE_SIDE};

/// Column count of the blob generator's latent.
pub const BLOB_COLS: usize = 6;

const COL_CX: usize = 0;
const COL_CY: usize = 1;
const COL_COLOR: usize = 2;
const COL_LOG_S: usize = 5;

/// L×D real matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl LatentCode {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::Shape(format!(
                "latent must be at least 2x2, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "latent data length {} does not match {rows}x{cols}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent entry".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    /// Entries drawn i.i.d. from the standard normal.
    pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let values = (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut *rng))
            .collect();
        Self::new(rows, cols, values)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn same_shape(&self, other: &LatentCode) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Same shape, new values. Values must be finite.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.rows, self.cols, values)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobGeneratorConfig {
    pub blobs: usize,
    pub size: usize,
    pub steepness: f64,
    pub center_spread: f64,
    pub color_scale: f64,
    pub log_scale_mean: f64,
    pub log_scale_spread: f64,
}

impl Default for BlobGeneratorConfig {
    fn default() -> Self {
        Self {
            blobs: 16,
            size: 64,
            steepness: 4.0,
            center_spread: 0.2,
            color_scale: 0.3,
            log_scale_mean: -1.2,
            log_scale_spread: 0.3,
        }
    }
}

impl BlobGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blobs < 2 {
            return Err(Error::InvalidParameter(format!(
                "blob count {} must be at least 2",
                self.blobs
            )));
        }
        if self.size < MIN_PIPELINE_SIDE {
            return Err(Error::InvalidParameter(format!(
                "output size {} is below {MIN_PIPELINE_SIDE}",
                self.size
            )));
        }
        for (name, v) in [
            ("steepness", self.steepness),
            ("center_spread", self.center_spread),
            ("color_scale", self.color_scale),
            ("log_scale_spread", self.log_scale_spread),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} {v} must be positive")));
            }
        }
        if !self.log_scale_mean.is_finite() {
            return Err(Error::InvalidParameter("log_scale_mean must be finite".into()));
        }
        Ok(())
    }

    fn check_latent(&self, w: &LatentCode) -> Result<()> {
        self.validate()?;
        if w.rows() != self.blobs || w.cols() != BLOB_COLS {
            return Err(Error::Shape(format!(
                "generator expects a {}x{BLOB_COLS} latent, got {}x{}",
                self.blobs,
                w.rows(),
                w.cols()
            )));
        }
        Ok(())
    }

    /// Blob parameters `(cx, cy, r, g, b, log_s)` of row `i`.
    pub fn blob_params(&self, w: &LatentCode, i: usize) -> [f64; BLOB_COLS] {
        [
            0.5 + self.center_spread * w.get(i, COL_CX),
            0.5 + self.center_spread * w.get(i, COL_CY),
            self.color_scale * w.get(i, COL_COLOR),
            self.color_scale * w.get(i, COL_COLOR + 1),
            self.color_scale * w.get(i, COL_COLOR + 2),
            self.log_scale_mean + self.log_scale_spread * w.get(i, COL_LOG_S),
        ]
    }

    /// Inverse of [`blob_params`](Self::blob_params) for one row.
    pub fn latent_row(&self, params: [f64; BLOB_COLS]) -> [f64; BLOB_COLS] {
        [
            (params[0] - 0.5) / self.center_spread,
            (params[1] - 0.5) / self.center_spread,
            params[2] / self.color_scale,
            params[3] / self.color_scale,
            params[4] / self.color_scale,
            (params[5] - self.log_scale_mean) / self.log_scale_spread,
        ]
    }

    fn column_scales(&self) -> [f64; BLOB_COLS] {
        [
            self.center_spread,
            self.center_spread,
            self.color_scale,
            self.color_scale,
            self.color_scale,
            self.log_scale_spread,
        ]
    }

    /// Number of reals in one rendered image.
    pub fn output_len(&self) -> usize {
        self.size * self.size * 3
    }
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn pixel_coord(i: usize, size: usize) -> f64 {
    (i as f64 + 0.5) / size as f64
}

/// Separable per-blob profiles along x and y.
struct Profiles {
    size: usize,
    blobs: usize,
    /// mapped blob parameters, one row per blob
    params: Vec<[f64; BLOB_COLS]>,
    /// `gx[i * size + x]`
    gx: Vec<f64>,
    gy: Vec<f64>,
    inv_s2: Vec<f64>,
}

impl Profiles {
    fn new(w: &LatentCode, cfg: &BlobGeneratorConfig) -> Self {
        let (blobs, size) = (w.rows(), cfg.size);
        let params: Vec<_> = (0..blobs).map(|i| cfg.blob_params(w, i)).collect();
        let mut gx = vec![0.0; blobs * size];
        let mut gy = vec![0.0; blobs * size];
        let mut inv_s2 = vec![0.0; blobs];
        for (i, p) in params.iter().enumerate() {
            let s2 = (2.0 * p[COL_LOG_S]).exp();
            let inv = 1.0 / s2;
            inv_s2[i] = inv;
            let (cx, cy) = (p[COL_CX], p[COL_CY]);
            for j in 0..size {
                let p = pixel_coord(j, size);
                gx[i * size + j] = (-(p - cx).powi(2) * 0.5 * inv).exp();
                gy[i * size + j] = (-(p - cy).powi(2) * 0.5 * inv).exp();
            }
        }
        Self {
            size,
            blobs,
            params,
            gx,
            gy,
            inv_s2,
        }
    }

    /// Activations `A_c` laid out like the output image (HWC).
    fn activations(&self) -> Vec<f64> {
        let (s, l) = (self.size, self.blobs);
        let mut act = vec![0.0; s * s * 3];
        let mut weighted = vec![0.0; l * 3];
        for y in 0..s {
            for i in 0..l {
                let g = self.gy[i * s + y];
                for c in 0..3 {
                    weighted[i * 3 + c] = self.params[i][COL_COLOR + c] * g;
                }
            }
            let row = &mut act[y * s * 3..(y + 1) * s * 3];
            for i in 0..l {
                let (wr, wg, wb) = (weighted[i * 3], weighted[i * 3 + 1], weighted[i * 3 + 2]);
                if wr == 0.0 && wg == 0.0 && wb == 0.0 {
                    continue;
                }
                let gx = &self.gx[i * s..(i + 1) * s];
                for (x, px) in row.chunks_exact_mut(3).enumerate() {
                    let g = gx[x];
                    px[0] += wr * g;
                    px[1] += wg * g;
                    px[2] += wb * g;
                }
            }
        }
        act
    }
}

fn render(w: &LatentCode, cfg: &BlobGeneratorConfig) -> (Profiles, Vec<f64>) {
    let prof = Profiles::new(w, cfg);
    let mut out = prof.activations();
    for v in &mut out {
        *v = logistic(cfg.steepness * *v);
    }
    (prof, out)
}

pub fn synth_generate(w: &LatentCode, cfg: &BlobGeneratorConfig) -> Result<ImageTensor> {
    cfg.check_latent(w)?;
    let (_, out) = render(w, cfg);
    ImageTensor::new(cfg.size, cfg.size, 3, out)
}

/// Vector-Jacobian product `∂<generate(w), upstream>/∂w`.
///
/// `upstream` is laid out like the generator output (S×S×3, HWC).
pub fn synth_gradient(
    w: &LatentCode,
    cfg: &BlobGeneratorConfig,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    cfg.check_latent(w)?;
    if upstream.len() != cfg.output_len() {
        return Err(Error::Shape(format!(
            "upstream length {} does not match generator output {}",
            upstream.len(),
            cfg.output_len()
        )));
    }
    let (prof, out) = render(w, cfg);
    Ok(vjp(cfg, &prof, &out, upstream))
}

/// Generates and back-propagates in one pass. `upstream_fn` receives the
/// rendered output and returns the loss and its gradient w.r.t. the output.
pub(crate) fn generate_with_vjp<F>(
    w: &LatentCode,
    cfg: &BlobGeneratorConfig,
    upstream_fn: F,
) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&ImageTensor) -> Result<(f64, Vec<f64>)>,
{
    cfg.check_latent(w)?;
    let (prof, out) = render(w, cfg);
    let img = ImageTensor::new(cfg.size, cfg.size, 3, out)?;
    let (loss, upstream) = upstream_fn(&img)?;
    let grad = vjp(cfg, &prof, img.data(), &upstream);
    Ok((loss, grad))
}

fn vjp(
    cfg: &BlobGeneratorConfig,
    prof: &Profiles,
    out: &[f64],
    upstream: &[f64],
) -> Vec<f64> {
    let (s, l, k) = (cfg.size, cfg.blobs, cfg.steepness);
    let mut grad = vec![0.0; l * BLOB_COLS];
    // u = upstream * d(out)/dA
    let u: Vec<f64> = out
        .iter()
        .zip(upstream)
        .map(|(&o, &up)| up * k * o * (1.0 - o))
        .collect();
    let mut a0 = [0.0; 3];
    let mut a1 = [0.0; 3];
    let mut a2 = [0.0; 3];
    for i in 0..l {
        let inv = prof.inv_s2[i];
        let p = &prof.params[i];
        let (cx, cy) = (p[COL_CX], p[COL_CY]);
        let color = [p[COL_COLOR], p[COL_COLOR + 1], p[COL_COLOR + 2]];
        let gx = &prof.gx[i * s..(i + 1) * s];
        let (mut dcol, mut dcx, mut dcy, mut dls) = ([0.0f64; 3], 0.0, 0.0, 0.0);
        for y in 0..s {
            let gy = prof.gy[i * s + y];
            if gy == 0.0 {
                continue;
            }
            a0.iter_mut().for_each(|v| *v = 0.0);
            a1.iter_mut().for_each(|v| *v = 0.0);
            a2.iter_mut().for_each(|v| *v = 0.0);
            let row = &u[y * s * 3..(y + 1) * s * 3];
            for (x, px) in row.chunks_exact(3).enumerate() {
                let g = gx[x];
                let dx = pixel_coord(x, s) - cx;
                let (g1, g2) = (g * dx, g * dx * dx);
                for c in 0..3 {
                    a0[c] += px[c] * g;
                    a1[c] += px[c] * g1;
                    a2[c] += px[c] * g2;
                }
            }
            let dy = pixel_coord(y, s) - cy;
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            for c in 0..3 {
                dcol[c] += gy * a0[c];
                b0 += color[c] * a0[c];
                b1 += color[c] * a1[c];
                b2 += color[c] * a2[c];
            }
            dcx += gy * b1 * inv;
            dcy += gy * dy * b0 * inv;
            dls += gy * (b2 + dy * dy * b0) * inv;
        }
        let base = i * BLOB_COLS;
        grad[base + COL_CX] = dcx;
        grad[base + COL_CY] = dcy;
        grad[base + COL_COLOR..base + COL_COLOR + 3].copy_from_slice(&dcol);
        grad[base + COL_LOG_S] = dls;
    }
    // chain through the latent → parameter map
    let scales = cfg.column_scales();
    for row in grad.chunks_exact_mut(BLOB_COLS) {
        row.iter_mut().zip(scales).for_each(|(g, s)| *g *= s);
    }
    grad
}

/// Element-wise mean of a set of latents.
pub fn mean_latent(samples: &[LatentCode]) -> Result<LatentCode> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InsufficientSamples("mean of an empty latent set".into()))?;
    let mut acc = vec![0.0; first.values().len()];
    for s in samples {
        if !s.same_shape(first) {
            return Err(Error::Shape(format!(
                "latent {}x{} differs from {}x{}",
                s.rows(),
                s.cols(),
                first.rows(),
                first.cols()
            )));
        }
        for (a, v) in acc.iter_mut().zip(s.values()) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    first.with_values(acc)
}

/// Mean of `n` seeded standard-normal draws: the "average face" latent.
pub fn prior_mean_latent(cfg: &BlobGeneratorConfig, n: usize, seed: u64) -> Result<LatentCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| LatentCode::standard_normal(cfg.blobs, BLOB_COLS, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    mean_latent(&samples)
}

#[derive(Debug, Clone)]
pub struct LabeledItem {
    pub image: ImageTensor,
    pub label: usize,
    pub latent: LatentCode,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub items: Vec<LabeledItem>,
    pub n_ids: usize,
    pub n_per_id: usize,
}

impl LabeledDataset {
    /// SHA-256 over labels, latents and pixel values (little-endian f64).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for item in &self.items {
            h.update((item.label as u64).to_le_bytes());
            for v in item.latent.values() {
                h.update(v.to_le_bytes());
            }
            for v in item.image.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Synthetic identities: one standard-normal base latent per identity, each
/// image jittered around it. Items are ordered by identity.
pub fn make_identity_dataset(
    n_ids: usize,
    n_per_id: usize,
    jitter: f64,
    seed: u64,
    cfg: &BlobGeneratorConfig,
) -> Result<LabeledDataset> {
    if n_ids < 2 {
        return Err(Error::InvalidParameter(format!("n_ids {n_ids} must be >= 2")));
    }
    if n_per_id < 3 {
        return Err(Error::InvalidParameter(format!(
            "n_per_id {n_per_id} must be >= 3"
        )));
    }
    if !(jitter.is_finite() && jitter > 0.0) {
        return Err(Error::InvalidParameter(format!("jitter {jitter} must be positive")));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut latents = Vec::with_capacity(n_ids * n_per_id);
    for label in 0..n_ids {
        let base = LatentCode::standard_normal(cfg.blobs, BLOB_COLS, &mut rng)?;
        for _ in 0..n_per_id {
            let noise = LatentCode::standard_normal(cfg.blobs, BLOB_COLS, &mut rng)?;
            let values = base
                .values()
                .iter()
                .zip(noise.values())
                .map(|(b, n)| b + jitter * n)
                .collect();
            latents.push((label, base.with_values(values)?));
        }
    }
    let items = latents
        .into_par_iter()
        .map(|(label, latent)| {
            synth_generate(&latent, cfg).map(|image| LabeledItem {
                image,
                label,
                latent,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset {
        items,
        n_ids,
        n_per_id,
    })
}
