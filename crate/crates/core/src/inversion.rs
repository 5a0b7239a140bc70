//! Latent representation search: find ω such that the generator's output
//! matches a target image under a feature loss.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::{generate_with_vjp, BlobGeneratorConfig, LatentCode, BLOB_COLS};
use crate::image::ImageTensor;
use crate::optim::{
    AdagradState, AdamState, LbfgsState, OptimizerConfig, OptimizerKind, SgdmState,
};
use crate::perception::{Extractor, ExtractorSpec};

/// Samples averaged into the default "average face" initialization.
pub const MEAN_LATENT_SAMPLES: usize = 100;
pub const MEAN_LATENT_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    /// Best iterate seen, not necessarily the last.
    pub latent: LatentCode,
    /// Loss at step 0 (the initialization) and after every update.
    pub losses: Vec<f64>,
    pub best_loss: f64,
    pub steps_taken: usize,
    /// Wall-clock time per recorded step, aligned with `losses`.
    pub elapsed: Vec<Duration>,
    pub converged: bool,
    /// Steps where the L-BFGS line search gave up.
    pub fallback_steps: Vec<usize>,
}

impl InversionResult {
    /// First step whose loss is strictly below `threshold`.
    pub fn steps_to(&self, threshold: f64) -> Option<usize> {
        self.losses.iter().position(|&l| l < threshold)
    }

    /// `step,loss,elapsed_ms` rows including step 0.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("step,loss,elapsed_ms\n");
        let mut total = 0.0;
        for (i, (loss, dt)) in self.losses.iter().zip(&self.elapsed).enumerate() {
            total += dt.as_secs_f64() * 1e3;
            let _ = writeln!(out, "{i},{loss:e},{total:.3}");
        }
        out
    }
}

/// Loss-and-gradient over flattened latents for one target image.
pub struct InversionObjective<'a> {
    cfg: &'a BlobGeneratorConfig,
    extractor: Extractor,
    target: crate::perception::FeatureVector,
}

impl<'a> InversionObjective<'a> {
    pub fn new(
        target: &ImageTensor,
        cfg: &'a BlobGeneratorConfig,
        spec: &ExtractorSpec,
    ) -> Result<Self> {
        cfg.validate()?;
        if target.shape() != (cfg.size, cfg.size, 3) {
            return Err(Error::Shape(format!(
                "target {:?} does not match generator output {}x{}x3",
                target.shape(),
                cfg.size,
                cfg.size
            )));
        }
        let extractor = Extractor::new(*spec, 3)?;
        let target = extractor.extract(target)?;
        Ok(Self {
            cfg,
            extractor,
            target,
        })
    }

    pub fn evaluate(&self, flat: &[f64]) -> Result<(f64, Vec<f64>)> {
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent iterate".into()));
        }
        let w = LatentCode::new(self.cfg.blobs, BLOB_COLS, flat.to_vec())?;
        generate_with_vjp(&w, self.cfg, |img| self.extractor.loss_and_grad(&self.target, img))
    }
}

enum Stepper {
    Sgdm(SgdmState),
    Adagrad(AdagradState),
    Adam(AdamState),
    Lbfgs(LbfgsState),
}

impl Stepper {
    fn new(opt: &OptimizerConfig, dim: usize) -> Self {
        match opt.kind {
            OptimizerKind::Sgdm => Stepper::Sgdm(SgdmState::new(dim, opt.learning_rate, opt.momentum)),
            OptimizerKind::Adagrad => {
                Stepper::Adagrad(AdagradState::new(dim, opt.learning_rate, opt.epsilon))
            }
            OptimizerKind::Adam => Stepper::Adam(AdamState::new(
                dim,
                opt.learning_rate,
                opt.beta1,
                opt.beta2,
                opt.epsilon,
            )),
            OptimizerKind::Lbfgs => Stepper::Lbfgs(LbfgsState::new(
                opt.memory,
                opt.armijo_c,
                opt.backtrack,
                opt.learning_rate,
            )),
        }
    }
}

/// Runs at most `opt.max_steps` updates from `init`, stopping as soon as the
/// loss reaches `opt.target_loss`.
pub fn invert(
    target: &ImageTensor,
    cfg: &BlobGeneratorConfig,
    spec: &ExtractorSpec,
    opt: &OptimizerConfig,
    init: &LatentCode,
) -> Result<InversionResult> {
    opt.validate()?;
    if init.rows() != cfg.blobs || init.cols() != BLOB_COLS {
        return Err(Error::Shape(format!(
            "init latent {}x{} does not match generator {}x{BLOB_COLS}",
            init.rows(),
            init.cols(),
            cfg.blobs
        )));
    }
    let objective = InversionObjective::new(target, cfg, spec)?;

    let clock = Instant::now();
    let mut x = init.values().to_vec();
    let (mut f, mut g) = objective.evaluate(&x)?;
    let mut result = InversionResult {
        latent: init.clone(),
        losses: vec![f],
        best_loss: f,
        steps_taken: 0,
        elapsed: vec![clock.elapsed()],
        converged: false,
        fallback_steps: Vec::new(),
    };
    let abort = |result: &mut InversionResult, step: usize, reason: String| {
        result.converged = result.best_loss <= opt.target_loss;
        Error::InversionAborted {
            step,
            reason,
            partial: Box::new(result.clone()),
        }
    };
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(abort(&mut result, 0, "non-finite initial loss or gradient".into()));
    }

    let mut stepper = Stepper::new(opt, x.len());
    for step in 1..=opt.max_steps {
        if result.best_loss <= opt.target_loss {
            break;
        }
        let started = Instant::now();
        let outcome = match &mut stepper {
            Stepper::Sgdm(s) => s.step(&mut x, &g),
            Stepper::Adagrad(s) => s.step(&mut x, &g),
            Stepper::Adam(s) => s.step(&mut x, &g),
            Stepper::Lbfgs(s) => s
                .step(&mut x, &mut f, &mut g, |p| objective.evaluate(p))
                .map(|info| {
                    if info.fallback {
                        result.fallback_steps.push(step);
                    }
                }),
        };
        let evaluated = outcome.and_then(|_| match stepper {
            Stepper::Lbfgs(_) => Ok((f, std::mem::take(&mut g))),
            _ => objective.evaluate(&x),
        });
        let (f_new, g_new) = match evaluated {
            Ok(v) => v,
            Err(e) => return Err(abort(&mut result, step, e.to_string())),
        };
        f = f_new;
        g = g_new;
        result.losses.push(f);
        result.elapsed.push(started.elapsed());
        result.steps_taken = step;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(abort(&mut result, step, "non-finite loss or gradient".into()));
        }
        if f < result.best_loss {
            result.best_loss = f;
            result.latent = init.with_values(x.clone())?;
        }
    }
    result.converged = result.best_loss <= opt.target_loss;
    Ok(result)
}

/// The default initialization: mean of many seeded prior draws.
pub fn default_init(cfg: &BlobGeneratorConfig) -> Result<LatentCode> {
    crate::generator::prior_mean_latent(cfg, MEAN_LATENT_SAMPLES, MEAN_LATENT_SEED)
}

/// Ground-truth latent and rendered target for benchmark case `seed`.
pub fn benchmark_case(
    cfg: &BlobGeneratorConfig,
    seed: u64,
) -> Result<(LatentCode, ImageTensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe4c_0000 + seed);
    let w = LatentCode::standard_normal(cfg.blobs, BLOB_COLS, &mut rng)?;
    let img = crate::generator::synth_generate(&w, cfg)?;
    Ok((w, img))
}

/// Seeded random initialization for benchmark case `seed`.
pub fn random_init(cfg: &BlobGeneratorConfig, seed: u64) -> Result<LatentCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a17_0000 + seed);
    LatentCode::standard_normal(cfg.blobs, BLOB_COLS, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::synth_generate;

    fn small_cfg() -> BlobGeneratorConfig {
        BlobGeneratorConfig {
            blobs: 4,
            size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn already_at_optimum_converges_at_step_zero() {
        let cfg = small_cfg();
        let (w, img) = benchmark_case(&cfg, 1).unwrap();
        for kind in OptimizerKind::ALL {
            let opt = OptimizerConfig::new(kind);
            let r = invert(&img, &cfg, &ExtractorSpec::pixel(), &opt, &w).unwrap();
            assert!(r.converged);
            assert_eq!(r.steps_taken, 0);
            assert_eq!(r.losses, vec![0.0]);
            assert_eq!(r.latent, w);
        }
    }

    #[test]
    fn zero_budget_returns_initial_point() {
        let cfg = small_cfg();
        let (_, img) = benchmark_case(&cfg, 2).unwrap();
        let init = default_init(&cfg).unwrap();
        let opt = OptimizerConfig::new(OptimizerKind::Adam).with_max_steps(0);
        let r = invert(&img, &cfg, &ExtractorSpec::pixel(), &opt, &init).unwrap();
        assert_eq!(r.steps_taken, 0);
        assert_eq!(r.losses.len(), 1);
        assert_eq!(r.latent, init);
        assert_eq!(r.best_loss, r.losses[0]);
    }

    #[test]
    fn result_bookkeeping_invariants() {
        let cfg = small_cfg();
        let (_, img) = benchmark_case(&cfg, 3).unwrap();
        let init = random_init(&cfg, 3).unwrap();
        for kind in OptimizerKind::ALL {
            let opt = OptimizerConfig::new(kind).with_max_steps(25).with_target_loss(0.0);
            let r = invert(&img, &cfg, &ExtractorSpec::pixel(), &opt, &init).unwrap();
            assert_eq!(r.losses.len(), r.steps_taken + 1);
            assert_eq!(r.elapsed.len(), r.losses.len());
            let min = r.losses.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(r.best_loss, min);
            // best latent reproduces best loss
            let obj = InversionObjective::new(&img, &cfg, &ExtractorSpec::pixel()).unwrap();
            let (l, _) = obj.evaluate(r.latent.values()).unwrap();
            assert_eq!(l, r.best_loss);
            if kind == OptimizerKind::Lbfgs {
                for (i, pair) in r.losses.windows(2).enumerate() {
                    if !r.fallback_steps.contains(&(i + 1)) {
                        assert!(pair[1] < pair[0], "{kind:?} step {}", i + 1);
                    }
                }
            }
        }
    }

    #[test]
    fn divergence_aborts_with_trajectory() {
        let cfg = small_cfg();
        let (_, img) = benchmark_case(&cfg, 4).unwrap();
        let init = default_init(&cfg).unwrap();
        let opt = OptimizerConfig::new(OptimizerKind::Sgdm)
            .with_learning_rate(1e300)
            .with_max_steps(50);
        match invert(&img, &cfg, &ExtractorSpec::pixel(), &opt, &init) {
            Err(Error::InversionAborted { step, partial, .. }) => {
                assert!(step >= 1);
                assert_eq!(partial.losses.len(), partial.steps_taken + 1);
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn trajectory_csv_has_row_per_step() {
        let cfg = small_cfg();
        let (_, img) = benchmark_case(&cfg, 5).unwrap();
        let opt = OptimizerConfig::new(OptimizerKind::Lbfgs).with_max_steps(5).with_target_loss(0.0);
        let r = invert(&img, &cfg, &ExtractorSpec::pixel(), &opt, &default_init(&cfg).unwrap())
            .unwrap();
        let csv = r.trajectory_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "step,loss,elapsed_ms");
        assert_eq!(lines.len(), r.losses.len() + 1);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = small_cfg();
        let img = synth_generate(&LatentCode::zeros(4, 6).unwrap(), &cfg).unwrap();
        let bad = LatentCode::zeros(5, 6).unwrap();
        let opt = OptimizerConfig::new(OptimizerKind::Adam);
        assert!(invert(&img, &cfg, &ExtractorSpec::pixel(), &opt, &bad).is_err());
        let big = BlobGeneratorConfig { size: 32, ..cfg };
        assert!(invert(&img, &big, &ExtractorSpec::pixel(), &opt, &LatentCode::zeros(4, 6).unwrap()).is_err());
    }
}
