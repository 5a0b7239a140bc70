use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use deepblur_core::generator::{make_identity_dataset, synth_generate, LabeledDataset, LatentCode};
use deepblur_core::image::{center_crop_resize, load_image, save_image, ImageTensor};
use deepblur_core::inversion::{benchmark_case, invert as run_inversion, InversionResult};
use deepblur_core::latent_file::{load_latent, save_latent};
use deepblur_core::metrics::{ms_ssim, psnr, quality_report, quality_reports_to_csv, ssim};
use deepblur_core::obfuscation::{deep_blur, LatentFilter, ObfuscatorSpec};
use deepblur_core::optim::{OptimizerConfig, OptimizerKind};
use deepblur_core::threat::{
    mock_service, reports_to_csv, MockBackend, SurrogateClassifier, ThreatHarness,
};

use crate::config::{EvalSuite, ObfuscatorKindName, RunConfig, ServeBackend};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Refuses to write over any of the command's inputs.
fn guard_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let Ok(target) = out.canonicalize() else {
        return Ok(());
    };
    for input in inputs {
        if input.canonicalize().ok().as_deref() == Some(target.as_path()) {
            return Err(CliError::Usage(format!(
                "output {} would overwrite input {}",
                out.display(),
                input.display()
            )));
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn csv_target(cfg: &RunConfig, out: Option<&Path>, name: &str) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join(name))
}

/// Loads a PNG and brings it to the generator's square size.
fn load_aligned(cfg: &RunConfig, path: &Path) -> Result<ImageTensor> {
    let img = load_image(path)?;
    let s = cfg.generator.size;
    if img.channels() != 3 {
        return Err(deepblur_core::Error::Shape(format!(
            "{} has {} channels, expected RGB",
            path.display(),
            img.channels()
        ))
        .into());
    }
    if img.height() == s && img.width() == s {
        Ok(img)
    } else {
        Ok(center_crop_resize(&img, s)?)
    }
}

fn trajectory_rows(out: &mut String, name: Option<&str>, r: &InversionResult, timing: bool) {
    let mut total = 0.0;
    for (step, (loss, dt)) in r.losses.iter().zip(&r.elapsed).enumerate() {
        total += dt.as_secs_f64() * 1e3;
        let ms = if timing { total } else { 0.0 };
        if let Some(name) = name {
            let _ = write!(out, "{name},");
        }
        let _ = writeln!(out, "{step},{loss:e},{ms:.3}");
    }
}

pub fn invert(
    cfg: &RunConfig,
    input: &Path,
    out: &Path,
    trajectory: Option<&Path>,
    image: Option<&Path>,
) -> Result<()> {
    for o in [Some(out), trajectory, image].into_iter().flatten() {
        guard_output(o, &[input])?;
    }
    let target = load_aligned(cfg, input)?;
    let result = cfg.deep_blur_settings()?.invert(&target)?;
    save_latent(&result.latent, out)?;
    if let Some(path) = trajectory {
        let mut csv = String::from("step,loss,elapsed_ms\n");
        trajectory_rows(&mut csv, None, &result, cfg.record_timing);
        write_file(path, csv.as_bytes())?;
    }
    if let Some(path) = image {
        save_image(&synth_generate(&result.latent, &cfg.generator)?, path)?;
    }
    println!(
        "best_loss={:e} steps={} converged={}",
        result.best_loss, result.steps_taken, result.converged
    );
    Ok(())
}

pub fn blur(
    cfg: &RunConfig,
    input: &Path,
    out: &Path,
    sigma: Option<f64>,
    average: bool,
    image: Option<&Path>,
) -> Result<()> {
    for o in [Some(out), image].into_iter().flatten() {
        guard_output(o, &[input])?;
    }
    let w = load_latent(input)?;
    let filter = if average {
        LatentFilter::Average
    } else {
        LatentFilter::Gaussian(sigma.unwrap_or(cfg.obfuscator.sigma))
    };
    let filtered = filter.apply(&w)?;
    save_latent(&filtered, out)?;
    if let Some(path) = image {
        save_image(&synth_generate(&filtered, &cfg.generator)?, path)?;
    }
    Ok(())
}

pub fn generate(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    guard_output(out, &[input])?;
    let w = load_latent(input)?;
    save_image(&synth_generate(&w, &cfg.generator)?, out)?;
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Result<LabeledDataset> {
    let d = &cfg.dataset;
    Ok(make_identity_dataset(
        d.n_ids,
        d.n_per_id,
        d.jitter,
        d.seed,
        &cfg.generator,
    )?)
}

/// The attacker's clean classifier on the configured dataset, used as the
/// adversarial-noise surrogate and by the classifier-backed mock service.
fn clean_surrogate(cfg: &RunConfig) -> Result<Arc<SurrogateClassifier>> {
    let ds = dataset(cfg)?;
    let harness = ThreatHarness::new(&ds, cfg.harness)?;
    Ok(Arc::new(harness.clean_classifier()?.clone()))
}

fn build_spec(
    cfg: &RunConfig,
    kind: ObfuscatorKindName,
    surrogate: Option<Arc<SurrogateClassifier>>,
) -> Result<ObfuscatorSpec> {
    let o = &cfg.obfuscator;
    let s = cfg.generator.size;
    Ok(match kind {
        ObfuscatorKindName::Identity => ObfuscatorSpec::Identity,
        ObfuscatorKindName::DeepBlur => ObfuscatorSpec::deep_blur(o.sigma, cfg.deep_blur_settings()?)?,
        ObfuscatorKindName::DeepBlurAverage => {
            ObfuscatorSpec::deep_blur_average(cfg.deep_blur_settings()?)?
        }
        ObfuscatorKindName::PixelBlur => ObfuscatorSpec::pixel_blur(o.pixel_sigma)?,
        ObfuscatorKindName::Pixelate => ObfuscatorSpec::pixelate(o.block)?,
        ObfuscatorKindName::Mask => ObfuscatorSpec::mask(o.rect.rect(s, s))?,
        ObfuscatorKindName::AdvNoise => {
            let surrogate = match surrogate {
                Some(s) => s,
                None => clean_surrogate(cfg)?,
            };
            ObfuscatorSpec::adv_noise(o.epsilon, o.steps, surrogate)?
        }
    })
}

fn apply_to_file(
    cfg: &RunConfig,
    kind: ObfuscatorKindName,
    input: &Path,
    out: &Path,
    label: usize,
    latent: Option<&Path>,
) -> Result<()> {
    for o in [Some(out), latent].into_iter().flatten() {
        guard_output(o, &[input])?;
    }
    if kind == ObfuscatorKindName::AdvNoise && label >= cfg.dataset.n_ids {
        return Err(CliError::Usage(format!(
            "label {label} outside the {} dataset identities",
            cfg.dataset.n_ids
        )));
    }
    let img = load_aligned(cfg, input)?;
    let spec = build_spec(cfg, kind, None)?;
    match (spec.latent_filter(), spec.deep_blur_settings()) {
        (Some(filter), Some(settings)) => {
            let result = deep_blur(&img, filter, settings)?;
            save_image(&result.image, out)?;
            if let Some(path) = latent {
                save_latent(&result.filtered, path)?;
            }
        }
        _ => {
            if latent.is_some() {
                return Err(CliError::Usage(format!(
                    "--latent needs a deepblur kind, not {}",
                    spec.kind_name()
                )));
            }
            save_image(&spec.apply(&img, label)?, out)?;
        }
    }
    Ok(())
}

pub fn obfuscate(
    cfg: &RunConfig,
    input: &Path,
    out: &Path,
    label: usize,
    latent: Option<&Path>,
) -> Result<()> {
    apply_to_file(cfg, cfg.obfuscator.kind, input, out, label, latent)
}

pub fn baseline(cfg: &RunConfig, input: &Path, out: &Path, kind: &str, label: usize) -> Result<()> {
    let k = match ObfuscatorKindName::parse(kind) {
        Some(
            k @ (ObfuscatorKindName::PixelBlur
            | ObfuscatorKindName::Pixelate
            | ObfuscatorKindName::Mask
            | ObfuscatorKindName::AdvNoise),
        ) => k,
        _ => {
            return Err(CliError::Usage(format!(
                "unknown baseline {kind:?}; expected pixel_blur, pixelate, mask or advnoise"
            )))
        }
    };
    apply_to_file(cfg, k, input, out, label, None)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut files = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect::<Vec<_>>();
    files.sort();
    Ok(files)
}

pub fn metrics(
    cfg: &RunConfig,
    reference: &Path,
    test: &Path,
    method: &str,
    out: Option<&Path>,
) -> Result<()> {
    if reference.is_dir() != test.is_dir() {
        return Err(CliError::Usage("--ref and --test must both be files or both directories".into()));
    }
    if !reference.is_dir() {
        let a = load_image(reference)?;
        let b = load_image(test)?;
        let line = format!(
            "psnr={} ssim={} ms_ssim={}\n",
            psnr(&a, &b)?,
            ssim(&a, &b)?,
            ms_ssim(&a, &b)?
        );
        match out {
            Some(path) => write_file(path, line.as_bytes())?,
            None => print!("{line}"),
        }
        return Ok(());
    }
    let refs = png_files(reference)?;
    let tests = png_files(test)?;
    let names = |v: &[PathBuf]| v.iter().map(|p| p.file_name().map(|n| n.to_owned())).collect::<Vec<_>>();
    if names(&refs) != names(&tests) {
        return Err(CliError::Usage(format!(
            "{} and {} do not hold the same PNG file names",
            reference.display(),
            test.display()
        )));
    }
    let load = |v: &[PathBuf]| v.iter().map(load_image).collect::<deepblur_core::Result<Vec<_>>>();
    let report = quality_report(method, &load(&refs)?, &load(&tests)?, &cfg.fid_features)?;
    let path = csv_target(cfg, out, "metrics.csv");
    write_file(&path, quality_reports_to_csv(&[report]).as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn eval_specs(cfg: &RunConfig, harness: &ThreatHarness) -> Result<Vec<ObfuscatorSpec>> {
    if cfg.eval.suite == EvalSuite::Single {
        let surrogate = match cfg.obfuscator.kind {
            ObfuscatorKindName::AdvNoise => Some(Arc::new(harness.clean_classifier()?.clone())),
            _ => None,
        };
        return Ok(vec![build_spec(cfg, cfg.obfuscator.kind, surrogate)?]);
    }
    let settings = cfg.deep_blur_settings()?;
    let mut specs = vec![ObfuscatorSpec::Identity];
    for &sigma in &cfg.eval.sigmas {
        specs.push(ObfuscatorSpec::deep_blur(sigma, settings.clone())?);
    }
    specs.push(ObfuscatorSpec::deep_blur_average(settings)?);
    let surrogate = Arc::new(harness.clean_classifier()?.clone());
    for kind in [
        ObfuscatorKindName::PixelBlur,
        ObfuscatorKindName::Pixelate,
        ObfuscatorKindName::Mask,
        ObfuscatorKindName::AdvNoise,
    ] {
        specs.push(build_spec(cfg, kind, Some(surrogate.clone()))?);
    }
    Ok(specs)
}

pub fn eval(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let ds = dataset(cfg)?;
    let harness = ThreatHarness::new(&ds, cfg.harness)?;
    let mut reports = Vec::new();
    for spec in eval_specs(cfg, &harness)? {
        for &threat in &cfg.eval.threats {
            reports.push(harness.run(&spec, threat)?);
        }
    }
    let path = csv_target(cfg, out, "eval.csv");
    write_file(&path, reports_to_csv(&reports).as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn compare_optimizers(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let (_, target) = benchmark_case(&cfg.generator, cfg.compare_seed)?;
    let init: LatentCode = match cfg.deep_blur_settings()?.init {
        Some(w) => w,
        None => deepblur_core::inversion::default_init(&cfg.generator)?,
    };
    let mut csv = String::from("optimizer,step,loss,elapsed_ms\n");
    for kind in OptimizerKind::ALL {
        let mut opt = OptimizerConfig::new(kind);
        if kind == cfg.optimizer.kind {
            opt = cfg.optimizer;
        } else {
            opt.momentum = cfg.optimizer.momentum;
            opt.beta1 = cfg.optimizer.beta1;
            opt.beta2 = cfg.optimizer.beta2;
            opt.epsilon = cfg.optimizer.epsilon;
            opt.memory = cfg.optimizer.memory;
            opt.max_steps = cfg.optimizer.max_steps;
            opt.target_loss = cfg.optimizer.target_loss;
        }
        let r = run_inversion(&target, &cfg.generator, &cfg.extractor, &opt, &init)?;
        trajectory_rows(&mut csv, Some(kind.name()), &r, cfg.record_timing);
    }
    let path = csv_target(cfg, out, "compare_optimizers.csv");
    write_file(&path, csv.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn make_dataset(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = dataset(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let mut labels = String::from("file,label\n");
    let mut counts = vec![0usize; ds.n_ids];
    for item in &ds.items {
        let k = counts[item.label];
        counts[item.label] += 1;
        let stem = format!("id{:03}_{k:02}", item.label);
        save_image(&item.image, out.join(format!("{stem}.png")))?;
        save_latent(&item.latent, out.join(format!("{stem}.dblt")))?;
        let _ = writeln!(labels, "{stem}.png,{}", item.label);
    }
    write_file(&out.join("labels.csv"), labels.as_bytes())?;
    println!("checksum={}", ds.checksum());
    Ok(())
}

pub fn serve_mock(cfg: &RunConfig, addr: Option<&str>) -> Result<()> {
    let backend = match cfg.serve_backend {
        ServeBackend::Gallery => MockBackend::Gallery(cfg.harness.train),
        ServeBackend::Classifier => MockBackend::Classifier(clean_surrogate(cfg)?),
    };
    let handle = mock_service(backend, addr.unwrap_or(&cfg.serve_addr))?;
    let mut stdout = std::io::stdout();
    let _ = writeln!(stdout, "listening {}", handle.addr());
    let _ = stdout.flush();
    loop {
        std::thread::park();
    }
}
