//! Subcommand implementations. Each returns a [`Failure`] carrying the
//! process exit code.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use mosaic_core::dataset::{
    baseline_consistency, exact_baseline_probability, generate_dataset, read_dataset, write_dataset, ConsistencyReport,
    ImageSample,
};
use mosaic_core::diffusion::{ddpm_sample, linear_schedule, ModelPredictor};
use mosaic_core::model::{read_checkpoint, BackboneKind, Checkpoint, ModelConfig};
use mosaic_core::theory::{
    analytic_sample, one_sided_proportion_test, verification_csv, verification_suite, AnalyticMode, VerificationConfig,
};
use mosaic_core::train::{evaluate, train_model, TrainOptions};

use crate::config::ExperimentConfig;
use crate::ppm::{write_ppm, SampleGrid};

/// Images in every preview grid.
pub const GRID_IMAGES: usize = 64;

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, bad config or a missing input; exit 2.
    Usage(anyhow::Error),
    /// An enabled check did not hold; exit 1.
    Assertion(String),
    /// Anything else (I/O, divergence); exit 1.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Assertion(_) | Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => f.write_str(&chain_text(e)),
            Failure::Assertion(msg) => write!(f, "assertion failed: {msg}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<mosaic_core::Error> for Failure {
    fn from(e: mosaic_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn chain_text(e: &anyhow::Error) -> String {
    let mut out: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.last().is_some_and(|prev| prev.contains(&text)) {
            out.push(text);
        }
    }
    out.join(": ")
}

pub type CmdResult = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<ImageSample>, Failure> {
    let path = cfg.dataset_path();
    read_dataset(&path)
        .with_context(|| format!("dataset {} unavailable; run `mosaic gen-data` first", path.display()))
        .map_err(usage)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    read_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(usage)
}

fn preview(images: &[ImageSample]) -> SampleGrid {
    SampleGrid::auto(images.iter().take(GRID_IMAGES).copied().collect())
}

fn report_line(label: &str, r: &ConsistencyReport) -> String {
    format!(
        "{label}: mean {:.4} std {:.4} over {} runs x {} samples",
        r.mean, r.std, r.runs, r.samples_per_run
    )
}

/// Overrides for the sample counts in the `eval` section.
#[derive(Clone, Copy, Debug, Default)]
pub struct SampleCounts {
    pub samples_per_run: Option<usize>,
    pub runs: Option<usize>,
}

impl SampleCounts {
    fn apply(self, cfg: &mut ExperimentConfig) -> Result<(), Failure> {
        if let Some(n) = self.samples_per_run {
            cfg.eval.samples_per_run = n;
        }
        if let Some(r) = self.runs {
            cfg.eval.runs = r;
        }
        cfg.validate().map_err(usage)
    }
}

pub fn gen_data(cfg: &ExperimentConfig) -> CmdResult {
    let out = &cfg.paths.out_dir;
    cfg.write_resolved(out)?;
    let images = generate_dataset(cfg.dataset.n, cfg.dataset.seed)?;
    let path = cfg.dataset_path();
    write_dataset(&path, &images)?;
    let grid_path = out.join("dataset_preview.ppm");
    write_ppm(&preview(&images), &grid_path)?;
    println!("wrote {} images to {}", images.len(), path.display());
    println!("wrote preview {}", grid_path.display());
    Ok(())
}

pub fn train(cfg: &mut ExperimentConfig, kind: Option<BackboneKind>, resume: Option<&Path>) -> CmdResult {
    if let Some(k) = kind {
        cfg.model.kind = k.name().to_string();
        cfg.validate().map_err(usage)?;
    }
    let data = load_dataset(cfg)?;
    let model_cfg = cfg.model_config().map_err(usage)?;
    let train_cfg = cfg.train_config().map_err(usage)?;
    let diffusion = cfg.diffusion_config().map_err(usage)?;
    let resume = resume.map(load_checkpoint).transpose()?;
    let run_dir = cfg.paths.out_dir.join(model_cfg.kind.name());
    cfg.write_resolved(&run_dir)?;
    let opts = TrainOptions {
        out_dir: Some(run_dir.clone()),
        resume,
        stop_after_epoch: None,
    };
    let outcome = train_model(&model_cfg, &train_cfg, &diffusion, &data, &opts).map_err(|e| {
        Failure::Runtime(anyhow!(e).context(format!(
            "training stopped; last good weights kept under {}",
            run_dir.display()
        )))
    })?;
    let last = outcome.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} for {} epochs ({} steps), final loss {last:.5}",
        model_cfg.kind,
        train_cfg.epochs,
        outcome.metrics.len()
    );
    println!("outputs in {}", run_dir.display());
    Ok(())
}

fn model_config_for(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> anyhow::Result<ModelConfig> {
    let mut model = cfg.model_config()?;
    model.kind = ckpt.kind();
    model.time_bias_steps = ckpt.params.time_bias.as_ref().map_or(0, |t| t.shape()[0]);
    Ok(model)
}

/// Values published for the four backbones, shown next to measured ones.
pub fn published_consistency(kind: BackboneKind) -> f64 {
    match kind {
        BackboneKind::Cnn => 0.1088,
        BackboneKind::CnnFullAttn => 0.6403,
        BackboneKind::CnnTop1Attn => 0.2164,
        BackboneKind::CnnIdentityAttn => 0.2544,
    }
}

struct Evaluated {
    label: String,
    kind: BackboneKind,
    report: ConsistencyReport,
}

fn evaluate_one(cfg: &ExperimentConfig, path: &Path) -> Result<Evaluated, Failure> {
    let ckpt = load_checkpoint(path)?;
    let model = model_config_for(cfg, &ckpt).map_err(usage)?;
    let diffusion = cfg.diffusion_config().map_err(usage)?;
    let params = ckpt.eval_params();
    let report = evaluate(
        params,
        &model,
        &diffusion,
        cfg.eval.samples_per_run,
        cfg.eval.runs,
        cfg.eval.seed,
    )?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let dir = cfg.paths.out_dir.join("eval");
    write_text(&dir.join(format!("{}_{label}.csv", model.kind)), &report.to_csv())?;
    let sched = linear_schedule(&diffusion)?;
    let predictor = ModelPredictor { params, cfg: &model };
    let samples = ddpm_sample(
        &predictor,
        &sched,
        diffusion.sampler_variance,
        GRID_IMAGES,
        cfg.eval.seed,
    )?;
    write_ppm(&preview(&samples), dir.join(format!("{}_{label}.ppm", model.kind)))?;
    println!(
        "{}",
        report_line(&format!("{} ({})", model.kind, path.display()), &report)
    );
    Ok(Evaluated {
        label,
        kind: model.kind,
        report,
    })
}

pub fn eval(
    cfg: &mut ExperimentConfig,
    checkpoint: &Path,
    compare: Option<&Path>,
    counts: SampleCounts,
    min_consistency: Option<f64>,
) -> CmdResult {
    counts.apply(cfg)?;
    cfg.write_resolved(&cfg.paths.out_dir)?;
    let mut rows = vec![evaluate_one(cfg, checkpoint)?];
    if let Some(other) = compare {
        rows.push(evaluate_one(cfg, other)?);
    }
    let mut summary = String::from("model,checkpoint,mean,std,runs,samples_per_run,published\n");
    for r in &rows {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.kind,
            r.label,
            r.report.mean,
            r.report.std,
            r.report.runs,
            r.report.samples_per_run,
            published_consistency(r.kind)
        ));
    }
    if let [a, b] = rows.as_slice() {
        summary.push_str(&format!(
            "gap,{}-{},{},,,,{}\n",
            a.kind,
            b.kind,
            a.report.mean - b.report.mean,
            published_consistency(a.kind) - published_consistency(b.kind)
        ));
        println!("gap {} - {}: {:.4}", a.kind, b.kind, a.report.mean - b.report.mean);
    }
    write_text(&cfg.paths.out_dir.join("eval").join("summary.csv"), &summary)?;
    if let Some(min) = min_consistency {
        if rows[0].report.mean < min {
            return Err(Failure::Assertion(format!(
                "consistency: mean {:.4} below {min}",
                rows[0].report.mean
            )));
        }
    }
    Ok(())
}

/// Pooled Monte-Carlo mean against the exact enumeration value.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineCheck {
    pub exact: f64,
    pub monte_carlo: f64,
    pub sigma: f64,
    pub z: f64,
}

impl BaselineCheck {
    pub fn new(report: &ConsistencyReport) -> Self {
        let exact = exact_baseline_probability().value();
        let (hits, total) = report.pooled();
        let monte_carlo = hits as f64 / total as f64;
        let sigma = (exact * (1.0 - exact) / total as f64).sqrt();
        Self {
            exact,
            monte_carlo,
            sigma,
            z: (monte_carlo - exact) / sigma,
        }
    }

    pub fn within(&self, sigmas: f64) -> bool {
        self.z.abs() <= sigmas
    }
}

pub fn baseline(cfg: &mut ExperimentConfig, counts: SampleCounts) -> CmdResult {
    counts.apply(cfg)?;
    let out = &cfg.paths.out_dir;
    cfg.write_resolved(out)?;
    let report = baseline_consistency(cfg.eval.samples_per_run, cfg.eval.runs, cfg.eval.seed)?;
    write_text(&out.join("baseline.csv"), &report.to_csv())?;
    let check = BaselineCheck::new(&report);
    let exact = exact_baseline_probability();
    let summary = format!(
        "quantity,value\nexact_consistent,{}\nexact_total,{}\nexact,{}\nmonte_carlo,{}\nsigma,{}\nz,{}\npublished,0.0538\n",
        exact.consistent, exact.total, check.exact, check.monte_carlo, check.sigma, check.z
    );
    write_text(&out.join("baseline_summary.csv"), &summary)?;
    println!(
        "baseline: exact {}/{} = {:.4}, Monte Carlo {:.4} (z = {:.2}), published 0.0538",
        exact.consistent, exact.total, check.exact, check.monte_carlo, check.z
    );
    if !check.within(4.0) {
        return Err(Failure::Assertion(format!(
            "baseline: Monte Carlo {:.5} is {:.2} sigma from exact {:.5}",
            check.monte_carlo, check.z, check.exact
        )));
    }
    Ok(())
}

pub fn grad_check(cfg: &ExperimentConfig, verification: &VerificationConfig) -> CmdResult {
    let out = &cfg.paths.out_dir;
    cfg.write_resolved(out)?;
    let rows = verification_suite(verification)?;
    write_text(&out.join("verification.csv"), &verification_csv(&rows))?;
    for r in &rows {
        let tag = if r.informational { " (informational)" } else { "" };
        println!(
            "{:<48} {:>5} {:>10.3e} {}{tag}",
            r.check,
            r.instances,
            r.max_rel_err,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.pass && !r.informational)
        .map(|r| r.check.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(Failure::Assertion(format!(
            "grad-check rows failed: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

/// Which analytic machines to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalyticChoice {
    One(AnalyticMode),
    /// Both machines plus the one-sided test that TOP1 beats LOCAL.
    Compare,
}

pub fn analytic(cfg: &mut ExperimentConfig, choice: AnalyticChoice, counts: SampleCounts) -> CmdResult {
    counts.apply(cfg)?;
    let out = cfg.paths.out_dir.clone();
    cfg.write_resolved(&out)?;
    let data = load_dataset(cfg)?;
    let diffusion = cfg.diffusion_config().map_err(usage)?;
    let sched = linear_schedule(&diffusion)?;
    let modes = match choice {
        AnalyticChoice::One(m) => vec![m],
        AnalyticChoice::Compare => vec![AnalyticMode::Local, AnalyticMode::Top1],
    };
    let mut reports = Vec::new();
    for mode in modes {
        let run = analytic_sample(
            mode,
            &data,
            &sched,
            diffusion.sampler_variance,
            cfg.eval.samples_per_run,
            cfg.eval.runs,
            cfg.eval.seed,
        )?;
        write_text(&out.join(format!("analytic_{}.csv", mode.name())), &run.report.to_csv())?;
        write_ppm(
            &preview(&run.samples),
            out.join(format!("analytic_{}.ppm", mode.name())),
        )?;
        println!("{}", report_line(&format!("analytic {}", mode.name()), &run.report));
        reports.push(run.report);
    }
    if let [local, top1] = reports.as_slice() {
        let (a, na) = top1.pooled();
        let (b, nb) = local.pooled();
        let (z, p) = one_sided_proportion_test(a, na, b, nb);
        write_text(
            &out.join("analytic_summary.csv"),
            &format!("mode,consistent,samples\nlocal,{b},{nb}\ntop1,{a},{na}\nz,{z},\np_value,{p},\n"),
        )?;
        println!("top1 > local: z = {z:.3}, one-sided p = {p:.3e}");
        if p >= 0.01 {
            return Err(Failure::Assertion(format!(
                "analytic: top1 vs local p = {p:.3e} not below 0.01"
            )));
        }
    }
    Ok(())
}

/// Default `paths.out_dir`-relative location of a trained checkpoint.
pub fn final_checkpoint(cfg: &ExperimentConfig, kind: BackboneKind) -> PathBuf {
    cfg.paths.out_dir.join(kind.name()).join("final.mosc")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_skips_repeated_causes() {
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        let e = anyhow::Error::new(mosaic_core::Error::io("a.bin", io)).context("loading a.bin");
        assert_eq!(Failure::Usage(e).to_string(), "loading a.bin: a.bin: gone");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Failure::Usage(anyhow!("x")).exit_code(), 2);
        assert_eq!(Failure::Assertion("x".into()).exit_code(), 1);
        assert_eq!(Failure::Runtime(anyhow!("x")).exit_code(), 1);
    }

    #[test]
    fn baseline_check_uses_pooled_binomial_noise() {
        let exact = exact_baseline_probability();
        assert_eq!((exact.consistent, exact.total), (48, 1296));
        let n = 1296 * 100;
        let report = ConsistencyReport::from_counts(n, vec![48 * 100]);
        let check = BaselineCheck::new(&report);
        assert_eq!(check.z, 0.0);
        let sigma = (48.0 / 1296.0 * (1.0 - 48.0 / 1296.0) / n as f64).sqrt();
        assert!((check.sigma - sigma).abs() < 1e-15);
        let off = ConsistencyReport::from_counts(n, vec![48 * 100 + 400]);
        assert!(!BaselineCheck::new(&off).within(4.0));
    }

    #[test]
    fn published_values_order() {
        let cnn = published_consistency(BackboneKind::Cnn);
        for k in [BackboneKind::CnnTop1Attn, BackboneKind::CnnIdentityAttn] {
            assert!(published_consistency(k) > cnn);
            assert!(published_consistency(k) < published_consistency(BackboneKind::CnnFullAttn));
        }
    }
}
