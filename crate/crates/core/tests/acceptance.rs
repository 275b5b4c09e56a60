//! Acceptance suite: one line per criterion.
//!
//! Trained checkpoints and evaluation reports are cached under
//! `MOSAIC_ACCEPTANCE_CACHE` (default: the cargo target tmpdir), keyed by
//! their configuration, so the expensive criteria only train once.
//! Interrupted training resumes from the newest periodic checkpoint.
//!
//! Environment:
//! - `MOSAIC_ACCEPTANCE_ONLY=1,3`: run a subset.
//! - `MOSAIC_ACCEPTANCE_STRICT=1`: exit 1 when a criterion fails. By
//!   default failures are reported but only harness errors fail the target.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use mosaic_core::dataset::{
    baseline_consistency, exact_baseline_probability, generate_dataset, write_dataset, ConsistencyReport, ImageSample,
};
use mosaic_core::diffusion::{ddpm_sample, linear_schedule, DiffusionConfig, ModelPredictor, SamplerVariance};
use mosaic_core::model::{read_checkpoint, BackboneKind, Checkpoint, ModelConfig};
use mosaic_core::theory::{
    analytic_sample, one_sided_proportion_test, recover_local_optimum, verification_suite, AnalyticMode,
    ToyDistribution, VerificationConfig, VerificationRow,
};
use mosaic_core::train::{evaluate, train_model, TrainConfig, TrainOptions};

/// Bump when a change invalidates cached checkpoints or reports.
const CACHE_VERSION: u32 = 1;
const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];
const DATASET_SIZE: usize = 2048;
const DATASET_SEED: u64 = 0;
const EVAL_SAMPLES: usize = 10_000;
const EVAL_RUNS: usize = 10;

type Outcome = Result<(bool, String), String>;
type Criterion<'a> = (u8, &'static str, Box<dyn Fn() -> Outcome + 'a>);

fn cache_root() -> PathBuf {
    std::env::var_os("MOSAIC_ACCEPTANCE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn pct(v: f64) -> String {
    if v.is_nan() {
        return "not needed".into();
    }
    format!("{:.2}%", 100.0 * v)
}

// --- cached training and evaluation ---------------------------------------

fn run_key(kind: BackboneKind, seed: u64, cfg: &TrainConfig) -> String {
    format!(
        "v{CACHE_VERSION}_{}_seed{seed}_e{}_n{DATASET_SIZE}_d{DATASET_SEED}",
        kind.name(),
        cfg.epochs
    )
}

fn latest_periodic(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("checkpoint_e") && n.ends_with(".mosc"))
        })
        .collect();
    found.sort();
    found.pop()
}

fn trained(kind: BackboneKind, seed: u64, data: &[ImageSample]) -> Result<Checkpoint, String> {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::for_kind(kind)
    };
    let dir = cache_root().join("train").join(run_key(kind, seed, &cfg));
    let final_path = dir.join("final.mosc");
    if final_path.exists() {
        return read_checkpoint(&final_path).map_err(err);
    }
    let resume = match latest_periodic(&dir) {
        Some(p) => {
            eprintln!("  resuming {kind} seed {seed} from {}", p.display());
            Some(read_checkpoint(&p).map_err(err)?)
        }
        None => None,
    };
    eprintln!("  training {kind} seed {seed} for {} epochs", cfg.epochs);
    let started = Instant::now();
    let out = train_model(
        &ModelConfig::new(kind),
        &cfg,
        &DiffusionConfig::default(),
        data,
        &TrainOptions {
            out_dir: Some(dir),
            resume,
            stop_after_epoch: None,
        },
    )
    .map_err(err)?;
    eprintln!(
        "  trained {kind} seed {seed} in {:.0}s",
        started.elapsed().as_secs_f64()
    );
    Ok(out.checkpoint)
}

fn parse_report(text: &str) -> Option<ConsistencyReport> {
    let mut lines = text.lines();
    if lines.next()? != "run,samples,consistent,fraction" {
        return None;
    }
    let mut samples = 0;
    let mut counts = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        samples = f.get(1)?.parse().ok()?;
        counts.push(f.get(2)?.parse().ok()?);
    }
    (!counts.is_empty()).then(|| ConsistencyReport::from_counts(samples, counts))
}

fn eval_path(kind: BackboneKind, seed: u64) -> PathBuf {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::for_kind(kind)
    };
    cache_root()
        .join("eval")
        .join(format!("{}_{EVAL_SAMPLES}x{EVAL_RUNS}.csv", run_key(kind, seed, &cfg)))
}

fn cached_consistency(kind: BackboneKind, seed: u64) -> Option<ConsistencyReport> {
    parse_report(&fs::read_to_string(eval_path(kind, seed)).ok()?)
}

fn consistency(kind: BackboneKind, seed: u64, data: &[ImageSample]) -> Result<ConsistencyReport, String> {
    if let Some(r) = cached_consistency(kind, seed) {
        return Ok(r);
    }
    let path = eval_path(kind, seed);
    let ckpt = trained(kind, seed, data)?;
    eprintln!("  evaluating {kind} seed {seed}");
    let started = Instant::now();
    let report = evaluate(
        ckpt.eval_params(),
        &ModelConfig::new(kind),
        &DiffusionConfig::default(),
        EVAL_SAMPLES,
        EVAL_RUNS,
        1000 + seed,
    )
    .map_err(err)?;
    eprintln!(
        "  evaluated {kind} seed {seed} in {:.0}s: {}",
        started.elapsed().as_secs_f64(),
        pct(report.mean)
    );
    fs::create_dir_all(path.parent().unwrap()).map_err(err)?;
    fs::write(&path, report.to_csv()).map_err(err)?;
    Ok(report)
}

/// Mean consistency of `kind` from a row in `BackboneKind::ALL` order.
fn mean(row: &[f64; 4], kind: BackboneKind) -> f64 {
    row[BackboneKind::ALL.iter().position(|&k| k == kind).unwrap()]
}

/// Runs `check` seed by seed; 2 of 3 passing seeds is a pass. Cached
/// results are always reported, but a model is only trained when its seed
/// is still undecided and can still change the verdict. Kinds are filled in
/// `ALL` order (TOP1, the slowest, last); `check` returns `None` while a
/// seed is undecided, and unfilled entries are NaN.
fn majority_of_seeds(
    kinds: &[BackboneKind],
    check: impl Fn(&[f64; 4]) -> (Option<bool>, String),
) -> Result<(bool, usize, Vec<String>), String> {
    let data = generate_dataset(DATASET_SIZE, DATASET_SEED).map_err(err)?;
    let (mut ok, mut parts) = (0, Vec::new());
    for (s, &seed) in TRAIN_SEEDS.iter().enumerate() {
        let needed = ok < 2 && ok + TRAIN_SEEDS.len() - s >= 2;
        let mut row = [f64::NAN; 4];
        for (i, kind) in BackboneKind::ALL.into_iter().enumerate() {
            if kinds.contains(&kind) {
                row[i] = cached_consistency(kind, seed).map_or(f64::NAN, |r| r.mean);
            }
        }
        let mut verdict = check(&row);
        for (i, kind) in BackboneKind::ALL.into_iter().enumerate() {
            if verdict.0.is_some() || !needed {
                break;
            }
            if kinds.contains(&kind) && row[i].is_nan() {
                row[i] = consistency(kind, seed, &data)?.mean;
                verdict = check(&row);
            }
        }
        let mark = match verdict.0 {
            Some(true) => "",
            Some(false) => " (x)",
            None => " (undecided, not needed)",
        };
        ok += verdict.0.unwrap_or(false) as usize;
        parts.push(format!("seed {seed}: {}{mark}", verdict.1));
    }
    Ok((ok >= 2, ok, parts))
}

// --- criteria -------------------------------------------------------------

fn ordering() -> Outcome {
    use BackboneKind::{Cnn, CnnFullAttn};
    let (pass, ok, parts) = majority_of_seeds(&[Cnn, CnnFullAttn], |row| {
        let (cnn, attn) = (mean(row, Cnn), mean(row, CnnFullAttn));
        (
            (!attn.is_nan()).then_some(attn >= 0.45 && cnn <= 0.25 && attn - cnn >= 0.25),
            format!("cnn {} attn {}", pct(cnn), pct(attn)),
        )
    })?;
    Ok((
        pass,
        format!(
            "{} ; {ok}/3 seeds meet attn>=45%, cnn<=25%, gap>=25pp (published 64.03% vs 10.88%)",
            parts.join(", ")
        ),
    ))
}

fn ablations() -> Outcome {
    use BackboneKind::*;
    let (pass, ok, parts) = majority_of_seeds(&BackboneKind::ALL, |row| {
        let (cnn, full) = (mean(row, Cnn), mean(row, CnnFullAttn));
        let (top1, id) = (mean(row, CnnTop1Attn), mean(row, CnnIdentityAttn));
        let between = |v: f64| v > cnn && v < full;
        let decided = match (id.is_nan(), top1.is_nan()) {
            (true, _) => None,
            (false, _) if !between(id) => Some(false),
            (false, true) => None,
            (false, false) => Some(between(top1)),
        };
        (
            decided,
            format!(
                "cnn {} top1 {} identity {} full {}",
                pct(cnn),
                pct(top1),
                pct(id),
                pct(full)
            ),
        )
    })?;
    Ok((
        pass,
        format!(
            "{} ; {ok}/3 seeds have top1 and identity strictly between cnn and full (published 21.64%, 25.44%)",
            parts.join(", ")
        ),
    ))
}

fn baseline() -> Outcome {
    let started = Instant::now();
    let exact = exact_baseline_probability();
    let report = baseline_consistency(10_000, 100, 7).map_err(err)?;
    let secs = started.elapsed().as_secs_f64();
    let (hits, n) = report.pooled();
    let p = exact.value();
    let mc = hits as f64 / n as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let z = (mc - p) / sigma;
    Ok((
        z.abs() <= 4.0 && secs < 10.0,
        format!(
            "Monte Carlo {} vs exact {}/{} = {} (z = {z:.2}, {secs:.1}s); published 5.38% is not reproduced by uniform draws from the six canonical pairs",
            pct(mc),
            exact.consistent,
            exact.total,
            pct(p)
        ),
    ))
}

fn suite() -> Result<(Vec<VerificationRow>, f64), String> {
    let started = Instant::now();
    let rows = verification_suite(&VerificationConfig::default()).map_err(err)?;
    Ok((rows, started.elapsed().as_secs_f64()))
}

fn row<'a>(rows: &'a [VerificationRow], name: &str) -> Result<&'a VerificationRow, String> {
    rows.iter()
        .find(|r| r.check == name)
        .ok_or(format!("missing row {name}"))
}

fn identities(rows: &[VerificationRow], secs: f64) -> Outcome {
    let cancel = row(rows, "cancellation_residual")?;
    let grad = row(rows, "attention_weight_grad")?;
    let func = row(rows, "functional_gradient")?;
    let printed = row(rows, "functional_gradient_without_query_covariance")?;
    let pass = cancel.instances >= 1000
        && cancel.max_rel_err <= 1e-12
        && grad.max_rel_err < 1e-8
        && func.instances >= 20
        && func.max_rel_err < 1e-6
        && secs < 60.0;
    Ok((
        pass,
        format!(
            "cancellation {:.1e} over {}, weight grad {:.1e}, functional grad {:.1e} over {} distributions ({secs:.1}s); without the query covariance term: {:.1e}",
            cancel.max_rel_err, cancel.instances, grad.max_rel_err, func.max_rel_err, func.instances, printed.max_rel_err
        ),
    ))
}

/// Score of the slot marginal mixture, written out independently of the
/// library.
fn marginal_mixture_score(phi: f64, alphabet: &[f64], weights: &[f64], alpha_bar: f64) -> f64 {
    let a = alpha_bar.sqrt();
    let v = 1.0 - alpha_bar;
    let dens: Vec<f64> = alphabet
        .iter()
        .zip(weights)
        .map(|(c, w)| w * (-(phi - a * c).powi(2) / (2.0 * v)).exp())
        .collect();
    let z: f64 = dens.iter().sum();
    alphabet.iter().zip(&dens).map(|(c, d)| d / z * (a * c - phi) / v).sum()
}

fn local_optimum(rows: &[VerificationRow]) -> Outcome {
    let random = row(rows, "local_optimum_recovery")?;
    let alphabet = [0.8, -0.5];
    let marginal = [0.3, 0.7];
    let alpha_bar = 0.6;
    let dist = ToyDistribution::factorized(
        alphabet.iter().map(|&a| vec![a]).collect(),
        &[marginal.to_vec(), marginal.to_vec()],
        alpha_bar,
    )
    .map_err(err)?;
    let opt = recover_local_optimum(&dist).map_err(err)?;
    let factorized = alphabet
        .iter()
        .enumerate()
        .map(|(p, &phi)| (opt.table.rows[p][0] - marginal_mixture_score(phi, &alphabet, &marginal, alpha_bar)).abs())
        .fold(0.0, f64::max);
    Ok((
        random.pass && factorized < 1e-3,
        format!(
            "max-norm gap {:.1e} over {} random distributions, {:.1e} on the factorized two-patch case",
            random.max_rel_err, random.instances, factorized
        ),
    ))
}

fn analytic() -> Outcome {
    let started = Instant::now();
    let data = generate_dataset(DATASET_SIZE, DATASET_SEED).map_err(err)?;
    let sched = linear_schedule(&DiffusionConfig::default()).map_err(err)?;
    let run = |mode| analytic_sample(mode, &data, &sched, SamplerVariance::Beta, 10_000, 1, 11).map_err(err);
    let local = run(AnalyticMode::Local)?.report;
    let top1 = run(AnalyticMode::Top1)?.report;
    let secs = started.elapsed().as_secs_f64();
    let (a, na) = top1.pooled();
    let (b, nb) = local.pooled();
    let (z, p) = one_sided_proportion_test(a, na, b, nb);
    let exact = exact_baseline_probability().value();
    let local_z = (local.mean - exact) / (exact * (1.0 - exact) / nb as f64).sqrt();
    Ok((
        p < 0.01 && secs < 300.0,
        format!(
            "top1 {} vs local {} (z = {z:.2}, one-sided p = {p:.2e}, {secs:.0}s); local vs independent baseline z = {local_z:.2}",
            pct(top1.mean),
            pct(local.mean)
        ),
    ))
}

/// Dataset, training (with Gumbel noise) and sampling, serialized.
fn pipeline_bytes() -> Result<Vec<u8>, String> {
    let data = generate_dataset(96, 5).map_err(err)?;
    let path = std::env::temp_dir().join(format!("mosaic-determinism-{}.mosd", std::process::id()));
    write_dataset(&path, &data).map_err(err)?;
    let mut bytes = fs::read(&path).map_err(err)?;
    fs::remove_file(&path).map_err(err)?;
    let diffusion = DiffusionConfig::default();
    let sched = linear_schedule(&diffusion).map_err(err)?;
    for kind in [BackboneKind::CnnFullAttn, BackboneKind::CnnTop1Attn] {
        let model = ModelConfig::new(kind);
        let cfg = TrainConfig {
            epochs: 3,
            seed: 9,
            ..TrainConfig::for_kind(kind)
        };
        let out = train_model(&model, &cfg, &diffusion, &data, &TrainOptions::default()).map_err(err)?;
        bytes.extend(out.checkpoint.encode().map_err(err)?);
        let predictor = ModelPredictor {
            params: out.checkpoint.eval_params(),
            cfg: &model,
        };
        for img in ddpm_sample(&predictor, &sched, SamplerVariance::Beta, 300, 4).map_err(err)? {
            bytes.extend(img.pixels.iter().flat_map(|v| v.to_le_bytes()));
        }
    }
    Ok(bytes)
}

fn numerics(rows: &[VerificationRow]) -> Outcome {
    let ops: Vec<&VerificationRow> = rows.iter().filter(|r| r.check.starts_with("op_")).collect();
    let worst = ops.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let ops_ok = !ops.is_empty() && ops.iter().all(|r| r.instances >= 100 && r.max_rel_err < 1e-6);
    let adjoint = row(rows, "conv_deconv_adjoint")?;
    let first = pipeline_bytes()?;
    let second = pipeline_bytes()?;
    let same = first == second;
    Ok((
        ops_ok && adjoint.max_rel_err < 1e-10 && same,
        format!(
            "{} ops, worst rel err {worst:.1e}; adjoint {:.1e}; pipeline runs {} ({} bytes)",
            ops.len(),
            adjoint.max_rel_err,
            if same { "bit-identical" } else { "DIFFER" },
            first.len()
        ),
    ))
}

fn main() -> ExitCode {
    let only: Option<Vec<u8>> = std::env::var("MOSAIC_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let strict = std::env::var_os("MOSAIC_ACCEPTANCE_STRICT").is_some_and(|v| v != "0");
    let wanted = |id: u8| only.as_ref().is_none_or(|o| o.contains(&id));
    println!("acceptance cache: {}", cache_root().display());

    let suite_rows = if [4, 5, 7].into_iter().any(wanted) {
        match suite() {
            Ok(r) => Some(r),
            Err(e) => {
                println!("harness error in verification suite: {e}");
                return ExitCode::from(2);
            }
        }
    } else {
        None
    };
    let rows = || &suite_rows.as_ref().unwrap().0;
    let criteria: Vec<Criterion> = vec![
        (1, "cnn vs attention ordering", Box::new(ordering)),
        (2, "top1 and identity ablations", Box::new(ablations)),
        (3, "random baseline", Box::new(baseline)),
        (
            4,
            "attention identity suite",
            Box::new(|| identities(rows(), suite_rows.as_ref().unwrap().1)),
        ),
        (5, "convolutional optimum recovery", Box::new(|| local_optimum(rows()))),
        (6, "analytic top1 beats local", Box::new(analytic)),
        (7, "numerics soundness", Box::new(|| numerics(rows()))),
    ];

    let mut failed = 0;
    let mut errors = 0;
    let mut ran = 0;
    for (id, name, check) in &criteria {
        if !wanted(*id) {
            continue;
        }
        ran += 1;
        match check() {
            Ok((pass, detail)) => {
                failed += !pass as usize;
                println!("criterion {id} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
            }
            Err(e) => {
                errors += 1;
                println!("criterion {id} ERROR {name}: {e}");
            }
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed - errors);
    if errors > 0 {
        ExitCode::from(2)
    } else if strict && failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
