//! DDPM forward process, weighted training loss and ancestral sampling.

use rayon::prelude::*;

use crate::dataset::{ImageSample, CHANNELS, IMAGE_LEN, SIDE};
use crate::error::{ensure, Error, Result};
use crate::model::{forward, BoundParams, ModelConfig, ModelParams};
use crate::numerics::{Prng, Scalar, Tape, Tensor, Var};

/// Per-step noise scale of the reverse chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerVariance {
    /// `sigma_t^2 = beta_t`
    Beta,
    /// `sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)`
    PosteriorBeta,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampler_variance: SamplerVariance,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sampler_variance: SamplerVariance::Beta,
        }
    }
}

/// Schedule arrays indexed by `t - 1` for `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn linear_schedule(cfg: &DiffusionConfig) -> Result<NoiseSchedule> {
    ensure!(cfg.steps >= 1, "diffusion needs at least one step");
    ensure!(
        0.0 < cfg.beta_start && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0,
        "need 0 < beta_start < beta_end < 1, got {} and {}",
        cfg.beta_start,
        cfg.beta_end
    );
    let n = cfg.steps;
    let beta: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                cfg.beta_start
            } else {
                cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        ensure!(
            (1..=self.steps()).contains(&t),
            "timestep {t} outside 1..={}",
            self.steps()
        );
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `abar_{t-1}` with `abar_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    pub fn sigma(&self, t: usize, variance: SamplerVariance) -> f64 {
        match variance {
            SamplerVariance::Beta => self.beta(t).sqrt(),
            SamplerVariance::PosteriorBeta => {
                (self.beta(t) * (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t))).sqrt()
            }
        }
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, for any tensor shape.
pub fn q_sample<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    let i = sched.index(t)?;
    ensure!(
        x0.shape() == eps.shape(),
        "x0 {:?} and eps {:?} differ in shape",
        x0.shape(),
        eps.shape()
    );
    let a = T::of(sched.alpha_bar[i].sqrt());
    let s = T::of((1.0 - sched.alpha_bar[i]).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + s * e).collect();
    Tensor::new(x0.shape(), data)
}

/// Everything a loss evaluation drew from the random stream.
#[derive(Clone, Debug, PartialEq)]
pub struct LossDraw<T: Scalar> {
    pub timesteps: Vec<usize>,
    pub eps: Tensor<T>,
    pub x_t: Tensor<T>,
}

/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` per batch element and noises
/// the `[B,3,4,4]` batch.
pub fn draw_noisy_batch<T: Scalar>(batch: &Tensor<T>, sched: &NoiseSchedule, rng: &mut Prng) -> Result<LossDraw<T>> {
    ensure!(
        batch.rank() == 4 && batch.shape()[1..] == [CHANNELS, SIDE, SIDE],
        "batch must be [B,3,4,4], got {:?}",
        batch.shape()
    );
    let b = batch.shape()[0];
    ensure!(b > 0, "empty batch");
    let mut timesteps = Vec::with_capacity(b);
    let mut eps = Vec::with_capacity(b * IMAGE_LEN);
    let mut x_t = Vec::with_capacity(b * IMAGE_LEN);
    for i in 0..b {
        let t = 1 + rng.below(sched.steps());
        timesteps.push(t);
        let a = sched.alpha_bar(t).sqrt();
        let s = (1.0 - sched.alpha_bar(t)).sqrt();
        for &x in batch.outer(i) {
            let e = T::of(rng.normal());
            eps.push(e);
            x_t.push(T::of(a) * x + T::of(s) * e);
        }
    }
    Ok(LossDraw {
        timesteps,
        eps: Tensor::new(batch.shape(), eps)?,
        x_t: Tensor::new(batch.shape(), x_t)?,
    })
}

/// Weighted denoising loss with a caller-supplied predictor:
/// `mean_b (1 - abar_{t_b}) mean_i (pred - eps)^2`.
pub fn training_loss_with<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &Tensor<T>,
    sched: &NoiseSchedule,
    rng: &mut Prng,
    predict: impl FnOnce(&mut Tape<T>, Var, &[usize], &mut Prng) -> Result<Var>,
) -> Result<Var> {
    let draw = draw_noisy_batch(batch, sched, rng)?;
    let weights: Vec<T> = draw
        .timesteps
        .iter()
        .map(|&t| T::of(1.0 - sched.alpha_bar(t)))
        .collect();
    let x_t = tape.constant(draw.x_t);
    let pred = predict(tape, x_t, &draw.timesteps, rng)?;
    let target = tape.constant(draw.eps);
    tape.weighted_mse(pred, target, &weights)
}

/// Training loss for a bound backbone. Top-1 models draw their Gumbel
/// noise from `rng` after the diffusion noise.
pub fn training_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    batch: &Tensor<T>,
    sched: &NoiseSchedule,
    rng: &mut Prng,
) -> Result<Var> {
    training_loss_with(tape, batch, sched, rng, |tape, x_t, steps, rng| {
        forward(tape, bound, cfg, x_t, steps, Some(rng))
    })
}

/// Noise estimate for a `[B,3,4,4]` batch sharing timestep `t`.
pub trait NoisePredictor: Sync {
    fn predict(&self, x_t: &Tensor<f32>, t: usize) -> Result<Tensor<f32>>;
}

/// A trained backbone as a sampler oracle. Top-1 attention selects the
/// noise-free argmax.
pub struct ModelPredictor<'a> {
    pub params: &'a ModelParams<f32>,
    pub cfg: &'a ModelConfig,
}

impl NoisePredictor for ModelPredictor<'_> {
    fn predict(&self, x_t: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        let steps = vec![t; x_t.shape()[0]];
        crate::model::predict_noise(self.params, self.cfg, x_t, &steps, None)
    }
}

/// Images sampled together through one batched predictor call per step.
/// Chunking never changes results because every image owns its stream.
const SAMPLE_CHUNK: usize = 256;

/// Ancestral sampling of `n` images. Image `i` draws all of its noise
/// from `Prng::child(seed, i)`.
pub fn ddpm_sample(
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    variance: SamplerVariance,
    n: usize,
    seed: u64,
) -> Result<Vec<ImageSample>> {
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(SAMPLE_CHUNK)
        .map(|start| (start, (start + SAMPLE_CHUNK).min(n)))
        .collect();
    let parts = chunks
        .into_par_iter()
        .map(|(start, end)| sample_chunk(predictor, sched, variance, start, end, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

fn sample_chunk(
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    variance: SamplerVariance,
    start: usize,
    end: usize,
    seed: u64,
) -> Result<Vec<ImageSample>> {
    let b = end - start;
    let mut rngs: Vec<Prng> = (start..end).map(|i| Prng::child(seed, i as u64)).collect();
    let mut x: Vec<f32> = Vec::with_capacity(b * IMAGE_LEN);
    for rng in rngs.iter_mut() {
        x.extend((0..IMAGE_LEN).map(|_| rng.normal() as f32));
    }
    let shape = [b, CHANNELS, SIDE, SIDE];
    for t in (1..=sched.steps()).rev() {
        let xt = Tensor::new(&shape, x)?;
        let eps = predictor.predict(&xt, t)?;
        ensure!(eps.shape() == shape, "predictor returned shape {:?}", eps.shape());
        x = xt.into_data();
        let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
        let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
        let sigma = sched.sigma(t, variance);
        for (i, rng) in rngs.iter_mut().enumerate() {
            let span = i * IMAGE_LEN..(i + 1) * IMAGE_LEN;
            for (xv, &e) in x[span.clone()].iter_mut().zip(&eps.data()[span]) {
                let mean = inv_sqrt_alpha * (*xv as f64 - coef * e as f64);
                let z = if t > 1 { rng.normal() } else { 0.0 };
                *xv = (mean + sigma * z) as f32;
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite(format!("sampler step t={t}")));
        }
    }
    x.chunks_exact(IMAGE_LEN).map(ImageSample::from_diffusion).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, BackboneKind};

    fn sched() -> NoiseSchedule {
        linear_schedule(&DiffusionConfig::default()).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = sched();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert_eq!(s.alpha_bar(1), s.alpha(1));
        for t in 2..=1000 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(1000) < 1e-4);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        for (a, b) in [(0.0, 0.02), (0.02, 0.01), (1e-4, 1.0), (-1.0, 0.5)] {
            let cfg = DiffusionConfig {
                beta_start: a,
                beta_end: b,
                ..Default::default()
            };
            assert!(linear_schedule(&cfg).is_err());
        }
    }

    #[test]
    fn q_sample_without_noise_scales_input() {
        let s = sched();
        let mut rng = Prng::new(1);
        let x0 = Tensor::<f64>::randn(&[3, 4, 4], &mut rng);
        let out = q_sample(&x0, 300, &Tensor::zeros(&[3, 4, 4]), &s).unwrap();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert!((o - s.alpha_bar(300).sqrt() * x).abs() < 1e-15);
        }
        assert!(q_sample(&x0, 0, &x0, &s).is_err());
        assert!(q_sample(&x0, 1001, &x0, &s).is_err());
    }

    #[test]
    fn q_sample_moments() {
        let s = sched();
        let mut rng = Prng::new(2);
        let draws = 10_000;
        for t in [50, 400, 1000] {
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..draws {
                // x0 uniform on {-1, 1}: variance 1
                let x0 = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                let x0 = Tensor::<f64>::full(&[1], x0);
                let eps = Tensor::randn(&[1], &mut rng);
                let v = q_sample(&x0, t, &eps, &s).unwrap().item();
                sum += v;
                sq += v * v;
            }
            let mean = sum / draws as f64;
            let var = sq / draws as f64 - mean * mean;
            let want = s.alpha_bar(t) + (1.0 - s.alpha_bar(t));
            assert!((var - want).abs() < 0.05, "t={t}: {var} vs {want}");
            assert!(mean.abs() < 0.05);
        }
    }

    #[test]
    fn posterior_mean_recovers_x0_at_first_step() {
        let s = sched();
        let mut rng = Prng::new(3);
        let x0 = Tensor::<f32>::randn(&[3, 4, 4], &mut rng).map(|v| v.clamp(-1.0, 1.0));
        let eps = Tensor::<f32>::randn(&[3, 4, 4], &mut rng);
        let x1 = q_sample(&x0, 1, &eps, &s).unwrap();
        let inv = (1.0 / s.alpha(1).sqrt()) as f32;
        let coef = (s.beta(1) / (1.0 - s.alpha_bar(1)).sqrt()) as f32;
        for ((&x, &e), &want) in x1.data().iter().zip(eps.data()).zip(x0.data()) {
            assert!((inv * (x - coef * e) - want).abs() < 1e-5);
        }
    }

    #[test]
    fn weight_at_first_step_is_beta_one() {
        let s = sched();
        assert!(((1.0 - s.alpha_bar(1)) - s.beta(1)).abs() < 1e-16);
    }

    fn unit_batch(b: usize, seed: u64) -> Tensor<f64> {
        let imgs: Vec<_> = crate::dataset::generate_dataset(b, seed).unwrap();
        crate::dataset::to_batch(&imgs).cast()
    }

    #[test]
    fn oracle_predictor_has_zero_loss() {
        let s = sched();
        let batch = unit_batch(16, 4);
        let mut tape = Tape::<f64>::new();
        let loss = training_loss_with(&mut tape, &batch, &s, &mut Prng::new(5), |tape, x_t, steps, _| {
            let xt = tape.value(x_t).clone();
            let mut eps = xt.clone();
            for (b, &t) in steps.iter().enumerate() {
                let a = s.alpha_bar(t);
                for j in 0..IMAGE_LEN {
                    let k = b * IMAGE_LEN + j;
                    eps.data_mut()[k] = (xt.data()[k] - a.sqrt() * batch.data()[k]) / (1.0 - a).sqrt();
                }
            }
            Ok(tape.constant(eps))
        })
        .unwrap();
        assert!(tape.value(loss).item() < 1e-20);
    }

    #[test]
    fn zero_predictor_loss_is_mean_weight() {
        let s = sched();
        let expected: f64 = (1..=1000).map(|t| 1.0 - s.alpha_bar(t)).sum::<f64>() / 1000.0;
        let batch = unit_batch(2000, 6);
        let mut tape = Tape::<f64>::new();
        let loss = training_loss_with(&mut tape, &batch, &s, &mut Prng::new(7), |tape, x_t, _, _| {
            Ok(tape.constant(Tensor::zeros(tape.shape(x_t))))
        })
        .unwrap();
        let got = tape.value(loss).item();
        assert!((got - expected).abs() < 0.03, "{got} vs {expected}");
    }

    #[test]
    fn model_loss_backpropagates() {
        let s = sched();
        let cfg = ModelConfig::new(BackboneKind::CnnTop1Attn);
        let p = init_model::<f32>(&cfg, 0);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, true);
        let batch = unit_batch(8, 1).cast::<f32>();
        let loss = training_loss(&mut tape, &bound, &cfg, &batch, &s, &mut Prng::new(1)).unwrap();
        assert!(tape.value(loss).item() > 0.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(bound.conv_w).unwrap().data().iter().any(|&g| g != 0.0));
    }

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict(&self, x: &Tensor<f32>, _t: usize) -> Result<Tensor<f32>> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    struct Explode;
    impl NoisePredictor for Explode {
        fn predict(&self, x: &Tensor<f32>, _t: usize) -> Result<Tensor<f32>> {
            Ok(Tensor::full(x.shape(), f32::INFINITY))
        }
    }

    #[test]
    fn sampling_is_seeded_and_chunk_independent() {
        let s = linear_schedule(&DiffusionConfig {
            steps: 50,
            ..Default::default()
        })
        .unwrap();
        let cfg = ModelConfig::new(BackboneKind::CnnFullAttn);
        let p = init_model::<f32>(&cfg, 3);
        let pred = ModelPredictor { params: &p, cfg: &cfg };
        let a = ddpm_sample(&pred, &s, SamplerVariance::Beta, 300, 9).unwrap();
        let b = ddpm_sample(&pred, &s, SamplerVariance::Beta, 300, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 300);
        for img in &a {
            assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // image 260 lives in the second chunk of a 300 run and alone here
        let tail = ddpm_sample(&pred, &s, SamplerVariance::Beta, 261, 9).unwrap();
        assert_eq!(tail[260], a[260]);
        assert_ne!(ddpm_sample(&pred, &s, SamplerVariance::Beta, 5, 10).unwrap()[0], a[0]);
    }

    #[test]
    fn posterior_variance_option_runs() {
        let s = linear_schedule(&DiffusionConfig {
            steps: 20,
            ..Default::default()
        })
        .unwrap();
        assert!(s.sigma(1, SamplerVariance::PosteriorBeta) == 0.0);
        assert!(s.sigma(10, SamplerVariance::PosteriorBeta) < s.sigma(10, SamplerVariance::Beta));
        let out = ddpm_sample(&Zero, &s, SamplerVariance::PosteriorBeta, 4, 1).unwrap();
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn non_finite_state_names_step() {
        let s = linear_schedule(&DiffusionConfig {
            steps: 10,
            ..Default::default()
        })
        .unwrap();
        match ddpm_sample(&Explode, &s, SamplerVariance::Beta, 2, 1) {
            Err(Error::NonFinite { stage }) => assert!(stage.contains("t=10"), "{stage}"),
            other => panic!("{other:?}"),
        }
    }
}
