//! Numerical checks of the attention score-matching derivation, and
//! training-free score machines built from dataset patches.
//!
//! The toy setting: an image is a tuple of `L` slots, each holding one
//! patch from a finite alphabet. A lookup table `g` embeds every patch,
//! and the identity-attention estimator is
//! `s_hat(x) = g(phi_x) + sum_y alpha_xy g(phi_y)` with
//! `alpha_xy = softmax_y <g(phi_x), g(phi_y)>`.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{is_consistent, ConsistencyReport, ImageSample, CHANNELS, IMAGE_LEN, QUADRANTS, SIDE};
use crate::diffusion::{ddpm_sample, NoisePredictor, NoiseSchedule, SamplerVariance};
use crate::error::{ensure, Error, Result};
use crate::numerics::gradcheck::{check_all_ops, conv_adjoint_check, relative_error, GradCheck};
use crate::numerics::{Prng, Tensor};

/// Largest number of images a toy distribution may enumerate.
pub const ENUMERATION_CAP: u128 = 1_000_000;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Attention weights of one query over a set of keys.
pub fn attention_row(query: &[f64], keys: &[Vec<f64>]) -> Vec<f64> {
    softmax(&keys.iter().map(|k| dot(query, k)).collect::<Vec<_>>())
}

fn weighted_mean(weights: &[f64], vectors: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vectors[0].len()];
    for (w, v) in weights.iter().zip(vectors) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

/// Gradient of `alpha_xy` with respect to token `x` in its query role,
/// keys held fixed: `alpha_xy (z_y - mu_x)`.
pub fn attention_weight_grad(tokens: &[Vec<f64>], x: usize, y: usize) -> Result<Vec<f64>> {
    ensure!(tokens.len() >= 2, "need at least two tokens");
    ensure!(x < tokens.len() && y < tokens.len(), "token index out of range");
    let alpha = attention_row(&tokens[x], tokens);
    let mu = weighted_mean(&alpha, tokens);
    Ok(tokens[y].iter().zip(&mu).map(|(z, m)| alpha[y] * (z - m)).collect())
}

/// `max_x || sum_y alpha_xy (z_y - mu_x) ||`, zero up to rounding.
pub fn cancellation_residual(tokens: &[Vec<f64>]) -> Result<f64> {
    ensure!(!tokens.is_empty(), "need at least one token");
    let mut worst: f64 = 0.0;
    for z in tokens {
        let alpha = attention_row(z, tokens);
        let mu = weighted_mean(&alpha, tokens);
        let mut acc = vec![0.0; mu.len()];
        for (a, t) in alpha.iter().zip(tokens) {
            for ((o, v), m) in acc.iter_mut().zip(t).zip(&mu) {
                *o += a * (v - m);
            }
        }
        worst = worst.max(dot(&acc, &acc).sqrt());
    }
    Ok(worst)
}

/// Distribution over images made of `slots` patches from `alphabet`,
/// observed at noise level `alpha_bar`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDistribution {
    alphabet: Vec<Vec<f64>>,
    slots: usize,
    /// Probability per image, indexed in mixed radix (slot 0 most
    /// significant).
    probs: Vec<f64>,
    alpha_bar: f64,
    factorized: bool,
}

fn enumeration_size(patches: usize, slots: usize) -> Result<usize> {
    let size = (patches as u128).checked_pow(slots as u32).unwrap_or(u128::MAX);
    if size > ENUMERATION_CAP {
        return Err(Error::TooLarge {
            size,
            cap: ENUMERATION_CAP,
        });
    }
    Ok(size as usize)
}

impl ToyDistribution {
    /// `probs` may be unnormalized; it is rescaled to sum to one.
    pub fn new(alphabet: Vec<Vec<f64>>, slots: usize, probs: Vec<f64>, alpha_bar: f64) -> Result<Self> {
        ensure!(
            !alphabet.is_empty() && slots >= 1,
            "need a nonempty alphabet and at least one slot"
        );
        let width = alphabet[0].len();
        ensure!(
            width >= 1 && alphabet.iter().all(|p| p.len() == width),
            "patches must share a positive width"
        );
        let size = enumeration_size(alphabet.len(), slots)?;
        ensure!(probs.len() == size, "{} probabilities for {size} images", probs.len());
        ensure!(
            probs.iter().all(|p| p.is_finite() && *p >= 0.0),
            "probabilities must be finite and non-negative"
        );
        let total: f64 = probs.iter().sum();
        ensure!(total > 0.0, "probabilities sum to zero");
        ensure!(alpha_bar > 0.0 && alpha_bar < 1.0, "alpha_bar must lie in (0, 1)");
        Ok(Self {
            alphabet,
            slots,
            probs: probs.into_iter().map(|p| p / total).collect(),
            alpha_bar,
            factorized: false,
        })
    }

    /// Product distribution with the given per-slot marginals (patch
    /// independence).
    pub fn factorized(alphabet: Vec<Vec<f64>>, marginals: &[Vec<f64>], alpha_bar: f64) -> Result<Self> {
        let p = alphabet.len();
        ensure!(
            marginals.iter().all(|m| m.len() == p),
            "every marginal needs {p} entries"
        );
        let size = enumeration_size(p, marginals.len())?;
        let normed: Vec<Vec<f64>> = marginals
            .iter()
            .map(|m| {
                let s: f64 = m.iter().sum();
                m.iter().map(|v| v / s).collect()
            })
            .collect();
        let probs = (0..size)
            .map(|i| {
                digits(i, p, marginals.len())
                    .iter()
                    .zip(&normed)
                    .map(|(&d, m)| m[d])
                    .product()
            })
            .collect();
        let mut dist = Self::new(alphabet, marginals.len(), probs, alpha_bar)?;
        dist.factorized = true;
        Ok(dist)
    }

    /// Random instance with Gaussian patches and Dirichlet-like weights.
    pub fn random(patches: usize, slots: usize, width: usize, alpha_bar: f64, rng: &mut Prng) -> Result<Self> {
        let alphabet = (0..patches)
            .map(|_| (0..width).map(|_| 0.7 * rng.normal()).collect())
            .collect();
        let size = enumeration_size(patches, slots)?;
        let probs = (0..size).map(|_| -rng.uniform().max(1e-12).ln()).collect();
        Self::new(alphabet, slots, probs, alpha_bar)
    }

    pub fn alphabet(&self) -> &[Vec<f64>] {
        &self.alphabet
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn width(&self) -> usize {
        self.alphabet[0].len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn alpha_bar(&self) -> f64 {
        self.alpha_bar
    }

    pub fn is_factorized(&self) -> bool {
        self.factorized
    }

    /// Patch indices of image `i`.
    pub fn image(&self, i: usize) -> Vec<usize> {
        digits(i, self.alphabet.len(), self.slots)
    }

    /// Images with nonzero probability.
    pub fn support(&self) -> Vec<usize> {
        (0..self.probs.len()).filter(|&i| self.probs[i] > 0.0).collect()
    }

    /// `P(phi_x = Phi)` for every slot `x`.
    pub fn slot_marginals(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.alphabet.len()]; self.slots];
        for i in self.support() {
            for (x, d) in self.image(i).into_iter().enumerate() {
                out[x][d] += self.probs[i];
            }
        }
        out
    }

    /// Slot marginals averaged over positions.
    pub fn pooled_marginal(&self) -> Vec<f64> {
        let m = self.slot_marginals();
        (0..self.alphabet.len())
            .map(|p| m.iter().map(|row| row[p]).sum::<f64>() / self.slots as f64)
            .collect()
    }

    /// Exact score of the noised distribution at every supported clean
    /// image, per slot: `sum_j w_j (sqrt(abar) Phi_{j_x} - phi_x) / (1 - abar)`
    /// with posterior weights `w_j` over whole images.
    pub fn scores(&self) -> Vec<(usize, Vec<Vec<f64>>)> {
        let support = self.support();
        let a = self.alpha_bar.sqrt();
        let v = 1.0 - self.alpha_bar;
        let images: Vec<Vec<usize>> = support.iter().map(|&i| self.image(i)).collect();
        images
            .par_iter()
            .zip(&support)
            .map(|(img, &i)| {
                let logw: Vec<f64> = images
                    .iter()
                    .zip(&support)
                    .map(|(other, &j)| {
                        let dist2: f64 = img
                            .iter()
                            .zip(other)
                            .map(|(&p, &q)| {
                                self.alphabet[p]
                                    .iter()
                                    .zip(&self.alphabet[q])
                                    .map(|(u, w)| (u - a * w).powi(2))
                                    .sum::<f64>()
                            })
                            .sum();
                        self.probs[j].ln() - dist2 / (2.0 * v)
                    })
                    .collect();
                let w = softmax(&logw);
                let per_slot = (0..self.slots)
                    .map(|x| {
                        let phi = &self.alphabet[img[x]];
                        let mut s = vec![0.0; phi.len()];
                        for (wj, other) in w.iter().zip(&images) {
                            for ((o, c), p) in s.iter_mut().zip(&self.alphabet[other[x]]).zip(phi) {
                                *o += wj * (a * c - p) / v;
                            }
                        }
                        s
                    })
                    .collect();
                (i, per_slot)
            })
            .collect()
    }
}

fn digits(mut i: usize, base: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for slot in (0..len).rev() {
        out[slot] = i % base;
        i /= base;
    }
    out
}

/// Embedding table, one row per alphabet patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTable {
    pub rows: Vec<Vec<f64>>,
    pub mean_centered: bool,
}

impl PatchTable {
    pub fn zeros(patches: usize, width: usize) -> Self {
        Self {
            rows: vec![vec![0.0; width]; patches],
            mean_centered: false,
        }
    }

    pub fn random(patches: usize, width: usize, scale: f64, rng: &mut Prng) -> Self {
        Self {
            rows: (0..patches)
                .map(|_| (0..width).map(|_| scale * rng.normal()).collect())
                .collect(),
            mean_centered: false,
        }
    }

    /// Subtracts the `marginal`-weighted mean row, enforcing
    /// `sum_Phi marginal(Phi) g(Phi) = 0`.
    pub fn center(&mut self, marginal: &[f64]) {
        let total: f64 = marginal.iter().sum();
        let mean = weighted_mean(&marginal.iter().map(|m| m / total).collect::<Vec<_>>(), &self.rows);
        for row in &mut self.rows {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        self.mean_centered = true;
    }
}

/// Score estimator built from a patch table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    /// `s_hat(x) = g(phi_x)`, the purely convolutional form.
    Local,
    /// `s_hat(x) = g(phi_x) + sum_y alpha_xy g(phi_y)`.
    IdentityAttention,
}

/// Which terms of the analytic gradient to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientForm {
    /// The complete derivative.
    Full,
    /// Drops the query-side term `sum_y alpha_xy z_y (z_y - mu_x)^T r_x`,
    /// i.e. assumes it cancels because `sum_y alpha_xy (z_y - mu_x) = 0`.
    WithoutQueryCovariance,
}

struct ImageTerms {
    z: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    mu: Vec<Vec<f64>>,
    residual: Vec<Vec<f64>>,
}

fn image_terms(table: &PatchTable, img: &[usize], target: &[Vec<f64>], estimator: Estimator) -> ImageTerms {
    let z: Vec<Vec<f64>> = img.iter().map(|&p| table.rows[p].clone()).collect();
    let (alpha, mu): (Vec<_>, Vec<_>) = match estimator {
        Estimator::Local => (Vec::new(), Vec::new()),
        Estimator::IdentityAttention => z
            .iter()
            .map(|zx| {
                let a = attention_row(zx, &z);
                let m = weighted_mean(&a, &z);
                (a, m)
            })
            .unzip(),
    };
    let residual = (0..z.len())
        .map(|x| {
            (0..z[x].len())
                .map(|k| {
                    let attn = if estimator == Estimator::Local { 0.0 } else { mu[x][k] };
                    z[x][k] + attn - target[x][k]
                })
                .collect()
        })
        .collect();
    ImageTerms { z, alpha, mu, residual }
}

fn check_table(table: &PatchTable, dist: &ToyDistribution) -> Result<()> {
    ensure!(
        table.rows.len() == dist.alphabet().len(),
        "table has {} rows for {} patches",
        table.rows.len(),
        dist.alphabet().len()
    );
    ensure!(
        table.rows.iter().all(|r| r.len() == dist.width()),
        "embedding width must equal the patch width {}",
        dist.width()
    );
    Ok(())
}

/// `L(g) = sum_i pi_i sum_x || s_hat(x) - s(x) ||^2` by enumeration.
pub fn enumerated_loss(table: &PatchTable, dist: &ToyDistribution, estimator: Estimator) -> Result<f64> {
    check_table(table, dist)?;
    Ok(loss_with_scores(table, dist, &dist.scores(), estimator))
}

fn loss_with_scores(
    table: &PatchTable,
    dist: &ToyDistribution,
    scores: &[(usize, Vec<Vec<f64>>)],
    estimator: Estimator,
) -> f64 {
    scores
        .iter()
        .map(|(i, s)| {
            let terms = image_terms(table, &dist.image(*i), s, estimator);
            dist.probs()[*i] * terms.residual.iter().map(|r| dot(r, r)).sum::<f64>()
        })
        .sum()
}

/// `dL/dg(Phi)` for every table row, by enumeration of the analytic
/// expression.
pub fn functional_gradient_all(
    table: &PatchTable,
    dist: &ToyDistribution,
    estimator: Estimator,
    form: GradientForm,
) -> Result<Vec<Vec<f64>>> {
    check_table(table, dist)?;
    Ok(gradient_with_scores(table, dist, &dist.scores(), estimator, form))
}

fn gradient_with_scores(
    table: &PatchTable,
    dist: &ToyDistribution,
    scores: &[(usize, Vec<Vec<f64>>)],
    estimator: Estimator,
    form: GradientForm,
) -> Vec<Vec<f64>> {
    let width = dist.width();
    let mut grad = vec![vec![0.0; width]; table.rows.len()];
    for (i, s) in scores {
        let img = dist.image(*i);
        let t = image_terms(table, &img, s, estimator);
        let pi = dist.probs()[*i];
        let n = img.len();
        for w in 0..n {
            // query side
            let mut gw = t.residual[w].clone();
            if estimator == Estimator::IdentityAttention {
                if form == GradientForm::Full {
                    for y in 0..n {
                        let centered: Vec<f64> = t.z[y].iter().zip(&t.mu[w]).map(|(a, b)| a - b).collect();
                        let c = t.alpha[w][y] * dot(&centered, &t.residual[w]);
                        for (g, v) in gw.iter_mut().zip(&centered) {
                            *g += c * v;
                        }
                    }
                }
                // key and value side
                for x in 0..n {
                    let a = t.alpha[x][w];
                    let key: Vec<f64> = t.z[w].iter().zip(&t.mu[x]).map(|(p, q)| p - q).collect();
                    let c = a * dot(&key, &t.residual[x]);
                    for k in 0..width {
                        gw[k] += a * t.residual[x][k] + c * t.z[x][k];
                    }
                }
            }
            for (g, v) in grad[img[w]].iter_mut().zip(&gw) {
                *g += 2.0 * pi * v;
            }
        }
    }
    grad
}

/// `dL/dg(Phi)` for the identity-attention estimator at `target_patch`.
pub fn functional_gradient(table: &PatchTable, dist: &ToyDistribution, target_patch: usize) -> Result<Vec<f64>> {
    ensure!(
        target_patch < table.rows.len(),
        "patch {target_patch} outside the table"
    );
    Ok(
        functional_gradient_all(table, dist, Estimator::IdentityAttention, GradientForm::Full)?
            .swap_remove(target_patch),
    )
}

/// Central differences of [`enumerated_loss`] over every table entry.
pub fn finite_difference_gradient(
    table: &PatchTable,
    dist: &ToyDistribution,
    estimator: Estimator,
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    check_table(table, dist)?;
    let scores = dist.scores();
    let mut work = table.clone();
    let mut out = vec![vec![0.0; dist.width()]; table.rows.len()];
    for p in 0..table.rows.len() {
        for k in 0..dist.width() {
            let base = table.rows[p][k];
            work.rows[p][k] = base + h;
            let up = loss_with_scores(&work, dist, &scores, estimator);
            work.rows[p][k] = base - h;
            let down = loss_with_scores(&work, dist, &scores, estimator);
            work.rows[p][k] = base;
            out[p][k] = (up - down) / (2.0 * h);
        }
    }
    Ok(out)
}

/// `E[s(x) | phi_x = Phi]` pooled over positions, the minimizer of the
/// local loss. `None` for patches that never occur.
pub fn local_patch_optimum(dist: &ToyDistribution) -> Vec<Option<Vec<f64>>> {
    let p = dist.alphabet().len();
    let mut mass = vec![0.0; p];
    let mut acc = vec![vec![0.0; dist.width()]; p];
    for (i, s) in dist.scores() {
        let pi = dist.probs()[i];
        for (x, d) in dist.image(i).into_iter().enumerate() {
            mass[d] += pi;
            for (a, v) in acc[d].iter_mut().zip(&s[x]) {
                *a += pi * v;
            }
        }
    }
    mass.into_iter()
        .zip(acc)
        .map(|(m, a)| (m > 0.0).then(|| a.into_iter().map(|v| v / m).collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalOptimum {
    pub table: PatchTable,
    pub closed_form: Vec<Option<Vec<f64>>>,
    /// Max-norm gap between descent result and closed form over occurring
    /// patches.
    pub max_abs_err: f64,
    pub iterations: usize,
}

/// Gradient descent on the local loss from a zero table. Fails with the
/// remaining gap if the budget runs out before it is below `1e-3`.
pub fn recover_local_optimum(dist: &ToyDistribution) -> Result<LocalOptimum> {
    const BUDGET: usize = 100_000;
    const TOL: f64 = 1e-3;
    let scores = dist.scores();
    let p = dist.alphabet().len();
    let mut table = PatchTable::zeros(p, dist.width());
    // the local loss is a diagonal quadratic with curvature 2 * mass(Phi)
    let mut mass = vec![0.0; p];
    for (i, _) in &scores {
        for d in dist.image(*i) {
            mass[d] += dist.probs()[*i];
        }
    }
    let lr = 0.5 / (2.0 * mass.iter().cloned().fold(0.0, f64::max));
    let closed_form = local_patch_optimum(dist);
    let gap = |table: &PatchTable| {
        closed_form
            .iter()
            .zip(&table.rows)
            .filter_map(|(c, r)| {
                c.as_ref()
                    .map(|c| c.iter().zip(r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            })
            .fold(0.0, f64::max)
    };
    let mut iterations = 0;
    while iterations < BUDGET {
        let grad = gradient_with_scores(&table, dist, &scores, Estimator::Local, GradientForm::Full);
        let step: f64 = grad.iter().flatten().map(|g| g.abs()).fold(0.0, f64::max);
        for (row, g) in table.rows.iter_mut().zip(&grad) {
            for (v, gv) in row.iter_mut().zip(g) {
                *v -= lr * gv;
            }
        }
        iterations += 1;
        if step * lr < 1e-14 {
            break;
        }
    }
    let max_abs_err = gap(&table);
    if max_abs_err > TOL {
        return Err(Error::contract(format!(
            "local optimum not reached after {iterations} iterations, residual {max_abs_err:e}"
        )));
    }
    Ok(LocalOptimum {
        table,
        closed_form,
        max_abs_err,
        iterations,
    })
}

/// Distinct dataset patches with multiplicities, in the `[-1, 1]` domain.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLibrary {
    pub patches: Vec<[f64; PATCH_LEN]>,
    pub counts: Vec<usize>,
}

pub const PATCH_LEN: usize = CHANNELS * 4;

/// Quadrant `q` of a `[3,4,4]` channel-major image as a 12-vector.
fn extract_patch(image: &[f64], q: usize) -> [f64; PATCH_LEN] {
    let (r0, c0) = QUADRANTS[q];
    let mut out = [0.0; PATCH_LEN];
    let mut k = 0;
    for c in 0..CHANNELS {
        for dr in 0..2 {
            for dc in 0..2 {
                out[k] = image[c * SIDE * SIDE + (r0 + dr) * SIDE + c0 + dc];
                k += 1;
            }
        }
    }
    out
}

fn insert_patch(image: &mut [f64], q: usize, patch: &[f64; PATCH_LEN]) {
    let (r0, c0) = QUADRANTS[q];
    let mut k = 0;
    for c in 0..CHANNELS {
        for dr in 0..2 {
            for dc in 0..2 {
                image[c * SIDE * SIDE + (r0 + dr) * SIDE + c0 + dc] = patch[k];
                k += 1;
            }
        }
    }
}

impl PatchLibrary {
    /// Pools all four quadrant blocks of every image.
    pub fn from_images(images: &[ImageSample]) -> Result<Self> {
        ensure!(!images.is_empty(), "patch library needs at least one image");
        let mut patches: Vec<[f64; PATCH_LEN]> = Vec::new();
        let mut counts = Vec::new();
        for img in images {
            let x: Vec<f64> = img.to_diffusion().data().iter().map(|&v| v as f64).collect();
            for q in 0..4 {
                let p = extract_patch(&x, q);
                match patches.iter().position(|e| *e == p) {
                    Some(i) => counts[i] += 1,
                    None => {
                        patches.push(p);
                        counts.push(1);
                    }
                }
            }
        }
        Ok(Self { patches, counts })
    }
}

/// Score of `sum_j c_j N(phi; sqrt(abar) center_j, (1 - abar) I)`.
fn mixture_score(phi: &[f64], centers: &[&[f64]], counts: &[usize], alpha_bar: f64) -> Vec<f64> {
    let a = alpha_bar.sqrt();
    let v = 1.0 - alpha_bar;
    let logw: Vec<f64> = centers
        .iter()
        .zip(counts)
        .map(|(c, &n)| {
            let d2: f64 = phi.iter().zip(c.iter()).map(|(p, q)| (p - a * q).powi(2)).sum();
            (n as f64).ln() - d2 / (2.0 * v)
        })
        .collect();
    let w = softmax(&logw);
    let mut s = vec![0.0; phi.len()];
    for (wj, c) in w.iter().zip(centers) {
        for ((o, q), p) in s.iter_mut().zip(c.iter()).zip(phi) {
            *o += wj * (a * q - p) / v;
        }
    }
    s
}

/// Score of the Gaussian-smoothed patch mixture at `phi`.
pub fn local_patch_score(phi: &[f64], library: &PatchLibrary, t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    ensure!(phi.len() == PATCH_LEN, "patch must have {PATCH_LEN} values");
    ensure!(
        (1..=sched.steps()).contains(&t),
        "timestep {t} outside 1..={}",
        sched.steps()
    );
    Ok(patch_score_at(phi, library, sched.alpha_bar(t)))
}

fn patch_score_at(phi: &[f64], library: &PatchLibrary, alpha_bar: f64) -> Vec<f64> {
    let centers: Vec<&[f64]> = library.patches.iter().map(|p| p.as_slice()).collect();
    mixture_score(phi, &centers, &library.counts, alpha_bar)
}

/// Partner of quadrant `x`: the other quadrant with the largest raw-pixel
/// inner product, ties to the smallest index.
pub fn top1_partner(patches: &[[f64; PATCH_LEN]; 4], x: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_score = f64::NEG_INFINITY;
    for y in (0..4).filter(|&y| y != x) {
        let s = dot(&patches[x], &patches[y]);
        if s > best_score {
            best = y;
            best_score = s;
        }
    }
    best
}

/// Per-quadrant `s_loc(phi_x) + s_loc(phi_{y*(x)})` for a `[3,4,4]` image.
pub fn top1_score(image_t: &[f64], library: &PatchLibrary, t: usize, sched: &NoiseSchedule) -> Result<[Vec<f64>; 4]> {
    ensure!(image_t.len() == IMAGE_LEN, "image must have {IMAGE_LEN} values");
    ensure!(
        (1..=sched.steps()).contains(&t),
        "timestep {t} outside 1..={}",
        sched.steps()
    );
    Ok(top1_at(image_t, library, sched.alpha_bar(t)))
}

fn top1_at(image: &[f64], library: &PatchLibrary, alpha_bar: f64) -> [Vec<f64>; 4] {
    let patches = [0, 1, 2, 3].map(|q| extract_patch(image, q));
    let local = patches.map(|p| patch_score_at(&p, library, alpha_bar));
    [0, 1, 2, 3].map(|x| {
        let y = top1_partner(&patches, x);
        local[x].iter().zip(&local[y]).map(|(a, b)| a + b).collect()
    })
}

/// Training-free score machines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnalyticMode {
    /// Each quadrant follows its own patch-mixture score.
    Local,
    /// Each quadrant adds the local score of its top-1 partner.
    Top1,
}

impl AnalyticMode {
    pub fn name(self) -> &'static str {
        match self {
            AnalyticMode::Local => "local",
            AnalyticMode::Top1 => "top1",
        }
    }
}

impl std::str::FromStr for AnalyticMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "local" => Ok(AnalyticMode::Local),
            "top1" => Ok(AnalyticMode::Top1),
            _ => Err(Error::contract(format!("unknown analytic mode '{s}'"))),
        }
    }
}

/// Converts a score field into a noise predictor:
/// `eps_hat = -sqrt(1 - abar_t) score`.
pub struct ScorePredictor<'a> {
    sched: &'a NoiseSchedule,
    field: ScoreField<'a>,
}

enum ScoreField<'a> {
    Patches(AnalyticMode, &'a PatchLibrary),
    Images(&'a [[f64; IMAGE_LEN]]),
}

impl<'a> ScorePredictor<'a> {
    pub fn patches(mode: AnalyticMode, library: &'a PatchLibrary, sched: &'a NoiseSchedule) -> Self {
        Self {
            sched,
            field: ScoreField::Patches(mode, library),
        }
    }

    /// Exact score of the smoothed empirical distribution of whole images:
    /// the ideal denoiser for that training set.
    pub fn images(images: &'a [[f64; IMAGE_LEN]], sched: &'a NoiseSchedule) -> Self {
        Self {
            sched,
            field: ScoreField::Images(images),
        }
    }

    fn score(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        match self.field {
            ScoreField::Images(images) => {
                let centers: Vec<&[f64]> = images.iter().map(|i| i.as_slice()).collect();
                mixture_score(x, &centers, &vec![1; centers.len()], alpha_bar)
            }
            ScoreField::Patches(mode, library) => {
                let per_quadrant = match mode {
                    AnalyticMode::Local => {
                        [0, 1, 2, 3].map(|q| patch_score_at(&extract_patch(x, q), library, alpha_bar))
                    }
                    AnalyticMode::Top1 => top1_at(x, library, alpha_bar),
                };
                let mut out = vec![0.0; IMAGE_LEN];
                for (q, s) in per_quadrant.iter().enumerate() {
                    insert_patch(&mut out, q, s.as_slice().try_into().expect("patch length"));
                }
                out
            }
        }
    }
}

impl NoisePredictor for ScorePredictor<'_> {
    fn predict(&self, x_t: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        ensure!((1..=self.sched.steps()).contains(&t), "timestep {t} outside schedule");
        let alpha_bar = self.sched.alpha_bar(t);
        let scale = -(1.0 - alpha_bar).sqrt();
        let mut out = Vec::with_capacity(x_t.numel());
        for img in x_t.data().chunks_exact(IMAGE_LEN) {
            let x: Vec<f64> = img.iter().map(|&v| v as f64).collect();
            out.extend(self.score(&x, alpha_bar).into_iter().map(|s| (scale * s) as f32));
        }
        Tensor::new(x_t.shape(), out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticRun {
    pub samples: Vec<ImageSample>,
    pub report: ConsistencyReport,
}

/// Runs the ancestral sampler on an analytic score. Run `r` uses
/// `Prng::child_seed(seed, r)`; `samples` holds the first run.
pub fn analytic_sample(
    mode: AnalyticMode,
    dataset: &[ImageSample],
    sched: &NoiseSchedule,
    variance: SamplerVariance,
    samples_per_run: usize,
    runs: usize,
    seed: u64,
) -> Result<AnalyticRun> {
    ensure!(samples_per_run >= 1 && runs >= 1, "sample counts must be positive");
    let library = PatchLibrary::from_images(dataset)?;
    let predictor = ScorePredictor::patches(mode, &library, sched);
    let mut first = Vec::new();
    let mut counts = Vec::with_capacity(runs);
    for run in 0..runs {
        let images = ddpm_sample(
            &predictor,
            sched,
            variance,
            samples_per_run,
            Prng::child_seed(seed, run as u64),
        )?;
        counts.push(images.iter().filter(|i| is_consistent(i)).count());
        if run == 0 {
            first = images;
        }
    }
    Ok(AnalyticRun {
        samples: first,
        report: ConsistencyReport::from_counts(samples_per_run, counts),
    })
}

/// One-sided two-proportion z-test of `p_a > p_b`; returns `(z, p_value)`.
pub fn one_sided_proportion_test(success_a: usize, n_a: usize, success_b: usize, n_b: usize) -> (f64, f64) {
    let pa = success_a as f64 / n_a as f64;
    let pb = success_b as f64 / n_b as f64;
    let pooled = (success_a + success_b) as f64 / (n_a + n_b) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n_a as f64 + 1.0 / n_b as f64)).sqrt();
    if se == 0.0 {
        return (0.0, if pa > pb { 0.0 } else { 1.0 });
    }
    let z = (pa - pb) / se;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (z, 1.0 - normal.cdf(z))
}

/// One line of the verification CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct VerificationRow {
    pub check: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub pass: bool,
    /// Reported for reference only; never fails the suite.
    pub informational: bool,
}

impl VerificationRow {
    fn new(check: &str, instances: usize, max_rel_err: f64, tol: f64) -> Self {
        Self {
            check: check.to_string(),
            instances,
            max_rel_err,
            pass: max_rel_err < tol,
            informational: false,
        }
    }
}

pub fn verification_csv(rows: &[VerificationRow]) -> String {
    let mut out = String::from("check,instances,max_rel_err,pass\n");
    for r in rows {
        out.push_str(&format!("{},{},{:e},{}\n", r.check, r.instances, r.max_rel_err, r.pass));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerificationConfig {
    pub op_instances: usize,
    pub identity_instances: usize,
    pub distributions: usize,
    pub seed: u64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            op_instances: 100,
            identity_instances: 1000,
            distributions: 20,
            seed: 0,
        }
    }
}

fn random_tokens(rng: &mut Prng) -> Vec<Vec<f64>> {
    let n = 2 + rng.below(5);
    let d = 1 + rng.below(6);
    (0..n).map(|_| (0..d).map(|_| 0.5 * rng.normal()).collect()).collect()
}

fn attention_grad_error(tokens: &[Vec<f64>], x: usize, y: usize) -> f64 {
    let analytic = attention_weight_grad(tokens, x, y).expect("valid tokens");
    // perturb the query copy of z_x only; fourth-order stencil
    let h = 1e-3;
    let numeric: Vec<f64> = (0..tokens[x].len())
        .map(|k| {
            let at = |offset: f64| {
                let mut q = tokens[x].clone();
                q[k] += offset;
                attention_row(&q, tokens)[y]
            };
            (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
        })
        .collect();
    relative_error(&analytic, &numeric)
}

fn random_toy(rng: &mut Prng) -> Result<(ToyDistribution, PatchTable)> {
    let p = 2 + rng.below(3);
    let l = 2 + rng.below(2);
    let d = 1 + rng.below(3);
    let alpha_bar = 0.2 + 0.7 * rng.uniform();
    let dist = ToyDistribution::random(p, l, d, alpha_bar, rng)?;
    let table = PatchTable::random(p, d, 0.8, rng);
    Ok((dist, table))
}

/// Runs every derivation and numerics identity.
pub fn verification_suite(cfg: &VerificationConfig) -> Result<Vec<VerificationRow>> {
    let mut rows: Vec<VerificationRow> = check_all_ops(cfg.op_instances, cfg.seed)?
        .into_iter()
        .map(
            |GradCheck {
                 name,
                 instances,
                 max_rel_err,
             }| VerificationRow::new(&format!("op_{name}"), instances, max_rel_err, 1e-6),
        )
        .collect();
    rows.push(VerificationRow::new(
        "conv_deconv_adjoint",
        cfg.op_instances,
        conv_adjoint_check(cfg.op_instances, cfg.seed)?,
        1e-10,
    ));

    let sweep: Vec<(f64, f64, f64)> = (0..cfg.identity_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = Prng::child(cfg.seed ^ 0xa77e, i as u64);
            let tokens = random_tokens(&mut rng);
            let x = rng.below(tokens.len());
            let y = rng.below(tokens.len());
            let grad_err = attention_grad_error(&tokens, x, y);
            let row_sum = (0..tokens.len())
                .map(|y| attention_weight_grad(&tokens, x, y).expect("valid tokens"))
                .fold(vec![0.0; tokens[0].len()], |acc, g| {
                    acc.iter().zip(&g).map(|(a, b)| a + b).collect()
                });
            let row_sum = dot(&row_sum, &row_sum).sqrt();
            let residual = cancellation_residual(&tokens).expect("nonempty");
            (grad_err, row_sum, residual)
        })
        .collect();
    let worst = |f: fn(&(f64, f64, f64)) -> f64| sweep.iter().map(f).fold(0.0, f64::max);
    rows.push(VerificationRow::new(
        "attention_weight_grad",
        cfg.identity_instances,
        worst(|s| s.0),
        1e-8,
    ));
    rows.push(VerificationRow::new(
        "softmax_jacobian_rows_sum_zero",
        cfg.identity_instances,
        worst(|s| s.1),
        1e-12,
    ));
    rows.push(VerificationRow::new(
        "cancellation_residual",
        cfg.identity_instances,
        worst(|s| s.2),
        1e-12,
    ));

    let mut full_err: f64 = 0.0;
    let mut partial_err: f64 = 0.0;
    let mut local_err: f64 = 0.0;
    for i in 0..cfg.distributions {
        let mut rng = Prng::child(cfg.seed ^ 0xf00d, i as u64);
        let (dist, table) = random_toy(&mut rng)?;
        let numeric = finite_difference_gradient(&table, &dist, Estimator::IdentityAttention, 1e-5)?;
        let flat = |g: Vec<Vec<f64>>| g.into_iter().flatten().collect::<Vec<f64>>();
        let numeric = flat(numeric);
        let full = flat(functional_gradient_all(
            &table,
            &dist,
            Estimator::IdentityAttention,
            GradientForm::Full,
        )?);
        let partial = flat(functional_gradient_all(
            &table,
            &dist,
            Estimator::IdentityAttention,
            GradientForm::WithoutQueryCovariance,
        )?);
        full_err = full_err.max(relative_error(&full, &numeric));
        partial_err = partial_err.max(relative_error(&partial, &numeric));
        let local_numeric = flat(finite_difference_gradient(&table, &dist, Estimator::Local, 1e-5)?);
        let local = flat(functional_gradient_all(
            &table,
            &dist,
            Estimator::Local,
            GradientForm::Full,
        )?);
        local_err = local_err.max(relative_error(&local, &local_numeric));
    }
    rows.push(VerificationRow::new(
        "functional_gradient",
        cfg.distributions,
        full_err,
        1e-6,
    ));
    rows.push(VerificationRow::new(
        "functional_gradient_local",
        cfg.distributions,
        local_err,
        1e-6,
    ));
    let mut printed = VerificationRow::new(
        "functional_gradient_without_query_covariance",
        cfg.distributions,
        partial_err,
        1e-6,
    );
    printed.informational = true;
    rows.push(printed);

    let mut score_err: f64 = 0.0;
    for i in 0..cfg.distributions {
        let mut rng = Prng::child(cfg.seed ^ 0x5c0e, i as u64);
        score_err = score_err.max(local_score_fd_error(&mut rng));
    }
    rows.push(VerificationRow::new(
        "local_patch_score",
        cfg.distributions,
        score_err,
        1e-6,
    ));

    let mut optimum_err: f64 = 0.0;
    for i in 0..cfg.distributions {
        let mut rng = Prng::child(cfg.seed ^ 0x0b7, i as u64);
        let (dist, _) = random_toy(&mut rng)?;
        optimum_err = optimum_err.max(
            recover_local_optimum(&dist)
                .map(|o| o.max_abs_err)
                .unwrap_or(f64::INFINITY),
        );
    }
    rows.push(VerificationRow::new(
        "local_optimum_recovery",
        cfg.distributions,
        optimum_err,
        1e-3,
    ));
    Ok(rows)
}

/// Central differences of the log patch mixture versus its score.
fn local_score_fd_error(rng: &mut Prng) -> f64 {
    let n = 1 + rng.below(6);
    let library = PatchLibrary {
        patches: (0..n)
            .map(|_| [0.0; PATCH_LEN].map(|_| rng.normal().clamp(-1.0, 1.0)))
            .collect(),
        counts: (0..n).map(|_| 1 + rng.below(5)).collect(),
    };
    let alpha_bar = 0.05 + 0.9 * rng.uniform();
    let phi: Vec<f64> = (0..PATCH_LEN).map(|_| rng.normal()).collect();
    let log_mixture = |x: &[f64]| {
        let a = alpha_bar.sqrt();
        let v = 1.0 - alpha_bar;
        let terms: Vec<f64> = library
            .patches
            .iter()
            .zip(&library.counts)
            .map(|(c, &k)| (k as f64).ln() - x.iter().zip(c).map(|(p, q)| (p - a * q).powi(2)).sum::<f64>() / (2.0 * v))
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    };
    let analytic = patch_score_at(&phi, &library, alpha_bar);
    let h = 1e-5;
    let numeric: Vec<f64> = (0..PATCH_LEN)
        .map(|k| {
            let mut x = phi.clone();
            x[k] += h;
            let up = log_mixture(&x);
            x[k] -= 2.0 * h;
            (up - log_mixture(&x)) / (2.0 * h)
        })
        .collect();
    relative_error(&analytic, &numeric)
}
