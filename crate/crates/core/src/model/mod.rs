//! Noise-predictor backbones.
//!
//! All four variants share `conv2x2_s2 -> ReLU -> [attention] ->
//! deconv2x2_s2`. The hidden map is 32x2x2, so the attention block sees
//! four tokens of width 32, one per image quadrant.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, NamedTensor};

use crate::error::{ensure, Error, Result};
use crate::numerics::{GumbelOptions, Prng, Scalar, Tape, Tensor, Var};

pub const HIDDEN: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    Cnn,
    CnnFullAttn,
    CnnIdentityAttn,
    CnnTop1Attn,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 4] = [
        BackboneKind::Cnn,
        BackboneKind::CnnFullAttn,
        BackboneKind::CnnIdentityAttn,
        BackboneKind::CnnTop1Attn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Cnn => "cnn",
            BackboneKind::CnnFullAttn => "cnn_full_attn",
            BackboneKind::CnnIdentityAttn => "cnn_identity_attn",
            BackboneKind::CnnTop1Attn => "cnn_top1_attn",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown backbone code {code}")))
    }

    pub fn has_attention(self) -> bool {
        self != BackboneKind::Cnn
    }

    /// Whether Wq, Wk, Wv are learned.
    pub fn learnable_attention(self) -> bool {
        matches!(self, BackboneKind::CnnFullAttn | BackboneKind::CnnTop1Attn)
    }

    /// Attention logit scale: `1/sqrt(d)` with learned projections, 1 for
    /// the identity form.
    pub fn default_scale(self) -> f64 {
        if self.learnable_attention() {
            1.0 / (HIDDEN as f64).sqrt()
        } else {
            1.0
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown model kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    /// Overrides [`BackboneKind::default_scale`] when set.
    pub scale: Option<f64>,
    pub residual: bool,
    pub gumbel_temperature: f64,
    pub gumbel_hard: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            scale: None,
            residual: true,
            gumbel_temperature: 1.0,
            gumbel_hard: true,
        }
    }
}

impl AttentionConfig {
    pub fn scale_for(&self, kind: BackboneKind) -> f64 {
        self.scale.unwrap_or_else(|| kind.default_scale())
    }
}

/// Architecture choices that are not learned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: BackboneKind,
    pub attention: AttentionConfig,
    /// Learned per-timestep channel bias on the hidden map; 0 disables it.
    pub time_bias_steps: usize,
}

impl ModelConfig {
    pub fn new(kind: BackboneKind) -> Self {
        Self {
            kind,
            attention: AttentionConfig::default(),
            time_bias_steps: 0,
        }
    }
}

/// Learnable tensors of one backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub kind: BackboneKind,
    /// `[32, 3, 2, 2]`
    pub conv_w: Tensor<T>,
    pub conv_b: Tensor<T>,
    /// `[32, 3, 2, 2]` laid out as `[C_in, C_out, 2, 2]`.
    pub deconv_w: Tensor<T>,
    pub deconv_b: Tensor<T>,
    pub wq: Option<Tensor<T>>,
    pub wk: Option<Tensor<T>>,
    pub wv: Option<Tensor<T>>,
    /// `[T, 32]`, row `t-1` is added at timestep `t`.
    pub time_bias: Option<Tensor<T>>,
}

/// Deterministic initialization: conv kernels uniform in
/// `±sqrt(1/fan_in)`, attention projections Xavier-uniform, biases zero.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ModelParams<T> {
    let mut rng = Prng::new(seed);
    let fan_in = (IMAGE_CHANNELS * 4) as f64;
    let conv_w = Tensor::uniform(&[HIDDEN, IMAGE_CHANNELS, 2, 2], (1.0 / fan_in).sqrt(), &mut rng);
    // deconv fan-in follows the [C_in, C_out, kh, kw] convention: C_out * kh * kw
    let deconv_w = Tensor::uniform(&[HIDDEN, IMAGE_CHANNELS, 2, 2], (1.0 / fan_in).sqrt(), &mut rng);
    let xavier = (6.0 / (2 * HIDDEN) as f64).sqrt();
    let mut proj = || Some(Tensor::uniform(&[HIDDEN, HIDDEN], xavier, &mut rng));
    let (wq, wk, wv) = if cfg.kind.learnable_attention() {
        (proj(), proj(), proj())
    } else {
        (None, None, None)
    };
    ModelParams {
        kind: cfg.kind,
        conv_w,
        conv_b: Tensor::zeros(&[HIDDEN]),
        deconv_w,
        deconv_b: Tensor::zeros(&[IMAGE_CHANNELS]),
        wq,
        wk,
        wv,
        time_bias: (cfg.time_bias_steps > 0).then(|| Tensor::zeros(&[cfg.time_bias_steps, HIDDEN])),
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![
            ("conv.weight", &self.conv_w),
            ("conv.bias", &self.conv_b),
            ("deconv.weight", &self.deconv_w),
            ("deconv.bias", &self.deconv_b),
        ];
        for (name, t) in [
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("time_bias", &self.time_bias),
        ] {
            if let Some(t) = t {
                out.push((name, t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.deconv_w,
            &mut self.deconv_b,
        ];
        for t in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.time_bias] {
            if let Some(t) = t.as_mut() {
                out.push(t);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let c = |t: &Option<Tensor<T>>| t.as_ref().map(Tensor::cast);
        ModelParams {
            kind: self.kind,
            conv_w: self.conv_w.cast(),
            conv_b: self.conv_b.cast(),
            deconv_w: self.deconv_w.cast(),
            deconv_b: self.deconv_b.cast(),
            wq: c(&self.wq),
            wk: c(&self.wk),
            wv: c(&self.wv),
            time_bias: c(&self.time_bias),
        }
    }

    /// Rebuilds parameters from named tensors, validating shapes.
    pub fn from_named(kind: BackboneKind, tensors: &[(String, Tensor<T>)]) -> Result<Self> {
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        let need = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = find(name).ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "tensor '{name}' has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let proj = |name: &str| -> Result<Option<Tensor<T>>> {
            if kind.learnable_attention() {
                need(name, &[HIDDEN, HIDDEN]).map(Some)
            } else {
                Ok(None)
            }
        };
        let time_bias = match find("time_bias") {
            Some(t) if t.rank() == 2 && t.shape()[1] == HIDDEN => Some(t),
            Some(t) => return Err(Error::Format(format!("time_bias has shape {:?}", t.shape()))),
            None => None,
        };
        Ok(Self {
            kind,
            conv_w: need("conv.weight", &[HIDDEN, IMAGE_CHANNELS, 2, 2])?,
            conv_b: need("conv.bias", &[HIDDEN])?,
            deconv_w: need("deconv.weight", &[HIDDEN, IMAGE_CHANNELS, 2, 2])?,
            deconv_b: need("deconv.bias", &[IMAGE_CHANNELS])?,
            wq: proj("attn.wq")?,
            wk: proj("attn.wk")?,
            wv: proj("attn.wv")?,
            time_bias,
        })
    }

    /// Places every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundParams {
            conv_w: put(&self.conv_w),
            conv_b: put(&self.conv_b),
            deconv_w: put(&self.deconv_w),
            deconv_b: put(&self.deconv_b),
            wq: self.wq.as_ref().map(&mut put),
            wk: self.wk.as_ref().map(&mut put),
            wv: self.wv.as_ref().map(&mut put),
            time_bias: self.time_bias.as_ref().map(&mut put),
        }
    }
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Clone, Copy, Debug)]
pub struct BoundParams {
    pub conv_w: Var,
    pub conv_b: Var,
    pub deconv_w: Var,
    pub deconv_b: Var,
    pub wq: Option<Var>,
    pub wk: Option<Var>,
    pub wv: Option<Var>,
    pub time_bias: Option<Var>,
}

impl BoundParams {
    /// Same order as [`ModelParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.conv_w, self.conv_b, self.deconv_w, self.deconv_b];
        out.extend([self.wq, self.wk, self.wv, self.time_bias].into_iter().flatten());
        out
    }
}

/// Source of Gumbel noise for the top-1 backbone. `None` selects the
/// noise-free argmax.
pub type GumbelSource<'a> = Option<&'a mut Prng>;

/// Attention over `[B, 4, 32]` tokens for every kind except CNN.
pub fn attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    bound: &BoundParams,
    kind: BackboneKind,
    cfg: &AttentionConfig,
    rng: GumbelSource<'_>,
) -> Result<Var> {
    let scale = cfg.scale_for(kind);
    ensure!(scale > 0.0, "attention scale must be positive");
    match kind {
        BackboneKind::Cnn => Err(Error::contract("the CNN backbone has no attention block")),
        BackboneKind::CnnIdentityAttn => tape.scaled_dot_attention(tokens, [None; 3], scale, cfg.residual),
        BackboneKind::CnnFullAttn => {
            tape.scaled_dot_attention(tokens, [bound.wq, bound.wk, bound.wv], scale, cfg.residual)
        }
        BackboneKind::CnnTop1Attn => {
            let opts = GumbelOptions {
                temperature: cfg.gumbel_temperature,
                hard: cfg.gumbel_hard,
                noise: rng.is_some(),
            };
            let mut fallback = Prng::new(0);
            let rng = rng.unwrap_or(&mut fallback);
            tape.attention_with(
                tokens,
                [bound.wq, bound.wk, bound.wv],
                scale,
                cfg.residual,
                |tape, logits| tape.gumbel_softmax(logits, opts, rng),
            )
        }
    }
}

fn check_finite<T: Scalar>(tape: &Tape<T>, v: Var, stage: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(stage))
    }
}

/// Builds the noise prediction for a `[B,3,4,4]` batch on `tape`.
///
/// `timesteps` holds one 1-based timestep per batch element; it only
/// matters when the time bias is enabled.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    x: Var,
    timesteps: &[usize],
    rng: GumbelSource<'_>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    ensure!(
        shape.len() == 4 && shape[1..] == [IMAGE_CHANNELS, 4, 4],
        "model input must be [B,3,4,4], got {shape:?}"
    );
    ensure!(
        timesteps.len() == shape[0],
        "{} timesteps for batch of {}",
        timesteps.len(),
        shape[0]
    );
    check_finite(tape, x, "input")?;
    let mut h = tape.conv2x2_s2(x, bound.conv_w, bound.conv_b)?;
    if let Some(table) = bound.time_bias {
        let steps = tape.shape(table)[0];
        ensure!(
            timesteps.iter().all(|&t| (1..=steps).contains(&t)),
            "timestep outside 1..={steps}"
        );
        let rows: Vec<usize> = timesteps.iter().map(|&t| t - 1).collect();
        let bias = tape.gather_rows(table, &rows)?;
        h = tape.add_channel_bias(h, bias)?;
    }
    check_finite(tape, h, "conv")?;
    h = tape.relu(h);
    if cfg.kind.has_attention() {
        let tokens = tape.to_tokens(h)?;
        let attended = attention_block(tape, tokens, bound, cfg.kind, &cfg.attention, rng)?;
        check_finite(tape, attended, "attention")?;
        h = tape.from_tokens(attended, 2, 2)?;
    }
    let out = tape.deconv2x2_s2(h, bound.deconv_w, bound.deconv_b)?;
    check_finite(tape, out, "deconv")?;
    Ok(out)
}

/// Gradient-free prediction for a `[3,4,4]` image or a `[B,3,4,4]` batch.
pub fn predict_noise<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    x_t: &Tensor<T>,
    timesteps: &[usize],
    rng: GumbelSource<'_>,
) -> Result<Tensor<T>> {
    ensure!(
        params.kind == cfg.kind,
        "parameters are {} but config says {}",
        params.kind,
        cfg.kind
    );
    let single = x_t.rank() == 3;
    let batch = if single {
        x_t.clone().reshape(&[1, IMAGE_CHANNELS, 4, 4])?
    } else {
        x_t.clone()
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(batch);
    let out = forward(&mut tape, &bound, cfg, x, timesteps, rng)?;
    let out = tape.value(out).clone();
    if single {
        out.reshape(&[IMAGE_CHANNELS, 4, 4])
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::gradient_check;

    fn cfg(kind: BackboneKind) -> ModelConfig {
        ModelConfig::new(kind)
    }

    #[test]
    fn parameter_counts() {
        let cnn = init_model::<f32>(&cfg(BackboneKind::Cnn), 0);
        assert_eq!(cnn.param_count(), 803);
        assert_eq!(
            init_model::<f32>(&cfg(BackboneKind::CnnIdentityAttn), 0).param_count(),
            803
        );
        assert_eq!(
            init_model::<f32>(&cfg(BackboneKind::CnnFullAttn), 0).param_count(),
            803 + 3072
        );
        assert_eq!(
            init_model::<f32>(&cfg(BackboneKind::CnnTop1Attn), 0).param_count(),
            803 + 3072
        );
        let mut c = cfg(BackboneKind::Cnn);
        c.time_bias_steps = 10;
        assert_eq!(init_model::<f32>(&c, 0).param_count(), 803 + 320);
    }

    #[test]
    fn init_is_seeded() {
        for kind in BackboneKind::ALL {
            assert_eq!(init_model::<f32>(&cfg(kind), 3), init_model::<f32>(&cfg(kind), 3));
        }
        assert_ne!(
            init_model::<f32>(&cfg(BackboneKind::Cnn), 3),
            init_model::<f32>(&cfg(BackboneKind::Cnn), 4)
        );
    }

    #[test]
    fn init_respects_bounds() {
        let p = init_model::<f64>(&cfg(BackboneKind::CnnFullAttn), 1);
        let conv_bound = (1.0f64 / 12.0).sqrt();
        assert!(p.conv_w.data().iter().all(|v| v.abs() <= conv_bound));
        assert!(p.conv_b.data().iter().all(|&v| v == 0.0));
        let xavier = (6.0f64 / 64.0).sqrt();
        assert!(p.wq.unwrap().data().iter().all(|v| v.abs() <= xavier));
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = Prng::new(1);
        for kind in BackboneKind::ALL {
            let p = init_model::<f32>(&cfg(kind), 1);
            let x = Tensor::randn(&[3, 4, 4], &mut rng);
            let y = predict_noise(&p, &cfg(kind), &x, &[1], Some(&mut rng)).unwrap();
            assert_eq!(y.shape(), &[3, 4, 4]);
            let xb = Tensor::randn(&[5, 3, 4, 4], &mut rng);
            let yb = predict_noise(&p, &cfg(kind), &xb, &[1; 5], Some(&mut rng)).unwrap();
            assert_eq!(yb.shape(), &[5, 3, 4, 4]);
        }
    }

    fn swap_quadrants(x: &Tensor<f64>, a: usize, b: usize) -> Tensor<f64> {
        let quads = crate::dataset::QUADRANTS;
        let mut out = x.clone();
        for c in 0..3 {
            for dr in 0..2 {
                for dc in 0..2 {
                    let ia = c * 16 + (quads[a].0 + dr) * 4 + quads[a].1 + dc;
                    let ib = c * 16 + (quads[b].0 + dr) * 4 + quads[b].1 + dc;
                    out.data_mut()[ia] = x.data()[ib];
                    out.data_mut()[ib] = x.data()[ia];
                }
            }
        }
        out
    }

    #[test]
    fn cnn_acts_blockwise() {
        let mut rng = Prng::new(2);
        let mut p = init_model::<f64>(&cfg(BackboneKind::Cnn), 2);
        p.conv_b = Tensor::randn(&[HIDDEN], &mut rng);
        for _ in 0..10 {
            let x = Tensor::randn(&[3, 4, 4], &mut rng);
            let y = predict_noise(&p, &cfg(BackboneKind::Cnn), &x, &[1], None).unwrap();
            let ys = predict_noise(&p, &cfg(BackboneKind::Cnn), &swap_quadrants(&x, 0, 3), &[1], None).unwrap();
            assert_eq!(ys, swap_quadrants(&y, 0, 3));
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = Prng::new(3);
        for kind in [
            BackboneKind::CnnFullAttn,
            BackboneKind::CnnIdentityAttn,
            BackboneKind::CnnTop1Attn,
        ] {
            let p = init_model::<f64>(&cfg(kind), 3);
            let x = Tensor::<f64>::randn(&[1, 3, 4, 4], &mut rng);
            let y = predict_noise(&p, &cfg(kind), &x, &[1], None).unwrap();
            let xs = swap_quadrants(&x.clone().reshape(&[3, 4, 4]).unwrap(), 1, 2);
            let ys = predict_noise(&p, &cfg(kind), &xs, &[1], None).unwrap();
            let want = swap_quadrants(&y.reshape(&[3, 4, 4]).unwrap(), 1, 2);
            for (a, b) in ys.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{kind}");
            }
        }
    }

    fn run_block(
        kind: BackboneKind,
        tokens: &Tensor<f64>,
        params: &ModelParams<f64>,
        c: &AttentionConfig,
    ) -> Tensor<f64> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let t = tape.constant(tokens.clone());
        let out = attention_block(&mut tape, t, &bound, kind, c, None).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn identity_attention_equal_tokens_doubles() {
        let mut rng = Prng::new(4);
        let row = Tensor::<f64>::randn(&[HIDDEN], &mut rng);
        let data: Vec<f64> = (0..4).flat_map(|_| row.data().to_vec()).collect();
        let tokens = Tensor::new(&[1, 4, HIDDEN], data.clone()).unwrap();
        let p = init_model::<f64>(&cfg(BackboneKind::CnnIdentityAttn), 0);
        let out = run_block(BackboneKind::CnnIdentityAttn, &tokens, &p, &AttentionConfig::default());
        for (o, i) in out.data().iter().zip(&data) {
            assert!((o - 2.0 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_attention_orthonormal_weights() {
        // tokens e1, e2: alpha_11 = e / (1 + e)
        let mut data = vec![0.0; 2 * HIDDEN];
        data[0] = 1.0;
        data[HIDDEN + 1] = 1.0;
        let tokens = Tensor::new(&[1, 2, HIDDEN], data).unwrap();
        let p = init_model::<f64>(&cfg(BackboneKind::CnnIdentityAttn), 0);
        let c = AttentionConfig {
            residual: false,
            ..Default::default()
        };
        let out = run_block(BackboneKind::CnnIdentityAttn, &tokens, &p, &c);
        let e = std::f64::consts::E;
        assert!((out.data()[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((out.data()[1] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((e / (1.0 + e) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn full_with_identity_weights_equals_identity_kind() {
        let mut rng = Prng::new(5);
        let eye = {
            let mut t = Tensor::<f64>::zeros(&[HIDDEN, HIDDEN]);
            for i in 0..HIDDEN {
                t.data_mut()[i * HIDDEN + i] = 1.0;
            }
            t
        };
        let mut full = init_model::<f64>(&cfg(BackboneKind::CnnFullAttn), 0);
        full.wq = Some(eye.clone());
        full.wk = Some(eye.clone());
        full.wv = Some(eye);
        let ident = init_model::<f64>(&cfg(BackboneKind::CnnIdentityAttn), 0);
        let c = AttentionConfig {
            scale: Some(1.0),
            ..Default::default()
        };
        for _ in 0..5 {
            let tokens = Tensor::<f64>::randn(&[2, 4, HIDDEN], &mut rng).map(|v| v * 0.3);
            let a = run_block(BackboneKind::CnnFullAttn, &tokens, &full, &c);
            let b = run_block(BackboneKind::CnnIdentityAttn, &tokens, &ident, &c);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top1_without_noise_selects_argmax() {
        let mut rng = Prng::new(6);
        let p = init_model::<f64>(&cfg(BackboneKind::CnnTop1Attn), 6);
        let tokens = Tensor::<f64>::randn(&[1, 4, HIDDEN], &mut rng);
        let out = run_block(BackboneKind::CnnTop1Attn, &tokens, &p, &AttentionConfig::default());
        let mat = |t: &Tensor<f64>, w: &Tensor<f64>| -> Vec<Vec<f64>> {
            (0..4)
                .map(|r| {
                    (0..HIDDEN)
                        .map(|j| {
                            (0..HIDDEN)
                                .map(|i| t.data()[r * HIDDEN + i] * w.data()[i * HIDDEN + j])
                                .sum()
                        })
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (
            mat(&tokens, p.wq.as_ref().unwrap()),
            mat(&tokens, p.wk.as_ref().unwrap()),
            mat(&tokens, p.wv.as_ref().unwrap()),
        );
        for x in 0..4 {
            let scores: Vec<f64> = (0..4)
                .map(|y| q[x].iter().zip(&k[y]).map(|(a, b)| a * b).sum())
                .collect();
            let best = (0..4).fold(0, |b, y| if scores[y] > scores[b] { y } else { b });
            for j in 0..HIDDEN {
                let want = tokens.data()[x * HIDDEN + j] + v[best][j];
                assert!((out.data()[x * HIDDEN + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cnn_kind_has_no_attention_block() {
        let p = init_model::<f64>(&cfg(BackboneKind::Cnn), 0);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let t = tape.constant(Tensor::zeros(&[1, 4, HIDDEN]));
        assert!(attention_block(
            &mut tape,
            t,
            &bound,
            BackboneKind::Cnn,
            &AttentionConfig::default(),
            None
        )
        .is_err());
    }

    #[test]
    fn every_tensor_receives_gradient() {
        let mut rng = Prng::new(7);
        for kind in BackboneKind::ALL {
            let mut c = cfg(kind);
            c.time_bias_steps = 5;
            let p = init_model::<f64>(&c, 7);
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, true);
            let x = tape.constant(Tensor::randn(&[8, 3, 4, 4], &mut rng));
            let target = tape.constant(Tensor::randn(&[8, 3, 4, 4], &mut rng));
            let steps: Vec<usize> = (0..8).map(|i| 1 + i % 5).collect();
            let y = forward(&mut tape, &bound, &c, x, &steps, Some(&mut rng)).unwrap();
            let loss = tape.weighted_mse(y, target, &[1.0; 8]).unwrap();
            tape.backward(loss).unwrap();
            for (v, (name, _)) in bound.vars().into_iter().zip(p.named()) {
                let g = tape.grad(v).unwrap();
                assert!(g.data().iter().any(|&x| x != 0.0), "{kind}: {name} has zero gradient");
            }
        }
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let mut rng = Prng::new(8);
        for kind in [
            BackboneKind::Cnn,
            BackboneKind::CnnFullAttn,
            BackboneKind::CnnIdentityAttn,
        ] {
            let c = cfg(kind);
            let p = init_model::<f64>(&c, 8);
            let x = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut rng);
            let target = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut rng);
            let inputs: Vec<Tensor<f64>> = p.named().iter().map(|(_, t)| (*t).clone()).collect();
            let err = gradient_check(
                &inputs,
                |tape, vars| {
                    let bound = BoundParams {
                        conv_w: vars[0],
                        conv_b: vars[1],
                        deconv_w: vars[2],
                        deconv_b: vars[3],
                        wq: vars.get(4).copied(),
                        wk: vars.get(5).copied(),
                        wv: vars.get(6).copied(),
                        time_bias: None,
                    };
                    let xv = tape.constant(x.clone());
                    let tv = tape.constant(target.clone());
                    let y = forward(tape, &bound, &c, xv, &[1, 1], None)?;
                    tape.weighted_mse(y, tv, &[0.5, 2.0])
                },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{kind}: {err}");
        }
    }

    #[test]
    fn top1_straight_through_matches_soft_gradients() {
        let mut rng = Prng::new(9);
        let c = cfg(BackboneKind::CnnTop1Attn);
        let p = init_model::<f64>(&c, 9);
        let x = Tensor::<f64>::randn(&[4, 3, 4, 4], &mut rng);
        let upstream = Tensor::<f64>::randn(&[4, 4, HIDDEN], &mut rng);
        let grads = [true, false].map(|hard| {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let h = tape.conv2x2_s2(xv, bound.conv_w, bound.conv_b).unwrap();
            let h = tape.relu(h);
            let tokens = tape.to_tokens(h).unwrap();
            let logits = {
                let q = tape.matmul(tokens, bound.wq.unwrap()).unwrap();
                let k = tape.matmul(tokens, bound.wk.unwrap()).unwrap();
                let l = tape.bmm_nt(q, k).unwrap();
                tape.scale(l, c.attention.scale_for(c.kind))
            };
            let opts = GumbelOptions {
                temperature: 1.0,
                hard,
                noise: true,
            };
            let alpha = tape.gumbel_softmax(logits, opts, &mut Prng::new(99)).unwrap();
            let w = tape.constant(upstream.clone().reshape(&[4, 4, HIDDEN]).unwrap());
            let v = tape.matmul(tokens, bound.wv.unwrap()).unwrap();
            let out = tape.bmm(alpha, v).unwrap();
            let prod = tape.mul(out, w).unwrap();
            let loss = tape.sum(prod);
            tape.backward(loss).unwrap();
            tape.grad(bound.wq.unwrap()).unwrap().clone()
        });
        // the query projection only reaches the loss through alpha, and the
        // upstream gradient on alpha does not depend on alpha itself here
        assert!(grads[0].data().iter().any(|&v| v != 0.0));
        for (h, s) in grads[0].data().iter().zip(grads[1].data()) {
            assert!((h - s).abs() < 1e-12);
        }
    }
}
