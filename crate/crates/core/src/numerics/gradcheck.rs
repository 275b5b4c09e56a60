//! Central finite-difference checks for every differentiable tape op.
//!
//! The finite-difference side only ever evaluates forward values, so it
//! is independent of the adjoint code it validates.

use super::{conv2x2_s2, deconv2x2_s2, GumbelOptions, Prng, Tape, Tensor, Var};
use crate::error::Result;

/// Worst relative error observed for one op across random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

/// Compares tape gradients of `build` at `inputs` against central
/// differences with step `h`. Returns the relative error over the
/// concatenation of all input gradients.
pub fn gradient_check<F>(inputs: &[Tensor<f64>], build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    for &v in &vars {
        analytic.extend_from_slice(tape.grad(v).expect("leaf gradient").data());
    }

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let base = inputs[i].data()[j];
            work[i].data_mut()[j] = base + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = base - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = base;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Contracts `out` with a fixed random tensor so every output entry
/// contributes a distinct weight to the scalar loss.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(tape.shape(out), &mut Prng::new(seed));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Builder,
}

fn cases() -> Vec<Case> {
    fn case(
        name: &'static str,
        shapes: &[&[usize]],
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Case {
        Case {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            build: Box::new(build),
        }
    }
    vec![
        case("add", &[&[3, 4], &[3, 4]], |t, v| {
            let o = t.add(v[0], v[1])?;
            project(t, o, 1)
        }),
        case("sub", &[&[3, 4], &[3, 4]], |t, v| {
            let o = t.sub(v[0], v[1])?;
            project(t, o, 2)
        }),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| {
            let o = t.mul(v[0], v[1])?;
            project(t, o, 3)
        }),
        case("scale", &[&[5]], |t, v| {
            let o = t.scale(v[0], -1.7);
            project(t, o, 4)
        }),
        case("relu", &[&[12]], |t, v| {
            let o = t.relu(v[0]);
            project(t, o, 5)
        }),
        case("matmul", &[&[2, 3, 4], &[4, 5]], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            project(t, o, 6)
        }),
        case("bmm", &[&[2, 3, 4], &[2, 4, 5]], |t, v| {
            let o = t.bmm(v[0], v[1])?;
            project(t, o, 7)
        }),
        case("bmm_nt", &[&[2, 3, 4], &[2, 5, 4]], |t, v| {
            let o = t.bmm_nt(v[0], v[1])?;
            project(t, o, 8)
        }),
        case("conv2x2_s2", &[&[2, 3, 4, 4], &[5, 3, 2, 2], &[5]], |t, v| {
            let o = t.conv2x2_s2(v[0], v[1], v[2])?;
            project(t, o, 9)
        }),
        case("deconv2x2_s2", &[&[2, 5, 2, 2], &[5, 3, 2, 2], &[3]], |t, v| {
            let o = t.deconv2x2_s2(v[0], v[1], v[2])?;
            project(t, o, 10)
        }),
        case("softmax", &[&[3, 5]], |t, v| {
            let o = t.softmax_rows(v[0])?;
            project(t, o, 11)
        }),
        case("gumbel_softmax", &[&[3, 4]], |t, v| {
            let opts = GumbelOptions {
                temperature: 0.8,
                hard: false,
                noise: true,
            };
            let o = t.gumbel_softmax(v[0], opts, &mut Prng::new(12))?;
            project(t, o, 12)
        }),
        case("tokens", &[&[2, 3, 2, 2]], |t, v| {
            let tok = t.to_tokens(v[0])?;
            let w = t.constant(Tensor::randn(&[3, 3], &mut Prng::new(13)));
            let mixed = t.matmul(tok, w)?;
            let o = t.from_tokens(mixed, 2, 2)?;
            project(t, o, 14)
        }),
        case("gather_rows", &[&[4, 3]], |t, v| {
            let o = t.gather_rows(v[0], &[2, 0, 2, 3, 1])?;
            project(t, o, 15)
        }),
        case("add_channel_bias", &[&[2, 3, 2, 2], &[2, 3]], |t, v| {
            let o = t.add_channel_bias(v[0], v[1])?;
            project(t, o, 16)
        }),
        case("weighted_mse", &[&[3, 2, 2], &[3, 2, 2]], |t, v| {
            t.weighted_mse(v[0], v[1], &[0.3, 1.0, 0.05])
        }),
        case(
            "scaled_dot_attention",
            &[&[2, 4, 3], &[3, 3], &[3, 3], &[3, 3]],
            |t, v| {
                let o = t.scaled_dot_attention(v[0], [Some(v[1]), Some(v[2]), Some(v[3])], 0.5, true)?;
                project(t, o, 17)
            },
        ),
        case("identity_attention", &[&[4, 3]], |t, v| {
            let o = t.scaled_dot_attention(v[0], [None; 3], 1.0, true)?;
            project(t, o, 18)
        }),
        case(
            "composition",
            &[&[1, 3, 4, 4], &[4, 3, 2, 2], &[4], &[4, 4], &[4, 3, 2, 2], &[3]],
            |t, v| {
                let h = t.conv2x2_s2(v[0], v[1], v[2])?;
                let h = t.relu(h);
                let tok = t.to_tokens(h)?;
                let tok = t.scaled_dot_attention(tok, [Some(v[3]), Some(v[3]), None], 0.5, true)?;
                let h = t.from_tokens(tok, 2, 2)?;
                let o = t.deconv2x2_s2(h, v[4], v[5])?;
                project(t, o, 19)
            },
        ),
    ]
}

/// Runs every op check over `instances` random inputs.
pub fn check_all_ops(instances: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut reports = Vec::new();
    for (ci, case) in cases().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = Prng::child(seed, (ci * 1_000_003 + i) as u64);
            let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| Tensor::randn(s, &mut rng)).collect();
            let err = gradient_check(&inputs, &case.build, 1e-5)?;
            worst = worst.max(err);
        }
        reports.push(GradCheck {
            name: case.name.to_string(),
            instances,
            max_rel_err: worst,
        });
    }
    Ok(reports)
}

/// Worst relative gap of `<deconv(x), y>` vs `<x, conv(y)>` with shared
/// kernel and zero bias.
pub fn conv_adjoint_check(instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = Prng::child(seed, i as u64);
        let c_in = 1 + rng.below(6);
        let c_out = 1 + rng.below(6);
        let x = Tensor::<f64>::randn(&[c_in, 2, 2], &mut rng);
        let y = Tensor::<f64>::randn(&[c_out, 4, 4], &mut rng);
        let k = Tensor::<f64>::randn(&[c_in, c_out, 2, 2], &mut rng);
        let lhs = deconv2x2_s2(&x, &k, &Tensor::zeros(&[c_out]))?.dot(&y);
        let rhs = x.dot(&conv2x2_s2(&y, &k, &Tensor::zeros(&[c_in]))?);
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
    }
    Ok(worst)
}
