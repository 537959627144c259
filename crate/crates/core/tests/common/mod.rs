//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

pub mod algebra;
pub mod oracles;

use escounts::decoder::{forward, Bound, prepare_exemplar, prepare_video, DecoderConfig, DecoderParams};
use escounts::features::{ExemplarLatent, ExemplarOrigin, FeatureSequence, Grid};
use escounts::numerics::{AttentionLayout, Tape, Tensor, Var};
use escounts::training::{loss_on_tape, Objective};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;

/// Norm-wise relative error between analytic and central-difference gradients,
/// worst over all leaves.
pub fn gradcheck<F>(leaves: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> (Tape<f64>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        // project non-scalar outputs onto a fixed random direction
        let shape = tape.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let loss = if shape.is_empty() {
            out
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let w = tape.constant(Tensor::randn(&shape, 1.0, &mut rng));
            let prod = tape.mul(out, w).unwrap();
            tape.sum_all(prod).unwrap()
        };
        (tape, vars, loss)
    };
    let (tape, vars, loss) = eval(leaves);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, vars[li]);
        let mut numeric = vec![0.0; leaf.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[j] += STEP;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[j] -= STEP;
            let (tp, _, lp) = eval(&plus);
            let (tm, _, lm) = eval(&minus);
            *slot = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * STEP);
        }
        let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom > 1e-12 {
            worst = worst.max(diff / denom);
        }
    }
    worst
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Values bounded away from zero so `abs` stays differentiable under the step.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand(shape, seed).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
}

/// Gradient check for every differentiable op; returns `(op, rel. error)`.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.push(("matmul", gradcheck(&[rand(&[5, 4], 1), rand(&[4, 3], 2)], |t, v| t.matmul(v[0], v[1]).unwrap())));
    out.push(("add", gradcheck(&[rand(&[3, 4], 3), rand(&[3, 4], 4)], |t, v| t.add(v[0], v[1]).unwrap())));
    out.push(("sub", gradcheck(&[rand(&[3, 4], 5), rand(&[3, 4], 6)], |t, v| t.sub(v[0], v[1]).unwrap())));
    out.push(("mul", gradcheck(&[rand(&[3, 4], 7), rand(&[3, 4], 8)], |t, v| t.mul(v[0], v[1]).unwrap())));
    out.push(("add_row", gradcheck(&[rand(&[3, 4], 9), rand(&[4], 10)], |t, v| t.add_row(v[0], v[1]).unwrap())));
    out.push(("scale", gradcheck(&[rand(&[3, 4], 11)], |t, v| t.scale(v[0], -1.7).unwrap())));
    out.push(("add_scalar", gradcheck(&[rand(&[3, 4], 12)], |t, v| t.add_scalar(v[0], 0.3).unwrap())));
    out.push((
        "layer_norm",
        gradcheck(&[rand(&[4, 6], 13), rand(&[6], 14), rand(&[6], 15)], |t, v| {
            t.layer_norm(v[0], v[1], v[2]).unwrap()
        }),
    ));
    out.push(("softmax", gradcheck(&[rand(&[3, 7], 16)], |t, v| t.softmax(v[0]).unwrap())));
    out.push(("gelu", gradcheck(&[rand(&[3, 5], 17)], |t, v| t.gelu(v[0]).unwrap())));
    out.push(("softplus", gradcheck(&[rand(&[3, 5], 18)], |t, v| t.softplus(v[0]).unwrap())));
    out.push(("abs", gradcheck(&[away_from_zero(&[3, 5], 19)], |t, v| t.abs(v[0]).unwrap())));
    out.push(("square", gradcheck(&[rand(&[3, 5], 20)], |t, v| t.square(v[0]).unwrap())));
    out.push(("sum_all", gradcheck(&[rand(&[3, 5], 21)], |t, v| t.sum_all(v[0]).unwrap())));
    out.push(("sum_last_dim", gradcheck(&[rand(&[3, 5], 22)], |t, v| t.sum_last_dim(v[0]).unwrap())));
    out.push(("reshape", gradcheck(&[rand(&[3, 4], 23)], |t, v| t.reshape(v[0], &[2, 6]).unwrap())));
    out.push(("transpose", gradcheck(&[rand(&[3, 4], 24)], |t, v| t.transpose(v[0]).unwrap())));
    out.push((
        "gather_rows",
        gradcheck(&[rand(&[4, 3], 25)], |t, v| {
            t.gather_rows(v[0], vec![Some(2), None, Some(0), Some(2), Some(3)]).unwrap()
        }),
    ));
    out.push((
        "mean",
        gradcheck(&[rand(&[2, 3], 26), rand(&[2, 3], 27), rand(&[2, 3], 28)], |t, v| t.mean(v).unwrap()),
    ));
    out.push((
        "attention",
        gradcheck(&[rand(&[5, 4], 29), rand(&[6, 4], 30), rand(&[6, 4], 31)], |t, v| {
            t.attention(v[0], v[1], v[2], AttentionLayout::dense(2)).unwrap()
        }),
    ));
    out.push((
        "attention_masked",
        gradcheck(&[rand(&[8, 4], 32), rand(&[8, 4], 33), rand(&[8, 4], 34)], |t, v| {
            let groups = vec![0, 0, 1, u32::MAX, 2, 2, 2, 3];
            let layout = AttentionLayout {
                heads: 2,
                blocks: 2,
                query_groups: Some(groups.clone()),
                key_groups: Some(groups),
            };
            t.attention(v[0], v[1], v[2], layout).unwrap()
        }),
    ));
    out
}

pub fn tiny_config() -> DecoderConfig {
    DecoderConfig {
        channels: 8,
        heads: 2,
        ca_blocks: 1,
        wsa_blocks: 1,
        mlp_ratio: 2,
        head_bias_init: 0.0,
        ..DecoderConfig::desk()
    }
}

pub fn random_sequence(cfg: &DecoderConfig, windows: usize, seed: u64) -> FeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid::new(windows * cfg.tokens_per_window, cfg.height, cfg.width);
    let tokens = Tensor::randn(&[grid.tokens(), cfg.channels], 1.0, &mut rng);
    FeatureSequence::new(tokens, grid, (windows * 64) as u32, 64, format!("rand{seed}")).unwrap()
}

pub fn random_exemplar(cfg: &DecoderConfig, seed: u64) -> ExemplarLatent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ExemplarLatent {
        tokens: Tensor::randn(&[cfg.exemplar_tokens(), cfg.channels], 1.0, &mut rng),
        origin: ExemplarOrigin::SameVideo,
        interval: Some((0, 64)),
        source_id: format!("ex{seed}"),
    }
}

/// Gradient check of the full decoder plus training objective over every parameter.
pub fn decoder_gradcheck(cfg: &DecoderConfig, shots: usize, seed: u64) -> f64 {
    let params = DecoderParams::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).cast::<f64>();
    let seq = random_sequence(cfg, 2, seed + 1);
    let video = prepare_video(cfg, &seq).unwrap().cast::<f64>();
    let ex: Vec<Tensor<f64>> = (0..shots)
        .map(|s| prepare_exemplar(cfg, &random_exemplar(cfg, seed + 10 + s as u64)).unwrap().cast())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let target: Vec<f32> = (0..seq.grid.t).map(|_| rng.random_range(0.0..1.0)).collect();
    let grid = seq.grid;
    gradcheck(params.tensors(), |tape, vars| {
        let p = Bound::from_vars(&params, vars.to_vec());
        let v = tape.constant(video.clone());
        let e: Vec<Var> = ex.iter().map(|t| tape.constant(t.clone())).collect();
        let d = forward(tape, cfg, &p, v, grid, &e).unwrap();
        loss_on_tape(tape, d, &target, 3, Objective::default()).unwrap().0
    })
}
