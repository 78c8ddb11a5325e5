//! Analytic gradients of every op against central finite differences.

use pti_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Projects the op output onto a fixed random direction so every output element matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let probe = Tensor::randn(g.shape(out), &mut rng(seed));
    let p = g.constant(probe);
    let prod = g.mul(out, p);
    g.sum(prod)
}

fn check<F>(name: &str, inputs: &[Tensor], build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = if g.value(out).numel() == 1 { out } else { project(&mut g, out, 99) };
        (g, vars, loss)
    };
    let (g, vars, loss) = eval(inputs);
    let grads = g.backward(loss);
    let h = 1e-2f32;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("missing gradient").clone();
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let (gp, _, lp) = eval(&plus);
            let (gm, _, lm) = eval(&minus);
            let fd = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h as f64);
            let a = analytic.data()[i] as f64;
            num += (a - fd).powi(2);
            den += fd.powi(2).max(a.powi(2));
        }
        let rel = (num / den.max(1e-12)).sqrt();
        assert!(rel < 1e-2, "{name}: input {k} relative gradient error {rel}");
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed))
}

#[test]
fn elementwise_ops() {
    let a = randn(&[2, 3], 1);
    let b = randn(&[2, 3], 2);
    check("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check("scale", &[a.clone()], |g, v| g.scale(v[0], -1.7));
    check("add_scalar", &[a.clone()], |g, v| g.add_scalar(v[0], 0.3));
    check("tanh", &[a.clone()], |g, v| g.tanh(v[0]));
    check("softplus", &[a.clone()], |g, v| g.softplus(v[0]));
    check("reshape", &[a.clone()], |g, v| g.reshape(v[0], &[3, 2]));
    // keep leaky_relu inputs away from the kink
    let away = a.map(|x| if x.abs() < 0.1 { x + 0.3 } else { x });
    check("leaky_relu", &[away], |g, v| g.leaky_relu(v[0], 0.2));
}

#[test]
fn channel_ops() {
    let x = randn(&[2, 3, 2, 2], 3);
    check("mul_channels", &[x.clone(), randn(&[2, 3], 4)], |g, v| g.mul_channels(v[0], v[1]));
    check("mul_channels_bcast", &[x.clone(), randn(&[1, 3], 5)], |g, v| {
        g.mul_channels(v[0], v[1])
    });
    check("add_bias", &[x.clone(), randn(&[3], 6)], |g, v| g.add_bias(v[0], v[1]));
    check(
        "add_noise",
        &[x.clone(), randn(&[1, 1, 2, 2], 7), randn(&[1], 8)],
        |g, v| g.add_noise(v[0], v[1], v[2]),
    );
    check(
        "add_noise_batched",
        &[x.clone(), randn(&[2, 1, 2, 2], 9), randn(&[1], 10)],
        |g, v| g.add_noise(v[0], v[1], v[2]),
    );
    check("channel_unit_norm", &[x.clone()], |g, v| g.channel_unit_norm(v[0], 1e-6));
    check("pixel_norm", &[randn(&[2, 5], 11)], |g, v| g.pixel_norm(v[0]));
}

#[test]
fn convolution_and_linear() {
    check(
        "conv3x3",
        &[randn(&[2, 2, 4, 3], 12), randn(&[3, 2, 3, 3], 13)],
        |g, v| g.conv2d(v[0], v[1]),
    );
    check(
        "conv1x1",
        &[randn(&[1, 3, 3, 3], 14), randn(&[2, 3, 1, 1], 15)],
        |g, v| g.conv2d(v[0], v[1]),
    );
    check("linear", &[randn(&[3, 4], 16), randn(&[2, 4], 17)], |g, v| {
        g.linear(v[0], v[1])
    });
    check(
        "demod",
        &[randn(&[3, 2, 3, 3], 18), randn(&[2, 2], 19)],
        |g, v| g.demod(v[0], v[1], 1e-8),
    );
}

#[test]
fn resampling() {
    check("upsample2x", &[randn(&[1, 2, 3, 2], 20)], |g, v| g.upsample2x(v[0]));
    check("avg_pool2x", &[randn(&[2, 1, 4, 4], 21)], |g, v| g.avg_pool2x(v[0]));
    check("broadcast_batch", &[randn(&[1, 2, 2, 2], 22)], |g, v| g.broadcast_batch(v[0], 3));
}

#[test]
fn reductions() {
    let a = randn(&[2, 3], 22);
    let b = randn(&[2, 3], 23);
    check("sum", &[a.clone()], |g, v| g.sum(v[0]));
    check("mean", &[a.clone()], |g, v| g.mean(v[0]));
    check("mse", &[a.clone(), b.clone()], |g, v| g.mse(v[0], v[1]));
    check("cross_entropy", &[randn(&[3, 4], 24)], |g, v| g.cross_entropy(v[0], &[0, 3, 1]));
    check("mean_of", &[a.clone(), b.clone()], |g, v| {
        let s0 = g.sum(v[0]);
        let s1 = g.mse(v[0], v[1]);
        g.mean_of(&[s0, s1])
    });
}

#[test]
fn frozen_inputs_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.constant(randn(&[1, 2, 3, 3], 30));
    let w = g.param(randn(&[2, 2, 3, 3], 31));
    let y = g.conv2d(x, w);
    let loss = g.sum(y);
    let grads = g.backward(loss);
    assert!(grads.get(x).is_none());
    assert!(grads.get(w).is_some());
}

#[test]
fn scalar_chain_keeps_f64_precision() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&[3], vec![0.1, 0.2, 0.3]));
    let b = g.constant(Tensor::zeros(&[3]));
    let m = g.mse(a, b);
    let s = g.scale(m, 3.0);
    let want = (0.1f32 as f64).powi(2) + (0.2f32 as f64).powi(2) + (0.3f32 as f64).powi(2);
    assert_eq!(g.scalar(s), want / 3.0 * 3.0);
}
