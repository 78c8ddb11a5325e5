mod common;

use common::{backbone, render, tiny_generator};
use pti_core::gan::{
    code_vars, noise_vars, sample_noise, sample_w, synthesis_forward, synthesize, LatentCode, LatentSpace, Provenance,
};
use pti_core::inversion::{invert, invert_batch, InversionConfig};
use pti_core::Error;
use pti_tensor::Graph;

fn cfg(space: LatentSpace, steps: usize) -> InversionConfig {
    InversionConfig {
        steps,
        ..InversionConfig::with_space(space)
    }
}

#[test]
fn best_iterate_is_no_worse_than_any_traced_step() {
    let gen = tiny_generator(1);
    let bb = backbone(&gen);
    let target = render(&gen, 40);
    for space in [LatentSpace::W, LatentSpace::WPlus] {
        let r = invert(&target, &gen, &bb, &cfg(space, 30)).unwrap();
        assert_eq!(r.loss_trace.len(), 30);
        assert!(r.loss_trace.iter().all(|s| r.best.total <= s.total));
        assert!(r.best.total < r.loss_trace[0].total, "optimization made progress");
        assert_eq!(r.pivot.space(), space);
    }
}

#[test]
fn a_single_step_is_valid() {
    let gen = tiny_generator(2);
    let bb = backbone(&gen);
    let r = invert(&render(&gen, 3), &gen, &bb, &cfg(LatentSpace::W, 1)).unwrap();
    assert_eq!(r.loss_trace.len(), 1);
    assert!(r.best_step <= 1);
}

#[test]
fn batches_match_single_runs_in_any_order() {
    let gen = tiny_generator(3);
    let bb = backbone(&gen);
    let images: Vec<_> = (0..3).map(|i| render(&gen, 50 + i)).collect();
    let c = cfg(LatentSpace::W, 8);
    let single = invert(&images[0], &gen, &bb, &c).unwrap();
    let batch: Vec<_> = invert_batch(&images[..1], &gen, &bb, &c).into_iter().map(Result::unwrap).collect();
    assert_eq!(batch[0].pivot, single.pivot);
    assert_eq!(batch[0].loss_trace, single.loss_trace);

    let forward: Vec<_> = invert_batch(&images, &gen, &bb, &c).into_iter().map(Result::unwrap).collect();
    let reversed: Vec<_> = images.iter().rev().cloned().collect();
    let backward: Vec<_> = invert_batch(&reversed, &gen, &bb, &c).into_iter().map(Result::unwrap).collect();
    for i in 0..3 {
        assert_eq!(forward[i].pivot, backward[2 - i].pivot);
        assert_eq!(forward[i].final_image, backward[2 - i].final_image);
    }
}

#[test]
fn generator_weights_stay_frozen() {
    let gen = tiny_generator(4);
    let before = gen.clone();
    let bb = backbone(&gen);
    invert(&render(&gen, 7), &gen, &bb, &cfg(LatentSpace::WPlus, 5)).unwrap();
    assert_eq!(gen, before);
}

#[test]
fn tuned_generators_are_rejected() {
    let mut gen = tiny_generator(5);
    let bb = backbone(&gen);
    let target = render(&gen, 1);
    gen.provenance = Provenance::Tuned;
    assert!(matches!(invert(&target, &gen, &bb, &cfg(LatentSpace::W, 2)), Err(Error::Provenance { .. })));
}

/// Directional derivative of the perceptual loss with respect to the latent
/// code and the noise maps, against the autodiff gradient.
#[test]
fn perceptual_gradient_matches_finite_differences() {
    let gen = tiny_generator(6);
    let bb = backbone(&gen);
    let target = render(&gen, 11);
    let feats = bb.features(&target);
    let w = sample_w(7, 0, 1, &gen).unwrap().remove(0);
    let noise = sample_noise(8, &gen);

    let mut g = Graph::new();
    let p = gen.synthesis.bind(&mut g, false);
    let ws = code_vars(&mut g, &[&w], gen.num_layers(), true);
    let ns = noise_vars(&mut g, &[&noise], true);
    let img = synthesis_forward(&mut g, &gen.arch, &p, &ws, &ns);
    let loss = bb.distance_graph(&mut g, img, &feats);
    let l0 = g.scalar(loss);
    let mut grads = g.backward(loss);
    let gw = grads.take(ws[0]).unwrap();
    let gn: Vec<_> = ns.iter().map(|&v| grads.take(v).unwrap()).collect();
    let norm = (gw.sq_norm() + gn.iter().map(|t| t.sq_norm()).sum::<f64>()).sqrt();
    assert!(norm > 0.0);

    let eps = 1e-3 * l0.abs().max(1e-3) / norm;
    let at = |sign: f64| {
        let s = (sign * eps / norm) as f32;
        let wv: Vec<f32> = w.values().iter().zip(gw.data()).map(|(a, b)| a + s * b).collect();
        let mut n2 = noise.clone();
        for (m, gm) in n2.maps_mut().iter_mut().zip(&gn) {
            m.axpy(s, gm);
        }
        let x = synthesize(&LatentCode::w(wv).unwrap(), &n2, 1.0, &gen).unwrap();
        bb.distance(&x, &target).unwrap()
    };
    let fd = (at(1.0) - at(-1.0)) / (2.0 * eps);
    let rel = (fd - norm).abs() / norm;
    assert!(rel < 1e-2, "directional derivative {fd} vs gradient norm {norm}");
}
