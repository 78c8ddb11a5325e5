mod common;

use common::{backbone, render, tiny_generator};
use pti_core::gan::{sample_noise, sample_w, synthesize};
use pti_core::metrics::mse;
use pti_core::pivotal::{pivotal_tune, Alpha, PivotSet, PivotTarget, TuningConfig, TuningObjective};
use pti_tensor::ParamStore;

fn target(gen: &pti_core::gan::GeneratorCheckpoint) -> PivotTarget {
    PivotTarget {
        pivot: sample_w(3, 0, 1, gen).unwrap().remove(0),
        noise: sample_noise(4, gen),
        target: render(gen, 77),
    }
}

fn cfg(steps: usize) -> TuningConfig {
    TuningConfig {
        steps,
        alpha: Alpha::Absolute(1.0),
        learning_rate: 1e-3,
        ..TuningConfig::default()
    }
}

fn bits(p: &ParamStore) -> Vec<u32> {
    p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn zero_weight_and_disabled_regularization_are_identical() {
    let gen = tiny_generator(1);
    let bb = backbone(&gen);
    let set = PivotSet::single(target(&gen), &gen).unwrap();
    let a = pivotal_tune(&gen, &set, &bb, &TuningConfig { lambda_r: 0.0, ..cfg(4) }).unwrap();
    let b = pivotal_tune(&gen, &set, &bb, &TuningConfig { regularization_enabled: false, ..cfg(4) }).unwrap();
    assert_eq!(bits(&a.checkpoint.synthesis), bits(&b.checkpoint.synthesis));
    assert!(a.loss_trace.iter().all(|s| s.reg.is_none()));
}

#[test]
fn step_zero_objective_is_the_weighted_reconstruction() {
    let gen = tiny_generator(2);
    let bb = backbone(&gen);
    let t = target(&gen);
    let set = PivotSet::single(t.clone(), &gen).unwrap();
    let c = TuningConfig {
        regularization_enabled: false,
        lambda_l2: 0.5,
        lambda_lpips: 2.0,
        ..cfg(1)
    };
    let r = pivotal_tune(&gen, &set, &bb, &c).unwrap();
    let x = synthesize(&t.pivot, &t.noise, 1.0, &gen).unwrap();
    let expect = 2.0 * bb.distance(&x, &t.target).unwrap() + 0.5 * mse(&x, &t.target).unwrap();
    let got = r.loss_trace[0].total;
    assert!((got - expect).abs() <= 1e-5 * expect.abs(), "{got} vs {expect}");
}

#[test]
fn locality_term_vanishes_at_the_original_weights() {
    let gen = tiny_generator(3);
    let bb = backbone(&gen);
    let set = PivotSet::single(target(&gen), &gen).unwrap();
    let c = cfg(1);
    let obj = TuningObjective::new(&gen, &set, &bb, &c).unwrap();
    let pivots = vec![set.items()[0].pivot.clone()];
    for step in 0..5 {
        assert_eq!(obj.value(&gen.synthesis, &pivots, step).unwrap().reg, Some(0.0));
    }
}

#[test]
fn duplicated_pivots_match_a_single_pivot() {
    let gen = tiny_generator(4);
    let bb = backbone(&gen);
    let t = target(&gen);
    let c = TuningConfig {
        regularization_enabled: false,
        ..cfg(3)
    };
    let one = pivotal_tune(&gen, &PivotSet::single(t.clone(), &gen).unwrap(), &bb, &c).unwrap();
    let three = pivotal_tune(&gen, &PivotSet::new(vec![t.clone(), t.clone(), t], &gen).unwrap(), &bb, &c).unwrap();
    for ((_, a), (_, b)) in one.checkpoint.synthesis.iter().zip(three.checkpoint.synthesis.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1e-2), "{x} vs {y}");
        }
    }
}

#[test]
fn tuning_reduces_reconstruction_and_leaves_the_input_untouched() {
    let gen = tiny_generator(5);
    let before = gen.clone();
    let bb = backbone(&gen);
    let set = PivotSet::single(target(&gen), &gen).unwrap();
    let r = pivotal_tune(&gen, &set, &bb, &cfg(20)).unwrap();
    assert_eq!(gen, before);
    assert!(r.final_recon[0] < r.loss_trace[0].recon[0]);
    assert_eq!(r.checkpoint.provenance, pti_core::gan::Provenance::Tuned);
    assert_eq!(r.pivots[0], set.items()[0].pivot, "pivot stays fixed");
}

/// Central difference of the tuning objective along its normalized gradient.
#[test]
fn tuning_gradient_matches_finite_differences() {
    let gen = tiny_generator(6);
    let bb = backbone(&gen);
    let set = PivotSet::single(target(&gen), &gen).unwrap();
    let c = cfg(1);
    let obj = TuningObjective::new(&gen, &set, &bb, &c).unwrap();
    let pivots = vec![set.items()[0].pivot.clone()];
    let (v0, grads) = obj.gradients(&gen.synthesis, &pivots, 0).unwrap();
    let norm = grads.iter().map(|(_, t)| t.sq_norm()).sum::<f64>().sqrt();
    let eps = 1e-3 * v0.total.abs() / norm;
    let at = |sign: f64| {
        let mut p = gen.synthesis.clone();
        for (n, t) in p.iter_mut() {
            t.axpy((sign * eps / norm) as f32, grads.tensor(n));
        }
        obj.value(&p, &pivots, 0).unwrap().total
    };
    let fd = (at(1.0) - at(-1.0)) / (2.0 * eps);
    assert!((fd - norm).abs() / norm < 1e-2, "{fd} vs {norm}");
}
