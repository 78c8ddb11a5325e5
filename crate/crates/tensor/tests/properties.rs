use proptest::prelude::*;
use pti_tensor::kernels::{avgpool_plane, avgpool_plane_t, col2im, im2col, pairwise_sum, upsample_plane, upsample_plane_t};
use pti_tensor::{Graph, Tensor};

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-4 * (1.0 + a.abs().max(b.abs()))
}

fn values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-2.0f32..2.0, n)
}

proptest! {
    #[test]
    fn im2col_and_col2im_are_adjoint(
        (c, h, w, k) in (1usize..4, 1usize..7, 1usize..7, prop::sample::select(vec![1usize, 3])),
        seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let x = Tensor::randn(&[c * h * w], &mut rng);
        let y = Tensor::randn(&[c * k * k * h * w], &mut rng);
        let mut col = vec![0.0; c * k * k * h * w];
        im2col(x.data(), c, h, w, k, pad, &mut col);
        let mut back = vec![0.0; c * h * w];
        col2im(y.data(), c, h, w, k, pad, &mut back);
        prop_assert!(close(dot(&col, y.data()), dot(x.data(), &back)));
    }

    #[test]
    fn upsample_and_pool_are_adjoint_to_their_transposes(
        (h, w) in (1usize..6, 1usize..6),
        seed in any::<u64>(),
    ) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let x = Tensor::randn(&[h * w], &mut rng);
        let g = Tensor::randn(&[4 * h * w], &mut rng);
        let mut up = vec![0.0; 4 * h * w];
        upsample_plane(x.data(), h, w, &mut up);
        let mut up_t = vec![0.0; h * w];
        upsample_plane_t(g.data(), h, w, &mut up_t);
        prop_assert!(close(dot(&up, g.data()), dot(x.data(), &up_t)));

        let mut pooled = vec![0.0; h * w];
        avgpool_plane(g.data(), 2 * h, 2 * w, &mut pooled);
        let mut pool_t = vec![0.0; 4 * h * w];
        avgpool_plane_t(x.data(), 2 * h, 2 * w, &mut pool_t);
        prop_assert!(close(dot(&pooled, x.data()), dot(g.data(), &pool_t)));
    }

    #[test]
    fn upsampling_preserves_constants(h in 1usize..6, w in 1usize..6, v in -3.0f32..3.0) {
        let mut up = vec![0.0; 4 * h * w];
        upsample_plane(&vec![v; h * w], h, w, &mut up);
        prop_assert!(up.iter().all(|u| (u - v).abs() <= 1e-6 * (1.0 + v.abs())));
    }

    #[test]
    fn pairwise_sum_matches_sequential(xs in prop::collection::vec(-1e3f64..1e3, 0..200)) {
        let s: f64 = xs.iter().sum();
        prop_assert!((pairwise_sum(&xs) - s).abs() <= 1e-9 * (1.0 + xs.iter().map(|x| x.abs()).sum::<f64>()));
    }

    /// Demodulated modulated weights have unit norm per output channel and sample.
    #[test]
    fn demodulated_weights_have_unit_norm(
        (o, i, n) in (1usize..5, 1usize..5, 1usize..4),
        w in values(4 * 4 * 9),
        s in values(4 * 3),
    ) {
        let w: Vec<f32> = w[..o * i * 9].to_vec();
        let s: Vec<f32> = s[..n * i].iter().map(|v| v + 2.5).collect();
        prop_assume!(w.iter().any(|v| v.abs() > 0.1));
        let mut g = Graph::new();
        let wv = g.constant(Tensor::new(&[o, i, 3, 3], w.clone()));
        let sv = g.constant(Tensor::new(&[n, i], s.clone()));
        let d = g.demod(wv, sv, 0.0);
        let d = g.value(d).data().to_vec();
        for ni in 0..n {
            for oi in 0..o {
                let energy: f64 = (0..i)
                    .flat_map(|ii| (0..9).map(move |k| (oi, ii, k)))
                    .map(|(oi, ii, k)| {
                        let m = w[(oi * i + ii) * 9 + k] as f64 * s[ni * i + ii] as f64 * d[ni * o + oi] as f64;
                        m * m
                    })
                    .sum();
                prop_assume!(energy.is_finite());
                prop_assert!((energy - 1.0).abs() < 1e-4, "norm² {energy}");
            }
        }
    }
}
