//! Worked examples for the tensor engine's public operations.

use egoseg::nn::*;
use rand::{Rng, SeedableRng};

fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, v.to_vec()).unwrap()
}

fn rand_t(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn conv_of_ones_sums_the_window() {
    let x = Tensor::<f32>::filled([1, 1, 3, 3], 1.0);
    let w = Tensor::<f32>::filled([1, 1, 3, 3], 1.0);
    let y = conv2d(&x, &w, None, ConvGeom::new(3, 1, 0)).unwrap();
    assert_eq!(y.shape(), [1, 1, 1, 1]);
    assert_eq!(y.data(), &[9.0]);
}

#[test]
fn unit_one_by_one_kernel_is_identity() {
    let x = rand_t([2, 1, 5, 4], 1);
    let y = conv2d(&x, &t([1, 1, 1, 1], &[1.0]), None, ConvGeom::new(1, 1, 0)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn same_padding_preserves_size() {
    for k in [1, 3, 5, 7] {
        let x = rand_t([1, 2, 9, 6], k as u64);
        let w = rand_t([3, 2, k, k], 10 + k as u64);
        let y = conv2d(&x, &w, None, ConvGeom::new(k, 1, k / 2)).unwrap();
        assert_eq!(y.shape(), [1, 3, 9, 6]);
    }
}

#[test]
fn batch_norm_with_zero_gamma_outputs_beta() {
    let x = rand_t([2, 1, 3, 3], 2);
    let out = batch_norm_train(&x, &[0.0], &[5.0], 1e-5).unwrap();
    assert!(out.y.data().iter().all(|&v| v == 5.0));
}

#[test]
fn batch_norm_of_normalized_input_is_near_identity() {
    let raw = rand_t([4, 1, 4, 4], 3);
    let first = batch_norm_train(&raw, &[1.0], &[0.0], 0.0).unwrap().y;
    let again = batch_norm_train(&first, &[1.0], &[0.0], 1e-5).unwrap().y;
    for (a, b) in first.data().iter().zip(again.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn small_pooling_and_activation_examples() {
    let x = t([1, 1, 1, 3], &[-1.0, 0.0, 2.0]);
    assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    let x = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(max_pool2d(&x, 2, 2, 0).unwrap().y.data(), &[4.0]);
    let c = Tensor::<f64>::filled([1, 2, 3, 5], 0.7);
    let up = upsample_bilinear(&c, 6, 10).unwrap();
    assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn adaptive_pool_examples() {
    let x = rand_t([1, 2, 4, 5], 4);
    assert_eq!(adaptive_avg_pool2d(&x, 4, 5).unwrap(), x);
    let g = adaptive_avg_pool2d(&x, 1, 1).unwrap();
    for c in 0..2 {
        let mean = x.sample(0)[c * 20..(c + 1) * 20].iter().sum::<f64>() / 20.0;
        assert!((g.data()[c] - mean).abs() < 1e-15);
    }
    let ramp = Tensor::<f64>::from_fn([1, 1, 5, 5], |i| i as f64);
    assert_eq!(adaptive_avg_pool2d(&ramp, 2, 2).unwrap().data(), &[6.0, 8.0, 16.0, 18.0]);
    assert!(adaptive_avg_pool2d(&ramp, 6, 2).is_err());
}

#[test]
fn transposed_conv_broadcasts_with_unit_kernel() {
    let y = conv_transpose2d(
        &t([1, 1, 1, 1], &[2.5]),
        &Tensor::filled([1, 1, 2, 2], 1.0),
        None,
        ConvGeom::new(2, 2, 0),
    )
    .unwrap();
    assert_eq!(y.shape(), [1, 1, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 2.5));
}

#[test]
fn transposed_conv_equals_conv_input_gradient() {
    let g = ConvGeom::new(3, 2, 1);
    let x = rand_t([2, 3, 9, 9], 5);
    let w = rand_t([4, 3, 3, 3], 6);
    let dy = rand_t([2, 4, 5, 5], 7);
    let via_backward = conv2d_backward(&x, &w, g, &dy, false, true).unwrap().dx.unwrap();
    let via_transpose = conv_transpose2d(&dy, &w, None, g).unwrap();
    for (a, b) in via_backward.data().iter().zip(via_transpose.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_examples() {
    let equal = Tensor::<f64>::zeros([1, 2, 1, 1]);
    let (l, _) = weighted_cross_entropy(&equal, &[0], &[1.0, 1.0]).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-12);
    let (l, _) = weighted_cross_entropy(&equal, &[1], &[0.56, 3.27]).unwrap();
    assert!((l - 3.27 * 2f64.ln()).abs() < 1e-12);
    assert!((l - 2.2666).abs() < 1e-4);
    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 10.0, 20.0] {
        let logits = t([1, 2, 1, 1], &[0.0, margin]);
        let (l, _) = weighted_cross_entropy(&logits, &[1], &[1.0, 1.0]).unwrap();
        assert!(l < last);
        last = l;
    }
    assert!(last < 1e-8);
}

#[test]
fn grad_check_is_exact_for_linear_maps_even_in_f32() {
    let x = Tensor::<f32>::from_fn([1, 1, 2, 3], |i| i as f32 * 0.3 - 0.7);
    let g = vec![2.0f32; 6];
    let r = grad_check(&x, &g, 1e-2, None, |t| t.data().iter().map(|&v| 2.0 * v as f64).sum()).unwrap();
    assert!(r.max_rel_err < 1e-7, "{r:?}");
}

#[test]
fn relu_probed_away_from_kink() {
    let x = rand_t([1, 2, 4, 4], 8);
    let eps = 1e-6;
    let probes: Vec<usize> = (0..x.len()).filter(|&i| x.data()[i].abs() > 10.0 * eps).collect();
    let y = relu(&x);
    let dx = relu_backward(&y, &Tensor::filled(x.shape(), 1.0)).unwrap();
    let r = grad_check(&x, dx.data(), eps, Some(&probes), |t| relu(t).data().iter().sum()).unwrap();
    assert!(r.max_rel_err < 1e-6);
}

#[test]
fn conv_bn_relu_chain_in_f64() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let layer = ConvBn::<f64>::conv(2, 3, ConvGeom::new(3, 1, 1), true, &mut rng);
    let x = rand_t([2, 2, 5, 5], 10);
    let rproj = rand_t([2, 3, 5, 5], 11);
    let f = |xp: &Tensor<f64>| -> f64 {
        let y = layer.clone().forward_train(xp).unwrap().0;
        y.data().iter().zip(rproj.data()).map(|(a, b)| a * b).sum()
    };
    let mut l = layer.clone();
    let (_, cache) = l.forward_train(&x).unwrap();
    let dx = l.backward(&cache, &rproj, true).unwrap().unwrap();
    let r = grad_check(&x, dx.data(), 1e-6, None, f).unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let p = softmax_channels(&rand_t([2, 2, 6, 6], 12).map(|v| v * 50.0));
    for n in 0..2 {
        for i in 0..36 {
            assert!((p.sample(n)[i] + p.sample(n)[36 + i] - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn forward_passes_are_thread_count_independent() {
    let x = rand_t([3, 4, 17, 19], 13).cast::<f32>();
    let w = rand_t([8, 4, 3, 3], 14).cast::<f32>();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let y = conv2d(&x, &w, None, ConvGeom::new(3, 1, 1)).unwrap();
                let bn = batch_norm_train(&y, &[1.0; 8], &[0.0; 8], 1e-5).unwrap();
                let g = conv2d_backward(&x, &w, ConvGeom::new(3, 1, 1), &bn.y, false, true).unwrap();
                (bn.y, g.dw, g.dx.unwrap())
            })
    };
    assert_eq!(run(1), run(4));
}
