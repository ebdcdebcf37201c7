//! Gradient and oracle checks for every differentiable primitive.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tds_core::autodiff::ops::{self, PadMode, PoolPadding};
use tds_core::autodiff::{backward, census, grad_check, no_grad, Branch, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).requiring_grad()
}

/// Weighted sum so every output element carries a distinct cotangent.
fn probe(t: &Tensor) -> Tensor {
    let w = Tensor::from_fn(t.shape(), |i| ((i as f64) * 0.731).sin() + 0.3);
    ops::sum(&ops::mul(t, &w).unwrap()).unwrap()
}

const TOL: f64 = 1e-5;

fn check(params: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor) {
    let err = grad_check(|p| Ok(probe(&f(p))), params, 1e-6).unwrap();
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn grad_matmul_and_bmm() {
    check(&[random(&[3, 4], 1), random(&[4, 2], 2)], |p| ops::matmul(&p[0], &p[1]).unwrap());
    check(&[random(&[2, 3, 4], 3), random(&[2, 4, 5], 4)], |p| ops::bmm(&p[0], &p[1], false).unwrap());
    check(&[random(&[2, 3, 4], 5), random(&[2, 5, 4], 6)], |p| ops::bmm(&p[0], &p[1], true).unwrap());
}

#[test]
fn grad_elementwise() {
    check(&[random(&[2, 3], 7), random(&[2, 3], 8)], |p| ops::add(&p[0], &p[1]).unwrap());
    check(&[random(&[2, 3], 9), random(&[3], 10)], |p| ops::sub(&p[0], &p[1]).unwrap());
    check(&[random(&[4, 3], 11), random(&[3], 12)], |p| ops::mul(&p[0], &p[1]).unwrap());
    check(&[random(&[5], 13)], |p| ops::scale(&p[0], -2.5).unwrap());
    check(&[random(&[3, 5], 14)], |p| ops::gelu(&p[0]).unwrap());
}

#[test]
fn grad_normalization_and_softmax() {
    check(&[random(&[3, 6], 15)], |p| ops::softmax(&p[0]).unwrap());
    check(&[random(&[3, 6], 16)], |p| ops::log_softmax(&p[0]).unwrap());
    check(&[random(&[4, 6], 17), random(&[6], 18), random(&[6], 19)], |p| {
        ops::layer_norm(&p[0], Some(&p[1]), Some(&p[2]), 1e-5).unwrap()
    });
    check(&[random(&[4, 6], 20)], |p| ops::layer_norm(&p[0], None, None, 1e-5).unwrap());
}

#[test]
fn grad_shape_ops() {
    check(&[random(&[2, 3, 4], 21)], |p| ops::permute(&p[0], &[2, 0, 1]).unwrap());
    check(&[random(&[2, 3, 4], 22)], |p| ops::reshape(&p[0], &[6, 4]).unwrap());
    check(&[random(&[2, 3], 23), random(&[2, 2], 24)], |p| {
        ops::concat(&[p[0].clone(), p[1].clone()], 1).unwrap()
    });
    check(&[random(&[4, 3], 25)], |p| ops::narrow(&p[0], 0, 1, 2).unwrap());
    check(&[random(&[4, 3], 26)], |p| ops::index_select(&p[0], 0, &[3, 0, 0, 2]).unwrap());
    check(&[random(&[3, 2], 27)], |p| ops::pad(&p[0], 0, 2, 1, PadMode::Replicate).unwrap());
    check(&[random(&[3, 2], 28)], |p| ops::pad(&p[0], 1, 1, 1, PadMode::Zero).unwrap());
    check(&[random(&[3, 4], 29)], |p| ops::mean_axis(&p[0], 1).unwrap());
    check(&[random(&[3, 4], 30)], |p| ops::mean(&p[0]).unwrap());
}

#[test]
fn grad_conv3d_general() {
    check(
        &[random(&[2, 3, 4, 5], 31), random(&[3, 2, 2, 3, 2], 32), random(&[3], 33)],
        |p| ops::conv3d(&p[0], &p[1], Some(&p[2]), [1, 2, 1], [1, 0, 1]).unwrap(),
    );
    check(&[random(&[4, 3, 2, 2], 34), random(&[2, 4, 1, 1, 1], 35)], |p| {
        ops::conv3d(&p[0], &p[1], None, [1, 1, 1], [0, 0, 0]).unwrap()
    });
}

#[test]
fn grad_maxpool_away_from_ties() {
    // distinct values at spacing 0.01 keep ties far from the 1e-6 probe
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let mut vals: Vec<f64> = (0..2 * 5 * 2 * 3).map(|i| i as f64 * 0.01).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::new(&[2, 5, 2, 3], vals).unwrap().requiring_grad();
    check(&[x.clone()], |p| {
        ops::maxpool3d(&p[0], [3, 1, 1], [1, 1, 1], [1, 0, 0], PoolPadding::Replicate).unwrap()
    });
    check(&[x], |p| ops::maxpool3d(&p[0], [2, 2, 2], [1, 1, 1], [0, 1, 1], PoolPadding::NegInf).unwrap());
}

#[test]
fn maxpool_tie_routes_to_lowest_index() {
    let x = Tensor::new(&[1, 3, 1, 1], vec![5.0, 5.0, 1.0]).unwrap().requiring_grad();
    let y = ops::maxpool3d(&x, [3, 1, 1], [1, 1, 1], [0, 0, 0], PoolPadding::NegInf).unwrap();
    let g = backward(&ops::sum(&y).unwrap()).unwrap();
    assert_eq!(g.get(x.id()).unwrap().to_vec(), vec![1.0, 0.0, 0.0]);
}

/// Direct seven-loop valid cross-correlation.
fn conv3d_oracle(
    x: &[f64],
    [ci, d, h, w]: [usize; 4],
    k: &[f64],
    [co, kd, kh, kw]: [usize; 4],
) -> Vec<f64> {
    let (od, oh, ow) = (d - kd + 1, h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; co * od * oh * ow];
    for o in 0..co {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for a in 0..kd {
                            for b in 0..kh {
                                for e in 0..kw {
                                    acc += x[((c * d + z + a) * h + y + b) * w + xx + e]
                                        * k[(((o * ci + c) * kd + a) * kh + b) * kw + e];
                                }
                            }
                        }
                    }
                    out[((o * od + z) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv3d_identity_subblock_selects_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let x = Tensor::from_fn(&[4, 8, 8, 8], |_| rng.gen_range(-1.0..1.0));
    // kernel k maps input channel k % 4 into output channel k
    let w = Tensor::from_fn(&[16, 4, 1, 1, 1], |i| {
        let (o, c) = (i / 4, i % 4);
        if o % 4 == c { 1.0 } else { 0.0 }
    });
    let y = ops::conv3d(&x, &w, None, [1; 3], [0; 3]).unwrap();
    assert_eq!(y.shape(), &[16, 8, 8, 8]);
    let oracle = conv3d_oracle(x.data(), [4, 8, 8, 8], w.data(), [16, 1, 1, 1]);
    assert_eq!(y.to_vec(), oracle);
    let plane = 8 * 8 * 8;
    for o in 0..16 {
        assert_eq!(&y.data()[o * plane..(o + 1) * plane], &x.data()[(o % 4) * plane..(o % 4 + 1) * plane]);
    }
}

#[test]
fn conv3d_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = Tensor::from_fn(&[3, 6, 5, 7], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::from_fn(&[2, 3, 3, 2, 3], |_| rng.gen_range(-1.0..1.0));
    let y = ops::conv3d(&x, &w, None, [1; 3], [0; 3]).unwrap();
    assert_eq!(y.shape(), &[2, 4, 4, 5]);
    let want = conv3d_oracle(x.data(), [3, 6, 5, 7], w.data(), [2, 3, 2, 3]);
    for (got, want) in y.data().iter().zip(&want) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn frozen_subpath_is_not_traversed() {
    let frozen_w = Tensor::frozen_parameter(&[3, 3], vec![0.2; 9]).unwrap();
    let side_w = Tensor::parameter(&[3, 3], vec![0.1; 9]).unwrap();
    let x = Tensor::ones(&[2, 3]);
    let frozen_out = {
        let _b = tds_core::autodiff::branch_scope(Branch::Frozen);
        let h = ops::matmul(&x, &frozen_w).unwrap();
        ops::gelu(&ops::matmul(&h, &frozen_w).unwrap()).unwrap()
    };
    assert!(!frozen_out.has_node());
    let y = ops::matmul(&frozen_out, &side_w).unwrap();
    let g = backward(&ops::sum(&y).unwrap()).unwrap();
    assert_eq!(g.stats.frozen_nodes_visited, 0);
    assert_eq!(g.stats.nodes_visited, 2);
    assert_eq!(g.len(), 1);
    assert_eq!(census(&y).nodes.frozen, 0);
}

#[test]
fn eval_mode_records_nothing() {
    let w = Tensor::parameter(&[3, 3], vec![0.1; 9]).unwrap();
    let _ng = no_grad();
    let y = ops::softmax(&ops::matmul(&Tensor::ones(&[2, 3]), &w).unwrap()).unwrap();
    assert!(!y.has_node());
}

proptest! {
    #[test]
    fn reshape_permute_round_trip_bit_exact(
        dims in proptest::collection::vec(1usize..5, 1..5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&dims, |_| rng.gen::<f64>() * 1e3 - 5e2);
        let rank = dims.len();
        let mut axes: Vec<usize> = (0..rank).collect();
        for i in (1..rank).rev() {
            axes.swap(i, rng.gen_range(0..=i));
        }
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let p = ops::permute(&x, &axes).unwrap();
        let back = ops::permute(&p, &inverse).unwrap();
        prop_assert_eq!(back.to_vec(), x.to_vec());
        let flat = ops::reshape(&x, &[x.numel()]).unwrap();
        let again = ops::reshape(&flat, &dims).unwrap();
        prop_assert_eq!(again.to_vec(), x.to_vec());
    }

    #[test]
    fn softmax_is_a_distribution(
        rows in 1usize..5,
        cols in 1usize..9,
        scale in 0.1f64..80.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0) * scale);
        let s = ops::softmax(&x).unwrap();
        for row in s.data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
