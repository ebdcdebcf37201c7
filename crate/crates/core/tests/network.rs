use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tds_core::autodiff::{backward, census, Tensor};
use tds_core::data::{gen_clip, DatasetSpec};
use tds_core::model::vit::Linear;
use tds_core::model::{fuse_frozen, ls_cross_entropy, network_forward, ModelConfig, ParamStore, SmeMode, TdsModel};
use tds_core::train::gradcheck_model;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn fuse_setup(seed: u64) -> (ParamStore, Linear) {
    let mut store = ParamStore::new();
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let lin = Linear::new(&mut store, "fuse", 6, 4, true, 0.5, true, rng);
    let b = lin.b.unwrap();
    store.set(b, store[b].with_data(random(&[4], seed + 1).to_vec()).unwrap());
    (store, lin)
}

#[test]
fn fusion_oracles() {
    let (mut store, lin) = fuse_setup(1);
    let side = random(&[2, 3, 4], 2);
    let frozen = random(&[2, 3, 6], 3);
    let out = fuse_frozen(&side, &frozen, &lin, &store, true).unwrap();
    let (w, b) = (store[lin.w].to_vec(), store[lin.b.unwrap()].to_vec());
    for tok in 0..6 {
        for o in 0..4 {
            let proj: f64 = b[o] + (0..6).map(|i| frozen.data()[tok * 6 + i] * w[i * 4 + o]).sum::<f64>();
            let want = side.data()[tok * 4 + o] + proj;
            assert!((out.data()[tok * 4 + o] - want).abs() < 1e-12);
        }
    }
    let zero_side = fuse_frozen(&Tensor::zeros(&[2, 3, 4]), &frozen, &lin, &store, true).unwrap();
    for tok in 0..6 {
        for o in 0..4 {
            assert!((zero_side.data()[tok * 4 + o] - (out.data()[tok * 4 + o] - side.data()[tok * 4 + o])).abs() < 1e-12);
        }
    }
    for id in [lin.w, lin.b.unwrap()] {
        store.set(id, store[id].with_data(vec![0.0; store[id].numel()]).unwrap());
    }
    assert_eq!(fuse_frozen(&side, &frozen, &lin, &store, true).unwrap().data(), side.data());
    assert!(fuse_frozen(&side, &random(&[2, 4, 6], 4), &lin, &store, true).is_err());
}

#[test]
fn fusion_does_not_reach_back_into_frozen_features() {
    let (store, lin) = fuse_setup(5);
    let frozen = random(&[2, 3, 6], 6).requiring_grad();
    let side = random(&[2, 3, 4], 7).requiring_grad();
    let out = fuse_frozen(&side, &frozen, &lin, &store, true).unwrap();
    let loss = tds_core::autodiff::ops::sum(&out).unwrap();
    let g = backward(&loss).unwrap();
    assert!(g.contains(side.id()));
    assert!(g.contains(store[lin.w].id()));
    assert!(!g.contains(frozen.id()));
}

#[test]
fn smoothed_cross_entropy_hand_value() {
    let logits = Tensor::new(&[4], vec![2.0, 0.0, 0.0, 0.0]).unwrap();
    let got = ls_cross_entropy(&logits, 0, 0.1).unwrap().item().unwrap();
    let lse = (2f64.exp() + 3.0).ln();
    let y = [0.925, 0.025, 0.025, 0.025];
    let want: f64 = -(0..4).map(|i| y[i] * ([2.0, 0.0, 0.0, 0.0][i] - lse)).sum::<f64>();
    assert!((got - want).abs() < 1e-12);
    assert!((want - (lse - 1.85)).abs() < 1e-12);
}

#[test]
fn smoothed_cross_entropy_properties() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let nc = r.gen_range(2..8);
        let z: Vec<f64> = (0..nc).map(|_| r.gen_range(-5.0..5.0)).collect();
        let label = r.gen_range(0..nc);
        let eps = r.gen_range(0.0..0.9);
        let shift = r.gen_range(-50.0..50.0);
        let a = ls_cross_entropy(&Tensor::new(&[nc], z.clone()).unwrap(), label, eps).unwrap().item().unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let b = ls_cross_entropy(&Tensor::new(&[nc], shifted).unwrap(), label, eps).unwrap().item().unwrap();
        assert!((a - b).abs() < 1e-10);
        let u = ls_cross_entropy(&Tensor::full(&[nc], shift), label, eps).unwrap().item().unwrap();
        assert!((u - (nc as f64).ln()).abs() < 1e-12);
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let plain = ls_cross_entropy(&Tensor::new(&[nc], z.clone()).unwrap(), label, 0.0).unwrap().item().unwrap();
        assert!((plain - (lse - z[label])).abs() < 1e-12);
    }
    let z = Tensor::zeros(&[4]);
    assert!(ls_cross_entropy(&z, 4, 0.1).is_err());
    assert!(ls_cross_entropy(&z, 0, 1.0).is_err());
}

fn clip(seed: u64) -> Tensor {
    gen_clip((seed % 4) as usize, seed, &DatasetSpec::default()).frames
}

fn all_modes() -> Vec<ModelConfig> {
    let base = ModelConfig::tiny();
    let mut out = vec![base.frame_factorized()];
    for mode in [
        SmeMode::Off,
        SmeMode::Temporal,
        SmeMode::Spatial,
        SmeMode::SpatialTemporal,
        SmeMode::Cross,
        SmeMode::Additional,
    ] {
        let mut c = base.clone();
        c.sme_mode = mode;
        out.push(c);
    }
    out
}

#[test]
fn logits_have_class_count_and_are_finite() {
    for cfg in all_modes() {
        let model = TdsModel::new(&cfg, 3).unwrap();
        let logits = network_forward(&clip(9), &model).unwrap();
        assert_eq!(logits.shape(), [cfg.num_classes]);
        assert!(logits.all_finite());
    }
    let model = TdsModel::new(&ModelConfig::tiny(), 3).unwrap();
    assert!(network_forward(&random(&[3, 4, 32, 32], 1), &model).is_err());
    assert!(network_forward(&random(&[3, 16, 16, 16], 1), &model).is_err());
}

#[test]
fn factorized_model_ignores_frame_order() {
    let cfg = ModelConfig::tiny().frame_factorized();
    let model = TdsModel::new(&cfg, 4).unwrap();
    let video = clip(10);
    let idx = [1, 3, 5, 7, 9, 11, 13, 15];
    let shuffled = [9, 1, 15, 5, 3, 13, 7, 11];
    let a = model.forward(&video, &idx, None).unwrap().logits;
    let b = model.forward(&video, &shuffled, None).unwrap().logits;
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn gradients_cover_exactly_the_trainable_set() {
    for cfg in all_modes() {
        let model = TdsModel::new(&cfg, 5).unwrap();
        let idx = [1, 3, 5, 7, 9, 11, 13, 15];
        let out = model.forward(&clip(11), &idx, None).unwrap();
        let loss = ls_cross_entropy(&out.logits, 2, 0.1).unwrap();
        let c = census(&loss);
        let g = backward(&loss).unwrap();
        let trainable: HashSet<_> = model.store.trainable().map(|e| e.tensor.id()).collect();
        let got: HashSet<_> = g.iter().map(|(id, _)| id).collect();
        assert_eq!(got, trainable, "{:?}", cfg.sme_mode);
        assert!(model.store.frozen().all(|e| !g.contains(e.tensor.id())));
        assert!(model.store.frozen().all(|e| e.name.starts_with("frozen.")));
        if !cfg.sme_mode.feeds_frozen() {
            assert_eq!(g.stats.frozen_nodes_visited, 0);
            assert_eq!(c.nodes.frozen, 0);
            assert_eq!(c.retained_bytes.frozen, 0);
        }
        assert_eq!(c.trainable_elements as usize, model.store.trainable_count());
    }
}

#[test]
fn cached_features_give_identical_logits() {
    let model = TdsModel::new(&ModelConfig::tiny(), 6).unwrap();
    let video = clip(12);
    let idx = [0, 2, 4, 6, 8, 10, 12, 14];
    let feats = model.frozen_features(&video, &idx).unwrap();
    let a = model.forward(&video, &idx, None).unwrap().logits;
    let b = model.forward(&video, &idx, Some(&feats)).unwrap().logits;
    assert_eq!(a.data(), b.data());
}

#[test]
fn frozen_weights_depend_only_on_frozen_seed() {
    let cfg = ModelConfig::tiny();
    let a = TdsModel::new(&cfg, 1).unwrap();
    let b = TdsModel::new(&cfg, 2).unwrap();
    assert_eq!(a.store.frozen_checksum(), b.store.frozen_checksum());
    let ta: Vec<f64> = a.store.trainable().flat_map(|e| e.tensor.to_vec()).collect();
    let tb: Vec<f64> = b.store.trainable().flat_map(|e| e.tensor.to_vec()).collect();
    assert_ne!(ta, tb);
}

#[test]
fn full_model_gradient_check() {
    let spec = DatasetSpec::default();
    let started = Instant::now();
    for cfg in [ModelConfig::tiny(), { let mut c = ModelConfig::tiny(); c.sme_mode = SmeMode::Cross; c }] {
        let model = TdsModel::new(&cfg, 7).unwrap();
        let clip = gen_clip(1, 13, &spec);
        let report = gradcheck_model(&model, &clip, 1e-5, 2, 0).unwrap();
        assert!(report.entries_checked > 100);
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
    assert!(started.elapsed().as_secs() < 120);
}
