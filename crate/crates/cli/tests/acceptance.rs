//! Acceptance gate A1-A8. Runs without the libtest harness so every
//! criterion prints its PASS/FAIL line. Pass criterion ids (e.g. `A3 A7`)
//! as arguments to run a subset.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tds_core::autodiff::{backward, census, ops, Tensor};
use tds_core::config::{Preset, RunConfig};
use tds_core::data::{gen_clip, generate, sparse_sample, DatasetSpec};
use tds_core::model::adapters::{
    frame_differences, motion_features, pool_difference, sme_forward, td_forward, SmeParams, TdParams, TdVariant,
};
use tds_core::model::vit::TokenEmbedding;
use tds_core::model::{ls_cross_entropy, Init, ModelConfig, ParamStore, SmeMode, TdsModel};
use tds_core::profiler::{audit_backward_memory, Topology};
use tds_core::train::{adamw_step, lr_at, train, AdamHyper, AdamState, EpochMetrics};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

// A1 --------------------------------------------------------------------

fn a1_gradcheck() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_tds"))
        .args(["gradcheck", "--preset", "tiny", "--out"])
        .arg(dir.path())
        .env_remove("TDS_SEED")
        .output()
        .expect("tds binary runs");
    let secs = started.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout);
    let err: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("max relative error: "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format!("no error line in output: {text}"))?;
    check(
        err < 1e-4 && secs < 120.0 && out.status.code() == Some(0),
        format!("max relative error {err:.3e} (< 1e-4), {secs:.1}s (< 120s), exit {:?}", out.status.code()),
    )
}

// A2 --------------------------------------------------------------------

fn a2_frozen_isolation() -> Verdict {
    let spec = DatasetSpec::default();
    let base = ModelConfig::tiny();
    let mut configs = vec![base.clone(), base.frame_factorized()];
    for mode in [SmeMode::Off, SmeMode::Cross, SmeMode::Additional] {
        let mut c = base.clone();
        c.sme_mode = mode;
        configs.push(c);
    }
    let mut checked = 0;
    for (i, cfg) in configs.iter().enumerate() {
        let model = TdsModel::new(cfg, i as u64).unwrap();
        let frozen_ids: HashSet<_> = model.store.frozen().map(|e| e.tensor.id()).collect();
        for class in 0..4 {
            let clip = gen_clip(class, 100 + class as u64, &spec);
            let idx = sparse_sample(spec.frames, cfg.frames, None).unwrap();
            let out = model.forward(&clip.frames, &idx, None).unwrap();
            let loss = ls_cross_entropy(&out.logits, class, cfg.label_smoothing).unwrap();
            let c = census(&loss);
            let g = backward(&loss).unwrap();
            let leaked = g.iter().filter(|(id, _)| frozen_ids.contains(id)).count();
            if leaked > 0 || c.retained_bytes.frozen != 0 || c.nodes.frozen != 0 || g.stats.frozen_nodes_visited != 0 {
                return Err(format!(
                    "sme_mode {}: {leaked} frozen gradients, {} frozen bytes retained, {} frozen nodes",
                    cfg.sme_mode, c.retained_bytes.frozen, c.nodes.frozen
                ));
            }
            if g.is_empty() {
                return Err("no gradients at all".into());
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} backward passes: 0 frozen gradients, 0 frozen bytes retained"))
}

// A3 --------------------------------------------------------------------

fn a3_memory_ordering() -> Verdict {
    let mut detail = Vec::new();
    let mut ok = true;
    for (name, cfg) in [("tiny", ModelConfig::tiny()), ("paper", ModelConfig::paper())] {
        let [s, i, f] = Topology::ALL.map(|t| audit_backward_memory(&cfg, t).unwrap().total_retained_bytes);
        let mib = |b: u64| b as f64 / (1 << 20) as f64;
        let ratio = s as f64 / i as f64;
        ok &= s < i && i < f;
        if name == "paper" {
            ok &= ratio < 0.6;
        }
        detail.push(format!("{name}: {:.1} < {:.1} < {:.1} MiB, side/in-backbone {ratio:.3}", mib(s), mib(i), mib(f)));
    }
    check(ok, detail.join("; "))
}

// A4 --------------------------------------------------------------------

fn train_run(rc: &RunConfig) -> (Vec<EpochMetrics>, f64) {
    let (tr, va) = generate(&rc.data);
    let mut model = TdsModel::new(&rc.model, rc.train.seed).unwrap();
    let started = Instant::now();
    let hist = train(&mut model, &rc.train, &rc.data, &tr, &va, None, &mut |_| {}).unwrap();
    (hist, started.elapsed().as_secs_f64())
}

fn a4_temporal_learning() -> Verdict {
    let rc = RunConfig::preset(Preset::Tiny);
    assert_eq!(rc.data.clips_per_class, 64);
    assert_eq!(rc.train.epochs, 30);
    let (hist, secs) = train_run(&rc);
    let last = hist.last().unwrap();
    let val = last.val_top1.unwrap();

    let mut fact = rc.clone();
    fact.model = rc.model.frame_factorized();
    let (fhist, fsecs) = train_run(&fact);
    let fval = fhist.iter().filter_map(|e| e.val_top1).fold(0.0, f64::max);
    check(
        last.top1 >= 0.95 && val >= 0.85 && secs < 900.0 && fval <= 0.40,
        format!(
            "default train {:.3} (>= 0.95) val {val:.3} (>= 0.85) in {secs:.0}s; factorized best val {fval:.3} (<= 0.40) in {fsecs:.0}s",
            last.top1
        ),
    )
}

// A5 --------------------------------------------------------------------

/// Same data as A4 but a 6-epoch budget, short of saturation, so the
/// settings can separate instead of tying at 100%.
fn a5_budget() -> RunConfig {
    let mut rc = RunConfig::preset(Preset::Tiny);
    rc.train.epochs = 6;
    rc.train.warmup_epochs = 1;
    rc
}

const A5_SEEDS: u64 = 3;

/// Mean final val top-1 over seeds; identical resolved configs are trained once.
fn mean_val(settings: &[(&str, &str)], memo: &mut HashMap<String, f64>) -> f64 {
    let mut base = a5_budget();
    for (k, v) in settings {
        base.set(k, v).unwrap();
    }
    base.validate().unwrap();
    if let Some(&v) = memo.get(&base.to_text()) {
        return v;
    }
    let mut total = 0.0;
    for s in 0..A5_SEEDS {
        let mut rc = base.clone();
        rc.train.seed = s;
        rc.data.data_seed += s;
        total += train_run(&rc).0.last().unwrap().val_top1.unwrap();
    }
    let mean = total / A5_SEEDS as f64;
    memo.insert(base.to_text(), mean);
    mean
}

fn a5_ablation_directions() -> Verdict {
    let memo = &mut HashMap::new();
    let n: Vec<f64> = ["0", "1", "2"].iter().map(|v| mean_val(&[("window_radius", v)], memo)).collect();
    let both = mean_val(&[("alpha", "1"), ("beta", "1")], memo);
    let alpha_only = mean_val(&[("alpha", "1"), ("beta", "0")], memo);
    let beta_only = mean_val(&[("alpha", "0"), ("beta", "1")], memo);
    check(
        n[2] >= n[1] && n[1] >= n[0] && both >= alpha_only && both >= beta_only,
        format!(
            "mean val over {A5_SEEDS} seeds: n=2 {:.3} >= n=1 {:.3} >= n=0 {:.3}; a=b=1 {both:.3} >= a-only {alpha_only:.3}, b-only {beta_only:.3}",
            n[2], n[1], n[0]
        ),
    )
}

// A6 --------------------------------------------------------------------

const CASES: usize = 1000;
const TOL: f64 = 1e-10;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_pool_difference(z: &Tensor, k: usize) -> Vec<f64> {
    let [c, t, h, w] = <[usize; 4]>::try_from(z.shape()).unwrap();
    let r = (k / 2) as i64;
    let at = |ci: usize, ti: usize, y: usize, x: usize| z.data()[((ci * t + ti) * h + y) * w + x];
    let mut out = Vec::with_capacity(z.numel());
    for ci in 0..c {
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let m = (-r..=r)
                        .map(|j| at(ci, (ti as i64 + j).clamp(0, t as i64 - 1) as usize, y, x))
                        .fold(f64::NEG_INFINITY, f64::max);
                    out.push(at(ci, ti, y, x) - m);
                }
            }
        }
    }
    out
}

fn oracle_frame_differences(win: &Tensor) -> Vec<f64> {
    let [c, f, h, w] = <[usize; 4]>::try_from(win.shape()).unwrap();
    let at = |ci: usize, fi: usize, p: usize| win.data()[(ci * f + fi) * h * w + p];
    let mut out = Vec::with_capacity(c * (f - 1) * h * w);
    for fi in 0..f - 1 {
        for ci in 0..c {
            for p in 0..h * w {
                out.push(at(ci, fi + 1, p) - at(ci, fi, p));
            }
        }
    }
    out
}

fn oracle_ls_ce(z: &[f64], label: usize, eps: f64) -> f64 {
    let k = z.len() as f64;
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    -z.iter()
        .enumerate()
        .map(|(i, v)| (eps / k + if i == label { 1.0 - eps } else { 0.0 }) * (v - log_z))
        .sum::<f64>()
}

fn oracle_lr(step: usize, total: usize, warm: usize, base: f64) -> f64 {
    if step < warm {
        base * step as f64 / warm as f64
    } else {
        let p = ((step - warm) as f64 / (total - warm).max(1) as f64).min(1.0);
        base * (1.0 + (PI * p).cos()) / 2.0
    }
}

fn a6_operator_oracles() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut worst = [0.0f64; 5];

    for _ in 0..CASES {
        let shape = [r.gen_range(1..4), r.gen_range(1..9), r.gen_range(1..4), r.gen_range(1..4)];
        let k = [1, 3, 5, 7][r.gen_range(0..4)];
        let z = uniform(&mut r, &shape, -2.0, 2.0);
        let got = pool_difference(&z, k).unwrap();
        worst[0] = worst[0].max(max_abs_diff(got.data(), &oracle_pool_difference(&z, k)));
    }

    for _ in 0..CASES {
        let shape = [r.gen_range(1..4), r.gen_range(2..6), r.gen_range(1..5), r.gen_range(1..5)];
        let win = uniform(&mut r, &shape, 0.0, 1.0);
        let got = frame_differences(&win).unwrap();
        worst[1] = worst[1].max(max_abs_diff(got.data(), &oracle_frame_differences(&win)));
    }

    for _ in 0..CASES {
        let k = r.gen_range(2..12);
        let z: Vec<f64> = (0..k).map(|_| r.gen_range(-20.0..20.0)).collect();
        let label = r.gen_range(0..k);
        let eps = r.gen_range(0.0..0.5);
        let got = ls_cross_entropy(&Tensor::new(&[k], z.clone()).unwrap(), label, eps).unwrap().item().unwrap();
        worst[2] = worst[2].max((got - oracle_ls_ce(&z, label, eps)).abs());
    }

    for _ in 0..CASES {
        let n = r.gen_range(1..8);
        let decay = r.gen_bool(0.5);
        let h = AdamHyper {
            lr: r.gen_range(1e-4..0.1),
            weight_decay: r.gen_range(0.0..0.5),
            beta1: r.gen_range(0.5..0.95),
            beta2: r.gen_range(0.9..0.9999),
            eps: 10f64.powf(r.gen_range(-10.0..-6.0)),
        };
        let mut store = ParamStore::new();
        let id = store.add("p", &[n], Init::Zeros, true, &mut r);
        let p0: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        store.set(id, store[id].with_data(p0.clone()).unwrap());
        store.set_decay(id, decay);
        let mut state = AdamState::new();
        let (mut p, mut m, mut v) = (p0, vec![0.0; n], vec![0.0; n]);
        for t in 1..=r.gen_range(1..6) {
            let g: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
            let loss = ops::sum(&ops::mul(&store[id], &Tensor::new(&[n], g.clone()).unwrap()).unwrap()).unwrap();
            let grads = backward(&loss).unwrap();
            adamw_step(&mut store, &grads, &mut state, h).unwrap();
            for j in 0..n {
                m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
                v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
                let mhat = m[j] / (1.0 - h.beta1.powi(t));
                let vhat = v[j] / (1.0 - h.beta2.powi(t));
                let shrink = if decay { 1.0 - h.lr * h.weight_decay } else { 1.0 };
                p[j] = p[j] * shrink - h.lr * mhat / (vhat.sqrt() + h.eps);
            }
        }
        worst[3] = worst[3].max(max_abs_diff(store[id].data(), &p));
    }

    for _ in 0..CASES {
        let total = r.gen_range(1..500);
        let warm = r.gen_range(0..total);
        let step = r.gen_range(0..=total);
        let base = r.gen_range(1e-5..1.0);
        worst[4] = worst[4].max((lr_at(step, total, warm, base) - oracle_lr(step, total, warm, base)).abs());
    }

    let names = ["pool_difference", "frame_differences", "ls_cross_entropy", "adamw_step", "lr_at"];
    let detail = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    check(worst.iter().all(|&w| w <= TOL), format!("{CASES} cases each, max |diff|: {detail}"))
}

// A7 --------------------------------------------------------------------

fn a7_static_null() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let (mut motion_max, mut sme_max, mut td_max) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..50 {
        let patch = [2, 4][case % 2];
        let g = r.gen_range(1..4);
        let (h, w) = (g * patch, (g + 1) * patch);
        let t_raw = r.gen_range(2..10);
        let radius = r.gen_range(1..4);
        let dim = 4 * r.gen_range(1..4);
        let (alpha, beta) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
        let mut store = ParamStore::new();
        let n = (h / patch) * (w / patch);
        let appearance = TokenEmbedding::new(&mut store, "side", patch, n + 1, dim, true, &mut r);
        let sme = SmeParams::new(&mut store, "sme", radius, patch, dim, alpha, beta, &mut r).unwrap();
        let frame = uniform(&mut r, &[3, 1, h, w], 0.0, 1.0);
        let video = ops::index_select(&frame, 1, &vec![0; t_raw]).unwrap();
        let idx: Vec<usize> = (0..t_raw).collect();
        let m = motion_features(&video, &idx, &sme, &store).unwrap();
        motion_max = motion_max.max(m.data().iter().fold(0.0, |a, v| a.max(v.abs())));
        let out = sme_forward(&video, &idx, &sme, &store, &appearance).unwrap();
        let a = appearance.forward(&store, &video).unwrap();
        let want: Vec<f64> = a.data().iter().map(|v| beta * v).collect();
        sme_max = sme_max.max(max_abs_diff(out.data(), &want));

        let td = TdParams::new(&mut store, "td", dim, 2, [1, 3, 5][case % 3], TdVariant::Pool, &mut r).unwrap();
        for id in [td.reduce, td.expand] {
            let v = uniform(&mut r, store[id].shape(), -1.0, 1.0);
            store.set(id, store[id].with_data(v.to_vec()).unwrap());
        }
        let one = uniform(&mut r, &[1, n + 1, dim], -1.0, 1.0);
        let tokens = ops::index_select(&one, 0, &vec![0; t_raw]).unwrap();
        let y = td_forward(&tokens, &td, &store, (h / patch, w / patch)).unwrap();
        td_max = td_max.max(max_abs_diff(y.data(), tokens.data()));
    }
    check(
        motion_max <= 1e-12 && sme_max <= 1e-12 && td_max <= 1e-12,
        format!("50 static clips: |motion| {motion_max:.1e}, |sme - b*appearance| {sme_max:.1e}, |td - id| {td_max:.1e} (<= 1e-12)"),
    )
}

// A8 --------------------------------------------------------------------

fn a8_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut rc = RunConfig::preset(Preset::Tiny);
    rc.data.clips_per_class = 8;
    rc.train.epochs = 3;
    rc.train.warmup_epochs = 1;
    rc.train.crop = true;
    rc.train.jitter = true;
    rc.train.seed = 8;
    let run = |name: &str| {
        let (tr, va) = generate(&rc.data);
        let mut model = TdsModel::new(&rc.model, rc.train.seed).unwrap();
        let path = dir.path().join(name);
        let hist = train(&mut model, &rc.train, &rc.data, &tr, &va, Some(&path), &mut |_| {}).unwrap();
        let hist: Vec<EpochMetrics> = hist.iter().map(EpochMetrics::without_timing).collect();
        (hist, std::fs::read(&path).unwrap())
    };
    let (ha, ca) = run("a.ckpt");
    let (hb, cb) = run("b.ckpt");
    check(
        ha == hb && ca == cb,
        format!("{} epochs, metrics equal: {}, checkpoints ({} bytes) equal: {}", ha.len(), ha == hb, ca.len(), ca == cb),
    )
}

fn main() {
    let criteria: [(&str, &str, fn() -> Verdict); 8] = [
        ("A1", "gradient integrity", a1_gradcheck),
        ("A2", "frozen isolation", a2_frozen_isolation),
        ("A3", "memory ordering", a3_memory_ordering),
        ("A4", "temporal learning", a4_temporal_learning),
        ("A5", "ablation directions", a5_ablation_directions),
        ("A6", "operator oracles", a6_operator_oracles),
        ("A7", "static-input null", a7_static_null),
        ("A8", "determinism", a8_determinism),
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let started = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("{id} {name}: PASS [{secs:.1}s] {d}"),
            Err(d) => {
                failed += 1;
                println!("{id} {name}: FAIL [{secs:.1}s] {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
