//! Acceptance criteria. Each prints one PASS/FAIL line; any failure makes
//! the target exit non-zero.
//!
//! Criteria 4–6 train on the default 139/20/50 synthetic dataset and take
//! most of an hour on a single core.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dsal_cli::csv_io::{read_metrics, MetricsRow};
use dsal_cli::report::{curves, full_reference, labels_to_reach};
use dsal_core::active::{train_full_reference, Environment, Protocol, SimulatedPool, TrainConfig};
use dsal_core::data::{load_pair, make_dataset, save_pair, DatasetConfig, Sample};
use dsal_core::metrics::{dsc, Mask};
use dsal_core::segnet::{
    build_model, forward, from_bytes, gradients, load_checkpoint, loss, loss_grad_check, save_checkpoint, to_bytes,
    LossWeights, Model, ModelConfig, Objective, ParamGroup, TargetBatch,
};
use dsal_core::tensor::{grad_check, Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

const EPS: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(y).len();
    g.mul_const(y, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

type Op = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>>;

fn primitive_cases() -> Vec<(&'static str, Op, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 6, 5], &mut rng);
    let k = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    let small = random(&[2, 2, 3, 4], &mut rng);
    let other = random(&[2, 3, 3, 4], &mut rng);
    // values kept away from the ReLU kink and from pooling ties
    let spread = Tensor::from_fn(&[1, 2, 6, 6], |i| {
        let v = ((i * 7919) % 72) as f64 / 72.0 - 0.5;
        if v.abs() < 0.05 { v + 0.1 } else { v }
    });
    let targets: Vec<u8> = (0..2 * 3 * 4).map(|i| (i * 5 % 3 == 0) as u8).collect();
    let (k1, b1, x2, b2, x3, k3) = (k.clone(), b.clone(), x.clone(), b.clone(), x.clone(), k.clone());
    let other2 = other.clone();
    vec![
        (
            "conv2d/input",
            Box::new(move |g: &mut Graph<f64>, v| {
                let kv = g.leaf(k1.clone(), false);
                let bv = g.leaf(b1.clone(), false);
                let y = g.conv2d(v, kv, bv, 2, 1)?;
                project(g, y, 1)
            }) as Op,
            x.clone(),
        ),
        (
            "conv2d/kernel",
            Box::new(move |g: &mut Graph<f64>, v| {
                let xv = g.leaf(x2.clone(), false);
                let bv = g.leaf(b2.clone(), false);
                let y = g.conv2d(xv, v, bv, 1, 1)?;
                project(g, y, 2)
            }),
            k.clone(),
        ),
        (
            "conv2d/bias",
            Box::new(move |g: &mut Graph<f64>, v| {
                let xv = g.leaf(x3.clone(), false);
                let kv = g.leaf(k3.clone(), false);
                let y = g.conv2d(xv, kv, v, 1, 0)?;
                project(g, y, 3)
            }),
            b,
        ),
        (
            "maxpool2d",
            Box::new(|g: &mut Graph<f64>, v| {
                let y = g.maxpool2d(v)?;
                project(g, y, 4)
            }),
            spread.clone(),
        ),
        (
            "upsample_bilinear",
            Box::new(|g: &mut Graph<f64>, v| {
                let y = g.upsample_bilinear(v, 2)?;
                project(g, y, 5)
            }),
            small.clone(),
        ),
        (
            "softmax_channels",
            Box::new(|g: &mut Graph<f64>, v| {
                let y = g.softmax_channels(v)?;
                project(g, y, 6)
            }),
            other.clone(),
        ),
        (
            "concat_channels",
            Box::new(move |g: &mut Graph<f64>, v| {
                let o = g.leaf(other2.clone(), false);
                let y = g.concat_channels(v, o)?;
                project(g, y, 7)
            }),
            small.clone(),
        ),
        (
            "relu",
            Box::new(|g: &mut Graph<f64>, v| {
                let y = g.relu(v);
                project(g, y, 8)
            }),
            spread,
        ),
        (
            "nll(softmax)",
            Box::new(move |g: &mut Graph<f64>, v| {
                let p = g.softmax_channels(v)?;
                g.nll(p, &targets)
            }),
            random(&[2, 2, 3, 4], &mut rng),
        ),
        (
            "weighted_sum",
            Box::new(|g: &mut Graph<f64>, v| {
                let a = project(g, v, 9)?;
                let a = g.sum(a);
                let b = project(g, v, 10)?;
                let b = g.sum(b);
                g.weighted_sum(&[(a, 0.1), (b, 0.6)])
            }),
            small,
        ),
    ]
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for (name, op, x) in primitive_cases() {
        match grad_check(op, &x, EPS) {
            Ok(r) if r.max_relative_error > worst.0 => worst = (r.max_relative_error, name),
            Ok(_) => {}
            Err(e) => return verdict(false, format!("{name}: {e}")),
        }
    }
    let cfg = ModelConfig {
        depth: 2,
        base_channels: 2,
        input_size: (8, 8),
        seed: 3,
        ..ModelConfig::default()
    };
    let mut model = build_model::<f64>(&cfg).unwrap();
    // off the ReLU kink that zero biases over dead inputs sit on
    let mut jitter = ChaCha8Rng::seed_from_u64(3);
    for p in model.params_mut() {
        for v in p.value.data_mut() {
            *v += jitter.random_range(-0.05..0.05);
        }
    }
    let (n, h, w) = (2, 8, 8);
    let mut ids = Vec::with_capacity(n * h * w);
    // one diamond per sample on a rippled background
    let x = Tensor::from_fn(&[n, 1, h, w], |i| {
        let (b, y, x) = (i / (h * w), (i / w) % h, i % w);
        let fg = (x as i64 - (2 + b) as i64).abs() + (y as i64 - 3).abs() <= 2;
        ids.push(u8::from(fg));
        let ripple = ((i * 37 % 11) as f64) / 40.0;
        if fg { 0.7 + ripple } else { 0.2 + ripple }
    });
    let t = TargetBatch::new([n, h, w], ids).unwrap();
    let full = loss_grad_check(&model, &x, &t, Objective::Weighted(LossWeights::default()), EPS).unwrap();
    let elapsed = start.elapsed();
    verdict(
        worst.0 <= 1e-4 && full.max_relative_error <= 1e-3 && elapsed < Duration::from_secs(60),
        format!(
            "primitives max rel err {:.2e} ({}) ≤ 1e-4; full loss over {} params {:.2e} ≤ 1e-3; {:.1}s < 60s",
            worst.0,
            worst.1,
            full.analytic.len(),
            full.max_relative_error,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn brute_dice(a: &Mask, b: &Mask) -> f64 {
    let fa: Vec<usize> = (0..a.data().len()).filter(|&i| a.data()[i] == 1).collect();
    let fb: Vec<usize> = (0..b.data().len()).filter(|&i| b.data()[i] == 1).collect();
    if fa.is_empty() && fb.is_empty() {
        return 1.0;
    }
    let both = fa.iter().filter(|i| fb.contains(i)).count();
    2.0 * both as f64 / (fa.len() + fb.len()) as f64
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut pairs = vec![
        (Mask::empty(32, 32), Mask::empty(32, 32)),
        (Mask::empty(32, 32), Mask::from_fn(32, 32, |i| i % 9 == 0)),
    ];
    while pairs.len() < 100 {
        let (da, db) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let a = Mask::from_fn(32, 32, |_| rng.random_bool(da));
        let b = Mask::from_fn(32, 32, |_| rng.random_bool(db));
        pairs.push((a, b));
    }
    let mismatches = pairs
        .iter()
        .filter(|(a, b)| dsc(a, b).unwrap() != brute_dice(a, b))
        .count();
    verdict(
        mismatches == 0,
        format!("{} random 32×32 pairs (incl. empty masks), {mismatches} mismatches", pairs.len()),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Verdict {
    let data = make_dataset(&DatasetConfig {
        n_train: 3,
        n_val: 1,
        n_test: 1,
        ..DatasetConfig::default()
    })
    .unwrap();
    let images: Vec<&Tensor<f32>> = data.train.iter().map(|s| &s.image).collect();
    let masks: Vec<&Mask> = data.train.iter().map(|s| s.mask.as_ref().unwrap()).collect();
    let x = Tensor::stack(&images).unwrap();
    let t = TargetBatch::from_masks(&masks).unwrap();

    let final_only = LossWeights::new(0.0, 0.0, 1.0);
    let model = build_model::<f32>(&ModelConfig {
        loss_weights: final_only,
        seed: 9,
        ..ModelConfig::default()
    })
    .unwrap();
    let weighted = gradients(&model, &x, &t, Objective::Weighted(final_only)).unwrap();
    let single = gradients(&model, &x, &t, Objective::FinalHeadOnly).unwrap();
    let mut identical = weighted.loss.total.to_bits() == single.loss.total.to_bits();
    let mut trunk = 0;
    for ((p, a), b) in model.params().iter().zip(&weighted.params).zip(&single.params) {
        if p.group == ParamGroup::Trunk {
            trunk += a.len();
            identical &= a.iter().zip(b).all(|(u, v)| u.to_bits() == v.to_bits());
        }
    }

    let model = build_model::<f32>(&ModelConfig::default()).unwrap();
    let l = loss(&forward(&model, &x).unwrap(), &t, &LossWeights::default()).unwrap();
    let [ll, lm, lf] = l.per_head;
    let expected = 0.0f32 + 0.1f32 * ll + 0.3f32 * lm + 0.6f32 * lf;
    verdict(
        identical && l.total == expected,
        format!(
            "α=(0,0,1): total and {trunk} trunk gradients bit-identical = {identical}; \
             default α: total {} vs 0.1·{ll}+0.3·{lm}+0.6·{lf} = {expected}",
            l.total
        ),
    )
}

// ---------------------------------------------------------------- 4

fn default_environment() -> Environment {
    let d = make_dataset(&DatasetConfig::default()).unwrap();
    Environment {
        pool: SimulatedPool::new(d.train).unwrap(),
        val: d.val,
        test: d.test,
    }
}

fn criterion_4() -> Verdict {
    let env = default_environment();
    let protocol = Protocol {
        model: ModelConfig::default(),
        train: TrainConfig::default(),
        n_init: 10,
        label_budget: 139,
    };
    let start = Instant::now();
    let full = train_full_reference(&env, &protocol, 0, 100).unwrap();
    let elapsed = start.elapsed();
    verdict(
        full.test_dsc >= 0.85 && elapsed <= Duration::from_secs(15 * 60),
        format!(
            "{} labeled 64×64, 100 epochs: test DSC {:.4} ≥ 0.85 in {:.0}s ≤ 900s",
            full.labels_used,
            full.test_dsc,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 5, 6, 7

fn dsal(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_dsal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .status()
        .expect("spawn dsal");
    assert!(status.success(), "dsal {args:?} failed with {status}");
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path.display().to_string()
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Default dataset and model, both policies, five seeds, 80-label budget.
fn protocol_experiment(dir: &Path) -> (Vec<MetricsRow>, Duration) {
    let config = write_config(
        dir,
        &format!(
            "output_dir = {:?}\n\n[experiment]\npolicies = [\"consistency_high\", \"random\"]\n\
             seeds = {SEEDS:?}\nn_init = 10\nk = 10\nlabel_budget = 80\nepochs_per_round = 20\n\
             full_reference_epochs = 100\nsave_checkpoints = false\n",
            dir.join("run").display().to_string()
        ),
    );
    let start = Instant::now();
    dsal(&["generate", "--config", &config]);
    dsal(&["run", "--config", &config]);
    let elapsed = start.elapsed();
    let metrics = dir.join("run").join("metrics.csv");
    dsal(&["report", &metrics.display().to_string()]);
    (read_metrics(&metrics).unwrap(), elapsed)
}

fn criterion_5(rows: &[MetricsRow]) -> Verdict {
    let at_round_2: Vec<&MetricsRow> = rows
        .iter()
        .filter(|r| r.policy == "consistency_high" && r.round == 2)
        .collect();
    let pool = 139 - at_round_2.first().map_or(139, |r| r.labels_used);
    let rhos: Vec<Option<f64>> = at_round_2.iter().map(|r| r.spearman).collect();
    let hits = rhos.iter().filter(|r| r.is_some_and(|v| v >= 0.3)).count();
    let shown: Vec<String> = rhos
        .iter()
        .map(|r| r.map_or_else(|| "NA".into(), |v| format!("{v:.3}")))
        .collect();
    verdict(
        hits >= 4 && pool >= 100 && rhos.len() == SEEDS.len(),
        format!(
            "consistency_high after round 2, pool of {pool}: rho per seed [{}], {hits}/5 ≥ 0.3 (need 4)",
            shown.join(", ")
        ),
    )
}

fn criterion_6(rows: &[MetricsRow], elapsed: Duration) -> Verdict {
    let Some((full, pool)) = full_reference(rows) else {
        return verdict(false, "no full-annotation rows");
    };
    let curves: BTreeMap<String, _> = curves(rows).into_iter().map(|c| (c.policy.clone(), c)).collect();
    let (Some(high), Some(random)) = (curves.get("consistency_high"), curves.get("random")) else {
        return verdict(false, "missing a policy curve");
    };
    let reach = labels_to_reach(high, 0.95 * full);
    let reach_ok = reach.is_some_and(|n| n as f64 <= 0.6 * pool as f64);
    let mut worst_gap = f64::INFINITY;
    for p in &high.points {
        if let Some(q) = random.points.iter().find(|q| q.x == p.x) {
            worst_gap = worst_gap.min(p.mean - q.mean);
        }
    }
    verdict(
        reach_ok && worst_gap >= -0.02 && elapsed <= Duration::from_secs(2 * 3600),
        format!(
            "full DSC {full:.4}; consistency_high reaches 95% at {} labels (limit {:.1}); \
             min(high − random) over common points {worst_gap:+.4} ≥ -0.02; {:.0}s ≤ 7200s",
            reach.map_or_else(|| "never".into(), |n| n.to_string()),
            0.6 * pool as f64,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7(dir: &Path) -> Verdict {
    let body = |out: &Path| {
        format!(
            "output_dir = {:?}\ndata_dir = {:?}\n\n[dataset]\nresolution = [16, 16]\nn_train = 24\nn_val = 4\nn_test = 4\n\
             seed = 5\n\n[model]\ndepth = 2\nbase_channels = 2\ninput_size = [16, 16]\n\n[experiment]\n\
             policies = [\"consistency_high\", \"random\"]\nseeds = [1, 2]\nn_init = 4\nk = 4\nlabel_budget = 12\n\
             epochs_per_round = 2\nbatch_size = 4\nfull_reference_epochs = 3\n",
            out.display().to_string(),
            dir.join("data").display().to_string()
        )
    };
    let runs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let sub = dir.join(name);
            std::fs::create_dir_all(&sub).unwrap();
            let cfg = write_config(&sub, &body(&sub.join("out")));
            if *name == "a" {
                dsal(&["generate", "--config", &cfg]);
            }
            dsal(&["run", "--config", &cfg]);
            std::fs::read(sub.join("out").join("metrics.csv")).unwrap()
        })
        .collect();
    let lines = String::from_utf8_lossy(&runs[0]).lines().count();
    verdict(
        runs[0] == runs[1] && lines > 2,
        format!("two `dsal run` executions: {} vs {} bytes, {lines} lines, identical = {}", runs[0].len(), runs[1].len(), runs[0] == runs[1]),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8(dir: &Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pgm_ok = 0;
    for i in 0..200 {
        let (h, w) = (rng.random_range(1..48), rng.random_range(1..48));
        let image = Tensor::from_fn(&[1, h, w], |_| rng.random_range(0..=255u8) as f32 / 255.0);
        let density = rng.random_range(0.0..1.0);
        let mask = Mask::from_fn(h, w, |_| rng.random_bool(density));
        let s = Sample::new(format!("pgm_{i:03}"), image, Some(mask)).unwrap();
        let (ip, mp) = save_pair(&s, dir).unwrap();
        let back = load_pair(&ip, &mp).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&back.image) == bits(&s.image) && back == s {
            pgm_ok += 1;
        }
    }
    let mut ckpt_ok = 0;
    for i in 0..30u64 {
        let depth = rng.random_range(1..4);
        let side = 4 << depth;
        let mut model: Model<f32> = build_model(&ModelConfig {
            depth,
            base_channels: rng.random_range(1..5),
            input_size: (side, side),
            aux_stage_lower: 0,
            aux_stage_middle: depth.saturating_sub(1).max(usize::from(depth > 1)),
            loss_weights: LossWeights::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.01..1.0)),
            seed: rng.random(),
            ..ModelConfig::default()
        })
        .unwrap_or_else(|_| build_model(&ModelConfig::default()).unwrap());
        for p in model.params_mut() {
            for v in p.value.data_mut() {
                *v = f32::from_bits(rng.random_range(0..0x7f00_0000u32)) * if rng.random_bool(0.5) { -1.0 } else { 1.0 };
            }
        }
        let round = rng.random();
        let path = dir.join(format!("m{i}.ckpt"));
        save_checkpoint(&model, round, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let bytes_again = to_bytes(&back.model, back.round);
        if back.model == model && back.round == round && bytes_again == std::fs::read(&path).unwrap() {
            ckpt_ok += 1;
        }
        assert_eq!(from_bytes(&bytes_again).unwrap().model, model);
    }
    verdict(
        pgm_ok == 200 && ckpt_ok == 30,
        format!("PGM pairs {pgm_ok}/200 bit-exact; checkpoints {ckpt_ok}/30 bit-exact"),
    )
}

fn main() {
    let work = tempfile::tempdir().unwrap();
    let mut report: Vec<(u8, &str, Verdict)> = Vec::new();
    let mut record = |id: u8, name: &'static str, v: Verdict| {
        println!("criterion {id} {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        report.push((id, name, v));
    };
    record(1, "gradient suite", criterion_1());
    record(2, "DSC oracle", criterion_2());
    record(3, "loss reduction equivalence", criterion_3());
    record(8, "IO round-trip", criterion_8(work.path()));
    let det_dir = work.path().join("determinism");
    std::fs::create_dir_all(&det_dir).unwrap();
    record(7, "determinism", criterion_7(&det_dir));
    record(4, "training sanity", criterion_4());
    let exp_dir = work.path().join("experiment");
    std::fs::create_dir_all(&exp_dir).unwrap();
    let (rows, elapsed) = protocol_experiment(&exp_dir);
    record(5, "score/real-DSC rank correlation", criterion_5(&rows));
    record(6, "label efficiency", criterion_6(&rows, elapsed));
    if let Ok(summary) = std::fs::read_to_string(exp_dir.join("run").join("summary.txt")) {
        println!("--- experiment summary ---\n{summary}");
    }

    report.sort_by_key(|r| r.0);
    let failed: Vec<String> = report.iter().filter(|r| !r.2.pass).map(|r| format!("{} {}", r.0, r.1)).collect();
    println!("acceptance: {}/{} criteria passed", report.len() - failed.len(), report.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
