//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Positional arguments select criteria by
//! substring, e.g. `cargo test --test acceptance -- rate`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use spikeseg::autodiff::Tape;
use spikeseg::config::RunConfig;
use spikeseg::conversion::{threshold_balance, transfer_weights, ConversionConfig};
use spikeseg::finetune::{record_forward, recorded_probs, snn_backward, surrogate_grad};
use spikeseg::loss::{LossConfig, LossKind};
use spikeseg::metrics::{dice_2d, dice_3d, read_metrics_csv};
use spikeseg::pipeline::{read_firing_csv, Pipeline, CONVERGENCE_TOL};
use spikeseg::rng::stream;
use spikeseg::segnet::{build_unet, Activation, Network, NetworkBuilder, UNetConfig};
use spikeseg::snn::{neuron_rates, IfNeurons, SnnModel};
use spikeseg::tensor::Tensor;
use spikeseg::training::TrainReport;

use rand::Rng;

const DESK: &str = include_str!("../../../configs/desk.cfg");

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

// 1
fn ann_gradients() -> Outcome {
    let cfg = UNetConfig {
        base_channels: 2,
        depth: 2,
        height: 16,
        width: 16,
        dropout_rate: 0.0,
        ..Default::default()
    };
    let net = build_unet::<f64, _>(&cfg, &mut stream(1, "init", 0)).unwrap().net;
    let mut rng = stream(1, "data", 0);
    let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.random::<f64>());
    let y = Tensor::from_fn(&[2, 1, 16, 16], |_| (rng.random::<f64>() < 0.3) as u8 as f64);
    let loss = LossConfig::new(LossKind::BceDice);
    let eval = |n: &Network<f64>| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let params = n.param_leaves(&mut tape, true);
        let input = tape.leaf(x.clone(), false);
        let outs = n.forward_tape(&mut tape, input, &params, false, &mut stream(0, "unused", 0)).unwrap();
        let p = tape.sigmoid(*outs.last().unwrap()).unwrap();
        let l = tape.loss(p, &y, &loss).unwrap();
        let v = tape.value(l).item().unwrap();
        tape.backward(l).unwrap();
        (v, params.iter().map(|&p| tape.take_grad(p).unwrap()).collect())
    };
    let (_, grads) = eval(&net);
    let h = 1e-6;
    let (mut worst, mut count) = (0.0f64, 0usize);
    for (pi, g) in grads.iter().enumerate() {
        for j in 0..g.numel() {
            let mut a = net.clone();
            a.params[pi].1.data_mut()[j] += h;
            let mut b = net.clone();
            b.params[pi].1.data_mut()[j] -= h;
            let fd = (eval(&a).0 - eval(&b).0) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[j], fd));
            count += 1;
        }
    }
    check(worst < 1e-3, format!("{count} parameters, max relative error {worst:.2e}"))
}

// 2
fn loss_gradients() -> Outcome {
    let mut rng = stream(2, "loss", 0);
    let pred = Tensor::from_fn(&[3, 1, 5, 5], |_| rng.random_range(0.05..0.95f64));
    let target = Tensor::from_fn(&[3, 1, 5, 5], |_| (rng.random::<f64>() < 0.4) as u8 as f64);
    let mut worst = 0.0f64;
    for kind in LossKind::ALL {
        let cfg = LossConfig::new(kind);
        let g = cfg.value_and_grad(&pred, &target, true).unwrap().1.unwrap();
        let h = 1e-6;
        for j in 0..pred.numel() {
            let mut a = pred.clone();
            a.data_mut()[j] += h;
            let mut b = pred.clone();
            b.data_mut()[j] -= h;
            let fd = (cfg.evaluate(&a, &target).unwrap() - cfg.evaluate(&b, &target).unwrap()) / (2.0 * h);
            worst = worst.max((g.data()[j] - fd).abs());
        }
    }
    let half = Tensor::full(&[2, 1, 4, 4], 0.5);
    let bce_half = LossConfig::new(LossKind::Bce).evaluate(&half, &target_like(&half, 0.0)).unwrap();
    let ones = Tensor::from_fn(&[2, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    let dice_perfect = LossConfig::new(LossKind::Dice).evaluate(&ones, &ones).unwrap();
    let spot = (bce_half - std::f64::consts::LN_2).abs().max(dice_perfect.abs());
    check(
        worst < 1e-5 && spot < 1e-6,
        format!("max |analytic - fd| {worst:.2e}, spot-value error {spot:.2e}"),
    )
}

fn target_like(t: &Tensor<f64>, v: f64) -> Tensor<f64> {
    Tensor::full(t.shape(), v)
}

// 3
fn if_rate_law() -> Outcome {
    let steps = 2000;
    // compared in spike counts: |fired - c T| <= 1 is the 1/T bound without rounding
    let mut worst = 0usize;
    for k in 1..=9 {
        let c = k as f64 / 10.0;
        let mut n = IfNeurons::<f64>::new(1);
        let fired: usize = (0..steps).map(|_| n.step(&[c], 1.0)).sum();
        worst = worst.max(fired.abs_diff(k * steps / 10));
    }
    check(worst <= 1, format!("max |rate - c| = {worst}/{steps}"))
}

// 4
fn conversion_fidelity() -> Outcome {
    let mut rng = stream(4, "toy", 0);
    let mut b = NetworkBuilder::<f64>::new(1, 12, 12);
    let c1 = b.conv("conv1", b.input(), 4, 3, 1, Activation::Relu, &mut rng);
    let c2 = b.conv("conv2", c1, 4, 3, 1, Activation::Relu, &mut rng);
    b.conv("head", c2, 1, 1, 0, Activation::Identity, &mut rng);
    let ann = b.finish().unwrap();
    let image = Tensor::from_fn(&[1, 1, 12, 12], |i| {
        let (y, x) = ((i / 12) as f64, (i % 12) as f64);
        0.5 + 0.45 * ((x * 0.7).sin() * (y * 0.5).cos())
    });
    let steps = 2000;
    let mut snn = transfer_weights(&ann, steps, 1.0).unwrap();
    let cfg = ConversionConfig {
        balance_steps: steps,
        calib_samples: 1,
        ..Default::default()
    };
    threshold_balance(&mut snn, &image, &cfg, 11).unwrap();
    let rates = neuron_rates(&snn, &image, steps, 12).unwrap();

    // ANN with each spiking layer's output divided by its threshold
    let mut x = image.data().to_vec();
    let mut maes = Vec::new();
    for layer in [c1, c2] {
        let v = snn.threshold(layer).unwrap();
        let pre = layer_relu(&ann, layer, &x);
        let mae = pre.iter().zip(&rates[layer]).map(|(a, r)| (a - r * v).abs()).sum::<f64>() / pre.len() as f64;
        maes.push(mae);
        x = pre.iter().map(|a| a / v).collect();
    }
    let worst = maes.iter().cloned().fold(0.0, f64::max);
    check(worst < 0.05, format!("per-layer MAE {maes:.4?}"))
}

/// `relu(W x)` of one conv layer of a plain feed-forward chain.
fn layer_relu(net: &Network<f64>, layer: usize, x: &[f64]) -> Vec<f64> {
    let w = &net.params[net.layers[layer].weight().unwrap()].1;
    let (co, ci, k, _) = w.dims4().unwrap();
    let (h, wd) = (12usize, 12usize);
    let p = k / 2;
    let mut out = vec![0.0; co * h * wd];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..wd {
                let mut s = 0.0;
                for c in 0..ci {
                    for dy in 0..k {
                        for dx in 0..k {
                            let (iy, ix) = (y + dy, xx + dx);
                            if iy < p || ix < p || iy - p >= h || ix - p >= wd {
                                continue;
                            }
                            s += w.data()[((o * ci + c) * k + dy) * k + dx] * x[(c * h + iy - p) * wd + ix - p];
                        }
                    }
                }
                out[(o * h + y) * wd + xx] = s.max(0.0);
            }
        }
    }
    out
}

fn toy_snn(steps: usize) -> SnnModel<f64> {
    let cfg = UNetConfig {
        base_channels: 2,
        depth: 1,
        height: 8,
        width: 8,
        dropout_rate: 0.0,
        ..Default::default()
    };
    let m = build_unet::<f64, _>(&cfg, &mut stream(21, "init", 0)).unwrap();
    SnnModel::from_network(m.net, 0.5, steps).unwrap()
}

fn toy_image() -> Vec<f64> {
    (0..64).map(|i| ((i * 37) % 11) as f64 / 10.0).collect()
}

fn toy_target() -> Tensor<f64> {
    Tensor::from_fn(&[1, 1, 8, 8], |i| ((i / 8) >= 3 && i % 8 >= 2 && i % 8 < 6) as u8 as f64)
}

fn toy_loss(m: &SnnModel<f64>, cfg: &LossConfig, steps: usize) -> (f64, Tensor<f64>, spikeseg::snn::BpttBuffers<f64>) {
    let b = record_forward(m, &toy_image(), steps, &mut stream(5, "poisson", 0), None).unwrap();
    let p = Tensor::new(vec![1, 1, 8, 8], recorded_probs(m, &b)).unwrap();
    let (l, g) = cfg.value_and_grad(&p, &toy_target(), true).unwrap();
    (l, g.unwrap(), b)
}

// 5
fn surrogate() -> Outcome {
    let (vt, alpha) = (0.8, 0.3);
    let u = Tensor::from_f64(&[4], &[vt - 1.0, vt, vt + 0.5, vt + 1.0]).unwrap();
    let got = surrogate_grad(&u, vt, alpha);
    let want = [0.0, alpha, alpha / 2.0, 0.0];
    let values_ok = got.data() == want;

    let steps = 10;
    let m = toy_snn(steps);
    let (_, g, b) = toy_loss(&m, &LossConfig::new(LossKind::BceDice), steps);
    let grads = snn_backward(&m, &b, g.data(), 0.0, false).unwrap();
    let head = m.net.param_index("head.weight").unwrap();
    let hidden_zero = grads
        .params
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != head)
        .all(|(_, t)| t.data().iter().all(|&v| v == 0.0));
    let head_nonzero = grads.params[head].data().iter().any(|&v| v != 0.0);
    check(
        values_ok && hidden_zero && head_nonzero,
        format!("values {:?}, alpha=0 hidden all zero {hidden_zero}, head nonzero {head_nonzero}", got.data()),
    )
}

// 6
fn output_layer_exact() -> Outcome {
    let steps = 12;
    let m = toy_snn(steps);
    let head = m.net.param_index("head.weight").unwrap();
    let mut worst = 0.0f64;
    for kind in LossKind::ALL {
        let cfg = LossConfig::new(kind);
        let (_, g, b) = toy_loss(&m, &cfg, steps);
        let grads = snn_backward(&m, &b, g.data(), 0.3, false).unwrap();
        for j in 0..m.net.params[head].1.numel() {
            let h = 1e-5;
            let mut plus = m.clone();
            plus.net.params[head].1.data_mut()[j] += h;
            let mut minus = m.clone();
            minus.net.params[head].1.data_mut()[j] -= h;
            let fd = (toy_loss(&plus, &cfg, steps).0 - toy_loss(&minus, &cfg, steps).0) / (2.0 * h);
            worst = worst.max(rel_err(grads.params[head].data()[j], fd));
        }
    }
    check(worst < 1e-3, format!("max relative error {worst:.2e}"))
}

fn desk(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::from_text(DESK).unwrap();
    cfg.seed = seed;
    cfg
}

/// Data, every training stage with direct training, and evaluation of fold 0.
fn desk_run(seed: u64, out: &Path) -> Vec<(String, f64, f64)> {
    let p = Pipeline::new(desk(seed), out).unwrap();
    p.gen_data().unwrap();
    p.run_fold(0, true).unwrap()
}

fn dice_of(res: &[(String, f64, f64)], model: &str) -> (f64, f64) {
    let r = res.iter().find(|r| r.0 == model).unwrap();
    (r.1 / 100.0, r.2 / 100.0)
}

fn convergence(out: &Path) -> (usize, usize) {
    let p = Pipeline::new(RunConfig::from_text(DESK).unwrap(), out).unwrap();
    let dir = p.fold_dir(0);
    let ft = TrainReport::read_csv(&dir.join("history_finetune.csv")).unwrap();
    let direct = TrainReport::read_csv(&dir.join("history_direct.csv")).unwrap();
    ft.epochs_to_common_plateau(&direct, CONVERGENCE_TOL)
}

/// Per-seed `(model, dice2d, dice3d)` rows and the run time in seconds.
type SeedResult = (u64, Vec<(String, f64, f64)>, f64);

struct DeskRuns {
    dirs: Vec<tempfile::TempDir>,
    results: Vec<SeedResult>,
}

const DESK_SEEDS: [u64; 3] = [7, 8, 9];

impl DeskRuns {
    fn get(cache: &mut Option<DeskRuns>, count: usize) -> &DeskRuns {
        let runs = cache.get_or_insert_with(|| DeskRuns {
            dirs: Vec::new(),
            results: Vec::new(),
        });
        while runs.results.len() < count {
            let seed = DESK_SEEDS[runs.results.len()];
            let dir = tempfile::tempdir().unwrap();
            let t = Instant::now();
            let res = desk_run(seed, dir.path());
            runs.results.push((seed, res, t.elapsed().as_secs_f64()));
            runs.dirs.push(dir);
        }
        runs
    }
}

// 7
fn pipeline_pattern(cache: &mut Option<DeskRuns>) -> Outcome {
    let runs = DeskRuns::get(cache, 1);
    let (_, res, secs) = &runs.results[0];
    let mut detail = Vec::new();
    let mut ok = true;
    for (dim, pick) in [("2d", 0usize), ("3d", 1)] {
        let get = |m: &str| {
            let d = dice_of(res, m);
            if pick == 0 {
                d.0
            } else {
                d.1
            }
        };
        let (ann, conv, ft) = (get("ann"), get("converted"), get("finetuned"));
        ok &= conv < ft && ft >= conv + 0.05 && ann - ft <= 0.05;
        detail.push(format!("{dim}: ann {ann:.4} converted {conv:.4} finetuned {ft:.4}"));
    }
    detail.push(format!("fold run took {secs:.0} s including direct training"));
    check(ok, detail.join("; "))
}

// 8
fn convergence_comparison(cache: &mut Option<DeskRuns>) -> Outcome {
    let runs = DeskRuns::get(cache, DESK_SEEDS.len());
    let mut ok = true;
    let mut detail = Vec::new();
    for ((seed, _, _), dir) in runs.results.iter().zip(&runs.dirs) {
        let (ft, direct) = convergence(dir.path());
        ok &= ft < direct;
        detail.push(format!("seed {seed}: finetune {ft} vs direct {direct} epochs"));
    }
    check(ok, detail.join("; "))
}

// 9
fn firing_trend(cache: &mut Option<DeskRuns>) -> Outcome {
    let runs = DeskRuns::get(cache, 1);
    let p = Pipeline::new(desk(DESK_SEEDS[0]), runs.dirs[0].path()).unwrap();
    let mean = |model: &str| {
        let rows = read_firing_csv(&p.fold_dir(0).join(format!("firing_{model}.csv"))).unwrap();
        rows.iter().map(|r| r.frequency).sum::<f64>() / rows.len() as f64
    };
    let (conv, ft) = (mean("converted"), mean("finetuned"));
    check(ft > conv, format!("mean firing frequency converted {conv:.4}, finetuned {ft:.4}"))
}

// 10
fn dice_oracle() -> Outcome {
    let mut rng = stream(10, "masks", 0);
    let mut mismatches = 0;
    for i in 0..1000 {
        let n = rng.random_range(1..40usize);
        let density = rng.random::<f64>();
        let p: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < density).collect();
        let r: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < density).collect();
        let both = p.iter().zip(&r).filter(|(a, b)| **a && **b).count();
        let total = p.iter().filter(|&&a| a).count() + r.iter().filter(|&&b| b).count();
        let want = if total == 0 { 1.0 } else { 2.0 * both as f64 / total as f64 };
        let got = if i % 2 == 0 { dice_2d(&p, &r) } else { dice_3d(&p, &r) }.unwrap();
        mismatches += (got != want) as usize;
    }
    let a = [true, false, true, true];
    let b = [false, true, false, false];
    let e = [false; 4];
    let cases = dice_2d(&a, &a).unwrap() == 1.0
        && dice_2d(&a, &b).unwrap() == 0.0
        && dice_2d(&e, &e).unwrap() == 1.0
        && dice_3d(&e, &e).unwrap() == 1.0;
    check(
        mismatches == 0 && cases,
        format!("{mismatches} mismatches in 1000 pairs, special cases ok {cases}"),
    )
}

fn tiny_config() -> RunConfig {
    RunConfig::from_text(
        "seed = 3\nn_subjects = 6\nfolds = 3\nbase_channels = 2\ndepth = 1\nT = 8\nT_train = 8\nT_balance = 8\n\
         ann_epochs = 2\nsnn_epochs = 2\ndirect_epochs = 2\nbatch_size = 4\nmax_train_slices = 8\n\
         calib_samples = 4\nval_fraction = 0.25\n",
    )
    .unwrap()
}

fn artifacts(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            if name.ends_with(".ckpt") || name.starts_with("metrics_") || name.ends_with(".csv") {
                out.push((path.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

// 11
fn determinism() -> Outcome {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny_config(), dir.path()).unwrap();
        p.gen_data().unwrap();
        p.run_fold(0, true).unwrap();
        p.report().unwrap();
        let files = artifacts(dir.path());
        // the metrics must also parse
        for (name, _) in files.iter().filter(|(n, _)| n.contains("metrics_")) {
            read_metrics_csv(&dir.path().join(name)).unwrap();
        }
        files
    };
    let (a, b) = (run(), run());
    let ckpts = a.iter().filter(|(n, _)| n.ends_with(".ckpt")).count();
    let metrics = a.iter().filter(|(n, _)| n.contains("metrics_")).count();
    check(
        a == b && ckpts >= 4 && metrics >= 8,
        format!("{} files compared ({ckpts} checkpoints, {metrics} metrics CSVs)", a.len()),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut cache = None;
    type Case<'a> = (&'a str, Box<dyn FnMut(&mut Option<DeskRuns>) -> Outcome>);
    let cases: Vec<Case> = vec![
        ("01 ann gradient oracle", Box::new(|_| ann_gradients())),
        ("02 loss gradient oracle", Box::new(|_| loss_gradients())),
        ("03 if rate law", Box::new(|_| if_rate_law())),
        ("04 conversion fidelity", Box::new(|_| conversion_fidelity())),
        ("05 surrogate correctness", Box::new(|_| surrogate())),
        ("06 output layer exactness", Box::new(|_| output_layer_exact())),
        ("07 pipeline dice pattern", Box::new(pipeline_pattern)),
        ("08 convergence comparison", Box::new(convergence_comparison)),
        ("09 firing rate trend", Box::new(firing_trend)),
        ("10 dice metric oracle", Box::new(|_| dice_oracle())),
        ("11 determinism", Box::new(|_| determinism())),
    ];
    let mut failed = 0;
    for (name, mut f) in cases {
        if !filters.is_empty() && !filters.iter().any(|q| name.contains(q.as_str())) {
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(|| f(&mut cache))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS {name} ({secs:.1} s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1} s): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
