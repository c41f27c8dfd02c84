use proptest::prelude::*;
use rand::Rng;

use spikeseg::autodiff::{Tape, Var};
use spikeseg::conversion::{threshold_balance, transfer_weights, ConversionConfig};
use spikeseg::data::kfold_split;
use spikeseg::finetune::surrogate_grad;
use spikeseg::loss::{LossConfig, LossKind};
use spikeseg::optim::PlateauScheduler;
use spikeseg::rng::stream;
use spikeseg::segnet::{build_unet, Activation, NetworkBuilder, UNetConfig};
use spikeseg::snn::{forward_snn, IfNeurons};
use spikeseg::tensor::Tensor;

fn random(shape: &[usize], seed: u64, name: &str) -> Tensor<f64> {
    let mut rng = stream(seed, name, 0);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks d/dx sum(op(x) * r) against central differences for every input.
fn fd_check(inputs: Vec<Tensor<f64>>, seed: u64, op: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>], grads: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), grads)).collect();
        let y = op(&mut tape, &vars);
        let r = tape.leaf(random(tape.value(y).shape(), seed, "probe"), false);
        let prod = tape.mul(y, r).unwrap();
        let s = tape.sum(prod).unwrap();
        let v = tape.value(s).item().unwrap();
        if grads {
            tape.backward(s).unwrap();
        }
        let g: Vec<Option<Tensor<f64>>> = vars.iter().map(|&x| tape.take_grad(x)).collect();
        (v, g)
    };
    let (_, grads) = eval(&inputs, true);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let g = grads[k].as_ref().expect("input gradient");
        assert_eq!(g.shape(), x.shape());
        for j in 0..x.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= h;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            let a = g.data()[j];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
        }
    }
    worst
}

/// Pushes entries away from the ReLU kink so differences stay one-sided.
fn off_kink(mut t: Tensor<f64>) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < 1e-3 {
            *v += 2e-3;
        }
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn op_gradients_match_finite_differences(seed in 0u64..10_000, c in 1usize..3, hw in 1usize..4) {
        let n = 2 * hw;
        let x = random(&[2, c, n, n], seed, "x");
        let w = random(&[3, c, 3, 3], seed, "w");
        let wt = random(&[c, 2, 2, 2], seed, "wt");
        let tol = 1e-4;
        prop_assert!(fd_check(vec![x.clone(), w], seed, |t, v| t.conv2d(v[0], v[1], 1, 1).unwrap()) < tol);
        prop_assert!(fd_check(vec![x.clone(), wt], seed, |t, v| t.conv_transpose2d(v[0], v[1], 2, 0).unwrap()) < tol);
        prop_assert!(fd_check(vec![x.clone()], seed, |t, v| t.avg_pool2d(v[0], 2).unwrap()) < tol);
        prop_assert!(fd_check(vec![off_kink(x.clone())], seed, |t, v| t.relu(v[0]).unwrap()) < tol);
        prop_assert!(fd_check(vec![x.clone()], seed, |t, v| t.sigmoid(v[0]).unwrap()) < tol);
        let y = random(&[2, 1, n, n], seed, "y");
        let err = fd_check(vec![x.clone(), y], seed, |t, v| {
            let c = t.concat_channels(v[0], v[1]).unwrap();
            t.slice_channels(c, 1, 1).unwrap()
        });
        prop_assert!(err < tol);
        let z = random(&[2, c, n, n], seed, "z");
        let err = fd_check(vec![x, z], seed, |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let m = t.mul(a, v[1]).unwrap();
            t.scale(m, 0.7).unwrap()
        });
        prop_assert!(err < tol);
    }

    #[test]
    fn pooling_averages_blocks_and_unit_kernel_is_identity(seed in 0u64..10_000, hw in 1usize..5) {
        let x = random(&[1, 2, 2 * hw, 2 * hw], seed, "x");
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let p = tape.avg_pool2d(xv, 2).unwrap();
        let total: f64 = x.data().iter().sum();
        prop_assert!((tape.value(p).sum() * 4.0 - total).abs() < 1e-12);
        let eye = Tensor::from_fn(&[2, 2, 1, 1], |i| if i == 0 || i == 3 { 1.0 } else { 0.0 });
        let ones = Tensor::full(&[1, 1, 1, 1], 1.0);
        let e = tape.leaf(eye, false);
        let o = tape.leaf(ones, false);
        let y = tape.conv2d(xv, e, 1, 0).unwrap();
        prop_assert_eq!(tape.value(y), &x);
        let single = tape.leaf(x.batch_item(0).unwrap().reshape(&[2, 1, 2 * hw, 2 * hw]).unwrap(), false);
        let y1 = tape.conv2d(single, o, 1, 0).unwrap();
        prop_assert_eq!(tape.value(y1).data(), x.data());
    }

    #[test]
    fn losses_are_nonnegative_and_pixel_permutation_invariant(seed in 0u64..10_000, n in 2usize..30) {
        let mut rng = stream(seed, "loss", 0);
        let pred = Tensor::from_fn(&[1, 1, 1, n], |_| rng.random_range(0.0..1.0f64));
        let target = Tensor::from_fn(&[1, 1, 1, n], |_| (rng.random::<f64>() < 0.5) as u8 as f64);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(seed as usize % n);
        let pick = |t: &Tensor<f64>| Tensor::new(vec![1, 1, 1, n], perm.iter().map(|&i| t.data()[i]).collect()).unwrap();
        for kind in LossKind::ALL {
            let cfg = LossConfig::new(kind);
            let l = cfg.evaluate(&pred, &target).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((cfg.evaluate(&pick(&pred), &pick(&target)).unwrap() - l).abs() < 1e-12);
            prop_assert!(cfg.evaluate(&target, &target).unwrap() < 1e-5);
        }
    }

    #[test]
    fn plateau_lr_never_increases(losses in prop::collection::vec(0.0f64..2.0, 1..60), patience in 0usize..4) {
        let mut s = PlateauScheduler::new(patience, 0.5, 1e-4);
        let mut lr = 1e-2;
        for l in losses {
            let next = s.step(l, lr).unwrap();
            prop_assert!(next <= lr && next >= 1e-4);
            lr = next;
        }
    }

    #[test]
    fn if_neurons_bounded_and_follow_the_rate_law(c in 0.0f64..1.0, v in 0.1f64..3.0, steps in 50usize..400) {
        let drive = c * v;
        let mut n = IfNeurons::<f64>::new(1);
        let mut fired = 0;
        for _ in 0..steps {
            fired += n.step(&[drive], v);
            prop_assert!(n.spikes[0] == 0.0 || n.spikes[0] == 1.0);
            prop_assert!(n.u[0] >= 0.0 && n.u[0] <= 2.0 * v);
        }
        prop_assert!((fired as f64 - c * steps as f64).abs() <= 1.0 + 1e-9);
    }

    #[test]
    fn surrogate_is_a_bounded_hat(u in -5.0f64..5.0, vt in 0.1f64..3.0, alpha in 0.0f64..2.0) {
        let g = surrogate_grad(&Tensor::from_f64(&[1], &[u]).unwrap(), vt, alpha).data()[0];
        prop_assert!((0.0..=alpha).contains(&g));
        prop_assert_eq!(g == 0.0, alpha == 0.0 || (u - vt).abs() >= 1.0);
    }

    #[test]
    fn folds_partition_subjects(per in 1usize..8, k in 2usize..6, seed in 0u64..1000) {
        let n = per * k;
        let ids: Vec<u32> = (0..n as u32).collect();
        let folds = kfold_split(&ids, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut tested: Vec<u32> = folds.iter().flat_map(|f| f.test.clone()).collect();
        tested.sort();
        prop_assert_eq!(&tested, &ids);
        for f in &folds {
            prop_assert!(f.test.iter().all(|t| !f.train.contains(t)));
            prop_assert_eq!(f.test.len() + f.train.len(), n);
        }
    }
}

#[test]
fn balancing_upstream_thresholds_ignore_downstream_weights() {
    let mut rng = stream(3, "toy", 0);
    let mut b = NetworkBuilder::<f64>::new(1, 8, 8);
    let c1 = b.conv("conv1", b.input(), 3, 3, 1, Activation::Relu, &mut rng);
    let c2 = b.conv("conv2", c1, 3, 3, 1, Activation::Relu, &mut rng);
    b.conv("head", c2, 1, 1, 0, Activation::Identity, &mut rng);
    let ann = b.finish().unwrap();
    let images = Tensor::from_fn(&[2, 1, 8, 8], |i| (i % 7) as f64 / 7.0);
    let cfg = ConversionConfig {
        balance_steps: 50,
        calib_samples: 2,
        ..Default::default()
    };
    let balance = |net| {
        let mut snn = transfer_weights(&net, 50, 1.0).unwrap();
        threshold_balance(&mut snn, &images, &cfg, 5).unwrap()
    };
    let base = balance(ann.clone());
    let mut changed = ann.clone();
    let w = changed.param_index("conv2.weight").unwrap();
    changed.params[w].1 = changed.params[w].1.scale(3.0);
    let after = balance(changed);
    assert_eq!(base[0], after[0]);
    assert_ne!(base[1], after[1]);
}

#[test]
fn ann_and_snn_forward_are_reproducible() {
    let cfg = UNetConfig {
        base_channels: 2,
        depth: 1,
        height: 8,
        width: 8,
        ..Default::default()
    };
    let m = build_unet::<f64, _>(&cfg, &mut stream(8, "init", 0)).unwrap();
    let x = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i * 5) % 9) as f64 / 9.0);
    let eval = m.forward_ann(&x, false, &mut stream(1, "a", 0)).unwrap();
    assert_eq!(eval, m.forward_ann(&x, false, &mut stream(2, "b", 0)).unwrap());
    let train = m.forward_ann(&x, true, &mut stream(3, "d", 0)).unwrap();
    assert_eq!(train, m.forward_ann(&x, true, &mut stream(3, "d", 0)).unwrap());

    let snn = spikeseg::snn::SnnModel::from_network(m.net, 0.7, 16).unwrap();
    let (p1, s1) = forward_snn(&snn, &x, 16, 4).unwrap();
    let (p2, s2) = forward_snn(&snn, &x, 16, 4).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(s1, s2);
    assert!(s1.layers.iter().all(|l| (0.0..=1.0).contains(&l.frequency())));
}
