//! Spike-based backpropagation through time with a linear surrogate, the
//! fine-tuning loop for converted networks, and direct SNN training.

use rayon::prelude::*;

use crate::autodiff::{dropout_mask, sigmoid};
use crate::data::SliceSet;
use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::optim::{AdamState, PlateauScheduler};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use crate::segnet::{build_unet, LayerKind, Network, UNetConfig};
use crate::snn::{forward_snn, simulate_sample, BpttBuffers, OutputDecoding, Plan, SampleOptions, SnnModel};
use crate::tensor::Tensor;
use crate::training::{mean_dice, BestTracker, EpochRecord, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateConfig {
    pub alpha: f64,
    /// Simulation steps per training forward pass.
    pub train_steps: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            alpha: 0.3,
            train_steps: 200,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("surrogate alpha {} must be non-negative", self.alpha)));
        }
        if self.train_steps == 0 {
            return Err(Error::Config("training time steps must be positive".into()));
        }
        Ok(())
    }
}

#[inline]
fn hat<S: Scalar>(u: S, v_t: S, alpha: S) -> S {
    alpha * (S::one() - (u - v_t).abs()).max(S::zero())
}

/// `alpha * max(0, 1 - |u - v_t|)` elementwise.
pub fn surrogate_grad<S: Scalar>(u: &Tensor<S>, v_t: S, alpha: S) -> Tensor<S> {
    u.map(|x| hat(x, v_t, alpha))
}

/// Weight gradients of one sample, indexed like `net.params`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnnGradients<S> {
    pub params: Vec<Tensor<S>>,
    /// Contribution of each step `t` to every parameter gradient, when requested.
    pub per_step: Option<Vec<Vec<Tensor<S>>>>,
}

/// Records a full forward pass of one `[C, H, W]` image for the reverse sweep.
pub fn record_forward<S: Scalar>(
    model: &SnnModel<S>,
    image: &[S],
    steps: usize,
    rng: &mut crate::rng::StreamRng,
    masks: Option<&[Option<Vec<S>>]>,
) -> Result<BpttBuffers<S>> {
    let plan = Plan::new(&model.net)?;
    if image.len() != plan.len(0) {
        return Err(shape_err!("image of {} values, network expects {}", image.len(), plan.len(0)));
    }
    let opts = SampleOptions {
        record: true,
        ..Default::default()
    };
    let run = simulate_sample(model, &plan, image, rng, steps, masks, opts, |_, _| {})?;
    Ok(run.buffers.expect("recording requested"))
}

/// Output probabilities `sigmoid(u_out * scale)` of a recorded pass.
pub fn recorded_probs<S: Scalar>(model: &SnnModel<S>, buffers: &BpttBuffers<S>) -> Vec<S> {
    let scale = S::lit(model.decode.logit_scale(buffers.steps));
    buffers.u_out.iter().map(|&u| sigmoid(u * scale)).collect()
}

fn add_into<S: Scalar>(slot: &mut Option<Vec<S>>, g: Vec<S>) {
    match slot {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, &y)| *x += y),
        None => *slot = Some(g),
    }
}

/// Accumulates the weight gradient of a weighted layer and routes the
/// drive gradient `g` back to its input.
fn weighted_backward<S: Scalar>(
    net: &Network<S>,
    plan: &Plan,
    layer: usize,
    x: &[S],
    g: &[S],
    dw: &mut [S],
    adj: &mut [Option<Vec<S>>],
) {
    let l = &net.layers[layer];
    let geom = plan.geoms[layer].as_ref().expect("weighted layer");
    let w = net.params[l.weight().expect("weighted layer")].1.data();
    let src = l.inputs[0];
    let sparse = kernels::density(x) < kernels::SPARSE_DENSITY;
    match l.kind {
        LayerKind::Conv { .. } => {
            if sparse {
                kernels::conv2d_backward_weight_sparse_input(x, g, geom, dw);
            } else {
                kernels::conv2d_backward_weight(x, g, geom, dw);
            }
            if src != 0 {
                add_into(&mut adj[src], kernels::conv2d_backward_input(g, w, geom));
            }
        }
        LayerKind::ConvTranspose { .. } => {
            if sparse {
                kernels::conv2d_backward_weight_sparse_output(g, x, geom, dw);
            } else {
                kernels::conv2d_backward_weight(g, x, geom, dw);
            }
            if src != 0 {
                add_into(&mut adj[src], kernels::conv2d_forward(g, w, geom));
            }
        }
        _ => unreachable!("not a weighted layer"),
    }
}

/// Reverse sweep over a recorded pass given `grad_prob = dL/dp` for every
/// output pixel. The output layer is differentiated exactly; spiking layers
/// use the surrogate for `do/du`, the reset path is detached and thresholds
/// stay frozen. Layer values other than membranes are recomputed per step.
pub fn snn_backward<S: Scalar>(
    model: &SnnModel<S>,
    buffers: &BpttBuffers<S>,
    grad_prob: &[S],
    alpha: f64,
    per_step: bool,
) -> Result<SnnGradients<S>> {
    let net = &model.net;
    let steps = buffers.steps;
    if steps == 0 || buffers.inputs.len() != steps || buffers.membranes.len() != steps {
        return Err(Error::Usage(
            "no recorded forward pass; run record_forward before snn_backward".into(),
        ));
    }
    let plan = Plan::new(net)?;
    let out = net.output_layer();
    if grad_prob.len() != plan.len(out) || buffers.u_out.len() != plan.len(out) {
        return Err(shape_err!("output gradient of {} values, output has {}", grad_prob.len(), plan.len(out)));
    }
    let n = net.layers.len();
    let alpha = S::lit(alpha);
    let scale = S::lit(model.decode.logit_scale(steps));
    let probs = recorded_probs(model, buffers);
    let g_out: Vec<S> = probs
        .iter()
        .zip(grad_prob)
        .map(|(&p, &g)| g * p * (S::one() - p) * scale)
        .collect();

    let zeros = || -> Vec<Vec<S>> { net.params.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect() };
    let mut total = zeros();
    let mut history = per_step.then(|| vec![Vec::new(); steps]);
    let mut carry: Vec<Vec<S>> = (0..n)
        .map(|i| if net.layers[i].is_spiking() { vec![S::zero(); plan.len(i)] } else { Vec::new() })
        .collect();

    for t in (0..steps).rev() {
        let mut values: Vec<Vec<S>> = vec![Vec::new(); n];
        values[0].clone_from(&buffers.inputs[t]);
        for i in 1..out {
            if net.layers[i].weight().is_some() {
                let v = model.thresholds[i].expect("spiking layer has threshold");
                values[i] = buffers.membranes[t][i]
                    .iter()
                    .map(|&u| if u > v { S::one() } else { S::zero() })
                    .collect();
            } else {
                values[i] = crate::snn::structural(net, &plan, i, &values, Some(&buffers.masks));
            }
        }

        let mut step_grads = if per_step { zeros() } else { Vec::new() };
        let mut adj: Vec<Option<Vec<S>>> = vec![None; n];
        let head_w = net.layers[out].weight().expect("weighted head");
        {
            let target = if per_step { &mut step_grads[head_w] } else { &mut total[head_w] };
            weighted_backward(net, &plan, out, &values[net.layers[out].inputs[0]], &g_out, target, &mut adj);
        }
        for i in (1..out).rev() {
            let l = &net.layers[i];
            match l.kind {
                LayerKind::Conv { .. } | LayerKind::ConvTranspose { .. } => {
                    let v = model.thresholds[i].expect("spiking layer has threshold");
                    let mem = &buffers.membranes[t][i];
                    let a = adj[i].take();
                    for (j, c) in carry[i].iter_mut().enumerate() {
                        let up = a.as_ref().map_or(S::zero(), |a| a[j]);
                        *c += up * hat(mem[j], v, alpha);
                    }
                    let g_u = carry[i].clone();
                    if g_u.iter().all(|&x| x == S::zero()) {
                        continue;
                    }
                    let w = l.weight().expect("weighted layer");
                    let target = if per_step { &mut step_grads[w] } else { &mut total[w] };
                    weighted_backward(net, &plan, i, &values[l.inputs[0]], &g_u, target, &mut adj);
                }
                LayerKind::AvgPool { window } => {
                    if let Some(a) = adj[i].take() {
                        let (c, h, w) = plan.dims[l.inputs[0]];
                        if l.inputs[0] != 0 {
                            add_into(&mut adj[l.inputs[0]], kernels::avg_pool_backward(&a, (1, c, h, w), window));
                        }
                    }
                }
                LayerKind::Concat => {
                    if let Some(a) = adj[i].take() {
                        let (ca, h, w) = plan.dims[l.inputs[0]];
                        let cb = plan.dims[l.inputs[1]].0;
                        let (ga, gb) = kernels::split_channels(&a, ca, cb, 1, h * w);
                        if l.inputs[0] != 0 {
                            add_into(&mut adj[l.inputs[0]], ga);
                        }
                        if l.inputs[1] != 0 {
                            add_into(&mut adj[l.inputs[1]], gb);
                        }
                    }
                }
                LayerKind::Dropout { .. } => {
                    if let Some(mut a) = adj[i].take() {
                        if let Some(m) = &buffers.masks[i] {
                            a.iter_mut().zip(m).for_each(|(x, &k)| *x *= k);
                        }
                        if l.inputs[0] != 0 {
                            add_into(&mut adj[l.inputs[0]], a);
                        }
                    }
                }
                LayerKind::Input => {}
            }
        }
        if let Some(h) = history.as_mut() {
            for (acc, s) in total.iter_mut().zip(&step_grads) {
                acc.iter_mut().zip(s).for_each(|(x, &y)| *x += y);
            }
            h[t] = step_grads
                .into_iter()
                .zip(&net.params)
                .map(|(g, (_, p))| Tensor::new(p.shape().to_vec(), g))
                .collect::<Result<_>>()?;
        }
    }

    let params = total
        .into_iter()
        .zip(&net.params)
        .map(|(g, (name, p))| {
            let t = Tensor::new(p.shape().to_vec(), g)?;
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SnnGradients {
        params,
        per_step: history,
    })
}

/// Configuration of the spike-based training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    pub surrogate: SurrogateConfig,
    /// Steps used for validation passes.
    pub eval_steps: usize,
    pub use_dropout: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            train: TrainConfig {
                epochs: 35,
                early_stop: Some(5),
                ..Default::default()
            },
            surrogate: SurrogateConfig::default(),
            eval_steps: 200,
            use_dropout: true,
        }
    }
}

fn sample_masks<S: Scalar>(net: &Network<S>, plan: &Plan, seed: u64, key: u64) -> Vec<Option<Vec<S>>> {
    let mut rng = stream(seed, "snn-dropout", key);
    net.layers
        .iter()
        .enumerate()
        .map(|(i, l)| match l.kind {
            LayerKind::Dropout { rate } => Some(dropout_mask(plan.len(i), rate, &mut rng)),
            _ => None,
        })
        .collect()
}

/// Loss and parameter gradients of one training sample.
fn sample_step<S: Scalar>(
    model: &SnnModel<S>,
    plan: &Plan,
    set: &SliceSet<S>,
    index: usize,
    key: u64,
    cfg: &FinetuneConfig,
) -> Result<(f64, Vec<Tensor<S>>)> {
    let per = plan.len(0);
    let img = &set.images.data()[index * per..(index + 1) * per];
    let masks = if cfg.use_dropout {
        sample_masks(&model.net, plan, cfg.train.seed, key)
    } else {
        vec![None; model.net.layers.len()]
    };
    let mut rng = stream(cfg.train.seed, "snn-poisson", key);
    let steps = cfg.surrogate.train_steps;
    let opts = SampleOptions {
        record: true,
        ..Default::default()
    };
    let run = simulate_sample(model, plan, img, &mut rng, steps, Some(&masks), opts, |_, _| {})?;
    let buffers = run.buffers.expect("recording requested");
    let (c, h, w) = plan.dims[model.net.output_layer()];
    let pred = Tensor::new(vec![1, c, h, w], recorded_probs(model, &buffers))?;
    let target = set.masks.batch_item(index)?;
    let (loss, grad) = cfg.train.loss.value_and_grad(&pred, &target, true)?;
    let grad = grad.expect("gradient requested");
    let g = snn_backward(model, &buffers, grad.data(), cfg.surrogate.alpha, false)?;
    Ok((loss.to_f64_lossy(), g.params))
}

/// Validation loss and mean Dice with a fixed Poisson stream per slice.
pub fn snn_val_metrics<S: Scalar>(model: &SnnModel<S>, set: &SliceSet<S>, steps: usize, seed: u64, loss: &crate::loss::LossConfig) -> Result<(f64, f64)> {
    let (pred, _) = forward_snn(model, &set.images, steps, derive_seed(seed, "snn-val", 0))?;
    let l = loss.evaluate(&pred, &set.masks)?.to_f64_lossy();
    Ok((l, mean_dice(&pred, &set.masks)?))
}

/// Trains all SNN weights with surrogate-gradient BPTT; thresholds stay
/// fixed. Keeps the weights of the best validation epoch.
pub fn finetune_loop<S: Scalar>(
    snn: &mut SnnModel<S>,
    train: &SliceSet<S>,
    val: &SliceSet<S>,
    cfg: &FinetuneConfig,
) -> Result<TrainReport> {
    cfg.train.validate()?;
    cfg.surrogate.validate()?;
    snn.validate()?;
    snn.net.check_input(&train.images)?;
    let plan = Plan::new(&snn.net)?;
    let mut adam = AdamState::new(cfg.train.lr);
    let mut sched = PlateauScheduler::new(cfg.train.patience, cfg.train.factor, cfg.train.min_lr);
    let mut best = BestTracker::new();
    let mut report = TrainReport::default();

    for epoch in 1..=cfg.train.epochs {
        let order = cfg.train.epoch_order(train.len(), epoch, "snn-shuffle");
        let mut total = 0.0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let model: &SnnModel<S> = snn;
            let results: Vec<Result<(f64, Vec<Tensor<S>>)>> = chunk
                .par_iter()
                .map(|&idx| sample_step(model, &plan, train, idx, ((epoch as u64) << 32) | idx as u64, cfg))
                .collect();
            let inv = S::lit(1.0 / chunk.len() as f64);
            let mut sum: Option<Vec<Tensor<S>>> = None;
            for r in results {
                let (l, g) = r?;
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("SNN loss at epoch {epoch}")));
                }
                total += l;
                match sum.as_mut() {
                    None => sum = Some(g),
                    Some(s) => {
                        for (a, b) in s.iter_mut().zip(&g) {
                            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y);
                        }
                    }
                }
            }
            let grads: Vec<Option<Tensor<S>>> = sum.expect("non-empty batch").into_iter().map(|g| Some(g.scale(inv))).collect();
            adam.step(&mut snn.net.params, &grads)?;
        }
        let train_loss = total / order.len() as f64;
        adam.lr = sched.step(train_loss, adam.lr)?;
        let (val_loss, val_dice) = snn_val_metrics(snn, val, cfg.eval_steps, cfg.train.seed, &cfg.train.loss)?;
        best.observe(epoch, val_loss, &snn.net.params);
        report.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_dice,
            lr: adam.lr,
        });
        log::info!("snn epoch {epoch}: train {train_loss:.4} val {val_loss:.4} dice {val_dice:.4}");
        if let Some(p) = cfg.train.early_stop {
            if best.stale_for(epoch) > p {
                break;
            }
        }
    }
    if let Some(p) = best.best_params.take() {
        snn.net.params = p;
    }
    report.convergence_epoch = best.best_epoch;
    report.best_val_loss = best.best_loss;
    Ok(report)
}

/// Builds a randomly initialized U-Net SNN with unit thresholds and trains it
/// with the same loop as [`finetune_loop`].
pub fn train_direct<S: Scalar>(
    unet: &UNetConfig,
    time_steps: usize,
    decode: OutputDecoding,
    train: &SliceSet<S>,
    val: &SliceSet<S>,
    cfg: &FinetuneConfig,
) -> Result<(SnnModel<S>, TrainReport)> {
    let model = build_unet::<S, _>(unet, &mut stream(cfg.train.seed, "direct-init", 0))?;
    let mut snn = SnnModel::from_network(model.net, S::one(), time_steps)?;
    snn.decode = decode;
    let report = finetune_loop(&mut snn, train, val, cfg)?;
    Ok((snn, report))
}
