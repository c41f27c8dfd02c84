//! Time-stepped integrate-and-fire simulation of a converted network.
//!
//! Every ReLU-activated weighted layer of the source [`Network`] becomes a
//! layer of non-leaky IF neurons with soft reset; pooling, concatenation and
//! dropout act on spike tensors and pass real-valued drives on. The linear
//! head never fires: it accumulates its drive, and the prediction is
//! `sigmoid(u_out / T)` (or `sigmoid(u_out)` with [`OutputDecoding::Sum`]).
//!
//! Within a step all layers are swept in topological order using the
//! current step's upstream spikes. Samples are simulated independently,
//! each with its own Poisson stream, so a batch can run in parallel.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::sigmoid;
use crate::checkpoint::Checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::rng::{stream, StreamRng};
use crate::scalar::Scalar;
use crate::segnet::{load_params, LayerKind, Network};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputDecoding {
    /// `sigmoid(u_out / T)`.
    Mean,
    /// `sigmoid(u_out)`.
    Sum,
}

impl fmt::Display for OutputDecoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputDecoding::Mean => "mean",
            OutputDecoding::Sum => "sum",
        })
    }
}

impl FromStr for OutputDecoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(OutputDecoding::Mean),
            "sum" => Ok(OutputDecoding::Sum),
            other => Err(Error::Config(format!("unknown decoding `{other}` (mean | sum)"))),
        }
    }
}

impl OutputDecoding {
    /// Factor applied to the accumulated membrane before the sigmoid.
    pub fn logit_scale(self, steps: usize) -> f64 {
        match self {
            OutputDecoding::Mean => 1.0 / steps as f64,
            OutputDecoding::Sum => 1.0,
        }
    }
}

/// Spiking counterpart of a [`Network`]: same graph and weights plus one
/// firing threshold per spiking layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SnnModel<S> {
    pub net: Network<S>,
    /// Indexed like `net.layers`; `Some` exactly for spiking layers.
    pub thresholds: Vec<Option<S>>,
    pub time_steps: usize,
    pub decode: OutputDecoding,
}

impl<S: Scalar> SnnModel<S> {
    /// Wraps a network with every spiking threshold set to `initial`.
    pub fn from_network(net: Network<S>, initial: S, time_steps: usize) -> Result<Self> {
        net.validate()?;
        let thresholds = net
            .layers
            .iter()
            .map(|l| l.is_spiking().then_some(initial))
            .collect();
        let m = SnnModel {
            net,
            thresholds,
            time_steps,
            decode: OutputDecoding::Mean,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.time_steps == 0 {
            return Err(Error::Config("time steps must be positive".into()));
        }
        if self.thresholds.len() != self.net.layers.len() {
            return Err(Error::Config("one threshold slot per layer required".into()));
        }
        for (l, v) in self.net.layers.iter().zip(&self.thresholds) {
            match (l.is_spiking(), v) {
                (true, Some(v)) if *v > S::zero() && v.is_finite() => {}
                (true, _) => {
                    return Err(Error::Config(format!("layer {} needs a positive threshold", l.name)))
                }
                (false, Some(_)) => {
                    return Err(Error::Config(format!("layer {} cannot carry a threshold", l.name)))
                }
                (false, None) => {}
            }
        }
        Ok(())
    }

    pub fn threshold(&self, layer: usize) -> Option<S> {
        self.thresholds[layer]
    }

    /// `(layer name, threshold)` for every spiking layer in order.
    pub fn layer_thresholds(&self) -> Vec<(String, S)> {
        self.net
            .layers
            .iter()
            .zip(&self.thresholds)
            .filter_map(|(l, v)| v.map(|v| (l.name.clone(), v)))
            .collect()
    }

    /// Weights followed by `threshold.<layer>` scalars.
    pub fn to_checkpoint(&self) -> Checkpoint<S> {
        let mut ck = Checkpoint::new();
        for (n, t) in &self.net.params {
            ck.push(n.clone(), t.clone());
        }
        for (name, v) in self.layer_thresholds() {
            ck.push(format!("threshold.{name}"), Tensor::scalar(v));
        }
        ck
    }

    /// Fills weights and thresholds of a model with the right topology.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint<S>) -> Result<()> {
        load_params(&mut self.net, ck)?;
        for (i, l) in self.net.layers.iter().enumerate() {
            if !l.is_spiking() {
                continue;
            }
            let key = format!("threshold.{}", l.name);
            let t = ck
                .get(&key)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{key}`")))?;
            self.thresholds[i] = Some(t.item()?);
        }
        self.validate()
    }
}

/// Per-sample layer geometry derived once from the graph.
#[derive(Clone, Debug)]
pub(crate) struct Plan {
    /// `(channels, height, width)` of each layer's output.
    pub dims: Vec<(usize, usize, usize)>,
    pub geoms: Vec<Option<ConvGeom>>,
}

impl Plan {
    pub fn new<S: Scalar>(net: &Network<S>) -> Result<Self> {
        let mut dims = Vec::with_capacity(net.layers.len());
        let mut geoms = Vec::with_capacity(net.layers.len());
        for l in &net.layers {
            let inp = l.inputs.first().map(|&j| dims[j]);
            let (d, g) = match &l.kind {
                LayerKind::Input => (net.input_shape, None),
                LayerKind::Conv { weight, stride, padding, .. } => {
                    let (c, h, w) = inp.unwrap();
                    let g = ConvGeom::conv((1, c, h, w), net.params[*weight].1.shape(), *stride, *padding)?;
                    ((g.cout, g.ho, g.wo), Some(g))
                }
                LayerKind::ConvTranspose { weight, stride, padding, .. } => {
                    let (c, h, w) = inp.unwrap();
                    let g = ConvGeom::transposed((1, c, h, w), net.params[*weight].1.shape(), *stride, *padding)?;
                    ((g.cin, g.h, g.w), Some(g))
                }
                LayerKind::AvgPool { window } => {
                    let (c, h, w) = inp.unwrap();
                    if h % window != 0 || w % window != 0 {
                        return Err(shape_err!("layer {}: {h}x{w} not divisible by {window}", l.name));
                    }
                    ((c, h / window, w / window), None)
                }
                LayerKind::Concat => {
                    let (ca, ha, wa) = dims[l.inputs[0]];
                    let (cb, hb, wb) = dims[l.inputs[1]];
                    if (ha, wa) != (hb, wb) {
                        return Err(shape_err!("layer {}: concat of {ha}x{wa} and {hb}x{wb}", l.name));
                    }
                    ((ca + cb, ha, wa), None)
                }
                LayerKind::Dropout { .. } => (inp.unwrap(), None),
            };
            dims.push(d);
            geoms.push(g);
        }
        Ok(Plan { dims, geoms })
    }

    pub fn len(&self, layer: usize) -> usize {
        let (c, h, w) = self.dims[layer];
        c * h * w
    }
}

/// Weighted drive of a layer given its input values at the current step.
pub(crate) fn weighted_drive<S: Scalar>(net: &Network<S>, plan: &Plan, layer: usize, input: &[S]) -> Vec<S> {
    let g = plan.geoms[layer].as_ref().expect("weighted layer");
    let w = net.params[net.layers[layer].weight().expect("weighted layer")].1.data();
    let sparse = kernels::density(input) < kernels::SPARSE_DENSITY;
    match net.layers[layer].kind {
        LayerKind::Conv { .. } if sparse => kernels::conv2d_forward_sparse(input, w, g),
        LayerKind::Conv { .. } => kernels::conv2d_forward(input, w, g),
        LayerKind::ConvTranspose { .. } if sparse => kernels::conv2d_backward_input_sparse(input, w, g),
        LayerKind::ConvTranspose { .. } => kernels::conv2d_backward_input(input, w, g),
        _ => unreachable!("not a weighted layer"),
    }
}

/// Output of a pooling, concat or dropout layer at the current step.
pub(crate) fn structural<S: Scalar>(
    net: &Network<S>,
    plan: &Plan,
    layer: usize,
    values: &[Vec<S>],
    masks: Option<&[Option<Vec<S>>]>,
) -> Vec<S> {
    let l = &net.layers[layer];
    match l.kind {
        LayerKind::AvgPool { window } => {
            let (c, h, w) = plan.dims[l.inputs[0]];
            kernels::avg_pool_forward(&values[l.inputs[0]], (1, c, h, w), window)
        }
        LayerKind::Concat => {
            let (ca, h, w) = plan.dims[l.inputs[0]];
            let cb = plan.dims[l.inputs[1]].0;
            kernels::concat_channels(&values[l.inputs[0]], ca, &values[l.inputs[1]], cb, 1, h * w)
        }
        LayerKind::Dropout { .. } => {
            let x = &values[l.inputs[0]];
            match masks.and_then(|m| m[layer].as_ref()) {
                Some(mask) => x.iter().zip(mask).map(|(&a, &m)| a * m).collect(),
                None => x.clone(),
            }
        }
        _ => unreachable!("not a structural layer"),
    }
}

/// Layer of non-leaky integrate-and-fire neurons with soft reset.
#[derive(Clone, Debug, PartialEq)]
pub struct IfNeurons<S> {
    /// Membrane potential after the latest integration.
    pub u: Vec<S>,
    /// Binary spikes emitted at the latest step.
    pub spikes: Vec<S>,
}

impl<S: Scalar> IfNeurons<S> {
    pub fn new(n: usize) -> Self {
        IfNeurons {
            u: vec![S::zero(); n],
            spikes: vec![S::zero(); n],
        }
    }

    /// `u <- u + drive - v * o_prev`, then fire where `u > v`.
    /// Returns the number of spikes.
    pub fn step(&mut self, drive: &[S], v: S) -> usize {
        let mut fired = 0;
        for ((u, o), &d) in self.u.iter_mut().zip(self.spikes.iter_mut()).zip(drive) {
            *u += d - v * *o;
            if *u > v {
                *o = S::one();
                fired += 1;
            } else {
                *o = S::zero();
            }
        }
        fired
    }
}

/// Non-spiking output neurons: `u <- u + drive`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputAccumulator<S> {
    pub u: Vec<S>,
}

impl<S: Scalar> OutputAccumulator<S> {
    pub fn new(n: usize) -> Self {
        OutputAccumulator { u: vec![S::zero(); n] }
    }

    pub fn accumulate(&mut self, drive: &[S]) {
        for (u, &d) in self.u.iter_mut().zip(drive) {
            *u += d;
        }
    }
}

fn check_intensities<S: Scalar>(x: &[S]) -> Result<()> {
    if let Some(bad) = x.iter().find(|v| !(**v >= S::zero() && **v <= S::one())) {
        return Err(Error::Input(format!(
            "intensity {bad} outside [0, 1]; normalize before encoding"
        )));
    }
    Ok(())
}

/// One step of Poisson rate coding: spike with probability equal to intensity.
pub(crate) fn poisson_step<S: Scalar, R: Rng + ?Sized>(image: &[S], rng: &mut R, out: &mut [S]) {
    for (o, &p) in out.iter_mut().zip(image) {
        let r: f64 = rng.random();
        *o = if S::lit(r) < p { S::one() } else { S::zero() };
    }
}

/// Rate-coded spike train `[T, ...image shape]`.
pub fn poisson_encode<S: Scalar, R: Rng + ?Sized>(image: &Tensor<S>, steps: usize, rng: &mut R) -> Result<Tensor<S>> {
    if steps == 0 {
        return Err(Error::Config("time steps must be positive".into()));
    }
    check_intensities(image.data())?;
    let n = image.numel();
    let mut data = vec![S::zero(); steps * n];
    for t in 0..steps {
        poisson_step(image.data(), rng, &mut data[t * n..(t + 1) * n]);
    }
    let mut shape = vec![steps];
    shape.extend_from_slice(image.shape());
    Tensor::new(shape, data)
}

/// Everything the reverse sweep needs from one recorded forward pass.
#[derive(Clone, Debug)]
pub struct BpttBuffers<S> {
    pub steps: usize,
    /// Input spikes per step.
    pub inputs: Vec<Vec<S>>,
    /// Per step, the post-integration membrane of every layer
    /// (empty for non-spiking layers).
    pub membranes: Vec<Vec<Vec<S>>>,
    /// Dropout masks held fixed over all steps.
    pub masks: Vec<Option<Vec<S>>>,
    /// Final accumulated output membrane.
    pub u_out: Vec<S>,
}

/// Result of simulating one sample.
#[derive(Clone, Debug)]
pub(crate) struct SampleRun<S> {
    pub u_out: Vec<S>,
    /// Spikes emitted per layer over the whole run.
    pub spike_counts: Vec<u64>,
    /// Per-neuron spike counts of each spiking layer, when requested.
    pub neuron_counts: Option<Vec<Vec<u32>>>,
    pub buffers: Option<BpttBuffers<S>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct SampleOptions {
    pub record: bool,
    pub neuron_counts: bool,
    /// Evaluate layers `0..=upto` only.
    pub upto: Option<usize>,
}

/// Simulates one `[C, H, W]` sample for `steps` steps. `on_drive` sees the
/// weighted drive of every weighted layer at every step.
pub(crate) fn simulate_sample<S: Scalar>(
    model: &SnnModel<S>,
    plan: &Plan,
    image: &[S],
    rng: &mut StreamRng,
    steps: usize,
    masks: Option<&[Option<Vec<S>>]>,
    opts: SampleOptions,
    mut on_drive: impl FnMut(usize, &[S]),
) -> Result<SampleRun<S>> {
    let net = &model.net;
    let n_layers = net.layers.len();
    let last = opts.upto.unwrap_or(n_layers - 1).min(n_layers - 1);
    let out_layer = net.output_layer();
    let mut neurons: Vec<Option<IfNeurons<S>>> = (0..n_layers)
        .map(|i| net.layers[i].is_spiking().then(|| IfNeurons::new(plan.len(i))))
        .collect();
    let mut acc = OutputAccumulator::new(if last == out_layer { plan.len(out_layer) } else { 0 });
    let mut counts = vec![0u64; n_layers];
    let mut per_neuron: Option<Vec<Vec<u32>>> = opts.neuron_counts.then(|| {
        (0..n_layers)
            .map(|i| if net.layers[i].is_spiking() { vec![0; plan.len(i)] } else { Vec::new() })
            .collect()
    });
    let mut values: Vec<Vec<S>> = vec![Vec::new(); n_layers];
    values[0] = vec![S::zero(); plan.len(0)];
    let mut buffers = opts.record.then(|| BpttBuffers {
        steps,
        inputs: Vec::with_capacity(steps),
        membranes: Vec::with_capacity(steps),
        masks: masks.map(|m| m.to_vec()).unwrap_or_else(|| vec![None; n_layers]),
        u_out: Vec::new(),
    });

    for _ in 0..steps {
        poisson_step(image, rng, &mut values[0]);
        for i in 1..=last {
            let l = &net.layers[i];
            if l.weight().is_some() {
                let drive = weighted_drive(net, plan, i, &values[l.inputs[0]]);
                on_drive(i, &drive);
                if i == out_layer {
                    acc.accumulate(&drive);
                    continue;
                }
                let v = model.thresholds[i].expect("spiking layer has threshold");
                let cell = neurons[i].as_mut().expect("spiking layer");
                counts[i] += cell.step(&drive, v) as u64;
                if let Some(pn) = per_neuron.as_mut() {
                    for (c, &o) in pn[i].iter_mut().zip(&cell.spikes) {
                        if o > S::zero() {
                            *c += 1;
                        }
                    }
                }
                values[i].clone_from(&cell.spikes);
            } else {
                values[i] = structural(net, plan, i, &values, masks);
            }
        }
        if let Some(b) = buffers.as_mut() {
            b.inputs.push(values[0].clone());
            b.membranes.push(
                neurons
                    .iter()
                    .map(|c| c.as_ref().map(|c| c.u.clone()).unwrap_or_default())
                    .collect(),
            );
        }
    }

    for (i, c) in neurons.iter().enumerate() {
        if let Some(c) = c {
            if !c.u.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("membrane of layer {}", net.layers[i].name)));
            }
        }
    }
    if !acc.u.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("output membrane".into()));
    }
    if let Some(b) = buffers.as_mut() {
        b.u_out = acc.u.clone();
    }
    Ok(SampleRun {
        u_out: acc.u,
        spike_counts: counts,
        neuron_counts: per_neuron,
        buffers,
    })
}

/// Per-layer spike statistics of one or more simulations.
#[derive(Clone, Debug, PartialEq)]
pub struct FiringStats {
    pub layers: Vec<LayerFiring>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerFiring {
    pub name: String,
    pub layer: usize,
    pub threshold: f64,
    pub spikes: u64,
    /// Neurons in the layer times number of simulated samples.
    pub neurons: u64,
    pub steps: u64,
}

impl LayerFiring {
    /// Spikes per neuron per step, in `[0, 1]`.
    pub fn frequency(&self) -> f64 {
        if self.neurons == 0 || self.steps == 0 {
            0.0
        } else {
            self.spikes as f64 / (self.neurons as f64 * self.steps as f64)
        }
    }
}

impl FiringStats {
    pub(crate) fn empty<S: Scalar>(model: &SnnModel<S>, plan: &Plan, steps: usize) -> Self {
        let layers = model
            .net
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_spiking())
            .map(|(i, l)| LayerFiring {
                name: l.name.clone(),
                layer: i,
                threshold: model.thresholds[i].expect("spiking").to_f64_lossy(),
                spikes: 0,
                neurons: 0,
                steps: steps as u64,
            })
            .collect();
        let _ = plan;
        FiringStats { layers }
    }

    pub(crate) fn add_run<S>(&mut self, plan: &Plan, run: &SampleRun<S>) {
        for lf in &mut self.layers {
            lf.spikes += run.spike_counts[lf.layer];
            lf.neurons += plan.len(lf.layer) as u64;
        }
    }

    pub fn merge(&mut self, other: &FiringStats) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.spikes += b.spikes;
            a.neurons += b.neurons;
        }
    }

    pub fn mean_frequency(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(LayerFiring::frequency).sum::<f64>() / self.layers.len() as f64
    }

    /// Report rows: layer, threshold, frequency.
    pub fn rows(&self) -> Vec<FiringRow> {
        self.layers
            .iter()
            .map(|l| FiringRow {
                layer: l.name.clone(),
                threshold: l.threshold,
                frequency: l.frequency(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiringRow {
    pub layer: String,
    pub threshold: f64,
    pub frequency: f64,
}

pub fn write_firing_csv(path: &Path, rows: &[FiringRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "layer,threshold,frequency")?;
    for r in rows {
        writeln!(f, "{},{:.6},{:.6}", r.layer, r.threshold, r.frequency)?;
    }
    f.flush()?;
    Ok(())
}

/// Poisson stream for sample `index` of an evaluation keyed by `seed`.
pub fn sample_stream(seed: u64, index: u64) -> StreamRng {
    stream(seed, "poisson", index)
}

/// Runs the network for `steps` steps on `images[B, C, H, W]` and returns
/// per-pixel probabilities plus firing statistics. Sample `b` draws its
/// input spikes from `sample_stream(seed, first_index + b)`.
pub fn forward_snn_indexed<S: Scalar>(
    model: &SnnModel<S>,
    images: &Tensor<S>,
    steps: usize,
    seed: u64,
    first_index: u64,
) -> Result<(Tensor<S>, FiringStats)> {
    if steps == 0 {
        return Err(Error::Config("time steps must be positive".into()));
    }
    model.validate()?;
    model.net.check_input(images)?;
    check_intensities(images.data())?;
    let plan = Plan::new(&model.net)?;
    let batch = images.shape()[0];
    let per = plan.len(0);
    let runs: Vec<Result<SampleRun<S>>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let mut rng = sample_stream(seed, first_index + b as u64);
            let img = &images.data()[b * per..(b + 1) * per];
            simulate_sample(model, &plan, img, &mut rng, steps, None, SampleOptions::default(), |_, _| {})
        })
        .collect();
    let scale = S::lit(model.decode.logit_scale(steps));
    let mut stats = FiringStats::empty(model, &plan, steps);
    let mut probs = Vec::with_capacity(batch * plan.len(model.net.output_layer()));
    for run in runs {
        let run = run?;
        stats.add_run(&plan, &run);
        probs.extend(run.u_out.iter().map(|&u| sigmoid(u * scale)));
    }
    let (c, h, w) = plan.dims[model.net.output_layer()];
    Ok((Tensor::new(vec![batch, c, h, w], probs)?, stats))
}

/// [`forward_snn_indexed`] with sample indices starting at 0.
pub fn forward_snn<S: Scalar>(
    model: &SnnModel<S>,
    images: &Tensor<S>,
    steps: usize,
    seed: u64,
) -> Result<(Tensor<S>, FiringStats)> {
    forward_snn_indexed(model, images, steps, seed, 0)
}

/// Firing report over a set of images (the data behind a per-layer bar chart).
pub fn record_firing_rates<S: Scalar>(
    model: &SnnModel<S>,
    images: &Tensor<S>,
    steps: usize,
    seed: u64,
) -> Result<Vec<FiringRow>> {
    Ok(forward_snn(model, images, steps, seed)?.1.rows())
}

/// Per-neuron firing rates of every spiking layer (index aligned with layers;
/// empty vectors for non-spiking layers) for a single sample.
pub fn neuron_rates<S: Scalar>(model: &SnnModel<S>, image: &Tensor<S>, steps: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    model.validate()?;
    model.net.check_input(image)?;
    check_intensities(image.data())?;
    let plan = Plan::new(&model.net)?;
    let mut rng = sample_stream(seed, 0);
    let opts = SampleOptions {
        neuron_counts: true,
        ..Default::default()
    };
    let per = plan.len(0);
    let run = simulate_sample(model, &plan, &image.data()[..per], &mut rng, steps, None, opts, |_, _| {})?;
    Ok(run
        .neuron_counts
        .expect("requested")
        .into_iter()
        .map(|c| c.into_iter().map(|n| n as f64 / steps as f64).collect())
        .collect())
}
