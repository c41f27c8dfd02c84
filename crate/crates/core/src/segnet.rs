//! Feed-forward layer graph and the bias-free, batch-norm-free U-Net.
//!
//! The same [`Network`] description drives both the ANN (through the
//! autodiff tape) and the spiking simulator, which interprets every
//! ReLU-activated weighted layer as a layer of integrate-and-fire neurons.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input,
    /// Cross-correlation with weight `[cout, cin, k, k]`.
    Conv {
        weight: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    /// Transposed convolution with weight `[cin, cout, k, k]`.
    ConvTranspose {
        weight: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    AvgPool {
        window: usize,
    },
    Concat,
    Dropout {
        rate: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Indices of earlier layers feeding this one.
    pub inputs: Vec<usize>,
}

impl Layer {
    pub fn weight(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Conv { weight, .. } | LayerKind::ConvTranspose { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn activation(&self) -> Option<Activation> {
        match self.kind {
            LayerKind::Conv { activation, .. } | LayerKind::ConvTranspose { activation, .. } => {
                Some(activation)
            }
            _ => None,
        }
    }

    /// Weighted layer followed by ReLU, i.e. a spiking layer after conversion.
    pub fn is_spiking(&self) -> bool {
        self.activation() == Some(Activation::Relu)
    }
}

/// Layer graph plus named parameter registry.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<S> {
    pub layers: Vec<Layer>,
    pub params: Vec<(String, Tensor<S>)>,
    /// Expected `(channels, height, width)` of one input sample.
    pub input_shape: (usize, usize, usize),
}

impl<S: Scalar> Network<S> {
    /// Checks topology, weight shapes and that the last layer is a linear head.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.layers.first() {
            Some(l) if l.kind == LayerKind::Input => {}
            _ => return bad("first layer must be the input".into()),
        }
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 && l.kind == LayerKind::Input {
                return bad(format!("layer {} is a second input", l.name));
            }
            if l.inputs.iter().any(|&j| j >= i) {
                return bad(format!("layer {} consumes a later layer", l.name));
            }
            let want = match l.kind {
                LayerKind::Input => 0,
                LayerKind::Concat => 2,
                _ => 1,
            };
            if l.inputs.len() != want {
                return bad(format!("layer {} needs {want} inputs", l.name));
            }
            if let Some(w) = l.weight() {
                if w >= self.params.len() || self.params[w].1.rank() != 4 {
                    return bad(format!("layer {} has no rank-4 weight", l.name));
                }
            }
        }
        let last = self.layers.last().expect("non-empty");
        if last.activation() != Some(Activation::Identity) {
            return bad("last layer must be a weighted layer without activation".into());
        }
        if self.layers[..self.layers.len() - 1]
            .iter()
            .any(|l| l.activation() == Some(Activation::Identity))
        {
            return bad("only the output head may be a linear weighted layer".into());
        }
        Ok(())
    }

    pub fn output_layer(&self) -> usize {
        self.layers.len() - 1
    }

    /// Indices of ReLU-activated weighted layers.
    pub fn spiking_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_spiking()).collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|(n, _)| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.param_index(name).map(|i| &self.params[i].1)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registry entries that look like biases or normalization state.
    pub fn non_weight_params(&self) -> Vec<&str> {
        let used: Vec<usize> = self.layers.iter().filter_map(Layer::weight).collect();
        self.params
            .iter()
            .enumerate()
            .filter(|(i, (name, _))| {
                !used.contains(i)
                    || name.contains("bias")
                    || name.contains("running_")
                    || name.contains("bn")
                    || name.contains("norm")
            })
            .map(|(_, (n, _))| n.as_str())
            .collect()
    }

    pub fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != self.input_shape {
            return Err(shape_err!(
                "network expects [B, {}, {}, {}] input, got {:?}",
                self.input_shape.0,
                self.input_shape.1,
                self.input_shape.2,
                x.shape()
            ));
        }
        Ok(())
    }

    /// Parameters as tape leaves, in registry order.
    pub fn param_leaves(&self, tape: &mut Tape<S>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Records the forward pass on `tape`; returns one var per layer
    /// (the last one holds pre-sigmoid logits).
    pub fn forward_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        input: Var,
        params: &[Var],
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        self.check_input(tape.value(input))?;
        let mut outs: Vec<Var> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let x = l.inputs.first().map(|&j| outs[j]);
            let v = match &l.kind {
                LayerKind::Input => input,
                LayerKind::Conv {
                    weight,
                    stride,
                    padding,
                    activation,
                } => {
                    let y = tape.conv2d(x.unwrap(), params[*weight], *stride, *padding)?;
                    activate(tape, y, *activation)?
                }
                LayerKind::ConvTranspose {
                    weight,
                    stride,
                    padding,
                    activation,
                } => {
                    let y = tape.conv_transpose2d(x.unwrap(), params[*weight], *stride, *padding)?;
                    activate(tape, y, *activation)?
                }
                LayerKind::AvgPool { window } => tape.avg_pool2d(x.unwrap(), *window)?,
                LayerKind::Concat => tape.concat_channels(outs[l.inputs[0]], outs[l.inputs[1]])?,
                LayerKind::Dropout { rate } => tape.dropout(x.unwrap(), *rate, training, rng)?,
            };
            outs.push(v);
        }
        Ok(outs)
    }

    /// Per-pixel probabilities `sigmoid(logits)`.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor<S>, training: bool, rng: &mut R) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let params = self.param_leaves(&mut tape, false);
        let input = tape.leaf(x.clone(), false);
        let outs = self.forward_tape(&mut tape, input, &params, training, rng)?;
        let p = tape.sigmoid(*outs.last().expect("non-empty"))?;
        Ok(tape.value(p).clone())
    }

    /// Inference-mode output of every layer.
    pub fn activations(&self, x: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let mut tape = Tape::new();
        let params = self.param_leaves(&mut tape, false);
        let input = tape.leaf(x.clone(), false);
        let mut rng = crate::rng::stream(0, "unused", 0);
        let outs = self.forward_tape(&mut tape, input, &params, false, &mut rng)?;
        Ok(outs.iter().map(|&v| tape.value(v).clone()).collect())
    }
}

fn activate<S: Scalar>(tape: &mut Tape<S>, y: Var, a: Activation) -> Result<Var> {
    match a {
        Activation::Relu => tape.relu(y),
        Activation::Identity => Ok(y),
    }
}

/// He-normal initialization with the given fan-in.
pub fn he_normal<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| S::lit(normal.sample(rng)))
}

/// Incremental builder used by the U-Net constructor and by toy networks in tests.
pub struct NetworkBuilder<S> {
    layers: Vec<Layer>,
    params: Vec<(String, Tensor<S>)>,
    channels: Vec<usize>,
    input_shape: (usize, usize, usize),
}

impl<S: Scalar> NetworkBuilder<S> {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        NetworkBuilder {
            layers: vec![Layer {
                name: "input".into(),
                kind: LayerKind::Input,
                inputs: Vec::new(),
            }],
            params: Vec::new(),
            channels: vec![channels],
            input_shape: (channels, height, width),
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn channels(&self, layer: usize) -> usize {
        self.channels[layer]
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<usize>, channels: usize) -> usize {
        self.layers.push(Layer {
            name: name.into(),
            kind,
            inputs,
        });
        self.channels.push(channels);
        self.layers.len() - 1
    }

    /// Convolution with an explicit weight `[cout, cin, k, k]`.
    pub fn conv_with(
        &mut self,
        name: &str,
        from: usize,
        weight: Tensor<S>,
        stride: usize,
        padding: usize,
        activation: Activation,
    ) -> usize {
        let cout = weight.shape()[0];
        self.params.push((format!("{name}.weight"), weight));
        let kind = LayerKind::Conv {
            weight: self.params.len() - 1,
            stride,
            padding,
            activation,
        };
        self.push(name, kind, vec![from], cout)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        from: usize,
        cout: usize,
        k: usize,
        padding: usize,
        activation: Activation,
        rng: &mut R,
    ) -> usize {
        let cin = self.channels[from];
        let w = he_normal(&[cout, cin, k, k], cin * k * k, rng);
        self.conv_with(name, from, w, 1, padding, activation)
    }

    pub fn conv_transpose<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        from: usize,
        cout: usize,
        k: usize,
        stride: usize,
        activation: Activation,
        rng: &mut R,
    ) -> usize {
        let cin = self.channels[from];
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        let w = he_normal(&[cin, cout, k, k], fan_in, rng);
        self.params.push((format!("{name}.weight"), w));
        let kind = LayerKind::ConvTranspose {
            weight: self.params.len() - 1,
            stride,
            padding: 0,
            activation,
        };
        self.push(name, kind, vec![from], cout)
    }

    pub fn avg_pool(&mut self, name: &str, from: usize, window: usize) -> usize {
        let c = self.channels[from];
        self.push(name, LayerKind::AvgPool { window }, vec![from], c)
    }

    pub fn concat(&mut self, name: &str, a: usize, b: usize) -> usize {
        let c = self.channels[a] + self.channels[b];
        self.push(name, LayerKind::Concat, vec![a, b], c)
    }

    pub fn dropout(&mut self, name: &str, from: usize, rate: f64) -> usize {
        let c = self.channels[from];
        self.push(name, LayerKind::Dropout { rate }, vec![from], c)
    }

    pub fn finish(self) -> Result<Network<S>> {
        let net = Network {
            layers: self.layers,
            params: self.params,
            input_shape: self.input_shape,
        };
        net.validate()?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of pooling stages.
    pub depth: usize,
    pub kernel_size: usize,
    pub dropout_rate: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            base_channels: 16,
            depth: 3,
            kernel_size: 3,
            dropout_rate: 0.2,
            height: 56,
            width: 48,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config("kernel size must be odd for same padding".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout rate must lie in [0, 1)".into()));
        }
        let div = 1usize << self.depth;
        if !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 2^depth = {div}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Spatial size of the bottleneck feature maps.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        (self.height >> self.depth, self.width >> self.depth)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "base_channels={}", self.base_channels);
        let _ = writeln!(s, "depth={}", self.depth);
        let _ = writeln!(s, "kernel_size={}", self.kernel_size);
        let _ = writeln!(s, "dropout_rate={}", self.dropout_rate);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "width={}", self.width);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = crate::config::parse_kv(text)?;
        let mut cfg = UNetConfig::default();
        for (k, v) in &kv {
            let num = || -> Result<usize> {
                v.parse().map_err(|_| Error::Config(format!("{k}: not an integer: {v}")))
            };
            match k.as_str() {
                "in_channels" => cfg.in_channels = num()?,
                "base_channels" => cfg.base_channels = num()?,
                "depth" => cfg.depth = num()?,
                "kernel_size" => cfg.kernel_size = num()?,
                "height" => cfg.height = num()?,
                "width" => cfg.width = num()?,
                "dropout_rate" => {
                    cfg.dropout_rate = v
                        .parse()
                        .map_err(|_| Error::Config(format!("dropout_rate: not a number: {v}")))?
                }
                other => return Err(Error::Config(format!("unknown model key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel<S> {
    pub config: UNetConfig,
    pub net: Network<S>,
}

/// Builds the U-Net: per stage two same-padded conv+ReLU layers and a
/// dropout, average pooling on the way down, a ReLU transposed conv and a
/// skip concat on the way up, and a 1x1 linear head.
pub fn build_unet<S: Scalar, R: Rng + ?Sized>(config: &UNetConfig, rng: &mut R) -> Result<UNetModel<S>> {
    config.validate()?;
    let (k, pad, rate) = (config.kernel_size, config.kernel_size / 2, config.dropout_rate);
    let width = |level: usize| config.base_channels << level;
    let mut b = NetworkBuilder::new(config.in_channels, config.height, config.width);
    let mut x = b.input();
    let mut skips = Vec::with_capacity(config.depth);

    let block = |b: &mut NetworkBuilder<S>, prefix: &str, from: usize, c: usize, rng: &mut R| {
        let c1 = b.conv(&format!("{prefix}.conv1"), from, c, k, pad, Activation::Relu, rng);
        let c2 = b.conv(&format!("{prefix}.conv2"), c1, c, k, pad, Activation::Relu, rng);
        b.dropout(&format!("{prefix}.drop"), c2, rate)
    };

    for level in 0..config.depth {
        let skip = block(&mut b, &format!("enc{level}"), x, width(level), rng);
        skips.push(skip);
        x = b.avg_pool(&format!("pool{level}"), skip, 2);
    }
    x = block(&mut b, "bottleneck", x, width(config.depth), rng);
    for level in (0..config.depth).rev() {
        let up = b.conv_transpose(&format!("up{level}"), x, width(level), 2, 2, Activation::Relu, rng);
        let cat = b.concat(&format!("cat{level}"), up, skips[level]);
        x = block(&mut b, &format!("dec{level}"), cat, width(level), rng);
    }
    b.conv("head", x, 1, 1, 0, Activation::Identity, rng);
    Ok(UNetModel {
        config: config.clone(),
        net: b.finish()?,
    })
}

impl<S: Scalar> UNetModel<S> {
    /// Per-pixel foreground probabilities for `batch[B, 1, H, W]`.
    pub fn forward_ann<R: Rng + ?Sized>(&self, batch: &Tensor<S>, training: bool, rng: &mut R) -> Result<Tensor<S>> {
        self.net.forward(batch, training, rng)
    }

    pub fn to_checkpoint(&self) -> crate::checkpoint::Checkpoint<S> {
        let mut ck = crate::checkpoint::Checkpoint::new();
        for (n, t) in &self.net.params {
            ck.push(n.clone(), t.clone());
        }
        ck
    }

    /// Rebuilds the graph from `config` and fills weights by name.
    pub fn from_checkpoint(config: &UNetConfig, ck: &crate::checkpoint::Checkpoint<S>) -> Result<Self> {
        let mut rng = crate::rng::stream(0, "shape-only", 0);
        let mut model = build_unet::<S, _>(config, &mut rng)?;
        load_params(&mut model.net, ck)?;
        Ok(model)
    }
}

/// Copies every registry tensor from `ck`, checking names and shapes.
pub fn load_params<S: Scalar>(net: &mut Network<S>, ck: &crate::checkpoint::Checkpoint<S>) -> Result<()> {
    let by_name: BTreeMap<&str, &Tensor<S>> = ck.entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, t) in &mut net.params {
        let src = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{name}`")))?;
        if src.shape() != t.shape() {
            return Err(shape_err!(
                "parameter `{name}` has shape {:?} in checkpoint, model wants {:?}",
                src.shape(),
                t.shape()
            ));
        }
        *t = (*src).clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn default_unet_shapes() {
        let cfg = UNetConfig::default();
        assert_eq!(cfg.bottleneck_hw(), (7, 6));
        let m: UNetModel<f32> = build_unet(&cfg, &mut stream(1, "init", 0)).unwrap();
        let acts = m.net.activations(&Tensor::zeros(&[1, 1, 56, 48])).unwrap();
        let bott = m.net.layers.iter().position(|l| l.name == "bottleneck.conv2").unwrap();
        assert_eq!(acts[bott].shape(), &[1, 128, 7, 6]);
        assert_eq!(acts.last().unwrap().shape(), &[1, 1, 56, 48]);
    }

    #[test]
    fn depth_one_structure() {
        let cfg = UNetConfig {
            depth: 1,
            base_channels: 4,
            height: 8,
            width: 8,
            ..Default::default()
        };
        let m: UNetModel<f64> = build_unet(&cfg, &mut stream(1, "init", 0)).unwrap();
        let names: Vec<&str> = m.net.layers.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "input", "enc0.conv1", "enc0.conv2", "enc0.drop", "pool0", "bottleneck.conv1",
                "bottleneck.conv2", "bottleneck.drop", "up0", "cat0", "dec0.conv1", "dec0.conv2",
                "dec0.drop", "head"
            ]
        );
        let pools = m.net.layers.iter().filter(|l| matches!(l.kind, LayerKind::AvgPool { .. })).count();
        assert_eq!(pools, 1);
        let cat = &m.net.layers[9];
        assert_eq!(cat.inputs, vec![8, 3]);
    }

    #[test]
    fn registry_is_bias_free() {
        let m: UNetModel<f32> = build_unet(&UNetConfig::default(), &mut stream(3, "init", 0)).unwrap();
        assert!(m.net.params.iter().all(|(n, t)| !n.contains("bias") && t.rank() == 4));
        assert!(m.net.non_weight_params().is_empty());
    }

    #[test]
    fn indivisible_input_is_config_error() {
        let cfg = UNetConfig {
            height: 50,
            ..Default::default()
        };
        assert!(matches!(
            build_unet::<f32, _>(&cfg, &mut stream(0, "init", 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_contracts() {
        let cfg = UNetConfig {
            base_channels: 4,
            ..Default::default()
        };
        let m: UNetModel<f32> = build_unet(&cfg, &mut stream(5, "init", 0)).unwrap();
        let mut rng = stream(5, "dropout", 0);
        let zeros = Tensor::zeros(&[26, 1, 56, 48]);
        let p = m.forward_ann(&zeros, false, &mut rng).unwrap();
        assert_eq!(p.shape(), &[26, 1, 56, 48]);
        assert!(p.data().iter().all(|&v| v.is_finite() && v > 0.0 && v < 1.0));

        let x = Tensor::from_fn(&[2, 1, 56, 48], |i| ((i % 97) as f32) / 97.0);
        let a = m.forward_ann(&x, false, &mut stream(1, "d", 0)).unwrap();
        let b = m.forward_ann(&x, false, &mut stream(2, "d", 0)).unwrap();
        assert_eq!(a, b);
        let c = m.forward_ann(&x, true, &mut stream(9, "d", 0)).unwrap();
        let d = m.forward_ann(&x, true, &mut stream(9, "d", 0)).unwrap();
        assert_eq!(c, d);
        assert_ne!(a, c);

        let wrong = Tensor::zeros(&[1, 1, 48, 56]);
        assert!(matches!(m.forward_ann(&wrong, false, &mut rng), Err(Error::Shape(_))));
    }

    #[test]
    fn config_text_roundtrip() {
        let cfg = UNetConfig {
            base_channels: 6,
            depth: 2,
            dropout_rate: 0.1,
            ..Default::default()
        };
        assert_eq!(UNetConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(UNetConfig::from_text("colour=blue\n").is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = UNetConfig {
            base_channels: 2,
            depth: 2,
            height: 8,
            width: 8,
            ..Default::default()
        };
        let m: UNetModel<f32> = build_unet(&cfg, &mut stream(4, "init", 0)).unwrap();
        let back = UNetModel::from_checkpoint(&cfg, &m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
    }
}
