//! ANN to SNN conversion: weight transfer and layer-wise threshold balancing.

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::segnet::Network;
use crate::snn::{simulate_sample, Plan, SampleOptions, SnnModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ConversionConfig {
    /// Simulation steps used while balancing.
    pub balance_steps: usize,
    /// Number of calibration images used (leading entries of the batch).
    pub calib_samples: usize,
    /// Percentile of the per-step weighted input taken as threshold; 100 = max.
    pub percentile: f64,
    pub initial_threshold: f64,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        ConversionConfig {
            balance_steps: 200,
            calib_samples: 26,
            percentile: 100.0,
            initial_threshold: 1.0,
        }
    }
}

impl ConversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::Config("percentile must lie in (0, 100]".into()));
        }
        if self.balance_steps == 0 || self.calib_samples == 0 {
            return Err(Error::Config("balance steps and calibration samples must be positive".into()));
        }
        if !(self.initial_threshold > 0.0) {
            return Err(Error::Config("initial threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Copies the trained ANN into an SNN with every threshold at `initial`.
pub fn transfer_weights<S: Scalar>(ann: &Network<S>, time_steps: usize, initial: f64) -> Result<SnnModel<S>> {
    let offending = ann.non_weight_params();
    if !offending.is_empty() {
        return Err(Error::Conversion(format!(
            "network carries bias or normalization parameters: {}",
            offending.join(", ")
        )));
    }
    SnnModel::from_network(ann.clone(), S::lit(initial), time_steps)
}

/// Sets each spiking layer's threshold, in topological order, to the chosen
/// percentile of its per-step weighted input observed while simulating the
/// already balanced prefix on Poisson-coded calibration images.
///
/// Returns the `(layer, threshold)` pairs that were set.
pub fn threshold_balance<S: Scalar>(
    snn: &mut SnnModel<S>,
    calibration: &Tensor<S>,
    cfg: &ConversionConfig,
    seed: u64,
) -> Result<Vec<(String, S)>> {
    cfg.validate()?;
    snn.validate()?;
    snn.net.check_input(calibration)?;
    let plan = Plan::new(&snn.net)?;
    let per = plan.len(0);
    let n = calibration.shape()[0].min(cfg.calib_samples);
    let images: Vec<&[S]> = (0..n).map(|i| &calibration.data()[i * per..(i + 1) * per]).collect();

    let mut set = Vec::new();
    for layer in snn.net.spiking_layers() {
        let stat = if cfg.percentile >= 100.0 {
            drive_max(snn, &plan, &images, layer, cfg.balance_steps, seed)?
        } else {
            drive_percentile(snn, &plan, &images, layer, cfg, seed)?
        };
        let v = if stat > 0.0 && stat.is_finite() {
            S::lit(stat)
        } else {
            warn!(
                "layer {} saw no positive drive during calibration; keeping threshold 1.0",
                snn.net.layers[layer].name
            );
            S::one()
        };
        snn.thresholds[layer] = Some(v);
        set.push((snn.net.layers[layer].name.clone(), v));
    }
    snn.validate()?;
    Ok(set)
}

/// Applies `f` to every per-step drive of `layer` over all calibration images
/// and folds per-image results with `merge`, in image order.
fn scan_drives<S: Scalar, A: Send>(
    snn: &SnnModel<S>,
    plan: &Plan,
    images: &[&[S]],
    layer: usize,
    steps: usize,
    seed: u64,
    init: impl Fn() -> A + Sync,
    f: impl Fn(&mut A, &[S]) + Sync,
    merge: impl Fn(A, A) -> A,
) -> Result<A> {
    let opts = SampleOptions {
        upto: Some(layer),
        ..Default::default()
    };
    let parts: Vec<Result<A>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = stream(seed, "balance", i as u64);
            let mut acc = init();
            simulate_sample(snn, plan, img, &mut rng, steps, None, opts, |l, d| {
                if l == layer {
                    f(&mut acc, d)
                }
            })?;
            Ok(acc)
        })
        .collect();
    let mut out = init();
    for p in parts {
        out = merge(out, p?);
    }
    Ok(out)
}

fn drive_max<S: Scalar>(snn: &SnnModel<S>, plan: &Plan, images: &[&[S]], layer: usize, steps: usize, seed: u64) -> Result<f64> {
    scan_drives(
        snn,
        plan,
        images,
        layer,
        steps,
        seed,
        || f64::NEG_INFINITY,
        |m, d| {
            for &x in d {
                *m = m.max(x.to_f64_lossy());
            }
        },
        f64::max,
    )
}

const BINS: usize = 1 << 16;

/// Percentile by histogram over `[min, max]`: a second, identically seeded
/// pass fills the bins, and the upper edge of the bin holding the target
/// rank is returned.
fn drive_percentile<S: Scalar>(
    snn: &SnnModel<S>,
    plan: &Plan,
    images: &[&[S]],
    layer: usize,
    cfg: &ConversionConfig,
    seed: u64,
) -> Result<f64> {
    let (lo, hi) = scan_drives(
        snn,
        plan,
        images,
        layer,
        cfg.balance_steps,
        seed,
        || (f64::INFINITY, f64::NEG_INFINITY),
        |(lo, hi), d| {
            for &x in d {
                let x = x.to_f64_lossy();
                *lo = lo.min(x);
                *hi = hi.max(x);
            }
        },
        |a, b| (a.0.min(b.0), a.1.max(b.1)),
    )?;
    if !(hi > lo) {
        return Ok(hi);
    }
    let width = (hi - lo) / BINS as f64;
    let hist = scan_drives(
        snn,
        plan,
        images,
        layer,
        cfg.balance_steps,
        seed,
        || vec![0u64; BINS],
        |h, d| {
            for &x in d {
                let b = ((x.to_f64_lossy() - lo) / width) as usize;
                h[b.min(BINS - 1)] += 1;
            }
        },
        |mut a, b| {
            a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            a
        },
    )?;
    let total: u64 = hist.iter().sum();
    let rank = ((cfg.percentile / 100.0) * total as f64).ceil() as u64;
    let mut seen = 0;
    for (i, &c) in hist.iter().enumerate() {
        seen += c;
        if seen >= rank {
            return Ok(lo + width * (i + 1) as f64);
        }
    }
    Ok(hi)
}
