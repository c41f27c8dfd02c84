//! End-to-end experiment stages operating on an output directory.
//!
//! Layout under `out`:
//! `data/subject_NNN.svol`, `<loss>/fold<i>/` with checkpoints, histories,
//! metrics, firing rates and overlays, and `report/` with the tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::conversion::{threshold_balance, transfer_weights, ConversionConfig};
use crate::data::{
    generate_phantom, kfold_split, overlay_image, read_volume, write_pgm, write_volume, FoldSplit, Orientation, SliceSet,
    Volume, HEIGHT, WIDTH,
};
use crate::error::{shape_err, Error, Result};
use crate::finetune::{finetune_loop, train_direct, FinetuneConfig, SurrogateConfig};
use crate::loss::{LossConfig, LossKind};
use crate::metrics::{aggregate, binarize, dice_2d, dice_3d, mean_std, read_metrics_csv, write_metrics_csv, MetricRow};
use crate::rng::{derive_seed, stream};
use crate::segnet::{build_unet, UNetConfig, UNetModel};
use crate::snn::{forward_snn_indexed, write_firing_csv, FiringRow, FiringStats, SnnModel};
use crate::tensor::Tensor;
use crate::training::{predict_ann, train_ann, TrainConfig, TrainReport};

type S = f32;

/// Models evaluated per fold, in report order.
pub const MODELS: [&str; 4] = ["ann", "converted", "finetuned", "direct"];

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline { cfg, out: out.into() })
    }

    pub fn data_dir(&self) -> PathBuf {
        if self.cfg.data_dir.is_absolute() {
            self.cfg.data_dir.clone()
        } else {
            self.out.join(&self.cfg.data_dir)
        }
    }

    pub fn loss_dir(&self, loss: LossKind) -> PathBuf {
        self.out.join(loss.to_string())
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.loss_dir(self.cfg.loss).join(format!("fold{fold}"))
    }

    fn check_fold(&self, fold: usize) -> Result<()> {
        if fold >= self.cfg.folds {
            return Err(Error::Config(format!("fold {fold} out of range 0..{}", self.cfg.folds)));
        }
        Ok(())
    }

    fn fold_path(&self, fold: usize, name: &str) -> Result<PathBuf> {
        self.check_fold(fold)?;
        let dir = self.fold_dir(fold);
        std::fs::create_dir_all(&dir)?;
        Ok(dir.join(name))
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            base_channels: self.cfg.base_channels,
            depth: self.cfg.depth,
            dropout_rate: self.cfg.dropout,
            height: HEIGHT,
            width: WIDTH,
            ..Default::default()
        }
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig::new(self.cfg.loss)
    }

    fn train_config(&self, fold: usize, stage: &str) -> TrainConfig {
        TrainConfig {
            epochs: self.cfg.ann_epochs,
            batch_size: self.cfg.batch_size,
            lr: self.cfg.lr,
            loss: self.loss_config(),
            patience: self.cfg.patience,
            factor: self.cfg.factor,
            min_lr: self.cfg.min_lr,
            early_stop: None,
            max_train_slices: (self.cfg.max_train_slices > 0).then_some(self.cfg.max_train_slices),
            seed: derive_seed(self.cfg.seed, stage, fold as u64),
        }
    }

    fn spike_config(&self, fold: usize, stage: &str, epochs: usize) -> FinetuneConfig {
        let mut train = self.train_config(fold, stage);
        train.epochs = epochs;
        train.lr = self.cfg.snn_lr;
        train.early_stop = Some(self.cfg.patience);
        FinetuneConfig {
            train,
            surrogate: SurrogateConfig {
                alpha: self.cfg.alpha,
                train_steps: self.cfg.train_time_steps,
            },
            eval_steps: self.cfg.train_time_steps,
            use_dropout: self.cfg.dropout > 0.0,
        }
    }

    fn volume_path(&self, subject: u32) -> PathBuf {
        self.data_dir().join(format!("subject_{subject:03}.svol"))
    }

    /// Writes one `.svol` file per synthetic subject.
    pub fn gen_data(&self) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(self.data_dir())?;
        let vols = generate_phantom(derive_seed(self.cfg.seed, "data", 0), self.cfg.n_subjects)?;
        let mut paths = Vec::with_capacity(vols.len());
        for v in &vols {
            let p = self.volume_path(v.subject);
            write_volume(&p, v)?;
            paths.push(p);
        }
        Ok(paths)
    }

    pub fn load_volumes(&self) -> Result<Vec<Volume>> {
        (0..self.cfg.n_subjects as u32).map(|s| read_volume(&self.volume_path(s))).collect()
    }

    pub fn split(&self, fold: usize) -> Result<FoldSplit> {
        self.check_fold(fold)?;
        let ids: Vec<u32> = (0..self.cfg.n_subjects as u32).collect();
        Ok(kfold_split(&ids, self.cfg.folds, derive_seed(self.cfg.seed, "folds", 0))?.swap_remove(fold))
    }

    /// (train, validation, test) slice sets of `fold`.
    pub fn fold_sets(&self, fold: usize) -> Result<(SliceSet<S>, SliceSet<S>, SliceSet<S>)> {
        let split = self.split(fold)?;
        let vols = self.load_volumes()?;
        let pick = |ids: &[u32]| -> Vec<&Volume> { ids.iter().map(|&i| &vols[i as usize]).collect() };
        let pool = SliceSet::from_volumes(&pick(&split.train))?;
        let (train, val) = pool.split_subjects(self.cfg.val_fraction.max(1e-9), derive_seed(self.cfg.seed, "val", fold as u64))?;
        let test = SliceSet::from_volumes(&pick(&split.test))?;
        Ok((train, val, test))
    }

    fn summary(&self, fold: usize, stage: &str, lines: &[(&str, String)]) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "stage = {stage}");
        let _ = writeln!(s, "fold = {fold}");
        let _ = writeln!(s, "loss = {}", self.cfg.loss);
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        write_text(&self.fold_path(fold, &format!("summary_{stage}.txt"))?, &s)
    }

    fn load_ann(&self, fold: usize) -> Result<UNetModel<S>> {
        let cfg_path = self.fold_path(fold, "model.cfg")?;
        let cfg = UNetConfig::from_text(&std::fs::read_to_string(require(&cfg_path)?)?)?;
        let ck = Checkpoint::load(&self.fold_path(fold, "ann.ckpt")?)?;
        UNetModel::from_checkpoint(&cfg, &ck)
    }

    fn load_snn(&self, fold: usize, name: &str) -> Result<SnnModel<S>> {
        let ck = Checkpoint::load(&self.fold_path(fold, &format!("snn_{name}.ckpt"))?)?;
        let cfg_path = self.fold_path(fold, "model.cfg")?;
        let cfg = UNetConfig::from_text(&std::fs::read_to_string(require(&cfg_path)?)?)?;
        let shell = build_unet::<S, _>(&cfg, &mut stream(0, "shape-only", 0))?;
        let mut snn = SnnModel::from_network(shell.net, 1.0, self.cfg.time_steps)?;
        snn.decode = self.cfg.decode;
        snn.load_checkpoint(&ck)?;
        Ok(snn)
    }

    pub fn train_ann(&self, fold: usize) -> Result<TrainReport> {
        let (train, val, _) = self.fold_sets(fold)?;
        let cfg = self.unet_config();
        let mut model = build_unet::<S, _>(&cfg, &mut stream(self.cfg.seed, "init", fold as u64))?;
        let report = train_ann(&mut model.net, &train, &val, &self.train_config(fold, "ann"))?;
        write_text(&self.fold_path(fold, "model.cfg")?, &cfg.to_text())?;
        model.to_checkpoint().save(&self.fold_path(fold, "ann.ckpt")?)?;
        report.write_csv(&self.fold_path(fold, "history_ann.csv")?)?;
        self.summary(
            fold,
            "train-ann",
            &[
                ("epochs", report.history.len().to_string()),
                ("best_epoch", report.convergence_epoch.to_string()),
                ("best_val_loss", format!("{:.6}", report.best_val_loss)),
                ("parameters", model.net.num_parameters().to_string()),
            ],
        )?;
        Ok(report)
    }

    /// Transfers weights and balances thresholds on training slices.
    pub fn convert(&self, fold: usize) -> Result<Vec<(String, S)>> {
        let ann = self.load_ann(fold)?;
        let (train, _, _) = self.fold_sets(fold)?;
        let mut snn = transfer_weights(&ann.net, self.cfg.time_steps, 1.0)?;
        snn.decode = self.cfg.decode;
        let calib = calibration_slices(&train, self.cfg.calib_samples)?;
        let conv = ConversionConfig {
            balance_steps: self.cfg.balance_time_steps,
            calib_samples: self.cfg.calib_samples,
            percentile: self.cfg.percentile,
            initial_threshold: 1.0,
        };
        let set = threshold_balance(&mut snn, &calib.images, &conv, derive_seed(self.cfg.seed, "balance", fold as u64))?;
        snn.to_checkpoint().save(&self.fold_path(fold, "snn_converted.ckpt")?)?;
        let lines: Vec<(&str, String)> = set.iter().map(|(n, v)| (n.as_str(), format!("{v}"))).collect();
        self.summary(fold, "convert", &lines)?;
        Ok(set)
    }

    pub fn finetune(&self, fold: usize) -> Result<TrainReport> {
        let mut snn = self.load_snn(fold, "converted")?;
        let (train, val, _) = self.fold_sets(fold)?;
        let cfg = self.spike_config(fold, "finetune", self.cfg.snn_epochs);
        let report = finetune_loop(&mut snn, &train, &val, &cfg)?;
        snn.to_checkpoint().save(&self.fold_path(fold, "snn_finetuned.ckpt")?)?;
        report.write_csv(&self.fold_path(fold, "history_finetune.csv")?)?;
        self.spike_summary(fold, "finetune", &report)?;
        Ok(report)
    }

    pub fn train_direct(&self, fold: usize) -> Result<TrainReport> {
        let (train, val, _) = self.fold_sets(fold)?;
        let unet = self.unet_config();
        let cfg = self.spike_config(fold, "direct", self.cfg.direct_epochs);
        let (snn, report) = train_direct(&unet, self.cfg.time_steps, self.cfg.decode, &train, &val, &cfg)?;
        write_text(&self.fold_path(fold, "model.cfg")?, &unet.to_text())?;
        snn.to_checkpoint().save(&self.fold_path(fold, "snn_direct.ckpt")?)?;
        report.write_csv(&self.fold_path(fold, "history_direct.csv")?)?;
        self.spike_summary(fold, "train-direct", &report)?;
        Ok(report)
    }

    fn spike_summary(&self, fold: usize, stage: &str, report: &TrainReport) -> Result<()> {
        self.summary(
            fold,
            stage,
            &[
                ("epochs", report.history.len().to_string()),
                ("convergence_epoch", report.convergence_epoch.to_string()),
                ("best_val_loss", format!("{:.6}", report.best_val_loss)),
                ("T_train", self.cfg.train_time_steps.to_string()),
                ("alpha", self.cfg.alpha.to_string()),
            ],
        )
    }

    /// Test-set probabilities of `model`; SNNs run for `T` steps.
    fn predict(&self, fold: usize, model: &str, test: &SliceSet<S>) -> Result<Option<(Tensor<S>, Option<FiringStats>)>> {
        if model == "ann" {
            let ann = self.load_ann(fold)?;
            return Ok(Some((predict_ann(&ann.net, &test.images, 32)?, None)));
        }
        let path = self.fold_path(fold, &format!("snn_{model}.ckpt"))?;
        if !path.exists() {
            return Ok(None);
        }
        let snn = self.load_snn(fold, model)?;
        let (p, stats) = forward_snn_indexed(&snn, &test.images, self.cfg.time_steps, derive_seed(self.cfg.seed, "eval", fold as u64), 0)?;
        Ok(Some((p, Some(stats))))
    }

    /// Writes 2D and 3D metrics for every available model of `fold`.
    /// The ANN and converted checkpoints are required.
    pub fn eval(&self, fold: usize) -> Result<Vec<(String, f64, f64)>> {
        require(&self.fold_path(fold, "ann.ckpt")?)?;
        require(&self.fold_path(fold, "snn_converted.ckpt")?)?;
        let (_, _, test) = self.fold_sets(fold)?;
        let overlay_dir = self.fold_path(fold, "overlays")?;
        std::fs::create_dir_all(&overlay_dir)?;
        let per = HEIGHT * WIDTH;
        let show = overlay_slice(&test);
        let mut out = Vec::new();
        for model in MODELS {
            let Some((pred, stats)) = self.predict(fold, model, &test)? else {
                continue;
            };
            let (rows2, rows3) = metric_rows(fold, &test, &pred)?;
            let span = show * per..(show + 1) * per;
            let p = binarize(&pred.data()[span.clone()]);
            let r = binarize(&test.masks.data()[span.clone()]);
            let (subject, z) = test.origin[show];
            write_pgm(
                &overlay_dir.join(format!("{model}_s{subject:03}_z{z:02}.pgm")),
                &overlay_image(&test.images.data()[span], &p, &r),
                HEIGHT,
                WIDTH,
                Orientation::Native,
            )?;
            write_metrics_csv(&self.fold_path(fold, &format!("metrics_2d_{model}.csv"))?, &rows2)?;
            write_metrics_csv(&self.fold_path(fold, &format!("metrics_3d_{model}.csv"))?, &rows3)?;
            if let Some(s) = stats {
                write_firing_csv(&self.fold_path(fold, &format!("firing_{model}.csv"))?, &s.rows())?;
            }
            let d2 = aggregate(&rows2, true)?.mean;
            let d3 = aggregate(&rows3, true)?.mean;
            out.push((model.to_string(), d2, d3));
        }
        let mut lines = Vec::new();
        for (m, d2, d3) in &out {
            lines.push((format!("{m}_dice_2d"), format!("{d2:.4}")));
            lines.push((format!("{m}_dice_3d"), format!("{d3:.4}")));
        }
        let refs: Vec<(&str, String)> = lines.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        self.summary(fold, "eval", &refs)?;
        Ok(out)
    }

    fn completed_folds(&self, loss: LossKind) -> Vec<PathBuf> {
        (0..self.cfg.folds)
            .map(|f| self.loss_dir(loss).join(format!("fold{f}")))
            .filter(|d| d.join("metrics_3d_ann.csv").exists())
            .collect()
    }

    /// Aggregates every completed fold into the report tables.
    pub fn report(&self) -> Result<PathBuf> {
        let dir = self.out.join("report");
        let mut any = false;
        let mut table = String::from("loss,ann_2d,converted_2d,finetuned_2d,ann_3d,converted_3d,finetuned_3d\n");
        let mut table_ne = table.clone();
        for loss in LossKind::ALL {
            let folds = self.completed_folds(loss);
            any |= !folds.is_empty();
            let _ = write!(table, "{loss}");
            let _ = write!(table_ne, "{loss}");
            for dim in ["2d", "3d"] {
                for model in ["ann", "converted", "finetuned"] {
                    let mut rows = Vec::new();
                    for f in &folds {
                        let p = f.join(format!("metrics_{dim}_{model}.csv"));
                        if p.exists() {
                            rows.extend(read_metrics_csv(&p)?);
                        }
                    }
                    let cell = |inc: bool| match aggregate(&rows, inc) {
                        Ok(m) => m.to_string(),
                        Err(_) => "n/a".to_string(),
                    };
                    let _ = write!(table, ",{}", cell(true));
                    let _ = write!(table_ne, ",{}", cell(false));
                }
            }
            table.push('\n');
            table_ne.push('\n');
        }
        if !any {
            return Err(Error::MissingArtifact(
                self.loss_dir(self.cfg.loss).join("fold0").join("metrics_3d_ann.csv"),
            ));
        }
        std::fs::create_dir_all(&dir)?;
        write_text(&dir.join("table1.csv"), &table)?;
        write_text(&dir.join("table1_nonempty.csv"), &table_ne)?;
        self.convergence_table(&dir)?;
        self.firing_table(&dir)?;
        Ok(dir)
    }

    fn convergence_table(&self, dir: &Path) -> Result<()> {
        let mut s = String::from("loss,method,mean_epochs,std_epochs,folds\n");
        for loss in LossKind::ALL {
            let (mut ft, mut dt) = (Vec::new(), Vec::new());
            for f in self.completed_folds(loss) {
                let (a, b) = (f.join("history_finetune.csv"), f.join("history_direct.csv"));
                if a.exists() && b.exists() {
                    let (x, y) = TrainReport::read_csv(&a)?.epochs_to_common_plateau(&TrainReport::read_csv(&b)?, CONVERGENCE_TOL);
                    ft.push(x as f64);
                    dt.push(y as f64);
                }
            }
            for (name, v) in [("finetune", &ft), ("direct", &dt)] {
                if let Ok(m) = mean_std(v) {
                    let _ = writeln!(s, "{loss},{name},{:.2},{:.2},{}", m.mean, m.std, m.n);
                }
            }
        }
        write_text(&dir.join("convergence.csv"), &s)
    }

    fn firing_table(&self, dir: &Path) -> Result<()> {
        let mut s = String::from("loss,layer,converted,finetuned\n");
        for loss in LossKind::ALL {
            let folds = self.completed_folds(loss);
            let mut acc: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
            for f in &folds {
                let (a, b) = (f.join("firing_converted.csv"), f.join("firing_finetuned.csv"));
                if !(a.exists() && b.exists()) {
                    continue;
                }
                let (ra, rb) = (read_firing_csv(&a)?, read_firing_csv(&b)?);
                for (x, y) in ra.iter().zip(&rb) {
                    match acc.iter_mut().find(|e| e.0 == x.layer) {
                        Some(e) => {
                            e.1.push(x.frequency);
                            e.2.push(y.frequency);
                        }
                        None => acc.push((x.layer.clone(), vec![x.frequency], vec![y.frequency])),
                    }
                }
            }
            for (layer, a, b) in &acc {
                let _ = writeln!(s, "{loss},{layer},{:.6},{:.6}", mean_std(a)?.mean, mean_std(b)?.mean);
            }
        }
        write_text(&dir.join("firing_rates.csv"), &s)
    }

    /// Every stage for one fold, in order.
    pub fn run_fold(&self, fold: usize, with_direct: bool) -> Result<Vec<(String, f64, f64)>> {
        self.train_ann(fold)?;
        self.convert(fold)?;
        self.finetune(fold)?;
        if with_direct {
            self.train_direct(fold)?;
        }
        self.eval(fold)
    }
}

/// Relative slack when comparing epochs to a shared validation-loss plateau.
pub const CONVERGENCE_TOL: f64 = 0.02;

/// Leading `n` training slices in a seed-independent order that favors
/// slices containing target, so balancing sees the relevant dynamic range.
fn calibration_slices(train: &SliceSet<S>, n: usize) -> Result<SliceSet<S>> {
    let per = train.images.numel() / train.len().max(1);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let fg = |i: usize| train.masks.data()[i * per..(i + 1) * per].iter().filter(|&&m| m > 0.5).count();
    idx.sort_by_key(|&i| (fg(i) == 0, i));
    idx.truncate(n.min(train.len()));
    train.subset(&idx)
}

/// Slice-wise and subject-wise Dice rows of `pred` against the masks of
/// `set`, whose slices are grouped by subject in `origin` order.
pub fn metric_rows(fold: usize, set: &SliceSet<S>, pred: &Tensor<S>) -> Result<(Vec<MetricRow>, Vec<MetricRow>)> {
    if pred.shape() != set.masks.shape() {
        return Err(shape_err!("prediction {:?} vs masks {:?}", pred.shape(), set.masks.shape()));
    }
    let per = pred.numel() / set.len().max(1);
    let mut rows2 = Vec::new();
    let mut rows3 = Vec::new();
    let mut vol_p: Vec<bool> = Vec::new();
    let mut vol_r: Vec<bool> = Vec::new();
    for (i, &(subject, z)) in set.origin.iter().enumerate() {
        let p = binarize(&pred.data()[i * per..(i + 1) * per]);
        let r = binarize(&set.masks.data()[i * per..(i + 1) * per]);
        rows2.push(MetricRow {
            fold,
            subject,
            slice: Some(z),
            dice: 100.0 * dice_2d(&p, &r)?,
            empty: !r.iter().any(|&x| x),
        });
        vol_p.extend(p);
        vol_r.extend(r);
        if i + 1 == set.len() || set.origin[i + 1].0 != subject {
            rows3.push(MetricRow {
                fold,
                subject,
                slice: None,
                dice: 100.0 * dice_3d(&vol_p, &vol_r)?,
                empty: !vol_r.iter().any(|&x| x),
            });
            vol_p.clear();
            vol_r.clear();
        }
    }
    Ok((rows2, rows3))
}

/// Test slice with the most target pixels.
fn overlay_slice(test: &SliceSet<S>) -> usize {
    let per = HEIGHT * WIDTH;
    (0..test.len())
        .max_by_key(|&i| (test.masks.data()[i * per..(i + 1) * per].iter().filter(|&&m| m > 0.5).count(), std::cmp::Reverse(i)))
        .unwrap_or(0)
}

pub fn read_firing_csv(path: &Path) -> Result<Vec<FiringRow>> {
    let text = std::fs::read_to_string(require(path)?)?;
    let bad = || Error::Config(format!("{}: malformed firing row", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 3 {
                return Err(bad());
            }
            Ok(FiringRow {
                layer: c[0].to_string(),
                threshold: c[1].parse().map_err(|_| bad())?,
                frequency: c[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
