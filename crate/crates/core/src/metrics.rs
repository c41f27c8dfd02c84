//! Dice ratios and their aggregation.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Strictly above 0.5 counts as foreground.
pub fn binarize<S: Scalar>(x: &[S]) -> Vec<bool> {
    let half = S::lit(0.5);
    x.iter().map(|&v| v > half).collect()
}

fn dice(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(shape_err!("prediction of {} vs reference of {} pixels", pred.len(), truth.len()));
    }
    let (mut both, mut p, mut r) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        both += (a && b) as usize;
        p += a as usize;
        r += b as usize;
    }
    if p + r == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + r) as f64)
}

/// Slice-wise Dice, 1.0 when both masks are empty.
pub fn dice_2d(pred: &[bool], truth: &[bool]) -> Result<f64> {
    dice(pred, truth)
}

/// Subject-wise Dice over a whole volume, 1.0 when both masks are empty.
pub fn dice_3d(pred: &[bool], truth: &[bool]) -> Result<f64> {
    dice(pred, truth)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Usage("cannot aggregate an empty set of values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(MeanStd {
        mean,
        std: var.sqrt(),
        n: values.len(),
    })
}

/// One line of a metrics CSV; `slice` is `None` for subject-wise rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub fold: usize,
    pub subject: u32,
    pub slice: Option<usize>,
    /// Dice in percent.
    pub dice: f64,
    /// Whether the reference mask of this slice or volume is empty.
    pub empty: bool,
}

/// Mean±std of `rows`, optionally leaving out rows with an empty reference.
pub fn aggregate(rows: &[MetricRow], include_empty: bool) -> Result<MeanStd> {
    let v: Vec<f64> = rows.iter().filter(|r| include_empty || !r.empty).map(|r| r.dice).collect();
    mean_std(&v)
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "fold,subject,slice,dice,empty")?;
    for r in rows {
        let slice = r.slice.map_or_else(|| "-".to_string(), |s| s.to_string());
        writeln!(f, "{},{},{},{:.4},{}", r.fold, r.subject, slice, r.dice, r.empty as u8)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingArtifact(path.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    let bad = |line: usize| Error::Config(format!("{}: malformed metrics row {line}", path.display()));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 5 {
                return Err(bad(i + 1));
            }
            Ok(MetricRow {
                fold: c[0].parse().map_err(|_| bad(i + 1))?,
                subject: c[1].parse().map_err(|_| bad(i + 1))?,
                slice: if c[2] == "-" { None } else { Some(c[2].parse().map_err(|_| bad(i + 1))?) },
                dice: c[3].parse().map_err(|_| bad(i + 1))?,
                empty: c[4] == "1",
            })
        })
        .collect()
}
