//! Synthetic phantom volumes, slicing, `.svol` and PGM I/O, and k-fold splits.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::rng::{stream, StreamRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEPTH: usize = 24;
pub const HEIGHT: usize = 56;
pub const WIDTH: usize = 48;

/// Cropped intensity volume with its binary target mask, stored `[d][h][w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub subject: u32,
    pub dims: (usize, usize, usize),
    /// Intensities in `[0, 1]`.
    pub intensities: Vec<f32>,
    /// 0 or 1 per voxel.
    pub mask: Vec<u8>,
}

impl Volume {
    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.dims;
        let n = d * h * w;
        if n == 0 || self.intensities.len() != n || self.mask.len() != n {
            return Err(shape_err!(
                "volume {:?} with {} intensities and {} mask voxels",
                self.dims,
                self.intensities.len(),
                self.mask.len()
            ));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::Input("mask is not binary".into()));
        }
        if self.intensities.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Input("intensity outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn mask_fraction(&self) -> f64 {
        self.mask.iter().map(|&m| m as usize).sum::<usize>() as f64 / self.mask.len() as f64
    }
}

/// One 2D image and mask pair, `[h][w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

/// Splits a `24 x 56 x 48` volume along its first axis.
pub fn slice_volume(v: &Volume) -> Result<Vec<Slice>> {
    if v.dims != (DEPTH, HEIGHT, WIDTH) {
        return Err(shape_err!("expected a {DEPTH}x{HEIGHT}x{WIDTH} volume, got {:?}", v.dims));
    }
    v.validate()?;
    let per = HEIGHT * WIDTH;
    Ok((0..DEPTH)
        .map(|z| Slice {
            image: v.intensities[z * per..(z + 1) * per].to_vec(),
            mask: v.mask[z * per..(z + 1) * per].to_vec(),
        })
        .collect())
}

/// Inverse of [`slice_volume`].
pub fn stack_slices(subject: u32, slices: &[Slice]) -> Result<Volume> {
    let per = HEIGHT * WIDTH;
    if slices.len() != DEPTH || slices.iter().any(|s| s.image.len() != per || s.mask.len() != per) {
        return Err(shape_err!("expected {DEPTH} slices of {HEIGHT}x{WIDTH}"));
    }
    Ok(Volume {
        subject,
        dims: (DEPTH, HEIGHT, WIDTH),
        intensities: slices.iter().flat_map(|s| s.image.iter().copied()).collect(),
        mask: slices.iter().flat_map(|s| s.mask.iter().copied()).collect(),
    })
}

struct Blob {
    center: [f64; 3],
    axes: [f64; 3],
    /// In-plane rotation of the (h, w) axes.
    angle: f64,
    /// Bend of the h coordinate, proportional to the squared along-axis offset.
    bend: f64,
}

impl Blob {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dz = z - self.center[0];
        let dy = y - self.center[1];
        let dx = x - self.center[2];
        let (s, c) = self.angle.sin_cos();
        let along = c * dx + s * dy;
        let across = -s * dx + c * dy - self.bend * along * along;
        let q = (dz / self.axes[0]).powi(2) + (across / self.axes[1]).powi(2) + (along / self.axes[2]).powi(2);
        q <= 1.0
    }

    fn count(&self) -> usize {
        let mut n = 0;
        for z in 0..DEPTH {
            for y in 0..HEIGHT {
                for x in 0..WIDTH {
                    n += self.contains(z as f64, y as f64, x as f64) as usize;
                }
            }
        }
        n
    }
}

fn background(rng: &mut StreamRng) -> impl Fn(f64, f64, f64) -> f64 {
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let base = rng.random_range(0.25..0.35);
    move |z, y, x| {
        let t: f64 = waves.iter().map(|w| (w[0] * z + w[1] * y + w[2] * x + w[3]).sin()).sum();
        base + 0.025 * t
    }
}

/// Noise-free subject `subject`: target blob, textured background and
/// distractor blobs. Noise is added by [`generate_phantom`].
pub fn generate_clean_subject(seed: u64, subject: u32) -> Volume {
    let mut rng = stream(seed, "data", subject as u64);
    let bg = background(&mut rng);
    let target_fraction = rng.random_range(0.03..0.065);
    let mut blob = Blob {
        center: [
            rng.random_range(9.0..15.0),
            rng.random_range(22.0..34.0),
            rng.random_range(19.0..29.0),
        ],
        axes: [
            rng.random_range(4.0..6.0),
            rng.random_range(4.0..6.5),
            rng.random_range(10.0..15.0),
        ],
        angle: rng.random_range(-0.6..0.6),
        bend: rng.random_range(-0.04..0.04),
    };
    let want = target_fraction * (DEPTH * HEIGHT * WIDTH) as f64;
    for _ in 0..8 {
        let have = blob.count() as f64;
        if (have - want).abs() / want < 0.05 {
            break;
        }
        let s = (want / have.max(1.0)).cbrt();
        blob.axes.iter_mut().for_each(|a| *a *= s);
    }
    let contrast = rng.random_range(0.25..0.4);
    let n_distract = rng.random_range(1..=3);
    let distractors: Vec<(Blob, f64)> = (0..n_distract)
        .map(|_| loop {
            let c = [
                rng.random_range(3.0..21.0),
                rng.random_range(6.0..50.0),
                rng.random_range(6.0..42.0),
            ];
            let r = rng.random_range(2.0..3.5);
            let d = ((c[1] - blob.center[1]).powi(2) + (c[2] - blob.center[2]).powi(2)).sqrt();
            if d > blob.axes[2] + r + 3.0 || (c[0] - blob.center[0]).abs() > blob.axes[0] + r + 2.0 {
                let level = if rng.random_bool(0.5) { 0.45 } else { -0.2 };
                break (
                    Blob {
                        center: c,
                        axes: [r, r, r],
                        angle: 0.0,
                        bend: 0.0,
                    },
                    level,
                );
            }
        })
        .collect();

    let n = DEPTH * HEIGHT * WIDTH;
    let mut intensities = vec![0f32; n];
    let mut mask = vec![0u8; n];
    for z in 0..DEPTH {
        for y in 0..HEIGHT {
            for x in 0..WIDTH {
                let i = (z * HEIGHT + y) * WIDTH + x;
                let (zf, yf, xf) = (z as f64, y as f64, x as f64);
                let mut v = bg(zf, yf, xf);
                if blob.contains(zf, yf, xf) {
                    v += contrast;
                    mask[i] = 1;
                } else if let Some((_, level)) = distractors.iter().find(|(b, _)| b.contains(zf, yf, xf)) {
                    v += level;
                }
                intensities[i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Volume {
        subject,
        dims: (DEPTH, HEIGHT, WIDTH),
        intensities,
        mask,
    }
}

/// `n_subjects` phantoms with per-subject Gaussian noise, clamped to `[0, 1]`.
pub fn generate_phantom(seed: u64, n_subjects: usize) -> Result<Vec<Volume>> {
    if n_subjects == 0 {
        return Err(Error::Config("need at least one subject".into()));
    }
    Ok((0..n_subjects as u32)
        .into_par_iter()
        .map(|s| {
            let mut v = generate_clean_subject(seed, s);
            let mut rng = stream(seed, "noise", s as u64);
            let sigma = rng.random_range(0.02..0.06);
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            for x in v.intensities.iter_mut() {
                *x = (*x as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
            v
        })
        .collect())
}

const SVOL_MAGIC: &[u8; 4] = b"SVOL";
const SVOL_VERSION: u32 = 1;

pub fn volume_to_bytes(v: &Volume) -> Result<Vec<u8>> {
    v.validate()?;
    let mut out = Vec::with_capacity(24 + v.intensities.len() * 5);
    out.extend_from_slice(SVOL_MAGIC);
    out.extend_from_slice(&SVOL_VERSION.to_le_bytes());
    for d in [v.dims.0, v.dims.1, v.dims.2] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&v.subject.to_le_bytes());
    for x in &v.intensities {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&v.mask);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn volume_from_bytes(buf: &[u8]) -> Result<Volume> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != SVOL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "bad magic, expected SVOL".into(),
        });
    }
    let at = c.pos;
    let version = c.u32("version")?;
    if version != SVOL_VERSION {
        return Err(Error::Parse {
            offset: at,
            msg: format!("unsupported version {version}"),
        });
    }
    let at = c.pos;
    let dims = (c.u32("dims")? as usize, c.u32("dims")? as usize, c.u32("dims")? as usize);
    let n = dims
        .0
        .checked_mul(dims.1)
        .and_then(|x| x.checked_mul(dims.2))
        .filter(|&n| n > 0 && n <= buf.len())
        .ok_or_else(|| Error::Parse {
            offset: at,
            msg: format!("implausible dims {dims:?}"),
        })?;
    let subject = c.u32("subject id")?;
    let raw = c.take(4 * n, "intensities")?;
    let intensities = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let at = c.pos;
    let mask = c.take(n, "mask")?.to_vec();
    if c.pos != buf.len() {
        return Err(Error::Parse {
            offset: c.pos,
            msg: "trailing bytes".into(),
        });
    }
    let v = Volume {
        subject,
        dims,
        intensities,
        mask,
    };
    v.validate().map_err(|e| Error::Parse {
        offset: at,
        msg: e.to_string(),
    })?;
    Ok(v)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    std::fs::write(path, volume_to_bytes(v)?)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match std::fs::read(path) {
        Ok(b) => volume_from_bytes(&b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Orientation {
    /// Rows are image rows: header reads `48 56`.
    #[default]
    Native,
    /// Transposed: header reads `56 48`.
    Transposed,
}

/// Binary 8-bit PGM of an `h x w` image of values in `[0, 1]`.
pub fn pgm_bytes(image: &[f32], h: usize, w: usize, orientation: Orientation) -> Result<Vec<u8>> {
    if image.len() != h * w {
        return Err(shape_err!("{} pixels for a {h}x{w} image", image.len()));
    }
    let px = |y: usize, x: usize| (image[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
    let (cols, rows) = match orientation {
        Orientation::Native => (w, h),
        Orientation::Transposed => (h, w),
    };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        for c in 0..cols {
            out.push(match orientation {
                Orientation::Native => px(r, c),
                Orientation::Transposed => px(c, r),
            });
        }
    }
    Ok(out)
}

/// Image dimmed to 70% with predicted-mask pixels at full white and
/// reference-only pixels black.
pub fn overlay_image(image: &[f32], pred: &[bool], truth: &[bool]) -> Vec<f32> {
    image
        .iter()
        .zip(pred.iter().zip(truth))
        .map(|(&x, (&p, &t))| match (p, t) {
            (true, _) => 1.0,
            (false, true) => 0.0,
            _ => 0.7 * x,
        })
        .collect()
}

pub fn write_pgm(path: &Path, image: &[f32], h: usize, w: usize, orientation: Orientation) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&pgm_bytes(image, h, w, orientation)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub test: Vec<u32>,
    pub train: Vec<u32>,
}

/// Shuffled partition of `ids` into `k` equal test folds.
pub fn kfold_split(ids: &[u32], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 || !ids.len().is_multiple_of(k) {
        return Err(Error::Config(format!("{} subjects cannot be split into {k} equal folds", ids.len())));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut stream(seed, "folds", 0));
    let size = ids.len() / k;
    Ok((0..k)
        .map(|f| {
            let mut test = order[f * size..(f + 1) * size].to_vec();
            let mut train: Vec<u32> = order.iter().copied().filter(|id| !test.contains(id)).collect();
            test.sort_unstable();
            train.sort_unstable();
            FoldSplit { fold: f, test, train }
        })
        .collect())
}

/// Stacked 2D slices `[N, 1, H, W]` with masks and their origin.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSet<S> {
    pub images: Tensor<S>,
    pub masks: Tensor<S>,
    /// `(subject, slice index)` of every entry.
    pub origin: Vec<(u32, usize)>,
}

impl<S: Scalar> SliceSet<S> {
    pub fn new(images: Tensor<S>, masks: Tensor<S>) -> Result<Self> {
        if images.shape() != masks.shape() || images.rank() != 4 {
            return Err(shape_err!("images {:?} vs masks {:?}", images.shape(), masks.shape()));
        }
        let n = images.shape()[0];
        Ok(SliceSet {
            images,
            masks,
            origin: (0..n).map(|i| (0, i)).collect(),
        })
    }

    pub fn from_volumes(volumes: &[&Volume]) -> Result<Self> {
        let mut images = Vec::new();
        let mut masks = Vec::new();
        let mut origin = Vec::new();
        for v in volumes {
            for (z, s) in slice_volume(v)?.into_iter().enumerate() {
                images.extend(s.image.iter().map(|&x| S::lit(x as f64)));
                masks.extend(s.mask.iter().map(|&m| S::lit(m as f64)));
                origin.push((v.subject, z));
            }
        }
        let shape = vec![origin.len(), 1, HEIGHT, WIDTH];
        Ok(SliceSet {
            images: Tensor::new(shape.clone(), images)?,
            masks: Tensor::new(shape, masks)?,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    /// Rows `idx` of a `[N, ...]` tensor.
    pub fn gather(t: &Tensor<S>, idx: &[usize]) -> Result<Tensor<S>> {
        let n = t.shape()[0];
        let per = t.numel() / n;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= n {
                return Err(shape_err!("row {i} of {n}"));
            }
            data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(SliceSet {
            images: Self::gather(&self.images, idx)?,
            masks: Self::gather(&self.masks, idx)?,
            origin: idx.iter().map(|&i| self.origin[i]).collect(),
        })
    }

    /// Deterministic split into (train, validation) by whole subjects.
    pub fn split_subjects(&self, val_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let mut subjects: Vec<u32> = self.origin.iter().map(|o| o.0).collect();
        subjects.dedup();
        subjects.shuffle(&mut stream(seed, "val-split", 0));
        let n_val = ((subjects.len() as f64 * val_fraction).round() as usize).clamp(1, subjects.len().saturating_sub(1).max(1));
        let val_ids = &subjects[..n_val];
        let (mut tr, mut va) = (Vec::new(), Vec::new());
        for (i, o) in self.origin.iter().enumerate() {
            if val_ids.contains(&o.0) {
                va.push(i);
            } else {
                tr.push(i);
            }
        }
        if tr.is_empty() {
            tr = va.clone();
        }
        Ok((self.subset(&tr)?, self.subset(&va)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_roundtrip_and_errors() {
        let v = generate_clean_subject(3, 0);
        let s = slice_volume(&v).unwrap();
        assert_eq!(s.len(), 24);
        assert_eq!(stack_slices(0, &s).unwrap(), v);
        let bad = Volume {
            subject: 0,
            dims: (2, 2, 2),
            intensities: vec![0.0; 8],
            mask: vec![0; 8],
        };
        assert!(matches!(slice_volume(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn svol_roundtrip_and_truncation() {
        let v = &generate_phantom(1, 1).unwrap()[0];
        let b = volume_to_bytes(v).unwrap();
        assert_eq!(&volume_from_bytes(&b).unwrap(), v);
        match volume_from_bytes(&b[..b.len() - 3]) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 20),
            other => panic!("{other:?}"),
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(volume_from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn pgm_header() {
        let img = vec![0.5f32; HEIGHT * WIDTH];
        let a = pgm_bytes(&img, HEIGHT, WIDTH, Orientation::Native).unwrap();
        assert!(a.starts_with(b"P5\n48 56\n255\n"));
        let b = pgm_bytes(&img, HEIGHT, WIDTH, Orientation::Transposed).unwrap();
        assert!(b.starts_with(b"P5\n56 48\n255\n"));
        assert_eq!(a.len(), 13 + HEIGHT * WIDTH);
    }

    #[test]
    fn folds() {
        let ids: Vec<u32> = (0..110).collect();
        let f = kfold_split(&ids, 5, 4).unwrap();
        assert_eq!(f.len(), 5);
        let mut all: Vec<u32> = f.iter().flat_map(|s| s.test.clone()).collect();
        assert!(f.iter().all(|s| s.test.len() == 22 && s.train.len() == 88));
        all.sort_unstable();
        assert_eq!(all, ids);
        assert_eq!(f, kfold_split(&ids, 5, 4).unwrap());
        assert!(matches!(kfold_split(&ids[..7], 5, 4), Err(Error::Config(_))));
    }

    #[test]
    fn subject_split_is_disjoint() {
        let vols = generate_phantom(2, 4).unwrap();
        let refs: Vec<&Volume> = vols.iter().collect();
        let set = SliceSet::<f32>::from_volumes(&refs).unwrap();
        assert_eq!(set.len(), 96);
        let (tr, va) = set.split_subjects(0.25, 0).unwrap();
        assert_eq!(tr.len() + va.len(), 96);
        assert!(va.origin.iter().all(|o| !tr.origin.iter().any(|p| p.0 == o.0)));
    }
}
