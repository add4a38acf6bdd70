//! Datasets, IDX files and spike encoders.
//!
//! IDX layout: a big-endian `u32` magic whose third byte is the element type
//! (`0x08` = unsigned byte) and whose low byte is the number of dimensions,
//! followed by one big-endian `u32` per dimension and the raw bytes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Static images in [0, 1] with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// [N, C, H, W].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Consistency(format!(
                "images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!("label {bad} out of range for {class_count} classes")));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape [C, H, W].
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// The first `n` samples (or all, if fewer).
    pub fn truncated(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.select_axis0(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }
}

/// Pre-encoded spike frames with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EventDataset {
    /// [T, N, C, H, W].
    pub frames: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl EventDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.frames.shape()[2..]
    }
}

fn read_header(bytes: &[u8], path: &Path) -> Result<(u32, Vec<usize>, usize)> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                detail: "truncated header".into(),
            })
    };
    let magic = word(0)?;
    let ndims = (magic & 0xff) as usize;
    let dims = (1..=ndims).map(|i| word(i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    Ok((magic, dims, 4 * (ndims + 1)))
}

fn read_idx(path: &Path, expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, dims, offset) = read_header(&bytes, path)?;
    if magic != expected_magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("magic number {magic} (0x{magic:08x}), expected {expected_magic} (0x{expected_magic:08x})"),
        });
    }
    let count: usize = dims.iter().product();
    let body = &bytes[offset..];
    if body.len() != count {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("dimensions {dims:?} need {count} bytes, file holds {}", body.len()),
        });
    }
    Ok((dims, body.to_vec()))
}

/// Loads an IDX image/label pair; pixels are scaled by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let (idims, pixels) = read_idx(images_path, IDX_IMAGES_MAGIC)?;
    let (ldims, labels) = read_idx(labels_path, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::Consistency(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            idims[0],
            labels_path.display(),
            ldims[0]
        )));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let images = Tensor::new(
        vec![idims[0], 1, idims[1], idims[2]],
        pixels.into_iter().map(|b| f64::from(b) / 255.0).collect(),
    )?;
    Dataset::new(images, labels, class_count)
}

fn idx_bytes(magic: u32, dims: &[usize], body: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(body);
    out
}

/// Writes single-channel images and labels as an IDX pair.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let s = ds.images.shape();
    if s[1] != 1 {
        return Err(Error::Data("IDX images are single-channel".into()));
    }
    if ds.labels.iter().any(|&l| l > 255) {
        return Err(Error::Data("IDX labels must fit in one byte".into()));
    }
    let images = idx_bytes(
        IDX_IMAGES_MAGIC,
        &[s[0], s[2], s[3]],
        ds.images.data().iter().map(|&v| (v * 255.0).round() as u8),
    );
    let labels = idx_bytes(IDX_LABELS_MAGIC, &[ds.len()], ds.labels.iter().map(|&l| l as u8));
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, images).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, labels).map_err(|e| Error::io(lp, e))?;
    Ok(())
}

/// Each image repeated as constant input current: [T, N, C, H, W].
pub fn encode_direct(ds: &Dataset, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Contract("encoding needs at least one timestep".into()));
    }
    Tensor::stack(&vec![ds.images.clone(); steps])
}

/// Bernoulli(pixel) spikes per element and step, [T, ...] for `images` [...].
pub fn poisson_frames(images: &Tensor, steps: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Contract("encoding needs at least one timestep".into()));
    }
    let mut data = Vec::with_capacity(images.numel() * steps);
    for _ in 0..steps {
        data.extend(images.data().iter().map(|&p| if rng.gen::<f64>() < p { 1.0 } else { 0.0 }));
    }
    let mut shape = vec![steps];
    shape.extend_from_slice(images.shape());
    Tensor::new(shape, data)
}

/// Rate coding of the whole dataset with a ChaCha8 stream seeded by `seed`.
pub fn encode_poisson(ds: &Dataset, steps: usize, seed: u64) -> Result<Tensor> {
    poisson_frames(&ds.images, steps, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Generators for synthetic spike data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case")]
pub enum SynthPattern {
    /// Two classes on an 8x8 grid; every pixel fires i.i.d. with the class rate.
    TwoClassRates { low: f64, high: f64 },
    /// Four classes on an 8x8 grid: a bar sweeping right, left, down or up,
    /// one pixel per step from a random start. Bar pixels fire with
    /// probability 0.9, background pixels with 0.02.
    MovingBar,
}

impl SynthPattern {
    pub const GRID: usize = 8;

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "two_class_rates" => Ok(SynthPattern::TwoClassRates { low: 0.1, high: 0.4 }),
            "moving_bar" => Ok(SynthPattern::MovingBar),
            other => Err(Error::Config(format!(
                "unknown synthetic pattern `{other}` (expected two_class_rates or moving_bar)"
            ))),
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            SynthPattern::TwoClassRates { .. } => 2,
            SynthPattern::MovingBar => 4,
        }
    }
}

/// Class-balanced synthetic spike frames [T, N, 1, 8, 8]; label of sample `i` is `i % classes`.
pub fn synth_events(pattern: SynthPattern, samples: usize, steps: usize, seed: u64) -> Result<EventDataset> {
    if samples == 0 || steps == 0 {
        return Err(Error::Contract("synthetic data needs N >= 1 and T >= 1".into()));
    }
    let g = SynthPattern::GRID;
    let plane = g * g;
    let classes = pattern.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    let mut data = vec![0.0; steps * samples * plane];
    for (n, &label) in labels.iter().enumerate() {
        let start = rng.gen_range(0..g);
        for t in 0..steps {
            let frame = &mut data[(t * samples + n) * plane..(t * samples + n + 1) * plane];
            for (p, v) in frame.iter_mut().enumerate() {
                let (y, x) = (p / g, p % g);
                let rate = match pattern {
                    SynthPattern::TwoClassRates { low, high } => {
                        if label == 0 {
                            low
                        } else {
                            high
                        }
                    }
                    SynthPattern::MovingBar => {
                        let pos = (start + t) % g;
                        let on = match label {
                            0 => x == pos,
                            1 => x == g - 1 - pos,
                            2 => y == pos,
                            _ => y == g - 1 - pos,
                        };
                        if on {
                            0.9
                        } else {
                            0.02
                        }
                    }
                };
                *v = if rng.gen::<f64>() < rate { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(EventDataset {
        frames: Tensor::new(vec![steps, samples, 1, g, g], data)?,
        labels,
        class_count: classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = Tensor::new(vec![2, 1, 2, 2], vec![0.0, 0.5, 1.0, 0.25, 1.0, 1.0, 0.0, 0.0]).unwrap();
        Dataset::new(images, vec![1, 0], 2).unwrap()
    }

    #[test]
    fn direct_encoding_replicates_frames() {
        let ds = tiny();
        let enc = encode_direct(&ds, 4).unwrap();
        assert_eq!(enc.shape(), &[4, 2, 1, 2, 2]);
        for t in 0..4 {
            assert_eq!(enc.index_axis0(t).unwrap(), ds.images);
        }
        assert_eq!(encode_direct(&ds, 1).unwrap().index_axis0(0).unwrap(), ds.images);
        assert_eq!(enc.sum(), 4.0 * ds.images.sum());
        assert!(encode_direct(&ds, 0).is_err());
    }

    #[test]
    fn poisson_endpoints_are_deterministic() {
        let ds = tiny();
        let enc = encode_poisson(&ds, 50, 9).unwrap();
        assert!(enc.is_binary());
        for t in 0..50 {
            let f = enc.index_axis0(t).unwrap();
            for (p, s) in ds.images.data().iter().zip(f.data()) {
                if *p == 0.0 {
                    assert_eq!(*s, 0.0);
                }
                if *p == 1.0 {
                    assert_eq!(*s, 1.0);
                }
            }
        }
        assert_eq!(enc, encode_poisson(&ds, 50, 9).unwrap());
    }

    #[test]
    fn poisson_rate_concentrates() {
        let images = Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap();
        let ds = Dataset::new(images, vec![0], 1).unwrap();
        let enc = encode_poisson(&ds, 10_000, 42).unwrap();
        let rate = enc.sum() / 10_000.0;
        assert!((rate - 0.5).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn two_class_rates_are_separable_by_count() {
        let ev = synth_events(SynthPattern::from_name("two_class_rates").unwrap(), 40, 20, 3).unwrap();
        assert!(ev.frames.is_binary());
        let plane = 64;
        let mut counts = [Vec::new(), Vec::new()];
        for n in 0..ev.len() {
            let c: f64 = (0..ev.steps())
                .map(|t| ev.frames.data()[(t * ev.len() + n) * plane..(t * ev.len() + n + 1) * plane].iter().sum::<f64>())
                .sum();
            counts[ev.labels[n]].push(c);
        }
        let max_low = counts[0].iter().copied().fold(f64::MIN, f64::max);
        let min_high = counts[1].iter().copied().fold(f64::MAX, f64::min);
        assert!(max_low < min_high, "{max_low} vs {min_high}");
    }

    #[test]
    fn synthetic_data_is_seeded() {
        let a = synth_events(SynthPattern::MovingBar, 8, 6, 11).unwrap();
        assert_eq!(a, synth_events(SynthPattern::MovingBar, 8, 6, 11).unwrap());
        assert_ne!(a.frames, synth_events(SynthPattern::MovingBar, 8, 6, 12).unwrap().frames);
        let single = synth_events(SynthPattern::TwoClassRates { low: 0.1, high: 0.4 }, 4, 1, 0).unwrap();
        assert_eq!(single.frames.shape(), &[1, 4, 1, 8, 8]);
        assert!(matches!(SynthPattern::from_name("spiral"), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_checks_consistency() {
        let images = Tensor::zeros(&[3, 1, 2, 2]);
        assert!(matches!(Dataset::new(images.clone(), vec![0, 1], 2), Err(Error::Consistency(_))));
        assert!(matches!(Dataset::new(images, vec![0, 1, 2], 2), Err(Error::Data(_))));
    }
}
