//! Image and mask I/O (binary PGM/PPM), joint resize and flip transforms,
//! seeded train/val/test splits, and a synthetic shape dataset.
//!
//! Directory layout: `images/<id>.ppm`, `masks/<id>.pgm`, and optional split
//! manifests `train.txt`, `val.txt`, `test.txt` with one id per line.

pub mod pnm;
mod synth;

pub use synth::synth_generate;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use pnm::Raster;

/// One image with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `H·W` class indices, row-major.
    pub mask: Vec<u8>,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Vec<u8>, id: impl Into<String>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || mask.len() != s[1] * s[2] {
            return Err(Error::dim(
                "Sample::new",
                format!("image {s:?} with {} mask pixels", mask.len()),
            ));
        }
        Ok(Sample {
            image,
            mask,
            id: id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Label values including background (2 for binary masks).
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// The samples whose ids appear in `ids`, in that order.
    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        let samples = ids
            .iter()
            .map(|id| {
                self.samples
                    .iter()
                    .find(|s| &s.id == id)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("unknown sample id {id:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            samples,
            num_classes: self.num_classes,
        })
    }
}

/// Stacks samples into an `N×3×H×W` batch and `N·H·W` labels.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let batch = Tensor::stack(&images)?;
    let labels = samples.iter().flat_map(|s| s.mask.iter().copied()).collect();
    Ok((batch, labels))
}

fn data_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads a P5 or P6 file into `3×H×W` values `byte/255`; grey is
/// replicated to all three channels.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let r = pnm::read(path)?;
    let plane = r.width * r.height;
    Ok(Tensor::from_fn(&[3, r.height, r.width], |i| {
        let (c, p) = (i / plane, i % plane);
        let byte = if r.channels == 1 { r.bytes[p] } else { r.bytes[p * 3 + c] };
        f32::from(byte) / 255.0
    }))
}

/// Reads a P5 label map. With two classes, 255 is read as foreground.
/// Returns `(labels, height, width)`.
pub fn load_mask(path: &Path, num_classes: usize) -> Result<(Vec<u8>, usize, usize)> {
    let r = pnm::read(path)?;
    if r.channels != 1 {
        return Err(data_err(path, "mask must be a single-channel PGM"));
    }
    let mut labels = r.bytes;
    for (i, v) in labels.iter_mut().enumerate() {
        if num_classes == 2 && *v == 255 {
            *v = 1;
        } else if *v as usize >= num_classes {
            return Err(data_err(
                path,
                format!(
                    "pixel (x={}, y={}) has label {} but only {num_classes} classes",
                    i % r.width,
                    i / r.width,
                    v
                ),
            ));
        }
    }
    Ok((labels, r.height, r.width))
}

fn to_bytes(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("save_image", format!("{s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let bytes = (0..plane * 3).map(|i| to_bytes(d[(i % 3) * plane + i / 3])).collect();
    pnm::write(
        path,
        &Raster {
            width: w,
            height: h,
            channels: 3,
            bytes,
        },
    )
}

/// Writes labels as a PGM, each index multiplied by `scale`.
pub fn save_mask(path: &Path, mask: &[u8], height: usize, width: usize, scale: u8) -> Result<()> {
    if mask.len() != height * width {
        return Err(Error::dim("save_mask", format!("{} labels for {height}×{width}", mask.len())));
    }
    pnm::write(
        path,
        &Raster {
            width,
            height,
            channels: 1,
            bytes: mask.iter().map(|&v| v.saturating_mul(scale)).collect(),
        },
    )
}

/// Bilinear (half-pixel) for the image, nearest for the mask.
pub fn resize(sample: &Sample, height: usize, width: usize) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    if height == 0 || width == 0 {
        return Err(Error::dim("resize", format!("target {height}×{width}")));
    }
    if (h, w) == (height, width) {
        return Ok(sample.clone());
    }
    let src_coord = |dst: usize, inl: usize, outl: usize| {
        ((dst as f64 + 0.5) * inl as f64 / outl as f64 - 0.5).clamp(0.0, (inl - 1) as f64)
    };
    let d = sample.image.data();
    let image = Tensor::from_fn(&[3, height, width], |i| {
        let (c, y, x) = (i / (height * width), (i / width) % height, i % width);
        let sy = src_coord(y, h, height);
        let sx = src_coord(x, w, width);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ly, lx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
        let at = |yy: usize, xx: usize| d[(c * h + yy) * w + xx];
        let top = at(y0, x0) * (1.0 - lx) + at(y0, x1) * lx;
        let bot = at(y1, x0) * (1.0 - lx) + at(y1, x1) * lx;
        top * (1.0 - ly) + bot * ly
    });
    let nearest = |dst: usize, inl: usize, outl: usize| ((dst * inl * 2 + inl) / (2 * outl)).min(inl - 1);
    let mask = (0..height * width)
        .map(|i| sample.mask[nearest(i / width, h, height) * w + nearest(i % width, w, width)])
        .collect();
    Sample::new(image, mask, sample.id.clone())
}

fn remap(sample: &Sample, map: impl Fn(usize, usize) -> (usize, usize)) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let d = sample.image.data();
    let image = Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = map(y, x);
        d[(c * h + sy) * w + sx]
    });
    let mask = (0..h * w)
        .map(|i| {
            let (sy, sx) = map(i / w, i % w);
            sample.mask[sy * w + sx]
        })
        .collect();
    Sample {
        image,
        mask,
        id: sample.id.clone(),
    }
}

/// Mirrors columns of image and mask.
pub fn flip_h(sample: &Sample) -> Sample {
    let w = sample.width();
    remap(sample, |y, x| (y, w - 1 - x))
}

/// Mirrors rows of image and mask.
pub fn flip_v(sample: &Sample) -> Sample {
    let h = sample.height();
    remap(sample, |y, x| (h - 1 - y, x))
}

/// Random flips applied identically to image and mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub hflip: f64,
    pub vflip: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Augment { hflip: 0.5, vflip: 0.5 }
    }
}

impl Augment {
    pub fn apply(&self, sample: &Sample, rng: &mut impl Rng) -> Sample {
        let h = rng.gen::<f64>() < self.hflip;
        let v = rng.gen::<f64>() < self.vflip;
        match (h, v) {
            (false, false) => sample.clone(),
            (true, false) => flip_h(sample),
            (false, true) => flip_v(sample),
            (true, true) => flip_v(&flip_h(sample)),
        }
    }
}

/// Train/val/test fractions and shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {}/{}/{} must lie in [0, 1] and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then `⌊n·val⌋` validation and `⌊n·test⌋` test ids taken
/// as prefixes; everything left goes to training.
pub fn split(ids: &[String], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n = order.len() as f64;
    // tolerate products like 0.7·10 = 6.999999999999999
    let count = |f: f64| ((n * f) + 1e-9).floor() as usize;
    let (nv, nt) = (count(spec.val), count(spec.test));
    let test = order.split_off(order.len() - nt);
    let val = order.split_off(order.len() - nv);
    Ok(Splits { train: order, val, test })
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.txt"))
}

pub fn write_manifests(dir: &Path, splits: &Splits) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, ids) in SPLIT_NAMES.iter().zip([&splits.train, &splits.val, &splits.test]) {
        let mut text = ids.join("\n");
        if !ids.is_empty() {
            text.push('\n');
        }
        fs::write(manifest_path(dir, name), text)?;
    }
    Ok(())
}

/// Reads `train.txt`, `val.txt`, `test.txt`; `None` when none exist.
pub fn read_manifests(dir: &Path) -> Result<Option<Splits>> {
    if SPLIT_NAMES.iter().all(|n| !manifest_path(dir, n).exists()) {
        return Ok(None);
    }
    let read = |name: &str| -> Result<Vec<String>> {
        let p = manifest_path(dir, name);
        if !p.exists() {
            return Ok(Vec::new());
        }
        Ok(fs::read_to_string(p)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect())
    };
    Ok(Some(Splits {
        train: read("train")?,
        val: read("val")?,
        test: read("test")?,
    }))
}

/// Writes every sample in the directory layout. Binary masks are stored as
/// 0/255, multi-class masks as raw indices.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let scale = if data.num_classes == 2 { 255 } else { 1 };
    for s in &data.samples {
        save_image(&dir.join("images").join(format!("{}.ppm", s.id)), &s.image)?;
        save_mask(
            &dir.join("masks").join(format!("{}.pgm", s.id)),
            &s.mask,
            s.height(),
            s.width(),
            scale,
        )?;
    }
    Ok(())
}

/// Loads every `images/<id>.ppm` (or `.pgm`) with its `masks/<id>.pgm`,
/// sorted by id.
pub fn load_dataset(dir: &Path, num_classes: usize) -> Result<Dataset> {
    let images = dir.join("images");
    if !images.is_dir() {
        return Err(data_err(dir, "missing images/ directory"));
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(&images)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")));
    entries.sort();
    let samples = entries
        .iter()
        .map(|p| {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| data_err(p, "non-UTF-8 file name"))?
                .to_string();
            let image = load_image(p)?;
            let mask_path = dir.join("masks").join(format!("{id}.pgm"));
            let (mask, h, w) = load_mask(&mask_path, num_classes)?;
            if image.shape()[1..] != [h, w] {
                return Err(data_err(
                    &mask_path,
                    format!("mask {h}×{w} does not match image {:?}", &image.shape()[1..]),
                ));
            }
            Sample::new(image, mask, id)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { samples, num_classes })
}

/// Train/val/test datasets from a directory: manifests when present,
/// otherwise a seeded split per `spec`.
pub fn load_splits(dir: &Path, num_classes: usize, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let all = load_dataset(dir, num_classes)?;
    let splits = match read_manifests(dir)? {
        Some(s) => s,
        None => split(&all.ids(), spec)?,
    };
    Ok((all.subset(&splits.train)?, all.subset(&splits.val)?, all.subset(&splits.test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(h: usize, w: usize, seed: u32) -> Sample {
        let image = Tensor::from_fn(&[3, h, w], |i| ((i as u32 * 37 + seed) % 101) as f32 / 100.0);
        let mask = (0..h * w).map(|i| ((i as u32 * 7 + seed) % 3) as u8).collect();
        Sample::new(image, mask, "s").unwrap()
    }

    fn write_raw(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn zero_and_max_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut zero = b"P5\n3 2\n255\n".to_vec();
        zero.extend_from_slice(&[0; 6]);
        let t = load_image(&write_raw(dir.path(), "z.pgm", &zero)).unwrap();
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert!(t.data().iter().all(|&v| v == 0.0));
        let mut full = b"P6\n2 2\n255\n".to_vec();
        full.extend_from_slice(&[255; 12]);
        let t = load_image(&write_raw(dir.path(), "m.ppm", &full)).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_by_two_byte_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = b"P6\n2 2\n255\n".to_vec();
        let bytes: Vec<u8> = (0..12).map(|i| i * 20 + 1).collect();
        buf.extend_from_slice(&bytes);
        let t = load_image(&write_raw(dir.path(), "a.ppm", &buf)).unwrap();
        for c in 0..3 {
            for p in 0..4 {
                assert_eq!(t.data()[c * 4 + p], f32::from(bytes[p * 3 + c]) / 255.0);
            }
        }
        let mut grey = b"P5\n2 2\n255\n".to_vec();
        grey.extend_from_slice(&[10, 20, 30, 40]);
        let t = load_image(&write_raw(dir.path(), "g.pgm", &grey)).unwrap();
        for c in 0..3 {
            assert_eq!(&t.data()[c * 4..c * 4 + 4], &[10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0, 40.0 / 255.0]);
        }
    }

    #[test]
    fn image_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let image = Tensor::from_fn(&[3, 4, 5], |i| ((i * 13) % 256) as f32 / 255.0);
        let p = dir.path().join("sub/img.ppm");
        save_image(&p, &image).unwrap();
        assert_eq!(load_image(&p).unwrap(), image);
    }

    #[test]
    fn binary_masks_map_255() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = b"P5\n2 2\n255\n".to_vec();
        buf.extend_from_slice(&[0, 255, 255, 0]);
        let p = write_raw(dir.path(), "m.pgm", &buf);
        assert_eq!(load_mask(&p, 2).unwrap(), (vec![0, 1, 1, 0], 2, 2));
        assert!(load_mask(&p, 4).is_err());
    }

    #[test]
    fn bad_label_names_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = b"P5\n3 2\n255\n".to_vec();
        buf.extend_from_slice(&[0, 1, 2, 3, 0, 7]);
        let p = write_raw(dir.path(), "m.pgm", &buf);
        let err = load_mask(&p, 4).unwrap_err().to_string();
        assert!(err.contains("x=2, y=1"), "{err}");
        assert!(err.contains("m.pgm"), "{err}");
    }

    #[test]
    fn resize_identity_and_constant() {
        let s = sample(5, 7, 1);
        assert_eq!(resize(&s, 5, 7).unwrap(), s);
        let c = Sample::new(Tensor::full(&[3, 6, 4], 0.4), vec![1; 24], "c").unwrap();
        let r = resize(&c, 9, 13).unwrap();
        assert!(r.image.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        assert!(r.mask.iter().all(|&v| v == 1));
        let back = resize(&r, 6, 4).unwrap();
        assert!(back.image.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn nearest_mask_replicates_blocks() {
        let s = Sample::new(Tensor::zeros(&[3, 2, 2]), vec![0, 1, 2, 3], "m").unwrap();
        let r = resize(&s, 4, 4).unwrap();
        #[rustfmt::skip]
        assert_eq!(r.mask, vec![0, 0, 1, 1,
                                0, 0, 1, 1,
                                2, 2, 3, 3,
                                2, 2, 3, 3]);
    }

    #[test]
    fn flips_permute_pixels() {
        let (h, w) = (3, 4);
        let s = sample(h, w, 5);
        let fh = flip_h(&s);
        let fv = flip_v(&s);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(fh.mask[y * w + x], s.mask[y * w + (w - 1 - x)]);
                assert_eq!(fv.mask[y * w + x], s.mask[(h - 1 - y) * w + x]);
                for c in 0..3 {
                    let at = |t: &Sample, yy: usize, xx: usize| t.image.data()[(c * h + yy) * w + xx];
                    assert_eq!(at(&fh, y, x), at(&s, y, w - 1 - x));
                    assert_eq!(at(&fv, y, x), at(&s, h - 1 - y, x));
                }
            }
        }
        assert_eq!(flip_h(&fh), s);
        assert_eq!(flip_v(&fv), s);
    }

    #[test]
    fn symmetric_input_is_fixed() {
        let image = Tensor::from_fn(&[3, 2, 4], |i| [0.1f32, 0.5, 0.5, 0.1][i % 4]);
        let s = Sample::new(image, vec![0, 1, 1, 0, 0, 1, 1, 0], "sym").unwrap();
        assert_eq!(flip_h(&s), s);
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    #[test]
    fn split_sizes() {
        let s = split(&ids(100), &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let s = split(&ids(10), &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let spec = SplitSpec {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            seed: 3,
        };
        let s = split(&ids(10), &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        let s = split(&ids(8), &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 0, 0));
    }

    #[test]
    fn split_is_seeded() {
        let spec = SplitSpec::default();
        assert_eq!(split(&ids(50), &spec).unwrap(), split(&ids(50), &spec).unwrap());
        let other = SplitSpec { seed: 1, ..spec };
        assert_ne!(split(&ids(50), &spec).unwrap(), split(&ids(50), &other).unwrap());
        assert!(split(&ids(5), &SplitSpec { train: 0.5, ..spec }).is_err());
    }

    #[test]
    fn manifests_and_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_generate(5, 32, 4, 2).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let splits = split(&data.ids(), &SplitSpec { train: 0.6, val: 0.2, test: 0.2, seed: 4 }).unwrap();
        write_manifests(dir.path(), &splits).unwrap();
        assert_eq!(read_manifests(dir.path()).unwrap(), Some(splits.clone()));
        let (train, val, test) = load_splits(dir.path(), 4, &SplitSpec::default()).unwrap();
        assert_eq!(train.ids(), splits.train);
        assert_eq!(val.ids(), splits.val);
        assert_eq!(test.ids(), splits.test);
        let loaded = load_dataset(dir.path(), 4).unwrap();
        for (a, b) in loaded.samples.iter().zip(&data.samples) {
            assert_eq!(a.mask, b.mask);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
        let binary = synth_generate(2, 32, 2, 2).unwrap();
        let bdir = tempfile::tempdir().unwrap();
        save_dataset(bdir.path(), &binary).unwrap();
        assert_eq!(read_manifests(bdir.path()).unwrap(), None);
        let loaded = load_dataset(bdir.path(), 2).unwrap();
        assert_eq!(loaded.samples[1].mask, binary.samples[1].mask);
    }

    #[test]
    fn collate_stacks() {
        let (a, b) = (sample(2, 3, 1), sample(2, 3, 2));
        let (images, labels) = collate(&[&a, &b]).unwrap();
        assert_eq!(images.shape(), &[2, 3, 2, 3]);
        assert_eq!(&images.data()[18..], b.image.data());
        assert_eq!(labels[6..], b.mask[..]);
    }

    proptest! {
        #[test]
        fn splits_partition_ids(n in 0usize..200, seed in any::<u64>()) {
            let all = ids(n);
            let s = split(&all, &SplitSpec { seed, ..SplitSpec::default() }).unwrap();
            let mut joined: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
            joined.sort();
            let mut expected = all.clone();
            expected.sort();
            prop_assert_eq!(joined, expected);
        }

        #[test]
        fn augment_keeps_correspondence(seed in any::<u64>()) {
            // image channel 0 encodes the mask, so any flip must keep them aligned
            let (h, w) = (4, 5);
            let mask: Vec<u8> = (0..h * w).map(|i| ((i * 7 + seed as usize) % 3) as u8).collect();
            let image = Tensor::from_fn(&[3, h, w], |i| f32::from(mask[i % (h * w)]) / 2.0);
            let s = Sample::new(image, mask, "a").unwrap();
            let out = Augment::default().apply(&s, &mut ChaCha8Rng::seed_from_u64(seed));
            for p in 0..h * w {
                prop_assert_eq!(out.image.data()[p], f32::from(out.mask[p]) / 2.0);
            }
        }
    }
}
