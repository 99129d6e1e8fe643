//! Dataset representation and loading.
//!
//! On disk a dataset split is a directory of 8-bit RGB PNGs named
//! `<pid>_c<cam>_<seq>.png` (pid `-1` marks unlabeled/outlier entries,
//! cameras are 1-based within their domain) plus a `meta.txt` of
//! `key=value` lines (`name, C, H, W, num_ids, num_cams`), looked up in
//! the split directory itself or its parent. Files are enumerated in
//! lexicographic order so a dataset is one canonical sample sequence.
//!
//! Camera ids are remapped to one global zero-based index space: source
//! cameras take `[0, C_s)`, target cameras `[C_s, C_s + C_t)`, and index
//! `C_s + C_t` is reserved as the extra confusion class. Target person
//! ids stay on the samples for evaluation but are never copied into
//! training batches.

use crate::tensor::{Scalar, Tensor};
use crate::util::{atomic_write, derive_seed};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Global label-space sizes shared by the model and both datasets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpaces {
    pub num_source_ids: usize,
    pub num_source_cams: usize,
    pub num_target_cams: usize,
}

impl LabelSpaces {
    pub fn validate(&self) -> Result<()> {
        if self.num_source_ids == 0 || self.num_source_cams == 0 || self.num_target_cams == 0 {
            return Err(Error::Config(
                "label spaces need at least one source id, one source camera and one target camera"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Number of real cameras across both domains.
    pub fn total_cameras(&self) -> usize {
        self.num_source_cams + self.num_target_cams
    }

    /// Index of the extra confusion class.
    pub fn extra_camera_class(&self) -> usize {
        self.total_cameras()
    }

    /// Output width of the camera classifier.
    pub fn camera_class_count(&self) -> usize {
        self.total_cameras() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_ids: usize,
    pub num_cams: usize,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>, // (C, H, W) in [0, 1]
    pub person_id: Option<u32>,
    /// Zero-based camera index within the sample's own domain.
    pub camera_local: usize,
    /// Camera index in the global space (offset applied for targets).
    pub camera_id: usize,
    pub domain: Domain,
    pub filename: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub domain: Domain,
    pub samples: Vec<Sample>,
    /// Sorted distinct labeled person ids; index = training class.
    pub id_classes: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_of(&self, pid: u32) -> Option<usize> {
        self.id_classes.binary_search(&pid).ok()
    }

    pub fn rebuild_id_classes(&mut self) {
        let set: BTreeSet<u32> = self.samples.iter().filter_map(|s| s.person_id).collect();
        self.id_classes = set.into_iter().collect();
    }
}

/// Parses `<pid>_c<cam>_<seq>.png`; returns (pid, 1-based local camera, seq).
pub fn parse_filename(name: &str) -> Option<(i64, usize, u32)> {
    let stem = name.strip_suffix(".png")?;
    let mut parts = stem.split('_');
    let pid: i64 = parts.next()?.parse().ok()?;
    if pid < -1 {
        return None;
    }
    let cam_part = parts.next()?;
    let cam: usize = cam_part.strip_prefix('c')?.parse().ok()?;
    if cam == 0 {
        return None;
    }
    let seq: u32 = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((pid, cam, seq))
}

pub fn format_filename(pid: Option<u32>, cam_local: usize, seq: u32) -> String {
    match pid {
        Some(p) => format!("{p:04}_c{}_{seq:04}.png", cam_local + 1),
        None => format!("-1_c{}_{seq:04}.png", cam_local + 1),
    }
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut name = None;
    let mut fields = [None::<usize>; 5]; // C, H, W, num_ids, num_cams
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
            path: path.into(),
            reason: format!("line {}: expected key=value, got {line:?}", lineno + 1),
        })?;
        let key = key.trim();
        let value = value.trim();
        let slot = match key {
            "name" => {
                name = Some(value.to_string());
                continue;
            }
            "C" => 0,
            "H" => 1,
            "W" => 2,
            "num_ids" => 3,
            "num_cams" => 4,
            other => {
                return Err(Error::Format {
                    path: path.into(),
                    reason: format!("unknown meta key {other:?}"),
                })
            }
        };
        fields[slot] = Some(value.parse().map_err(|_| Error::Format {
            path: path.into(),
            reason: format!("key {key}: expected integer, got {value:?}"),
        })?);
    }
    let get = |i: usize, key: &str| {
        fields[i].ok_or_else(|| Error::Format {
            path: path.into(),
            reason: format!("missing key {key}"),
        })
    };
    Ok(DatasetMeta {
        name: name.ok_or_else(|| Error::Format {
            path: path.into(),
            reason: "missing key name".into(),
        })?,
        channels: get(0, "C")?,
        height: get(1, "H")?,
        width: get(2, "W")?,
        num_ids: get(3, "num_ids")?,
        num_cams: get(4, "num_cams")?,
    })
}

pub fn write_meta(meta: &DatasetMeta, path: &Path) -> Result<()> {
    let text = format!(
        "name={}\nC={}\nH={}\nW={}\nnum_ids={}\nnum_cams={}\n",
        meta.name, meta.channels, meta.height, meta.width, meta.num_ids, meta.num_cams
    );
    atomic_write(path, text.as_bytes())
}

fn find_meta(dir: &Path) -> Result<DatasetMeta> {
    let own = dir.join("meta.txt");
    if own.exists() {
        return read_meta(&own);
    }
    if let Some(parent) = dir.parent() {
        let up = parent.join("meta.txt");
        if up.exists() {
            return read_meta(&up);
        }
    }
    Err(Error::Format {
        path: dir.into(),
        reason: "no meta.txt in split directory or its parent".into(),
    })
}

fn decode_png(path: &Path, meta: &DatasetMeta) -> Result<Tensor<f32>> {
    if meta.channels != 3 {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("only 3-channel datasets are supported, meta says C={}", meta.channels),
        });
    }
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            reason: e.to_string(),
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if h != meta.height || w != meta.width {
        return Err(Error::ShapeMismatch {
            context: format!("image {} vs meta", path.display()),
            expected: vec![meta.height, meta.width],
            got: vec![h, w],
        });
    }
    let mut data = vec![0f32; 3 * h * w];
    for (y, x, pixel) in img.enumerate_pixels().map(|(x, y, p)| (y as usize, x as usize, p)) {
        for c in 0..3 {
            data[c * h * w + y * w + x] = pixel.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != 3 {
        return Err(Error::InvalidInput(format!(
            "png encoding expects 3 channels, got {c}"
        )));
    }
    let d = image.data();
    let mut raw = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = d[ch * h * w + y * w + x].clamp(0.0, 1.0);
                raw[(y * w + x) * 3 + ch] = (v * 255.0).round() as u8;
            }
        }
    }
    let mut out = Vec::new();
    let enc = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(
        enc,
        &raw,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::InvalidInput(format!("png encoding failed: {e}")))?;
    Ok(out)
}

/// Loads one split directory. `cam_offset` is 0 for source datasets and
/// the number of source cameras for target datasets.
pub fn load_dataset(dir: &Path, domain: Domain, cam_offset: usize) -> Result<Dataset> {
    let meta = find_meta(dir)?;
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            let name = entry.file_name().into_string().ok()?;
            name.ends_with(".png").then_some(name)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyDataset(dir.into()));
    }
    let mut samples = Vec::with_capacity(names.len());
    for name in &names {
        let path = dir.join(name);
        let (pid, cam, _seq) = parse_filename(name).ok_or_else(|| Error::Format {
            path: path.clone(),
            reason: "filename must match <pid>_c<cam>_<seq>.png with cam >= 1".into(),
        })?;
        if cam > meta.num_cams {
            return Err(Error::Format {
                path: path.clone(),
                reason: format!("camera {cam} exceeds meta num_cams={}", meta.num_cams),
            });
        }
        let image = decode_png(&path, &meta)?;
        samples.push(Sample {
            image,
            person_id: if pid < 0 { None } else { Some(pid as u32) },
            camera_local: cam - 1,
            camera_id: cam_offset + cam - 1,
            domain,
            filename: name.clone(),
        });
    }
    let mut ds = Dataset {
        meta,
        domain,
        samples,
        id_classes: Vec::new(),
    };
    ds.rebuild_id_classes();
    if ds.id_classes.len() != ds.meta.num_ids {
        return Err(Error::Format {
            path: dir.into(),
            reason: format!(
                "meta declares num_ids={} but files hold {} distinct labeled ids",
                ds.meta.num_ids,
                ds.id_classes.len()
            ),
        });
    }
    Ok(ds)
}

/// Writes a split directory (PNGs and its own meta.txt).
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_meta(&ds.meta, &dir.join("meta.txt"))?;
    for s in &ds.samples {
        let bytes = encode_png(&s.image)?;
        atomic_write(&dir.join(&s.filename), &bytes)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop_padding: usize,
    pub flip_p: f64,
    pub erase_p: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    pub erase_fill: f32,
    /// Half-width of the per-channel multiplicative jitter: each channel
    /// is scaled by a factor drawn from (1 - g, 1 + g). Zero disables it.
    pub color_gain: f64,
    /// Half-width of the per-channel additive jitter, drawn from (-s, s).
    pub color_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_padding: 2,
            flip_p: 0.5,
            erase_p: 0.3,
            erase_area: (0.05, 0.20),
            erase_aspect: (0.5, 2.0),
            erase_fill: 0.5,
            color_gain: 0.5,
            color_shift: 0.35,
        }
    }
}

impl AugmentConfig {
    /// A config under which `augment` is the identity.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_padding: 0,
            flip_p: 0.0,
            erase_p: 0.0,
            erase_area: (0.0, 0.0),
            erase_aspect: (1.0, 1.0),
            erase_fill: 0.0,
            color_gain: 0.0,
            color_shift: 0.0,
        }
    }

    /// The same recipe with the color stages turned off. Because the color
    /// draws sit at the tail of the per-image stream, augmenting with the
    /// same seed yields the identical crop/flip/erase outcome, so this view
    /// differs from the full one only in color.
    pub fn without_color(&self) -> Self {
        AugmentConfig {
            color_gain: 0.0,
            color_shift: 0.0,
            ..self.clone()
        }
    }

    pub fn has_color(&self) -> bool {
        self.color_gain > 0.0 || self.color_shift > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (what, p) in [("flip_p", self.flip_p), ("erase_p", self.erase_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{what} must lie in [0, 1], got {p}")));
            }
        }
        let (lo, hi) = self.erase_area;
        if lo > hi || lo < 0.0 {
            return Err(Error::Config(format!(
                "erase area range must satisfy 0 <= lo <= hi, got ({lo}, {hi})"
            )));
        }
        if hi > 1.0 {
            return Err(Error::Config(format!(
                "erase area fraction {hi} exceeds the whole image"
            )));
        }
        let (alo, ahi) = self.erase_aspect;
        if alo > ahi || alo <= 0.0 {
            return Err(Error::Config(format!(
                "erase aspect range must satisfy 0 < lo <= hi, got ({alo}, {ahi})"
            )));
        }
        if !(0.0..1.0).contains(&self.color_gain) {
            return Err(Error::Config(format!(
                "color_gain must lie in [0, 1), got {}",
                self.color_gain
            )));
        }
        if !self.color_shift.is_finite() || self.color_shift < 0.0 {
            return Err(Error::Config(format!(
                "color_shift must be finite and non-negative, got {}",
                self.color_shift
            )));
        }
        Ok(())
    }
}

/// Applies crop-with-padding, horizontal flip, random erasing and
/// per-channel color jitter, in that order. Each stage consumes random
/// draws only when its config enables it, so the stream layout is: crop
/// dy, dx; flip u; erase u, then (if it fires) area, aspect, top, left;
/// then per channel a gain and a shift. Labels and shape are preserved.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Sample {
    let (c, h, w) = (
        sample.image.shape()[0],
        sample.image.shape()[1],
        sample.image.shape()[2],
    );
    let mut img = sample.image.clone();

    if cfg.crop_padding > 0 {
        let p = cfg.crop_padding;
        let dy = rng.gen_range(0..=2 * p) as isize - p as isize;
        let dx = rng.gen_range(0..=2 * p) as isize - p as isize;
        let src = img.data();
        let mut out = vec![0f32; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[ch * h * w + y * w + x] = src[ch * h * w + sy as usize * w + sx as usize];
                }
            }
        }
        img = Tensor::from_vec(&[c, h, w], out).expect("same size");
    }

    if cfg.flip_p > 0.0 {
        let u: f64 = rng.gen();
        if u < cfg.flip_p {
            let d = img.data_mut();
            for ch in 0..c {
                for y in 0..h {
                    let row = &mut d[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                    row.reverse();
                }
            }
        }
    }

    if cfg.erase_p > 0.0 {
        let u: f64 = rng.gen();
        if u < cfg.erase_p {
            let area = if cfg.erase_area.0 < cfg.erase_area.1 {
                rng.gen_range(cfg.erase_area.0..cfg.erase_area.1)
            } else {
                cfg.erase_area.0
            };
            let aspect = if cfg.erase_aspect.0 < cfg.erase_aspect.1 {
                rng.gen_range(cfg.erase_aspect.0..cfg.erase_aspect.1)
            } else {
                cfg.erase_aspect.0
            };
            let pixels = area * (h * w) as f64;
            let eh = ((pixels * aspect).sqrt().round() as usize).clamp(1, h);
            let ew = ((pixels / aspect).sqrt().round() as usize).clamp(1, w);
            let top = rng.gen_range(0..=h - eh);
            let left = rng.gen_range(0..=w - ew);
            let d = img.data_mut();
            for ch in 0..c {
                for y in top..top + eh {
                    for x in left..left + ew {
                        d[ch * h * w + y * w + x] = cfg.erase_fill;
                    }
                }
            }
        }
    }

    // Per-channel affine jitter spans the same family as camera color
    // casts, so identity features cannot lean on absolute channel values.
    if cfg.color_gain > 0.0 || cfg.color_shift > 0.0 {
        let d = img.data_mut();
        for ch in 0..c {
            let gain = if cfg.color_gain > 0.0 {
                rng.gen_range(1.0 - cfg.color_gain..1.0 + cfg.color_gain) as f32
            } else {
                1.0
            };
            let shift = if cfg.color_shift > 0.0 {
                rng.gen_range(-cfg.color_shift..cfg.color_shift) as f32
            } else {
                0.0
            };
            for v in &mut d[ch * h * w..(ch + 1) * h * w] {
                *v = (gain * *v + shift).clamp(0.0, 1.0);
            }
        }
    }

    Sample {
        image: img,
        ..sample.clone()
    }
}

/// One paired training batch: indices into the source and target datasets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Builds one epoch of paired batches. Each dataset is shuffled with its
/// own derived stream; the longer side is consumed in order (its final
/// batch may be partial) while the shorter side recycles its permutation
/// so every batch carries a full complement from it.
pub fn make_batches(
    source: &Dataset,
    target: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if source.is_empty() {
        return Err(Error::InvalidInput("source dataset has no samples".into()));
    }
    if target.is_empty() {
        return Err(Error::InvalidInput("target dataset has no samples".into()));
    }
    let ns = source.len();
    let nt = target.len();
    let perm_s = permutation(ns, derive_seed(seed, &[0x5]));
    let perm_t = permutation(nt, derive_seed(seed, &[0x7]));
    let longest = ns.max(nt);
    let nb = longest.div_ceil(batch_size);
    let mut batches = Vec::with_capacity(nb);
    for k in 0..nb {
        let remaining = longest - k * batch_size;
        let take = |n: usize, perm: &[usize]| -> Vec<usize> {
            let count = if n == longest {
                batch_size.min(remaining)
            } else {
                batch_size
            };
            (0..count).map(|j| perm[(k * batch_size + j) % n]).collect()
        };
        batches.push(Batch {
            source: take(ns, &perm_s),
            target: take(nt, &perm_t),
        });
    }
    Ok(batches)
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Materialized training batch, in the model's element type. Target
/// person ids are deliberately absent.
#[derive(Clone)]
pub struct MiniBatch<T> {
    pub src_images: Tensor<T>,
    pub src_classes: Vec<usize>,
    pub src_cams: Vec<usize>,
    pub tgt_images: Tensor<T>,
    pub tgt_cams: Vec<usize>,
}

/// Assembles a batch, optionally augmenting with per-position derived
/// streams: position `i` of each side draws from an independent RNG, so
/// the transform applied to a sample depends only on (seed, side, i).
pub fn materialize_batch<T: Scalar>(
    source: &Dataset,
    target: &Dataset,
    batch: &Batch,
    augment_cfg: Option<(&AugmentConfig, u64)>,
) -> Result<MiniBatch<T>> {
    let prep = |ds: &Dataset, indices: &[usize], side: u64| -> Result<(Tensor<T>, Vec<Sample>)> {
        let mut stacked = Vec::with_capacity(indices.len());
        for (pos, &idx) in indices.iter().enumerate() {
            let s = &ds.samples[idx];
            let s = match augment_cfg {
                Some((cfg, seed)) => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(seed, &[side, pos as u64]));
                    augment(s, cfg, &mut rng)
                }
                None => s.clone(),
            };
            stacked.push(s);
        }
        let shape = stacked[0].image.shape().to_vec();
        let mut images = Tensor::zeros(&[stacked.len(), shape[0], shape[1], shape[2]]);
        let plane = shape.iter().product::<usize>();
        for (i, s) in stacked.iter().enumerate() {
            for (j, v) in s.image.data().iter().enumerate() {
                images.data_mut()[i * plane + j] = T::from_f32(*v);
            }
        }
        Ok((images, stacked))
    };

    let (src_images, src_samples) = prep(source, &batch.source, 0)?;
    let (tgt_images, tgt_samples) = prep(target, &batch.target, 1)?;

    let mut src_classes = Vec::with_capacity(src_samples.len());
    let mut src_cams = Vec::with_capacity(src_samples.len());
    for s in &src_samples {
        let pid = s.person_id.ok_or_else(|| {
            Error::InvalidInput(format!("source sample {} has no person id", s.filename))
        })?;
        let class = source.class_of(pid).ok_or_else(|| {
            Error::InvalidInput(format!("person id {pid} missing from source classes"))
        })?;
        src_classes.push(class);
        src_cams.push(s.camera_id);
    }
    let tgt_cams = tgt_samples.iter().map(|s| s.camera_id).collect();

    Ok(MiniBatch {
        src_images,
        src_classes,
        src_cams,
        tgt_images,
        tgt_cams,
    })
}

/// Stacks unaugmented images of the given samples into one (N, C, H, W)
/// tensor, for feature extraction.
pub fn stack_images<T: Scalar>(ds: &Dataset, indices: &[usize]) -> Tensor<T> {
    let shape = ds.samples[indices[0]].image.shape().to_vec();
    let plane: usize = shape.iter().product();
    let mut images = Tensor::zeros(&[indices.len(), shape[0], shape[1], shape[2]]);
    for (i, &idx) in indices.iter().enumerate() {
        for (j, v) in ds.samples[idx].image.data().iter().enumerate() {
            images.data_mut()[i * plane + j] = T::from_f32(*v);
        }
    }
    images
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_sample(pid: Option<u32>, cam_local: usize, h: usize, w: usize) -> Sample {
        let mut img = Tensor::zeros(&[3, h, w]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f32 / 255.0;
        }
        Sample {
            image: img,
            person_id: pid,
            camera_local: cam_local,
            camera_id: cam_local,
            domain: Domain::Source,
            filename: format_filename(pid, cam_local, 0),
        }
    }

    fn tiny_dataset(n_ids: usize, n_cams: usize, per: usize) -> Dataset {
        let mut samples = Vec::new();
        for pid in 0..n_ids {
            for cam in 0..n_cams {
                for seq in 0..per {
                    let mut s = test_sample(Some(pid as u32), cam, 8, 4);
                    s.filename = format_filename(Some(pid as u32), cam, seq as u32);
                    samples.push(s);
                }
            }
        }
        let mut ds = Dataset {
            meta: DatasetMeta {
                name: "tiny".into(),
                channels: 3,
                height: 8,
                width: 4,
                num_ids: n_ids,
                num_cams: n_cams,
            },
            domain: Domain::Source,
            samples,
            id_classes: Vec::new(),
        };
        ds.rebuild_id_classes();
        ds
    }

    #[test]
    fn filename_parsing_matches_convention() {
        assert_eq!(parse_filename("0003_c2_0001.png"), Some((3, 2, 1)));
        assert_eq!(parse_filename("-1_c1_0000.png"), Some((-1, 1, 0)));
        assert_eq!(parse_filename("0003_c0_0001.png"), None);
        assert_eq!(parse_filename("0003_2_0001.png"), None);
        assert_eq!(parse_filename("0003_c2.png"), None);
        assert_eq!(parse_filename("0003_c2_0001.jpg"), None);
        assert_eq!(parse_filename("0003_c2_0001_x.png"), None);
    }

    #[test]
    fn round_trip_preserves_pixels_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(2, 2, 1);
        // Quantize once: generation -> disk loses sub-1/255 detail, so
        // compare after the first save/load cycle.
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path(), Domain::Source, 0).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&loaded, dir2.path()).unwrap();
        let again = load_dataset(dir2.path(), Domain::Source, 0).unwrap();
        assert_eq!(loaded.len(), again.len());
        for (a, b) in loaded.samples.iter().zip(again.samples.iter()) {
            assert_eq!(a.person_id, b.person_id);
            assert_eq!(a.camera_id, b.camera_id);
            assert_eq!(a.filename, b.filename);
            assert_eq!(a.image.data(), b.image.data());
        }
    }

    #[test]
    fn loader_applies_global_camera_offset_for_targets() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny_dataset(1, 2, 1);
        ds.meta.name = "t".into();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path(), Domain::Target, 6).unwrap();
        assert_eq!(loaded.samples[0].camera_local, 0);
        assert_eq!(loaded.samples[0].camera_id, 6);
        assert_eq!(loaded.samples[1].camera_id, 7);
    }

    #[test]
    fn loader_rejects_malformed_names_and_empty_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(1, 1, 1);
        save_dataset(&ds, dir.path()).unwrap();
        std::fs::write(dir.path().join("badname.png"), b"junk").unwrap();
        let err = load_dataset(dir.path(), Domain::Source, 0).unwrap_err();
        match err {
            Error::Format { path, .. } => {
                assert!(path.to_string_lossy().contains("badname.png"))
            }
            other => panic!("unexpected {other:?}"),
        }

        let empty = tempfile::tempdir().unwrap();
        write_meta(&ds.meta, &empty.path().join("meta.txt")).unwrap();
        let err = load_dataset(empty.path(), Domain::Source, 0).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
    }

    #[test]
    fn identity_augment_config_is_identity() {
        let s = test_sample(Some(1), 0, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&s, &AugmentConfig::identity(), &mut rng);
        assert_eq!(out.image.data(), s.image.data());
        assert_eq!(out.person_id, s.person_id);
    }

    #[test]
    fn certain_flip_mirrors_columns() {
        let s = test_sample(Some(1), 0, 2, 3);
        let cfg = AugmentConfig {
            crop_padding: 0,
            flip_p: 1.0,
            erase_p: 0.0,
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&s, &cfg, &mut rng);
        let (h, w) = (2, 3);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    assert_eq!(
                        out.image.data()[c * h * w + y * w + x],
                        s.image.data()[c * h * w + y * w + (w - 1 - x)]
                    );
                }
            }
        }
    }

    /// Reference re-implementation of the erase sampler, consuming the
    /// documented draw sequence, to verify the applied rectangle.
    #[test]
    fn certain_erase_matches_reference_sampler() {
        let s = test_sample(Some(1), 0, 16, 8);
        let cfg = AugmentConfig {
            crop_padding: 0,
            flip_p: 0.0,
            erase_p: 1.0,
            erase_area: (0.1, 0.3),
            erase_aspect: (0.5, 2.0),
            erase_fill: 0.25,
            ..AugmentConfig::identity()
        };
        let seed = 99u64;
        let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let _u: f64 = rng.gen();
        let area = rng.gen_range(0.1..0.3);
        let aspect = rng.gen_range(0.5..2.0);
        let pixels = area * (16 * 8) as f64;
        let eh = ((pixels * aspect).sqrt().round() as usize).clamp(1, 16);
        let ew = ((pixels / aspect).sqrt().round() as usize).clamp(1, 8);
        let top = rng.gen_range(0..=16 - eh);
        let left = rng.gen_range(0..=8 - ew);

        let (h, w) = (16usize, 8usize);
        let mut diff_count = 0;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let idx = c * h * w + y * w + x;
                    let inside = (top..top + eh).contains(&y) && (left..left + ew).contains(&x);
                    if inside {
                        assert_eq!(out.image.data()[idx], 0.25);
                    }
                    if out.image.data()[idx] != s.image.data()[idx] {
                        diff_count += 1;
                        assert!(inside, "pixel outside rectangle changed");
                    }
                }
            }
        }
        assert!(diff_count > 0);
    }

    /// Replays the documented draw order (per channel: gain, then shift)
    /// and checks the applied affine plus clamping, pixel for pixel.
    #[test]
    fn color_jitter_matches_reference_and_stays_in_range() {
        let s = test_sample(Some(1), 0, 4, 3);
        let cfg = AugmentConfig {
            color_gain: 0.4,
            color_shift: 0.25,
            ..AugmentConfig::identity()
        };
        let seed = 17u64;
        let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (4usize, 3usize);
        let mut changed = 0;
        for ch in 0..3 {
            let gain = rng.gen_range(1.0 - cfg.color_gain..1.0 + cfg.color_gain) as f32;
            let shift = rng.gen_range(-cfg.color_shift..cfg.color_shift) as f32;
            for i in 0..h * w {
                let idx = ch * h * w + i;
                let want = (gain * s.image.data()[idx] + shift).clamp(0.0, 1.0);
                assert_eq!(out.image.data()[idx], want);
                assert!((0.0..=1.0).contains(&out.image.data()[idx]));
                if out.image.data()[idx] != s.image.data()[idx] {
                    changed += 1;
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn full_strength_color_gain_is_rejected() {
        let cfg = AugmentConfig {
            color_gain: 1.0,
            ..AugmentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn augment_preserves_shape_and_labels_across_random_configs() {
        let s = test_sample(Some(7), 1, 8, 4);
        let mut seed_rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let cfg = AugmentConfig {
                crop_padding: seed_rng.gen_range(0..3),
                flip_p: seed_rng.gen_range(0.0..1.0),
                erase_p: seed_rng.gen_range(0.0..1.0),
                erase_area: (0.05, 0.4),
                erase_aspect: (0.4, 2.5),
                erase_fill: 0.1,
                color_gain: seed_rng.gen_range(0.0..0.9),
                color_shift: seed_rng.gen_range(0.0..0.5),
            };
            cfg.validate().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed_rng.gen());
            let out = augment(&s, &cfg, &mut rng);
            assert_eq!(out.image.shape(), s.image.shape());
            assert_eq!(out.person_id, s.person_id);
            assert_eq!(out.camera_id, s.camera_id);
        }
    }

    #[test]
    fn oversized_erase_area_is_rejected() {
        let cfg = AugmentConfig {
            erase_area: (0.2, 1.5),
            ..AugmentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn equal_sized_datasets_chunk_in_lockstep() {
        let s = tiny_dataset(4, 2, 4); // 32 samples
        let t = tiny_dataset(8, 2, 2); // 32 samples
        let batches = make_batches(&s, &t, 16, 1).unwrap();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!(b.source.len(), 16);
            assert_eq!(b.target.len(), 16);
        }
        // Each side is a permutation: all indices seen exactly once.
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.source.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn shorter_side_recycles_within_the_epoch() {
        let s = tiny_dataset(5, 2, 2); // 20 samples
        let t = tiny_dataset(2, 2, 1); // 4 samples
        let batches = make_batches(&s, &t, 16, 3).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].source.len(), 16);
        assert_eq!(batches[0].target.len(), 16);
        assert_eq!(batches[1].source.len(), 4);
        assert_eq!(batches[1].target.len(), 16);
        // Recycling walks the same 4-element permutation cyclically.
        let perm: Vec<usize> = batches[0].target[0..4].to_vec();
        for (j, idx) in batches[0].target.iter().enumerate() {
            assert_eq!(*idx, perm[j % 4]);
        }
    }

    #[test]
    fn same_seed_reproduces_batches_and_different_seed_does_not() {
        let s = tiny_dataset(4, 2, 4);
        let t = tiny_dataset(4, 2, 4);
        let a = make_batches(&s, &t, 8, 42).unwrap();
        let b = make_batches(&s, &t, 8, 42).unwrap();
        assert_eq!(a, b);
        let c = make_batches(&s, &t, 8, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let s = tiny_dataset(2, 2, 1);
        let mut empty = tiny_dataset(2, 2, 1);
        empty.samples.clear();
        assert!(make_batches(&s, &empty, 4, 0).is_err());
        assert!(make_batches(&empty, &s, 4, 0).is_err());
    }

    #[test]
    fn materialized_batches_carry_no_target_ids_and_map_source_classes() {
        let s = tiny_dataset(3, 2, 1);
        let t = tiny_dataset(2, 2, 1);
        let batches = make_batches(&s, &t, 4, 0).unwrap();
        let mb: MiniBatch<f64> = materialize_batch(&s, &t, &batches[0], None).unwrap();
        assert_eq!(mb.src_images.shape()[0], mb.src_classes.len());
        assert!(mb.src_classes.iter().all(|c| *c < 3));
        assert_eq!(mb.tgt_images.shape()[0], mb.tgt_cams.len());
    }
}
