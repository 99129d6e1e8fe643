//! Synthetic benchmark with factorized ground truth.
//!
//! Every image is produced from two independent factors:
//!
//! * identity content: two colored rectangles whose positions, sizes and
//!   hues belong to the person and never change across cameras;
//! * camera style: a per-channel affine map (gain, bias), a background
//!   wash proportional to the camera's hue, and gaussian sensor noise —
//!   all properties of the camera, never of the person.
//!
//! An image is `clip(gain .* base(identity) + bias + hue * palette + noise)`.
//! Because both factors are controlled, disentanglement is measurable:
//! a content representation should carry the rectangles and not the wash,
//! a style representation the other way round.
//!
//! The two domains draw their camera styles from disjoint parameter
//! ranges, so source cameras and target cameras never look alike. For the
//! target domain an extra held-out split with fresh noise draws (and
//! continuing sequence numbers) is emitted for retrieval evaluation;
//! identities and camera styles are shared with the target training split,
//! whose labels the trainer never reads.

use crate::data::{
    save_dataset, Dataset, DatasetMeta, Domain, LabelSpaces, Sample,
};
use crate::util::{atomic_write, derive_seed, Digest};
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const CHANNELS: usize = 3;

/// Rectangles are painted at this fraction of the pure hue color so the
/// style wash, not the content, dominates raw pixel distances; matching
/// across cameras must go through the geometry, not brightness.
const RECT_INTENSITY: f64 = 0.15;

/// Per-channel slope of the background wash in the camera hue.
const BG_PALETTE: [f64; 3] = [0.7, 0.5, 0.3];

/// Number of reals describing one rectangle: center y, center x,
/// half height, half width (all as canvas fractions), hue.
const PARAMS_PER_RECT: usize = 5;
const RECTS_PER_ID: usize = 2;

/// Fully saturated hue wheel; h is taken modulo 1, h = 0 is pure red.
pub fn hue_to_rgb(h: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let sector = (h.floor() as usize).min(5);
    let f = h - sector as f64;
    match sector {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

/// Pixel-space rectangle, half-open bounds, premultiplied color.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
    pub color: [f64; 3],
}

/// The person: everything about the image that cameras cannot change.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub id: u32,
    pub content_params: Vec<f64>,
}

impl IdentitySpec {
    pub fn sample(id: u32, rng: &mut ChaCha8Rng) -> Self {
        let mut params = Vec::with_capacity(RECTS_PER_ID * PARAMS_PER_RECT);
        for _ in 0..RECTS_PER_ID {
            params.push(rng.gen_range(0.2..0.8)); // center y
            params.push(rng.gen_range(0.2..0.8)); // center x
            params.push(rng.gen_range(0.06..0.15)); // half height
            params.push(rng.gen_range(0.09..0.2)); // half width
            params.push(rng.gen_range(0.0..1.0)); // hue
        }
        IdentitySpec {
            id,
            content_params: params,
        }
    }

    /// Distance between two identities' parameter vectors, with hue taken
    /// circularly. Used to keep sampled identities visually distinct.
    fn separation(&self, other: &IdentitySpec) -> f64 {
        self.content_params
            .chunks(PARAMS_PER_RECT)
            .zip(other.content_params.chunks(PARAMS_PER_RECT))
            .map(|(a, b)| {
                let mut d2 = 0.0;
                for k in 0..PARAMS_PER_RECT - 1 {
                    d2 += (a[k] - b[k]) * (a[k] - b[k]);
                }
                let dh = (a[4] - b[4]).rem_euclid(1.0);
                let dh = dh.min(1.0 - dh);
                d2 + dh * dh
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rasterization plan on an `height` x `width` canvas. Each rectangle
    /// covers at least one pixel; the second is painted over the first.
    pub fn rects(&self, height: usize, width: usize) -> Vec<Rect> {
        self.content_params
            .chunks(PARAMS_PER_RECT)
            .map(|p| {
                let (cy, cx, hh, hw, hue) = (p[0], p[1], p[2], p[3], p[4]);
                let top = (((cy - hh) * height as f64).round().max(0.0) as usize)
                    .min(height - 1);
                let bottom = ((((cy + hh) * height as f64).round() as usize).max(top + 1))
                    .min(height)
                    .max(top + 1);
                let left =
                    (((cx - hw) * width as f64).round().max(0.0) as usize).min(width - 1);
                let right = ((((cx + hw) * width as f64).round() as usize).max(left + 1))
                    .min(width)
                    .max(left + 1);
                let base = hue_to_rgb(hue);
                Rect {
                    top,
                    left,
                    bottom,
                    right,
                    color: [
                        base[0] * RECT_INTENSITY,
                        base[1] * RECT_INTENSITY,
                        base[2] * RECT_INTENSITY,
                    ],
                }
            })
            .collect()
    }
}

/// The camera: everything about the image that the person cannot change.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraStyle {
    /// Local camera index within its domain, 0-based.
    pub camera_id: usize,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub background_hue: f64,
    pub noise_sigma: f64,
}

impl CameraStyle {
    /// The do-nothing camera: renders the identity's base image exactly.
    pub fn identity(camera_id: usize) -> Self {
        CameraStyle {
            camera_id,
            gain: [1.0; 3],
            bias: [0.0; 3],
            background_hue: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn sample(camera_id: usize, ranges: &StyleRanges, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = |(lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo..hi)
            }
        };
        CameraStyle {
            camera_id,
            gain: [draw(ranges.gain), draw(ranges.gain), draw(ranges.gain)],
            bias: [draw(ranges.bias), draw(ranges.bias), draw(ranges.bias)],
            background_hue: draw(ranges.hue),
            noise_sigma: draw(ranges.noise),
        }
    }

    fn params(&self) -> [f64; 8] {
        [
            self.gain[0],
            self.gain[1],
            self.gain[2],
            self.bias[0],
            self.bias[1],
            self.bias[2],
            self.background_hue,
            self.noise_sigma,
        ]
    }
}

/// Uniform sampling intervals for one domain's camera styles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleRanges {
    pub gain: (f64, f64),
    pub bias: (f64, f64),
    pub hue: (f64, f64),
    pub noise: (f64, f64),
}

impl StyleRanges {
    /// Dim cameras with cool, faint washes. The interval widths matter:
    /// cameras of one domain must differ enough that raw pixel matching
    /// across cameras fails without style-invariant features.
    pub fn source() -> Self {
        StyleRanges {
            gain: (0.5, 0.95),
            bias: (0.0, 0.08),
            hue: (0.05, 0.45),
            noise: (0.01, 0.03),
        }
    }

    /// Bright cameras with warm, heavy washes and more noise. Every
    /// interval is disjoint from `source()`, so the two domains never
    /// produce the same look.
    pub fn target() -> Self {
        StyleRanges {
            gain: (1.0, 1.5),
            bias: (0.1, 0.2),
            hue: (0.5, 0.9),
            noise: (0.035, 0.06),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !(ordered(self.gain) && ordered(self.bias) && ordered(self.hue) && ordered(self.noise))
        {
            return Err(Error::Config(
                "style ranges must be finite with lo <= hi".into(),
            ));
        }
        if self.gain.0 < 0.5 || self.gain.1 > 1.5 {
            return Err(Error::Config(format!(
                "gain range [{}, {}] must stay inside [0.5, 1.5]",
                self.gain.0, self.gain.1
            )));
        }
        if self.bias.0 < -0.2 || self.bias.1 > 0.2 {
            return Err(Error::Config(format!(
                "bias range [{}, {}] must stay inside [-0.2, 0.2]",
                self.bias.0, self.bias.1
            )));
        }
        if self.hue.0 < 0.0 || self.hue.1 > 1.0 {
            return Err(Error::Config(
                "background hue range must stay inside [0, 1]".into(),
            ));
        }
        if self.noise.0 < 0.0 {
            return Err(Error::Config("noise sigma cannot be negative".into()));
        }
        Ok(())
    }

    fn disjoint_from(&self, other: &StyleRanges) -> bool {
        let apart = |a: (f64, f64), b: (f64, f64)| a.1 < b.0 || b.1 < a.0;
        apart(self.gain, other.gain)
            && apart(self.bias, other.bias)
            && apart(self.hue, other.hue)
            && apart(self.noise, other.noise)
    }
}

/// Which cameras observe each identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Membership {
    /// Every identity appears in every camera: the identity/camera count
    /// table is a uniform product, so the factors share no information.
    AllCameras,
    /// Identity k appears only in camera k mod num_cams.
    OneCameraPerId,
}

impl Membership {
    pub fn cameras_of(self, id_index: usize, num_cams: usize) -> Vec<usize> {
        match self {
            Membership::AllCameras => (0..num_cams).collect(),
            Membership::OneCameraPerId => vec![id_index % num_cams],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub ids_per_domain: usize,
    pub cams_per_domain: usize,
    /// Training images per (identity, camera) pair, in both domains.
    pub images_per_id_cam: usize,
    /// Held-out target images per (identity, camera); 0 skips the split.
    pub eval_images_per_id_cam: usize,
    pub membership: Membership,
    pub height: usize,
    pub width: usize,
    pub source_style: StyleRanges,
    pub target_style: StyleRanges,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            ids_per_domain: 32,
            cams_per_domain: 3,
            images_per_id_cam: 4,
            eval_images_per_id_cam: 3,
            membership: Membership::AllCameras,
            height: 32,
            width: 16,
            source_style: StyleRanges::source(),
            target_style: StyleRanges::target(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ids_per_domain == 0 || self.cams_per_domain == 0 || self.images_per_id_cam == 0 {
            return Err(Error::Config(
                "need at least one identity, one camera and one image per pair".into(),
            ));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "canvas {}x{} is too small to hold two rectangles; need at least 8x8",
                self.height, self.width
            )));
        }
        self.source_style.validate()?;
        self.target_style.validate()?;
        if !self.source_style.disjoint_from(&self.target_style) {
            return Err(Error::Config(
                "source and target style ranges must be disjoint in every parameter".into(),
            ));
        }
        Ok(())
    }

    pub fn label_spaces(&self) -> LabelSpaces {
        LabelSpaces {
            num_source_ids: self.ids_per_domain,
            num_source_cams: self.cams_per_domain,
            num_target_cams: self.cams_per_domain,
        }
    }
}

/// The identity's image as the do-nothing camera sees it: rectangles on a
/// black canvas, quantized exactly like every stored image.
pub fn base_render(identity: &IdentitySpec, height: usize, width: usize) -> Tensor<f32> {
    let canvas = base_canvas(identity, height, width);
    quantize(&canvas, height, width)
}

fn base_canvas(identity: &IdentitySpec, height: usize, width: usize) -> Vec<f64> {
    let mut canvas = vec![0.0f64; CHANNELS * height * width];
    for rect in identity.rects(height, width) {
        for y in rect.top..rect.bottom {
            for x in rect.left..rect.right {
                for c in 0..CHANNELS {
                    canvas[c * height * width + y * width + x] = rect.color[c];
                }
            }
        }
    }
    canvas
}

/// Matches the storage round trip: clip, 8-bit quantize, back to [0, 1].
/// Rendering through this makes the in-memory dataset bit-identical to a
/// reload of the files it was saved to.
fn quantize(canvas: &[f64], height: usize, width: usize) -> Tensor<f32> {
    let data: Vec<f32> = canvas
        .iter()
        .map(|&v| {
            let byte = ((v as f32).clamp(0.0, 1.0) * 255.0).round() as u8;
            byte as f32 / 255.0
        })
        .collect();
    Tensor::from_vec(&[CHANNELS, height, width], data).expect("canvas length fixed")
}

/// One standard normal draw via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Renders one image of `identity` as seen by `style` and wraps it with
/// its labels. `cam_offset` places the local camera into the global
/// camera space (0 for source, the source camera count for target).
#[allow(clippy::too_many_arguments)]
pub fn render_sample(
    identity: &IdentitySpec,
    style: &CameraStyle,
    domain: Domain,
    cam_offset: usize,
    height: usize,
    width: usize,
    seq: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    if style.noise_sigma < 0.0 {
        return Err(Error::Config("noise sigma cannot be negative".into()));
    }
    let mut canvas = base_canvas(identity, height, width);
    let plane = height * width;
    for c in 0..CHANNELS {
        let wash = style.bias[c] + style.background_hue * BG_PALETTE[c];
        for v in &mut canvas[c * plane..(c + 1) * plane] {
            *v = style.gain[c] * *v + wash;
        }
    }
    if style.noise_sigma > 0.0 {
        for v in &mut canvas {
            *v += style.noise_sigma * normal(rng);
        }
    }
    let filename = crate::data::format_filename(Some(identity.id), style.camera_id, seq);
    Ok(Sample {
        image: quantize(&canvas, height, width),
        person_id: Some(identity.id),
        camera_local: style.camera_id,
        camera_id: cam_offset + style.camera_id,
        domain,
        filename,
    })
}

#[derive(Debug)]
pub struct GeneratedBenchmark {
    pub source: Dataset,
    pub target: Dataset,
    /// Held-out target split for retrieval metrics; present when
    /// `eval_images_per_id_cam > 0`.
    pub target_eval: Option<Dataset>,
}

struct DomainPlan {
    domain: Domain,
    tag: u64,
    pid_base: u32,
    cam_offset: usize,
    identities: Vec<IdentitySpec>,
    styles: Vec<CameraStyle>,
}

/// Draws one domain's identities and camera styles from seeds derived per
/// (domain, role, index), so any subset regenerates identically.
fn plan_domain(cfg: &SynthConfig, domain: Domain) -> DomainPlan {
    let (tag, pid_base, cam_offset, ranges) = match domain {
        Domain::Source => (0u64, 0u32, 0usize, &cfg.source_style),
        Domain::Target => (
            1u64,
            cfg.ids_per_domain as u32,
            cfg.cams_per_domain,
            &cfg.target_style,
        ),
    };
    let mut identities: Vec<IdentitySpec> = Vec::with_capacity(cfg.ids_per_domain);
    for i in 0..cfg.ids_per_domain {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag, 0x1D, i as u64]));
        let pid = pid_base + i as u32;
        // Resample identities that land too close to an earlier one; the
        // floor keeps retrieval well-posed without biasing the factors.
        let mut best = IdentitySpec::sample(pid, &mut rng);
        let mut best_sep = identities
            .iter()
            .map(|o| best.separation(o))
            .fold(f64::INFINITY, f64::min);
        for _ in 0..63 {
            if best_sep >= 0.25 {
                break;
            }
            let candidate = IdentitySpec::sample(pid, &mut rng);
            let sep = identities
                .iter()
                .map(|o| candidate.separation(o))
                .fold(f64::INFINITY, f64::min);
            if sep > best_sep {
                best = candidate;
                best_sep = sep;
            }
        }
        identities.push(best);
    }
    let mut styles: Vec<CameraStyle> = Vec::with_capacity(cfg.cams_per_domain);
    for c in 0..cfg.cams_per_domain {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag, 0xCA, c as u64]));
        loop {
            let style = CameraStyle::sample(c, ranges, &mut rng);
            if styles.iter().all(|s| s.params() != style.params()) {
                styles.push(style);
                break;
            }
        }
    }
    DomainPlan {
        domain,
        tag,
        pid_base,
        cam_offset,
        identities,
        styles,
    }
}

fn render_split(
    cfg: &SynthConfig,
    plan: &DomainPlan,
    name: &str,
    seq_range: std::ops::Range<u32>,
) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (i, identity) in plan.identities.iter().enumerate() {
        for cam in cfg.membership.cameras_of(i, cfg.cams_per_domain) {
            for seq in seq_range.clone() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    &[plan.tag, 0x1A, i as u64, cam as u64, seq as u64],
                ));
                samples.push(render_sample(
                    identity,
                    &plan.styles[cam],
                    plan.domain,
                    plan.cam_offset,
                    cfg.height,
                    cfg.width,
                    seq,
                    &mut rng,
                )?);
            }
        }
    }
    let mut ds = Dataset {
        meta: DatasetMeta {
            name: name.into(),
            channels: CHANNELS,
            height: cfg.height,
            width: cfg.width,
            num_ids: cfg.ids_per_domain,
            num_cams: cfg.cams_per_domain,
        },
        domain: plan.domain,
        samples,
        id_classes: Vec::new(),
    };
    ds.rebuild_id_classes();
    Ok(ds)
}

fn factors_csv(plan: &DomainPlan, ds: &Dataset) -> String {
    let mut out = String::from(
        "filename,id_hash,gain_r,gain_g,gain_b,bias_r,bias_g,bias_b,background_hue,noise_sigma\n",
    );
    for s in &ds.samples {
        let pid = s.person_id.expect("generated samples are labeled");
        let identity = &plan.identities[(pid - plan.pid_base) as usize];
        let mut d = Digest::new();
        for v in &identity.content_params {
            d.push_u64(v.to_bits());
        }
        let style = &plan.styles[s.camera_local];
        let p = style.params();
        out.push_str(&format!(
            "{},{:016x},{},{},{},{},{},{},{},{}\n",
            s.filename,
            d.value(),
            p[0],
            p[1],
            p[2],
            p[3],
            p[4],
            p[5],
            p[6],
            p[7],
        ));
    }
    out
}

/// Generates the full benchmark under `out`: `source/`, `target/` and
/// (when configured) `target_eval/`, each a loadable split directory with
/// a `factors.csv` sidecar recording the ground-truth factors per image.
pub fn generate(cfg: &SynthConfig, out: &Path) -> Result<GeneratedBenchmark> {
    cfg.validate()?;
    let train = 0..cfg.images_per_id_cam as u32;
    let eval_range =
        cfg.images_per_id_cam as u32..(cfg.images_per_id_cam + cfg.eval_images_per_id_cam) as u32;

    let src_plan = plan_domain(cfg, Domain::Source);
    let tgt_plan = plan_domain(cfg, Domain::Target);

    let source = render_split(cfg, &src_plan, "synth-source", train.clone())?;
    let target = render_split(cfg, &tgt_plan, "synth-target", train)?;
    let target_eval = if cfg.eval_images_per_id_cam > 0 {
        Some(render_split(cfg, &tgt_plan, "synth-target-eval", eval_range)?)
    } else {
        None
    };

    let write_split = |ds: &Dataset, plan: &DomainPlan, sub: &str| -> Result<()> {
        let dir = out.join(sub);
        save_dataset(ds, &dir)?;
        atomic_write(&dir.join("factors.csv"), factors_csv(plan, ds).as_bytes())
    };
    write_split(&source, &src_plan, "source")?;
    write_split(&target, &tgt_plan, "target")?;
    if let Some(ds) = &target_eval {
        write_split(ds, &tgt_plan, "target_eval")?;
    }

    Ok(GeneratedBenchmark {
        source,
        target,
        target_eval,
    })
}
