//! Finite-difference verification of every loss gradient.
//!
//! The analytic gradients come from the model's own backward passes. The
//! numeric oracle is a central difference evaluated on an exact
//! double-precision twin of the model, so the oracle's noise floor stays
//! far below both tolerances (single-precision finite differences would
//! drown the signal in cancellation error). Comparing a single-precision
//! model's analytic gradients against the twin's oracle therefore
//! measures exactly the rounding of the f32 backward implementation.
//!
//! The checked function must be pure: trained modules run with batch
//! statistics but frozen running stats, everything frozen runs in eval
//! phase, so repeated forwards at perturbed parameters see no hidden
//! state movement.
//!
//! For the two head-only losses the encoder outputs are constants, so
//! they are computed once and only the head is re-run per probe.

use crate::data::LabelSpaces;
use crate::losses::{
    adv_features, loss_adv1_from_feats, loss_adv2_from_feats, run_loss, LossKind, LossPhases,
};
use crate::model::DrdlModel;
use crate::nn::Phase;
use crate::tensor::{Scalar, Tensor};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Sweep every coordinate when the trained group is at most this big.
    pub full_sweep_limit: usize,
    /// Fraction of coordinates probed per tensor above the limit.
    pub sample_fraction: f64,
    /// Central-difference step is `step_scale * max(1, |theta|)`.
    pub step_scale: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            full_sweep_limit: 5000,
            sample_fraction: 0.01,
            step_scale: 1e-5,
            seed: 0,
        }
    }
}

/// Fixed inputs for a check, stored in single precision (widening to the
/// twin's double precision is exact).
#[derive(Clone, Debug)]
pub struct CheckBatch {
    pub src_images: Tensor<f32>,
    pub src_classes: Vec<usize>,
    pub src_cams: Vec<usize>,
    pub tgt_images: Tensor<f32>,
    pub tgt_cams: Vec<usize>,
}

impl CheckBatch {
    /// Random pixels and labels; gradients care about arithmetic, not
    /// image content.
    pub fn random(
        n_src: usize,
        n_tgt: usize,
        channels: usize,
        height: usize,
        width: usize,
        labels: &LabelSpaces,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut image = |n: usize| {
            let mut t = Tensor::zeros(&[n, channels, height, width]);
            for v in t.data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            t
        };
        let src_images = image(n_src);
        let tgt_images = image(n_tgt);
        let src_classes = (0..n_src)
            .map(|_| rng.gen_range(0..labels.num_source_ids))
            .collect();
        let src_cams = (0..n_src)
            .map(|_| rng.gen_range(0..labels.num_source_cams))
            .collect();
        let tgt_cams = (0..n_tgt)
            .map(|_| labels.num_source_cams + rng.gen_range(0..labels.num_target_cams))
            .collect();
        CheckBatch {
            src_images,
            src_classes,
            src_cams,
            tgt_images,
            tgt_cams,
        }
    }

    fn images<T: Scalar>(&self) -> (Tensor<T>, Tensor<T>) {
        (
            Tensor::from_f64_tensor(&self.src_images.to_f64()),
            Tensor::from_f64_tensor(&self.tgt_images.to_f64()),
        )
    }
}

/// Comparison result for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// Flat coordinates probed (all of them, or a deterministic sample).
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_error: f64,
    /// Probe with the largest absolute analytic/numeric gap.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub loss: LossKind,
    pub precision: &'static str,
    pub params: Vec<ParamCheck>,
    /// Largest per-tensor relative error. The double-precision check
    /// bounds this strictly, so a wrong formula in any single layer is
    /// caught there regardless of that layer's share of the gradient.
    pub max_tensor_rel_error: f64,
    /// Relative error of all probed coordinates flattened into one
    /// vector. Single-precision runs are judged on this: per-tensor
    /// errors on tiny-gradient tensors (batch-norm scales deep in the
    /// net) are dominated by f32 cancellation noise, not by bugs.
    pub group_rel_error: f64,
    pub total_checked: usize,
    pub group_size: usize,
    pub elapsed_secs: f64,
}

impl GradCheck {
    /// Pass criterion at the tolerance for this run's precision: every
    /// tensor individually in double precision, the flattened group
    /// vector in single precision.
    pub fn passes(&self, tolerance: f64) -> bool {
        if self.precision == "f64" {
            self.max_tensor_rel_error < tolerance
        } else {
            self.group_rel_error < tolerance
        }
    }
}

/// Relative error between two vectors as ||a - n|| / (||a|| + ||n||),
/// with the 0/0 case defined as 0 (both gradients identically zero).
pub fn relative_l2_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let den = na.sqrt() + nn.sqrt();
    if den == 0.0 {
        0.0
    } else {
        diff.sqrt() / den
    }
}

/// Verifies the analytic gradient of one loss against the
/// finite-difference oracle, over the loss's own trainable groups.
pub fn check_loss<T: Scalar>(
    model: &mut DrdlModel<T>,
    batch: &CheckBatch,
    kind: LossKind,
    cfg: &GradCheckConfig,
) -> Result<GradCheck> {
    let start = Instant::now();
    let groups = kind.trained_groups();
    let phases = LossPhases::with(groups, Phase::TrainFrozenStats);

    // Analytic pass on the model as-is.
    model.set_trainable_groups(groups);
    model.zero_all_grads();
    let (src, tgt) = batch.images::<T>();
    run_loss(
        model,
        kind,
        &src,
        &batch.src_classes,
        &batch.src_cams,
        &tgt,
        &batch.tgt_cams,
        phases,
        Some(T::one()),
    )?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for g in groups {
        for p in model.group_params(*g) {
            analytic.push((p.name.clone(), p.grad.to_f64().data().to_vec()));
        }
    }

    // Numeric oracle on the exact double twin.
    let mut twin = model.to_f64();
    let (src64, tgt64) = batch.images::<f64>();
    let mut eval: Box<dyn FnMut(&mut DrdlModel<f64>) -> Result<f64>> = match kind {
        LossKind::Adv1 => {
            let feats = adv_features(&mut twin, &src64, &tgt64, phases.e1, phases.e2)?;
            let src_cams = batch.src_cams.clone();
            let tgt_cams = batch.tgt_cams.clone();
            let w2 = phases.w2;
            Box::new(move |m| loss_adv1_from_feats(m, &feats, &src_cams, &tgt_cams, w2, None))
        }
        LossKind::Adv2 => {
            let feats = adv_features(&mut twin, &src64, &tgt64, phases.e1, phases.e2)?;
            let classes = batch.src_classes.clone();
            let w1 = phases.w1;
            Box::new(move |m| {
                loss_adv2_from_feats(m, &feats.fused_s, &feats.style_s, &classes, w1, None)
            })
        }
        _ => {
            let classes = batch.src_classes.clone();
            let src_cams = batch.src_cams.clone();
            let tgt_cams = batch.tgt_cams.clone();
            Box::new(move |m| {
                run_loss(m, kind, &src64, &classes, &src_cams, &tgt64, &tgt_cams, phases, None)
            })
        }
    };

    let group_size: usize = groups
        .iter()
        .map(|g| model.group_params(*g).iter().map(|p| p.numel()).sum::<usize>())
        .sum();
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut params = Vec::new();
    let mut max_rel = 0.0f64;
    let mut all_analytic: Vec<f64> = Vec::new();
    let mut all_numeric: Vec<f64> = Vec::new();
    let mut total_checked = 0usize;
    let mut flat = 0usize; // running index across the group param list
    for g in groups {
        let tensor_count = model.group_params(*g).len();
        for pi in 0..tensor_count {
            let numel = twin.group_params(*g)[pi].numel();
            let coords: Vec<usize> = if group_size <= cfg.full_sweep_limit {
                (0..numel).collect()
            } else {
                let amount = ((numel as f64 * cfg.sample_fraction).ceil() as usize)
                    .clamp(1, numel);
                let mut v = rand::seq::index::sample(&mut sample_rng, numel, amount).into_vec();
                v.sort_unstable();
                v
            };
            let mut numeric = Vec::with_capacity(coords.len());
            for &ci in &coords {
                let theta = twin.group_params(*g)[pi].value.data()[ci];
                let h = cfg.step_scale * theta.abs().max(1.0);
                twin.group_params_mut(*g)[pi].value.data_mut()[ci] = theta + h;
                let up = eval(&mut twin)?;
                twin.group_params_mut(*g)[pi].value.data_mut()[ci] = theta - h;
                let down = eval(&mut twin)?;
                twin.group_params_mut(*g)[pi].value.data_mut()[ci] = theta;
                numeric.push((up - down) / (2.0 * h));
            }
            let (name, grads) = &analytic[flat];
            let picked: Vec<f64> = coords.iter().map(|&c| grads[c]).collect();
            let rel = relative_l2_error(&picked, &numeric);
            let worst = coords
                .iter()
                .zip(picked.iter().zip(numeric.iter()))
                .max_by(|a, b| {
                    let da = (a.1 .0 - a.1 .1).abs();
                    let db = (b.1 .0 - b.1 .1).abs();
                    da.partial_cmp(&db).expect("finite gaps")
                })
                .map(|(c, (a, n))| (*c, *a, *n));
            max_rel = max_rel.max(rel);
            total_checked += coords.len();
            all_analytic.extend_from_slice(&picked);
            all_numeric.extend_from_slice(&numeric);
            params.push(ParamCheck {
                name: name.clone(),
                coords,
                analytic: picked,
                numeric,
                rel_error: rel,
                worst,
            });
            flat += 1;
        }
    }

    Ok(GradCheck {
        loss: kind,
        precision: T::NAME,
        params,
        max_tensor_rel_error: max_rel,
        group_rel_error: relative_l2_error(&all_analytic, &all_numeric),
        total_checked,
        group_size,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Runs `check_loss` for all six losses.
pub fn check_all<T: Scalar>(
    model: &mut DrdlModel<T>,
    batch: &CheckBatch,
    cfg: &GradCheckConfig,
) -> Result<Vec<GradCheck>> {
    LossKind::ALL
        .iter()
        .map(|k| check_loss(model, batch, *k, cfg))
        .collect()
}
