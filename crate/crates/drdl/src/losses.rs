//! The six training objectives over the dual-stream model.
//!
//! Each loss is a function of the current model state and one paired
//! batch. A call runs the forward passes it needs, and, when `grad_scale`
//! is given, backpropagates `grad_scale * dloss` into every module on its
//! path; whether a module's parameter gradients actually accumulate is
//! governed by that module's trainable flag, which the caller sets before
//! the call. Frozen modules are run in eval phase by convention (their
//! statistics must not move while another group trains against them).
//!
//! The losses:
//!
//! * `loss_id`: identity CE on all three pooled content views (avg, max,
//!   fused), source domain; trains the content encoder and id head.
//! * `loss_un_id`: camera CE on style features of both domains; trains
//!   the style encoder and camera head.
//! * `loss_e1`: pushes fused content features toward the extra camera
//!   class (both domains) while keeping source id CE; content encoder only.
//! * `loss_e2`: keeps style camera CE and pushes the id head's response
//!   to style features toward the uniform distribution; style encoder only.
//! * `loss_adv1`: camera head recovers true cameras from style AND fused
//!   content features; camera head only, encoder outputs detached.
//! * `loss_adv2`: id head recovers source ids from fused content AND
//!   style features; id head only, encoder outputs detached.

use crate::model::{ContentFeatures, DrdlModel, Group};
use crate::nn::loss::{cross_entropy_uniform, softmax_cross_entropy};
use crate::nn::Phase;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Weights of the four adversarial terms in the total objective; the
/// trainer also scales each sub-step's gradient by its weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.01,
            beta: 1.0,
            lambda: 0.01,
            tau: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("tau", self.tau),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Names for the six losses, with the parameter groups each one trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Id,
    UnId,
    E1,
    E2,
    Adv1,
    Adv2,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Id,
        LossKind::UnId,
        LossKind::E1,
        LossKind::E2,
        LossKind::Adv1,
        LossKind::Adv2,
    ];

    pub fn trained_groups(&self) -> &'static [Group] {
        match self {
            LossKind::Id => &[Group::E1, Group::W1],
            LossKind::UnId => &[Group::E2, Group::W2],
            LossKind::E1 => &[Group::E1],
            LossKind::E2 => &[Group::E2],
            LossKind::Adv1 => &[Group::W2],
            LossKind::Adv2 => &[Group::W1],
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Id => "id",
            LossKind::UnId => "un_id",
            LossKind::E1 => "e1",
            LossKind::E2 => "e2",
            LossKind::Adv1 => "adv1",
            LossKind::Adv2 => "adv2",
        }
    }
}

/// Per-module phases for one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossPhases {
    pub e1: Phase,
    pub e2: Phase,
    pub w1: Phase,
    pub w2: Phase,
}

impl LossPhases {
    pub fn all(phase: Phase) -> Self {
        LossPhases {
            e1: phase,
            e2: phase,
            w1: phase,
            w2: phase,
        }
    }

    /// The given groups run at `phase`, everything else at eval.
    pub fn with(groups: &[Group], phase: Phase) -> Self {
        let mut p = LossPhases::all(Phase::Eval);
        for g in groups {
            match g {
                Group::E1 => p.e1 = phase,
                Group::E2 => p.e2 = phase,
                Group::W1 => p.w1 = phase,
                Group::W2 => p.w2 = phase,
            }
        }
        p
    }

    pub fn of(&self, group: Group) -> Phase {
        match group {
            Group::E1 => self.e1,
            Group::E2 => self.e2,
            Group::W1 => self.w1,
            Group::W2 => self.w2,
        }
    }
}

fn scaled<T: Scalar>(mut d: Tensor<T>, scale: Option<T>) -> Tensor<T> {
    if let Some(s) = scale {
        d.scale(s);
    }
    d
}

/// Identity loss: CE of the id head on the average-pooled, max-pooled and
/// fused content views, in that order. Returns the three-term sum.
pub fn loss_id<T: Scalar>(
    m: &mut DrdlModel<T>,
    src_images: &Tensor<T>,
    src_classes: &[usize],
    phases: LossPhases,
    grad_scale: Option<T>,
) -> Result<T> {
    let (feats, cache) = m.forward_content(src_images, phases.e1)?;
    let (lg_gap, c_gap) = m.w1.forward(&feats.gap, phases.w1)?;
    let (lg_gmp, c_gmp) = m.w1.forward(&feats.gmp, phases.w1)?;
    let (lg_fused, c_fused) = m.w1.forward(&feats.fused, phases.w1)?;
    let (l1, d1) = softmax_cross_entropy(&lg_gap, src_classes)?;
    let (l2, d2) = softmax_cross_entropy(&lg_gmp, src_classes)?;
    let (l3, d3) = softmax_cross_entropy(&lg_fused, src_classes)?;
    if grad_scale.is_some() {
        let dgap = m.w1.backward(&c_gap, &scaled(d1, grad_scale))?;
        let dgmp = m.w1.backward(&c_gmp, &scaled(d2, grad_scale))?;
        let dfused = m.w1.backward(&c_fused, &scaled(d3, grad_scale))?;
        let dmap = feats.pool_backward(Some(&dgap), Some(&dgmp), Some(&dfused))?;
        m.e1.backward(&cache, &dmap)?;
    }
    Ok(l1 + l2 + l3)
}

/// Camera loss on style features of both domains.
pub fn loss_un_id<T: Scalar>(
    m: &mut DrdlModel<T>,
    src_images: &Tensor<T>,
    src_cams: &[usize],
    tgt_images: &Tensor<T>,
    tgt_cams: &[usize],
    phases: LossPhases,
    grad_scale: Option<T>,
) -> Result<T> {
    let (style_s, cache_s) = m.forward_style(src_images, phases.e2)?;
    let (lg_s, hc_s) = m.w2.forward(&style_s, phases.w2)?;
    let (style_t, cache_t) = m.forward_style(tgt_images, phases.e2)?;
    let (lg_t, hc_t) = m.w2.forward(&style_t, phases.w2)?;
    let (l_s, d_s) = softmax_cross_entropy(&lg_s, src_cams)?;
    let (l_t, d_t) = softmax_cross_entropy(&lg_t, tgt_cams)?;
    if grad_scale.is_some() {
        let dstyle_s = m.w2.backward(&hc_s, &scaled(d_s, grad_scale))?;
        m.style_backward(&cache_s, &dstyle_s)?;
        let dstyle_t = m.w2.backward(&hc_t, &scaled(d_t, grad_scale))?;
        m.style_backward(&cache_t, &dstyle_t)?;
    }
    Ok(l_s + l_t)
}

/// Content-encoder confusion loss: fused features of both domains are
/// pushed toward the extra camera class while source identity CE is kept.
/// Gradients reach the content encoder only; both heads stay frozen.
pub fn loss_e1<T: Scalar>(
    m: &mut DrdlModel<T>,
    src_images: &Tensor<T>,
    src_classes: &[usize],
    tgt_images: &Tensor<T>,
    phases: LossPhases,
    grad_scale: Option<T>,
) -> Result<T> {
    let extra = m.labels.extra_camera_class();
    let (feats_s, cache_s) = m.forward_content(src_images, phases.e1)?;
    let (feats_t, cache_t) = m.forward_content(tgt_images, phases.e1)?;
    let (lg_cam_s, cc_s) = m.w2.forward(&feats_s.fused, phases.w2)?;
    let (lg_cam_t, cc_t) = m.w2.forward(&feats_t.fused, phases.w2)?;
    let (lg_id_s, ic_s) = m.w1.forward(&feats_s.fused, phases.w1)?;
    let extra_s = vec![extra; src_images.shape()[0]];
    let extra_t = vec![extra; tgt_images.shape()[0]];
    let (l1, d1) = softmax_cross_entropy(&lg_cam_s, &extra_s)?;
    let (l2, d2) = softmax_cross_entropy(&lg_cam_t, &extra_t)?;
    let (l3, d3) = softmax_cross_entropy(&lg_id_s, src_classes)?;
    if grad_scale.is_some() {
        let mut dfused_s = m.w2.backward(&cc_s, &scaled(d1, grad_scale))?;
        dfused_s.add_assign(&m.w1.backward(&ic_s, &scaled(d3, grad_scale))?)?;
        let dmap_s = feats_s.pool_backward(None, None, Some(&dfused_s))?;
        m.e1.backward(&cache_s, &dmap_s)?;
        let dfused_t = m.w2.backward(&cc_t, &scaled(d2, grad_scale))?;
        let dmap_t = feats_t.pool_backward(None, None, Some(&dfused_t))?;
        m.e1.backward(&cache_t, &dmap_t)?;
    }
    Ok(l1 + l2 + l3)
}

/// Style-encoder loss: keep the camera CE on style features and push the
/// id head's response to source style features toward uniform.
pub fn loss_e2<T: Scalar>(
    m: &mut DrdlModel<T>,
    src_images: &Tensor<T>,
    src_cams: &[usize],
    tgt_images: &Tensor<T>,
    tgt_cams: &[usize],
    phases: LossPhases,
    grad_scale: Option<T>,
) -> Result<T> {
    let (style_s, cache_s) = m.forward_style(src_images, phases.e2)?;
    let (style_t, cache_t) = m.forward_style(tgt_images, phases.e2)?;
    let (lg_cam_s, cc_s) = m.w2.forward(&style_s, phases.w2)?;
    let (lg_cam_t, cc_t) = m.w2.forward(&style_t, phases.w2)?;
    let (lg_id_s, ic_s) = m.w1.forward(&style_s, phases.w1)?;
    let (l1, d1) = softmax_cross_entropy(&lg_cam_s, src_cams)?;
    let (l2, d2) = softmax_cross_entropy(&lg_cam_t, tgt_cams)?;
    let (l3, d3) = cross_entropy_uniform(&lg_id_s)?;
    if grad_scale.is_some() {
        let mut dstyle_s = m.w2.backward(&cc_s, &scaled(d1, grad_scale))?;
        dstyle_s.add_assign(&m.w1.backward(&ic_s, &scaled(d3, grad_scale))?)?;
        m.style_backward(&cache_s, &dstyle_s)?;
        let dstyle_t = m.w2.backward(&cc_t, &scaled(d2, grad_scale))?;
        m.style_backward(&cache_t, &dstyle_t)?;
    }
    Ok(l1 + l2 + l3)
}

/// Encoder outputs consumed by the head-only adversarial losses. They are
/// constants for those losses, so they can be computed once and reused.
pub struct AdvFeatures<T> {
    pub style_s: Tensor<T>,
    pub style_t: Tensor<T>,
    pub fused_s: Tensor<T>,
    pub fused_t: Tensor<T>,
}

/// Runs both encoders at the given phases and detaches the four feature
/// sets the adversarial head losses need.
pub fn adv_features<T: Scalar>(
    m: &mut DrdlModel<T>,
    src_images: &Tensor<T>,
    tgt_images: &Tensor<T>,
    e1_phase: Phase,
    e2_phase: Phase,
) -> Result<AdvFeatures<T>> {
    let (style_s, _) = m.forward_style(src_images, e2_phase)?;
    let (style_t, _) = m.forward_style(tgt_images, e2_phase)?;
    let (feats_s, _) = m.forward_content(src_images, e1_phase)?;
    let (feats_t, _) = m.forward_content(tgt_images, e1_phase)?;
    Ok(AdvFeatures {
        style_s,
        style_t,
        fused_s: feats_s.fused,
        fused_t: feats_t.fused,
    })
}

/// Camera-head recovery loss on precomputed (detached) features.
pub fn loss_adv1_from_feats<T: Scalar>(
    m: &mut DrdlModel<T>,
    feats: &AdvFeatures<T>,
    src_cams: &[usize],
    tgt_cams: &[usize],
    w2_phase: Phase,
    grad_scale: Option<T>,
) -> Result<T> {
    let mut total = T::zero();
    for (feat, cams) in [
        (&feats.style_s, src_cams),
        (&feats.style_t, tgt_cams),
        (&feats.fused_s, src_cams),
        (&feats.fused_t, tgt_cams),
    ] {
        let (logits, cache) = m.w2.forward(feat, w2_phase)?;
        let (l, d) = softmax_cross_entropy(&logits, cams)?;
        total += l;
        if grad_scale.is_some() {
            m.w2.backward(&cache, &scaled(d, grad_scale))?;
        }
    }
    Ok(total)
}

/// Camera-head recovery loss: the camera head must still find the true
/// camera in style features AND in fused content features, both domains.
/// Encoder outputs are detached; no gradient reaches the encoders.
pub fn loss_adv1<T: Scalar>(
    m: &mut DrdlModel<T>,
    src_images: &Tensor<T>,
    src_cams: &[usize],
    tgt_images: &Tensor<T>,
    tgt_cams: &[usize],
    phases: LossPhases,
    grad_scale: Option<T>,
) -> Result<T> {
    let feats = adv_features(m, src_images, tgt_images, phases.e1, phases.e2)?;
    loss_adv1_from_feats(m, &feats, src_cams, tgt_cams, phases.w2, grad_scale)
}

/// Id-head recovery loss on precomputed (detached) features.
pub fn loss_adv2_from_feats<T: Scalar>(
    m: &mut DrdlModel<T>,
    fused_s: &Tensor<T>,
    style_s: &Tensor<T>,
    src_classes: &[usize],
    w1_phase: Phase,
    grad_scale: Option<T>,
) -> Result<T> {
    let mut total = T::zero();
    for feat in [fused_s, style_s] {
        let (logits, cache) = m.w1.forward(feat, w1_phase)?;
        let (l, d) = softmax_cross_entropy(&logits, src_classes)?;
        total += l;
        if grad_scale.is_some() {
            m.w1.backward(&cache, &scaled(d, grad_scale))?;
        }
    }
    Ok(total)
}

/// Id-head recovery loss: the id head must find the source identity in
/// fused content features AND in style features. Encoders detached.
pub fn loss_adv2<T: Scalar>(
    m: &mut DrdlModel<T>,
    src_images: &Tensor<T>,
    src_classes: &[usize],
    phases: LossPhases,
    grad_scale: Option<T>,
) -> Result<T> {
    let (style_s, _) = m.forward_style(src_images, phases.e2)?;
    let (feats_s, _) = m.forward_content(src_images, phases.e1)?;
    loss_adv2_from_feats(m, &feats_s.fused, &style_s, src_classes, phases.w1, grad_scale)
}

/// Evaluates one loss by kind on a full paired batch. Arguments the loss
/// does not consume are ignored.
#[allow(clippy::too_many_arguments)]
pub fn run_loss<T: Scalar>(
    m: &mut DrdlModel<T>,
    kind: LossKind,
    src_images: &Tensor<T>,
    src_classes: &[usize],
    src_cams: &[usize],
    tgt_images: &Tensor<T>,
    tgt_cams: &[usize],
    phases: LossPhases,
    grad_scale: Option<T>,
) -> Result<T> {
    match kind {
        LossKind::Id => loss_id(m, src_images, src_classes, phases, grad_scale),
        LossKind::UnId => loss_un_id(m, src_images, src_cams, tgt_images, tgt_cams, phases, grad_scale),
        LossKind::E1 => loss_e1(m, src_images, src_classes, tgt_images, phases, grad_scale),
        LossKind::E2 => loss_e2(m, src_images, src_cams, tgt_images, tgt_cams, phases, grad_scale),
        LossKind::Adv1 => loss_adv1(m, src_images, src_cams, tgt_images, tgt_cams, phases, grad_scale),
        LossKind::Adv2 => loss_adv2(m, src_images, src_classes, phases, grad_scale),
    }
}

/// All six loss values at one model state, forward-only in eval phase.
#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub id: f64,
    pub un_id: f64,
    pub e1: f64,
    pub e2: f64,
    pub adv1: f64,
    pub adv2: f64,
    pub total: f64,
}

/// Evaluates every loss and the weighted total on one paired batch, for
/// reporting. Nothing is mutated: all modules run in eval phase.
#[allow(clippy::too_many_arguments)]
pub fn total_objective<T: Scalar>(
    m: &mut DrdlModel<T>,
    src_images: &Tensor<T>,
    src_classes: &[usize],
    src_cams: &[usize],
    tgt_images: &Tensor<T>,
    tgt_cams: &[usize],
    weights: &LossWeights,
) -> Result<LossReport> {
    weights.validate()?;
    let p = LossPhases::all(Phase::Eval);
    let id = loss_id(m, src_images, src_classes, p, None)?.to_f64();
    let un_id = loss_un_id(m, src_images, src_cams, tgt_images, tgt_cams, p, None)?.to_f64();
    let e1 = loss_e1(m, src_images, src_classes, tgt_images, p, None)?.to_f64();
    let e2 = loss_e2(m, src_images, src_cams, tgt_images, tgt_cams, p, None)?.to_f64();
    let adv1 = loss_adv1(m, src_images, src_cams, tgt_images, tgt_cams, p, None)?.to_f64();
    let adv2 = loss_adv2(m, src_images, src_classes, p, None)?.to_f64();
    let total = id
        + un_id
        + weights.alpha * e1
        + weights.beta * adv1
        + weights.lambda * e2
        + weights.tau * adv2;
    Ok(LossReport {
        id,
        un_id,
        e1,
        e2,
        adv1,
        adv2,
        total,
    })
}

/// Re-pools a feature map exactly as the content path does; exposed so
/// oracle recomputations in tests share no code with the losses above.
pub fn content_views<T: Scalar>(map: &Tensor<T>) -> Result<ContentFeatures<T>> {
    ContentFeatures::from_map(map)
}
