//! The dual-stream model: two small convolutional encoders and two
//! classifier heads over a shared feature width D.
//!
//! * `e1` (content): conv blocks, then a pooling fusion of global average
//!   and global max pooling, summed elementwise.
//! * `e2` (style): the same backbone shape, pooled by average only.
//! * `w1` (identity head): feature BN, then a linear map to the source
//!   identity classes.
//! * `w2` (camera head): channel reduction D -> reduce_dim, BN, ReLU, then
//!   a linear map to all cameras of both domains plus one extra class.
//!
//! Each of the four is an independent parameter group with its own
//! trainable flag; the training loop freezes and thaws them per step.

use crate::data::LabelSpaces;
use crate::nn::pool::{
    global_avg_pool, global_avg_pool_backward, global_max_pool, global_max_pool_backward,
};
use crate::nn::{
    relu_backward, relu_forward, BatchNorm, BnCache, Conv2d, ConvCache, Linear, LinearCache,
    Param, ParamModule, Phase,
};
use crate::tensor::{Scalar, Tensor};
use crate::util::derive_seed;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub block_channels: Vec<usize>,
    pub reduce_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            block_channels: vec![16, 32, 64],
            reduce_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        *self.block_channels.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.reduce_dim == 0 || self.block_channels.is_empty() {
            return Err(Error::Config(
                "model config needs in_channels >= 1, reduce_dim >= 1 and at least one conv block"
                    .into(),
            ));
        }
        Ok(())
    }
}

struct ConvBlock<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}

pub struct BlockCache<T> {
    conv: ConvCache<T>,
    bn: BnCache<T>,
    bn_out: Tensor<T>,
}

pub struct BackboneCache<T> {
    blocks: Vec<BlockCache<T>>,
}

impl<T: Scalar> BackboneCache<T> {
    /// Shape of the feature map this cache was built for.
    pub fn map_shape(&self) -> &[usize] {
        self.blocks.last().expect("backbone has blocks").bn_out.shape()
    }
}

/// The four independently trained parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    E1,
    E2,
    W1,
    W2,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::E1, Group::E2, Group::W1, Group::W2];
}

/// Conv-BN-ReLU stack, stride 2 per block, producing a (N, D, H', W') map.
pub struct Backbone<T> {
    name: String,
    blocks: Vec<ConvBlock<T>>,
    trainable: bool,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(name: &str, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &cout) in cfg.block_channels.iter().enumerate() {
            blocks.push(ConvBlock {
                // No conv bias: the batch norm right behind it would
                // cancel any per-channel constant.
                conv: Conv2d::new(&format!("{name}.block{i}.conv"), cin, cout, 2, false, &mut rng)?,
                bn: BatchNorm::new(&format!("{name}.block{i}.bn"), cout),
            });
            cin = cout;
        }
        Ok(Backbone {
            name: name.to_string(),
            blocks,
            trainable: true,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, phase: Phase) -> Result<(Tensor<T>, BackboneCache<T>)> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (conv_out, conv_cache) = block.conv.forward(&cur)?;
            let (bn_out, bn_cache) = block.bn.forward(&conv_out, phase)?;
            cur = relu_forward(&bn_out);
            caches.push(BlockCache {
                conv: conv_cache,
                bn: bn_cache,
                bn_out,
            });
        }
        Ok((cur, BackboneCache { blocks: caches }))
    }

    /// Backpropagates a feature-map gradient; accumulates parameter
    /// gradients only when this group is trainable. The gradient with
    /// respect to the input images is never materialized.
    pub fn backward(&mut self, cache: &BackboneCache<T>, dmap: &Tensor<T>) -> Result<()> {
        let acc = self.trainable;
        let mut d = dmap.clone();
        for (i, (block, bc)) in self
            .blocks
            .iter_mut()
            .zip(cache.blocks.iter())
            .enumerate()
            .rev()
        {
            d = relu_backward(&bc.bn_out, &d);
            d = block.bn.backward(&bc.bn, &d, acc)?;
            match block.conv.backward(&bc.conv, &d, acc, i > 0)? {
                Some(dx) => d = dx,
                None => break,
            }
        }
        Ok(())
    }
}

impl<T: Scalar> ParamModule<T> for Backbone<T> {
    fn module_name(&self) -> &str {
        &self.name
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.blocks
            .iter()
            .flat_map(|b| {
                let mut v = vec![&b.conv.weight];
                v.extend(b.conv.bias.as_ref());
                v.push(&b.bn.gamma);
                v.push(&b.bn.beta);
                v
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                let mut v = vec![&mut b.conv.weight];
                v.extend(b.conv.bias.as_mut());
                v.push(&mut b.bn.gamma);
                v.push(&mut b.bn.beta);
                v
            })
            .collect()
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                [
                    (format!("{}.block{i}.bn.running_mean", self.name), &b.bn.running_mean),
                    (format!("{}.block{i}.bn.running_var", self.name), &b.bn.running_var),
                ]
            })
            .collect()
    }

    fn trainable(&self) -> bool {
        self.trainable
    }

    fn set_trainable(&mut self, on: bool) {
        self.trainable = on;
    }
}

/// Content features from the pooling fusion block.
pub struct ContentFeatures<T> {
    pub gap: Tensor<T>,
    pub gmp: Tensor<T>,
    pub fused: Tensor<T>,
    argmax: Vec<usize>,
    map_shape: Vec<usize>,
}

impl<T: Scalar> ContentFeatures<T> {
    pub fn from_map(map: &Tensor<T>) -> Result<Self> {
        let gap = global_avg_pool(map)?;
        let (gmp, argmax) = global_max_pool(map)?;
        let mut fused = gap.clone();
        fused.add_assign(&gmp)?;
        Ok(ContentFeatures {
            gap,
            gmp,
            fused,
            argmax,
            map_shape: map.shape().to_vec(),
        })
    }

    /// Combines gradients arriving at the three pooled views into a
    /// feature-map gradient. Fused gradients flow into both pooling paths.
    pub fn pool_backward(
        &self,
        dgap: Option<&Tensor<T>>,
        dgmp: Option<&Tensor<T>>,
        dfused: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut avg_seed = Tensor::zeros(self.gap.shape());
        let mut max_seed = Tensor::zeros(self.gmp.shape());
        if let Some(d) = dgap {
            avg_seed.add_assign(d)?;
        }
        if let Some(d) = dgmp {
            max_seed.add_assign(d)?;
        }
        if let Some(d) = dfused {
            avg_seed.add_assign(d)?;
            max_seed.add_assign(d)?;
        }
        let mut dmap = global_avg_pool_backward(&avg_seed, &self.map_shape);
        let dmax = global_max_pool_backward(&max_seed, &self.argmax, &self.map_shape);
        dmap.add_assign(&dmax)?;
        Ok(dmap)
    }
}

pub struct IdHeadCache<T> {
    bn: BnCache<T>,
    fc: LinearCache<T>,
}

/// Identity classifier: BN over the feature vector, then linear logits.
pub struct IdClassifier<T> {
    name: String,
    pub bn: BatchNorm<T>,
    pub fc: Linear<T>,
    trainable: bool,
}

impl<T: Scalar> IdClassifier<T> {
    pub fn new(name: &str, feat_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        IdClassifier {
            name: name.to_string(),
            bn: BatchNorm::new(&format!("{name}.bn"), feat_dim),
            fc: Linear::new(&format!("{name}.fc"), feat_dim, num_classes, true, &mut rng),
            trainable: true,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fc.out_features
    }

    pub fn forward(&mut self, feat: &Tensor<T>, phase: Phase) -> Result<(Tensor<T>, IdHeadCache<T>)> {
        let (h, bn) = self.bn.forward(feat, phase)?;
        let (logits, fc) = self.fc.forward(&h)?;
        Ok((logits, IdHeadCache { bn, fc }))
    }

    pub fn backward(&mut self, cache: &IdHeadCache<T>, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        let acc = self.trainable;
        let dh = self.fc.backward(&cache.fc, dlogits, acc)?;
        self.bn.backward(&cache.bn, &dh, acc)
    }
}

impl<T: Scalar> ParamModule<T> for IdClassifier<T> {
    fn module_name(&self) -> &str {
        &self.name
    }
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.bn.gamma, &self.bn.beta, &self.fc.weight];
        v.extend(self.fc.bias.as_ref());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.bn.gamma, &mut self.bn.beta, &mut self.fc.weight];
        v.extend(self.fc.bias.as_mut());
        v
    }
    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{}.bn.running_mean", self.name), &self.bn.running_mean),
            (format!("{}.bn.running_var", self.name), &self.bn.running_var),
        ]
    }
    fn trainable(&self) -> bool {
        self.trainable
    }
    fn set_trainable(&mut self, on: bool) {
        self.trainable = on;
    }
}

pub struct CamHeadCache<T> {
    reduce: LinearCache<T>,
    bn: BnCache<T>,
    bn_out: Tensor<T>,
    fc: LinearCache<T>,
}

/// Camera classifier: channel reduction, BN, ReLU, then linear logits over
/// source cameras + target cameras + one extra class.
pub struct CamClassifier<T> {
    name: String,
    pub reduce: Linear<T>,
    pub bn: BatchNorm<T>,
    pub fc: Linear<T>,
    trainable: bool,
}

impl<T: Scalar> CamClassifier<T> {
    pub fn new(name: &str, feat_dim: usize, reduce_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CamClassifier {
            name: name.to_string(),
            // Reduction feeds a batch norm, so it carries no bias.
            reduce: Linear::new(&format!("{name}.reduce"), feat_dim, reduce_dim, false, &mut rng),
            bn: BatchNorm::new(&format!("{name}.bn"), reduce_dim),
            fc: Linear::new(&format!("{name}.fc"), reduce_dim, num_classes, true, &mut rng),
            trainable: true,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fc.out_features
    }

    pub fn forward(&mut self, feat: &Tensor<T>, phase: Phase) -> Result<(Tensor<T>, CamHeadCache<T>)> {
        let (r, reduce) = self.reduce.forward(feat)?;
        let (bn_out, bn) = self.bn.forward(&r, phase)?;
        let h = relu_forward(&bn_out);
        let (logits, fc) = self.fc.forward(&h)?;
        Ok((
            logits,
            CamHeadCache {
                reduce,
                bn,
                bn_out,
                fc,
            },
        ))
    }

    pub fn backward(&mut self, cache: &CamHeadCache<T>, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        let acc = self.trainable;
        let dh = self.fc.backward(&cache.fc, dlogits, acc)?;
        let dbn = relu_backward(&cache.bn_out, &dh);
        let dr = self.bn.backward(&cache.bn, &dbn, acc)?;
        self.reduce.backward(&cache.reduce, &dr, acc)
    }
}

impl<T: Scalar> ParamModule<T> for CamClassifier<T> {
    fn module_name(&self) -> &str {
        &self.name
    }
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.reduce.weight];
        v.extend(self.reduce.bias.as_ref());
        v.extend([&self.bn.gamma, &self.bn.beta, &self.fc.weight]);
        v.extend(self.fc.bias.as_ref());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.reduce.weight];
        v.extend(self.reduce.bias.as_mut());
        v.extend([&mut self.bn.gamma, &mut self.bn.beta, &mut self.fc.weight]);
        v.extend(self.fc.bias.as_mut());
        v
    }
    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{}.bn.running_mean", self.name), &self.bn.running_mean),
            (format!("{}.bn.running_var", self.name), &self.bn.running_var),
        ]
    }
    fn trainable(&self) -> bool {
        self.trainable
    }
    fn set_trainable(&mut self, on: bool) {
        self.trainable = on;
    }
}

pub struct DrdlModel<T> {
    pub e1: Backbone<T>,
    pub e2: Backbone<T>,
    pub w1: IdClassifier<T>,
    pub w2: CamClassifier<T>,
    pub cfg: ModelConfig,
    pub labels: LabelSpaces,
}

impl<T: Scalar> DrdlModel<T> {
    pub fn new(cfg: ModelConfig, labels: LabelSpaces, seed: u64) -> Result<Self> {
        cfg.validate()?;
        labels.validate()?;
        let d = cfg.feature_dim();
        Ok(DrdlModel {
            e1: Backbone::new("e1", &cfg, derive_seed(seed, &[1]))?,
            e2: Backbone::new("e2", &cfg, derive_seed(seed, &[2]))?,
            w1: IdClassifier::new("w1", d, labels.num_source_ids, derive_seed(seed, &[3])),
            w2: CamClassifier::new(
                "w2",
                d,
                cfg.reduce_dim,
                labels.camera_class_count(),
                derive_seed(seed, &[4]),
            ),
            cfg,
            labels,
        })
    }

    /// Content path: e1, then the pooling fusion block.
    pub fn forward_content(
        &mut self,
        images: &Tensor<T>,
        phase: Phase,
    ) -> Result<(ContentFeatures<T>, BackboneCache<T>)> {
        let (map, cache) = self.e1.forward(images, phase)?;
        Ok((ContentFeatures::from_map(&map)?, cache))
    }

    /// Style path: e2, pooled by global average only.
    pub fn forward_style(
        &mut self,
        images: &Tensor<T>,
        phase: Phase,
    ) -> Result<(Tensor<T>, BackboneCache<T>)> {
        let (map, cache) = self.e2.forward(images, phase)?;
        Ok((global_avg_pool(&map)?, cache))
    }

    /// Backward for the style path: spreads the pooled gradient over the
    /// map and pushes it into e2.
    pub fn style_backward(&mut self, cache: &BackboneCache<T>, dfeat: &Tensor<T>) -> Result<()> {
        let dmap = global_avg_pool_backward(dfeat, cache.map_shape());
        self.e2.backward(cache, &dmap)
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        self.e1.set_trainable(on);
        self.e2.set_trainable(on);
        self.w1.set_trainable(on);
        self.w2.set_trainable(on);
    }

    pub fn set_group_trainable(&mut self, group: Group, on: bool) {
        match group {
            Group::E1 => self.e1.set_trainable(on),
            Group::E2 => self.e2.set_trainable(on),
            Group::W1 => self.w1.set_trainable(on),
            Group::W2 => self.w2.set_trainable(on),
        }
    }

    /// Marks exactly the given groups trainable and everything else frozen.
    pub fn set_trainable_groups(&mut self, groups: &[Group]) {
        self.set_all_trainable(false);
        for g in groups {
            self.set_group_trainable(*g, true);
        }
    }

    /// Bit-exact digest of one group's parameters and buffers.
    pub fn group_digest(&self, group: Group) -> u64 {
        match group {
            Group::E1 => self.e1.state_digest(),
            Group::E2 => self.e2.state_digest(),
            Group::W1 => self.w1.state_digest(),
            Group::W2 => self.w2.state_digest(),
        }
    }

    pub fn group_params(&self, group: Group) -> Vec<&Param<T>> {
        match group {
            Group::E1 => self.e1.params(),
            Group::E2 => self.e2.params(),
            Group::W1 => self.w1.params(),
            Group::W2 => self.w2.params(),
        }
    }

    pub fn group_params_mut(&mut self, group: Group) -> Vec<&mut Param<T>> {
        match group {
            Group::E1 => self.e1.params_mut(),
            Group::E2 => self.e2.params_mut(),
            Group::W1 => self.w1.params_mut(),
            Group::W2 => self.w2.params_mut(),
        }
    }

    pub fn zero_all_grads(&mut self) {
        self.e1.zero_grad();
        self.e2.zero_grad();
        self.w1.zero_grad();
        self.w2.zero_grad();
    }

    pub fn total_param_count(&self) -> usize {
        self.e1.param_count() + self.e2.param_count() + self.w1.param_count() + self.w2.param_count()
    }

    /// Exact double-precision twin: every parameter and buffer widened.
    pub fn to_f64(&self) -> DrdlModel<f64> {
        let mut twin = DrdlModel::<f64>::new(self.cfg.clone(), self.labels.clone(), 0)
            .expect("twin construction mirrors a validated model");
        copy_state(&self.e1, &mut twin.e1);
        copy_state(&self.e2, &mut twin.e2);
        copy_state(&self.w1, &mut twin.w1);
        copy_state(&self.w2, &mut twin.w2);
        twin.e1.set_trainable(self.e1.trainable());
        twin.e2.set_trainable(self.e2.trainable());
        twin.w1.set_trainable(self.w1.trainable());
        twin.w2.set_trainable(self.w2.trainable());
        twin
    }
}

fn copy_state<T: Scalar, M: ParamModule<T>, N: ParamModuleMutBuffers<f64>>(src: &M, dst: &mut N) {
    let src_params = src.params();
    let mut dst_params = dst.params_mut_vec();
    assert_eq!(src_params.len(), dst_params.len());
    for (s, d) in src_params.iter().zip(dst_params.iter_mut()) {
        d.value = s.value.to_f64();
        d.grad = s.grad.to_f64();
    }
    let src_bufs = src.buffers();
    let mut dst_bufs = dst.buffers_mut_vec();
    assert_eq!(src_bufs.len(), dst_bufs.len());
    for ((_, s), d) in src_bufs.iter().zip(dst_bufs.iter_mut()) {
        **d = s.to_f64();
    }
}

/// Helper trait so `copy_state` can reach mutable buffers without widening
/// the public `ParamModule` contract.
pub trait ParamModuleMutBuffers<T: Scalar> {
    fn params_mut_vec(&mut self) -> Vec<&mut Param<T>>;
    fn buffers_mut_vec(&mut self) -> Vec<&mut Tensor<T>>;
}

impl<T: Scalar> ParamModuleMutBuffers<T> for Backbone<T> {
    fn params_mut_vec(&mut self) -> Vec<&mut Param<T>> {
        self.params_mut()
    }
    fn buffers_mut_vec(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.bn.running_mean, &mut b.bn.running_var])
            .collect()
    }
}

impl<T: Scalar> ParamModuleMutBuffers<T> for IdClassifier<T> {
    fn params_mut_vec(&mut self) -> Vec<&mut Param<T>> {
        self.params_mut()
    }
    fn buffers_mut_vec(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.bn.running_mean, &mut self.bn.running_var]
    }
}

impl<T: Scalar> ParamModuleMutBuffers<T> for CamClassifier<T> {
    fn params_mut_vec(&mut self) -> Vec<&mut Param<T>> {
        self.params_mut()
    }
    fn buffers_mut_vec(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.bn.running_mean, &mut self.bn.running_var]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::kaiming_uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn labels(ids: usize, cs: usize, ct: usize) -> LabelSpaces {
        LabelSpaces {
            num_source_ids: ids,
            num_source_cams: cs,
            num_target_cams: ct,
        }
    }

    fn small_model() -> DrdlModel<f64> {
        let cfg = ModelConfig {
            in_channels: 3,
            block_channels: vec![4, 8],
            reduce_dim: 4,
        };
        DrdlModel::new(cfg, labels(5, 2, 3), 42).unwrap()
    }

    #[test]
    fn classifier_widths_follow_label_spaces() {
        let m = DrdlModel::<f64>::new(ModelConfig::default(), labels(32, 6, 8), 0).unwrap();
        assert_eq!(m.w1.num_classes(), 32);
        assert_eq!(m.w2.num_classes(), 15);
        let m2 = DrdlModel::<f64>::new(ModelConfig::default(), labels(7, 2, 1), 0).unwrap();
        assert_eq!(m2.w2.num_classes(), 4);
    }

    #[test]
    fn zeroed_final_layers_give_uniform_logits() {
        let mut m = small_model();
        m.w1.fc.weight.value.fill(0.0);
        m.w1.fc.bias.as_mut().unwrap().value.fill(0.0);
        m.w2.fc.weight.value.fill(0.0);
        m.w2.fc.bias.as_mut().unwrap().value.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feat = kaiming_uniform::<f64>(&[3, 8], 8, &mut rng);
        let (id_logits, _) = m.w1.forward(&feat, Phase::Eval).unwrap();
        let (cam_logits, _) = m.w2.forward(&feat, Phase::Eval).unwrap();
        assert!(id_logits.data().iter().all(|v| *v == 0.0));
        assert!(cam_logits.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_map_fuses_to_twice_the_constant() {
        let c = 0.75f64;
        let map = Tensor::full(&[2, 3, 4, 2], c);
        let f = ContentFeatures::from_map(&map).unwrap();
        assert!(f.gap.data().iter().all(|v| (*v - c).abs() < 1e-12));
        assert!(f.gmp.data().iter().all(|v| (*v - c).abs() < 1e-12));
        assert!(f.fused.data().iter().all(|v| (*v - 2.0 * c).abs() < 1e-12));
    }

    #[test]
    fn fused_is_elementwise_sum_of_pools() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let map = kaiming_uniform::<f64>(&[4, 8, 4, 2], 3, &mut rng);
        let f = ContentFeatures::from_map(&map).unwrap();
        for i in 0..f.fused.numel() {
            assert_eq!(f.fused.data()[i], f.gap.data()[i] + f.gmp.data()[i]);
        }
    }

    #[test]
    fn batched_eval_rows_equal_single_sample_eval() {
        let mut m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let batch = kaiming_uniform::<f64>(&[4, 3, 16, 8], 10, &mut rng);
        let (feats, _) = m.forward_content(&batch, Phase::Eval).unwrap();
        for i in 0..4 {
            let mut one = Tensor::zeros(&[1, 3, 16, 8]);
            one.data_mut()
                .copy_from_slice(&batch.data()[i * 3 * 128..(i + 1) * 3 * 128]);
            let (f1, _) = m.forward_content(&one, Phase::Eval).unwrap();
            for j in 0..8 {
                assert!(
                    (feats.fused.data()[i * 8 + j] - f1.fused.data()[j]).abs() < 1e-12,
                    "row {i} col {j}"
                );
            }
        }
    }

    #[test]
    fn repeated_eval_forwards_are_identical_and_do_not_mutate() {
        let mut m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = kaiming_uniform::<f64>(&[2, 3, 16, 8], 10, &mut rng);
        let d0 = m.e1.state_digest();
        let (a, _) = m.forward_content(&x, Phase::Eval).unwrap();
        let (b, _) = m.forward_content(&x, Phase::Eval).unwrap();
        assert_eq!(a.fused.data(), b.fused.data());
        assert_eq!(m.e1.state_digest(), d0);
    }

    #[test]
    fn parameter_groups_are_disjoint_and_complete() {
        let m = small_model();
        let mut names = HashSet::new();
        let mut count = 0usize;
        for p in m
            .e1
            .params()
            .into_iter()
            .chain(m.e2.params())
            .chain(m.w1.params())
            .chain(m.w2.params())
        {
            assert!(names.insert(p.name.clone()), "duplicate name {}", p.name);
            count += p.numel();
        }
        assert_eq!(count, m.total_param_count());
    }

    #[test]
    fn argmax_of_id_logits_is_stable_under_row_rescaling() {
        let mut m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let feat = kaiming_uniform::<f64>(&[6, 8], 8, &mut rng);
        let (logits, _) = m.w1.forward(&feat, Phase::Eval).unwrap();
        let argmax = |l: &Tensor<f64>| -> Vec<usize> {
            (0..l.shape()[0])
                .map(|i| {
                    let row = &l.data()[i * l.shape()[1]..(i + 1) * l.shape()[1]];
                    let mut bi = 0;
                    for (j, v) in row.iter().enumerate() {
                        if *v > row[bi] {
                            bi = j;
                        }
                    }
                    bi
                })
                .collect()
        };
        let before = argmax(&logits);
        m.w1.fc.weight.value.scale(3.5);
        let (scaled, _) = m.w1.forward(&feat, Phase::Eval).unwrap();
        assert_eq!(before, argmax(&scaled));
    }

    #[test]
    fn f64_twin_reproduces_f32_forward_closely() {
        let cfg = ModelConfig {
            in_channels: 3,
            block_channels: vec![4, 8],
            reduce_dim: 4,
        };
        let mut m32 = DrdlModel::<f32>::new(cfg, labels(5, 2, 3), 7).unwrap();
        let mut m64 = m32.to_f64();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x32 = kaiming_uniform::<f32>(&[2, 3, 16, 8], 10, &mut rng);
        let x64 = x32.to_f64();
        let (f32_out, _) = m32.forward_content(&x32, Phase::Eval).unwrap();
        let (f64_out, _) = m64.forward_content(&x64, Phase::Eval).unwrap();
        for (a, b) in f32_out.fused.data().iter().zip(f64_out.fused.data().iter()) {
            assert!((a.to_f64() - b).abs() < 1e-4);
        }
    }
}
