//! The sequence recognizer: a conv front end plus pre-norm residual blocks,
//! split into an extractor and a classifier, with a mean-pool speaker head
//! sitting behind a gradient reversal layer.
//!
//! Forward passes are associated functions over `(ArchSpec, ParamStore)` so
//! the same code serves the student, the EMA teacher and loaded checkpoints.
//! Backward passes accumulate into whatever parameters are marked trainable;
//! frozen parameters silently drop their contributions.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::ctc::{ctc_grad, ctc_loss, LabelSeq, LogProbLattice};
use crate::error::{CoreError, Result};
use crate::layers;
use crate::math;
use crate::params::ParamStore;
use crate::rng::{derive_rng, uniform_sym};
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    /// Input feature dimension.
    pub input_dim: usize,
    /// Hidden width of every block.
    pub hidden: usize,
    /// Temporal kernel size of both conv layers.
    pub conv_kernel: usize,
    /// Strides of the first and second conv layer.
    pub conv_strides: (usize, usize),
    /// Residual blocks in the extractor.
    pub ext_blocks: usize,
    /// Residual blocks in the classifier.
    pub cls_blocks: usize,
    /// Output vocabulary including the blank at index 0.
    pub vocab: usize,
    /// Speaker-head output dimension.
    pub speakers: usize,
    /// LayerNorm epsilon.
    pub ln_eps: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            input_dim: 8,
            hidden: 16,
            conv_kernel: 3,
            conv_strides: (2, 1),
            ext_blocks: 2,
            cls_blocks: 2,
            vocab: 13,
            speakers: 5,
            ln_eps: 1e-5,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.input_dim >= 1
            && self.hidden >= 1
            && self.conv_kernel >= 1
            && self.conv_strides.0 >= 1
            && self.conv_strides.1 >= 1
            && self.vocab >= 2
            && self.speakers >= 1
            && self.ln_eps > 0.0;
        if !ok {
            return Err(CoreError::InvalidConfig("architecture spec out of range".into()));
        }
        Ok(())
    }

    /// Smallest input length the conv front end accepts.
    pub fn min_input_frames(&self) -> usize {
        // conv2 needs `conv_kernel` outputs from conv1.
        self.conv_kernel + self.conv_strides.0 * (self.conv_kernel - 1)
    }

    /// Lattice frames produced for an input of `t` frames, if any.
    pub fn out_frames(&self, t: usize) -> Option<usize> {
        if t < self.conv_kernel {
            return None;
        }
        let t1 = (t - self.conv_kernel) / self.conv_strides.0 + 1;
        if t1 < self.conv_kernel {
            return None;
        }
        Some((t1 - self.conv_kernel) / self.conv_strides.1 + 1)
    }
}

/// Parameter partitioning strategies for personalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionStrategy {
    /// Everything is aggregated (plain FedAvg).
    AllGlobal,
    /// Normalization gains/biases stay local.
    NormLayers,
    /// The whole extractor stays local.
    Extractor,
}

/// Names split into personalization (kept local) and global (aggregated).
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub strategy: PartitionStrategy,
    pub personal: BTreeSet<String>,
    pub global: BTreeSet<String>,
}

pub struct SeqModel {
    pub arch: ArchSpec,
    pub params: ParamStore,
}

struct BlockCache {
    input: Tensor,
    normed: Tensor,
    pre_act: Tensor,
    activated: Tensor,
}

struct ExtCache {
    input: Tensor,
    conv0_pre: Tensor,
    conv0_out: Tensor,
    conv1_pre: Tensor,
    blocks: Vec<BlockCache>,
}

struct ClsCache {
    blocks: Vec<BlockCache>,
    pre_out: Tensor,
}

struct SpkCache {
    frames: usize,
    pooled: Tensor,
}

/// ASR + speaker losses from one shared forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageLosses {
    pub asr: f64,
    pub speaker: f64,
}

impl SeqModel {
    /// Deterministic scaled-uniform initialization; gains start at 1,
    /// biases at 0, all parameters trainable.
    pub fn build(arch: ArchSpec, seed: u64) -> Result<SeqModel> {
        arch.validate()?;
        let mut rng = derive_rng(seed, &[0x6d6f64656c]); // "model"
        let mut params = ParamStore::new();
        let (d, h, k, v, s) = (arch.input_dim, arch.hidden, arch.conv_kernel, arch.vocab, arch.speakers);

        let mut weight = |params: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize, fan_out: usize| {
            let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| uniform_sym(&mut rng, limit)).collect();
            params.insert(name, Tensor::from_vec(shape, data).unwrap()).unwrap();
        };
        let constant = |params: &mut ParamStore, name: &str, shape: &[usize], value: f64| {
            let n: usize = shape.iter().product();
            params
               .insert(name, Tensor::from_vec(shape, alloc::vec![value; n]).unwrap())
                .unwrap();
        };

        weight(&mut params, "ext.conv0.w", &[k, d, h], k * d, h);
        constant(&mut params, "ext.conv0.b", &[h], 0.0);
        weight(&mut params, "ext.conv1.w", &[k, h, h], k * h, h);
        constant(&mut params, "ext.conv1.b", &[h], 0.0);
        for i in 0..arch.ext_blocks {
            constant(&mut params, &format!("ext.block{i}.ln.gain"), &[h], 1.0);
            constant(&mut params, &format!("ext.block{i}.ln.bias"), &[h], 0.0);
            weight(&mut params, &format!("ext.block{i}.ff0.w"), &[h, h], h, h);
            constant(&mut params, &format!("ext.block{i}.ff0.b"), &[h], 0.0);
            weight(&mut params, &format!("ext.block{i}.ff1.w"), &[h, h], h, h);
            constant(&mut params, &format!("ext.block{i}.ff1.b"), &[h], 0.0);
        }
        for i in 0..arch.cls_blocks {
            constant(&mut params, &format!("cls.block{i}.ln.gain"), &[h], 1.0);
            constant(&mut params, &format!("cls.block{i}.ln.bias"), &[h], 0.0);
            weight(&mut params, &format!("cls.block{i}.ff0.w"), &[h, h], h, h);
            constant(&mut params, &format!("cls.block{i}.ff0.b"), &[h], 0.0);
            weight(&mut params, &format!("cls.block{i}.ff1.w"), &[h, h], h, h);
            constant(&mut params, &format!("cls.block{i}.ff1.b"), &[h], 0.0);
        }
        weight(&mut params, "cls.out.w", &[h, v], h, v);
        constant(&mut params, "cls.out.b", &[v], 0.0);
        weight(&mut params, "spk.out.w", &[h, s], h, s);
        constant(&mut params, "spk.out.b", &[s], 0.0);

        params.mark_all_trainable();
        Ok(SeqModel { arch, params })
    }

    fn p<'a>(params: &'a ParamStore, name: &str) -> &'a Tensor {
        params.get(name).expect("model parameter missing")
    }

    fn block_forward(
        params: &ParamStore,
        prefix: &str,
        idx: usize,
        eps: f64,
        x: Tensor,
    ) -> Result<(BlockCache, Tensor)> {
        let gain = Self::p(params, &format!("{prefix}.block{idx}.ln.gain"));
        let bias = Self::p(params, &format!("{prefix}.block{idx}.ln.bias"));
        let w0 = Self::p(params, &format!("{prefix}.block{idx}.ff0.w"));
        let b0 = Self::p(params, &format!("{prefix}.block{idx}.ff0.b"));
        let w1 = Self::p(params, &format!("{prefix}.block{idx}.ff1.w"));
        let b1 = Self::p(params, &format!("{prefix}.block{idx}.ff1.b"));
        let normed = layers::layernorm_fwd(&x, gain, bias, eps)?;
        let pre_act = layers::affine_fwd(&normed, w0, b0)?;
        let activated = layers::relu_fwd(&pre_act);
        let ff_out = layers::affine_fwd(&activated, w1, b1)?;
        let mut out = x.clone();
        for (o, f) in out.data_mut().iter_mut().zip(ff_out.data()) {
            *o += f;
        }
        Ok((BlockCache { input: x, normed, pre_act, activated }, out))
    }

    fn block_backward(
        params: &mut ParamStore,
        prefix: &str,
        idx: usize,
        eps: f64,
        cache: &BlockCache,
        dy: &Tensor,
    ) -> Tensor {
        let w1_name = format!("{prefix}.block{idx}.ff1.w");
        let w0_name = format!("{prefix}.block{idx}.ff0.w");
        let gain_name = format!("{prefix}.block{idx}.ln.gain");

        let (dact, dw1, db1) = layers::affine_bwd(&cache.activated, Self::p(params, &w1_name), dy);
        let dpre = layers::relu_bwd(&cache.pre_act, &dact);
        let (dnormed, dw0, db0) = layers::affine_bwd(&cache.normed, Self::p(params, &w0_name), &dpre);
        let (dx_norm, dgain, dbias) =
            layers::layernorm_bwd(&cache.input, Self::p(params, &gain_name), eps, &dnormed);

        params.get_mut(&w1_name).unwrap().accumulate_grad(&dw1);
        params.get_mut(&format!("{prefix}.block{idx}.ff1.b")).unwrap().accumulate_grad(&db1);
        params.get_mut(&w0_name).unwrap().accumulate_grad(&dw0);
        params.get_mut(&format!("{prefix}.block{idx}.ff0.b")).unwrap().accumulate_grad(&db0);
        params.get_mut(&gain_name).unwrap().accumulate_grad(&dgain);
        params.get_mut(&format!("{prefix}.block{idx}.ln.bias")).unwrap().accumulate_grad(&dbias);

        // Residual: upstream gradient flows both through the branch and around it.
        let mut dx = dx_norm;
        for (o, &d) in dx.data_mut().iter_mut().zip(dy.data()) {
            *o += d;
        }
        dx
    }

    fn ext_forward(arch: &ArchSpec, params: &ParamStore, x: &Tensor) -> Result<(ExtCache, Tensor)> {
        if x.shape().len() != 2 || x.cols() != arch.input_dim {
            return Err(CoreError::ShapeMismatch {
                context: "ext_forward",
                expected: format!("[T x {}]", arch.input_dim),
                got: x.describe_shape(),
            });
        }
        if x.rows() < arch.min_input_frames() {
            return Err(CoreError::SequenceTooShort {
                needed: arch.min_input_frames(),
                got: x.rows(),
            });
        }
        let c0 = layers::conv1d_fwd(x, Self::p(params, "ext.conv0.w"), arch.conv_strides.0)?;
        let c0b = layers::add_bias_fwd(&c0, Self::p(params, "ext.conv0.b"))?;
        let r0 = layers::relu_fwd(&c0b);
        let c1 = layers::conv1d_fwd(&r0, Self::p(params, "ext.conv1.w"), arch.conv_strides.1)?;
        let c1b = layers::add_bias_fwd(&c1, Self::p(params, "ext.conv1.b"))?;
        let mut h = layers::relu_fwd(&c1b);
        let mut blocks = Vec::with_capacity(arch.ext_blocks);
        for i in 0..arch.ext_blocks {
            let (cache, out) = Self::block_forward(params, "ext", i, arch.ln_eps, h)?;
            blocks.push(cache);
            h = out;
        }
        Ok((ExtCache { input: x.clone(), conv0_pre: c0b, conv0_out: r0, conv1_pre: c1b, blocks }, h))
    }

    fn ext_backward(arch: &ArchSpec, params: &mut ParamStore, cache: &ExtCache, dfeat: &Tensor) {
        let mut dh = dfeat.clone();
        for i in (0..arch.ext_blocks).rev() {
            dh = Self::block_backward(params, "ext", i, arch.ln_eps, &cache.blocks[i], &dh);
        }
        let dc1b = layers::relu_bwd(&cache.conv1_pre, &dh);
        let db1 = layers::add_bias_bwd(&dc1b);
        let (dr0, dk1) =
            layers::conv1d_bwd(&cache.conv0_out, Self::p(params, "ext.conv1.w"), arch.conv_strides.1, &dc1b);
        let dc0b = layers::relu_bwd(&cache.conv0_pre, &dr0);
        let db0 = layers::add_bias_bwd(&dc0b);
        let (_dx, dk0) =
            layers::conv1d_bwd(&cache.input, Self::p(params, "ext.conv0.w"), arch.conv_strides.0, &dc0b);
        params.get_mut("ext.conv1.b").unwrap().accumulate_grad(&db1);
        params.get_mut("ext.conv1.w").unwrap().accumulate_grad(&dk1);
        params.get_mut("ext.conv0.b").unwrap().accumulate_grad(&db0);
        params.get_mut("ext.conv0.w").unwrap().accumulate_grad(&dk0);
    }

    fn cls_forward(arch: &ArchSpec, params: &ParamStore, feat: &Tensor) -> Result<(ClsCache, Tensor)> {
        if feat.shape().len() != 2 || feat.cols() != arch.hidden {
            return Err(CoreError::ShapeMismatch {
                context: "cls_forward",
                expected: format!("[T' x {}]", arch.hidden),
                got: feat.describe_shape(),
            });
        }
        let mut h = feat.clone();
        let mut blocks = Vec::with_capacity(arch.cls_blocks);
        for i in 0..arch.cls_blocks {
            let (cache, out) = Self::block_forward(params, "cls", i, arch.ln_eps, h)?;
            blocks.push(cache);
            h = out;
        }
        let logits = layers::affine_fwd(&h, Self::p(params, "cls.out.w"), Self::p(params, "cls.out.b"))?;
        Ok((ClsCache { blocks, pre_out: h }, logits))
    }

    /// Returns the gradient with respect to the classifier's input features.
    fn cls_backward(arch: &ArchSpec, params: &mut ParamStore, cache: &ClsCache, dlogits: &Tensor) -> Tensor {
        let (mut dh, dw, db) = layers::affine_bwd(&cache.pre_out, Self::p(params, "cls.out.w"), dlogits);
        params.get_mut("cls.out.w").unwrap().accumulate_grad(&dw);
        params.get_mut("cls.out.b").unwrap().accumulate_grad(&db);
        for i in (0..arch.cls_blocks).rev() {
            dh = Self::block_backward(params, "cls", i, arch.ln_eps, &cache.blocks[i], &dh);
        }
        dh
    }

    fn spk_forward(params: &ParamStore, feat: &Tensor) -> (SpkCache, Tensor) {
        let pooled = layers::mean_pool_fwd(feat);
        let logits =
            layers::affine_fwd(&pooled, Self::p(params, "spk.out.w"), Self::p(params, "spk.out.b")).unwrap();
        (SpkCache { frames: feat.rows(), pooled }, logits)
    }

    /// Returns the (gradient-reversed) feature gradient of the speaker branch.
    fn spk_backward(params: &mut ParamStore, cache: &SpkCache, dlogits: &Tensor, lambda: f64) -> Tensor {
        let (dpooled, dw, db) = layers::affine_bwd(&cache.pooled, Self::p(params, "spk.out.w"), dlogits);
        params.get_mut("spk.out.w").unwrap().accumulate_grad(&dw);
        params.get_mut("spk.out.b").unwrap().accumulate_grad(&db);
        let dfeat = layers::mean_pool_bwd(cache.frames, &dpooled);
        layers::grl_backward(&dfeat, lambda)
    }

    /// Extractor output for input `x` under the given parameters.
    pub fn extract_features_with(arch: &ArchSpec, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Self::ext_forward(arch, params, x).map(|(_, f)| f)
    }

    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        Self::extract_features_with(&self.arch, &self.params, x)
    }

    /// Classifier applied to already-extracted features.
    pub fn classifier_forward_with(arch: &ArchSpec, params: &ParamStore, feat: &Tensor) -> Result<LogProbLattice> {
        let (_, logits) = Self::cls_forward(arch, params, feat)?;
        Ok(LogProbLattice::from_logits(&logits))
    }

    pub fn classifier_forward(&self, feat: &Tensor) -> Result<LogProbLattice> {
        Self::classifier_forward_with(&self.arch, &self.params, feat)
    }

    /// Full recognizer: classifier composed with the extractor.
    pub fn forward_asr_with(arch: &ArchSpec, params: &ParamStore, x: &Tensor) -> Result<LogProbLattice> {
        let feat = Self::extract_features_with(arch, params, x)?;
        Self::classifier_forward_with(arch, params, &feat)
    }

    pub fn forward_asr(&self, x: &Tensor) -> Result<LogProbLattice> {
        Self::forward_asr_with(&self.arch, &self.params, x)
    }

    /// Speaker log-probabilities from mean-pooled extractor features.
    /// The gradient reversal only matters on the backward path; see
    /// [`SeqModel::speaker_loss_backward`].
    pub fn forward_speaker(&self, x: &Tensor) -> Result<Tensor> {
        let feat = self.extract_features(x)?;
        let (_, logits) = Self::spk_forward(&self.params, &feat);
        Ok(layers::log_softmax_fwd(&logits))
    }

    /// CTC loss without touching gradients.
    pub fn asr_loss(&self, x: &Tensor, label: &LabelSeq) -> Result<f64> {
        let lattice = self.forward_asr(x)?;
        ctc_loss(&lattice, label)
    }

    /// CTC loss + gradient accumulation through the whole recognizer.
    pub fn asr_loss_backward(&mut self, x: &Tensor, label: &LabelSeq) -> Result<f64> {
        let (ext_cache, feat) = Self::ext_forward(&self.arch, &self.params, x)?;
        let (cls_cache, logits) = Self::cls_forward(&self.arch, &self.params, &feat)?;
        let lattice = LogProbLattice::from_logits(&logits);
        let loss = ctc_loss(&lattice, label)?;
        let dlogits = ctc_grad(&lattice, label)?;
        let dfeat = Self::cls_backward(&self.arch, &mut self.params, &cls_cache, &dlogits);
        Self::ext_backward(&self.arch, &mut self.params, &ext_cache, &dfeat);
        Ok(loss)
    }

    /// Classifier-only training step core: loss + gradients w.r.t. the
    /// classifier parameters given fixed input features.
    pub fn classifier_loss_backward(&mut self, feat: &Tensor, label: &LabelSeq) -> Result<f64> {
        let (cls_cache, logits) = Self::cls_forward(&self.arch, &self.params, feat)?;
        let lattice = LogProbLattice::from_logits(&logits);
        let loss = ctc_loss(&lattice, label)?;
        let dlogits = ctc_grad(&lattice, label)?;
        let _ = Self::cls_backward(&self.arch, &mut self.params, &cls_cache, &dlogits);
        Ok(loss)
    }

    /// Speaker cross-entropy with gradients; the extractor receives the
    /// branch gradient scaled by -lambda (gradient reversal).
    pub fn speaker_loss_backward(&mut self, x: &Tensor, speaker: usize, lambda: f64) -> Result<f64> {
        let (ext_cache, feat) = Self::ext_forward(&self.arch, &self.params, x)?;
        let (spk_cache, logits) = Self::spk_forward(&self.params, &feat);
        let (loss, dlogits) = cross_entropy_backward(&logits, speaker)?;
        let dfeat = Self::spk_backward(&mut self.params, &spk_cache, &dlogits, lambda);
        Self::ext_backward(&self.arch, &mut self.params, &ext_cache, &dfeat);
        Ok(loss)
    }

    /// Stage-1 objective: CTC on the classifier branch plus speaker
    /// cross-entropy behind gradient reversal, sharing one extractor pass.
    pub fn combined_loss_backward(
        &mut self,
        x: &Tensor,
        label: &LabelSeq,
        speaker: usize,
        lambda: f64,
    ) -> Result<StageLosses> {
        let (ext_cache, feat) = Self::ext_forward(&self.arch, &self.params, x)?;
        let (cls_cache, logits) = Self::cls_forward(&self.arch, &self.params, &feat)?;
        let lattice = LogProbLattice::from_logits(&logits);
        let asr = ctc_loss(&lattice, label)?;
        let dlogits = ctc_grad(&lattice, label)?;
        let mut dfeat = Self::cls_backward(&self.arch, &mut self.params, &cls_cache, &dlogits);

        let (spk_cache, spk_logits) = Self::spk_forward(&self.params, &feat);
        let (spk_loss, dspk_logits) = cross_entropy_backward(&spk_logits, speaker)?;
        let dfeat_spk = Self::spk_backward(&mut self.params, &spk_cache, &dspk_logits, lambda);
        for (a, &b) in dfeat.data_mut().iter_mut().zip(dfeat_spk.data()) {
            *a += b;
        }

        Self::ext_backward(&self.arch, &mut self.params, &ext_cache, &dfeat);
        Ok(StageLosses { asr, speaker: spk_loss })
    }

    /// Partition parameter names into personalization / global sets.
    pub fn partition_params(&self, strategy: PartitionStrategy) -> PartitionSpec {
        partition_names(self.params.names(), strategy)
    }
}

/// Softmax cross-entropy against a one-hot target:
/// returns (loss, dloss/dlogits).
fn cross_entropy_backward(logits: &Tensor, target: usize) -> Result<(f64, Tensor)> {
    let classes = logits.cols();
    if target >= classes {
        return Err(CoreError::InvalidData(format!(
            "target class {target} outside {classes} classes"
        )));
    }
    let lp = layers::log_softmax_fwd(logits);
    let loss = -lp.at2(0, target);
    let mut grad = Vec::with_capacity(classes);
    for j in 0..classes {
        let p = math::exp(lp.at2(0, j));
        grad.push(if j == target { p - 1.0 } else { p });
    }
    Ok((loss, Tensor::from_vec(&[1, classes], grad)?))
}

/// Name-based partitioning; decidable from prefixes alone.
pub fn partition_names<'a, I: Iterator<Item = &'a str>>(names: I, strategy: PartitionStrategy) -> PartitionSpec {
    let mut personal = BTreeSet::new();
    let mut global = BTreeSet::new();
    for name in names {
        let is_personal = match strategy {
            PartitionStrategy::AllGlobal => false,
            PartitionStrategy::NormLayers => name.contains(".ln."),
            PartitionStrategy::Extractor => name.starts_with("ext."),
        };
        if is_personal {
            personal.insert(name.to_string());
        } else {
            global.insert(name.to_string());
        }
    }
    PartitionSpec { strategy, personal, global }
}
