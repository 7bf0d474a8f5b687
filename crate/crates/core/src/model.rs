//! The end-to-end network and training loop: conv blocks -> CBAM -> global
//! average pool -> FC trunk with dropout -> evidential head (3 Dirichlet
//! logits) in parallel with a softplus AOD regression head. Trained with
//! AdamW (decoupled weight decay), cosine-annealed learning rate, and
//! class-balanced sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::cbam::{self, CbamNodes, SPATIAL_KERNEL};
use crate::evidential::{self, DirichletOutput, LossBreakdown, LossConfig};
use crate::ops::{Activation, PoolMode};
use crate::rng::Rng;
use crate::synth::{Example, Patch};
use crate::tape::{GradTape, NodeId};
use crate::tensor::{NnError, Tensor};

pub const NUM_CLASSES: usize = 3;

/// Topology and optimizer settings, deliberately desk-scale so a full
/// training run finishes in minutes on one CPU core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    /// Output channels of the three conv blocks.
    pub conv_channels: [usize; 3],
    /// Widths of the two FC trunk layers.
    pub fc_widths: [usize; 2],
    pub dropout: f64,
    pub cbam_reduction: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment_flips: bool,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 64,
            conv_channels: [16, 32, 64],
            fc_widths: [64, 32],
            dropout: 0.4,
            cbam_reduction: 8,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 32,
            augment_flips: true,
            loss: LossConfig::default(),
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::Domain(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.patch_size < 8 || self.patch_size % 8 != 0 {
            return Err(NnError::Domain(format!(
                "patch size {} must be a positive multiple of 8 (three 2x2 pools)",
                self.patch_size
            )));
        }
        let c = self.conv_channels[2];
        if self.cbam_reduction == 0 || c % self.cbam_reduction != 0 {
            return Err(NnError::Domain(format!(
                "cbam reduction {} must divide final channel count {c}",
                self.cbam_reduction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Weight decay applies only to conv/FC weights, not biases or CBAM.
    pub decay: bool,
}

/// All trainable weights plus the config they were built for.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    params: Vec<Param>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

static FORWARD_PASSES: AtomicU64 = AtomicU64::new(0);

/// Total model forward passes executed in this process; instrumentation
/// behind the single-pass guarantee.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.load(Ordering::Relaxed)
}

fn he_tensor(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let scale = libm::sqrt(2.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal() * scale).collect()).expect("consistent")
}

impl ModelParams {
    /// He fan-in initialization, identical across all four input channels.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelParams, NnError> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = Vec::new();
        let push = |name: &str, tensor: Tensor, decay: bool, params: &mut Vec<Param>| {
            params.push(Param { name: name.into(), tensor, decay });
        };
        let [c1, c2, c3] = config.conv_channels;
        let chans = [(4, c1), (c1, c2), (c2, c3)];
        for (i, (cin, cout)) in chans.into_iter().enumerate() {
            push(
                &format!("conv{}.weight", i + 1),
                he_tensor(vec![cout, cin, 3, 3], cin * 9, &mut rng),
                true,
                &mut params,
            );
            push(&format!("conv{}.bias", i + 1), Tensor::zeros(vec![cout]), false, &mut params);
        }
        let hidden = c3 / config.cbam_reduction;
        push("cbam.mlp_w1", he_tensor(vec![hidden, c3], c3, &mut rng), false, &mut params);
        push("cbam.mlp_w2", he_tensor(vec![c3, hidden], hidden, &mut rng), false, &mut params);
        push(
            "cbam.spatial_kernel",
            he_tensor(vec![1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL], 2 * SPATIAL_KERNEL * SPATIAL_KERNEL, &mut rng),
            false,
            &mut params,
        );
        push("cbam.spatial_bias", Tensor::zeros(vec![1]), false, &mut params);
        let [f1, f2] = config.fc_widths;
        push("fc1.weight", he_tensor(vec![f1, c3], c3, &mut rng), true, &mut params);
        push("fc1.bias", Tensor::zeros(vec![f1]), false, &mut params);
        push("fc2.weight", he_tensor(vec![f2, f1], f1, &mut rng), true, &mut params);
        push("fc2.bias", Tensor::zeros(vec![f2]), false, &mut params);
        push("evid.weight", he_tensor(vec![NUM_CLASSES, f2], f2, &mut rng), true, &mut params);
        push("evid.bias", Tensor::zeros(vec![NUM_CLASSES]), false, &mut params);
        push("aod.weight", he_tensor(vec![1, f2], f2, &mut rng), true, &mut params);
        push("aod.bias", Tensor::zeros(vec![1]), false, &mut params);
        Ok(ModelParams { config, params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.params.iter().map(|p| &p.tensor).collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    /// Rebuild from (name, tensor) pairs in declared order; shapes must
    /// match the config exactly.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<ModelParams, NnError> {
        let reference = ModelParams::init(config.clone(), 0)?;
        if tensors.len() != reference.params.len() {
            return Err(NnError::Shape(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(tensors.len());
        for (r, (name, tensor)) in reference.params.into_iter().zip(tensors) {
            if r.name != name {
                return Err(NnError::Shape(format!(
                    "parameter order mismatch: expected {}, got {name}",
                    r.name
                )));
            }
            if r.tensor.shape() != tensor.shape() {
                return Err(NnError::Shape(format!(
                    "parameter {name} shape {:?}, expected {:?}",
                    tensor.shape(),
                    r.tensor.shape()
                )));
            }
            params.push(Param { name, tensor, decay: r.decay });
        }
        Ok(ModelParams { config, params })
    }
}

/// Tape node ids of all forward outputs of interest.
struct ForwardNodes {
    alpha: NodeId,
    aod: NodeId,
    channel_gates: NodeId,
    spatial_map: NodeId,
    param_ids: Vec<NodeId>,
}

/// Records the full forward pass on the tape. `dropout_rng` enables
/// training-mode dropout; None gives the deterministic eval path.
fn forward_on_tape(
    tape: &mut GradTape,
    patch: &Patch,
    model: &ModelParams,
    dropout_rng: Option<&mut Rng>,
) -> Result<ForwardNodes, NnError> {
    let cfg = &model.config;
    if patch.size != cfg.patch_size {
        return Err(NnError::Shape(format!(
            "patch size {} does not match configured {}",
            patch.size, cfg.patch_size
        )));
    }
    FORWARD_PASSES.fetch_add(1, Ordering::Relaxed);

    let param_ids: Vec<NodeId> = model
        .params
        .iter()
        .map(|p| tape.leaf(p.tensor.clone()))
        .collect::<Result<_, _>>()?;
    let id = |name: &str| -> NodeId {
        let i = model.params.iter().position(|p| p.name == name).expect("known name");
        param_ids[i]
    };

    let mut x = tape.leaf(patch.to_tensor())?;
    for i in 1..=3 {
        let c = tape.conv2d(x, id(&format!("conv{i}.weight")), id(&format!("conv{i}.bias")), 1, 1)?;
        let a = tape.activation(c, Activation::Relu)?;
        x = tape.max_pool2(a)?;
    }
    let cbam_nodes = CbamNodes {
        mlp_w1: id("cbam.mlp_w1"),
        mlp_w2: id("cbam.mlp_w2"),
        spatial_kernel: id("cbam.spatial_kernel"),
        spatial_bias: id("cbam.spatial_bias"),
    };
    let attended = cbam::apply_on_tape(tape, x, &cbam_nodes)?;
    let mut h = tape.pool(attended.output, PoolMode::GlobalAvg)?;

    let mut dropout_rng = dropout_rng;
    for i in 1..=2 {
        let z = tape.linear(h, id(&format!("fc{i}.weight")), id(&format!("fc{i}.bias")))?;
        h = tape.activation(z, Activation::Relu)?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            if cfg.dropout > 0.0 {
                h = tape.dropout(h, cfg.dropout, rng)?;
            }
        }
    }
    let logits = tape.linear(h, id("evid.weight"), id("evid.bias"))?;
    let sp = tape.activation(logits, Activation::Softplus)?;
    let alpha = tape.add_const(sp, 1.0)?;
    let aod_raw = tape.linear(h, id("aod.weight"), id("aod.bias"))?;
    let aod = tape.activation(aod_raw, Activation::Softplus)?;
    Ok(ForwardNodes {
        alpha,
        aod,
        channel_gates: attended.channel_gates,
        spatial_map: attended.spatial_map,
        param_ids,
    })
}

/// Eval-mode forward pass (no dropout, deterministic).
pub fn forward(patch: &Patch, model: &ModelParams) -> Result<DirichletOutput, NnError> {
    let mut tape = GradTape::new();
    let nodes = forward_on_tape(&mut tape, patch, model, None)?;
    DirichletOutput::from_alpha(
        tape.value(nodes.alpha).data().to_vec(),
        tape.value(nodes.aod).item(),
    )
}

/// Forward pass that also returns the CBAM artifacts for visualization:
/// (output, channel gates, spatial map as 1 x H x W).
pub fn forward_with_attention(
    patch: &Patch,
    model: &ModelParams,
) -> Result<(DirichletOutput, Vec<f64>, Tensor), NnError> {
    let mut tape = GradTape::new();
    let nodes = forward_on_tape(&mut tape, patch, model, None)?;
    let out = DirichletOutput::from_alpha(
        tape.value(nodes.alpha).data().to_vec(),
        tape.value(nodes.aod).item(),
    )?;
    Ok((
        out,
        tape.value(nodes.channel_gates).data().to_vec(),
        tape.value(nodes.spatial_map).clone(),
    ))
}

/// Order-preserving eval of a batch; exactly one forward pass per patch.
pub fn predict_batch(patches: &[Patch], model: &ModelParams) -> Result<Vec<DirichletOutput>, NnError> {
    let before = forward_pass_count();
    let out: Result<Vec<_>, _> = patches.iter().map(|p| forward(p, model)).collect();
    let out = out?;
    debug_assert_eq!(forward_pass_count() - before, patches.len() as u64);
    Ok(out)
}

/// Builds the full objective for one example on a fresh tape and returns
/// (loss value, loss breakdown, gradients aligned with model params).
fn loss_and_grads(
    model: &ModelParams,
    patch: &Patch,
    target: &[f64; NUM_CLASSES],
    aod_true: f64,
    epoch: usize,
    class_weights: Option<&[f64]>,
    dropout_rng: Option<&mut Rng>,
) -> Result<(LossBreakdown, Vec<Tensor>), NnError> {
    let cfg = &model.config.loss;
    let mut tape = GradTape::new();
    let nodes = forward_on_tape(&mut tape, patch, model, dropout_rng)?;
    let edl = tape.edl_loss(nodes.alpha, target, cfg.include_variance_term)?;
    let kl = tape.kl_loss(nodes.alpha, target)?;
    let anneal = evidential::anneal_coefficient(epoch, cfg.kl_ramp_epochs);
    let kl_scaled = tape.scale_const(kl, anneal * cfg.lambda_kl)?;
    let aod = tape.squared_error(nodes.aod, aod_true)?;
    let aod_scaled = tape.scale_const(aod, cfg.lambda_aod)?;
    let mut total = tape.add(edl, kl_scaled)?;
    total = tape.add(total, aod_scaled)?;
    if cfg.ce_weight > 0.0 {
        let weights = class_weights.ok_or_else(|| {
            NnError::Domain("ce_weight > 0 requires class weights".into())
        })?;
        let ce = tape.ce_loss(nodes.alpha, target, weights)?;
        let ce_scaled = tape.scale_const(ce, cfg.ce_weight)?;
        total = tape.add(total, ce_scaled)?;
    }
    let grads = tape.backward(total)?;
    let breakdown = LossBreakdown {
        edl: tape.value(edl).item(),
        kl: tape.value(kl).item(),
        aod: tape.value(aod).item(),
        anneal_coeff: anneal,
        total: tape.value(total).item(),
    };
    let param_grads = nodes.param_ids.iter().map(|&i| grads[i].clone()).collect();
    Ok((breakdown, param_grads))
}

/// Cosine-annealed learning rate: lr(0) = lr_max, decaying to ~0 at the
/// final epoch.
pub fn cosine_lr(lr_max: f64, epoch: usize, epochs: usize) -> f64 {
    let denom = (epochs.saturating_sub(1)).max(1) as f64;
    let t = (epoch as f64 / denom).min(1.0);
    0.5 * lr_max * (1.0 + libm::cos(core::f64::consts::PI * t))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub edl: f64,
    pub kl: f64,
    pub aod: f64,
    pub total: f64,
    pub learning_rate: f64,
}

struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    fn new(params: &[Param]) -> Self {
        AdamW {
            m: params.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn update(&mut self, params: &mut [Param], grads: &[Tensor], lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let decay = if p.decay { weight_decay } else { 0.0 };
            let data = p.tensor.data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * (m_hat / (libm::sqrt(v_hat) + self.eps) + decay * data[j]);
            }
        }
    }
}

/// Inverse-frequency class weights normalized to mean 1 over present classes.
fn inverse_frequency_weights(examples: &[Example]) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for e in examples {
        counts[e.label.class.index()] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let n = examples.len() as f64;
    let mut w = [0.0; NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        if counts[k] > 0 {
            w[k] = n / (present * counts[k] as f64);
        }
    }
    w
}

/// Trains from a fresh initialization; fully deterministic given the
/// config seed. Aborts with diagnostics on a non-finite loss.
pub fn train(examples: &[Example], config: ModelConfig) -> Result<(ModelParams, Vec<EpochStats>), NnError> {
    config.validate()?;
    let classes_present = {
        let mut seen = [false; NUM_CLASSES];
        for e in examples {
            seen[e.label.class.index()] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if examples.is_empty() || classes_present < 2 {
        return Err(NnError::Domain(format!(
            "training needs a nonempty set with >= 2 classes, got {} examples / {classes_present} classes",
            examples.len()
        )));
    }

    let mut model = ModelParams::init(config.clone(), config.seed)?;
    let mut optimizer = AdamW::new(&model.params);
    let labels: Vec<_> = examples.iter().map(|e| e.label.class).collect();
    let mut sampler = crate::synth::WeightedSampler::new(&labels, config.seed ^ 0x5a5a)?;
    let mut dropout_rng = Rng::new(config.seed ^ 0xd20);
    let mut augment_rng = Rng::new(config.seed ^ 0xa06);
    let class_weights = inverse_frequency_weights(examples);

    let batches_per_epoch = examples.len().div_ceil(config.batch_size).max(1);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.learning_rate, epoch, config.epochs);
        let mut sums = (0.0, 0.0, 0.0, 0.0); // edl, kl, aod, total
        let mut samples_seen = 0usize;
        for batch in 0..batches_per_epoch {
            let mut grad_acc: Vec<Tensor> =
                model.params.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect();
            let mut batch_total = 0.0;
            for _ in 0..config.batch_size {
                let idx = sampler.next_index();
                let e = &examples[idx];
                let mut patch = e.patch.clone();
                if config.augment_flips {
                    if augment_rng.bernoulli(0.5) {
                        patch = patch.flip_horizontal();
                    }
                    if augment_rng.bernoulli(0.5) {
                        patch = patch.flip_vertical();
                    }
                }
                let target = e.label.class.one_hot();
                let (breakdown, grads) = loss_and_grads(
                    &model,
                    &patch,
                    &target,
                    e.label.pseudo_aod,
                    epoch,
                    Some(&class_weights),
                    Some(&mut dropout_rng),
                )
                .map_err(|err| {
                    NnError::NonFinite(format!(
                        "training aborted at epoch {epoch}, batch {batch}: {err}"
                    ))
                })?;
                if !breakdown.total.is_finite() {
                    return Err(NnError::NonFinite(format!(
                        "NaN loss at epoch {epoch}, batch {batch}"
                    )));
                }
                for (acc, g) in grad_acc.iter_mut().zip(&grads) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                sums.0 += breakdown.edl;
                sums.1 += breakdown.kl;
                sums.2 += breakdown.aod;
                sums.3 += breakdown.total;
                batch_total += breakdown.total;
                samples_seen += 1;
            }
            let _ = batch_total;
            let scale = 1.0 / config.batch_size as f64;
            for g in &mut grad_acc {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            optimizer.update(&mut model.params, &grad_acc, lr, config.weight_decay);
        }
        let n = samples_seen.max(1) as f64;
        history.push(EpochStats {
            epoch,
            edl: sums.0 / n,
            kl: sums.1 / n,
            aod: sums.2 / n,
            total: sums.3 / n,
            learning_rate: lr,
        });
    }
    Ok((model, history))
}

/// End-to-end finite-difference gradient check on `n_samples` randomly
/// chosen parameter coordinates, using one example's full objective.
pub fn gradient_check(
    model: &ModelParams,
    example: &Example,
    n_samples: usize,
    epsilon: f64,
    seed: u64,
) -> Result<f64, NnError> {
    let mut rng = Rng::new(seed);
    let mut coords = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let pi = rng.index(model.params.len());
        let ei = rng.index(model.params[pi].tensor.len());
        coords.push((pi, ei));
    }
    let mut tensors: Vec<Tensor> = model.params.iter().map(|p| p.tensor.clone()).collect();
    let config = model.config.clone();
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let target = example.label.class.one_hot();
    crate::tape::finite_diff_check(
        &mut tensors,
        |ts| {
            let pairs: Vec<(String, Tensor)> =
                names.iter().cloned().zip(ts.iter().cloned()).collect();
            let m = ModelParams::from_tensors(config.clone(), pairs)?;
            let (breakdown, grads) = loss_and_grads(
                &m,
                &example.patch,
                &target,
                example.label.pseudo_aod,
                m.config.loss.kl_ramp_epochs, // fully annealed so KL participates
                None,
                None,
            )?;
            Ok((breakdown.total, grads))
        },
        &coords,
        epsilon,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::Severity;
    use crate::synth::{synthesize_dataset, DatasetSpec, LabelMode};
    use approx::assert_relative_eq;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            patch_size: 16,
            conv_channels: [4, 6, 8],
            fc_widths: [12, 8],
            cbam_reduction: 2,
            epochs: 2,
            batch_size: 4,
            ..ModelConfig::default()
        }
    }

    fn tiny_dataset(n: usize, margin: f64, seed: u64) -> Vec<Example> {
        synthesize_dataset(&DatasetSpec {
            n_patches: n,
            tau_margin: margin,
            patch_size: 16,
            seed,
            label_mode: LabelMode::Oracle,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let ds = tiny_dataset(3, 0.2, 1);
        let model = ModelParams::init(tiny_config(), 5).unwrap();
        let a = forward(&ds[0].patch, &model).unwrap();
        let b = forward(&ds[0].patch, &model).unwrap();
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.aod_pred.to_bits(), b.aod_pred.to_bits());
    }

    #[test]
    fn zeroed_final_layer_gives_uniform_evidence() {
        let ds = tiny_dataset(1, 0.2, 2);
        let mut model = ModelParams::init(tiny_config(), 5).unwrap();
        for name in ["evid.weight", "evid.bias"] {
            for v in model.tensor_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let out = forward(&ds[0].patch, &model).unwrap();
        let a0 = 1.0 + core::f64::consts::LN_2;
        for a in &out.alpha {
            assert_relative_eq!(*a, a0, epsilon = 1e-12);
        }
        // vacuity = K / (K * (1 + ln 2)) = 1 / (1 + ln 2)
        assert_relative_eq!(out.vacuity, 1.0 / a0, epsilon = 1e-12);
        assert_relative_eq!(out.vacuity, 0.590616, epsilon = 1e-6);
    }

    #[test]
    fn forward_output_invariants_fuzz() {
        let ds = tiny_dataset(40, 0.05, 3);
        let model = ModelParams::init(tiny_config(), 9).unwrap();
        for e in &ds {
            let out = forward(&e.patch, &model).unwrap();
            assert!(out.alpha.iter().all(|&a| a > 1.0));
            let s: f64 = out.alpha.iter().sum();
            assert_relative_eq!(out.total_evidence, s, epsilon = 1e-12);
            assert_relative_eq!(out.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(out.vacuity > 0.0 && out.vacuity <= 1.0);
            assert!(out.dissonance >= 0.0 && out.dissonance < 1.0);
            assert!(out.aod_pred >= 0.0);
        }
    }

    #[test]
    fn predict_batch_matches_forward_and_counts_passes() {
        let ds = tiny_dataset(6, 0.2, 4);
        let model = ModelParams::init(tiny_config(), 5).unwrap();
        let patches: Vec<_> = ds.iter().map(|e| e.patch.clone()).collect();
        let before = forward_pass_count();
        let outs = predict_batch(&patches, &model).unwrap();
        assert_eq!(forward_pass_count() - before, patches.len() as u64);
        assert_eq!(outs.len(), patches.len());
        for (o, p) in outs.iter().zip(&patches) {
            let direct = forward(p, &model).unwrap();
            assert_eq!(o.alpha, direct.alpha);
        }
        assert!(predict_batch(&[], &model).unwrap().is_empty());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        for epochs in [2usize, 5, 10, 20, 60] {
            assert_relative_eq!(cosine_lr(1e-3, 0, epochs), 1e-3, epsilon = 1e-15);
            assert!(cosine_lr(1e-3, epochs - 1, epochs) <= 0.01 * 1e-3);
        }
    }

    #[test]
    fn zero_learning_rate_freezes_params() {
        let ds = tiny_dataset(12, 0.2, 5);
        let mut cfg = tiny_config();
        cfg.learning_rate = 0.0;
        let init = ModelParams::init(cfg.clone(), cfg.seed).unwrap();
        let (trained, history) = train(&ds, cfg).unwrap();
        for (a, b) in init.tensors().iter().zip(trained.tensors()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(history.len(), 2);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let ds = tiny_dataset(12, 0.2, 6);
        let cfg = tiny_config();
        let (a, ha) = train(&ds, cfg.clone()).unwrap();
        let (b, hb) = train(&ds, cfg).unwrap();
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        assert_eq!(ha.len(), hb.len());
        for (x, y) in ha.iter().zip(&hb) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
    }

    #[test]
    fn loss_components_nonnegative_every_epoch() {
        let ds = tiny_dataset(16, 0.2, 7);
        let (_, history) = train(&ds, tiny_config()).unwrap();
        for h in &history {
            assert!(h.edl >= 0.0 && h.kl >= 0.0 && h.aod >= 0.0 && h.total >= 0.0);
        }
    }

    #[test]
    fn train_rejects_single_class() {
        let ds: Vec<Example> = tiny_dataset(20, 0.2, 8)
            .into_iter()
            .filter(|e| e.label.class == Severity::Light)
            .collect();
        assert!(train(&ds, tiny_config()).is_err());
        assert!(train(&[], tiny_config()).is_err());
    }

    #[test]
    fn separable_task_is_learned() {
        // two widely separated tau bands, small model, few epochs
        let mut ds = Vec::new();
        for seed in [31u64, 32] {
            ds.extend(tiny_dataset(100, 0.45, seed));
        }
        let ds: Vec<Example> = ds
            .into_iter()
            .filter(|e| e.label.class != Severity::Moderate)
            .take(120)
            .collect();
        let mut cfg = tiny_config();
        cfg.epochs = 10;
        cfg.dropout = 0.1;
        cfg.learning_rate = 5e-3;
        let (model, _) = train(&ds, cfg).unwrap();
        let correct = ds
            .iter()
            .filter(|e| {
                forward(&e.patch, &model).unwrap().predicted_class() == e.label.class.index()
            })
            .count();
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.95, "train accuracy {acc}");
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let ds = tiny_dataset(2, 0.2, 9);
        let model = ModelParams::init(tiny_config(), 11).unwrap();
        let err = gradient_check(&model, &ds[0], 40, 1e-5, 13).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.cbam_reduction = 3; // does not divide 8
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.patch_size = 20;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip_through_tensor_list() {
        let model = ModelParams::init(tiny_config(), 5).unwrap();
        let pairs: Vec<(String, Tensor)> = model
            .names()
            .iter()
            .map(|n| (n.to_string(), model.tensor(n).unwrap().clone()))
            .collect();
        let rebuilt = ModelParams::from_tensors(tiny_config(), pairs).unwrap();
        for (a, b) in model.tensors().iter().zip(rebuilt.tensors()) {
            assert_eq!(a.data(), b.data());
        }
        // wrong config is rejected
        let mut other = tiny_config();
        other.conv_channels = [4, 6, 10];
        let pairs: Vec<(String, Tensor)> = model
            .names()
            .iter()
            .map(|n| (n.to_string(), model.tensor(n).unwrap().clone()))
            .collect();
        assert!(ModelParams::from_tensors(other, pairs).is_err());
    }
}
