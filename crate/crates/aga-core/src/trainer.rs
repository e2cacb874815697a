//! End-to-end pretraining loop: encoders, grouping, losses, decoupled
//! weight-decay Adam, per-step gate updates, and ablation variants.
//!
//! A step builds one fresh tape over the whole batch: encode every pair,
//! group with the pre-update gate thresholds, accumulate the per-pair loss
//! terms, combine, backpropagate, update parameters, then move the gates
//! from the step's freshly normalized similarity matrices. Given the same
//! seed, corpus, and config, every logged number reproduces bitwise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::LabeledPair;
use crate::encoders::{encode_image, encode_text, register_encoder, EncoderConfig, EncoderParams};
use crate::error::Error;
use crate::grouping::{compute_groups, GateState};
use crate::losses::{
    bcga_attend, global_loss, grouped_crossmodal_loss, iga_loss, register_bcga, total_loss,
    BcgaParams, LossBreakdown, LossTerms, LossWeights, Temperatures,
};
use crate::rng::Rng;
use crate::tape::{Tape, Tensor};
use crate::Result;

/// Pretraining variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Grouping, IGA, cross-modal attention, adaptive gates.
    Full,
    /// Batch-level contrastive loss only; no grouping runs at all.
    GlobalOnly,
    /// Grouping and IGA without the cross-attention losses.
    NoBcga,
    /// Full pipeline with frozen thresholds.
    FixedThreshold { sigma_tg: f64, sigma_vg: f64 },
}

impl Variant {
    pub fn grouping_active(&self) -> bool {
        !matches!(self, Variant::GlobalOnly)
    }

    pub fn bcga_active(&self) -> bool {
        matches!(self, Variant::Full | Variant::FixedThreshold { .. })
    }

    pub fn gates_update(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoBcga)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::GlobalOnly => "global-only",
            Variant::NoBcga => "no-bcga",
            Variant::FixedThreshold { .. } => "fixed",
        }
    }

    /// Parameters the variant trains; everything else is untouched by the
    /// optimizer (and provably receives zero gradient).
    fn param_active(&self, name: &str) -> bool {
        match self {
            Variant::Full | Variant::FixedThreshold { .. } => true,
            Variant::NoBcga => !name.starts_with("bcga"),
            // With the global heads tied to the local heads, every encoder
            // parameter is reachable from the global loss.
            Variant::GlobalOnly => name.starts_with("encoder"),
        }
    }
}

/// Training hyperparameters and sizing.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub temps: Temperatures,
    pub weights: LossWeights,
    pub gamma_tg: f64,
    pub gamma_vg: f64,
    pub variant: Variant,
    pub seed: u64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub mix_window: usize,
    /// Emit a mid-run checkpoint every this many steps (0 = final only).
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Desk-scale defaults; converges on the synthetic corpus in minutes on
    /// one core.
    pub fn desk_default(seed: u64) -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            temps: Temperatures::default_values(),
            weights: LossWeights::default_values(),
            gamma_tg: 0.99,
            gamma_vg: 0.999,
            variant: Variant::Full,
            seed,
            hidden: 32,
            embed_dim: 16,
            mix_window: 3,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig { field: "batch_size", message: "must be >= 1".into() });
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig { field: "lr", message: "must be positive".into() });
        }
        self.temps.validate()?;
        self.weights.validate()?;
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig { field, message: "must be in [0, 1)".into() });
            }
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig { field: "weight_decay", message: "must be >= 0".into() });
        }
        if let Variant::FixedThreshold { sigma_tg, sigma_vg } = self.variant {
            for s in [sigma_tg, sigma_vg] {
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::ThresholdOutOfRange { sigma: s });
                }
            }
        }
        Ok(())
    }
}

/// All learnable parameters of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    /// Attention projections for TGV queries over PGL keys/values.
    pub bcga_l2v: BcgaParams,
    /// Attention projections for PGL queries over TGV keys/values.
    pub bcga_v2l: BcgaParams,
}

impl ModelParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        ModelParams {
            encoder: EncoderParams::init(cfg, rng),
            bcga_l2v: BcgaParams::init(cfg.embed_dim, rng),
            bcga_v2l: BcgaParams::init(cfg.embed_dim, rng),
        }
    }

    /// Canonical parameter order: encoder fields, then both BCGA blocks.
    pub fn names_and_shapes(cfg: &EncoderConfig) -> Vec<(&'static str, Vec<usize>)> {
        let d = cfg.embed_dim;
        let mut out = EncoderParams::shapes(cfg);
        out.push(("bcga_l2v.wq", vec![d, d]));
        out.push(("bcga_l2v.wk", vec![d, d]));
        out.push(("bcga_l2v.wv", vec![d, d]));
        out.push(("bcga_v2l.wq", vec![d, d]));
        out.push(("bcga_v2l.wk", vec![d, d]));
        out.push(("bcga_v2l.wv", vec![d, d]));
        out
    }

    pub fn fields(&self) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> = self.encoder.fields().into_iter().collect();
        out.extend(self.bcga_l2v.fields());
        out.extend(self.bcga_v2l.fields());
        out
    }

    pub fn fields_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::with_capacity(13);
        out.extend(self.encoder.fields_mut());
        out.extend(self.bcga_l2v.fields_mut());
        out.extend(self.bcga_v2l.fields_mut());
        out
    }

    /// Flatten all parameters into one vector (finite-difference harness).
    pub fn to_flat(&self) -> Vec<f64> {
        self.fields().iter().flat_map(|f| f.iter().copied()).collect()
    }

    /// Overwrite all parameters from a flat vector.
    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.fields().iter().map(|f| f.len()).sum();
        if flat.len() != total {
            return Err(Error::DimMismatch { what: "flat parameter vector", expected: total, actual: flat.len() });
        }
        let mut offset = 0;
        for field in self.fields_mut() {
            let n = field.len();
            field.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// First and second moment buffers, parallel to the canonical field order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.fields().iter().map(|f| vec![0.0; f.len()]).collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }
}

/// Full optimization state; everything a checkpoint must capture.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub enc_cfg: EncoderConfig,
    pub params: ModelParams,
    pub opt: AdamState,
    pub gate_tg: GateState,
    pub gate_vg: GateState,
    pub shuffle_rng: Rng,
    pub step: u64,
    /// Remaining sample schedule of the current epoch.
    pub epoch_order: Vec<usize>,
    pub cursor: usize,
}

/// Snapshot of the trainable state, enough to resume bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub enc_cfg: EncoderConfig,
    pub variant: Variant,
    pub params: ModelParams,
    pub opt: AdamState,
    pub gate_tg: GateState,
    pub gate_vg: GateState,
    pub rng_state: [u64; 4],
    pub epoch_order: Vec<usize>,
    pub cursor: usize,
}

/// A fully built forward pass over one batch: the tape, the total-loss
/// scalar, and the parameter handles in canonical order.
pub struct ForwardPass {
    pub tape: Tape,
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    pub param_handles: Vec<Tensor>,
    /// Normalized similarity matrices of the step (token direction).
    pub shat_values: Vec<Vec<f64>>,
    /// Same for the transposed (patch) direction.
    pub shat_v_values: Vec<Vec<f64>>,
}

/// Build the complete differentiable loss for one batch at fixed gate
/// thresholds. Pure in the parameters; shared by the optimizer step and the
/// finite-difference verification harness.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch(
    params: &ModelParams,
    enc_cfg: &EncoderConfig,
    temps: &Temperatures,
    weights: &LossWeights,
    variant: Variant,
    sigma_tg: f64,
    sigma_vg: f64,
    batch: &[&LabeledPair],
    step: u64,
) -> Result<ForwardPass> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let b = batch.len() as f64;
    let mut tape = Tape::new();
    let enc_vars = register_encoder(&mut tape, &params.encoder, enc_cfg)?;
    let l2v_vars = register_bcga(&mut tape, &params.bcga_l2v, enc_cfg.embed_dim)?;
    let v2l_vars = register_bcga(&mut tape, &params.bcga_v2l, enc_cfg.embed_dim)?;
    // Canonical handle order must mirror ModelParams::names_and_shapes.
    let param_handles: Vec<Tensor> = vec![
        enc_vars.patch_proj,
        enc_vars.patch_proj_bias,
        enc_vars.patch_head,
        enc_vars.patch_head_bias,
        enc_vars.token_table,
        enc_vars.token_head,
        enc_vars.token_head_bias,
        l2v_vars.wq,
        l2v_vars.wk,
        l2v_vars.wv,
        v2l_vars.wq,
        v2l_vars.wk,
        v2l_vars.wv,
    ];

    let mut img_globals = Vec::with_capacity(batch.len());
    let mut txt_globals = Vec::with_capacity(batch.len());
    let mut tf_terms = Vec::new();
    let mut vf_terms = Vec::new();
    let mut gla_terms = Vec::new();
    let mut gva_terms = Vec::new();
    let mut shat_values: Vec<Vec<f64>> = Vec::new();
    let mut shat_v_values: Vec<Vec<f64>> = Vec::new();

    for (idx, pair) in batch.iter().enumerate() {
        let mut per_pair = || -> Result<()> {
            let img = encode_image(&mut tape, &pair.image, &enc_vars, enc_cfg)?;
            let txt = encode_text(&mut tape, &pair.text, &enc_vars, enc_cfg)?;
            img_globals.push(img.global);
            txt_globals.push(txt.global);
            if variant.grouping_active() {
                let (align, groups) =
                    compute_groups(&mut tape, txt.real_tokens, img.patch_embeds, sigma_tg, sigma_vg)?;
                shat_values.push(tape.value(align.s_hat).to_vec());
                shat_v_values.push(tape.value(align.s_hat_v).to_vec());
                tf_terms.push(iga_loss(&mut tape, txt.real_tokens, groups.tgv, temps.tau2)?);
                vf_terms.push(iga_loss(&mut tape, img.patch_embeds, groups.pgl, temps.tau2)?);
                if variant.bcga_active() {
                    let u = bcga_attend(&mut tape, groups.tgv, groups.pgl, &l2v_vars)?;
                    let w = bcga_attend(&mut tape, groups.pgl, groups.tgv, &v2l_vars)?;
                    gla_terms.push(grouped_crossmodal_loss(&mut tape, groups.tgv, u, temps.tau3)?);
                    gva_terms.push(grouped_crossmodal_loss(&mut tape, groups.pgl, w, temps.tau3)?);
                }
            }
            Ok(())
        };
        per_pair().map_err(|e| match e {
            Error::NonFinite { context } => {
                Error::NonFinite { context: format!("{context} (step {step}, pair index {idx})") }
            }
            other => other,
        })?;
    }

    let imgs = tape.stack_rows(&img_globals)?;
    let txts = tape.stack_rows(&txt_globals)?;
    let l_g = global_loss(&mut tape, imgs, txts, temps.tau1)?;

    let mean_terms = |tape: &mut Tape, terms: &[Tensor]| -> Result<Tensor> {
        if terms.is_empty() {
            return Ok(tape.scalar(0.0));
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(tape.scale(acc, 1.0 / b))
    };
    let terms = LossTerms {
        l_g,
        l_tf: mean_terms(&mut tape, &tf_terms)?,
        l_vf: mean_terms(&mut tape, &vf_terms)?,
        l_gla: mean_terms(&mut tape, &gla_terms)?,
        l_gva: mean_terms(&mut tape, &gva_terms)?,
    };

    // Skipped components carry zero weight so the breakdown stays exact.
    let eff_weights = match variant {
        Variant::GlobalOnly => LossWeights { lambda1: weights.lambda1, lambda2: 0.0, lambda3: 0.0 },
        Variant::NoBcga => LossWeights { lambda1: weights.lambda1, lambda2: weights.lambda2, lambda3: 0.0 },
        _ => *weights,
    };
    let (total, breakdown) = total_loss(&mut tape, &terms, &eff_weights)?;

    if !breakdown.l_total.is_finite() {
        // Name the first pair whose component went bad.
        let mut offender = None;
        for (idx, _) in batch.iter().enumerate() {
            let bad = [&tf_terms, &vf_terms, &gla_terms, &gva_terms]
                .iter()
                .filter_map(|ts| ts.get(idx))
                .any(|&t| !tape.scalar_value(t).is_finite());
            if bad {
                offender = Some(idx);
                break;
            }
        }
        let context = match offender {
            Some(idx) => format!("total loss at step {step} (offending pair index {idx})"),
            None => format!("total loss at step {step} (global term)"),
        };
        return Err(Error::NonFinite { context });
    }

    Ok(ForwardPass { tape, total, breakdown, param_handles, shat_values, shat_v_values })
}

/// Per-step report handed to the fit observer.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo<'a> {
    pub step: u64,
    pub breakdown: &'a LossBreakdown,
    pub sigma_tg: f64,
    pub sigma_vg: f64,
    /// True when `checkpoint_every` asks for a snapshot at this step.
    pub checkpoint_due: bool,
}

impl TrainState {
    /// Fresh state: parameters from the seed's `init` substream, gates at
    /// zero (or at the fixed thresholds), step zero.
    pub fn new(config: TrainConfig, enc_cfg: EncoderConfig) -> Result<Self> {
        config.validate()?;
        enc_cfg.validate()?;
        let mut init_rng = Rng::substream(config.seed, "init");
        let params = ModelParams::init(&enc_cfg, &mut init_rng);
        let opt = AdamState::new(&params);
        let (sigma_tg0, sigma_vg0) = match config.variant {
            Variant::FixedThreshold { sigma_tg, sigma_vg } => (sigma_tg, sigma_vg),
            _ => (0.0, 0.0),
        };
        let gate_tg = GateState::new(sigma_tg0, config.gamma_tg)?;
        let gate_vg = GateState::new(sigma_vg0, config.gamma_vg)?;
        let shuffle_rng = Rng::substream(config.seed, "shuffle");
        Ok(TrainState {
            config,
            enc_cfg,
            params,
            opt,
            gate_tg,
            gate_vg,
            shuffle_rng,
            step: 0,
            epoch_order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            enc_cfg: self.enc_cfg.clone(),
            variant: self.config.variant,
            params: self.params.clone(),
            opt: self.opt.clone(),
            gate_tg: self.gate_tg.clone(),
            gate_vg: self.gate_vg.clone(),
            rng_state: self.shuffle_rng.state(),
            epoch_order: self.epoch_order.clone(),
            cursor: self.cursor,
        }
    }

    /// Rebuild a state from a checkpoint plus the run config. The config's
    /// variant and dimensions must match what was saved.
    pub fn from_checkpoint(config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        if config.variant != ckpt.variant {
            return Err(Error::InvalidConfig {
                field: "variant",
                message: format!("checkpoint was trained as {}, config says {}", ckpt.variant.name(), config.variant.name()),
            });
        }
        if config.embed_dim != ckpt.enc_cfg.embed_dim || config.hidden != ckpt.enc_cfg.hidden {
            return Err(Error::DimMismatch {
                what: "checkpoint model dims",
                expected: ckpt.enc_cfg.embed_dim,
                actual: config.embed_dim,
            });
        }
        Ok(TrainState {
            config,
            enc_cfg: ckpt.enc_cfg,
            params: ckpt.params,
            opt: ckpt.opt,
            gate_tg: ckpt.gate_tg,
            gate_vg: ckpt.gate_vg,
            shuffle_rng: Rng::from_state(ckpt.rng_state),
            step: ckpt.step,
            epoch_order: ckpt.epoch_order,
            cursor: ckpt.cursor,
        })
    }

    /// One optimization step over an explicit batch.
    pub fn train_step(&mut self, batch: &[&LabeledPair]) -> Result<LossBreakdown> {
        let mut pass = forward_batch(
            &self.params,
            &self.enc_cfg,
            &self.config.temps,
            &self.config.weights,
            self.config.variant,
            self.gate_tg.sigma(),
            self.gate_vg.sigma(),
            batch,
            self.step,
        )?;
        let variant = self.config.variant;
        let breakdown = pass.breakdown;
        let shat_values = core::mem::take(&mut pass.shat_values);
        let shat_v_values = core::mem::take(&mut pass.shat_v_values);

        pass.tape.backward(pass.total)?;

        // AdamW over active parameters, canonical order.
        let names = ModelParams::names_and_shapes(&self.enc_cfg);
        let grads: Vec<Vec<f64>> = pass.param_handles.iter().map(|&h| pass.tape.grad_or_zeros(h)).collect();
        let (lr, b1, b2, eps, wd) = (
            self.config.lr,
            self.config.beta1,
            self.config.beta2,
            self.config.adam_eps,
            self.config.weight_decay,
        );
        self.opt.t += 1;
        let t = self.opt.t;
        let bias1 = 1.0 - libm::pow(b1, t as f64);
        let bias2 = 1.0 - libm::pow(b2, t as f64);
        let fields = self.params.fields_mut();
        for (i, field) in fields.into_iter().enumerate() {
            if !variant.param_active(names[i].0) {
                continue;
            }
            let m = &mut self.opt.m[i];
            let v = &mut self.opt.v[i];
            let g = &grads[i];
            for j in 0..field.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / bias1;
                let vhat = v[j] / bias2;
                field[j] -= lr * (mhat / (libm::sqrt(vhat) + eps) + wd * field[j]);
            }
        }

        // Gates move once per step, after the update, from this step's
        // normalized matrices. Fixed and global-only variants never move.
        if variant.gates_update() {
            let refs: Vec<&[f64]> = shat_values.iter().map(|v| v.as_slice()).collect();
            self.gate_tg.update(&refs)?;
            let refs_v: Vec<&[f64]> = shat_v_values.iter().map(|v| v.as_slice()).collect();
            self.gate_vg.update(&refs_v)?;
        }

        self.step += 1;
        Ok(breakdown)
    }

    /// Number of steps in one epoch over `n` samples.
    pub fn steps_per_epoch(n: usize, batch_size: usize) -> u64 {
        (n.div_ceil(batch_size)) as u64
    }

    /// Run (or resume) the epoch loop until `config.epochs` epochs have been
    /// consumed, invoking `observer` after every step.
    pub fn fit<F>(&mut self, train: &[LabeledPair], mut observer: F) -> Result<()>
    where
        F: FnMut(&TrainState, StepInfo<'_>) -> Result<()>,
    {
        if train.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let spe = Self::steps_per_epoch(train.len(), self.config.batch_size);
        let total_steps = spe * self.config.epochs as u64;
        while self.step < total_steps {
            if self.cursor >= self.epoch_order.len() {
                let mut order: Vec<usize> = (0..train.len()).collect();
                self.shuffle_rng.shuffle(&mut order);
                self.epoch_order = order;
                self.cursor = 0;
            }
            let end = (self.cursor + self.config.batch_size).min(self.epoch_order.len());
            let batch: Vec<&LabeledPair> =
                self.epoch_order[self.cursor..end].iter().map(|&i| &train[i]).collect();
            self.cursor = end;
            let breakdown = self.train_step(&batch)?;
            let due = self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every);
            let info = StepInfo {
                step: self.step,
                breakdown: &breakdown,
                sigma_tg: self.gate_tg.sigma(),
                sigma_vg: self.gate_vg.sigma(),
                checkpoint_due: due,
            };
            observer(&*self, info)?;
        }
        Ok(())
    }
}
