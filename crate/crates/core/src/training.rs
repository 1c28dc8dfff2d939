//! Dual-loss transition-aware training.
//!
//! Stage 1 trains the projection, encoder, and classifier with the
//! current-frame loss only (the baseline model). Stage 2 attaches the NFSM —
//! forecasting blocks, dynamic-embedding head, global state embeddings — and
//! continues with the weighted sum of the current-frame loss and the
//! transition loss over all `n + m` context positions. With
//! `freeze_backbone` set, stage 2 updates only the NFSM parameter groups.

use crate::backbone::{
    baseline_probs, encode_history, forecast, head_current_probs, head_dynamic_embeddings,
    pad_pseudo_future, BoundModel, ModelConfig, ModelParams, ParamTensor, WindowSample,
};
use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nfsm::transition_prob_set;
use crate::tensor::{cross_entropy, cross_entropy_indexed, Tape, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate_stage1: f64,
    pub learning_rate_stage2: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Transition-loss weight in the total loss.
    pub alpha: f64,
    pub batch_size: usize,
    /// Stage 2 updates only the NFSM groups when set.
    pub freeze_backbone: bool,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate_stage1 <= 0.0 || self.learning_rate_stage2 < 0.0 {
            return Err(Error::Config(format!(
                "learning rates must be positive, got {} / {}",
                self.learning_rate_stage1, self.learning_rate_stage2
            )));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("adam epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Defaults for the synth-7 benchmark. Stage 2 keeps the stage-1 rate:
    /// the freshly attached NFSM starts from random init and a desk-scale
    /// epoch budget cannot move it at a fine-tuning rate.
    pub fn synth7() -> TrainConfig {
        TrainConfig {
            learning_rate_stage1: 1e-3,
            learning_rate_stage2: 1e-3,
            epochs_stage1: 3,
            epochs_stage2: 4,
            alpha: 1.0,
            batch_size: 32,
            freeze_backbone: false,
            seed: 1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Current-frame loss: cross entropy of the predicted distribution against
/// the one-hot ground truth.
pub fn loss_current(p_hat: &Tensor, onehot: &Tensor) -> Tensor {
    cross_entropy(p_hat, onehot)
}

/// Transition loss: mean cross entropy of the `n + m` transition-state
/// probability rows against the context labels.
pub fn loss_trans(p_set: &Tensor, labels: &[usize]) -> Tensor {
    let shape = p_set.shape();
    assert_eq!(shape.len(), 2, "p_set must be [positions, s], got {shape:?}");
    assert_eq!(
        shape[0],
        labels.len(),
        "p_set has {} rows but {} labels given",
        shape[0],
        labels.len()
    );
    let mut acc: Option<Tensor> = None;
    for (i, &y) in labels.iter().enumerate() {
        let ce = cross_entropy_indexed(&p_set.index_axis0(i), y);
        acc = Some(match acc {
            Some(a) => a.add(&ce),
            None => ce,
        });
    }
    acc.unwrap().scale(1.0 / labels.len() as f64)
}

/// Weighted total: `L_c + alpha * L_trans`.
pub fn total_loss(lc: &Tensor, lt: &Tensor, alpha: f64) -> Tensor {
    lc.add(&lt.scale(alpha))
}

/// Stage-2 online forward over one window: encode history, pad pseudo-future,
/// forecast, both heads.
pub fn nfsm_forward_online(
    model: &BoundModel,
    cfg: &ModelConfig,
    window_feats: &Tensor,
) -> (Tensor, Tensor) {
    let nfsm = model.nfsm.as_ref().expect("NFSM heads not attached");
    let enc = encode_history(model, cfg, window_feats);
    let combined = pad_pseudo_future(&enc, cfg.m);
    let fo = forecast(nfsm, &combined);
    let p_hat = head_current_probs(model, cfg, &fo);
    let e_dt = head_dynamic_embeddings(nfsm, cfg, &fo);
    (p_hat, e_dt)
}

/// Offline forward: the `n + m` rows are real encoded frames (the window plus
/// the actual future, right-padded near the video end); no duplication.
pub fn nfsm_forward_offline(
    model: &BoundModel,
    cfg: &ModelConfig,
    full_feats: &Tensor,
) -> (Tensor, Tensor) {
    let nfsm = model.nfsm.as_ref().expect("NFSM heads not attached");
    assert_eq!(full_feats.shape()[0], cfg.n + cfg.m);
    let enc = encode_history(model, cfg, full_feats);
    let fo = forecast(nfsm, &enc);
    let p_hat = head_current_probs(model, cfg, &fo);
    let e_dt = head_dynamic_embeddings(nfsm, cfg, &fo);
    (p_hat, e_dt)
}

/// Adaptive-moment optimizer with bias correction.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(tcfg: &TrainConfig, lr: f64, params: &[&ParamTensor]) -> Adam {
        Adam {
            lr,
            beta1: tcfg.beta1,
            beta2: tcfg.beta2,
            epsilon: tcfg.epsilon,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// One update. `frozen[i]` skips parameter `i` entirely, leaving both the
    /// value and the moments bitwise untouched.
    pub fn step(&mut self, params: &mut [&mut ParamTensor], grads: &[Vec<f64>], frozen: &[bool]) {
        assert_eq!(params.len(), self.m.len(), "optimizer state size mismatch");
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), frozen.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if frozen[i] {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let value = &mut params[i].value;
            for j in 0..value.len() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Baseline,
    Nfsm,
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss_current: f64,
    pub loss_trans: Option<f64>,
    pub total: f64,
}

fn onehot(tape: &Tape, s: usize, hot: usize) -> Tensor {
    let mut data = vec![0.0; s];
    data[hot] = 1.0;
    tape.leaf(data, &[s])
}

/// Forward/backward over one batch and one optimizer update. Mean total loss
/// over the batch; gradients accumulate window by window in batch order.
pub fn train_step(
    model: &mut ModelParams,
    batch: &[WindowSample],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    stage: Stage,
    opt: &mut Adam,
) -> Result<StepStats> {
    assert!(!batch.is_empty(), "empty batch");
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let inv = 1.0 / batch.len() as f64;
    let mut total_acc: Option<Tensor> = None;
    let mut lc_sum = 0.0;
    let mut lt_sum = 0.0;
    for w in batch {
        let feats = tape.leaf(w.features.clone(), &[cfg.n, cfg.feat_dim]);
        let window_loss = match stage {
            Stage::Baseline => {
                let enc = encode_history(&bound, cfg, &feats);
                let p = baseline_probs(&bound, cfg, &enc);
                let lc = loss_current(&p, &onehot(&tape, cfg.s, w.current_label));
                lc_sum += lc.item();
                lc
            }
            Stage::Nfsm => {
                let (p_hat, e_dt) = nfsm_forward_online(&bound, cfg, &feats);
                let lc = loss_current(&p_hat, &onehot(&tape, cfg.s, w.current_label));
                let e_g = &bound.nfsm.as_ref().unwrap().e_g;
                let p_set = transition_prob_set(&e_dt, e_g, &p_hat);
                let lt = loss_trans(&p_set, &w.context_labels);
                lc_sum += lc.item();
                lt_sum += lt.item();
                total_loss(&lc, &lt, tcfg.alpha)
            }
        };
        total_acc = Some(match total_acc {
            Some(acc) => acc.add(&window_loss),
            None => window_loss,
        });
    }
    let batch_loss = total_acc.unwrap().scale(inv);
    let total = batch_loss.item();
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite batch loss {total}; aborting step"
        )));
    }
    batch_loss.backward();

    let tensors = bound.tensors();
    let grads: Vec<Vec<f64>> = tensors
        .iter()
        .map(|t| t.grad().expect("gradient missing after backward"))
        .collect();
    let mut params = model.params_mut();
    let frozen: Vec<bool> = params
        .iter()
        .map(|p| {
            tcfg.freeze_backbone && stage == Stage::Nfsm && !p.name.starts_with("nfsm.")
        })
        .collect();
    opt.step(&mut params, &grads, &frozen);

    Ok(StepStats {
        loss_current: lc_sum * inv,
        loss_trans: match stage {
            Stage::Baseline => None,
            Stage::Nfsm => Some(lt_sum * inv),
        },
        total,
    })
}

/// A full training run: the stage-1 checkpoint, the final checkpoint, and
/// the per-step loss log.
pub struct TrainOutcome {
    pub stage1: Checkpoint,
    pub final_ckpt: Checkpoint,
    pub log: Vec<String>,
}

fn shuffle_rng(seed: u64, stage: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03),
    )
}

/// Every frame of every video yields one window per epoch, shuffled by seed.
fn epoch_windows(dataset: &Dataset, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut windows: Vec<(usize, usize)> = dataset
        .videos
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| (0..v.frames.len()).map(move |t| (vi, t)))
        .collect();
    windows.shuffle(rng);
    windows
}

fn run_stage(
    model: &mut ModelParams,
    stage: Stage,
    epochs: usize,
    lr: f64,
    dataset: &Dataset,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    step: &mut u64,
    log: &mut Vec<String>,
) -> Result<ChaCha8Rng> {
    let stage_tag = match stage {
        Stage::Baseline => 1u64,
        Stage::Nfsm => 2u64,
    };
    let mut opt = Adam::new(tcfg, lr, &model.params());
    let mut rng = shuffle_rng(tcfg.seed, stage_tag, 0);
    for epoch in 0..epochs {
        rng = shuffle_rng(tcfg.seed, stage_tag, epoch as u64);
        let windows = epoch_windows(dataset, &mut rng);
        for chunk in windows.chunks(tcfg.batch_size) {
            let batch: Vec<WindowSample> = chunk
                .iter()
                .map(|&(vi, t)| WindowSample::from_video(&dataset.videos[vi], t, cfg))
                .collect();
            let stats = train_step(model, &batch, cfg, tcfg, stage, &mut opt)?;
            *step += 1;
            let lt_col = match stats.loss_trans {
                Some(v) => format!("{v:.6}"),
                None => "-".to_string(),
            };
            log.push(format!(
                "{} {} {:.6} {} {:.6}",
                stage_tag, step, stats.loss_current, lt_col, stats.total
            ));
        }
    }
    Ok(rng)
}

/// Two-stage protocol: stage 1 with the current-frame loss only, then attach
/// the NFSM and continue with the total loss. Deterministic given the
/// dataset bytes and both configs.
pub fn train(dataset: &Dataset, cfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if dataset.videos.is_empty() {
        return Err(Error::Argument("training dataset is empty".into()));
    }
    if dataset.spec.feat_dim != cfg.feat_dim {
        return Err(Error::Config(format!(
            "dataset feat_dim {} does not match model feat_dim {}",
            dataset.spec.feat_dim, cfg.feat_dim
        )));
    }
    if dataset.spec.num_phases != cfg.s {
        return Err(Error::Config(format!(
            "dataset has {} phases but model expects {}",
            dataset.spec.num_phases, cfg.s
        )));
    }
    let mut model = ModelParams::init_stage1(cfg);
    let mut step = 0u64;
    let mut log = Vec::new();
    let rng1 = run_stage(
        &mut model,
        Stage::Baseline,
        tcfg.epochs_stage1,
        tcfg.learning_rate_stage1,
        dataset,
        cfg,
        tcfg,
        &mut step,
        &mut log,
    )?;
    let stage1 = Checkpoint::from_model(cfg, &model, 1, step, &rng1);

    model.attach_nfsm(cfg);
    let rng2 = run_stage(
        &mut model,
        Stage::Nfsm,
        tcfg.epochs_stage2,
        tcfg.learning_rate_stage2,
        dataset,
        cfg,
        tcfg,
        &mut step,
        &mut log,
    )?;
    let final_ckpt = Checkpoint::from_model(cfg, &model, 2, step, &rng2);

    Ok(TrainOutcome {
        stage1,
        final_ckpt,
        log,
    })
}

/// Continue training from an existing model (used by the ablation ladder to
/// branch finetune/freeze runs off one shared stage-1 model).
pub fn train_stage2_from(
    mut model: ModelParams,
    start_step: u64,
    dataset: &Dataset,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<String>)> {
    if !model.has_nfsm() {
        model.attach_nfsm(cfg);
    }
    let mut step = start_step;
    let mut log = Vec::new();
    let rng = run_stage(
        &mut model,
        Stage::Nfsm,
        tcfg.epochs_stage2,
        tcfg.learning_rate_stage2,
        dataset,
        cfg,
        tcfg,
        &mut step,
        &mut log,
    )?;
    Ok((Checkpoint::from_model(cfg, &model, 2, step, &rng), log))
}

/// Flatten every parameter (in [`ModelParams::params`] order) into one
/// vector; used by the finite-difference checks.
pub fn flatten_params(model: &ModelParams) -> Vec<f64> {
    model
        .params()
        .iter()
        .flat_map(|p| p.value.iter().copied())
        .collect()
}

pub fn set_flat_params(model: &mut ModelParams, flat: &[f64]) {
    let mut off = 0;
    for p in model.params_mut() {
        let len = p.value.len();
        p.value.copy_from_slice(&flat[off..off + len]);
        off += len;
    }
    assert_eq!(off, flat.len(), "flat vector length mismatch");
}

/// Named coordinate ranges of the flattened parameter vector.
pub fn param_ranges(model: &ModelParams) -> Vec<(String, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    let mut off = 0;
    for p in model.params() {
        out.push((p.name.clone(), off..off + p.value.len()));
        off += p.value.len();
    }
    out
}

/// Full NFSM training loss for one window, returning the value and the
/// flattened gradient. The closure used by the gradient-correctness suite.
pub fn window_loss_and_grad(
    model: &ModelParams,
    cfg: &ModelConfig,
    window: &WindowSample,
    alpha: f64,
) -> (f64, Vec<f64>) {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let feats = tape.leaf(window.features.clone(), &[cfg.n, cfg.feat_dim]);
    let (p_hat, e_dt) = nfsm_forward_online(&bound, cfg, &feats);
    let lc = loss_current(&p_hat, &onehot(&tape, cfg.s, window.current_label));
    let e_g = &bound.nfsm.as_ref().unwrap().e_g;
    let p_set = transition_prob_set(&e_dt, e_g, &p_hat);
    let lt = loss_trans(&p_set, &window.context_labels);
    let loss = total_loss(&lc, &lt, alpha);
    loss.backward();
    let grad = bound
        .tensors()
        .iter()
        .flat_map(|t| t.grad().expect("gradient missing"))
        .collect();
    (loss.item(), grad)
}
