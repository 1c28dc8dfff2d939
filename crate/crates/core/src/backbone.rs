//! Windowed attention backbone.
//!
//! A window of the last `n` frames is projected to `d` dims, position-coded,
//! and passed through one self-attention encoder block. For online operation
//! the current frame's embedding is duplicated `m` times as pseudo-future
//! rows; two further attention blocks (the forecasting stack) mix the
//! combined `n + m` rows. Two heads read the result: a classifier over the
//! pooled history positions and a per-position dynamic-embedding head.

use crate::error::{Error, Result};
use crate::sim::VideoSequence;
use crate::tensor::{scaled_dot_attention, Tape, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Variance floor inside row normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// History window length in frames.
    pub n: usize,
    /// Future horizon in frames.
    pub m: usize,
    /// Embedding width.
    pub d: usize,
    /// Number of phases.
    pub s: usize,
    /// Input feature width.
    pub feat_dim: usize,
    /// Spatial token count per frame; feature-vector inputs use 1 and the
    /// spatial pooling of larger backbones degenerates to the identity.
    pub spatial_tokens: usize,
    /// Transition-loss weight.
    pub alpha: f64,
    /// Parameter-init seed.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.m < 1 {
            return Err(Error::Config(format!(
                "window sizes must be >= 1, got n={} m={}",
                self.n, self.m
            )));
        }
        if self.d < 2 {
            return Err(Error::Config(format!("d must be >= 2, got {}", self.d)));
        }
        if self.s < 2 {
            return Err(Error::Config(format!("s must be >= 2, got {}", self.s)));
        }
        if self.feat_dim < 1 {
            return Err(Error::Config("feat_dim must be >= 1".into()));
        }
        if self.spatial_tokens != 1 {
            // feature-vector frames only at this scale; the field exists to
            // keep the window shape contract explicit
            return Err(Error::Config(format!(
                "spatial_tokens must be 1, got {}",
                self.spatial_tokens
            )));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Defaults matched to the synth-7 benchmark.
    pub fn synth7() -> ModelConfig {
        ModelConfig {
            n: 16,
            m: 8,
            d: 32,
            s: 7,
            feat_dim: 16,
            spatial_tokens: 1,
            alpha: 1.0,
            seed: 1,
        }
    }
}

/// Named, shaped parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

impl ParamTensor {
    fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> ParamTensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, value.len());
        ParamTensor {
            name: name.into(),
            shape,
            value,
        }
    }

    fn gaussian(name: String, shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> ParamTensor {
        let numel: usize = shape.iter().product();
        let value = (0..numel)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ParamTensor::new(name, shape, value)
    }

    fn zeros(name: String, shape: Vec<usize>) -> ParamTensor {
        let numel: usize = shape.iter().product();
        ParamTensor::new(name, shape, vec![0.0; numel])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

impl Linear {
    fn init(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Linear {
        Linear {
            weight: ParamTensor::gaussian(
                format!("{name}.weight"),
                vec![fan_in, fan_out],
                1.0 / (fan_in as f64).sqrt(),
                rng,
            ),
            bias: ParamTensor::zeros(format!("{name}.bias"), vec![fan_out]),
        }
    }

    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// One pre-norm residual attention block: single-head attention plus a
/// two-layer feed-forward with hidden width `2d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnBlock {
    pub wq: Linear,
    /// Weight only: a key bias shifts every query's logits uniformly and
    /// cancels in the row softmax, so it would be an exactly-dead parameter.
    pub wk: ParamTensor,
    pub wv: Linear,
    pub wo: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl AttnBlock {
    fn init(name: &str, d: usize, rng: &mut ChaCha8Rng) -> AttnBlock {
        AttnBlock {
            wq: Linear::init(&format!("{name}.wq"), d, d, rng),
            wk: ParamTensor::gaussian(
                format!("{name}.wk.weight"),
                vec![d, d],
                1.0 / (d as f64).sqrt(),
                rng,
            ),
            wv: Linear::init(&format!("{name}.wv"), d, d, rng),
            wo: Linear::init(&format!("{name}.wo"), d, d, rng),
            ff1: Linear::init(&format!("{name}.ff1"), d, 2 * d, rng),
            ff2: Linear::init(&format!("{name}.ff2"), 2 * d, d, rng),
        }
    }

    /// Init with zeroed output-side projections: the residual block starts
    /// as the identity, so attaching it cannot disturb the trained model.
    fn init_residual_zero(name: &str, d: usize, rng: &mut ChaCha8Rng) -> AttnBlock {
        let mut blk = AttnBlock::init(name, d, rng);
        blk.wo.weight.value.iter_mut().for_each(|v| *v = 0.0);
        blk.ff2.weight.value.iter_mut().for_each(|v| *v = 0.0);
        blk
    }

    fn params(&self) -> Vec<&ParamTensor> {
        let mut out = self.wq.params();
        out.push(&self.wk);
        out.extend(self.wv.params());
        out.extend(self.wo.params());
        out.extend(self.ff1.params());
        out.extend(self.ff2.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = self.wq.params_mut();
        out.push(&mut self.wk);
        out.extend(self.wv.params_mut());
        out.extend(self.wo.params_mut());
        out.extend(self.ff1.params_mut());
        out.extend(self.ff2.params_mut());
        out
    }
}

/// The forecasting stack and the two NFSM-specific parameter groups,
/// attached at stage 2.
#[derive(Debug, Clone, PartialEq)]
pub struct NfsmParams {
    pub forecast1: AttnBlock,
    pub forecast2: AttnBlock,
    /// Per-position dynamic-embedding head, `d -> s*d`.
    pub dyn_head: Linear,
    /// Learnable global state embeddings, `s x d`.
    pub e_g: ParamTensor,
}

/// Every learnable array in the model. `nfsm` is `None` for stage-1
/// (baseline) models.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub input_proj: Linear,
    pub encoder: AttnBlock,
    pub classifier: Linear,
    pub nfsm: Option<NfsmParams>,
}

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(stage.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

impl ModelParams {
    /// Stage-1 initialization: projection, temporal encoder, classifier.
    pub fn init_stage1(cfg: &ModelConfig) -> ModelParams {
        let mut rng = stage_rng(cfg.seed, 1);
        ModelParams {
            input_proj: Linear::init("backbone.input_proj", cfg.feat_dim, cfg.d, &mut rng),
            encoder: AttnBlock::init("backbone.encoder", cfg.d, &mut rng),
            classifier: Linear::init("backbone.classifier", cfg.d, cfg.s, &mut rng),
            nfsm: None,
        }
    }

    /// Attach freshly initialized forecasting blocks, the dynamic-embedding
    /// head, and the global state embeddings.
    pub fn attach_nfsm(&mut self, cfg: &ModelConfig) {
        assert!(self.nfsm.is_none(), "NFSM heads already attached");
        let mut rng = stage_rng(cfg.seed, 2);
        self.nfsm = Some(NfsmParams {
            forecast1: AttnBlock::init_residual_zero("nfsm.forecast1", cfg.d, &mut rng),
            forecast2: AttnBlock::init_residual_zero("nfsm.forecast2", cfg.d, &mut rng),
            dyn_head: Linear::init("nfsm.dyn_head", cfg.d, cfg.s * cfg.d, &mut rng),
            e_g: ParamTensor::gaussian(
                "nfsm.e_g".into(),
                vec![cfg.s, cfg.d],
                1.0 / (cfg.d as f64).sqrt(),
                &mut rng,
            ),
        });
    }

    pub fn has_nfsm(&self) -> bool {
        self.nfsm.is_some()
    }

    /// All parameters in the fixed traversal order that checkpoints and the
    /// optimizer rely on.
    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut out = self.input_proj.params();
        out.extend(self.encoder.params());
        out.extend(self.classifier.params());
        if let Some(nfsm) = &self.nfsm {
            out.extend(nfsm.forecast1.params());
            out.extend(nfsm.forecast2.params());
            out.extend(nfsm.dyn_head.params());
            out.push(&nfsm.e_g);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = self.input_proj.params_mut();
        out.extend(self.encoder.params_mut());
        out.extend(self.classifier.params_mut());
        if let Some(nfsm) = &mut self.nfsm {
            out.extend(nfsm.forecast1.params_mut());
            out.extend(nfsm.forecast2.params_mut());
            out.extend(nfsm.dyn_head.params_mut());
            out.push(&mut nfsm.e_g);
        }
        out
    }

    /// Bind every parameter as a leaf on `tape`, in [`ModelParams::params`]
    /// order.
    pub fn bind(&self, tape: &Tape) -> BoundModel {
        let leaf = |p: &ParamTensor| tape.leaf(p.value.clone(), &p.shape);
        let lin = |l: &Linear| BoundLinear {
            weight: leaf(&l.weight),
            bias: leaf(&l.bias),
        };
        let blk = |b: &AttnBlock| BoundBlock {
            wq: lin(&b.wq),
            wk: leaf(&b.wk),
            wv: lin(&b.wv),
            wo: lin(&b.wo),
            ff1: lin(&b.ff1),
            ff2: lin(&b.ff2),
        };
        BoundModel {
            input_proj: lin(&self.input_proj),
            encoder: blk(&self.encoder),
            classifier: lin(&self.classifier),
            nfsm: self.nfsm.as_ref().map(|n| BoundNfsm {
                forecast1: blk(&n.forecast1),
                forecast2: blk(&n.forecast2),
                dyn_head: lin(&n.dyn_head),
                e_g: leaf(&n.e_g),
            }),
        }
    }
}

pub struct BoundLinear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl BoundLinear {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.weight).add_row_bias(&self.bias)
    }

    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
}

pub struct BoundBlock {
    pub wq: BoundLinear,
    pub wk: Tensor,
    pub wv: BoundLinear,
    pub wo: BoundLinear,
    pub ff1: BoundLinear,
    pub ff2: BoundLinear,
}

impl BoundBlock {
    /// Pre-norm residual block over a `[t, d]` sequence.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let xn = x.norm_rows(NORM_EPS);
        let q = self.wq.apply(&xn);
        let k = xn.matmul(&self.wk);
        let v = self.wv.apply(&xn);
        let attn = self.wo.apply(&scaled_dot_attention(&q, &k, &v));
        let mid = x.add(&attn);
        let mn = mid.norm_rows(NORM_EPS);
        let ff = self.ff2.apply(&self.ff1.apply(&mn).relu());
        mid.add(&ff)
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.wq.tensors();
        out.push(&self.wk);
        out.extend(self.wv.tensors());
        out.extend(self.wo.tensors());
        out.extend(self.ff1.tensors());
        out.extend(self.ff2.tensors());
        out
    }
}

pub struct BoundNfsm {
    pub forecast1: BoundBlock,
    pub forecast2: BoundBlock,
    pub dyn_head: BoundLinear,
    pub e_g: Tensor,
}

pub struct BoundModel {
    pub input_proj: BoundLinear,
    pub encoder: BoundBlock,
    pub classifier: BoundLinear,
    pub nfsm: Option<BoundNfsm>,
}

impl BoundModel {
    /// Bound tensors in the same order as [`ModelParams::params`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.input_proj.tensors();
        out.extend(self.encoder.tensors());
        out.extend(self.classifier.tensors());
        if let Some(nfsm) = &self.nfsm {
            out.extend(nfsm.forecast1.tensors());
            out.extend(nfsm.forecast2.tensors());
            out.extend(nfsm.dyn_head.tensors());
            out.push(&nfsm.e_g);
        }
        out
    }
}

/// Sinusoidal position codes as a constant `[len, d]` leaf.
pub fn position_encoding(tape: &Tape, len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    tape.leaf(data, &[len, d])
}

/// Project and encode a window of frames: linear `feat_dim -> d`, additive
/// sinusoidal position codes, one encoder block. Works for any row count, so
/// offline mode can encode `n + m` real frames with the same parameters.
pub fn encode_history(model: &BoundModel, cfg: &ModelConfig, features: &Tensor) -> Tensor {
    encode_history_opts(model, cfg, features, true)
}

pub(crate) fn encode_history_opts(
    model: &BoundModel,
    cfg: &ModelConfig,
    features: &Tensor,
    use_posenc: bool,
) -> Tensor {
    let shape = features.shape();
    assert_eq!(
        shape.len(),
        2,
        "encode_history expects [frames, feat_dim], got {shape:?}"
    );
    assert_eq!(
        shape[1], cfg.feat_dim,
        "feature width {} does not match config feat_dim {}",
        shape[1], cfg.feat_dim
    );
    let mut h = model.input_proj.apply(features);
    if use_posenc {
        let tape = tape_of(features);
        h = h.add(&position_encoding(&tape, shape[0], cfg.d));
    }
    model.encoder.forward(&h)
}

fn tape_of(t: &Tensor) -> Tape {
    // Tensors carry their tape; reuse it for constants created mid-forward.
    t.tape()
}

/// Duplicate the final history row `m` times as pseudo-future rows.
pub fn pad_pseudo_future(history: &Tensor, m: usize) -> Tensor {
    history.pad_repeat_last(m)
}

/// Two sequential attention blocks over the combined `[n + m, d]` rows.
pub fn forecast(nfsm: &BoundNfsm, combined: &Tensor) -> Tensor {
    nfsm.forecast2.forward(&nfsm.forecast1.forward(combined))
}

/// Pool a `[t, d]` sequence over its first `n` rows and classify.
fn classify_pooled(model: &BoundModel, rows: &Tensor, n: usize) -> Tensor {
    let pooled = rows.slice_rows(0, n).mean_axis(0);
    let d = pooled.len();
    let logits = model.classifier.apply(&pooled.reshape(&[1, d]));
    logits.softmax_last().reshape(&[logits.len()])
}

/// Current-frame state probabilities: temporal mean over the `n` history
/// positions of the forecast output, then classifier and softmax.
pub fn head_current_probs(model: &BoundModel, cfg: &ModelConfig, forecast_out: &Tensor) -> Tensor {
    assert_eq!(
        forecast_out.shape(),
        vec![cfg.n + cfg.m, cfg.d],
        "forecast output shape {:?} vs expected [{}, {}]",
        forecast_out.shape(),
        cfg.n + cfg.m,
        cfg.d
    );
    classify_pooled(model, forecast_out, cfg.n)
}

/// Baseline (stage-1) probabilities: pool the encoder output directly.
pub fn baseline_probs(model: &BoundModel, cfg: &ModelConfig, history: &Tensor) -> Tensor {
    assert_eq!(history.shape(), vec![cfg.n, cfg.d]);
    classify_pooled(model, history, cfg.n)
}

/// Dynamic state embeddings: per-position linear `d -> s*d`, reshaped to
/// `[n + m, s, d]`.
pub fn head_dynamic_embeddings(
    nfsm: &BoundNfsm,
    cfg: &ModelConfig,
    forecast_out: &Tensor,
) -> Tensor {
    let t = forecast_out.shape()[0];
    nfsm.dyn_head
        .apply(forecast_out)
        .reshape(&[t, cfg.s, cfg.d])
}

/// One training window: `n` history feature rows plus the labels of the
/// `n + m` context frames.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub features: Vec<f64>,
    pub current_label: usize,
    pub context_labels: Vec<usize>,
}

impl WindowSample {
    /// Extract the window ending at frame `t`. History is left-padded by
    /// repeating the video's first frame; future labels clamp to the final
    /// frame.
    pub fn from_video(video: &VideoSequence, t: usize, cfg: &ModelConfig) -> WindowSample {
        let len = video.frames.len();
        assert!(t < len, "frame {t} out of range for {len}-frame video");
        let mut features = Vec::with_capacity(cfg.n * cfg.feat_dim);
        for i in 0..cfg.n {
            let fi = (t + i + 1).saturating_sub(cfg.n);
            features.extend_from_slice(&video.frames[fi.min(len - 1)].features);
        }
        let context_labels = (0..cfg.n + cfg.m)
            .map(|i| {
                let fi = (t + i + 1).saturating_sub(cfg.n);
                video.frames[fi.min(len - 1)].label
            })
            .collect();
        WindowSample {
            features,
            current_label: video.frames[t].label,
            context_labels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::FrameRecord;

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            n: 3,
            m: 2,
            d: 4,
            s: 2,
            feat_dim: 3,
            spatial_tokens: 1,
            alpha: 1.0,
            seed: 11,
        }
    }

    #[test]
    fn encode_single_frame_window() {
        let mut cfg = micro_cfg();
        cfg.n = 1;
        let params = ModelParams::init_stage1(&cfg);
        let tape = Tape::new();
        let model = params.bind(&tape);
        let x = tape.leaf(vec![0.1, -0.4, 0.7], &[1, 3]);
        let h = encode_history(&model, &cfg, &x);
        assert_eq!(h.shape(), vec![1, 4]);
        assert!(h.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_frames_without_posenc_encode_identically() {
        let cfg = micro_cfg();
        let params = ModelParams::init_stage1(&cfg);
        let tape = Tape::new();
        let model = params.bind(&tape);
        let frame = [0.3, 0.5, -0.2];
        let mut data = Vec::new();
        for _ in 0..cfg.n {
            data.extend_from_slice(&frame);
        }
        let x = tape.leaf(data, &[cfg.n, 3]);
        let h = encode_history_opts(&model, &cfg, &x, false);
        let out = h.data();
        for row in 1..cfg.n {
            for j in 0..cfg.d {
                assert_eq!(out[j].to_bits(), out[row * cfg.d + j].to_bits());
            }
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = micro_cfg();
        let params = ModelParams::init_stage1(&cfg);
        let run = || {
            let tape = Tape::new();
            let model = params.bind(&tape);
            let x = tape.leaf(vec![0.1; 9], &[3, 3]);
            encode_history(&model, &cfg, &x).data()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn pad_pseudo_future_contract() {
        let tape = Tape::new();
        let h = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let p = pad_pseudo_future(&h, 1);
        assert_eq!(p.data(), vec![1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);

        let z = tape.leaf(vec![0.0; 6], &[3, 2]);
        let pz = pad_pseudo_future(&z, 4);
        assert_eq!(pz.shape(), vec![7, 2]);
        assert!(pz.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_pseudo_future_reads_only_history_rows() {
        // Poison rows >= n in a larger buffer, slice the history prefix,
        // and confirm no poison reaches the padded result.
        let tape = Tape::new();
        let n = 3;
        let m = 2;
        let mut data = vec![0.5; n * 2];
        data.extend(vec![f64::NAN; m * 2]);
        let full = tape.leaf(data, &[n + m, 2]);
        let history = full.slice_rows(0, n);
        let padded = pad_pseudo_future(&history, m);
        assert!(padded.data().iter().all(|v| v.is_finite()));
        // padded future rows equal row n-1 bitwise
        let out = padded.data();
        for row in n..n + m {
            for j in 0..2 {
                assert_eq!(out[row * 2 + j].to_bits(), out[(n - 1) * 2 + j].to_bits());
            }
        }
    }

    #[test]
    fn zeroed_projections_pass_residual_through() {
        let cfg = micro_cfg();
        let mut params = ModelParams::init_stage1(&cfg);
        params.attach_nfsm(&cfg);
        // zero the output-side projections of both forecasting blocks
        {
            let nfsm = params.nfsm.as_mut().unwrap();
            for blk in [&mut nfsm.forecast1, &mut nfsm.forecast2] {
                blk.wo.weight.value.iter_mut().for_each(|v| *v = 0.0);
                blk.wo.bias.value.iter_mut().for_each(|v| *v = 0.0);
                blk.ff2.weight.value.iter_mut().for_each(|v| *v = 0.0);
                blk.ff2.bias.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let tape = Tape::new();
        let model = params.bind(&tape);
        let x = tape.leaf(vec![0.25; 20], &[5, 4]);
        let y = forecast(model.nfsm.as_ref().unwrap(), &x);
        for (a, b) in x.data().iter().zip(&y.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn current_probs_head_is_a_distribution_and_uniform_for_zero_weights() {
        let cfg = micro_cfg();
        let mut params = ModelParams::init_stage1(&cfg);
        params.classifier.weight.value.iter_mut().for_each(|v| *v = 0.0);
        params.classifier.bias.value.iter_mut().for_each(|v| *v = 0.0);
        params.attach_nfsm(&cfg);
        let tape = Tape::new();
        let model = params.bind(&tape);
        let fo = tape.leaf((0..20).map(|i| 0.1 * i as f64).collect(), &[5, 4]);
        let p = head_current_probs(&model, &cfg, &fo).data();
        assert_eq!(p.len(), 2);
        for v in &p {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn current_probs_sum_to_one_for_random_input() {
        let cfg = micro_cfg();
        let params = ModelParams::init_stage1(&cfg);
        let tape = Tape::new();
        let model = params.bind(&tape);
        let fo = tape.leaf((0..20).map(|i| (i as f64).sin()).collect(), &[5, 4]);
        let p = head_current_probs(&model, &cfg, &fo).data();
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn dynamic_embedding_head_shapes_and_zero_case() {
        let cfg = micro_cfg();
        let mut params = ModelParams::init_stage1(&cfg);
        params.attach_nfsm(&cfg);
        {
            let nfsm = params.nfsm.as_mut().unwrap();
            nfsm.dyn_head.weight.value.iter_mut().for_each(|v| *v = 0.0);
            nfsm.dyn_head.bias.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let model = params.bind(&tape);
        let fo = tape.leaf(vec![0.7; 20], &[5, 4]);
        let e_dt = head_dynamic_embeddings(model.nfsm.as_ref().unwrap(), &cfg, &fo);
        assert_eq!(e_dt.shape(), vec![5, 2, 4]);
        assert!(e_dt.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_extraction_pads_and_clamps() {
        let cfg = micro_cfg();
        let frames: Vec<FrameRecord> = (0..5)
            .map(|t| FrameRecord {
                features: vec![t as f64; 3],
                label: if t < 3 { 0 } else { 1 },
            })
            .collect();
        let video = VideoSequence {
            video_id: "w".into(),
            frames,
        };
        // left padding at t=0: all rows are frame 0
        let w0 = WindowSample::from_video(&video, 0, &cfg);
        assert_eq!(w0.features, vec![0.0; 9]);
        assert_eq!(w0.current_label, 0);
        assert_eq!(w0.context_labels, vec![0, 0, 0, 0, 0]);
        // at the video end the future labels clamp to the last frame
        let w4 = WindowSample::from_video(&video, 4, &cfg);
        assert_eq!(w4.features, vec![2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 4.0, 4.0, 4.0]);
        assert_eq!(w4.context_labels, vec![0, 1, 1, 1, 1]);
    }

    #[test]
    fn parameter_names_are_unique_and_ordered() {
        let cfg = micro_cfg();
        let mut params = ModelParams::init_stage1(&cfg);
        params.attach_nfsm(&cfg);
        let names: Vec<String> = params.params().iter().map(|p| p.name.clone()).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate parameter names");
        assert!(names[0].starts_with("backbone."));
        assert!(names.last().unwrap().starts_with("nfsm."));
        assert!(names.contains(&"nfsm.e_g".to_string()));
        // bind order matches params order
        let tape = Tape::new();
        let bound = params.bind(&tape);
        assert_eq!(bound.tensors().len(), params.params().len());
        for (p, t) in params.params().iter().zip(bound.tensors()) {
            assert_eq!(p.shape, t.shape());
        }
    }
}
