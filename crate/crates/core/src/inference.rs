//! Transition-aware inference.
//!
//! Online streaming keeps, per video, the feature history needed to build
//! the current window and a [`TransitionBuffer`] holding the future
//! transition-state probabilities emitted by past windows. At frame `t` the
//! forward pass yields the direct prediction and the future rows
//! `t+1..t+m`; the buffer's contributions *for* `t` (from the past `m`
//! frames) are averaged and merged into the final prediction by normalized
//! element-wise product. Offline mode runs the identical pipeline with real
//! future frames in place of the duplicated current embedding.

use crate::backbone::{
    baseline_probs, encode_history, ModelConfig, ModelParams, WindowSample,
};
use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kvtext::{KvDoc, KvWriter};
use crate::nfsm::{transition_prob_set, transition_tables_data};
use crate::sim::VideoSequence;
use crate::tensor::Tape;
use crate::training::{nfsm_forward_offline, nfsm_forward_online};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    Online,
    Offline,
}

impl InferenceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InferenceMode::Online => "online",
            InferenceMode::Offline => "offline",
        }
    }

    pub fn parse(s: &str) -> Result<InferenceMode> {
        match s {
            "online" => Ok(InferenceMode::Online),
            "offline" => Ok(InferenceMode::Offline),
            other => Err(Error::Argument(format!(
                "mode must be online or offline, got {other:?}"
            ))),
        }
    }
}

/// Which vector the prediction file carries: the stage-1 baseline, the
/// transition-aware direct prediction, or the fully merged prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionSource {
    Baseline,
    TransitionAware,
    Full,
}

impl PredictionSource {
    pub fn letter(&self) -> &'static str {
        match self {
            PredictionSource::Baseline => "A",
            PredictionSource::TransitionAware => "B",
            PredictionSource::Full => "C",
        }
    }

    pub fn parse(s: &str) -> Result<PredictionSource> {
        match s {
            "A" | "a" => Ok(PredictionSource::Baseline),
            "B" | "b" => Ok(PredictionSource::TransitionAware),
            "C" | "c" => Ok(PredictionSource::Full),
            other => Err(Error::Argument(format!(
                "source must be A, B, or C, got {other:?}"
            ))),
        }
    }
}

/// Future transition-state probabilities emitted by past windows, keyed by
/// absolute target frame index. At most `m` contributions per target.
#[derive(Debug, Clone)]
pub struct TransitionBuffer {
    m: usize,
    entries: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl TransitionBuffer {
    pub fn new(m: usize) -> TransitionBuffer {
        TransitionBuffer {
            m,
            entries: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, target: usize, probs: Vec<f64>) {
        let list = self.entries.entry(target).or_default();
        assert!(
            list.len() < self.m,
            "target {target} already holds {} contributions (cap {})",
            list.len(),
            self.m
        );
        list.push(probs);
    }

    /// Remove and return the contributions for `target`.
    pub fn take(&mut self, target: usize) -> Vec<Vec<f64>> {
        self.entries.remove(&target).unwrap_or_default()
    }

    pub fn pending(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }
}

/// Mean of the available contributions; `None` signals cold start (caller
/// falls back to the direct prediction).
pub fn aggregate(contributions: &[Vec<f64>]) -> Option<Vec<f64>> {
    if contributions.is_empty() {
        return None;
    }
    let s = contributions[0].len();
    let mut out = vec![0.0; s];
    for c in contributions {
        assert_eq!(c.len(), s, "contribution length mismatch");
        for j in 0..s {
            out[j] += c[j];
        }
    }
    let inv = 1.0 / contributions.len() as f64;
    for v in &mut out {
        *v *= inv;
    }
    Some(out)
}

/// Normalized element-wise product; falls back to the direct prediction when
/// the product mass is below 1e-12.
pub fn merge(p_hat: &[f64], p_tilde: &[f64]) -> Vec<f64> {
    assert_eq!(p_hat.len(), p_tilde.len(), "merge length mismatch");
    let prod: Vec<f64> = p_hat.iter().zip(p_tilde).map(|(a, b)| a * b).collect();
    let mass: f64 = prod.iter().sum();
    if mass < 1e-12 {
        return p_hat.to_vec();
    }
    prod.iter().map(|v| v / mass).collect()
}

/// Final per-frame output.
#[derive(Debug, Clone)]
pub struct FramePrediction {
    pub frame_index: usize,
    pub p_hat: Vec<f64>,
    pub p_tilde: Option<Vec<f64>>,
    pub p_final: Vec<f64>,
}

impl FramePrediction {
    pub fn predicted_phase(&self) -> usize {
        argmax(&self.p_final)
    }

    pub fn confidence(&self) -> f64 {
        self.p_final[self.predicted_phase()]
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-video streaming state: the rolling feature history and the
/// transition buffer. One per video; dropped at video end.
pub struct StreamState {
    first_frame: Option<Vec<f64>>,
    history: Vec<Vec<f64>>,
    buffer: TransitionBuffer,
    next_frame: usize,
    m: usize,
    table_sum: Vec<f64>,
    table_count: usize,
}

impl StreamState {
    pub fn new(cfg: &ModelConfig) -> StreamState {
        StreamState {
            first_frame: None,
            history: Vec::new(),
            buffer: TransitionBuffer::new(cfg.m),
            next_frame: 0,
            m: cfg.m,
            table_sum: vec![0.0; cfg.s * cfg.s],
            table_count: 0,
        }
    }

    pub fn frames_seen(&self) -> usize {
        self.next_frame
    }

    /// Mean dynamic transition table over all history positions of all
    /// windows processed so far.
    pub fn mean_history_table(&self) -> Option<Vec<f64>> {
        if self.table_count == 0 {
            return None;
        }
        Some(
            self.table_sum
                .iter()
                .map(|v| v / self.table_count as f64)
                .collect(),
        )
    }

    fn window_features(&self, cfg: &ModelConfig, current: &[f64]) -> Vec<f64> {
        let t = self.next_frame;
        let mut rows = Vec::with_capacity(cfg.n * cfg.feat_dim);
        for i in 0..cfg.n {
            let fi = (t + i + 1) as i64 - cfg.n as i64;
            if fi < 0 {
                rows.extend_from_slice(self.first_frame.as_deref().unwrap_or(current));
            } else if (fi as usize) == t {
                rows.extend_from_slice(current);
            } else {
                // history keeps the last n-1 frames: history[len - (t - fi)]
                let back = t - fi as usize;
                rows.extend_from_slice(&self.history[self.history.len() - back]);
            }
        }
        rows
    }

    fn advance(&mut self, cfg: &ModelConfig, features: &[f64]) {
        if self.first_frame.is_none() {
            self.first_frame = Some(features.to_vec());
        }
        self.history.push(features.to_vec());
        if self.history.len() > cfg.n.saturating_sub(1).max(1) {
            self.history.remove(0);
        }
        self.next_frame += 1;
    }
}

/// One online step: build the window ending at the current frame, run the
/// forward pass, bank the `m` future transition-state rows, consume the past
/// contributions for this frame, and merge.
pub fn stream_step(
    model: &ModelParams,
    cfg: &ModelConfig,
    state: &mut StreamState,
    features: &[f64],
) -> FramePrediction {
    assert_eq!(
        features.len(),
        cfg.feat_dim,
        "feature width {} does not match config feat_dim {}",
        features.len(),
        cfg.feat_dim
    );
    let t = state.next_frame;
    let window = state.window_features(cfg, features);

    let tape = Tape::new();
    let bound = model.bind(&tape);
    let feats = tape.leaf(window, &[cfg.n, cfg.feat_dim]);
    let (p_hat_t, e_dt) = nfsm_forward_online(&bound, cfg, &feats);
    let e_g = &bound.nfsm.as_ref().expect("NFSM heads required").e_g;
    let p_set = transition_prob_set(&e_dt, e_g, &p_hat_t);
    let p_hat = p_hat_t.data();
    let set = p_set.data();

    for j in 1..=state.m {
        let base = (cfg.n - 1 + j) * cfg.s;
        state.buffer.push(t + j, set[base..base + cfg.s].to_vec());
    }

    // diagnostics: accumulate the history-position tables
    let tables = transition_tables_data(&e_dt, e_g);
    for table in tables.iter().take(cfg.n) {
        for (acc, v) in state.table_sum.iter_mut().zip(table) {
            *acc += v;
        }
        state.table_count += 1;
    }

    let contributions = state.buffer.take(t);
    let p_tilde = aggregate(&contributions);
    let p_final = match &p_tilde {
        Some(pt) => merge(&p_hat, pt),
        None => p_hat.clone(),
    };
    state.advance(cfg, features);
    FramePrediction {
        frame_index: t,
        p_hat,
        p_tilde,
        p_final,
    }
}

/// Offline prediction for a whole video: every window sees the real future
/// frames (right-padded by the final frame near the video end).
pub fn run_offline(
    model: &ModelParams,
    cfg: &ModelConfig,
    video: &VideoSequence,
) -> (Vec<FramePrediction>, Option<Vec<f64>>) {
    let len = video.frames.len();
    let mut buffer = TransitionBuffer::new(cfg.m);
    let mut table_sum = vec![0.0; cfg.s * cfg.s];
    let mut table_count = 0usize;
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let mut rows = Vec::with_capacity((cfg.n + cfg.m) * cfg.feat_dim);
        for i in 0..cfg.n + cfg.m {
            let fi = ((t + i + 1) as i64 - cfg.n as i64).clamp(0, len as i64 - 1) as usize;
            rows.extend_from_slice(&video.frames[fi].features);
        }
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let feats = tape.leaf(rows, &[cfg.n + cfg.m, cfg.feat_dim]);
        let (p_hat_t, e_dt) = nfsm_forward_offline(&bound, cfg, &feats);
        let e_g = &bound.nfsm.as_ref().expect("NFSM heads required").e_g;
        let p_set = transition_prob_set(&e_dt, e_g, &p_hat_t);
        let p_hat = p_hat_t.data();
        let set = p_set.data();
        for j in 1..=cfg.m {
            let base = (cfg.n - 1 + j) * cfg.s;
            buffer.push(t + j, set[base..base + cfg.s].to_vec());
        }
        let tables = transition_tables_data(&e_dt, e_g);
        for table in tables.iter().take(cfg.n) {
            for (acc, v) in table_sum.iter_mut().zip(table) {
                *acc += v;
            }
            table_count += 1;
        }
        let contributions = buffer.take(t);
        let p_tilde = aggregate(&contributions);
        let p_final = match &p_tilde {
            Some(pt) => merge(&p_hat, pt),
            None => p_hat.clone(),
        };
        out.push(FramePrediction {
            frame_index: t,
            p_hat,
            p_tilde,
            p_final,
        });
    }
    let mean_table = (table_count > 0).then(|| {
        table_sum
            .iter()
            .map(|v| v / table_count as f64)
            .collect::<Vec<f64>>()
    });
    (out, mean_table)
}

/// Baseline (source A) per-frame probabilities: pooled encoder output
/// through the classifier, no NFSM involvement.
pub fn run_baseline(
    model: &ModelParams,
    cfg: &ModelConfig,
    video: &VideoSequence,
) -> Vec<FramePrediction> {
    (0..video.frames.len())
        .map(|t| {
            let w = WindowSample::from_video(video, t, cfg);
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let feats = tape.leaf(w.features, &[cfg.n, cfg.feat_dim]);
            let enc = encode_history(&bound, cfg, &feats);
            let p = baseline_probs(&bound, cfg, &enc).data();
            FramePrediction {
                frame_index: t,
                p_hat: p.clone(),
                p_tilde: None,
                p_final: p,
            }
        })
        .collect()
}

/// Per-video prediction under a mode and source. Returns the frame
/// predictions and, for NFSM sources, the mean history-position transition
/// table (the diagnostic export).
pub fn predict_video(
    model: &ModelParams,
    cfg: &ModelConfig,
    video: &VideoSequence,
    mode: InferenceMode,
    source: PredictionSource,
) -> Result<(Vec<FramePrediction>, Option<Vec<f64>>)> {
    if source != PredictionSource::Baseline && !model.has_nfsm() {
        return Err(Error::Config(format!(
            "source {} needs NFSM heads, but the checkpoint is a stage-1 baseline",
            source.letter()
        )));
    }
    match (mode, source) {
        (_, PredictionSource::Baseline) => Ok((run_baseline(model, cfg, video), None)),
        (InferenceMode::Online, _) => {
            let mut state = StreamState::new(cfg);
            let mut frames = Vec::with_capacity(video.frames.len());
            for f in &video.frames {
                let mut p = stream_step(model, cfg, &mut state, &f.features);
                if source == PredictionSource::TransitionAware {
                    p.p_final = p.p_hat.clone();
                    p.p_tilde = None;
                }
                frames.push(p);
            }
            Ok((frames, state.mean_history_table()))
        }
        (InferenceMode::Offline, _) => {
            let (mut frames, table) = run_offline(model, cfg, video);
            if source == PredictionSource::TransitionAware {
                for p in &mut frames {
                    p.p_final = p.p_hat.clone();
                    p.p_tilde = None;
                }
            }
            Ok((frames, table))
        }
    }
}

/// One prediction-file record.
#[derive(Debug, Clone, PartialEq)]
pub struct PredRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub gt: usize,
    pub pred: usize,
    pub probs: Vec<f64>,
}

/// A full prediction run with its header metadata.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub mode: InferenceMode,
    pub source: PredictionSource,
    pub checkpoint_hash: String,
    pub config: ModelConfig,
    pub records: Vec<PredRecord>,
}

impl Predictions {
    /// Records grouped by video in first-appearance order.
    pub fn by_video(&self) -> Vec<(String, Vec<&PredRecord>)> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<&PredRecord>> = BTreeMap::new();
        for r in &self.records {
            if !groups.contains_key(&r.video_id) {
                order.push(r.video_id.clone());
            }
            groups.entry(r.video_id.clone()).or_default().push(r);
        }
        order
            .into_iter()
            .map(|id| {
                let g = groups.remove(&id).unwrap();
                (id, g)
            })
            .collect()
    }

    pub fn encode(&self) -> String {
        let mut w = KvWriter::new();
        w.put("format", "nfsm-predictions-v1");
        w.put("mode", self.mode.as_str());
        w.put("source", self.source.letter());
        w.put("checkpoint_hash", &self.checkpoint_hash);
        w.put("model.n", self.config.n);
        w.put("model.m", self.config.m);
        w.put("model.d", self.config.d);
        w.put("model.s", self.config.s);
        w.put("model.feat_dim", self.config.feat_dim);
        w.put("model.spatial_tokens", self.config.spatial_tokens);
        w.put_f64("model.alpha", self.config.alpha);
        w.put("model.seed", self.config.seed);
        w.put("records", self.records.len());
        let mut out = w.into_string();
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.video_id);
            out.push(' ');
            out.push_str(&r.frame_index.to_string());
            out.push(' ');
            out.push_str(&r.gt.to_string());
            out.push(' ');
            out.push_str(&r.pred.to_string());
            for p in &r.probs {
                out.push_str(&format!(" {p:.9}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::file(path, e))
    }

    pub fn read(path: &Path) -> Result<Predictions> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::decode(&text)
    }

    pub fn decode(text: &str) -> Result<Predictions> {
        let (header, body) = match text.split_once("\n\n") {
            Some(parts) => parts,
            None => (text, ""),
        };
        let mut doc = KvDoc::parse(header)?;
        let format = doc.get_str("format")?;
        if format != "nfsm-predictions-v1" {
            return Err(Error::Format(format!(
                "unsupported prediction format {format:?}"
            )));
        }
        let mode = InferenceMode::parse(&doc.get_str("mode")?)?;
        let source = PredictionSource::parse(&doc.get_str("source")?)?;
        let checkpoint_hash = doc.get_str("checkpoint_hash")?;
        let config = ModelConfig {
            n: doc.get_usize("model.n")?,
            m: doc.get_usize("model.m")?,
            d: doc.get_usize("model.d")?,
            s: doc.get_usize("model.s")?,
            feat_dim: doc.get_usize("model.feat_dim")?,
            spatial_tokens: doc.get_usize("model.spatial_tokens")?,
            alpha: doc.get_f64("model.alpha")?,
            seed: doc.get_u64("model.seed")?,
        };
        let expect = doc.get_usize("records")?;
        doc.finish()?;
        let mut records = Vec::with_capacity(expect);
        for (lineno, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 4 + config.s {
                return Err(Error::Format(format!(
                    "prediction record line {}: expected {} fields, got {}",
                    lineno + 1,
                    4 + config.s,
                    toks.len()
                )));
            }
            let parse_usize = |tok: &str| -> Result<usize> {
                tok.parse().map_err(|_| {
                    Error::Format(format!(
                        "prediction record line {}: invalid integer {tok:?}",
                        lineno + 1
                    ))
                })
            };
            let probs: Vec<f64> = toks[4..]
                .iter()
                .map(|tok| {
                    tok.parse().map_err(|_| {
                        Error::Format(format!(
                            "prediction record line {}: invalid float {tok:?}",
                            lineno + 1
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            records.push(PredRecord {
                video_id: toks[0].to_string(),
                frame_index: parse_usize(toks[1])?,
                gt: parse_usize(toks[2])?,
                pred: parse_usize(toks[3])?,
                probs,
            });
        }
        if records.len() != expect {
            return Err(Error::Format(format!(
                "prediction file lists {expect} records but contains {}",
                records.len()
            )));
        }
        Ok(Predictions {
            mode,
            source,
            checkpoint_hash,
            config,
            records,
        })
    }
}

/// Diagnostic export of per-video mean transition tables plus the overall
/// mean, as structured text.
pub fn write_transition_diagnostic(
    path: &Path,
    s: usize,
    per_video: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut w = KvWriter::new();
    w.put("format", "nfsm-transition-diagnostic-v1");
    w.put("s", s);
    w.put("n_videos", per_video.len());
    let mut mean = vec![0.0; s * s];
    for (i, (id, table)) in per_video.iter().enumerate() {
        w.put(&format!("video.{i}.id"), id);
        for r in 0..s {
            w.put_f64_list(&format!("video.{i}.row.{r}"), &table[r * s..(r + 1) * s]);
        }
        for (acc, v) in mean.iter_mut().zip(table) {
            *acc += v;
        }
    }
    if !per_video.is_empty() {
        let inv = 1.0 / per_video.len() as f64;
        for v in &mut mean {
            *v *= inv;
        }
        for r in 0..s {
            w.put_f64_list(&format!("mean.row.{r}"), &mean[r * s..(r + 1) * s]);
        }
    }
    fs::write(path, w.into_string()).map_err(|e| Error::file(path, e))
}

/// Read back the overall mean table from a diagnostic file.
pub fn read_transition_diagnostic_mean(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut doc = KvDoc::parse(&text)?;
    let _ = doc.get_str("format")?;
    let s = doc.get_usize("s")?;
    let mut rows = Vec::with_capacity(s);
    for r in 0..s {
        rows.push(doc.get_f64_list(&format!("mean.row.{r}"))?);
    }
    Ok(rows)
}

/// Run a whole dataset under one mode and source. Returns the predictions
/// and the per-video mean history transition tables.
pub fn predict_dataset(
    ckpt: &Checkpoint,
    ckpt_hash: &str,
    dataset: &Dataset,
    mode: InferenceMode,
    source: PredictionSource,
) -> Result<(Predictions, Vec<(String, Vec<f64>)>)> {
    let (cfg, model) = ckpt.to_model()?;
    if dataset.spec.feat_dim != cfg.feat_dim {
        return Err(Error::Config(format!(
            "dataset feat_dim {} does not match checkpoint feat_dim {}",
            dataset.spec.feat_dim, cfg.feat_dim
        )));
    }
    if dataset.spec.num_phases != cfg.s {
        return Err(Error::Config(format!(
            "dataset has {} phases but checkpoint expects {}",
            dataset.spec.num_phases, cfg.s
        )));
    }
    let mut records = Vec::new();
    let mut tables = Vec::new();
    for video in &dataset.videos {
        let (frames, table) = predict_video(&model, &cfg, video, mode, source)?;
        for (f, frame) in video.frames.iter().zip(&frames) {
            records.push(PredRecord {
                video_id: video.video_id.clone(),
                frame_index: frame.frame_index,
                gt: f.label,
                pred: frame.predicted_phase(),
                probs: frame.p_final.clone(),
            });
        }
        if let Some(t) = table {
            tables.push((video.video_id.clone(), t));
        }
    }
    Ok((
        Predictions {
            mode,
            source,
            checkpoint_hash: ckpt_hash.to_string(),
            config: cfg,
            records,
        },
        tables,
    ))
}
