//! Dataset files and manifests.
//!
//! Per-video binary layout (all integers little-endian):
//! magic `NFSMDS1\0`, u32 num_frames, u32 feat_dim, then
//! `num_frames * feat_dim` f32 features in frame-major order, then
//! `num_frames` u16 labels. The manifest and workflow-spec files use the
//! [`crate::kvtext`] format.

use crate::error::{Error, Result};
use crate::kvtext::{KvDoc, KvWriter};
use crate::sim::{sample_video, FrameRecord, VideoSequence, WorkflowSpec};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

pub const VIDEO_MAGIC: &[u8; 8] = b"NFSMDS1\0";

/// A loaded dataset: the generator spec plus all videos listed in a manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: WorkflowSpec,
    pub videos: Vec<VideoSequence>,
}

/// Serialize one video into the binary layout.
pub fn encode_video(video: &VideoSequence, feat_dim: usize) -> Vec<u8> {
    let n = video.frames.len();
    let mut buf = Vec::with_capacity(16 + n * feat_dim * 4 + n * 2);
    buf.extend_from_slice(VIDEO_MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(feat_dim as u32).to_le_bytes());
    for f in &video.frames {
        assert_eq!(f.features.len(), feat_dim, "frame width mismatch");
        for &v in &f.features {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for f in &video.frames {
        buf.extend_from_slice(&(f.label as u16).to_le_bytes());
    }
    buf
}

/// Parse a binary video file body. Fails without partial state on any
/// truncation or header mismatch.
pub fn decode_video(bytes: &[u8], video_id: &str) -> Result<VideoSequence> {
    let fail = |msg: String| Error::Format(format!("video {video_id}: {msg}"));
    if bytes.len() < 16 {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..8] != VIDEO_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let num_frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let feat_dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expect = 16 + num_frames * feat_dim * 4 + num_frames * 2;
    if bytes.len() != expect {
        return Err(fail(format!(
            "expected {expect} bytes for {num_frames} frames x {feat_dim} features, got {}",
            bytes.len()
        )));
    }
    let mut frames = Vec::with_capacity(num_frames);
    let feat_base = 16;
    let label_base = feat_base + num_frames * feat_dim * 4;
    for t in 0..num_frames {
        let mut features = Vec::with_capacity(feat_dim);
        for j in 0..feat_dim {
            let off = feat_base + (t * feat_dim + j) * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            features.push(v as f64);
        }
        let off = label_base + t * 2;
        let label = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        frames.push(FrameRecord { features, label });
    }
    Ok(VideoSequence {
        video_id: video_id.to_string(),
        frames,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::file(path, e))?;
    Ok(buf)
}

/// Write the WorkflowSpec fields under `prefix` (empty for spec files).
pub fn write_spec_fields(w: &mut KvWriter, prefix: &str, spec: &WorkflowSpec) {
    let k = |name: &str| format!("{prefix}{name}");
    w.put(&k("num_phases"), spec.num_phases);
    w.put(&k("feat_dim"), spec.feat_dim);
    w.put(&k("dwell_min"), spec.dwell_min);
    w.put(&k("dwell_max"), spec.dwell_max);
    w.put_f64(&k("emission_noise_sigma"), spec.emission_noise_sigma);
    w.put_f64(&k("smoothing_rho"), spec.smoothing_rho);
    w.put_f64(&k("ambiguity_rate"), spec.ambiguity_rate);
    w.put(&k("terminal_phase"), spec.terminal_phase);
    for (i, row) in spec.transition.iter().enumerate() {
        w.put_f64_list(&k(&format!("transition.row{i}")), row);
    }
    for (i, row) in spec.phase_means.iter().enumerate() {
        w.put_f64_list(&k(&format!("phase_means.row{i}")), row);
    }
}

/// Read the WorkflowSpec fields written by [`write_spec_fields`].
pub fn read_spec_fields(doc: &mut KvDoc, prefix: &str) -> Result<WorkflowSpec> {
    let k = |name: &str| format!("{prefix}{name}");
    let num_phases = doc.get_usize(&k("num_phases"))?;
    let feat_dim = doc.get_usize(&k("feat_dim"))?;
    let mut transition = Vec::with_capacity(num_phases);
    for i in 0..num_phases {
        transition.push(doc.get_f64_list(&k(&format!("transition.row{i}")))?);
    }
    let mut phase_means = Vec::with_capacity(num_phases);
    for i in 0..num_phases {
        phase_means.push(doc.get_f64_list(&k(&format!("phase_means.row{i}")))?);
    }
    let spec = WorkflowSpec {
        num_phases,
        transition,
        dwell_min: doc.get_usize(&k("dwell_min"))?,
        dwell_max: doc.get_usize(&k("dwell_max"))?,
        feat_dim,
        phase_means,
        emission_noise_sigma: doc.get_f64(&k("emission_noise_sigma"))?,
        smoothing_rho: doc.get_f64(&k("smoothing_rho"))?,
        ambiguity_rate: doc.get_f64(&k("ambiguity_rate"))?,
        terminal_phase: doc.get_usize(&k("terminal_phase"))?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Write a standalone workflow-spec file.
pub fn save_spec(spec: &WorkflowSpec, path: &Path) -> Result<()> {
    spec.validate()?;
    let mut w = KvWriter::new();
    w.put("format", "nfsm-workflow-spec-v1");
    write_spec_fields(&mut w, "", spec);
    fs::write(path, w.into_string()).map_err(|e| Error::file(path, e))
}

/// Load and validate a workflow-spec file, rejecting unknown keys.
pub fn load_spec(path: &Path) -> Result<WorkflowSpec> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| Error::Format(format!("{}: not UTF-8", path.display())))?;
    let mut doc = KvDoc::parse(&text)?;
    let format = doc.get_str("format")?;
    if format != "nfsm-workflow-spec-v1" {
        return Err(Error::Format(format!(
            "{}: unsupported format {format:?}",
            path.display()
        )));
    }
    let spec = read_spec_fields(&mut doc, "")?;
    doc.finish()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(spec)
}

/// Summary returned by [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub video_ids: Vec<String>,
    pub frame_counts: Vec<usize>,
}

/// Sample `n_videos` videos (seeds `base_seed..base_seed + n`) and write the
/// binary files plus `manifest.txt` into `out_dir`. Re-running with the same
/// arguments reproduces every byte.
pub fn generate_dataset(
    spec: &WorkflowSpec,
    n_videos: usize,
    base_seed: u64,
    max_frames: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let mut w = KvWriter::new();
    w.put("format", "nfsm-dataset-manifest-v1");
    w.put("n_videos", n_videos);
    w.put("base_seed", base_seed);
    w.put("max_frames", max_frames);
    write_spec_fields(&mut w, "spec.", spec);
    let mut video_ids = Vec::with_capacity(n_videos);
    let mut frame_counts = Vec::with_capacity(n_videos);
    for i in 0..n_videos {
        let seed = base_seed + i as u64;
        let video = sample_video(spec, seed, max_frames);
        let file_name = format!("{}.nfsmds", video.video_id);
        let bytes = encode_video(&video, spec.feat_dim);
        let video_path = out_dir.join(&file_name);
        fs::write(&video_path, bytes).map_err(|e| Error::file(&video_path, e))?;
        w.put(&format!("video.{i}.id"), &video.video_id);
        w.put(&format!("video.{i}.file"), &file_name);
        w.put(&format!("video.{i}.frames"), video.frames.len());
        video_ids.push(video.video_id.clone());
        frame_counts.push(video.frames.len());
    }
    let manifest_path = out_dir.join("manifest.txt");
    fs::write(&manifest_path, w.into_string()).map_err(|e| Error::file(&manifest_path, e))?;
    Ok(Manifest {
        path: manifest_path,
        video_ids,
        frame_counts,
    })
}

/// Load a dataset through its manifest, validating every video against the
/// embedded spec.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = String::from_utf8(read_file(manifest_path)?)
        .map_err(|_| Error::Format(format!("{}: not UTF-8", manifest_path.display())))?;
    let mut doc = KvDoc::parse(&text)?;
    let format = doc.get_str("format")?;
    if format != "nfsm-dataset-manifest-v1" {
        return Err(Error::Format(format!(
            "{}: unsupported format {format:?}",
            manifest_path.display()
        )));
    }
    let n_videos = doc.get_usize("n_videos")?;
    let _ = doc.get_u64("base_seed")?;
    let _ = doc.get_usize("max_frames")?;
    let spec = read_spec_fields(&mut doc, "spec.")?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut videos = Vec::with_capacity(n_videos);
    for i in 0..n_videos {
        let id = doc.get_str(&format!("video.{i}.id"))?;
        let file = doc.get_str(&format!("video.{i}.file"))?;
        let frames = doc.get_usize(&format!("video.{i}.frames"))?;
        let video_path = dir.join(&file);
        let bytes = read_file(&video_path)?;
        let video = decode_video(&bytes, &id)?;
        if video.frames.len() != frames {
            return Err(Error::Format(format!(
                "video {id}: manifest says {frames} frames, file has {}",
                video.frames.len()
            )));
        }
        if video.frames.is_empty() {
            return Err(Error::Format(format!("video {id}: empty")));
        }
        for (t, f) in video.frames.iter().enumerate() {
            if f.label >= spec.num_phases {
                return Err(Error::Format(format!(
                    "video {id}: frame {t} label {} out of range for {} phases",
                    f.label, spec.num_phases
                )));
            }
            if f.features.len() != spec.feat_dim {
                return Err(Error::Format(format!(
                    "video {id}: frame {t} has {} features, expected {}",
                    f.features.len(),
                    spec.feat_dim
                )));
            }
        }
        videos.push(video);
    }
    doc.finish()?;
    Ok(Dataset { spec, videos })
}
