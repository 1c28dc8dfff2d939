//! Train and ablation config files (key-value text, strict keys).

use nfsm_core::backbone::ModelConfig;
use nfsm_core::error::{Error, Result};
use nfsm_core::inference::InferenceMode;
use nfsm_core::kvtext::KvDoc;
use nfsm_core::metrics::Regime;
use nfsm_core::training::TrainConfig;
use std::fs;
use std::path::{Path, PathBuf};

pub struct TrainFileConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub struct AblateFileConfig {
    pub dataset: PathBuf,
    pub test_dataset: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mode: InferenceMode,
    pub regime: Regime,
}

fn read_doc(path: &Path, expected_format: &str) -> Result<KvDoc> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut doc =
        KvDoc::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let format = doc
        .get_str("format")
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if format != expected_format {
        return Err(Error::Config(format!(
            "{}: expected format {expected_format:?}, got {format:?}",
            path.display()
        )));
    }
    Ok(doc)
}

fn read_model(doc: &mut KvDoc) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        n: doc.get_usize("model.n")?,
        m: doc.get_usize("model.m")?,
        d: doc.get_usize("model.d")?,
        s: doc.get_usize("model.s")?,
        feat_dim: doc.get_usize("model.feat_dim")?,
        spatial_tokens: doc.get_usize("model.spatial_tokens")?,
        alpha: doc.get_f64("train.alpha")?,
        seed: doc.get_u64("model.seed")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_train(doc: &mut KvDoc, alpha: f64) -> Result<TrainConfig> {
    let tcfg = TrainConfig {
        learning_rate_stage1: doc.get_f64("train.learning_rate_stage1")?,
        learning_rate_stage2: doc.get_f64("train.learning_rate_stage2")?,
        epochs_stage1: doc.get_usize("train.epochs_stage1")?,
        epochs_stage2: doc.get_usize("train.epochs_stage2")?,
        alpha,
        batch_size: doc.get_usize("train.batch_size")?,
        freeze_backbone: doc.get_bool("train.freeze_backbone")?,
        seed: doc.get_u64("train.seed")?,
        beta1: doc.get_f64("train.beta1")?,
        beta2: doc.get_f64("train.beta2")?,
        epsilon: doc.get_f64("train.epsilon")?,
    };
    tcfg.validate()?;
    Ok(tcfg)
}

fn resolve(base: &Path, raw: &str) -> PathBuf {
    let p = PathBuf::from(raw);
    if p.is_absolute() {
        p
    } else {
        base.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}

pub fn load_train_config(path: &Path) -> Result<TrainFileConfig> {
    let mut doc = read_doc(path, "nfsm-train-config-v1")?;
    let dataset = resolve(path, &doc.get_str("dataset")?);
    let out_dir = resolve(path, &doc.get_str("out_dir")?);
    let model = read_model(&mut doc)?;
    let train = read_train(&mut doc, model.alpha)?;
    doc.finish()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(TrainFileConfig {
        dataset,
        out_dir,
        model,
        train,
    })
}

pub fn load_ablate_config(path: &Path) -> Result<AblateFileConfig> {
    let mut doc = read_doc(path, "nfsm-ablate-config-v1")?;
    let dataset = resolve(path, &doc.get_str("dataset")?);
    let test_dataset = resolve(path, &doc.get_str("test_dataset")?);
    let out_dir = resolve(path, &doc.get_str("out_dir")?);
    let mode = InferenceMode::parse(&doc.get_str("mode")?)?;
    let regime = Regime::parse(&doc.get_str("regime")?)?;
    let model = read_model(&mut doc)?;
    let train = read_train(&mut doc, model.alpha)?;
    doc.finish()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(AblateFileConfig {
        dataset,
        test_dataset,
        out_dir,
        model,
        train,
        mode,
        regime,
    })
}
