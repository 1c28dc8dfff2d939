//! Command implementations.

use crate::config::{load_ablate_config, load_train_config, AblateFileConfig};
use nfsm_core::checkpoint::Checkpoint;
use nfsm_core::dataset::{generate_dataset, load_dataset, load_spec, Dataset};
use nfsm_core::error::{Error, Result};
use nfsm_core::inference::{predict_dataset, write_transition_diagnostic, InferenceMode,
    PredictionSource, Predictions};
use nfsm_core::kvtext::KvWriter;
use nfsm_core::metrics::{evaluate, from_predictions, EvalReport, Regime};
use nfsm_core::sim::WorkflowSpec;
use nfsm_core::training::{train, train_stage2_from, TrainConfig};
use std::fs;
use std::path::{Path, PathBuf};

pub fn cmd_gen_data(
    spec_path: Option<&Path>,
    out_dir: &Path,
    n_videos: usize,
    seed: u64,
    max_frames: usize,
) -> Result<()> {
    let spec = match spec_path {
        Some(p) => load_spec(p)?,
        None => WorkflowSpec::synth7(),
    };
    let manifest = generate_dataset(&spec, n_videos, seed, max_frames, out_dir)?;
    println!("{}", manifest.path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

pub fn cmd_train(config_path: &Path) -> Result<()> {
    let cfg = load_train_config(config_path)?;
    let dataset = load_dataset(&cfg.dataset)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::file(&cfg.out_dir, e))?;
    let outcome = train(&dataset, &cfg.model, &cfg.train)?;
    let stage1_path = cfg.out_dir.join("checkpoint_stage1.nfsmck");
    let final_path = cfg.out_dir.join("checkpoint.nfsmck");
    outcome.stage1.save(&stage1_path)?;
    let hash = outcome.final_ckpt.save(&final_path)?;
    let log_path = cfg.out_dir.join("train_log.txt");
    let mut log_text = String::from("# stage step l_c l_trans total\n");
    for line in &outcome.log {
        log_text.push_str(line);
        log_text.push('\n');
    }
    write_text(&log_path, &log_text)?;
    println!("{} sha256 {}", final_path.display(), hash);
    Ok(())
}

pub struct EvalArtifacts {
    pub predictions: PathBuf,
    pub report_kv: PathBuf,
    pub report: EvalReport,
}

pub fn run_eval(
    ckpt: &Checkpoint,
    ckpt_hash: &str,
    dataset: &Dataset,
    mode: InferenceMode,
    source: PredictionSource,
    regime: Regime,
    out_dir: &Path,
) -> Result<EvalArtifacts> {
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let (preds, tables) = predict_dataset(ckpt, ckpt_hash, dataset, mode, source)?;
    let pred_path = out_dir.join("predictions.txt");
    preds.write(&pred_path)?;
    let videos = from_predictions(&preds);
    let report = evaluate(&videos, ckpt.config.s, regime)?;
    let kv_path = out_dir.join("report.kv");
    write_text(&kv_path, &report.to_kv())?;
    write_text(&out_dir.join("report.txt"), &report.to_text())?;
    if !tables.is_empty() {
        write_transition_diagnostic(&out_dir.join("transition_tables.txt"), ckpt.config.s, &tables)?;
    }
    Ok(EvalArtifacts {
        predictions: pred_path,
        report_kv: kv_path,
        report,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    ckpt_path: &Path,
    data: &Path,
    mode: &str,
    source: &str,
    regime: &str,
    out_dir: &Path,
) -> Result<()> {
    let (ckpt, hash) = Checkpoint::load(ckpt_path)?;
    let dataset = load_dataset(data)?;
    let mode = InferenceMode::parse(mode)?;
    let source = PredictionSource::parse(source)?;
    let regime = Regime::parse(regime)?;
    let artifacts = run_eval(&ckpt, &hash, &dataset, mode, source, regime, out_dir)?;
    print!("{}", artifacts.report.to_text());
    println!("predictions: {}", artifacts.predictions.display());
    println!("report: {}", artifacts.report_kv.display());
    Ok(())
}

pub fn cmd_infer(
    ckpt_path: &Path,
    data: &Path,
    mode: &str,
    source: &str,
    out: &Path,
) -> Result<()> {
    let (ckpt, hash) = Checkpoint::load(ckpt_path)?;
    let dataset = load_dataset(data)?;
    let mode = InferenceMode::parse(mode)?;
    let source = PredictionSource::parse(source)?;
    let (preds, _) = predict_dataset(&ckpt, &hash, &dataset, mode, source)?;
    preds.write(out)?;
    println!("{}", out.display());
    Ok(())
}

pub fn cmd_plot(files: &[PathBuf], out: &Path) -> Result<()> {
    if files.is_empty() {
        return Err(Error::Argument("plot needs at least one prediction file".into()));
    }
    let mut runs = Vec::new();
    for f in files {
        let preds = Predictions::read(f)?;
        let label = format!("{} {}", preds.source.letter(), preds.mode.as_str());
        runs.push((label, preds));
    }
    let svg = crate::plot::render_timelines(&runs)?;
    write_text(out, &svg)?;
    println!("{}", out.display());
    Ok(())
}

struct AblationRow {
    name: &'static str,
    report: EvalReport,
}

pub fn cmd_ablate(config_path: &Path) -> Result<()> {
    let cfg: AblateFileConfig = load_ablate_config(config_path)?;
    let train_data = load_dataset(&cfg.dataset)?;
    let test_data = load_dataset(&cfg.test_dataset)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::file(&cfg.out_dir, e))?;

    // Stage 1 once; both stage-2 variants branch from it.
    let stage1_only = TrainConfig {
        epochs_stage2: 0,
        ..cfg.train.clone()
    };
    let outcome = train(&train_data, &cfg.model, &stage1_only)?;
    let stage1 = outcome.stage1;
    let stage1_path = cfg.out_dir.join("checkpoint_stage1.nfsmck");
    let stage1_hash = stage1.save(&stage1_path)?;

    let finetune_cfg = TrainConfig {
        freeze_backbone: false,
        ..cfg.train.clone()
    };
    let (_, model1) = stage1.to_model()?;
    let (finetune_ckpt, ft_log) =
        train_stage2_from(model1, stage1.step, &train_data, &cfg.model, &finetune_cfg)?;
    let finetune_path = cfg.out_dir.join("checkpoint_finetune.nfsmck");
    let finetune_hash = finetune_ckpt.save(&finetune_path)?;

    let freeze_cfg = TrainConfig {
        freeze_backbone: true,
        ..cfg.train.clone()
    };
    let (_, model2) = stage1.to_model()?;
    let (freeze_ckpt, fz_log) =
        train_stage2_from(model2, stage1.step, &train_data, &cfg.model, &freeze_cfg)?;
    let freeze_path = cfg.out_dir.join("checkpoint_freeze.nfsmck");
    let freeze_hash = freeze_ckpt.save(&freeze_path)?;

    let mut log_text = String::from("# stage step l_c l_trans total\n");
    for line in outcome.log.iter().chain(&ft_log).chain(&fz_log) {
        log_text.push_str(line);
        log_text.push('\n');
    }
    write_text(&cfg.out_dir.join("train_log.txt"), &log_text)?;

    let rows = vec![
        AblationRow {
            name: "A",
            report: run_eval(
                &stage1,
                &stage1_hash,
                &test_data,
                cfg.mode,
                PredictionSource::Baseline,
                cfg.regime,
                &cfg.out_dir.join("eval_a"),
            )?
            .report,
        },
        AblationRow {
            name: "B",
            report: run_eval(
                &finetune_ckpt,
                &finetune_hash,
                &test_data,
                cfg.mode,
                PredictionSource::TransitionAware,
                cfg.regime,
                &cfg.out_dir.join("eval_b"),
            )?
            .report,
        },
        AblationRow {
            name: "C",
            report: run_eval(
                &finetune_ckpt,
                &finetune_hash,
                &test_data,
                cfg.mode,
                PredictionSource::Full,
                cfg.regime,
                &cfg.out_dir.join("eval_c"),
            )?
            .report,
        },
        AblationRow {
            name: "freeze-B",
            report: run_eval(
                &freeze_ckpt,
                &freeze_hash,
                &test_data,
                cfg.mode,
                PredictionSource::TransitionAware,
                cfg.regime,
                &cfg.out_dir.join("eval_freeze_b"),
            )?
            .report,
        },
        AblationRow {
            name: "freeze-C",
            report: run_eval(
                &freeze_ckpt,
                &freeze_hash,
                &test_data,
                cfg.mode,
                PredictionSource::Full,
                cfg.regime,
                &cfg.out_dir.join("eval_freeze_c"),
            )?
            .report,
        },
    ];

    let table = ablation_table(&rows);
    write_text(&cfg.out_dir.join("ablation.txt"), &table)?;
    write_text(&cfg.out_dir.join("ablation.kv"), &ablation_kv(&rows))?;
    print!("{table}");
    println!("artifacts: {}", cfg.out_dir.display());
    Ok(())
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let base = &rows[0].report;
    let mut out = String::new();
    out.push_str("row       accuracy        precision        recall          jaccard         f1              mAP             frag\n");
    for row in rows {
        let r = &row.report;
        let cell = |v: f64, b: f64| format!("{:6.2} ({:+5.2})", v, v - b);
        out.push_str(&format!(
            "{:<9} {}  {}  {}  {}  {}  {}  {:.3}\n",
            row.name,
            cell(r.video_accuracy_mean, base.video_accuracy_mean),
            cell(r.macro_precision, base.macro_precision),
            cell(r.macro_recall, base.macro_recall),
            cell(r.macro_jaccard, base.macro_jaccard),
            cell(r.macro_f1, base.macro_f1),
            cell(r.map, base.map),
            r.fragmentation_ratio,
        ));
    }
    out
}

fn ablation_kv(rows: &[AblationRow]) -> String {
    let mut w = KvWriter::new();
    w.put("format", "nfsm-ablation-v1");
    w.put("rows", rows.len());
    for row in rows {
        let r = &row.report;
        let k = |field: &str| format!("row.{}.{field}", row.name);
        w.put_f64(&k("accuracy"), r.video_accuracy_mean);
        w.put_f64(&k("precision"), r.macro_precision);
        w.put_f64(&k("recall"), r.macro_recall);
        w.put_f64(&k("jaccard"), r.macro_jaccard);
        w.put_f64(&k("f1"), r.macro_f1);
        w.put_f64(&k("map"), r.map);
        w.put_f64(&k("fragmentation"), r.fragmentation_ratio);
    }
    w.into_string()
}
