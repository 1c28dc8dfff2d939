//! Evaluation metrics: video-level accuracy, phase-level
//! precision/recall/Jaccard/F1 under both averaging regimes,
//! confidence-sorted mean average precision, and the fragmentation ratio
//! (predicted segment count over ground-truth segment count).

use crate::error::{Error, Result};
use crate::inference::Predictions;
use crate::kvtext::KvWriter;
use std::fmt::Write as _;

/// Per-video label and confidence rows, the input to every metric.
#[derive(Debug, Clone)]
pub struct VideoLabels {
    pub video_id: String,
    pub gt: Vec<usize>,
    pub pred: Vec<usize>,
    /// Per-frame probability vectors (confidences for mAP).
    pub probs: Vec<Vec<f64>>,
}

/// Group a prediction run by video.
pub fn from_predictions(preds: &Predictions) -> Vec<VideoLabels> {
    preds
        .by_video()
        .into_iter()
        .map(|(video_id, records)| VideoLabels {
            video_id,
            gt: records.iter().map(|r| r.gt).collect(),
            pred: records.iter().map(|r| r.pred).collect(),
            probs: records.iter().map(|r| r.probs.clone()).collect(),
        })
        .collect()
}

/// Per-video frame accuracy, then mean and population standard deviation
/// across videos, both in percent.
pub fn video_accuracy(videos: &[VideoLabels]) -> Result<(f64, f64)> {
    if videos.is_empty() {
        return Err(Error::Argument("video_accuracy needs at least one video".into()));
    }
    let mut accs = Vec::with_capacity(videos.len());
    for v in videos {
        if v.gt.is_empty() {
            return Err(Error::Argument(format!("video {} is empty", v.video_id)));
        }
        let correct = v.gt.iter().zip(&v.pred).filter(|(a, b)| a == b).count();
        accs.push(100.0 * correct as f64 / v.gt.len() as f64);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Phase-level rates as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseMetrics {
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    pub f1: f64,
}

fn rates(tp: f64, fp: f64, fn_: f64) -> PhaseMetrics {
    let div = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let precision = div(tp, tp + fp);
    let recall = div(tp, tp + fn_);
    let jaccard = div(tp, tp + fp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PhaseMetrics {
        precision,
        recall,
        jaccard,
        f1,
    }
}

/// Macro averages over the phases a regime considers defined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    pub f1: f64,
}

/// Concatenated regime: one global confusion count per phase over all
/// videos joined into a single sequence. Phases absent from the global
/// ground truth are undefined (`None`) and excluded from the macro.
pub fn phase_metrics_concat(
    videos: &[VideoLabels],
    s: usize,
) -> (Vec<Option<PhaseMetrics>>, MacroMetrics) {
    let mut tp = vec![0u64; s];
    let mut fp = vec![0u64; s];
    let mut fn_ = vec![0u64; s];
    let mut gt_seen = vec![false; s];
    for v in videos {
        for (&g, &p) in v.gt.iter().zip(&v.pred) {
            gt_seen[g] = true;
            if g == p {
                tp[g] += 1;
            } else {
                fp[p] += 1;
                fn_[g] += 1;
            }
        }
    }
    let per_phase: Vec<Option<PhaseMetrics>> = (0..s)
        .map(|k| gt_seen[k].then(|| rates(tp[k] as f64, fp[k] as f64, fn_[k] as f64)))
        .collect();
    (per_phase.clone(), macro_of(&per_phase))
}

fn macro_of(per_phase: &[Option<PhaseMetrics>]) -> MacroMetrics {
    let present: Vec<&PhaseMetrics> = per_phase.iter().flatten().collect();
    let n = present.len().max(1) as f64;
    MacroMetrics {
        precision: present.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: present.iter().map(|m| m.recall).sum::<f64>() / n,
        jaccard: present.iter().map(|m| m.jaccard).sum::<f64>() / n,
        f1: present.iter().map(|m| m.f1).sum::<f64>() / n,
    }
}

/// Per-video regime: per-phase rates over the phases present in each
/// video's ground truth, averaged across those phases, then across videos.
/// The per-phase column reports each phase's mean over the videos where it
/// appears.
pub fn phase_metrics_per_video(
    videos: &[VideoLabels],
    s: usize,
) -> Result<(Vec<Option<PhaseMetrics>>, MacroMetrics)> {
    if videos.is_empty() {
        return Err(Error::Argument(
            "phase_metrics_per_video needs at least one video".into(),
        ));
    }
    let mut phase_sums = vec![(0.0, 0.0, 0.0, 0.0, 0usize); s];
    let mut video_macros = Vec::with_capacity(videos.len());
    for v in videos {
        let mut tp = vec![0u64; s];
        let mut fp = vec![0u64; s];
        let mut fn_ = vec![0u64; s];
        let mut gt_seen = vec![false; s];
        for (&g, &p) in v.gt.iter().zip(&v.pred) {
            gt_seen[g] = true;
            if g == p {
                tp[g] += 1;
            } else {
                fp[p] += 1;
                fn_[g] += 1;
            }
        }
        let mut acc = MacroMetrics {
            precision: 0.0,
            recall: 0.0,
            jaccard: 0.0,
            f1: 0.0,
        };
        let mut count = 0usize;
        for k in 0..s {
            if !gt_seen[k] {
                continue;
            }
            let m = rates(tp[k] as f64, fp[k] as f64, fn_[k] as f64);
            acc.precision += m.precision;
            acc.recall += m.recall;
            acc.jaccard += m.jaccard;
            acc.f1 += m.f1;
            count += 1;
            let sums = &mut phase_sums[k];
            sums.0 += m.precision;
            sums.1 += m.recall;
            sums.2 += m.jaccard;
            sums.3 += m.f1;
            sums.4 += 1;
        }
        let n = count.max(1) as f64;
        video_macros.push(MacroMetrics {
            precision: acc.precision / n,
            recall: acc.recall / n,
            jaccard: acc.jaccard / n,
            f1: acc.f1 / n,
        });
    }
    let nv = video_macros.len() as f64;
    let overall = MacroMetrics {
        precision: video_macros.iter().map(|m| m.precision).sum::<f64>() / nv,
        recall: video_macros.iter().map(|m| m.recall).sum::<f64>() / nv,
        jaccard: video_macros.iter().map(|m| m.jaccard).sum::<f64>() / nv,
        f1: video_macros.iter().map(|m| m.f1).sum::<f64>() / nv,
    };
    let per_phase = phase_sums
        .iter()
        .map(|&(p, r, j, f, c)| {
            (c > 0).then(|| PhaseMetrics {
                precision: p / c as f64,
                recall: r / c as f64,
                jaccard: j / c as f64,
                f1: f / c as f64,
            })
        })
        .collect();
    Ok((per_phase, overall))
}

/// Confidence-sorted mean average precision as a fraction. Per phase, all
/// frames rank by that phase's probability (ties break by ascending
/// video id, then frame index); average precision is the mean of the
/// precision at each positive. Phases absent from the ground truth are
/// skipped.
pub fn mean_average_precision(videos: &[VideoLabels], s: usize) -> f64 {
    let mut aps = Vec::new();
    for k in 0..s {
        let mut rows: Vec<(f64, &str, usize, bool)> = Vec::new();
        let mut positives = 0usize;
        for v in videos {
            for (t, (&g, probs)) in v.gt.iter().zip(&v.probs).enumerate() {
                let hit = g == k;
                positives += hit as usize;
                rows.push((probs[k], v.video_id.as_str(), t, hit));
            }
        }
        if positives == 0 {
            continue;
        }
        rows.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then_with(|| a.1.cmp(b.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        let mut seen_pos = 0usize;
        let mut ap = 0.0;
        for (rank, row) in rows.iter().enumerate() {
            if row.3 {
                seen_pos += 1;
                ap += seen_pos as f64 / (rank + 1) as f64;
            }
        }
        aps.push(ap / positives as f64);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn count_runs(labels: &[usize]) -> usize {
    let mut runs = 0;
    let mut prev: Option<usize> = None;
    for &l in labels {
        if prev != Some(l) {
            runs += 1;
            prev = Some(l);
        }
    }
    runs
}

/// Total maximal constant-label runs in the predictions divided by the same
/// count in the ground truth, summed over videos. 1.0 is perfect; above 1
/// is over-segmentation.
pub fn fragmentation(videos: &[VideoLabels]) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::Argument("fragmentation needs at least one video".into()));
    }
    let pred_runs: usize = videos.iter().map(|v| count_runs(&v.pred)).sum();
    let gt_runs: usize = videos.iter().map(|v| count_runs(&v.gt)).sum();
    Ok(pred_runs as f64 / gt_runs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Concat,
    PerVideo,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Concat => "concat",
            Regime::PerVideo => "per_video",
        }
    }

    pub fn parse(s: &str) -> Result<Regime> {
        match s {
            "concat" => Ok(Regime::Concat),
            "per_video" | "per-video" => Ok(Regime::PerVideo),
            other => Err(Error::Argument(format!(
                "regime must be concat or per_video, got {other:?}"
            ))),
        }
    }
}

/// The full evaluation summary. Accuracy, macros, per-phase rates, and mAP
/// are percentages; the fragmentation ratio is a plain ratio.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub regime: Regime,
    pub video_accuracy_mean: f64,
    pub video_accuracy_std: f64,
    /// Index = phase; `None` where the regime leaves the phase undefined.
    pub per_phase: Vec<Option<PhaseMetrics>>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_jaccard: f64,
    pub macro_f1: f64,
    pub map: f64,
    pub fragmentation_ratio: f64,
}

/// Compute every metric under the chosen regime.
pub fn evaluate(videos: &[VideoLabels], s: usize, regime: Regime) -> Result<EvalReport> {
    let (mean, std) = video_accuracy(videos)?;
    let (per_phase, macros) = match regime {
        Regime::Concat => phase_metrics_concat(videos, s),
        Regime::PerVideo => phase_metrics_per_video(videos, s)?,
    };
    let map = mean_average_precision(videos, s);
    let frag = fragmentation(videos)?;
    Ok(EvalReport {
        regime,
        video_accuracy_mean: mean,
        video_accuracy_std: std,
        per_phase,
        macro_precision: 100.0 * macros.precision,
        macro_recall: 100.0 * macros.recall,
        macro_jaccard: 100.0 * macros.jaccard,
        macro_f1: 100.0 * macros.f1,
        map: 100.0 * map,
        fragmentation_ratio: frag,
    })
}

impl EvalReport {
    /// Machine-readable key-value form.
    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        w.put("format", "nfsm-eval-report-v1");
        w.put("regime", self.regime.as_str());
        w.put_f64("video_accuracy.mean", self.video_accuracy_mean);
        w.put_f64("video_accuracy.std", self.video_accuracy_std);
        w.put_f64("macro.precision", self.macro_precision);
        w.put_f64("macro.recall", self.macro_recall);
        w.put_f64("macro.jaccard", self.macro_jaccard);
        w.put_f64("macro.f1", self.macro_f1);
        w.put_f64("map", self.map);
        w.put_f64("fragmentation_ratio", self.fragmentation_ratio);
        for (k, m) in self.per_phase.iter().enumerate() {
            if let Some(m) = m {
                w.put_f64(&format!("phase.{k}.precision"), 100.0 * m.precision);
                w.put_f64(&format!("phase.{k}.recall"), 100.0 * m.recall);
                w.put_f64(&format!("phase.{k}.jaccard"), 100.0 * m.jaccard);
                w.put_f64(&format!("phase.{k}.f1"), 100.0 * m.f1);
            }
        }
        w.into_string()
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "evaluation report ({} regime)", self.regime.as_str());
        let _ = writeln!(
            out,
            "video accuracy: {:.2} +- {:.2}",
            self.video_accuracy_mean, self.video_accuracy_std
        );
        let _ = writeln!(
            out,
            "macro: precision {:.2}  recall {:.2}  jaccard {:.2}  f1 {:.2}",
            self.macro_precision, self.macro_recall, self.macro_jaccard, self.macro_f1
        );
        let _ = writeln!(out, "mAP: {:.2}", self.map);
        let _ = writeln!(out, "fragmentation ratio: {:.3}", self.fragmentation_ratio);
        let _ = writeln!(out, "phase  precision  recall  jaccard  f1");
        for (k, m) in self.per_phase.iter().enumerate() {
            match m {
                Some(m) => {
                    let _ = writeln!(
                        out,
                        "{k:>5}  {:>9.2}  {:>6.2}  {:>7.2}  {:>5.2}",
                        100.0 * m.precision,
                        100.0 * m.recall,
                        100.0 * m.jaccard,
                        100.0 * m.f1
                    );
                }
                None => {
                    let _ = writeln!(out, "{k:>5}  {:>9}  {:>6}  {:>7}  {:>5}", "-", "-", "-", "-");
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vl(id: &str, gt: &[usize], pred: &[usize]) -> VideoLabels {
        VideoLabels {
            video_id: id.into(),
            gt: gt.to_vec(),
            pred: pred.to_vec(),
            probs: pred
                .iter()
                .map(|&p| {
                    let mut row = vec![0.1; 3];
                    row[p] = 0.8;
                    row
                })
                .collect(),
        }
    }

    #[test]
    fn video_accuracy_cases() {
        let perfect = vec![vl("a", &[0, 1, 2], &[0, 1, 2])];
        assert_eq!(video_accuracy(&perfect).unwrap(), (100.0, 0.0));

        let two = vec![vl("a", &[0, 1], &[0, 1]), vl("b", &[0, 0], &[0, 1])];
        let (mean, std) = video_accuracy(&two).unwrap();
        assert_eq!(mean, 75.0);
        assert_eq!(std, 25.0);

        // permuting video order changes nothing
        let two_rev = vec![two[1].clone(), two[0].clone()];
        assert_eq!(video_accuracy(&two_rev).unwrap(), (mean, std));
    }

    #[test]
    fn video_accuracy_rejects_empty() {
        assert!(video_accuracy(&[]).is_err());
        let empty = vec![vl("a", &[], &[])];
        assert!(video_accuracy(&empty).is_err());
    }

    #[test]
    fn concat_hand_fixture() {
        let v = vec![vl("a", &[0, 0, 1, 1], &[0, 1, 1, 1])];
        let (per_phase, macros) = phase_metrics_concat(&v, 3);
        let p0 = per_phase[0].unwrap();
        assert_eq!(p0.precision, 1.0);
        assert_eq!(p0.recall, 0.5);
        assert_eq!(p0.jaccard, 0.5);
        let p1 = per_phase[1].unwrap();
        assert!((p1.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p1.recall, 1.0);
        assert!((p1.jaccard - 2.0 / 3.0).abs() < 1e-15);
        assert!(per_phase[2].is_none());
        assert!((macros.precision - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn concat_perfect_is_all_ones() {
        let v = vec![vl("a", &[0, 1, 2, 1], &[0, 1, 2, 1])];
        let (per_phase, macros) = phase_metrics_concat(&v, 3);
        for m in per_phase.iter().flatten() {
            assert_eq!(m.precision, 1.0);
            assert_eq!(m.recall, 1.0);
            assert_eq!(m.jaccard, 1.0);
            assert_eq!(m.f1, 1.0);
        }
        assert_eq!(macros.f1, 1.0);
    }

    #[test]
    fn concat_relabeling_symmetry() {
        let v = vec![vl("a", &[0, 0, 1, 1], &[0, 1, 1, 1])];
        let swapped = vec![vl("a", &[1, 1, 0, 0], &[1, 0, 0, 0])];
        let (pa, _) = phase_metrics_concat(&v, 2);
        let (pb, _) = phase_metrics_concat(&swapped, 2);
        assert_eq!(pa[0], pb[1]);
        assert_eq!(pa[1], pb[0]);
    }

    #[test]
    fn per_video_hand_fixture() {
        // video a: phases {0,1}; video b: phases {1,2}
        let videos = vec![
            vl("a", &[0, 0, 1, 1], &[0, 1, 1, 1]),
            vl("b", &[1, 2, 2, 2], &[1, 2, 2, 1]),
        ];
        let (_, overall) = phase_metrics_per_video(&videos, 3).unwrap();
        // video a: phase0 P=1 R=.5 F1=2/3; phase1 P=2/3 R=1 F1=.8 -> macro P=5/6 R=.75
        // video b: phase1 P=.5 R=1 F1=2/3; phase2 P=1 R=2/3 F1=.8 -> macro P=.75 R=5/6
        let expect_p = ((1.0 + 2.0 / 3.0) / 2.0 + (0.5 + 1.0) / 2.0) / 2.0;
        let expect_r = ((0.5 + 1.0) / 2.0 + (1.0 + 2.0 / 3.0) / 2.0) / 2.0;
        assert!((overall.precision - expect_p).abs() < 1e-15);
        assert!((overall.recall - expect_r).abs() < 1e-15);
        let expect_f1 = ((2.0 / 3.0 + 0.8) / 2.0 + (2.0 / 3.0 + 0.8) / 2.0) / 2.0;
        assert!((overall.f1 - expect_f1).abs() < 1e-15);
    }

    #[test]
    fn per_video_single_video_equals_phase_mean() {
        let videos = vec![vl("a", &[0, 0, 1, 1], &[0, 1, 1, 1])];
        let (per_phase, overall) = phase_metrics_per_video(&videos, 2).unwrap();
        let p0 = per_phase[0].unwrap();
        let p1 = per_phase[1].unwrap();
        assert!((overall.precision - (p0.precision + p1.precision) / 2.0).abs() < 1e-15);
        assert!((overall.f1 - (p0.f1 + p1.f1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn regimes_agree_on_single_video_with_all_phases() {
        let videos = vec![vl("a", &[0, 1, 2, 0, 1, 2], &[0, 1, 1, 0, 2, 2])];
        let (pc, mc) = phase_metrics_concat(&videos, 3);
        let (pv, mv) = phase_metrics_per_video(&videos, 3).unwrap();
        for k in 0..3 {
            let a = pc[k].unwrap();
            let b = pv[k].unwrap();
            assert!((a.precision - b.precision).abs() < 1e-15);
            assert!((a.recall - b.recall).abs() < 1e-15);
        }
        assert!((mc.precision - mv.precision).abs() < 1e-15);
        assert!((mc.recall - mv.recall).abs() < 1e-15);
    }

    #[test]
    fn jaccard_bounded_by_precision_and_recall() {
        let videos = vec![
            vl("a", &[0, 0, 1, 2, 1], &[0, 1, 1, 2, 2]),
            vl("b", &[2, 2, 0, 1, 1], &[2, 0, 0, 1, 0]),
        ];
        let (per_phase, _) = phase_metrics_concat(&videos, 3);
        for m in per_phase.iter().flatten() {
            assert!(m.jaccard <= m.precision + 1e-15);
            assert!(m.jaccard <= m.recall + 1e-15);
            // f1 identity
            let expect = if m.precision + m.recall == 0.0 {
                0.0
            } else {
                2.0 * m.precision * m.recall / (m.precision + m.recall)
            };
            assert!((m.f1 - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn map_hand_fixture() {
        // 4 frames, phase-0 positives ranked 1st and 3rd by confidence
        let videos = vec![VideoLabels {
            video_id: "a".into(),
            gt: vec![0, 1, 0, 1],
            pred: vec![0, 1, 1, 1],
            probs: vec![
                vec![0.9, 0.1],
                vec![0.8, 0.2],
                vec![0.7, 0.3],
                vec![0.6, 0.4],
            ],
        }];
        // phase 0: positives at ranks 1 and 3 -> AP = (1/1 + 2/3)/2 = 5/6
        // phase 1: confidences 0.4,0.3,0.2,0.1 -> positives (frames 1,3)
        // rank by p1 desc: f3 (0.4, pos), f2 (0.3, neg), f1 (0.2, pos), f0
        // AP1 = (1/1 + 2/3)/2 = 5/6
        let map = mean_average_precision(&videos, 2);
        assert!((map - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn map_perfect_ranking_is_one() {
        let videos = vec![VideoLabels {
            video_id: "a".into(),
            gt: vec![0, 0, 1, 1],
            pred: vec![0, 0, 1, 1],
            probs: vec![
                vec![0.9, 0.1],
                vec![0.8, 0.2],
                vec![0.2, 0.8],
                vec![0.1, 0.9],
            ],
        }];
        assert_eq!(mean_average_precision(&videos, 2), 1.0);
    }

    #[test]
    fn map_invariant_under_monotone_transform() {
        let videos = vec![
            vl("a", &[0, 1, 2, 0, 1], &[0, 1, 1, 2, 1]),
            vl("b", &[2, 0, 1, 2, 2], &[2, 0, 0, 2, 1]),
        ];
        let base = mean_average_precision(&videos, 3);
        let transformed: Vec<VideoLabels> = videos
            .iter()
            .map(|v| VideoLabels {
                probs: v
                    .probs
                    .iter()
                    .map(|row| row.iter().map(|p| (3.0 * p).exp()).collect())
                    .collect(),
                ..v.clone()
            })
            .collect();
        let after = mean_average_precision(&transformed, 3);
        assert!((base - after).abs() < 1e-15);
    }

    #[test]
    fn fragmentation_cases() {
        let perfect = vec![vl("a", &[0, 0, 1, 1], &[0, 0, 1, 1])];
        assert_eq!(fragmentation(&perfect).unwrap(), 1.0);

        let frag = vec![vl("a", &[0, 0, 0], &[0, 1, 0])];
        assert_eq!(fragmentation(&frag).unwrap(), 3.0);

        // runs are maximal by construction: consecutive identical predicted
        // segments cannot be split
        assert_eq!(count_runs(&[1, 1, 1, 1]), 1);
        assert_eq!(count_runs(&[1, 2, 2, 1]), 3);
    }

    #[test]
    fn report_is_order_invariant_and_serializes() {
        let videos = vec![
            vl("a", &[0, 0, 1, 1], &[0, 1, 1, 1]),
            vl("b", &[1, 2, 2, 2], &[1, 2, 2, 1]),
        ];
        let r1 = evaluate(&videos, 3, Regime::Concat).unwrap();
        let reordered = vec![videos[1].clone(), videos[0].clone()];
        let r2 = evaluate(&reordered, 3, Regime::Concat).unwrap();
        assert_eq!(r1.to_kv(), r2.to_kv());
        assert!(r1.to_kv().contains("regime = concat"));
        assert!(r1.to_text().contains("mAP"));

        let rv = evaluate(&videos, 3, Regime::PerVideo).unwrap();
        assert!(rv.to_kv().contains("regime = per_video"));
    }
}
