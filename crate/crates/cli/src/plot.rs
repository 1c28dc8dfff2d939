//! Timeline ribbon SVG: one row of colored segments per prediction source
//! plus the ground truth, one block per video.

use nfsm_core::error::{Error, Result};
use nfsm_core::inference::Predictions;

/// Fixed 8-color palette; phases beyond 8 cycle.
pub const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc949", "#b07aa1", "#9c755f",
];

const ROW_H: f64 = 22.0;
const ROW_GAP: f64 = 6.0;
const LABEL_W: f64 = 130.0;
const PLOT_W: f64 = 860.0;
const TITLE_H: f64 = 26.0;
const BLOCK_GAP: f64 = 18.0;
const MARGIN: f64 = 12.0;

struct Ribbon {
    label: String,
    labels: Vec<usize>,
}

fn runs(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    // (start, len, phase)
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some((_, len, phase)) if *phase == l => *len += 1,
            _ => out.push((i, 1, l)),
        }
    }
    out
}

fn push_ribbon(svg: &mut String, ribbon: &Ribbon, x0: f64, y: f64, frames: usize) {
    let scale = PLOT_W / frames as f64;
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" font-family=\"monospace\">{}</text>\n",
        x0,
        y + ROW_H - 7.0,
        xml_escape(&ribbon.label)
    ));
    for (start, len, phase) in runs(&ribbon.labels) {
        let color = PALETTE[phase % PALETTE.len()];
        svg.push_str(&format!(
            "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"><title>phase {} frames {}..{}</title></rect>\n",
            x0 + LABEL_W + start as f64 * scale,
            y,
            len as f64 * scale,
            ROW_H,
            color,
            phase,
            start,
            start + len - 1
        ));
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render the timeline comparison for one or more prediction runs. Every
/// run must cover the same videos with identical ground truth.
pub fn render_timelines(runs_in: &[(String, Predictions)]) -> Result<String> {
    if runs_in.is_empty() {
        return Err(Error::Argument("no prediction files given".into()));
    }
    let base = &runs_in[0].1;
    let base_videos = base.by_video();
    for (name, other) in runs_in.iter().skip(1) {
        let ovids = other.by_video();
        if ovids.len() != base_videos.len() {
            return Err(Error::Argument(format!(
                "{name}: covers {} videos, expected {}",
                ovids.len(),
                base_videos.len()
            )));
        }
        for ((id_a, recs_a), (id_b, recs_b)) in base_videos.iter().zip(&ovids) {
            if id_a != id_b {
                return Err(Error::Argument(format!(
                    "{name}: video id {id_b:?} does not match {id_a:?}"
                )));
            }
            if recs_a.len() != recs_b.len() {
                return Err(Error::Argument(format!(
                    "{name}: video {id_a} has {} frames, expected {}",
                    recs_b.len(),
                    recs_a.len()
                )));
            }
            for (ra, rb) in recs_a.iter().zip(recs_b) {
                if ra.gt != rb.gt {
                    return Err(Error::Argument(format!(
                        "{name}: ground truth differs at video {id_a} frame {}",
                        ra.frame_index
                    )));
                }
            }
        }
    }

    let rows_per_video = 1 + runs_in.len();
    let block_h = TITLE_H + rows_per_video as f64 * (ROW_H + ROW_GAP);
    let height = MARGIN * 2.0 + base_videos.len() as f64 * (block_h + BLOCK_GAP);
    let width = MARGIN * 2.0 + LABEL_W + PLOT_W;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    ));
    svg.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    let mut y = MARGIN;
    for (video_id, gt_records) in &base_videos {
        let frames = gt_records.len();
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"14\" font-family=\"monospace\" font-weight=\"bold\">{} ({} frames)</text>\n",
            MARGIN,
            y + 16.0,
            xml_escape(video_id),
            frames
        ));
        y += TITLE_H;
        let gt = Ribbon {
            label: "GT".into(),
            labels: gt_records.iter().map(|r| r.gt).collect(),
        };
        push_ribbon(&mut svg, &gt, MARGIN, y, frames);
        y += ROW_H + ROW_GAP;
        for (name, preds) in runs_in {
            let recs = preds
                .by_video()
                .into_iter()
                .find(|(id, _)| id == video_id)
                .map(|(_, r)| r.iter().map(|x| x.pred).collect::<Vec<usize>>())
                .unwrap();
            let ribbon = Ribbon {
                label: name.clone(),
                labels: recs,
            };
            push_ribbon(&mut svg, &ribbon, MARGIN, y, frames);
            y += ROW_H + ROW_GAP;
        }
        y += BLOCK_GAP;
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
