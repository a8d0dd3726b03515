//! SVG overlays drawn from box coordinates: green for correct detections,
//! red for incorrect ones, white for detections removed as background.

use std::fmt::Write;

use crate::evaluation::match_detections;
use crate::features::{ClassVocabulary, Detection, GroundTruth, MATCH_IOU};
use crate::geometry::BBox;
use crate::pipelines::{RelabelOutcome, RelabelStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Correct,
    Incorrect,
    Removed,
}

impl Verdict {
    fn stroke(self) -> &'static str {
        match self {
            Verdict::Correct => "#00c000",
            Verdict::Incorrect => "#e00000",
            Verdict::Removed => "#ffffff",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayItem {
    pub bbox: BBox,
    pub label: String,
    pub score: f64,
    pub verdict: Verdict,
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One rectangle and one caption per item.
pub fn render_overlay(width: f64, height: f64, items: &[OverlayItem]) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" style="background:#404040">"#
    );
    for item in items {
        let b = item.bbox;
        let _ = writeln!(
            svg,
            r#"  <rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            b.x(),
            b.y(),
            b.w(),
            b.h(),
            item.verdict.stroke()
        );
        let _ = writeln!(
            svg,
            r#"  <text x="{}" y="{}" fill="{}" font-family="monospace" font-size="12">{} {:.4}</text>"#,
            b.x() + 2.0,
            (b.y() - 3.0).max(10.0),
            item.verdict.stroke(),
            escape(&item.label),
            item.score
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn name(vocab: &ClassVocabulary, class_id: usize) -> String {
    vocab.name(class_id).unwrap_or("?").to_string()
}

/// Items for plain detections, judged against the image's ground truth.
pub fn detection_items(dets: &[Detection], gts: &[GroundTruth], vocab: &ClassVocabulary) -> Vec<OverlayItem> {
    let m = match_detections(dets, gts, MATCH_IOU);
    dets.iter()
        .zip(m.correct)
        .map(|(d, ok)| OverlayItem {
            bbox: d.bbox,
            label: name(vocab, d.class_id),
            score: d.confidence,
            verdict: if ok { Verdict::Correct } else { Verdict::Incorrect },
        })
        .collect()
}

/// Items for a relabel outcome: survivors judged against ground truth,
/// removed detections in white with the score that condemned them.
pub fn relabel_items(
    outcome: &RelabelOutcome,
    gts: &[GroundTruth],
    vocab: &ClassVocabulary,
) -> Vec<OverlayItem> {
    let mut items = detection_items(&outcome.scene.detections, gts, vocab);
    items.extend(
        outcome
            .records
            .iter()
            .filter(|r| r.status == RelabelStatus::Removed)
            .map(|r| OverlayItem {
                bbox: r.bbox,
                label: name(vocab, r.original_label),
                score: r.rescored,
                verdict: Verdict::Removed,
            }),
    );
    items
}
