//! Ribbon files: per-video CSVs of frame-indexed predictions, the interchange
//! format between inference and evaluation (and external plotting).
//!
//! Header: `frame_index,predicted_phase,ground_truth_phase,max_logit`.
//! The ground-truth column is empty when no labels are available.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::inference::Prediction;

#[derive(Clone, Debug, PartialEq)]
pub struct RibbonRow {
    pub frame_index: usize,
    pub predicted_phase: usize,
    pub ground_truth: Option<usize>,
    pub max_logit: f32,
}

pub const RIBBON_HEADER: &str = "frame_index,predicted_phase,ground_truth_phase,max_logit";

pub fn ribbon_rows(predictions: &[Prediction], labels: Option<&[usize]>) -> Vec<RibbonRow> {
    predictions
        .iter()
        .map(|p| RibbonRow {
            frame_index: p.frame,
            predicted_phase: p.phase,
            ground_truth: labels.map(|l| l[p.frame]),
            max_logit: p.max_logit(),
        })
        .collect()
}

pub fn write_ribbon(path: &Path, rows: &[RibbonRow]) -> Result<()> {
    let mut out = String::from(RIBBON_HEADER);
    out.push('\n');
    for r in rows {
        let gt = r
            .ground_truth
            .map(|g| g.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.frame_index, r.predicted_phase, gt, r.max_logit
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_ribbon(path: &Path) -> Result<Vec<RibbonRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RIBBON_HEADER => {}
        other => {
            return Err(Error::format(
                path,
                format!("expected header '{RIBBON_HEADER}', got {other:?}"),
            ))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(
                path,
                format!("line {}: expected 4 fields, got {}", lineno + 2, fields.len()),
            ));
        }
        let parse_err =
            |what: &str| Error::format(path, format!("line {}: bad {what}", lineno + 2));
        rows.push(RibbonRow {
            frame_index: fields[0].parse().map_err(|_| parse_err("frame index"))?,
            predicted_phase: fields[1].parse().map_err(|_| parse_err("predicted phase"))?,
            ground_truth: if fields[2].is_empty() {
                None
            } else {
                Some(fields[2].parse().map_err(|_| parse_err("ground truth"))?)
            },
            max_logit: fields[3].parse().map_err(|_| parse_err("max logit"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_rows_exactly() {
        let rows = vec![
            RibbonRow {
                frame_index: 0,
                predicted_phase: 2,
                ground_truth: Some(2),
                max_logit: 1.25,
            },
            RibbonRow {
                frame_index: 1,
                predicted_phase: 0,
                ground_truth: None,
                max_logit: -0.037221577,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_ribbon(&path, &rows).unwrap();
        let back = read_ribbon(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], rows[0]);
        assert_eq!(back[1].ground_truth, None);
        assert_eq!(back[1].max_logit.to_bits(), rows[1].max_logit.to_bits());
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "frame,pred\n0,1\n").unwrap();
        assert!(matches!(read_ribbon(&path), Err(Error::Format { .. })));
    }
}
