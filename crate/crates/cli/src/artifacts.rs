//! Files a run leaves behind: the per-step CSV log, sample dumps, metric
//! reports as JSON, and plain SVG 1.1 scatter plots. Every writer formats
//! floats with the shortest round-trip representation, so identical runs
//! produce identical bytes; the only exception is the log's wall_ms column,
//! which records real elapsed time.

use crate::CliError;
use boot_core::boot::StepMetrics;
use boot_core::tensorcore::Tensor;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

pub const METRICS_HEADER: &str = "step,loss_bs,loss_bc,ema_decay,wall_ms";

/// Append-oriented writer for metrics.csv. A fresh file gets the header; a
/// resumed run reopens the existing file and keeps appending rows.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn open(path: &Path, resume: bool) -> Result<MetricsLog, CliError> {
        let fresh = !resume || !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(path)
            .map_err(|e| CliError::runtime(format!("cannot open {}: {e}", path.display())))?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{METRICS_HEADER}")
                .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
        }
        Ok(MetricsLog { out })
    }

    pub fn record(&mut self, m: &StepMetrics, ema_decay: f64) -> std::io::Result<()> {
        match m.loss_bc {
            Some(bc) => writeln!(
                self.out,
                "{},{},{},{},{}",
                m.step, m.loss_bs, bc, ema_decay, m.wall_ms
            ),
            None => writeln!(
                self.out,
                "{},{},,{},{}",
                m.step, m.loss_bs, ema_decay, m.wall_ms
            ),
        }
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.out
            .flush()
            .map_err(|e| CliError::runtime(format!("cannot flush metrics log: {e}")))
    }
}

/// One row per sample, comma-separated coordinates, no header.
pub fn write_samples_csv(path: &Path, points: &Tensor) -> Result<(), CliError> {
    let mut text = String::new();
    for r in 0..points.rows() {
        let mut first = true;
        for v in points.row(r) {
            if !first {
                text.push(',');
            }
            text.push_str(&v.to_string());
            first = false;
        }
        text.push('\n');
    }
    write_file(path, &text)
}

pub fn write_metrics_json(path: &Path, metrics: &BTreeMap<String, f64>) -> Result<(), CliError> {
    write_json(path, metrics)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::runtime(format!("cannot encode {}: {e}", path.display())))?;
    text.push('\n');
    write_file(path, &text)
}

pub fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

pub struct ScatterGroup<'a> {
    pub points: &'a Tensor,
    pub color: &'a str,
}

/// Plain SVG 1.1 scatter of 2-D point groups: one circle per point, viewBox
/// fitted to the data bounds with a small margin.
pub fn write_scatter_svg(path: &Path, groups: &[ScatterGroup]) -> Result<(), CliError> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for g in groups {
        if g.points.cols() != 2 {
            return Err(CliError::runtime(format!(
                "scatter needs 2-D points, got {} columns",
                g.points.cols()
            )));
        }
        for r in 0..g.points.rows() {
            let p = g.points.row(r);
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    if lo[0] > hi[0] {
        return Err(CliError::runtime("scatter needs at least one point"));
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let margin = 0.05 * span;
    let (min_x, min_y) = (lo[0] - margin, lo[1] - margin);
    let (w, h) = (hi[0] - lo[0] + 2.0 * margin, hi[1] - lo[1] + 2.0 * margin);
    let r = 0.008 * span;

    let mut svg = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"480\" \
         height=\"480\" viewBox=\"{min_x} {min_y} {w} {h}\">\n"
    ));
    for g in groups {
        svg.push_str(&format!("<g fill=\"{}\" fill-opacity=\"0.5\">\n", g.color));
        for i in 0..g.points.rows() {
            let p = g.points.row(i);
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"{r}\"/>\n",
                p[0], p[1]
            ));
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    write_file(path, &svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("boot-artifacts-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn metrics_log_writes_header_and_blank_boundary_fields() {
        let path = tmp("metrics.csv");
        let mut log = MetricsLog::open(&path, false).unwrap();
        log.record(
            &StepMetrics { step: 0, loss_bs: 1.5, loss_bc: Some(0.25), wall_ms: 3.0 },
            0.99,
        )
        .unwrap();
        log.record(
            &StepMetrics { step: 1, loss_bs: 1.25, loss_bc: None, wall_ms: 2.0 },
            0.99,
        )
        .unwrap();
        log.finish().unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "0,1.5,0.25,0.99,3");
        assert_eq!(lines[2], "1,1.25,,0.99,2");
        assert_eq!(lines.len(), 3);

        // Resume appends; a fresh open truncates back to the header.
        let mut log = MetricsLog::open(&path, true).unwrap();
        log.record(
            &StepMetrics { step: 2, loss_bs: 1.0, loss_bc: None, wall_ms: 2.0 },
            0.99,
        )
        .unwrap();
        log.finish().unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 4);
        MetricsLog::open(&path, false).unwrap().finish().unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1);
    }

    #[test]
    fn samples_csv_is_one_row_per_point() {
        let path = tmp("samples.csv");
        let pts = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.125]).unwrap();
        write_samples_csv(&path, &pts).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "0.5,-1\n2,0.125\n");
    }

    #[test]
    fn metrics_json_is_byte_stable() {
        let path = tmp("metrics.json");
        let mut m = BTreeMap::new();
        m.insert("energy".to_string(), 0.1 + 0.2);
        m.insert("covered".to_string(), 8.0);
        write_metrics_json(&path, &m).unwrap();
        let first = fs::read(&path).unwrap();
        write_metrics_json(&path, &m).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        let text = String::from_utf8(first).unwrap();
        assert!(text.ends_with('\n'));
        let parsed: BTreeMap<String, f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["energy"].to_bits(), (0.1 + 0.2_f64).to_bits());
    }

    #[test]
    fn scatter_svg_holds_one_circle_per_point_inside_the_view_box() {
        let path = tmp("scatter.svg");
        let a = Tensor::new(vec![3, 2], vec![0.0, 0.0, 4.0, 0.0, 0.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![-1.0, 2.0, 2.0, -1.5]).unwrap();
        write_scatter_svg(
            &path,
            &[
                ScatterGroup { points: &a, color: "#6b7280" },
                ScatterGroup { points: &b, color: "#b91c1c" },
            ],
        )
        .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<?xml version=\"1.0\""));
        assert!(text.contains("version=\"1.1\""));
        assert_eq!(text.matches("<circle ").count(), 5);

        let vb = text.split("viewBox=\"").nth(1).unwrap();
        let vb: Vec<f64> = vb.split('"').next().unwrap()
            .split(' ')
            .map(|v| v.parse().unwrap())
            .collect();
        for pts in [&a, &b] {
            for i in 0..pts.rows() {
                let p = pts.row(i);
                assert!(p[0] >= vb[0] && p[0] <= vb[0] + vb[2]);
                assert!(p[1] >= vb[1] && p[1] <= vb[1] + vb[3]);
            }
        }

        let narrow = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(write_scatter_svg(
            &path,
            &[ScatterGroup { points: &narrow, color: "#000" }]
        )
        .is_err());
    }
}
