//! CSV training logs and per-curve series files.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const WORLD_MODEL_LOG: &str = "world_model.csv";
pub const AGENT_LOG: &str = "agent.csv";
pub const ENCODER_LOG: &str = "encoder.csv";
pub const EPISODE_LOG: &str = "episodes.csv";
pub const PROBE_LOG: &str = "probe_variance.csv";

pub const WORLD_MODEL_COLUMNS: [&str; 9] =
    ["step", "model_loss", "pred_loss", "embed_loss", "reward_loss", "cont_loss", "dyn_loss", "rep_loss", "kl"];
pub const AGENT_COLUMNS: [&str; 6] = ["step", "actor_loss", "critic_loss", "mean_entropy", "mean_advantage", "mean_return"];
pub const ENCODER_COLUMNS: [&str; 5] = ["step", "loss_total", "loss_align", "loss_var", "loss_cov"];
pub const EPISODE_COLUMNS: [&str; 6] = ["episode", "phase", "reward_sum", "length", "collided", "success"];

/// Series files: (file stem, source log, column).
pub const SERIES: [(&str, &str, &str); 10] = [
    ("train_cont_loss_VS_step", WORLD_MODEL_LOG, "cont_loss"),
    ("train_dyn_loss_VS_step", WORLD_MODEL_LOG, "dyn_loss"),
    ("train_kl_VS_step", WORLD_MODEL_LOG, "kl"),
    ("train_model_loss_VS_step", WORLD_MODEL_LOG, "model_loss"),
    ("train_rep_loss_VS_step", WORLD_MODEL_LOG, "rep_loss"),
    ("train_reward_loss_VS_step", WORLD_MODEL_LOG, "reward_loss"),
    ("train_loss_align_VS_step", ENCODER_LOG, "loss_align"),
    ("train_loss_cov_VS_step", ENCODER_LOG, "loss_cov"),
    ("train_loss_total_VS_step", ENCODER_LOG, "loss_total"),
    ("train_loss_var_VS_step", ENCODER_LOG, "loss_var"),
];

/// Header-first CSV writer, flushed on drop.
pub struct CsvLog {
    out: BufWriter<File>,
    columns: usize,
}

impl CsvLog {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out, columns: header.len() })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        debug_assert_eq!(fields.len(), self.columns);
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Step index followed by float values, formatted losslessly.
pub fn numeric_row(step: u64, values: &[f64]) -> Vec<String> {
    std::iter::once(step.to_string()).chain(values.iter().map(|v| v.to_string())).collect()
}

/// A parsed CSV with a header row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("cannot read log {}: {e}", path.display())))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Format(format!("log {} is empty", path.display())))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        Ok(Self { header, rows })
    }

    /// `(step, value)` pairs of a numeric column.
    pub fn series(&self, column: &str) -> Result<Vec<(u64, f64)>> {
        let find = |name: &str| {
            self.header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Format(format!("log has no column `{name}`")))
        };
        let (si, ci) = (find("step")?, find(column)?);
        self.rows
            .iter()
            .enumerate()
            .map(|(n, r)| {
                let cell = |i: usize| r.get(i).ok_or_else(|| Error::Format(format!("row {} is short", n + 1)));
                let step = cell(si)?.parse().map_err(|_| Error::Format(format!("row {}: bad step", n + 1)))?;
                let v = cell(ci)?.parse().map_err(|_| Error::Format(format!("row {}: bad `{column}`", n + 1)))?;
                Ok((step, v))
            })
            .collect()
    }
}

/// Write one `step,value` CSV and an SVG line chart per loss curve into `out`.
pub fn emit_plots(log_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    emit_series(log_dir, out, |_| true)
}

/// As [`emit_plots`], restricted to curves whose source log passes `include`.
pub fn emit_series(log_dir: &Path, out: &Path, include: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (stem, log, column) in SERIES.into_iter().filter(|(_, log, _)| include(log)) {
        let table = Table::read(&log_dir.join(log))?;
        if table.rows.is_empty() {
            return Err(Error::Format(format!("log {log} has no rows")));
        }
        let series = table.series(column)?;
        let mut csv = String::from("step,value\n");
        for (s, v) in &series {
            let _ = writeln!(csv, "{s},{v}");
        }
        let path = out.join(format!("{stem}.csv"));
        std::fs::write(&path, csv)?;
        std::fs::write(out.join(format!("{stem}.svg")), svg_chart(stem, &series))?;
        written.push(path);
    }
    Ok(written)
}

fn svg_chart(title: &str, series: &[(u64, f64)]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let finite: Vec<_> = series.iter().filter(|(_, v)| v.is_finite()).collect();
    let (x0, x1) = (
        finite.first().map_or(0.0, |p| p.0 as f64),
        finite.last().map_or(1.0, |p| p.0 as f64),
    );
    let (lo, hi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1.0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - lo) / (hi - lo) * (h - 2.0 * pad);
    let points: Vec<String> = finite.iter().map(|p| format!("{:.1},{:.1}", sx(p.0 as f64), sy(p.1))).collect();
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n\
         <text x=\"4\" y=\"{pad}\" font-family=\"sans-serif\" font-size=\"10\">{hi:.3}</text>\n\
         <text x=\"4\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{lo:.3}</text>\n\
         <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{}\"/>\n\
         </svg>\n",
        h - pad,
        points.join(" ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_logs(dir: &Path, rows: usize) {
        let mut wm = CsvLog::create(&dir.join(WORLD_MODEL_LOG), &WORLD_MODEL_COLUMNS).unwrap();
        let mut enc = CsvLog::create(&dir.join(ENCODER_LOG), &ENCODER_COLUMNS).unwrap();
        for s in 0..rows as u64 {
            wm.row(&numeric_row(s, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, s as f64])).unwrap();
            enc.row(&numeric_row(s, &[0.5, 0.25, 0.125, 0.1])).unwrap();
        }
    }

    #[test]
    fn ten_series_with_matching_rows() {
        let dir = tempfile::tempdir().unwrap();
        write_logs(dir.path(), 10);
        let out = dir.path().join("plots");
        let files = emit_plots(dir.path(), &out).unwrap();
        assert_eq!(files.len(), 10);
        for f in &files {
            let t = Table::read(f).unwrap();
            assert_eq!(t.header, vec!["step", "value"]);
            assert_eq!(t.rows.len(), 10);
        }
        let kl = Table::read(&out.join("train_kl_VS_step.csv")).unwrap().series("value").unwrap();
        assert_eq!(kl[9], (9, 9.0));
    }

    #[test]
    fn empty_or_missing_logs_fail() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plots(dir.path(), &dir.path().join("p")).is_err());
        write_logs(dir.path(), 0);
        let e = emit_plots(dir.path(), &dir.path().join("p")).unwrap_err();
        assert!(e.to_string().contains("no rows"), "{e}");
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut wm = CsvLog::create(&dir.path().join(WORLD_MODEL_LOG), &["step", "model_loss"]).unwrap();
        wm.row(&numeric_row(0, &[1.0])).unwrap();
        drop(wm);
        let e = emit_plots(dir.path(), &dir.path().join("p")).unwrap_err();
        assert!(e.to_string().contains("cont_loss"), "{e}");
    }
}
