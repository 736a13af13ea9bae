//! Per-step training metrics. `metrics.csv` holds only seed-determined values so
//! repeated runs are byte-identical; wall-clock time goes to `timing.csv`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::trainer::StepReport;
use crate::error::{CoreError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";

pub struct MetricsWriter {
    metrics: csv::Writer<BufWriter<File>>,
    timing: csv::Writer<BufWriter<File>>,
}

fn open(dir: &Path, name: &str, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| CoreError::io(&path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(header).map_err(|e| csv_err(&path, e))?;
    Ok(w)
}

fn csv_err(path: &Path, e: csv::Error) -> CoreError {
    CoreError::io(path, std::io::Error::other(e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        Ok(MetricsWriter {
            metrics: open(dir, METRICS_FILE, &["step", "loss", "mean_gate", "lr"])?,
            timing: open(dir, TIMING_FILE, &["step", "wall_seconds"])?,
        })
    }

    pub fn append(&mut self, r: &StepReport, lr: f64, wall: f64) -> Result<()> {
        let step = r.step.to_string();
        self.metrics
            .write_record([
                step.as_str(),
                &opt(r.loss),
                &opt(r.mean_gate),
                &lr.to_string(),
            ])
            .map_err(|e| csv_err(Path::new(METRICS_FILE), e))?;
        self.timing
            .write_record([step.as_str(), &format!("{wall:.4}")])
            .map_err(|e| csv_err(Path::new(TIMING_FILE), e))?;
        self.flush()
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics
            .flush()
            .and_then(|_| self.timing.flush())
            .map_err(|e| CoreError::io(METRICS_FILE, e))
    }
}

/// Reads the `mean_gate` column of a metrics CSV as `(step, value)` pairs, skipping
/// rows where it is empty.
pub fn read_mean_gate(path: &Path) -> Result<Vec<(u64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CoreError::data(format!("{}: no `{name}` column", path.display())))
    };
    let (si, gi) = (col("step")?, col("mean_gate")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let g = rec.get(gi).unwrap_or("");
        if g.is_empty() {
            continue;
        }
        let parse_err = |what: &str| {
            CoreError::data(format!("{}: bad {what} in row {:?}", path.display(), rec))
        };
        let step = rec
            .get(si)
            .unwrap_or("")
            .parse()
            .map_err(|_| parse_err("step"))?;
        let value = g.parse().map_err(|_| parse_err("mean_gate"))?;
        out.push((step, value));
    }
    Ok(out)
}
