use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::losses::LossParts;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub stage: String,
    /// Counted across stages so records stay in increasing order.
    pub iteration: usize,
    pub lr: f64,
    pub parts: LossParts,
    pub total: f64,
    pub gamma_l1: f64,
    pub discriminator: Option<f64>,
    pub accuracy: Option<f64>,
}

impl MetricsRecord {
    /// One line of space-separated `key=value` fields.
    pub fn to_line(&self) -> String {
        let p = &self.parts;
        let mut s = format!(
            "stage={} iteration={} lr={} supervision={} l1={} distillation={} aligner={} rademacher={} total={} gamma_l1={}",
            self.stage, self.iteration, self.lr, p.supervision, p.l1, p.distillation, p.aligner, p.rademacher, self.total, self.gamma_l1
        );
        if let Some(d) = self.discriminator {
            s.push_str(&format!(" discriminator={d}"));
        }
        if let Some(a) = self.accuracy {
            s.push_str(&format!(" accuracy={a}"));
        }
        s
    }
}

/// Append-only record collector that optionally mirrors every record to
/// a file.
#[derive(Default)]
pub struct MetricsSink {
    pub records: Vec<MetricsRecord>,
    file: Option<BufWriter<File>>,
}

impl MetricsSink {
    pub fn memory() -> Self {
        Self::default()
    }

    /// Truncates `path` and streams records into it.
    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(Self { records: Vec::new(), file: Some(BufWriter::new(File::create(path)?)) })
    }

    pub fn push(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            debug_assert!(record.iteration >= last.iteration, "metrics iterations must not go back");
        }
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", record.to_line())?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Writes free-form `key=value` summary lines after the records.
    pub fn summary(&mut self, lines: &str) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.write_all(lines.as_bytes())?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}
