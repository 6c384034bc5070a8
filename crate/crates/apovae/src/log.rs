//! Metrics CSV: a `# config: <json>` line with the resolved config, then
//! `iter,L1,L2,recon,kl_est,wall_ms` and one row per iteration. Floats use
//! the shortest representation that reads back to the same value.

use std::io::Write;

use apovae_core::trainer::{IterLog, TrainConfig};

use crate::error::{Error, Result};

pub const HEADER: &str = "iter,L1,L2,recon,kl_est,wall_ms";

pub struct MetricsLog<W: Write> {
    out: W,
}

fn io_err(e: std::io::Error) -> Error {
    Error::Data(format!("cannot write metrics: {e}"))
}

impl<W: Write> MetricsLog<W> {
    /// Writes the config line and the column header.
    pub fn create(mut out: W, config: &TrainConfig) -> Result<Self> {
        let json = serde_json::to_string(config).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "# config: {json}").map_err(io_err)?;
        writeln!(out, "{HEADER}").map_err(io_err)?;
        Ok(MetricsLog { out })
    }

    /// Continues an existing log without writing a header.
    pub fn resume(out: W) -> Self {
        MetricsLog { out }
    }

    pub fn append(&mut self, r: &IterLog) -> Result<()> {
        writeln!(self.out, "{},{},{},{},{},{}", r.iter, r.l1, r.l2, r.recon, r.kl_est, r.wall_ms).map_err(io_err)
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush().map_err(io_err)?;
        Ok(self.out)
    }
}
