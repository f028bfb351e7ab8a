//! Append-only JSONL metrics, plus conversion to per-metric CSV for plots.
//!
//! The first row of every stream echoes the resolved config; each later row
//! is one `MetricRecord` with absent fields omitted, so the same schema
//! serves episode ends, update statistics, and evaluation points.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub env_step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episode: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episode_return: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_return_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_return_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_return_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_return_max: Option<f64>,
    #[serde(rename = "loss/model_total", skip_serializing_if = "Option::is_none")]
    pub model_total: Option<f64>,
    #[serde(rename = "loss/reward", skip_serializing_if = "Option::is_none")]
    pub reward_loss: Option<f64>,
    #[serde(rename = "loss/consistency", skip_serializing_if = "Option::is_none")]
    pub consistency_loss: Option<f64>,
    #[serde(rename = "latent/max_abs", skip_serializing_if = "Option::is_none")]
    pub latent_max_abs: Option<f64>,
    #[serde(rename = "latent/degenerate_rows", skip_serializing_if = "Option::is_none")]
    pub degenerate_rows: Option<u64>,
    #[serde(rename = "loss/critic", skip_serializing_if = "Option::is_none")]
    pub critic_loss: Option<f64>,
    #[serde(rename = "loss/actor", skip_serializing_if = "Option::is_none")]
    pub actor_loss: Option<f64>,
    #[serde(rename = "q/mean", skip_serializing_if = "Option::is_none")]
    pub q_mean: Option<f64>,
    #[serde(rename = "sigma/current", skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(rename = "loss/ensemble", skip_serializing_if = "Option::is_none")]
    pub ensemble_loss: Option<f64>,
    #[serde(rename = "wall_ms_per_1k", skip_serializing_if = "Option::is_none")]
    pub wall_ms_per_1k: Option<f64>,
}

impl MetricRecord {
    pub fn at(env_step: u64) -> MetricRecord {
        MetricRecord {
            env_step,
            ..Default::default()
        }
    }
}

/// Single-writer JSONL sink.
pub struct MetricsWriter {
    out: BufWriter<File>,
    last_step: u64,
}

impl MetricsWriter {
    /// Create (truncate) the stream and echo the config as its first row.
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<MetricsWriter> {
        let mut w = MetricsWriter {
            out: BufWriter::new(File::create(path)?),
            last_step: 0,
        };
        let echo = serde_json::json!({ "config": cfg });
        serde_json::to_writer(&mut w.out, &echo)?;
        w.out.write_all(b"\n")?;
        Ok(w)
    }

    /// Append to an existing stream (resume); no new config echo.
    pub fn append(path: &Path, last_step: u64) -> Result<MetricsWriter> {
        Ok(MetricsWriter {
            out: BufWriter::new(File::options().append(true).open(path)?),
            last_step,
        })
    }

    pub fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        debug_assert!(
            rec.env_step >= self.last_step,
            "metric steps must be nondecreasing"
        );
        self.last_step = rec.env_step;
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Read back a metrics stream: (config row if present, records).
pub fn read_metrics(path: &Path) -> Result<(Option<RunConfig>, Vec<MetricRecord>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut cfg = None;
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)?;
        if let Some(c) = value.get("config") {
            cfg = Some(serde_json::from_value(c.clone())?);
        } else {
            records.push(serde_json::from_value(value)?);
        }
    }
    Ok((cfg, records))
}

/// Explode a JSONL stream into one `<metric>.csv` per numeric field, each
/// with an `env_step,value` header. Slashes in metric names become
/// underscores in file names. Returns the files written.
pub fn emit_csv(metrics_path: &Path, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let reader = BufReader::new(File::open(metrics_path)?);
    let mut columns: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)?;
        if value.get("config").is_some() {
            continue;
        }
        let step = value
            .get("env_step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Corrupt("metric row without env_step".into()))?;
        if let Some(obj) = value.as_object() {
            for (k, v) in obj {
                if k == "env_step" {
                    continue;
                }
                if let Some(x) = v.as_f64() {
                    columns.entry(k.clone()).or_default().push((step, x));
                }
            }
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (name, rows) in columns {
        let fname = format!("{}.csv", name.replace('/', "_"));
        let path = out_dir.join(fname);
        let mut f = BufWriter::new(File::create(&path)?);
        writeln!(f, "env_step,{name}")?;
        for (step, v) in rows {
            writeln!(f, "{step},{v}")?;
        }
        f.flush()?;
        written.push(path);
    }
    Ok(written)
}
