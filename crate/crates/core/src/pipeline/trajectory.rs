//! Trajectory logs.
//!
//! A log starts with the resolved run configuration as TOML, every line
//! prefixed by `# `, followed by a CSV table with one row per particle per
//! filter step:
//!
//! ```text
//! epoch,particle_index,d_i,d_0,delta,w_before,w_after,resampled_flag,p_1,...,p_n
//! ```
//!
//! `w_after` is the normalized weight before any resampling; `delta` is `NaN`
//! when the step's measurement was skipped. Floats are written in their
//! shortest round-trip form so the log can be replayed exactly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::filter::weight_multiplier;

use super::config::PipelineConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub epoch: u64,
    pub particle_index: usize,
    pub d_i: f64,
    pub d_0: f64,
    pub delta: f64,
    pub w_before: f64,
    pub w_after: f64,
    pub resampled: bool,
    pub state: Vec<f64>,
}

pub fn csv_header(state_dim: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch",
        "particle_index",
        "d_i",
        "d_0",
        "delta",
        "w_before",
        "w_after",
        "resampled_flag",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=state_dim).map(|j| format!("p_{j}")));
    h
}

/// Renders `text` as `# `-prefixed comment lines.
pub fn comment_block(text: &str) -> String {
    text.lines().map(|l| format!("# {l}\n")).collect()
}

pub struct TrajectoryWriter<W: Write> {
    csv: csv::Writer<W>,
}

impl TrajectoryWriter<BufWriter<fs::File>> {
    /// Creates a new log at `path` with the config echo and CSV header.
    pub fn create(path: &Path, config: &PipelineConfig, state_dim: usize) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        TrajectoryWriter::new(BufWriter::new(file), config, state_dim).map_err(|e| match e {
            Error::Invalid(msg) => Error::load(path, msg),
            other => other,
        })
    }

    /// Opens an existing log for appending rows.
    pub fn append(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(TrajectoryWriter {
            csv: csv::WriterBuilder::new().from_writer(BufWriter::new(file)),
        })
    }
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(mut inner: W, config: &PipelineConfig, state_dim: usize) -> Result<Self> {
        inner
            .write_all(comment_block(&config.to_toml_string()).as_bytes())
            .map_err(|e| Error::Invalid(format!("writing trajectory header: {e}")))?;
        let mut csv = csv::Writer::from_writer(inner);
        csv.write_record(csv_header(state_dim))
            .map_err(|e| Error::Invalid(format!("writing trajectory header: {e}")))?;
        Ok(TrajectoryWriter { csv })
    }

    pub fn write_rows(&mut self, rows: &[TrajectoryRow]) -> Result<()> {
        for r in rows {
            let mut rec = vec![
                r.epoch.to_string(),
                r.particle_index.to_string(),
                r.d_i.to_string(),
                r.d_0.to_string(),
                r.delta.to_string(),
                r.w_before.to_string(),
                r.w_after.to_string(),
                u8::from(r.resampled).to_string(),
            ];
            rec.extend(r.state.iter().map(|x| x.to_string()));
            self.csv
                .write_record(&rec)
                .map_err(|e| Error::Invalid(format!("writing trajectory row: {e}")))?;
        }
        self.csv
            .flush()
            .map_err(|e| Error::Invalid(format!("flushing trajectory: {e}")))
    }

    pub fn into_inner(self) -> Result<W> {
        self.csv
            .into_inner()
            .map_err(|e| Error::Invalid(format!("flushing trajectory: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// The configuration echoed in the header block.
    pub config_text: String,
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn config(&self) -> Result<PipelineConfig> {
        PipelineConfig::from_toml_str(&self.config_text)
    }

    /// Rows grouped by filter step, in log order.
    pub fn steps(&self) -> Vec<&[TrajectoryRow]> {
        self.rows.chunk_by(|a, b| a.epoch == b.epoch).collect()
    }
}

pub fn parse_trajectory(text: &str) -> Result<Trajectory> {
    let mut config_text = String::new();
    let mut body = String::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            config_text.push_str(rest.strip_prefix(' ').unwrap_or(rest));
            config_text.push('\n');
        } else {
            body.push_str(line);
            body.push('\n');
        }
    }
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let bad = |what: &str| Error::Invalid(format!("trajectory row {}: bad {what}", i + 1));
        let rec = rec.map_err(|e| Error::Invalid(format!("trajectory row {}: {e}", i + 1)))?;
        if rec.len() < 8 {
            return Err(bad("field count"));
        }
        let f = |j: usize, what: &str| rec[j].parse::<f64>().map_err(|_| bad(what));
        rows.push(TrajectoryRow {
            epoch: rec[0].parse().map_err(|_| bad("epoch"))?,
            particle_index: rec[1].parse().map_err(|_| bad("particle_index"))?,
            d_i: f(2, "d_i")?,
            d_0: f(3, "d_0")?,
            delta: f(4, "delta")?,
            w_before: f(5, "w_before")?,
            w_after: f(6, "w_after")?,
            resampled: match &rec[7] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("resampled_flag")),
            },
            state: (8..rec.len()).map(|j| f(j, "state")).collect::<Result<_>>()?,
        });
    }
    Ok(Trajectory { config_text, rows })
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_trajectory(&text).map_err(|e| Error::load(path, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplaySummary {
    pub steps: usize,
    pub skipped_steps: usize,
    pub resampled_steps: usize,
    /// Largest deviation between a logged and a recomputed weight.
    pub max_weight_error: f64,
}

/// Recomputes every logged weight update from `(d_i, d_0, w_before, eta)`
/// and checks it against the logged `w_after` within `tolerance`. Also
/// checks each step's `w_before` against the previous step's outcome.
pub fn replay(traj: &Trajectory, eta: f64, tolerance: f64) -> Result<ReplaySummary> {
    let mut summary = ReplaySummary {
        steps: 0,
        skipped_steps: 0,
        resampled_steps: 0,
        max_weight_error: 0.0,
    };
    let mut carried: Option<Vec<f64>> = None;
    for step in traj.steps() {
        let epoch = step[0].epoch;
        let fail = |msg: String| Error::Invalid(format!("epoch {epoch}: {msg}"));
        let r = step.len();
        let w_before: Vec<f64> = step.iter().map(|row| row.w_before).collect();
        if let Some(prev) = &carried {
            let err = max_abs_diff(prev, &w_before);
            if err > tolerance {
                return Err(fail(format!("w_before deviates from the previous step by {err:e}")));
            }
        }
        let d_0 = step[0].d_0;
        let skipped = !step[0].delta.is_finite();
        let expected: Vec<f64> = if skipped {
            summary.skipped_steps += 1;
            w_before.clone()
        } else {
            for row in step {
                let delta = row.d_i / d_0;
                if (delta - row.delta).abs() > tolerance * delta.abs().max(1.0) {
                    return Err(fail(format!(
                        "particle {}: logged delta {} but d_i / d_0 = {delta}",
                        row.particle_index, row.delta
                    )));
                }
            }
            let unnormalized: Vec<f64> = step
                .iter()
                .map(|row| weight_multiplier(row.d_i / d_0, eta) * row.w_before)
                .collect();
            let total: f64 = unnormalized.iter().sum();
            if total > 0.0 {
                unnormalized.iter().map(|w| w / total).collect()
            } else {
                vec![1.0 / r as f64; r]
            }
        };
        let logged: Vec<f64> = step.iter().map(|row| row.w_after).collect();
        let err = max_abs_diff(&expected, &logged);
        if err > tolerance {
            return Err(fail(format!("w_after deviates from the recomputed update by {err:e}")));
        }
        summary.max_weight_error = summary.max_weight_error.max(err);
        summary.steps += 1;
        carried = Some(if step[0].resampled {
            summary.resampled_steps += 1;
            vec![1.0 / r as f64; r]
        } else {
            logged
        });
    }
    Ok(summary)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
