//! Report rows and their on-disk forms: one JSON object per line in
//! `report.json` and the same rows flattened into `report.csv`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config_id: String,
    pub mode: String,
    pub temperature: f64,
    /// `None` on rows that average over seeds.
    pub seed: Option<u64>,
    pub tau: f64,
    pub speedup: f64,
    pub time_per_token_s: f64,
    pub ar_time_per_token_s: f64,
    pub flops_per_token: f64,
    pub ar_flops_per_token: f64,
    /// Model-time proxy for the speedup: baseline FLOPs over speculative FLOPs per token.
    pub flop_speedup: f64,
    pub rounds: usize,
    pub generated: usize,
    /// `accept_hist[j]`: rounds that accepted exactly `j` drafted tokens.
    pub accept_hist: Vec<usize>,
    /// Fraction of prompts matching plain greedy decoding; temperature 0 only.
    pub greedy_match: Option<f64>,
    /// τ and speedup relative to a reference row, for ablation tables.
    pub tau_norm: Option<f64>,
    pub speedup_norm: Option<f64>,
}

const HEADER: [&str; 17] = [
    "config_id",
    "mode",
    "temperature",
    "seed",
    "tau",
    "speedup",
    "time_per_token_s",
    "ar_time_per_token_s",
    "flops_per_token",
    "ar_flops_per_token",
    "flop_speedup",
    "rounds",
    "generated",
    "accept_hist",
    "greedy_match",
    "tau_norm",
    "speedup_norm",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl BenchRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.config_id.clone(),
            self.mode.clone(),
            self.temperature.to_string(),
            opt(self.seed),
            self.tau.to_string(),
            self.speedup.to_string(),
            self.time_per_token_s.to_string(),
            self.ar_time_per_token_s.to_string(),
            self.flops_per_token.to_string(),
            self.ar_flops_per_token.to_string(),
            self.flop_speedup.to_string(),
            self.rounds.to_string(),
            self.generated.to_string(),
            self.accept_hist.iter().map(ToString::to_string).collect::<Vec<_>>().join(";"),
            opt(self.greedy_match),
            opt(self.tau_norm),
            opt(self.speedup_norm),
        ]
    }

    fn parse(rec: &csv::StringRecord) -> std::result::Result<Self, String> {
        if rec.len() != HEADER.len() {
            return Err(format!("expected {} fields, got {}", HEADER.len(), rec.len()));
        }
        fn num<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String> {
            s.parse().map_err(|_| format!("bad number {s:?}"))
        }
        fn maybe<T: std::str::FromStr>(s: &str) -> std::result::Result<Option<T>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        }
        let hist = if rec[13].is_empty() {
            Vec::new()
        } else {
            rec[13].split(';').map(num).collect::<std::result::Result<_, _>>()?
        };
        Ok(Self {
            config_id: rec[0].to_string(),
            mode: rec[1].to_string(),
            temperature: num(&rec[2])?,
            seed: maybe(&rec[3])?,
            tau: num(&rec[4])?,
            speedup: num(&rec[5])?,
            time_per_token_s: num(&rec[6])?,
            ar_time_per_token_s: num(&rec[7])?,
            flops_per_token: num(&rec[8])?,
            ar_flops_per_token: num(&rec[9])?,
            flop_speedup: num(&rec[10])?,
            rounds: num(&rec[11])?,
            generated: num(&rec[12])?,
            accept_hist: hist,
            greedy_match: maybe(&rec[14])?,
            tau_norm: maybe(&rec[15])?,
            speedup_norm: maybe(&rec[16])?,
        })
    }
}

/// Writes `rows` to `dir/report.json` and `dir/report.csv`.
pub fn write_report(dir: &Path, rows: &[BenchRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json_path = dir.join("report.json");
    let mut json = std::io::BufWriter::new(fs::File::create(&json_path).map_err(io_err(&json_path))?);
    for row in rows {
        let line = serde_json::to_string(row).expect("plain struct serializes");
        writeln!(json, "{line}").map_err(io_err(&json_path))?;
    }
    json.flush().map_err(io_err(&json_path))?;

    let csv_path = dir.join("report.csv");
    let csv_err = |e: csv::Error| HarnessError::Config(format!("{}: {e}", csv_path.display()));
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record(HEADER).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.record()).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&csv_path))
}

pub fn read_csv_rows(path: &Path) -> Result<Vec<BenchRow>> {
    let bad = |m: String| HarnessError::Config(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(BenchRow::parse(&rec.map_err(|e| bad(e.to_string()))?).map_err(bad)?);
    }
    Ok(rows)
}

/// Reads `report.json` back; used by the acceptance suite.
pub fn read_json_rows(path: &Path) -> Result<Vec<BenchRow>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display()))))
        .collect()
}
