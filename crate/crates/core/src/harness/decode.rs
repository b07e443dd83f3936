//! Speculative decoding over the test prompts with a per-round transcript.

use std::fs;
use std::io::{BufWriter, Write};

use serde::Serialize;

use super::bench::prompt_seed;
use super::config::RunConfig;
use super::pipeline::{datasets, load_draft, load_target};
use super::{io_err, Result};
use crate::engine::{decode, prefill, DecodeConfig, Drafter, RoundRecord};

#[derive(Serialize)]
struct TranscriptLine<'a> {
    prompt: &'a str,
    #[serde(flatten)]
    record: &'a RoundRecord,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecodeSummary {
    pub prompts: usize,
    pub rounds: usize,
    pub generated: usize,
    pub tau: f64,
    pub transcript: String,
}

/// Decodes the first `bench.prompts` test prompts with `cfg.decode` and writes
/// `transcript.jsonl` (one line per round, tagged with the prompt id) and
/// `outputs.tsv` under `reports/decode`.
pub fn cmd_decode(cfg: &RunConfig) -> Result<DecodeSummary> {
    let target = load_target(cfg)?;
    let draft = load_draft(cfg)?;
    let test = datasets(cfg).test;
    let prompts = &test[..cfg.bench.prompts.min(test.len())];
    let dir = cfg.paths.reports("decode");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let transcript_path = dir.join("transcript.jsonl");
    let outputs_path = dir.join("outputs.tsv");
    let mut transcript = BufWriter::new(fs::File::create(&transcript_path).map_err(io_err(&transcript_path))?);
    let mut outputs = BufWriter::new(fs::File::create(&outputs_path).map_err(io_err(&outputs_path))?);
    let (mut rounds, mut committed, mut generated) = (0, 0, 0);
    for (i, s) in prompts.iter().enumerate() {
        let dcfg = DecodeConfig {
            seed: prompt_seed(cfg.decode.seed, i),
            ..cfg.decode.clone()
        };
        let mut session = prefill(&target, Drafter::Dream(&draft), &s.prefix(), &dcfg)?;
        let (out, m) = decode(&mut session)?;
        let id = s.id();
        for record in session.records() {
            let line = serde_json::to_string(&TranscriptLine { prompt: &id, record }).expect("plain struct serializes");
            writeln!(transcript, "{line}").map_err(io_err(&transcript_path))?;
        }
        let toks: Vec<String> = out.tokens().iter().map(ToString::to_string).collect();
        writeln!(outputs, "{id}\t{}", toks.join(" ")).map_err(io_err(&outputs_path))?;
        rounds += m.rounds.len();
        committed += m.rounds.iter().sum::<usize>();
        generated += m.generated;
    }
    transcript.flush().map_err(io_err(&transcript_path))?;
    outputs.flush().map_err(io_err(&outputs_path))?;
    Ok(DecodeSummary {
        prompts: prompts.len(),
        rounds,
        generated,
        tau: committed as f64 / rounds.max(1) as f64,
        transcript: transcript_path.display().to_string(),
    })
}
