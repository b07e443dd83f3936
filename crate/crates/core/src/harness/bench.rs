//! Speculative decoding against the plain autoregressive baseline on held-out
//! prompts: acceptance length, wall-clock speedup and FLOPs per token.

use serde::Serialize;

use super::config::RunConfig;
use super::pipeline::{datasets, load_draft, load_target};
use super::report::{write_report, BenchRow};
use super::Result;
use crate::engine::{ar_baseline, decode, prefill, DecodeConfig, DecodeMode, Drafter};
use crate::model::TargetModel;
use crate::task::TaskSample;

/// Aggregate over a prompt set. τ is pooled: committed tokens over rounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptEval {
    pub tau: f64,
    pub rounds: usize,
    pub generated: usize,
    /// Median over timing runs of decode time per generated token.
    pub time_per_token_s: f64,
    pub ar_time_per_token_s: f64,
    pub flops_per_token: f64,
    pub ar_flops_per_token: f64,
    pub accept_hist: Vec<usize>,
    /// Fraction of prompts whose output equals the baseline's; temperature 0 only.
    pub greedy_match: Option<f64>,
}

impl PromptEval {
    pub fn speedup(&self) -> f64 {
        self.ar_time_per_token_s / self.time_per_token_s
    }
}

/// Decode seed for prompt `i` of a run seeded with `seed`.
pub(crate) fn prompt_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Decodes every prompt with `drafter` and with the baseline. The statistics
/// come from the first run; later runs only add timing samples.
pub fn evaluate_prompts(
    target: &TargetModel,
    drafter: Drafter<'_>,
    prompts: &[TaskSample],
    dcfg: &DecodeConfig,
    timing_runs: usize,
) -> Result<PromptEval> {
    let mut sd_times = Vec::new();
    let mut ar_times = Vec::new();
    let mut eval = None;
    for run in 0..timing_runs.max(1) {
        let (mut sd_wall, mut ar_wall) = (0.0, 0.0);
        let (mut committed, mut rounds, mut generated, mut ar_generated) = (0, 0, 0, 0);
        let (mut flops, mut ar_flops) = (0u64, 0u64);
        let mut hist: Vec<usize> = Vec::new();
        let mut matches = 0;
        for (i, s) in prompts.iter().enumerate() {
            let cfg = DecodeConfig {
                seed: prompt_seed(dcfg.seed, i),
                ..dcfg.clone()
            };
            let prefix = s.prefix();
            let mut session = prefill(target, drafter, &prefix, &cfg)?;
            let (out, m) = decode(&mut session)?;
            sd_wall += m.wall_time_s;
            generated += m.generated;
            let ar = ar_baseline(target, &prefix, &cfg)?;
            ar_wall += ar.wall_time_s;
            ar_generated += ar.tokens.len();
            if run > 0 {
                continue;
            }
            ar_flops += ar.step_flops.iter().sum::<u64>();
            committed += m.rounds.iter().sum::<usize>();
            rounds += m.rounds.len();
            flops += m.target_flops + m.draft_flops;
            if hist.len() < m.accept_hist.len() {
                hist.resize(m.accept_hist.len(), 0);
            }
            for (h, c) in hist.iter_mut().zip(&m.accept_hist) {
                *h += c;
            }
            matches += usize::from(out.tokens() == ar.tokens.as_slice());
        }
        sd_times.push(sd_wall / generated.max(1) as f64);
        ar_times.push(ar_wall / ar_generated.max(1) as f64);
        if run == 0 {
            eval = Some(PromptEval {
                tau: committed as f64 / rounds.max(1) as f64,
                rounds,
                generated,
                time_per_token_s: 0.0,
                ar_time_per_token_s: 0.0,
                flops_per_token: flops as f64 / generated.max(1) as f64,
                ar_flops_per_token: ar_flops as f64 / ar_generated.max(1) as f64,
                accept_hist: hist,
                greedy_match: (dcfg.temperature == 0.0).then(|| matches as f64 / prompts.len().max(1) as f64),
            });
        }
    }
    let mut eval = eval.expect("at least one run");
    eval.time_per_token_s = median(sd_times);
    eval.ar_time_per_token_s = median(ar_times);
    Ok(eval)
}

pub(crate) fn bench_row(config_id: String, dcfg: &DecodeConfig, seed: Option<u64>, e: &PromptEval) -> BenchRow {
    BenchRow {
        config_id,
        mode: dcfg.mode.to_string(),
        temperature: dcfg.temperature,
        seed,
        tau: e.tau,
        speedup: e.speedup(),
        time_per_token_s: e.time_per_token_s,
        ar_time_per_token_s: e.ar_time_per_token_s,
        flops_per_token: e.flops_per_token,
        ar_flops_per_token: e.ar_flops_per_token,
        flop_speedup: e.ar_flops_per_token / e.flops_per_token,
        rounds: e.rounds,
        generated: e.generated,
        accept_hist: e.accept_hist.clone(),
        greedy_match: e.greedy_match,
        tau_norm: None,
        speedup_norm: None,
    }
}

/// Field-wise mean of per-seed rows; histograms are summed. Both speedups are
/// recomputed from the averaged costs so the row stays self-consistent.
fn mean_row(config_id: String, rows: &[BenchRow]) -> BenchRow {
    let n = rows.len() as f64;
    let mean = |f: fn(&BenchRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mut hist: Vec<usize> = Vec::new();
    for r in rows {
        if hist.len() < r.accept_hist.len() {
            hist.resize(r.accept_hist.len(), 0);
        }
        for (h, c) in hist.iter_mut().zip(&r.accept_hist) {
            *h += c;
        }
    }
    let greedy: Vec<f64> = rows.iter().filter_map(|r| r.greedy_match).collect();
    let (time, ar_time) = (mean(|r| r.time_per_token_s), mean(|r| r.ar_time_per_token_s));
    let (flops, ar_flops) = (mean(|r| r.flops_per_token), mean(|r| r.ar_flops_per_token));
    BenchRow {
        config_id,
        mode: rows[0].mode.clone(),
        temperature: rows[0].temperature,
        seed: None,
        tau: mean(|r| r.tau),
        speedup: ar_time / time,
        time_per_token_s: time,
        ar_time_per_token_s: ar_time,
        flops_per_token: flops,
        ar_flops_per_token: ar_flops,
        flop_speedup: ar_flops / flops,
        rounds: rows.iter().map(|r| r.rounds).sum(),
        generated: rows.iter().map(|r| r.generated).sum(),
        accept_hist: hist,
        greedy_match: (!greedy.is_empty()).then(|| greedy.iter().sum::<f64>() / greedy.len() as f64),
        tau_norm: None,
        speedup_norm: None,
    }
}

/// One row per (mode, temperature, seed) and a seed-averaged row per
/// (mode, temperature), written under `reports/bench`.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let target = load_target(cfg)?;
    let draft = load_draft(cfg)?;
    let test = datasets(cfg).test;
    let prompts = &test[..cfg.bench.prompts.min(test.len())];
    let modes = if cfg.bench.sweep_modes {
        vec![DecodeMode::Chain, DecodeMode::Tree]
    } else {
        vec![cfg.decode.mode]
    };
    let mut rows = Vec::new();
    for mode in modes {
        for &temperature in &cfg.bench.temperatures {
            let mut per_seed = Vec::new();
            for &seed in &cfg.bench.seeds {
                let dcfg = DecodeConfig {
                    mode,
                    temperature,
                    seed,
                    ..cfg.decode.clone()
                };
                let e = evaluate_prompts(&target, Drafter::Dream(&draft), prompts, &dcfg, cfg.bench.timing_runs)?;
                log::info!("bench {mode} T={temperature} seed={seed}: tau {:.3}, speedup {:.3}", e.tau, e.speedup());
                per_seed.push(bench_row(format!("dream-{mode}-t{temperature}-s{seed}"), &dcfg, Some(seed), &e));
            }
            if !per_seed.is_empty() {
                let mean = mean_row(format!("dream-{mode}-t{temperature}-mean"), &per_seed);
                rows.extend(per_seed);
                rows.push(mean);
            }
        }
    }
    write_report(&cfg.paths.reports("bench"), &rows)?;
    Ok(rows)
}
