//! Ablation sweep: each variant retrains a draft under the same step budget
//! (or reuses the reference draft when its training setup is unchanged) and is
//! scored by greedy acceptance length on held-out prompts.

use std::fs;
use std::path::Path;

use super::bench::{bench_row, evaluate_prompts};
use super::config::{LayerStrategy, RunConfig};
use super::pipeline::{datasets, draft_training_samples, layer_choice, load_target, read_responses, train_draft_variant};
use super::report::{write_report, BenchRow};
use super::{io_err, HarnessError, Result};
use crate::engine::{DecodeConfig, DecodeMode, Drafter};
use crate::model::{DraftModel, TargetModel};

/// Name of the reference variant every row is normalised against.
pub const REFERENCE: &str = "full";

#[derive(Debug, Clone)]
pub struct AblationVariant {
    pub name: String,
    /// Which study the variant belongs to: `arch`, `layer`, `keep`, `lambda` or `mode`.
    pub group: &'static str,
    pub config: RunConfig,
}

/// The reference configuration followed by every ablation of it.
pub fn ablation_variants(base: &RunConfig) -> Vec<AblationVariant> {
    let mut out = vec![AblationVariant {
        name: REFERENCE.into(),
        group: "reference",
        config: base.clone(),
    }];
    let mut add = |name: String, group: &'static str, edit: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        edit(&mut config);
        out.push(AblationVariant { name, group, config });
    };
    add("wo-initial".into(), "arch", &|c| c.draft.initial_block = false);
    add("wo-ca".into(), "arch", &|c| c.draft.cross_blocks = 0);
    add("wo-final".into(), "arch", &|c| c.draft.final_block = false);
    add("two-ca".into(), "arch", &|c| c.draft.cross_blocks = 2);
    add("no-mid".into(), "layer", &|c| c.loss.intermed = 0.0);
    for pct in [25, 50, 75] {
        add(format!("static-{pct}"), "layer", &move |c| {
            c.layers.strategy = LayerStrategy::Static;
            c.layers.fraction = f64::from(pct) / 100.0;
        });
    }
    add("dyn-ent".into(), "layer", &|c| c.layers.strategy = LayerStrategy::Dynamic);
    for keep in [1.0, 0.75, 0.5, 0.25] {
        add(format!("keep-{keep}"), "keep", &move |c| {
            c.decode.vtc = true;
            c.decode.keep_fraction = keep;
        });
    }
    for lambda in [0.05, 0.1, 0.2, 0.4] {
        add(format!("lambda-{lambda}"), "lambda", &move |c| {
            c.loss.feat = lambda;
            c.loss.intermed = lambda;
        });
    }
    add("chain".into(), "mode", &|c| c.decode.mode = DecodeMode::Chain);
    out
}

/// Everything that shapes a trained draft, plus a digest of the target it was
/// distilled from.
fn training_key(cfg: &RunConfig, target_digest: u64) -> String {
    let keep = if cfg.decode.vtc { cfg.decode.keep_fraction } else { 1.0 };
    format!(
        "{:?}|{:?}|{:?}|{:?}|keep={keep}|target={target_digest:016x}",
        cfg.draft, cfg.loss, cfg.layers, cfg.draft_train
    )
}

fn file_digest(path: &Path) -> Result<u64> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(h)
}

/// Loads the cached draft for `key` or trains and caches a new one.
fn variant_draft(cfg: &RunConfig, target: &TargetModel, name: &str, key: &str) -> Result<DraftModel> {
    let dir = cfg.paths.variants();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let ckpt = dir.join(format!("{name}.drmt"));
    let key_path = dir.join(format!("{name}.key"));
    if ckpt.exists() && fs::read_to_string(&key_path).is_ok_and(|k| k == key) {
        log::info!("ablation {name}: reusing {}", ckpt.display());
        return Ok(DraftModel::load(&ckpt)?);
    }
    log::info!("ablation {name}: training");
    let responses = read_responses(&cfg.paths.responses())?;
    let choice = layer_choice(cfg)?;
    let samples = draft_training_samples(cfg, target, &responses, &choice)?;
    let (draft, _) = train_draft_variant(cfg, target, &samples, None)?;
    draft.save(&ckpt)?;
    fs::write(&key_path, key).map_err(io_err(&key_path))?;
    Ok(draft)
}

/// Trains (or reuses) every selected variant and reports τ at temperature 0,
/// normalised to the reference row.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let target = load_target(cfg)?;
    let digest = file_digest(&cfg.paths.target())?;
    let variants: Vec<AblationVariant> = ablation_variants(cfg)
        .into_iter()
        .filter(|v| v.name == REFERENCE || cfg.ablate.variants.is_empty() || cfg.ablate.variants.contains(&v.name))
        .collect();
    if let Some(unknown) = cfg.ablate.variants.iter().find(|n| !variants.iter().any(|v| &&v.name == n)) {
        return Err(HarnessError::Config(format!("unknown ablation variant {unknown:?}")));
    }
    let test = datasets(cfg).test;
    let prompts = &test[..cfg.ablate.prompts.min(test.len())];
    let reference_key = training_key(cfg, digest);
    let mut rows: Vec<BenchRow> = Vec::new();
    for v in &variants {
        let key = training_key(&v.config, digest);
        // variants whose training matches the reference share its draft
        let cache_name = if key == reference_key { REFERENCE } else { v.name.as_str() };
        let draft = variant_draft(&v.config, &target, cache_name, &key)?;
        let dcfg = DecodeConfig {
            temperature: 0.0,
            ..v.config.decode.clone()
        };
        let e = evaluate_prompts(&target, Drafter::Dream(&draft), prompts, &dcfg, 1)?;
        log::info!("ablation {}: tau {:.3}", v.name, e.tau);
        rows.push(bench_row(v.name.clone(), &dcfg, Some(dcfg.seed), &e));
    }
    let (ref_tau, ref_speedup) = (rows[0].tau, rows[0].speedup);
    for r in &mut rows {
        r.tau_norm = Some(r.tau / ref_tau);
        r.speedup_norm = Some(r.speedup / ref_speedup);
    }
    write_report(&cfg.paths.reports("ablate"), &rows)?;
    Ok(rows)
}
