//! Forward-pass cost of the image tokens: FLOPs to decode with and without
//! the visual prefix, across grid sizes.

use std::fs;

use serde::Serialize;

use super::config::RunConfig;
use super::{io_err, HarnessError, Result};
use crate::model::{ModelConfig, TargetModel};
use crate::task::{gen_sample, PROMPT_LEN};
use crate::tensor::flops;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopProfileRow {
    pub grid_h: usize,
    pub grid_w: usize,
    pub visual_tokens: usize,
    pub text_only_flops: u64,
    pub multimodal_flops: u64,
    pub ratio: f64,
}

/// FLOPs of greedily generating `tokens` tokens after `prompt` alone and after
/// `prompt` followed by `visual`; returns both counts and their ratio. With no
/// visual tokens the two runs are identical and the ratio is exactly 1.
pub fn flop_ratio(target: &TargetModel, prompt: &[usize], visual: &[usize], tokens: usize) -> Result<(u64, u64, f64)> {
    let (text, text_flops) = flops::measure(|| target.greedy(prompt, tokens, None));
    text?;
    let full: Vec<usize> = prompt.iter().chain(visual).copied().collect();
    let (mm, mm_flops) = flops::measure(|| target.greedy(&full, tokens, None));
    mm?;
    Ok((text_flops, mm_flops, mm_flops as f64 / text_flops as f64))
}

/// One row per configured grid. Counts depend only on shapes, so each grid
/// uses a freshly initialised target with the configured width and depth.
pub fn cmd_profile_flops(cfg: &RunConfig) -> Result<Vec<FlopProfileRow>> {
    let mut rows = Vec::new();
    for &(grid_h, grid_w) in &cfg.profile.grids {
        let model = ModelConfig {
            grid_h,
            grid_w,
            max_seq_len: PROMPT_LEN + grid_h * grid_w + cfg.profile.tokens,
            ..cfg.model.clone()
        };
        let target = TargetModel::new(model.clone())?;
        let sample = gen_sample(cfg.data.seed, &model);
        let (text_only_flops, multimodal_flops, ratio) =
            flop_ratio(&target, &sample.prompt_tokens, &sample.visual_tokens, cfg.profile.tokens)?;
        log::info!("grid {grid_h}x{grid_w}: ratio {ratio:.3}");
        rows.push(FlopProfileRow {
            grid_h,
            grid_w,
            visual_tokens: grid_h * grid_w,
            text_only_flops,
            multimodal_flops,
            ratio,
        });
    }
    let dir = cfg.paths.reports("profile-flops");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    for row in &rows {
        w.serialize(row).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(rows)
}
