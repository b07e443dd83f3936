//! End-to-end commands: target pretraining, calibration, draft training,
//! benchmarking, losslessness verification, FLOP profiling and ablations.
//! The CLI is a thin wrapper over the `cmd_*` functions here.

mod ablate;
mod bench;
mod config;
mod decode;
mod pipeline;
mod profile;
mod report;
mod verify;

use std::path::PathBuf;

use thiserror::Error;

pub use ablate::{ablation_variants, cmd_ablate, AblationVariant, REFERENCE};
pub use bench::{cmd_bench, evaluate_prompts, PromptEval};
pub use config::{
    AblateSection, BenchSection, DataSection, DraftTrainSection, LayerSection, LayerStrategy, Paths, ProfileSection,
    RunConfig, TargetTrainSection, VerifySection,
};
pub use decode::{cmd_decode, DecodeSummary};
pub use pipeline::{
    cmd_calibrate, cmd_train_draft, cmd_train_target, datasets, draft_training_samples, layer_choice, load_draft,
    load_target, read_responses, static_block, train_draft_variant, write_responses, CalibrateSummary, Datasets, DraftSummary,
    TargetSummary,
};
pub use profile::{cmd_profile_flops, flop_ratio, FlopProfileRow};
pub use report::{read_csv_rows, read_json_rows, write_report, BenchRow};
pub use verify::{cmd_verify_lossless, enumeration_tv, greedy_matches, monte_carlo_tv, verification_models, VerifyReport};

use crate::engine::EngineError;
use crate::entropy::EntropyError;
use crate::model::ModelError;
use crate::training::TrainError;
use crate::vtc::VtcError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what} not found at {path}; run `dream {command}` ({function}) first")]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        command: &'static str,
        function: &'static str,
    },
    #[error("acceptance threshold not met: {0}")]
    Threshold(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Vtc(#[from] VtcError),
}

impl HarnessError {
    /// Process exit status: 2 for a failed acceptance threshold, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Threshold(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}

/// Worker threads for parallel trials: `DREAM_THREADS` if set, else the
/// available cores.
pub fn thread_count() -> usize {
    std::env::var("DREAM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` over `items` on up to [`thread_count`] scoped threads, keeping order.
pub(crate) fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let threads = thread_count().clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
