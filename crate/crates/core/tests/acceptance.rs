//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line and then
//! asserts, so `cargo test --test acceptance -- --nocapture` gives a summary.
//!
//! Criteria 1, 7, 8, 9 and 11 share one trained target/draft pair. The first
//! run trains it under `CARGO_TARGET_TMPDIR` (timing the whole pipeline) and
//! later runs reuse it while the configuration is unchanged. Tests take a
//! global lock so wall-clock limits are measured without interference.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dream_core::engine::{
    ar_baseline, chain_distribution, decode, prefill, total_variation, DecodeConfig, DecodeMode, Drafter,
};
use dream_core::entropy::attention_entropy;
use dream_core::harness::{
    cmd_ablate, cmd_bench, cmd_calibrate, cmd_profile_flops, cmd_train_draft, cmd_train_target, datasets, evaluate_prompts,
    flop_ratio, load_draft, load_target, monte_carlo_tv, read_json_rows, verification_models, RunConfig,
    REFERENCE,
};
use dream_core::model::{init_models, AttnMap, DraftArch, DraftModel, ModelConfig, TargetModel};
use dream_core::sequence::{Modality, TokenSequence};
use dream_core::task::{make_dataset, TaskSample, EOS};
use dream_core::training::{build_training_sample, loss_and_grads, sample_losses, LayerChoice, LossWeights};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, title: &str, pass: bool, detail: impl AsRef<str>) {
    println!(
        "criterion {n:>2} {}: {title} | {}",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    assert!(pass, "criterion {n} failed: {}", detail.as_ref());
}

// ---------------------------------------------------------------------------
// shared trained artifacts

struct Trained {
    cfg: RunConfig,
    target: TargetModel,
    draft: DraftModel,
    /// Seconds spent in target training, calibration and draft training.
    pipeline_s: f64,
    target_accuracy: f64,
}

fn artifact_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-run")
}

fn base_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.dir = artifact_dir();
    cfg
}

/// Trains the pipeline once per configuration and caches the result.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = base_config();
        let dir = &cfg.paths.dir;
        let stamp = dir.join("config.txt");
        let timing = dir.join("pipeline_seconds.txt");
        let accuracy = dir.join("target_accuracy.txt");
        let fresh = fs::read_to_string(&stamp).is_ok_and(|s| s == cfg.to_text()) && timing.exists() && accuracy.exists();
        if !fresh {
            let _ = fs::remove_dir_all(dir);
            fs::create_dir_all(dir).unwrap();
            let t0 = Instant::now();
            let summary = cmd_train_target(&cfg).expect("target training");
            cmd_calibrate(&cfg).expect("calibration");
            cmd_train_draft(&cfg).expect("draft training");
            let secs = t0.elapsed().as_secs_f64();
            fs::write(&timing, secs.to_string()).unwrap();
            fs::write(&accuracy, summary.final_accuracy.to_string()).unwrap();
            fs::write(&stamp, cfg.to_text()).unwrap();
        }
        Trained {
            target: load_target(&cfg).unwrap(),
            draft: load_draft(&cfg).unwrap(),
            pipeline_s: fs::read_to_string(&timing).unwrap().trim().parse().unwrap(),
            target_accuracy: fs::read_to_string(&accuracy).unwrap().trim().parse().unwrap(),
            cfg,
        }
    })
}

fn test_prompts(cfg: &RunConfig, n: usize) -> Vec<TaskSample> {
    let mut test = datasets(cfg).test;
    test.truncate(n);
    test
}

fn greedy_config(cfg: &RunConfig) -> DecodeConfig {
    DecodeConfig {
        temperature: 0.0,
        max_new_tokens: 64,
        stop_at_eos: false,
        ..cfg.decode.clone()
    }
}

// ---------------------------------------------------------------------------
// 1: greedy losslessness

#[test]
fn c01_greedy_speculative_output_matches_target_greedy() {
    let _guard = serial();
    let t = trained();
    let prompts = test_prompts(&t.cfg, 100);
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut total = 0;
    for mode in [DecodeMode::Chain, DecodeMode::Tree] {
        for keep in [1.0, 0.75] {
            let dcfg = DecodeConfig {
                mode,
                keep_fraction: keep,
                ..greedy_config(&t.cfg)
            };
            for s in &prompts {
                let prefix = s.prefix();
                let want = ar_baseline(&t.target, &prefix, &dcfg).unwrap().tokens;
                let mut session = prefill(&t.target, Drafter::Dream(&t.draft), &prefix, &dcfg).unwrap();
                let (got, _) = decode(&mut session).unwrap();
                total += 1;
                if got.tokens() != want.as_slice() || want.len() != 64 {
                    failures.push(format!("{mode}/keep {keep}/{}", s.id()));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "greedy losslessness",
        failures.is_empty() && secs < 120.0,
        format!(
            "{}/{total} runs token-identical (chain+tree, keep 1 and 0.75, 100 prompts x 64 tokens) in {secs:.1}s; mismatches {:?}",
            total - failures.len(),
            failures.iter().take(5).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2 and 3: sampling losslessness on a tiny random pair

fn tiny_prefix(seed: u64, vocab: usize) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = TokenSequence::new();
    let text: Vec<usize> = (0..3).map(|_| rng.gen_range(0..vocab)).collect();
    let visual: Vec<usize> = (0..4).map(|_| rng.gen_range(0..vocab)).collect();
    s.extend(&text, Modality::Text);
    s.extend(&visual, Modality::Visual);
    s
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Target distribution over every length-`n` continuation, by brute force:
/// one uncached forward pass per visited prefix.
fn brute_force_target(target: &TargetModel, prefix: &[usize], n: usize) -> BTreeMap<Vec<usize>, f64> {
    let mut out = BTreeMap::new();
    let mut stack = vec![(Vec::<usize>::new(), 1.0)];
    while let Some((cont, p)) = stack.pop() {
        if cont.len() == n {
            out.insert(cont, p);
            continue;
        }
        let seq: Vec<usize> = prefix.iter().chain(&cont).copied().collect();
        let mut cache = target.new_cache();
        let logits = target.forward(&seq, &mut cache, false).unwrap().logits;
        let dist = softmax(logits.row(seq.len() - 1));
        for (tok, q) in dist.iter().enumerate() {
            let mut next = cont.clone();
            next.push(tok);
            stack.push((next, p * q));
        }
    }
    out
}

#[test]
fn c02_chain_sampling_is_exactly_lossless_by_enumeration() {
    let _guard = serial();
    let cfg = base_config();
    let v = &cfg.verify;
    assert!(v.vocab == 4 && v.gamma == 2);
    let start = Instant::now();
    let (target, draft) = verification_models(v).unwrap();
    let prefix = tiny_prefix(5, v.vocab);
    let dcfg = DecodeConfig {
        mode: DecodeMode::Chain,
        gamma: 2,
        temperature: 1.0,
        max_new_tokens: v.tokens,
        stop_at_eos: false,
        seed: 1,
        ..cfg.decode.clone()
    };
    let sd = chain_distribution(&target, Drafter::Dream(&draft), &prefix, &dcfg, v.tokens).unwrap();
    let reference = brute_force_target(&target, prefix.tokens(), v.tokens);
    let tv = total_variation(&sd, &reference);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "exact sampling losslessness",
        tv < 1e-12 && secs < 1.0,
        format!("chain gamma=2, vocab 4, {} tokens: TV {tv:.3e} in {secs:.3}s", v.tokens),
    );
}

#[test]
fn c03_tree_sampling_is_lossless_by_monte_carlo() {
    let _guard = serial();
    let cfg = base_config();
    let v = &cfg.verify;
    assert!(v.k == 2 && v.depth == 2 && v.samples == 200_000);
    let start = Instant::now();
    let (target, draft) = verification_models(v).unwrap();
    let prefix = tiny_prefix(v.seed, v.vocab);
    let tvs = monte_carlo_tv(&cfg, &target, &draft, &prefix).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = tvs.iter().copied().fold(0.0, f64::max);
    verdict(
        3,
        "Monte Carlo sampling losslessness",
        worst < 0.01 && secs < 300.0,
        format!("tree k=2 depth=2, N=200000: per-position TV {tvs:.4?} in {secs:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// 4: gradients

#[test]
fn c04_loss_gradients_match_finite_differences() {
    let _guard = serial();
    let start = Instant::now();
    let config = ModelConfig {
        d_model: 16,
        n_heads: 2,
        target_layers: 4,
        grid_h: 2,
        grid_w: 2,
        max_seq_len: 80,
        ..Default::default()
    };
    let (target, mut draft) = init_models(&config, DraftArch::default()).unwrap();
    let data = make_dataset(1, 3, &config);
    let mut response = data[0].answer_tokens.clone();
    response.resize(6, EOS);
    let sample = build_training_sample(&data[0], &response, &target, &LayerChoice::Fixed(2), 1.0).unwrap();
    let names: Vec<String> = draft.params().names().map(str::to_string).collect();
    let terms = [
        ("feature", LossWeights { feat: 1.0, intermed: 0.0, kl: 0.0 }),
        ("intermediate", LossWeights { feat: 0.0, intermed: 1.0, kl: 0.0 }),
        ("kl", LossWeights { feat: 0.0, intermed: 0.0, kl: 1.0 }),
    ];
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for (term, weights) in terms {
        let (_, grads) = loss_and_grads(&draft, &target, &sample, &weights).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut max_err: f64 = 0.0;
        let h = 1e-5;
        for _ in 0..20 {
            let name = &names[rng.gen_range(0..names.len())];
            let len = draft.params().value(name).unwrap().len();
            let idx = rng.gen_range(0..len);
            let analytic = grads.param(name).map_or(0.0, |g| g[idx]);
            let mut at = |delta: f64| {
                draft.params_mut().get_mut(name).unwrap().value.data_mut()[idx] += delta;
                let v = sample_losses(&draft, &target, &sample, &weights).unwrap().total;
                draft.params_mut().get_mut(name).unwrap().value.data_mut()[idx] -= delta;
                v
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let scale = numeric.abs().max(analytic.abs()).max(1e-6);
            max_err = max_err.max((numeric - analytic).abs() / scale);
        }
        worst.push((term, max_err));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        "gradient correctness",
        worst.iter().all(|&(_, e)| e < 1e-4) && secs < 60.0,
        format!(
            "max relative error over 20 parameters: {} in {secs:.1}s",
            worst.iter().map(|(t, e)| format!("{t} {e:.1e}")).collect::<Vec<_>>().join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 5: entropy

fn map(rows: usize, cols: usize, probs: Vec<f64>) -> AttnMap {
    AttnMap {
        heads: 1,
        rows,
        cols,
        probs,
    }
}

#[test]
fn c05_attention_entropy_reference_values() {
    let _guard = serial();
    let one_hot = attention_entropy(&map(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
    let uniform = attention_entropy(&map(4, 4, vec![0.25; 16])).unwrap();
    let causal = attention_entropy(&map(
        3,
        3,
        vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    ))
    .unwrap();
    // (ln 1 + ln 2 + ln 3) / 3 computed independently of the library
    let causal_ref = (2.0f64.ln() + 3.0f64.ln()) / 3.0;
    let pass = one_hot == 0.0
        && (uniform - 4.0f64.ln()).abs() < 1e-9
        && (causal - 0.5973).abs() < 1e-4
        && (causal - causal_ref).abs() < 1e-12;
    verdict(
        5,
        "entropy formula",
        pass,
        format!("one-hot {one_hot}, uniform n=4 {uniform:.12} (ln 4 = {:.12}), causal n=3 {causal:.6}", 4.0f64.ln()),
    );
}

// ---------------------------------------------------------------------------
// 6: self-draft ceiling

#[test]
fn c06_self_draft_reaches_gamma_plus_one() {
    let _guard = serial();
    let target = TargetModel::new(ModelConfig::default()).unwrap();
    let prompts = make_dataset(10, 99, target.config());
    let mut taus = Vec::new();
    for temperature in [0.0, 1.0] {
        let dcfg = DecodeConfig {
            mode: DecodeMode::Chain,
            gamma: 6,
            temperature,
            // the draft must see exactly what the target sees
            keep_fraction: 1.0,
            max_new_tokens: 64,
            stop_at_eos: false,
            ..DecodeConfig::default()
        };
        for s in &prompts {
            let mut session = prefill(&target, Drafter::SelfDraft, &s.prefix(), &dcfg).unwrap();
            let (_, m) = decode(&mut session).unwrap();
            taus.push(m.tau);
        }
    }
    verdict(
        6,
        "self-draft ceiling",
        taus.iter().all(|&t| t == 7.0),
        format!("gamma=6 chain, 64 tokens, 10 prompts at T=0 and T=1: tau values {:?}", dedup(&taus)),
    );
}

fn dedup(xs: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = Vec::new();
    for &x in xs {
        if !v.contains(&x) {
            v.push(x);
        }
    }
    v
}

// ---------------------------------------------------------------------------
// 7: training efficacy

fn greedy_tau(cfg: &RunConfig, target: &TargetModel, draft: &DraftModel, prompts: &[TaskSample]) -> f64 {
    evaluate_prompts(target, Drafter::Dream(draft), prompts, &greedy_config(cfg), 1)
        .unwrap()
        .tau
}

#[test]
fn c07_trained_draft_reaches_target_acceptance_length() {
    let _guard = serial();
    let t = trained();
    let prompts = test_prompts(&t.cfg, t.cfg.bench.prompts);
    let untrained = DraftModel::new(t.cfg.model.clone(), t.cfg.draft).unwrap();
    let control = greedy_tau(&t.cfg, &t.target, &untrained, &prompts);
    let tau = greedy_tau(&t.cfg, &t.target, &t.draft, &prompts);
    let budget = Duration::from_secs(45 * 60).as_secs_f64();
    verdict(
        7,
        "training efficacy",
        control <= 1.3 && tau >= 2.5 && t.pipeline_s < budget,
        format!(
            "untrained draft tau {control:.3} (<= 1.3), trained tau {tau:.3} (>= 2.5), pipeline {:.1} min (< 45), target accuracy {:.3}",
            t.pipeline_s / 60.0,
            t.target_accuracy
        ),
    );
}

// ---------------------------------------------------------------------------
// 8: ablation directions

#[test]
fn c08_ablation_directions() {
    let _guard = serial();
    let t = trained();
    let mut cfg = t.cfg.clone();
    cfg.ablate.variants = ["wo-ca", "no-mid", "dyn-ent", "chain", "keep-1", "keep-0.75", "keep-0.25"]
        .map(String::from)
        .to_vec();
    let rows = cmd_ablate(&cfg).unwrap();
    let tau = |name: &str| rows.iter().find(|r| r.config_id == name).map(|r| r.tau).unwrap();
    let full = tau(REFERENCE);
    let checks = [
        ("full > w/o-CA", full > tau("wo-ca")),
        ("Dyn-Ent >= No-Mid", tau("dyn-ent") >= tau("no-mid")),
        ("tree >= chain", full >= tau("chain")),
        ("keep 1 vs 0.75 within 10%", (tau("keep-1") - tau("keep-0.75")).abs() <= 0.1 * tau("keep-1")),
        ("keep 0.25 drops >= 15%", tau("keep-0.25") <= 0.85 * tau("keep-1")),
    ];
    let summary: Vec<String> = rows.iter().map(|r| format!("{} {:.3}", r.config_id, r.tau)).collect();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        8,
        "ablation directions",
        failed.is_empty(),
        format!("tau: {}; failed: {failed:?}", summary.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// 9: VTC identity

#[test]
fn c09_full_keep_fraction_matches_disabled_compression() {
    let _guard = serial();
    let t = trained();
    let prompts = test_prompts(&t.cfg, 20);
    let mut identical = 0;
    let mut total = 0;
    for temperature in [0.0, 1.0] {
        for mode in [DecodeMode::Chain, DecodeMode::Tree] {
            for (i, s) in prompts.iter().enumerate() {
                let run = |vtc: bool| {
                    let dcfg = DecodeConfig {
                        mode,
                        temperature,
                        vtc,
                        keep_fraction: 1.0,
                        seed: 1000 + i as u64,
                        ..greedy_config(&t.cfg)
                    };
                    let mut session = prefill(&t.target, Drafter::Dream(&t.draft), &s.prefix(), &dcfg).unwrap();
                    let (out, _) = decode(&mut session).unwrap();
                    (session.transcript_jsonl(), out.tokens().to_vec())
                };
                total += 1;
                identical += usize::from(run(true) == run(false));
            }
        }
    }
    verdict(
        9,
        "VTC identity",
        identical == total,
        format!("{identical}/{total} transcripts byte-identical with keep_fraction 1 vs compression disabled"),
    );
}

// ---------------------------------------------------------------------------
// 10: FLOP profile

#[test]
fn c10_visual_tokens_raise_forward_flops_monotonically() {
    let _guard = serial();
    let mut cfg = base_config();
    cfg.paths.dir = artifact_dir().join("profile");
    let rows = cmd_profile_flops(&cfg).unwrap();
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let monotone = ratios.windows(2).all(|w| w[1] > w[0]);
    let target = TargetModel::new(ModelConfig::default()).unwrap();
    let (_, _, no_visual) = flop_ratio(&target, &[1, 2, 3], &[], 64).unwrap();
    let grids: Vec<String> = rows.iter().map(|r| format!("{}x{} {:.3}", r.grid_h, r.grid_w, r.ratio)).collect();
    verdict(
        10,
        "FLOP profile direction",
        ratios.iter().all(|&r| r > 1.0) && monotone && no_visual == 1.0,
        format!("multimodal/text-only ratio {}; v=0 ratio {no_visual}", grids.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// 11: reproducibility

fn bits(store: &dream_core::tensor::ParamStore) -> Vec<(String, Vec<u64>)> {
    store
        .names()
        .map(|n| (n.to_string(), store.value(n).unwrap().data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn c11_reported_tau_and_checkpoints_reproduce_exactly() {
    let _guard = serial();
    let t = trained();
    let dir = artifact_dir().join("roundtrip");
    fs::create_dir_all(&dir).unwrap();

    // checkpoints: save, load, save again
    let (tp, dp) = (dir.join("t.drmt"), dir.join("d.drmt"));
    t.target.save(&tp).unwrap();
    t.draft.save(&dp).unwrap();
    let (t2, d2) = (TargetModel::load(&tp).unwrap(), DraftModel::load(&dp).unwrap());
    let (tp2, dp2) = (dir.join("t2.drmt"), dir.join("d2.drmt"));
    t2.save(&tp2).unwrap();
    d2.save(&dp2).unwrap();
    let magic = fs::read(&tp).unwrap().starts_with(b"DRMT");
    let ckpt_ok = magic
        && fs::read(&tp).unwrap() == fs::read(&tp2).unwrap()
        && fs::read(&dp).unwrap() == fs::read(&dp2).unwrap()
        && bits(t.target.params()) == bits(t2.params())
        && bits(t.draft.params()) == bits(d2.params());

    // every per-seed τ in a bench report recomputes exactly from its stored seed
    let mut cfg = t.cfg.clone();
    cfg.bench.prompts = 10;
    cfg.bench.timing_runs = 1;
    cmd_bench(&cfg).unwrap();
    let stored = read_json_rows(&cfg.paths.reports("bench").join("report.json")).unwrap();
    let prompts = test_prompts(&cfg, cfg.bench.prompts);
    let mut reproduced = 0;
    let mut checked = 0;
    for row in stored.iter().filter(|r| r.seed.is_some()) {
        let dcfg = DecodeConfig {
            mode: row.mode.parse().unwrap(),
            temperature: row.temperature,
            seed: row.seed.unwrap(),
            ..cfg.decode.clone()
        };
        let e = evaluate_prompts(&t.target, Drafter::Dream(&t.draft), &prompts, &dcfg, 1).unwrap();
        checked += 1;
        reproduced += usize::from(e.tau.to_bits() == row.tau.to_bits() && e.accept_hist == row.accept_hist);
    }

    // and a sampled run repeats bit for bit under the same seed
    let sampled = DecodeConfig {
        temperature: 1.0,
        seed: 77,
        ..t.cfg.decode.clone()
    };
    let few = &prompts[..10.min(prompts.len())];
    let a = evaluate_prompts(&t.target, Drafter::Dream(&t.draft), few, &sampled, 1).unwrap();
    let b = evaluate_prompts(&t.target, Drafter::Dream(&t.draft), few, &sampled, 1).unwrap();
    let sampled_ok = a.tau.to_bits() == b.tau.to_bits() && a.accept_hist == b.accept_hist;

    verdict(
        11,
        "reproducibility",
        ckpt_ok && sampled_ok && checked > 0 && reproduced == checked,
        format!(
            "DRMT round trip bit-exact: {ckpt_ok}; bench rows reproduced from stored seeds {reproduced}/{checked}; T=1 rerun identical: {sampled_ok}"
        ),
    );
}
