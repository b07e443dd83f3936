//! Synthetic grid question-answering task.
//!
//! A sample is a `grid_h × grid_w` grid of colored cells (the "image"), a
//! fixed-length textual query and its answer. Every token family lives in its
//! own id range so the oracle can decode a sample without ambiguity.

use std::fmt;
use std::io::{BufRead, Write};

use crate::model::ModelConfig;
use crate::sequence::{Modality, TokenSequence};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const COLOR_BASE: usize = 4;
pub const NUM_COLORS: usize = 8;
pub const DIGIT_BASE: usize = COLOR_BASE + NUM_COLORS;
pub const KW_BASE: usize = DIGIT_BASE + 10;
pub const KW_COLOR_AT: usize = KW_BASE;
pub const KW_COUNT: usize = KW_BASE + 1;
pub const KW_ROW_MODE: usize = KW_BASE + 2;
pub const KW_ROW_DESCRIBE: usize = KW_BASE + 3;
pub const KW_ROW: usize = KW_BASE + 4;
pub const KW_COL: usize = KW_BASE + 5;
pub const KW_COLOR: usize = KW_BASE + 6;
/// Number of token ids the task uses; the rest of the vocabulary is spare.
pub const VOCAB_USED: usize = KW_BASE + 7;

/// Every prompt is padded to this many tokens, ending in `SEP`.
pub const PROMPT_LEN: usize = 8;

pub const COLOR_NAMES: [&str; NUM_COLORS] = ["red", "green", "blue", "yellow", "purple", "orange", "white", "black"];

pub fn color_token(c: usize) -> usize {
    COLOR_BASE + c
}

pub fn digit_token(d: usize) -> usize {
    DIGIT_BASE + d
}

pub fn is_color(t: usize) -> bool {
    (COLOR_BASE..COLOR_BASE + NUM_COLORS).contains(&t)
}

pub fn is_digit(t: usize) -> bool {
    (DIGIT_BASE..DIGIT_BASE + 10).contains(&t)
}

/// SplitMix64, the reference constants.
#[derive(Debug, Clone)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `0..n` by 128-bit multiply-shift.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Query {
    ColorAt { row: usize, col: usize },
    Count { color: usize },
    RowMode { row: usize },
    RowDescribe { row: usize },
}

impl Query {
    pub const KINDS: usize = 4;

    pub fn kind(&self) -> usize {
        match self {
            Query::ColorAt { .. } => 0,
            Query::Count { .. } => 1,
            Query::RowMode { .. } => 2,
            Query::RowDescribe { .. } => 3,
        }
    }

    pub fn encode(&self) -> Vec<usize> {
        let mut p = vec![BOS];
        match *self {
            Query::ColorAt { row, col } => p.extend([KW_COLOR_AT, KW_ROW, digit_token(row), KW_COL, digit_token(col)]),
            Query::Count { color } => p.extend([KW_COUNT, KW_COLOR, color_token(color)]),
            Query::RowMode { row } => p.extend([KW_ROW_MODE, KW_ROW, digit_token(row)]),
            Query::RowDescribe { row } => p.extend([KW_ROW_DESCRIBE, KW_ROW, digit_token(row)]),
        }
        p.resize(PROMPT_LEN - 1, PAD);
        p.push(SEP);
        p
    }

    pub fn decode(prompt: &[usize]) -> Result<Self, TaskError> {
        let bad = || TaskError::MalformedQuery(prompt.to_vec());
        if prompt.len() != PROMPT_LEN || prompt[0] != BOS || prompt[PROMPT_LEN - 1] != SEP {
            return Err(bad());
        }
        let digit = |t: usize| if is_digit(t) { Ok(t - DIGIT_BASE) } else { Err(bad()) };
        let q = match (prompt[1], prompt[2]) {
            (KW_COLOR_AT, KW_ROW) if prompt[4] == KW_COL => Query::ColorAt {
                row: digit(prompt[3])?,
                col: digit(prompt[5])?,
            },
            (KW_COUNT, KW_COLOR) if is_color(prompt[3]) => Query::Count {
                color: prompt[3] - COLOR_BASE,
            },
            (KW_ROW_MODE, KW_ROW) => Query::RowMode { row: digit(prompt[3])? },
            (KW_ROW_DESCRIBE, KW_ROW) => Query::RowDescribe { row: digit(prompt[3])? },
            _ => return Err(bad()),
        };
        if q.encode() != prompt {
            return Err(bad());
        }
        Ok(q)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskError {
    MalformedQuery(Vec<usize>),
    MalformedGrid(String),
    Parse(String),
}

impl fmt::Display for TaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskError::MalformedQuery(p) => write!(f, "malformed query encoding {p:?}"),
            TaskError::MalformedGrid(m) => write!(f, "malformed grid: {m}"),
            TaskError::Parse(m) => write!(f, "dataset parse error: {m}"),
        }
    }
}

impl std::error::Error for TaskError {}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskSample {
    pub visual_tokens: Vec<usize>,
    pub prompt_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub seed: u64,
}

impl TaskSample {
    /// Stable identifier derived from content (FNV-1a over grid and prompt).
    pub fn id(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &t in self.visual_tokens.iter().chain([usize::MAX].iter()).chain(self.prompt_tokens.iter()) {
            for b in (t as u64).to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }

    /// Prompt then visual tokens: the prefix the target sees at prefill.
    pub fn prefix(&self) -> TokenSequence {
        let mut s = TokenSequence::new();
        s.extend(&self.prompt_tokens, Modality::Text);
        s.extend(&self.visual_tokens, Modality::Visual);
        s
    }

    pub fn query(&self) -> Result<Query, TaskError> {
        Query::decode(&self.prompt_tokens)
    }

    fn cell(&self, r: usize, c: usize) -> usize {
        self.visual_tokens[r * self.grid_w + c] - COLOR_BASE
    }
}

/// Computes the ground-truth answer from grid and query.
pub fn answer_oracle(sample: &TaskSample) -> Result<Vec<usize>, TaskError> {
    if sample.visual_tokens.len() != sample.grid_h * sample.grid_w {
        return Err(TaskError::MalformedGrid(format!(
            "{} cells for a {}x{} grid",
            sample.visual_tokens.len(),
            sample.grid_h,
            sample.grid_w
        )));
    }
    if let Some(t) = sample.visual_tokens.iter().find(|&&t| !is_color(t)) {
        return Err(TaskError::MalformedGrid(format!("token {t} is not a color")));
    }
    let query = sample.query()?;
    let in_grid = |r: usize, c: usize| r < sample.grid_h && c < sample.grid_w;
    let mut ans = match query {
        Query::ColorAt { row, col } if in_grid(row, col) => vec![color_token(sample.cell(row, col))],
        Query::Count { color } => {
            let n = sample.visual_tokens.iter().filter(|&&t| t == color_token(color)).count();
            n.to_string()
                .bytes()
                .map(|b| digit_token(usize::from(b - b'0')))
                .collect()
        }
        Query::RowMode { row } if row < sample.grid_h => {
            let mut counts = [0usize; NUM_COLORS];
            for c in 0..sample.grid_w {
                counts[sample.cell(row, c)] += 1;
            }
            // ties go to the lowest color index
            let best = (0..NUM_COLORS).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
            vec![color_token(best)]
        }
        Query::RowDescribe { row } if row < sample.grid_h => {
            (0..sample.grid_w).map(|c| color_token(sample.cell(row, c))).collect()
        }
        _ => return Err(TaskError::MalformedQuery(sample.prompt_tokens.clone())),
    };
    ans.push(EOS);
    Ok(ans)
}

fn random_query(rng: &mut SplitMix64, kind: usize, config: &ModelConfig) -> Query {
    match kind {
        0 => Query::ColorAt {
            row: rng.below(config.grid_h),
            col: rng.below(config.grid_w),
        },
        1 => Query::Count {
            color: rng.below(NUM_COLORS),
        },
        2 => Query::RowMode {
            row: rng.below(config.grid_h),
        },
        _ => Query::RowDescribe {
            row: rng.below(config.grid_h),
        },
    }
}

/// Sample of a given query kind (0..4), fully determined by `seed`.
pub fn gen_sample_of_kind(seed: u64, kind: usize, config: &ModelConfig) -> TaskSample {
    let mut rng = SplitMix64::new(seed);
    let visual_tokens = (0..config.visual_tokens())
        .map(|_| color_token(rng.below(NUM_COLORS)))
        .collect();
    let query = random_query(&mut rng, kind % Query::KINDS, config);
    let mut s = TaskSample {
        visual_tokens,
        prompt_tokens: query.encode(),
        answer_tokens: Vec::new(),
        grid_h: config.grid_h,
        grid_w: config.grid_w,
        seed,
    };
    s.answer_tokens = answer_oracle(&s).expect("generated samples are well formed");
    s
}

pub fn gen_sample(seed: u64, config: &ModelConfig) -> TaskSample {
    let kind = SplitMix64::new(seed ^ 0x5157_4b49_4e44_0000).below(Query::KINDS);
    gen_sample_of_kind(seed, kind, config)
}

/// `n` samples with query kinds stratified round-robin. Sample seeds are
/// namespaced by the dataset seed, so different dataset seeds give
/// disjoint sample streams.
pub fn make_dataset(n: usize, seed: u64, config: &ModelConfig) -> Vec<TaskSample> {
    let mut ns = SplitMix64::new(seed);
    (0..n)
        .map(|i| gen_sample_of_kind(ns.next_u64(), i % Query::KINDS, config))
        .collect()
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// One sample per line: grid, prompt and answer ids, tab-separated.
pub fn export_dataset<W: Write>(mut w: W, samples: &[TaskSample]) -> std::io::Result<()> {
    for s in samples {
        writeln!(w, "{}\t{}\t{}", join(&s.visual_tokens), join(&s.prompt_tokens), join(&s.answer_tokens))?;
    }
    Ok(())
}

pub fn import_dataset<R: BufRead>(r: R, config: &ModelConfig) -> Result<Vec<TaskSample>, TaskError> {
    let parse = |f: &str| -> Result<Vec<usize>, TaskError> {
        f.split_whitespace()
            .map(|t| t.parse().map_err(|e| TaskError::Parse(format!("{t}: {e}"))))
            .collect()
    };
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| TaskError::Parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(TaskError::Parse(format!("line {}: expected 3 fields", lineno + 1)));
        }
        let s = TaskSample {
            visual_tokens: parse(fields[0])?,
            prompt_tokens: parse(fields[1])?,
            answer_tokens: parse(fields[2])?,
            grid_h: config.grid_h,
            grid_w: config.grid_w,
            seed: 0,
        };
        answer_oracle(&s)?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn cfg(h: usize, w: usize) -> ModelConfig {
        ModelConfig {
            grid_h: h,
            grid_w: w,
            ..Default::default()
        }
    }

    fn sample(grid: &[usize], h: usize, w: usize, q: Query) -> TaskSample {
        TaskSample {
            visual_tokens: grid.iter().map(|&c| color_token(c)).collect(),
            prompt_tokens: q.encode(),
            answer_tokens: vec![],
            grid_h: h,
            grid_w: w,
            seed: 0,
        }
    }

    const RED: usize = 0;
    const GREEN: usize = 1;
    const BLUE: usize = 2;

    #[test]
    fn splitmix_reference_values() {
        // first outputs for seed 0 from the published reference implementation
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(r.next_u64(), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn vocab_ranges_are_disjoint() {
        let ranges = [
            (PAD, SEP + 1),
            (COLOR_BASE, COLOR_BASE + NUM_COLORS),
            (DIGIT_BASE, DIGIT_BASE + 10),
            (KW_BASE, VOCAB_USED),
        ];
        for w in ranges.windows(2) {
            assert!(w[0].1 <= w[1].0);
        }
        assert!(VOCAB_USED <= ModelConfig::default().vocab_size);
    }

    #[test]
    fn oracle_on_known_grid() {
        let grid = [RED, BLUE, GREEN, RED];
        let at = sample(&grid, 2, 2, Query::ColorAt { row: 0, col: 1 });
        assert_eq!(answer_oracle(&at).unwrap(), vec![color_token(BLUE), EOS]);
        let count = sample(&grid, 2, 2, Query::Count { color: RED });
        assert_eq!(answer_oracle(&count).unwrap(), vec![digit_token(2), EOS]);
    }

    #[test]
    fn oracle_counts_monochrome_and_absent() {
        let grid = [BLUE; 9];
        assert_eq!(
            answer_oracle(&sample(&grid, 3, 3, Query::Count { color: BLUE })).unwrap(),
            vec![digit_token(9), EOS]
        );
        assert_eq!(
            answer_oracle(&sample(&grid, 3, 3, Query::Count { color: RED })).unwrap(),
            vec![digit_token(0), EOS]
        );
        let big = [RED; 36];
        assert_eq!(
            answer_oracle(&sample(&big, 6, 6, Query::Count { color: RED })).unwrap(),
            vec![digit_token(3), digit_token(6), EOS]
        );
    }

    #[test]
    fn row_mode_ties_go_low_and_describe_emits_row() {
        let grid = [BLUE, GREEN, GREEN, BLUE, RED, RED];
        assert_eq!(
            answer_oracle(&sample(&grid, 2, 3, Query::RowMode { row: 0 })).unwrap(),
            vec![color_token(GREEN), EOS]
        );
        // row 1: blue, red, red
        assert_eq!(
            answer_oracle(&sample(&grid, 2, 3, Query::RowDescribe { row: 1 })).unwrap(),
            vec![color_token(BLUE), color_token(RED), color_token(RED), EOS]
        );
    }

    #[test]
    fn oracle_rejects_malformed_queries() {
        let mut s = sample(&[RED; 4], 2, 2, Query::ColorAt { row: 0, col: 0 });
        s.prompt_tokens[1] = PAD;
        assert!(matches!(answer_oracle(&s), Err(TaskError::MalformedQuery(_))));
        let s = sample(&[RED; 4], 2, 2, Query::ColorAt { row: 5, col: 0 });
        assert!(answer_oracle(&s).is_err());
    }

    #[test]
    fn oracle_matches_brute_force_recount() {
        let c = cfg(6, 6);
        for seed in 0..1000u64 {
            let s = gen_sample(seed, &c);
            let grid: Vec<usize> = s.visual_tokens.iter().map(|t| t - COLOR_BASE).collect();
            let p = &s.prompt_tokens;
            let expect: Vec<usize> = if p[1] == KW_COLOR_AT {
                let (r, col) = (p[3] - DIGIT_BASE, p[5] - DIGIT_BASE);
                vec![color_token(grid[r * 6 + col])]
            } else if p[1] == KW_COUNT {
                let mut n = 0;
                for cell in &grid {
                    if color_token(*cell) == p[3] {
                        n += 1;
                    }
                }
                let mut digits = vec![];
                if n >= 10 {
                    digits.push(digit_token(n / 10));
                }
                digits.push(digit_token(n % 10));
                digits
            } else if p[1] == KW_ROW_MODE {
                let r = p[3] - DIGIT_BASE;
                let mut best = (0, 0);
                for color in 0..NUM_COLORS {
                    let k = grid[r * 6..r * 6 + 6].iter().filter(|&&x| x == color).count();
                    if k > best.1 {
                        best = (color, k);
                    }
                }
                vec![color_token(best.0)]
            } else {
                let r = p[3] - DIGIT_BASE;
                grid[r * 6..r * 6 + 6].iter().map(|&x| color_token(x)).collect()
            };
            let mut expect = expect;
            expect.push(EOS);
            assert_eq!(s.answer_tokens, expect, "seed {seed}");
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let c = cfg(6, 6);
        assert_eq!(gen_sample(99, &c), gen_sample(99, &c));
        assert_ne!(gen_sample(99, &c), gen_sample(100, &c));
    }

    #[test]
    fn answers_are_short_or_row_length() {
        let c = cfg(6, 6);
        for s in make_dataset(400, 1, &c) {
            let kind = s.query().unwrap().kind();
            let n = s.answer_tokens.len();
            if kind == 3 {
                assert_eq!(n, c.grid_w + 1);
            } else {
                assert!((2..=5).contains(&n));
            }
            assert_eq!(*s.answer_tokens.last().unwrap(), EOS);
        }
    }

    #[test]
    fn dataset_is_stratified_and_reproducible() {
        let c = cfg(6, 6);
        let d = make_dataset(3, 42, &c);
        let kinds: HashSet<usize> = d.iter().map(|s| s.query().unwrap().kind()).collect();
        assert_eq!(kinds.len(), 3);
        assert_eq!(make_dataset(50, 42, &c), make_dataset(50, 42, &c));
    }

    #[test]
    fn train_and_test_namespaces_are_disjoint() {
        let c = cfg(6, 6);
        let train: HashSet<String> = make_dataset(2000, 42, &c).iter().map(TaskSample::id).collect();
        let test: HashSet<String> = make_dataset(500, 43, &c).iter().map(TaskSample::id).collect();
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn flipping_a_cell_changes_some_answer() {
        let c = cfg(6, 6);
        for seed in 0..50u64 {
            let s = gen_sample_of_kind(seed, 0, &c);
            let cell = (seed as usize * 7) % 36;
            let mut flipped = s.clone();
            flipped.visual_tokens[cell] = color_token((s.visual_tokens[cell] - COLOR_BASE + 1) % NUM_COLORS);
            let (r, col) = (cell / 6, cell % 6);
            let changed = [Query::ColorAt { row: r, col }, Query::RowDescribe { row: r }].iter().any(|q| {
                let mut a = s.clone();
                let mut b = flipped.clone();
                a.prompt_tokens = q.encode();
                b.prompt_tokens = q.encode();
                answer_oracle(&a).unwrap() != answer_oracle(&b).unwrap()
            });
            assert!(changed);
        }
    }

    #[test]
    fn export_import_round_trip() {
        let c = cfg(6, 6);
        let d = make_dataset(12, 5, &c);
        let mut buf = Vec::new();
        export_dataset(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 12);
        assert!(text.lines().all(|l| l.split('\t').count() == 3));
        let back = import_dataset(&buf[..], &c).unwrap();
        for (a, b) in d.iter().zip(&back) {
            assert_eq!(a.id(), b.id());
            assert_eq!(a.answer_tokens, b.answer_tokens);
        }
    }
}
