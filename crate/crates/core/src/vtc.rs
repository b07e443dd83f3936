//! Visual token compression: keep the visual tokens that receive the most
//! last-layer attention and drop the rest from the draft's input.

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{AttnMap, LayerTrace};
use crate::sequence::{Modality, TokenSequence};

#[derive(Debug, Error, PartialEq)]
pub enum VtcError {
    #[error("visual range {q}..{end} outside {cols} attention columns")]
    OutOfRange { q: usize, end: usize, cols: usize },
    #[error("no scores to select from")]
    EmptyScores,
    #[error("keep fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("sequence has {found} visual tokens, selection expects {expected}")]
    CountMismatch { expected: usize, found: usize },
    #[error("trace has no attention layers")]
    EmptyTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VtcSelection {
    pub keep_fraction: f64,
    /// Retained visual indices in `0..original_v`, ascending.
    pub indices: Vec<usize>,
    pub original_v: usize,
}

impl VtcSelection {
    /// Selection that keeps all `v` visual tokens.
    pub fn identity(v: usize) -> Self {
        Self {
            keep_fraction: 1.0,
            indices: (0..v).collect(),
            original_v: v,
        }
    }

    pub fn kept(&self) -> usize {
        self.indices.len()
    }

    /// Diagnostic dump line: id, tab, comma-separated kept indices.
    pub fn dump_line(&self, sample_id: &str) -> String {
        let mut s = format!("{sample_id}\t");
        for (n, i) in self.indices.iter().enumerate() {
            if n > 0 {
                s.push(',');
            }
            let _ = write!(s, "{i}");
        }
        s
    }
}

/// Number of visual tokens kept: `v · keep_fraction` rounded half away from zero.
pub fn kept_count(v: usize, keep_fraction: f64) -> usize {
    ((v as f64 * keep_fraction).round() as usize).min(v)
}

/// Attention each visual column receives in the last layer, summed over
/// query rows and averaged over heads.
pub fn visual_importance_scores(trace: &LayerTrace, q: usize, v: usize) -> Result<Vec<f64>, VtcError> {
    let last = trace.attn.last().ok_or(VtcError::EmptyTrace)?;
    column_scores(last, q, v)
}

/// Same scores from a single attention map.
pub fn column_scores(a: &AttnMap, q: usize, v: usize) -> Result<Vec<f64>, VtcError> {
    if q + v > a.cols {
        return Err(VtcError::OutOfRange {
            q,
            end: q + v,
            cols: a.cols,
        });
    }
    let mut scores = vec![0.0; v];
    for h in 0..a.heads {
        let head = a.head(h);
        for i in 0..a.rows {
            let row = &head[i * a.cols + q..i * a.cols + q + v];
            scores.iter_mut().zip(row).for_each(|(s, p)| *s += p);
        }
    }
    scores.iter_mut().for_each(|s| *s /= a.heads as f64);
    Ok(scores)
}

/// Keeps the highest-scoring indices (lower index first on ties), reported in
/// ascending position order.
pub fn select_tokens(scores: &[f64], keep_fraction: f64) -> Result<VtcSelection, VtcError> {
    if scores.is_empty() {
        return Err(VtcError::EmptyScores);
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(VtcError::BadFraction(keep_fraction));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut indices = order[..kept_count(scores.len(), keep_fraction)].to_vec();
    indices.sort_unstable();
    Ok(VtcSelection {
        keep_fraction,
        indices,
        original_v: scores.len(),
    })
}

/// Positions of `tokens` that survive the selection: all non-visual positions
/// plus the retained visual ones, in original order.
pub fn retained_positions(tokens: &TokenSequence, sel: &VtcSelection) -> Result<Vec<usize>, VtcError> {
    let visual = tokens.visual_positions();
    if visual.len() != sel.original_v {
        return Err(VtcError::CountMismatch {
            expected: sel.original_v,
            found: visual.len(),
        });
    }
    let mut keep = vec![true; tokens.len()];
    for &p in &visual {
        keep[p] = false;
    }
    for &i in &sel.indices {
        keep[visual[i]] = true;
    }
    Ok((0..tokens.len()).filter(|&p| keep[p]).collect())
}

pub fn apply_selection(tokens: &TokenSequence, sel: &VtcSelection) -> Result<TokenSequence, VtcError> {
    let positions = retained_positions(tokens, sel)?;
    Ok(positions.iter().map(|&p| (tokens.tokens()[p], tokens.tags()[p])).collect())
}

/// Convenience used by the engine and training: tags of the prefix built from
/// `q` text tokens followed by `v` visual ones.
pub fn prefix_sequence(prompt: &[usize], visual: &[usize]) -> TokenSequence {
    let mut s = TokenSequence::new();
    s.extend(prompt, Modality::Text);
    s.extend(visual, Modality::Visual);
    s
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::Tensor;

    fn trace_with(a: AttnMap) -> LayerTrace {
        LayerTrace {
            hidden: vec![Tensor::zeros(&[1, 1]); 2],
            attn: vec![a],
        }
    }

    #[test]
    fn uniform_attention_scores_one() {
        let n = 6;
        let a = AttnMap {
            heads: 2,
            rows: n,
            cols: n,
            probs: vec![1.0 / n as f64; 2 * n * n],
        };
        let s = visual_importance_scores(&trace_with(a), 2, 4).unwrap();
        assert!(s.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn one_hot_column_collects_all_rows() {
        let (n, q) = (7, 2);
        let probs = (0..n * n).map(|k| f64::from(u8::from(k % n == q + 2))).collect();
        let a = AttnMap { heads: 1, rows: n, cols: n, probs };
        let s = visual_importance_scores(&trace_with(a), q, 4).unwrap();
        assert_eq!(s, vec![0.0, 0.0, n as f64, 0.0]);
    }

    #[test]
    fn scores_match_double_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (heads, n, q, v) = (3, 9, 3, 5);
        let probs: Vec<f64> = (0..heads * n * n).map(|_| rng.gen::<f64>()).collect();
        let a = AttnMap { heads, rows: n, cols: n, probs };
        let s = visual_importance_scores(&trace_with(a.clone()), q, v).unwrap();
        for j in 0..v {
            let mut acc = 0.0;
            for h in 0..heads {
                for i in 0..n {
                    acc += a.get(h, i, q + j);
                }
            }
            assert_eq!(s[j], acc / heads as f64);
        }
        assert!(visual_importance_scores(&trace_with(a), 6, 5).is_err());
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_tokens(&[0.1, 0.4, 0.2, 0.3], 0.5).unwrap().indices, vec![1, 3]);
        assert_eq!(select_tokens(&[0.3, 0.1, 0.2], 1.0).unwrap().indices, vec![0, 1, 2]);
        assert_eq!(select_tokens(&vec![1.0; 36], 0.75).unwrap().kept(), 27);
        assert_eq!(select_tokens(&[0.5, 0.5, 0.5, 0.5], 0.5).unwrap().indices, vec![0, 1]);
        assert_eq!(select_tokens(&[], 0.5), Err(VtcError::EmptyScores));
        assert!(select_tokens(&[1.0], 0.0).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(kept_count(2, 0.25), 1);
        assert_eq!(kept_count(6, 0.25), 2);
        assert_eq!(kept_count(36, 0.25), 9);
    }

    #[test]
    fn apply_selection_examples() {
        let seq = prefix_sequence(&[1, 22, 3], &[4, 5, 6, 7]);
        assert_eq!(apply_selection(&seq, &VtcSelection::identity(4)).unwrap(), seq);
        let sel = VtcSelection {
            keep_fraction: 0.5,
            indices: vec![1, 3],
            original_v: 4,
        };
        let out = apply_selection(&seq, &sel).unwrap();
        assert_eq!(out.tokens(), &[1, 22, 3, 5, 7]);
        assert_eq!(out.count(Modality::Visual), sel.kept());
        for (k, &i) in sel.indices.iter().enumerate() {
            assert_eq!(out.tokens()[3 + k], seq.tokens()[3 + i]);
        }
        assert_eq!(sel.dump_line("abc"), "abc\t1,3");
        assert!(matches!(
            apply_selection(&prefix_sequence(&[1], &[4]), &sel),
            Err(VtcError::CountMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn matches_sort_then_take(scores in prop::collection::vec(0u8..6, 1..30), frac in 0.01f64..=1.0) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let sel = select_tokens(&scores, frac).unwrap();
            let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut expect: Vec<usize> = pairs.iter().take(kept_count(scores.len(), frac)).map(|p| p.1).collect();
            expect.sort_unstable();
            prop_assert_eq!(sel.indices, expect);
        }

        #[test]
        fn kept_count_is_monotone(v in 1usize..100, a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(kept_count(v, lo) <= kept_count(v, hi));
        }
    }
}
