use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Visual,
    Generated,
}

/// Token ids with a modality tag per token.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    tags: Vec<Modality>,
}

impl TokenSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, token: usize, tag: Modality) {
        self.tokens.push(token);
        self.tags.push(tag);
    }

    pub fn extend(&mut self, tokens: &[usize], tag: Modality) {
        for &t in tokens {
            self.push(t, tag);
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn tags(&self) -> &[Modality] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn count(&self, tag: Modality) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    /// Positions holding visual tokens, in order.
    pub fn visual_positions(&self) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == Modality::Visual)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Modality)> + '_ {
        self.tokens.iter().copied().zip(self.tags.iter().copied())
    }
}

impl FromIterator<(usize, Modality)> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = (usize, Modality)>>(iter: I) -> Self {
        let mut s = Self::new();
        for (t, m) in iter {
            s.push(t, m);
        }
        s
    }
}
