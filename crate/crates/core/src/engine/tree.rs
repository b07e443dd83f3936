use super::{EngineError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub token: usize,
    /// `None` means the node hangs off the root (the last committed token).
    pub parent: Option<usize>,
    /// 1 for children of the root.
    pub depth: usize,
    /// Probability of this token in its parent's sibling distribution.
    pub draft_prob: f64,
    pub cum_logp: f64,
}

/// Candidate continuations in topological order (parents before children).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DraftTree {
    pub nodes: Vec<TreeNode>,
    /// Truncated, renormalised draft distribution each expanded node drew its
    /// children from. Slot 0 is the root, slot `i + 1` is node `i`; slots of
    /// unexpanded nodes are empty.
    pub siblings: Vec<Vec<(usize, f64)>>,
}

impl DraftTree {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            siblings: vec![Vec::new()],
        }
    }

    /// A single path, as drafted in chain mode.
    pub fn chain(tokens: &[usize], probs: &[f64]) -> Self {
        let mut t = Self::new();
        let mut cum = 0.0;
        for (i, (&tok, &p)) in tokens.iter().zip(probs).enumerate() {
            cum += p.ln();
            t.push(TreeNode {
                token: tok,
                parent: i.checked_sub(1),
                depth: i + 1,
                draft_prob: p,
                cum_logp: cum,
            });
        }
        t
    }

    pub fn push(&mut self, node: TreeNode) -> usize {
        self.nodes.push(node);
        self.siblings.push(Vec::new());
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn slot(parent: Option<usize>) -> usize {
        parent.map_or(0, |p| p + 1)
    }

    pub fn children(&self, parent: Option<usize>) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].parent == parent).collect()
    }

    /// Nodes from the root's child down to `i`, inclusive.
    pub fn path_to(&self, i: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut cur = self.nodes[i].parent;
        while let Some(p) = cur {
            path.push(p);
            cur = self.nodes[p].parent;
        }
        path.reverse();
        path
    }

    /// Structural checks: topological order, consistent depths, distinct
    /// sibling tokens and sibling distributions summing to at most 1.
    pub fn validate(&self) -> Result<()> {
        build_tree_mask(self)?;
        for (i, n) in self.nodes.iter().enumerate() {
            let want = n.parent.map_or(1, |p| self.nodes[p].depth + 1);
            if n.depth != want {
                return Err(EngineError::MalformedTree(format!("node {i} has depth {} not {want}", n.depth)));
            }
        }
        for slot in 0..=self.nodes.len() {
            let parent = slot.checked_sub(1);
            let kids = self.children(parent);
            let mut tokens: Vec<usize> = kids.iter().map(|&c| self.nodes[c].token).collect();
            tokens.sort_unstable();
            tokens.dedup();
            if tokens.len() != kids.len() {
                return Err(EngineError::MalformedTree(format!("repeated sibling token under slot {slot}")));
            }
            let total: f64 = self.siblings[slot].iter().map(|s| s.1).sum();
            if total > 1.0 + 1e-9 {
                return Err(EngineError::MalformedTree(format!("sibling distribution at slot {slot} sums to {total}")));
            }
        }
        Ok(())
    }
}

/// `mask[i][j]` is true iff node `j` is node `i` or one of its ancestors.
pub fn build_tree_mask(tree: &DraftTree) -> Result<Vec<Vec<bool>>> {
    let n = tree.nodes.len();
    let mut mask = vec![vec![false; n]; n];
    for i in 0..n {
        let mut cur = Some(i);
        let mut steps = 0;
        while let Some(j) = cur {
            if j >= n {
                return Err(EngineError::MalformedTree(format!("node {i} has an ancestor {j} outside the tree")));
            }
            if steps > n {
                return Err(EngineError::MalformedTree(format!("cycle through node {i}")));
            }
            if j > i {
                return Err(EngineError::MalformedTree(format!("node {i} listed before its ancestor {j}")));
            }
            mask[i][j] = true;
            cur = tree.nodes[j].parent;
            steps += 1;
        }
    }
    Ok(mask)
}
