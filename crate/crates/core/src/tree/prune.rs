//! Pessimistic error pruning by subtree replacement.

use statrs::distribution::{ContinuousCDF, Normal};

use super::TreeNode;

/// Extra errors to add to `e` observed errors among `n` samples: the upper
/// confidence bound of the binomial error rate at confidence `cf`, times `n`,
/// minus `e`.
pub fn added_errors(n: f64, e: f64, cf: f64) -> f64 {
    if cf > 0.5 {
        return 0.0;
    }
    if n <= 0.0 {
        return 0.0;
    }
    if e < 1.0 {
        let base = n * (1.0 - cf.powf(1.0 / n));
        if e == 0.0 {
            return base;
        }
        return base + e * (added_errors(n, 1.0, cf) - base);
    }
    if e + 0.5 >= n {
        return (n - e).max(0.0);
    }
    let z = Normal::standard().inverse_cdf(1.0 - cf);
    let f = (e + 0.5) / n;
    let r = (f + z * z / (2.0 * n) + z * (f / n - f * f / n + z * z / (4.0 * n * n)).sqrt()) / (1.0 + z * z / n);
    r * n - e
}

fn leaf_counts(node: &TreeNode) -> (usize, usize) {
    match node {
        TreeNode::Leaf { n_train_samples, n_positive, .. } => (*n_train_samples, *n_positive),
        TreeNode::Internal { present, absent, .. } => {
            let (a, b) = leaf_counts(present);
            let (c, d) = leaf_counts(absent);
            (a + c, b + d)
        }
    }
}

fn leaf_error(n: usize, pos: usize, cf: f64) -> f64 {
    let e = pos.min(n - pos) as f64;
    e + added_errors(n as f64, e, cf)
}

/// Prunes in place and returns the estimated errors of the resulting subtree.
pub(super) fn prune(node: &mut TreeNode, cf: f64) -> f64 {
    match node {
        TreeNode::Leaf { n_train_samples, n_positive, .. } => leaf_error(*n_train_samples, *n_positive, cf),
        TreeNode::Internal { present, absent, .. } => {
            let subtree = prune(present, cf) + prune(absent, cf);
            let (n, pos) = leaf_counts(node);
            let as_leaf = leaf_error(n, pos, cf);
            if as_leaf <= subtree + 0.1 {
                *node = TreeNode::leaf(n, pos);
                as_leaf
            } else {
                subtree
            }
        }
    }
}
