//! Combining branches: the feature-map maximum/mean over aligned branch
//! maps, and the score-level mean/max used by test-time augmentation.

use serde::{Deserialize, Serialize};

use crate::nn;
use crate::tensor::{Result, Tensor4, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Max,
    Mean,
}

impl Combine {
    pub fn as_str(self) -> &'static str {
        match self {
            Combine::Max => "max",
            Combine::Mean => "mean",
        }
    }
}

fn check_members<'a>(items: impl IntoIterator<Item = &'a Tensor4>, op: &'static str) -> Result<()> {
    let mut iter = items.into_iter();
    let first = iter.next().ok_or(TensorError::InvalidShape {
        op,
        detail: "empty branch set".into(),
    })?;
    for t in iter {
        first.check_same_shape(t, op)?;
    }
    Ok(())
}

/// Reverse-aligned branch feature maps, ordered like the transform list
/// that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSet {
    branches: Vec<Tensor4>,
}

impl BranchSet {
    pub fn new(branches: Vec<Tensor4>) -> Result<Self> {
        check_members(&branches, "branch set")?;
        Ok(Self { branches })
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn branches(&self) -> &[Tensor4] {
        &self.branches
    }

    pub fn into_branches(self) -> Vec<Tensor4> {
        self.branches
    }
}

/// Per-branch `(batch, classes)` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<Tensor4>,
}

impl ScoreSet {
    pub fn new(scores: Vec<Tensor4>) -> Result<Self> {
        check_members(&scores, "score set")?;
        let [_, _, h, w] = scores[0].shape();
        if h != 1 || w != 1 {
            return Err(TensorError::InvalidShape {
                op: "score set",
                detail: format!(
                    "scores must be (batch, classes, 1, 1), got {:?}",
                    scores[0].shape()
                ),
            });
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &[Tensor4] {
        &self.scores
    }
}

/// Elementwise maximum over branches (lowest branch index wins ties).
pub fn feature_max(z: &BranchSet) -> Tensor4 {
    let slices: Vec<&[f64]> = z.branches.iter().map(Tensor4::data).collect();
    let (data, _) = kernels::stack_max(&slices);
    Tensor4::from_vec(z.branches[0].shape(), data).expect("branch shapes validated")
}

/// Elementwise mean over branches, summed in ascending branch order.
pub fn feature_mean(z: &BranchSet) -> Tensor4 {
    let slices: Vec<&[f64]> = z.branches.iter().map(Tensor4::data).collect();
    Tensor4::from_vec(z.branches[0].shape(), kernels::stack_mean(&slices))
        .expect("branch shapes validated")
}

pub fn feature_combine(z: &BranchSet, mode: Combine) -> Tensor4 {
    match mode {
        Combine::Max => feature_max(z),
        Combine::Mean => feature_mean(z),
    }
}

/// Softmax per branch, then elementwise mean or max across branches.
pub fn score_combine(s: &ScoreSet, mode: Combine) -> Tensor4 {
    let probs: Vec<Tensor4> = s.scores.iter().map(nn::softmax).collect();
    let set = BranchSet { branches: probs };
    feature_combine(&set, mode)
}

pub(crate) mod kernels {
    /// Values and the winning branch per element.
    pub fn stack_max(inputs: &[&[f64]]) -> (Vec<f64>, Vec<u32>) {
        let mut out = inputs[0].to_vec();
        let mut arg = vec![0u32; out.len()];
        for (n, branch) in inputs.iter().enumerate().skip(1) {
            for ((o, a), &v) in out.iter_mut().zip(arg.iter_mut()).zip(branch.iter()) {
                if v > *o {
                    *o = v;
                    *a = n as u32;
                }
            }
        }
        (out, arg)
    }

    pub fn stack_mean(inputs: &[&[f64]]) -> Vec<f64> {
        let mut out = inputs[0].to_vec();
        for branch in &inputs[1..] {
            for (o, &v) in out.iter_mut().zip(branch.iter()) {
                *o += v;
            }
        }
        let n = inputs.len() as f64;
        for o in &mut out {
            *o /= n;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f64]) -> Tensor4 {
        Tensor4::matrix(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn single_branch_is_unchanged() {
        let z = BranchSet::new(vec![row(&[1.0, -2.0, 3.5])]).unwrap();
        assert_eq!(feature_max(&z), z.branches()[0]);
        assert_eq!(feature_mean(&z), z.branches()[0]);
    }

    #[test]
    fn small_examples() {
        let z = BranchSet::new(vec![row(&[1.0, 4.0]), row(&[3.0, 2.0])]).unwrap();
        assert_eq!(feature_max(&z).data(), &[3.0, 4.0]);
        let m = BranchSet::new(vec![row(&[2.0]), row(&[4.0])]).unwrap();
        assert_eq!(feature_mean(&m).data(), &[3.0]);
    }

    #[test]
    fn mean_of_identical_branches() {
        let b = row(&[0.1, 0.7, -0.3]);
        let z = BranchSet::new(vec![b.clone(); 3]).unwrap();
        for (a, e) in feature_mean(&z).data().iter().zip(b.data()) {
            assert!((a - e).abs() <= 1e-15 * e.abs());
        }
    }

    #[test]
    fn empty_and_mismatched_sets_fail() {
        assert!(BranchSet::new(vec![]).is_err());
        assert!(BranchSet::new(vec![row(&[1.0]), row(&[1.0, 2.0])]).is_err());
        assert!(ScoreSet::new(vec![]).is_err());
    }

    #[test]
    fn score_combine_examples() {
        // logits whose softmax rows are [0.6, 0.4] and [0.2, 0.8]
        let a = row(&[0.6f64.ln(), 0.4f64.ln()]);
        let b = row(&[0.2f64.ln(), 0.8f64.ln()]);
        let s = ScoreSet::new(vec![a.clone(), b]).unwrap();
        let mean = score_combine(&s, Combine::Mean);
        assert!((mean.data()[0] - 0.4).abs() < 1e-12);
        assert!((mean.data()[1] - 0.6).abs() < 1e-12);
        let max = score_combine(&s, Combine::Max);
        assert!((max.data()[0] - 0.6).abs() < 1e-12);
        assert!((max.data()[1] - 0.8).abs() < 1e-12);

        let single = ScoreSet::new(vec![a.clone()]).unwrap();
        assert_eq!(score_combine(&single, Combine::Mean), nn::softmax(&a));
    }

    #[test]
    fn max_ties_go_to_lowest_branch() {
        let (_, arg) = kernels::stack_max(&[&[1.0, 2.0], &[1.0, 3.0], &[3.0, 3.0]]);
        assert_eq!(arg, vec![2, 1]);
    }
}
