//! Separable convex regularizers and their proximal maps.
//!
//! Every variant decomposes over pieces (single coordinates, or whole groups
//! for the grouped norm), so the prox of the full vector is the prox of each
//! piece computed independently.

use ndarray::{Array1, ArrayView1};
use std::ops::Range;
use thiserror::Error;

use crate::problem::BlockIndexSet;

#[derive(Debug, Error)]
pub enum RegularizerError {
    #[error("groups must tile 0..{n} contiguously and in order; offender: group {group:?}")]
    BadGroups { n: usize, group: Range<usize> },
    #[error("block splits group {group} ({range:?}); grouped prox needs whole groups")]
    GroupSplit { group: usize, range: Range<usize> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("penalty weight must be nonnegative, got {0}")]
    NegativeWeight(f64),
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Zero,
    L1 {
        lambda: f64,
    },
    GroupL2 {
        lambda: f64,
        groups: Vec<Range<usize>>,
    },
}

/// Separable convex regularizer `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableRegularizer {
    n: usize,
    kind: Kind,
}

fn soft_threshold(u: f64, k: f64) -> f64 {
    u.signum() * (u.abs() - k).max(0.0)
}

fn group_shrink(u: &ArrayView1<f64>, k: f64) -> Array1<f64> {
    let norm = u.dot(u).sqrt();
    if norm == 0.0 {
        return Array1::zeros(u.len());
    }
    u * (1.0 - k / norm).max(0.0)
}

impl SeparableRegularizer {
    pub fn zero(n: usize) -> Self {
        Self {
            n,
            kind: Kind::Zero,
        }
    }

    pub fn l1(n: usize, lambda: f64) -> Self {
        assert!(lambda >= 0.0, "penalty weight must be nonnegative");
        Self {
            n,
            kind: Kind::L1 { lambda },
        }
    }

    /// Grouped Euclidean norm over contiguous groups that tile `0..n` in order.
    pub fn group_l2(
        n: usize,
        lambda: f64,
        groups: Vec<Range<usize>>,
    ) -> Result<Self, RegularizerError> {
        if lambda < 0.0 {
            return Err(RegularizerError::NegativeWeight(lambda));
        }
        let mut cursor = 0usize;
        for g in &groups {
            if g.start != cursor || g.end <= g.start || g.end > n {
                return Err(RegularizerError::BadGroups {
                    n,
                    group: g.clone(),
                });
            }
            cursor = g.end;
        }
        if cursor != n {
            return Err(RegularizerError::BadGroups {
                n,
                group: cursor..n,
            });
        }
        Ok(Self {
            n,
            kind: Kind::GroupL2 { lambda, groups },
        })
    }

    /// Contiguous groups of `width` coordinates; the final group absorbs the
    /// remainder and may be shorter.
    pub fn contiguous_groups(n: usize, width: usize) -> Vec<Range<usize>> {
        assert!(width >= 1);
        let mut groups = Vec::with_capacity(n.div_ceil(width));
        let mut start = 0;
        while start < n {
            let end = (start + width).min(n);
            groups.push(start..end);
            start = end;
        }
        groups
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, Kind::Zero)
    }

    /// Group table when the regularizer is grouped.
    pub fn groups(&self) -> Option<&[Range<usize>]> {
        match &self.kind {
            Kind::GroupL2 { groups, .. } => Some(groups),
            _ => None,
        }
    }

    /// Number of separable pieces.
    pub fn piece_count(&self) -> usize {
        match &self.kind {
            Kind::Zero | Kind::L1 { .. } => self.n,
            Kind::GroupL2 { groups, .. } => groups.len(),
        }
    }

    /// `g(x)`.
    pub fn value(&self, x: &ArrayView1<f64>) -> f64 {
        assert_eq!(x.len(), self.n, "regularizer value: dimension mismatch");
        match &self.kind {
            Kind::Zero => 0.0,
            Kind::L1 { lambda } => lambda * x.iter().map(|v| v.abs()).sum::<f64>(),
            Kind::GroupL2 { lambda, groups } => {
                lambda
                    * groups
                        .iter()
                        .map(|g| {
                            let seg = x.slice(ndarray::s![g.clone()]);
                            seg.dot(&seg).sqrt()
                        })
                        .sum::<f64>()
            }
        }
    }

    /// Prox of a single piece: `argmin_z t*psi(z) + 1/2 ||z - u||^2`, where
    /// `u` has the piece's length (1 for scalar pieces, group width otherwise).
    pub fn prox_piece(&self, piece: usize, u: &ArrayView1<f64>, t: f64) -> Array1<f64> {
        assert!(t >= 0.0, "prox step must be nonnegative");
        match &self.kind {
            Kind::Zero => {
                assert_eq!(u.len(), 1);
                u.to_owned()
            }
            Kind::L1 { lambda } => {
                assert_eq!(u.len(), 1);
                Array1::from_elem(1, soft_threshold(u[0], t * lambda))
            }
            Kind::GroupL2 { lambda, groups } => {
                assert_eq!(u.len(), groups[piece].len());
                group_shrink(u, t * lambda)
            }
        }
    }

    /// Prox of the whole vector, assembled piecewise.
    pub fn prox_full(&self, u: &ArrayView1<f64>, t: f64) -> Array1<f64> {
        assert_eq!(u.len(), self.n, "prox: dimension mismatch");
        assert!(t >= 0.0, "prox step must be nonnegative");
        match &self.kind {
            Kind::Zero => u.to_owned(),
            Kind::L1 { lambda } => u.mapv(|v| soft_threshold(v, t * lambda)),
            Kind::GroupL2 { lambda, groups } => {
                let mut out = Array1::zeros(self.n);
                for g in groups {
                    let seg = u.slice(ndarray::s![g.clone()]);
                    out.slice_mut(ndarray::s![g.clone()])
                        .assign(&group_shrink(&seg, t * lambda));
                }
                out
            }
        }
    }

    /// The regularizer restricted to a block, reindexed to the block's own
    /// coordinates. Grouped regularizers demand the block be a union of whole
    /// groups so separability survives the restriction.
    pub fn restrict(
        &self,
        block: &BlockIndexSet,
    ) -> Result<SeparableRegularizer, RegularizerError> {
        if block.ambient_dim() != self.n {
            return Err(RegularizerError::Dimension {
                expected: self.n,
                got: block.ambient_dim(),
            });
        }
        let p = block.len();
        match &self.kind {
            Kind::Zero => Ok(SeparableRegularizer::zero(p)),
            Kind::L1 { lambda } => Ok(SeparableRegularizer::l1(p, *lambda)),
            Kind::GroupL2 { lambda, groups } => {
                let idx = block.indices();
                let mut sub = Vec::new();
                let mut pos = 0usize;
                while pos < idx.len() {
                    let coord = idx[pos];
                    let gi = groups
                        .binary_search_by(|g| {
                            if coord < g.start {
                                std::cmp::Ordering::Greater
                            } else if coord >= g.end {
                                std::cmp::Ordering::Less
                            } else {
                                std::cmp::Ordering::Equal
                            }
                        })
                        .expect("groups tile the dimension");
                    let g = &groups[gi];
                    let w = g.len();
                    let whole = coord == g.start
                        && pos + w <= idx.len()
                        && idx[pos..pos + w]
                            .iter()
                            .enumerate()
                            .all(|(k, &c)| c == g.start + k);
                    if !whole {
                        return Err(RegularizerError::GroupSplit {
                            group: gi,
                            range: g.clone(),
                        });
                    }
                    sub.push(pos..pos + w);
                    pos += w;
                }
                SeparableRegularizer::group_l2(p, *lambda, sub)
            }
        }
    }
}
