//! Attention masks.
//!
//! Three shapes cover every use in the lab:
//! * causal: sequential decoding and permuted-order training,
//! * full: the bidirectional encoder,
//! * parallel generation: `c` committed slots attend causally among
//!   themselves, then `m` query slots each see the committed prefix plus
//!   themselves and never each other, which is what makes simultaneous
//!   multi-position prediction consistent with one-at-a-time decoding.

use crate::error::CoreError;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    Full,
    ParallelGeneration { committed: usize, queries: usize },
    /// Independent sub-masks along the diagonal; rows of different parts
    /// never see each other.
    BlockDiagonal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    kind: MaskKind,
    allow: Vec<bool>, // row-major [n, n]: allow[q * n + k]
}

impl AttentionMask {
    pub fn causal(n: usize) -> AttentionMask {
        let mut allow = vec![false; n * n];
        for q in 0..n {
            for k in 0..=q {
                allow[q * n + k] = true;
            }
        }
        AttentionMask {
            n,
            kind: MaskKind::Causal,
            allow,
        }
    }

    pub fn full(n: usize) -> AttentionMask {
        AttentionMask {
            n,
            kind: MaskKind::Full,
            allow: vec![true; n * n],
        }
    }

    /// Mask for one parallel decode step: slots `0..committed` are the
    /// prefix (causal among themselves), slots `committed..` are queries
    /// that attend the whole prefix plus themselves only.
    pub fn parallel_generation(committed: usize, queries: usize) -> Result<AttentionMask> {
        if queries == 0 {
            return Err(CoreError::config("parallel mask needs at least one query"));
        }
        let n = committed + queries;
        let mut allow = vec![false; n * n];
        for q in 0..committed {
            for k in 0..=q {
                allow[q * n + k] = true;
            }
        }
        for t in 0..queries {
            let q = committed + t;
            for k in 0..committed {
                allow[q * n + k] = true;
            }
            allow[q * n + q] = true;
        }
        Ok(AttentionMask {
            n,
            kind: MaskKind::ParallelGeneration {
                committed,
                queries,
            },
            allow,
        })
    }

    /// Concatenates masks block-diagonally, so several independent row
    /// groups (say, many short scoring chains) can share one forward
    /// pass without interacting through attention.
    pub fn batch(parts: &[&AttentionMask]) -> Result<AttentionMask> {
        match parts {
            [] => Err(CoreError::config("batch mask needs at least one part")),
            [only] => Ok((*only).clone()),
            _ => {
                let n: usize = parts.iter().map(|m| m.n).sum();
                let mut allow = vec![false; n * n];
                let mut off = 0;
                for m in parts {
                    for q in 0..m.n {
                        let row = &mut allow[(off + q) * n + off..(off + q) * n + off + m.n];
                        row.copy_from_slice(&m.allow[q * m.n..(q + 1) * m.n]);
                    }
                    off += m.n;
                }
                Ok(AttentionMask {
                    n,
                    kind: MaskKind::BlockDiagonal,
                    allow,
                })
            }
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.n + k]
    }

    /// Row of allowed keys for query `q`.
    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.n..(q + 1) * self.n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(m: &AttentionMask) -> Vec<Vec<u8>> {
        (0..m.n())
            .map(|q| m.row(q).iter().map(|&b| b as u8).collect())
            .collect()
    }

    #[test]
    fn parallel_two_two_matches_contract() {
        let m = AttentionMask::parallel_generation(2, 2).unwrap();
        assert_eq!(
            rows(&m),
            vec![
                vec![1, 0, 0, 0],
                vec![1, 1, 0, 0],
                vec![1, 1, 1, 0],
                vec![1, 1, 0, 1],
            ]
        );
    }

    #[test]
    fn single_query_degenerates_to_causal() {
        let m = AttentionMask::parallel_generation(3, 1).unwrap();
        let c = AttentionMask::causal(4);
        assert_eq!(rows(&m), rows(&c));
    }

    #[test]
    fn zero_committed_queries_are_self_only() {
        let m = AttentionMask::parallel_generation(0, 3).unwrap();
        assert_eq!(
            rows(&m),
            vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]
        );
    }

    #[test]
    fn every_row_attends_self_and_queries_never_cross() {
        for (c, q) in [(0, 1), (1, 1), (2, 2), (5, 3), (0, 4)] {
            let m = AttentionMask::parallel_generation(c, q).unwrap();
            for i in 0..m.n() {
                assert!(m.allowed(i, i), "row {i} must see itself (c={c}, q={q})");
            }
            for a in c..c + q {
                for b in c..c + q {
                    if a != b {
                        assert!(!m.allowed(a, b), "queries {a},{b} must not interact");
                    }
                }
            }
        }
    }

    #[test]
    fn batch_lays_parts_on_the_diagonal() {
        let a = AttentionMask::causal(2);
        let b = AttentionMask::parallel_generation(1, 1).unwrap();
        let m = AttentionMask::batch(&[&a, &b]).unwrap();
        assert_eq!(m.kind(), MaskKind::BlockDiagonal);
        assert_eq!(
            rows(&m),
            vec![
                vec![1, 0, 0, 0],
                vec![1, 1, 0, 0],
                vec![0, 0, 1, 0],
                vec![0, 0, 1, 1],
            ]
        );
        let single = AttentionMask::batch(&[&a]).unwrap();
        assert_eq!(single, a);
        assert!(AttentionMask::batch(&[]).is_err());
    }

    #[test]
    fn causal_and_full_shapes() {
        let c = AttentionMask::causal(3);
        assert_eq!(rows(&c), vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 1, 1]]);
        let f = AttentionMask::full(2);
        assert_eq!(rows(&f), vec![vec![1, 1], vec![1, 1]]);
    }
}
