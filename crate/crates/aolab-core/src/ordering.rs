//! Generation orders: permutation sampling policies and the combinatorics
//! of conditional spaces.
//!
//! A permutation `sigma` lists sequence positions in decode order:
//! `sigma[i]` is the position whose token is produced at step `i`. Policies
//! range from the identity (plain left-to-right) to fresh uniform orders
//! per sequence, with fixed and blockwise-fixed orders in between for
//! curriculum-style experiments.
//!
//! The counting functions measure how many distinct conditionals
//! `p(x_target | context)` a model family is asked to represent:
//!
//! * order-invariant (encoder-style): context is a set, `n * 2^(n-1)`
//! * order-dependent (decoder-style): context is an ordered tuple,
//!   `sum_k C(n,k) * (n-k) * k! = n! * sum_{j<n} 1/j!`, which approaches
//!   `e * n!` from below.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::rng::{self, Domain};
use crate::Result;

/// Largest `n` for which exhaustive conditional enumeration is allowed.
pub const ENUMERATION_MAX_N: usize = 8;

/// A decode order over `n` positions. `order[i]` is the position decoded
/// at step `i`; the vector is always a bijection on `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            order: (0..n).collect(),
        }
    }

    /// Validates that `order` is a bijection on `0..order.len()`.
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &p in &order {
            if p >= n || seen[p] {
                return Err(CoreError::config(format!(
                    "order {order:?} is not a permutation of 0..{n}"
                )));
            }
            seen[p] = true;
        }
        Ok(Permutation { order })
    }

    pub fn n(&self) -> usize {
        self.order.len()
    }

    /// Positions in decode order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// The inverse map: `invert()[pos]` is the decode step at which `pos`
    /// is produced. Applying `invert` twice returns the original.
    pub fn invert(&self) -> Permutation {
        let mut inv = vec![0usize; self.order.len()];
        for (step, &pos) in self.order.iter().enumerate() {
            inv[pos] = step;
        }
        Permutation { order: inv }
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &p)| i == p)
    }
}

/// How decode orders are drawn for each training or evaluation sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OrderPolicy {
    /// Left-to-right; reduces the any-order objective to plain AR.
    Identity,
    /// Fresh uniform permutation per sequence.
    UniformRandom,
    /// One uniform permutation drawn from `seed`, constant across calls.
    FixedRandom { seed: u64 },
    /// One within-block pattern drawn from `seed`, repeated across
    /// consecutive blocks which are themselves visited left to right.
    BlockwiseFixed { block_size: usize, seed: u64 },
    /// Per-sequence choice among component policies with the given
    /// weights (normalized internally).
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub policy: OrderPolicy,
}

impl OrderPolicy {
    /// The usual any-order mix: `identity_frac` of sequences keep
    /// left-to-right order, the rest get fresh uniform orders.
    pub fn l2r_uniform_mix(identity_frac: f64) -> Self {
        OrderPolicy::Mixture {
            components: vec![
                MixtureComponent {
                    weight: identity_frac,
                    policy: OrderPolicy::Identity,
                },
                MixtureComponent {
                    weight: 1.0 - identity_frac,
                    policy: OrderPolicy::UniformRandom,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OrderPolicy::BlockwiseFixed { block_size, .. } if *block_size == 0 => {
                Err(CoreError::config("block_size must be positive"))
            }
            OrderPolicy::Mixture { components } => {
                if components.is_empty() {
                    return Err(CoreError::config("mixture needs at least one component"));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if !(total.is_finite() && total > 0.0) || components.iter().any(|c| c.weight < 0.0)
                {
                    return Err(CoreError::config("mixture weights must be nonnegative with positive sum"));
                }
                for c in components {
                    if matches!(c.policy, OrderPolicy::Mixture { .. }) {
                        return Err(CoreError::config("nested mixtures are not supported"));
                    }
                    c.policy.validate()?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Draws a decode order for one sequence of length `n`.
///
/// `rng` feeds the per-sequence randomness (uniform draws, mixture
/// choices). `FixedRandom` and `BlockwiseFixed` ignore it by design: they
/// derive their single permutation from their own seed so every sequence
/// and every call sees the same order.
pub fn sample_permutation(policy: &OrderPolicy, n: usize, rng: &mut ChaCha8Rng) -> Permutation {
    match policy {
        OrderPolicy::Identity => Permutation::identity(n),
        OrderPolicy::UniformRandom => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            Permutation { order }
        }
        OrderPolicy::FixedRandom { seed } => {
            let mut own = rng::stream(*seed, Domain::Order, n as u64);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut own);
            Permutation { order }
        }
        OrderPolicy::BlockwiseFixed { block_size, seed } => {
            let bs = (*block_size).max(1);
            let mut own = rng::stream(*seed, Domain::Order, bs as u64);
            let mut pattern: Vec<usize> = (0..bs).collect();
            pattern.shuffle(&mut own);
            let mut order = Vec::with_capacity(n);
            let mut start = 0;
            while start < n {
                let rem = (n - start).min(bs);
                // A short tail block keeps the pattern's relative order
                // over the indices that still fit.
                for &off in pattern.iter().filter(|&&off| off < rem) {
                    order.push(start + off);
                }
                start += rem;
            }
            Permutation { order }
        }
        OrderPolicy::Mixture { components } => {
            let total: f64 = components.iter().map(|c| c.weight).sum();
            let probs: Vec<f64> = components.iter().map(|c| c.weight / total).collect();
            let choice = rng::sample_categorical(rng, &probs);
            sample_permutation(&components[choice].policy, n, rng)
        }
    }
}

/// Number of distinct set-conditioned predictions over `n` positions:
/// `n * 2^(n-1)` (choose the target, then any subset of the rest).
pub fn count_order_invariant(n: usize) -> BigUint {
    if n == 0 {
        return BigUint::zero();
    }
    BigUint::from(n) * (BigUint::one() << (n - 1))
}

/// Number of distinct tuple-conditioned predictions over `n` positions:
/// `sum_{k=0}^{n-1} C(n,k) * (n-k) * k!`, i.e. ordered context of size `k`
/// followed by a target outside it.
pub fn count_order_dependent(n: usize) -> BigUint {
    let mut total = BigUint::zero();
    for k in 0..n {
        total += binomial(n, k) * BigUint::from(n - k) * factorial(k);
    }
    total
}

/// `count_order_dependent(n) / n!` as f64; approaches Euler's number.
pub fn order_dependent_ratio(n: usize) -> f64 {
    let num = count_order_dependent(n);
    let den = factorial(n);
    // Both fit in f64 up to n ~ 170; the desk sizes stay far below that.
    num.to_f64().expect("count fits f64") / den.to_f64().expect("factorial fits f64")
}

pub fn factorial(n: usize) -> BigUint {
    (1..=n).fold(BigUint::one(), |acc, i| acc * BigUint::from(i))
}

pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Which notion of "context" a conditional uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionalKind {
    /// Context is an unordered set of positions.
    OrderInvariant,
    /// Context is an ordered tuple of positions.
    OrderDependent,
}

/// One conditional `p(x_target | x_context)`. For the order-invariant kind
/// the context is kept sorted; for the order-dependent kind its order is
/// meaningful.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conditional {
    pub context: Vec<usize>,
    pub target: usize,
}

/// Exhaustively lists every conditional over `n` positions. Counts grow
/// like `e * n!`, so `n` is capped at [`ENUMERATION_MAX_N`].
pub fn enumerate_conditionals(n: usize, kind: ConditionalKind) -> Result<Vec<Conditional>> {
    if n > ENUMERATION_MAX_N {
        return Err(CoreError::EnumerationBound {
            n,
            max: ENUMERATION_MAX_N,
        });
    }
    let mut out = Vec::new();
    match kind {
        ConditionalKind::OrderInvariant => {
            for target in 0..n {
                let rest: Vec<usize> = (0..n).filter(|&p| p != target).collect();
                for bits in 0u64..(1u64 << rest.len()) {
                    let context: Vec<usize> = rest
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| bits >> i & 1 == 1)
                        .map(|(_, &p)| p)
                        .collect();
                    out.push(Conditional { context, target });
                }
            }
        }
        ConditionalKind::OrderDependent => {
            let mut prefix = Vec::new();
            let mut used = vec![false; n];
            enumerate_tuples(n, &mut prefix, &mut used, &mut out);
        }
    }
    Ok(out)
}

fn enumerate_tuples(
    n: usize,
    prefix: &mut Vec<usize>,
    used: &mut [bool],
    out: &mut Vec<Conditional>,
) {
    for target in 0..n {
        if !used[target] {
            out.push(Conditional {
                context: prefix.clone(),
                target,
            });
        }
    }
    if prefix.len() + 1 >= n {
        return;
    }
    for p in 0..n {
        if used[p] {
            continue;
        }
        used[p] = true;
        prefix.push(p);
        enumerate_tuples(n, prefix, used, out);
        prefix.pop();
        used[p] = false;
    }
}

/// All `n!` permutations of `0..n`, in lexicographic order. Used by the
/// exhaustive objective-equivalence checks; same cap as enumeration.
pub fn all_permutations(n: usize) -> Result<Vec<Permutation>> {
    if n > ENUMERATION_MAX_N {
        return Err(CoreError::EnumerationBound {
            n,
            max: ENUMERATION_MAX_N,
        });
    }
    let mut out = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    loop {
        out.push(Permutation {
            order: order.clone(),
        });
        // Next lexicographic permutation.
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| order[i] < order[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| order[j] > order[i]).unwrap();
        order.swap(i, j);
        order[i + 1..].reverse();
    }
    Ok(out)
}
