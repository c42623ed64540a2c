//! Resource accounting for the attention mechanisms.
//!
//! Two views of the same quantity are kept side by side: [`account_cost`]
//! evaluates the closed-form counts, while [`measure`] runs a closure with
//! thread-local counters switched on and reports what the tensor kernels
//! actually did. Every matrix product records `m * n * p` multiply-adds and
//! every tensor buffer created by an operation records its element count.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

/// Multiply-add and allocated-element totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub multiply_adds: u64,
    pub element_allocations: u64,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, rhs: Counts) -> Counts {
        Counts {
            multiply_adds: self.multiply_adds + rhs.multiply_adds,
            element_allocations: self.element_allocations + rhs.element_allocations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    /// Factored extraction/distribution warp.
    Nted,
    /// Dense softmax(Q K^T) V attention.
    Vanilla,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Nted => "nted",
            Mechanism::Vanilla => "vanilla",
        }
    }
}

thread_local! {
    static ACTIVE: Cell<Option<Counts>> = const { Cell::new(None) };
}

pub(crate) fn record_macs(n: usize) {
    ACTIVE.with(|c| {
        if let Some(mut counts) = c.get() {
            counts.multiply_adds += n as u64;
            c.set(Some(counts));
        }
    });
}

pub(crate) fn record_alloc(n: usize) {
    ACTIVE.with(|c| {
        if let Some(mut counts) = c.get() {
            counts.element_allocations += n as u64;
            c.set(Some(counts));
        }
    });
}

/// Runs `f` with instrumentation enabled on the current thread and returns
/// the counts it accumulated. Nested calls are folded into the outer scope.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, Counts) {
    let outer = ACTIVE.with(|c| c.replace(Some(Counts::default())));
    let out = f();
    let inner = ACTIVE.with(|c| c.replace(outer)).unwrap_or_default();
    if outer.is_some() {
        ACTIVE.with(|c| c.set(Some(outer.unwrap_or_default() + inner)));
    }
    (out, inner)
}

/// Closed-form resource usage of one attention application over an `h x w`
/// feature map with `c` channels and `k` semantics.
///
/// NTED keeps two `k x hw` correlation matrices, the `k x c` texture bank,
/// the projected values and the output. Its products are the two
/// correlation logits, texture extraction, texture distribution (each
/// `hw * k * c`) plus the `hw * c^2` projection. Vanilla attention instead
/// materializes the `hw x hw` score matrix.
pub fn account_cost(h: usize, w: usize, c: usize, k: usize, mechanism: Mechanism) -> Counts {
    let hw = (h * w) as u64;
    let (c, k) = (c as u64, k as u64);
    match mechanism {
        Mechanism::Nted => Counts {
            multiply_adds: 4 * hw * k * c + hw * c * c,
            element_allocations: 2 * k * hw + k * c + 2 * hw * c,
        },
        Mechanism::Vanilla => Counts {
            multiply_adds: 2 * c * hw * hw + hw * c * c,
            element_allocations: hw * hw + 2 * hw * c,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_values_at_1024_positions() {
        let nted = account_cost(32, 32, 64, 32, Mechanism::Nted);
        assert_eq!(nted.multiply_adds, 12_582_912);
        let vanilla = account_cost(32, 32, 64, 32, Mechanism::Vanilla);
        assert_eq!(vanilla.multiply_adds, 138_412_032);
        assert!(vanilla.multiply_adds / nted.multiply_adds == 11);
    }

    #[test]
    fn single_position_vanilla_scores() {
        let v = account_cost(1, 1, 1, 1, Mechanism::Vanilla);
        // (hw)^2 = 1 score element plus values and output
        assert_eq!(v.element_allocations, 1 + 2);
    }

    #[test]
    fn correlation_terms_double_with_k() {
        let a = account_cost(16, 16, 64, 16, Mechanism::Nted);
        let b = account_cost(16, 16, 64, 32, Mechanism::Nted);
        let proj = 256 * 64 * 64;
        assert_eq!(b.multiply_adds - proj, 2 * (a.multiply_adds - proj));
    }

    #[test]
    fn measure_is_scoped() {
        record_macs(5);
        let (_, counts) = measure(|| {
            record_macs(3);
            let (_, inner) = measure(|| record_alloc(7));
            assert_eq!(inner.element_allocations, 7);
        });
        assert_eq!(counts.multiply_adds, 3);
        assert_eq!(counts.element_allocations, 7);
    }
}
