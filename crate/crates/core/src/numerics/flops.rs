//! Thread-local floating-point operation counter.
//!
//! Every matrix product adds `2·m·k·n` to the counter of the category that
//! is current on the calling thread. Callers bracket regions of a forward
//! pass with [`in_category`] and read deltas with [`snapshot`], so each
//! generation call owns its own numbers even when several threads decode
//! concurrently.

use std::cell::Cell;
use std::ops::Sub;

use serde::{Deserialize, Serialize};

/// Attribution bucket for counted work.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    /// Anything not explicitly attributed (training backward passes, tests).
    Other,
    /// Encoder stack.
    Encoder,
    /// Per-layer key/value projections of the encoder states used by
    /// cross-attention. Computed once per decode, independent of `T`.
    CrossMemory,
    /// Decoder work performed for positions that are still being computed
    /// at a layer: query/key/value/output projections of those rows,
    /// attention scores, cross-attention and feed-forward.
    DecoderActive,
    /// Key/value projections of frozen (already exited) positions so they
    /// stay visible to attention at upper layers.
    DecoderKvRefresh,
    /// Off-ramp classifiers.
    OffRamp,
    /// Soft-exit prediction feedback projection.
    Feedback,
}

const N_CATEGORIES: usize = 7;

impl Category {
    pub const ALL: [Category; N_CATEGORIES] = [
        Category::Other,
        Category::Encoder,
        Category::CrossMemory,
        Category::DecoderActive,
        Category::DecoderKvRefresh,
        Category::OffRamp,
        Category::Feedback,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// Counts per category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounts {
    counts: [u64; N_CATEGORIES],
}

impl FlopCounts {
    pub fn get(&self, category: Category) -> u64 {
        self.counts[category.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Work that scales with the decoded sequence: everything on the
    /// decoder side except the one-off cross-attention memory projection.
    pub fn decoder(&self) -> u64 {
        self.get(Category::DecoderActive)
            + self.get(Category::DecoderKvRefresh)
            + self.get(Category::OffRamp)
            + self.get(Category::Feedback)
    }

    /// Transformer-layer work of the decoder stack alone, without the
    /// per-layer classifiers and feedback projection.
    pub fn decoder_stack(&self) -> u64 {
        self.get(Category::DecoderActive) + self.get(Category::DecoderKvRefresh)
    }

    /// Off-ramp classifiers plus soft-exit feedback.
    pub fn heads(&self) -> u64 {
        self.get(Category::OffRamp) + self.get(Category::Feedback)
    }
}

impl Sub for FlopCounts {
    type Output = FlopCounts;

    fn sub(self, rhs: FlopCounts) -> FlopCounts {
        let mut out = FlopCounts::default();
        for i in 0..N_CATEGORIES {
            out.counts[i] = self.counts[i].wrapping_sub(rhs.counts[i]);
        }
        out
    }
}

thread_local! {
    static COUNTS: Cell<[u64; N_CATEGORIES]> = const { Cell::new([0; N_CATEGORIES]) };
    static CURRENT: Cell<Category> = const { Cell::new(Category::Other) };
}

pub(crate) fn add(flops: u64) {
    let cat = CURRENT.with(|c| c.get());
    COUNTS.with(|c| {
        let mut v = c.get();
        v[cat.index()] += flops;
        c.set(v);
    });
}

/// Current cumulative counts on this thread.
pub fn snapshot() -> FlopCounts {
    FlopCounts {
        counts: COUNTS.with(|c| c.get()),
    }
}

pub fn reset() {
    COUNTS.with(|c| c.set([0; N_CATEGORIES]));
}

/// Runs `f` with `category` as the attribution target, restoring the
/// previous category afterwards (also on early return through `?`).
pub fn in_category<R>(category: Category, f: impl FnOnce() -> R) -> R {
    struct Restore(Category);
    impl Drop for Restore {
        fn drop(&mut self) {
            CURRENT.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(CURRENT.with(|c| c.replace(category)));
    f()
}

/// Counts accumulated by `f` alone.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, FlopCounts) {
    let before = snapshot();
    let out = f();
    (out, snapshot() - before)
}
