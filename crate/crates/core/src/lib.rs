//! Nucleus detection as autoregressive next-point prediction.
//!
//! Centroids are quantized into `K` shared coordinate bins and emitted as a
//! raster-ordered token sequence by a small causal policy. The crate carries
//! everything that does not touch the filesystem:
//!
//! - [`scene`]: synthetic disc scenes with ground-truth centroids and masks
//! - [`tokenizer`]: quantization, sequence assembly and the format grammar
//! - [`supervision`]: Gaussian soft-label NTP loss and the BCE + Dice mask loss
//! - [`policy`]: the trainable policy, the frozen mask decoder and the optimizer
//! - [`reward`]: Hungarian matching, F1 / PQ rewards and a point-prompted segmenter
//! - [`grpo`]: group advantages, low-variance filtering, advantage shaping and the
//!   clipped surrogate update
//! - [`metrics`]: F1, PQ = DQ * SQ and AJI evaluation
//!
//! The crate is `no_std` and only needs `alloc`. Parallel fan-out is
//! abstracted behind [`exec::Executor`] so the std companion can plug in a
//! thread pool without changing any numerics.

#![no_std]
// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod exec;
pub mod grpo;
pub mod metrics;
pub mod policy;
pub mod raster;
pub mod reward;
pub mod scene;
pub mod seed;
pub mod supervision;
pub mod tokenizer;
pub mod train;

mod math;

pub use raster::Raster;
pub use scene::{Instance, Point, Scene, SceneConfig};
pub use tokenizer::{TokenSequence, Vocabulary};
