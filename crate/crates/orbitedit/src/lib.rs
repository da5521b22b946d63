//! Edit one view of a 360° orbit, propagate the edit to every other view.
//!
//! The crate is a desk-scale, end-to-end lab for anchored multi-view editing:
//! a procedural turntable renderer produces orbit datasets, a small
//! view-sequence diffusion model learns to generate whole orbits from a single
//! conditioning view, and a dual-stream sampler pushes an edit made at one
//! anchor view around the ring while the untouched front view pins identity.
//! An evaluation harness reproduces the expected quality trends on synthetic
//! ground truth.
//!
//! The quickest way in is the `examples/` directory; each example is runnable
//! on its own and exercises one capability:
//!
//! * `render_orbit` — procedural scenes and turntable rendering
//!   (`cargo run --release -p orbitedit --example render_orbit`)
//! * `edit_scene` — insert / delete / replace / recolor edits on a scene
//! * `noise_schedule` — forward-noising grids and schedule tables
//! * `train_micro` — train a miniature denoiser in about a minute
//! * `sample_orbit` — single-stream orbit generation from one view
//! * `anchor_selection` — pick the anchor view by visible-change area
//! * `dual_stream_edit` — the full edit-propagation pipeline on one scene
//! * `metrics_demo` — PSNR / SSIM reports between orbits
//! * `ablation_table` — fusion/guidance ablation rows on a tiny split
//!
//! The same capabilities are reachable from the `orbitedit` binary
//! (`gen`, `train`, `edit`, `sample`, `eval`, `ablate`, `inspect`).

pub mod cli;
pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod propagate;
pub mod sampler;
pub mod scenegen;
pub mod sequence;
pub mod util;

pub use error::{Error, Result};
pub use sequence::ViewSequence;
