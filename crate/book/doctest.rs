// The chapters of the guide are plain Markdown so mdbook can render them,
// but mdbook cannot run listings that depend on workspace crates. Each
// chapter is therefore attached to a module below, which makes every Rust
// code block in it a rustdoc doctest run by `cargo test`.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/geometry.md")]
pub mod geometry {}
#[doc = include_str!("src/scenes.md")]
pub mod scenes {}
#[doc = include_str!("src/features.md")]
pub mod features {}
#[doc = include_str!("src/distillation.md")]
pub mod distillation {}
#[doc = include_str!("src/inversion.md")]
pub mod inversion {}
#[doc = include_str!("src/experiments.md")]
pub mod experiments {}
