//! The narrative guide, rendered from the mdbook sources in `book/`.
//!
//! Each chapter is included verbatim so its code listings compile and run as
//! doc-tests; `cargo test --doc` keeps the book honest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
