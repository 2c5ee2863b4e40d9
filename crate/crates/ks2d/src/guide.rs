//! The narrative guide lives in `book/` at the repository root; each
//! chapter is included here so its code snippets compile and run under
//! `cargo test --doc`, keeping the book in sync with the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/grids-and-operators.md")]
pub mod grids_and_operators {}

#[doc = include_str!("../../../book/src/time-steppers.md")]
pub mod time_steppers {}

#[doc = include_str!("../../../book/src/conservation-and-energy.md")]
pub mod conservation_and_energy {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
