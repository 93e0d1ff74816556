//! Runs the code snippets of the guide in `book/src` as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/markets.md")]
pub mod markets {}
#[doc = include_str!("../../../book/src/fio.md")]
pub mod fio {}
#[doc = include_str!("../../../book/src/policies.md")]
pub mod policies {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/factor-models.md")]
pub mod factor_models {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
