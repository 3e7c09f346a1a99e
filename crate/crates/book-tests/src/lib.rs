//! The guide's code listings, run as doctests. One module per chapter so a
//! failure names its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/corpus.md")]
pub mod corpus {}
#[doc = include_str!("../../../book/src/cwe-matching.md")]
pub mod cwe_matching {}
#[doc = include_str!("../../../book/src/verdicts.md")]
pub mod verdicts {}
#[doc = include_str!("../../../book/src/gateway.md")]
pub mod gateway {}
#[doc = include_str!("../../../book/src/strategies.md")]
pub mod strategies {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/sast.md")]
pub mod sast {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
