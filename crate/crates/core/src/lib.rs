pub mod cwe;
pub mod corpus;
pub mod verdict;
pub mod llm;
pub mod money;
pub mod strategy;
pub mod eval;
pub mod sast;
