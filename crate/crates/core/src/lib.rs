pub mod corpus;
pub mod inventory;
pub mod pairgen;
pub mod augment;
pub mod nn;
pub mod heads;
pub mod eval;
pub mod training;
pub mod config;
pub mod synthetic;
pub mod pipeline;
