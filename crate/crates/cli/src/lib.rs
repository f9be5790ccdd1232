//! Library surface of the memaudit CLI, exposed so integration tests can
//! drive the pipeline in-process.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod gpt2_table;
