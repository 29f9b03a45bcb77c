//! Plan parsing, experiment orchestration and artifact output for the
//! `mergelab` command-line tool.

pub mod commands;
pub mod io;
pub mod plan;
pub mod report;
pub mod results;
pub mod svg;
