//! File formats, training runs and the experiment harness around
//! `mdc-core`.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod experiments;
pub mod report;
pub mod run;
