//! Experiment harness around `normlab_core`: run configuration, training
//! loops, the diagnostic experiments, and the command-line front end.

pub mod config;
