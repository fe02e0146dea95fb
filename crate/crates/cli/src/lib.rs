//! Experiment harness library; see `main.rs` for the CLI entry point.
