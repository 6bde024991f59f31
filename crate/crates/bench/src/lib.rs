//! Criterion benchmarks for the planner, trainer, simulator and optimizer.
//! Run with `cargo bench -p stagelora-bench`.
