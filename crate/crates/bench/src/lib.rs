//! Criterion benchmarks for the tracking stages; see `benches/tracking.rs`.
