//! Criterion benchmarks for the flowsynth kernels live in `benches/`; run
//! them with `cargo bench -p flowsynth-bench`.
