//! Benchmarks for gecprep-core live under `benches/`.
