//! Benchmarks live under `benches/`; run them with `cargo bench -p ll3d-bench`.
