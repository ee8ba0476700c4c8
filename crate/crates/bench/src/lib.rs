//! Benchmarks for the rendering, encoding and training hot paths live in `benches/`.
