//! Criterion benchmarks for the feature, model and metric hot paths; see `benches/`.
