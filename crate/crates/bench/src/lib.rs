//! Benchmarks for the convolution kernels and network forward passes live in `benches/`.
