//! Criterion benchmarks for the layer kernels, the two loss layers, a full
//! training step under each objective, and HMC leapfrog trajectories. Run with
//! `cargo bench -p tiltnet-bench`.
