//! Shared fixtures for the benchmarks.

use polyseq::datagen::{generate, GenConfig};
use polyseq::matching::CostMatrix;
use polyseq::model::Sample;
use polyseq::{OrderPolicy, Task};

/// Deterministic pseudo-random `n × n` cost matrix.
pub fn cost_matrix(n: usize, seed: u64) -> CostMatrix {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let data = (0..n * n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    CostMatrix::new(n, n, data).expect("square matrix")
}

/// The first `n` 64×64 training samples of `task`.
pub fn samples(task: Task, n: u64) -> Vec<Sample> {
    let gc = GenConfig {
        task,
        image_w: 64,
        image_h: 64,
        ..GenConfig::default()
    };
    (0..n)
        .map(|i| Sample::new(&generate(&gc, i).expect("valid config"), OrderPolicy::Spatial).expect("encodable scene"))
        .collect()
}
