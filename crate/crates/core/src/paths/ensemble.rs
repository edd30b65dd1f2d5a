use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::TimeGrid;
use crate::error::{Error, Result};

/// Sampled Brownian paths `W[m][i]` in `R^d`, stored path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    count: usize,
    seed: u64,
    stream: u64,
    // layout: [path][step][component]
    values: Vec<f64>,
}

/// Read-only view of one sampled path.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> PathView<'a> {
    /// Brownian position at step `i`.
    #[inline]
    pub fn at(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Number of grid nodes on the path (`N + 1`).
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-path generator: the key depends on `(seed, stream)`, the ChaCha stream
/// word on the path index, so each path is reproducible in isolation.
fn path_rng(seed: u64, stream: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ splitmix64(stream));
    rng.set_stream(path as u64);
    rng
}

/// Simulate `count` independent `dim`-dimensional Brownian paths on `grid`.
///
/// Increments are `sqrt(dt) * N(0, 1)` per component. Output is independent of
/// the rayon thread count.
pub fn simulate_paths(
    grid: TimeGrid,
    dim: usize,
    count: usize,
    seed: u64,
    stream: u64,
) -> Result<PathEnsemble> {
    if dim == 0 {
        return Err(Error::param("path dimension must be at least 1"));
    }
    if count == 0 {
        return Err(Error::param("path count must be at least 1"));
    }
    let n = grid.steps();
    let sqrt_dt = grid.dt().sqrt();
    let stride = (n + 1) * dim;
    let mut values = vec![0.0; stride * count];

    values
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(m, path)| {
            let mut rng = path_rng(seed, stream, m);
            for i in 0..n {
                for k in 0..dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    path[(i + 1) * dim + k] = path[i * dim + k] + sqrt_dt * z;
                }
            }
        });

    Ok(PathEnsemble {
        grid,
        dim,
        count,
        seed,
        stream,
        values,
    })
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    #[inline]
    pub fn path(&self, m: usize) -> PathView<'_> {
        let stride = (self.grid.steps() + 1) * self.dim;
        PathView {
            data: &self.values[m * stride..(m + 1) * stride],
            dim: self.dim,
        }
    }

    /// `W[m][i]`.
    #[inline]
    pub fn position(&self, m: usize, i: usize) -> &[f64] {
        self.path(m).at(i)
    }

    /// Component `k` of the increment `W[m][i+1] - W[m][i]`.
    #[inline]
    pub fn increment(&self, m: usize, i: usize, k: usize) -> f64 {
        let p = self.path(m);
        p.at(i + 1)[k] - p.at(i)[k]
    }
}
