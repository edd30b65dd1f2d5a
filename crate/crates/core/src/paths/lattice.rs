use super::TimeGrid;
use crate::error::Result;

/// Recombining symmetric random walk with steps `±sqrt(dt)`, each with
/// probability 1/2. Node `j` at step `i` (`0 <= j <= i`) sits at
/// `(2j - i) * sqrt(dt)`; its children are `j` (down) and `j + 1` (up).
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    grid: TimeGrid,
    sqrt_dt: f64,
}

pub fn build_lattice(grid: TimeGrid) -> Result<Lattice> {
    Ok(Lattice {
        grid,
        sqrt_dt: grid.dt().sqrt(),
    })
}

impl Lattice {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    #[inline]
    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    #[inline]
    pub fn node_count(&self, i: usize) -> usize {
        i + 1
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize) -> f64 {
        (2.0 * j as f64 - i as f64) * self.sqrt_dt
    }

    pub fn positions(&self, i: usize) -> Vec<f64> {
        (0..=i).map(|j| self.position(i, j)).collect()
    }

    /// Binomial node probabilities at step `i`, built by forward propagation.
    pub fn probabilities(&self, i: usize) -> Vec<f64> {
        let mut p = vec![1.0];
        for step in 0..i {
            let mut next = vec![0.0; step + 2];
            for (j, &q) in p.iter().enumerate() {
                next[j] += 0.5 * q;
                next[j + 1] += 0.5 * q;
            }
            p = next;
        }
        p
    }

    /// Expectation of a node function at step `i` under the lattice measure.
    pub fn expectation(&self, i: usize, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), i + 1);
        self.probabilities(i)
            .iter()
            .zip(values)
            .map(|(p, v)| p * v)
            .sum()
    }

    /// Descendants of node `(s, root)` at step `t`: the index range `root..=root + (t - s)`.
    pub fn descendants(&self, s: usize, root: usize, t: usize) -> std::ops::RangeInclusive<usize> {
        debug_assert!(t >= s && root <= s);
        root..=root + (t - s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_node_sets() {
        let l = build_lattice(TimeGrid::new(1.0, 2).unwrap()).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert_eq!(l.positions(0), vec![0.0]);
        let p1 = l.positions(1);
        assert!((p1[0] + h).abs() < 1e-15 && (p1[1] - h).abs() < 1e-15);
        let p2 = l.positions(2);
        assert!((p2[0] + 2.0 * h).abs() < 1e-15);
        assert_eq!(p2[1], 0.0);
        assert!((p2[2] - 2.0 * h).abs() < 1e-15);
    }

    #[test]
    fn moments_match_brownian_motion() {
        let l = build_lattice(TimeGrid::new(1.0, 100).unwrap()).unwrap();
        for i in [0, 1, 7, 50, 100] {
            let x = l.positions(i);
            let mean = l.expectation(i, &x);
            let sq: Vec<f64> = x.iter().map(|w| w * w).collect();
            assert!(mean.abs() < 1e-12, "step {i}: mean {mean}");
            assert!((l.expectation(i, &sq) - l.grid().time(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let l = build_lattice(TimeGrid::new(2.0, 30).unwrap()).unwrap();
        let s: f64 = l.probabilities(30).iter().sum();
        assert!((s - 1.0).abs() < 1e-14);
    }
}
