use crate::error::{Error, Result};

/// Uniform time grid `t_i = i * T / N` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::param(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::param("grid needs at least one step"));
        }
        Ok(Self { horizon, steps })
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `t_i`. The last node is pinned to the horizon.
    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }

    /// Remaining time `T - t_i`.
    #[inline]
    pub fn remaining(&self, i: usize) -> f64 {
        self.horizon - self.time(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_are_uniform_and_pinned() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        let ts = g.times();
        assert_eq!(ts[0], 0.0);
        assert_eq!(ts[3], 1.0);
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
        assert!((g.dt() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(f64::NAN, 4).is_err());
    }
}
