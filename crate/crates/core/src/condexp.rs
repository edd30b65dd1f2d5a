//! Conditional expectations `E[. | F_{t_i}]` on the two backends.
//!
//! The lattice engine is exact: the value at a node is the average of its two
//! children. The ensemble engine projects onto polynomials of a declared
//! Markov state (ridge-regularized least squares, intercept unpenalized), so
//! constants are reproduced and the projection commutes with constant shifts.

use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::paths::{Lattice, PathEnsemble, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackendKind {
    Lattice,
    Ensemble,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendKind::Lattice => f.write_str("lattice"),
            BackendKind::Ensemble => f.write_str("ensemble"),
        }
    }
}

/// One real value per lattice node or per path, at a fixed step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepValues {
    kind: BackendKind,
    step: usize,
    values: Vec<f64>,
}

impl StepValues {
    pub fn new(kind: BackendKind, step: usize, values: Vec<f64>) -> Self {
        Self { kind, step, values }
    }

    pub fn kind(&self) -> BackendKind {
        self.kind
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.kind, self.step, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Pointwise combination; both operands must live on the same backend and step.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_compatible(other)?;
        Ok(Self::new(
            self.kind,
            self.step,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn ensure_compatible(&self, other: &Self) -> Result<()> {
        if self.kind != other.kind || self.step != other.step || self.len() != other.len() {
            return Err(Error::Backend(format!(
                "incompatible step values: {} step {} (len {}) vs {} step {} (len {})",
                self.kind,
                self.step,
                self.len(),
                other.kind,
                other.step,
                other.len()
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.ensure_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Maps `(t, W_t)` to the Markov state used by the regression basis.
#[derive(Clone, Default)]
pub enum StateExtractor {
    /// The Brownian position itself.
    #[default]
    Brownian,
    /// `spot * exp((rate - sigma^2/2) t + sigma W^1_t)`.
    GeometricBrownian { spot: f64, rate: f64, sigma: f64 },
    Custom {
        dim: usize,
        label: String,
        map: Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>,
    },
}

impl fmt::Debug for StateExtractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateExtractor::Brownian => f.write_str("Brownian"),
            StateExtractor::GeometricBrownian { spot, rate, sigma } => write!(
                f,
                "GeometricBrownian {{ spot: {spot}, rate: {rate}, sigma: {sigma} }}"
            ),
            StateExtractor::Custom { dim, label, .. } => {
                write!(f, "Custom {{ dim: {dim}, label: {label:?} }}")
            }
        }
    }
}

impl StateExtractor {
    pub fn state_dim(&self, brownian_dim: usize) -> usize {
        match self {
            StateExtractor::Brownian => brownian_dim,
            StateExtractor::GeometricBrownian { .. } => 1,
            StateExtractor::Custom { dim, .. } => *dim,
        }
    }

    fn write(&self, t: f64, w: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            StateExtractor::Brownian => out.extend_from_slice(w),
            StateExtractor::GeometricBrownian { spot, rate, sigma } => {
                out.push(spot * ((rate - 0.5 * sigma * sigma) * t + sigma * w[0]).exp())
            }
            StateExtractor::Custom { map, .. } => out.extend(map(t, w)),
        }
    }
}

/// Polynomial regression basis for the ensemble engine.
#[derive(Debug, Clone)]
pub struct RegressionSpec {
    pub degree: usize,
    pub ridge: f64,
    pub state: StateExtractor,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self {
            degree: 4,
            ridge: 1e-8,
            state: StateExtractor::Brownian,
        }
    }
}

impl RegressionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::param(format!("ridge must be >= 0, got {}", self.ridge)));
        }
        Ok(())
    }

    /// Columns of the design matrix: the intercept plus `degree` powers per state coordinate.
    pub fn columns(&self, brownian_dim: usize) -> usize {
        1 + self.degree * self.state.state_dim(brownian_dim)
    }
}

/// Standardized polynomial features plus the factored normal matrix for one step.
#[derive(Debug, Clone)]
struct Projector {
    step: usize,
    /// (state coordinate, mean, scale) of non-degenerate coordinates.
    coords: Vec<(usize, f64, f64)>,
    col_mean: Vec<f64>,
    col_scale: Vec<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl Projector {
    fn ncols(&self) -> usize {
        self.col_mean.len()
    }

    fn features(&self, state: &[f64], degree: usize, out: &mut [f64]) {
        let mut c = 0;
        for &(k, mean, scale) in &self.coords {
            let x = (state[k] - mean) / scale;
            let mut p = 1.0;
            for _ in 0..degree {
                p *= x;
                out[c] = (p - self.col_mean[c]) / self.col_scale[c];
                c += 1;
            }
        }
    }
}

/// Mean with the first element as pivot, so constant vectors average exactly.
fn pivot_mean(values: &[f64]) -> f64 {
    let pivot = values[0];
    let mut acc = 0.0;
    for &v in values {
        acc += v - pivot;
    }
    pivot + acc / values.len() as f64
}

/// Sampled paths together with the regression basis used on them.
#[derive(Debug, Clone)]
pub struct Ensemble {
    paths: PathEnsemble,
    spec: RegressionSpec,
    projectors: Vec<OnceLock<Result<Projector>>>,
}

impl Ensemble {
    pub fn new(paths: PathEnsemble, spec: RegressionSpec) -> Result<Self> {
        spec.validate()?;
        let n = paths.grid().steps();
        Ok(Self {
            paths,
            spec,
            projectors: (0..=n).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn paths(&self) -> &PathEnsemble {
        &self.paths
    }

    pub fn spec(&self) -> &RegressionSpec {
        &self.spec
    }

    fn states(&self, i: usize) -> (usize, Vec<f64>) {
        let d = self.spec.state.state_dim(self.paths.dim());
        let t = self.paths.grid().time(i);
        let mut flat = Vec::with_capacity(d * self.paths.count());
        let mut buf = Vec::with_capacity(d);
        for m in 0..self.paths.count() {
            self.spec.state.write(t, self.paths.position(m, i), &mut buf);
            flat.extend_from_slice(&buf);
        }
        (d, flat)
    }

    fn projector(&self, i: usize) -> Result<&Projector> {
        self.projectors[i]
            .get_or_init(|| self.build_projector(i))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn build_projector(&self, i: usize) -> Result<Projector> {
        let count = self.paths.count();
        let q = self.spec.degree;
        let (d, states) = self.states(i);
        let mf = count as f64;

        // Coordinates with zero spread (e.g. every path at W_0 = 0) only span constants.
        let mut coords = Vec::new();
        for k in 0..d {
            let col: Vec<f64> = (0..count).map(|m| states[m * d + k]).collect();
            let mean = pivot_mean(&col);
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / mf;
            let scale = var.sqrt();
            if q > 0 && scale > 1e-12 * (1.0 + mean.abs()) {
                coords.push((k, mean, scale));
            }
        }

        let ncols = coords.len() * q;
        let mut col_mean = vec![0.0; ncols];
        let mut col_scale = vec![1.0; ncols];
        let mut raw = vec![0.0; ncols];
        let raw_feature = |m: usize, raw: &mut [f64]| {
            let mut c = 0;
            for &(k, mean, scale) in &coords {
                let x = (states[m * d + k] - mean) / scale;
                let mut p = 1.0;
                for _ in 0..q {
                    p *= x;
                    raw[c] = p;
                    c += 1;
                }
            }
        };
        for m in 0..count {
            raw_feature(m, &mut raw);
            for c in 0..ncols {
                col_mean[c] += raw[c];
            }
        }
        for v in &mut col_mean {
            *v /= mf;
        }
        let mut col_var = vec![0.0; ncols];
        for m in 0..count {
            raw_feature(m, &mut raw);
            for c in 0..ncols {
                let e = raw[c] - col_mean[c];
                col_var[c] += e * e;
            }
        }
        for c in 0..ncols {
            let s = (col_var[c] / mf).sqrt();
            col_scale[c] = if s > 0.0 { s } else { 1.0 };
        }

        let mut proj = Projector {
            step: i,
            coords: coords.clone(),
            col_mean,
            col_scale,
            chol: None,
        };
        if ncols == 0 {
            return Ok(proj);
        }

        let mut normal = DMatrix::<f64>::zeros(ncols, ncols);
        let mut f = vec![0.0; ncols];
        for m in 0..count {
            proj.features(&states[m * d..(m + 1) * d], q, &mut f);
            for a in 0..ncols {
                for b in 0..=a {
                    normal[(a, b)] += f[a] * f[b];
                }
            }
        }
        for a in 0..ncols {
            for b in 0..a {
                normal[(b, a)] = normal[(a, b)];
            }
        }
        normal /= mf;
        for a in 0..ncols {
            normal[(a, a)] += self.spec.ridge;
        }
        let chol = normal
            .cholesky()
            .ok_or(Error::DegenerateRegression { step: i })?;
        let diag: Vec<f64> = (0..ncols).map(|a| chol.l_dirty()[(a, a)].powi(2)).collect();
        let dmax = diag.iter().copied().fold(0.0, f64::max);
        let dmin = diag.iter().copied().fold(f64::INFINITY, f64::min);
        if self.spec.ridge == 0.0 && !(dmin > 1e-13 * dmax) {
            return Err(Error::DegenerateRegression { step: i });
        }
        proj.chol = Some(chol);
        Ok(proj)
    }

    /// Least-squares projection of `values` (one per path) onto the step-`i` basis.
    fn fit(&self, i: usize, values: &[f64]) -> Result<Vec<f64>> {
        let proj = self.projector(i)?;
        debug_assert_eq!(proj.step, i);
        let count = self.paths.count();
        let mean = pivot_mean(values);
        let ncols = proj.ncols();
        let Some(chol) = proj.chol.as_ref() else {
            return Ok(vec![mean; count]);
        };

        let d = self.spec.state.state_dim(self.paths.dim());
        let t = self.paths.grid().time(i);
        let q = self.spec.degree;
        let mut rhs = DVector::<f64>::zeros(ncols);
        let mut state = Vec::with_capacity(d);
        let mut f = vec![0.0; ncols];
        for (m, &v) in values.iter().enumerate() {
            self.spec.state.write(t, self.paths.position(m, i), &mut state);
            proj.features(&state, q, &mut f);
            let r = v - mean;
            for c in 0..ncols {
                rhs[c] += f[c] * r;
            }
        }
        rhs /= count as f64;
        let beta = chol.solve(&rhs);

        let mut out = Vec::with_capacity(count);
        for m in 0..count {
            self.spec.state.write(t, self.paths.position(m, i), &mut state);
            proj.features(&state, q, &mut f);
            let mut fitted = mean;
            for c in 0..ncols {
                fitted += f[c] * beta[c];
            }
            out.push(fitted);
        }
        Ok(out)
    }
}

/// The Brownian representation a solver runs on.
#[derive(Debug, Clone)]
pub enum Backend {
    Lattice(Lattice),
    Ensemble(Ensemble),
}

/// Output of one projection step: `E[Y_{i+1} | F_i]` and `E[Y_{i+1} dW^k_i | F_i]` per component.
#[derive(Debug, Clone)]
pub struct StepProjection {
    pub mean: StepValues,
    pub weighted: Vec<StepValues>,
}

impl Backend {
    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::Lattice(_) => BackendKind::Lattice,
            Backend::Ensemble(_) => BackendKind::Ensemble,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        match self {
            Backend::Lattice(l) => l.grid(),
            Backend::Ensemble(e) => e.paths.grid(),
        }
    }

    pub fn steps(&self) -> usize {
        self.grid().steps()
    }

    /// Brownian dimension.
    pub fn dim(&self) -> usize {
        match self {
            Backend::Lattice(_) => 1,
            Backend::Ensemble(e) => e.paths.dim(),
        }
    }

    /// Number of nodes (lattice) or paths (ensemble) at step `i`.
    pub fn len_at(&self, i: usize) -> usize {
        match self {
            Backend::Lattice(l) => l.node_count(i),
            Backend::Ensemble(e) => e.paths.count(),
        }
    }

    pub fn regression(&self) -> Option<&RegressionSpec> {
        match self {
            Backend::Lattice(_) => None,
            Backend::Ensemble(e) => Some(&e.spec),
        }
    }

    pub fn as_lattice(&self) -> Option<&Lattice> {
        match self {
            Backend::Lattice(l) => Some(l),
            Backend::Ensemble(_) => None,
        }
    }

    pub fn as_ensemble(&self) -> Option<&Ensemble> {
        match self {
            Backend::Lattice(_) => None,
            Backend::Ensemble(e) => Some(e),
        }
    }

    /// Evaluate a function of the Brownian position at every node/path of step `i`.
    pub fn map_positions(&self, i: usize, f: impl Fn(&[f64]) -> f64) -> StepValues {
        let values = match self {
            Backend::Lattice(l) => (0..=i).map(|j| f(&[l.position(i, j)])).collect(),
            Backend::Ensemble(e) => (0..e.paths.count())
                .map(|m| f(e.paths.position(m, i)))
                .collect(),
        };
        StepValues::new(self.kind(), i, values)
    }

    pub fn constant(&self, i: usize, c: f64) -> StepValues {
        StepValues::new(self.kind(), i, vec![c; self.len_at(i)])
    }

    /// Probability weights of the nodes/paths at step `i`.
    pub fn weights(&self, i: usize) -> Vec<f64> {
        match self {
            Backend::Lattice(l) => l.probabilities(i),
            Backend::Ensemble(e) => vec![1.0 / e.paths.count() as f64; e.paths.count()],
        }
    }

    /// `E[values]` under the lattice measure, or the sample mean.
    pub fn expectation(&self, values: &StepValues) -> f64 {
        self.weights(values.step())
            .iter()
            .zip(values.values())
            .map(|(w, v)| w * v)
            .sum()
    }

    /// `sqrt(E[values^2])`.
    pub fn l2_norm(&self, values: &StepValues) -> f64 {
        self.expectation(&values.map(|v| v * v)).sqrt()
    }

    /// Standard error of the sample mean; zero on the lattice.
    pub fn standard_error(&self, values: &StepValues) -> f64 {
        match self {
            Backend::Lattice(_) => 0.0,
            Backend::Ensemble(e) => {
                let n = e.paths.count();
                if n < 2 {
                    return 0.0;
                }
                let mean = pivot_mean(values.values());
                let var = values
                    .values()
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / (n - 1) as f64;
                (var / n as f64).sqrt()
            }
        }
    }

    fn check_input(&self, values: &StepValues, i: usize) -> Result<()> {
        if values.kind() != self.kind() {
            return Err(Error::Backend(format!(
                "{} values passed to {} backend",
                values.kind(),
                self.kind()
            )));
        }
        if i >= self.steps() || values.step() != i + 1 || values.len() != self.len_at(i + 1) {
            return Err(Error::Backend(format!(
                "expected values at step {} (len {}), got step {} (len {})",
                i + 1,
                self.len_at(i + 1),
                values.step(),
                values.len()
            )));
        }
        if !values.all_finite() {
            return Err(Error::Overflow { step: i + 1 });
        }
        Ok(())
    }

    /// `E[values | F_i]` for values measurable at step `i + 1`.
    pub fn cond_exp(&self, values: &StepValues, i: usize) -> Result<StepValues> {
        self.check_input(values, i)?;
        let out = match self {
            Backend::Lattice(_) => lattice_mean(values.values()),
            Backend::Ensemble(e) => e.fit(i, values.values())?,
        };
        Ok(StepValues::new(self.kind(), i, out))
    }

    /// `E[values * dW^component_i | F_i]`.
    pub fn cond_exp_weighted(
        &self,
        values: &StepValues,
        component: usize,
        i: usize,
    ) -> Result<StepValues> {
        if component >= self.dim() {
            return Err(Error::param(format!(
                "component {component} out of range for dimension {}",
                self.dim()
            )));
        }
        let p = self.project(values, i)?;
        Ok(p.weighted.into_iter().nth(component).expect("component in range"))
    }

    /// Both projections for one backward step, sharing the mean regression.
    pub fn project(&self, values: &StepValues, i: usize) -> Result<StepProjection> {
        self.check_input(values, i)?;
        match self {
            Backend::Lattice(l) => {
                let v = values.values();
                let h = l.sqrt_dt();
                let weighted = (0..=i)
                    .map(|j| 0.5 * v[j + 1] * h + 0.5 * v[j] * (-h))
                    .collect();
                Ok(StepProjection {
                    mean: StepValues::new(BackendKind::Lattice, i, lattice_mean(v)),
                    weighted: vec![StepValues::new(BackendKind::Lattice, i, weighted)],
                })
            }
            Backend::Ensemble(e) => {
                let v = values.values();
                let mean = e.fit(i, v)?;
                let mut weighted = Vec::with_capacity(e.paths.dim());
                for k in 0..e.paths.dim() {
                    // Centering by the fitted mean leaves the estimator unchanged in
                    // expectation and makes it exactly invariant under constant shifts.
                    let w: Vec<f64> = (0..v.len())
                        .map(|m| (v[m] - mean[m]) * e.paths.increment(m, i, k))
                        .collect();
                    weighted.push(StepValues::new(BackendKind::Ensemble, i, e.fit(i, &w)?));
                }
                Ok(StepProjection {
                    mean: StepValues::new(BackendKind::Ensemble, i, mean),
                    weighted,
                })
            }
        }
    }
}

fn lattice_mean(v: &[f64]) -> Vec<f64> {
    (0..v.len() - 1).map(|j| 0.5 * v[j + 1] + 0.5 * v[j]).collect()
}
