//! Claims at step `t` whose coefficients are fixed at an earlier step `s`.
//!
//! `V = sum_k a_k * Y_k + b` with `a_k`, `b` measurable at `s` and `Y_k` at `t`.
//! On a path ensemble every path carries its own coefficients, so `V` is a plain
//! per-path vector. On the recombining lattice `V` is not a node function at `t`
//! (it remembers the ancestor at `s`); it is evaluated root by root, using that
//! the value at node `(s, j)` only reads the subtree below `j`.

use std::collections::HashMap;

use crate::condexp::{Backend, BackendKind, StepValues};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LocalClaim {
    root_step: usize,
    terms: Vec<(StepValues, StepValues)>,
    shift: StepValues,
    target: Option<usize>,
}

impl LocalClaim {
    /// `shift` must be measurable at the root step.
    pub fn new(shift: StepValues) -> Self {
        Self {
            root_step: shift.step(),
            terms: Vec::new(),
            shift,
            target: None,
        }
    }

    /// Reads the claim at step `t` even without terms (the shift held from the root to `t`).
    pub fn at_step(mut self, t: usize) -> Result<Self> {
        if t < self.root_step || self.terms.first().is_some_and(|(_, y)| y.step() != t) {
            return Err(Error::Backend(format!("cannot read the claim at step {t}")));
        }
        self.target = Some(t);
        Ok(self)
    }

    /// Adds `coeff * claim`, `coeff` at the root step, `claim` at the claim step.
    pub fn with_term(mut self, coeff: StepValues, claim: StepValues) -> Result<Self> {
        coeff.ensure_compatible(&self.shift)?;
        if let Some((_, first)) = self.terms.first() {
            first.ensure_compatible(&claim)?;
        }
        if self.target.is_some_and(|t| t != claim.step()) {
            return Err(Error::Backend("claim step differs from the declared step".into()));
        }
        if claim.step() < self.root_step || claim.kind() != self.shift.kind() {
            return Err(Error::Backend(format!(
                "claim at step {} cannot have coefficients fixed at step {}",
                claim.step(),
                self.root_step
            )));
        }
        self.terms.push((coeff, claim));
        Ok(self)
    }

    pub fn root_step(&self) -> usize {
        self.root_step
    }

    /// Step at which the claim is measurable; the root step when there are no terms.
    pub fn claim_step(&self) -> usize {
        self.terms
            .first()
            .map(|(_, y)| y.step())
            .or(self.target)
            .unwrap_or(self.root_step)
    }

    fn claim_len(&self, backend: &Backend) -> usize {
        backend.len_at(self.claim_step())
    }

    /// Claim values at the claim step, with coefficients read at root index `r`.
    pub fn values_for_root(&self, backend: &Backend, r: usize) -> StepValues {
        let n = self.claim_len(backend);
        let mut v = vec![self.shift.get(r); n];
        for (a, y) in &self.terms {
            let c = a.get(r);
            for (out, &yk) in v.iter_mut().zip(y.values()) {
                *out += c * yk;
            }
        }
        StepValues::new(backend.kind(), self.claim_step(), v)
    }

    /// Per-path claim values on an ensemble.
    fn ensemble_values(&self, backend: &Backend) -> StepValues {
        let n = self.claim_len(backend);
        let v = (0..n)
            .map(|m| {
                let mut acc = self.shift.get(m);
                for (a, y) in &self.terms {
                    acc += a.get(m) * y.get(m);
                }
                acc
            })
            .collect();
        StepValues::new(BackendKind::Ensemble, self.claim_step(), v)
    }

    /// Evaluate with `eval`, which maps a claim measurable at the claim step to
    /// values at the root step.
    pub fn evaluate_with<F>(&self, backend: &Backend, mut eval: F) -> Result<StepValues>
    where
        F: FnMut(&StepValues) -> Result<StepValues>,
    {
        if self.shift.kind() != backend.kind() || self.shift.len() != backend.len_at(self.root_step) {
            return Err(Error::Backend("local claim does not match backend".into()));
        }
        match backend.kind() {
            BackendKind::Ensemble => {
                let out = eval(&self.ensemble_values(backend))?;
                check_root(&out, self.root_step)?;
                Ok(out)
            }
            BackendKind::Lattice => {
                let roots = backend.len_at(self.root_step);
                // Roots sharing a coefficient tuple share one solve.
                let mut groups: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
                let mut order = Vec::new();
                for r in 0..roots {
                    let mut key = vec![self.shift.get(r).to_bits()];
                    key.extend(self.terms.iter().map(|(a, _)| a.get(r).to_bits()));
                    let entry = groups.entry(key.clone()).or_default();
                    if entry.is_empty() {
                        order.push(key);
                    }
                    entry.push(r);
                }
                let mut out = vec![0.0; roots];
                for key in order {
                    let members = &groups[&key];
                    let v = self.values_for_root(backend, members[0]);
                    let res = eval(&v)?;
                    check_root(&res, self.root_step)?;
                    for &r in members {
                        out[r] = res.get(r);
                    }
                }
                Ok(StepValues::new(BackendKind::Lattice, self.root_step, out))
            }
        }
    }
}

fn check_root(values: &StepValues, root_step: usize) -> Result<()> {
    if values.step() != root_step {
        return Err(Error::Backend(format!(
            "evaluator returned step {} for root step {root_step}",
            values.step()
        )));
    }
    Ok(())
}

/// Indicator of a set at step `s`, one entry per node/path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEvent {
    indicator: StepValues,
}

impl PathEvent {
    pub fn new(indicator: StepValues) -> Result<Self> {
        if indicator.values().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::param("event indicator must take values in {0, 1}"));
        }
        Ok(Self { indicator })
    }

    /// Event `{ pred(W_s) }`.
    pub fn from_positions(backend: &Backend, s: usize, pred: impl Fn(&[f64]) -> bool) -> Self {
        Self {
            indicator: backend.map_positions(s, |w| if pred(w) { 1.0 } else { 0.0 }),
        }
    }

    pub fn step(&self) -> usize {
        self.indicator.step()
    }

    pub fn indicator(&self) -> &StepValues {
        &self.indicator
    }

    pub fn complement(&self) -> Self {
        Self {
            indicator: self.indicator.map(|v| 1.0 - v),
        }
    }

    /// Lattice probability (or path frequency) of the event.
    pub fn probability(&self, backend: &Backend) -> f64 {
        backend.expectation(&self.indicator)
    }
}
