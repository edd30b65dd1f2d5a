//! BSDE drivers `g(t, y, z)` with declared Lipschitz metadata.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Norm applied to `z` by the `mu |z|` family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZNorm {
    #[default]
    Euclidean,
    L1,
}

impl ZNorm {
    pub fn apply(&self, z: &[f64]) -> f64 {
        match self {
            ZNorm::Euclidean => z.iter().map(|v| v * v).sum::<f64>().sqrt(),
            ZNorm::L1 => z.iter().map(|v| v.abs()).sum(),
        }
    }

    /// Norm dual to this one, used for the Lipschitz constant of `<b, z>`.
    pub fn dual(&self, b: &[f64]) -> f64 {
        match self {
            ZNorm::Euclidean => ZNorm::Euclidean.apply(b),
            ZNorm::L1 => b.iter().map(|v| v.abs()).fold(0.0, f64::max),
        }
    }
}

type DriverFn = dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync;

#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorKind {
    Zero,
    Linear(Vec<f64>),
    Emu(f64),
    NegEmu(f64),
    Discount(f64),
    Custom(String),
}

/// Declared structural metadata of a driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorMeta {
    pub lip_y: f64,
    pub lip_z: f64,
    pub y_independent: bool,
    /// `g(t, y, 0) = 0` for every `y`.
    pub zero_at_zero: bool,
    /// `mu` with `|g(t, y, z)| <= mu |z|`, when declared.
    pub dominating_mu: Option<f64>,
}

#[derive(Clone)]
pub struct Generator {
    kind: GeneratorKind,
    meta: GeneratorMeta,
    norm: ZNorm,
    f: Arc<DriverFn>,
}

impl fmt::Debug for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Generator")
            .field("kind", &self.kind)
            .field("meta", &self.meta)
            .field("norm", &self.norm)
            .finish()
    }
}

/// Box of probe points for spot checks and validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeBox {
    pub horizon: f64,
    pub y_bound: f64,
    pub z_bound: f64,
    pub dim: usize,
}

impl ProbeBox {
    pub fn unit(dim: usize) -> Self {
        Self {
            horizon: 1.0,
            y_bound: 1.0,
            z_bound: 1.0,
            dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbePair {
    pub t: f64,
    pub y: (f64, f64),
    pub z: (Vec<f64>, Vec<f64>),
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorReport {
    pub worst_y_ratio: f64,
    pub worst_z_ratio: f64,
    pub pass: bool,
    /// First probe pair whose ratio exceeded the declared constant.
    pub violation: Option<ProbePair>,
}

const SPOT_CHECK_PROBES: usize = 1000;
const LIPSCHITZ_REL_SLACK: f64 = 1e-10;

impl Generator {
    pub fn zero() -> Self {
        Self::builtin(
            GeneratorKind::Zero,
            GeneratorMeta {
                lip_y: 0.0,
                lip_z: 0.0,
                y_independent: true,
                zero_at_zero: true,
                dominating_mu: Some(0.0),
            },
            ZNorm::Euclidean,
            Arc::new(|_, _, _| 0.0),
        )
    }

    /// `g(t, z) = <b, z>`.
    pub fn linear(b: Vec<f64>) -> Self {
        Self::linear_with_norm(b, ZNorm::Euclidean)
    }

    pub fn linear_with_norm(b: Vec<f64>, norm: ZNorm) -> Self {
        let lip = norm.dual(&b);
        let coeffs = b.clone();
        Self::builtin(
            GeneratorKind::Linear(b),
            GeneratorMeta {
                lip_y: 0.0,
                lip_z: lip,
                y_independent: true,
                zero_at_zero: true,
                dominating_mu: Some(lip),
            },
            norm,
            Arc::new(move |_, _, z| coeffs.iter().zip(z).map(|(b, z)| b * z).sum()),
        )
    }

    /// `g(t, z) = mu |z|`.
    pub fn emu(mu: f64) -> Self {
        Self::emu_with_norm(mu, ZNorm::Euclidean)
    }

    pub fn emu_with_norm(mu: f64, norm: ZNorm) -> Self {
        Self::builtin(
            GeneratorKind::Emu(mu),
            GeneratorMeta {
                lip_y: 0.0,
                lip_z: mu.abs(),
                y_independent: true,
                zero_at_zero: true,
                dominating_mu: Some(mu.abs()),
            },
            norm,
            Arc::new(move |_, _, z| mu * norm.apply(z)),
        )
    }

    /// `g(t, z) = -mu |z|`.
    pub fn neg_emu(mu: f64) -> Self {
        Self::neg_emu_with_norm(mu, ZNorm::Euclidean)
    }

    pub fn neg_emu_with_norm(mu: f64, norm: ZNorm) -> Self {
        Self::builtin(
            GeneratorKind::NegEmu(mu),
            GeneratorMeta {
                lip_y: 0.0,
                lip_z: mu.abs(),
                y_independent: true,
                zero_at_zero: true,
                dominating_mu: Some(mu.abs()),
            },
            norm,
            Arc::new(move |_, _, z| -mu * norm.apply(z)),
        )
    }

    /// `g(t, y, z) = -r y`.
    pub fn discount(r: f64) -> Self {
        Self::builtin(
            GeneratorKind::Discount(r),
            GeneratorMeta {
                lip_y: r.abs(),
                lip_z: 0.0,
                y_independent: r == 0.0,
                zero_at_zero: r == 0.0,
                dominating_mu: None,
            },
            ZNorm::Euclidean,
            Arc::new(move |_, y, _| -r * y),
        )
    }

    fn builtin(kind: GeneratorKind, meta: GeneratorMeta, norm: ZNorm, f: Arc<DriverFn>) -> Self {
        Self { kind, meta, norm, f }
    }

    /// User-supplied driver. Metadata is spot-checked on the unit box of
    /// dimension `dim`: finiteness, the zero-at-zero flag and both Lipschitz constants.
    pub fn custom<F>(label: &str, meta: GeneratorMeta, dim: usize, f: F) -> Result<Self>
    where
        F: Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        let g = Self::custom_unverified(label, meta, dim, f)?;
        let report = g.validate(SPOT_CHECK_PROBES, ProbeBox::unit(dim), 0)?;
        if !report.pass {
            return Err(Error::GeneratorViolation(format!(
                "{label}: declared lip_y={} lip_z={} but observed y-ratio {} z-ratio {}",
                meta.lip_y, meta.lip_z, report.worst_y_ratio, report.worst_z_ratio
            )));
        }
        Ok(g)
    }

    /// User-supplied driver whose Lipschitz constants are taken on trust.
    /// Finiteness and the zero-at-zero flag are still spot-checked.
    pub fn custom_unverified<F>(label: &str, meta: GeneratorMeta, dim: usize, f: F) -> Result<Self>
    where
        F: Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        if !(meta.lip_y >= 0.0 && meta.lip_z >= 0.0) {
            return Err(Error::param("Lipschitz constants must be nonnegative"));
        }
        if dim == 0 {
            return Err(Error::param("generator dimension must be at least 1"));
        }
        let g = Self {
            kind: GeneratorKind::Custom(label.to_string()),
            meta,
            norm: ZNorm::Euclidean,
            f: Arc::new(f),
        };
        g.spot_check_structure(dim)?;
        Ok(g)
    }

    fn spot_check_structure(&self, dim: usize) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let zero = vec![0.0; dim];
        for _ in 0..SPOT_CHECK_PROBES {
            let t = rng.random_range(0.0..=1.0);
            let y = rng.random_range(-1.0..=1.0);
            let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let v = self.eval(t, y, &z);
            if !v.is_finite() {
                return Err(Error::GeneratorViolation(format!(
                    "non-finite value at t={t}, y={y}, z={z:?}"
                )));
            }
            if self.meta.zero_at_zero && self.eval(t, y, &zero) != 0.0 {
                return Err(Error::GeneratorViolation(format!(
                    "declared g(t, y, 0) = 0 but g({t}, {y}, 0) = {}",
                    self.eval(t, y, &zero)
                )));
            }
            if self.meta.y_independent {
                let y2 = rng.random_range(-1.0..=1.0);
                if self.eval(t, y2, &z) != v {
                    return Err(Error::GeneratorViolation(format!(
                        "declared y-independent but g varies in y at t={t}, z={z:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, t: f64, y: f64, z: &[f64]) -> f64 {
        (self.f)(t, y, z)
    }

    pub fn kind(&self) -> &GeneratorKind {
        &self.kind
    }

    pub fn meta(&self) -> &GeneratorMeta {
        &self.meta
    }

    pub fn norm(&self) -> ZNorm {
        self.norm
    }

    /// `y`-independent with `g(t, 0) = 0`: the class reached by the operator representation.
    pub fn is_z_only(&self) -> bool {
        self.meta.y_independent && self.meta.zero_at_zero
    }

    pub fn label(&self) -> String {
        match &self.kind {
            GeneratorKind::Zero => "zero".into(),
            GeneratorKind::Linear(b) => format!("linear({b:?})"),
            GeneratorKind::Emu(mu) => format!("emu({mu})"),
            GeneratorKind::NegEmu(mu) => format!("neg_emu({mu})"),
            GeneratorKind::Discount(r) => format!("discount({r})"),
            GeneratorKind::Custom(s) => s.clone(),
        }
    }

    /// Largest observed Lipschitz ratios over random probe pairs in `probe_box`.
    ///
    /// Fails when a ratio exceeds the declared constant by more than `1e-10` relative.
    pub fn validate(&self, probe_count: usize, probe_box: ProbeBox, seed: u64) -> Result<GeneratorReport> {
        if probe_count == 0 {
            return Err(Error::param("probe_count must be at least 1"));
        }
        let ProbeBox {
            horizon,
            y_bound,
            z_bound,
            dim,
        } = probe_box;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample_z = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.random_range(-z_bound..=z_bound)).collect()
        };
        let mut worst_y: f64 = 0.0;
        let mut worst_z: f64 = 0.0;
        let mut violation = None;

        for _ in 0..probe_count {
            let t = rng.random_range(0.0..=horizon);
            let y1 = rng.random_range(-y_bound..=y_bound);
            let y2 = rng.random_range(-y_bound..=y_bound);
            let z1 = sample_z(&mut rng);
            let z2 = sample_z(&mut rng);

            let dy = (y1 - y2).abs();
            if dy > 0.0 {
                let ratio = (self.eval(t, y1, &z1) - self.eval(t, y2, &z1)).abs() / dy;
                worst_y = worst_y.max(ratio);
                if ratio > self.meta.lip_y * (1.0 + LIPSCHITZ_REL_SLACK) && violation.is_none() {
                    violation = Some(ProbePair {
                        t,
                        y: (y1, y2),
                        z: (z1.clone(), z1.clone()),
                        ratio,
                    });
                }
            }
            let dz = self.norm.apply(
                &z1.iter().zip(&z2).map(|(a, b)| a - b).collect::<Vec<_>>(),
            );
            if dz > 0.0 {
                let ratio = (self.eval(t, y1, &z1) - self.eval(t, y1, &z2)).abs() / dz;
                worst_z = worst_z.max(ratio);
                if ratio > self.meta.lip_z * (1.0 + LIPSCHITZ_REL_SLACK) && violation.is_none() {
                    violation = Some(ProbePair {
                        t,
                        y: (y1, y1),
                        z: (z1, z2),
                        ratio,
                    });
                }
            }
        }

        Ok(GeneratorReport {
            worst_y_ratio: worst_y,
            worst_z_ratio: worst_z,
            pass: violation.is_none(),
            violation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box5(dim: usize) -> ProbeBox {
        ProbeBox {
            horizon: 1.0,
            y_bound: 5.0,
            z_bound: 5.0,
            dim,
        }
    }

    #[test]
    fn emu_ratio_bounded_by_mu() {
        let r = Generator::emu(2.0).validate(5000, box5(3), 1).unwrap();
        assert!(r.pass);
        assert!(r.worst_z_ratio <= 2.0 * (1.0 + 1e-12));
        assert!(r.worst_z_ratio > 1.5);
    }

    #[test]
    fn zero_has_zero_ratios() {
        let r = Generator::zero().validate(1000, box5(2), 3).unwrap();
        assert!(r.pass);
        assert_eq!(r.worst_y_ratio, 0.0);
        assert_eq!(r.worst_z_ratio, 0.0);
    }

    #[test]
    fn square_driver_with_unit_constant_is_flagged() {
        let meta = GeneratorMeta {
            lip_y: 0.0,
            lip_z: 1.0,
            y_independent: true,
            zero_at_zero: true,
            dominating_mu: None,
        };
        let g = Generator::custom_unverified("z^2", meta, 1, |_, _, z| z[0] * z[0]).unwrap();
        let r = g.validate(20_000, box5(1), 7).unwrap();
        assert!(!r.pass);
        let v = r.violation.unwrap();
        assert!(v.ratio > 1.0);
        // sup over |z| <= 5 of |z1 + z2| is 10
        assert!(r.worst_z_ratio <= 10.0 && r.worst_z_ratio > 9.0);
        // the checked constructor refuses it outright
        assert!(Generator::custom("z^2", meta, 1, |_, _, z| z[0] * z[0]).is_err());
    }

    #[test]
    fn custom_structural_flags_are_spot_checked() {
        let meta = GeneratorMeta {
            lip_y: 0.0,
            lip_z: 1.0,
            y_independent: true,
            zero_at_zero: true,
            dominating_mu: Some(1.0),
        };
        assert!(Generator::custom("shifted", meta, 1, |_, _, z| z[0].abs() + 0.1).is_err());
        assert!(Generator::custom("y-dep", meta, 1, |_, y, z| z[0].abs() + 0.0 * y + y * 1e-3).is_err());
        assert!(Generator::custom("half-abs", meta, 1, |_, _, z| 0.5 * z[0].abs()).is_ok());
    }

    #[test]
    fn emu_dominates_z_only_drivers() {
        let mu = 1.5;
        let emu = Generator::emu(mu);
        let drivers = [
            Generator::linear(vec![1.0, -0.5]),
            Generator::neg_emu(1.2),
            Generator::custom(
                "capped",
                GeneratorMeta {
                    lip_y: 0.0,
                    lip_z: 1.5,
                    y_independent: true,
                    zero_at_zero: true,
                    dominating_mu: Some(1.5),
                },
                2,
                |_, _, z| 1.5 * z[0].clamp(-0.3, 0.8),
            )
            .unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let z = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            for g in &drivers {
                assert!(g.eval(0.3, 0.0, &z).abs() <= emu.eval(0.3, 0.0, &z) + 1e-12);
            }
        }
    }

    #[test]
    fn neg_emu_mirrors_emu() {
        let a = Generator::emu(0.7);
        let b = Generator::neg_emu(0.7);
        for z in [[0.0, 1.0], [-3.0, 2.0], [1e-3, -1e3]] {
            assert_eq!(b.eval(0.0, 0.0, &z), -a.eval(0.0, 0.0, &z));
        }
    }

    #[test]
    fn l1_norm_option() {
        let g = Generator::emu_with_norm(1.0, ZNorm::L1);
        assert_eq!(g.eval(0.0, 0.0, &[3.0, -4.0]), 7.0);
        assert_eq!(Generator::emu(1.0).eval(0.0, 0.0, &[3.0, -4.0]), 5.0);
        let lin = Generator::linear_with_norm(vec![1.0, -2.0], ZNorm::L1);
        assert_eq!(lin.meta().lip_z, 2.0);
        assert!(lin.validate(2000, box5(2), 0).unwrap().pass);
    }

    #[test]
    fn discount_metadata() {
        let g = Generator::discount(0.05);
        assert!(!g.is_z_only());
        assert_eq!(g.eval(0.0, 2.0, &[1.0]), -0.1);
        assert!(g.validate(1000, box5(1), 0).unwrap().pass);
    }
}
