use std::fmt;
use std::str::FromStr;

use crate::error::AdrfError;
use crate::scalar::Real;

/// Concave generating function of the dual weight problem.
///
/// Each family maps the linear index `v = eta^T nu(x)` to a weight
/// `rho'(v)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RhoFamily {
    /// `rho(v) = -exp(-v - 1)`; weights are always positive.
    #[default]
    ExponentialTilting,
    /// `rho(v) = log(v) + 1` on `v > 0`.
    EmpiricalLikelihood,
    /// `rho(v) = -(1 - v)^2 / 2`.
    ContinuousUpdating,
}

impl RhoFamily {
    pub const ALL: [RhoFamily; 3] = [
        RhoFamily::ExponentialTilting,
        RhoFamily::EmpiricalLikelihood,
        RhoFamily::ContinuousUpdating,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            RhoFamily::ExponentialTilting => "exponential-tilting",
            RhoFamily::EmpiricalLikelihood => "empirical-likelihood",
            RhoFamily::ContinuousUpdating => "continuous-updating",
        }
    }

    #[inline]
    pub fn in_domain<T: Real>(self, v: T) -> bool {
        match self {
            RhoFamily::EmpiricalLikelihood => v > T::zero(),
            _ => v.is_finite(),
        }
    }

    #[inline]
    pub fn rho<T: Real>(self, v: T) -> T {
        match self {
            RhoFamily::ExponentialTilting => -(-v - T::one()).exp(),
            RhoFamily::EmpiricalLikelihood => v.ln() + T::one(),
            RhoFamily::ContinuousUpdating => {
                let d = T::one() - v;
                -d * d * T::lit(0.5)
            }
        }
    }

    #[inline]
    pub fn d1<T: Real>(self, v: T) -> T {
        match self {
            RhoFamily::ExponentialTilting => (-v - T::one()).exp(),
            RhoFamily::EmpiricalLikelihood => T::one() / v,
            RhoFamily::ContinuousUpdating => T::one() - v,
        }
    }

    #[inline]
    pub fn d2<T: Real>(self, v: T) -> T {
        match self {
            RhoFamily::ExponentialTilting => -(-v - T::one()).exp(),
            RhoFamily::EmpiricalLikelihood => -T::one() / (v * v),
            RhoFamily::ContinuousUpdating => -T::one(),
        }
    }

    /// `(rho(v), rho'(v), rho''(v))` sharing one transcendental evaluation.
    #[inline]
    pub fn eval<T: Real>(self, v: T) -> (T, T, T) {
        match self {
            RhoFamily::ExponentialTilting => {
                let e = (-v - T::one()).exp();
                (-e, e, -e)
            }
            RhoFamily::EmpiricalLikelihood => {
                let inv = T::one() / v;
                (v.ln() + T::one(), inv, -inv * inv)
            }
            RhoFamily::ContinuousUpdating => {
                let d = T::one() - v;
                (-d * d * T::lit(0.5), d, -T::one())
            }
        }
    }

    /// The index `v` at which `rho'(v) = 1`, i.e. the uniform weight.
    pub fn baseline<T: Real>(self) -> T {
        match self {
            RhoFamily::ExponentialTilting => -T::one(),
            RhoFamily::EmpiricalLikelihood => T::one(),
            RhoFamily::ContinuousUpdating => T::zero(),
        }
    }
}

impl fmt::Display for RhoFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for RhoFamily {
    type Err = AdrfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exponential-tilting" | "et" => Ok(RhoFamily::ExponentialTilting),
            "empirical-likelihood" | "el" => Ok(RhoFamily::EmpiricalLikelihood),
            "continuous-updating" | "cu" => Ok(RhoFamily::ContinuousUpdating),
            other => Err(AdrfError::Parameter(format!("unknown rho family `{other}`"))),
        }
    }
}
