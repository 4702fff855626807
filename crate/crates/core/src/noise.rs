//! Noise vectors: component laws, weights, and grid constructors.
//!
//! A noise specification lists independent scalar coordinates. Each
//! coordinate carries a smooth law with open support and a weight function
//! `pi_i` with values in [0, 1] whose positivity set is contained in the
//! support. Weighted derivatives, divergences, and every estimator downstream
//! are defined relative to these weights.

use crate::error::{Error, Result};
use crate::localization::phi_taylor;
use crate::rng::Stream;
use crate::taylor::Taylor;
use serde::{Deserialize, Serialize};

/// Scalar component law with smooth positive density on an open interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentLaw {
    Gaussian { mean: f64, variance: f64 },
    Exponential { rate: f64 },
    /// Rescaled Beta(2,2): density 6 (v - lo)(hi - v) / (hi - lo)^3 on
    /// (lo, hi). The concrete member of the truncated-smooth family: analytic
    /// log-density gradient, exact sampling (median of three uniforms).
    SmoothBounded { lo: f64, hi: f64 },
    Cauchy { location: f64, scale: f64 },
}

impl ComponentLaw {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            ComponentLaw::Gaussian { mean, variance } => mean.is_finite() && *variance > 0.0 && variance.is_finite(),
            ComponentLaw::Exponential { rate } => *rate > 0.0 && rate.is_finite(),
            ComponentLaw::SmoothBounded { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            ComponentLaw::Cauchy { location, scale } => location.is_finite() && *scale > 0.0 && scale.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid component law {self:?}")))
        }
    }

    /// Open support interval.
    pub fn support(&self) -> (f64, f64) {
        match self {
            ComponentLaw::Gaussian { .. } | ComponentLaw::Cauchy { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            ComponentLaw::Exponential { .. } => (0.0, f64::INFINITY),
            ComponentLaw::SmoothBounded { lo, hi } => (*lo, *hi),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        let (lo, hi) = self.support();
        v > lo && v < hi
    }

    pub fn sample(&self, stream: &mut Stream) -> f64 {
        match self {
            ComponentLaw::Gaussian { mean, variance } => mean + variance.sqrt() * stream.normal(),
            ComponentLaw::Exponential { rate } => -stream.next_f64_open().ln() / rate,
            ComponentLaw::SmoothBounded { lo, hi } => {
                let (a, b, c) = (stream.next_f64(), stream.next_f64(), stream.next_f64());
                let med = a.max(b).min(a.min(b).max(c));
                lo + (hi - lo) * med
            }
            ComponentLaw::Cauchy { location, scale } => {
                location + scale * (std::f64::consts::PI * (stream.next_f64() - 0.5)).tan()
            }
        }
    }

    /// Normalized density.
    pub fn pdf(&self, v: f64) -> f64 {
        if !self.contains(v) {
            return 0.0;
        }
        match self {
            ComponentLaw::Gaussian { mean, variance } => {
                (-0.5 * (v - mean) * (v - mean) / variance).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
            }
            ComponentLaw::Exponential { rate } => rate * (-rate * v).exp(),
            ComponentLaw::SmoothBounded { lo, hi } => {
                let w = hi - lo;
                6.0 * (v - lo) * (hi - v) / (w * w * w)
            }
            ComponentLaw::Cauchy { location, scale } => {
                let u = (v - location) / scale;
                1.0 / (std::f64::consts::PI * scale * (1.0 + u * u))
            }
        }
    }

    /// Normalized log-density; requires an interior point.
    pub fn log_density(&self, v: f64) -> Result<f64> {
        if !self.contains(v) {
            return Err(Error::Domain(format!("{v} outside support of {self:?}")));
        }
        Ok(match self {
            ComponentLaw::Gaussian { mean, variance } => {
                -0.5 * (2.0 * std::f64::consts::PI * variance).ln() - 0.5 * (v - mean) * (v - mean) / variance
            }
            ComponentLaw::Exponential { rate } => rate.ln() - rate * v,
            ComponentLaw::SmoothBounded { lo, hi } => {
                let w = hi - lo;
                (6.0 / (w * w * w)).ln() + (v - lo).ln() + (hi - v).ln()
            }
            ComponentLaw::Cauchy { location, scale } => {
                let u = (v - location) / scale;
                -(std::f64::consts::PI * scale).ln() - (1.0 + u * u).ln()
            }
        })
    }

    /// Expansion of `v -> ln p(v)` around an interior point, over the given
    /// jet variable. Its first partial agrees with `dlogp_taylor`.
    pub fn log_density_taylor(&self, var: u32, v: f64, order: usize) -> Result<Taylor> {
        let c0 = self.log_density(v)?;
        let x = Taylor::var(var, v, order);
        Ok(match self {
            ComponentLaw::Gaussian { mean, variance } => {
                let u = x.add_scalar(-mean);
                u.mul(&u).scaled(-0.5 / variance).add_scalar(c0 + 0.5 * (v - mean) * (v - mean) / variance)
            }
            ComponentLaw::Exponential { rate } => x.scaled(-rate).add_scalar(c0 + rate * v),
            ComponentLaw::SmoothBounded { lo, hi } => {
                let w = hi - lo;
                let a = x.add_scalar(-lo).ln().expect("interior point");
                let b = x.neg().add_scalar(*hi).ln().expect("interior point");
                a.add(&b).add_scalar((6.0 / (w * w * w)).ln())
            }
            ComponentLaw::Cauchy { location, scale } => {
                let u = x.add_scalar(-location).scaled(1.0 / scale);
                let den = u.mul(&u).add_scalar(1.0).ln().expect("1 + u^2 >= 1");
                den.neg().add_scalar(-(std::f64::consts::PI * scale).ln())
            }
        })
    }

    pub fn cdf(&self, v: f64) -> f64 {
        match self {
            ComponentLaw::Gaussian { mean, variance } => {
                statrs::function::erf::erfc((mean - v) / (2.0 * variance).sqrt()) / 2.0
            }
            ComponentLaw::Exponential { rate } => {
                if v <= 0.0 {
                    0.0
                } else {
                    1.0 - (-rate * v).exp()
                }
            }
            ComponentLaw::SmoothBounded { lo, hi } => {
                let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
                u * u * (3.0 - 2.0 * u)
            }
            ComponentLaw::Cauchy { location, scale } => {
                0.5 + ((v - location) / scale).atan() / std::f64::consts::PI
            }
        }
    }

    /// Expansion of `v -> d ln p / dv` around an interior point, over the
    /// given jet variable.
    pub fn dlogp_taylor(&self, var: u32, v: f64, order: usize) -> Result<Taylor> {
        if !self.contains(v) {
            return Err(Error::Domain(format!("{v} outside support of {self:?}")));
        }
        let x = Taylor::var(var, v, order);
        Ok(match self {
            ComponentLaw::Gaussian { mean, variance } => x.add_scalar(-mean).scaled(-1.0 / variance),
            ComponentLaw::Exponential { rate } => Taylor::constant(-rate, order),
            ComponentLaw::SmoothBounded { lo, hi } => {
                // d ln p = 1/(v - lo) - 1/(hi - v)
                let a = x.add_scalar(-lo).recip().expect("interior point");
                let b = x.neg().add_scalar(*hi).recip().expect("interior point");
                a.sub(&b)
            }
            ComponentLaw::Cauchy { location, scale } => {
                // d ln p = -2 u / (s (1 + u^2)), u = (v - loc)/s
                let u = x.add_scalar(-location).scaled(1.0 / scale);
                let den = u.mul(&u).add_scalar(1.0).recip().expect("1 + u^2 >= 1");
                u.mul(&den).scaled(-2.0 / scale)
            }
        })
    }

    /// Value of `d ln p / dv` at an interior point.
    pub fn log_density_grad(&self, v: f64) -> Result<f64> {
        Ok(self.dlogp_taylor(0, v, 0)?.value())
    }
}

/// Weight function attached to one coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSpec {
    /// Constant weight in (0, 1]. Valid only when the support is the whole
    /// line; otherwise the positivity set would leak outside the support.
    Constant { value: f64 },
    /// Smooth cutoff anchored inside the support: the weight rises from 0 at
    /// distance `width`/2 from each finite support edge to 1 at distance
    /// `width`, via the away-from-zero bump.
    SmoothCutoff { width: f64 },
}

impl WeightSpec {
    fn validate(&self, law: &ComponentLaw) -> Result<()> {
        match self {
            WeightSpec::Constant { value } => {
                if !(*value > 0.0 && *value <= 1.0) {
                    return Err(Error::Config(format!("constant weight {value} outside (0, 1]")));
                }
                let (lo, hi) = law.support();
                if lo.is_finite() || hi.is_finite() {
                    return Err(Error::Config(
                        "constant weight requires full-line support; use a smooth cutoff near finite edges".into(),
                    ));
                }
                Ok(())
            }
            WeightSpec::SmoothCutoff { width } => {
                if !(*width > 0.0) || !width.is_finite() {
                    return Err(Error::Config(format!("cutoff width must be positive, got {width}")));
                }
                let (lo, hi) = law.support();
                if hi.is_finite() && lo.is_finite() && hi - lo <= *width {
                    return Err(Error::Config(format!(
                        "cutoff width {width} leaves no plateau inside support ({lo}, {hi})"
                    )));
                }
                Ok(())
            }
        }
    }

    /// True when the weight does not depend on the coordinate.
    pub fn is_constant(&self, law: &ComponentLaw) -> bool {
        match self {
            WeightSpec::Constant { .. } => true,
            WeightSpec::SmoothCutoff { .. } => {
                let (lo, hi) = law.support();
                !lo.is_finite() && !hi.is_finite()
            }
        }
    }

    /// Weight expansion over the given jet variable.
    pub fn weight_taylor(&self, law: &ComponentLaw, var: u32, v: f64, order: usize) -> Taylor {
        match self {
            WeightSpec::Constant { value } => Taylor::constant(*value, order),
            WeightSpec::SmoothCutoff { width } => {
                let (lo, hi) = law.support();
                let x = Taylor::var(var, v, order);
                let mut w = Taylor::constant(1.0, order);
                if lo.is_finite() {
                    w = w.mul(&phi_taylor(*width, &x.add_scalar(-lo)));
                }
                if hi.is_finite() {
                    w = w.mul(&phi_taylor(*width, &x.neg().add_scalar(hi)));
                }
                w
            }
        }
    }
}

/// One noise coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub law: ComponentLaw,
    pub weight: WeightSpec,
}

/// An independent noise vector: the product of its component laws.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    components: Vec<Component>,
}

/// Hard cap on coordinates; grids beyond this are a resource error.
pub const MAX_COORDS: usize = 1 << 16;

impl NoiseSpec {
    pub fn new(components: Vec<Component>) -> Result<NoiseSpec> {
        if components.is_empty() {
            return Err(Error::Config("noise spec needs at least one component".into()));
        }
        if components.len() > MAX_COORDS {
            return Err(Error::Resource(format!(
                "{} coordinates exceed the cap {MAX_COORDS}",
                components.len()
            )));
        }
        for c in &components {
            c.law.validate()?;
            c.weight.validate(&c.law)?;
        }
        Ok(NoiseSpec { components })
    }

    /// Independent standard Gaussian coordinates with unit weights.
    pub fn iid_gaussian(j: usize) -> NoiseSpec {
        NoiseSpec::new(vec![
            Component {
                law: ComponentLaw::Gaussian { mean: 0.0, variance: 1.0 },
                weight: WeightSpec::Constant { value: 1.0 },
            };
            j
        ])
        .expect("valid by construction")
    }

    /// Dyadic grid of Brownian increments: `drivers` independent paths on
    /// [0, 1], each split into 2^level increments of variance 2^-level, with
    /// constant weights 2^(-level/2). Coordinate `i * 2^level + k` is the
    /// k-th increment of driver `i`.
    pub fn brownian_grid(drivers: usize, level: u32) -> Result<NoiseSpec> {
        if drivers == 0 {
            return Err(Error::Config("need at least one driver".into()));
        }
        if level > 16 {
            return Err(Error::Resource(format!("grid level {level} exceeds 16")));
        }
        let steps = 1usize << level;
        let j = drivers
            .checked_mul(steps)
            .filter(|j| *j <= MAX_COORDS)
            .ok_or_else(|| Error::Resource(format!("grid size {drivers} * 2^{level} exceeds the cap {MAX_COORDS}")))?;
        let h = 0.5f64.powi(level as i32);
        let w = h.sqrt();
        NoiseSpec::new(vec![
            Component {
                law: ComponentLaw::Gaussian { mean: 0.0, variance: h },
                weight: WeightSpec::Constant { value: w },
            };
            j
        ])
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &Component {
        &self.components[i]
    }

    /// Draws one noise vector, coordinate by coordinate.
    pub fn sample(&self, stream: &mut Stream) -> Vec<f64> {
        self.components.iter().map(|c| c.law.sample(stream)).collect()
    }

    /// Value of `d ln p_J / dv_i`; the product law makes this the marginal
    /// log-density gradient. Errors outside the open support.
    pub fn log_density_grad(&self, i: usize, v_i: f64) -> Result<f64> {
        self.check_index(i)?;
        self.components[i].law.log_density_grad(v_i)
    }

    /// Weight value and derivatives `[pi, pi', ..., pi^(order)]` at a point.
    pub fn weight_jet(&self, i: usize, v_i: f64, order: usize) -> Result<Vec<f64>> {
        self.check_index(i)?;
        let c = &self.components[i];
        let t = c.weight.weight_taylor(&c.law, i as u32, v_i, order);
        Ok((0..=order).map(|k| t.partial_deriv(&vec![i as u32; k])).collect())
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.components.len() {
            return Err(Error::Config(format!("coordinate {i} out of range (dim {})", self.dim())));
        }
        Ok(())
    }
}

impl Serialize for NoiseSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("NoiseSpec", 2)?;
        let laws: Vec<&ComponentLaw> = self.components.iter().map(|c| &c.law).collect();
        let weights: Vec<&WeightSpec> = self.components.iter().map(|c| &c.weight).collect();
        st.serialize_field("components", &laws)?;
        st.serialize_field("weights", &weights)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for NoiseSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            components: Vec<ComponentLaw>,
            weights: Vec<WeightSpec>,
        }
        let raw = Raw::deserialize(d)?;
        if raw.components.len() != raw.weights.len() {
            return Err(serde::de::Error::custom(format!(
                "components ({}) and weights ({}) must have equal length",
                raw.components.len(),
                raw.weights.len()
            )));
        }
        let comps = raw
            .components
            .into_iter()
            .zip(raw.weights)
            .map(|(law, weight)| Component { law, weight })
            .collect();
        NoiseSpec::new(comps).map_err(serde::de::Error::custom)
    }
}
