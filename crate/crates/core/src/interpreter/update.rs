//! Parameter updater: additive step with flip-triggered decay, and the
//! multiplicative variant for parameters that must stay positive.

use serde::{Deserialize, Serialize};

use crate::error::UpdateError;

/// Ternary update direction per parameter component.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i64>", into = "Vec<i64>")]
pub struct UpdateMarker(Vec<i8>);

impl UpdateMarker {
    pub fn new(components: Vec<i8>) -> Result<Self, UpdateError> {
        if let Some(bad) = components.iter().find(|c| !(-1..=1).contains(*c)) {
            return Err(UpdateError::InvalidMarker(i64::from(*bad)));
        }
        Ok(Self(components))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0; len])
    }

    /// Unit marker with `sign` at `index`.
    pub fn unit(len: usize, index: usize, sign: i8) -> Self {
        let mut v = vec![0; len];
        v[index] = sign.signum();
        Self(v)
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|c| *c == 0)
    }

    /// Indices of the nonzero components.
    pub fn active(&self) -> impl Iterator<Item = (usize, i8)> + '_ {
        self.0.iter().copied().enumerate().filter(|(_, c)| *c != 0)
    }
}

impl TryFrom<Vec<i64>> for UpdateMarker {
    type Error = UpdateError;

    fn try_from(v: Vec<i64>) -> Result<Self, Self::Error> {
        if let Some(bad) = v.iter().find(|c| !(-1..=1).contains(*c)) {
            return Err(UpdateError::InvalidMarker(*bad));
        }
        Ok(Self(v.into_iter().map(|c| c as i8).collect()))
    }
}

impl From<UpdateMarker> for Vec<i64> {
    fn from(m: UpdateMarker) -> Self {
        m.0.into_iter().map(i64::from).collect()
    }
}

impl std::fmt::Display for UpdateMarker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "]")
    }
}

/// Name, unit and admissible interval of one parameter component.
/// Infinite bounds serialize as `null`, since JSON has no infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub units: String,
    #[serde(with = "lower_bound")]
    pub min: f64,
    #[serde(with = "upper_bound")]
    pub max: f64,
}

macro_rules! open_bound {
    ($module:ident, $inf:expr) => {
        mod $module {
            use serde::{Deserialize, Deserializer, Serializer};

            pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
                if v.is_finite() {
                    s.serialize_some(v)
                } else {
                    s.serialize_none()
                }
            }

            pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
                Ok(Option::<f64>::deserialize(d)?.unwrap_or($inf))
            }
        }
    };
}

open_bound!(lower_bound, f64::NEG_INFINITY);
open_bound!(upper_bound, f64::INFINITY);

impl ParamSpec {
    pub fn new(name: &str, units: &str, min: f64, max: f64) -> Self {
        Self { name: name.to_string(), units: units.to_string(), min, max }
    }

    pub fn unbounded(name: &str) -> Self {
        Self::new(name, "", f64::NEG_INFINITY, f64::INFINITY)
    }
}

/// Controller parameter vector with its schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub values: Vec<f64>,
    pub schema: Vec<ParamSpec>,
}

impl Theta {
    pub fn new(values: Vec<f64>, schema: Vec<ParamSpec>) -> Result<Self, UpdateError> {
        if values.len() != schema.len() {
            return Err(UpdateError::Dimension { theta: values.len(), eta: schema.len(), marker: 0 });
        }
        let mut t = Self { values, schema };
        t.clamp();
        Ok(t)
    }

    pub fn unbounded(values: Vec<f64>) -> Self {
        let schema = (0..values.len()).map(|i| ParamSpec::unbounded(&format!("theta{}", i + 1))).collect();
        Self { values, schema }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn clamp(&mut self) {
        for (v, spec) in self.values.iter_mut().zip(&self.schema) {
            *v = v.clamp(spec.min, spec.max);
        }
    }
}

/// Update sizes, decay rates and the last nonzero marker per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaState {
    pub eta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub s_prev: Vec<i8>,
}

impl EtaState {
    pub fn new(eta0: Vec<f64>, gamma: Vec<f64>) -> Result<Self, UpdateError> {
        if eta0.len() != gamma.len() {
            return Err(UpdateError::InvalidEta("eta0 and gamma lengths differ".into()));
        }
        if eta0.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(UpdateError::InvalidEta("eta0 must be positive".into()));
        }
        if gamma.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return Err(UpdateError::InvalidEta("gamma must lie in (0, 1)".into()));
        }
        let q = eta0.len();
        Ok(Self { eta: eta0, gamma, s_prev: vec![0; q] })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    #[default]
    Additive,
    Multiplicative,
}

fn check_dims(theta: &Theta, eta: &EtaState, s: &UpdateMarker) -> Result<(), UpdateError> {
    let q = theta.len();
    if eta.eta.len() != q || eta.gamma.len() != q || eta.s_prev.len() != q || s.len() != q {
        return Err(UpdateError::Dimension { theta: q, eta: eta.eta.len(), marker: s.len() });
    }
    Ok(())
}

/// `theta_i += s_i * eta_i`, where `eta_i` is first multiplied by `gamma_i`
/// when `s_i` is opposite to the last nonzero marker of that component.
pub fn update_additive(
    theta: &Theta,
    eta: &EtaState,
    s: &UpdateMarker,
) -> Result<(Theta, EtaState), UpdateError> {
    check_dims(theta, eta, s)?;
    let mut theta = theta.clone();
    let mut eta = eta.clone();
    for (i, si) in s.active() {
        if si * eta.s_prev[i] == -1 {
            eta.eta[i] *= eta.gamma[i];
        }
        theta.values[i] += f64::from(si) * eta.eta[i];
        eta.s_prev[i] = si;
    }
    theta.clamp();
    Ok((theta, eta))
}

/// `theta_i *= eta_i^{s_i}`; on a flip the factor decays toward one as
/// `eta_i <- eta_i^{gamma_i}` before it is applied.
pub fn update_multiplicative(
    theta: &Theta,
    eta: &EtaState,
    s: &UpdateMarker,
) -> Result<(Theta, EtaState), UpdateError> {
    check_dims(theta, eta, s)?;
    if let Some((index, value)) = theta.values.iter().copied().enumerate().find(|(_, v)| !(*v > 0.0)) {
        return Err(UpdateError::NonPositiveTheta { index, value });
    }
    let mut theta = theta.clone();
    let mut eta = eta.clone();
    for (i, si) in s.active() {
        if si * eta.s_prev[i] == -1 {
            eta.eta[i] = eta.eta[i].powf(eta.gamma[i]);
        }
        theta.values[i] *= eta.eta[i].powi(i32::from(si));
        eta.s_prev[i] = si;
    }
    theta.clamp();
    Ok((theta, eta))
}

pub fn apply_update(
    mode: UpdateMode,
    theta: &Theta,
    eta: &EtaState,
    s: &UpdateMarker,
) -> Result<(Theta, EtaState), UpdateError> {
    match mode {
        UpdateMode::Additive => update_additive(theta, eta, s),
        UpdateMode::Multiplicative => update_multiplicative(theta, eta, s),
    }
}
