//! The nine-dimensional physical parameter vector and its admissible bounds.

use serde::{Deserialize, Serialize};

use super::SimError;

/// Schema version written alongside every serialized [`SimParams`].
pub const PARAMS_SCHEMA_VERSION: u32 = 1;

/// Number of calibrated physical parameters.
pub const N_PARAMS: usize = 9;

/// Identifies one component of [`SimParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Param {
    ParticleDiameter,
    Adhesion,
    ParticleAdhesionScale,
    AdhesionOffsetScale,
    Friction,
    GravityScale,
    Damping,
    Cohesion,
    ParticleMass,
}

impl Param {
    pub const ALL: [Param; N_PARAMS] = [
        Param::ParticleDiameter,
        Param::Adhesion,
        Param::ParticleAdhesionScale,
        Param::AdhesionOffsetScale,
        Param::Friction,
        Param::GravityScale,
        Param::Damping,
        Param::Cohesion,
        Param::ParticleMass,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Field name used in JSON.
    pub fn name(self) -> &'static str {
        match self {
            Param::ParticleDiameter => "particle_diameter",
            Param::Adhesion => "adhesion",
            Param::ParticleAdhesionScale => "particle_adhesion_scale",
            Param::AdhesionOffsetScale => "adhesion_offset_scale",
            Param::Friction => "friction",
            Param::GravityScale => "gravity_scale",
            Param::Damping => "damping",
            Param::Cohesion => "cohesion",
            Param::ParticleMass => "particle_mass",
        }
    }

    /// Admissible simulator interval `[lo, hi]`.
    pub fn bounds(self) -> (f64, f64) {
        PARAM_BOUNDS[self.index()]
    }
}

/// Physical parameter bounds, in [`Param::ALL`] order.
///
/// Diameter is in millimetres and mass in micrograms; the rest are
/// dimensionless.
pub const PARAM_BOUNDS: [(f64, f64); N_PARAMS] = [
    (0.22, 0.32),
    (0.0, 1.3),
    (0.0, 1.3),
    (0.0, 0.00005),
    (0.0, 1.3),
    (0.3, 1.1),
    (0.0, 1.0),
    (0.0, 1.2),
    (13.0, 16.5),
];

/// Physical parameters of a monodisperse granular material.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SimParamsRepr", into = "SimParamsRepr")]
pub struct SimParams {
    /// Particle diameter in millimetres.
    pub particle_diameter: f64,
    /// Boundary attraction strength.
    pub adhesion: f64,
    /// Multiplier on the boundary attraction.
    pub particle_adhesion_scale: f64,
    /// Range factor for boundary attraction.
    pub adhesion_offset_scale: f64,
    /// Tangential correction coefficient.
    pub friction: f64,
    /// Multiplier on standard gravity.
    pub gravity_scale: f64,
    /// Velocity attenuation per reference second, in `[0, 1]`.
    pub damping: f64,
    /// Inter-particle attraction strength.
    pub cohesion: f64,
    /// Particle mass in micrograms.
    pub particle_mass: f64,
}

impl SimParams {
    /// Builds parameters from an array in [`Param::ALL`] order and validates them.
    pub fn from_array(values: [f64; N_PARAMS]) -> Result<Self, SimError> {
        let p = Self::from_array_unchecked(values);
        p.validate()?;
        Ok(p)
    }

    pub(crate) fn from_array_unchecked(v: [f64; N_PARAMS]) -> Self {
        SimParams {
            particle_diameter: v[0],
            adhesion: v[1],
            particle_adhesion_scale: v[2],
            adhesion_offset_scale: v[3],
            friction: v[4],
            gravity_scale: v[5],
            damping: v[6],
            cohesion: v[7],
            particle_mass: v[8],
        }
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.particle_diameter,
            self.adhesion,
            self.particle_adhesion_scale,
            self.adhesion_offset_scale,
            self.friction,
            self.gravity_scale,
            self.damping,
            self.cohesion,
            self.particle_mass,
        ]
    }

    pub fn get(&self, p: Param) -> f64 {
        self.to_array()[p.index()]
    }

    /// Returns a copy with one component replaced (unvalidated until [`Self::validate`]).
    pub fn with(&self, p: Param, value: f64) -> Self {
        let mut v = self.to_array();
        v[p.index()] = value;
        Self::from_array_unchecked(v)
    }

    /// Every component at its lower bound.
    pub fn lower_bound() -> Self {
        Self::from_array_unchecked(PARAM_BOUNDS.map(|(lo, _)| lo))
    }

    /// Every component at its upper bound.
    pub fn upper_bound() -> Self {
        Self::from_array_unchecked(PARAM_BOUNDS.map(|(_, hi)| hi))
    }

    /// Every component at the centre of its interval.
    pub fn midpoint() -> Self {
        Self::from_array_unchecked(PARAM_BOUNDS.map(|(lo, hi)| 0.5 * (lo + hi)))
    }

    /// Checks finiteness and bounds of every field.
    pub fn validate(&self) -> Result<(), SimError> {
        for (p, v) in Param::ALL.iter().zip(self.to_array()) {
            let (lo, hi) = p.bounds();
            if !v.is_finite() || v < lo || v > hi {
                return Err(SimError::ParamOutOfBounds {
                    name: p.name(),
                    value: v,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }

    /// Clamps every component into its interval.
    pub fn clamped(&self) -> Self {
        let mut v = self.to_array();
        for (x, (lo, hi)) in v.iter_mut().zip(PARAM_BOUNDS) {
            *x = x.clamp(lo, hi);
        }
        Self::from_array_unchecked(v)
    }

    /// Particle diameter in metres.
    pub fn diameter_m(&self) -> f64 {
        self.particle_diameter * 1e-3
    }

    /// Particle mass in milligrams.
    pub fn mass_mg(&self) -> f64 {
        self.particle_mass * 1e-3
    }
}

impl Default for SimParams {
    fn default() -> Self {
        Self::midpoint()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimParamsRepr {
    schema_version: u32,
    particle_diameter: f64,
    adhesion: f64,
    particle_adhesion_scale: f64,
    adhesion_offset_scale: f64,
    friction: f64,
    gravity_scale: f64,
    damping: f64,
    cohesion: f64,
    particle_mass: f64,
}

impl TryFrom<SimParamsRepr> for SimParams {
    type Error = SimError;

    fn try_from(r: SimParamsRepr) -> Result<Self, Self::Error> {
        if r.schema_version != PARAMS_SCHEMA_VERSION {
            return Err(SimError::SchemaVersion(r.schema_version));
        }
        SimParams::from_array([
            r.particle_diameter,
            r.adhesion,
            r.particle_adhesion_scale,
            r.adhesion_offset_scale,
            r.friction,
            r.gravity_scale,
            r.damping,
            r.cohesion,
            r.particle_mass,
        ])
    }
}

impl From<SimParams> for SimParamsRepr {
    fn from(p: SimParams) -> Self {
        SimParamsRepr {
            schema_version: PARAMS_SCHEMA_VERSION,
            particle_diameter: p.particle_diameter,
            adhesion: p.adhesion,
            particle_adhesion_scale: p.particle_adhesion_scale,
            adhesion_offset_scale: p.adhesion_offset_scale,
            friction: p.friction,
            gravity_scale: p.gravity_scale,
            damping: p.damping,
            cohesion: p.cohesion,
            particle_mass: p.particle_mass,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_table() {
        assert_eq!(Param::ParticleDiameter.bounds(), (0.22, 0.32));
        assert_eq!(Param::AdhesionOffsetScale.bounds(), (0.0, 0.00005));
        assert_eq!(Param::GravityScale.bounds(), (0.3, 1.1));
        assert_eq!(Param::ParticleMass.bounds(), (13.0, 16.5));
        for (lo, hi) in PARAM_BOUNDS {
            assert!(lo <= hi);
        }
    }

    #[test]
    fn json_has_exactly_nine_fields_plus_version() {
        let v = serde_json::to_value(SimParams::midpoint()).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), 10);
        assert_eq!(obj["schema_version"], 1);
        for p in Param::ALL {
            assert!(obj.contains_key(p.name()), "{}", p.name());
        }
        let back: SimParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, SimParams::midpoint());
    }

    #[test]
    fn rejects_out_of_bounds_and_unknown_keys() {
        let mut v = serde_json::to_value(SimParams::midpoint()).unwrap();
        v["friction"] = serde_json::json!(2.0);
        assert!(serde_json::from_value::<SimParams>(v.clone()).is_err());
        v["friction"] = serde_json::json!(0.5);
        v["restitution"] = serde_json::json!(0.5);
        assert!(serde_json::from_value::<SimParams>(v).is_err());
        assert!(SimParams::midpoint().with(Param::Damping, f64::NAN).validate().is_err());
    }

    #[test]
    fn rejects_wrong_schema_version() {
        let mut v = serde_json::to_value(SimParams::midpoint()).unwrap();
        v["schema_version"] = serde_json::json!(2);
        assert!(serde_json::from_value::<SimParams>(v).is_err());
    }
}
