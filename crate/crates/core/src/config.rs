//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "dimension": 2,
//!   "fields": [
//!     {"label": "v", "kind": "affine", "A": [[-1, 1], [-1, -1]], "b": [0, 0]},
//!     {"label": "w", "kind": "expression", "components": ["-(x1 - 1)", "-x2"]}
//!   ],
//!   "Q": [[-1.5, 1.5], [2, -2]],
//!   "lambda": 1.0,
//!   "box": [[-1, 1], [-1, 1]],
//!   "x0": [0, 0], "i0": 0,
//!   "horizon": 1000, "burn_in": 100, "step": 0.001, "seed": 7,
//!   "density": {"cells": 64, "trajectories": 100},
//!   "hormander": {"depth": 1, "points": [[1, 0], [0, 0]]},
//!   "singularity": {"gamma": {"points": [[0, 0]], "state": 0, "radius": 0.01},
//!                   "radii": [0.2, 0.1, 0.05, 0.025]}
//! }
//! ```
//!
//! States are 0-based everywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::DEFAULT_STEP;
use crate::pdmp::{BoundingBox, PdmpConfig};
use crate::singularity::GammaCandidate;
use crate::switching::{scale, validate_rate_matrix, RateMatrix};
use crate::vecfield::{Field, VectorFieldSpec};

pub const SEED_ENV: &str = "PDMP_LAB_SEED";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Json(String),
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("missing `{0}` block")]
    MissingBlock(&'static str),
    #[error("{SEED_ENV}={value:?} is not an unsigned integer")]
    BadSeedEnv { value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FieldConfig {
    Affine {
        label: String,
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        #[serde(default)]
        b: Option<Vec<f64>>,
    },
    Expression {
        label: String,
        components: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityBlock {
    pub cells: Option<usize>,
    pub trajectories: Option<usize>,
    pub lambda_list: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points_per_axis: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HormanderBlock {
    pub depth: Option<usize>,
    pub points: Option<Vec<Vec<f64>>>,
    pub grid: Option<GridBlock>,
    pub rank_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingularityBlock {
    pub gamma: GammaCandidate,
    /// Radii of the empirical blow-up diagnostic around the first point.
    pub radii: Option<Vec<f64>>,
    pub trajectories: Option<usize>,
    pub access_trials: Option<usize>,
    pub access_horizon: Option<f64>,
    pub hormander_depth: Option<usize>,
    pub invariance_t_max: Option<f64>,
    pub invariance_tol: Option<f64>,
    /// Start of the accessibility trials; defaults to `x0`.
    pub access_from: Option<Vec<f64>>,
    /// Extent of the sampled blow-up exponent.
    pub exponent_s_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dimension: usize,
    pub fields: Vec<FieldConfig>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub lambda: Option<f64>,
    #[serde(rename = "box")]
    pub bbox: Vec<[f64; 2]>,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub i0: usize,
    pub horizon: f64,
    pub burn_in: Option<f64>,
    pub step: Option<f64>,
    pub seed: Option<u64>,
    pub output_dt: Option<f64>,
    pub density: Option<DensityBlock>,
    pub hormander: Option<HormanderBlock>,
    pub singularity: Option<SingularityBlock>,
}

/// A config checked against its schema, with the parsed objects it needs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub raw: ExperimentConfig,
    pub fields: Vec<VectorFieldSpec>,
    /// Rate matrix after `lambda` scaling.
    pub rates: RateMatrix,
    pub bbox: BoundingBox,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Json(e.to_string()))
    }

    /// Validates everything and builds the parsed objects. `seed_env` is the
    /// value of the seed environment variable, used when the config has no
    /// seed; without either the seed is 0.
    pub fn validate(self, seed_env: Option<&str>) -> Result<Experiment, ConfigError> {
        let mut errs = Vec::new();
        let d = self.dimension;
        if d == 0 {
            errs.push("dimension must be at least 1".to_string());
        }
        let mut fields = Vec::new();
        for (k, f) in self.fields.iter().enumerate() {
            let built = match f {
                FieldConfig::Affine { label, a, b } => {
                    let zero = vec![0.0; d];
                    VectorFieldSpec::affine(label.clone(), a, b.as_deref().unwrap_or(&zero))
                }
                FieldConfig::Expression { label, components } => VectorFieldSpec::expression(label.clone(), components),
            };
            match built {
                Ok(spec) if spec.dim() == d => fields.push(spec),
                Ok(spec) => errs.push(format!("field {k} has dimension {}, expected {d}", spec.dim())),
                Err(e) => errs.push(format!("field {k}: {e}")),
            }
        }
        let rates = match validate_rate_matrix(&self.q) {
            Ok(q) => match self.lambda {
                None => Some(q),
                Some(l) => match scale(&q, l) {
                    Ok(q) => Some(q),
                    Err(e) => {
                        errs.push(format!("lambda: {e}"));
                        None
                    }
                },
            },
            Err(es) => {
                errs.extend(es.into_iter().map(|e| format!("Q: {e}")));
                None
            }
        };
        if let Some(q) = &rates {
            if q.n() != self.fields.len() {
                errs.push(format!("{} fields for a {}-state Q", self.fields.len(), q.n()));
            }
            if let Err(e) = q.check_irreducible() {
                errs.push(format!("Q: {e}"));
            }
            if self.i0 >= q.n() {
                errs.push(format!("i0 = {} is not a state", self.i0));
            }
        }
        let bbox = if self.bbox.len() != d {
            errs.push(format!("box has {} axes, expected {d}", self.bbox.len()));
            None
        } else {
            match BoundingBox::new(
                self.bbox.iter().map(|b| b[0]).collect(),
                self.bbox.iter().map(|b| b[1]).collect(),
            ) {
                Ok(b) => Some(b),
                Err(e) => {
                    errs.push(format!("box: {e}"));
                    None
                }
            }
        };
        if self.x0.len() != d {
            errs.push(format!("x0 has {} coordinates, expected {d}", self.x0.len()));
        } else if let Some(b) = &bbox {
            if !b.contains(&self.x0) {
                errs.push(format!("x0 {:?} lies outside the box", self.x0));
            }
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            errs.push(format!("horizon must be positive, got {}", self.horizon));
        }
        for (name, v) in [("step", self.step), ("output_dt", self.output_dt)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    errs.push(format!("{name} must be positive, got {v}"));
                }
            }
        }
        if let Some(b) = self.burn_in {
            if !(b >= 0.0 && b.is_finite()) {
                errs.push(format!("burn_in must be non-negative, got {b}"));
            }
        }
        if let Some(s) = &self.singularity {
            let n = self.fields.len();
            if s.gamma.state >= n {
                errs.push(format!("singularity.gamma.state = {} is not a state", s.gamma.state));
            }
            if s.gamma.points.is_empty() || s.gamma.points.iter().any(|p| p.len() != d) {
                errs.push("singularity.gamma.points must be non-empty points of the right dimension".into());
            }
            if !(s.gamma.radius > 0.0 && s.gamma.radius.is_finite()) {
                errs.push(format!(
                    "singularity.gamma.radius must be positive, got {}",
                    s.gamma.radius
                ));
            }
            if s.access_from.as_ref().is_some_and(|p| p.len() != d) {
                errs.push("singularity.access_from must have the config's dimension".into());
            }
            if let Some(radii) = &s.radii {
                if radii.len() < 4 || radii.windows(2).any(|w| !(w[0] > w[1])) || radii.iter().any(|r| !(*r > 0.0)) {
                    errs.push("singularity.radii needs at least 4 positive radii in decreasing order".into());
                }
            }
        }
        if let Some(h) = &self.hormander {
            if h.points.iter().flatten().any(|p| p.len() != d) {
                errs.push("hormander.points must have the config's dimension".into());
            }
            if let Some(g) = &h.grid {
                if g.lower.len() != d || g.upper.len() != d || g.points_per_axis == 0 {
                    errs.push("hormander.grid needs d-dimensional bounds and a positive point count".into());
                }
            }
        }
        let seed = match (self.seed, seed_env) {
            (Some(s), _) => s,
            (None, Some(v)) => v
                .trim()
                .parse()
                .map_err(|_| ConfigError::BadSeedEnv { value: v.to_string() })?,
            (None, None) => 0,
        };
        if !errs.is_empty() {
            return Err(ConfigError::Invalid(errs));
        }
        Ok(Experiment {
            fields,
            rates: rates.expect("validated"),
            bbox: bbox.expect("validated"),
            seed,
            raw: self,
        })
    }
}

impl Experiment {
    pub fn pdmp(&self) -> PdmpConfig {
        PdmpConfig {
            fields: self.fields.clone(),
            rates: self.rates.clone(),
            bbox: self.bbox.clone(),
            x0: self.raw.x0.clone(),
            i0: self.raw.i0,
            horizon: self.raw.horizon,
            burn_in: self.raw.burn_in,
            step: self.raw.step.unwrap_or(DEFAULT_STEP),
            seed: self.seed,
            output_dt: self.raw.output_dt,
        }
    }

    /// The same experiment with the unscaled rates multiplied by `lambda`.
    pub fn with_lambda(&self, lambda: f64) -> Result<Experiment, ConfigError> {
        let mut raw = self.raw.clone();
        raw.lambda = Some(lambda);
        raw.seed = Some(self.seed);
        raw.validate(None)
    }

    pub fn hormander_points(&self) -> Vec<Vec<f64>> {
        let Some(h) = &self.raw.hormander else {
            return Vec::new();
        };
        let mut pts = h.points.clone().unwrap_or_default();
        if let Some(g) = &h.grid {
            pts.extend(grid_points(&g.lower, &g.upper, g.points_per_axis));
        }
        pts
    }
}

/// Tensor grid with `n` points per axis, axis 0 slowest.
pub fn grid_points(lower: &[f64], upper: &[f64], n: usize) -> Vec<Vec<f64>> {
    let d = lower.len();
    let coord = |k: usize, i: usize| {
        if n == 1 {
            0.5 * (lower[k] + upper[k])
        } else {
            lower[k] + (upper[k] - lower[k]) * i as f64 / (n - 1) as f64
        }
    };
    (0..n.pow(d as u32))
        .map(|mut idx| {
            let mut p = vec![0.0; d];
            for k in (0..d).rev() {
                p[k] = coord(k, idx % n);
                idx /= n;
            }
            p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"{
        "dimension": 2,
        "fields": [
            {"label": "v", "kind": "affine", "A": [[-1, 1], [-1, -1]]},
            {"label": "w", "kind": "expression", "components": ["-(x1 - 1)", "-x2"]}
        ],
        "Q": [[-1.5, 1.5], [2, -2]],
        "box": [[-1, 1], [-1, 1]],
        "x0": [0, 0],
        "horizon": 50
    }"#;

    #[test]
    fn parses_example() {
        let exp = ExperimentConfig::from_json(EXAMPLE).unwrap().validate(None).unwrap();
        assert_eq!(exp.fields.len(), 2);
        assert_eq!(exp.seed, 0);
        let cfg = exp.pdmp();
        assert_eq!(cfg.step, DEFAULT_STEP);
        assert!(cfg.validate().is_ok());
        let scaled = exp.with_lambda(10.0).unwrap();
        assert_eq!(scaled.rates.rate(0, 1), 15.0);
    }

    #[test]
    fn seed_fallback() {
        let exp = ExperimentConfig::from_json(EXAMPLE)
            .unwrap()
            .validate(Some("42"))
            .unwrap();
        assert_eq!(exp.seed, 42);
        assert!(matches!(
            ExperimentConfig::from_json(EXAMPLE).unwrap().validate(Some("x")),
            Err(ConfigError::BadSeedEnv { .. })
        ));
        let with_seed = EXAMPLE.replace("\"horizon\": 50", "\"horizon\": 50, \"seed\": 3");
        assert_eq!(
            ExperimentConfig::from_json(&with_seed)
                .unwrap()
                .validate(Some("42"))
                .unwrap()
                .seed,
            3
        );
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(ExperimentConfig::from_json("{"), Err(ConfigError::Json(_))));
        assert!(matches!(
            ExperimentConfig::from_json(&EXAMPLE.replace("\"horizon\"", "\"horizn\"")),
            Err(ConfigError::Json(_))
        ));
        let outside = EXAMPLE.replace("\"x0\": [0, 0]", "\"x0\": [2, 0]");
        let err = ExperimentConfig::from_json(&outside)
            .unwrap()
            .validate(None)
            .unwrap_err();
        assert!(err.to_string().contains("outside the box"), "{err}");
        let bad_q = EXAMPLE.replace("[2, -2]", "[2, -3]");
        assert!(ExperimentConfig::from_json(&bad_q).unwrap().validate(None).is_err());
        let bad_expr = EXAMPLE.replace("\"-x2\"", "\"-x3\"");
        assert!(ExperimentConfig::from_json(&bad_expr).unwrap().validate(None).is_err());
    }

    #[test]
    fn grid() {
        let g = grid_points(&[0.0, -1.0], &[1.0, 1.0], 3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], vec![0.0, -1.0]);
        assert_eq!(g[1], vec![0.0, 0.0]);
        assert_eq!(g[8], vec![1.0, 1.0]);
    }
}
