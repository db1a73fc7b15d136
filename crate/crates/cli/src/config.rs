//! Experiment configuration: JSON schema, loading with path-qualified
//! diagnostics, and semantic validation.

use std::path::{Path, PathBuf};

use moncap::flux::{FluxKindName, FluxParams};
use moncap::mesh::{rasterize, NodeSet};
use moncap::{FluxSpec, Mesh, ShapeExpr, SolverOptions};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "L", default = "one")]
    pub l: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mesh: MeshConfig,
    #[serde(default = "default_flux")]
    pub flux: FluxSpec,
    #[serde(rename = "E", default, skip_serializing_if = "Option::is_none")]
    pub e: Option<ShapeExpr>,
    #[serde(rename = "F", default, skip_serializing_if = "Option::is_none")]
    pub f: Option<ShapeExpr>,
    #[serde(default = "one")]
    pub s: f64,
    /// Replace `E` by `E ∩ F` instead of reporting infinite capacity.
    #[serde(default)]
    pub clip_e_to_f: bool,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<SuiteConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converge: Option<ConvergeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default = "default_instances")]
    pub instances: usize,
    /// Fine mesh for re-checking the worst subadditivity cases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine_n: Option<usize>,
    /// Flux family; defaults to the shipped family for the suite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fluxes: Option<Vec<FluxSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_grid: Option<Vec<f64>>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { instances: default_instances(), refine_n: None, fluxes: None, s_grid: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub s_grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeConfig {
    #[serde(rename = "N_list")]
    pub n_list: Vec<usize>,
    pub oracle: OracleConfig,
    #[serde(default = "default_converge_tol")]
    pub tolerance: f64,
    #[serde(default)]
    pub every_n: bool,
    #[serde(default)]
    pub allowed_increases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleConfig {
    /// Annulus `r < |x - c| < R` in the plane.
    Radial {
        r: f64,
        #[serde(rename = "R")]
        big_r: f64,
        #[serde(default = "default_panels")]
        panels: usize,
    },
    /// Slab `x <= a` inside `x < b`, height `L`.
    Strip { a: f64, b: f64 },
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_xi_radius")]
    pub xi_radius: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { samples: default_samples(), xi_radius: default_xi_radius() }
    }
}

fn one() -> f64 {
    1.0
}

fn default_flux() -> FluxSpec {
    FluxSpec { kind: FluxKindName::PLaplacian, p: 2.0, params: FluxParams::default() }
}

fn default_instances() -> usize {
    50
}

fn default_converge_tol() -> f64 {
    0.05
}

fn default_panels() -> usize {
    20_000
}

fn default_samples() -> usize {
    10_000
}

fn default_xi_radius() -> f64 {
    10.0
}

/// Configuration problems; mapped to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<moncap::Error> for ConfigError {
    fn from(e: moncap::Error) -> Self {
        ConfigError(e.to_string())
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: cannot read config: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            let inner = e.into_inner();
            if at == "." {
                ConfigError(format!("schema error: {inner}"))
            } else {
                ConfigError(format!("schema error at `{at}`: {inner}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Semantic checks that serde cannot express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        Mesh::build(self.mesh.n, self.mesh.l)?;
        self.flux.build()?;
        for (name, shape) in [("E", &self.e), ("F", &self.f)] {
            if let Some(s) = shape {
                s.validate(self.mesh.l).map_err(|e| ConfigError(format!("{name}: {e}")))?;
            }
        }
        if !self.s.is_finite() {
            return Err(ConfigError("s must be finite".into()));
        }
        self.solver.validate()?;
        if let Some(suite) = &self.suite {
            if suite.instances == 0 {
                return Err(ConfigError("suite.instances must be positive".into()));
            }
            for f in suite.fluxes.iter().flatten() {
                f.build()?;
            }
            if let Some(n) = suite.refine_n {
                if n <= self.mesh.n {
                    return Err(ConfigError("suite.refine_n must exceed mesh.N".into()));
                }
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.s_grid.is_empty() || sweep.s_grid.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(ConfigError("sweep.s_grid must be nonempty and strictly ascending".into()));
            }
        }
        if let Some(c) = &self.converge {
            if c.n_list.is_empty() || c.n_list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(ConfigError("converge.N_list must be nonempty and strictly ascending".into()));
            }
        }
        Ok(())
    }

    pub fn mesh(&self) -> Result<Mesh, ConfigError> {
        Ok(Mesh::build(self.mesh.n, self.mesh.l)?)
    }

    /// Rasterized `(E, F)`, with `E` clipped to `F` when requested.
    pub fn sets(&self, mesh: &Mesh) -> Result<(NodeSet, NodeSet), ConfigError> {
        let e = self.e.as_ref().ok_or_else(|| ConfigError("config needs a shape for `E`".into()))?;
        let f = self.f.as_ref().ok_or_else(|| ConfigError("config needs a shape for `F`".into()))?;
        let e = rasterize(e, mesh, "E");
        let f = rasterize(f, mesh, "F");
        let e = if self.clip_e_to_f { e.intersect(&f)?.with_name("E") } else { e };
        Ok((e, f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const STRIP: &str = r#"{
        "mesh": {"N": 8},
        "flux": {"kind": "p_laplacian", "p": 2},
        "E": {"halfplane": {"axis": "x", "threshold": 0.25, "side": "le"}},
        "F": {"halfplane": {"axis": "x", "threshold": 0.75, "side": "le"}}
    }"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::parse(STRIP).unwrap();
        assert_eq!(cfg.mesh.l, 1.0);
        assert_eq!(cfg.s, 1.0);
        assert_eq!(cfg.solver, SolverOptions::default());
        assert!(!cfg.clip_e_to_f);
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let text = STRIP.replace(r#""mesh": {"N": 8}"#, r#""mesh": {"N": 8, "M": 3}"#);
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.0.contains("mesh"), "{err}");
        assert!(err.0.contains("unknown field"), "{err}");
        let text = STRIP.replace(r#""mesh""#, r#""colour": 1, "mesh""#);
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn semantic_errors() {
        let bad_mesh = STRIP.replace(r#""N": 8"#, r#""N": 1"#);
        assert!(ExperimentConfig::parse(&bad_mesh).is_err());
        let bad_shape = STRIP.replace("0.75", "1.5");
        assert!(ExperimentConfig::parse(&bad_shape).unwrap_err().0.contains("F"));
        let bad_flux = STRIP.replace(r#""p": 2"#, r#""p": 0.5"#);
        assert!(ExperimentConfig::parse(&bad_flux).is_err());
    }

    #[test]
    fn clipping() {
        let text = STRIP.replace("0.25", "0.9");
        let mut cfg = ExperimentConfig::parse(&text).unwrap();
        let mesh = cfg.mesh().unwrap();
        let (e, f) = cfg.sets(&mesh).unwrap();
        assert!(!e.is_subset(&f).unwrap());
        cfg.clip_e_to_f = true;
        let (e, f) = cfg.sets(&mesh).unwrap();
        assert!(e.is_subset(&f).unwrap());
    }
}
