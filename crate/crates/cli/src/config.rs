//! Run configuration: one TOML file per invocation. Command-line flags only
//! override fields of it.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sheaf_sysid::experiments::{make_cycle_sheaf, ExperimentConfig, SheafVariant, DEFAULT_ROTATION};
use sheaf_sysid::io::SheafFile;
use sheaf_sysid::{
    CoboundaryOperator, Cochain0, Cochain1, DirectedGraph, EdgePotential, EdgeStalk, NodeField, ParametricFamily,
    ResidualSource, Sheaf,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandName {
    Cohomology,
    Simulate,
    Identify,
    Experiment,
}

impl CommandName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cohomology => "cohomology",
            Self::Simulate => "simulate",
            Self::Identify => "identify",
            Self::Experiment => "experiment",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// When present it must name the subcommand being run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<CommandName>,
    /// Output directory; not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sheaf: Option<SheafSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential: Option<PotentialSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_field: Option<AnchorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identify: Option<IdentifySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Builtin {
    /// Directed n-cycle with ℝ² stalks (see `variant`).
    Cycle,
    /// Directed path on n vertices with identity maps on ℝ^stalk_dim.
    Path,
}

/// Either a builtin sheaf or a sheaf description file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SheafSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<Builtin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<SheafVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stalk_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl SheafSpec {
    pub fn build(&self, base: &Path) -> Result<Sheaf<f64>> {
        match (self.builtin, &self.file) {
            (Some(_), Some(_)) => bail!("[sheaf] takes either `builtin` or `file`, not both"),
            (None, None) => bail!("[sheaf] needs `builtin` or `file`"),
            (None, Some(f)) => {
                if self.n.is_some() || self.variant.is_some() || self.angle.is_some() || self.stalk_dim.is_some() {
                    bail!("[sheaf] with `file` takes no builtin parameters");
                }
                let path = base.join(f);
                let file = SheafFile::load(&path).with_context(|| format!("reading sheaf file {}", path.display()))?;
                Ok(file.to_sheaf()?)
            }
            (Some(kind), None) => {
                let n = self.n.context("builtin sheaf needs `n`")?;
                match kind {
                    Builtin::Cycle => {
                        if self.stalk_dim.is_some_and(|d| d != 2) {
                            bail!("builtin cycle sheaves have 2-dimensional stalks");
                        }
                        let variant = self.variant.unwrap_or(SheafVariant::Identity);
                        Ok(make_cycle_sheaf(n, variant, self.angle.unwrap_or(DEFAULT_ROTATION))?)
                    }
                    Builtin::Path => {
                        if self.variant.is_some() || self.angle.is_some() {
                            bail!("builtin path sheaves take no `variant` or `angle`");
                        }
                        let d = self.stalk_dim.unwrap_or(2);
                        let id = DMatrix::identity(d, d);
                        let graph = DirectedGraph::path(n)?;
                        let stalks = (0..graph.edge_count())
                            .map(|_| EdgeStalk::new(id.clone(), id.clone()))
                            .collect();
                        Ok(Sheaf::new(graph, vec![d; n], stalks)?)
                    }
                }
            }
        }
    }
}

/// Edge potential. Edge cochains (`target`, `direction`) are either a full
/// 1-cochain or one edge-stalk vector repeated on every edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    Quadratic {},
    ShiftedQuadratic {
        target: Vec<f64>,
    },
    BoundedConfidence {
        threshold: f64,
    },
    Antagonistic {
        negative: Vec<bool>,
    },
    Monomial {
        coefficients: Vec<f64>,
    },
    HarmonicAugmented {
        coefficients: Vec<f64>,
        harmonic_coefficient: f64,
        direction: Vec<f64>,
    },
}

impl PotentialSpec {
    pub fn build(&self, op: &CoboundaryOperator<f64>) -> Result<EdgePotential<f64>> {
        let m = match self {
            Self::Quadratic {} => EdgePotential::Quadratic,
            Self::ShiftedQuadratic { target } => EdgePotential::ShiftedQuadratic {
                target: edge_cochain(op, target, "target")?,
            },
            Self::BoundedConfidence { threshold } => EdgePotential::BoundedConfidence { threshold: *threshold },
            Self::Antagonistic { negative } => EdgePotential::Antagonistic {
                negative: negative.clone(),
            },
            Self::Monomial { coefficients } => EdgePotential::Monomial {
                coefficients: coefficients.clone(),
            },
            Self::HarmonicAugmented {
                coefficients,
                harmonic_coefficient,
                direction,
            } => EdgePotential::HarmonicAugmented {
                coefficients: coefficients.clone(),
                harmonic_coefficient: *harmonic_coefficient,
                direction: edge_cochain(op, direction, "direction")?,
            },
        };
        m.validate(op.edge_space())?;
        Ok(m)
    }
}

/// Full 1-cochain, or a single edge vector broadcast when every edge stalk
/// has that dimension.
pub fn edge_cochain(op: &CoboundaryOperator<f64>, v: &[f64], what: &str) -> Result<Cochain1<f64>> {
    let layout = op.edge_space().layout();
    if v.len() == op.d1() {
        return Ok(Cochain1::from_slice(v));
    }
    let count = layout.block_count();
    if count > 0 && (0..count).all(|e| layout.dim(e) == v.len()) {
        return Ok(Cochain1::from_vec(v.iter().copied().cycle().take(op.d1()).collect()));
    }
    bail!(
        "`{what}` has {} entries; expected the 1-cochain dimension {} or one edge-stalk vector",
        v.len(),
        op.d1()
    )
}

/// Anchored node potential `(k/2)‖x − a‖²` in the vertex inner product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub stiffness: f64,
    pub anchor: Vec<f64>,
}

pub fn node_field(spec: Option<&AnchorSpec>, op: &CoboundaryOperator<f64>) -> Result<NodeField<f64>> {
    let Some(a) = spec else { return Ok(NodeField::Zero) };
    if a.anchor.len() != op.d0() {
        bail!(
            "node_field.anchor has {} entries, the 0-cochain dimension is {}",
            a.anchor.len(),
            op.d0()
        );
    }
    Ok(NodeField::Anchored {
        stiffness: a.stiffness,
        anchor: Cochain0::from_slice(&a.anchor),
    })
}

fn one() -> f64 {
    1.0
}
fn default_step() -> f64 {
    0.01
}
fn default_horizon() -> f64 {
    10.0
}
fn default_count() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub noise_std: f64,
    /// Explicit initial conditions; when absent, `trajectories` Gaussian
    /// conditions with standard deviation `scale` are drawn from the seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_count")]
    pub trajectories: usize,
    #[serde(default = "one")]
    pub scale: f64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            step: default_step(),
            horizon: default_horizon(),
            noise_std: 0.0,
            initial: None,
            trajectories: 1,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    Monomial {
        degree: usize,
    },
    MonomialWithHarmonic {
        degree: usize,
        direction: Vec<f64>,
    },
    BoundedConfidence {
        #[serde(default = "default_bracket")]
        bracket: [f64; 2],
    },
}

fn default_bracket() -> [f64; 2] {
    [0.25, 4.0]
}

impl FamilySpec {
    pub fn build(&self, op: &CoboundaryOperator<f64>) -> Result<ParametricFamily<f64>> {
        Ok(match self {
            Self::Monomial { degree } => ParametricFamily::Monomial { degree: *degree },
            Self::MonomialWithHarmonic { degree, direction } => ParametricFamily::MonomialWithHarmonic {
                degree: *degree,
                direction: edge_cochain(op, direction, "direction")?,
            },
            Self::BoundedConfidence { .. } => ParametricFamily::BoundedConfidence,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifySpec {
    /// Trajectory CSV files or directories of them (relative to the config).
    pub data: Vec<PathBuf>,
    pub family: FamilySpec,
    #[serde(default = "default_source")]
    pub residuals: ResidualSource,
    #[serde(default)]
    pub ridge: f64,
    /// Observation noise level of the data, recorded in the report.
    #[serde(default)]
    pub noise_std: f64,
}

fn default_source() -> ResidualSource {
    ResidualSource::Exact
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).context("invalid run configuration")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing run configuration")
    }

    pub fn sheaf(&self) -> Result<&SheafSpec> {
        self.sheaf.as_ref().context("the configuration has no [sheaf] section")
    }
}
