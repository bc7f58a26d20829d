//! Run configuration: a TOML file, strictly validated, with every default
//! written back into the manifest.

use rdiss::kernel::KernelSpec;
use rdiss::spectral::{InitialDatum, Lattice, SpectralProblem, Vec2};
use rdiss::twoscale::{SmallScaleFamily, TorusField, TorusProblem, TrigTerm};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Veps,
    Mean,
    Covariance,
    Asymptotics,
    Ensemble,
    Twoscale,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Veps => "veps",
            Experiment::Mean => "mean",
            Experiment::Covariance => "covariance",
            Experiment::Asymptotics => "asymptotics",
            Experiment::Ensemble => "ensemble",
            Experiment::Twoscale => "twoscale",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub times: TimeConfig,
    #[serde(default = "default_replicas")]
    pub replicas: u64,
    /// Angular wavevectors for mode-level experiments.
    #[serde(default = "default_modes")]
    pub modes: Vec<Vec2>,
    #[serde(default = "default_pairs")]
    pub pairs: Vec<[Vec2; 2]>,
    #[serde(default)]
    pub twoscale: TwoScaleConfig,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_sigmas")]
    pub sigmas: Vec<Vec2>,
    #[serde(default = "default_datum")]
    pub datum: InitialDatum,
    #[serde(default = "default_xi_max")]
    pub xi_max: f64,
    #[serde(default = "default_dxi")]
    pub dxi: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            kappa: default_kappa(),
            sigmas: default_sigmas(),
            datum: default_datum(),
            xi_max: default_xi_max(),
            dxi: default_dxi(),
        }
    }
}

impl ProblemConfig {
    pub fn build(&self) -> rdiss::Result<SpectralProblem> {
        SpectralProblem::new(
            self.kappa,
            self.sigmas.clone(),
            self.datum.clone(),
            Lattice::new(self.xi_max, self.dxi)?,
        )
    }
}

/// Time sampling: a uniform curve grid and a list of observation times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_points")]
    pub points: Vec<f64>,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            t_max: default_t_max(),
            steps: default_steps(),
            points: default_points(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoScaleConfig {
    /// Torus grid per scale; scales above 8 need at least 128.
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_kappa_t")]
    pub kappa_t: f64,
    #[serde(default = "default_scales")]
    pub scales: Vec<u32>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    #[serde(default = "default_torus_datum")]
    pub datum: TorusField,
    #[serde(default = "default_phi")]
    pub phi: TorusField,
}

impl Default for TwoScaleConfig {
    fn default() -> Self {
        Self {
            grid: default_grid(),
            kappa_t: default_kappa_t(),
            scales: default_scales(),
            dt: default_dt(),
            t_final: default_t_final(),
            datum: default_torus_datum(),
            phi: default_phi(),
        }
    }
}

impl RunConfig {
    /// Torus problem at small-scale index `scale`; the grid doubles until
    /// the shell and the datum are resolved.
    pub fn torus_problem(&self, scale: u32) -> rdiss::Result<TorusProblem> {
        let ts = &self.twoscale;
        let band = ts.datum.band(ts.grid);
        let mut n = ts.grid;
        while 3 * (2 * scale as i64 + band) > n as i64 {
            n *= 2;
        }
        let tp = TorusProblem {
            n,
            kappa: self.problem.kappa,
            kappa_t: ts.kappa_t,
            family: SmallScaleFamily::shell(scale, ts.kappa_t)?,
            sigmas: self.problem.sigmas.clone(),
            kernel: self.kernel.clone(),
            epsilon: self.epsilons[0],
            dt: ts.dt,
            t_final: ts.t_final,
            datum: ts.datum.clone(),
        };
        tp.validate()?;
        Ok(tp)
    }

    /// Checks that do not need any numerics.
    pub fn validate(&self) -> rdiss::Result<()> {
        use rdiss::Error::InvalidParameter as bad;
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(bad("epsilons must be a nonempty list of positive numbers".into()));
        }
        if !(self.times.t_max > 0.0) || self.times.steps == 0 {
            return Err(bad("times.t_max must be positive and times.steps nonzero".into()));
        }
        if self.times.points.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(bad("times.points must be nonnegative".into()));
        }
        self.problem.build()?;
        match self.experiment {
            Experiment::Ensemble if self.replicas < 4 => {
                return Err(bad(format!("ensemble needs at least 4 replicas, got {}", self.replicas)));
            }
            Experiment::Twoscale => {
                if self.replicas < 2 {
                    return Err(bad(format!("twoscale needs at least 2 replicas, got {}", self.replicas)));
                }
                self.twoscale.phi.validate()?;
                for &s in &self.twoscale.scales {
                    self.torus_problem(s)?;
                }
            }
            Experiment::Asymptotics if self.problem.kappa != 0.0 => {
                return Err(bad("asymptotics needs problem.kappa = 0".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

fn default_epsilons() -> Vec<f64> {
    vec![0.01]
}
fn default_replicas() -> u64 {
    1000
}
fn default_modes() -> Vec<Vec2> {
    vec![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
}
fn default_pairs() -> Vec<[Vec2; 2]> {
    vec![[[1.0, 0.0], [0.0, 1.0]]]
}
fn default_kappa() -> f64 {
    0.1
}
fn default_sigmas() -> Vec<Vec2> {
    vec![[1.0, 0.0], [0.0, 1.0]]
}
fn default_datum() -> InitialDatum {
    InitialDatum::gaussian(1.0)
}
fn default_xi_max() -> f64 {
    8.0
}
fn default_dxi() -> f64 {
    1.0 / 16.0
}
fn default_t_max() -> f64 {
    1.0
}
fn default_steps() -> usize {
    1000
}
fn default_points() -> Vec<f64> {
    vec![0.25, 1.0]
}
fn default_grid() -> usize {
    64
}
fn default_kappa_t() -> f64 {
    0.02
}
fn default_scales() -> Vec<u32> {
    vec![4, 8, 16]
}
fn default_dt() -> f64 {
    5e-4
}
fn default_t_final() -> f64 {
    0.05
}
fn default_torus_datum() -> TorusField {
    TorusField::trig(
        0.1,
        vec![
            TrigTerm { m: [1, 0], cos: 1.0, sin: 0.0 },
            TrigTerm { m: [1, 2], cos: 0.0, sin: 0.5 },
            TrigTerm { m: [0, 3], cos: 0.3, sin: 0.0 },
        ],
    )
}
fn default_phi() -> TorusField {
    TorusField::trig(
        0.0,
        vec![
            TrigTerm { m: [1, 0], cos: 1.0, sin: 0.0 },
            TrigTerm { m: [2, 1], cos: 0.0, sin: 1.0 },
        ],
    )
}
