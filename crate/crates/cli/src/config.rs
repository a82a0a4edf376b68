//! TOML run configuration: `[env]`, `[method]`, `[sweep]`, `[output]`.
//!
//! Grid-valued keys take either a scalar or a list. Unknown keys are
//! rejected. Command-line flags are applied on top with [`Overrides`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use metaover::experiments::{Axis, EnvTemplate, Grid, Metric, PlotSpec, SpectrumFamily, Statistic, SweepConfig};
use metaover::meta_solver::DEFAULT_RANK_TOL;
use metaover::{ErmConvention, Estimator, McSettings, MetaMethod, SubGaussianFamily};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub d: OneOrMany<usize>,
    /// Number of unit eigenvalues; the remaining `d − d1` are `beta`.
    pub d1: usize,
    pub beta: OneOrMany<f64>,
    /// Replaces `beta` with `tail_trace / (d − d1)` when set.
    pub tail_trace: Option<f64>,
    pub sigma_omega: OneOrMany<f64>,
    pub r: f64,
    pub theta_mean_norm: f64,
    pub sigma: f64,
    pub split: f64,
    pub rotation_seed: Option<u64>,
    pub family: SubGaussianFamily,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            d: OneOrMany::One(100),
            d1: 0,
            beta: OneOrMany::One(1.0),
            tail_trace: None,
            sigma_omega: OneOrMany::One(0.0),
            r: 1.0,
            theta_mean_norm: 1.0,
            sigma: 1.0,
            split: 0.5,
            rotation_seed: None,
            family: SubGaussianFamily::Gaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSection {
    /// Any of `erm`, `maml`, `imaml`.
    pub kind: OneOrMany<String>,
    pub alpha: OneOrMany<f64>,
    pub gamma: OneOrMany<f64>,
    /// ERM fits train and validation samples together.
    pub erm_pool: bool,
}

impl Default for MethodSection {
    fn default() -> Self {
        Self {
            kind: OneOrMany::One("maml".into()),
            alpha: OneOrMany::One(0.1),
            gamma: OneOrMany::One(1.0),
            erm_pool: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub name: String,
    pub n: OneOrMany<usize>,
    pub m: OneOrMany<usize>,
    pub num_seeds: usize,
    pub master_seed: u64,
    /// Monte-Carlo draws for the excess-risk cross-check; 0 skips it.
    pub mc_draws: usize,
    pub c1: f64,
    pub rank_tol: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            name: "sweep".into(),
            n: OneOrMany::One(10),
            m: OneOrMany::One(10),
            num_seeds: 1,
            master_seed: 0,
            mc_draws: 0,
            c1: 1.0,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub env: EnvSection,
    pub method: MethodSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub num_seeds: Option<usize>,
    pub c1: Option<f64>,
    pub erm_pool: bool,
    pub mc_draws: Option<usize>,
    pub workers: usize,
}

impl Overrides {
    pub fn apply(&self, c: &mut SweepConfig) {
        if let Some(s) = self.seed {
            c.master_seed = s;
        }
        if let Some(n) = self.num_seeds {
            c.num_seeds = n;
        }
        if let Some(c1) = self.c1 {
            c.c1 = c1;
        }
        if self.erm_pool {
            c.erm = ErmConvention::Pooled;
        }
        match self.mc_draws {
            Some(0) => c.mc = None,
            Some(draws) => c.mc = Some(McSettings::new(draws, 0)),
            None => {}
        }
        c.workers = self.workers;
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::user("config", e.message().to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user("io", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::user("config", format!("{}: {}", path.display(), e.message)))
    }

    pub fn methods(&self) -> CliResult<Vec<MetaMethod>> {
        let mut out = Vec::new();
        for kind in self.method.kind.to_vec() {
            match kind.as_str() {
                "erm" => out.push(MetaMethod::Erm),
                "maml" => out.extend(self.method.alpha.to_vec().into_iter().map(|alpha| MetaMethod::Maml { alpha })),
                "imaml" => out.extend(self.method.gamma.to_vec().into_iter().map(|gamma| MetaMethod::Imaml { gamma })),
                other => {
                    return Err(CliError::user("config", format!("method.kind: unknown method '{other}' (expected erm, maml or imaml)")))
                }
            }
        }
        Ok(out)
    }

    /// Resolve into a sweep. Plots follow the axes that actually vary.
    pub fn to_sweep(&self, overrides: &Overrides) -> CliResult<SweepConfig> {
        let e = &self.env;
        let spectrum = match e.tail_trace {
            Some(tail_trace) => SpectrumFamily::FixedTailTrace { d1: e.d1, tail_trace },
            None => SpectrumFamily::Spiked { d1: e.d1 },
        };
        let env = EnvTemplate {
            spectrum,
            r: e.r,
            theta_mean_norm: e.theta_mean_norm,
            sigma_noise: e.sigma,
            split: e.split,
            rotation_seed: e.rotation_seed,
            family: e.family,
        };
        let grid = Grid {
            label: self.sweep.name.clone(),
            methods: self.methods()?,
            n: self.sweep.n.to_vec(),
            m: self.sweep.m.to_vec(),
            d: e.d.to_vec(),
            beta: e.beta.to_vec(),
            sigma_omega: e.sigma_omega.to_vec(),
        };
        let x = if grid.n.len() > 1 {
            Axis::N
        } else if grid.d.len() > 1 {
            Axis::D
        } else {
            Axis::M
        };
        let series = if grid.beta.len() > 1 {
            Axis::Beta
        } else if grid.sigma_omega.len() > 1 {
            Axis::SigmaOmega
        } else {
            Axis::Method
        };
        let plot = PlotSpec {
            file: "risk".into(),
            title: format!("Excess risk vs {}", x.name()),
            grid: 0,
            x,
            series,
            y: Metric::ExcessRisk,
            statistic: Statistic::Mean,
            per_method: true,
            log_x: true,
            log_y: true,
        };
        let mut c = SweepConfig {
            name: self.sweep.name.clone(),
            env,
            grids: vec![grid],
            num_seeds: self.sweep.num_seeds,
            master_seed: self.sweep.master_seed,
            estimator: Estimator::Analytic,
            mc: (self.sweep.mc_draws > 0).then(|| McSettings::new(self.sweep.mc_draws, 0)),
            c1: self.sweep.c1,
            erm: if self.method.erm_pool { ErmConvention::Pooled } else { ErmConvention::Validation },
            rank_tol: self.sweep.rank_tol,
            workers: 0,
            plots: vec![plot],
            metadata: BTreeMap::new(),
        };
        overrides.apply(&mut c);
        Ok(c)
    }
}
