//! Flat key-value run configuration (TOML syntax). Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::EvalConfig;
use crate::error::{CplError, Result};
use crate::losses::{LossWeights, PvsCoefficients};
use crate::net::{Activation, ArchSpec};
use crate::projectors::{DEFAULT_CLAMP_ITERS, DEFAULT_CLAMP_TOL};
use crate::reference::{InitialCondition, ScenarioSpec};
use crate::trainer::{AdaptiveWeights, ChainStep, Curriculum, TrainConfig, TvdSchedule, DEFAULT_BLEND_GAMMA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialKind {
    RandomFourier,
    SineBump,
    StepShock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // mesh and reference data
    pub n_cells: usize,
    pub nu: f64,
    pub domain_length: f64,
    pub refine_factor: usize,
    pub cfl: f64,
    /// Coarse step; `0` derives it from `cfl`.
    pub dt: f64,
    pub initial_condition: InitialKind,
    pub n_trajectories: usize,
    pub fourier_modes: usize,
    pub amplitude: f64,
    pub data_seed: u64,
    pub step_left: f64,
    pub step_right: f64,
    pub step_position: f64,
    /// Coarse steps solved per trajectory.
    pub trajectory_steps: usize,
    /// Snapshots per stored sequence.
    pub seq_len: usize,
    pub reference_berger: bool,

    // network
    pub stencil_radius: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub residual_mode: bool,
    pub baseline_berger: bool,

    // optimization
    pub eta: f64,
    pub momentum: f64,
    pub eta_decay: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub grad_clip: f64,
    pub max_windows_per_epoch: usize,
    pub checkpoint_every: usize,

    // objective
    pub w_fv: f64,
    pub w_ent: f64,
    pub w_rh: f64,
    pub w_tvd: f64,
    pub w_bnd: f64,
    pub adaptive_weights: bool,
    pub adaptive_alpha: f64,
    pub adaptive_beta: f64,
    pub adaptive_cadence: usize,
    pub hutchinson_probes: usize,
    pub tvd_schedule: TvdSchedule,
    pub tvd_mask: bool,
    pub rollout_max: usize,
    pub curriculum: Curriculum,

    // projection chain
    pub project_mass: bool,
    pub project_berger: bool,
    pub blend_gamma: f64,
    pub project_entropy: bool,
    pub clamp_iters: usize,
    pub clamp_tol: f64,
    /// Applies the (bounds) box clamp when `bound_lower < bound_upper`.
    pub project_bounds: bool,
    pub bound_lower: f64,
    pub bound_upper: f64,

    // evaluation
    /// Appends the entropy clamp to the chain at evaluation time.
    pub clamp_at_inference: bool,
    pub coverage_target: f64,
    pub pvs_a: f64,
    pub pvs_b: f64,
    pub pvs_c: f64,
    pub pvs_d: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = ArchSpec::default();
        let tc = TrainConfig::default();
        let w = LossWeights::default();
        Self {
            n_cells: 128,
            nu: 0.01,
            domain_length: 1.0,
            refine_factor: 8,
            cfl: 0.4,
            dt: 0.0,
            initial_condition: InitialKind::RandomFourier,
            n_trajectories: 50,
            fourier_modes: 4,
            amplitude: 1.0,
            data_seed: 1000,
            step_left: 1.0,
            step_right: 0.0,
            step_position: 0.25,
            trajectory_steps: 40,
            seq_len: 41,
            reference_berger: true,
            stencil_radius: arch.stencil_radius,
            hidden_widths: arch.hidden_widths,
            activation: arch.activation,
            residual_mode: arch.residual_mode,
            baseline_berger: arch.baseline_berger,
            eta: tc.eta,
            momentum: tc.momentum,
            eta_decay: tc.eta_decay,
            epochs: tc.epochs,
            batch_size: tc.batch_size,
            seed: tc.seed,
            val_fraction: tc.val_fraction,
            grad_clip: tc.grad_clip,
            max_windows_per_epoch: tc.max_windows_per_epoch,
            checkpoint_every: tc.checkpoint_every,
            w_fv: w.fv,
            w_ent: w.ent,
            w_rh: w.rh,
            w_tvd: w.tvd,
            w_bnd: w.bnd,
            adaptive_weights: false,
            adaptive_alpha: AdaptiveWeights::default().alpha,
            adaptive_beta: AdaptiveWeights::default().beta,
            adaptive_cadence: AdaptiveWeights::default().cadence,
            hutchinson_probes: AdaptiveWeights::default().hutchinson_probes,
            tvd_schedule: tc.tvd_schedule,
            tvd_mask: tc.tvd_mask,
            rollout_max: tc.rollout_max,
            curriculum: tc.curriculum,
            project_mass: true,
            project_berger: true,
            blend_gamma: DEFAULT_BLEND_GAMMA,
            project_entropy: false,
            clamp_iters: DEFAULT_CLAMP_ITERS,
            clamp_tol: DEFAULT_CLAMP_TOL,
            project_bounds: false,
            bound_lower: -10.0,
            bound_upper: 10.0,
            clamp_at_inference: false,
            coverage_target: 0.9,
            pvs_a: 1.0,
            pvs_b: 1.0,
            pvs_c: 1.0,
            pvs_d: 1.0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CplError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 || self.seq_len > self.trajectory_steps + 1 {
            return Err(CplError::InvalidConfig(format!(
                "seq_len {} must be in [2, trajectory_steps + 1 = {}]",
                self.seq_len,
                self.trajectory_steps + 1
            )));
        }
        if self.n_trajectories == 0 {
            return Err(CplError::InvalidConfig("n_trajectories must be >= 1".into()));
        }
        if !(self.dt >= 0.0) {
            return Err(CplError::InvalidConfig("dt must be >= 0".into()));
        }
        if self.project_bounds && !(self.bound_lower < self.bound_upper) {
            return Err(CplError::InvalidConfig("bound_lower must be below bound_upper".into()));
        }
        if !(self.coverage_target > 0.0 && self.coverage_target < 1.0) {
            return Err(CplError::InvalidConfig("coverage_target must be in (0, 1)".into()));
        }
        self.scenarios().first().map(|s| s.validate()).transpose()?;
        self.train_config().validate()
    }

    pub fn scenarios(&self) -> Vec<ScenarioSpec> {
        (0..self.n_trajectories)
            .map(|k| {
                let ic = match self.initial_condition {
                    InitialKind::RandomFourier => InitialCondition::RandomFourier {
                        modes: self.fourier_modes,
                        seed: self.data_seed + k as u64,
                        amplitude: self.amplitude,
                    },
                    InitialKind::SineBump => InitialCondition::SineBump,
                    InitialKind::StepShock => InitialCondition::StepShock {
                        left: self.step_left,
                        right: self.step_right,
                        position: self.step_position,
                    },
                };
                ScenarioSpec {
                    initial_condition: ic,
                    nu: self.nu,
                    n_coarse: self.n_cells,
                    refine_factor: self.refine_factor,
                    t_end: None,
                    horizon_steps: self.trajectory_steps,
                    cfl_target: self.cfl,
                    domain_length: self.domain_length,
                    dt: if self.dt > 0.0 { Some(self.dt) } else { None },
                    use_berger: self.reference_berger,
                }
            })
            .collect()
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            stencil_radius: self.stencil_radius,
            hidden_widths: self.hidden_widths.clone(),
            activation: self.activation,
            residual_mode: self.residual_mode,
            baseline_berger: self.baseline_berger,
        }
    }

    pub fn chain(&self) -> Vec<ChainStep> {
        let mut chain = Vec::new();
        if self.project_mass {
            chain.push(ChainStep::MassBalance);
        }
        if self.project_berger {
            chain.push(ChainStep::BergerBlend { gamma: self.blend_gamma });
        }
        if self.project_entropy {
            chain.push(ChainStep::EntropyClamp { max_iters: self.clamp_iters, tol: self.clamp_tol });
        }
        if self.project_bounds {
            chain.push(ChainStep::Bounds { lower: self.bound_lower, upper: self.bound_upper });
        }
        chain
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            arch: self.arch(),
            eta: self.eta,
            momentum: self.momentum,
            eta_decay: self.eta_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weights: LossWeights { fv: self.w_fv, ent: self.w_ent, rh: self.w_rh, tvd: self.w_tvd, bnd: self.w_bnd },
            adaptive: self.adaptive_weights.then_some(AdaptiveWeights {
                alpha: self.adaptive_alpha,
                beta: self.adaptive_beta,
                cadence: self.adaptive_cadence,
                hutchinson_probes: self.hutchinson_probes,
            }),
            tvd_schedule: self.tvd_schedule,
            tvd_mask: self.tvd_mask,
            rollout_max: self.rollout_max,
            curriculum: self.curriculum,
            chain: self.chain(),
            loss_bounds: self.project_bounds.then_some((self.bound_lower, self.bound_upper)),
            seed: self.seed,
            val_fraction: self.val_fraction,
            grad_clip: self.grad_clip,
            max_windows_per_epoch: self.max_windows_per_epoch,
            checkpoint_every: self.checkpoint_every,
            deterministic: false,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let mut chain = self.chain();
        if self.clamp_at_inference && !self.project_entropy {
            chain.push(ChainStep::EntropyClamp { max_iters: self.clamp_iters, tol: self.clamp_tol });
        }
        EvalConfig {
            chain,
            bounds: self.project_bounds.then_some((self.bound_lower, self.bound_upper)),
            pvs: PvsCoefficients { a: self.pvs_a, b: self.pvs_b, c: self.pvs_c, d: self.pvs_d },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.train_config(), TrainConfig::default());
        assert_eq!(cfg.chain(), crate::trainer::training_chain());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::parse("epochs = 3\nw_tvd = 0.2\ncurriculum = \"LinearRamp\"\nrollout_max = 8\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.train_config().weights.tvd, 0.2);
        assert_eq!(cfg.train_config().curriculum, Curriculum::LinearRamp);
        assert_eq!(cfg.n_cells, 128);
    }

    #[test]
    fn unknown_and_invalid_keys_are_errors() {
        assert!(matches!(RunConfig::parse("epoch = 3"), Err(CplError::InvalidConfig(_))));
        assert!(RunConfig::parse("[section]\nepochs = 3").is_err());
        assert!(RunConfig::parse("eta = -1.0").is_err());
        assert!(RunConfig::parse("seq_len = 50").is_err());
        assert!(RunConfig::parse("initial_condition = \"square\"").is_err());
    }

    #[test]
    fn chain_members_are_skippable() {
        let cfg = RunConfig::parse("project_berger = false\nproject_entropy = true\nclamp_at_inference = true").unwrap();
        assert_eq!(cfg.chain().len(), 2);
        assert_eq!(cfg.eval_config().chain.len(), 2);
        let cfg = RunConfig::parse("clamp_at_inference = true").unwrap();
        assert!(matches!(cfg.eval_config().chain.last(), Some(ChainStep::EntropyClamp { .. })));
    }

    #[test]
    fn scenarios_follow_the_seed_sequence() {
        let cfg = RunConfig::parse("n_trajectories = 3\ndata_seed = 7\ndt = 5e-4").unwrap();
        let s = cfg.scenarios();
        assert_eq!(s.len(), 3);
        assert_eq!(s[2].dt, Some(5e-4));
        assert!(matches!(s[2].initial_condition, InitialCondition::RandomFourier { seed: 9, .. }));
    }
}
