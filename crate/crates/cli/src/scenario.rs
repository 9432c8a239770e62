//! Turns a validated config into plants, synthesis problems and seeded
//! realisations shared by every controller.

use std::sync::Arc;

use sha2::{Digest, Sha256};

use plp_core::chain::{sample_mode_sequence, ModeChain, ModeSequence};
use plp_core::network::{actuation_matrix, NetworkTopology};
use plp_core::pattern::PatternCollection;
use plp_core::plp::{BaselineSlsController, LoggedController, ModeDesign, PlpController, PlpSettings, RobustSlsController};
use plp_core::sls::{SlsProblem, Support};
use plp_core::system::{DisturbanceModel, JumpLinearSystem};
use plp_core::{DMatrix, DVector, Result};

use crate::config::{random_topologies, ConfigError, ControllerKind, Distribution, ExperimentConfig, TopologySpec};

pub struct Scenario {
    pub config: ExperimentConfig,
    pub topology: NetworkTopology,
    pub system: Arc<JumpLinearSystem>,
    pub chain: ModeChain,
    pub actuated: Vec<usize>,
    /// Per-mode problems with per-mode locality.
    pub problems: Vec<SlsProblem>,
    /// Per-mode problems sharing the union-graph locality.
    pub robust_problems: Vec<SlsProblem>,
    pub patterns: Option<PatternCollection>,
    pub disturbance: DisturbanceModel,
}

/// One seed's mode sequence and disturbance draws.
#[derive(Debug, Clone)]
pub struct Realization {
    pub seed: u64,
    pub modes: ModeSequence,
    pub disturbances: Vec<DVector<f64>>,
    pub hash: String,
}

fn config_err(e: plp_core::Error) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

/// Independent sub-seed for stream `stream` of run `seed`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl Scenario {
    pub fn build(config: &ExperimentConfig) -> Result<Self, ConfigError> {
        config.validate_for_runs()?;
        let net = config.network.as_ref().expect("validated");
        let sls = config.sls.as_ref().expect("validated");
        let dist = config.disturbance.as_ref().expect("validated");
        let edges = match &net.topologies {
            TopologySpec::Edges { modes } => modes.clone(),
            TopologySpec::Random { modes, chord_prob, seed } => random_topologies(net.nodes, *modes, *chord_prob, *seed),
        };
        let topology = NetworkTopology::new(net.nodes, edges, net.coupling).map_err(config_err)?;
        let actuated: Vec<usize> = net.actuated.clone().unwrap_or_else(|| (0..net.nodes).collect());
        let b = actuation_matrix(net.nodes, &actuated).map_err(config_err)?;
        let bound = match dist.distribution {
            Distribution::Uniform => dist.bound,
            Distribution::Zero => 0.0,
            // Unbounded noise: identification uses a 4-sigma gate.
            Distribution::Gaussian => 4.0 * dist.bound,
        };
        let system = JumpLinearSystem::from_topology(&topology, b.clone(), bound).map_err(config_err)?;
        for m in 0..topology.num_modes() {
            if topology.dynamics(m).map_err(config_err)?.gain_warning {
                log::warn!("mode {m}: coupling gain at or above 1/max_degree, open loop may be unstable");
            }
        }
        let chain = ModeChain::new(config.tpm()?, config.chain.initial_mode).map_err(config_err)?;
        let nx = net.nodes;
        let q = DMatrix::identity(nx, nx) * sls.q_scale;
        let r = DMatrix::identity(actuated.len(), actuated.len()) * sls.r_scale;
        let mut problems = Vec::new();
        let mut robust_problems = Vec::new();
        let union_support = match sls.hops {
            Some(h) => Some(
                Support::from_neighborhoods(
                    &(0..nx).map(|i| topology.union_hop_neighborhood(i, h)).collect::<Result<Vec<_>>>().map_err(config_err)?,
                    &actuated,
                    sls.horizon,
                )
                .map_err(config_err)?,
            ),
            None => None,
        };
        for m in 0..topology.num_modes() {
            let a = system.a(m).clone();
            let base = SlsProblem::new(a, b.clone(), sls.horizon)
                .and_then(|p| p.with_weights(q.clone(), r.clone()))
                .map_err(config_err)?;
            let local = match sls.hops {
                Some(h) => {
                    let nb = (0..nx).map(|i| topology.hop_neighborhood(m, i, h)).collect::<Result<Vec<_>>>().map_err(config_err)?;
                    let sup = Support::from_neighborhoods(&nb, &actuated, sls.horizon).map_err(config_err)?;
                    base.clone().with_support(sup).map_err(config_err)?
                }
                None => base.clone(),
            };
            problems.push(local);
            robust_problems.push(match &union_support {
                Some(s) => base.with_support(s.clone()).map_err(config_err)?,
                None => base,
            });
        }
        let patterns = match &config.patterns {
            Some(p) => Some(PatternCollection::new(p.patterns.clone(), topology.num_modes()).map_err(config_err)?),
            None => None,
        };
        let disturbance = match dist.distribution {
            Distribution::Uniform => DisturbanceModel::Uniform { bound: dist.bound },
            Distribution::Gaussian => DisturbanceModel::Gaussian { std_dev: dist.bound },
            Distribution::Zero => DisturbanceModel::Zero,
        };
        Ok(Self {
            config: config.clone(),
            topology,
            system: Arc::new(system),
            chain,
            actuated,
            problems,
            robust_problems,
            patterns,
            disturbance,
        })
    }

    pub fn num_modes(&self) -> usize {
        self.system.num_modes()
    }

    pub fn horizon(&self) -> usize {
        self.problems[0].horizon
    }

    pub fn post_switch_window(&self) -> usize {
        self.config.post_switch_window.unwrap_or(2 * self.horizon())
    }

    pub fn initial_state(&self) -> DVector<f64> {
        match &self.config.initial_state {
            Some(x) => DVector::from_vec(x.clone()),
            None => DVector::zeros(self.system.state_dim()),
        }
    }

    pub fn realize(&self, seed: u64) -> Result<Realization> {
        let steps = self.config.steps;
        let dwell = self.config.chain.dwell.into();
        let modes = sample_mode_sequence(&self.chain, steps, dwell, sub_seed(seed, 1))?;
        let disturbances = self.disturbance.realize(steps, self.system.state_dim(), sub_seed(seed, 2));
        let mut h = Sha256::new();
        for m in &modes.modes {
            h.update((*m as u64).to_le_bytes());
        }
        for w in &disturbances {
            for v in w.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let hash = hex::encode(h.finalize());
        Ok(Realization {
            seed,
            modes,
            disturbances,
            hash,
        })
    }

    pub fn plp_settings(&self) -> PlpSettings {
        let opts = &self.config.plp;
        let mut s = PlpSettings::new(
            self.problems
                .iter()
                .map(|p| ModeDesign {
                    problem: p.clone(),
                    model_available: true,
                })
                .collect(),
        );
        s.patterns = self.patterns.clone();
        s.prior_weight = opts.prior_weight;
        s.data_driven = opts.data_driven;
        s.data_accept_tol = opts.data_accept_tol;
        s.refresh_on_new_data = opts.refresh_on_new_data;
        s.wall_clock = self.config.wall_clock;
        s.initial_mode = self.config.chain.initial_mode;
        s
    }

    /// Builds a fresh controller. With `true_modes` the controller reads the
    /// realised mode sequence instead of identifying it.
    pub fn controller(&self, kind: ControllerKind, true_modes: Option<&[usize]>) -> Result<Box<dyn LoggedController>> {
        let prior = self.config.plp.prior_weight;
        let init = self.config.chain.initial_mode;
        let wall = self.config.wall_clock;
        Ok(match kind {
            ControllerKind::Plp => {
                let c = PlpController::new(self.system.clone(), self.plp_settings())?;
                Box::new(match true_modes {
                    Some(m) => c.with_true_modes(m.to_vec()),
                    None => c,
                })
            }
            ControllerKind::BaselineSls => {
                let c = BaselineSlsController::new(self.system.clone(), self.problems.clone(), prior, init, wall)?;
                Box::new(match true_modes {
                    Some(m) => c.with_true_modes(m.to_vec()),
                    None => c,
                })
            }
            ControllerKind::RobustSls => {
                let c = RobustSlsController::new(self.system.clone(), &self.robust_problems, prior, init, wall)?;
                Box::new(match true_modes {
                    Some(m) => c.with_true_modes(m.to_vec()),
                    None => c,
                })
            }
        })
    }
}
