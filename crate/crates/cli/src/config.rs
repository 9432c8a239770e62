//! JSON experiment configuration. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use plp_core::chain::{is_irreducible, matrix_from_rows, validate_tpm, DwellTime};
use plp_core::DMatrix;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Plp,
    BaselineSls,
    RobustSls,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Plp, ControllerKind::BaselineSls, ControllerKind::RobustSls];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Plp => "plp",
            ControllerKind::BaselineSls => "baseline-sls",
            ControllerKind::RobustSls => "robust-sls",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySpec {
    /// Explicit undirected edge lists, one per mode.
    Edges { modes: Vec<Vec<(usize, usize)>> },
    /// A ring backbone per mode plus random chords.
    Random { modes: usize, chord_prob: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub nodes: usize,
    /// Diffusion coupling gain `eps` in `A = I - eps L`.
    pub coupling: f64,
    pub topologies: TopologySpec,
    /// Nodes carrying an actuator; all nodes when omitted.
    #[serde(default)]
    pub actuated: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DwellSpec {
    #[default]
    PerStep,
    Fixed(usize),
}

impl From<DwellSpec> for DwellTime {
    fn from(d: DwellSpec) -> Self {
        match d {
            DwellSpec::PerStep => DwellTime::PerStep,
            DwellSpec::Fixed(n) => DwellTime::Fixed(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    /// Row-stochastic transition matrix. Exactly one of `tpm` and `random_seed`.
    #[serde(default)]
    pub tpm: Option<Vec<Vec<f64>>>,
    /// Draws a random zero-diagonal transition matrix over the network's modes.
    #[serde(default)]
    pub random_seed: Option<u64>,
    #[serde(default)]
    pub initial_mode: usize,
    #[serde(default)]
    pub dwell: DwellSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    #[default]
    Uniform,
    Gaussian,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    /// Infinity-norm bound `w_bar` (standard deviation for `gaussian`).
    pub bound: f64,
    #[serde(default)]
    pub distribution: Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlsSpec {
    /// FIR horizon `H`.
    pub horizon: usize,
    /// Locality radius in hops; `null` for no locality constraint.
    #[serde(default)]
    pub hops: Option<usize>,
    #[serde(default = "one")]
    pub q_scale: f64,
    #[serde(default = "one")]
    pub r_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    /// Equal-length mode strings.
    pub patterns: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlpOptions {
    /// Laplace smoothing of the empirical transition matrix.
    #[serde(default = "one")]
    pub prior_weight: f64,
    #[serde(default = "yes")]
    pub data_driven: bool,
    #[serde(default = "default_accept")]
    pub data_accept_tol: f64,
    #[serde(default)]
    pub refresh_on_new_data: bool,
}

fn default_accept() -> f64 {
    plp_core::plp::DATA_ACCEPT_TOL
}

impl Default for PlpOptions {
    fn default() -> Self {
        Self {
            prior_weight: 1.0,
            data_driven: true,
            data_accept_tol: default_accept(),
            refresh_on_new_data: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub network: Option<NetworkSpec>,
    pub chain: ChainSpec,
    #[serde(default)]
    pub disturbance: Option<DisturbanceSpec>,
    #[serde(default)]
    pub sls: Option<SlsSpec>,
    #[serde(default)]
    pub patterns: Option<PatternSpec>,
    #[serde(default)]
    pub plp: PlpOptions,
    /// Simulation length `T` in steps.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "all_controllers")]
    pub controllers: Vec<ControllerKind>,
    /// Record synthesis wall-time; off makes every CSV column reproducible.
    #[serde(default = "yes")]
    pub wall_clock: bool,
    /// States beyond this infinity norm count as divergence.
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
    /// Steps after each true switch over which post-switch norms are taken;
    /// twice the horizon when omitted.
    #[serde(default)]
    pub post_switch_window: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_steps() -> usize {
    500
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn all_controllers() -> Vec<ControllerKind> {
    ControllerKind::ALL.to_vec()
}

fn default_divergence() -> f64 {
    1e6
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn num_modes(&self) -> Result<usize, ConfigError> {
        if let Some(net) = &self.network {
            return Ok(match &net.topologies {
                TopologySpec::Edges { modes } => modes.len(),
                TopologySpec::Random { modes, .. } => *modes,
            });
        }
        match &self.chain.tpm {
            Some(rows) => Ok(rows.len()),
            None => invalid("chain.random_seed needs a network to fix the number of modes"),
        }
    }

    /// The transition matrix, validated and checked for irreducibility.
    pub fn tpm(&self) -> Result<DMatrix<f64>, ConfigError> {
        let m = self.num_modes()?;
        let tpm = match (&self.chain.tpm, self.chain.random_seed) {
            (Some(rows), None) => matrix_from_rows(rows).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            (None, Some(seed)) => random_tpm(m, seed),
            _ => return invalid("chain needs exactly one of `tpm` and `random_seed`"),
        };
        validate_tpm(&tpm).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if tpm.nrows() != m {
            return invalid(format!("chain has {} modes but the network has {m}", tpm.nrows()));
        }
        if self.chain.initial_mode >= m {
            return invalid(format!("initial mode {} out of range", self.chain.initial_mode));
        }
        if !is_irreducible(&tpm) {
            return invalid("mode chain is not irreducible");
        }
        Ok(tpm)
    }

    /// Checks everything a closed-loop run needs.
    pub fn validate_for_runs(&self) -> Result<(), ConfigError> {
        let Some(net) = &self.network else {
            return invalid("`network` is required");
        };
        let Some(dist) = &self.disturbance else {
            return invalid("`disturbance` is required");
        };
        let Some(sls) = &self.sls else {
            return invalid("`sls` is required");
        };
        self.tpm()?;
        if net.nodes == 0 {
            return invalid("network needs at least one node");
        }
        if !(net.coupling > 0.0 && net.coupling.is_finite()) {
            return invalid("network.coupling must be positive");
        }
        match &net.topologies {
            TopologySpec::Edges { modes } => {
                if modes.is_empty() {
                    return invalid("at least one topology is required");
                }
                if modes.iter().flatten().any(|&(a, b)| a >= net.nodes || b >= net.nodes || a == b) {
                    return invalid("topology edge out of range or self-loop");
                }
            }
            TopologySpec::Random { modes, chord_prob, .. } => {
                if *modes == 0 || !(0.0..=1.0).contains(chord_prob) {
                    return invalid("random topologies need modes >= 1 and chord_prob in [0, 1]");
                }
            }
        }
        if let Some(act) = &net.actuated {
            if act.is_empty() || act.iter().any(|&k| k >= net.nodes) {
                return invalid("network.actuated must list valid nodes");
            }
        }
        if !(dist.bound >= 0.0 && dist.bound.is_finite()) {
            return invalid("disturbance.bound must be finite and non-negative");
        }
        if sls.horizon == 0 {
            return invalid("sls.horizon must be >= 1");
        }
        if !(sls.q_scale >= 0.0) || !(sls.r_scale > 0.0) {
            return invalid("sls.q_scale must be >= 0 and sls.r_scale > 0");
        }
        if let Some(p) = &self.patterns {
            let m = self.num_modes()?;
            plp_core::pattern::PatternCollection::new(p.patterns.clone(), m).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.steps == 0 {
            return invalid("steps must be >= 1");
        }
        if self.seeds.is_empty() {
            return invalid("at least one seed is required");
        }
        if self.controllers.is_empty() {
            return invalid("at least one controller is required");
        }
        if let Some(x0) = &self.initial_state {
            if x0.len() != net.nodes {
                return invalid(format!("initial_state has {} entries for {} nodes", x0.len(), net.nodes));
            }
        }
        if !(self.plp.prior_weight > 0.0) {
            return invalid("plp.prior_weight must be positive");
        }
        if !(self.divergence_threshold > 0.0) {
            return invalid("divergence_threshold must be positive");
        }
        Ok(())
    }
}

/// Random transition matrix with an empty diagonal (every draw is a switch).
pub fn random_tpm(m: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if m == 1 {
        return DMatrix::from_element(1, 1, 1.0);
    }
    let mut p = DMatrix::zeros(m, m);
    for i in 0..m {
        let mut total = 0.0;
        for j in 0..m {
            if j != i {
                p[(i, j)] = rng.random_range(0.1..1.0);
                total += p[(i, j)];
            }
        }
        for j in 0..m {
            p[(i, j)] /= total;
        }
    }
    p
}

/// Ring backbone plus each remaining pair with probability `chord_prob`.
pub fn random_topologies(nodes: usize, modes: usize, chord_prob: f64, seed: u64) -> Vec<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..modes)
        .map(|_| {
            let mut edges: Vec<(usize, usize)> = if nodes > 1 {
                (0..nodes).map(|i| (i, (i + 1) % nodes)).filter(|(a, b)| a != b).collect()
            } else {
                Vec::new()
            };
            for a in 0..nodes {
                for b in a + 2..nodes {
                    if !(a == 0 && b == nodes - 1) && rng.random_bool(chord_prob) {
                        edges.push((a, b));
                    }
                }
            }
            edges
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "network": {"nodes": 3, "coupling": 0.2, "topologies": {"kind": "edges", "modes": [[[0,1],[1,2]]]}},
        "chain": {"tpm": [[1.0]]},
        "disturbance": {"bound": 0.1},
        "sls": {"horizon": 3}
    }"#;

    #[test]
    fn minimal_config_validates() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        c.validate_for_runs().unwrap();
        assert_eq!(c.controllers.len(), 3);
        assert!(c.wall_clock);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replacen("\"steps\"", "\"x\"", 1).replacen("{\"horizon\": 3}", "{\"horizon\": 3, \"hop\": 1}", 1);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(ConfigError::Parse(_))));
        let top = MINIMAL.replacen("\"chain\"", "\"bogus\": 1, \"chain\"", 1);
        assert!(ExperimentConfig::from_json(&top).is_err());
    }

    #[test]
    fn reducible_chain_is_invalid() {
        let text = MINIMAL
            .replace("[[[0,1],[1,2]]]", "[[[0,1],[1,2]], [[0,2]]]")
            .replace("[[1.0]]", "[[1.0, 0.0], [0.0, 1.0]]");
        let c = ExperimentConfig::from_json(&text).unwrap();
        assert!(matches!(c.validate_for_runs(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn random_generators_are_seeded() {
        assert_eq!(random_tpm(4, 3), random_tpm(4, 3));
        let p = random_tpm(4, 3);
        for i in 0..4 {
            assert_eq!(p[(i, i)], 0.0);
            assert!((p.row(i).sum() - 1.0).abs() < 1e-12);
        }
        let t = random_topologies(6, 2, 0.5, 9);
        assert_eq!(t, random_topologies(6, 2, 0.5, 9));
        assert!(t.iter().all(|e| e.len() >= 6));
    }
}
