//! Run configuration: TOML schema, bundled scenarios, and conversion into
//! world and socket configs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use checkmate_core::fabric::SocketDemoConfig;
use checkmate_core::optim::{Hyper, LrSchedule, OptimKind};
use checkmate_core::trainer::MlpSpec;
use checkmate_core::world::{FailurePlan, WorldConfig};

/// Transport selection: deterministic fabric or loopback TCP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Det,
    Sockets,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Det => "det",
            Mode::Sockets => "sockets",
        })
    }
}

/// One runnable scenario, as read from a TOML file. Every field has a
/// default, so a config file only states what it changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub iterations: u64,
    /// Output directory; the --out flag takes precedence.
    pub out: Option<PathBuf>,
    pub world: WorldSection,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub failures: Option<FailureSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: "smoke".into(),
            mode: Mode::Det,
            seed: 7,
            iterations: 10,
            out: None,
            world: WorldSection::default(),
            model: ModelSection::default(),
            optim: OptimSection::default(),
            failures: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub groups: u16,
    pub world_size: usize,
    pub num_channels: usize,
    pub bucket_cap_bytes: u64,
    pub shard_count: usize,
    pub shadows_per_group: usize,
    pub mtu_payload: usize,
    pub mirror_sinks: usize,
    pub verify_each_iteration: bool,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            groups: 1,
            world_size: 4,
            num_channels: 2,
            bucket_cap_bytes: 512,
            shard_count: 2,
            shadows_per_group: 1,
            mtu_payload: 256,
            mirror_sinks: 0,
            verify_each_iteration: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub batch_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { input_dim: 12, hidden: vec![16, 12], output_dim: 8, batch_size: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    /// "adamw" or "sgd".
    pub kind: String,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    /// Cosine-decay horizon; absent means a constant rate.
    pub cosine_total_iters: Option<u64>,
}

impl Default for OptimSection {
    fn default() -> Self {
        let h = Hyper::default();
        Self {
            kind: "adamw".into(),
            lr: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
            momentum: h.momentum,
            cosine_total_iters: None,
        }
    }
}

/// When to cut iterations and which ranks to kill.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FailureSection {
    /// Cut every nth iteration (n = 2 cuts iterations 1, 3, 5, ...).
    pub every: Option<u64>,
    /// Cut these specific iterations.
    pub at: Vec<u64>,
    /// (group, rank) pairs to kill; empty kills every rank.
    pub ranks: Vec<(u16, usize)>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.world.num_channels == 0 {
            return Err("num_channels must be at least 1".into());
        }
        if self.iterations == 0 {
            return Err("iterations must be at least 1".into());
        }
        self.optim_kind()?;
        if let Some(f) = &self.failures {
            if f.every.is_some() && !f.at.is_empty() {
                return Err("failures: choose either `every` or `at`, not both".into());
            }
            if f.every == Some(0) {
                return Err("failures: `every` must be at least 1".into());
            }
            if let Some(&past) = f.at.iter().find(|&&i| i >= self.iterations) {
                return Err(format!(
                    "failures: iteration {past} is past the end of the {}-iteration run",
                    self.iterations
                ));
            }
            for &(g, r) in &f.ranks {
                if g >= self.world.groups || r >= self.world.world_size {
                    return Err(format!("failures: rank ({g}, {r}) does not exist"));
                }
            }
        }
        Ok(())
    }

    fn optim_kind(&self) -> Result<OptimKind, String> {
        match self.optim.kind.as_str() {
            "adamw" => Ok(OptimKind::AdamW),
            "sgd" => Ok(OptimKind::Sgd),
            other => Err(format!("unknown optimizer {other:?}; expected adamw or sgd")),
        }
    }

    fn hyper(&self) -> Hyper {
        Hyper {
            lr: self.optim.lr,
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
            weight_decay: self.optim.weight_decay,
            momentum: self.optim.momentum,
        }
    }

    fn schedule(&self) -> LrSchedule {
        match self.optim.cosine_total_iters {
            Some(total_iters) => LrSchedule::Cosine { total_iters },
            None => LrSchedule::Constant,
        }
    }

    fn model(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.model.input_dim,
            hidden: self.model.hidden.clone(),
            output_dim: self.model.output_dim,
            batch_size: self.model.batch_size,
        }
    }

    pub fn to_world(&self) -> Result<WorldConfig, String> {
        Ok(WorldConfig {
            groups: self.world.groups,
            world_size: self.world.world_size,
            num_channels: self.world.num_channels,
            model: self.model(),
            bucket_cap_bytes: self.world.bucket_cap_bytes,
            shard_count: self.world.shard_count,
            shadows_per_group: self.world.shadows_per_group,
            mtu_payload: self.world.mtu_payload,
            seed: self.seed,
            optim: self.optim_kind()?,
            hyper: self.hyper(),
            schedule: self.schedule(),
            mirror_sinks: self.world.mirror_sinks,
            verify_each_iteration: self.world.verify_each_iteration,
            ..WorldConfig::default()
        })
    }

    pub fn to_socket(&self) -> Result<SocketDemoConfig, String> {
        if self.world.groups != 1 || self.world.shadows_per_group != 1 {
            return Err("socket mode runs one dp group with one shadow host".into());
        }
        if self.world.mirror_sinks != 0 {
            return Err("socket mode has no mirror sinks".into());
        }
        if self.failures.is_some() {
            return Err("failure injection requires the deterministic fabric".into());
        }
        Ok(SocketDemoConfig {
            world_size: self.world.world_size,
            num_channels: self.world.num_channels,
            model: self.model(),
            bucket_cap_bytes: self.world.bucket_cap_bytes,
            shard_count: self.world.shard_count,
            mtu_payload: self.world.mtu_payload,
            seed: self.seed,
            optim: self.optim_kind()?,
            hyper: self.hyper(),
            schedule: self.schedule(),
            iterations: self.iterations,
        })
    }

    /// Failure plan plus the ranks to kill; None when no schedule is set.
    pub fn failure_plan(&self) -> Option<(FailurePlan, Vec<(u16, usize)>)> {
        let f = self.failures.as_ref()?;
        let plan = if !f.at.is_empty() {
            FailurePlan::At(f.at.iter().copied().collect())
        } else if let Some(n) = f.every {
            FailurePlan::EveryNth { n }
        } else {
            return None;
        };
        Some((plan, f.ranks.clone()))
    }
}

pub const SCENARIOS: &[&str] = &["smoke", "two-groups", "million-param", "recovery-drill"];

/// Bundled scenario by name.
pub fn scenario(name: &str) -> Option<RunConfig> {
    match name {
        "smoke" => Some(RunConfig::default()),
        "two-groups" => Some(RunConfig {
            scenario: "two-groups".into(),
            seed: 11,
            iterations: 8,
            world: WorldSection {
                groups: 2,
                world_size: 3,
                shard_count: 3,
                ..WorldSection::default()
            },
            ..RunConfig::default()
        }),
        "million-param" => Some(RunConfig {
            scenario: "million-param".into(),
            seed: 42,
            iterations: 100,
            world: WorldSection {
                world_size: 4,
                num_channels: 4,
                bucket_cap_bytes: 65_536,
                shard_count: 4,
                mtu_payload: 8192,
                ..WorldSection::default()
            },
            model: ModelSection {
                input_dim: 320,
                hidden: vec![800, 800],
                output_dim: 160,
                batch_size: 16,
            },
            ..RunConfig::default()
        }),
        "recovery-drill" => Some(RunConfig {
            scenario: "recovery-drill".into(),
            iterations: 20,
            failures: Some(FailureSection { every: Some(2), ..FailureSection::default() }),
            ..RunConfig::default()
        }),
        _ => None,
    }
}
