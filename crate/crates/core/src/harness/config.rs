//! Flat `key = value` run configuration with dotted namespaces.

use std::fmt::Write as _;
use std::path::Path;

use crate::agent::{ActionCodec, AgentConfig};
use crate::encoder::{EmbedSummary, EncoderConfig};
use crate::envsim::reward::SafeDistanceMode;
use crate::envsim::{ActionSpace, EnvConfig, Task};
use crate::error::{Error, Result};
use crate::rssm::RssmConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayConfig {
    /// Total transitions kept before whole episodes are evicted.
    pub capacity: usize,
    pub seq_len: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub seed_episodes: usize,
    pub encoder_pretrain_steps: usize,
    pub encoder_batch: usize,
    /// Keep updating the encoder alongside the world model instead of freezing it.
    pub encoder_keep_training: bool,
    pub world_model_steps: usize,
    /// Episodes collected per collection phase.
    pub collect_interval: usize,
    pub updates_per_collect: usize,
    /// Cap on imagination start states per update; 0 uses every posterior state.
    pub imagination_starts: usize,
    /// Frames in the probe set for the variance report.
    pub probe_frames: usize,
    /// Start each training window from the posterior filtered over its episode prefix
    /// instead of the initial state, so the recurrence sees the depths it meets when acting.
    pub prefix_filter: bool,
    /// Standardize summaries per dimension with statistics of the probe frames, fixed after pretraining.
    pub standardize_embeddings: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub encoder: EncoderConfig,
    /// `embed_dim` and `action_dim` are derived from the encoder and environment.
    pub rssm: RssmConfig,
    pub agent: AgentConfig,
    pub replay: ReplayConfig,
    pub schedule: ScheduleConfig,
    /// Take the policy mode during evaluation rather than sampling.
    pub eval_greedy: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_task(Task::Highway)
    }
}

trait ConfigValue: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! fromstr_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

fromstr_value!(f64, usize, u64, bool, Task, ActionSpace, EmbedSummary);

impl ConfigValue for (f64, f64) {
    fn parse(s: &str) -> Option<Self> {
        let (a, b) = s.split_once(',')?;
        Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
    }
    fn render(&self) -> String {
        format!("{},{}", self.0, self.1)
    }
}

impl ConfigValue for SafeDistanceMode {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "penalty" => Some(Self::Penalty),
            "symmetric" => Some(Self::Symmetric),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            Self::Penalty => "penalty",
            Self::Symmetric => "symmetric",
        }
        .into()
    }
}

fn parse_value<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse(value).ok_or_else(|| Error::Config(format!("bad value `{value}` for `{key}`")))
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        fn set_field(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $($key => cfg.$($field).+ = parse_value(key, value)?,)*
                _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
            }
            Ok(())
        }

        fn entries(cfg: &RunConfig) -> Vec<(&'static str, String)> {
            vec![$(($key, cfg.$($field).+.render()),)*]
        }
    };
}

config_keys! {
    "env.task" => env.task;
    "env.action_space" => env.action_space;
    "env.time_limit" => env.time_limit;
    "env.vehicle_count" => env.vehicle_count;
    "env.vehicle_density" => env.vehicle_density;
    "env.speed_target" => env.speed_target;
    "env.collision_penalty" => env.collision_penalty;
    "env.success_reward" => env.success_reward;
    "env.shaping_weight" => env.shaping_weight;
    "env.dt" => env.dt;
    "env.weights.speed" => env.weights.speed;
    "env.weights.safe_distance" => env.weights.safe_distance;
    "env.weights.lane_change" => env.weights.lane_change;
    "env.weights.progress" => env.weights.progress;
    "env.weights.heading" => env.weights.heading;
    "env.weights.survival" => env.weights.survival;
    "env.safe_distance_mode" => env.safe_distance_mode;
    "env.safe_headway" => env.safe_headway;
    "env.lane_change_needs_gain" => env.lane_change_needs_gain;
    "env.lanes" => env.lanes;
    "env.spawn_rate" => env.spawn_rate;
    "env.traffic_lane_change_prob" => env.traffic_lane_change_prob;
    "env.accel_limit" => env.accel_limit;
    "env.steer_limit" => env.steer_limit;
    "env.meters_per_pixel" => env.meters_per_pixel;
    "encoder.patch_size" => encoder.patch_size;
    "encoder.embed_dim" => encoder.embed_dim;
    "encoder.stem_channels" => encoder.stem_channels;
    "encoder.merge_channels" => encoder.merge_channels;
    "encoder.bottleneck_hidden" => encoder.bottleneck_hidden;
    "encoder.predictor_hidden" => encoder.predictor_hidden;
    "encoder.mask_ratio" => encoder.mask_ratio;
    "encoder.tau" => encoder.tau;
    "encoder.alpha" => encoder.alpha;
    "encoder.beta" => encoder.beta;
    "encoder.gamma_w" => encoder.gamma_w;
    "encoder.eps" => encoder.eps;
    "encoder.frame_stack" => encoder.frame_stack;
    "encoder.lr" => encoder.lr;
    "encoder.summary" => encoder.summary;
    "rssm.h_dim" => rssm.h_dim;
    "rssm.z_dim" => rssm.z_dim;
    "rssm.hidden" => rssm.hidden;
    "rssm.free_bits" => rssm.free_bits;
    "rssm.w_pred" => rssm.w_pred;
    "rssm.w_dyn" => rssm.w_dyn;
    "rssm.w_rep" => rssm.w_rep;
    "rssm.learned_init" => rssm.learned_init;
    "rssm.detach_z" => rssm.detach_z;
    "rssm.lr" => rssm.lr;
    "agent.horizon" => agent.horizon;
    "agent.gamma" => agent.gamma;
    "agent.lambda" => agent.lambda;
    "agent.entropy_beta" => agent.entropy_beta;
    "agent.hidden" => agent.hidden;
    "agent.actor_lr" => agent.actor_lr;
    "agent.critic_lr" => agent.critic_lr;
    "agent.continuation_weighting" => agent.continuation_weighting;
    "agent.normalize_advantages" => agent.normalize_advantages;
    "replay.capacity" => replay.capacity;
    "replay.seq_len" => replay.seq_len;
    "replay.batch" => replay.batch;
    "schedule.seed_episodes" => schedule.seed_episodes;
    "schedule.encoder_pretrain_steps" => schedule.encoder_pretrain_steps;
    "schedule.encoder_batch" => schedule.encoder_batch;
    "schedule.encoder_keep_training" => schedule.encoder_keep_training;
    "schedule.world_model_steps" => schedule.world_model_steps;
    "schedule.collect_interval" => schedule.collect_interval;
    "schedule.updates_per_collect" => schedule.updates_per_collect;
    "schedule.imagination_starts" => schedule.imagination_starts;
    "schedule.probe_frames" => schedule.probe_frames;
    "schedule.prefix_filter" => schedule.prefix_filter;
    "schedule.standardize_embeddings" => schedule.standardize_embeddings;
    "eval.greedy" => eval_greedy;
    "seed" => seed;
}

impl RunConfig {
    pub fn for_task(task: Task) -> Self {
        let env = EnvConfig::for_task(task);
        let mut cfg = Self {
            env,
            encoder: EncoderConfig::default(),
            rssm: RssmConfig::default(),
            agent: AgentConfig::default(),
            replay: ReplayConfig { capacity: 50_000, seq_len: 32, batch: 16 },
            schedule: ScheduleConfig {
                seed_episodes: 5,
                encoder_pretrain_steps: 2000,
                encoder_batch: 16,
                encoder_keep_training: false,
                world_model_steps: 5000,
                collect_interval: 1,
                updates_per_collect: 50,
                imagination_starts: 0,
                probe_frames: 512,
                prefix_filter: true,
                standardize_embeddings: true,
            },
            eval_greedy: true,
            seed: 0,
        };
        cfg.sync_derived();
        cfg
    }

    /// Parse `key = value` lines; `#` starts a comment. `env.task` is applied first
    /// so the remaining `env.*` keys override that task's defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let task = match pairs.iter().rev().find(|(k, _)| k == "env.task") {
            Some((k, v)) => parse_value::<Task>(k, v)?,
            None => Task::Highway,
        };
        let mut cfg = Self::for_task(task);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.sync_derived();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        set_field(self, key, value)?;
        self.sync_derived();
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in entries(self) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn codec(&self) -> ActionCodec {
        ActionCodec::for_env(&self.env)
    }

    fn sync_derived(&mut self) {
        self.rssm.embed_dim = self.encoder.summary_dim();
        self.rssm.action_dim = self.codec().dim();
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.encoder.validate()?;
        self.rssm.validate()?;
        self.agent.validate()?;
        let r = &self.replay;
        if r.seq_len == 0 || r.batch == 0 || r.capacity < r.seq_len {
            return Err(Error::Config("replay.seq_len and replay.batch must be positive and fit in replay.capacity".into()));
        }
        let s = &self.schedule;
        if s.encoder_batch == 0 || s.collect_interval == 0 || s.updates_per_collect == 0 {
            return Err(Error::Config(
                "schedule.encoder_batch, schedule.collect_interval and schedule.updates_per_collect must be positive".into(),
            ));
        }
        if s.probe_frames < 2 {
            return Err(Error::Config("schedule.probe_frames must be at least 2".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        for task in [Task::Highway, Task::Merge, Task::Roundabout] {
            let cfg = RunConfig::for_task(task);
            assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn task_applies_before_overrides() {
        let cfg = RunConfig::parse("env.time_limit = 50\nenv.task = merge\n# comment\nagent.gamma = 0.99 # trailing").unwrap();
        assert_eq!(cfg.env.task, Task::Merge);
        assert_eq!(cfg.env.time_limit, 50);
        assert_eq!(cfg.env.action_space, ActionSpace::Discrete);
        assert_eq!(cfg.agent.gamma, 0.99);
        assert_eq!(cfg.rssm.action_dim, 5);
        assert_eq!(cfg.rssm.embed_dim, 128);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let e = RunConfig::parse("agent.gama = 0.9").unwrap_err();
        assert!(e.to_string().contains("agent.gama"), "{e}");
        let e = RunConfig::parse("agent.gamma = fast").unwrap_err();
        assert!(e.to_string().contains("agent.gamma"), "{e}");
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("agent.gamma = 1.0").is_err());
    }

    #[test]
    fn derived_dims_follow_encoder() {
        let cfg = RunConfig::parse("encoder.summary = flatten\nencoder.patch_size = 16\nencoder.embed_dim = 8").unwrap();
        assert_eq!(cfg.rssm.embed_dim, 16 * 8);
    }
}
