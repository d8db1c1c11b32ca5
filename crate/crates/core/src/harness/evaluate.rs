//! Evaluation episodes and frame dumps from a saved checkpoint.

use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{episode_seed, run_episode, Checkpoint, Driver, ModelParams, Models, RunConfig};
use crate::envsim::{write_ppm, EnvConfig, Task};
use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, EvalReport};

/// Keeps evaluation episode seeds apart from training streams with the same seed.
const EVAL_STREAM: u64 = 0x5EED_E7A1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalPolicy {
    Actor,
    Random,
}

impl FromStr for EvalPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "actor" => Ok(Self::Actor),
            "random" => Ok(Self::Random),
            _ => Err(Error::Usage(format!("unknown policy `{s}` (expected actor or random)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub task: Task,
    pub episodes: usize,
    pub seed: u64,
    pub policy: EvalPolicy,
    /// Act with the policy mode instead of sampling.
    pub greedy: bool,
}

/// A checkpoint's configuration, networks and values.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub models: Models,
    pub params: ModelParams,
}

impl Loaded {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::parse(&ckpt.config_text)?;
        let models = Models::new(&config)?;
        let params = models.params_from(ckpt)?;
        Ok(Self { config, models, params })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// The training environment when the task matches, otherwise that task's defaults.
    pub fn env_for(&self, task: Task) -> Result<EnvConfig> {
        let env = if task == self.config.env.task { self.config.env.clone() } else { EnvConfig::for_task(task) };
        let space = self.models.agent.codec().space();
        if space != env.action_space {
            return Err(Error::Config(format!(
                "checkpoint policy uses a {space} action space but {task} is configured as {}",
                env.action_space
            )));
        }
        Ok(env)
    }
}

pub fn evaluate(ckpt: &Checkpoint, opts: &EvalOptions) -> Result<(EvalReport, Vec<EvalRecord>)> {
    if opts.episodes == 0 {
        return Err(Error::Usage("need at least one evaluation episode".into()));
    }
    let loaded = Loaded::from_checkpoint(ckpt)?;
    let env = loaded.env_for(opts.task)?;
    let driver = match opts.policy {
        EvalPolicy::Actor => Driver::Actor { greedy: opts.greedy },
        EvalPolicy::Random => Driver::Random,
    };
    let records = (0..opts.episodes as u64)
        .map(|k| {
            let seed = episode_seed(EVAL_STREAM ^ opts.seed, k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = run_episode(&loaded.models, &loaded.params, &env, seed, driver, &mut rng, |_| Ok(()))?;
            Ok(EvalRecord { episode_id: k, reward_sum: out.reward_sum, collided: out.collided, length: out.len() - 1 })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_records(&opts.task.to_string(), &records)?;
    Ok((report, records))
}

/// Write `report.csv` and `report.txt` into `out`.
pub fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    std::fs::write(out.join("report.txt"), report.to_table())?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RolloutSummary {
    pub frames: usize,
    pub episodes: u64,
}

/// Drive the greedy actor for `steps` environment steps, resetting after each episode end,
/// and dump every observed frame (reset frames included) as a PPM.
pub fn rollout(ckpt: &Checkpoint, task: Task, steps: usize, seed: u64, frames_dir: &Path) -> Result<RolloutSummary> {
    let loaded = Loaded::from_checkpoint(ckpt)?;
    let env = loaded.env_for(task)?;
    std::fs::create_dir_all(frames_dir)?;
    let (mut frames, mut taken, mut episodes) = (0, 0, 0);
    while taken < steps {
        let ep_seed = episode_seed(EVAL_STREAM ^ seed, episodes);
        let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
        let mut short_env = env.clone();
        short_env.time_limit = short_env.time_limit.min(steps - taken);
        let out = run_episode(&loaded.models, &loaded.params, &short_env, ep_seed, Driver::Actor { greedy: true }, &mut rng, |img| {
            write_ppm(&frames_dir.join(format!("frame_{frames:05}.ppm")), img)?;
            frames += 1;
            Ok(())
        })?;
        taken += out.len() - 1;
        episodes += 1;
    }
    Ok(RolloutSummary { frames, episodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::{train, CHECKPOINT_FILE};

    fn trained() -> (tempfile::TempDir, Checkpoint) {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::parse(
            "env.vehicle_count = 4\nenv.time_limit = 15\n\
             encoder.patch_size = 16\nencoder.embed_dim = 8\nencoder.stem_channels = 4\nencoder.merge_channels = 8\n\
             encoder.bottleneck_hidden = 8\nencoder.predictor_hidden = 8\n\
             rssm.h_dim = 8\nrssm.z_dim = 4\nrssm.hidden = 8\nagent.hidden = 8\nagent.horizon = 2\n\
             replay.seq_len = 3\nreplay.batch = 2\nschedule.seed_episodes = 1\nschedule.encoder_pretrain_steps = 1\n\
             schedule.encoder_batch = 2\nschedule.world_model_steps = 1\nschedule.probe_frames = 4",
        )
        .unwrap();
        cfg.seed = 9;
        train(&cfg, dir.path()).unwrap();
        let ckpt = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        (dir, ckpt)
    }

    #[test]
    fn report_is_reproducible_and_bounded() {
        let (_dir, ckpt) = trained();
        for policy in [EvalPolicy::Actor, EvalPolicy::Random] {
            let opts = EvalOptions { task: Task::Highway, episodes: 3, seed: 1, policy, greedy: true };
            let (a, recs) = evaluate(&ckpt, &opts).unwrap();
            let (b, _) = evaluate(&ckpt, &opts).unwrap();
            assert_eq!(a, b);
            assert_eq!(recs.len(), 3);
            assert!((0.0..=1.0).contains(&a.get("collision_rate").unwrap().value.mean));
        }
    }

    #[test]
    fn mismatched_action_space_is_rejected() {
        let (_dir, ckpt) = trained();
        let opts = EvalOptions { task: Task::Merge, episodes: 1, seed: 0, policy: EvalPolicy::Actor, greedy: true };
        assert!(matches!(evaluate(&ckpt, &opts), Err(Error::Config(_))));
        let opts = EvalOptions { episodes: 0, task: Task::Highway, ..opts };
        assert!(evaluate(&ckpt, &opts).is_err());
    }

    #[test]
    fn rollout_dumps_requested_frames() {
        let (dir, ckpt) = trained();
        let frames = dir.path().join("frames");
        let s = rollout(&ckpt, Task::Highway, 20, 0, &frames).unwrap();
        assert_eq!(s.frames, 20 + s.episodes as usize);
        assert_eq!(std::fs::read_dir(&frames).unwrap().count(), s.frames);
        let first = std::fs::read(frames.join("frame_00000.ppm")).unwrap();
        assert!(first.starts_with(b"P6\n64 64\n255\n"));
    }
}
