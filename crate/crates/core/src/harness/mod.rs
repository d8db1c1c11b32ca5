//! Orchestration: configuration, episode loops, training, evaluation, persistence.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod logs;
pub mod train;

use std::borrow::Cow;

use drivewm_nn::{ParamStore, Precision, Shape};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::Agent;
use crate::encoder::{stack_frames, Encoder, EncoderParams};
use crate::envsim::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::replay::{EpisodeRecord, Transition};
use crate::rssm::Rssm;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use evaluate::{evaluate, EvalOptions, EvalPolicy};
pub use train::{train, TrainSummary};

/// Network definitions built from a [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Models {
    pub encoder: Encoder,
    pub rssm: Rssm,
    pub agent: Agent,
}

/// Parameter values of every network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub predictor: ParamStore,
    pub rssm: ParamStore,
    pub actor: ParamStore,
    pub critic: ParamStore,
    /// Per-dimension `mean` and `std` that standardize summaries before the RSSM sees them.
    pub embed_norm: ParamStore,
}

const NORM_MEAN: &str = "mean";
const NORM_STD: &str = "std";

/// Summary standardization that leaves values unchanged.
pub fn identity_norm(dim: usize) -> ParamStore {
    fitted_norm(&vec![0.0; dim], &vec![1.0; dim])
}

pub fn fitted_norm(mean: &[f64], std: &[f64]) -> ParamStore {
    let mut s = ParamStore::new(Precision::F32);
    s.insert(NORM_MEAN, Shape::new(1, mean.len()), mean.to_vec()).expect("fresh store");
    s.insert(NORM_STD, Shape::new(1, std.len()), std.to_vec()).expect("fresh store");
    s
}

/// Per-dimension mean and population std (floored at `1e-3`) of `rows`.
pub fn norm_from_rows(rows: &[Vec<f64>]) -> ParamStore {
    let n = rows.len().max(1) as f64;
    let dim = rows.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-3))
        .collect();
    fitted_norm(&mean, &std)
}

fn standardize(norm: &ParamStore, x: &mut [f64]) -> Result<()> {
    let mean = &norm.get(NORM_MEAN)?.values;
    let std = &norm.get(NORM_STD)?.values;
    if mean.len() != x.len() || std.len() != x.len() {
        return Err(Error::Config(format!("summary width {} does not match its standardization ({})", x.len(), mean.len())));
    }
    for ((v, m), s) in x.iter_mut().zip(mean).zip(std) {
        *v = (*v - m) / s;
    }
    Ok(())
}

impl Models {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let encoder = Encoder::new(cfg.encoder.clone())?;
        let rssm = Rssm::new(cfg.rssm.clone())?;
        let agent = Agent::new(cfg.agent.clone(), cfg.codec(), cfg.rssm.feature_dim())?;
        Ok(Self { encoder, rssm, agent })
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelParams> {
        let EncoderParams { student, teacher, predictor } = self.encoder.init_params(Precision::F32, rng)?;
        Ok(ModelParams {
            student,
            teacher,
            predictor,
            rssm: self.rssm.init_params(Precision::F32, rng)?,
            actor: self.agent.init_actor(Precision::F32, rng)?,
            critic: self.agent.init_critic(Precision::F32, rng)?,
            embed_norm: identity_norm(self.rssm.config().embed_dim),
        })
    }

    /// Check `ckpt` against this configuration and copy its values out.
    pub fn params_from(&self, ckpt: &Checkpoint) -> Result<ModelParams> {
        let template = self.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(ModelParams {
            student: ckpt.restore_into("encoder_student", &template.student)?,
            teacher: ckpt.restore_into("encoder_teacher", &template.teacher)?,
            predictor: ckpt.restore_into("predictor", &template.predictor)?,
            rssm: ckpt.restore_into("rssm", &template.rssm)?,
            actor: ckpt.restore_into("actor", &template.actor)?,
            critic: ckpt.restore_into("critic", &template.critic)?,
            embed_norm: ckpt.restore_into("embed_norm", &template.embed_norm)?,
        })
    }
}

impl ModelParams {
    pub fn checkpoint(&self, step: u64, cfg: &RunConfig) -> Checkpoint {
        let sections = [
            ("encoder_student", &self.student),
            ("encoder_teacher", &self.teacher),
            ("predictor", &self.predictor),
            ("rssm", &self.rssm),
            ("actor", &self.actor),
            ("critic", &self.critic),
            ("embed_norm", &self.embed_norm),
        ]
        .into_iter()
        .map(|(n, s)| (n.to_string(), s.clone()))
        .collect();
        Checkpoint { step, config_text: cfg.to_text(), sections }
    }

    pub fn encoder_params(&self) -> EncoderParams {
        EncoderParams { student: self.student.clone(), teacher: self.teacher.clone(), predictor: self.predictor.clone() }
    }
}

/// Environment seed for the `index`-th episode of a stream.
pub fn episode_seed(stream: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over the combined key.
    let mut z = stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Encoder input for step `t`: the frame itself, or the previous frame stacked on it.
pub fn frame_input(transitions: &[Transition], t: usize, stack: usize) -> Cow<'_, [u8]> {
    let cur = &transitions[t].observation.image;
    if stack == 1 {
        Cow::Borrowed(cur.as_slice())
    } else {
        let prev = &transitions[t.saturating_sub(1)].observation.image;
        Cow::Owned(stack_frames(prev, cur))
    }
}

/// Standardized summaries of `frames` as the RSSM consumes them.
pub fn summarize(models: &Models, params: &ModelParams, frames: &[&[u8]]) -> Result<Vec<Vec<f64>>> {
    let mut out = models.encoder.embed(&params.student, frames)?;
    for x in &mut out {
        standardize(&params.embed_norm, x)?;
    }
    Ok(out)
}

/// Summaries for every frame of an episode, encoded in chunks.
pub fn embed_episode(models: &Models, params: &ModelParams, transitions: &[Transition]) -> Result<Vec<Vec<f64>>> {
    embed_range(models, params, transitions, 0..transitions.len())
}

/// Summaries for frames `range` of an episode; stacking still sees the frame before the range.
pub fn embed_range(
    models: &Models,
    params: &ModelParams,
    transitions: &[Transition],
    range: std::ops::Range<usize>,
) -> Result<Vec<Vec<f64>>> {
    let stack = models.encoder.config().frame_stack;
    let mut out = Vec::with_capacity(range.len());
    for start in range.clone().step_by(64) {
        let end = (start + 64).min(range.end);
        let frames: Vec<Cow<[u8]>> = (start..end).map(|t| frame_input(transitions, t, stack)).collect();
        let refs: Vec<&[u8]> = frames.iter().map(|f| f.as_ref()).collect();
        out.extend(summarize(models, params, &refs)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Driver {
    Random,
    Actor { greedy: bool },
}

/// Result of one environment episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub transitions: Vec<Transition>,
    /// Per-frame summaries when the actor drove (the filter needs them anyway).
    pub embeddings: Option<Vec<Vec<f64>>>,
    pub reward_sum: f64,
    pub collided: bool,
    pub success: bool,
}

impl EpisodeOutcome {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn into_record(self, id: u64) -> Result<EpisodeRecord> {
        EpisodeRecord::new(id, self.transitions)
    }
}

/// Drive one episode with the random policy or the actor behind the encode-filter loop.
pub fn run_episode<R: Rng + ?Sized>(
    models: &Models,
    params: &ModelParams,
    env_cfg: &EnvConfig,
    env_seed: u64,
    driver: Driver,
    rng: &mut R,
    mut on_frame: impl FnMut(&[u8]) -> Result<()>,
) -> Result<EpisodeOutcome> {
    let codec = models.agent.codec();
    if codec.space() != env_cfg.action_space {
        return Err(Error::Config(format!(
            "policy acts in a {} space but the {} environment is {}",
            codec.space(),
            env_cfg.task,
            env_cfg.action_space
        )));
    }
    let (mut env, obs) = Env::reset(env_cfg, env_seed)?;
    on_frame(&obs.image)?;
    let mut transitions = vec![Transition { observation: obs, prev_action: None, reward: 0.0, continue_flag: 1 }];
    let stack = models.encoder.config().frame_stack;
    let mut latent = models.rssm.initial_values(&params.rssm, 1)?;
    let mut prev_enc = codec.none();
    let mut embeddings = Vec::new();
    let (mut reward_sum, mut collided, mut success) = (0.0, false, false);
    loop {
        let action = match driver {
            Driver::Random => codec.random(rng),
            Driver::Actor { greedy } => {
                let t = transitions.len() - 1;
                let frame = frame_input(&transitions, t, stack);
                let x = summarize(models, params, &[frame.as_ref()])?.remove(0);
                latent = models.rssm.filter_step(&params.rssm, &latent, &prev_enc, &x)?;
                embeddings.push(x);
                let (a, enc) = models.agent.act(&params.actor, &latent.feature(0), greedy, rng)?;
                prev_enc = enc;
                a
            }
        };
        let step = env.step(&action)?;
        on_frame(&step.observation.image)?;
        reward_sum += step.reward;
        collided |= step.collided;
        success |= step.success;
        transitions.push(Transition {
            observation: step.observation,
            prev_action: Some(action),
            reward: step.reward,
            continue_flag: if step.terminated { 0 } else { 1 },
        });
        if step.terminated || step.truncated {
            break;
        }
    }
    let embeddings = match driver {
        Driver::Random => None,
        Driver::Actor { .. } => {
            let t = transitions.len() - 1;
            let frame = frame_input(&transitions, t, stack);
            embeddings.push(summarize(models, params, &[frame.as_ref()])?.remove(0));
            Some(embeddings)
        }
    };
    Ok(EpisodeOutcome { transitions, embeddings, reward_sum, collided, success })
}
