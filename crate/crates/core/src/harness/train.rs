//! Sequential collect → update loop.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use drivewm_nn::{Adam, AdamConfig, Shape, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::logs::{self, CsvLog};
use super::{
    embed_episode, embed_range, episode_seed, frame_input, norm_from_rows, run_episode, Driver, ModelParams, Models,
    RunConfig,
};
use crate::agent::{AgentStats, AgentTrainer};
use crate::encoder::{EncoderLossValues, EncoderTrainer};
use crate::error::{Error, Result};
use crate::replay::{ReplayQueue, SequenceRef, Transition};
use crate::rssm::{draw_noise, LatentState, LatentValues, WorldLossValues, WorldTargets};

pub const CHECKPOINT_FILE: &str = "checkpoint.hwck";
pub const CONFIG_FILE: &str = "config.txt";
pub const PLOT_DIR: &str = "plots";

/// Seed-episode collection gives up after this many episodes.
const MAX_SEED_EPISODES: usize = 500;

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub encoder_steps: usize,
    pub world_model_steps: usize,
    pub episodes: u64,
    /// Per-dimension student embedding std over the probe frames.
    pub probe_std: Vec<f64>,
    pub last_world: Option<WorldLossValues>,
    pub last_agent: Option<AgentStats>,
}

impl TrainSummary {
    /// Fraction of embedding dimensions whose probe std reaches `threshold`.
    pub fn probe_fraction_above(&self, threshold: f64) -> f64 {
        self.probe_std.iter().filter(|&&s| s >= threshold).count() as f64 / self.probe_std.len().max(1) as f64
    }
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    train_with_progress(cfg, out, |_| {})
}

/// Run the full schedule, writing logs, the checkpoint, the config and plot series into `out`.
pub fn train_with_progress(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&str)) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let mut run = Run::new(cfg, out)?;

    run.collect_seed_episodes()?;
    progress(&format!("seeded replay with {} episodes", run.replay.num_episodes()));

    let encoder_steps = cfg.schedule.encoder_pretrain_steps;
    run.pretrain_encoder(encoder_steps, &mut progress)?;
    let probe_std = run.write_probe()?;
    run.encoder_log.flush()?;
    if cfg.schedule.standardize_embeddings {
        run.fit_embed_norm()?;
    }

    if !cfg.schedule.encoder_keep_training {
        run.rebuild_cache()?;
    }
    let (mut last_world, mut last_agent) = (None, None);
    let total = cfg.schedule.world_model_steps;
    let mut step = 0;
    while step < total {
        for _ in 0..cfg.schedule.collect_interval {
            run.collect(Driver::Actor { greedy: false }, "train")?;
        }
        for _ in 0..cfg.schedule.updates_per_collect {
            if step == total {
                break;
            }
            let (w, a) = run.update(step as u64)?;
            if (step + 1) % 100 == 0 || step + 1 == total {
                progress(&format!(
                    "update {}/{total}: model_loss {:.4} kl {:.4} actor {:.4} critic {:.4} return {:.3}",
                    step + 1,
                    w.total,
                    w.kl_raw,
                    a.actor_loss,
                    a.critic_loss,
                    a.mean_return
                ));
            }
            last_world = Some(w);
            last_agent = Some(a);
            step += 1;
        }
    }
    run.world_log.flush()?;
    run.agent_log.flush()?;
    run.encoder_log.flush()?;
    run.episode_log.flush()?;

    let checkpoint = out.join(CHECKPOINT_FILE);
    run.params.checkpoint(step as u64, cfg).save(&checkpoint)?;
    if total > 0 || encoder_steps > 0 {
        emit_available_plots(out, &out.join(PLOT_DIR), total > 0, encoder_steps > 0)?;
    }
    Ok(TrainSummary {
        checkpoint,
        encoder_steps,
        world_model_steps: step,
        episodes: run.next_episode,
        probe_std,
        last_world,
        last_agent,
    })
}

fn emit_available_plots(log_dir: &Path, out: &Path, world: bool, encoder: bool) -> Result<()> {
    if world && encoder {
        logs::emit_plots(log_dir, out)?;
    } else {
        // Partial schedules only have some of the curves.
        let keep = if world { logs::WORLD_MODEL_LOG } else { logs::ENCODER_LOG };
        logs::emit_series(log_dir, out, |log| log == keep)?;
    }
    Ok(())
}

struct Run<'a> {
    cfg: &'a RunConfig,
    models: Models,
    params: ModelParams,
    replay: ReplayQueue,
    /// Frozen-encoder summaries per replay episode.
    cache: HashMap<u64, Vec<Vec<f64>>>,
    rng: ChaCha8Rng,
    env_stream: u64,
    next_episode: u64,
    encoder_opt: EncoderTrainer,
    world_opt: Adam,
    agent_opt: AgentTrainer,
    world_log: CsvLog,
    agent_log: CsvLog,
    encoder_log: CsvLog,
    episode_log: CsvLog,
    encoder_step: u64,
    out: &'a Path,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig, out: &'a Path) -> Result<Self> {
        let models = Models::new(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = models.init_params(&mut rng)?;
        let env_stream = rng.random();
        Ok(Self {
            cfg,
            replay: ReplayQueue::new(cfg.replay.capacity, cfg.replay.seq_len)?,
            cache: HashMap::new(),
            env_stream,
            next_episode: 0,
            encoder_opt: EncoderTrainer::new(cfg.encoder.lr),
            world_opt: Adam::new(AdamConfig::with_lr(cfg.rssm.lr)),
            agent_opt: AgentTrainer::new(&cfg.agent),
            world_log: CsvLog::create(&out.join(logs::WORLD_MODEL_LOG), &logs::WORLD_MODEL_COLUMNS)?,
            agent_log: CsvLog::create(&out.join(logs::AGENT_LOG), &logs::AGENT_COLUMNS)?,
            encoder_log: CsvLog::create(&out.join(logs::ENCODER_LOG), &logs::ENCODER_COLUMNS)?,
            episode_log: CsvLog::create(&out.join(logs::EPISODE_LOG), &logs::EPISODE_COLUMNS)?,
            encoder_step: 0,
            models,
            params,
            rng,
            out,
        })
    }

    fn collect(&mut self, driver: Driver, phase: &str) -> Result<usize> {
        let id = self.next_episode;
        self.next_episode += 1;
        let seed = episode_seed(self.env_stream, id);
        let outcome = run_episode(&self.models, &self.params, &self.cfg.env, seed, driver, &mut self.rng, |_| Ok(()))?;
        self.episode_log.row(&[
            id.to_string(),
            phase.to_string(),
            outcome.reward_sum.to_string(),
            (outcome.len() - 1).to_string(),
            u8::from(outcome.collided).to_string(),
            u8::from(outcome.success).to_string(),
        ])?;
        let len = outcome.len();
        let embeddings = outcome.embeddings.clone();
        for evicted in self.replay.append(outcome.into_record(id)?) {
            self.cache.remove(&evicted);
        }
        if let (Some(e), false) = (embeddings, self.cfg.schedule.encoder_keep_training) {
            if self.replay.episode(id).is_some() {
                self.cache.insert(id, e);
            }
        }
        Ok(len)
    }

    /// Random-policy episodes until the schedule count is met, the probe set can be filled
    /// and one episode can fill a window.
    fn collect_seed_episodes(&mut self) -> Result<()> {
        let need_window = self.cfg.schedule.world_model_steps > 0;
        let need_frames = self.cfg.schedule.probe_frames.min(self.cfg.replay.capacity);
        let mut count = 0;
        while count < self.cfg.schedule.seed_episodes.max(1)
            || self.replay.total_transitions() < need_frames
            || (need_window && self.replay.num_eligible() == 0)
        {
            if count == MAX_SEED_EPISODES {
                return Err(Error::EmptyReplay(self.cfg.replay.seq_len));
            }
            self.collect(Driver::Random, "seed")?;
            count += 1;
        }
        Ok(())
    }

    fn all_frames(&self) -> Vec<(u64, usize)> {
        self.replay.episodes().flat_map(|e| (0..e.len()).map(move |t| (e.episode_id, t))).collect()
    }

    fn frames_at(&self, picks: &[(u64, usize)]) -> Vec<Vec<u8>> {
        let stack = self.cfg.encoder.frame_stack;
        picks
            .iter()
            .map(|&(id, t)| {
                let ep = self.replay.episode(id).expect("frame index refers to a live episode");
                frame_input(ep.transitions(), t, stack).into_owned()
            })
            .collect()
    }

    fn encoder_step(&mut self, pool: &[(u64, usize)]) -> Result<EncoderLossValues> {
        let picks: Vec<_> =
            (0..self.cfg.schedule.encoder_batch).map(|_| pool[self.rng.random_range(0..pool.len())]).collect();
        let frames = self.frames_at(&picks);
        let refs: Vec<&[u8]> = frames.iter().map(Vec::as_slice).collect();
        let mut enc = self.params.encoder_params();
        let v = self.encoder_opt.step(&self.models.encoder, &mut enc, &refs, &mut self.rng)?;
        self.params.student = enc.student;
        self.params.teacher = enc.teacher;
        self.params.predictor = enc.predictor;
        self.encoder_log.row(&logs::numeric_row(self.encoder_step, &[v.total, v.align, v.var, v.cov]))?;
        self.encoder_step += 1;
        Ok(v)
    }

    fn pretrain_encoder(&mut self, steps: usize, progress: &mut impl FnMut(&str)) -> Result<()> {
        let pool = self.all_frames();
        for i in 0..steps {
            let v = self.encoder_step(&pool)?;
            if (i + 1) % 100 == 0 || i + 1 == steps {
                progress(&format!("encoder {}/{steps}: total {:.4} align {:.4} var {:.4} cov {:.4}", i + 1, v.total, v.align, v.var, v.cov));
            }
        }
        Ok(())
    }

    fn probe_picks(&self) -> Vec<(u64, usize)> {
        let pool = self.all_frames();
        let n = self.cfg.schedule.probe_frames.min(pool.len());
        (0..n).map(|i| pool[i * pool.len() / n]).collect()
    }

    /// Evenly spaced replay frames, embedded token-wise; writes `dim,std`.
    fn write_probe(&mut self) -> Result<Vec<f64>> {
        let frames = self.frames_at(&self.probe_picks());
        let refs: Vec<&[u8]> = frames.iter().map(Vec::as_slice).collect();
        let std = self.models.encoder.probe_std(&self.params.student, &refs, 32)?;
        let mut log = CsvLog::create(&self.out.join(logs::PROBE_LOG), &["dim", "std"])?;
        for (d, s) in std.iter().enumerate() {
            log.row(&[d.to_string(), s.to_string()])?;
        }
        log.flush()?;
        Ok(std)
    }

    /// Fix the summary standardization from the evenly spaced probe frames.
    fn fit_embed_norm(&mut self) -> Result<()> {
        let frames = self.frames_at(&self.probe_picks());
        let mut rows = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(64) {
            let refs: Vec<&[u8]> = chunk.iter().map(Vec::as_slice).collect();
            rows.extend(self.models.encoder.embed(&self.params.student, &refs)?);
        }
        self.params.embed_norm = norm_from_rows(&rows);
        Ok(())
    }

    fn rebuild_cache(&mut self) -> Result<()> {
        self.cache.clear();
        let ids: Vec<u64> = self.replay.episodes().map(|e| e.episode_id).collect();
        for id in ids {
            let ep = self.replay.episode(id).expect("listed episode is live");
            let e = embed_episode(&self.models, &self.params, ep.transitions())?;
            self.cache.insert(id, e);
        }
        Ok(())
    }

    fn window_embeddings(&self, id: u64, range: std::ops::Range<usize>) -> Result<Vec<Vec<f64>>> {
        if let Some(all) = self.cache.get(&id) {
            return Ok(all[range].to_vec());
        }
        let ep = self.replay.episode(id).ok_or(Error::EmptyReplay(self.cfg.replay.seq_len))?;
        embed_range(&self.models, &self.params, ep.transitions(), range)
    }

    /// One world-model step on a batch of windows, then one actor-critic step from its posteriors.
    fn update(&mut self, step: u64) -> Result<(WorldLossValues, AgentStats)> {
        if self.cfg.schedule.encoder_keep_training {
            let pool = self.all_frames();
            self.encoder_step(&pool)?;
        }
        let (batch, len) = (self.cfg.replay.batch, self.cfg.replay.seq_len);
        let rc = &self.cfg.rssm;
        let codec = self.models.agent.codec();
        let refs = self.replay.sample_sequences(batch, len, &mut self.rng)?;
        let mut embeds = vec![Vec::with_capacity(batch * rc.embed_dim); len];
        let mut actions = vec![Vec::with_capacity(batch * rc.action_dim); len];
        let mut rewards = vec![Vec::with_capacity(batch); len];
        let mut conts = vec![Vec::with_capacity(batch); len];
        let prefix = self.cfg.schedule.prefix_filter;
        let mut prefix_embeds = Vec::with_capacity(refs.len());
        for r in &refs {
            let window: &[Transition] = self.replay.window(r)?;
            let from = if prefix { 0 } else { r.start };
            let mut head = self.window_embeddings(r.episode_id, from..r.start + r.len)?;
            let x = head.split_off(r.start - from);
            prefix_embeds.push(head);
            for (t, tr) in window.iter().enumerate() {
                embeds[t].extend_from_slice(&x[t]);
                match &tr.prev_action {
                    Some(a) => actions[t].extend(codec.encode(a)?),
                    None => actions[t].extend(codec.none()),
                }
                rewards[t].push(tr.reward);
                conts[t].push(f64::from(tr.continue_flag));
            }
        }
        let noise = draw_noise(len, batch, rc.z_dim, &mut self.rng);

        let mut tape = Tape::new();
        let bound = self.params.rssm.bind(&mut tape);
        let place = |tape: &mut Tape, rows: Vec<Vec<f64>>, width: usize| -> Vec<_> {
            rows.into_iter().map(|v| tape.constant(v, Shape::new(batch, width))).collect()
        };
        let embed_vars = place(&mut tape, embeds, rc.embed_dim);
        let action_vars = place(&mut tape, actions, rc.action_dim);
        let targets = WorldTargets {
            embeds: embed_vars.clone(),
            rewards: place(&mut tape, rewards, 1),
            continues: place(&mut tape, conts, 1),
        };
        let mut start = self.models.rssm.initial_state(&mut tape, &bound, batch)?;
        if refs.iter().any(|r| r.start > 0) && prefix {
            start = self.prefix_states(&mut tape, start, &refs, &prefix_embeds)?;
        }
        let seq = self.models.rssm.observe_sequence(&mut tape, &bound, &embed_vars, &action_vars, start, &noise)?;
        let losses = self.models.rssm.loss_world(&mut tape, &seq, &targets)?;
        let world = WorldLossValues::read(&tape, &losses)?;
        let starts = self.imagination_starts(&tape, &seq.steps.iter().map(|s| s.state()).collect::<Vec<_>>());
        let grads = tape.backward(losses.total);
        self.params.rssm.accumulate(&bound, &grads);
        self.world_opt.step(&mut self.params.rssm)?;

        let agent = self.agent_opt.update(
            &self.models.agent,
            &self.models.rssm,
            &self.params.rssm,
            &mut self.params.actor,
            &mut self.params.critic,
            &starts,
            &mut self.rng,
        )?;
        self.world_log.row(&logs::numeric_row(
            step,
            &[
                world.total,
                world.pred,
                world.embed_loss,
                world.reward_loss,
                world.cont_loss,
                world.dyn_loss,
                world.rep_loss,
                world.kl_raw,
            ],
        ))?;
        self.agent_log.row(&logs::numeric_row(
            step,
            &[agent.actor_loss, agent.critic_loss, agent.mean_entropy, agent.mean_advantage, agent.mean_return],
        ))?;
        Ok((world, agent))
    }

    /// Initial state for each window: the posterior mode filtered over the episode's
    /// earlier transitions, as when acting. Windows at offset 0 keep `init`.
    fn prefix_states(
        &self,
        tape: &mut Tape,
        init: LatentState,
        refs: &[SequenceRef],
        prefix_embeds: &[Vec<Vec<f64>>],
    ) -> Result<LatentState> {
        let codec = self.models.agent.codec();
        let (hd, zd) = (self.cfg.rssm.h_dim, self.cfg.rssm.z_dim);
        let LatentValues { mut h, mut z, .. } = LatentValues::read(tape, init);
        let deepest = refs.iter().map(|r| r.start).max().unwrap_or(0);
        for t in 0..deepest {
            let active: Vec<usize> = (0..refs.len()).filter(|&i| refs[i].start > t).collect();
            let mut prev = LatentValues { batch: active.len(), h: Vec::new(), z: Vec::new() };
            let (mut actions, mut x) = (Vec::new(), Vec::new());
            for &i in &active {
                prev.h.extend_from_slice(&h[i * hd..(i + 1) * hd]);
                prev.z.extend_from_slice(&z[i * zd..(i + 1) * zd]);
                let ep = self.replay.episode(refs[i].episode_id).ok_or(Error::EmptyReplay(self.cfg.replay.seq_len))?;
                match &ep.transitions()[t].prev_action {
                    Some(a) => actions.extend(codec.encode(a)?),
                    None => actions.extend(codec.none()),
                }
                x.extend_from_slice(&prefix_embeds[i][t]);
            }
            let next = self.models.rssm.filter_step(&self.params.rssm, &prev, &actions, &x)?;
            for (k, &i) in active.iter().enumerate() {
                h[i * hd..(i + 1) * hd].copy_from_slice(&next.h[k * hd..(k + 1) * hd]);
                z[i * zd..(i + 1) * zd].copy_from_slice(&next.z[k * zd..(k + 1) * zd]);
            }
        }
        let rows = refs.len();
        let z = tape.constant(z, Shape::new(rows, zd));
        if !self.cfg.rssm.learned_init {
            return Ok(LatentState { h: tape.constant(h, Shape::new(rows, hd)), z });
        }
        // Offset-0 rows keep the learned initial state on the tape.
        let keep: Vec<f64> = refs.iter().flat_map(|r| vec![f64::from(u8::from(r.start == 0)); hd]).collect();
        for (i, r) in refs.iter().enumerate() {
            if r.start == 0 {
                h[i * hd..(i + 1) * hd].fill(0.0);
            }
        }
        let keep = tape.constant(keep, Shape::new(rows, hd));
        let kept = tape.mul(init.h, keep);
        let filtered = tape.constant(h, Shape::new(rows, hd));
        Ok(LatentState { h: tape.add(kept, filtered), z })
    }

    /// Posterior states of every (step, row), optionally subsampled.
    fn imagination_starts(&mut self, tape: &Tape, states: &[crate::rssm::LatentState]) -> LatentValues {
        let per: Vec<LatentValues> = states.iter().map(|&s| LatentValues::read(tape, s)).collect();
        let rows = per[0].batch;
        let (hd, zd) = (per[0].h.len() / rows, per[0].z.len() / rows);
        let total = rows * per.len();
        let cap = self.cfg.schedule.imagination_starts;
        let mut picks: Vec<usize> = if cap == 0 || cap >= total {
            (0..total).collect()
        } else {
            rand::seq::index::sample(&mut self.rng, total, cap).into_vec()
        };
        picks.sort_unstable();
        let mut out = LatentValues { batch: picks.len(), h: Vec::new(), z: Vec::new() };
        for i in picks {
            let (t, r) = (i / rows, i % rows);
            out.h.extend_from_slice(&per[t].h[r * hd..(r + 1) * hd]);
            out.z.extend_from_slice(&per[t].z[r * zd..(r + 1) * zd]);
        }
        out
    }
}

/// Parameter stores restored only from what a run produced.
pub fn load_params(models: &Models, path: &Path) -> Result<(ModelParams, u64)> {
    let ckpt = super::Checkpoint::load(path)?;
    Ok((models.params_from(&ckpt)?, ckpt.step))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::parse(
            "env.vehicle_count = 4\nenv.time_limit = 20\n\
             encoder.patch_size = 16\nencoder.embed_dim = 8\nencoder.stem_channels = 4\nencoder.merge_channels = 8\n\
             encoder.bottleneck_hidden = 8\nencoder.predictor_hidden = 8\n\
             rssm.h_dim = 8\nrssm.z_dim = 4\nrssm.hidden = 8\nagent.hidden = 8\nagent.horizon = 3\n\
             replay.seq_len = 4\nreplay.batch = 2\n\
             schedule.seed_episodes = 2\nschedule.encoder_pretrain_steps = 3\nschedule.encoder_batch = 2\n\
             schedule.world_model_steps = 4\nschedule.updates_per_collect = 2\nschedule.probe_frames = 8",
        )
        .unwrap();
        cfg.seed = seed;
        cfg
    }

    #[test]
    fn writes_logs_checkpoint_and_series() {
        let dir = tempfile::tempdir().unwrap();
        let s = train(&tiny(1), dir.path()).unwrap();
        assert_eq!(s.world_model_steps, 4);
        assert_eq!(s.probe_std.len(), 8);
        let eps = logs::Table::read(&dir.path().join(logs::EPISODE_LOG)).unwrap();
        let seed_frames: usize =
            eps.rows.iter().filter(|r| r[1] == "seed").map(|r| r[3].parse::<usize>().unwrap() + 1).sum();
        assert!(seed_frames >= 8);
        // One training episode before each pair of updates.
        assert_eq!(eps.rows.iter().filter(|r| r[1] == "train").count(), 2);
        assert_eq!(s.episodes as usize, eps.rows.len());
        let wm = logs::Table::read(&dir.path().join(logs::WORLD_MODEL_LOG)).unwrap();
        assert_eq!(wm.rows.len(), 4);
        let enc = logs::Table::read(&dir.path().join(logs::ENCODER_LOG)).unwrap();
        assert_eq!(enc.rows.len(), 3);
        for (stem, _, _) in logs::SERIES {
            assert!(dir.path().join(PLOT_DIR).join(format!("{stem}.csv")).exists(), "{stem}");
        }
        let ckpt = super::super::Checkpoint::load(&s.checkpoint).unwrap();
        assert_eq!(ckpt.step, 4);
        assert_eq!(RunConfig::parse(&ckpt.config_text).unwrap(), tiny(1));
    }

    #[test]
    fn zero_world_model_steps_keeps_initial_agent_params() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(2);
        cfg.schedule.world_model_steps = 0;
        let s = train(&cfg, dir.path()).unwrap();
        let models = Models::new(&cfg).unwrap();
        let init = models.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        let (trained, step) = load_params(&models, &s.checkpoint).unwrap();
        assert_eq!(step, 0);
        assert_eq!(trained.rssm, init.rssm);
        assert_eq!(trained.actor, init.actor);
        assert_eq!(trained.critic, init.critic);
        assert_ne!(trained.student, init.student);
    }

    #[test]
    fn keep_training_updates_encoder_during_world_model_phase() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(3);
        cfg.schedule.encoder_keep_training = true;
        train(&cfg, dir.path()).unwrap();
        let enc = logs::Table::read(&dir.path().join(logs::ENCODER_LOG)).unwrap();
        assert_eq!(enc.rows.len(), 3 + 4);
    }

    #[test]
    fn subsampled_starts_train() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(4);
        cfg.schedule.imagination_starts = 3;
        assert!(train(&cfg, dir.path()).unwrap().last_agent.is_some());
    }

    #[test]
    fn prefix_states_match_acting_filter() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(5);
        cfg.rssm.learned_init = true;
        let mut run = Run::new(&cfg, dir.path()).unwrap();
        run.collect_seed_episodes().unwrap();
        run.rebuild_cache().unwrap();
        let ep = run.replay.episodes().max_by_key(|e| e.len()).unwrap();
        let (id, len) = (ep.episode_id, ep.len());
        assert!(len >= 5, "longest seed episode has {len} transitions");
        let deep = len - 4;
        let refs = [SequenceRef { episode_id: id, start: 0, len: 4 }, SequenceRef { episode_id: id, start: deep, len: 4 }];
        let embeds = &run.cache[&id];
        let prefixes = vec![Vec::new(), embeds[..deep].to_vec()];

        let mut tape = Tape::new();
        let bound = run.params.rssm.bind(&mut tape);
        let init = run.models.rssm.initial_state(&mut tape, &bound, 2).unwrap();
        let start = run.prefix_states(&mut tape, init, &refs, &prefixes).unwrap();
        let got = LatentValues::read(&tape, start);

        let codec = run.models.agent.codec();
        let transitions = run.replay.episode(id).unwrap().transitions();
        let mut want = run.models.rssm.initial_values(&run.params.rssm, 1).unwrap();
        assert_eq!(got.h[..cfg.rssm.h_dim], want.h[..]);
        for t in 0..deep {
            let a = transitions[t].prev_action.as_ref().map_or_else(|| codec.none(), |a| codec.encode(a).unwrap());
            want = run.models.rssm.filter_step(&run.params.rssm, &want, &a, &embeds[t]).unwrap();
        }
        assert_eq!(got.h[cfg.rssm.h_dim..], want.h[..]);
        assert_eq!(got.z[cfg.rssm.z_dim..], want.z[..]);

        // The offset-0 row still trains the learned initial state.
        let loss = tape.sum(start.h);
        let grads = tape.backward(loss);
        let mut store = run.params.rssm.clone();
        store.accumulate(&bound, &grads);
        assert!(store.grad_norm() > 0.0);
    }
}
