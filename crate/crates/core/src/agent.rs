//! Actor-critic trained on imagined latent rollouts.

use drivewm_nn::{
    Activation, Adam, AdamConfig, Bound, DistributionSpec, LogStdRange, Mlp, ParamStore, Precision, Shape,
    Tape, Var,
};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::envsim::{Action, ActionSpace, EnvConfig, MetaAction};
use crate::error::{Error, Result};
use crate::rssm::{draw_noise, LatentValues, Rssm};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Maps environment actions to the vectors the world model and policy see.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActionCodec {
    /// Normalized `[accel, steer] ∈ [−1, 1]²`, scaled by `limits` in the environment.
    Continuous { limits: [f64; 2] },
    /// One-hot over the meta-actions.
    Discrete,
}

impl ActionCodec {
    pub fn for_env(cfg: &EnvConfig) -> Self {
        match cfg.action_space {
            ActionSpace::Continuous => Self::Continuous { limits: [cfg.accel_limit, cfg.steer_limit] },
            ActionSpace::Discrete => Self::Discrete,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Continuous { .. } => 2,
            Self::Discrete => MetaAction::COUNT,
        }
    }

    pub fn space(&self) -> ActionSpace {
        match self {
            Self::Continuous { .. } => ActionSpace::Continuous,
            Self::Discrete => ActionSpace::Discrete,
        }
    }

    /// Vector used in place of the action preceding an episode's first frame.
    pub fn none(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    pub fn encode(&self, action: &Action) -> Result<Vec<f64>> {
        match (self, action) {
            (Self::Continuous { limits }, Action::Continuous { accel, steer }) => {
                Ok(vec![(accel / limits[0]).clamp(-1.0, 1.0), (steer / limits[1]).clamp(-1.0, 1.0)])
            }
            (Self::Discrete, Action::Meta(m)) => {
                let mut v = vec![0.0; MetaAction::COUNT];
                v[*m as usize] = 1.0;
                Ok(v)
            }
            _ => Err(Error::Config(format!("action {action:?} does not match a {:?} policy", self.space()))),
        }
    }

    pub fn decode(&self, encoded: &[f64]) -> Action {
        match self {
            Self::Continuous { limits } => {
                Action::Continuous { accel: encoded[0] * limits[0], steer: encoded[1] * limits[1] }
            }
            Self::Discrete => {
                let k = argmax(encoded);
                Action::Meta(MetaAction::from_index(k).expect("one-hot width"))
            }
        }
    }

    /// Uniform draw over the action bounds or the meta-actions.
    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        match self {
            Self::Continuous { limits } => Action::Continuous {
                accel: rng.random_range(-limits[0]..=limits[0]),
                steer: rng.random_range(-limits[1]..=limits[1]),
            },
            Self::Discrete => Action::Meta(MetaAction::ALL[rng.random_range(0..MetaAction::COUNT)]),
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (k, &x)| if x > b.1 { (k, x) } else { b }).0
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_beta: f64,
    pub hidden: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Scale each step's loss by the product of imagined continue probabilities.
    pub continuation_weighting: bool,
    pub normalize_advantages: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            gamma: 0.997,
            lambda: 0.95,
            entropy_beta: 3e-4,
            hidden: 256,
            actor_lr: 8e-5,
            critic_lr: 8e-5,
            continuation_weighting: true,
            normalize_advantages: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.hidden == 0 {
            return Err(Error::Config("agent.horizon and agent.hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("agent.gamma {} outside [0, 1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("agent.lambda {} outside [0, 1]", self.lambda)));
        }
        if self.entropy_beta < 0.0 || self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return Err(Error::Config("agent.entropy_beta must be ≥ 0 and learning rates positive".into()));
        }
        Ok(())
    }
}

/// Backward λ-return recursion with bootstrap `G_H = V_H`.
///
/// `rewards` and `continues` hold steps 1..=H, `values` steps 0..=H; returns `G_0..G_{H−1}`.
pub fn lambda_returns(rewards: &[f64], continues: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let h = rewards.len();
    if continues.len() != h || values.len() != h + 1 {
        return Err(Error::Usage(format!(
            "lambda_returns: {h} rewards, {} continues, {} values",
            continues.len(),
            values.len()
        )));
    }
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        next = rewards[t] + gamma * continues[t] * ((1.0 - lambda) * values[t + 1] + lambda * next);
        out[t] = next;
    }
    Ok(out)
}

/// `Σ_k γ^k r_k`.
pub fn episode_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, &r| r + gamma * acc)
}

/// Mean of `0.5·(G − V)² + 0.5·ln 2π`, optionally weighted per row; targets are detached.
pub fn critic_loss(tape: &mut Tape, values: Var, targets: Var, weights: Option<Var>) -> Result<Var> {
    let (sv, st) = (tape.shape(values), tape.shape(targets));
    if sv != st || sv.cols != 1 {
        return Err(Error::Usage(format!("critic_loss: values {sv} vs targets {st}")));
    }
    let g = tape.stop_gradient(targets);
    let d = tape.sub(g, values);
    let sq = tape.square(d);
    let nll = tape.affine(sq, 0.5, HALF_LN_2PI);
    Ok(weighted_mean(tape, nll, weights))
}

/// `−mean(log π·sg(A) + β·H)`, optionally weighted per row.
pub fn actor_loss(
    tape: &mut Tape,
    log_probs: Var,
    advantages: Var,
    entropies: Var,
    beta: f64,
    weights: Option<Var>,
) -> Result<Var> {
    let (sl, sa, se) = (tape.shape(log_probs), tape.shape(advantages), tape.shape(entropies));
    if sl != sa || sl != se || sl.cols != 1 {
        return Err(Error::Usage(format!("actor_loss: log-probs {sl}, advantages {sa}, entropies {se}")));
    }
    let a = tape.stop_gradient(advantages);
    let pg = tape.mul(log_probs, a);
    let ent = tape.scale(entropies, beta);
    let obj = tape.add(pg, ent);
    let m = weighted_mean(tape, obj, weights);
    Ok(tape.scale(m, -1.0))
}

fn weighted_mean(tape: &mut Tape, x: Var, weights: Option<Var>) -> Var {
    let x = match weights {
        Some(w) => {
            let w = tape.stop_gradient(w);
            tape.mul(x, w)
        }
        None => x,
    };
    tape.mean(x)
}

/// A sampled or greedy action for a batch of features.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionBatch {
    /// World-model inputs, `rows × codec.dim()`.
    pub encoded: Vec<f64>,
    /// Values whose log-probability the actor is trained on: pre-squash samples or one-hot rows.
    pub taken: Vec<f64>,
}

/// Imagined rollout from flattened posterior start states.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImaginedTrajectory {
    /// Starts in this rollout.
    pub batch: usize,
    /// `features[t]` is `batch × feature_dim` for t = 0..=H.
    pub features: Vec<Vec<f64>>,
    pub actions: Vec<ActionBatch>,
    /// Steps 1..=H.
    pub rewards: Vec<Vec<f64>>,
    pub continues: Vec<Vec<f64>>,
    /// Steps 0..=H.
    pub values: Vec<Vec<f64>>,
    /// `G_0..G_{H−1}`.
    pub returns: Vec<Vec<f64>>,
    /// Loss weight per step 0..H−1.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AgentStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub mean_entropy: f64,
    pub mean_advantage: f64,
    pub mean_return: f64,
}

#[derive(Clone, Debug)]
pub struct Agent {
    cfg: AgentConfig,
    codec: ActionCodec,
    feature_dim: usize,
    actor: Mlp,
    critic: Mlp,
}

impl Agent {
    pub fn new(cfg: AgentConfig, codec: ActionCodec, feature_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let out = match codec {
            ActionCodec::Continuous { .. } => 2 * codec.dim(),
            ActionCodec::Discrete => codec.dim(),
        };
        let w = cfg.hidden;
        Ok(Self {
            actor: Mlp::new("actor", &[feature_dim, w, w, out], Activation::Silu, Activation::Identity),
            critic: Mlp::new("critic", &[feature_dim, w, w, 1], Activation::Silu, Activation::Identity),
            cfg,
            codec,
            feature_dim,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn codec(&self) -> ActionCodec {
        self.codec
    }

    pub fn init_actor<R: Rng + ?Sized>(&self, precision: Precision, rng: &mut R) -> Result<ParamStore> {
        let mut s = ParamStore::new(precision);
        self.actor.register(&mut s, 0.1, rng)?;
        Ok(s)
    }

    pub fn init_critic<R: Rng + ?Sized>(&self, precision: Precision, rng: &mut R) -> Result<ParamStore> {
        let mut s = ParamStore::new(precision);
        self.critic.register(&mut s, 0.0, rng)?;
        Ok(s)
    }

    fn check_features(&self, tape: &Tape, f: Var) -> Result<()> {
        let s = tape.shape(f);
        if s.cols != self.feature_dim {
            return Err(Error::Config(format!("feature width {} vs agent input {}", s.cols, self.feature_dim)));
        }
        Ok(())
    }

    /// Pre-squash Gaussian for continuous control, categorical for meta-actions.
    pub fn policy(&self, tape: &mut Tape, actor: &Bound, features: Var) -> Result<DistributionSpec> {
        self.check_features(tape, features)?;
        let head = self.actor.forward(tape, actor, features)?;
        Ok(match self.codec {
            ActionCodec::Continuous { .. } => DistributionSpec::gaussian_from_head(tape, head, LogStdRange::default())?,
            ActionCodec::Discrete => DistributionSpec::categorical(tape, head),
        })
    }

    /// Value mean, `rows × 1`.
    pub fn value(&self, tape: &mut Tape, critic: &Bound, features: Var) -> Result<Var> {
        self.check_features(tape, features)?;
        Ok(self.critic.forward(tape, critic, features)?)
    }

    /// Log-density of `taken` under `policy`, including the tanh and bound scaling
    /// change of variables for continuous actions; `rows × 1`.
    pub fn log_prob(&self, tape: &mut Tape, policy: &DistributionSpec, taken: Var) -> Result<Var> {
        let lp = policy.log_prob(tape, taken)?;
        match self.codec {
            ActionCodec::Discrete => Ok(lp),
            ActionCodec::Continuous { limits } => {
                let s = tape.shape(taken);
                let corr: Vec<f64> = tape
                    .value(taken)
                    .chunks_exact(s.cols)
                    .map(|row| row.iter().zip(limits).map(|(&u, l)| log_one_minus_tanh_sq(u) + l.ln()).sum())
                    .collect();
                let corr = tape.constant(corr, Shape::new(s.rows, 1));
                Ok(tape.sub(lp, corr))
            }
        }
    }

    /// Draw from `policy` (or take its mode) as constants on `tape`.
    pub fn select<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        policy: &DistributionSpec,
        greedy: bool,
        rng: &mut R,
    ) -> Result<ActionBatch> {
        match self.codec {
            ActionCodec::Continuous { .. } => {
                let u: Vec<f64> = match *policy {
                    DistributionSpec::DiagGaussian { mean, log_std } => {
                        let (m, ls) = (tape.value(mean), tape.value(log_std));
                        if greedy {
                            m.to_vec()
                        } else {
                            m.iter().zip(ls).map(|(&m, &l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal)).collect()
                        }
                    }
                    _ => return Err(Error::Config("continuous codec with a non-Gaussian policy".into())),
                };
                Ok(ActionBatch { encoded: u.iter().map(|v| v.tanh()).collect(), taken: u })
            }
            ActionCodec::Discrete => {
                let oh = if greedy { policy.mode(tape) } else { policy.sample(tape, rng) };
                let v = tape.value(oh).to_vec();
                Ok(ActionBatch { encoded: v.clone(), taken: v })
            }
        }
    }

    /// Act in the environment from a single feature vector.
    pub fn act<R: Rng + ?Sized>(
        &self,
        actor: &ParamStore,
        feature: &[f64],
        greedy: bool,
        rng: &mut R,
    ) -> Result<(Action, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = actor.bind_frozen(&mut tape);
        let f = tape.constant(feature.to_vec(), Shape::new(1, feature.len()));
        let pi = self.policy(&mut tape, &bound, f)?;
        let a = self.select(&mut tape, &pi, greedy, rng)?;
        Ok((self.codec.decode(&a.encoded), a.encoded))
    }

    /// Roll the world model forward `horizon` steps under the current actor from `starts`.
    pub fn imagine_rollout<R: Rng + ?Sized>(
        &self,
        world: &Rssm,
        world_params: &ParamStore,
        actor: &ParamStore,
        critic: &ParamStore,
        starts: &LatentValues,
        rng: &mut R,
    ) -> Result<ImaginedTrajectory> {
        let n = starts.batch;
        let wc = world.config();
        let fd = wc.feature_dim();
        let mut traj = ImaginedTrajectory { batch: n, ..Default::default() };
        let mut state = starts.clone();
        for t in 0..=self.cfg.horizon {
            let mut tape = Tape::new();
            let wb = world_params.bind_frozen(&mut tape);
            let ab = actor.bind_frozen(&mut tape);
            let cb = critic.bind_frozen(&mut tape);
            let s = state.place(&mut tape, wc);
            let f = world.feature(&mut tape, s);
            traj.features.push(tape.value(f).to_vec());
            let v = self.value(&mut tape, &cb, f)?;
            traj.values.push(tape.value(v).to_vec());
            if t == self.cfg.horizon {
                break;
            }
            let pi = self.policy(&mut tape, &ab, f)?;
            let act = self.select(&mut tape, &pi, false, rng)?;
            let a = tape.constant(act.encoded.clone(), Shape::new(n, self.codec.dim()));
            let noise = draw_noise(1, n, wc.z_dim, rng).remove(0);
            let (next, r, c) = world.imagine_step(&mut tape, &wb, s, a, noise)?;
            traj.actions.push(act);
            traj.rewards.push(tape.value(r).to_vec());
            traj.continues.push(tape.value(c).to_vec());
            state = LatentValues::read(&tape, next);
        }
        debug_assert!(traj.features.iter().all(|f| f.len() == n * fd));
        self.finish_trajectory(&mut traj)?;
        Ok(traj)
    }

    /// Fill returns and weights from rewards, continues and values.
    pub fn finish_trajectory(&self, traj: &mut ImaginedTrajectory) -> Result<()> {
        let h = traj.rewards.len();
        let n = traj.batch;
        traj.returns = vec![vec![0.0; n]; h];
        traj.weights = vec![vec![1.0; n]; h];
        for i in 0..n {
            let r: Vec<f64> = traj.rewards.iter().map(|s| s[i]).collect();
            let c: Vec<f64> = traj.continues.iter().map(|s| s[i]).collect();
            let v: Vec<f64> = traj.values.iter().map(|s| s[i]).collect();
            let g = lambda_returns(&r, &c, &v, self.cfg.gamma, self.cfg.lambda)?;
            let mut w = 1.0;
            for t in 0..h {
                traj.returns[t][i] = g[t];
                if self.cfg.continuation_weighting {
                    traj.weights[t][i] = w;
                    w *= c[t];
                }
            }
        }
        let finite = |v: &Vec<Vec<f64>>| v.iter().flatten().all(|x| x.is_finite());
        if !(finite(&traj.features) && finite(&traj.rewards) && finite(&traj.values) && finite(&traj.returns)) {
            return Err(Error::Numeric("imagined trajectory contains non-finite values".into()));
        }
        Ok(())
    }

    /// Stack steps 0..H−1 of a per-step field into one `H·batch × width` constant.
    fn stack(tape: &mut Tape, rows: &[Vec<f64>], width: usize) -> Var {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let n = data.len() / width;
        tape.constant(data, Shape::new(n, width))
    }

    fn advantages(&self, traj: &ImaginedTrajectory) -> Vec<f64> {
        let h = traj.returns.len();
        let mut adv: Vec<f64> =
            (0..h).flat_map(|t| traj.returns[t].iter().zip(&traj.values[t]).map(|(g, v)| g - v)).collect();
        if self.cfg.normalize_advantages && adv.len() > 1 {
            let m = adv.iter().sum::<f64>() / adv.len() as f64;
            let sd = (adv.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (adv.len() - 1) as f64).sqrt();
            adv.iter_mut().for_each(|a| *a = (*a - m) / (sd + 1e-8));
        }
        adv
    }

    /// Critic loss over steps 0..H−1 on a fresh tape position.
    pub fn critic_objective(&self, tape: &mut Tape, critic: &Bound, traj: &ImaginedTrajectory) -> Result<Var> {
        let h = traj.returns.len();
        let f = Self::stack(tape, &traj.features[..h], self.feature_dim);
        let v = self.value(tape, critic, f)?;
        let g = Self::stack(tape, &traj.returns, 1);
        let w = self.cfg.continuation_weighting.then(|| Self::stack(tape, &traj.weights, 1));
        critic_loss(tape, v, g, w)
    }

    /// Actor loss with entropy and advantage means.
    pub fn actor_objective(&self, tape: &mut Tape, actor: &Bound, traj: &ImaginedTrajectory) -> Result<(Var, Var, Var)> {
        let h = traj.returns.len();
        let f = Self::stack(tape, &traj.features[..h], self.feature_dim);
        let pi = self.policy(tape, actor, f)?;
        let width = match self.codec {
            ActionCodec::Continuous { .. } => 2,
            ActionCodec::Discrete => MetaAction::COUNT,
        };
        let taken: Vec<Vec<f64>> = traj.actions.iter().map(|a| a.taken.clone()).collect();
        let taken = Self::stack(tape, &taken, width);
        let lp = self.log_prob(tape, &pi, taken)?;
        let ent = pi.entropy(tape);
        let rows = tape.shape(lp).rows;
        let adv = tape.constant(self.advantages(traj), Shape::new(rows, 1));
        let w = self.cfg.continuation_weighting.then(|| Self::stack(tape, &traj.weights, 1));
        let loss = actor_loss(tape, lp, adv, ent, self.cfg.entropy_beta, w)?;
        let me = tape.mean(ent);
        let ma = tape.mean(adv);
        Ok((loss, me, ma))
    }
}

/// `ln(1 − tanh²u)` evaluated stably as `2(ln 2 − u − softplus(−2u))`.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - drivewm_nn::tape::softplus(-2.0 * u))
}

#[derive(Clone, Debug)]
pub struct AgentTrainer {
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl AgentTrainer {
    pub fn new(cfg: &AgentConfig) -> Self {
        Self { actor_opt: Adam::new(AdamConfig::with_lr(cfg.actor_lr)), critic_opt: Adam::new(AdamConfig::with_lr(cfg.critic_lr)) }
    }

    /// Imagine from `starts`, then take one critic and one actor step.
    #[allow(clippy::too_many_arguments)]
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        agent: &Agent,
        world: &Rssm,
        world_params: &ParamStore,
        actor: &mut ParamStore,
        critic: &mut ParamStore,
        starts: &LatentValues,
        rng: &mut R,
    ) -> Result<AgentStats> {
        let traj = agent.imagine_rollout(world, world_params, actor, critic, starts, rng)?;

        let mut tape = Tape::new();
        let cb = critic.bind(&mut tape);
        let closs = agent.critic_objective(&mut tape, &cb, &traj)?;
        let critic_value = tape.item(closs);
        let g = tape.backward(closs);
        critic.accumulate(&cb, &g);

        let mut tape = Tape::new();
        let ab = actor.bind(&mut tape);
        let (aloss, ent, adv) = agent.actor_objective(&mut tape, &ab, &traj)?;
        let stats = AgentStats {
            actor_loss: tape.item(aloss),
            critic_loss: critic_value,
            mean_entropy: tape.item(ent),
            mean_advantage: tape.item(adv),
            mean_return: traj.returns.iter().flatten().sum::<f64>() / (traj.returns.len() * traj.batch) as f64,
        };
        if !stats.actor_loss.is_finite() || !stats.critic_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "agent losses not finite (actor {}, critic {})",
                stats.actor_loss, stats.critic_loss
            )));
        }
        let g = tape.backward(aloss);
        actor.accumulate(&ab, &g);
        self.critic_opt.step(critic)?;
        self.actor_opt.step(actor)?;
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::Task;
    use crate::rssm::RssmConfig;
    use drivewm_nn::{grad_check, GradCheckConfig, NnError};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nn(e: Error) -> NnError {
        NnError::Config(e.to_string())
    }

    fn brute_force(r: &[f64], v_last: f64, gamma: f64) -> Vec<f64> {
        let h = r.len();
        (0..h)
            .map(|t| {
                let mut g = 0.0;
                for k in t..h {
                    g += gamma.powi((k - t) as i32) * r[k];
                }
                g + gamma.powi((h - t) as i32) * v_last
            })
            .collect()
    }

    #[test]
    fn lambda_return_cases() {
        let g = lambda_returns(&[1.0, 1.0, 1.0], &[1.0; 3], &[0.0, 0.0, 0.0, 2.0], 0.997, 1.0).unwrap();
        let expect = 1.0 + 0.997 * (1.0 + 0.997 * (1.0 + 0.997 * 2.0));
        assert!((g[0] - expect).abs() < 1e-12);
        assert!((g[0] - brute_force(&[1.0; 3], 2.0, 0.997)[0]).abs() < 1e-12);

        let r = [0.5, -1.0, 2.0];
        let c = [1.0, 0.3, 0.8];
        let v = [9.0, 1.5, -2.0, 4.0];
        let td = lambda_returns(&r, &c, &v, 0.9, 0.0).unwrap();
        for t in 0..3 {
            assert_eq!(td[t], r[t] + 0.9 * c[t] * v[t + 1]);
        }
        let cut = lambda_returns(&r, &[0.0, 1.0, 1.0], &v, 0.9, 0.7).unwrap();
        assert_eq!(cut[0], 0.5);
        assert!(matches!(lambda_returns(&r, &c, &v[..3], 0.9, 0.5), Err(Error::Usage(_))));
    }

    #[test]
    fn returns_and_critic_closed_forms() {
        assert!((episode_return(&[1.0, 1.0], 0.997) - 1.997).abs() < 1e-12);
        assert_eq!(episode_return(&[0.0; 7], 0.997), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let oracle: f64 = r.iter().enumerate().map(|(k, x)| 0.99f64.powi(k as i32) * x).sum();
        assert!((episode_return(&r, 0.99) - oracle).abs() < 1e-9);

        let mut tape = Tape::new();
        let v = tape.constant(vec![0.5, 1.0], Shape::new(2, 1));
        let same = critic_loss(&mut tape, v, v, None).unwrap();
        assert!((tape.item(same) - HALF_LN_2PI).abs() < 1e-12);
        let g = tape.constant(vec![1.5, 0.0], Shape::new(2, 1));
        let off = critic_loss(&mut tape, v, g, None).unwrap();
        assert!((tape.item(off) - 0.5 - HALF_LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn actor_loss_closed_forms() {
        let mut tape = Tape::new();
        let lp = tape.constant(vec![-1.2, -0.3], Shape::new(2, 1));
        let zero = tape.constant(vec![0.0; 2], Shape::new(2, 1));
        let ent = tape.constant(vec![1.0, 2.0], Shape::new(2, 1));
        let l = actor_loss(&mut tape, lp, zero, ent, 3e-4, None).unwrap();
        assert!((tape.item(l) + 3e-4 * 1.5).abs() < 1e-15);
        let lp1 = tape.constant(vec![-0.7], Shape::new(1, 1));
        let one = tape.constant(vec![1.0], Shape::new(1, 1));
        let e1 = tape.constant(vec![5.0], Shape::new(1, 1));
        let l = actor_loss(&mut tape, lp1, one, e1, 0.0, None).unwrap();
        assert_eq!(tape.item(l), 0.7);
    }

    fn discrete_agent(feature_dim: usize) -> Agent {
        Agent::new(AgentConfig { hidden: 6, ..AgentConfig::default() }, ActionCodec::Discrete, feature_dim).unwrap()
    }

    fn continuous_agent(feature_dim: usize) -> Agent {
        let codec = ActionCodec::for_env(&EnvConfig::for_task(Task::Highway));
        Agent::new(AgentConfig { hidden: 6, ..AgentConfig::default() }, codec, feature_dim).unwrap()
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for (_, e) in store.iter_mut() {
            e.values.iter_mut().for_each(|v| *v = rng.random_range(-0.6..0.6));
        }
    }

    #[test]
    fn uniform_logits_have_max_entropy() {
        let agent = discrete_agent(3);
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.4; 5], Shape::new(1, 5));
        let pi = DistributionSpec::categorical(&mut tape, logits);
        let h = pi.entropy(&mut tape);
        assert!((tape.item(h) - 5f64.ln()).abs() < 1e-12);
        let zero = tape.constant(vec![0.0], Shape::new(1, 1));
        let uniform = actor_loss(&mut tape, zero, zero, h, 3e-4, None).unwrap();
        let uniform = tape.item(uniform);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let v = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let l = tape.constant(v, Shape::new(1, 5));
            let p = DistributionSpec::categorical(&mut tape, l);
            let h = p.entropy(&mut tape);
            let loss = actor_loss(&mut tape, zero, zero, h, 3e-4, None).unwrap();
            assert!(tape.item(loss) >= uniform);
        }
        let _ = agent;
    }

    #[test]
    fn squashed_actions_stay_in_bounds() {
        let agent = continuous_agent(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut actor = agent.init_actor(Precision::F64, &mut rng).unwrap();
        randomize(&mut actor, &mut rng);
        for k in 0..200 {
            let f: Vec<f64> = (0..4).map(|_| rng.random_range(-30.0..30.0)).collect();
            let (a, enc) = agent.act(&actor, &f, k % 2 == 0, &mut rng).unwrap();
            assert!(enc.iter().all(|v| v.abs() <= 1.0));
            let Action::Continuous { accel, steer } = a else { panic!() };
            assert!(accel.abs() <= 5.0 && steer.abs() <= 0.6);
        }
    }

    #[test]
    fn codec_round_trip_and_mismatch() {
        let c = ActionCodec::for_env(&EnvConfig::for_task(Task::Highway));
        let a = Action::Continuous { accel: 2.5, steer: -0.3 };
        assert_eq!(c.encode(&a).unwrap(), vec![0.5, -0.5]);
        assert_eq!(c.decode(&[0.5, -0.5]), a);
        assert!(c.encode(&Action::Meta(MetaAction::Idle)).is_err());
        let d = ActionCodec::Discrete;
        let e = d.encode(&Action::Meta(MetaAction::Faster)).unwrap();
        assert_eq!(e, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(d.decode(&e), Action::Meta(MetaAction::Faster));
    }

    #[test]
    fn continuous_log_prob_gradient_check() {
        let agent = continuous_agent(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut actor = agent.init_actor(Precision::F64, &mut rng).unwrap();
        randomize(&mut actor, &mut rng);
        let feats: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let b = actor.bind_frozen(&mut tape);
        let f = tape.constant(feats.clone(), Shape::new(3, 3));
        let pi = agent.policy(&mut tape, &b, f).unwrap();
        let taken = agent.select(&mut tape, &pi, false, &mut rng).unwrap().taken;
        let report = grad_check(
            &mut [&mut actor],
            |tape, b| {
                let f = tape.constant(feats.clone(), Shape::new(3, 3));
                let pi = agent.policy(tape, &b[0], f).map_err(nn)?;
                let u = tape.constant(taken.clone(), Shape::new(3, 2));
                let lp = agent.log_prob(tape, &pi, u).map_err(nn)?;
                Ok(tape.sum(lp))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn squashed_log_prob_matches_density() {
        // Change of variables: p(a) = N(u)·Π 1/(limit·(1 − tanh²u)).
        let agent = continuous_agent(1);
        let mut tape = Tape::new();
        let mean = tape.constant(vec![0.3, -0.2], Shape::new(1, 2));
        let ls = tape.constant(vec![-0.5, 0.1], Shape::new(1, 2));
        let pi = DistributionSpec::DiagGaussian { mean, log_std: ls };
        let u = [0.7, -1.1];
        let x = tape.constant(u.to_vec(), Shape::new(1, 2));
        let lp = agent.log_prob(&mut tape, &pi, x).unwrap();
        let mut expect = 0.0;
        for (d, limit) in [5.0, 0.6].into_iter().enumerate() {
            let (m, s) = ([0.3, -0.2][d], f64::exp([-0.5, 0.1][d]));
            let gauss = (-0.5 * ((u[d] - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            expect += (gauss / (limit * (1.0 - u[d].tanh().powi(2)))).ln();
        }
        assert!((tape.item(lp) - expect).abs() < 1e-12);
    }

    fn world(action_dim: usize) -> (Rssm, ParamStore) {
        let rssm = Rssm::new(RssmConfig { h_dim: 6, z_dim: 3, embed_dim: 4, action_dim, hidden: 5, ..RssmConfig::default() })
            .unwrap();
        let p = rssm.init_params(Precision::F64, &mut ChaCha8Rng::seed_from_u64(20)).unwrap();
        (rssm, p)
    }

    fn starts(n: usize, rng: &mut ChaCha8Rng) -> LatentValues {
        LatentValues {
            batch: n,
            h: (0..n * 6).map(|_| rng.random_range(-0.9..0.9)).collect(),
            z: (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn rollout_shape_and_reproducibility() {
        let (rssm, wp) = world(5);
        let agent = Agent::new(AgentConfig { hidden: 6, horizon: 1, ..AgentConfig::default() }, ActionCodec::Discrete, 9)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let actor = agent.init_actor(Precision::F64, &mut rng).unwrap();
        let critic = agent.init_critic(Precision::F64, &mut rng).unwrap();
        let s = starts(4, &mut rng);
        let t1 = agent.imagine_rollout(&rssm, &wp, &actor, &critic, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((t1.actions.len(), t1.rewards.len(), t1.continues.len()), (1, 1, 1));
        assert_eq!((t1.values.len(), t1.features.len(), t1.returns.len()), (2, 2, 1));
        let t2 = agent.imagine_rollout(&rssm, &wp, &actor, &critic, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn fixed_action_rollout_matches_direct_chain() {
        let (rssm, wp) = world(5);
        let agent =
            Agent::new(AgentConfig { hidden: 6, horizon: 4, ..AgentConfig::default() }, ActionCodec::Discrete, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut actor = agent.init_actor(Precision::F64, &mut rng).unwrap();
        // A huge bias on one logit makes the categorical deterministic.
        for (name, e) in actor.iter_mut() {
            e.values.iter_mut().for_each(|v| *v = 0.0);
            if name == "actor.l2.b" {
                e.values[3] = 1e3;
            }
        }
        let critic = agent.init_critic(Precision::F64, &mut rng).unwrap();
        let s = starts(2, &mut rng);
        let traj = agent.imagine_rollout(&rssm, &wp, &actor, &critic, &s, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();

        // Replay the same noise stream: one categorical draw per row, then the latent noise.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut state = s.clone();
        for t in 0..4 {
            let mut tape = Tape::new();
            let b = wp.bind_frozen(&mut tape);
            let ls = state.place(&mut tape, rssm.config());
            for _ in 0..2 {
                let _: f64 = rng.random();
            }
            let a = drivewm_nn::dist::one_hot(&mut tape, &[3, 3], 5);
            let noise = draw_noise(1, 2, 3, &mut rng).remove(0);
            let (next, r, c) = rssm.imagine_step(&mut tape, &b, ls, a, noise).unwrap();
            assert_eq!(traj.rewards[t], tape.value(r));
            assert_eq!(traj.continues[t], tape.value(c));
            state = LatentValues::read(&tape, next);
            assert_eq!(traj.actions[t].encoded, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn objectives_gradient_check_and_isolation() {
        let (rssm, wp) = world(2);
        let agent = continuous_agent(9);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut actor = agent.init_actor(Precision::F64, &mut rng).unwrap();
        let mut critic = agent.init_critic(Precision::F64, &mut rng).unwrap();
        randomize(&mut actor, &mut rng);
        randomize(&mut critic, &mut rng);
        let agent = Agent::new(AgentConfig { horizon: 3, ..agent.cfg.clone() }, agent.codec, 9).unwrap();
        let traj = agent.imagine_rollout(&rssm, &wp, &actor, &critic, &starts(2, &mut rng), &mut rng).unwrap();

        let r = grad_check(&mut [&mut critic], |t, b| agent.critic_objective(t, &b[0], &traj).map_err(nn), GradCheckConfig::default())
            .unwrap();
        assert!(r.passed, "{r:?}");
        let r = grad_check(
            &mut [&mut actor],
            |t, b| agent.actor_objective(t, &b[0], &traj).map(|x| x.0).map_err(nn),
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");

        // Advantages computed from a live critic on the same tape still leave it without gradient.
        let mut tape = Tape::new();
        let cb = critic.bind(&mut tape);
        let ab = actor.bind(&mut tape);
        let f = Agent::stack(&mut tape, &traj.features[..3], 9);
        let v = agent.value(&mut tape, &cb, f).unwrap();
        let g = Agent::stack(&mut tape, &traj.returns, 1);
        let adv = tape.sub(g, v);
        let pi = agent.policy(&mut tape, &ab, f).unwrap();
        let taken: Vec<Vec<f64>> = traj.actions.iter().map(|a| a.taken.clone()).collect();
        let u = Agent::stack(&mut tape, &taken, 2);
        let lp = agent.log_prob(&mut tape, &pi, u).unwrap();
        let ent = pi.entropy(&mut tape);
        let loss = actor_loss(&mut tape, lp, adv, ent, 3e-4, None).unwrap();
        let grads = tape.backward(loss);
        critic.zero_grads();
        critic.accumulate(&cb, &grads);
        assert!(critic.grads_all_zero());

        // The critic's targets are detached too.
        let mut tape = Tape::new();
        let cb = critic.bind(&mut tape);
        let f = Agent::stack(&mut tape, &traj.features[..3], 9);
        let v = agent.value(&mut tape, &cb, f).unwrap();
        let gl = tape.leaf(traj.returns.concat(), Shape::new(6, 1));
        let l = critic_loss(&mut tape, v, gl, None).unwrap();
        let grads = tape.backward(l);
        assert!(grads.get(gl).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn positive_advantage_raises_taken_log_prob() {
        let agent = discrete_agent(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut actor = agent.init_actor(Precision::F64, &mut rng).unwrap();
        randomize(&mut actor, &mut rng);
        let f = vec![0.3, -0.5, 0.8];
        let lp_of = |actor: &ParamStore| {
            let mut tape = Tape::new();
            let b = actor.bind(&mut tape);
            let fv = tape.constant(f.clone(), Shape::new(1, 3));
            let pi = agent.policy(&mut tape, &b, fv).unwrap();
            let a = drivewm_nn::dist::one_hot(&mut tape, &[2], 5);
            let lp = agent.log_prob(&mut tape, &pi, a).unwrap();
            let adv = tape.constant(vec![1.0], Shape::new(1, 1));
            let ent = pi.entropy(&mut tape);
            let loss = actor_loss(&mut tape, lp, adv, ent, 0.0, None).unwrap();
            (tape.item(lp), tape.backward(loss), b)
        };
        let (before, grads, b) = lp_of(&actor);
        actor.accumulate(&b, &grads);
        for (_, e) in actor.iter_mut() {
            for (v, g) in e.values.iter_mut().zip(e.grads.iter_mut()) {
                *v -= 1e-2 * *g;
                *g = 0.0;
            }
        }
        let (after, _, _) = lp_of(&actor);
        assert!(after > before, "{after} vs {before}");
    }

    #[test]
    fn trainer_update_moves_actor_and_critic() {
        let (rssm, wp) = world(2);
        let agent = Agent::new(AgentConfig { hidden: 6, horizon: 3, ..AgentConfig::default() }, continuous_agent(9).codec, 9)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut actor = agent.init_actor(Precision::F32, &mut rng).unwrap();
        let mut critic = agent.init_critic(Precision::F32, &mut rng).unwrap();
        let (a0, c0) = (actor.clone(), critic.clone());
        let mut tr = AgentTrainer::new(agent.config());
        let s = starts(3, &mut rng);
        let stats = tr.update(&agent, &rssm, &wp, &mut actor, &mut critic, &s, &mut rng).unwrap();
        assert!(stats.critic_loss.is_finite() && stats.actor_loss.is_finite());
        let moved = |a: &ParamStore, b: &ParamStore| a.iter().zip(b.iter()).any(|(x, y)| x.1.values != y.1.values);
        assert!(moved(&a0, &actor) && moved(&c0, &critic));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn lambda_one_matches_monte_carlo(
            h in 1usize..=64,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<f64> = (0..h).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..=h).map(|_| rng.random_range(-5.0..5.0)).collect();
            let g = lambda_returns(&r, &vec![1.0; h], &v, 0.997, 1.0).unwrap();
            let bf = brute_force(&r, v[h], 0.997);
            for (a, b) in g.iter().zip(&bf) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn returns_monotone_in_rewards(
            seed in any::<u64>(),
            k in 0usize..8,
            bump in 0.0..5.0f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            let v: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let base = lambda_returns(&r, &c, &v, 0.99, 0.9).unwrap();
            let mut r2 = r.clone();
            r2[k] += bump;
            let up = lambda_returns(&r2, &c, &v, 0.99, 0.9).unwrap();
            for t in 0..=k {
                prop_assert!(up[t] >= base[t] - 1e-12);
            }
        }
    }
}
