//! Recurrent state-space world model over encoder embeddings.

use drivewm_nn::{
    Activation, Bound, DistributionSpec, GatedRecurrentCell, Init, LogStdRange, Mlp, ParamStore, Precision, Shape,
    Tape, Var,
};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
pub const INITIAL_HIDDEN: &str = "h0";

#[derive(Clone, Debug, PartialEq)]
pub struct RssmConfig {
    pub h_dim: usize,
    pub z_dim: usize,
    pub embed_dim: usize,
    pub action_dim: usize,
    /// Width of the prior, posterior and head networks.
    pub hidden: usize,
    pub free_bits: f64,
    pub w_pred: f64,
    pub w_dyn: f64,
    pub w_rep: f64,
    /// Trainable initial hidden state instead of zeros.
    pub learned_init: bool,
    /// Cut the gradient through the sampled latent between steps.
    pub detach_z: bool,
    pub lr: f64,
}

impl Default for RssmConfig {
    fn default() -> Self {
        Self {
            h_dim: 256,
            z_dim: 32,
            embed_dim: 128,
            action_dim: 2,
            hidden: 256,
            free_bits: 1.0,
            w_pred: 1.0,
            w_dyn: 0.5,
            w_rep: 0.1,
            learned_init: false,
            detach_z: false,
            lr: 3e-4,
        }
    }
}

impl RssmConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("h_dim", self.h_dim),
            ("z_dim", self.z_dim),
            ("embed_dim", self.embed_dim),
            ("action_dim", self.action_dim),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("rssm.{k} must be positive")));
            }
        }
        if !(self.free_bits >= 0.0) {
            return Err(Error::Config(format!("rssm.free_bits {} must be ≥ 0", self.free_bits)));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("rssm.lr must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.h_dim + self.z_dim
    }
}

/// Deterministic memory and stochastic latent for a batch, as tape values.
#[derive(Clone, Copy, Debug)]
pub struct LatentState {
    pub h: Var,
    pub z: Var,
}

/// Tape-independent copy of a [`LatentState`], row-major `batch × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentValues {
    pub batch: usize,
    pub h: Vec<f64>,
    pub z: Vec<f64>,
}

impl LatentValues {
    pub fn read(tape: &Tape, state: LatentState) -> Self {
        Self { batch: tape.shape(state.h).rows, h: tape.value(state.h).to_vec(), z: tape.value(state.z).to_vec() }
    }

    pub fn place(&self, tape: &mut Tape, cfg: &RssmConfig) -> LatentState {
        LatentState {
            h: tape.constant(self.h.clone(), Shape::new(self.batch, cfg.h_dim)),
            z: tape.constant(self.z.clone(), Shape::new(self.batch, cfg.z_dim)),
        }
    }

    /// `h ⊕ z` for row `i`.
    pub fn feature(&self, i: usize) -> Vec<f64> {
        let hd = self.h.len() / self.batch;
        let zd = self.z.len() / self.batch;
        let mut f = self.h[i * hd..(i + 1) * hd].to_vec();
        f.extend_from_slice(&self.z[i * zd..(i + 1) * zd]);
        f
    }
}

/// Everything computed at one observed step.
#[derive(Clone, Copy, Debug)]
pub struct StepPosterior {
    pub h: Var,
    pub z: Var,
    pub prior: DistributionSpec,
    pub posterior: DistributionSpec,
    pub embed_pred: Var,
    pub reward_mean: Var,
    pub continue_logit: Var,
}

impl StepPosterior {
    pub fn state(&self) -> LatentState {
        LatentState { h: self.h, z: self.z }
    }
}

#[derive(Clone, Debug)]
pub struct SequencePosterior {
    pub steps: Vec<StepPosterior>,
}

/// Per-step training targets, each `batch × width`.
#[derive(Clone, Debug)]
pub struct WorldTargets {
    pub embeds: Vec<Var>,
    pub rewards: Vec<Var>,
    pub continues: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct WorldLosses {
    pub total: Var,
    pub pred: Var,
    pub dyn_loss: Var,
    pub rep_loss: Var,
    pub kl_raw: Var,
    pub embed_loss: Var,
    pub reward_loss: Var,
    pub cont_loss: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WorldLossValues {
    pub total: f64,
    pub pred: f64,
    pub dyn_loss: f64,
    pub rep_loss: f64,
    pub kl_raw: f64,
    pub embed_loss: f64,
    pub reward_loss: f64,
    pub cont_loss: f64,
}

impl WorldLossValues {
    pub fn read(tape: &Tape, l: &WorldLosses) -> Result<Self> {
        let v = Self {
            total: tape.item(l.total),
            pred: tape.item(l.pred),
            dyn_loss: tape.item(l.dyn_loss),
            rep_loss: tape.item(l.rep_loss),
            kl_raw: tape.item(l.kl_raw),
            embed_loss: tape.item(l.embed_loss),
            reward_loss: tape.item(l.reward_loss),
            cont_loss: tape.item(l.cont_loss),
        };
        for (name, x) in [
            ("model_loss", v.total),
            ("embed_loss", v.embed_loss),
            ("reward_loss", v.reward_loss),
            ("cont_loss", v.cont_loss),
            ("dyn_loss", v.dyn_loss),
            ("rep_loss", v.rep_loss),
        ] {
            if !x.is_finite() {
                return Err(Error::Numeric(format!("world model {name} is {x}")));
            }
        }
        Ok(v)
    }
}

/// Standard-normal noise for `steps` latent draws of `batch × z_dim`.
pub fn draw_noise<R: Rng + ?Sized>(steps: usize, batch: usize, z_dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..steps).map(|_| (0..batch * z_dim).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

#[derive(Clone, Debug)]
pub struct Rssm {
    cfg: RssmConfig,
    cell: GatedRecurrentCell,
    prior_net: Mlp,
    posterior_net: Mlp,
    embed_head: Mlp,
    reward_head: Mlp,
    continue_head: Mlp,
}

impl Rssm {
    pub fn new(cfg: RssmConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, z, e, w) = (cfg.h_dim, cfg.z_dim, cfg.embed_dim, cfg.hidden);
        let f = cfg.feature_dim();
        let mlp = |name: &str, input: usize, out: usize| Mlp::new(name, &[input, w, out], Activation::Silu, Activation::Identity);
        Ok(Self {
            cell: GatedRecurrentCell::new("cell", z + cfg.action_dim, h),
            prior_net: mlp("prior", h, 2 * z),
            posterior_net: mlp("posterior", h + e, 2 * z),
            embed_head: mlp("embed_head", f, e),
            reward_head: mlp("reward_head", f, 1),
            continue_head: mlp("continue_head", f, 1),
            cfg,
        })
    }

    pub fn config(&self) -> &RssmConfig {
        &self.cfg
    }

    pub fn init_params<R: Rng + ?Sized>(&self, precision: Precision, rng: &mut R) -> Result<ParamStore> {
        let mut store = ParamStore::new(precision);
        self.cell.register(&mut store, rng)?;
        for net in [&self.prior_net, &self.posterior_net, &self.embed_head, &self.reward_head, &self.continue_head] {
            net.register(&mut store, 1.0, rng)?;
        }
        if self.cfg.learned_init {
            store.add(INITIAL_HIDDEN, Shape::new(1, self.cfg.h_dim), Init::Zeros, rng)?;
        }
        Ok(store)
    }

    /// Names of parameters on the posterior side of the KL terms.
    pub fn is_posterior_param(name: &str) -> bool {
        name.starts_with("posterior.")
    }

    pub fn is_prior_param(name: &str) -> bool {
        name.starts_with("prior.")
    }

    pub fn initial_state(&self, tape: &mut Tape, params: &Bound, batch: usize) -> Result<LatentState> {
        if batch == 0 {
            return Err(Error::Usage("initial_state needs batch ≥ 1".into()));
        }
        let h = if self.cfg.learned_init {
            let h0 = params.get(INITIAL_HIDDEN)?;
            tape.gather_rows(h0, &vec![0; batch])
        } else {
            tape.filled(Shape::new(batch, self.cfg.h_dim), 0.0)
        };
        let z = tape.filled(Shape::new(batch, self.cfg.z_dim), 0.0);
        Ok(LatentState { h, z })
    }

    fn check_width(&self, tape: &Tape, v: Var, width: usize, what: &str) -> Result<()> {
        let s = tape.shape(v);
        if s.cols != width {
            return Err(Error::Config(format!("{what} has width {}, expected {width}", s.cols)));
        }
        Ok(())
    }

    pub fn dynamics_step(&self, tape: &mut Tape, params: &Bound, prev: LatentState, action: Var) -> Result<Var> {
        self.check_width(tape, action, self.cfg.action_dim, "action")?;
        let z = if self.cfg.detach_z { tape.stop_gradient(prev.z) } else { prev.z };
        let input = tape.concat_cols(&[z, action]);
        Ok(self.cell.forward(tape, params, prev.h, input)?)
    }

    pub fn prior(&self, tape: &mut Tape, params: &Bound, h: Var) -> Result<DistributionSpec> {
        let head = self.prior_net.forward(tape, params, h)?;
        Ok(DistributionSpec::gaussian_from_head(tape, head, LogStdRange::default())?)
    }

    pub fn posterior(&self, tape: &mut Tape, params: &Bound, h: Var, embed: Var) -> Result<DistributionSpec> {
        self.check_width(tape, embed, self.cfg.embed_dim, "embedding")?;
        let input = tape.concat_cols(&[h, embed]);
        let head = self.posterior_net.forward(tape, params, input)?;
        Ok(DistributionSpec::gaussian_from_head(tape, head, LogStdRange::default())?)
    }

    pub fn feature(&self, tape: &mut Tape, state: LatentState) -> Var {
        tape.concat_cols(&[state.h, state.z])
    }

    pub fn predict_embedding(&self, tape: &mut Tape, params: &Bound, feature: Var) -> Result<Var> {
        Ok(self.embed_head.forward(tape, params, feature)?)
    }

    /// Mean of the unit-variance reward Gaussian, `batch × 1`.
    pub fn predict_reward(&self, tape: &mut Tape, params: &Bound, feature: Var) -> Result<Var> {
        Ok(self.reward_head.forward(tape, params, feature)?)
    }

    /// Continue logit, `batch × 1`; the probability is its sigmoid.
    pub fn predict_continue(&self, tape: &mut Tape, params: &Bound, feature: Var) -> Result<Var> {
        Ok(self.continue_head.forward(tape, params, feature)?)
    }

    /// Filter a batch of sequences: `embeds[t]` is the frame seen after `prev_actions[t]`.
    pub fn observe_sequence(
        &self,
        tape: &mut Tape,
        params: &Bound,
        embeds: &[Var],
        prev_actions: &[Var],
        start: LatentState,
        noise: &[Vec<f64>],
    ) -> Result<SequencePosterior> {
        if embeds.len() != prev_actions.len() || embeds.len() != noise.len() || embeds.is_empty() {
            return Err(Error::Usage(format!(
                "observe_sequence: {} embeddings, {} actions, {} noise draws",
                embeds.len(),
                prev_actions.len(),
                noise.len()
            )));
        }
        let mut state = start;
        let mut steps = Vec::with_capacity(embeds.len());
        for ((&x, &a), eps) in embeds.iter().zip(prev_actions).zip(noise) {
            let h = self.dynamics_step(tape, params, state, a)?;
            let prior = self.prior(tape, params, h)?;
            let posterior = self.posterior(tape, params, h, x)?;
            let z = posterior.sample_with_noise(tape, eps.clone())?;
            let f = tape.concat_cols(&[h, z]);
            steps.push(StepPosterior {
                h,
                z,
                prior,
                posterior,
                embed_pred: self.predict_embedding(tape, params, f)?,
                reward_mean: self.predict_reward(tape, params, f)?,
                continue_logit: self.predict_continue(tape, params, f)?,
            });
            state = LatentState { h, z };
        }
        Ok(SequencePosterior { steps })
    }

    /// Prediction, dynamics and representation losses averaged over batch and time.
    pub fn loss_world(&self, tape: &mut Tape, seq: &SequencePosterior, targets: &WorldTargets) -> Result<WorldLosses> {
        let t = seq.steps.len();
        if targets.embeds.len() != t || targets.rewards.len() != t || targets.continues.len() != t {
            return Err(Error::Usage(format!("loss_world: {t} steps but targets of other lengths")));
        }
        let mut parts: [Vec<Var>; 6] = Default::default();
        for (k, s) in seq.steps.iter().enumerate() {
            let losses = [
                gaussian_nll(tape, s.embed_pred, targets.embeds[k])?,
                gaussian_nll(tape, s.reward_mean, targets.rewards[k])?,
                bernoulli_nll(tape, s.continue_logit, targets.continues[k])?,
                {
                    let post = s.posterior.detach(tape);
                    let kl = post.kl(tape, &s.prior)?;
                    tape.max_scalar(kl, self.cfg.free_bits)
                },
                {
                    let prior = s.prior.detach(tape);
                    let kl = s.posterior.kl(tape, &prior)?;
                    tape.max_scalar(kl, self.cfg.free_bits)
                },
                {
                    let post = s.posterior.detach(tape);
                    let prior = s.prior.detach(tape);
                    post.kl(tape, &prior)?
                },
            ];
            for (bucket, l) in parts.iter_mut().zip(losses) {
                let m = tape.mean(l);
                bucket.push(m);
            }
        }
        let [embed_loss, reward_loss, cont_loss, dyn_loss, rep_loss, kl_raw] = parts.map(|v| time_mean(tape, &v));
        let pe = tape.add(embed_loss, reward_loss);
        let pred = tape.add(pe, cont_loss);
        let wp = tape.scale(pred, self.cfg.w_pred);
        let wd = tape.scale(dyn_loss, self.cfg.w_dyn);
        let wr = tape.scale(rep_loss, self.cfg.w_rep);
        let pd = tape.add(wp, wd);
        let total = tape.add(pd, wr);
        Ok(WorldLosses { total, pred, dyn_loss, rep_loss, kl_raw, embed_loss, reward_loss, cont_loss })
    }

    /// One open-loop step: recurrence, prior sample, reward mean and continue probability.
    pub fn imagine_step(
        &self,
        tape: &mut Tape,
        params: &Bound,
        state: LatentState,
        action: Var,
        noise: Vec<f64>,
    ) -> Result<(LatentState, Var, Var)> {
        let h = self.dynamics_step(tape, params, state, action)?;
        let prior = self.prior(tape, params, h)?;
        let z = prior.sample_with_noise(tape, noise)?;
        let next = LatentState { h, z };
        let f = self.feature(tape, next);
        let reward = self.predict_reward(tape, params, f)?;
        let logit = self.predict_continue(tape, params, f)?;
        let cont = tape.sigmoid(logit);
        Ok((next, reward, cont))
    }

    /// Posterior update for acting in the environment, using the posterior mean.
    pub fn filter_step(
        &self,
        params: &ParamStore,
        prev: &LatentValues,
        prev_action: &[f64],
        embed: &[f64],
    ) -> Result<LatentValues> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let state = prev.place(&mut tape, &self.cfg);
        let a = tape.constant(prev_action.to_vec(), Shape::new(prev.batch, self.cfg.action_dim));
        let x = tape.constant(embed.to_vec(), Shape::new(prev.batch, self.cfg.embed_dim));
        let h = self.dynamics_step(&mut tape, &bound, state, a)?;
        let post = self.posterior(&mut tape, &bound, h, x)?;
        let z = post.mode(&mut tape);
        Ok(LatentValues::read(&tape, LatentState { h, z }))
    }

    pub fn initial_values(&self, params: &ParamStore, batch: usize) -> Result<LatentValues> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let s = self.initial_state(&mut tape, &bound, batch)?;
        Ok(LatentValues::read(&tape, s))
    }
}

fn time_mean(tape: &mut Tape, per_step: &[Var]) -> Var {
    let mut acc = per_step[0];
    for &v in &per_step[1..] {
        acc = tape.add(acc, v);
    }
    tape.scale(acc, 1.0 / per_step.len() as f64)
}

/// Row-wise unit-variance Gaussian NLL `0.5·Σ(x − μ)² + 0.5·d·ln 2π` → `rows × 1`.
pub fn gaussian_nll(tape: &mut Tape, mean: Var, target: Var) -> Result<Var> {
    let (sm, st) = (tape.shape(mean), tape.shape(target));
    if sm != st {
        return Err(Error::Usage(format!("gaussian_nll: mean {sm} vs target {st}")));
    }
    let d = tape.sub(target, mean);
    let sq = tape.square(d);
    let s = tape.sum_cols(sq);
    Ok(tape.affine(s, 0.5, sm.cols as f64 * HALF_LN_2PI))
}

/// Binary cross-entropy from a logit: `softplus(l) − c·l` → `rows × 1`.
pub fn bernoulli_nll(tape: &mut Tape, logit: Var, target: Var) -> Result<Var> {
    let (sl, st) = (tape.shape(logit), tape.shape(target));
    if sl != st {
        return Err(Error::Usage(format!("bernoulli_nll: logit {sl} vs target {st}")));
    }
    let sp = tape.softplus(logit);
    let cl = tape.mul(target, logit);
    let l = tape.sub(sp, cl);
    Ok(tape.sum_cols(l))
}
