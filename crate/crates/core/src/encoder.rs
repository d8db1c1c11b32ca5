//! Masked-token embedding model: patch encoder with a token bottleneck, an EMA
//! teacher, random patch masking, a spatial predictor, and the L1 + variance +
//! covariance objective.

use drivewm_nn::{
    ema_update, Activation, Adam, AdamConfig, Bound, Init, Linear, Mlp, ParamStore, Precision, Shape, Tape, Var,
};
use rand::seq::index;
use rand::Rng;

use crate::envsim::render::{IMAGE_BYTES, IMAGE_SIZE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedSummary {
    /// Mean over tokens, one `embed_dim` vector per frame.
    MeanPool,
    /// All tokens concatenated, `tokens·embed_dim` per frame.
    Flatten,
}

impl std::str::FromStr for EmbedSummary {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::MeanPool),
            "flatten" => Ok(Self::Flatten),
            _ => Err(Error::Config(format!("unknown embedding summary `{s}` (mean|flatten)"))),
        }
    }
}

impl std::fmt::Display for EmbedSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MeanPool => "mean",
            Self::Flatten => "flatten",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Side of a square token patch in pixels; split into a stem and a 2×2 merge.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub stem_channels: usize,
    pub merge_channels: usize,
    pub bottleneck_hidden: usize,
    pub predictor_hidden: usize,
    pub mask_ratio: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_w: f64,
    pub eps: f64,
    /// 1 for single frames, 2 to stack the previous frame on the channel axis.
    pub frame_stack: usize,
    pub lr: f64,
    pub summary: EmbedSummary,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 128,
            stem_channels: 16,
            merge_channels: 64,
            bottleneck_hidden: 128,
            predictor_hidden: 128,
            mask_ratio: 0.5,
            tau: 0.996,
            alpha: 1.0,
            beta: 1.0,
            gamma_w: 0.1,
            eps: 1e-4,
            frame_stack: 1,
            lr: 1e-4,
            summary: EmbedSummary::MeanPool,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p < 2 || p % 2 != 0 || IMAGE_SIZE % p != 0 {
            return Err(Error::Config(format!("encoder.patch_size {p} must be even and divide {IMAGE_SIZE}")));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("encoder.mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("encoder.tau {} outside [0, 1]", self.tau)));
        }
        if !(1..=2).contains(&self.frame_stack) {
            return Err(Error::Config(format!("encoder.frame_stack {} must be 1 or 2", self.frame_stack)));
        }
        for (k, v) in [
            ("embed_dim", self.embed_dim),
            ("stem_channels", self.stem_channels),
            ("merge_channels", self.merge_channels),
            ("bottleneck_hidden", self.bottleneck_hidden),
            ("predictor_hidden", self.predictor_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{k} must be positive")));
            }
        }
        if self.eps <= 0.0 || self.lr <= 0.0 {
            return Err(Error::Config("encoder.eps and encoder.lr must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        IMAGE_SIZE / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn channels(&self) -> usize {
        3 * self.frame_stack
    }

    pub fn frame_bytes(&self) -> usize {
        IMAGE_BYTES * self.frame_stack
    }

    /// Width of the per-frame summary handed to the world model.
    pub fn summary_dim(&self) -> usize {
        match self.summary {
            EmbedSummary::MeanPool => self.embed_dim,
            EmbedSummary::Flatten => self.embed_dim * self.tokens(),
        }
    }

    pub fn masked_count(&self) -> usize {
        (self.mask_ratio * self.tokens() as f64).ceil() as usize
    }
}

/// Interleave `prev` and `cur` per pixel into a 6-channel frame.
pub fn stack_frames(prev: &[u8], cur: &[u8]) -> Vec<u8> {
    prev.chunks_exact(3).zip(cur.chunks_exact(3)).flat_map(|(a, b)| a.iter().chain(b).copied()).collect()
}

/// Per-frame masked token indices, sorted ascending.
pub fn mask_random_patches<R: Rng + ?Sized>(tokens: usize, ratio: f64, rng: &mut R) -> Vec<usize> {
    let m = ((ratio * tokens as f64).ceil() as usize).min(tokens);
    let mut idx = index::sample(rng, tokens, m).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLosses {
    pub total: Var,
    pub align: Var,
    pub var: Var,
    pub cov: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EncoderLossValues {
    pub total: f64,
    pub align: f64,
    pub var: f64,
    pub cov: f64,
}

/// Network definitions; parameter values live in the three stores of [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    stem: Linear,
    merge: Linear,
    bottleneck: Mlp,
    predictor_head: Mlp,
}

pub const MASK_TOKENS: &str = "mask_tokens";
pub const MIX: &str = "mix";

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub predictor: ParamStore,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let s1 = cfg.patch_size / 2;
        let stem = Linear::new("stem", s1 * s1 * cfg.channels(), cfg.stem_channels);
        let merge = Linear::new("merge", 4 * cfg.stem_channels, cfg.merge_channels);
        let bottleneck = Mlp::new(
            "bottleneck",
            &[cfg.merge_channels, cfg.bottleneck_hidden, cfg.embed_dim],
            Activation::Silu,
            Activation::Identity,
        );
        let predictor_head = Mlp::new(
            "head",
            &[cfg.embed_dim, cfg.predictor_hidden, cfg.embed_dim],
            Activation::Silu,
            Activation::Identity,
        );
        Ok(Self { cfg, stem, merge, bottleneck, predictor_head })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Fresh student and predictor; the teacher starts as an exact copy of the student.
    pub fn init_params<R: Rng + ?Sized>(&self, precision: Precision, rng: &mut R) -> Result<EncoderParams> {
        let mut student = ParamStore::new(precision);
        self.stem.register(&mut student, 1.0, rng)?;
        self.merge.register(&mut student, 1.0, rng)?;
        self.bottleneck.register(&mut student, 1.0, rng)?;
        let teacher = student.clone();
        let mut predictor = ParamStore::new(precision);
        let n = self.cfg.tokens();
        predictor.add(MASK_TOKENS, Shape::new(n, self.cfg.embed_dim), Init::TruncatedNormalFanIn { scale: 1.0 }, rng)?;
        predictor.add(MIX, Shape::new(n, n), Init::TruncatedNormalFanIn { scale: 1.0 }, rng)?;
        self.predictor_head.register(&mut predictor, 1.0, rng)?;
        Ok(EncoderParams { student, teacher, predictor })
    }

    fn check_frames(&self, frames: &[&[u8]]) -> Result<()> {
        if frames.is_empty() {
            return Err(Error::Usage("encoder called on an empty batch".into()));
        }
        let want = self.cfg.frame_bytes();
        match frames.iter().find(|f| f.len() != want) {
            Some(f) => Err(Error::Config(format!("frame has {} bytes, encoder expects {want}", f.len()))),
            None => Ok(()),
        }
    }

    /// Stem patches as rows of a constant: [B·(2g)², s1²·C].
    fn stem_patches(&self, tape: &mut Tape, frames: &[&[u8]]) -> Var {
        let c = self.cfg.channels();
        let s1 = self.cfg.patch_size / 2;
        let g1 = IMAGE_SIZE / s1;
        let cols = s1 * s1 * c;
        let mut data = Vec::with_capacity(frames.len() * g1 * g1 * cols);
        for frame in frames {
            for py in 0..g1 {
                for px in 0..g1 {
                    for dy in 0..s1 {
                        let row = (py * s1 + dy) * IMAGE_SIZE + px * s1;
                        data.extend(frame[row * c..(row + s1) * c].iter().map(|&b| b as f64 / 255.0));
                    }
                }
            }
        }
        tape.constant(data, Shape::new(frames.len() * g1 * g1, cols))
    }

    /// Gather index turning stem outputs into 2×2-merged rows, one per token.
    fn merge_index(&self, batch: usize) -> Vec<usize> {
        let g = self.cfg.grid();
        let g1 = 2 * g;
        let ch = self.cfg.stem_channels;
        let mut idx = Vec::with_capacity(batch * g * g * 4 * ch);
        for b in 0..batch {
            for ty in 0..g {
                for tx in 0..g {
                    for i in 0..2 {
                        for j in 0..2 {
                            let src = b * g1 * g1 + (2 * ty + i) * g1 + 2 * tx + j;
                            idx.extend(src * ch..(src + 1) * ch);
                        }
                    }
                }
            }
        }
        idx
    }

    /// Token embeddings [B·N, D] for `frames`, rows grouped by frame.
    pub fn encode(&self, tape: &mut Tape, params: &Bound, frames: &[&[u8]]) -> Result<Var> {
        self.check_frames(frames)?;
        let patches = self.stem_patches(tape, frames);
        let stem = self.stem.forward(tape, params, patches)?;
        let stem = tape.silu(stem);
        let rows = frames.len() * self.cfg.tokens();
        let merged = tape.gather(stem, self.merge_index(frames.len()), Shape::new(rows, 4 * self.cfg.stem_channels));
        let merged = self.merge.forward(tape, params, merged)?;
        let merged = tape.silu(merged);
        Ok(self.bottleneck.forward(tape, params, merged)?)
    }

    pub fn encode_student(&self, tape: &mut Tape, student: &Bound, frames: &[&[u8]]) -> Result<Var> {
        self.encode(tape, student, frames)
    }

    /// Teacher tokens behind a stop-gradient.
    pub fn encode_teacher(&self, tape: &mut Tape, teacher: &Bound, frames: &[&[u8]]) -> Result<Var> {
        let t = self.encode(tape, teacher, frames)?;
        Ok(tape.stop_gradient(t))
    }

    /// Predictions [Σ|mask_b|, D] at the masked positions, ordered by frame then index.
    ///
    /// Masked rows of `tokens` are replaced by the per-position mask tokens before
    /// cross-token mixing, so the result only depends on visible embeddings.
    pub fn spatial_predict(
        &self,
        tape: &mut Tape,
        predictor: &Bound,
        tokens: Var,
        masks: &[Vec<usize>],
    ) -> Result<Var> {
        let n = self.cfg.tokens();
        let d = self.cfg.embed_dim;
        let shape = tape.shape(tokens);
        if shape != Shape::new(masks.len() * n, d) {
            return Err(Error::Usage(format!("predictor got tokens {shape} for {} frames of {n}×{d}", masks.len())));
        }
        let mut hidden = vec![1.0; masks.len() * n];
        let mut masked_rows = Vec::new();
        for (b, m) in masks.iter().enumerate() {
            for &i in m {
                if i >= n {
                    return Err(Error::Usage(format!("mask index {i} out of {n} tokens")));
                }
                hidden[b * n + i] = 0.0;
                masked_rows.push(b * n + i);
            }
        }
        if masked_rows.is_empty() {
            return Ok(tape.constant(Vec::new(), Shape::new(0, d)));
        }
        let placeholder_mask: Vec<f64> = hidden.iter().map(|v| 1.0 - v).collect();
        let keep = tape.constant(hidden, Shape::new(masks.len() * n, 1));
        let fill = tape.constant(placeholder_mask, Shape::new(masks.len() * n, 1));
        let positions: Vec<usize> = (0..masks.len()).flat_map(|_| 0..n).collect();
        let placeholders = tape.gather_rows(predictor.get(MASK_TOKENS)?, &positions);
        let visible = tape.mul(tokens, keep);
        let filled = tape.mul(placeholders, fill);
        let context = tape.add(visible, filled);
        let mixed = tape.mix_tokens(predictor.get(MIX)?, context, n);
        let mixed = tape.silu(mixed);
        let context = tape.add(context, mixed);
        let at_mask = tape.gather_rows(context, &masked_rows);
        Ok(self.predictor_head.forward(tape, predictor, at_mask)?)
    }

    /// Teacher rows matching the masked rows of [`Encoder::spatial_predict`].
    pub fn masked_targets(&self, tape: &mut Tape, teacher_tokens: Var, masks: &[Vec<usize>]) -> Var {
        let n = self.cfg.tokens();
        let rows: Vec<usize> = masks.iter().enumerate().flat_map(|(b, m)| m.iter().map(move |&i| b * n + i)).collect();
        tape.gather_rows(teacher_tokens, &rows)
    }

    /// Full objective for one batch of frames.
    pub fn loss_encoder_total(
        &self,
        tape: &mut Tape,
        student: &Bound,
        teacher: &Bound,
        predictor: &Bound,
        frames: &[&[u8]],
        masks: &[Vec<usize>],
    ) -> Result<EncoderLosses> {
        if masks.len() != frames.len() {
            return Err(Error::Usage(format!("{} masks for {} frames", masks.len(), frames.len())));
        }
        let tokens = self.encode_student(tape, student, frames)?;
        let target = self.encode_teacher(tape, teacher, frames)?;
        let pred = self.spatial_predict(tape, predictor, tokens, masks)?;
        let target = self.masked_targets(tape, target, masks);
        let align = loss_align(tape, pred, target)?;
        let var = loss_var(tape, tokens, self.cfg.eps)?;
        let cov = loss_cov(tape, tokens)?;
        let c = &self.cfg;
        let total = weighted_total(tape, [(align, c.alpha), (var, c.beta), (cov, c.gamma_w)]);
        Ok(EncoderLosses { total, align, var, cov })
    }

    /// Per-frame summaries for the world model, computed without gradient.
    pub fn embed(&self, student: &ParamStore, frames: &[&[u8]]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bound = student.bind_frozen(&mut tape);
        let tokens = self.encode(&mut tape, &bound, frames)?;
        let n = self.cfg.tokens();
        let d = self.cfg.embed_dim;
        let values = tape.value(tokens);
        Ok(values
            .chunks_exact(n * d)
            .map(|frame| match self.cfg.summary {
                EmbedSummary::Flatten => frame.to_vec(),
                EmbedSummary::MeanPool => {
                    let mut pooled = vec![0.0; d];
                    for tok in frame.chunks_exact(d) {
                        pooled.iter_mut().zip(tok).for_each(|(p, &t)| *p += t);
                    }
                    pooled.iter_mut().for_each(|p| *p /= n as f64);
                    pooled
                }
            })
            .collect())
    }

    /// Per-dimension std of student bottleneck tokens over `frames`, in chunks of `chunk` frames.
    pub fn probe_std(&self, student: &ParamStore, frames: &[&[u8]], chunk: usize) -> Result<Vec<f64>> {
        let d = self.cfg.embed_dim;
        let (mut sum, mut sq, mut count) = (vec![0.0; d], vec![0.0; d], 0usize);
        for part in frames.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let bound = student.bind_frozen(&mut tape);
            let tokens = self.encode(&mut tape, &bound, part)?;
            for row in tape.value(tokens).chunks_exact(d) {
                for (k, &v) in row.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                count += 1;
            }
        }
        if count < 2 {
            return Err(Error::Usage("probe set needs at least two tokens".into()));
        }
        let m = count as f64;
        Ok(sum
            .iter()
            .zip(&sq)
            .map(|(&s, &q)| ((q - s * s / m) / (m - 1.0)).max(0.0).sqrt())
            .collect())
    }
}

fn weighted_total<const K: usize>(tape: &mut Tape, parts: [(Var, f64); K]) -> Var {
    let mut acc: Option<Var> = None;
    for (v, w) in parts {
        let term = tape.scale(v, w);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    acc.expect("at least one term")
}

/// Mean absolute difference over all entries.
pub fn loss_align(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let (sp, st) = (tape.shape(pred), tape.shape(target));
    if sp != st {
        return Err(Error::Usage(format!("loss_align: prediction {sp} vs target {st}")));
    }
    if sp.len() == 0 {
        return Ok(tape.scalar(0.0));
    }
    let diff = tape.sub(pred, target);
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

fn centered(tape: &mut Tape, z: Var, op: &str) -> Result<(Var, usize, usize)> {
    let s = tape.shape(z);
    if s.rows < 2 {
        return Err(Error::Usage(format!("{op} needs at least 2 samples, got {}", s.rows)));
    }
    let mean = tape.mean_rows(z);
    Ok((tape.sub(z, mean), s.rows, s.cols))
}

/// Unbiased per-column variance [1, D] of rows of `centered`.
fn column_variance(tape: &mut Tape, centered: Var, rows: usize) -> Var {
    let sq = tape.square(centered);
    let total = tape.sum_rows(sq);
    tape.scale(total, 1.0 / (rows as f64 - 1.0))
}

/// Hinge on the per-dimension std: `(1/D)·Σ max(0, 1 − sqrt(Var + eps))`.
pub fn loss_var(tape: &mut Tape, z: Var, eps: f64) -> Result<Var> {
    let (c, rows, _) = centered(tape, z, "loss_var")?;
    let var = column_variance(tape, c, rows);
    let shifted = tape.affine(var, 1.0, eps);
    let std = tape.sqrt(shifted);
    let gap = tape.affine(std, -1.0, 1.0);
    let hinge = tape.relu(gap);
    Ok(tape.mean(hinge))
}

/// `(1/D)·Σ_{i≠j} Cov_ij²` with the unbiased covariance.
pub fn loss_cov(tape: &mut Tape, z: Var) -> Result<Var> {
    let (c, rows, d) = centered(tape, z, "loss_cov")?;
    let ct = tape.transpose(c);
    let gram = tape.matmul(ct, c);
    let cov = tape.scale(gram, 1.0 / (rows as f64 - 1.0));
    let cov_sq = tape.square(cov);
    let all = tape.sum(cov_sq);
    let var = column_variance(tape, c, rows);
    let var_sq = tape.square(var);
    let diag = tape.sum(var_sq);
    let off = tape.sub(all, diag);
    Ok(tape.scale(off, 1.0 / d as f64))
}

/// Optimizers for the trainable student and predictor.
#[derive(Clone, Debug)]
pub struct EncoderTrainer {
    pub student_opt: Adam,
    pub predictor_opt: Adam,
}

impl EncoderTrainer {
    pub fn new(lr: f64) -> Self {
        Self { student_opt: Adam::new(AdamConfig::with_lr(lr)), predictor_opt: Adam::new(AdamConfig::with_lr(lr)) }
    }

    /// One optimizer step on the student and predictor, then one teacher EMA update.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        encoder: &Encoder,
        params: &mut EncoderParams,
        frames: &[&[u8]],
        rng: &mut R,
    ) -> Result<EncoderLossValues> {
        let cfg = encoder.config();
        let masks: Vec<_> = frames.iter().map(|_| mask_random_patches(cfg.tokens(), cfg.mask_ratio, rng)).collect();
        let mut tape = Tape::new();
        let student = params.student.bind(&mut tape);
        let teacher = params.teacher.bind_frozen(&mut tape);
        let predictor = params.predictor.bind(&mut tape);
        let losses = encoder.loss_encoder_total(&mut tape, &student, &teacher, &predictor, frames, &masks)?;
        let values = EncoderLossValues {
            total: tape.item(losses.total),
            align: tape.item(losses.align),
            var: tape.item(losses.var),
            cov: tape.item(losses.cov),
        };
        for (name, v) in [("total", values.total), ("align", values.align), ("var", values.var), ("cov", values.cov)] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("encoder loss_{name} is {v}")));
            }
        }
        let grads = tape.backward(losses.total);
        params.student.accumulate(&student, &grads);
        params.predictor.accumulate(&predictor, &grads);
        self.student_opt.step(&mut params.student)?;
        self.predictor_opt.step(&mut params.predictor)?;
        ema_update(&mut params.teacher, &params.student, cfg.tau)?;
        Ok(values)
    }
}
