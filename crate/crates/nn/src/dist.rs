//! Diagonal-Gaussian, Bernoulli and categorical distributions whose
//! parameters are tape values, so log-probabilities, entropies and KL terms
//! are differentiable. Every per-sample quantity is a `rows × 1` column.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::NnError;
use crate::tape::{Shape, Tape, Var};

/// Admissible range of Gaussian log standard deviations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogStdRange {
    pub min: f64,
    pub max: f64,
}

impl Default for LogStdRange {
    fn default() -> Self {
        Self { min: -5.0, max: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistKind {
    DiagGaussian,
    Bernoulli,
    Categorical,
}

#[derive(Clone, Copy, Debug)]
pub enum DistributionSpec {
    /// Independent Gaussians per column; `log_std` already clamped.
    DiagGaussian { mean: Var, log_std: Var },
    /// One binary variable per row, probability `σ(logit)`.
    Bernoulli { logit: Var },
    /// Row-wise categorical; `log_probs` are normalized.
    Categorical { log_probs: Var },
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl DistributionSpec {
    pub fn diag_gaussian(tape: &mut Tape, mean: Var, raw_log_std: Var, range: LogStdRange) -> Self {
        assert_eq!(tape.shape(mean), tape.shape(raw_log_std), "gaussian mean/log-std shapes");
        let log_std = tape.clamp(raw_log_std, range.min, range.max);
        Self::DiagGaussian { mean, log_std }
    }

    /// Split a `rows × 2d` head output into mean and log-std halves.
    pub fn gaussian_from_head(tape: &mut Tape, head: Var, range: LogStdRange) -> Result<Self, NnError> {
        let s = tape.shape(head);
        if s.cols % 2 != 0 {
            return Err(NnError::Shape(format!("gaussian head needs an even width, got {s}")));
        }
        let d = s.cols / 2;
        let mean = tape.slice_cols(head, 0, d);
        let raw = tape.slice_cols(head, d, d);
        Ok(Self::diag_gaussian(tape, mean, raw, range))
    }

    pub fn bernoulli(logit: Var) -> Self {
        Self::Bernoulli { logit }
    }

    pub fn categorical(tape: &mut Tape, logits: Var) -> Self {
        Self::Categorical { log_probs: tape.log_softmax(logits) }
    }

    pub fn kind(&self) -> DistKind {
        match self {
            Self::DiagGaussian { .. } => DistKind::DiagGaussian,
            Self::Bernoulli { .. } => DistKind::Bernoulli,
            Self::Categorical { .. } => DistKind::Categorical,
        }
    }

    fn primary(&self) -> Var {
        match *self {
            Self::DiagGaussian { mean, .. } => mean,
            Self::Bernoulli { logit } => logit,
            Self::Categorical { log_probs } => log_probs,
        }
    }

    pub fn shape(&self, tape: &Tape) -> Shape {
        tape.shape(self.primary())
    }

    /// The same distribution with gradients blocked through its parameters.
    pub fn detach(&self, tape: &mut Tape) -> Self {
        match *self {
            Self::DiagGaussian { mean, log_std } => Self::DiagGaussian {
                mean: tape.stop_gradient(mean),
                log_std: tape.stop_gradient(log_std),
            },
            Self::Bernoulli { logit } => Self::Bernoulli { logit: tape.stop_gradient(logit) },
            Self::Categorical { log_probs } => {
                Self::Categorical { log_probs: tape.stop_gradient(log_probs) }
            }
        }
    }

    /// Standard deviation of a Gaussian.
    pub fn std(&self, tape: &mut Tape) -> Result<Var, NnError> {
        match *self {
            Self::DiagGaussian { log_std, .. } => Ok(tape.exp(log_std)),
            _ => Err(NnError::KindMismatch("std of a non-Gaussian".into())),
        }
    }

    /// Gaussian: `mean + std·noise` (reparameterized); others draw a
    /// constant sample (0/1 for Bernoulli, one-hot rows for categorical).
    pub fn sample<R: Rng + ?Sized>(&self, tape: &mut Tape, rng: &mut R) -> Var {
        let shape = self.shape(tape);
        match *self {
            Self::DiagGaussian { .. } => {
                let noise: Vec<f64> = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
                self.sample_with_noise(tape, noise).expect("gaussian")
            }
            Self::Bernoulli { logit } => {
                let v: Vec<f64> = tape
                    .value(logit)
                    .iter()
                    .map(|&l| if rng.random::<f64>() < crate::tape::sigmoid(l) { 1.0 } else { 0.0 })
                    .collect();
                tape.constant(v, shape)
            }
            Self::Categorical { .. } => {
                let idx = self.sample_indices(tape, rng).expect("categorical");
                one_hot(tape, &idx, shape.cols)
            }
        }
    }

    /// Reparameterized Gaussian sample with caller-supplied standard-normal noise.
    pub fn sample_with_noise(&self, tape: &mut Tape, noise: Vec<f64>) -> Result<Var, NnError> {
        match *self {
            Self::DiagGaussian { mean, log_std } => {
                let shape = tape.shape(mean);
                if noise.len() != shape.len() {
                    return Err(NnError::Shape(format!("noise of {} for {shape}", noise.len())));
                }
                let eps = tape.constant(noise, shape);
                let std = tape.exp(log_std);
                let scaled = tape.mul(std, eps);
                Ok(tape.add(mean, scaled))
            }
            _ => Err(NnError::KindMismatch("noise sampling needs a Gaussian".into())),
        }
    }

    /// One category index per row.
    pub fn sample_indices<R: Rng + ?Sized>(&self, tape: &Tape, rng: &mut R) -> Result<Vec<usize>, NnError> {
        match *self {
            Self::Categorical { log_probs } => {
                let cols = tape.shape(log_probs).cols;
                Ok(tape
                    .value(log_probs)
                    .chunks_exact(cols)
                    .map(|row| {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        for (k, lp) in row.iter().enumerate() {
                            acc += lp.exp();
                            if u < acc {
                                return k;
                            }
                        }
                        cols - 1
                    })
                    .collect())
            }
            _ => Err(NnError::KindMismatch("indices need a categorical".into())),
        }
    }

    /// Mean for Gaussians, most likely value otherwise (as a constant for discrete kinds).
    pub fn mode(&self, tape: &mut Tape) -> Var {
        match *self {
            Self::DiagGaussian { mean, .. } => mean,
            Self::Bernoulli { logit } => {
                let v = tape.value(logit).iter().map(|&l| if l > 0.0 { 1.0 } else { 0.0 }).collect();
                let s = tape.shape(logit);
                tape.constant(v, s)
            }
            Self::Categorical { log_probs } => {
                let cols = tape.shape(log_probs).cols;
                let idx: Vec<usize> = tape
                    .value(log_probs)
                    .chunks_exact(cols)
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                            .0
                    })
                    .collect();
                one_hot(tape, &idx, cols)
            }
        }
    }

    /// Row-wise probabilities (Bernoulli: `rows × 1`; categorical: `rows × K`).
    pub fn probs(&self, tape: &mut Tape) -> Result<Var, NnError> {
        match *self {
            Self::Bernoulli { logit } => Ok(tape.sigmoid(logit)),
            Self::Categorical { log_probs } => Ok(tape.exp(log_probs)),
            Self::DiagGaussian { .. } => Err(NnError::KindMismatch("probs of a Gaussian".into())),
        }
    }

    /// Log-density of `x`, summed over columns → `rows × 1`. Categorical
    /// values are one-hot rows; Bernoulli values are 0/1.
    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        let s = self.shape(tape);
        if tape.shape(x) != s {
            return Err(NnError::Shape(format!("log_prob value {} for {s}", tape.shape(x))));
        }
        Ok(match *self {
            Self::DiagGaussian { mean, log_std } => {
                let diff = tape.sub(x, mean);
                let neg = tape.scale(log_std, -1.0);
                let inv = tape.exp(neg);
                let z = tape.mul(diff, inv);
                let z2 = tape.square(z);
                let quad = tape.affine(z2, -0.5, -HALF_LN_2PI);
                let lp = tape.sub(quad, log_std);
                tape.sum_cols(lp)
            }
            Self::Bernoulli { logit } => {
                // x·l − softplus(l)
                let xl = tape.mul(x, logit);
                let sp = tape.softplus(logit);
                let lp = tape.sub(xl, sp);
                tape.sum_cols(lp)
            }
            Self::Categorical { log_probs } => {
                let picked = tape.mul(x, log_probs);
                tape.sum_cols(picked)
            }
        })
    }

    /// Closed-form entropy → `rows × 1`.
    pub fn entropy(&self, tape: &mut Tape) -> Var {
        match *self {
            Self::DiagGaussian { log_std, .. } => {
                let h = tape.affine(log_std, 1.0, 0.5 + HALF_LN_2PI);
                tape.sum_cols(h)
            }
            Self::Bernoulli { logit } => {
                // softplus(l) − l·σ(l)
                let sp = tape.softplus(logit);
                let p = tape.sigmoid(logit);
                let lp = tape.mul(logit, p);
                let h = tape.sub(sp, lp);
                tape.sum_cols(h)
            }
            Self::Categorical { log_probs } => {
                let p = tape.exp(log_probs);
                let plp = tape.mul(p, log_probs);
                let s = tape.sum_cols(plp);
                tape.scale(s, -1.0)
            }
        }
    }

    /// `KL(self ‖ other)` summed over columns → `rows × 1`.
    pub fn kl(&self, tape: &mut Tape, other: &DistributionSpec) -> Result<Var, NnError> {
        if self.kind() != other.kind() {
            return Err(NnError::KindMismatch(format!("KL between {:?} and {:?}", self.kind(), other.kind())));
        }
        let (s1, s2) = (self.shape(tape), other.shape(tape));
        if s1 != s2 {
            return Err(NnError::Shape(format!("KL between {s1} and {s2}")));
        }
        Ok(match (*self, *other) {
            (
                Self::DiagGaussian { mean: m1, log_std: l1 },
                Self::DiagGaussian { mean: m2, log_std: l2 },
            ) => {
                // l2 − l1 + (e^{2 l1} + (m1 − m2)²)·e^{−2 l2}/2 − 1/2
                let dl = tape.sub(l2, l1);
                let two_l1 = tape.scale(l1, 2.0);
                let var1 = tape.exp(two_l1);
                let dm = tape.sub(m1, m2);
                let dm2 = tape.square(dm);
                let num = tape.add(var1, dm2);
                let neg_two_l2 = tape.scale(l2, -2.0);
                let inv_var2 = tape.exp(neg_two_l2);
                let ratio = tape.mul(num, inv_var2);
                let half = tape.affine(ratio, 0.5, -0.5);
                let kl = tape.add(dl, half);
                tape.sum_cols(kl)
            }
            (Self::Bernoulli { logit: a }, Self::Bernoulli { logit: b }) => {
                // p(log p − log q) + (1−p)(log(1−p) − log(1−q)), log σ(l) = −softplus(−l)
                let p = tape.sigmoid(a);
                let na = tape.scale(a, -1.0);
                let nb = tape.scale(b, -1.0);
                let spa_n = tape.softplus(na);
                let spb_n = tape.softplus(nb);
                let spa = tape.softplus(a);
                let spb = tape.softplus(b);
                let d1 = tape.sub(spb_n, spa_n);
                let d0 = tape.sub(spb, spa);
                let q = tape.affine(p, -1.0, 1.0);
                let t1 = tape.mul(p, d1);
                let t0 = tape.mul(q, d0);
                let kl = tape.add(t1, t0);
                tape.sum_cols(kl)
            }
            (Self::Categorical { log_probs: a }, Self::Categorical { log_probs: b }) => {
                let p = tape.exp(a);
                let d = tape.sub(a, b);
                let t = tape.mul(p, d);
                tape.sum_cols(t)
            }
            _ => unreachable!(),
        })
    }
}

/// Constant `rows × classes` one-hot matrix.
pub fn one_hot(tape: &mut Tape, indices: &[usize], classes: usize) -> Var {
    let mut v = vec![0.0; indices.len() * classes];
    for (r, &k) in indices.iter().enumerate() {
        assert!(k < classes, "class {k} out of {classes}");
        v[r * classes + k] = 1.0;
    }
    tape.constant(v, Shape::new(indices.len(), classes))
}

/// Closed-form `KL(N(m1, s1²) ‖ N(m2, s2²))` summed over dimensions.
pub fn gaussian_kl(m1: &[f64], log_s1: &[f64], m2: &[f64], log_s2: &[f64]) -> f64 {
    (0..m1.len())
        .map(|i| {
            let (v1, v2) = ((2.0 * log_s1[i]).exp(), (2.0 * log_s2[i]).exp());
            log_s2[i] - log_s1[i] + (v1 + (m1[i] - m2[i]).powi(2)) / (2.0 * v2) - 0.5
        })
        .sum()
}

/// `0.5·ln(2π)`, the unit-variance Gaussian negative log-density at its mean.
pub fn half_ln_two_pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}
