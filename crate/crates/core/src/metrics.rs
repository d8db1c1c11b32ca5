//! Evaluation metrics: episode reward, collision rate, Fréchet distance.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub episode_id: u64,
    /// Undiscounted sum of per-step rewards.
    pub reward_sum: f64,
    pub collided: bool,
    pub length: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

fn require(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Usage("metrics need at least one episode".into()));
    }
    Ok(())
}

/// Mean episode return; sample (N−1) standard deviation, 0 for one episode.
pub fn average_reward(records: &[EvalRecord]) -> Result<MeanStd> {
    require(records)?;
    let n = records.len() as f64;
    let mean = records.iter().map(|r| r.reward_sum).sum::<f64>() / n;
    let std = if records.len() < 2 {
        0.0
    } else {
        (records.iter().map(|r| (r.reward_sum - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(MeanStd { mean, std })
}

/// Fraction of collided episodes; population standard deviation of the 0/1 indicator.
pub fn collision_rate(records: &[EvalRecord]) -> Result<MeanStd> {
    require(records)?;
    let n = records.len() as f64;
    let rate = records.iter().filter(|r| r.collided).count() as f64 / n;
    let var = records.iter().map(|r| (f64::from(u8::from(r.collided)) - rate).powi(2)).sum::<f64>() / n;
    Ok(MeanStd { mean: rate, std: var.sqrt() })
}

/// `M × d` samples, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    samples: DMatrix<f64>,
}

impl FeatureSet {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.len() < 2 || d == 0 {
            return Err(Error::Usage(format!("feature set needs at least 2 non-empty samples, got {}", rows.len())));
        }
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Usage("feature rows differ in width".into()));
        }
        Ok(Self { samples: DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]) })
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    /// Mean and unbiased covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.samples.nrows() as f64;
        let mean = self.samples.row_mean().transpose();
        let mut centered = self.samples.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (m - 1.0);
        (mean, cov)
    }
}

/// `‖μr − μg‖² + Tr(Σr + Σg − 2·(Σr^{1/2} Σg Σr^{1/2})^{1/2})` with `eps_reg·I`
/// added to both covariances.
pub fn frechet_from_moments(
    mu_r: &DVector<f64>,
    cov_r: &DMatrix<f64>,
    mu_g: &DVector<f64>,
    cov_g: &DMatrix<f64>,
    eps_reg: f64,
) -> Result<f64> {
    let d = mu_r.len();
    if mu_g.len() != d || cov_r.shape() != (d, d) || cov_g.shape() != (d, d) {
        return Err(Error::Usage(format!("Fréchet inputs differ in dimension ({d} vs {})", mu_g.len())));
    }
    let reg = DMatrix::<f64>::identity(d, d) * eps_reg;
    let sr = symmetrize(&(cov_r + &reg));
    let sg = symmetrize(&(cov_g + &reg));
    let root_r = psd_sqrt(&sr)?;
    let inner = symmetrize(&(&root_r * &sg * &root_r));
    let trace_root = eigenvalues(&inner)?.iter().map(|&l| l.max(0.0).sqrt()).sum::<f64>();
    Ok((mu_r - mu_g).norm_squared() + sr.trace() + sg.trace() - 2.0 * trace_root)
}

pub fn frechet_distance(real: &FeatureSet, gen: &FeatureSet, eps_reg: f64) -> Result<f64> {
    if real.dim() != gen.dim() {
        return Err(Error::Usage(format!("feature dimensions differ: {} vs {}", real.dim(), gen.dim())));
    }
    let (mr, cr) = real.moments();
    let (mg, cg) = gen.moments();
    frechet_from_moments(&mr, &cr, &mg, &cg, eps_reg)
}

/// Per-episode video feature: time mean of per-frame embeddings.
pub fn episode_feature(frames: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = frames.first().map(Vec::len).ok_or_else(|| Error::Usage("episode without frames".into()))?;
    let mut out = vec![0.0; d];
    for f in frames {
        if f.len() != d {
            return Err(Error::Usage("frame embeddings differ in width".into()));
        }
        out.iter_mut().zip(f).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= frames.len() as f64);
    Ok(out)
}

/// Fréchet distance between real and imagined episodes, each a list of per-frame embeddings.
pub fn fvd_over_rollouts(real: &[Vec<Vec<f64>>], imagined: &[Vec<Vec<f64>>], eps_reg: f64) -> Result<f64> {
    let feats = |eps: &[Vec<Vec<f64>>]| -> Result<FeatureSet> {
        FeatureSet::from_rows(&eps.iter().map(|e| episode_feature(e)).collect::<Result<Vec<_>>>()?)
    };
    frechet_distance(&feats(real)?, &feats(imagined)?, eps_reg)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let e = SymmetricEigen::try_new(m.clone(), 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))?;
    if e.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite eigenvalue".into()));
    }
    Ok(e.eigenvalues)
}

/// Square root of a symmetric matrix with negative eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = SymmetricEigen::try_new(m.clone(), 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))?;
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose())
}

/// One row of the evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub env: String,
    pub metric: String,
    pub value: MeanStd,
    pub episodes: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    /// Collision-rate and average-reward rows for one environment.
    pub fn from_records(env: &str, records: &[EvalRecord]) -> Result<Self> {
        let n = records.len();
        Ok(Self {
            rows: vec![
                ReportRow { env: env.into(), metric: "collision_rate".into(), value: collision_rate(records)?, episodes: n },
                ReportRow { env: env.into(), metric: "average_reward".into(), value: average_reward(records)?, episodes: n },
            ],
        })
    }

    pub fn get(&self, metric: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("env,metric,mean,std,episodes\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.env, r.metric, r.value.mean, r.value.std, r.episodes));
        }
        s
    }

    /// Text table, one row per metric, values as `mean ± std`.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (metric, title) in [
            ("collision_rate", "Collision rate (mean ± std, population std)"),
            ("average_reward", "Average episode reward (mean ± std, sample std)"),
        ] {
            let rows: Vec<_> = self.rows.iter().filter(|r| r.metric == metric).collect();
            if rows.is_empty() {
                continue;
            }
            s.push_str(&format!("{title} over {} evaluation episodes\n", rows[0].episodes));
            s.push_str(&format!("{:<12} | {:>20}\n", "env", "mean ± std"));
            s.push_str(&format!("{:-<12}-+-{:->20}\n", "", ""));
            for r in rows {
                s.push_str(&format!("{:<12} | {:>20}\n", r.env, r.value.to_string()));
            }
            s.push('\n');
        }
        s
    }
}
