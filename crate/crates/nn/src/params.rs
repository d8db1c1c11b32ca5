//! Named parameter arrays with gradient slots.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::NnError;
use crate::tape::{Gradients, Shape, Tape, Var};

/// Storage precision of parameter values.
///
/// Arithmetic is always done in `f64`. A store with `F32` precision rounds
/// every written value to the nearest `f32`, so it can be persisted in 4-byte
/// form and reloaded bit-exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub shape: Shape,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
}

/// Initialization scheme for a new entry.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Normal with std `scale / sqrt(rows)`, resampled outside two standard deviations.
    TruncatedNormalFanIn { scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    precision: Precision,
}

/// Tape handles for every entry of one store, created by [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
    trainable: bool,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, NnError> {
        self.vars.get(name).copied().ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn var(&self, name: &str) -> Var {
        self.get(name).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        Self { entries: BTreeMap::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Copy of this store at a different storage precision.
    pub fn with_precision(&self, precision: Precision) -> Self {
        let mut out = self.clone();
        out.precision = precision;
        for e in out.entries.values_mut() {
            e.values.iter_mut().for_each(|v| *v = precision.round(*v));
        }
        out
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: Shape,
        init: Init,
        rng: &mut R,
    ) -> Result<(), NnError> {
        if self.entries.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let n = shape.len();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::TruncatedNormalFanIn { scale } => {
                let std = scale / (shape.rows.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect()
            }
        };
        let values = values.into_iter().map(|v| self.precision.round(v)).collect();
        self.entries.insert(name.to_string(), ParamEntry { shape, values, grads: vec![0.0; n] });
        Ok(())
    }

    /// Insert an entry with explicit values.
    pub fn insert(&mut self, name: &str, shape: Shape, values: Vec<f64>) -> Result<(), NnError> {
        if values.len() != shape.len() {
            return Err(NnError::Shape(format!(
                "{name}: {} values for shape {shape}",
                values.len()
            )));
        }
        let values: Vec<f64> = values.into_iter().map(|v| self.precision.round(v)).collect();
        let grads = vec![0.0; values.len()];
        self.entries.insert(name.to_string(), ParamEntry { shape, values, grads });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry, NnError> {
        self.entries.get(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry, NnError> {
        self.entries.get_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    /// Overwrite one value, applying the store's precision.
    pub fn set_value(&mut self, name: &str, index: usize, v: f64) -> Result<(), NnError> {
        let p = self.precision;
        let e = self.get_mut(name)?;
        let len = e.values.len();
        let slot = e
            .values
            .get_mut(index)
            .ok_or_else(|| NnError::Shape(format!("{name}: index {index} out of {len}")))?;
        *slot = p.round(v);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.values.len()).sum()
    }

    /// Record every entry on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), tape.leaf(e.values.clone(), e.shape)))
            .collect();
        Bound { vars, trainable: true }
    }

    /// Record every entry as a constant; nothing downstream reaches these values in backward.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), tape.constant(e.values.clone(), e.shape)))
            .collect();
        Bound { vars, trainable: false }
    }

    /// Add the gradients of a backward pass into the gradient slots.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (name, var) in &bound.vars {
            if let (Some(entry), Some(g)) = (self.entries.get_mut(name), grads.get(*var)) {
                for (slot, &gv) in entry.grads.iter_mut().zip(g) {
                    *slot += gv;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grads.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.grads.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// True when every gradient slot is exactly zero.
    pub fn grads_all_zero(&self) -> bool {
        self.entries.values().all(|e| e.grads.iter().all(|&g| g == 0.0))
    }

    /// Names and shapes, used to compare store layouts.
    pub fn layout(&self) -> Vec<(String, Shape)> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.shape)).collect()
    }

    /// Check that `other` has the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<(), NnError> {
        for (name, e) in &self.entries {
            match other.entries.get(name) {
                None => return Err(NnError::MissingParam(name.clone())),
                Some(o) if o.shape != e.shape => {
                    return Err(NnError::Shape(format!(
                        "{name}: shape {} vs {}",
                        e.shape, o.shape
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(NnError::MissingParam(extra.clone()));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.values.iter().all(|v| v.is_finite()))
    }
}

/// `teacher ← tau·teacher + (1 − tau)·student`, elementwise. Never touches a tape.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, tau: f64) -> Result<(), NnError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(NnError::Config(format!("ema tau {tau} outside [0, 1]")));
    }
    teacher.check_layout(student)?;
    let p = teacher.precision;
    for (name, t) in teacher.entries.iter_mut() {
        let s = &student.entries[name];
        for (tv, &sv) in t.values.iter_mut().zip(&s.values) {
            *tv = p.round(tau * *tv + (1.0 - tau) * sv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new(Precision::F64);
        s.insert("w", Shape::new(1, vals.len()), vals.to_vec()).unwrap();
        s
    }

    #[test]
    fn ema_edge_cases() {
        let student = store(&[0.0, 2.0]);
        let mut teacher = store(&[1.0, -1.0]);
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher.get("w").unwrap().values, vec![1.0, -1.0]);
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher.get("w").unwrap().values, vec![0.0, 2.0]);
    }

    #[test]
    fn ema_one_step_default_tau() {
        let student = store(&[0.0]);
        let mut teacher = store(&[1.0]);
        ema_update(&mut teacher, &student, 0.996).unwrap();
        assert!((teacher.get("w").unwrap().values[0] - 0.996).abs() < 1e-15);
    }

    #[test]
    fn ema_converges_geometrically() {
        let student = store(&[0.25]);
        let mut teacher = store(&[1.25]);
        let tau: f64 = 0.9;
        for k in 1..=50 {
            ema_update(&mut teacher, &student, tau).unwrap();
            let gap = (teacher.get("w").unwrap().values[0] - 0.25).abs();
            assert!((gap - tau.powi(k)).abs() < 1e-12, "k={k} gap={gap}");
        }
    }

    #[test]
    fn ema_rejects_layout_mismatch() {
        let student = store(&[0.0, 1.0, 2.0]);
        let mut teacher = store(&[1.0]);
        assert!(ema_update(&mut teacher, &student, 0.5).is_err());
    }

    #[test]
    fn truncated_init_stays_within_two_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new(Precision::F64);
        s.add("w", Shape::new(16, 32), Init::TruncatedNormalFanIn { scale: 1.0 }, &mut rng).unwrap();
        let bound = 2.0 / 4.0;
        assert!(s.get("w").unwrap().values.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn f32_store_rounds_writes() {
        let mut s = ParamStore::new(Precision::F32);
        s.insert("w", Shape::new(1, 1), vec![0.1]).unwrap();
        assert_eq!(s.get("w").unwrap().values[0], 0.1f32 as f64);
    }
}
