//! Feed-forward and recurrent building blocks over a [`Tape`].
//!
//! Layers only hold parameter names; values live in a [`ParamStore`] and are
//! looked up through the [`Bound`] handles of the current tape.

use rand::Rng;

use crate::error::NnError;
use crate::params::{Bound, Init, ParamStore};
use crate::tape::{Shape, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Silu,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Silu => tape.silu(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// `y = x·W + b` with W: in×out and b: 1×out.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self { weight: format!("{prefix}.w"), bias: format!("{prefix}.b"), in_dim, out_dim }
    }

    /// Fan-in truncated-normal weights scaled by `scale` (zeros when `scale == 0`) and zero bias.
    pub fn register<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        scale: f64,
        rng: &mut R,
    ) -> Result<(), NnError> {
        let init = if scale == 0.0 { Init::Zeros } else { Init::TruncatedNormalFanIn { scale } };
        store.add(&self.weight, Shape::new(self.in_dim, self.out_dim), init, rng)?;
        store.add(&self.bias, Shape::new(1, self.out_dim), Init::Zeros, rng)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var, NnError> {
        let s = tape.shape(x);
        if s.cols != self.in_dim {
            return Err(NnError::Shape(format!(
                "{}: expected input width {}, got {s}",
                self.weight, self.in_dim
            )));
        }
        let w = params.get(&self.weight)?;
        let b = params.get(&self.bias)?;
        if tape.shape(w) != Shape::new(self.in_dim, self.out_dim) {
            return Err(NnError::Shape(format!("{}: stored shape {}", self.weight, tape.shape(w))));
        }
        let xw = tape.matmul(x, w);
        Ok(tape.add(xw, b))
    }
}

/// Stack of affine layers with a shared hidden activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new(prefix: &str, dims: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{prefix}.l{i}"), w[0], w[1]))
            .collect();
        Self { layers, hidden, output }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    /// Hidden layers get unit fan-in scaling; the last layer gets `output_scale`.
    pub fn register<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        output_scale: f64,
        rng: &mut R,
    ) -> Result<(), NnError> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.register(store, if i == last { output_scale } else { 1.0 }, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var, NnError> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, params, h)?;
            h = if i == last { self.output.apply(tape, h) } else { self.hidden.apply(tape, h) };
        }
        Ok(h)
    }
}

/// Gated-tanh recurrent cell with reset and update gates.
///
/// ```text
/// r = σ(x·Wr + h·Ur + br)
/// u = σ(x·Wu + h·Uu + bu)
/// c = tanh(x·Wc + (r⊙h)·Uc + bc)
/// h' = u⊙c + (1 − u)⊙h
/// ```
/// With |h| < 1 componentwise the output stays inside (−1, 1).
#[derive(Clone, Debug)]
pub struct GatedRecurrentCell {
    prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GatedRecurrentCell {
    pub fn new(prefix: &str, input_dim: usize, hidden_dim: usize) -> Self {
        Self { prefix: prefix.to_string(), input_dim, hidden_dim }
    }

    fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), NnError> {
        let (i, h) = (self.input_dim, self.hidden_dim);
        let init = Init::TruncatedNormalFanIn { scale: 1.0 };
        store.add(&self.name("wx"), Shape::new(i, 3 * h), init, rng)?;
        store.add(&self.name("wh"), Shape::new(h, 2 * h), init, rng)?;
        store.add(&self.name("whc"), Shape::new(h, h), init, rng)?;
        store.add(&self.name("b"), Shape::new(1, 3 * h), Init::Zeros, rng)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, h: Var, x: Var) -> Result<Var, NnError> {
        let (sh, sx) = (tape.shape(h), tape.shape(x));
        if sh.cols != self.hidden_dim {
            return Err(NnError::Shape(format!(
                "{}: hidden width {} expected, got {sh}",
                self.prefix, self.hidden_dim
            )));
        }
        if sx.cols != self.input_dim || sx.rows != sh.rows {
            return Err(NnError::Shape(format!(
                "{}: input {sx} incompatible with width {} and batch {}",
                self.prefix, self.input_dim, sh.rows
            )));
        }
        let hd = self.hidden_dim;
        let wx = params.get(&self.name("wx"))?;
        let wh = params.get(&self.name("wh"))?;
        let whc = params.get(&self.name("whc"))?;
        let b = params.get(&self.name("b"))?;

        let xa = tape.matmul(x, wx);
        let xa = tape.add(xa, b);
        let ha = tape.matmul(h, wh);
        let x_gates = tape.slice_cols(xa, 0, 2 * hd);
        let gates = tape.add(x_gates, ha);
        let gates = tape.sigmoid(gates);
        let reset = tape.slice_cols(gates, 0, hd);
        let update = tape.slice_cols(gates, hd, hd);

        let rh = tape.mul(reset, h);
        let rhc = tape.matmul(rh, whc);
        let xc = tape.slice_cols(xa, 2 * hd, hd);
        let cand = tape.add(xc, rhc);
        let cand = tape.tanh(cand);

        let keep = tape.affine(update, -1.0, 1.0);
        let a = tape.mul(update, cand);
        let bkeep = tape.mul(keep, h);
        Ok(tape.add(a, bkeep))
    }
}
