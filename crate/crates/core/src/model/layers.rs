//! Parameter storage and the small building blocks of the detector.

use densup_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masks::FullMask;

/// Ordered named parameters. Layers refer to entries by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Keeps the first `n` entries.
    pub fn truncate(&mut self, n: usize) {
        self.names.truncate(n);
        self.tensors.truncate(n);
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| Ok(tape.param(t.clone())?))
            .collect()
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Replaces the values from a named list that must match names and shapes
    /// exactly; every mismatch is reported.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        let mut problems = Vec::new();
        let given: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        for (i, name) in self.names.iter().enumerate() {
            match named.iter().find(|(n, _)| n == name) {
                None => problems.push(format!("missing {name}")),
                Some((_, t)) if t.shape() != self.tensors[i].shape() => problems.push(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )),
                Some(_) => {}
            }
        }
        for n in given {
            if !self.names.iter().any(|m| m == n) {
                problems.push(format!("unexpected {n}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::ArchitectureMismatch(problems.join("; ")));
        }
        for (name, t) in named {
            *self.get_mut(&name).expect("checked above") = t;
        }
        Ok(())
    }
}

/// Uniform Glorot initialisation.
fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("fan_in*fan_out entries")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_bias(store, rng, name, fan_in, fan_out, 0.0)
    }

    pub fn with_bias(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: f64,
    ) -> Self {
        let w = store.push(format!("{name}.w"), glorot(rng, fan_in, fan_out));
        let b = store.push(format!("{name}.b"), Tensor::full(vec![fan_out], bias));
        Self { w, b }
    }

    /// Zero weights with a constant bias.
    pub fn constant(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: f64) -> Self {
        let w = store.push(format!("{name}.w"), Tensor::zeros(vec![fan_in, fan_out]));
        let b = store.push(format!("{name}.b"), Tensor::full(vec![fan_out], bias));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        Ok(tape.add_row(y, p[self.b])?)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: [usize; 3],
        zero_out: bool,
    ) -> Self {
        let hidden = Linear::new(store, rng, &format!("{name}.0"), dims[0], dims[1]);
        let out = if zero_out {
            Linear::constant(store, &format!("{name}.1"), dims[1], dims[2], 0.0)
        } else {
            Linear::new(store, rng, &format!("{name}.1"), dims[1], dims[2])
        };
        Self { hidden, out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, p, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Attention mask already placed on the tape.
#[derive(Debug, Clone, Copy)]
pub struct MaskVars {
    pub bias: Var,
    pub multiplier: Option<Var>,
}

impl MaskVars {
    pub fn new(tape: &mut Tape, mask: &FullMask) -> Result<Self> {
        Ok(Self {
            bias: tape.constant(mask.bias.clone())?,
            multiplier: mask
                .multiplier
                .as_ref()
                .map(|m| tape.constant(m.clone()))
                .transpose()?,
        })
    }
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            heads,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        query: Var,
        key: Var,
        value: Var,
        mask: Option<MaskVars>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, p, query)?;
        let k = self.k.forward(tape, p, key)?;
        let v = self.v.forward(tape, p, value)?;
        let d = tape.shape(q)?[1];
        if d % self.heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {} heads", self.heads)));
        }
        let dh = d / self.heads;
        let kt = tape.transpose(k)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, kt, v)
            } else {
                (
                    tape.narrow(q, 1, h * dh, dh)?,
                    tape.narrow(kt, 0, h * dh, dh)?,
                    tape.narrow(v, 1, h * dh, dh)?,
                )
            };
            let s = tape.matmul(qh, kh)?;
            let mut s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
            if let Some(m) = mask {
                if let Some(mult) = m.multiplier {
                    s = tape.mul(s, mult)?;
                }
                s = tape.add(s, m.bias)?;
            }
            let a = tape.softmax(s, 1)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        self.o.forward(tape, p, o)
    }
}
