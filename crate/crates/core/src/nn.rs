//! Parameter storage, layers and optimizer plumbing shared by the models.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::Optimizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// Box-Muller
fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

/// Named trainable tensors.
///
/// A fresh store initializes parameters on first request; a store rebuilt from a
/// checkpoint is strict and fails on any name it does not already hold.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    strict: bool,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(precision: Precision, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype: precision.dtype(),
            strict: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let dtype = tensors.values().next().map_or(DType::F32, Tensor::dtype);
        let vars = tensors
            .into_iter()
            .map(|(k, t)| Ok((k, Var::from_tensor(&t.to_dtype(dtype)?)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            vars,
            dtype,
            strict: true,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape.to_vec(),
                    actual: v.dims().to_vec(),
                });
            }
            return Ok(v.as_tensor().clone());
        }
        if self.strict {
            return Err(Error::CorruptCheckpoint(format!("missing parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| std * standard_normal(&mut self.rng))
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Replaces a parameter wholesale, e.g. to grow an embedding table.
    pub fn replace(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?.copy()?)?;
        self.vars.insert(name.to_string(), var);
        Ok(())
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies every tensor into fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let vars = self
            .vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            vars,
            dtype: self.dtype,
            strict: true,
            rng: self.rng.clone(),
        })
    }

    /// True when both stores hold the same names with bit-identical values.
    pub fn bit_identical(&self, other: &ParamStore) -> Result<bool> {
        if self.vars.len() != other.vars.len() {
            return Ok(false);
        }
        for ((ka, a), (kb, b)) in self.vars.iter().zip(&other.vars) {
            if ka != kb || a.dims() != b.dims() {
                return Ok(false);
            }
            let a = a.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let b = b.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            weight: store.get(&format!("{name}.weight"), &[output, input], Init::Uniform(bound))?,
            bias: store.get(&format!("{name}.bias"), &[output], Init::Uniform(bound))?,
        })
    }

    /// `(.., input) -> (.., output)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match x.rank() {
            2 => x.matmul(&self.weight.t()?)?,
            _ => x.broadcast_matmul(&self.weight.t()?)?,
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// 1-D convolution over `(batch, channels, time)`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
    stride: usize,
    dilation: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((input * kernel) as f64).sqrt();
        Ok(Self {
            weight: store.get(
                &format!("{name}.weight"),
                &[output, input, kernel],
                Init::Uniform(bound),
            )?,
            bias: store.get(&format!("{name}.bias"), &[output], Init::Uniform(bound))?,
            padding: dilation * (kernel - 1) / 2,
            stride,
            dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // explicit padding: candle's conv1d backward underflows on inputs shorter than
        // its own padding
        let x = if self.padding > 0 {
            x.pad_with_zeros(2, self.padding, self.padding)?
        } else {
            x.clone()
        };
        // one sample at a time: candle's kernel gradient is wrong for batches > 1
        let b = x.dim(0)?;
        let y = if b == 1 {
            x.conv1d(&self.weight, 0, self.stride, self.dilation, 1)?
        } else {
            let parts = (0..b)
                .map(|i| x.narrow(0, i, 1)?.conv1d(&self.weight, 0, self.stride, self.dilation, 1))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Tensor::cat(&parts, 0)?
        };
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: store.get(name, &[vocab, dim], Init::Normal(0.3))?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.table.dim(0).unwrap_or(0)
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Tensor> {
        let vocab = self.vocab();
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::IndexOutOfVocab { id, vocab });
        }
        let idx: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, ids.len(), &Device::Cpu)?;
        Ok(self.table.index_select(&idx, 0)?)
    }
}

/// LSTM cell with separate input and recurrent weights, gate order (i, f, g, o).
#[derive(Debug, Clone)]
pub struct LstmCell {
    w_input: Tensor,
    w_recurrent: Tensor,
    bias: Tensor,
    hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let bias_name = format!("{name}.bias");
        // forget-gate bias starts at one
        if !store.strict && !store.vars.contains_key(&bias_name) {
            let ones = Tensor::ones(hidden, store.dtype(), &Device::Cpu)?;
            let zeros = Tensor::zeros(hidden, store.dtype(), &Device::Cpu)?;
            let init = Tensor::cat(&[&zeros, &ones, &zeros, &zeros], 0)?;
            store.replace(&bias_name, &init)?;
        }
        let bias = store.get(&bias_name, &[4 * hidden], Init::Zeros)?;
        Ok(Self {
            w_input: store.get(
                &format!("{name}.w_input"),
                &[4 * hidden, input],
                Init::Uniform(bound),
            )?,
            w_recurrent: store.get(
                &format!("{name}.w_recurrent"),
                &[4 * hidden, hidden],
                Init::Uniform(bound),
            )?,
            bias,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Transposed slice of the input weight covering input columns `start..start + len`,
    /// shape `(len, 4H)`.
    pub fn input_weight_t(&self, start: usize, len: usize) -> Result<Tensor> {
        Ok(self.w_input.narrow(1, start, len)?.t()?.contiguous()?)
    }

    /// Input contribution to the gates, bias included: `(.., input) -> (.., 4H)`.
    pub fn project_input(&self, x: &Tensor) -> Result<Tensor> {
        let y = match x.rank() {
            2 => x.matmul(&self.w_input.t()?)?,
            _ => x.broadcast_matmul(&self.w_input.t()?)?,
        };
        Ok(y.broadcast_add(&self.bias)?)
    }

    /// One step from a precomputed input projection `(B, 4H)`.
    pub fn step_projected(&self, projected: &Tensor, state: &LstmState) -> Result<LstmState> {
        let gates = (projected + state.h.matmul(&self.w_recurrent.t()?)?)?;
        lstm_pointwise(&gates, &state.c, self.hidden)
    }

    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<LstmState> {
        self.step_projected(&self.project_input(x)?, state)
    }

    pub fn zero_state(&self, batch: usize, dtype: DType) -> Result<LstmState> {
        let z = Tensor::zeros((batch, self.hidden), dtype, &Device::Cpu)?;
        Ok(LstmState {
            h: z.clone(),
            c: z,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

fn lstm_pointwise(gates: &Tensor, c: &Tensor, hidden: usize) -> Result<LstmState> {
    let sig = candle_nn::ops::sigmoid(gates)?;
    let i = sig.narrow(D::Minus1, 0, hidden)?;
    let f = sig.narrow(D::Minus1, hidden, hidden)?;
    let o = sig.narrow(D::Minus1, 3 * hidden, hidden)?;
    let g = gates.narrow(D::Minus1, 2 * hidden, hidden)?.tanh()?;
    let c = ((f * c)? + (i * g)?)?;
    let h = (o * c.tanh()?)?;
    Ok(LstmState { h, c })
}

/// Bidirectional LSTM over a single `(L, input)` sequence, output `(L, 2H)`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    forward: LstmCell,
    backward: LstmCell,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input, hidden)?,
            backward: LstmCell::new(store, &format!("{name}.bwd"), input, hidden)?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let len = xs.dim(0)?;
        let dtype = xs.dtype();
        if len == 0 {
            return Ok(Tensor::zeros(
                (0, 2 * self.forward.hidden()),
                dtype,
                &Device::Cpu,
            )?);
        }
        let run = |cell: &LstmCell, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Tensor>> {
            let proj = cell.project_input(xs)?;
            let mut state = cell.zero_state(1, dtype)?;
            let mut out = vec![None; len];
            for t in order {
                state = cell.step_projected(&proj.narrow(0, t, 1)?, &state)?;
                out[t] = Some(state.h.clone());
            }
            Ok(out.into_iter().map(|h| h.expect("every step visited")).collect())
        };
        let fwd = run(&self.forward, &mut (0..len))?;
        let bwd = run(&self.backward, &mut (0..len).rev())?;
        let fwd = Tensor::cat(&fwd, 0)?;
        let bwd = Tensor::cat(&bwd, 0)?;
        Ok(Tensor::cat(&[&fwd, &bwd], 1)?)
    }
}

/// Seeded inverted-dropout masks, so stochastic passes are reproducible.
#[derive(Debug, Clone)]
pub struct DropoutRng {
    rng: ChaCha8Rng,
}

impl DropoutRng {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn apply(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        if p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let n = x.elem_count();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), &Device::Cpu)?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam {
    inner: candle_nn::AdamW,
    vars: Vec<Var>,
    clip: Option<f64>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, clip: Option<f64>) -> Result<Self> {
        Self::with_betas(vars, lr, (0.9, 0.999), clip)
    }

    pub fn with_betas(vars: Vec<Var>, lr: f64, betas: (f64, f64), clip: Option<f64>) -> Result<Self> {
        let params = candle_nn::ParamsAdamW {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        Ok(Self {
            inner: candle_nn::AdamW::new(vars.clone(), params)?,
            vars,
            clip,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }

    /// Backpropagates `loss` and updates the parameters; returns the pre-clip gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if let Some(max) = self.clip {
            if norm > max {
                let scale = max / (norm + 1e-6);
                for v in &self.vars {
                    if let Some(g) = grads.remove(v) {
                        grads.insert(v, (g * scale)?);
                    }
                }
            }
        }
        self.inner.step(&grads)?;
        Ok(norm)
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Parameter holding the largest relative error.
    pub worst_param: String,
}

/// Compares autograd gradients of `loss` with central finite differences, perturbing
/// every element of every parameter in `store` by `eps`.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    store: &ParamStore,
    loss: &dyn Fn() -> Result<Tensor>,
    eps: f64,
    floor: f64,
) -> Result<GradCheck> {
    let grads = loss()?.backward()?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst_param: String::new(),
    };
    for (name, var) in &store.vars {
        let shape = var.shape().clone();
        let dtype = var.dtype();
        let original: Vec<f64> = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?,
            None => vec![0.0; original.len()],
        };
        let mut probe = original.clone();
        for i in 0..original.len() {
            let mut eval = |value: f64| -> Result<f64> {
                probe[i] = value;
                var.set(&Tensor::from_slice(&probe, &shape, &Device::Cpu)?.to_dtype(dtype)?)?;
                scalar(&loss()?)
            };
            let plus = eval(original[i] + eps)?;
            let minus = eval(original[i] - eps)?;
            probe[i] = original[i];
            let numeric = (plus - minus) / (2.0 * eps);
            let abs = (analytic[i] - numeric).abs();
            let rel = abs / analytic[i].abs().max(numeric.abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
            }
            report.checked += 1;
        }
        var.set(&Tensor::from_slice(&original, &shape, &Device::Cpu)?.to_dtype(dtype)?)?;
    }
    Ok(report)
}
