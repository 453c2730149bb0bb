//! Small fully connected networks evaluated on row-major sample batches.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::util::{read_f64s, read_u64, sigmoid, write_f64s};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    fn code(self) -> u64 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::None => 2,
        }
    }

    fn from_code(c: u64) -> Option<Self> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Sigmoid),
            2 => Some(Activation::None),
            _ => None,
        }
    }
}

/// View of one layer inside an [`Mlp`] parameter vector.
#[derive(Clone, Copy, Debug)]
pub struct DenseLayer<'a> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out × in`, row-major.
    pub weight: &'a [f64],
    pub bias: &'a [f64],
    pub activation: Activation,
}

/// Multi-layer perceptron; all parameters live in one flat vector so the
/// optimizer and gradient buffers can treat it as a single block.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    pub params: Vec<f64>,
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    pub batch: usize,
    /// `inputs[l]` is the input of layer `l`; the final entry is the network output.
    pub values: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn input(&self) -> &[f64] {
        self.values.first().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

impl Mlp {
    /// Kaiming-uniform init for ReLU layers, Xavier-uniform for the rest; zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        let mut m = Self::zeros(dims, activations);
        let mut off = 0;
        for l in 0..activations.len() {
            let (fi, fo) = (dims[l], dims[l + 1]);
            let bound = match activations[l] {
                Activation::Relu => (6.0 / fi as f64).sqrt(),
                _ => (6.0 / (fi + fo) as f64).sqrt(),
            };
            for w in &mut m.params[off..off + fi * fo] {
                *w = rng.random_range(-bound..bound);
            }
            off += fi * fo + fo;
        }
        m
    }

    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Self {
        assert_eq!(dims.len(), activations.len() + 1, "one activation per layer");
        let n: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Mlp {
            dims: dims.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; n],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for i in 0..l {
            off += self.dims[i] * self.dims[i + 1] + self.dims[i + 1];
        }
        (off, off + self.dims[l] * self.dims[l + 1])
    }

    pub fn layer(&self, l: usize) -> DenseLayer<'_> {
        let (w, b) = self.offsets(l);
        let (fi, fo) = (self.dims[l], self.dims[l + 1]);
        DenseLayer {
            in_dim: fi,
            out_dim: fo,
            weight: &self.params[w..w + fi * fo],
            bias: &self.params[b..b + fo],
            activation: self.activations[l],
        }
    }

    /// Mutable bias of layer `l`.
    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let (_, b) = self.offsets(l);
        let fo = self.dims[l + 1];
        &mut self.params[b..b + fo]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        let (w, _) = self.offsets(l);
        let n = self.dims[l] * self.dims[l + 1];
        &mut self.params[w..w + n]
    }

    /// Forward pass over `batch` rows of `input` (row-major `batch × in_dim`).
    pub fn forward(&self, input: Vec<f64>, batch: usize) -> MlpCache {
        assert_eq!(input.len(), batch * self.in_dim());
        let mut values = Vec::with_capacity(self.num_layers() + 1);
        values.push(input);
        for l in 0..self.num_layers() {
            let layer = self.layer(l);
            let mut out = vec![0.0; batch * layer.out_dim];
            for row in out.chunks_exact_mut(layer.out_dim) {
                row.copy_from_slice(layer.bias);
            }
            gemm(
                batch,
                layer.in_dim,
                layer.out_dim,
                values[l].as_slice(),
                (layer.in_dim as isize, 1),
                layer.weight,
                (1, layer.in_dim as isize),
                &mut out,
                1.0,
            );
            match layer.activation {
                Activation::Relu => out.iter_mut().for_each(|v| {
                    if *v <= 0.0 {
                        *v = 0.0
                    }
                }),
                Activation::Sigmoid => out.iter_mut().for_each(|v| *v = sigmoid(*v)),
                Activation::None => {}
            }
            values.push(out);
        }
        MlpCache { batch, values }
    }

    /// Single-row convenience forward.
    pub fn forward_one(&self, input: &[f64]) -> Vec<f64> {
        let c = self.forward(input.to_vec(), 1);
        c.values.into_iter().last().unwrap()
    }

    /// Backpropagates `d_out` (gradient w.r.t. the post-activation output).
    /// Parameter gradients are added to `grad`; returns the input gradient
    /// when `want_input` is set.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grad: &mut [f64], want_input: bool) -> Result<Option<Vec<f64>>> {
        if cache.values.len() != self.num_layers() + 1 {
            return Err(Error::Usage("backward called without a matching forward cache".into()));
        }
        let batch = cache.batch;
        if d_out.len() != batch * self.out_dim() || grad.len() != self.params.len() {
            return Err(Error::Usage("gradient buffer shape mismatch".into()));
        }
        let mut delta = d_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let layer = self.layer(l);
            let y = &cache.values[l + 1];
            match layer.activation {
                Activation::Relu => {
                    for (d, &v) in delta.iter_mut().zip(y) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                Activation::Sigmoid => {
                    for (d, &v) in delta.iter_mut().zip(y) {
                        *d *= v * (1.0 - v);
                    }
                }
                Activation::None => {}
            }
            let (w_off, b_off) = self.offsets(l);
            let x = &cache.values[l];
            // dW += δᵀ X
            gemm(
                layer.out_dim,
                batch,
                layer.in_dim,
                &delta,
                (1, layer.out_dim as isize),
                x,
                (layer.in_dim as isize, 1),
                &mut grad[w_off..w_off + layer.in_dim * layer.out_dim],
                1.0,
            );
            let db = &mut grad[b_off..b_off + layer.out_dim];
            for row in delta.chunks_exact(layer.out_dim) {
                for (g, d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l == 0 && !want_input {
                return Ok(None);
            }
            let mut dx = vec![0.0; batch * layer.in_dim];
            gemm(
                batch,
                layer.out_dim,
                layer.in_dim,
                &delta,
                (layer.out_dim as isize, 1),
                layer.weight,
                (layer.in_dim as isize, 1),
                &mut dx,
                0.0,
            );
            delta = dx;
        }
        Ok(Some(delta))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.num_layers() as u64).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for a in &self.activations {
            w.write_all(&a.code().to_le_bytes())?;
        }
        write_f64s(w, &self.params)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e| Error::io("<decoder checkpoint>", e);
        let n = read_u64(r).map_err(io)? as usize;
        if n == 0 || n > 64 {
            return Err(Error::load("<decoder checkpoint>", format!("implausible layer count {n}")));
        }
        let mut dims = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            dims.push(read_u64(r).map_err(io)? as usize);
        }
        let mut acts = Vec::with_capacity(n);
        for _ in 0..n {
            let c = read_u64(r).map_err(io)?;
            acts.push(
                Activation::from_code(c)
                    .ok_or_else(|| Error::load("<decoder checkpoint>", format!("unknown activation {c}")))?,
            );
        }
        let mut m = Mlp::zeros(&dims, &acts);
        m.params = read_f64s(r, m.params.len()).map_err(io)?;
        Ok(m)
    }
}

/// `C = A·B + beta·C` with explicit (row, col) strides for A and B; C is row-major `m × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of the given slices; lengths are
    // checked by the callers through the layer shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
