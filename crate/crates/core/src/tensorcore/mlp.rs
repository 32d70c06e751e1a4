//! MLP building blocks shared by teachers and students: sinusoidal scalar
//! embeddings, named linear layers, and a SiLU body that can run either on
//! the tape (training) or as plain arithmetic (inference). Both paths apply
//! identical operations in identical order, so their outputs agree bitwise.

use crate::error::{BootError, Result};
use crate::tensorcore::params::{ParamSet, TapeBinding};
use crate::tensorcore::tape::{NodeId, Tape};
use crate::tensorcore::tensor::{matmul_into, Tensor};
use rand::Rng;

/// Width of the raw sinusoidal feature vector for scalar conditioning
/// (time, guidance weight) and of the learned embeddings derived from it.
pub const EMBED_DIM: usize = 64;

const FREQ_MIN: f64 = 1.0;
const FREQ_MAX: f64 = 160.0;

/// [n, EMBED_DIM] matrix of interleaved sin/cos features over a geometric
/// frequency ladder. Inputs are expected in roughly unit range.
pub fn sinusoidal_features(vals: &[f64]) -> Tensor {
    let half = EMBED_DIM / 2;
    let mut data = Vec::with_capacity(vals.len() * EMBED_DIM);
    for &v in vals {
        for k in 0..half {
            let freq = FREQ_MIN * (FREQ_MAX / FREQ_MIN).powf(k as f64 / (half - 1) as f64);
            data.push((freq * v).sin());
            data.push((freq * v).cos());
        }
    }
    Tensor::new(vec![vals.len(), EMBED_DIM], data).expect("length matches by construction")
}

/// Named weight + bias pair living in a `ParamSet`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers freshly initialized parameters: weights N(0, std^2) drawn in
    /// row-major order, biases zero.
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Linear> {
        params.add(format!("{name}.w"), Tensor::randn(rng, vec![in_dim, out_dim], std))?;
        params.add(format!("{name}.b"), Tensor::zeros(vec![out_dim]))?;
        Ok(Linear {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            in_dim,
            out_dim,
        })
    }

    pub fn forward_tape(&self, tape: &mut Tape, bind: &TapeBinding, x: NodeId) -> Result<NodeId> {
        let w = bind.node(&self.w)?;
        let b = bind.node(&self.b)?;
        let mm = tape
            .matmul(x, w)
            .map_err(|e| BootError::contract(format!("layer {}: {e}", self.w)))?;
        tape.add_row(mm, b)
    }

    pub fn forward_plain(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let w = params.get(&self.w)?;
        let b = params.get(&self.b)?;
        if x.cols() != self.in_dim {
            return Err(BootError::shape(
                format!("layer {}", self.w),
                format!("input width {}", self.in_dim),
                format!("{}", x.cols()),
            ));
        }
        let (m, k, n) = (x.rows(), self.in_dim, self.out_dim);
        let mut out = vec![0.0; m * n];
        matmul_into(x.data(), w.data(), m, k, n, &mut out);
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += b.data()[j];
            }
        }
        Tensor::new(vec![m, n], out)
    }
}

/// Stack of linear layers with SiLU between them and a linear output.
#[derive(Debug, Clone)]
pub struct MlpBody {
    pub layers: Vec<Linear>,
}

impl MlpBody {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Result<MlpBody> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut cur = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            let std = (2.0 / cur as f64).sqrt();
            layers.push(Linear::init(params, &format!("{prefix}.{i}"), cur, h, std, rng)?);
            cur = h;
        }
        let std = (1.0 / cur as f64).sqrt();
        layers.push(Linear::init(
            params,
            &format!("{prefix}.out"),
            cur,
            out_dim,
            std,
            rng,
        )?);
        Ok(MlpBody { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("body has layers").out_dim
    }

    pub fn forward_tape(&self, tape: &mut Tape, bind: &TapeBinding, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_tape(tape, bind, h)?;
            if i != last {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }

    pub fn forward_plain(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_plain(params, &h)?;
            if i != last {
                h = h.map(silu);
            }
        }
        Ok(h)
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}
