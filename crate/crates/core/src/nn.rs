//! Layers shared by the spectrogram CNN, the text CNN and the VAE.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Seeded generator used for every stochastic decision in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Affine map `x·W + b` with `W: [input, output]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let weight = store.insert(format!("{name}.weight"), Tensor::xavier(&[input, output], input, output, rng));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[output]));
        Linear { weight, bias }
    }

    /// Looks up an existing layer by name prefix.
    pub fn find(store: &ParamStore, name: &str) -> Option<Self> {
        Some(Linear {
            weight: store.id(&format!("{name}.weight"))?,
            bias: store.id(&format!("{name}.bias"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[1]
    }
}

/// LSTM cell with fused gate weights `W: [input + hidden, 4·hidden]`.
/// Gate order along the fused axis: input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            Tensor::xavier(&[input + hidden, 4 * hidden], input + hidden, hidden, rng),
        );
        let mut bias = Tensor::zeros(&[4 * hidden]);
        // forget gate starts open
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = store.insert(format!("{name}.bias"), bias);
        LstmCell { weight, bias, hidden }
    }

    pub fn find(store: &ParamStore, name: &str) -> Option<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let bias = store.id(&format!("{name}.bias"))?;
        let hidden = store.get(bias).len() / 4;
        Some(LstmCell { weight, bias, hidden })
    }

    /// One step over a batch: `x: [B, input]`, `h, c: [B, hidden]` → `(h', c')`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let xh = g.concat(&[x, h])?;
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let z = g.matmul(xh, w)?;
        let z = g.add_row(z, b)?;
        let i = g.slice_last(z, 0, hd)?;
        let i = g.sigmoid(i)?;
        let f = g.slice_last(z, hd, hd)?;
        let f = g.sigmoid(f)?;
        let cand = g.slice_last(z, 2 * hd, hd)?;
        let cand = g.tanh(cand)?;
        let o = g.slice_last(z, 3 * hd, hd)?;
        let o = g.sigmoid(o)?;
        let fc = g.mul(f, c)?;
        let ic = g.mul(i, cand)?;
        let c_next = g.add(fc, ic)?;
        let tc = g.tanh(c_next)?;
        let h_next = g.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

/// Conv 3×3 → ReLU → 2×2 max-pool.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        // He-uniform for ReLU stacks
        let limit = (6.0 / fan_in as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            Tensor::uniform(&[out_channels, in_channels, kernel.0, kernel.1], limit, rng),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        ConvBlock { weight, bias }
    }

    pub fn conv(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv(g, x)?;
        let y = g.relu(y)?;
        g.max_pool2d(y)
    }
}
