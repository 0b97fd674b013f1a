//! Dense `f64` tensors with reverse-mode differentiation, LSTM cells and Adam.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::{log_sum_exp, softmax_values, Tensor};

use rand::Rng;

use crate::error::Result;

/// Parameters of one LSTM cell: `w` is `[4h, in + h]`, `b` is `[4h]`, gate
/// blocks ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(
            format!("{prefix}.w"),
            Tensor::xavier(4 * hidden, input + hidden, rng),
        )?;
        let mut bias = vec![0.0; 4 * hidden];
        // forget gate starts open
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(format!("{prefix}.b"), Tensor::vector(bias))?;
        Ok(LstmParams {
            w,
            b,
            input,
            hidden,
        })
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// One LSTM step; returns `(h, c)`.
pub fn lstm_step(
    g: &mut Graph<'_>,
    p: &LstmParams,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let w = g.param(p.w);
    let b = g.param(p.b);
    let xh = g.concat(&[x, h_prev])?;
    let z = g.affine(xh, w, b)?;
    let hd = p.hidden;
    let zi = g.slice(z, 0, hd)?;
    let zf = g.slice(z, hd, hd)?;
    let zg = g.slice(z, 2 * hd, hd)?;
    let zo = g.slice(z, 3 * hd, hd)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Weight matrix and bias of a feed-forward map.
#[derive(Clone, Copy, Debug)]
pub struct AffineParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl AffineParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{prefix}.w"), Tensor::xavier(output, input, rng))?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[output]))?;
        Ok(AffineParams { w, b })
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.affine(x, w, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}
