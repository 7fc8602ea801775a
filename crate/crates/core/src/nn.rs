//! Layers shared by the text encoders and the transformer fusion head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Forward-pass mode. Dropout masks are drawn from the context RNG only in
/// training mode; evaluation is deterministic for fixed weights.
pub struct ForwardCtx {
    train: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn dropout(&mut self, g: &mut Graph<'_>, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let (r, c) = g.value(x).shape();
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..r * c)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = g.constant(Tensor::new(r, c, mask));
        g.mul(x, m)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        std: f64,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), output, input, std, group, rng);
        let bias = bias.then(|| store.add_filled(format!("{name}.bias"), 1, output, 0.0, group));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul_nt(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), 1, dim, 1.0, group),
            beta: store.add_filled(format!("{name}.beta"), 1, dim, 0.0, group),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput {
    pub output: Var,
    /// One `L x L` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        std: f64,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, std, group, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, std, group, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, std, group, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, std, group, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> AttentionOutput {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
            weights.push(attn);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        AttentionOutput {
            output: self.output.forward(g, merged),
            weights,
        }
    }
}

/// Post-norm transformer encoder layer: attention and a GELU MLP, each
/// wrapped in residual add and layer normalisation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub mlp_norm: LayerNorm,
    pub dropout: f64,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        dropout: f64,
        std: f64,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attention"), dim, heads, std, group, rng),
            attention_norm: LayerNorm::new(store, &format!("{name}.attention_norm"), dim, group),
            mlp_in: Linear::new(store, &format!("{name}.mlp_in"), dim, mlp_dim, true, std, group, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp_out"), mlp_dim, dim, true, std, group, rng),
            mlp_norm: LayerNorm::new(store, &format!("{name}.mlp_norm"), dim, group),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, ctx: &mut ForwardCtx) -> Var {
        self.forward_with_weights(g, x, ctx).0
    }

    pub fn forward_with_weights(&self, g: &mut Graph<'_>, x: Var, ctx: &mut ForwardCtx) -> (Var, Vec<Var>) {
        let attn = self.attention.forward(g, x);
        let a = ctx.dropout(g, attn.output, self.dropout);
        let h = g.add(x, a);
        let h = self.attention_norm.forward(g, h);
        let m = self.mlp_in.forward(g, h);
        let m = g.gelu(m);
        let m = self.mlp_out.forward(g, m);
        let m = ctx.dropout(g, m, self.dropout);
        let out = g.add(h, m);
        (self.mlp_norm.forward(g, out), attn.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, 0.3, ParamGroup::Head, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new(3, 8, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()));
        let out = mha.forward(&mut g, x);
        assert_eq!(out.weights.len(), 2);
        for w in out.weights {
            let t = g.value(w);
            for r in 0..t.rows() {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(g.value(out.output).shape(), (3, 8));
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::filled(2, 4, 1.5));
        let mut ctx = ForwardCtx::eval();
        let y = ctx.dropout(&mut g, x, 0.5);
        assert_eq!(x, y);
        let mut ctx = ForwardCtx::train(1);
        let y = ctx.dropout(&mut g, x, 0.5);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 3.0));
    }
}
