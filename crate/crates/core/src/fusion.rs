//! Merging mechanisms over the three pooled vectors (author, capability,
//! idea). Every variant reduces the triple to one scalar: a rating, or an
//! acceptance logit.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::PooledVector;
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, LayerNorm, Linear, TransformerLayer};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTriple {
    pub h_author: PooledVector,
    pub h_cap: PooledVector,
    pub h_idea: PooledVector,
}

impl FeatureTriple {
    pub fn new(h_author: PooledVector, h_cap: PooledVector, h_idea: PooledVector) -> Result<Self> {
        let d = h_author.dim();
        for v in [&h_cap, &h_idea] {
            if v.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: v.dim() });
            }
        }
        Ok(Self { h_author, h_cap, h_idea })
    }

    pub fn dim(&self) -> usize {
        self.h_author.dim()
    }

    /// Rows in stacking order: author, capability, idea.
    pub fn stacked(&self) -> Tensor {
        Tensor::from_rows(&[
            self.h_author.values.clone(),
            self.h_cap.values.clone(),
            self.h_idea.values.clone(),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionKind {
    Average,
    Sa1,
    Sa2,
    R1,
    Gated,
    Transformer { heads: usize },
}

impl FusionKind {
    pub const KEYS: [&'static str; 9] = [
        "avg", "sa1", "sa2", "r1", "gated", "tf-1l-1h", "tf-1l-2h", "tf-1l-4h", "tf-1l-8h",
    ];

    pub fn key(&self) -> String {
        match self {
            FusionKind::Average => "avg".into(),
            FusionKind::Sa1 => "sa1".into(),
            FusionKind::Sa2 => "sa2".into(),
            FusionKind::R1 => "r1".into(),
            FusionKind::Gated => "gated".into(),
            FusionKind::Transformer { heads } => format!("tf-1l-{heads}h"),
        }
    }

    /// True for the variants whose prediction ignores input order.
    pub fn is_permutation_invariant(&self) -> bool {
        matches!(self, FusionKind::Average | FusionKind::Sa1 | FusionKind::Sa2)
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_lowercase().replace('_', "-");
        Ok(match key.as_str() {
            "avg" | "average" => FusionKind::Average,
            "sa1" | "sa-1" => FusionKind::Sa1,
            "sa2" | "sa-2" => FusionKind::Sa2,
            "r1" | "r-1" => FusionKind::R1,
            "gated" => FusionKind::Gated,
            other => {
                let heads = other
                    .strip_prefix("tf-1l-")
                    .and_then(|h| h.strip_suffix('h'))
                    .and_then(|h| h.parse::<usize>().ok())
                    .filter(|&h| h > 0)
                    .ok_or_else(|| {
                        Error::Config(format!("unknown fusion {s}; expected one of {}", Self::KEYS.join(", ")))
                    })?;
                FusionKind::Transformer { heads }
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FusionParams {
    Average {
        readout: ParamId,
    },
    SelfAttention {
        query: Linear,
        key: Linear,
        value: Linear,
        readout: ParamId,
        /// Present for SA2 only.
        norm: Option<LayerNorm>,
    },
    R1 {
        author: Linear,
        idea: Linear,
        capability: Linear,
        readout: ParamId,
    },
    Gated {
        author: Linear,
        capability: Linear,
        idea: Linear,
    },
    Transformer {
        layer: TransformerLayer,
        readout: Linear,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FusionSettings {
    pub dropout: f64,
    pub init_std: f64,
    /// Adds a scalar bias to the output (used for acceptance logits).
    pub output_bias: bool,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            dropout: 0.1,
            init_std: 0.02,
            output_bias: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fusion {
    pub kind: FusionKind,
    pub dim: usize,
    pub dropout: f64,
    pub params: FusionParams,
    pub bias: Option<ParamId>,
}

/// Graph-level fusion result.
pub struct FusionOutput {
    /// `1 x 1` prediction.
    pub y: Var,
    /// `3 x d` mixed sequence for the attention variants.
    pub mixed: Option<Var>,
    /// `3 x d` gate weights for the gated variant.
    pub gates: Option<Var>,
    /// `3 x 3` attention matrices (one per head) where applicable.
    pub attention: Vec<Var>,
}

/// Value-level fusion result.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionValue {
    pub y: f64,
    pub mixed: Option<Tensor>,
    pub gates: Option<Tensor>,
    pub attention: Vec<Tensor>,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: FusionKind,
        dim: usize,
        settings: FusionSettings,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("fusion dimension must be positive".into()));
        }
        let std = settings.init_std;
        let group = ParamGroup::Head;
        let lin = |store: &mut ParamStore, part: &str, rng: &mut R| {
            Linear::new(store, &format!("{name}.{part}"), dim, dim, false, std, group, rng)
        };
        let readout =
            |store: &mut ParamStore, rng: &mut R| store.add_normal(format!("{name}.readout"), 1, dim, std, group, rng);
        let params = match kind {
            FusionKind::Average => FusionParams::Average {
                readout: readout(store, rng),
            },
            FusionKind::Sa1 | FusionKind::Sa2 => FusionParams::SelfAttention {
                query: lin(store, "query", rng),
                key: lin(store, "key", rng),
                value: lin(store, "value", rng),
                readout: readout(store, rng),
                norm: (kind == FusionKind::Sa2).then(|| LayerNorm::new(store, &format!("{name}.norm"), dim, group)),
            },
            FusionKind::R1 => FusionParams::R1 {
                author: lin(store, "author", rng),
                idea: lin(store, "idea", rng),
                capability: lin(store, "capability", rng),
                readout: readout(store, rng),
            },
            FusionKind::Gated => FusionParams::Gated {
                author: lin(store, "author", rng),
                capability: lin(store, "capability", rng),
                idea: lin(store, "idea", rng),
            },
            FusionKind::Transformer { heads } => {
                if heads == 0 || dim % heads != 0 {
                    return Err(Error::Config(format!(
                        "fusion dimension {dim} not divisible by {heads} heads"
                    )));
                }
                FusionParams::Transformer {
                    layer: TransformerLayer::new(
                        store,
                        &format!("{name}.layer"),
                        dim,
                        heads,
                        4 * dim,
                        settings.dropout,
                        std,
                        group,
                        rng,
                    ),
                    readout: Linear::new(store, &format!("{name}.readout"), dim, 1, true, std, group, rng),
                }
            }
        };
        let bias = settings
            .output_bias
            .then(|| store.add_filled(format!("{name}.bias"), 1, 1, 0.0, group));
        Ok(Self {
            kind,
            dim,
            dropout: settings.dropout,
            params,
            bias,
        })
    }

    /// Fuses three `1 x d` rows given in author, capability, idea order.
    pub fn forward(&self, g: &mut Graph<'_>, parts: [Var; 3], ctx: &mut ForwardCtx) -> Result<FusionOutput> {
        for &p in &parts {
            let (r, c) = g.value(p).shape();
            if r != 1 || c != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: if r == 1 { c } else { r * c },
                });
            }
        }
        let [a, c, i] = parts;
        let mut out = match &self.params {
            FusionParams::Average { readout } => {
                let x = g.concat_rows(&parts);
                let mean = g.sum_rows(x);
                let mean = g.scale(mean, 1.0 / 3.0);
                let w = g.param(*readout);
                let prod = g.mul(mean, w);
                FusionOutput {
                    y: g.sum_all(prod),
                    mixed: None,
                    gates: None,
                    attention: vec![],
                }
            }
            FusionParams::SelfAttention {
                query,
                key,
                value,
                readout,
                norm,
            } => {
                let x = g.concat_rows(&parts);
                let q = query.forward(g, x);
                let k = key.forward(g, x);
                let v = value.forward(g, x);
                let scores = g.matmul_nt(q, k);
                let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
                let attn = g.softmax_rows(scores);
                let z = g.matmul(attn, v);
                let mixed = match norm {
                    Some(ln) => {
                        let z = ctx.dropout(g, z, self.dropout);
                        let r = g.add(x, z);
                        ln.forward(g, r)
                    }
                    None => z,
                };
                let total = g.sum_rows(mixed);
                let w = g.param(*readout);
                let prod = g.mul(total, w);
                FusionOutput {
                    y: g.sum_all(prod),
                    mixed: Some(mixed),
                    gates: None,
                    attention: vec![attn],
                }
            }
            FusionParams::R1 {
                author,
                idea,
                capability,
                readout,
            } => {
                let xa = author.forward(g, a);
                let xi = idea.forward(g, i);
                let xc = capability.forward(g, c);
                let h = g.add(xa, xi);
                let h = g.add(h, xc);
                let w = g.param(*readout);
                let prod = g.mul(h, w);
                FusionOutput {
                    y: g.sum_all(prod),
                    mixed: None,
                    gates: None,
                    attention: vec![],
                }
            }
            FusionParams::Gated {
                author,
                capability,
                idea,
            } => {
                let xa = author.forward(g, a);
                let xc = capability.forward(g, c);
                let xi = idea.forward(g, i);
                let s1 = g.mul(xa, xi);
                let s2 = g.mul(xc, xi);
                let s3 = g.mul(xi, xi);
                let s = g.concat_rows(&[s1, s2, s3]);
                // softmax across the three sources, per coordinate
                let st = g.transpose(s);
                let pt = g.softmax_rows(st);
                let p = g.transpose(pt);
                let x = g.concat_rows(&[xa, xc, xi]);
                let weighted = g.mul(p, x);
                FusionOutput {
                    y: g.sum_all(weighted),
                    mixed: None,
                    gates: Some(p),
                    attention: vec![],
                }
            }
            FusionParams::Transformer { layer, readout } => {
                let x = g.concat_rows(&parts);
                let (top, attention) = layer.forward_with_weights(g, x, ctx);
                let third = g.row(top, 2);
                FusionOutput {
                    y: readout.forward(g, third),
                    mixed: Some(top),
                    gates: None,
                    attention,
                }
            }
        };
        if let Some(b) = self.bias {
            let b = g.param(b);
            out.y = g.add(out.y, b);
        }
        Ok(out)
    }

    /// Evaluates the fusion on plain vectors.
    pub fn apply(&self, store: &ParamStore, triple: &FeatureTriple, ctx: &mut ForwardCtx) -> Result<FusionValue> {
        if triple.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: triple.dim(),
            });
        }
        let mut g = Graph::new(store);
        let a = g.constant(Tensor::row_vector(&triple.h_author.values));
        let c = g.constant(Tensor::row_vector(&triple.h_cap.values));
        let i = g.constant(Tensor::row_vector(&triple.h_idea.values));
        let out = self.forward(&mut g, [a, c, i], ctx)?;
        let y = g.scalar(out.y);
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("{} fusion output", self.kind)));
        }
        Ok(FusionValue {
            y,
            mixed: out.mixed.map(|m| g.value(m).clone()),
            gates: out.gates.map(|m| g.value(m).clone()),
            attention: out.attention.iter().map(|&m| g.value(m).clone()).collect(),
        })
    }

    /// Readout weights and total bias when the variant ends in one linear
    /// map over a `d`-vector. Gated fusion has no such readout.
    pub fn readout_weights(&self, store: &ParamStore) -> Option<(Vec<f64>, f64)> {
        let extra = self.bias.map(|b| store.value(b).item()).unwrap_or(0.0);
        match &self.params {
            FusionParams::Average { readout }
            | FusionParams::SelfAttention { readout, .. }
            | FusionParams::R1 { readout, .. } => Some((store.value(*readout).data().to_vec(), extra)),
            FusionParams::Transformer { readout, .. } => Some((
                store.value(readout.weight).data().to_vec(),
                extra + readout.bias.map(|b| store.value(b).item()).unwrap_or(0.0),
            )),
            FusionParams::Gated { .. } => None,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let lin = |l: &Linear| {
            let mut v = vec![l.weight];
            v.extend(l.bias);
            v
        };
        let mut ids = match &self.params {
            FusionParams::Average { readout } => vec![*readout],
            FusionParams::SelfAttention {
                query,
                key,
                value,
                readout,
                norm,
            } => {
                let mut v = [lin(query), lin(key), lin(value)].concat();
                v.push(*readout);
                if let Some(n) = norm {
                    v.extend([n.gamma, n.beta]);
                }
                v
            }
            FusionParams::R1 {
                author,
                idea,
                capability,
                readout,
            } => {
                let mut v = [lin(author), lin(idea), lin(capability)].concat();
                v.push(*readout);
                v
            }
            FusionParams::Gated {
                author,
                capability,
                idea,
            } => [lin(author), lin(capability), lin(idea)].concat(),
            FusionParams::Transformer { layer, readout } => {
                let at = &layer.attention;
                [
                    lin(&at.query),
                    lin(&at.key),
                    lin(&at.value),
                    lin(&at.output),
                    vec![layer.attention_norm.gamma, layer.attention_norm.beta],
                    lin(&layer.mlp_in),
                    lin(&layer.mlp_out),
                    vec![layer.mlp_norm.gamma, layer.mlp_norm.beta],
                    lin(readout),
                ]
                .concat()
            }
        };
        ids.extend(self.bias);
        ids
    }
}
