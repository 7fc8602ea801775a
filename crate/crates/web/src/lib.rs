//! Static-page demo over the core library. Every operation takes and
//! returns JSON so the page needs no generated bindings beyond three
//! string functions.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use capfuse::capability::{capability_loss, CapabilityTarget, SharedHead};
use capfuse::encoder::{PooledVector, SourceField};
use capfuse::evaluation::{calibrate_linear, mean, population_std, threshold_by_rate};
use capfuse::fusion::{FeatureTriple, Fusion, FusionKind, FusionParams, FusionSettings};
use capfuse::nn::ForwardCtx;
use capfuse::params::ParamStore;
use capfuse::tensor::Tensor;

#[derive(Debug, Deserialize)]
pub struct FusionQuery {
    pub kind: String,
    pub author: Vec<f64>,
    pub capability: Vec<f64>,
    pub idea: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Scale of the random readout and gate weights.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Sets self-attention query, key and value maps to the identity, so
    /// the weights show raw similarity between the three vectors.
    #[serde(default)]
    pub identity: bool,
}

fn default_init_std() -> f64 {
    0.5
}

#[derive(Debug, Serialize)]
pub struct FusionReport {
    pub kind: String,
    pub y: f64,
    /// One 3x3 row-stochastic matrix per head; rows and columns are
    /// author, capability, idea.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// Per-branch gate values of gated fusion.
    pub gates: Option<Vec<Vec<f64>>>,
    pub permutation_invariant: bool,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| (0..t.cols()).map(|c| t.get(r, c)).collect()).collect()
}

pub fn explore_fusion(q: &FusionQuery) -> capfuse::Result<FusionReport> {
    let kind: FusionKind = q.kind.parse()?;
    let vector = |v: &[f64], f| PooledVector::new(v.to_vec(), f);
    let triple = FeatureTriple::new(
        vector(&q.author, SourceField::Author)?,
        vector(&q.capability, SourceField::Capability)?,
        vector(&q.idea, SourceField::Idea)?,
    )?;
    let mut store = ParamStore::new();
    let settings = FusionSettings {
        dropout: 0.0,
        init_std: q.init_std,
        output_bias: false,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(q.seed);
    let fusion = Fusion::new(&mut store, "fusion", kind, triple.dim(), settings, &mut rng)?;
    if q.identity {
        if let FusionParams::SelfAttention { query, key, value, .. } = &fusion.params {
            for l in [query, key, value] {
                store.set_value(l.weight, Tensor::identity(triple.dim()));
            }
        }
    }
    let out = fusion.apply(&store, &triple, &mut ForwardCtx::eval())?;
    Ok(FusionReport {
        kind: kind.key(),
        y: out.y,
        attention: out.attention.iter().map(rows).collect(),
        gates: out.gates.as_ref().map(rows),
        permutation_invariant: kind.is_permutation_invariant(),
    })
}

#[derive(Debug, Deserialize)]
pub struct CalibrationQuery {
    pub scores: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    /// Probabilities to threshold at `rate`.
    #[serde(default)]
    pub probs: Option<Vec<f64>>,
    #[serde(default)]
    pub rate: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct CalibrationReport {
    pub calibrated: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub positives: Option<Vec<bool>>,
    pub positive_count: Option<usize>,
}

pub fn calibrate(q: &CalibrationQuery) -> capfuse::Result<CalibrationReport> {
    let calibrated = calibrate_linear(&q.scores, q.target_mean, q.target_std)?;
    let positives = match (&q.probs, q.rate) {
        (Some(p), Some(r)) => Some(threshold_by_rate(p, r)?),
        (None, None) => None,
        _ => return Err(capfuse::Error::Config("probs and rate go together".into())),
    };
    Ok(CalibrationReport {
        mean: mean(&calibrated),
        std: population_std(&calibrated),
        positive_count: positives.as_ref().map(|p| p.iter().filter(|&&b| b).count()),
        calibrated,
        positives,
    })
}

#[derive(Debug, Deserialize)]
pub struct LossQuery {
    pub c_hat: Vec<f64>,
    pub c: Vec<f64>,
    pub a: Vec<f64>,
    pub head_weight: Vec<f64>,
    #[serde(default)]
    pub head_bias: f64,
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
}

fn default_lambda1() -> f64 {
    capfuse::capability::DEFAULT_LAMBDA1
}
fn default_lambda2() -> f64 {
    capfuse::capability::DEFAULT_LAMBDA2
}

#[derive(Debug, Serialize)]
pub struct LossReport {
    pub similarity: f64,
    pub anchor: f64,
    pub head: f64,
    pub total: f64,
    /// Head output on the target capability vector.
    pub y_c: f64,
}

pub fn explore_loss(q: &LossQuery) -> capfuse::Result<LossReport> {
    if q.head_weight.len() != q.c.len() {
        return Err(capfuse::Error::DimensionMismatch {
            expected: q.c.len(),
            got: q.head_weight.len(),
        });
    }
    let head = SharedHead {
        weight: q.head_weight.clone(),
        bias: q.head_bias,
    };
    let target = CapabilityTarget {
        y_c: head.apply(&q.c),
        c: q.c.clone(),
        a: q.a.clone(),
    };
    let t = capability_loss(&q.c_hat, &target, &head, q.lambda1, q.lambda2)?;
    Ok(LossReport {
        similarity: t.similarity,
        anchor: t.anchor,
        head: t.head,
        total: t.total(),
        y_c: target.y_c,
    })
}

/// Parses `input`, runs `op` and serialises the answer; errors come back
/// as their message.
pub fn json_call<Q, R>(input: &str, op: impl Fn(&Q) -> capfuse::Result<R>) -> Result<String, String>
where
    Q: for<'de> Deserialize<'de>,
    R: Serialize,
{
    let q: Q = serde_json::from_str(input).map_err(|e| format!("bad input: {e}"))?;
    let r = op(&q).map_err(|e| e.to_string())?;
    serde_json::to_string(&r).map_err(|e| e.to_string())
}

#[cfg(target_arch = "wasm32")]
mod bindings {
    use wasm_bindgen::prelude::*;

    fn js(r: Result<String, String>) -> Result<String, JsValue> {
        r.map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen]
    pub fn fusion_weights(input: &str) -> Result<String, JsValue> {
        js(super::json_call(input, super::explore_fusion))
    }

    #[wasm_bindgen]
    pub fn calibrate_threshold(input: &str) -> Result<String, JsValue> {
        js(super::json_call(input, super::calibrate))
    }

    #[wasm_bindgen]
    pub fn capability_loss(input: &str) -> Result<String, JsValue> {
        js(super::json_call(input, super::explore_loss))
    }
}
