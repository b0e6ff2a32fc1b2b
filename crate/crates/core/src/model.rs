//! Graph attention network with self-attention pooling and a gradient-reversed
//! domain head.
//!
//! Data flow for one graph:
//!
//! ```text
//! X ──GCN×L (relu)──▶ H ──tanh(L̃·H·W_att)──▶ score
//!                     │                        │ top ⌈kN⌉
//!                     └────── H[idx] ⊙ score[idx] ──▶ [mean ‖ max] = s
//! s ──▶ emotion MLP ──▶ softmax(C)
//! s ──grad_reverse(λ)──▶ domain MLP ──▶ softmax(2)
//! ```

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ReduceKind, Tape, Tensor, Var};
use crate::error::{DagamError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// GCN stack and attention projection.
    Feature,
    Emotion,
    Domain,
}

/// Layer widths of the whole network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_features: usize,
    pub gcn_hidden: Vec<usize>,
    pub emotion_hidden: Vec<usize>,
    pub domain_hidden: Vec<usize>,
    pub classes: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.in_features == 0 || self.classes < 2 {
            return Err(DagamError::Config(format!(
                "need at least one input feature and two classes, got {} and {}",
                self.in_features, self.classes
            )));
        }
        if self.gcn_hidden.is_empty() {
            return Err(DagamError::Config(
                "at least one GCN layer is required".into(),
            ));
        }
        let widths = self
            .gcn_hidden
            .iter()
            .chain(&self.emotion_hidden)
            .chain(&self.domain_hidden);
        if widths.clone().any(|&w| w == 0) {
            return Err(DagamError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Width of the readout vector.
    pub fn embedding(&self) -> usize {
        2 * self.gcn_hidden.last().copied().unwrap_or(self.in_features)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Every learned tensor, in a fixed registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    params: Vec<NamedParam>,
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

impl ModelParams {
    /// Xavier-uniform weights and zero biases.
    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::new();
        let mut push = |name: String, group, value| params.push(NamedParam { name, group, value });

        let mut width = arch.in_features;
        for (i, &h) in arch.gcn_hidden.iter().enumerate() {
            push(
                format!("gcn.{i}.weight"),
                ParamGroup::Feature,
                xavier(rng, width, h),
            );
            width = h;
        }
        push(
            "attention.weight".into(),
            ParamGroup::Feature,
            xavier(rng, width, 1),
        );

        for (group, prefix, hidden, out) in [
            (
                ParamGroup::Emotion,
                "emotion",
                &arch.emotion_hidden,
                arch.classes,
            ),
            (ParamGroup::Domain, "domain", &arch.domain_hidden, 2),
        ] {
            let mut w = arch.embedding();
            for (i, &h) in hidden.iter().chain(std::iter::once(&out)).enumerate() {
                push(format!("{prefix}.{i}.weight"), group, xavier(rng, w, h));
                push(
                    format!("{prefix}.{i}.bias"),
                    group,
                    Tensor::from_parts(vec![h], vec![0.0; h]),
                );
                w = h;
            }
        }
        Ok(ModelParams {
            arch: arch.clone(),
            params,
        })
    }

    /// Rebuild from named tensors, checking names and shapes against `arch`.
    pub fn from_named(arch: &Architecture, named: Vec<(String, Tensor)>) -> Result<Self> {
        // weights are overwritten below, the seed only fixes the layout
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut template = ModelParams::init(arch, &mut rng)?;
        if named.len() != template.params.len() {
            return Err(DagamError::Data(format!(
                "expected {} parameter blocks, found {}",
                template.params.len(),
                named.len()
            )));
        }
        for (slot, (name, value)) in template.params.iter_mut().zip(named) {
            if slot.name != name || slot.value.shape() != value.shape() {
                return Err(DagamError::Data(format!(
                    "parameter block {name} {:?} does not match expected {} {:?}",
                    value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
            slot.value = value;
        }
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.value.all_finite()) {
            return Err(DagamError::Data(format!(
                "parameter {} is not finite",
                p.name
            )));
        }
        Ok(())
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(DagamError::dim("parameter count changed"));
        }
        for (p, t) in self.params.iter_mut().zip(tensors) {
            if p.value.shape() != t.shape() {
                return Err(DagamError::dim(format!(
                    "parameter {} changed shape",
                    p.name
                )));
            }
            p.value = t;
        }
        Ok(())
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        self.params[index].group
    }

    /// Put every parameter on `tape` as a gradient-carrying leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let all = self
            .params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect();
        self.bind(all).expect("one var per parameter")
    }

    /// Group tape variables that already hold the parameters, in registry order.
    pub fn bind(&self, all: Vec<Var>) -> Result<ParamVars> {
        if all.len() != self.params.len() {
            return Err(DagamError::dim(format!(
                "{} variables for {} parameters",
                all.len(),
                self.params.len()
            )));
        }
        let layers = self.arch.gcn_hidden.len();
        let pairs = |start: usize, count: usize| -> Vec<(Var, Var)> {
            (0..count)
                .map(|i| (all[start + 2 * i], all[start + 2 * i + 1]))
                .collect()
        };
        let n_emotion = self.arch.emotion_hidden.len() + 1;
        let n_domain = self.arch.domain_hidden.len() + 1;
        let emotion = pairs(layers + 1, n_emotion);
        let domain = pairs(layers + 1 + 2 * n_emotion, n_domain);
        Ok(ParamVars {
            gcn: all[..layers].to_vec(),
            attention: all[layers],
            emotion,
            domain,
            all,
        })
    }
}

/// Tape handles for the registered parameters.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub gcn: Vec<Var>,
    pub attention: Var,
    pub emotion: Vec<(Var, Var)>,
    pub domain: Vec<(Var, Var)>,
    /// same order as [`ModelParams::params`]
    pub all: Vec<Var>,
}

/// Fixed per-layout graph operators.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphContext {
    pub laplacian: Tensor,
    pub adjacency: Tensor,
}

impl GraphContext {
    pub fn new(laplacian: Tensor, adjacency: Tensor) -> Result<Self> {
        let (n, m) = laplacian.dims2()?;
        if n != m || adjacency.shape() != laplacian.shape() {
            return Err(DagamError::dim(format!(
                "laplacian {:?} and adjacency {:?} must be equal square shapes",
                laplacian.shape(),
                adjacency.shape()
            )));
        }
        Ok(GraphContext {
            laplacian,
            adjacency,
        })
    }

    pub fn nodes(&self) -> usize {
        self.laplacian.shape()[0]
    }
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// `activation(L̃ · X · W)`.
pub fn gcn_layer(tape: &mut Tape, lap: Var, x: Var, w: Var, act: Activation) -> Result<Var> {
    let (n, n2) = tape.value(lap).dims2()?;
    let (xn, f_in) = tape.value(x).dims2()?;
    let (w_in, f_out) = tape.value(w).dims2()?;
    if n != n2 || xn != n || w_in != f_in {
        return Err(DagamError::dim(format!(
            "gcn layer shapes disagree: L {:?}, X {:?}, W {:?}",
            tape.shape(lap),
            tape.shape(x),
            tape.shape(w)
        )));
    }
    // multiply through the narrower side first
    let z = if f_in <= f_out {
        let lx = tape.matmul(lap, x)?;
        tape.matmul(lx, w)?
    } else {
        let xw = tape.matmul(x, w)?;
        tape.matmul(lap, xw)?
    };
    Ok(activate(tape, z, act))
}

/// `tanh(L̃ · X · W_att)`, one score per node.
pub fn attention_scores(tape: &mut Tape, lap: Var, x: Var, w_att: Var) -> Result<Var> {
    let (_, cols) = tape.value(w_att).dims2()?;
    if cols != 1 {
        return Err(DagamError::dim(format!(
            "attention weight must have one column, got {:?}",
            tape.shape(w_att)
        )));
    }
    gcn_layer(tape, lap, x, w_att, Activation::Tanh)
}

/// Number of nodes kept from `n` at ratio `k`: `⌈k·n⌉`.
///
/// The product is nudged down by a relative 1e-9 so decimal ratios such as
/// 0.7 do not round up past an exact integer.
pub fn pooled_count(n: usize, k: f64) -> usize {
    let raw = k * n as f64;
    ((raw - raw.abs() * 1e-9).ceil() as usize).clamp(1, n.max(1))
}

fn check_ratio(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(DagamError::Config(format!(
            "pooling ratio must lie in (0, 1], got {k}"
        )));
    }
    Ok(())
}

/// Indices of the `⌈kN⌉` largest scores, ascending. Ties go to the lower index.
pub fn top_rank(scores: &[f64], k: f64) -> Result<Vec<usize>> {
    check_ratio(k)?;
    if scores.is_empty() {
        return Err(DagamError::Degenerate("no scores to rank".into()));
    }
    let keep = pooled_count(scores.len(), k);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut idx = order[..keep].to_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Retained nodes after self-attention pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolResult {
    pub x_out: Tensor,
    pub a_out: Tensor,
    pub index: Vec<usize>,
    pub score_mask: Vec<f64>,
}

/// Keep the top-scoring rows of `x`, scale each by its score, and take the
/// induced subgraph of `adjacency`. With `frozen` the selection is given
/// rather than ranked (used when differentiating through a fixed choice).
pub fn sag_pool(
    tape: &mut Tape,
    x: Var,
    adjacency: &Tensor,
    scores: Var,
    k: f64,
    frozen: Option<&[usize]>,
) -> Result<(Var, PoolResult)> {
    let (n, _) = tape.value(x).dims2()?;
    let (sn, sc) = tape.value(scores).dims2()?;
    if sn != n || sc != 1 || adjacency.shape() != [n, n] {
        return Err(DagamError::dim(format!(
            "sag_pool shapes disagree: X {:?}, scores {:?}, A {:?}",
            tape.shape(x),
            tape.shape(scores),
            adjacency.shape()
        )));
    }
    let index = match frozen {
        Some(idx) => idx.to_vec(),
        None => top_rank(tape.value(scores).data(), k)?,
    };
    let picked = tape.gather_rows(x, &index)?;
    let mask = tape.gather_rows(scores, &index)?;
    let out = tape.mul(picked, mask)?;
    let result = PoolResult {
        x_out: tape.value(out).clone(),
        a_out: adjacency.principal_submatrix(&index)?,
        score_mask: tape.value(mask).data().to_vec(),
        index,
    };
    Ok((out, result))
}

/// `[column means ‖ column maxima]` of an `M×F` node matrix.
pub fn readout(tape: &mut Tape, x: Var) -> Result<Var> {
    let (m, _) = tape.value(x).dims2()?;
    if m == 0 {
        return Err(DagamError::Degenerate("readout of an empty graph".into()));
    }
    let mean = tape.reduce(ReduceKind::Mean, x, 0)?;
    let max = tape.reduce(ReduceKind::Max, x, 0)?;
    tape.concat(&[mean, max])
}

pub fn grad_reverse(tape: &mut Tape, x: Var, lambda: f64) -> Var {
    tape.grad_reverse(x, lambda)
}

fn mlp(tape: &mut Tape, mut h: Var, layers: &[(Var, Var)]) -> Result<Var> {
    for (i, &(w, b)) in layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        h = tape.add(z, b)?;
        if i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Which parts of the network a forward pass should build.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub k: f64,
    pub lambda: f64,
    pub emotion: bool,
    pub domain: bool,
    /// per-graph frozen pooling selections
    pub frozen: Option<&'a [Vec<usize>]>,
}

#[derive(Debug)]
pub struct BatchOutput {
    /// `B×C` probabilities
    pub emotion: Option<Var>,
    /// `B×2` probabilities
    pub domain: Option<Var>,
    pub embeddings: Var,
    pub pools: Vec<PoolResult>,
}

/// Embed one graph: GCN stack, attention pooling, readout.
pub fn embed_graph(
    tape: &mut Tape,
    vars: &ParamVars,
    lap: Var,
    adjacency: &Tensor,
    x: &Tensor,
    k: f64,
    frozen: Option<&[usize]>,
) -> Result<(Var, PoolResult)> {
    let mut h = tape.constant(x.clone());
    for &w in &vars.gcn {
        h = gcn_layer(tape, lap, h, w, Activation::Relu)?;
    }
    let scores = attention_scores(tape, lap, h, vars.attention)?;
    let (pooled, pool) = sag_pool(tape, h, adjacency, scores, k, frozen)?;
    Ok((readout(tape, pooled)?, pool))
}

/// Batched forward pass over several graphs sharing one layout.
pub fn forward_batch(
    tape: &mut Tape,
    vars: &ParamVars,
    lap: Var,
    ctx: &GraphContext,
    xs: &[&Tensor],
    opts: ForwardOptions<'_>,
) -> Result<BatchOutput> {
    check_ratio(opts.k)?;
    if xs.is_empty() {
        return Err(DagamError::Degenerate("empty batch".into()));
    }
    let mut embeddings = Vec::with_capacity(xs.len());
    let mut pools = Vec::with_capacity(xs.len());
    for (i, x) in xs.iter().enumerate() {
        if x.rank() != 2 || x.shape()[0] != ctx.nodes() {
            return Err(DagamError::dim(format!(
                "sample has shape {:?} but the layout has {} channels",
                x.shape(),
                ctx.nodes()
            )));
        }
        let frozen = opts.frozen.map(|f| f[i].as_slice());
        let (s, pool) = embed_graph(tape, vars, lap, &ctx.adjacency, x, opts.k, frozen)?;
        embeddings.push(s);
        pools.push(pool);
    }
    let s = tape.stack_rows(&embeddings)?;
    let emotion = if opts.emotion {
        let logits = mlp(tape, s, &vars.emotion)?;
        Some(tape.softmax_rows(logits)?)
    } else {
        None
    };
    let domain = if opts.domain {
        let reversed = grad_reverse(tape, s, opts.lambda);
        let logits = mlp(tape, reversed, &vars.domain)?;
        Some(tape.softmax_rows(logits)?)
    } else {
        None
    };
    Ok(BatchOutput {
        emotion,
        domain,
        embeddings: s,
        pools,
    })
}

/// Inference output for one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub emotion: Vec<f64>,
    pub domain: Vec<f64>,
    pub pool: PoolResult,
}

/// Full forward pass for one sample.
pub fn forward(
    params: &ModelParams,
    ctx: &GraphContext,
    x: &Tensor,
    k: f64,
    lambda: f64,
) -> Result<Prediction> {
    let mut out = predict_batch(params, ctx, &[x], k, lambda)?;
    Ok(out.remove(0))
}

/// Forward passes for many samples, without keeping a tape around.
pub fn predict_batch(
    params: &ModelParams,
    ctx: &GraphContext,
    xs: &[&Tensor],
    k: f64,
    lambda: f64,
) -> Result<Vec<Prediction>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let lap = tape.constant(ctx.laplacian.clone());
    let out = forward_batch(
        &mut tape,
        &vars,
        lap,
        ctx,
        xs,
        ForwardOptions {
            k,
            lambda,
            emotion: true,
            domain: true,
            frozen: None,
        },
    )?;
    let em = tape.value(out.emotion.expect("emotion head")).clone();
    let dm = tape.value(out.domain.expect("domain head")).clone();
    Ok(out
        .pools
        .into_iter()
        .enumerate()
        .map(|(i, pool)| Prediction {
            emotion: em.row(i).to_vec(),
            domain: dm.row(i).to_vec(),
            pool,
        })
        .collect())
}

/// Index of the largest probability, first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
