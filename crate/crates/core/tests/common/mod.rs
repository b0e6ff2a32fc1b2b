#![allow(dead_code)]

use dagam::autodiff::{ReduceKind, Tape, Tensor, Var};
use dagam::model::{
    forward_batch, Architecture, ForwardOptions, GraphContext, ModelParams, ParamVars,
};
use dagam::train::{domain_loss, emotion_loss_kl, total_loss};
use dagam::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Fixed weights that turn any tensor output into a scalar loss.
pub fn weighted_sum(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| 0.3 + 0.17 * i as f64 * if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}

#[derive(Clone, Copy)]
pub enum Domain {
    Any,
    Positive,
}

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub domain: Domain,
    pub f: fn(&mut Tape, &[Var]) -> Result<Var>,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    domain: Domain,
    f: fn(&mut Tape, &[Var]) -> Result<Var>,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        domain,
        f,
    }
}

/// One entry per differentiable tape operation.
pub fn op_cases() -> Vec<OpCase> {
    use Domain::*;
    vec![
        case("matmul", &[&[2, 3], &[3, 4]], Any, |t, v| {
            let o = t.matmul(v[0], v[1])?;
            weighted_sum(t, o)
        }),
        case("add_broadcast", &[&[2, 3], &[3]], Any, |t, v| {
            let o = t.add(v[0], v[1])?;
            weighted_sum(t, o)
        }),
        case("sub_broadcast", &[&[2, 1], &[2, 3]], Any, |t, v| {
            let o = t.sub(v[0], v[1])?;
            weighted_sum(t, o)
        }),
        case("mul_broadcast", &[&[3, 2], &[3, 1]], Any, |t, v| {
            let o = t.mul(v[0], v[1])?;
            weighted_sum(t, o)
        }),
        case("relu", &[&[3, 3]], Any, |t, v| {
            let o = t.relu(v[0]);
            weighted_sum(t, o)
        }),
        case("tanh", &[&[3, 3]], Any, |t, v| {
            let o = t.tanh(v[0]);
            weighted_sum(t, o)
        }),
        case("exp", &[&[2, 3]], Any, |t, v| {
            let o = t.exp(v[0]);
            weighted_sum(t, o)
        }),
        case("log", &[&[2, 3]], Positive, |t, v| {
            let o = t.log(v[0]);
            weighted_sum(t, o)
        }),
        case("clamp", &[&[3, 3]], Any, |t, v| {
            let o = t.clamp(v[0], -0.8, 0.8)?;
            weighted_sum(t, o)
        }),
        case("scale", &[&[2, 2]], Any, |t, v| {
            let o = t.scale(v[0], -1.7);
            weighted_sum(t, o)
        }),
        case("reduce_mean", &[&[3, 4]], Any, |t, v| {
            let o = t.reduce(ReduceKind::Mean, v[0], 0)?;
            weighted_sum(t, o)
        }),
        case("reduce_max", &[&[4, 3]], Any, |t, v| {
            let o = t.reduce(ReduceKind::Max, v[0], 0)?;
            weighted_sum(t, o)
        }),
        case("reduce_sum", &[&[3, 4]], Any, |t, v| {
            let o = t.reduce(ReduceKind::Sum, v[0], 1)?;
            weighted_sum(t, o)
        }),
        case("sum_all", &[&[2, 3]], Any, |t, v| {
            let o = t.sum_all(v[0]);
            Ok(t.scale(o, 0.5))
        }),
        case("mean_all", &[&[2, 3]], Any, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.mean_all(sq))
        }),
        case("softmax_rows", &[&[3, 4]], Any, |t, v| {
            let o = t.softmax_rows(v[0])?;
            weighted_sum(t, o)
        }),
        case("gather_rows", &[&[4, 2]], Any, |t, v| {
            let o = t.gather_rows(v[0], &[3, 0, 3])?;
            weighted_sum(t, o)
        }),
        case("concat", &[&[3], &[2]], Any, |t, v| {
            let o = t.concat(&[v[0], v[1]])?;
            let sq = t.mul(o, o)?;
            weighted_sum(t, sq)
        }),
        case("stack_rows", &[&[3], &[3]], Any, |t, v| {
            let o = t.stack_rows(&[v[0], v[1]])?;
            let e = t.tanh(o);
            weighted_sum(t, e)
        }),
        case("reshape", &[&[2, 3]], Any, |t, v| {
            let r = t.reshape(v[0], &[3, 2])?;
            let w = t.constant(Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25])?);
            let o = t.matmul(r, w)?;
            weighted_sum(t, o)
        }),
    ]
}

pub fn sample_inputs(shapes: &[Vec<usize>], domain: Domain, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let data = (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    match domain {
                        Domain::Any => z,
                        Domain::Positive => 0.2 + z.abs(),
                    }
                })
                .collect();
            Tensor::new(s.clone(), data).unwrap()
        })
        .collect()
}

/// Tiny instance for end-to-end gradient checks: 4 nodes, 3 features, 2 classes.
pub struct TinyModel {
    pub params: ModelParams,
    pub ctx: GraphContext,
    pub xs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub targets: Vec<Tensor>,
    pub frozen_source: Vec<Vec<usize>>,
    pub frozen_target: Vec<Vec<usize>>,
}

pub const TINY_K: f64 = 0.5;

pub fn tiny_model(seed: u64) -> TinyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture {
        in_features: 3,
        gcn_hidden: vec![4, 4, 4],
        emotion_hidden: vec![5, 4],
        domain_hidden: vec![3],
        classes: 2,
    };
    let mut params = ModelParams::init(&arch, &mut rng).unwrap();
    // zero biases would park every dead unit exactly on a relu hinge
    let perturbed = params
        .tensors()
        .into_iter()
        .map(|t| {
            let data = t
                .data()
                .iter()
                .map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect();
    params.set_tensors(perturbed).unwrap();
    // random symmetric non-negative adjacency on 4 nodes
    let mut a = vec![0.0; 16];
    for i in 0..4 {
        a[i * 4 + i] = 1.0;
        for j in i + 1..4 {
            let w: f64 = rng.random_range(0.05..1.0);
            a[i * 4 + j] = w;
            a[j * 4 + i] = w;
        }
    }
    let adj = dagam::graph::Adjacency::from_matrix(Tensor::new(vec![4, 4], a).unwrap()).unwrap();
    let lap = dagam::graph::renormalized_laplacian(&adj).unwrap();
    let ctx = GraphContext::new(lap, adj.matrix().clone()).unwrap();
    let mut x = || sample_inputs(&[vec![4, 3]], Domain::Any, &mut rng).remove(0);
    let xs = vec![x(), x()];
    let targets = vec![x(), x()];
    let mut m = TinyModel {
        params,
        ctx,
        xs,
        labels: vec![0, 1],
        targets,
        frozen_source: vec![],
        frozen_target: vec![],
    };
    let (fs, ft) = current_selection(&m);
    m.frozen_source = fs;
    m.frozen_target = ft;
    m
}

fn current_selection(m: &TinyModel) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut tape = Tape::new();
    let vars = m.params.register(&mut tape);
    let lap = tape.constant(m.ctx.laplacian.clone());
    let opts = ForwardOptions {
        k: TINY_K,
        lambda: 1.0,
        emotion: true,
        domain: true,
        frozen: None,
    };
    let src: Vec<&Tensor> = m.xs.iter().collect();
    let tgt: Vec<&Tensor> = m.targets.iter().collect();
    let a = forward_batch(&mut tape, &vars, lap, &m.ctx, &src, opts).unwrap();
    let b = forward_batch(&mut tape, &vars, lap, &m.ctx, &tgt, opts).unwrap();
    (
        a.pools.into_iter().map(|p| p.index).collect(),
        b.pools.into_iter().map(|p| p.index).collect(),
    )
}

#[derive(Clone, Copy, PartialEq)]
pub enum LossPart {
    All,
    Domain,
}

/// `E_all` (or `L_d` alone) of the tiny model with pooling frozen.
pub fn tiny_loss(
    m: &TinyModel,
    tape: &mut Tape,
    vars: &ParamVars,
    lambda: f64,
    part: LossPart,
) -> Result<Var> {
    let lap = tape.constant(m.ctx.laplacian.clone());
    let opts = ForwardOptions {
        k: TINY_K,
        lambda,
        emotion: true,
        domain: true,
        frozen: Some(&m.frozen_source),
    };
    let src: Vec<&Tensor> = m.xs.iter().collect();
    let tgt: Vec<&Tensor> = m.targets.iter().collect();
    let s = forward_batch(tape, vars, lap, &m.ctx, &src, opts)?;
    let t = forward_batch(
        tape,
        vars,
        lap,
        &m.ctx,
        &tgt,
        ForwardOptions {
            emotion: false,
            frozen: Some(&m.frozen_target),
            ..opts
        },
    )?;
    let l_d = domain_loss(tape, s.domain.unwrap(), t.domain.unwrap())?;
    if part == LossPart::Domain {
        return Ok(l_d);
    }
    let onehot = Tensor::new(
        vec![m.labels.len(), 2],
        m.labels
            .iter()
            .flat_map(|&l| if l == 0 { [1.0, 0.0] } else { [0.0, 1.0] })
            .collect(),
    )?;
    let l_y = emotion_loss_kl(tape, s.emotion.unwrap(), &onehot)?;
    total_loss(tape, l_y, l_d)
}
