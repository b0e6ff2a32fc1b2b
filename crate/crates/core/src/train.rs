//! Losses, the per-fold training loop, and the evaluation protocols built on
//! it: leave-one-subject-out, the pooling-ratio sweep, and the ablations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::config::{EmotionLoss, ExperimentConfig};
use crate::error::{DagamError, Result};
use crate::features::FeatureSample;
use crate::graph::{default_global_pairs, prepare_graph, ElectrodeLayout};
use crate::model::{
    argmax, forward_batch, pooled_count, predict_batch, ForwardOptions, GraphContext, ModelParams,
};

/// Largest tolerated deviation of a probability row sum from 1.
pub const PROB_TOLERANCE: f64 = 1e-6;

fn check_prob_rows(t: &Tensor, what: &str) -> Result<()> {
    let (rows, _) = t.dims2()?;
    for r in 0..rows {
        let s: f64 = t.row(r).iter().sum();
        if !((s - 1.0).abs() <= PROB_TOLERANCE) {
            return Err(DagamError::Contract(format!(
                "{what} row {r} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::from_parts(vec![labels.len(), classes], data)
}

/// `-(1/B) Σ t ⊙ ln q` over a batch.
fn mean_nll(tape: &mut Tape, probs: Var, targets: Tensor) -> Result<Var> {
    let rows = targets.shape()[0] as f64;
    let t = tape.constant(targets);
    let logq = tape.log(probs);
    let prod = tape.mul(logq, t)?;
    let total = tape.sum_all(prod);
    Ok(tape.scale(total, -1.0 / rows))
}

/// Domain cross-entropy: source rows labelled `[1, 0]`, target rows `[0, 1]`,
/// each domain mean-reduced, then summed.
pub fn domain_loss(tape: &mut Tape, source: Var, target: Var) -> Result<Var> {
    for (v, what) in [(source, "source domain"), (target, "target domain")] {
        let (_, cols) = tape.value(v).dims2()?;
        if cols != 2 {
            return Err(DagamError::dim(format!(
                "{what} probabilities need 2 columns, got {cols}"
            )));
        }
        check_prob_rows(tape.value(v), what)?;
    }
    let gs = tape.shape(source)[0];
    let gt = tape.shape(target)[0];
    let ls = mean_nll(tape, source, one_hot(&vec![0; gs], 2))?;
    let lt = mean_nll(tape, target, one_hot(&vec![1; gt], 2))?;
    tape.add(ls, lt)
}

/// Batch-mean `KL(t ‖ q) = Σ t (ln t - ln q)` with `0·ln 0 = 0`.
pub fn emotion_loss_kl(tape: &mut Tape, probs: Var, targets: &Tensor) -> Result<Var> {
    if tape.shape(probs) != targets.shape() {
        return Err(DagamError::dim(format!(
            "probabilities {:?} and targets {:?} differ in shape",
            tape.shape(probs),
            targets.shape()
        )));
    }
    check_prob_rows(tape.value(probs), "emotion probability")?;
    check_prob_rows(targets, "emotion target")?;
    let rows = targets.shape()[0] as f64;
    // the entropy term does not depend on the parameters
    let neg_entropy = targets
        .data()
        .iter()
        .filter(|&&t| t > 0.0)
        .map(|&t| t * t.ln())
        .sum::<f64>()
        / rows;
    let nll = mean_nll(tape, probs, targets.clone())?;
    let c = tape.constant(Tensor::scalar(neg_entropy));
    tape.add(nll, c)
}

/// Batch-mean categorical cross-entropy `-ln q_label`.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = tape.value(probs).dims2()?;
    if rows != labels.len() {
        return Err(DagamError::dim(format!(
            "{rows} probability rows for {} labels",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(DagamError::Data(format!(
            "label {l} outside {classes} classes"
        )));
    }
    check_prob_rows(tape.value(probs), "emotion probability")?;
    mean_nll(tape, probs, one_hot(labels, classes))
}

/// `E_all = L_y + L_d`; the adversarial sign lives in the gradient reversal.
pub fn total_loss(tape: &mut Tape, l_y: Var, l_d: Var) -> Result<Var> {
    tape.add(l_y, l_d)
}

/// Per-epoch means over the mini-batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub e_all: f64,
    pub l_y: f64,
    pub l_d: f64,
    /// source accuracy on the training batches
    pub accuracy: f64,
    /// reversal coefficient at the last step
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
}

/// Train one model on labelled `source` graphs and unlabelled `target`
/// feature matrices.
pub fn train_fold(
    source: &[&FeatureSample],
    target: &[&Tensor],
    ctx: &GraphContext,
    classes: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(DagamError::Data("no source samples to train on".into()));
    }
    if let Some(s) = source.iter().find(|s| s.label >= classes) {
        return Err(DagamError::Data(format!(
            "label {} of subject {} outside {classes} classes",
            s.label, s.subject
        )));
    }
    let adam = AdamConfig::new(cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(&cfg.architecture(classes), &mut rng)?;
    let mut state = AdamState::for_params(&params.tensors());
    let use_domain = cfg.domain_adversarial && !target.is_empty();
    let b = cfg.batch_size;
    let steps = source.len().div_ceil(b);
    let total_steps = (cfg.epochs * steps).max(1) as f64;

    let mut s_order: Vec<usize> = (0..source.len()).collect();
    let mut t_order: Vec<usize> = (0..target.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        s_order.shuffle(&mut rng);
        t_order.shuffle(&mut rng);
        let mut t_cursor = 0;
        let (mut sum_e, mut sum_y, mut sum_d) = (0.0, 0.0, 0.0);
        let mut correct = 0usize;
        let mut lambda = 0.0;
        for step in 0..steps {
            let batch = &s_order[step * b..((step + 1) * b).min(source.len())];
            lambda = cfg.lambda_at((epoch * steps + step) as f64 / total_steps);

            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let lap = tape.constant(ctx.laplacian.clone());
            let xs: Vec<&Tensor> = batch.iter().map(|&i| &source[i].x).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| source[i].label).collect();
            let opts = ForwardOptions {
                k: cfg.k,
                lambda,
                emotion: true,
                domain: use_domain,
                frozen: None,
            };
            let src = forward_batch(&mut tape, &vars, lap, ctx, &xs, opts)?;
            let probs = src.emotion.expect("emotion head requested");
            if !tape.value(probs).all_finite() {
                return Err(DagamError::Divergence {
                    epoch,
                    detail: format!("non-finite class probabilities at step {step}"),
                });
            }
            let l_y = match cfg.emotion_loss {
                EmotionLoss::Kl => emotion_loss_kl(&mut tape, probs, &one_hot(&labels, classes))?,
                EmotionLoss::Ce => cross_entropy(&mut tape, probs, &labels)?,
            };
            let (e_all, l_d) = if use_domain {
                let tx: Vec<&Tensor> = (0..batch.len())
                    .map(|j| target[t_order[(t_cursor + j) % target.len()]])
                    .collect();
                t_cursor = (t_cursor + batch.len()) % target.len();
                let tgt = forward_batch(
                    &mut tape,
                    &vars,
                    lap,
                    ctx,
                    &tx,
                    ForwardOptions {
                        emotion: false,
                        ..opts
                    },
                )?;
                let l_d = domain_loss(
                    &mut tape,
                    src.domain.expect("domain head requested"),
                    tgt.domain.expect("domain head requested"),
                )?;
                (total_loss(&mut tape, l_y, l_d)?, tape.value(l_d).item()?)
            } else {
                (l_y, 0.0)
            };

            let e = tape.value(e_all).item()?;
            if !e.is_finite() {
                return Err(DagamError::Divergence {
                    epoch,
                    detail: format!("loss {e} at step {step}"),
                });
            }
            sum_e += e;
            sum_y += tape.value(l_y).item()?;
            sum_d += l_d;
            let p = tape.value(probs);
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(r, &l)| argmax(p.row(r)) == l)
                .count();

            tape.backward(e_all)?;
            let grads: Vec<Option<Tensor>> =
                vars.all.iter().map(|&v| tape.grad(v).cloned()).collect();
            let mut values = params.tensors();
            adam_step(&mut values, &grads, &mut state, &adam)?;
            params.set_tensors(values)?;
        }
        params.validate().map_err(|e| DagamError::Divergence {
            epoch,
            detail: e.to_string(),
        })?;
        history.push(EpochStats {
            epoch,
            e_all: sum_e / steps as f64,
            l_y: sum_y / steps as f64,
            l_d: sum_d / steps as f64,
            accuracy: correct as f64 / source.len() as f64,
            lambda,
        });
    }
    Ok(TrainOutcome { params, history })
}

/// Predicted class of every sample.
pub fn predict_labels(
    params: &ModelParams,
    ctx: &GraphContext,
    xs: &[&Tensor],
    k: f64,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(64) {
        out.extend(
            predict_batch(params, ctx, chunk, k, 0.0)?
                .iter()
                .map(|p| argmax(&p.emotion)),
        );
    }
    Ok(out)
}

/// Class counts indexed `[true label][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    /// Rows scaled to sum to 1; rows without support stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| {
                        if total == 0 {
                            0.0
                        } else {
                            c as f64 / total as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hit: u64 = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        match self.total() {
            0 => 0.0,
            t => hit as f64 / t as f64,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(DagamError::dim("confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(DagamError::dim(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(classes);
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(DagamError::Data(format!(
                "class ({l}, {p}) outside {classes} classes"
            )));
        }
        m.counts[l][p] += 1;
    }
    Ok(m)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Feature samples of several subjects on one electrode layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub layout: ElectrodeLayout,
    pub classes: Vec<String>,
    /// fold order
    pub subjects: Vec<String>,
    pub samples: Vec<FeatureSample>,
}

impl FeatureDataset {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(DagamError::Data(format!(
                "need at least 2 classes, got {}",
                self.classes.len()
            )));
        }
        let n = self.layout.len();
        let f = self
            .samples
            .first()
            .map(|s| s.x.shape().get(1).copied().unwrap_or(0));
        for s in &self.samples {
            if s.x.rank() != 2 || s.x.shape()[0] != n || Some(s.x.shape()[1]) != f {
                return Err(DagamError::Data(format!(
                    "sample of subject {} trial {} has shape {:?}, expected {n} channels",
                    s.subject,
                    s.trial,
                    s.x.shape()
                )));
            }
            if s.label >= self.classes.len() {
                return Err(DagamError::Data(format!(
                    "label {} outside {} classes",
                    s.label,
                    self.classes.len()
                )));
            }
            if !self.subjects.contains(&s.subject) {
                return Err(DagamError::Data(format!(
                    "sample of unlisted subject {}",
                    s.subject
                )));
            }
        }
        for subj in &self.subjects {
            if !self.samples.iter().any(|s| &s.subject == subj) {
                return Err(DagamError::Data(format!("subject {subj} has no samples")));
            }
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.shape()[1])
    }
}

/// Adjacency and Laplacian for the dataset's layout under `cfg`.
pub fn graph_context(layout: &ElectrodeLayout, cfg: &ExperimentConfig) -> Result<GraphContext> {
    let pairs = match &cfg.global_pairs {
        Some(p) => p.clone(),
        None => default_global_pairs(layout),
    };
    let (adj, lap) = prepare_graph(layout, cfg.sigma, &pairs, cfg.global_weight)?;
    GraphContext::new(lap, adj.matrix().clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub target: String,
    pub sources: Vec<String>,
    pub seed: u64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub history: Vec<EpochStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldRun {
    pub result: FoldResult,
    pub params: ModelParams,
}

fn check_ready(ds: &FeatureDataset, cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    ds.validate()?;
    if ds.subjects.len() < 2 {
        return Err(DagamError::Data(format!(
            "leave-one-subject-out needs at least 2 subjects, got {}",
            ds.subjects.len()
        )));
    }
    if ds.features() != cfg.features.bands.len() {
        return Err(DagamError::Config(format!(
            "dataset has {} features per channel but {} bands are configured",
            ds.features(),
            cfg.features.bands.len()
        )));
    }
    Ok(())
}

/// Train on every subject but `fold`, test on subject `fold`. Only the
/// feature matrices of the held-out subject reach the trainer.
pub fn run_fold(
    ds: &FeatureDataset,
    ctx: &GraphContext,
    cfg: &ExperimentConfig,
    fold: usize,
) -> Result<FoldRun> {
    let target = ds
        .subjects
        .get(fold)
        .ok_or_else(|| DagamError::Config(format!("fold {fold} out of range")))?;
    let (test, train): (Vec<&FeatureSample>, Vec<&FeatureSample>) =
        ds.samples.iter().partition(|s| &s.subject == target);
    let target_x: Vec<&Tensor> = test.iter().map(|s| &s.x).collect();
    let seed = cfg.fold_seed(fold);
    let outcome = train_fold(&train, &target_x, ctx, ds.classes.len(), cfg, seed)?;
    let preds = predict_labels(&outcome.params, ctx, &target_x, cfg.k)?;
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let cm = confusion(&preds, &labels, ds.classes.len())?;
    Ok(FoldRun {
        result: FoldResult {
            fold,
            target: target.clone(),
            sources: ds
                .subjects
                .iter()
                .filter(|s| *s != target)
                .cloned()
                .collect(),
            seed,
            accuracy: cm.accuracy(),
            confusion: cm,
            history: outcome.history,
        },
        params: outcome.params,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoocvResult {
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    pub std: f64,
    /// summed over folds
    pub confusion: ConfusionMatrix,
}

/// One fold per subject, folds run in parallel.
pub fn loocv(ds: &FeatureDataset, cfg: &ExperimentConfig) -> Result<LoocvResult> {
    check_ready(ds, cfg)?;
    let ctx = graph_context(&ds.layout, cfg)?;
    let folds = (0..ds.subjects.len())
        .into_par_iter()
        .map(|i| run_fold(ds, &ctx, cfg, i).map(|r| r.result))
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let mut cm = ConfusionMatrix::zeros(ds.classes.len());
    for f in &folds {
        cm.merge(&f.confusion)?;
    }
    Ok(LoocvResult {
        folds,
        mean,
        std,
        confusion: cm,
    })
}

/// `0.1, 0.2, …, 0.9`.
pub fn default_k_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: f64,
    pub pooled_nodes: usize,
    pub mean: f64,
    pub std: f64,
    pub fold_accuracies: Vec<f64>,
}

pub fn sweep_k(ds: &FeatureDataset, cfg: &ExperimentConfig, ks: &[f64]) -> Result<Vec<SweepRow>> {
    if let Some(k) = ks.iter().find(|&&k| !(k > 0.0 && k <= 1.0)) {
        return Err(DagamError::Config(format!(
            "pooling ratio {k} outside (0, 1]"
        )));
    }
    ks.iter()
        .map(|&k| {
            let run = loocv(ds, &ExperimentConfig { k, ..cfg.clone() })?;
            Ok(SweepRow {
                k,
                pooled_nodes: pooled_count(ds.layout.len(), k),
                mean: run.mean,
                std: run.std,
                fold_accuracies: run.folds.iter().map(|f| f.accuracy).collect(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoDomainAdversarial,
    NoKl,
    NoBoth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoDomainAdversarial,
        Variant::NoKl,
        Variant::NoBoth,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "DAGAM",
            Variant::NoDomainAdversarial => "- Domain adversarial",
            Variant::NoKl => "- KL divergence",
            Variant::NoBoth => "- Domain adversarial and KL divergence",
        }
    }

    pub fn apply(self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        if matches!(self, Variant::NoDomainAdversarial | Variant::NoBoth) {
            c.domain_adversarial = false;
            c.lambda = 0.0;
        }
        if matches!(self, Variant::NoKl | Variant::NoBoth) {
            c.emotion_loss = EmotionLoss::Ce;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub mean: f64,
    pub std: f64,
    pub fold_accuracies: Vec<f64>,
}

pub fn ablate(ds: &FeatureDataset, cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let run = loocv(ds, &v.apply(cfg))?;
            Ok(AblationRow {
                variant: v,
                label: v.label().to_string(),
                mean: run.mean,
                std: run.std,
                fold_accuracies: run.folds.iter().map(|f| f.accuracy).collect(),
            })
        })
        .collect()
}
