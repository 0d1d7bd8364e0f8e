//! Masked-objective training: cross entropy over masked positions, AdamW
//! with decoupled weight decay and global-norm clipping, the per-task
//! training loop with best-validation checkpointing, the scaled-accuracy
//! metric, and exhaustive grid search.
//!
//! Determinism: a run is a pure function of (task splits, config, seed).
//! Batch gradients are reduced over a fixed number of sample groups in group
//! order, so the loss curve is bitwise reproducible for a given binary
//! regardless of worker count.

use crate::blocks::{
    argmax_tokens, model_backward, model_forward, ModelConfig, ModelGrads, ModelParams,
};
use crate::kernels::fd;
use crate::kernels::TensorVisit;
use crate::tasks::{SplitSpec, Splits, TaskSample, TaskSpec};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Fixed gradient-reduction fan-in (see module docs).
const GRAD_GROUPS: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Early-stop patience in steps without validation improvement.
    pub patience: usize,
    pub clip_norm: f64,
    /// Stop as soon as validation scaled accuracy reaches this value.
    pub early_stop_scaled: f64,
    pub seed: u64,
    /// Print one progress line per evaluation to stderr.
    #[serde(default)]
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 256,
            max_steps: 20_000,
            eval_every: 250,
            patience: 2_000,
            clip_norm: 1.0,
            early_stop_scaled: 0.999,
            seed: 0,
            progress: false,
        }
    }
}

impl TrainConfig {
    /// Flat JSON config file, every field optional over the defaults.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut base = serde_json::to_value(TrainConfig::default())
            .map_err(|e| Error::Input(e.to_string()))?;
        let overlay: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Input(format!("bad config: {e}")))?;
        let obj = overlay
            .as_object()
            .ok_or_else(|| Error::Input("config must be a flat JSON object".into()))?;
        let base_obj = base.as_object_mut().unwrap();
        for (k, v) in obj {
            if !base_obj.contains_key(k) {
                return Err(Error::Input(format!("unknown config key {k:?}")));
            }
            base_obj.insert(k.clone(), v.clone());
        }
        serde_json::from_value(base).map_err(|e| Error::Input(format!("bad config: {e}")))
    }
}

// ── Loss ────────────────────────────────────────────────────────────────

/// Mean of −log softmax(logits)[target] over masked positions.
/// `logits` is position-major (len, vocab).
pub fn masked_cross_entropy(logits: &[f64], targets: &[usize], mask: &[u8]) -> Result<f64> {
    let (sum, count, _) = ce_with_grad(logits, targets, mask, false)?;
    Ok(sum / count as f64)
}

/// Loss pieces plus (optionally) unscaled dlogits = softmax − onehot at
/// masked positions.
fn ce_with_grad(
    logits: &[f64],
    targets: &[usize],
    mask: &[u8],
    want_grad: bool,
) -> Result<(f64, usize, Vec<f64>)> {
    let len = targets.len();
    if len != mask.len() || len == 0 || logits.len() % len != 0 {
        return Err(Error::Contract("loss shape mismatch".into()));
    }
    if mask.iter().all(|m| *m == 0) {
        return Err(Error::Contract("mask selects no positions".into()));
    }
    let vocab = logits.len() / len;
    let mut dlogits = if want_grad { vec![0.0; logits.len()] } else { Vec::new() };
    let mut sum = 0.0;
    let mut count = 0usize;
    for l in 0..len {
        if mask[l] == 0 {
            continue;
        }
        let row = &logits[l * vocab..(l + 1) * vocab];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row {
            z += (v - max).exp();
        }
        let lse = max + z.ln();
        sum += lse - row[targets[l]];
        count += 1;
        if want_grad {
            let drow = &mut dlogits[l * vocab..(l + 1) * vocab];
            for (dv, v) in drow.iter_mut().zip(row.iter()) {
                *dv = (v - lse).exp();
            }
            drow[targets[l]] -= 1.0;
        }
    }
    Ok((sum, count, dlogits))
}

// ── Metrics ─────────────────────────────────────────────────────────────

/// (acc − baseline) / (1 − baseline) with chance baseline 1/num_classes.
pub fn scaled_accuracy(acc: f64, num_classes: usize) -> f64 {
    scaled_accuracy_with_baseline(acc, 1.0 / num_classes as f64)
}

pub fn scaled_accuracy_with_baseline(acc: f64, baseline: f64) -> f64 {
    (acc - baseline) / (1.0 - baseline)
}

// ── AdamW ───────────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<P: TensorVisit>(params: &P) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(vec![0.0; t.len()]));
        let v = m.clone();
        AdamState { m, v, t: 0 }
    }
}

/// One decoupled-weight-decay Adam step. Rejects non-finite gradients
/// without touching parameters or state.
pub fn adamw_step<P: TensorVisit, G: TensorVisit>(
    params: &mut P,
    grads: &G,
    state: &mut AdamState,
    lr: f64,
    wd: f64,
) -> Result<()> {
    let mut finite = true;
    grads.visit(&mut |_, t| finite &= t.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::NonFinite(
            "gradient contains non-finite values; step rejected".into(),
        ));
    }
    let mut gtensors: Vec<(String, Vec<f64>)> = grads.named_tensors();
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let mut k = 0usize;
    params.visit_mut(&mut |name, p| {
        let (gname, g) = &mut gtensors[k];
        assert_eq!(name, gname, "param/grad traversal order mismatch");
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * p[i]);
        }
        k += 1;
    });
    Ok(())
}

/// Global L2 norm across every gradient tensor.
pub fn grad_global_norm(grads: &ModelGrads) -> f64 {
    let mut sq = 0.0;
    grads.visit(&mut |_, t| {
        for v in t {
            sq += v * v;
        }
    });
    sq.sqrt()
}

// ── Evaluation ──────────────────────────────────────────────────────────

/// Fraction of masked positions where the greedy prediction matches the
/// target.
pub fn eval_accuracy(params: &ModelParams, samples: &[TaskSample]) -> Result<f64> {
    let vocab = params.cfg.vocab_size;
    let chunk = samples.len().div_ceil(GRAD_GROUPS).max(1);
    let counts: Vec<Result<(usize, usize)>> = samples
        .par_chunks(chunk)
        .map(|chunk| {
            let mut correct = 0usize;
            let mut total = 0usize;
            for s in chunk {
                let (logits, _) = model_forward(params, &s.input)?;
                let preds = argmax_tokens(&logits, vocab);
                for pos in s.masked_positions() {
                    total += 1;
                    if preds[pos] == s.target[pos] {
                        correct += 1;
                    }
                }
            }
            Ok((correct, total))
        })
        .collect();
    let mut correct = 0usize;
    let mut total = 0usize;
    for c in counts {
        let (c, t) = c?;
        correct += c;
        total += t;
    }
    if total == 0 {
        return Err(Error::Contract("no masked positions in evaluation set".into()));
    }
    Ok(correct as f64 / total as f64)
}

// ── Training loop ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_scaled: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub task: String,
    pub pattern: String,
    pub d_model: usize,
    pub n_state: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub steps_run: usize,
    pub best_step: usize,
    pub best_val_scaled: f64,
    pub test_accuracy: f64,
    pub test_scaled: f64,
    pub failed: Option<String>,
}

pub struct TrainReport {
    pub summary: TrainSummary,
    pub records: Vec<EvalRecord>,
    pub best_params: ModelParams,
}

/// Mean batch loss and the summed, then 1/N-scaled, gradients.
fn batch_step(
    params: &ModelParams,
    samples: &[TaskSample],
    indices: &[usize],
) -> Result<(f64, ModelGrads)> {
    let chunk = indices.len().div_ceil(GRAD_GROUPS).max(1);
    let parts: Vec<Result<(f64, usize, ModelGrads)>> = indices
        .par_chunks(chunk)
        .map(|idxs| {
            let mut grads = ModelGrads::zeros(params);
            let mut loss_sum = 0.0;
            let mut count = 0usize;
            for &i in idxs {
                let s = &samples[i];
                let (logits, cache) = model_forward(params, &s.input)?;
                let (sum, n, dlogits) = ce_with_grad(&logits, &s.target, &s.mask, true)?;
                loss_sum += sum;
                count += n;
                model_backward(params, &cache, &dlogits, &mut grads)?;
            }
            Ok((loss_sum, count, grads))
        })
        .collect();
    let mut grads = ModelGrads::zeros(params);
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for p in parts {
        let (l, n, g) = p?;
        loss_sum += l;
        count += n;
        grads.accumulate(&g);
    }
    grads.scale(1.0 / count as f64);
    Ok((loss_sum / count as f64, grads))
}

/// Train one model on pre-generated splits; checkpoints the
/// best-validation parameters and evaluates them on the test split.
pub fn train_task(
    task: &TaskSpec,
    pattern: &str,
    d_model: usize,
    n_state: usize,
    cfg: &TrainConfig,
    splits: &Splits,
) -> Result<TrainReport> {
    let model_cfg = ModelConfig::new(pattern, task.vocab_size(), d_model, n_state);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(10);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(11);

    let mut model = ModelParams::init(model_cfg, &mut init_rng)?;
    let mut adam = AdamState::new(&model);
    let num_classes = task.num_classes();

    let mut records = Vec::new();
    let mut best_val_scaled = f64::NEG_INFINITY;
    let mut best_step = 0usize;
    let mut best_params = model.clone();
    let mut failed = None;
    let mut steps_run = 0usize;
    let mut running_loss = f64::NAN;

    'outer: for step in 1..=cfg.max_steps {
        steps_run = step;
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batch_rng.gen_range(0..splits.train.len()))
            .collect();
        let (loss, mut grads) = batch_step(&model, &splits.train, &indices)?;
        running_loss = loss;
        if !loss.is_finite() {
            failed = Some(format!("loss diverged to {loss} at step {step}"));
            break 'outer;
        }
        let norm = grad_global_norm(&grads);
        if !norm.is_finite() {
            failed = Some(format!("gradient norm diverged at step {step}"));
            break 'outer;
        }
        if norm > cfg.clip_norm {
            grads.scale(cfg.clip_norm / norm);
        }
        adamw_step(&mut model, &grads, &mut adam, cfg.learning_rate, cfg.weight_decay)?;
        model.project_invariants();

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let val_acc = eval_accuracy(&model, &splits.val)?;
            let val_scaled = scaled_accuracy(val_acc, num_classes);
            records.push(EvalRecord {
                step,
                train_loss: loss,
                val_accuracy: val_acc,
                val_scaled,
            });
            if cfg.progress {
                eprintln!(
                    "  step {step}: loss {loss:.4} val acc {val_acc:.4} scaled {val_scaled:.4}"
                );
            }
            if val_scaled > best_val_scaled + 1e-12 {
                best_val_scaled = val_scaled;
                best_step = step;
                best_params = model.clone();
            }
            if val_scaled >= cfg.early_stop_scaled {
                break 'outer;
            }
            if step.saturating_sub(best_step) >= cfg.patience {
                break 'outer;
            }
        }
    }

    if records.is_empty() && failed.is_none() {
        let val_acc = eval_accuracy(&model, &splits.val)?;
        let val_scaled = scaled_accuracy(val_acc, num_classes);
        records.push(EvalRecord {
            step: steps_run,
            train_loss: running_loss,
            val_accuracy: val_acc,
            val_scaled,
        });
        best_val_scaled = val_scaled;
        best_step = steps_run;
        best_params = model.clone();
    }

    let test_accuracy = if failed.is_none() {
        eval_accuracy(&best_params, &splits.test)?
    } else {
        0.0
    };
    let test_scaled = scaled_accuracy(test_accuracy, num_classes);
    Ok(TrainReport {
        summary: TrainSummary {
            task: task.id.name().into(),
            pattern: pattern.into(),
            d_model,
            n_state,
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            seed: cfg.seed,
            steps_run,
            best_step,
            best_val_scaled,
            test_accuracy,
            test_scaled,
            failed,
        },
        records,
        best_params,
    })
}

/// JSONL run records (one object per eval step) plus a one-row CSV summary.
pub fn save_report(dir: &Path, report: &TrainReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let tag = format!(
        "{}_{}_d{}_n{}_s{}",
        report.summary.task,
        report.summary.pattern,
        report.summary.d_model,
        report.summary.n_state,
        report.summary.seed
    );
    let mut jsonl = std::fs::File::create(dir.join(format!("{tag}_records.jsonl")))?;
    for r in &report.records {
        let line = serde_json::to_string(r).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(jsonl, "{line}")?;
    }
    let mut csv = std::fs::File::create(dir.join(format!("{tag}_summary.csv")))?;
    writeln!(
        csv,
        "task,pattern,d_model,n_state,learning_rate,weight_decay,seed,steps_run,best_step,\
         best_val_scaled,test_accuracy,test_scaled,failed"
    )?;
    let s = &report.summary;
    writeln!(
        csv,
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        s.task,
        s.pattern,
        s.d_model,
        s.n_state,
        s.learning_rate,
        s.weight_decay,
        s.seed,
        s.steps_run,
        s.best_step,
        s.best_val_scaled,
        s.test_accuracy,
        s.test_scaled,
        s.failed.clone().unwrap_or_default()
    )?;
    Ok(())
}

// ── Grid search ─────────────────────────────────────────────────────────

/// Grid axes; defaults follow the hyperparameter sweep protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridAxes {
    pub d_model: Vec<usize>,
    pub n_state: Vec<usize>,
    pub weight_decay: Vec<f64>,
    pub learning_rate: Vec<f64>,
}

impl Default for GridAxes {
    fn default() -> Self {
        GridAxes {
            d_model: vec![8, 16, 32, 64],
            n_state: vec![8, 16, 32],
            weight_decay: vec![0.0, 0.001, 0.01],
            learning_rate: vec![1e-4, 1e-3, 1e-2],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub d_model: usize,
    pub n_state: usize,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub seed_scores: Vec<f64>,
    pub mean_val_scaled: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: GridCell,
}

/// Exhaustive sweep over the axes; `run` maps (d, n, wd, lr, seed) to a
/// validation scaled accuracy. Best cell by mean over seeds.
pub fn grid_search<F>(axes: &GridAxes, seeds: &[u64], mut run: F) -> Result<GridResult>
where
    F: FnMut(usize, usize, f64, f64, u64) -> Result<f64>,
{
    if axes.d_model.is_empty()
        || axes.n_state.is_empty()
        || axes.weight_decay.is_empty()
        || axes.learning_rate.is_empty()
        || seeds.is_empty()
    {
        return Err(Error::Config("grid axes and seeds must be non-empty".into()));
    }
    let mut cells = Vec::new();
    for &d in &axes.d_model {
        for &n in &axes.n_state {
            for &wd in &axes.weight_decay {
                for &lr in &axes.learning_rate {
                    let mut scores = Vec::with_capacity(seeds.len());
                    for &seed in seeds {
                        scores.push(run(d, n, wd, lr, seed)?);
                    }
                    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
                    cells.push(GridCell {
                        d_model: d,
                        n_state: n,
                        weight_decay: wd,
                        learning_rate: lr,
                        seed_scores: scores,
                        mean_val_scaled: mean,
                    });
                }
            }
        }
    }
    let best = cells
        .iter()
        .max_by(|a, b| a.mean_val_scaled.partial_cmp(&b.mean_val_scaled).unwrap())
        .unwrap()
        .clone();
    Ok(GridResult { cells, best })
}

pub fn write_grid_csv(path: &Path, result: &GridResult) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "d_model,n_state,weight_decay,learning_rate,mean_val_scaled,seed_scores")?;
    for c in &result.cells {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            c.d_model,
            c.n_state,
            c.weight_decay,
            c.learning_rate,
            c.mean_val_scaled,
            c.seed_scores
                .iter()
                .map(|s| format!("{s}"))
                .collect::<Vec<_>>()
                .join("|")
        )?;
    }
    Ok(())
}

// ── End-to-end gradient spot check ──────────────────────────────────────

/// Central-difference check of `n_spots` randomly chosen parameter elements
/// through the full masked-CE loss on one sample.
pub fn gradcheck_model_spot(
    model: &ModelParams,
    sample: &TaskSample,
    n_spots: usize,
    seed: u64,
) -> Result<fd::GradCheckReport> {
    let (logits, cache) = model_forward(model, &sample.input)?;
    let (_, count, dlogits) = ce_with_grad(&logits, &sample.target, &sample.mask, true)?;
    let mut grads = ModelGrads::zeros(model);
    model_backward(model, &cache, &dlogits, &mut grads)?;
    let scale = 1.0 / count as f64;

    let mut names = Vec::new();
    grads.visit(&mut |name, t| names.push((name.to_string(), t.len())));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = fd::GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for _ in 0..n_spots {
        let ti = rng.gen_range(0..names.len());
        if names[ti].1 == 0 {
            continue;
        }
        let ei = rng.gen_range(0..names[ti].1);
        let mut analytic = 0.0;
        let mut k = 0usize;
        grads.visit(&mut |_, t| {
            if k == ti {
                analytic = t[ei] * scale;
            }
            k += 1;
        });
        let eval = |step: f64| -> f64 {
            let mut m = model.clone();
            let mut k = 0usize;
            m.visit_mut(&mut |_, t| {
                if k == ti {
                    t[ei] += step;
                }
                k += 1;
            });
            let (lg, _) = model_forward(&m, &sample.input).unwrap();
            masked_cross_entropy(&lg, &sample.target, &sample.mask).unwrap()
        };
        let numeric = (eval(fd::FD_STEP) - eval(-fd::FD_STEP)) / (2.0 * fd::FD_STEP);
        let err = fd::rel_err(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = format!("{}[{ei}]", names[ti].0);
        }
    }
    Ok(report)
}

/// Convenience wrapper: generate splits and train, one call.
pub fn train_task_fresh(
    task: &TaskSpec,
    pattern: &str,
    d_model: usize,
    n_state: usize,
    cfg: &TrainConfig,
    split_spec: &SplitSpec,
) -> Result<TrainReport> {
    let splits = crate::tasks::make_splits(task, split_spec)?;
    train_task(task, pattern, d_model, n_state, cfg, &splits)
}
