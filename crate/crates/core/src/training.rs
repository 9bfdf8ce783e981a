//! Adam optimization, the masked-loss training loop, five-fold
//! cross-validation, pooled metrics, and the per-cell linear baseline.

use crate::grid::{FieldStack, GridError};
use crate::vit::{ParamGrads, ViTConfig, ViTRegressor, VitError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("zero valid cells in evaluation")]
    ZeroValidCells,
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Optimizer and loop settings. Defaults are the reference configuration:
/// 30 epochs, learning rate 0.01, batch size 8, Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Fraction of the training days kept (seeded subsample) before batching.
    pub fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(TrainError::Config("fraction must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One cross-validation fold: disjoint train/validation index sets covering
/// all samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

/// Seeded shuffle, then five contiguous validation blocks over the shuffled
/// order. Blocks differ in size by at most one sample.
pub fn kfold_split(n_samples: usize, seed: u64) -> Result<Vec<FoldSplit>, TrainError> {
    const K: usize = 5;
    if n_samples < K {
        return Err(TrainError::Config(format!(
            "need at least {K} samples for {K}-fold splitting, got {n_samples}"
        )));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let base = n_samples / K;
    let extra = n_samples % K;
    let mut splits = Vec::with_capacity(K);
    let mut start = 0usize;
    for fold_index in 0..K {
        let len = base + usize::from(fold_index < extra);
        let validation_indices = order[start..start + len].to_vec();
        let mut train_indices = Vec::with_capacity(n_samples - len);
        train_indices.extend_from_slice(&order[..start]);
        train_indices.extend_from_slice(&order[start + len..]);
        splits.push(FoldSplit {
            fold_index,
            train_indices,
            validation_indices,
        });
        start += len;
    }
    Ok(splits)
}

/// Pooled evaluation metrics. Both reported R-squared interpretations are
/// computed: the coefficient of determination and the squared Pearson
/// correlation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub r2_det: f64,
    pub r2_pearson_sq: f64,
    /// Set when a correlation was undefined (constant predictions or
    /// targets) and the corresponding score was reported as 0.
    pub degenerate: bool,
    pub n: usize,
}

/// Metrics over pooled (prediction, target) pairs.
pub fn pooled_metrics(pairs: &[(f64, f64)]) -> Result<Metrics, TrainError> {
    let n = pairs.len();
    if n == 0 {
        return Err(TrainError::ZeroValidCells);
    }
    let nf = n as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for &(p, t) in pairs {
        let e = p - t;
        se += e * e;
        ae += e.abs();
    }
    let rmse = (se / nf).sqrt();
    let mae = ae / nf;
    assert!(
        rmse + 1e-12 >= mae,
        "power-mean inequality violated: rmse {rmse} < mae {mae}"
    );

    let mean_p = pairs.iter().map(|&(p, _)| p).sum::<f64>() / nf;
    let mean_t = pairs.iter().map(|&(_, t)| t).sum::<f64>() / nf;
    let mut ss_tot = 0.0;
    let mut var_p = 0.0;
    let mut cov = 0.0;
    for &(p, t) in pairs {
        ss_tot += (t - mean_t) * (t - mean_t);
        var_p += (p - mean_p) * (p - mean_p);
        cov += (p - mean_p) * (t - mean_t);
    }
    let mut degenerate = false;
    let r2_det = if ss_tot > 0.0 {
        1.0 - se / ss_tot
    } else {
        degenerate = true;
        0.0
    };
    let r2_pearson_sq = if var_p > 0.0 && ss_tot > 0.0 {
        (cov * cov) / (var_p * ss_tot)
    } else {
        degenerate = true;
        0.0
    };
    Ok(Metrics {
        rmse,
        mae,
        r2_det,
        r2_pearson_sq,
        degenerate,
        n,
    })
}

/// First and second moment buffers for Adam, aligned with the model's
/// canonical parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(model: &ViTRegressor) -> Self {
        let shapes: Vec<usize> = model.parameters().iter().map(|p| p.tensor.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction from the gradients accumulated in the
/// parameters. Gradients are zeroed afterwards. A non-finite gradient aborts,
/// naming the parameter.
pub fn adam_step(
    model: &mut ViTRegressor,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (pi, param) in model.parameters_mut().into_iter().enumerate() {
        if param.grad().iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient(param.name.clone()));
        }
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        assert_eq!(
            m.len(),
            param.tensor.len(),
            "optimizer state misaligned with {}",
            param.name
        );
        let grads = param.grad().to_vec();
        let data = param.tensor.data_mut();
        for i in 0..data.len() {
            let g = grads[i];
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
        }
        param.tensor.zero_grad();
    }
    Ok(())
}

/// Per-epoch loss record: pooled masked MSE on the training and validation
/// days.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Delimited rows: fold,epoch,metric,value.
    pub fn to_rows(&self, fold: usize) -> String {
        let mut out = String::from("fold,epoch,metric,value\n");
        for r in &self.records {
            out.push_str(&format!(
                "{fold},{},train_loss,{:.17e}\n",
                r.epoch, r.train_loss
            ));
            out.push_str(&format!("{fold},{},val_loss,{:.17e}\n", r.epoch, r.val_loss));
        }
        out
    }
}

/// Squared error and gradient contribution of one sample. The gradient is
/// unnormalized (2 * (pred - target) on target-valid cells); the caller
/// scales by the pooled valid-cell count.
fn sample_pass(
    model: &ViTRegressor,
    inputs: &FieldStack,
    targets: &FieldStack,
    idx: usize,
    with_grad: bool,
) -> Result<(f64, usize, Option<ParamGrads>), TrainError> {
    let input = inputs.field(idx);
    let target = targets.field(idx);
    if with_grad {
        let (pred, cache) = model.forward_cached(input)?;
        let mut sse = 0.0;
        let mut count = 0usize;
        let mut d_pred = vec![0.0; pred.values().len()];
        for (i, (&m, &t)) in target.mask().iter().zip(target.values()).enumerate() {
            if m {
                let p = pred.values()[i];
                let e = p - t;
                sse += e * e;
                count += 1;
                d_pred[i] = 2.0 * e;
            }
        }
        let grads = model.backward(&cache, &d_pred);
        Ok((sse, count, Some(grads)))
    } else {
        let pred = model.forward(input)?;
        let mut sse = 0.0;
        let mut count = 0usize;
        for (i, (&m, &t)) in target.mask().iter().zip(target.values()).enumerate() {
            if m {
                let e = pred.values()[i] - t;
                sse += e * e;
                count += 1;
            }
        }
        Ok((sse, count, None))
    }
}

fn pooled_loss(
    model: &ViTRegressor,
    inputs: &FieldStack,
    targets: &FieldStack,
    indices: &[usize],
) -> Result<f64, TrainError> {
    let results: Vec<(f64, usize)> = indices
        .par_iter()
        .map(|&i| sample_pass(model, inputs, targets, i, false).map(|(s, c, _)| (s, c)))
        .collect::<Result<_, _>>()?;
    let sse: f64 = results.iter().map(|r| r.0).sum();
    let count: usize = results.iter().map(|r| r.1).sum();
    if count == 0 {
        return Err(TrainError::ZeroValidCells);
    }
    Ok(sse / count as f64)
}

fn check_aligned(inputs: &FieldStack, targets: &FieldStack) -> Result<(), TrainError> {
    if inputs.spec() != targets.spec() {
        return Err(TrainError::Config(
            "input and target stacks must share a grid spec".into(),
        ));
    }
    if inputs.times() != targets.times() {
        return Err(TrainError::Config(
            "input and target stacks must share a time axis".into(),
        ));
    }
    Ok(())
}

/// Trains a fresh model on the fold's training days, minimizing MSE over
/// cells valid in the ground target. Batch gradients are pooled over the
/// batch's valid cells; per-sample passes run in parallel and are reduced in
/// index order, so the result is independent of thread count.
pub fn train(
    inputs: &FieldStack,
    targets: &FieldStack,
    split: &FoldSplit,
    vit_config: &ViTConfig,
    config: &TrainConfig,
) -> Result<(ViTRegressor, TrainHistory), TrainError> {
    config.validate()?;
    check_aligned(inputs, targets)?;

    // one shared init seed; batch order still differs per fold
    let fold_seed = config
        .seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(split.fold_index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);

    let mut train_idx = split.train_indices.clone();
    if config.fraction < 1.0 {
        train_idx.shuffle(&mut rng);
        let keep = ((train_idx.len() as f64) * config.fraction).ceil() as usize;
        train_idx.truncate(keep.max(1));
        train_idx.sort_unstable();
    }
    if train_idx.is_empty() {
        return Err(TrainError::Config(
            "training set is empty after fraction subsampling".into(),
        ));
    }

    let spec = inputs.spec();
    let n_max = vit_config.tokens_for(spec.rows, spec.cols);
    let mut model = ViTRegressor::init(vit_config.clone(), n_max, config.seed)?;
    let mut adam = AdamState::new(&model);
    let mut history = TrainHistory::default();

    for epoch in 1..=config.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut epoch_sse = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, usize, Option<ParamGrads>)> = batch
                .par_iter()
                .map(|&i| sample_pass(&model, inputs, targets, i, true))
                .collect::<Result<_, _>>()?;
            let batch_count: usize = results.iter().map(|r| r.1).sum();
            if batch_count == 0 {
                continue;
            }
            let mut total = model.empty_grads();
            for (sse, _, grads) in results {
                epoch_sse += sse;
                total.accumulate(&grads.expect("gradient requested"));
            }
            epoch_count += batch_count;
            total.scale(1.0 / batch_count as f64);
            model.accumulate_into_params(&total);
            adam_step(&mut model, &mut adam, config)?;
        }
        if epoch_count == 0 {
            return Err(TrainError::ZeroValidCells);
        }
        let train_loss = epoch_sse / epoch_count as f64;
        let val_loss = if split.validation_indices.is_empty() {
            f64::NAN
        } else {
            pooled_loss(&model, inputs, targets, &split.validation_indices)?
        };
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
    }
    Ok((model, history))
}

/// Metrics pooled over all target-valid cells of the selected samples.
pub fn evaluate(
    model: &ViTRegressor,
    inputs: &FieldStack,
    targets: &FieldStack,
    indices: &[usize],
) -> Result<Metrics, TrainError> {
    check_aligned(inputs, targets)?;
    for &i in indices {
        if i >= inputs.len() {
            return Err(TrainError::Config(format!(
                "sample index {i} out of range ({} samples)",
                inputs.len()
            )));
        }
    }
    let preds: Vec<Vec<f64>> = indices
        .par_iter()
        .map(|&i| model.forward(inputs.field(i)).map(|f| f.values().to_vec()))
        .collect::<Result<_, _>>()?;
    let mut pairs = Vec::new();
    for (&i, pred) in indices.iter().zip(&preds) {
        let target = targets.field(i);
        for (ci, (&m, &t)) in target.mask().iter().zip(target.values()).enumerate() {
            if m {
                pairs.push((pred[ci], t));
            }
        }
    }
    pooled_metrics(&pairs)
}

/// Closed-form ordinary least squares for y ~ slope * x + intercept.
/// Returns None when x is (numerically) constant.
pub fn ols_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    if x.is_empty() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    let x_scale = x.iter().fold(1.0f64, |m, &v| m.max(v.abs()));
    if sxx <= 1e-12 * x_scale * x_scale {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Per-cell linear regression baseline: ordinary least squares of the target
/// on the input at the same cell, fit on training days and evaluated on
/// validation days. Cells with fewer than 3 training pairs (or an invalid
/// input at prediction time) fall back to the cell's training-target mean,
/// then to the global training-target mean.
pub fn linear_baseline(
    inputs: &FieldStack,
    targets: &FieldStack,
    split: &FoldSplit,
) -> Result<Metrics, TrainError> {
    check_aligned(inputs, targets)?;
    let spec = inputs.spec();
    let n_cells = spec.n_cells();

    #[derive(Clone)]
    struct CellModel {
        fit: Option<(f64, f64)>,
        mean: Option<f64>,
    }
    let mut cells = vec![
        CellModel {
            fit: None,
            mean: None
        };
        n_cells
    ];
    let mut global_sum = 0.0;
    let mut global_n = 0usize;

    for (ci, cell) in cells.iter_mut().enumerate() {
        let (r, c) = (ci / spec.cols, ci % spec.cols);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut t_sum = 0.0;
        let mut t_n = 0usize;
        for &t in &split.train_indices {
            if let Some(y) = targets.field(t).try_get(r, c) {
                t_sum += y;
                t_n += 1;
                if let Some(x) = inputs.field(t).try_get(r, c) {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        global_sum += t_sum;
        global_n += t_n;
        cell.mean = (t_n > 0).then(|| t_sum / t_n as f64);
        if xs.len() >= 3 {
            cell.fit = ols_fit(&xs, &ys);
        }
    }
    if global_n == 0 {
        return Err(TrainError::ZeroValidCells);
    }
    let global_mean = global_sum / global_n as f64;

    let mut pairs = Vec::new();
    for &t in &split.validation_indices {
        let target = targets.field(t);
        let input = inputs.field(t);
        for (r, c, y) in target.iter_valid() {
            let ci = r * spec.cols + c;
            let pred = match (cells[ci].fit, input.try_get(r, c)) {
                (Some((a, b)), Some(x)) => a * x + b,
                _ => cells[ci].mean.unwrap_or(global_mean),
            };
            pairs.push((pred, y));
        }
    }
    pooled_metrics(&pairs)
}
