//! Mini-batch Adam on `BCE + λ·L_IR` with early stopping on validation AUC.

use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{NirError, Result};
use crate::fairness::{predict, roc_auc};
use crate::matrix::Matrix;
use crate::model::{backward, forward, Architecture, Dense, ForwardTrace, Gradients, ModelParams};
use crate::nir::{
    bce_logit_gradient, bce_with_logits, incidence, ir_loss, nir_backward, total_loss,
    LossBreakdown, DEFAULT_EPSILON, DEFAULT_LAMBDA,
};

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_lr() -> f64 {
    3e-3
}
fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    64
}
fn default_patience() -> usize {
    5
}
fn default_eps_nir() -> f64 {
    DEFAULT_EPSILON
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_probe_size() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eps_nir")]
    pub eps_nir: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Treat `p̂` as a constant inside the incidence weights.
    #[serde(default)]
    pub stop_grad_phat: bool,
    /// Rows taken from the head of the validation set for the per-epoch
    /// incidence-variance diagnostic.
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            early_stop_patience: default_patience(),
            seed: 0,
            eps_nir: default_eps_nir(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            stop_grad_phat: false,
            probe_size: default_probe_size(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NirError::Config(msg.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite nonnegative number");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1");
        }
        if !(self.eps_nir > 0.0 && self.eps_nir.is_finite()) {
            return bad("eps_nir must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.probe_size == 0 {
            return bad("probe_size must be at least 1");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Gradients,
    pub second: Gradients,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            step: 0,
            first: Gradients::zeros_like(params),
            second: Gradients::zeros_like(params),
        }
    }
}

fn same_layout(a: &[Dense], b: &[Dense]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.weights.shape() == y.weights.shape() && x.bias.len() == y.bias.len())
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if !same_layout(&params.layers, &grads.layers)
        || !same_layout(&params.layers, &state.first.layers)
        || !same_layout(&params.layers, &state.second.layers)
    {
        return Err(NirError::Contract(
            "optimizer state, gradients and parameters differ in shape".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);

    let update = |theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..theta.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    };
    for (l, layer) in params.layers.iter_mut().enumerate() {
        let (m, v) = (&mut state.first.layers[l], &mut state.second.layers[l]);
        update(
            layer.weights.as_mut_slice(),
            grads.layers[l].weights.as_slice(),
            m.weights.as_mut_slice(),
            v.weights.as_mut_slice(),
        );
        update(
            &mut layer.bias,
            &grads.layers[l].bias,
            &mut m.bias,
            &mut v.bias,
        );
    }
    Ok(())
}

/// Settings of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    pub lambda: f64,
    pub eps: f64,
    pub stop_grad_phat: bool,
}

impl ObjectiveOptions {
    pub fn new(lambda: f64, eps: f64) -> Self {
        Self {
            lambda,
            eps,
            stop_grad_phat: false,
        }
    }
}

/// `BCE + λ·L_IR` on one batch, without gradients.
pub fn objective(
    params: &ModelParams,
    x: &Matrix,
    y: &[u8],
    opts: &ObjectiveOptions,
) -> Result<LossBreakdown> {
    let trace = forward(params, x)?;
    breakdown(&trace, y, opts)
}

fn breakdown(trace: &ForwardTrace, y: &[u8], opts: &ObjectiveOptions) -> Result<LossBreakdown> {
    let bce = bce_with_logits(&trace.logits, y)?;
    let inc = incidence(trace.penultimate(), &trace.probs, opts.eps)?;
    let ir = ir_loss(&inc)?;
    let mut out = total_loss(bce, ir, opts.lambda)?;
    out.phi_mean = Some(inc.mean());
    Ok(out)
}

/// Loss and full parameter gradient of `BCE + λ·L_IR`. The penalty enters
/// the backward pass twice: through `Z` into the trunk and through `p̂`
/// (times `σ′(s)`) into the logit.
pub fn objective_gradients(
    params: &ModelParams,
    x: &Matrix,
    y: &[u8],
    opts: &ObjectiveOptions,
) -> Result<(LossBreakdown, Gradients, ForwardTrace)> {
    let trace = forward(params, x)?;
    let (loss, grads) = gradients_from_trace(params, &trace, y, opts)?;
    Ok((loss, grads, trace))
}

/// Same as [`objective_gradients`] for an existing forward trace.
pub fn gradients_from_trace(
    params: &ModelParams,
    trace: &ForwardTrace,
    y: &[u8],
    opts: &ObjectiveOptions,
) -> Result<(LossBreakdown, Gradients)> {
    let loss = breakdown(trace, y, opts)?;
    let mut dl_dlogits = bce_logit_gradient(&trace.probs, y);
    let z = trace.penultimate();
    let dl_dz = if opts.lambda > 0.0 {
        let g = nir_backward(z, &trace.probs, opts.eps, opts.lambda)?;
        if !opts.stop_grad_phat {
            for ((d, &gp), &p) in dl_dlogits.iter_mut().zip(&g.dl_dphat).zip(&trace.probs) {
                *d += gp * p * (1.0 - p);
            }
        }
        g.dl_dz
    } else {
        Matrix::zeros(z.rows(), z.cols())
    };
    let grads = backward(params, trace, &dl_dz, &dl_dlogits)?;
    Ok((loss, grads))
}

/// Incidence variance of the model on a fixed probe batch.
pub fn probe_incidence_variance(params: &ModelParams, probe: &Matrix, eps: f64) -> Result<f64> {
    let trace = forward(params, probe)?;
    ir_loss(&incidence(trace.penultimate(), &trace.probs, eps)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean over the epoch's batches.
    pub train_bce: f64,
    pub train_ir: f64,
    pub val_auc: f64,
    pub probe_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub stopped_early: bool,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Epoch(EpochRecord),
    Summary {
        best_epoch: usize,
        best_val_auc: f64,
        stopped_early: bool,
        config: TrainConfig,
    },
}

impl TrainingLog {
    pub fn best_record(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }

    /// One JSON object per epoch, then a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let ser = |e: serde_json::Error| NirError::Serialization(e.to_string());
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&LogLine::Epoch(r.clone())).map_err(ser)?);
            out.push('\n');
        }
        let summary = LogLine::Summary {
            best_epoch: self.best_epoch,
            best_val_auc: self.best_val_auc,
            stopped_early: self.stopped_early,
            config: self.config.clone(),
        };
        out.push_str(&serde_json::to_string(&summary).map_err(ser)?);
        out.push('\n');
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut summary = None;
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let parsed: LogLine = serde_json::from_str(line)
                .map_err(|e| NirError::Serialization(format!("log line {}: {e}", i + 1)))?;
            match parsed {
                LogLine::Epoch(r) => records.push(r),
                LogLine::Summary {
                    best_epoch,
                    best_val_auc,
                    stopped_early,
                    config,
                } => summary = Some((best_epoch, best_val_auc, stopped_early, config)),
            }
        }
        let (best_epoch, best_val_auc, stopped_early, config) = summary
            .ok_or_else(|| NirError::Serialization("training log has no summary line".into()))?;
        if best_epoch == 0 || best_epoch > records.len() {
            return Err(NirError::Serialization(format!(
                "best_epoch {best_epoch} outside the {} logged epochs",
                records.len()
            )));
        }
        Ok(Self {
            records,
            best_epoch,
            best_val_auc,
            stopped_early,
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()?).map_err(|e| NirError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| NirError::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// Result of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub trace: ForwardTrace,
}

/// Stateful optimizer over one training set.
pub struct Trainer<'a> {
    config: TrainConfig,
    train: &'a Dataset,
    params: ModelParams,
    adam: AdamState,
    shuffle_rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &TrainConfig, arch: &Architecture, train: &'a Dataset) -> Result<Self> {
        config.validate()?;
        arch.validate()?;
        if train.size() == 0 {
            return Err(NirError::Contract("empty training set".into()));
        }
        if arch.input_dim != train.feature_dim() {
            return Err(NirError::Config(format!(
                "architecture input_dim {} does not match {} features",
                arch.input_dim,
                train.feature_dim()
            )));
        }
        let params = ModelParams::init(arch, config.seed)?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(1);
        Ok(Self {
            config: config.clone(),
            train,
            adam: AdamState::new(&params),
            params,
            shuffle_rng,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    fn options(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            lambda: self.config.lambda,
            eps: self.config.eps_nir,
            stop_grad_phat: self.config.stop_grad_phat,
        }
    }

    /// Forward, combined backward and one Adam update on the given rows.
    pub fn step(&mut self, rows: &[usize]) -> Result<StepReport> {
        let x = self.train.features().select_rows(rows);
        let y: Vec<u8> = rows.iter().map(|&i| self.train.labels()[i]).collect();
        let trace = forward(&self.params, &x)?;
        if !trace.penultimate().is_finite() || !trace.logits.iter().all(|s| s.is_finite()) {
            return Err(NirError::Divergence {
                epoch: 0,
                batch: 0,
                detail: "non-finite activations".into(),
            });
        }
        let (loss, grads) = gradients_from_trace(&self.params, &trace, &y, &self.options())?;
        if !loss.total.is_finite() || !grads.is_finite() {
            return Err(NirError::Divergence {
                epoch: 0,
                batch: 0,
                detail: format!("non-finite loss or gradient (loss {})", loss.total),
            });
        }
        adam_step(
            &mut self.params,
            &grads,
            &mut self.adam,
            &self.config.adam(),
        )?;
        Ok(StepReport { loss, trace })
    }

    /// A fresh shuffled order of the training rows.
    pub fn epoch_order(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.size()).collect();
        order.shuffle(&mut self.shuffle_rng);
        order
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }
}

/// Trains from a seeded initialization and returns the parameters of the
/// epoch with the highest validation AUC (earliest on ties).
pub fn train(
    config: &TrainConfig,
    train_set: &Dataset,
    val: &Dataset,
    arch: &Architecture,
) -> Result<(ModelParams, TrainingLog)> {
    let mut trainer = Trainer::new(config, arch, train_set)?;
    if val.size() == 0 {
        return Err(NirError::Evaluation("empty validation set".into()));
    }
    let val_pos = val.count_positive();
    if val_pos == 0 || val_pos == val.size() {
        return Err(NirError::Evaluation(
            "validation set must contain both classes".into(),
        ));
    }
    let probe_rows: Vec<usize> = (0..val.size().min(config.probe_size)).collect();
    let probe = val.features().select_rows(&probe_rows);

    let mut records = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=config.epochs {
        let order = trainer.epoch_order();
        let (mut bce_sum, mut ir_sum) = (0.0, 0.0);
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let report = trainer.step(rows).map_err(|e| match e {
                NirError::Divergence { detail, .. } => NirError::Divergence {
                    epoch,
                    batch: b + 1,
                    detail,
                },
                other => other,
            })?;
            bce_sum += report.loss.bce * rows.len() as f64;
            ir_sum += report.loss.ir * rows.len() as f64;
        }
        let n = train_set.size() as f64;
        let val_auc = roc_auc(&predict(trainer.params(), val)?, val.labels())?;
        let probe_variance = probe_incidence_variance(trainer.params(), &probe, config.eps_nir)?;
        let record = EpochRecord {
            epoch,
            train_bce: bce_sum / n,
            train_ir: ir_sum / n,
            val_auc,
            probe_variance,
        };
        debug!(
            "epoch {epoch}: bce {:.6} ir {:.6e} val_auc {:.6} probe_var {:.6e}",
            record.train_bce, record.train_ir, val_auc, probe_variance
        );
        if !(record.train_bce.is_finite()
            && record.train_ir.is_finite()
            && probe_variance.is_finite())
        {
            return Err(NirError::Divergence {
                epoch,
                batch: 0,
                detail: "non-finite epoch statistics".into(),
            });
        }
        records.push(record);

        if best.as_ref().is_none_or(|(_, auc, _)| val_auc > *auc) {
            best = Some((epoch, val_auc, trainer.params().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                stopped_early = epoch < config.epochs;
                break;
            }
        }
    }
    let (best_epoch, best_val_auc, params) = best.expect("at least one epoch ran");
    let log = TrainingLog {
        records,
        best_epoch,
        best_val_auc,
        stopped_early,
        config: config.clone(),
    };
    Ok((params, log))
}
