//! Joint optimization of all parameters: Xavier initialization, Adam, the
//! three-head cross-entropy objective, early stopping, checkpointing, and
//! k-fold cross-validation.

use crate::array::Array;
use crate::autodiff::{Tape, BCE_EPS};
use crate::cdm::BaseModel;
use crate::data::{fingerprint, kfold, split, write_atomic, Dataset};
use crate::error::{HcdError, Result};
use crate::hierarchy::{Ablation, CeaAttention, RsaChoices, RsaMode};
use crate::metrics::{EvalRecord, FoldMetrics};
use crate::model::{Batch, ModelSpec};
use crate::params::{Binding, ParamStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const SHUFFLE_SALT: u64 = 0x7a3d_91c4;
const RSA_SALT: u64 = 0x1f2e_6b05;

/// Everything that shapes a training run. All fields have small-model
/// defaults and every one is overridable from the CLI or a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub base: BaseModel,
    pub heads: usize,
    pub kernel_widths: Vec<usize>,
    pub rsa_mode: RsaMode,
    pub ablation: Ablation,
    pub plain: bool,
    pub hidden1: usize,
    pub hidden2: usize,
    pub attention: CeaAttention,
    pub disc_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.002,
            batch_size: 256,
            max_epochs: 50,
            patience: 5,
            seed: 42,
            base: BaseModel::Ncdm,
            heads: 3,
            kernel_widths: vec![1, 3, 5],
            rsa_mode: RsaMode::SampleOne,
            ablation: Ablation::Full,
            plain: false,
            hidden1: 64,
            hidden2: 32,
            attention: CeaAttention::Sigmoid,
            disc_scale: 1.7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(HcdError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("heads", self.heads),
            ("hidden1", self.hidden1),
            ("hidden2", self.hidden2),
        ] {
            if v == 0 {
                return Err(HcdError::Config(format!("{name} must be positive")));
            }
        }
        if self.patience > self.max_epochs {
            return Err(HcdError::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.kernel_widths.len() != self.heads {
            return Err(HcdError::Config(format!(
                "{} kernel widths for {} heads",
                self.kernel_widths.len(),
                self.heads
            )));
        }
        for &w in &self.kernel_widths {
            if w == 0 || w % 2 == 0 {
                return Err(HcdError::Config(format!(
                    "kernel widths must be odd, got {w}"
                )));
            }
        }
        Ok(())
    }

    /// Binds the config to a dataset's dimensions.
    pub fn model_spec(&self, dataset: &Dataset) -> Result<ModelSpec> {
        self.validate()?;
        let g = match dataset.g() {
            Some(g) => g,
            None if self.plain => 1,
            None => {
                return Err(HcdError::Contract(
                    "training the wrapped model requires an assigned hierarchy".into(),
                ))
            }
        };
        Ok(ModelSpec {
            base: self.base,
            n: dataset.n,
            m: dataset.m,
            k: dataset.k,
            g,
            heads: self.heads,
            kernel_widths: self.kernel_widths.clone(),
            hidden: (self.hidden1, self.hidden2),
            attention: self.attention,
            ablation: self.ablation,
            plain: self.plain,
            disc_scale: self.disc_scale,
        })
    }
}

// ---- initialization -----------------------------------------------------------

/// Xavier (Glorot) uniform sample: entries drawn from
/// +-sqrt(6 / (fan_in + fan_out)).
pub fn xavier_init(rows: usize, cols: usize, seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xavier_with(&mut rng, rows, cols)
}

fn xavier_with(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Array::from_vec(rows, cols, data).expect("shape matches data")
}

/// All parameters of a model, Xavier-initialized from one seeded stream in a
/// fixed order. Bias rows and fusion logits start at zero; the NCDM head
/// weights take absolute values so the monotonicity constraint holds from
/// the first forward pass.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (n, m, k, g) = (spec.n, spec.m, spec.k, spec.g);

    store.insert("student.s", xavier_with(&mut rng, n, k));
    if !spec.plain {
        store.insert("student.e_person", Array::zeros(n, 1));
        store.insert("hier.w_o", xavier_with(&mut rng, g, k));
        store.insert("hier.b_o", Array::zeros(1, k));
        for (i, &w) in spec.kernel_widths.iter().enumerate() {
            store.insert(format!("cea.h{i}.kernel"), xavier_with(&mut rng, w, 1));
            store.insert(format!("cea.h{i}.w_q"), xavier_with(&mut rng, k, k));
            store.insert(format!("cea.h{i}.w_k"), xavier_with(&mut rng, k, k));
            store.insert(format!("cea.h{i}.w_v"), xavier_with(&mut rng, k, k));
        }
        store.insert("cea.w_intra", xavier_with(&mut rng, k, k));
        store.insert("cea.b_intra", Array::zeros(1, k));
        store.insert("rsa.w_q", xavier_with(&mut rng, k, k));
        store.insert("rsa.w_k", xavier_with(&mut rng, k, k));
        store.insert("rsa.w_v", xavier_with(&mut rng, k, k));
    }
    match spec.base {
        BaseModel::Ncdm => {
            let (h1, h2) = spec.hidden;
            store.insert("ex.diff", xavier_with(&mut rng, m, k));
            store.insert("ex.disc", xavier_with(&mut rng, m, 1));
            store.insert("ncdm.w1", xavier_with(&mut rng, k, h1).map(f64::abs));
            store.insert("ncdm.b1", Array::zeros(1, h1));
            store.insert("ncdm.w2", xavier_with(&mut rng, h1, h2).map(f64::abs));
            store.insert("ncdm.b2", Array::zeros(1, h2));
            store.insert("ncdm.w3", xavier_with(&mut rng, h2, 1).map(f64::abs));
            store.insert("ncdm.b3", Array::zeros(1, 1));
        }
        BaseModel::Irt => {
            store.insert("ex.b", xavier_with(&mut rng, m, 1));
            store.insert("ex.disc", xavier_with(&mut rng, m, 1));
        }
        BaseModel::Mirt => {
            store.insert("ex.a", xavier_with(&mut rng, m, k));
            store.insert("ex.b", xavier_with(&mut rng, m, 1));
        }
        BaseModel::Dina => {
            store.insert("ex.guess", xavier_with(&mut rng, m, 1));
            store.insert("ex.slip", xavier_with(&mut rng, m, 1));
        }
    }
    store
}

// ---- losses --------------------------------------------------------------------

/// Binary cross-entropy summed over a batch, with predictions clamped away
/// from 0 and 1.
pub fn bce(y: &[f64], labels: &[f64]) -> f64 {
    y.iter()
        .zip(labels)
        .map(|(&p, &r)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(r * p.ln() + (1.0 - r) * (1.0 - p).ln())
        })
        .sum()
}

/// The three-head objective: the sum of the per-head cross-entropies.
pub fn total_loss(y_h: &[f64], y_p: &[f64], y_i: &[f64], labels: &[f64]) -> f64 {
    bce(y_h, labels) + bce(y_p, labels) + bce(y_i, labels)
}

// ---- Adam ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter, plus the step counter
/// shared by all of them.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Array>,
    v: BTreeMap<String, Array>,
    step: usize,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One Adam update with bias correction over every parameter in the store.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Array>,
    state: &mut AdamState,
    opt: &AdamParams,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);

    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let param = store.get_mut(&name)?;
        let (rows, cols) = param.shape();
        let zero = Array::zeros(rows, cols);
        let grad = grads.get(&name).unwrap_or(&zero);
        if grad.shape() != (rows, cols) {
            return Err(HcdError::Contract(format!(
                "gradient shape {:?} does not match parameter `{name}` {:?}",
                grad.shape(),
                (rows, cols)
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(rows, cols));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(rows, cols));
        for ((p, g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * g;
            *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Clamps every entry of parameters whose name starts with `prefix` to be
/// non-negative. Applied to the NCDM head weights after each step.
pub fn clamp_nonneg(store: &mut ParamStore, prefix: &str) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(prefix))
        .cloned()
        .collect();
    for name in names {
        let param = store.get_mut(&name).expect("name enumerated from store");
        for v in param.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

// ---- checkpoints ----------------------------------------------------------------

/// Best-epoch validation metrics; AUC is absent when the validation split is
/// single-class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub auc: Option<f64>,
    pub acc: f64,
    pub rmse: f64,
}

/// A trained model: parameter arrays by name, the config that produced them,
/// and the fingerprint of the dataset they were trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: TrainConfig,
    pub fingerprint: u64,
    pub epoch: usize,
    pub val_metrics: Option<ValMetrics>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Refuses to pair with a dataset other than the one trained on.
    pub fn verify_fingerprint(&self, dataset: &Dataset) -> Result<()> {
        let actual = fingerprint(dataset)?;
        if actual != self.fingerprint {
            return Err(HcdError::FingerprintMismatch {
                checkpoint: self.fingerprint,
                dataset: actual,
            });
        }
        Ok(())
    }
}

// ---- training loops ----------------------------------------------------------------

fn levels_for(spec: &ModelSpec, dataset: &Dataset) -> Vec<usize> {
    match &dataset.hierarchy {
        Some(h) => h.levels.clone(),
        None => vec![0; spec.n],
    }
}

/// Mean per-interaction training loss of the current parameters, evaluated
/// deterministically (RSA visits all levels).
pub fn dataset_loss(spec: &ModelSpec, store: &ParamStore, dataset: &Dataset) -> Result<f64> {
    let levels = levels_for(spec, dataset);
    let batch = Batch::from_interactions(&dataset.interactions);
    let mut tape = Tape::new();
    let binding = Binding::bind(store, &mut tape);
    let loss = spec.forward_loss(
        &mut tape,
        &binding,
        &batch,
        &dataset.q,
        &levels,
        &RsaChoices::All,
    )?;
    Ok(tape.value(loss).get(0, 0) / batch.len() as f64)
}

fn validation_records(
    spec: &ModelSpec,
    store: &ParamStore,
    valid: &Dataset,
) -> Result<Vec<EvalRecord>> {
    let preds = spec.predict_interactions(store, valid, &valid.interactions)?;
    Ok(preds
        .iter()
        .zip(&valid.interactions)
        .map(|(&p, it)| EvalRecord {
            prediction: p,
            label: it.response,
            student: it.student,
            exercise: it.exercise,
        })
        .collect())
}

/// Trains on `train`, early-stops on `valid` AUC (falling back to negative
/// RMSE when AUC is undefined), and returns the best-epoch checkpoint.
pub fn fit_splits(
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
    dataset_fingerprint: u64,
) -> Result<Checkpoint> {
    config.validate()?;
    train.validate()?;
    if train.interactions.is_empty() {
        return Err(HcdError::EmptyDataset("no training interactions".into()));
    }
    let spec = config.model_spec(train)?;
    let levels = levels_for(&spec, train);

    let mut store = init_params(&spec, config.seed);
    let mut adam = AdamState::new();
    let opt = AdamParams::with_lr(config.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut rsa_rng = ChaCha8Rng::seed_from_u64(config.seed ^ RSA_SALT);

    let mut order: Vec<usize> = (0..train.interactions.len()).collect();
    let mut best: Option<(f64, ParamStore, usize, Option<ValMetrics>)> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let items: Vec<crate::data::Interaction> =
                chunk.iter().map(|&i| train.interactions[i]).collect();
            let batch = Batch::from_interactions(&items);
            let choices = match config.rsa_mode {
                RsaMode::All => RsaChoices::All,
                RsaMode::SampleOne => RsaChoices::sample(spec.g, &mut rsa_rng),
            };
            let mut tape = Tape::new();
            let binding = Binding::bind(&store, &mut tape);
            let loss =
                spec.forward_loss(&mut tape, &binding, &batch, &train.q, &levels, &choices)?;
            divergence_check(tape.value(loss).get(0, 0), &store)?;
            let grads = binding.collect(&store, &tape.backward(loss)?)?;
            adam_step(&mut store, &grads, &mut adam, &opt)?;
            if spec.base == BaseModel::Ncdm {
                clamp_nonneg(&mut store, "ncdm.w");
            }
        }

        let (score, metrics) = if valid.interactions.is_empty() {
            // nothing to stop on: keep the final epoch
            (epoch as f64, None)
        } else {
            let records = validation_records(&spec, &store, valid)?;
            let auc = crate::metrics::auc(&records).ok();
            let acc = crate::metrics::acc(&records, 0.5)?;
            let rmse = crate::metrics::rmse(&records)?;
            (auc.unwrap_or(-rmse), Some(ValMetrics { auc, acc, rmse }))
        };

        let improved = best.as_ref().is_none_or(|(s, _, _, _)| score > *s);
        if improved {
            best = Some((score, store.clone(), epoch, metrics));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.patience {
                break;
            }
        }
    }

    let (_, params, epoch, val_metrics) = best.expect("at least one epoch ran");
    Ok(Checkpoint {
        params,
        config: config.clone(),
        fingerprint: dataset_fingerprint,
        epoch,
        val_metrics,
    })
}

fn divergence_check(loss: f64, store: &ParamStore) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let param = store.first_non_finite().unwrap_or("loss").to_string();
    Err(HcdError::Divergence { param })
}

/// Splits the dataset 70/10/20 with the config seed and trains on it.
pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<Checkpoint> {
    dataset.validate()?;
    let fp = fingerprint(dataset)?;
    let (train, valid, _test) = split(dataset, (0.7, 0.1, 0.2), config.seed)?;
    fit_splits(&train, &valid, config, fp)
}

/// Per-fold metrics with their mean and population standard deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<FoldMetrics>,
    pub mean: FoldMetrics,
    pub sd: FoldMetrics,
    /// Index of the fold with the best validation AUC.
    pub best_fold: usize,
}

/// Runs `fit_splits` on every fold and aggregates the validation metrics.
pub fn cross_validate(
    dataset: &Dataset,
    folds: usize,
    config: &TrainConfig,
) -> Result<(CvSummary, Vec<Checkpoint>)> {
    dataset.validate()?;
    let fp = fingerprint(dataset)?;
    let mut fold_metrics = Vec::with_capacity(folds);
    let mut checkpoints = Vec::with_capacity(folds);
    for (train, valid) in kfold(dataset, folds, config.seed)? {
        let ckpt = fit_splits(&train, &valid, config, fp)?;
        let vm = ckpt.val_metrics.ok_or_else(|| {
            HcdError::UndefinedMetric("fold finished without validation metrics".into())
        })?;
        let auc = vm.auc.ok_or_else(|| {
            HcdError::UndefinedMetric("fold validation split is single-class".into())
        })?;
        fold_metrics.push(FoldMetrics {
            auc,
            acc: vm.acc,
            rmse: vm.rmse,
        });
        checkpoints.push(ckpt);
    }

    let nf = fold_metrics.len() as f64;
    let mean = FoldMetrics {
        auc: fold_metrics.iter().map(|f| f.auc).sum::<f64>() / nf,
        acc: fold_metrics.iter().map(|f| f.acc).sum::<f64>() / nf,
        rmse: fold_metrics.iter().map(|f| f.rmse).sum::<f64>() / nf,
    };
    let sd = FoldMetrics {
        auc: (fold_metrics
            .iter()
            .map(|f| (f.auc - mean.auc).powi(2))
            .sum::<f64>()
            / nf)
            .sqrt(),
        acc: (fold_metrics
            .iter()
            .map(|f| (f.acc - mean.acc).powi(2))
            .sum::<f64>()
            / nf)
            .sqrt(),
        rmse: (fold_metrics
            .iter()
            .map(|f| (f.rmse - mean.rmse).powi(2))
            .sum::<f64>()
            / nf)
            .sqrt(),
    };
    let best_fold = fold_metrics
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.auc.partial_cmp(&b.auc).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);

    Ok((
        CvSummary {
            folds: fold_metrics,
            mean,
            sd,
            best_fold,
        },
        checkpoints,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    #[test]
    fn xavier_bound_determinism_and_variance() {
        let a = xavier_init(3, 3, 1);
        assert!(a.data().iter().all(|&v| (-1.0..1.0).contains(&v)));
        assert_eq!(a, xavier_init(3, 3, 1));
        assert_ne!(a, xavier_init(3, 3, 2));

        // Monte Carlo: sample variance of U(-b, b) is b^2 / 3
        let big = xavier_init(100, 1000, 3);
        let bound = (6.0 / 1100.0_f64).sqrt();
        let mean = big.mean();
        let var = big.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / big.len() as f64;
        let expected = bound * bound / 3.0;
        assert!(
            (var - expected).abs() / expected < 0.05,
            "var {var} vs {expected}"
        );
    }

    #[test]
    fn bce_analytic_values() {
        assert!((bce(&[0.5], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(&[1.0 - BCE_EPS], &[1.0]) < 1e-6);
        assert!((bce(&[BCE_EPS], &[1.0]) - 16.118095650958317).abs() < 1e-9);
    }

    #[test]
    fn total_loss_is_additive_over_heads() {
        let r = [1.0];
        let l = total_loss(&[0.5], &[0.5], &[0.5], &r);
        assert!((l - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let y = [0.73];
        let l = total_loss(&y, &y, &y, &r);
        assert!((l - 3.0 * bce(&y, &r)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Array::filled(1, 1, 0.0));
        let mut state = AdamState::new();
        let opt = AdamParams::with_lr(0.01);

        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array::filled(1, 1, 1.0));
        adam_step(&mut store, &grads, &mut state, &opt).unwrap();
        let w = store.get("w").unwrap().get(0, 0);
        assert!(
            (w + 0.01).abs() < 1e-6,
            "first step should be about -lr, got {w}"
        );

        // zero gradient leaves the parameter in place while moments decay
        let before = store.get("w").unwrap().clone();
        grads.insert("w".to_string(), Array::zeros(1, 1));
        for _ in 0..3 {
            adam_step(&mut store, &grads, &mut state, &opt).unwrap();
        }
        let after = store.get("w").unwrap().get(0, 0);
        // the residual first moment still decays toward zero, so movement is
        // bounded by lr per step
        assert!((after - before.get(0, 0)).abs() <= 3.0 * 0.01 + 1e-12);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Array::filled(1, 1, 1.0));
        let mut state = AdamState::new();
        let opt = AdamParams::with_lr(0.1);
        for _ in 0..100 {
            let x = store.get("x").unwrap().get(0, 0);
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Array::filled(1, 1, 2.0 * x));
            adam_step(&mut store, &grads, &mut state, &opt).unwrap();
        }
        assert!(store.get("x").unwrap().get(0, 0).abs() < 0.1);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.insert("w", Array::zeros(2, 2));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array::zeros(1, 2));
        let err = adam_step(
            &mut store,
            &grads,
            &mut AdamState::new(),
            &AdamParams::with_lr(0.01),
        );
        assert!(matches!(err, Err(HcdError::Contract(_))));
    }

    #[test]
    fn clamp_applies_only_to_prefixed_params() {
        let mut store = ParamStore::new();
        store.insert("ncdm.w1", Array::from_vec(1, 2, vec![-0.5, 0.25]).unwrap());
        store.insert("student.s", Array::filled(1, 1, -3.0));
        clamp_nonneg(&mut store, "ncdm.w");
        assert_eq!(store.get("ncdm.w1").unwrap().data(), &[0.0, 0.25]);
        assert_eq!(store.get("student.s").unwrap().get(0, 0), -3.0);
    }

    #[test]
    fn divergence_check_names_the_offending_parameter() {
        let mut store = ParamStore::new();
        store.insert("ok", Array::zeros(1, 1));
        store.insert("rsa.w_q", Array::filled(1, 1, f64::NAN));
        match divergence_check(f64::NAN, &store) {
            Err(HcdError::Divergence { param }) => assert_eq!(param, "rsa.w_q"),
            other => panic!("expected divergence, got {other:?}"),
        }
        assert!(divergence_check(1.0, &store).is_ok());
    }

    fn smoke_dataset() -> Dataset {
        let (ds, _) = synth_generate(&SynthConfig {
            n: 10,
            m: 5,
            k: 3,
            g: 2,
            seed: 14,
            guess: 0.1,
            slip: 0.1,
        })
        .unwrap();
        ds
    }

    fn smoke_config() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            max_epochs: 5,
            patience: 5,
            hidden1: 8,
            hidden2: 4,
            learning_rate: 0.02,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_loss_decreases_on_a_toy_set() {
        let ds = smoke_dataset();
        let cfg = smoke_config();
        let empty = ds.with_interactions(Vec::new());
        let spec = cfg.model_spec(&ds).unwrap();

        let mut losses = Vec::new();
        for epochs in 1..=5 {
            let cfg_e = TrainConfig {
                max_epochs: epochs,
                patience: epochs,
                ..cfg.clone()
            };
            let ckpt = fit_splits(&ds, &empty, &cfg_e, 0).unwrap();
            losses.push(dataset_loss(&spec, &ckpt.params, &ds).unwrap());
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "loss did not decrease: {losses:?}");
        }
    }

    #[test]
    fn fit_is_deterministic_under_a_fixed_seed() {
        let ds = smoke_dataset();
        let cfg = smoke_config();
        let a = fit(&ds, &cfg).unwrap();
        let b = fit(&ds, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let ds = smoke_dataset();
        let ckpt = fit(&ds, &smoke_config()).unwrap();
        let path = std::env::temp_dir().join(format!("hcd_ckpt_{}.json", std::process::id()));
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);

        // predictions from the reloaded parameters are bit-identical
        let spec = ckpt.config.model_spec(&ds).unwrap();
        let before = spec
            .predict_interactions(&ckpt.params, &ds, &ds.interactions)
            .unwrap();
        let after = spec
            .predict_interactions(&loaded.params, &ds, &ds.interactions)
            .unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_file(&path).ok();

        // fingerprint binding
        ckpt.verify_fingerprint(&ds).unwrap();
        let (other, _) = synth_generate(&SynthConfig {
            n: 10,
            m: 5,
            k: 3,
            g: 2,
            seed: 15,
            guess: 0.1,
            slip: 0.1,
        })
        .unwrap();
        assert!(matches!(
            ckpt.verify_fingerprint(&other),
            Err(HcdError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn cross_validate_reports_fold_means() {
        let (ds, _) = synth_generate(&SynthConfig {
            n: 30,
            m: 8,
            k: 3,
            g: 2,
            seed: 8,
            guess: 0.1,
            slip: 0.1,
        })
        .unwrap();
        let cfg = TrainConfig {
            max_epochs: 2,
            patience: 2,
            batch_size: 64,
            hidden1: 8,
            hidden2: 4,
            ..TrainConfig::default()
        };
        let (summary, checkpoints) = cross_validate(&ds, 2, &cfg).unwrap();
        assert_eq!(summary.folds.len(), 2);
        assert_eq!(checkpoints.len(), 2);
        let mean_auc = (summary.folds[0].auc + summary.folds[1].auc) / 2.0;
        assert!((summary.mean.auc - mean_auc).abs() < 1e-15);
    }
}
