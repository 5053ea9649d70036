//! Mini-batch training for multi-view models and for one-view explanation heads.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureExtractor;
use crate::error::{io_err, MvError, Result};
use crate::evalx::{accuracy, EvalReport};
use crate::mvarch::{ArchKind, MultiViewModel};
use crate::mvcore::{Dataset, MultiViewSchema};
use crate::nn::{add_into, argmax, cross_entropy, Adam, AdamParams, Dense};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 150,
            learning_rate: 5e-5,
            optimizer: Optimizer::Adam,
            loss: LossKind::CrossEntropy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MvError::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MvError::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamParams {
        AdamParams {
            learning_rate: self.learning_rate,
            ..AdamParams::default()
        }
    }
}

/// Per-epoch curves plus final metrics.
///
/// `train_loss` is the mean mini-batch loss seen during the epoch;
/// `train_acc` and `test_acc` are measured on the full sets after the epoch's
/// last update. Test fields are empty/`None` when no test set is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub test_acc: Vec<f64>,
    pub final_train_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub final_test_auc: Option<f64>,
    pub best_test_accuracy: Option<f64>,
    /// 1-based epoch of the first best test accuracy.
    pub best_epoch: Option<usize>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    /// `epoch,train_loss,train_acc,test_acc`, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,test_acc\n");
        for e in 0..self.epochs() {
            let test = self.test_acc.get(e).map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                e + 1,
                self.train_loss[e],
                self.train_acc[e],
                test
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(self.to_csv().as_bytes()).map_err(io_err(path))
    }

    /// Summary JSON without timing, so reruns compare byte-for-byte.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            epochs: usize,
            final_train_loss: Option<f64>,
            final_train_accuracy: Option<f64>,
            final_test_accuracy: Option<f64>,
            final_test_auc: Option<f64>,
            best_test_accuracy: Option<f64>,
            best_epoch: Option<usize>,
            train_loss: &'a [f64],
            train_acc: &'a [f64],
            test_acc: &'a [f64],
        }
        Ok(serde_json::to_string_pretty(&Summary {
            epochs: self.epochs(),
            final_train_loss: self.train_loss.last().copied(),
            final_train_accuracy: self.final_train_accuracy,
            final_test_accuracy: self.final_test_accuracy,
            final_test_auc: self.final_test_auc,
            best_test_accuracy: self.best_test_accuracy,
            best_epoch: self.best_epoch,
            train_loss: &self.train_loss,
            train_acc: &self.train_acc,
            test_acc: &self.test_acc,
        })?)
    }
}

fn check_schema(model_schema: &MultiViewSchema, ds: &Dataset, what: &str) -> Result<()> {
    if &ds.schema != model_schema {
        return Err(MvError::InvalidDataset(format!(
            "{what} schema does not match the model schema"
        )));
    }
    Ok(())
}

/// Class probabilities for every sample, in dataset order.
pub fn predict_dataset(model: &MultiViewModel, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.samples.par_iter().map(|s| model.predict_proba(&s.views)).collect()
}

pub fn evaluate_model(model: &MultiViewModel, ds: &Dataset) -> Result<EvalReport> {
    check_schema(&model.schema, ds, "evaluation")?;
    let probs = predict_dataset(model, ds)?;
    EvalReport::from_probabilities(&probs, &ds.labels(), &ds.schema.class_names, ds.schema.positive_class())
}

fn dataset_accuracy(model: &MultiViewModel, ds: &Dataset) -> Result<f64> {
    let probs = predict_dataset(model, ds)?;
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    Ok(accuracy(&pred, &ds.labels()))
}

/// Trains `model` in place. Per-sample gradients are computed in parallel and
/// summed in sample order, so results do not depend on thread count.
pub fn train_model(
    model: &mut MultiViewModel,
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_schema(&model.schema, train_ds, "training")?;
    if let Some(t) = test_ds {
        check_schema(&model.schema, t, "test")?;
    }
    if train_ds.is_empty() {
        return Err(MvError::InvalidDataset("training set is empty".into()));
    }
    let test_ds = test_ds.filter(|t| !t.is_empty());
    let start = Instant::now();
    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let frozen = model.frozen_mask();
    let mut adam = Adam::new(cfg.adam(), &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(cfg.epochs),
        train_acc: Vec::with_capacity(cfg.epochs),
        test_acc: Vec::with_capacity(cfg.epochs),
        final_train_accuracy: None,
        final_test_accuracy: None,
        final_test_auc: None,
        best_test_accuracy: None,
        best_epoch: None,
        wall_time_s: 0.0,
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let per_sample: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_ds.samples[i];
                    model.loss_and_grad(&s.views, s.label)
                })
                .collect::<Result<_>>()?;
            let mut grads: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
            let mut batch_loss = 0.0;
            for sg in &per_sample {
                batch_loss += sg.loss;
                add_into(&mut grads, &sg.grads);
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(MvError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b + 1,
                });
            }
            for g in grads.iter_mut().flatten() {
                *g *= scale;
            }
            adam.step(model.tensors_mut(), &grads, &frozen);
            loss_sum += batch_loss * batch.len() as f64;
        }
        report.train_loss.push(loss_sum / train_ds.len() as f64);
        report.train_acc.push(dataset_accuracy(model, train_ds)?);
        if let Some(t) = test_ds {
            let acc = dataset_accuracy(model, t)?;
            if report.best_test_accuracy.is_none_or(|b| acc > b) {
                report.best_test_accuracy = Some(acc);
                report.best_epoch = Some(epoch + 1);
            }
            report.test_acc.push(acc);
        }
    }

    report.final_train_accuracy = report.train_acc.last().copied();
    if let Some(t) = test_ds {
        if cfg.epochs > 0 {
            let ev = evaluate_model(model, t)?;
            report.final_test_accuracy = Some(ev.accuracy);
            report.final_test_auc = ev.auc;
        }
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

/// The views one explanation head covers, and the extractor that feeds it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadScope {
    pub extractor: usize,
    pub views: Vec<usize>,
}

/// CSV: one head for all views; SSG: one per sub-group; PSG and CDV: one per view.
pub fn head_scopes(kind: ArchKind, schema: &MultiViewSchema) -> Vec<HeadScope> {
    match kind {
        ArchKind::Csv => vec![HeadScope {
            extractor: 0,
            views: (0..schema.num_views).collect(),
        }],
        ArchKind::Ssg => schema
            .subgroups
            .iter()
            .enumerate()
            .map(|(g, views)| HeadScope {
                extractor: g,
                views: views.clone(),
            })
            .collect(),
        ArchKind::Psg | ArchKind::Cdv => (0..schema.num_views)
            .map(|v| HeadScope {
                extractor: v,
                views: vec![v],
            })
            .collect(),
    }
}

/// Single dense layer from one view's frozen features to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct OneViewHead {
    pub scope: HeadScope,
    pub dense: Dense,
    /// Accuracy over the scope's (view, label) training pairs.
    pub train_accuracy: f64,
    pub n_train_pairs: usize,
}

impl OneViewHead {
    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        self.dense.forward(features)
    }
}

/// Fits one head per scope on frozen features. Extractors are never mutated.
pub fn train_heads(
    extractors: &[FeatureExtractor],
    scopes: &[HeadScope],
    train_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<OneViewHead>> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(MvError::InvalidDataset("training set is empty".into()));
    }
    for s in scopes {
        let e = extractors
            .get(s.extractor)
            .ok_or_else(|| MvError::InvalidArgument(format!("scope refers to missing extractor {}", s.extractor)))?;
        if !e.frozen {
            return Err(MvError::NotFrozen(e.extractor_id.clone()));
        }
        if let Some(&v) = s.views.iter().find(|&&v| v >= train_ds.schema.num_views) {
            return Err(MvError::InvalidArgument(format!("scope refers to missing view {v}")));
        }
    }
    let n_classes = train_ds.schema.num_classes();
    scopes
        .iter()
        .enumerate()
        .map(|(k, scope)| {
            let ext = &extractors[scope.extractor];
            let pairs: Vec<(usize, usize)> = train_ds
                .samples
                .iter()
                .enumerate()
                .flat_map(|(i, _)| scope.views.iter().map(move |&v| (i, v)))
                .collect();
            let feats: Vec<Vec<f64>> = pairs
                .par_iter()
                .map(|&(i, v)| ext.extract(&train_ds.samples[i].views[v]))
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = pairs.iter().map(|&(i, _)| train_ds.samples[i].label).collect();
            let seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(k as u64);
            let dense = fit_dense(&feats, &labels, n_classes, cfg, seed)?;
            let pred: Vec<usize> = feats.iter().map(|f| argmax(&dense.forward(f))).collect();
            Ok(OneViewHead {
                scope: scope.clone(),
                train_accuracy: accuracy(&pred, &labels),
                n_train_pairs: pairs.len(),
                dense,
            })
        })
        .collect()
}

fn fit_dense(feats: &[Vec<f64>], labels: &[usize], n_classes: usize, cfg: &TrainConfig, seed: u64) -> Result<Dense> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = feats[0].len();
    let mut dense = Dense::new(dim, n_classes, &mut rng);
    let mut adam = Adam::new(cfg.adam(), &[dense.weight.len(), dense.bias.len()]);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut gw = vec![0.0; dense.weight.len()];
            let mut gb = vec![0.0; dense.bias.len()];
            let mut loss = 0.0;
            for &i in batch {
                let (l, dl) = cross_entropy(&dense.forward(&feats[i]), labels[i]);
                loss += l;
                dense.backward(&feats[i], &dl, &mut gw, &mut gb);
            }
            if !loss.is_finite() {
                return Err(MvError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b + 1,
                });
            }
            let scale = 1.0 / batch.len() as f64;
            gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g *= scale);
            adam.step(vec![&mut dense.weight, &mut dense.bias], &[gw, gb], &[false, false]);
        }
    }
    Ok(dense)
}
