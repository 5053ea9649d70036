//! The four multi-view topologies and their forward/backward semantics.
//!
//! | kind | extractors       | pooling                 | classifier                         |
//! |------|------------------|-------------------------|------------------------------------|
//! | CSV  | 1 shared         | over all views          | one head on the pooled vector      |
//! | SSG  | 1 per sub-group  | within each sub-group   | one head on the concatenated pools |
//! | PSG  | 1 per view       | within each sub-group   | head per group -> softmax -> combiner |
//! | CDV  | 1 per view       | over all views          | one head on the pooled vector      |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::WeightArchive;
use crate::backbone::{BackboneConfig, ExtractCache, FeatureExtractor};
use crate::error::{io_err, MvError, Result};
use crate::mvcore::{Image, MultiViewSchema};
use crate::nn::{cross_entropy, softmax, softmax_backward, Activation, Dense};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Csv,
    Ssg,
    Psg,
    Cdv,
}

impl ArchKind {
    pub const ALL: [ArchKind; 4] = [ArchKind::Csv, ArchKind::Ssg, ArchKind::Psg, ArchKind::Cdv];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::Csv => "csv",
            ArchKind::Ssg => "ssg",
            ArchKind::Psg => "psg",
            ArchKind::Cdv => "cdv",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchKind {
    type Err = MvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ArchKind::Csv),
            "ssg" => Ok(ArchKind::Ssg),
            "psg" => Ok(ArchKind::Psg),
            "cdv" => Ok(ArchKind::Cdv),
            other => Err(MvError::InvalidArgument(format!(
                "unknown architecture {other:?}; expected one of csv, ssg, psg, cdv"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Mean,
}

/// Elementwise max (or mean) over `K >= 1` equal-length feature vectors.
pub fn view_pool<V: AsRef<[f64]>>(features: &[V], mode: PoolMode) -> Result<Vec<f64>> {
    Ok(pool_with_argmax(features, mode)?.0)
}

/// Pools and, for max mode, records which input supplied each element
/// (first index on ties).
fn pool_with_argmax<V: AsRef<[f64]>>(features: &[V], mode: PoolMode) -> Result<(Vec<f64>, Vec<usize>)> {
    let first = features
        .first()
        .ok_or_else(|| MvError::InvalidArgument("view_pool needs at least one feature vector".into()))?
        .as_ref();
    let d = first.len();
    if let Some(bad) = features.iter().find(|f| f.as_ref().len() != d) {
        return Err(MvError::ShapeMismatch {
            expected: format!("feature vectors of length {d}"),
            actual: format!("length {}", bad.as_ref().len()),
        });
    }
    let mut out = first.to_vec();
    let mut arg = vec![0usize; d];
    match mode {
        PoolMode::Max => {
            for (k, f) in features.iter().enumerate().skip(1) {
                for (j, &v) in f.as_ref().iter().enumerate() {
                    if v > out[j] {
                        out[j] = v;
                        arg[j] = k;
                    }
                }
            }
        }
        PoolMode::Mean => {
            for f in &features[1..] {
                for (o, v) in out.iter_mut().zip(f.as_ref()) {
                    *o += v;
                }
            }
            let k = features.len() as f64;
            out.iter_mut().for_each(|o| *o /= k);
        }
    }
    Ok((out, arg))
}

fn pool_backward(d_pooled: &[f64], arg: &[usize], k: usize, mode: PoolMode) -> Vec<Vec<f64>> {
    let mut d = vec![vec![0.0; d_pooled.len()]; k];
    match mode {
        PoolMode::Max => {
            for (j, (&g, &a)) in d_pooled.iter().zip(arg).enumerate() {
                d[a][j] = g;
            }
        }
        PoolMode::Mean => {
            let inv = 1.0 / k as f64;
            for dv in &mut d {
                for (x, g) in dv.iter_mut().zip(d_pooled) {
                    *x = g * inv;
                }
            }
        }
    }
    d
}

/// Dense stack with ReLU between layers (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(inputs: usize, hidden: &[usize], outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![inputs];
        dims.extend_from_slice(hidden);
        dims.push(outputs);
        Self {
            layers: dims
                .windows(2)
                .enumerate()
                .map(|(i, w)| {
                    // hidden layers feed a ReLU, the last one feeds the softmax
                    if i + 2 < dims.len() {
                        Dense::new_he(w[0], w[1], rng)
                    } else {
                        Dense::new(w[0], w[1], rng)
                    }
                })
                .collect(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).pop().unwrap()
    }

    /// Returns the input followed by every layer output.
    fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(acts.last().unwrap());
            if i + 1 < self.layers.len() {
                Activation::Relu.apply_slice(&mut y);
            }
            acts.push(y);
        }
        acts
    }

    fn backward(&self, acts: &[Vec<f64>], d_out: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        let mut d = d_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                for (g, &y) in d.iter_mut().zip(&acts[i + 1]) {
                    *g *= Activation::Relu.derivative_from_output(y);
                }
            }
            let (gw, gb) = grads[2 * i..2 * i + 2].split_at_mut(1);
            d = layer.backward(&acts[i], &d, &mut gw[0], &mut gb[0]);
        }
        d
    }

    fn tensors(&self) -> Vec<&Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn to_archive(&self) -> WeightArchive {
        let dims: Vec<usize> = std::iter::once(self.inputs())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect();
        let mut arrays = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            arrays.push((format!("layer{i}.weight"), l.weight.clone()));
            arrays.push((format!("layer{i}.bias"), l.bias.clone()));
        }
        WeightArchive {
            manifest: serde_json::json!({ "kind": "mlp", "dims": dims, "hidden_activation": "relu" }),
            arrays,
        }
    }

    pub fn from_archive(a: &WeightArchive) -> Result<Self> {
        let dims: Vec<usize> = serde_json::from_value(
            a.manifest
                .get("dims")
                .cloned()
                .ok_or_else(|| MvError::Archive("mlp manifest lacks dims".into()))?,
        )?;
        if dims.len() < 2 {
            return Err(MvError::Archive("mlp needs at least one layer".into()));
        }
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let mut l = Dense::zeros(w[0], w[1]);
            let (wt, b) = (
                a.array(&format!("layer{i}.weight"))?,
                a.array(&format!("layer{i}.bias"))?,
            );
            if wt.len() != l.weight.len() || b.len() != l.bias.len() {
                return Err(MvError::Archive(format!("layer{i} has the wrong size")));
            }
            l.weight.copy_from_slice(wt);
            l.bias.copy_from_slice(b);
            layers.push(l);
        }
        Ok(Self { layers })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Classifier {
    /// CSV, SSG, CDV.
    Single(Mlp),
    /// PSG: one classifier per sub-group, softmax, then a dense combiner.
    Cascade { groups: Vec<Mlp>, combiner: Dense },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub pool_mode: PoolMode,
    /// Hidden widths of the classifier heads; empty means a single dense layer.
    pub classifier_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            pool_mode: PoolMode::Max,
            classifier_hidden: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewModel {
    pub kind: ArchKind,
    pub schema: MultiViewSchema,
    pub config: ModelConfig,
    pub extractors: Vec<FeatureExtractor>,
    pub classifier: Classifier,
}

/// Per-sample training pass output.
pub struct SampleGrad {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
}

struct ForwardTrace {
    caches: Vec<ExtractCache>,
    /// `(views in pool, pooled vector, argmax)` per pool.
    pools: Vec<(Vec<usize>, Vec<f64>, Vec<usize>)>,
    head: HeadTrace,
    logits: Vec<f64>,
}

enum HeadTrace {
    Single(Vec<Vec<f64>>),
    Cascade {
        group_acts: Vec<Vec<Vec<f64>>>,
        probs: Vec<Vec<f64>>,
        concat: Vec<f64>,
    },
}

pub fn build_model(kind: ArchKind, schema: &MultiViewSchema, config: ModelConfig) -> Result<MultiViewModel> {
    schema.validate()?;
    let shape = schema.image_shape;
    let n_ext = match kind {
        ArchKind::Csv => 1,
        ArchKind::Ssg => schema.subgroups.len(),
        ArchKind::Psg | ArchKind::Cdv => schema.num_views,
    };
    let scope_name = |i: usize| match kind {
        ArchKind::Csv => "all".to_string(),
        ArchKind::Ssg => format!("group_{i}"),
        _ => format!("view_{i}"),
    };
    let mut extractors = Vec::with_capacity(n_ext);
    for i in 0..n_ext {
        let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1);
        extractors.push(FeatureExtractor::new(
            scope_name(i),
            config.backbone.clone(),
            shape,
            seed,
        )?);
    }
    let d = config.backbone.feature_dim;
    let c = schema.num_classes();
    let g = schema.subgroups.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc1a5_51f1);
    let classifier = match kind {
        ArchKind::Csv | ArchKind::Cdv => Classifier::Single(Mlp::new(d, &config.classifier_hidden, c, &mut rng)),
        ArchKind::Ssg => Classifier::Single(Mlp::new(g * d, &config.classifier_hidden, c, &mut rng)),
        ArchKind::Psg => Classifier::Cascade {
            groups: (0..g)
                .map(|_| Mlp::new(d, &config.classifier_hidden, c, &mut rng))
                .collect(),
            combiner: Dense::new(g * c, c, &mut rng),
        },
    };
    Ok(MultiViewModel {
        kind,
        schema: schema.clone(),
        config,
        extractors,
        classifier,
    })
}

impl MultiViewModel {
    /// Extractor index used for view `v`.
    pub fn extractor_for_view(&self, v: usize) -> usize {
        match self.kind {
            ArchKind::Csv => 0,
            ArchKind::Ssg => self.schema.group_of_view()[v],
            ArchKind::Psg | ArchKind::Cdv => v,
        }
    }

    /// Views pooled together, in pooling order.
    pub fn pools(&self) -> Vec<Vec<usize>> {
        match self.kind {
            ArchKind::Csv | ArchKind::Cdv => vec![(0..self.schema.num_views).collect()],
            ArchKind::Ssg | ArchKind::Psg => self.schema.subgroups.clone(),
        }
    }

    pub fn num_classifiers(&self) -> usize {
        match &self.classifier {
            Classifier::Single(_) => 1,
            Classifier::Cascade { groups, .. } => groups.len() + 1,
        }
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut t: Vec<&Vec<f64>> = self.extractors.iter().flat_map(|e| e.tensors()).collect();
        match &self.classifier {
            Classifier::Single(m) => t.extend(m.tensors()),
            Classifier::Cascade { groups, combiner } => {
                for m in groups {
                    t.extend(m.tensors());
                }
                t.push(&combiner.weight);
                t.push(&combiner.bias);
            }
        }
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut t: Vec<&mut Vec<f64>> = self.extractors.iter_mut().flat_map(|e| e.tensors_mut()).collect();
        match &mut self.classifier {
            Classifier::Single(m) => t.extend(m.tensors_mut()),
            Classifier::Cascade { groups, combiner } => {
                for m in groups {
                    t.extend(m.tensors_mut());
                }
                t.push(&mut combiner.weight);
                t.push(&mut combiner.bias);
            }
        }
        t
    }

    /// Per-tensor frozen flags aligned with [`Self::tensors`].
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut mask: Vec<bool> = self
            .extractors
            .iter()
            .flat_map(|e| std::iter::repeat_n(e.frozen, e.num_tensors()))
            .collect();
        mask.resize(self.tensors().len(), false);
        mask
    }

    pub fn weight_hash(&self) -> String {
        crate::archive::hash_arrays(self.tensors().into_iter().map(|t| t.as_slice()))
    }

    fn check_views(&self, views: &[Image]) -> Result<()> {
        if views.len() != self.schema.num_views {
            return Err(MvError::ShapeMismatch {
                expected: format!("{} views", self.schema.num_views),
                actual: format!("{} views", views.len()),
            });
        }
        Ok(())
    }

    fn trace(&self, views: &[Image]) -> Result<ForwardTrace> {
        self.check_views(views)?;
        let caches = views
            .iter()
            .enumerate()
            .map(|(v, img)| self.extractors[self.extractor_for_view(v)].forward_cached(img))
            .collect::<Result<Vec<_>>>()?;
        let mut pools = Vec::new();
        for members in self.pools() {
            let feats: Vec<&[f64]> = members.iter().map(|&v| caches[v].features()).collect();
            let (pooled, arg) = pool_with_argmax(&feats, self.config.pool_mode)?;
            pools.push((members, pooled, arg));
        }
        let (head, logits) = match &self.classifier {
            Classifier::Single(mlp) => {
                let input: Vec<f64> = pools.iter().flat_map(|p| p.1.iter().copied()).collect();
                let acts = mlp.forward_cached(&input);
                let logits = acts.last().unwrap().clone();
                (HeadTrace::Single(acts), logits)
            }
            Classifier::Cascade { groups, combiner } => {
                let mut group_acts = Vec::new();
                let mut probs = Vec::new();
                for (mlp, pool) in groups.iter().zip(&pools) {
                    let acts = mlp.forward_cached(&pool.1);
                    probs.push(softmax(acts.last().unwrap()));
                    group_acts.push(acts);
                }
                let concat: Vec<f64> = probs.iter().flatten().copied().collect();
                let logits = combiner.forward(&concat);
                (
                    HeadTrace::Cascade {
                        group_acts,
                        probs,
                        concat,
                    },
                    logits,
                )
            }
        };
        Ok(ForwardTrace {
            caches,
            pools,
            head,
            logits,
        })
    }

    /// Class logits, length `|class_names|`.
    pub fn forward(&self, views: &[Image]) -> Result<Vec<f64>> {
        Ok(self.trace(views)?.logits)
    }

    pub fn predict_proba(&self, views: &[Image]) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(views)?))
    }

    /// PSG only: the per-group probability vectors fed to the combiner.
    pub fn group_probabilities(&self, views: &[Image]) -> Result<Option<Vec<Vec<f64>>>> {
        Ok(match self.trace(views)?.head {
            HeadTrace::Cascade { probs, .. } => Some(probs),
            HeadTrace::Single(_) => None,
        })
    }

    /// Cross-entropy loss and parameter gradients for one sample.
    pub fn loss_and_grad(&self, views: &[Image], label: usize) -> Result<SampleGrad> {
        let tr = self.trace(views)?;
        let (loss, d_logits) = cross_entropy(&tr.logits, label);
        let mut grads: Vec<Vec<f64>> = self.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let n_ext_tensors: usize = self.extractors.iter().map(|e| e.num_tensors()).sum();
        let (ext_grads, head_grads) = grads.split_at_mut(n_ext_tensors);

        // gradient w.r.t. each pooled vector
        let d = self.config.backbone.feature_dim;
        let d_pools: Vec<Vec<f64>> = match (&self.classifier, &tr.head) {
            (Classifier::Single(mlp), HeadTrace::Single(acts)) => {
                let d_in = mlp.backward(acts, &d_logits, head_grads);
                d_in.chunks(d).map(|c| c.to_vec()).collect()
            }
            (
                Classifier::Cascade { groups, combiner },
                HeadTrace::Cascade {
                    group_acts,
                    probs,
                    concat,
                },
            ) => {
                let n_group_tensors: usize = groups.iter().map(|m| m.layers.len() * 2).sum();
                let (g_groups, g_comb) = head_grads.split_at_mut(n_group_tensors);
                let (gw, gb) = g_comb.split_at_mut(1);
                let d_concat = combiner.backward(concat, &d_logits, &mut gw[0], &mut gb[0]);
                let c = self.schema.num_classes();
                let mut out = Vec::new();
                let mut offset = 0;
                for (gi, mlp) in groups.iter().enumerate() {
                    let dp = &d_concat[gi * c..(gi + 1) * c];
                    let dz = softmax_backward(&probs[gi], dp);
                    let nt = mlp.layers.len() * 2;
                    out.push(mlp.backward(&group_acts[gi], &dz, &mut g_groups[offset..offset + nt]));
                    offset += nt;
                }
                out
            }
            _ => unreachable!("trace matches classifier"),
        };

        let mut ext_offsets = Vec::with_capacity(self.extractors.len());
        let mut acc = 0;
        for e in &self.extractors {
            ext_offsets.push(acc);
            acc += e.num_tensors();
        }
        for ((members, _, arg), d_pool) in tr.pools.iter().zip(&d_pools) {
            let per_view = pool_backward(d_pool, arg, members.len(), self.config.pool_mode);
            for (&v, d_feat) in members.iter().zip(&per_view) {
                let e = self.extractor_for_view(v);
                let ext = &self.extractors[e];
                let off = ext_offsets[e];
                ext.backward(&tr.caches[v], d_feat, &mut ext_grads[off..off + ext.num_tensors()]);
            }
        }
        Ok(SampleGrad {
            loss,
            logits: tr.logits,
            grads,
        })
    }

    /// Writes `manifest.json` plus one weight archive per extractor and classifier.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut ext_files = Vec::new();
        for (i, e) in self.extractors.iter().enumerate() {
            let name = format!("extractor_{i}.mvw");
            e.to_archive().save(&dir.join(&name))?;
            ext_files.push(name);
        }
        let head_files: Vec<String> = match &self.classifier {
            Classifier::Single(m) => {
                m.to_archive().save(&dir.join("classifier.mvw"))?;
                vec!["classifier.mvw".into()]
            }
            Classifier::Cascade { groups, combiner } => {
                let mut files = Vec::new();
                for (g, m) in groups.iter().enumerate() {
                    let name = format!("group_classifier_{g}.mvw");
                    m.to_archive().save(&dir.join(&name))?;
                    files.push(name);
                }
                let comb = Mlp {
                    layers: vec![combiner.clone()],
                };
                comb.to_archive().save(&dir.join("combiner.mvw"))?;
                files.push("combiner.mvw".into());
                files
            }
        };
        let manifest = CheckpointManifest {
            kind: self.kind,
            schema: self.schema.clone(),
            pool_mode: self.config.pool_mode,
            seed: self.config.seed,
            backbone: self.config.backbone.clone(),
            classifier_hidden: self.config.classifier_hidden.clone(),
            extractor_files: ext_files,
            classifier_files: head_files,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: CheckpointManifest = serde_json::from_str(&text)?;
        let config = ModelConfig {
            backbone: m.backbone.clone(),
            pool_mode: m.pool_mode,
            classifier_hidden: m.classifier_hidden.clone(),
            seed: m.seed,
        };
        let mut model = build_model(m.kind, &m.schema, config)?;
        if m.extractor_files.len() != model.extractors.len() {
            return Err(MvError::Archive(format!(
                "{} checkpoint lists {} extractors, expected {}",
                m.kind,
                m.extractor_files.len(),
                model.extractors.len()
            )));
        }
        for (slot, file) in model.extractors.iter_mut().zip(&m.extractor_files) {
            *slot = FeatureExtractor::from_archive(&WeightArchive::load(&dir.join(file))?)?;
        }
        let load_mlp = |f: &str| -> Result<Mlp> { Mlp::from_archive(&WeightArchive::load(&dir.join(f))?) };
        model.classifier = match model.classifier {
            Classifier::Single(_) => Classifier::Single(load_mlp(&m.classifier_files[0])?),
            Classifier::Cascade { groups, .. } => {
                let n = groups.len();
                if m.classifier_files.len() != n + 1 {
                    return Err(MvError::Archive(
                        "PSG checkpoint has the wrong number of classifiers".into(),
                    ));
                }
                let groups = m.classifier_files[..n]
                    .iter()
                    .map(|f| load_mlp(f))
                    .collect::<Result<Vec<_>>>()?;
                let mut comb = load_mlp(&m.classifier_files[n])?;
                Classifier::Cascade {
                    groups,
                    combiner: comb.layers.remove(0),
                }
            }
        };
        Ok(model)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: ArchKind,
    pub schema: MultiViewSchema,
    pub pool_mode: PoolMode,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub classifier_hidden: Vec<usize>,
    pub extractor_files: Vec<String>,
    pub classifier_files: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mvcore::ImageShape;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_schema() -> MultiViewSchema {
        MultiViewSchema::foam_default(16, 16)
    }

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                channels: vec![2, 3],
                feature_dim: 8,
                ..Default::default()
            },
            seed,
            ..Default::default()
        }
    }

    fn random_views(n: usize, shape: ImageShape, rng: &mut ChaCha8Rng) -> Vec<Image> {
        (0..n)
            .map(|_| {
                let data = (0..shape.height * shape.width * shape.channels)
                    .map(|_| rng.gen())
                    .collect();
                Image::from_vec(shape.height, shape.width, shape.channels, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn pool_examples() {
        assert_eq!(view_pool(&[vec![1.0, -2.0]], PoolMode::Max).unwrap(), vec![1.0, -2.0]);
        assert_eq!(
            view_pool(&[vec![1.0, 2.0], vec![3.0, 0.0]], PoolMode::Max).unwrap(),
            vec![3.0, 2.0]
        );
        assert_eq!(
            view_pool(&[vec![1.0, 2.0], vec![3.0, 0.0]], PoolMode::Mean).unwrap(),
            vec![2.0, 1.0]
        );
        assert!(view_pool::<Vec<f64>>(&[], PoolMode::Max).is_err());
        assert!(view_pool(&[vec![1.0], vec![1.0, 2.0]], PoolMode::Mean).is_err());
    }

    proptest! {
        #[test]
        fn pool_is_permutation_invariant(
            vs in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 5),
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| vs[i].clone()).collect();
            prop_assert_eq!(view_pool(&vs, PoolMode::Max).unwrap(), view_pool(&shuffled, PoolMode::Max).unwrap());
            let a = view_pool(&vs, PoolMode::Mean).unwrap();
            let b = view_pool(&shuffled, PoolMode::Mean).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn structural_counts() {
        let s = small_schema();
        let counts = |k| {
            let m = build_model(k, &s, small_config(1)).unwrap();
            (m.extractors.len(), m.num_classifiers())
        };
        assert_eq!(counts(ArchKind::Csv), (1, 1));
        assert_eq!(counts(ArchKind::Ssg), (2, 1));
        assert_eq!(counts(ArchKind::Psg), (5, 3));
        assert_eq!(counts(ArchKind::Cdv), (5, 1));
        assert!("mlp".parse::<ArchKind>().is_err());
        assert_eq!("SSG".parse::<ArchKind>().unwrap(), ArchKind::Ssg);
    }

    #[test]
    fn every_kind_emits_finite_logits() {
        let s = small_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let views = random_views(5, s.image_shape, &mut rng);
        for k in ArchKind::ALL {
            let m = build_model(k, &s, small_config(2)).unwrap();
            let l = m.forward(&views).unwrap();
            assert_eq!(l.len(), 2);
            assert!(l.iter().all(|v| v.is_finite()));
            assert!(m.forward(&views[..4]).is_err());
        }
    }

    #[test]
    fn psg_group_outputs_are_distributions() {
        let s = small_schema();
        let m = build_model(ArchKind::Psg, &s, small_config(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let views = random_views(5, s.image_shape, &mut rng);
            for p in m.group_probabilities(&views).unwrap().unwrap() {
                assert!(p.iter().all(|&x| x >= 0.0));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn csv_identical_views_equals_single_view_pipeline() {
        let s = small_schema();
        let m = build_model(ArchKind::Csv, &s, small_config(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_views(1, s.image_shape, &mut rng).remove(0);
        let logits = m.forward(&vec![img.clone(); 5]).unwrap();
        let feat = m.extractors[0].extract(&img).unwrap();
        let Classifier::Single(mlp) = &m.classifier else {
            unreachable!()
        };
        assert_eq!(logits, mlp.forward(&feat));
    }

    #[test]
    fn ssg_with_one_group_matches_csv() {
        let mut s = small_schema();
        s.subgroups = vec![vec![0, 1, 2, 3, 4]];
        let csv = build_model(ArchKind::Csv, &s, small_config(5)).unwrap();
        let mut ssg = build_model(ArchKind::Ssg, &s, small_config(5)).unwrap();
        assert_eq!(ssg.extractors.len(), 1);
        ssg.extractors[0] = csv.extractors[0].clone();
        ssg.classifier = csv.classifier.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let views = random_views(5, s.image_shape, &mut rng);
        assert_eq!(csv.forward(&views).unwrap(), ssg.forward(&views).unwrap());
    }

    #[test]
    fn predict_proba_is_softmax_and_argmax_agrees() {
        let s = small_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = build_model(ArchKind::Ssg, &s, small_config(6)).unwrap();
        for _ in 0..20 {
            let views = random_views(5, s.image_shape, &mut rng);
            let l = m.forward(&views).unwrap();
            let p = m.predict_proba(&views).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(crate::nn::argmax(&l), crate::nn::argmax(&p));
        }
    }

    /// Central finite differences on the full model loss, for every kind.
    #[test]
    fn model_gradients_match_finite_differences() {
        let s = small_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let views = random_views(5, s.image_shape, &mut rng);
        for kind in ArchKind::ALL {
            for pool_mode in [PoolMode::Max, PoolMode::Mean] {
                let mut cfg = small_config(7);
                cfg.backbone.activation = Activation::Tanh;
                cfg.pool_mode = pool_mode;
                cfg.classifier_hidden = vec![4];
                let m = build_model(kind, &s, cfg).unwrap();
                let g = m.loss_and_grad(&views, 1).unwrap();
                let mut probe = m.clone();
                let h = 1e-5;
                let n_tensors = m.tensors().len();
                for t in 0..n_tensors {
                    let len = m.tensors()[t].len();
                    for i in [0, len / 2, len - 1] {
                        let orig = probe.tensors()[t][i];
                        probe.tensors_mut()[t][i] = orig + h;
                        let lp = probe.loss_and_grad(&views, 1).unwrap().loss;
                        probe.tensors_mut()[t][i] = orig - h;
                        let lm = probe.loss_and_grad(&views, 1).unwrap().loss;
                        probe.tensors_mut()[t][i] = orig;
                        let fd = (lp - lm) / (2.0 * h);
                        let a = g.grads[t][i];
                        assert!(
                            (fd - a).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-3),
                            "{kind} {pool_mode:?} tensor {t} idx {i}: fd {fd} analytic {a}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let s = small_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let views = random_views(5, s.image_shape, &mut rng);
        for kind in ArchKind::ALL {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = small_config(8);
            cfg.classifier_hidden = vec![3];
            let m = build_model(kind, &s, cfg).unwrap();
            m.save_checkpoint(dir.path()).unwrap();
            let back = MultiViewModel::load_checkpoint(dir.path()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.forward(&views).unwrap(), m.forward(&views).unwrap());
        }
    }
}
