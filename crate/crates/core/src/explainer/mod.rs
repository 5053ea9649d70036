//! Per-view, model-agnostic explanations: frozen extractors plus one-view
//! heads, probed with LIME, KernelSHAP, or exact Shapley values over
//! superpixel coalitions.

mod segment;
pub mod solvers;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use segment::{segment, SegmentMask, SegmentParams};
use solvers::{
    coalition_from_bits, enumerate_proper_coalitions, exact_shapley_from_table, kernel_shap_fit, lime_fit,
    sample_kernel_coalitions, EXACT_SHAPLEY_MAX_SEGMENTS, FULL_ENUMERATION_MAX_SEGMENTS,
};

use crate::backbone::FeatureExtractor;
use crate::error::{io_err, MvError, Result};
use crate::evalx::top_k_indices;
use crate::mvarch::{ArchKind, MultiViewModel};
use crate::mvcore::{Dataset, Image, MultiViewSchema};
use crate::nn::{argmax, softmax};
use crate::train::{head_scopes, train_heads, HeadScope, OneViewHead, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lime,
    KernelShap,
    ExactShapley,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Lime, Method::KernelShap, Method::ExactShapley];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lime => "lime",
            Method::KernelShap => "kernel_shap",
            Method::ExactShapley => "exact_shapley",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = MvError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                MvError::InvalidArgument(format!(
                    "unknown method {s:?}; expected lime, kernel_shap or exact_shapley"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Per-channel mean of the explained image.
    MeanColor,
    Zeros,
}

impl Baseline {
    pub fn values(self, image: &Image) -> Vec<f64> {
        match self {
            Baseline::MeanColor => image.channel_means(),
            Baseline::Zeros => vec![0.0; image.channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapSampling {
    /// Full enumeration when `2^S <= n_samples`, sampling otherwise.
    Auto,
    Full,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimeParams {
    pub n_samples: usize,
    /// `None` means `0.25 * sqrt(S)`.
    pub kernel_width: Option<f64>,
    pub ridge: f64,
}

impl Default for LimeParams {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            kernel_width: None,
            ridge: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapParams {
    pub n_samples: usize,
    pub sampling: ShapSampling,
}

impl Default for ShapParams {
    fn default() -> Self {
        Self {
            n_samples: 2048,
            sampling: ShapSampling::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainParams {
    pub segments: SegmentParams,
    pub baseline: Baseline,
    pub lime: LimeParams,
    pub shap: ShapParams,
    pub seed: u64,
}

impl Default for ExplainParams {
    fn default() -> Self {
        Self {
            segments: SegmentParams::default(),
            baseline: Baseline::MeanColor,
            lime: LimeParams::default(),
            shap: ShapParams::default(),
            seed: 0,
        }
    }
}

impl ExplainParams {
    /// Rejects method/segment combinations that cannot run, before any work.
    pub fn check(&self, method: Method) -> Result<()> {
        let s = self.segments.num_segments;
        match method {
            Method::ExactShapley if s > EXACT_SHAPLEY_MAX_SEGMENTS => Err(MvError::TooManySegments {
                method: "exact_shapley",
                max: EXACT_SHAPLEY_MAX_SEGMENTS,
                got: s,
            }),
            Method::KernelShap if self.shap.sampling == ShapSampling::Full && s > FULL_ENUMERATION_MAX_SEGMENTS => {
                Err(MvError::TooManySegments {
                    method: "kernel_shap full enumeration",
                    max: FULL_ENUMERATION_MAX_SEGMENTS,
                    got: s,
                })
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub view_index: usize,
    pub target_class: usize,
    pub method: Method,
    pub height: usize,
    pub width: usize,
    pub per_segment: Vec<f64>,
    /// Row-major; constant within each segment.
    pub per_pixel: Vec<f64>,
}

impl AttributionMap {
    pub fn new(
        mask: &SegmentMask,
        per_segment: Vec<f64>,
        view_index: usize,
        target_class: usize,
        method: Method,
    ) -> Self {
        Self {
            view_index,
            target_class,
            method,
            height: mask.height,
            width: mask.width,
            per_pixel: mask.broadcast(&per_segment),
            per_segment,
        }
    }

    /// One CSV row per image row.
    pub fn grid_csv(&self) -> String {
        let mut out = String::with_capacity(self.per_pixel.len() * 12);
        for row in self.per_pixel.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_grid(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.grid_csv()).map_err(io_err(path))
    }

    /// The view in grayscale/RGB with the top `q` fraction of pixels, among
    /// those with positive score, tinted orange.
    pub fn overlay(&self, image: &Image, q: f64) -> image::RgbImage {
        const ORANGE: [f64; 3] = [255.0, 165.0, 0.0];
        const ALPHA: f64 = 0.55;
        let rgb = image.to_dynamic().to_rgb8();
        let k = (q * self.per_pixel.len() as f64).round() as usize;
        let mut marked = vec![false; self.per_pixel.len()];
        for i in top_k_indices(&self.per_pixel, k) {
            if self.per_pixel[i] > 0.0 {
                marked[i] = true;
            }
        }
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = rgb.get_pixel(x, y).0;
            if marked[y as usize * self.width + x as usize] {
                let mut out = [0u8; 3];
                for c in 0..3 {
                    out[c] = ((1.0 - ALPHA) * p[c] as f64 + ALPHA * ORANGE[c]).round() as u8;
                }
                image::Rgb(out)
            } else {
                image::Rgb(p)
            }
        })
    }
}

/// Copy of `image` where segments with `coalition[s] == false` take the baseline.
pub fn perturb(image: &Image, mask: &SegmentMask, coalition: &[bool], baseline: &[f64]) -> Image {
    let mut out = image.clone();
    let plane = image.height * image.width;
    for (i, &l) in mask.labels.iter().enumerate() {
        if !coalition[l] {
            for (c, &b) in baseline.iter().enumerate() {
                out.data[c * plane + i] = b;
            }
        }
    }
    out
}

/// Model outputs for each coalition, in order. Evaluations run in parallel.
pub fn perturb_and_predict<F>(
    model_fn: &F,
    image: &Image,
    mask: &SegmentMask,
    coalitions: &[Vec<bool>],
    baseline: Baseline,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Image) -> Result<Vec<f64>> + Sync,
{
    if let Some(c) = coalitions.iter().find(|c| c.len() != mask.num_segments) {
        return Err(MvError::ShapeMismatch {
            expected: format!("coalitions of length {}", mask.num_segments),
            actual: c.len().to_string(),
        });
    }
    let base = baseline.values(image);
    coalitions
        .par_iter()
        .map(|c| model_fn(&perturb(image, mask, c, &base)))
        .collect()
}

fn target_values<F>(
    model_fn: &F,
    image: &Image,
    mask: &SegmentMask,
    coalitions: &[Vec<bool>],
    baseline: Baseline,
    target: usize,
) -> Result<Vec<f64>>
where
    F: Fn(&Image) -> Result<Vec<f64>> + Sync,
{
    let out = perturb_and_predict(model_fn, image, mask, coalitions, baseline)?;
    out.into_iter()
        .map(|p| {
            p.get(target).copied().ok_or_else(|| {
                MvError::InvalidArgument(format!(
                    "target class {target} outside model output of length {}",
                    p.len()
                ))
            })
        })
        .collect()
}

pub fn lime_explain<F>(
    model_fn: &F,
    image: &Image,
    mask: &SegmentMask,
    target_class: usize,
    params: &LimeParams,
    baseline: Baseline,
    seed: u64,
) -> Result<Vec<f64>>
where
    F: Fn(&Image) -> Result<Vec<f64>> + Sync,
{
    let s = mask.num_segments;
    if params.n_samples < s {
        return Err(MvError::InvalidArgument(format!(
            "LIME needs n_samples >= number of segments ({s}), got {}",
            params.n_samples
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coalitions = Vec::with_capacity(params.n_samples);
    coalitions.push(vec![true; s]);
    while coalitions.len() < params.n_samples {
        coalitions.push((0..s).map(|_| rng.gen::<bool>()).collect());
    }
    let values = target_values(model_fn, image, mask, &coalitions, baseline, target_class)?;
    let width = params.kernel_width.unwrap_or(0.25 * (s as f64).sqrt());
    lime_fit(&coalitions, &values, width, params.ridge)
}

pub fn kernel_shap_explain<F>(
    model_fn: &F,
    image: &Image,
    mask: &SegmentMask,
    target_class: usize,
    params: &ShapParams,
    baseline: Baseline,
    seed: u64,
) -> Result<Vec<f64>>
where
    F: Fn(&Image) -> Result<Vec<f64>> + Sync,
{
    let s = mask.num_segments;
    let ends = target_values(
        model_fn,
        image,
        mask,
        &[vec![false; s], vec![true; s]],
        baseline,
        target_class,
    )?;
    let (v_empty, v_full) = (ends[0], ends[1]);
    if s == 1 {
        return Ok(vec![v_full - v_empty]);
    }
    let full = match params.sampling {
        ShapSampling::Full => true,
        ShapSampling::Sampled => false,
        ShapSampling::Auto => s <= FULL_ENUMERATION_MAX_SEGMENTS && (1usize << s) <= params.n_samples,
    };
    let (coalitions, weights) = if full {
        enumerate_proper_coalitions(s)?
    } else {
        if params.n_samples < s + 2 {
            return Err(MvError::InvalidArgument(format!(
                "kernel SHAP needs n_samples >= S + 2 ({}), got {}",
                s + 2,
                params.n_samples
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cs = sample_kernel_coalitions(s, params.n_samples - 2, &mut rng);
        let n = cs.len();
        (cs, vec![1.0; n])
    };
    let values = target_values(model_fn, image, mask, &coalitions, baseline, target_class)?;
    kernel_shap_fit(&coalitions, &values, &weights, v_empty, v_full)
}

pub fn exact_shapley<F>(
    model_fn: &F,
    image: &Image,
    mask: &SegmentMask,
    target_class: usize,
    baseline: Baseline,
) -> Result<Vec<f64>>
where
    F: Fn(&Image) -> Result<Vec<f64>> + Sync,
{
    let s = mask.num_segments;
    if s > EXACT_SHAPLEY_MAX_SEGMENTS {
        return Err(MvError::TooManySegments {
            method: "exact_shapley",
            max: EXACT_SHAPLEY_MAX_SEGMENTS,
            got: s,
        });
    }
    let coalitions: Vec<Vec<bool>> = (0..1u64 << s).map(|b| coalition_from_bits(b, s)).collect();
    let table = target_values(model_fn, image, mask, &coalitions, baseline, target_class)?;
    exact_shapley_from_table(s, &table)
}

/// Runs `method` on one image and returns per-segment scores.
pub fn explain_image<F>(
    model_fn: &F,
    image: &Image,
    mask: &SegmentMask,
    target_class: usize,
    method: Method,
    params: &ExplainParams,
) -> Result<Vec<f64>>
where
    F: Fn(&Image) -> Result<Vec<f64>> + Sync,
{
    match method {
        Method::Lime => lime_explain(
            model_fn,
            image,
            mask,
            target_class,
            &params.lime,
            params.baseline,
            params.seed,
        ),
        Method::KernelShap => kernel_shap_explain(
            model_fn,
            image,
            mask,
            target_class,
            &params.shap,
            params.baseline,
            params.seed,
        ),
        Method::ExactShapley => exact_shapley(model_fn, image, mask, target_class, params.baseline),
    }
}

/// Frozen extractors of a trained model plus one-view heads, one per scope.
#[derive(Clone, Debug)]
pub struct ExplainerBundle {
    pub kind: ArchKind,
    pub schema: MultiViewSchema,
    pub extractors: Vec<FeatureExtractor>,
    pub scopes: Vec<HeadScope>,
    pub heads: Vec<Option<OneViewHead>>,
}

impl ExplainerBundle {
    /// Copies and freezes the model's extractors; heads start untrained.
    pub fn from_model(model: &MultiViewModel) -> Self {
        let scopes = head_scopes(model.kind, &model.schema);
        Self {
            kind: model.kind,
            schema: model.schema.clone(),
            extractors: model.extractors.iter().cloned().map(FeatureExtractor::freeze).collect(),
            heads: vec![None; scopes.len()],
            scopes,
        }
    }

    pub fn train_heads(&mut self, train_ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
        let heads = train_heads(&self.extractors, &self.scopes, train_ds, cfg)?;
        self.heads = heads.into_iter().map(Some).collect();
        Ok(())
    }

    pub fn scope_of_view(&self, view: usize) -> Result<usize> {
        self.scopes
            .iter()
            .position(|s| s.views.contains(&view))
            .ok_or_else(|| MvError::InvalidArgument(format!("view {view} outside 0..{}", self.schema.num_views)))
    }

    /// Head probabilities for a single image of `view`.
    pub fn view_model(&self, view: usize) -> Result<impl Fn(&Image) -> Result<Vec<f64>> + Sync + '_> {
        let k = self.scope_of_view(view)?;
        let head = self.heads[k].as_ref().ok_or(MvError::UntrainedHead(k))?;
        let ext = &self.extractors[self.scopes[k].extractor];
        Ok(move |img: &Image| Ok(softmax(&head.logits(&ext.extract(img)?))))
    }

    /// Explains one view of a sample. `target_class` defaults to the head's
    /// predicted class on the unperturbed view.
    pub fn explain_view(
        &self,
        views: &[Image],
        view: usize,
        method: Method,
        target_class: Option<usize>,
        params: &ExplainParams,
    ) -> Result<(AttributionMap, SegmentMask)> {
        params.check(method)?;
        let image = views
            .get(view)
            .ok_or_else(|| MvError::InvalidArgument(format!("view {view} outside 0..{}", views.len())))?;
        let model_fn = self.view_model(view)?;
        let target = match target_class {
            Some(t) if t < self.schema.num_classes() => t,
            Some(t) => return Err(MvError::InvalidArgument(format!("target class {t} out of range"))),
            None => argmax(&model_fn(image)?),
        };
        let mask = segment(image, &params.segments)?;
        let scores = explain_image(&model_fn, image, &mask, target, method, params)?;
        Ok((AttributionMap::new(&mask, scores, view, target, method), mask))
    }
}

/// Mean absolute per-pixel attribution over a set of maps of equal size.
pub fn global_attribution(maps: &[AttributionMap]) -> Result<Vec<f64>> {
    let first = maps
        .first()
        .ok_or_else(|| MvError::InvalidArgument("no attribution maps to aggregate".into()))?;
    let mut acc = vec![0.0; first.per_pixel.len()];
    for m in maps {
        if m.per_pixel.len() != acc.len() {
            return Err(MvError::ShapeMismatch {
                expected: format!("{}x{}", first.height, first.width),
                actual: format!("{}x{}", m.height, m.width),
            });
        }
        for (a, v) in acc.iter_mut().zip(&m.per_pixel) {
            *a += v.abs();
        }
    }
    let n = maps.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}
