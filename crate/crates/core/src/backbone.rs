//! Per-view feature extractor: `blocks x (conv3x3 -> activation -> 2x2 max-pool)`,
//! flatten, then one dense layer (followed by the activation) to `feature_dim`.
//! Inputs are centred by [`INPUT_CENTER`] first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{hash_arrays, WeightArchive};
use crate::error::{MvError, Result};
use crate::mvcore::{Image, ImageShape};
use crate::nn::{max_pool2, max_pool2_backward, Activation, Conv3x3, Dense};

/// Pixels in `[0, 1]` are shifted by this before the first convolution.
pub const INPUT_CENTER: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![4, 8, 8],
            feature_dim: 128,
            activation: Activation::Relu,
        }
    }
}

impl BackboneConfig {
    fn validate(&self, shape: ImageShape) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(MvError::InvalidArgument(
                "backbone needs >= 1 block with > 0 channels".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(MvError::InvalidArgument("feature_dim must be positive".into()));
        }
        let min_side = 1usize << self.channels.len();
        if shape.height < min_side || shape.width < min_side {
            return Err(MvError::InvalidArgument(format!(
                "{} blocks need images of at least {min_side}x{min_side}, got {}x{}",
                self.channels.len(),
                shape.height,
                shape.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub extractor_id: String,
    pub config: BackboneConfig,
    pub input_shape: ImageShape,
    pub convs: Vec<Conv3x3>,
    pub dense: Dense,
    pub frozen: bool,
}

struct BlockCache {
    h: usize,
    w: usize,
    cols: Vec<f64>,
    activated: Vec<f64>,
    argmax: Vec<u32>,
}

/// Intermediate values kept by a training forward pass.
pub struct ExtractCache {
    blocks: Vec<BlockCache>,
    flat: Vec<f64>,
    features: Vec<f64>,
}

impl ExtractCache {
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// ReLU on/off pattern plus every max-pool selection; two inputs with the
    /// same signature sit on the same smooth piece of the network.
    fn piece_signature(&self, act: Activation) -> Vec<u32> {
        let mut sig = Vec::new();
        for b in &self.blocks {
            sig.extend_from_slice(&b.argmax);
            if act == Activation::Relu {
                sig.extend(b.activated.iter().map(|&v| (v > 0.0) as u32));
            }
        }
        if act == Activation::Relu {
            sig.extend(self.features.iter().map(|&v| (v > 0.0) as u32));
        }
        sig
    }
}

impl FeatureExtractor {
    pub fn new(
        extractor_id: impl Into<String>,
        config: BackboneConfig,
        input_shape: ImageShape,
        seed: u64,
    ) -> Result<Self> {
        config.validate(input_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(config.channels.len());
        let mut cin = input_shape.channels;
        for &cout in &config.channels {
            convs.push(Conv3x3::new(cin, cout, &mut rng));
            cin = cout;
        }
        let (fh, fw) = Self::final_hw(&config, input_shape);
        let dense = Dense::new_he(cin * fh * fw, config.feature_dim, &mut rng);
        Ok(Self {
            extractor_id: extractor_id.into(),
            config,
            input_shape,
            convs,
            dense,
            frozen: false,
        })
    }

    fn final_hw(config: &BackboneConfig, shape: ImageShape) -> (usize, usize) {
        let (mut h, mut w) = (shape.height, shape.width);
        for _ in &config.channels {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
        }
        names.push("dense.weight".into());
        names.push("dense.bias".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut t: Vec<&Vec<f64>> = Vec::new();
        for c in &self.convs {
            t.push(&c.weight);
            t.push(&c.bias);
        }
        t.push(&self.dense.weight);
        t.push(&self.dense.bias);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut t: Vec<&mut Vec<f64>> = Vec::new();
        for c in &mut self.convs {
            t.push(&mut c.weight);
            t.push(&mut c.bias);
        }
        t.push(&mut self.dense.weight);
        t.push(&mut self.dense.bias);
        t
    }

    pub fn num_tensors(&self) -> usize {
        2 * self.convs.len() + 2
    }

    pub fn weight_hash(&self) -> String {
        hash_arrays(self.tensors().into_iter().map(|t| t.as_slice()))
    }

    fn check_shape(&self, image: &Image) -> Result<()> {
        if image.shape() != self.input_shape || image.data.len() != image.plane_len() * image.channels {
            return Err(MvError::ShapeMismatch {
                expected: self.input_shape.to_string(),
                actual: image.shape().to_string(),
            });
        }
        Ok(())
    }

    /// Inference-mode feature vector of length `feature_dim`.
    pub fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward_cached(image)?.features)
    }

    pub fn forward_cached(&self, image: &Image) -> Result<ExtractCache> {
        self.check_shape(image)?;
        let act = self.config.activation;
        let (mut h, mut w) = (image.height, image.width);
        let mut x: Vec<f64> = image.data.iter().map(|v| v - INPUT_CENTER).collect();
        let mut blocks = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (cols, mut z) = conv.forward(&x, h, w);
            act.apply_slice(&mut z);
            let (pooled, argmax) = max_pool2(&z, conv.out_channels, h, w);
            blocks.push(BlockCache {
                h,
                w,
                cols,
                activated: z,
                argmax,
            });
            x = pooled;
            h /= 2;
            w /= 2;
        }
        let mut features = self.dense.forward(&x);
        act.apply_slice(&mut features);
        Ok(ExtractCache {
            blocks,
            flat: x,
            features,
        })
    }

    /// Accumulates parameter gradients for `d_features` into `grads`
    /// (ordered as [`Self::tensors`]).
    pub fn backward(&self, cache: &ExtractCache, d_features: &[f64], grads: &mut [Vec<f64>]) {
        let act = self.config.activation;
        let n = self.convs.len();
        let dy: Vec<f64> = d_features
            .iter()
            .zip(&cache.features)
            .map(|(g, &y)| g * act.derivative_from_output(y))
            .collect();
        let (gw, rest) = grads[2 * n..].split_at_mut(1);
        let mut d = self.dense.backward(&cache.flat, &dy, &mut gw[0], &mut rest[0]);
        for (i, (conv, block)) in self.convs.iter().zip(&cache.blocks).enumerate().rev() {
            let mut dz = max_pool2_backward(&d, &block.argmax, block.activated.len());
            for (g, &y) in dz.iter_mut().zip(&block.activated) {
                *g *= act.derivative_from_output(y);
            }
            let (gw, gb) = grads[2 * i..2 * i + 2].split_at_mut(1);
            match conv.backward(&block.cols, &dz, block.h, block.w, &mut gw[0], &mut gb[0], i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    pub fn to_archive(&self) -> WeightArchive {
        let manifest = serde_json::json!({
            "extractor_id": self.extractor_id,
            "feature_dim": self.config.feature_dim,
            "input_shape": self.input_shape,
            "backbone": self.config,
            "frozen": self.frozen,
        });
        let arrays = self
            .tensor_names()
            .into_iter()
            .zip(self.tensors().into_iter().cloned())
            .collect();
        WeightArchive { manifest, arrays }
    }

    pub fn from_archive(archive: &WeightArchive) -> Result<Self> {
        let m = &archive.manifest;
        let field = |k: &str| {
            m.get(k)
                .cloned()
                .ok_or_else(|| MvError::Archive(format!("manifest lacks {k}")))
        };
        let extractor_id: String = serde_json::from_value(field("extractor_id")?)?;
        let input_shape: ImageShape = serde_json::from_value(field("input_shape")?)?;
        let config: BackboneConfig = serde_json::from_value(field("backbone")?)?;
        let frozen: bool = serde_json::from_value(field("frozen")?)?;
        let mut fe = Self::new(extractor_id, config, input_shape, 0)?;
        fe.frozen = frozen;
        for (name, t) in fe.tensor_names().into_iter().zip(fe.tensors_mut()) {
            let src = archive.array(&name)?;
            if src.len() != t.len() {
                return Err(MvError::Archive(format!(
                    "array {name} has {} values, expected {}",
                    src.len(),
                    t.len()
                )));
            }
            t.copy_from_slice(src);
        }
        Ok(fe)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this in both routes count as agreeing.
    pub abs_floor: f64,
    /// `None` checks every parameter.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            abs_floor: 1e-7,
            coords_per_tensor: Some(16),
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCoordReport {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub passed: bool,
    pub checked: usize,
    /// Coordinates whose ±step probe crossed a ReLU or max-pool kink.
    pub skipped_kinks: usize,
    pub worst: Option<GradCoordReport>,
}

fn probe_weights(fe: &FeatureExtractor, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    (0..fe.feature_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Scalar probe loss `r . extract(image)` with a seeded random `r`.
fn probe_loss(fe: &FeatureExtractor, image: &Image, r: &[f64]) -> Result<(f64, Vec<u32>)> {
    let cache = fe.forward_cached(image)?;
    let loss = cache.features.iter().zip(r).map(|(a, b)| a * b).sum();
    Ok((loss, cache.piece_signature(fe.config.activation)))
}

/// Analytic parameter gradients of the probe loss used by [`gradient_check`].
pub fn probe_gradients(fe: &FeatureExtractor, image: &Image, seed: u64) -> Result<Vec<Vec<f64>>> {
    let r = probe_weights(fe, seed);
    let cache = fe.forward_cached(image)?;
    let mut grads: Vec<Vec<f64>> = fe.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    fe.backward(&cache, &r, &mut grads);
    Ok(grads)
}

/// Compares `analytic` against central finite differences of the probe loss.
pub fn check_gradients_against(
    fe: &FeatureExtractor,
    image: &Image,
    analytic: &[Vec<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let r = probe_weights(fe, opts.seed);
    let (_, base_sig) = probe_loss(fe, image, &r)?;
    let names = fe.tensor_names();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = fe.clone();
    let mut report = GradCheckReport {
        passed: true,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    for t in 0..fe.num_tensors() {
        let len = fe.tensors()[t].len();
        let coords: Vec<usize> = match opts.coords_per_tensor {
            Some(k) if k < len => rand::seq::index::sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for i in coords {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + opts.step;
            let (lp, sp) = probe_loss(&probe, image, &r)?;
            probe.tensors_mut()[t][i] = orig - opts.step;
            let (lm, sm) = probe_loss(&probe, image, &r)?;
            probe.tensors_mut()[t][i] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            let a = analytic[t][i];
            let scale = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (a - numeric).abs() / scale;
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                report.worst = Some(GradCoordReport {
                    tensor: names[t].clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report.passed = report.worst.as_ref().is_none_or(|w| w.rel_error <= opts.tolerance);
    Ok(report)
}

/// True iff backpropagated gradients match central finite differences.
pub fn gradient_check(fe: &FeatureExtractor, image: &Image, tolerance: f64) -> Result<GradCheckReport> {
    let opts = GradCheckOptions {
        tolerance,
        ..Default::default()
    };
    let analytic = probe_gradients(fe, image, opts.seed)?;
    check_gradients_against(fe, image, &analytic, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(h: usize, w: usize) -> ImageShape {
        ImageShape {
            height: h,
            width: w,
            channels: 1,
        }
    }

    fn random_image(s: ImageShape, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..s.height * s.width * s.channels).map(|_| rng.gen::<f64>()).collect();
        Image::from_vec(s.height, s.width, s.channels, data).unwrap()
    }

    fn zero_weights(fe: &mut FeatureExtractor) {
        for t in fe.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn output_length_and_determinism() {
        let s = shape(64, 64);
        let fe = FeatureExtractor::new("e", BackboneConfig::default(), s, 1).unwrap();
        let img = random_image(s, 2);
        let a = fe.extract(&img).unwrap();
        let b = fe.extract(&img).unwrap();
        assert_eq!(a.len(), 128);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_network_maps_zero_image_to_zero() {
        let s = shape(32, 32);
        let mut fe = FeatureExtractor::new("e", BackboneConfig::default(), s, 1).unwrap();
        for c in &mut fe.convs {
            c.weight.iter_mut().for_each(|v| *v = 0.0);
            c.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        fe.dense.bias.iter_mut().for_each(|v| *v = 0.0);
        let out = fe.extract(&Image::zeros(32, 32, 1)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let fe = FeatureExtractor::new("e", BackboneConfig::default(), shape(32, 32), 1).unwrap();
        assert!(matches!(
            fe.extract(&Image::zeros(16, 32, 1)),
            Err(MvError::ShapeMismatch { .. })
        ));
        assert!(fe.extract(&Image::zeros(32, 32, 3)).is_err());
        assert!(FeatureExtractor::new("e", BackboneConfig::default(), shape(4, 4), 1).is_err());
    }

    #[test]
    fn one_pixel_nudge_stays_within_finite_difference_bound() {
        let s = shape(32, 32);
        let cfg = BackboneConfig {
            activation: Activation::Tanh,
            ..Default::default()
        };
        let fe = FeatureExtractor::new("e", cfg, s, 7).unwrap();
        let img = random_image(s, 8);
        let p = 5 * 32 + 9;
        // local Lipschitz estimate from central differences at a larger step
        let h = 1e-3;
        let mut plus = img.clone();
        plus.data[p] += h;
        let mut minus = img.clone();
        minus.data[p] -= h;
        let fp = fe.extract(&plus).unwrap();
        let fm = fe.extract(&minus).unwrap();
        let slope = fp
            .iter()
            .zip(&fm)
            .map(|(a, b)| (a - b).abs() / (2.0 * h))
            .fold(0.0, f64::max);

        let eps = 1e-6;
        let mut nudged = img.clone();
        nudged.data[p] += eps;
        let f0 = fe.extract(&img).unwrap();
        let f1 = fe.extract(&nudged).unwrap();
        let delta = f0.iter().zip(&f1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(delta <= 1.5 * slope * eps + 1e-15, "delta {delta} slope {slope}");
    }

    #[test]
    fn default_backbone_passes_gradient_check() {
        let s = shape(64, 64);
        let fe = FeatureExtractor::new("e", BackboneConfig::default(), s, 11).unwrap();
        let report = gradient_check(&fe, &random_image(s, 12), 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.checked > 50);
    }

    #[test]
    fn corrupted_gradient_fails_check() {
        let s = shape(16, 16);
        let cfg = BackboneConfig {
            channels: vec![2, 3],
            feature_dim: 6,
            activation: Activation::Tanh,
        };
        let fe = FeatureExtractor::new("e", cfg, s, 3).unwrap();
        let img = random_image(s, 4);
        let opts = GradCheckOptions {
            coords_per_tensor: None,
            ..Default::default()
        };
        let mut grads = probe_gradients(&fe, &img, opts.seed).unwrap();
        assert!(check_gradients_against(&fe, &img, &grads, &opts).unwrap().passed);
        // double the largest conv0 weight gradient
        let i = crate::nn::argmax(&grads[0].iter().map(|g| g.abs()).collect::<Vec<_>>());
        grads[0][i] *= 2.0;
        let report = check_gradients_against(&fe, &img, &grads, &opts).unwrap();
        assert!(!report.passed);
        let worst = report.worst.unwrap();
        assert_eq!((worst.tensor.as_str(), worst.index), ("conv0.weight", i));
    }

    #[test]
    fn zero_network_gradients_vanish_and_check_passes() {
        let s = shape(16, 16);
        let mut fe = FeatureExtractor::new("e", BackboneConfig::default(), s, 5).unwrap();
        zero_weights(&mut fe);
        let img = random_image(s, 6);
        let grads = probe_gradients(&fe, &img, 0x5eed).unwrap();
        assert!(grads.iter().flatten().all(|g| g.abs() < 1e-12));
        assert!(gradient_check(&fe, &img, 1e-4).unwrap().passed);
    }

    #[test]
    fn freeze_is_idempotent() {
        let fe = FeatureExtractor::new("e", BackboneConfig::default(), shape(16, 16), 1).unwrap();
        let h = fe.weight_hash();
        let f = fe.freeze().freeze();
        assert!(f.frozen);
        assert_eq!(f.weight_hash(), h);
    }

    #[test]
    fn archive_round_trip_preserves_weights() {
        let fe = FeatureExtractor::new("view_3", BackboneConfig::default(), shape(32, 32), 9)
            .unwrap()
            .freeze();
        let bytes = fe.to_archive().to_bytes().unwrap();
        let back = FeatureExtractor::from_archive(&WeightArchive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, fe);
        assert_eq!(back.to_archive().to_bytes().unwrap(), bytes);
    }
}
