//! Seeded synthetic multi-view data with planted, mask-annotated defects.
//!
//! Even-indexed sub-groups are drawn in the "disk" style (a smooth bright
//! disk on a dark surround, defects are dark blobs); odd-indexed sub-groups
//! blend from the disk style toward a "relief" style (bright horizontal
//! stripes with dark pits, defects are thin dark cracks) as `style_gap`
//! goes from 0 to 1. The gap also sets how strictly each defect kind is
//! confined to its own sub-group; at 0 any view can carry either kind.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, MvError, Result};
use crate::mvcore::{write_dataset, Dataset, Image, MultiViewSchema, Sample, SplitTag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    /// Thin dark line, planted in relief-style views.
    CrackStripe,
    /// Dark ellipse, planted in disk-style views.
    DarkBlob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub schema: MultiViewSchema,
    pub n_samples: usize,
    pub defect_kinds: Vec<DefectKind>,
    pub defect_intensity: f64,
    pub texture_noise_sigma: f64,
    pub style_gap: f64,
    /// Fraction of samples labeled Defective.
    pub class_balance: f64,
    /// Allowed defect-mask area as a fraction of the view.
    pub mask_area_band: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            schema: MultiViewSchema::foam_default(64, 64),
            n_samples: 40,
            defect_kinds: vec![DefectKind::CrackStripe, DefectKind::DarkBlob],
            defect_intensity: 0.8,
            texture_noise_sigma: 0.03,
            style_gap: 1.0,
            class_balance: 0.5,
            mask_area_band: (0.02, 0.15),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MvError::InvalidArgument(m));
        self.schema.validate()?;
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.defect_kinds.is_empty() {
            return bad("defect_kinds must list at least one kind".into());
        }
        if !(self.defect_intensity > 0.0 && self.defect_intensity <= 1.0) {
            return bad(format!(
                "defect_intensity must lie in (0, 1], got {}",
                self.defect_intensity
            ));
        }
        if !(self.texture_noise_sigma >= 0.0 && self.texture_noise_sigma.is_finite()) {
            return bad(format!(
                "texture_noise_sigma must be >= 0, got {}",
                self.texture_noise_sigma
            ));
        }
        if !(0.0..=1.0).contains(&self.style_gap) {
            return bad(format!("style_gap must lie in [0, 1], got {}", self.style_gap));
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return bad(format!("class_balance must lie in [0, 1], got {}", self.class_balance));
        }
        let (lo, hi) = self.mask_area_band;
        if !(lo > 0.0 && lo < hi && hi <= 1.0) {
            return bad(format!(
                "mask_area_band must satisfy 0 < lo < hi <= 1, got ({lo}, {hi})"
            ));
        }
        if self.schema.image_shape.height < 16 || self.schema.image_shape.width < 16 {
            return bad("synthetic views need at least 16x16 pixels".into());
        }
        Ok(())
    }

    fn normal_and_defective(&self) -> (usize, usize) {
        let defective = self.schema.positive_class();
        let normal = self
            .schema
            .class_index("Normal")
            .filter(|&c| c != defective)
            .unwrap_or(if defective == 0 { 1 } else { 0 });
        (normal, defective)
    }
}

/// Binary ground-truth mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.data[y as usize * self.width + x as usize] {
                255
            } else {
                0
            }])
        });
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| MvError::Decode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data: img.pixels().map(|p| p[0] >= 128).collect(),
        })
    }
}

pub type MaskMap = BTreeMap<(String, usize), Mask>;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Non-empty masks only; normal samples have no entries.
    pub masks: MaskMap,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Style {
    Disk,
    Relief,
}

fn style_of_group(g: usize) -> Style {
    if g.is_multiple_of(2) {
        Style::Disk
    } else {
        Style::Relief
    }
}

fn natural_kind(style: Style) -> DefectKind {
    match style {
        Style::Disk => DefectKind::DarkBlob,
        Style::Relief => DefectKind::CrackStripe,
    }
}

struct Canvas {
    px: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self { px: vec![0.0; h * w] }
    }
}

fn render_disk(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Canvas {
    let mut c = Canvas::new(h, w);
    let s = h.min(w) as f64;
    let cx = w as f64 / 2.0 + rng.gen_range(-0.04..0.04) * s;
    let cy = h as f64 / 2.0 + rng.gen_range(-0.04..0.04) * s;
    let r = 0.42 * s * rng.gen_range(0.92..1.04);
    let base = rng.gen_range(0.58..0.68);
    let theta = rng.gen_range(0.0..PI);
    let phase = rng.gen_range(0.0..2.0 * PI);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let rr = (dx * dx + dy * dy).sqrt() / r;
            c.px[y * w + x] = if rr <= 1.0 {
                let wave = (2.0 * PI * (dx * theta.cos() + dy * theta.sin()) / s + phase).sin();
                base - 0.10 * rr * rr + 0.03 * wave
            } else {
                0.18 + 0.03 * (2.0 * PI * y as f64 / s + phase).sin()
            };
        }
    }
    c
}

fn render_relief(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Canvas {
    let mut c = Canvas::new(h, w);
    let s = h.min(w) as f64;
    let period = rng.gen_range(0.9..1.1) * 0.09 * s;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let tilt = rng.gen_range(-0.08..0.08);
    let base = rng.gen_range(0.70..0.76);
    for y in 0..h {
        for x in 0..w {
            let t = y as f64 + tilt * x as f64;
            c.px[y * w + x] = base + 0.10 * (2.0 * PI * t / period + phase).sin();
        }
    }
    // dark pits, sized like blob defects
    for _ in 0..2 {
        let (mask, _) = ellipse_mask(h, w, rng, (0.025, 0.05));
        for (p, &m) in c.px.iter_mut().zip(&mask.data) {
            if m {
                *p *= 0.3;
            }
        }
    }
    c
}

/// Random rotated ellipse with area near `area_range` (fraction of the view).
fn ellipse_mask(h: usize, w: usize, rng: &mut ChaCha8Rng, area_range: (f64, f64)) -> (Mask, (f64, f64)) {
    let area = rng.gen_range(area_range.0..area_range.1) * (h * w) as f64;
    let aspect = rng.gen_range(0.6..1.0);
    let a = (area / (PI * aspect)).sqrt();
    let b = aspect * a;
    let rot = rng.gen_range(0.0..PI);
    let s = h.min(w) as f64;
    let margin = a + 1.0;
    let lo = margin.max(0.18 * s);
    let cx = rng.gen_range(lo..(w as f64 - lo).max(lo + 1e-9));
    let cy = rng.gen_range(lo..(h as f64 - lo).max(lo + 1e-9));
    let (cr, sr) = (rot.cos(), rot.sin());
    let mut mask = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = (dx * cr + dy * sr) / a;
            let v = (-dx * sr + dy * cr) / b;
            mask.data[y * w + x] = u * u + v * v <= 1.0;
        }
    }
    (mask, (cx, cy))
}

fn crack_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Mask {
    let s = h.min(w) as f64;
    let half_width = (3.0 * w as f64 / 64.0).round().max(2.0) / 2.0;
    let angle = rng.gen_range(PI / 3.0..2.0 * PI / 3.0);
    let len = rng.gen_range(0.7..1.0) * s;
    let cx = w as f64 / 2.0 + rng.gen_range(-0.2..0.2) * s;
    let cy = h as f64 / 2.0 + rng.gen_range(-0.1..0.1) * s;
    let (ux, uy) = (angle.cos(), angle.sin());
    let mut mask = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let along = dx * ux + dy * uy;
            let across = -dx * uy + dy * ux;
            mask.data[y * w + x] = along.abs() <= len / 2.0 && across.abs() <= half_width;
        }
    }
    mask
}

fn plant(kind: DefectKind, h: usize, w: usize, band: (f64, f64), rng: &mut ChaCha8Rng) -> Mask {
    // redraw until the rasterised area falls inside the band
    for _ in 0..64 {
        let m = match kind {
            DefectKind::DarkBlob => ellipse_mask(h, w, rng, (band.0.max(0.03), band.1.min(0.07).max(band.0 + 1e-3))).0,
            DefectKind::CrackStripe => crack_mask(h, w, rng),
        };
        let f = m.area_fraction();
        if f >= band.0 && f <= band.1 {
            return m;
        }
    }
    // fall back to a centred square of the band's midpoint area
    let side = (((band.0 + band.1) / 2.0 * (h * w) as f64).sqrt()) as usize;
    let mut m = Mask::empty(h, w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            m.data[y * w + x] = true;
        }
    }
    m
}

/// Deterministic per-seed generation of a labeled dataset and its defect masks.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let schema = &spec.schema;
    let (h, w, channels) = (
        schema.image_shape.height,
        schema.image_shape.width,
        schema.image_shape.channels,
    );
    let (normal, defective) = spec.normal_and_defective();
    let n_def = (spec.n_samples as f64 * spec.class_balance).round() as usize;

    let mut order: Vec<usize> = (0..spec.n_samples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut is_defective = vec![false; spec.n_samples];
    for &i in &order[..n_def] {
        is_defective[i] = true;
    }

    let group_of = schema.group_of_view();
    let view_style: Vec<Style> = group_of.iter().map(|&g| style_of_group(g)).collect();
    let noise = Normal::new(0.0, spec.texture_noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let width = (spec.n_samples.max(2) - 1).to_string().len().max(4);

    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut masks = MaskMap::new();
    for i in 0..spec.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let sample_id = format!("s{i:0width$}");

        let mut canvases: Vec<Canvas> = view_style
            .iter()
            .map(|&style| {
                let disk = render_disk(h, w, &mut rng);
                match style {
                    Style::Disk => disk,
                    Style::Relief => {
                        let relief = render_relief(h, w, &mut rng);
                        let g = spec.style_gap;
                        let mut c = disk;
                        for (p, r) in c.px.iter_mut().zip(&relief.px) {
                            *p = (1.0 - g) * *p + g * r;
                        }
                        c
                    }
                }
            })
            .collect();

        if is_defective[i] {
            let kind = *spec.defect_kinds.choose(&mut rng).unwrap();
            // each kind sits in its own sub-group's views with probability style_gap
            let tied = rng.gen_bool(spec.style_gap.clamp(0.0, 1.0));
            let mut candidates: Vec<usize> = (0..schema.num_views)
                .filter(|&v| !tied || natural_kind(view_style[v]) == kind)
                .collect();
            if candidates.is_empty() {
                candidates = (0..schema.num_views).collect();
            }
            let v = *candidates.choose(&mut rng).unwrap();
            let mask = plant(kind, h, w, spec.mask_area_band, &mut rng);
            let keep = 1.0 - 0.75 * spec.defect_intensity;
            for (p, &m) in canvases[v].px.iter_mut().zip(&mask.data) {
                if m {
                    *p *= keep;
                }
            }
            masks.insert((sample_id.clone(), v), mask);
        }

        let views = canvases
            .into_iter()
            .map(|c| {
                let mut img = Image::zeros(h, w, channels);
                for ch in 0..channels {
                    for (j, &p) in c.px.iter().enumerate() {
                        let n = if spec.texture_noise_sigma > 0.0 {
                            noise.sample(&mut rng)
                        } else {
                            0.0
                        };
                        img.data[ch * h * w + j] = (p + n).clamp(0.0, 1.0);
                    }
                }
                img
            })
            .collect();
        samples.push(Sample {
            sample_id,
            views,
            label: if is_defective[i] { defective } else { normal },
        });
    }
    Ok(SyntheticData {
        dataset: Dataset::new(schema.clone(), samples, SplitTag::Unsplit)?,
        masks,
    })
}

/// One spec per gap, identical except for `style_gap`.
pub fn difficulty_sweep(base: &SyntheticSpec, style_gaps: &[f64]) -> Result<Vec<SyntheticSpec>> {
    if style_gaps.is_empty() {
        return Err(MvError::InvalidArgument("style_gaps must not be empty".into()));
    }
    style_gaps
        .iter()
        .map(|&g| {
            let spec = SyntheticSpec {
                style_gap: g,
                ..base.clone()
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

/// Writes the dataset layout plus `masks/<sample_id>/view_<k>.png`.
pub fn write_synthetic(data: &SyntheticData, root: &Path) -> Result<()> {
    write_dataset(&data.dataset, root)?;
    for ((id, v), mask) in &data.masks {
        let dir = root.join("masks").join(id);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        mask.save_png(&dir.join(format!("view_{v}.png")))?;
    }
    Ok(())
}

/// Reads any ground-truth masks present under `<root>/masks`.
pub fn load_masks(root: &Path, ds: &Dataset) -> Result<MaskMap> {
    let mut out = MaskMap::new();
    let base = root.join("masks");
    if !base.is_dir() {
        return Ok(out);
    }
    for s in &ds.samples {
        for v in 0..ds.schema.num_views {
            let p = base.join(&s.sample_id).join(format!("view_{v}.png"));
            if p.is_file() {
                let m = Mask::load_png(&p)?;
                if !m.is_empty() {
                    out.insert((s.sample_id.clone(), v), m);
                }
            }
        }
    }
    Ok(out)
}
