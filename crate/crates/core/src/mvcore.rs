//! Multi-view samples, schemas and datasets, plus ingestion from disk.
//!
//! A dataset root holds one directory per sample with files
//! `view_0.png .. view_{V-1}.png` and a `labels.csv` table with header
//! `sample_id,label`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, MvError, Result};

/// A dense image in channel-major (CHW) layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(MvError::ShapeMismatch {
                expected: format!("{} values", height * width * channels),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape {
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    /// Mean value of every channel.
    pub fn channel_means(&self) -> Vec<f64> {
        let n = self.plane_len() as f64;
        self.data
            .chunks(self.plane_len())
            .map(|plane| plane.iter().sum::<f64>() / n)
            .collect()
    }

    /// Converts to an 8-bit raster, rounding and clamping every value.
    pub fn to_dynamic(&self) -> DynamicImage {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            let buf = ImageBuffer::from_fn(w, h, |x, y| Luma([q(self.get(0, y as usize, x as usize))]));
            DynamicImage::ImageLuma8(buf)
        } else {
            let buf = ImageBuffer::from_fn(w, h, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([q(self.get(0, y, x)), q(self.get(1, y, x)), q(self.get(2, y, x))])
            });
            DynamicImage::ImageRgb8(buf)
        }
    }

    /// Decodes a raster into `shape`, resizing when the geometry differs and
    /// scaling samples to `[0, 1]`.
    pub fn from_dynamic(img: &DynamicImage, shape: ImageShape) -> Self {
        let (w, h) = (shape.width as u32, shape.height as u32);
        let sixteen = matches!(
            img,
            DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
                | DynamicImage::ImageRgb16(_)
                | DynamicImage::ImageRgba16(_)
        );
        let mut out = Image::zeros(shape.height, shape.width, shape.channels);
        match (shape.channels, sixteen) {
            (1, false) => {
                let mut buf = img.to_luma8();
                if buf.dimensions() != (w, h) {
                    buf = image::imageops::resize(&buf, w, h, FilterType::Triangle);
                }
                for (x, y, p) in buf.enumerate_pixels() {
                    out.set(0, y as usize, x as usize, p[0] as f64 / 255.0);
                }
            }
            (1, true) => {
                let mut buf = img.to_luma16();
                if buf.dimensions() != (w, h) {
                    buf = image::imageops::resize(&buf, w, h, FilterType::Triangle);
                }
                for (x, y, p) in buf.enumerate_pixels() {
                    out.set(0, y as usize, x as usize, p[0] as f64 / 65535.0);
                }
            }
            (_, false) => {
                let mut buf = img.to_rgb8();
                if buf.dimensions() != (w, h) {
                    buf = image::imageops::resize(&buf, w, h, FilterType::Triangle);
                }
                for (x, y, p) in buf.enumerate_pixels() {
                    for c in 0..3 {
                        out.set(c, y as usize, x as usize, p[c] as f64 / 255.0);
                    }
                }
            }
            (_, true) => {
                let mut buf = img.to_rgb16();
                if buf.dimensions() != (w, h) {
                    buf = image::imageops::resize(&buf, w, h, FilterType::Triangle);
                }
                for (x, y, p) in buf.enumerate_pixels() {
                    for c in 0..3 {
                        out.set(c, y as usize, x as usize, p[c] as f64 / 65535.0);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// View count, sub-group partition, geometry and class set of a multi-view task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiViewSchema {
    pub num_views: usize,
    pub subgroups: Vec<Vec<usize>>,
    pub image_shape: ImageShape,
    pub class_names: Vec<String>,
}

impl MultiViewSchema {
    pub fn new(
        num_views: usize,
        subgroups: Vec<Vec<usize>>,
        image_shape: ImageShape,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let schema = Self {
            num_views,
            subgroups,
            image_shape,
            class_names,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Five views split into {top, bottom} and {three profiles}, binary
    /// Normal/Defective labels.
    pub fn foam_default(height: usize, width: usize) -> Self {
        Self {
            num_views: 5,
            subgroups: vec![vec![0, 1], vec![2, 3, 4]],
            image_shape: ImageShape {
                height,
                width,
                channels: 1,
            },
            class_names: vec!["Normal".into(), "Defective".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MvError::InvalidSchema(m));
        if self.num_views == 0 {
            return bad("num_views must be at least 1".into());
        }
        if self.subgroups.is_empty() {
            return bad("at least one sub-group is required".into());
        }
        let mut seen = vec![false; self.num_views];
        for (g, group) in self.subgroups.iter().enumerate() {
            if group.is_empty() {
                return bad(format!("sub-group {g} is empty"));
            }
            for &v in group {
                if v >= self.num_views {
                    return bad(format!("sub-group {g} names view {v} >= num_views {}", self.num_views));
                }
                if seen[v] {
                    return bad(format!("view {v} appears in more than one sub-group"));
                }
                seen[v] = true;
            }
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return bad(format!("view {v} is not covered by any sub-group"));
        }
        if !matches!(self.image_shape.channels, 1 | 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.image_shape.channels));
        }
        if self.image_shape.height == 0 || self.image_shape.width == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.class_names.len() < 2 {
            return bad("at least two classes are required".into());
        }
        let unique: BTreeSet<_> = self.class_names.iter().collect();
        if unique.len() != self.class_names.len() {
            return bad("class names must be unique".into());
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Index of the class treated as positive for ROC analysis: "Defective"
    /// when present, otherwise the last class.
    pub fn positive_class(&self) -> usize {
        self.class_index("Defective").unwrap_or(self.class_names.len() - 1)
    }

    /// Sub-group index owning each view.
    pub fn group_of_view(&self) -> Vec<usize> {
        let mut owner = vec![0; self.num_views];
        for (g, group) in self.subgroups.iter().enumerate() {
            for &v in group {
                owner[v] = g;
            }
        }
        owner
    }
}

/// One labeled bundle of per-view images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub views: Vec<Image>,
    pub label: usize,
}

impl Sample {
    pub fn validate(&self, schema: &MultiViewSchema) -> Result<()> {
        let bad = |reason: String| {
            Err(MvError::InvalidSample {
                sample: self.sample_id.clone(),
                reason,
            })
        };
        if self.views.len() != schema.num_views {
            return bad(format!(
                "has {} views, schema expects {}",
                self.views.len(),
                schema.num_views
            ));
        }
        for (k, view) in self.views.iter().enumerate() {
            if view.shape() != schema.image_shape {
                return bad(format!(
                    "view {k} is {}, schema expects {}",
                    view.shape(),
                    schema.image_shape
                ));
            }
            if view.data.len() != view.plane_len() * view.channels {
                return bad(format!("view {k} has a malformed buffer"));
            }
            if view.data.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("view {k} has pixel values outside [0, 1]"));
            }
        }
        if self.label >= schema.num_classes() {
            return bad(format!("label {} out of range", self.label));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    Unsplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: MultiViewSchema,
    pub samples: Vec<Sample>,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn new(schema: MultiViewSchema, samples: Vec<Sample>, split_tag: SplitTag) -> Result<Self> {
        let ds = Self {
            schema,
            samples,
            split_tag,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            s.validate(&self.schema)?;
            if !ids.insert(s.sample_id.as_str()) {
                return Err(MvError::InvalidDataset(format!("duplicate sample_id {}", s.sample_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == id)
    }

    /// Keeps the samples whose ids are listed, preserving dataset order.
    pub fn subset(&self, ids: &BTreeSet<String>, split_tag: SplitTag) -> Self {
        Self {
            schema: self.schema.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| ids.contains(&s.sample_id))
                .cloned()
                .collect(),
            split_tag,
        }
    }

    /// Canonical little-endian byte serialization, used for hashing.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &self.samples {
            out.extend_from_slice(s.sample_id.as_bytes());
            out.push(0);
            out.extend_from_slice(&(s.label as u64).to_le_bytes());
            for v in &s.views {
                for p in &v.data {
                    out.extend_from_slice(&p.to_le_bytes());
                }
            }
        }
        out
    }
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    sample_id: String,
    label: String,
}

/// Reads `<root>/labels.csv` and `<root>/<sample_id>/view_<k>.png`.
pub fn load_dataset(root: &Path, schema: &MultiViewSchema) -> Result<Dataset> {
    schema.validate()?;
    let labels_path = root.join("labels.csv");
    let file = std::fs::File::open(&labels_path).map_err(io_err(&labels_path))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut rows: BTreeMap<String, String> = BTreeMap::new();
    for row in reader.deserialize() {
        let row: LabelRow = row?;
        if rows.insert(row.sample_id.clone(), row.label).is_some() {
            return Err(MvError::InvalidDataset(format!(
                "sample_id {} listed twice in {}",
                row.sample_id,
                labels_path.display()
            )));
        }
    }

    let mut samples = Vec::with_capacity(rows.len());
    for (sample_id, label_name) in rows {
        let label = schema.class_index(&label_name).ok_or_else(|| MvError::UnknownClass {
            sample: sample_id.clone(),
            label: label_name.clone(),
        })?;
        let dir = root.join(&sample_id);
        let mut views = Vec::with_capacity(schema.num_views);
        for k in 0..schema.num_views {
            let path = dir.join(format!("view_{k}.png"));
            if !path.is_file() {
                return Err(MvError::MissingView {
                    sample: sample_id.clone(),
                    view: k,
                });
            }
            let decoded = image::open(&path).map_err(|e| MvError::Decode {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            views.push(Image::from_dynamic(&decoded, schema.image_shape));
        }
        samples.push(Sample {
            sample_id,
            views,
            label,
        });
    }
    Dataset::new(schema.clone(), samples, SplitTag::Unsplit)
}

/// Writes the on-disk layout read by [`load_dataset`].
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root).map_err(io_err(root))?;
    let labels_path = root.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels_path)?;
    w.write_record(["sample_id", "label"])?;
    for s in &ds.samples {
        w.write_record([s.sample_id.as_str(), ds.schema.class_names[s.label].as_str()])?;
        let dir = root.join(&s.sample_id);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (k, v) in s.views.iter().enumerate() {
            v.to_dynamic().save(dir.join(format!("view_{k}.png")))?;
        }
    }
    w.flush().map_err(io_err(&labels_path))?;
    Ok(())
}

/// Stratified train/test split. Class quotas follow the largest-remainder
/// rule on `round(n * train_fraction)`, with every class keeping at least
/// one sample on each side.
pub fn split_dataset(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(MvError::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n_classes = ds.schema.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, s) in ds.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| !by_class[c].is_empty()).collect();
    if present.is_empty() {
        return Err(MvError::InvalidDataset("cannot split an empty dataset".into()));
    }
    for &c in &present {
        if by_class[c].len() < 2 {
            return Err(MvError::CannotStratify {
                class: ds.schema.class_names[c].clone(),
                count: by_class[c].len(),
            });
        }
    }

    let n = ds.len();
    let target = ((n as f64) * train_fraction).round() as usize;
    let mut quota: Vec<usize> = vec![0; n_classes];
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    for &c in &present {
        let exact = by_class[c].len() as f64 * train_fraction;
        quota[c] = exact.floor() as usize;
        remainders.push((exact - exact.floor(), c));
    }
    // largest remainder first, ties to the lower class index
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut assigned: usize = present.iter().map(|&c| quota[c]).sum();
    for &(_, c) in &remainders {
        if assigned >= target {
            break;
        }
        quota[c] += 1;
        assigned += 1;
    }
    for &c in &present {
        quota[c] = quota[c].clamp(1, by_class[c].len() - 1);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_ids = BTreeSet::new();
    let mut test_ids = BTreeSet::new();
    for &c in &present {
        let mut idx = by_class[c].clone();
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            let id = ds.samples[i].sample_id.clone();
            if j < quota[c] {
                train_ids.insert(id);
            } else {
                test_ids.insert(id);
            }
        }
    }
    Ok((
        ds.subset(&train_ids, SplitTag::Train),
        ds.subset(&test_ids, SplitTag::Test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(per_class: usize) -> Dataset {
        let schema = MultiViewSchema::new(
            2,
            vec![vec![0], vec![1]],
            ImageShape {
                height: 4,
                width: 4,
                channels: 1,
            },
            vec!["Normal".into(), "Defective".into()],
        )
        .unwrap();
        let mut samples = Vec::new();
        for label in 0..2 {
            for i in 0..per_class {
                samples.push(Sample {
                    sample_id: format!("s{label}_{i:03}"),
                    views: vec![Image::filled(4, 4, 1, 0.1 * i as f64 % 1.0); 2],
                    label,
                });
            }
        }
        Dataset::new(schema, samples, SplitTag::Unsplit).unwrap()
    }

    #[test]
    fn schema_rejects_overlap_and_gaps() {
        let shape = ImageShape {
            height: 8,
            width: 8,
            channels: 1,
        };
        let classes = vec!["a".to_string(), "b".to_string()];
        assert!(MultiViewSchema::new(3, vec![vec![0, 1], vec![1, 2]], shape, classes.clone()).is_err());
        assert!(MultiViewSchema::new(3, vec![vec![0, 1]], shape, classes.clone()).is_err());
        assert!(MultiViewSchema::new(3, vec![vec![0, 1], vec![]], shape, classes.clone()).is_err());
        assert!(MultiViewSchema::new(
            3,
            vec![vec![0, 1, 2]],
            ImageShape { channels: 2, ..shape },
            classes.clone()
        )
        .is_err());
        assert!(MultiViewSchema::new(3, vec![vec![0, 1, 2]], shape, vec!["a".into()]).is_err());
        assert!(MultiViewSchema::new(3, vec![vec![2], vec![0, 1]], shape, classes).is_ok());
        assert!(MultiViewSchema::foam_default(64, 64).validate().is_ok());
    }

    #[test]
    fn split_ten_samples_seven_three() {
        let ds = tiny_dataset(5);
        let (train, test) = split_dataset(&ds, 0.7, 1).unwrap();
        assert_eq!(train.len(), 7);
        assert_eq!(test.len(), 3);
        for part in [&train, &test] {
            let labels: BTreeSet<usize> = part.labels().into_iter().collect();
            assert_eq!(labels.len(), 2);
        }
        let (train2, _) = split_dataset(&ds, 0.7, 1).unwrap();
        let ids = |d: &Dataset| d.samples.iter().map(|s| s.sample_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&train), ids(&train2));
    }

    #[test]
    fn split_seeds_differ_on_hundred_samples() {
        let ds = tiny_dataset(50);
        let ids = |d: &Dataset| d.samples.iter().map(|s| s.sample_id.clone()).collect::<BTreeSet<_>>();
        let (a, _) = split_dataset(&ds, 0.7, 1).unwrap();
        let (b, _) = split_dataset(&ds, 0.7, 2).unwrap();
        assert_ne!(ids(&a), ids(&b));
    }

    #[test]
    fn split_rejects_singleton_class() {
        let mut ds = tiny_dataset(3);
        ds.samples.retain(|s| s.label == 0 || s.sample_id == "s1_000");
        assert!(matches!(
            split_dataset(&ds, 0.7, 0),
            Err(MvError::CannotStratify { .. })
        ));
        assert!(split_dataset(&tiny_dataset(3), 1.0, 0).is_err());
    }

    #[test]
    fn sample_validation_catches_range_and_count() {
        let ds = tiny_dataset(1);
        let mut s = ds.samples[0].clone();
        s.views[1].data[3] = 1.5;
        assert!(s.validate(&ds.schema).is_err());
        let mut s = ds.samples[0].clone();
        s.views.pop();
        assert!(s.validate(&ds.schema).is_err());
        let mut s = ds.samples[0].clone();
        s.label = 2;
        assert!(s.validate(&ds.schema).is_err());
    }
}
