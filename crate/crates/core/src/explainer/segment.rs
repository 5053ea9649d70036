//! Grid-seeded superpixels with boundary snapping (a small SLIC variant).

use serde::{Deserialize, Serialize};

use crate::error::{MvError, Result};
use crate::mvcore::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentParams {
    /// Requested number of segments; the result may hold fewer if a seed
    /// cell loses all its pixels during snapping.
    pub num_segments: usize,
    /// Intensity difference that costs as much as one grid step of distance.
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            num_segments: 40,
            compactness: 0.2,
            iterations: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMask {
    pub height: usize,
    pub width: usize,
    /// Row-major segment id per pixel, ids `0..num_segments`.
    pub labels: Vec<usize>,
    pub num_segments: usize,
}

impl SegmentMask {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_segments];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    /// Broadcasts per-segment values to pixels.
    pub fn broadcast(&self, per_segment: &[f64]) -> Vec<f64> {
        self.labels.iter().map(|&l| per_segment[l]).collect()
    }
}

/// Exactly `s` rectangular cells: `rows` bands, each split into near-equal columns.
fn grid_cells(h: usize, w: usize, s: usize) -> Vec<usize> {
    let rows = ((s as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, s.min(h));
    let mut labels = vec![0; h * w];
    let mut next = 0;
    for r in 0..rows {
        let cols = (s / rows + usize::from(r < s % rows)).min(w);
        let (y0, y1) = (r * h / rows, (r + 1) * h / rows);
        for c in 0..cols {
            let (x0, x1) = (c * w / cols, (c + 1) * w / cols);
            for y in y0..y1 {
                for x in x0..x1 {
                    labels[y * w + x] = next + c;
                }
            }
        }
        next += cols;
    }
    labels
}

pub fn segment(image: &Image, params: &SegmentParams) -> Result<SegmentMask> {
    let (h, w, ch) = (image.height, image.width, image.channels);
    if params.num_segments == 0 || params.num_segments > h * w {
        return Err(MvError::InvalidArgument(format!(
            "num_segments must lie in 1..={}, got {}",
            h * w,
            params.num_segments
        )));
    }
    if !(params.compactness > 0.0) {
        return Err(MvError::InvalidArgument("compactness must be positive".into()));
    }
    let mut labels = grid_cells(h, w, params.num_segments);
    let step = ((h * w) as f64 / params.num_segments as f64).sqrt();
    let pixel = |i: usize| -> Vec<f64> { (0..ch).map(|c| image.data[c * h * w + i]).collect() };

    for _ in 0..params.iterations {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        // centroid position and mean colour per segment
        let mut acc = vec![(0.0, 0.0, vec![0.0; ch], 0usize); k];
        for (i, &l) in labels.iter().enumerate() {
            let a = &mut acc[l];
            a.0 += (i / w) as f64 + 0.5;
            a.1 += (i % w) as f64 + 0.5;
            for (c, v) in pixel(i).into_iter().enumerate() {
                a.2[c] += v;
            }
            a.3 += 1;
        }
        let centers: Vec<Option<(f64, f64, Vec<f64>)>> = acc
            .into_iter()
            .map(|(y, x, col, n)| {
                (n > 0).then(|| {
                    let n = n as f64;
                    (y / n, x / n, col.into_iter().map(|c| c / n).collect())
                })
            })
            .collect();
        let mut changed = false;
        for i in 0..h * w {
            let (py, px) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            let col = pixel(i);
            let mut best = (f64::INFINITY, labels[i]);
            for (l, c) in centers.iter().enumerate() {
                let Some((cy, cx, cc)) = c else { continue };
                let ds2 = (py - cy).powi(2) + (px - cx).powi(2);
                if ds2 > 4.0 * step * step {
                    continue;
                }
                let dc2: f64 = col.iter().zip(cc).map(|(a, b)| (a - b).powi(2)).sum();
                let d = dc2 / (params.compactness * params.compactness) + ds2 / (step * step);
                if d < best.0 {
                    best = (d, l);
                }
            }
            changed |= best.1 != labels[i];
            labels[i] = best.1;
        }
        if !changed {
            break;
        }
    }

    // compact ids in order of first appearance
    let mut remap = vec![usize::MAX; labels.iter().max().map_or(0, |m| m + 1)];
    let mut next = 0;
    for l in labels.iter_mut() {
        if remap[*l] == usize::MAX {
            remap[*l] = next;
            next += 1;
        }
        *l = remap[*l];
    }
    Ok(SegmentMask {
        height: h,
        width: w,
        labels,
        num_segments: next,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_image_gives_square_blocks() {
        let img = Image::filled(64, 64, 1, 0.5);
        let m = segment(
            &img,
            &SegmentParams {
                num_segments: 16,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(m.num_segments, 16);
        for y in 0..64 {
            for x in 0..64 {
                let block = m.labels[(y / 16) * 16 * 64 + (x / 16) * 16];
                assert_eq!(m.labels[y * 64 + x], block);
            }
        }
        assert!(m.sizes().iter().all(|&s| s == 256));
    }

    #[test]
    fn partition_and_determinism() {
        let mut img = Image::filled(32, 48, 1, 0.2);
        for y in 10..20 {
            for x in 5..30 {
                img.set(0, y, x, 0.9);
            }
        }
        for s in [1, 7, 13, 40] {
            let p = SegmentParams {
                num_segments: s,
                ..Default::default()
            };
            let a = segment(&img, &p).unwrap();
            assert_eq!(a, segment(&img, &p).unwrap());
            assert!(a.num_segments <= s && a.num_segments >= 1);
            assert!(a.sizes().iter().all(|&n| n > 0));
            assert_eq!(a.labels.len(), 32 * 48);
        }
    }

    #[test]
    fn grid_has_exact_count() {
        for s in 1..=50 {
            let l = grid_cells(64, 64, s);
            let mut seen = vec![false; s];
            for &x in &l {
                seen[x] = true;
            }
            assert!(seen.iter().all(|&b| b), "S={s}");
        }
    }

    #[test]
    fn snapping_follows_a_sharp_edge() {
        // vertical edge off the grid lines; segments should not straddle it
        let mut img = Image::filled(32, 32, 1, 0.1);
        for y in 0..32 {
            for x in 13..32 {
                img.set(0, y, x, 0.9);
            }
        }
        let m = segment(
            &img,
            &SegmentParams {
                num_segments: 16,
                ..Default::default()
            },
        )
        .unwrap();
        let mut dark = vec![false; m.num_segments];
        let mut bright = vec![false; m.num_segments];
        for (i, &l) in m.labels.iter().enumerate() {
            if i % 32 < 13 {
                dark[l] = true;
            } else {
                bright[l] = true;
            }
        }
        assert!(dark.iter().zip(&bright).all(|(a, b)| !(a & b)));
    }
}
