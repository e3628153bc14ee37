//! Synthetic single-channel scenes with polyp-like blobs and artifact
//! primitives.
//!
//! Primitives per class:
//!
//! | class       | primitive |
//! |-------------|-----------|
//! | polyp       | shaded filled disk |
//! | bubbles     | thin ring |
//! | specularity | small saturated square |
//! | blur        | locally box-filtered patch |
//! | saturation  | flat clipped-intensity patch |
//! | contrast    | dark low-variance patch |
//! | misc        | flat mid-gray rectangle |
//!
//! Rings and disks share a silhouette, so bubbles are the natural polyp
//! confounder; every other class differs in texture or intensity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ToyError;
use crate::datamodel::{ArtifactClass, Dataset, Detection, FrameRecord};
use crate::geometry::{contains, BBox, ImageSize};

const BACKGROUND: f64 = 0.35;

/// Generation knobs. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneKnobs {
    /// Grid side length in pixels.
    pub size: usize,
    pub polyps: (usize, usize),
    /// Total artifact primitives per scene.
    pub artifacts: (usize, usize),
    /// Classes artifacts are drawn from.
    pub classes: Vec<ArtifactClass>,
    /// Polyp radius range in pixels.
    pub polyp_radius: (f64, f64),
    /// Artifact side length range in pixels.
    pub artifact_size: (f64, f64),
    /// Amplitude of the uniform background texture.
    pub noise: f64,
    /// Probability that an artifact is placed fully inside a polyp.
    pub inside_polyp_rate: f64,
    /// Probability that an artifact is placed over a polyp (IoU > 0.5).
    pub overlap_polyp_rate: f64,
    /// Snap object centers to the centers of cells of this stride and draw
    /// sizes from `snap_sizes`; objects never overlap.
    pub snap_stride: Option<usize>,
    pub snap_sizes: Vec<f64>,
}

impl Default for SceneKnobs {
    fn default() -> Self {
        Self {
            size: 64,
            polyps: (0, 2),
            artifacts: (1, 4),
            classes: ArtifactClass::ANALYSIS.to_vec(),
            polyp_radius: (5.0, 12.0),
            artifact_size: (4.0, 20.0),
            noise: 0.15,
            inside_polyp_rate: 0.0,
            overlap_polyp_rate: 0.0,
            snap_stride: None,
            snap_sizes: Vec::new(),
        }
    }
}

impl SceneKnobs {
    /// Grid-aligned, non-overlapping objects whose sizes match the toy
    /// detector's anchors, so every object has an exactly matching anchor.
    pub fn separable() -> Self {
        Self {
            size: 64,
            polyps: (1, 2),
            artifacts: (1, 3),
            classes: ArtifactClass::ANALYSIS.to_vec(),
            polyp_radius: (8.0, 8.0),
            artifact_size: (16.0, 16.0),
            noise: 0.1,
            inside_polyp_rate: 0.0,
            overlap_polyp_rate: 0.0,
            snap_stride: Some(8),
            snap_sizes: vec![16.0],
        }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let err = |m: String| Err(ToyError::Config(m));
        let size = self.size as f64;
        if self.size < 8 {
            return err(format!("grid size {} is below 8", self.size));
        }
        if self.polyps.0 > self.polyps.1 || self.artifacts.0 > self.artifacts.1 {
            return err("count ranges must satisfy min <= max".into());
        }
        let (r0, r1) = self.polyp_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return err(format!("invalid polyp radius range {r0}..{r1}"));
        }
        if self.polyps.1 > 0 && 2.0 * r1 > size {
            return err(format!("polyp diameter {} exceeds grid {}", 2.0 * r1, size));
        }
        let (s0, s1) = self.artifact_size;
        if !(s0 >= 2.0 && s0 <= s1) {
            return err(format!("invalid artifact size range {s0}..{s1}"));
        }
        if self.artifacts.1 > 0 && s1 > size {
            return err(format!("artifact size {s1} exceeds grid {size}"));
        }
        if self.artifacts.1 > 0 && self.classes.is_empty() {
            return err("artifacts requested but no classes given".into());
        }
        if self.classes.contains(&ArtifactClass::Instrument) {
            return err("instrument artifacts cannot be synthesized".into());
        }
        for (name, r) in [
            ("inside_polyp_rate", self.inside_polyp_rate),
            ("overlap_polyp_rate", self.overlap_polyp_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return err(format!("{name} {r} outside [0, 1]"));
            }
        }
        if self.inside_polyp_rate + self.overlap_polyp_rate > 1.0 {
            return err("inside and overlap rates sum above 1".into());
        }
        let placed_on_polyp = self.inside_polyp_rate > 0.0 || self.overlap_polyp_rate > 0.0;
        if placed_on_polyp && self.artifacts.1 > 0 && self.polyps.0 == 0 {
            return err("artifacts placed on polyps need at least one polyp per scene".into());
        }
        if self.inside_polyp_rate > 0.0 && 2.0 * r0 < 4.0 {
            return err("polyps too small to hold an artifact".into());
        }
        if placed_on_polyp && self.snap_stride.is_some() {
            return err("snapped scenes cannot place artifacts on polyps".into());
        }
        if let Some(stride) = self.snap_stride {
            if stride == 0 || !self.size.is_multiple_of(stride) {
                return err(format!("snap stride {stride} must divide grid size {}", self.size));
            }
            if self.snap_sizes.is_empty() || self.snap_sizes.iter().any(|s| *s <= 0.0 || *s > size) {
                return err("snap sizes must be positive and fit the grid".into());
            }
        }
        Ok(())
    }
}

/// A generated scene: pixel grid plus ground-truth boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub size: usize,
    /// Row-major intensities in [0, 1].
    pub grid: Vec<f64>,
    pub gt_polyps: Vec<BBox>,
    pub gt_artifacts: Vec<(BBox, ArtifactClass)>,
}

impl SyntheticScene {
    pub fn image_size(&self) -> ImageSize {
        ImageSize::new(self.size as u32, self.size as u32).expect("scene size is positive")
    }

    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.size + col]
    }

    /// Ground truth as a frame record; artifacts carry score 1.
    pub fn to_frame(&self, frame_id: impl Into<String>) -> FrameRecord {
        let mut f = FrameRecord::new(frame_id, self.image_size());
        f.gt_polyps = self.gt_polyps.clone();
        f.artifacts = self
            .gt_artifacts
            .iter()
            .map(|(b, c)| Detection::artifact(*b, 1.0, *c).expect("score 1 is valid"))
            .collect();
        f
    }
}

/// Frame id used for the `index`-th scene of an exported set.
pub fn scene_frame_id(index: usize) -> String {
    format!("scene-{index:04}")
}

pub fn scenes_to_dataset(name: &str, scenes: &[SyntheticScene]) -> Dataset {
    let frames = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| s.to_frame(scene_frame_id(i)))
        .collect();
    Dataset::new(name, frames).expect("scene frame ids are unique")
}

pub fn generate_scene(seed: u64, knobs: &SceneKnobs) -> Result<SyntheticScene, ToyError> {
    knobs.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = knobs.size;
    let size = n as f64;
    let mut grid: Vec<f64> = (0..n * n)
        .map(|_| BACKGROUND + knobs.noise * (rng.random::<f64>() - 0.5) * 2.0)
        .collect();

    let mut occupied: Vec<BBox> = Vec::new();
    let snap = knobs.snap_stride;

    let n_polyps = rng.random_range(knobs.polyps.0..=knobs.polyps.1);
    let mut polyps = Vec::with_capacity(n_polyps);
    for _ in 0..n_polyps {
        let placed = match snap {
            Some(stride) => {
                let side = knobs.snap_sizes[rng.random_range(0..knobs.snap_sizes.len())];
                place_snapped(&mut rng, n, stride, side, &occupied)
            }
            None => {
                let r = sample_range(&mut rng, knobs.polyp_radius);
                place_free(&mut rng, size, 2.0 * r, 2.0 * r, &occupied)
            }
        };
        if let Some(b) = placed {
            occupied.push(b);
            polyps.push(b);
        }
    }

    let n_art = rng.random_range(knobs.artifacts.0..=knobs.artifacts.1);
    let mut artifacts = Vec::with_capacity(n_art);
    for _ in 0..n_art {
        let class = knobs.classes[rng.random_range(0..knobs.classes.len())];
        let roll: f64 = rng.random();
        let placed = if snap.is_none() && !polyps.is_empty() && roll < knobs.inside_polyp_rate {
            let host = polyps[rng.random_range(0..polyps.len())];
            place_inside(&mut rng, &host, knobs.artifact_size)
        } else if snap.is_none()
            && !polyps.is_empty()
            && roll < knobs.inside_polyp_rate + knobs.overlap_polyp_rate
        {
            let host = polyps[rng.random_range(0..polyps.len())];
            place_over(&mut rng, &host, size)
        } else {
            match snap {
                Some(stride) => {
                    let side = knobs.snap_sizes[rng.random_range(0..knobs.snap_sizes.len())];
                    place_snapped(&mut rng, n, stride, side, &occupied)
                }
                None => {
                    let w = sample_range(&mut rng, knobs.artifact_size);
                    let h = if matches!(class, ArtifactClass::Bubbles | ArtifactClass::Specularity) {
                        w
                    } else {
                        sample_range(&mut rng, knobs.artifact_size)
                    };
                    place_free(&mut rng, size, w, h, &[])
                }
            }
        };
        if let Some(b) = placed {
            if snap.is_some() {
                occupied.push(b);
            }
            artifacts.push((b, class));
        }
    }

    // region effects first, then drawn primitives on top
    let region = |c: ArtifactClass| {
        matches!(
            c,
            ArtifactClass::Blur | ArtifactClass::Contrast | ArtifactClass::Saturation
        )
    };
    for (b, c) in artifacts.iter().filter(|(_, c)| region(*c)) {
        render_artifact(&mut grid, n, b, *c);
    }
    for (b, c) in artifacts
        .iter()
        .filter(|(_, c)| *c == ArtifactClass::Misc)
    {
        render_artifact(&mut grid, n, b, *c);
    }
    for b in &polyps {
        render_disk(&mut grid, n, b);
    }
    for (b, c) in artifacts
        .iter()
        .filter(|(_, c)| matches!(c, ArtifactClass::Bubbles | ArtifactClass::Specularity))
    {
        render_artifact(&mut grid, n, b, *c);
    }

    for v in &mut grid {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(SyntheticScene {
        seed,
        size: n,
        grid,
        gt_polyps: polyps,
        gt_artifacts: artifacts,
    })
}

/// A set of scenes with consecutive seeds starting at `seed`.
pub fn generate_scenes(
    seed: u64,
    count: usize,
    knobs: &SceneKnobs,
) -> Result<Vec<SyntheticScene>, ToyError> {
    (0..count as u64)
        .map(|i| generate_scene(seed.wrapping_add(i), knobs))
        .collect()
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn overlaps_any(b: &BBox, others: &[BBox]) -> bool {
    others.iter().any(|o| b.intersection_area(o) > 0.0)
}

fn place_free(rng: &mut ChaCha8Rng, size: f64, w: f64, h: f64, avoid: &[BBox]) -> Option<BBox> {
    for _ in 0..64 {
        let x0 = rng.random_range(0.0..=(size - w));
        let y0 = rng.random_range(0.0..=(size - h));
        let b = BBox::new(x0, y0, x0 + w, y0 + h).ok()?;
        if !overlaps_any(&b, avoid) {
            return Some(b);
        }
    }
    None
}

fn place_snapped(
    rng: &mut ChaCha8Rng,
    size: usize,
    stride: usize,
    side: f64,
    avoid: &[BBox],
) -> Option<BBox> {
    let cells = size / stride;
    let half = side / 2.0;
    let candidates: Vec<(f64, f64)> = (0..cells)
        .flat_map(|i| (0..cells).map(move |j| (i, j)))
        .map(|(i, j)| {
            (
                (j as f64 + 0.5) * stride as f64,
                (i as f64 + 0.5) * stride as f64,
            )
        })
        .filter(|(cx, cy)| {
            cx - half >= 0.0 && cy - half >= 0.0 && cx + half <= size as f64 && cy + half <= size as f64
        })
        .collect();
    if candidates.is_empty() {
        return None;
    }
    for _ in 0..64 {
        let (cx, cy) = candidates[rng.random_range(0..candidates.len())];
        let b = BBox::from_center(cx, cy, side, side).ok()?;
        if !overlaps_any(&b, avoid) {
            return Some(b);
        }
    }
    None
}

fn place_inside(rng: &mut ChaCha8Rng, host: &BBox, (lo, hi): (f64, f64)) -> Option<BBox> {
    let limit = (host.width().min(host.height()) / 2.0).max(1.0);
    let side = sample_range(rng, (lo.min(limit), hi.min(limit)));
    let x0 = host.x_min() + rng.random_range(0.0..=(host.width() - side));
    let y0 = host.y_min() + rng.random_range(0.0..=(host.height() - side));
    let b = BBox::new(x0, y0, x0 + side, y0 + side).ok()?;
    debug_assert!(contains(host, &b));
    Some(b)
}

fn place_over(rng: &mut ChaCha8Rng, host: &BBox, size: f64) -> Option<BBox> {
    let (cx, cy) = host.center();
    let scale = rng.random_range(0.8..=1.2);
    let w = host.width() * scale;
    let h = host.height() * scale;
    let b = BBox::from_center(cx, cy, w, h).ok()?;
    if b.x_min() >= 0.0 && b.y_min() >= 0.0 && b.x_max() <= size && b.y_max() <= size {
        Some(b)
    } else {
        Some(*host)
    }
}

/// Pixel ranges whose centers fall inside `b`.
fn pixel_span(b: &BBox, n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let lo = |v: f64| ((v - 0.5).ceil().max(0.0) as usize).min(n);
    let hi = |v: f64| (((v - 0.5).floor() + 1.0).max(0.0) as usize).min(n);
    (lo(b.y_min())..hi(b.y_max()), lo(b.x_min())..hi(b.x_max()))
}

fn render_disk(grid: &mut [f64], n: usize, b: &BBox) {
    let (cx, cy) = b.center();
    let r = b.width().min(b.height()) / 2.0;
    let (rows, cols) = pixel_span(b, n);
    for i in rows {
        for j in cols.clone() {
            let d = ((j as f64 + 0.5 - cx).powi(2) + (i as f64 + 0.5 - cy).powi(2)).sqrt();
            if d <= r {
                grid[i * n + j] = 0.7 + 0.15 * (1.0 - d / r);
            }
        }
    }
}

fn render_artifact(grid: &mut [f64], n: usize, b: &BBox, class: ArtifactClass) {
    let (rows, cols) = pixel_span(b, n);
    match class {
        ArtifactClass::Bubbles => {
            let (cx, cy) = b.center();
            let r = b.width().min(b.height()) / 2.0;
            let ring = (r * 0.8).max(1.0);
            for i in rows {
                for j in cols.clone() {
                    let d = ((j as f64 + 0.5 - cx).powi(2) + (i as f64 + 0.5 - cy).powi(2)).sqrt();
                    if (d - ring).abs() <= 1.2 && d <= r {
                        grid[i * n + j] = 0.75;
                    }
                }
            }
        }
        ArtifactClass::Specularity => {
            for i in rows {
                for j in cols.clone() {
                    grid[i * n + j] = 1.0;
                }
            }
        }
        ArtifactClass::Blur => {
            let src = grid.to_vec();
            for i in rows {
                for j in cols.clone() {
                    let (mut s, mut c) = (0.0, 0.0);
                    for di in -2i64..=2 {
                        for dj in -2i64..=2 {
                            let (y, x) = (i as i64 + di, j as i64 + dj);
                            if y >= 0 && x >= 0 && (y as usize) < n && (x as usize) < n {
                                s += src[y as usize * n + x as usize];
                                c += 1.0;
                            }
                        }
                    }
                    grid[i * n + j] = s / c;
                }
            }
        }
        ArtifactClass::Contrast => {
            for i in rows {
                for j in cols.clone() {
                    let v = &mut grid[i * n + j];
                    *v = 0.12 + 0.2 * (*v - BACKGROUND);
                }
            }
        }
        ArtifactClass::Saturation => {
            for i in rows {
                for j in cols.clone() {
                    let v = &mut grid[i * n + j];
                    *v = (0.5 + 2.0 * *v).min(0.92);
                }
            }
        }
        ArtifactClass::Misc => {
            for i in rows {
                for j in cols.clone() {
                    grid[i * n + j] = 0.55;
                }
            }
        }
        ArtifactClass::Instrument => {}
    }
}
