//! Synthetic shortcut-bias datasets.
//!
//! Each image carries a faint class glyph (the true, class-determining
//! feature) inside a class-specific region, and one bright marker at the
//! border position owned by some class. In the train split the marker sits at
//! the label's own position with probability `p_spurious_train`; at test time
//! with probability `p_spurious_test`. Otherwise it sits at the position of a
//! uniformly chosen other class. Gaze trajectories drift from a random start
//! toward the glyph.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    write_gaze_csv, write_ppm, DatasetManifest, GazeTrajectory, ImageSample, SampleEntry, Split,
    MANIFEST_VERSION,
};
use crate::error::{config_err, Error, Result};

/// Glyph drawn for a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Plus,
    Ring,
    Cross,
    HBar,
    VBar,
    Disk,
    Corners,
}

impl Shape {
    const ALL: [Shape; 8] = [
        Shape::Square,
        Shape::Plus,
        Shape::Ring,
        Shape::Cross,
        Shape::HBar,
        Shape::VBar,
        Shape::Disk,
        Shape::Corners,
    ];

    fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Plus => "plus",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
            Shape::HBar => "hbar",
            Shape::VBar => "vbar",
            Shape::Disk => "disk",
            Shape::Corners => "corners",
        }
    }

    /// Whether offset `(dx, dy)` from the glyph's top-left corner is inked,
    /// for a glyph of side `s`.
    fn covers(self, dx: usize, dy: usize, s: usize) -> bool {
        let (x, y) = (dx as f64 + 0.5, dy as f64 + 0.5);
        let c = s as f64 / 2.0;
        let t = (s as f64 / 4.0).max(1.0);
        match self {
            Shape::Square => true,
            Shape::Plus => (x - c).abs() < t / 2.0 + 0.5 || (y - c).abs() < t / 2.0 + 0.5,
            Shape::Ring => x < t || y < t || x > s as f64 - t || y > s as f64 - t,
            Shape::Cross => (x - y).abs() < t || (x + y - s as f64).abs() < t,
            Shape::HBar => (y - c).abs() < t,
            Shape::VBar => (x - c).abs() < t,
            Shape::Disk => (x - c).powi(2) + (y - c).powi(2) <= c * c,
            Shape::Corners => (x < c) == (y < c),
        }
    }
}

/// Glyph appearance for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphSpec {
    pub shape: Shape,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Per-class glyphs; empty means the built-in palette.
    pub glyphs: Vec<GlyphSpec>,
    pub glyph_size: usize,
    /// Blend weight of the glyph color over the background.
    pub glyph_alpha: f64,
    pub marker_size: usize,
    pub marker_color: [f64; 3],
    pub p_spurious_train: f64,
    pub p_spurious_test: f64,
    /// Train:test ratio within every class.
    pub split: [usize; 2],
    pub gaze_len: usize,
    pub gaze_noise_sigma: f64,
    pub gaze_converge_rate: f64,
    pub background_level: f64,
    pub background_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            num_classes: 4,
            samples_per_class: 150,
            glyphs: Vec::new(),
            glyph_size: 10,
            glyph_alpha: 0.3,
            marker_size: 6,
            marker_color: [1.0, 1.0, 1.0],
            p_spurious_train: 0.95,
            p_spurious_test: 0.0,
            split: [5, 1],
            gaze_len: 176,
            // Desk-scale calibration: below ~6 px the flat MLP encoder reads the
            // target straight off the last fixations and overtakes the DSGE.
            gaze_noise_sigma: 8.0,
            gaze_converge_rate: 0.15,
            background_level: 0.5,
            background_noise_sigma: 0.1,
            seed: 0,
        }
    }
}

const PALETTE: [[f64; 3]; 4] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.2],
    [0.2, 0.3, 0.9],
    [0.9, 0.8, 0.1],
];

impl SynthConfig {
    pub fn glyph(&self, class: usize) -> GlyphSpec {
        self.glyphs.get(class).cloned().unwrap_or_else(|| GlyphSpec {
            shape: Shape::ALL[class % Shape::ALL.len()],
            color: PALETTE[(class / Shape::ALL.len() + class) % PALETTE.len()],
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|c| {
                let g = self.glyph(c);
                if self.num_classes > Shape::ALL.len() {
                    format!("{}{c}", g.shape.name())
                } else {
                    g.shape.name().to_string()
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        for (name, p) in [
            ("p_spurious_train", self.p_spurious_train),
            ("p_spurious_test", self.p_spurious_test),
            ("glyph_alpha", self.glyph_alpha),
            ("background_level", self.background_level),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err!("{name} = {p} must lie in [0, 1]"));
            }
        }
        if self.num_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.samples_per_class == 0 || self.gaze_len == 0 {
            return Err(config_err!("samples_per_class and gaze_len must be positive"));
        }
        if !(self.gaze_converge_rate > 0.0 && self.gaze_converge_rate <= 1.0) {
            return Err(config_err!(
                "gaze_converge_rate {} must lie in (0, 1]",
                self.gaze_converge_rate
            ));
        }
        if !(self.gaze_noise_sigma >= 0.0 && self.background_noise_sigma >= 0.0) {
            return Err(config_err!("noise levels must be non-negative"));
        }
        if self.split[0] == 0 {
            return Err(config_err!("split ratio needs a positive train part"));
        }
        if !self.glyphs.is_empty() && self.glyphs.len() != self.num_classes {
            return Err(config_err!(
                "{} glyphs given for {} classes",
                self.glyphs.len(),
                self.num_classes
            ));
        }
        if self.marker_size == 0 || self.glyph_size == 0 {
            return Err(config_err!("marker and glyph sizes must be positive"));
        }
        let (cols, rows) = self.region_grid();
        let inner = s.saturating_sub(2 * self.marker_size + 2);
        if inner / cols.max(rows) < self.glyph_size {
            return Err(config_err!(
                "{s}x{s} images are too small for {} class regions of {}-pixel glyphs",
                self.num_classes,
                self.glyph_size
            ));
        }
        if self.num_classes > self.marker_slots().len() {
            return Err(config_err!("not enough border room for {} markers", self.num_classes));
        }
        Ok(())
    }

    fn region_grid(&self) -> (usize, usize) {
        let cols = (self.num_classes as f64).sqrt().ceil() as usize;
        let rows = self.num_classes.div_ceil(cols);
        (cols, rows)
    }

    /// Glyph-center region `[x0, x1) × [y0, y1)` owned by `class`.
    pub fn glyph_region(&self, class: usize) -> [f64; 4] {
        let (cols, rows) = self.region_grid();
        let margin = (self.marker_size + 1) as f64;
        let inner = self.image_size as f64 - 2.0 * margin;
        let (cw, ch) = (inner / cols as f64, inner / rows as f64);
        let half = self.glyph_size as f64 / 2.0;
        let (cx, cy) = ((class % cols) as f64, (class / cols) as f64);
        [
            margin + cx * cw + half,
            margin + (cx + 1.0) * cw - half,
            margin + cy * ch + half,
            margin + (cy + 1.0) * ch - half,
        ]
    }

    /// Non-overlapping marker positions: the four corners, then border
    /// slots along the top, bottom, left and right edges.
    fn marker_slots(&self) -> Vec<[usize; 2]> {
        let m = self.marker_size;
        let far = self.image_size.saturating_sub(m);
        let mut slots = vec![[0, 0], [far, 0], [0, far], [far, far]];
        let inner: Vec<usize> = (1..).map(|k| k * (m + 1)).take_while(|&t| t + m < far).collect();
        for &t in &inner {
            slots.push([t, 0]);
            slots.push([t, far]);
        }
        for &t in &inner {
            slots.push([0, t]);
            slots.push([far, t]);
        }
        slots
    }

    /// Top-left corner of the marker owned by `class`.
    pub fn marker_origin(&self, class: usize) -> [usize; 2] {
        self.marker_slots()[class]
    }
}

/// One generated sample before it is written out.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: ImageSample,
    pub gaze: GazeTrajectory,
    pub label: usize,
    pub split: Split,
    /// Class whose marker position was used.
    pub marker_class: usize,
    pub glyph_center: [f64; 2],
}

/// Gaze that starts uniformly in the image and approaches `target`:
/// `p ← clamp(p + λ (target − p) + ε)`, `ε ~ N(0, σ² I)`.
pub fn synth_gaze<R: Rng + ?Sized>(
    target: [f64; 2],
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<GazeTrajectory> {
    let s = cfg.image_size as f64;
    if !(0.0..=s).contains(&target[0]) || !(0.0..=s).contains(&target[1]) {
        return Err(config_err!("gaze target {target:?} lies outside the {s}x{s} image"));
    }
    let noise = Normal::new(0.0, cfg.gaze_noise_sigma)
        .map_err(|e| config_err!("gaze noise: {e}"))?;
    let lambda = cfg.gaze_converge_rate;
    let mut p = [rng.random_range(0.0..=s), rng.random_range(0.0..=s)];
    let mut points = Vec::with_capacity(cfg.gaze_len);
    points.push(p);
    for _ in 1..cfg.gaze_len {
        for a in 0..2 {
            let eps = if cfg.gaze_noise_sigma > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            p[a] = (p[a] + lambda * (target[a] - p[a]) + eps).clamp(0.0, s);
        }
        points.push(p);
    }
    GazeTrajectory::new(points, [s, s])
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Test/train tag for every sample, stratified per class.
fn assign_splits(cfg: &SynthConfig) -> Vec<Split> {
    let [train, test] = cfg.split;
    let n = cfg.samples_per_class;
    let n_test = ((n * test) as f64 / (train + test) as f64).round() as usize;
    let mut rng = sample_rng(cfg.seed, u64::MAX);
    let mut out = Vec::with_capacity(n * cfg.num_classes);
    for _ in 0..cfg.num_classes {
        let mut tags: Vec<Split> = (0..n)
            .map(|k| if k < n_test { Split::Test } else { Split::Train })
            .collect();
        tags.shuffle(&mut rng);
        out.extend(tags);
    }
    out
}

fn render_sample(cfg: &SynthConfig, index: usize, label: usize, split: Split) -> Result<SynthSample> {
    let mut rng = sample_rng(cfg.seed, index as u64);
    let s = cfg.image_size;
    let bg = Normal::new(0.0, cfg.background_noise_sigma)
        .map_err(|e| config_err!("background noise: {e}"))?;
    let level = cfg.background_level;
    let mut px: Vec<f64> = (0..s * s * 3)
        .map(|_| {
            let n = if cfg.background_noise_sigma > 0.0 {
                bg.sample(&mut rng)
            } else {
                0.0
            };
            (level + n).clamp(0.0, 1.0)
        })
        .collect();

    let [x0, x1, y0, y1] = cfg.glyph_region(label);
    let center = [rng.random_range(x0..=x1), rng.random_range(y0..=y1)];
    let glyph = cfg.glyph(label);
    let g = cfg.glyph_size;
    let left = (center[0] - g as f64 / 2.0).round() as usize;
    let top = (center[1] - g as f64 / 2.0).round() as usize;
    for dy in 0..g {
        for dx in 0..g {
            if glyph.shape.covers(dx, dy, g) {
                let at = ((top + dy) * s + left + dx) * 3;
                for c in 0..3 {
                    let v = &mut px[at + c];
                    *v += cfg.glyph_alpha * (glyph.color[c] - *v);
                }
            }
        }
    }

    let p = match split {
        Split::Train => cfg.p_spurious_train,
        Split::Test => cfg.p_spurious_test,
    };
    let marker_class = if rng.random_bool(p) {
        label
    } else {
        let other = rng.random_range(0..cfg.num_classes - 1);
        if other >= label {
            other + 1
        } else {
            other
        }
    };
    let [mx, my] = cfg.marker_origin(marker_class);
    for y in my..my + cfg.marker_size {
        for x in mx..mx + cfg.marker_size {
            px[(y * s + x) * 3..][..3].copy_from_slice(&cfg.marker_color);
        }
    }

    let gaze = synth_gaze(center, cfg, &mut rng)?;
    Ok(SynthSample {
        image: ImageSample::new(s, s, px)?,
        gaze,
        label,
        split,
        marker_class,
        glyph_center: center,
    })
}

/// Generates every sample in memory, ordered by class then index. Each
/// sample draws from its own stream of the seed, so the result does not
/// depend on thread count.
pub fn generate_samples(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let splits = assign_splits(cfg);
    let n = cfg.samples_per_class;
    (0..n * cfg.num_classes)
        .into_par_iter()
        .map(|i| render_sample(cfg, i, i / n, splits[i]))
        .collect()
}

/// Writes a dataset under `out_dir`: `images/*.ppm`, `gaze/*.csv`, and
/// `manifest.json` with split tags.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out = out_dir.as_ref();
    let samples = generate_samples(cfg)?;
    for sub in ["images", "gaze"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let width = (samples.len().max(1) - 1).to_string().len().max(4);
    let entries = samples
        .par_iter()
        .enumerate()
        .map(|(i, smp)| {
            let image = format!("images/{i:0width$}.ppm");
            let gaze = format!("gaze/{i:0width$}.csv");
            write_ppm(out.join(&image), &smp.image)?;
            write_gaze_csv(out.join(&gaze), &smp.gaze)?;
            Ok(SampleEntry {
                image,
                gaze,
                label: smp.label,
                split: Some(smp.split),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let s = cfg.image_size;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        classes: cfg.class_names(),
        image_extent: [s, s],
        gaze_extent: [s as f64, s as f64],
        samples: entries,
        root: out.to_path_buf(),
    };
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}
