//! Desk-scale data: a procedural deformable-sprite dataset with exact
//! ground-truth landmarks, a factor grid for invariance analysis, and
//! generic ingestion of image folders and frame-sequence folders.

use crate::error::{Error, Result};
use crate::imgio;
use crate::scalar::Scalar;
use crate::tensor::{norm_coord, Point, Tensor};
use crate::trainer::PairSource;
use crate::warp::{make_pair, make_video_pair, mix_seed, DiscountMask, WarpConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundMode {
    Solid,
    Gradient,
    TexturedNoise,
}

/// Procedural sprite generator settings. A sprite is a soft-edged body blob
/// with `n_parts` articulated colored parts; the landmarks are the exact
/// part centers used by the renderer.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpriteConfig {
    pub image_size: usize,
    pub n_parts: usize,
    /// Body ellipse radius range, normalized units.
    pub body_radius: (f64, f64),
    /// Part disc radius range.
    pub part_radius: (f64, f64),
    /// Radial distance range of part centers from the body center.
    pub part_dist: (f64, f64),
    /// Articulation: per-sample angular jitter of each part, radians.
    pub angle_amplitude: f64,
    /// Articulation: per-sample radial jitter, normalized units.
    pub dist_amplitude: f64,
    /// Articulation: global sprite offset amplitude, normalized units.
    pub offset_amplitude: f64,
    /// Per-sample jitter added to the base part colors.
    pub color_jitter: f64,
    pub background: BackgroundMode,
    pub seed: u64,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        SpriteConfig {
            image_size: 64,
            n_parts: 5,
            body_radius: (0.42, 0.55),
            part_radius: (0.07, 0.11),
            part_dist: (0.32, 0.48),
            angle_amplitude: 0.35,
            dist_amplitude: 0.06,
            offset_amplitude: 0.06,
            color_jitter: 0.08,
            background: BackgroundMode::Gradient,
            seed: 0,
        }
    }
}

impl SpriteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::invalid_config("sprite image_size must be >= 16"));
        }
        if self.n_parts < 1 {
            return Err(Error::invalid_config("sprite needs at least one part"));
        }
        let reach =
            self.part_dist.1 + self.dist_amplitude + self.part_radius.1 + self.offset_amplitude;
        if reach > 0.98 {
            return Err(Error::invalid_config(format!(
                "sprite parts can leave the frame: dist+jitter+radius+offset = {reach:.3} > 0.98"
            )));
        }
        for (lo, hi) in [self.body_radius, self.part_radius, self.part_dist] {
            if lo <= 0.0 || hi < lo {
                return Err(Error::invalid_config("sprite ranges must satisfy 0 < lo <= hi"));
            }
        }
        Ok(())
    }
}

/// Identity of one sprite: geometry ranges fixed at sampling time.
#[derive(Clone, Debug)]
pub struct SpriteShape {
    pub body_rx: f64,
    pub body_ry: f64,
    pub body_color: [f64; 3],
    pub part_angle: Vec<f64>,
    pub part_dist: Vec<f64>,
    pub part_radius: Vec<f64>,
    pub part_color: Vec<[f64; 3]>,
    pub bg_params: [f64; 6],
}

/// One articulation state.
#[derive(Clone, Debug)]
pub struct SpritePose {
    pub d_angle: Vec<f64>,
    pub d_dist: Vec<f64>,
    pub offset: (f64, f64),
    pub color_jitter: Vec<[f64; 3]>,
}

/// Global photometric state.
#[derive(Clone, Copy, Debug)]
pub struct SpriteIllum {
    pub gain: f64,
    pub offset: f64,
}

impl SpriteIllum {
    pub const NEUTRAL: SpriteIllum = SpriteIllum {
        gain: 1.0,
        offset: 0.0,
    };
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

impl SpriteShape {
    pub fn sample(cfg: &SpriteConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 11));
        let n = cfg.n_parts;
        let body_rx = uniform(&mut rng, cfg.body_radius.0, cfg.body_radius.1);
        let body_ry = uniform(&mut rng, cfg.body_radius.0, cfg.body_radius.1);
        let body_color = [
            uniform(&mut rng, 0.15, 0.45),
            uniform(&mut rng, 0.15, 0.45),
            uniform(&mut rng, 0.15, 0.45),
        ];
        let mut part_angle = Vec::with_capacity(n);
        let mut part_dist = Vec::with_capacity(n);
        let mut part_radius = Vec::with_capacity(n);
        let mut part_color = Vec::with_capacity(n);
        for i in 0..n {
            let base = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            part_angle.push(base + uniform(&mut rng, -0.2, 0.2));
            part_dist.push(uniform(&mut rng, cfg.part_dist.0, cfg.part_dist.1));
            part_radius.push(uniform(&mut rng, cfg.part_radius.0, cfg.part_radius.1));
            // bright, saturated, distinct-ish part colors
            let hue = (i as f64 / n as f64 + uniform(&mut rng, -0.06, 0.06)).rem_euclid(1.0);
            part_color.push(hsv_to_rgb(hue, 0.85, uniform(&mut rng, 0.8, 1.0)));
        }
        let bg_params = [
            uniform(&mut rng, 0.0, 1.0),
            uniform(&mut rng, 0.0, 1.0),
            uniform(&mut rng, 0.0, 1.0),
            uniform(&mut rng, 0.0, 1.0),
            uniform(&mut rng, 0.0, std::f64::consts::TAU),
            uniform(&mut rng, 1.0, 3.0),
        ];
        SpriteShape {
            body_rx,
            body_ry,
            body_color,
            part_angle,
            part_dist,
            part_radius,
            part_color,
            bg_params,
        }
    }
}

impl SpritePose {
    pub fn sample(cfg: &SpriteConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 12));
        let n = cfg.n_parts;
        let a = cfg.angle_amplitude;
        let d = cfg.dist_amplitude;
        let d_angle = (0..n).map(|_| uniform(&mut rng, -a, a)).collect();
        let d_dist = (0..n).map(|_| uniform(&mut rng, -d, d)).collect();
        let offset = (
            uniform(&mut rng, -cfg.offset_amplitude, cfg.offset_amplitude),
            uniform(&mut rng, -cfg.offset_amplitude, cfg.offset_amplitude),
        );
        let j = cfg.color_jitter;
        let color_jitter = (0..n)
            .map(|_| {
                [
                    uniform(&mut rng, -j, j),
                    uniform(&mut rng, -j, j),
                    uniform(&mut rng, -j, j),
                ]
            })
            .collect();
        SpritePose {
            d_angle,
            d_dist,
            offset,
            color_jitter,
        }
    }

    /// Deterministic articulation from a scalar factor in [0, 1]; used by the
    /// regularly-spaced factor grid.
    pub fn from_factor(cfg: &SpriteConfig, t: f64) -> Self {
        let n = cfg.n_parts;
        let d_angle = (0..n)
            .map(|i| {
                cfg.angle_amplitude
                    * ((t * 2.0 - 1.0) * (1.0 + i as f64 * 0.5).sin().abs().max(0.3))
                    * if i % 2 == 0 { 1.0 } else { -1.0 }
            })
            .collect();
        let d_dist = (0..n)
            .map(|i| cfg.dist_amplitude * (t * 2.0 - 1.0) * (0.5 + 0.5 * (i as f64 * 1.3).cos()))
            .collect();
        SpritePose {
            d_angle,
            d_dist,
            offset: (0.0, 0.0),
            color_jitter: vec![[0.0; 3]; n],
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = ((h * 6.0).floor() as i64).rem_euclid(6);
    let f = h * 6.0 - (h * 6.0).floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One ground-truthed sample.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub landmarks: Vec<Point<T>>,
    /// (pose, shape, illum) indices when generated on a factor grid.
    pub factors: Option<(usize, usize, usize)>,
}

/// Part centers implied by shape + pose; this is the exact ground truth.
pub fn sprite_landmarks<T: Scalar>(shape: &SpriteShape, pose: &SpritePose) -> Vec<Point<T>> {
    shape
        .part_angle
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let ang = a + pose.d_angle[i];
            let dist = (shape.part_dist[i] + pose.d_dist[i]).max(0.0);
            Point::new(
                T::from_f64_c(pose.offset.0 + dist * ang.cos()),
                T::from_f64_c(pose.offset.1 + dist * ang.sin()),
            )
        })
        .collect()
}

/// Renders a sprite at the given shape/pose/illumination.
pub fn render_sprite<T: Scalar>(
    cfg: &SpriteConfig,
    shape: &SpriteShape,
    pose: &SpritePose,
    illum: SpriteIllum,
) -> Sample<T> {
    let s = cfg.image_size;
    let landmarks = sprite_landmarks::<f64>(shape, pose);
    // soft edges ~1.2px wide in normalized units
    let edge = 1.2 * 2.0 / (s as f64 - 1.0);
    let smooth = |d: f64| -> f64 {
        // 1 inside, 0 outside, smooth over [-edge, 0]
        let t = (-d / edge).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    };
    let bg = &shape.bg_params;
    let mut img = Tensor::<f64>::zeros(3, s, s);
    for y in 0..s {
        let py = norm_coord::<f64>(y, s);
        for x in 0..s {
            let px = norm_coord::<f64>(x, s);
            let mut color = match cfg.background {
                BackgroundMode::Solid => [bg[0] * 0.6, bg[1] * 0.6, bg[2] * 0.6],
                BackgroundMode::Gradient => {
                    let t = (py + 1.0) / 2.0;
                    [
                        0.55 * (bg[0] * (1.0 - t) + bg[3] * t),
                        0.55 * (bg[1] * (1.0 - t) + bg[0] * t),
                        0.55 * (bg[2] * (1.0 - t) + bg[1] * t),
                    ]
                }
                BackgroundMode::TexturedNoise => {
                    let v = 0.4
                        + 0.18 * (bg[5] * (px * bg[0] + py * bg[1]) * 3.0 + bg[4]).sin()
                        + 0.12 * (bg[5] * (px * bg[2] - py * bg[3]) * 5.0 - bg[4]).cos();
                    [v * (0.6 + 0.4 * bg[0]), v * (0.6 + 0.4 * bg[1]), v * (0.6 + 0.4 * bg[2])]
                }
            };
            // body ellipse (implicit distance approximation)
            let bx = (px - pose.offset.0) / shape.body_rx;
            let by = (py - pose.offset.1) / shape.body_ry;
            let bd = (bx * bx + by * by).sqrt() - 1.0;
            let alpha = smooth(bd * shape.body_rx.min(shape.body_ry));
            for c in 0..3 {
                color[c] = color[c] * (1.0 - alpha) + shape.body_color[c] * alpha;
            }
            // parts drawn over the body
            for (i, lm) in landmarks.iter().enumerate() {
                let dx = px - lm.x;
                let dy = py - lm.y;
                let pd = (dx * dx + dy * dy).sqrt() - shape.part_radius[i];
                let a = smooth(pd);
                if a > 0.0 {
                    for c in 0..3 {
                        let pc = (shape.part_color[i][c] + pose.color_jitter[i][c]).clamp(0.0, 1.0);
                        color[c] = color[c] * (1.0 - a) + pc * a;
                    }
                }
            }
            for c in 0..3 {
                *img.at_mut(c, y, x) = (color[c] * illum.gain + illum.offset).clamp(0.0, 1.0);
            }
        }
    }
    Sample {
        image: img.cast(),
        landmarks: landmarks
            .iter()
            .map(|p| Point::new(T::from_f64_c(p.x), T::from_f64_c(p.y)))
            .collect(),
        factors: None,
    }
}

/// Renders one sprite from a single seed (shape, pose and photometry all
/// derived from disjoint seed streams).
pub fn gen_sprite<T: Scalar>(cfg: &SpriteConfig, seed: u64) -> Result<Sample<T>> {
    cfg.validate()?;
    let shape = SpriteShape::sample(cfg, mix_seed(seed, 1));
    let pose = SpritePose::sample(cfg, mix_seed(seed, 2));
    Ok(render_sprite(cfg, &shape, &pose, SpriteIllum::NEUTRAL))
}

/// Regularly spaced factor grid: `pose x shape x illum` samples with labels.
/// Landmarks vary with pose and shape but are constant along the illum axis.
pub fn gen_factor_grid<T: Scalar>(
    cfg: &SpriteConfig,
    poses: usize,
    shapes: usize,
    illums: usize,
) -> Result<Vec<Sample<T>>> {
    cfg.validate()?;
    if poses < 1 || shapes < 1 || illums < 1 {
        return Err(Error::invalid_config("factor grid axes must be >= 1"));
    }
    let mut out = Vec::with_capacity(poses * shapes * illums);
    for si in 0..shapes {
        let shape = SpriteShape::sample(cfg, mix_seed(cfg.seed, 0x5000 + si as u64));
        for pi in 0..poses {
            let t = if poses == 1 {
                0.5
            } else {
                pi as f64 / (poses - 1) as f64
            };
            let pose = SpritePose::from_factor(cfg, t);
            for ii in 0..illums {
                let u = if illums == 1 {
                    0.5
                } else {
                    ii as f64 / (illums - 1) as f64
                };
                let illum = SpriteIllum {
                    gain: 0.7 + 0.6 * u,
                    offset: -0.05 + 0.1 * u,
                };
                let mut sample = render_sprite::<T>(cfg, &shape, &pose, illum);
                sample.factors = Some((pi, si, ii));
                out.push(sample);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Sprites,
    Images,
    Sequences,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Folder root for `images` / `sequences` kinds.
    pub path: Option<PathBuf>,
    /// Optional landmark manifest CSV (evaluation-only labels).
    pub manifest: Option<PathBuf>,
    /// Side length images are center-cropped and resized to.
    pub image_size: usize,
    pub sprite: SpriteConfig,
    /// Sprite dataset split sizes (folder datasets split by fraction).
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Sprites,
            path: None,
            manifest: None,
            image_size: 64,
            sprite: SpriteConfig::default(),
            n_train: 2000,
            n_val: 200,
            n_test: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

enum Backing<T> {
    Sprites,
    Images {
        images: Vec<Arc<Tensor<T>>>,
        landmarks: Option<Vec<Vec<Point<T>>>>,
    },
    Sequences {
        sequences: Vec<Vec<Arc<Tensor<T>>>>,
    },
}

/// A dataset: base items plus deterministic pair sampling for training.
pub struct Dataset<T> {
    cfg: DataConfig,
    warp: WarpConfig,
    backing: Backing<T>,
    n_items: usize,
    pub skipped_files: usize,
}

impl<T: Scalar> Dataset<T> {
    /// Procedural sprite dataset; items are indexed virtually by seed.
    pub fn sprites(cfg: &DataConfig, warp: &WarpConfig) -> Result<Self> {
        cfg.sprite.validate()?;
        if cfg.sprite.image_size != cfg.image_size {
            return Err(Error::invalid_config(
                "data.image_size and data.sprite.image_size must agree",
            ));
        }
        Ok(Dataset {
            cfg: cfg.clone(),
            warp: warp.clone(),
            backing: Backing::Sprites,
            n_items: cfg.n_train + cfg.n_val + cfg.n_test,
            skipped_files: 0,
        })
    }

    /// Ingests a folder of PNGs (`images`) or of per-video subfolders with
    /// zero-padded frame names (`sequences`).
    pub fn ingest_folder(cfg: &DataConfig, warp: &WarpConfig) -> Result<Self> {
        let root = cfg
            .path
            .as_ref()
            .ok_or_else(|| Error::invalid_config("folder dataset needs data.path"))?;
        match cfg.kind {
            DataKind::Images => Self::ingest_images(cfg, warp, root),
            DataKind::Sequences => Self::ingest_sequences(cfg, warp, root),
            DataKind::Sprites => Err(Error::invalid_config("sprites kind has no folder to ingest")),
        }
    }

    fn list_sorted(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .map(|e| e.eq_ignore_ascii_case(ext))
                        .unwrap_or(false)
            })
            .collect();
        files.sort();
        Ok(files)
    }

    fn ingest_images(cfg: &DataConfig, warp: &WarpConfig, root: &Path) -> Result<Self> {
        let files = Self::list_sorted(root, "png")?;
        let mut images = Vec::new();
        let mut names = Vec::new();
        let mut orig_sizes = Vec::new();
        let mut skipped = 0usize;
        for f in &files {
            match imgio::load_png::<T>(f) {
                Ok(img) => {
                    orig_sizes.push((img.height(), img.width()));
                    images.push(Arc::new(imgio::center_crop_resize(&img, cfg.image_size)));
                    names.push(
                        f.file_name()
                            .map(|n| n.to_string_lossy().into_owned())
                            .unwrap_or_default(),
                    );
                }
                Err(e) => {
                    log::warn!("skipping unreadable file {}: {e}", f.display());
                    skipped += 1;
                }
            }
        }
        if images.is_empty() {
            return Err(Error::invalid_input(format!(
                "no readable PNG images in {}",
                root.display()
            )));
        }
        let landmarks = match &cfg.manifest {
            Some(m) => Some(load_manifest::<T>(m, &names, &orig_sizes, cfg.image_size)?),
            None => None,
        };
        let n_items = images.len();
        Ok(Dataset {
            cfg: cfg.clone(),
            warp: warp.clone(),
            backing: Backing::Images { images, landmarks },
            n_items,
            skipped_files: skipped,
        })
    }

    fn ingest_sequences(cfg: &DataConfig, warp: &WarpConfig, root: &Path) -> Result<Self> {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut sequences = Vec::new();
        let mut skipped = 0usize;
        for d in &dirs {
            let mut frames = Vec::new();
            for f in Self::list_sorted(d, "png")? {
                match imgio::load_png::<T>(&f) {
                    Ok(img) => frames.push(Arc::new(imgio::center_crop_resize(&img, cfg.image_size))),
                    Err(e) => {
                        log::warn!("skipping unreadable frame {}: {e}", f.display());
                        skipped += 1;
                    }
                }
            }
            if frames.is_empty() {
                log::warn!("skipping empty sequence dir {}", d.display());
                continue;
            }
            sequences.push(frames);
        }
        if sequences.is_empty() {
            return Err(Error::invalid_input(format!(
                "no sequences with readable frames in {}",
                root.display()
            )));
        }
        let n_items = sequences.len();
        Ok(Dataset {
            cfg: cfg.clone(),
            warp: warp.clone(),
            backing: Backing::Sequences { sequences },
            n_items,
            skipped_files: skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.n_items
    }

    pub fn is_empty(&self) -> bool {
        self.n_items == 0
    }

    /// Index ranges per split; folder datasets use 80/10/10.
    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        let (n_train, n_val) = match self.backing {
            Backing::Sprites => (self.cfg.n_train, self.cfg.n_val),
            _ => {
                let t = (self.n_items * 8) / 10;
                let v = self.n_items / 10;
                (t, v)
            }
        };
        match split {
            Split::Train => 0..n_train,
            Split::Val => n_train..n_train + n_val,
            Split::Test => n_train + n_val..self.n_items,
        }
    }

    /// The base image of one item (sprites render on demand).
    pub fn base_image(&self, idx: usize) -> Result<Tensor<T>> {
        match &self.backing {
            Backing::Sprites => {
                let s = gen_sprite::<T>(&self.cfg.sprite, mix_seed(self.cfg.sprite.seed, idx as u64))?;
                Ok(s.image)
            }
            Backing::Images { images, .. } => images
                .get(idx)
                .map(|a| (**a).clone())
                .ok_or_else(|| Error::invalid_input(format!("image index {idx} out of range"))),
            Backing::Sequences { sequences } => sequences
                .get(idx)
                .and_then(|s| s.first())
                .map(|a| (**a).clone())
                .ok_or_else(|| Error::invalid_input(format!("sequence index {idx} out of range"))),
        }
    }

    /// Ground-truth landmarks of one item, when available.
    pub fn landmarks(&self, idx: usize) -> Option<Vec<Point<T>>> {
        match &self.backing {
            Backing::Sprites => {
                let s =
                    gen_sprite::<T>(&self.cfg.sprite, mix_seed(self.cfg.sprite.seed, idx as u64)).ok()?;
                Some(s.landmarks)
            }
            Backing::Images { landmarks, .. } => landmarks.as_ref().and_then(|l| l.get(idx).cloned()),
            Backing::Sequences { .. } => None,
        }
    }

    /// Landmark count of the annotation set, when present.
    pub fn landmark_count(&self) -> Option<usize> {
        match &self.backing {
            Backing::Sprites => Some(self.cfg.sprite.n_parts),
            Backing::Images { landmarks, .. } => {
                landmarks.as_ref().and_then(|l| l.first().map(|v| v.len()))
            }
            Backing::Sequences { .. } => None,
        }
    }

    pub fn descriptor(&self) -> serde_json::Value {
        let train = self.split_range(Split::Train);
        let val = self.split_range(Split::Val);
        let test = self.split_range(Split::Test);
        serde_json::json!({
            "kind": self.cfg.kind,
            "items": self.n_items,
            "image_size": self.cfg.image_size,
            "splits": {
                "train": [train.start, train.end],
                "val": [val.start, val.end],
                "test": [test.start, test.end],
            },
            "skipped_files": self.skipped_files,
            "config": self.cfg,
        })
    }

    pub fn config(&self) -> &DataConfig {
        &self.cfg
    }

    pub fn warp_config(&self) -> &WarpConfig {
        &self.warp
    }
}

impl<T: Scalar> PairSource<T> for Dataset<T> {
    fn training_pair(&self, seed: u64) -> Result<(Tensor<T>, Tensor<T>, DiscountMask<T>)> {
        let train = self.split_range(Split::Train);
        let span = train.len().max(1);
        let idx = train.start + (mix_seed(seed, 7) % span as u64) as usize;
        match &self.backing {
            Backing::Sequences { sequences } => {
                let mut attempt = 0usize;
                loop {
                    let i = train.start
                        + (mix_seed(seed, 8 + attempt as u64) % span as u64) as usize;
                    let frames: Vec<Tensor<T>> =
                        sequences[i].iter().map(|a| (**a).clone()).collect();
                    if let Some(pair) = make_video_pair(&frames, seed, &self.warp) {
                        return Ok(pair);
                    }
                    attempt += 1;
                    if attempt > 16 {
                        return Err(Error::invalid_input(
                            "no sequence long enough for the configured frame gap",
                        ));
                    }
                }
            }
            _ => {
                let base = self.base_image(idx)?;
                if self.warp.video_mode {
                    return Err(Error::invalid_config(
                        "video_mode pair sampling needs a sequences dataset",
                    ));
                }
                make_pair(&base, seed, &self.warp)
            }
        }
    }
}

/// Manifest CSV: `filename,x1,y1,...,xL,yL`, pixel coordinates of the
/// original image. Coordinates are mapped through the center crop + resize
/// into normalized coordinates.
fn load_manifest<T: Scalar>(
    path: &Path,
    names: &[String],
    orig_sizes: &[(usize, usize)],
    image_size: usize,
) -> Result<Vec<Vec<Point<T>>>> {
    let text = std::fs::read_to_string(path)?;
    let mut by_name = std::collections::HashMap::new();
    let mut expected_len: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',');
        let name = parts
            .next()
            .ok_or_else(|| Error::format(format!("manifest line {} is empty", lineno + 1)))?
            .trim()
            .to_string();
        let coords: Vec<f64> = parts
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format(format!("manifest {name}: bad number '{p}'")))
            })
            .collect::<Result<_>>()?;
        if coords.len() % 2 != 0 || coords.is_empty() {
            return Err(Error::format(format!(
                "manifest row for {name} has {} coordinates (expected an even, positive count)",
                coords.len()
            )));
        }
        match expected_len {
            None => expected_len = Some(coords.len()),
            Some(l) if l != coords.len() => {
                return Err(Error::format(format!(
                    "manifest row for {name} has {} coordinates, other rows have {l}",
                    coords.len()
                )));
            }
            _ => {}
        }
        by_name.insert(name, coords);
    }
    let mut out = Vec::with_capacity(names.len());
    for (name, &(oh, ow)) in names.iter().zip(orig_sizes) {
        let coords = by_name
            .get(name)
            .ok_or_else(|| Error::format(format!("manifest has no row for file {name}")))?;
        let pts = coords
            .chunks(2)
            .map(|c| {
                let (nx, ny) = imgio::crop_coords_to_normalized(c[0], c[1], oh, ow, image_size);
                Point::new(T::from_f64_c(nx), T::from_f64_c(ny))
            })
            .collect();
        out.push(pts);
    }
    Ok(out)
}

/// Writes a sprite dataset to disk: PNGs, a landmark manifest CSV, and a
/// descriptor JSON.
pub fn write_sprite_dataset<T: Scalar>(dataset: &Dataset<T>, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = String::from("# filename,x1,y1,...  pixel coordinates\n");
    let size = dataset.cfg.image_size;
    for idx in 0..dataset.len() {
        let img = dataset.base_image(idx)?;
        let name = format!("{idx:06}.png");
        imgio::save_png(&out_dir.join(&name), &img)?;
        let lms = dataset
            .landmarks(idx)
            .ok_or_else(|| Error::invalid_input("sprite dataset always has landmarks"))?;
        manifest.push_str(&name);
        for p in &lms {
            let px = (p.x.to_f64_c() + 1.0) / 2.0 * (size - 1) as f64;
            let py = (p.y.to_f64_c() + 1.0) / 2.0 * (size - 1) as f64;
            manifest.push_str(&format!(",{px:.4},{py:.4}"));
        }
        manifest.push('\n');
    }
    std::fs::write(out_dir.join("landmarks.csv"), manifest)?;
    std::fs::write(
        out_dir.join("descriptor.json"),
        serde_json::to_string_pretty(&dataset.descriptor())?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sprite_determinism_and_landmark_count() {
        let cfg = SpriteConfig::default();
        let a = gen_sprite::<f32>(&cfg, 5).unwrap();
        let b = gen_sprite::<f32>(&cfg, 5).unwrap();
        assert_eq!(a.image.as_slice(), b.image.as_slice());
        assert_eq!(a.landmarks, b.landmarks);
        assert_eq!(a.landmarks.len(), 5);

        let cfg3 = SpriteConfig {
            n_parts: 3,
            ..SpriteConfig::default()
        };
        assert_eq!(gen_sprite::<f32>(&cfg3, 0).unwrap().landmarks.len(), 3);
    }

    #[test]
    fn zero_articulation_shares_landmarks_across_seeds() {
        let cfg = SpriteConfig {
            angle_amplitude: 0.0,
            dist_amplitude: 0.0,
            offset_amplitude: 0.0,
            ..SpriteConfig::default()
        };
        let shape = SpriteShape::sample(&cfg, 99);
        let p1 = SpritePose::sample(&cfg, 1);
        let p2 = SpritePose::sample(&cfg, 2);
        let a = render_sprite::<f64>(&cfg, &shape, &p1, SpriteIllum::NEUTRAL);
        let b = render_sprite::<f64>(&cfg, &shape, &p2, SpriteIllum::NEUTRAL);
        assert_eq!(a.landmarks, b.landmarks);
    }

    #[test]
    fn part_center_pixel_has_part_color() {
        let cfg = SpriteConfig::default();
        let shape = SpriteShape::sample(&cfg, 3);
        let mut pose = SpritePose::sample(&cfg, 4);
        pose.color_jitter = vec![[0.0; 3]; cfg.n_parts];
        let s = render_sprite::<f64>(&cfg, &shape, &pose, SpriteIllum::NEUTRAL);
        let size = cfg.image_size;
        for (i, lm) in s.landmarks.iter().enumerate() {
            let x = ((lm.x + 1.0) / 2.0 * (size - 1) as f64).round() as usize;
            let y = ((lm.y + 1.0) / 2.0 * (size - 1) as f64).round() as usize;
            for c in 0..3 {
                assert!(
                    (s.image.at(c, y, x) - shape.part_color[i][c]).abs() < 5e-2,
                    "part {i} channel {c}"
                );
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SpriteConfig {
            part_dist: (0.5, 0.9),
            ..SpriteConfig::default()
        };
        assert!(gen_sprite::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn factor_grid_shape_and_illum_invariance() {
        let cfg = SpriteConfig::default();
        let grid = gen_factor_grid::<f32>(&cfg, 3, 2, 4).unwrap();
        assert_eq!(grid.len(), 3 * 2 * 4);
        // landmarks constant along the illum axis
        for s in &grid {
            let (p, sh, _) = s.factors.unwrap();
            let reference = grid
                .iter()
                .find(|o| o.factors == Some((p, sh, 0)))
                .unwrap();
            assert_eq!(s.landmarks, reference.landmarks);
        }
        // single-illum grid shares illumination parameters trivially
        let grid1 = gen_factor_grid::<f32>(&cfg, 2, 2, 1).unwrap();
        assert_eq!(grid1.len(), 4);
    }

    #[test]
    fn sprite_dataset_splits_are_disjoint_and_stable() {
        let dcfg = DataConfig {
            n_train: 10,
            n_val: 4,
            n_test: 6,
            ..DataConfig::default()
        };
        let ds = Dataset::<f32>::sprites(&dcfg, &WarpConfig::default()).unwrap();
        assert_eq!(ds.len(), 20);
        let tr = ds.split_range(Split::Train);
        let va = ds.split_range(Split::Val);
        let te = ds.split_range(Split::Test);
        assert!(tr.end <= va.start && va.end <= te.start);
        assert_eq!(te.end, 20);
        // deterministic item across constructions
        let ds2 = Dataset::<f32>::sprites(&dcfg, &WarpConfig::default()).unwrap();
        assert_eq!(
            ds.base_image(12).unwrap().as_slice(),
            ds2.base_image(12).unwrap().as_slice()
        );
        let (s1, t1, _) = ds.training_pair(33).unwrap();
        let (s2, t2, _) = ds2.training_pair(33).unwrap();
        assert_eq!(s1.as_slice(), s2.as_slice());
        assert_eq!(t1.as_slice(), t2.as_slice());
    }

    #[test]
    fn folder_round_trip_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("sprites");
        let dcfg = DataConfig {
            n_train: 4,
            n_val: 1,
            n_test: 2,
            ..DataConfig::default()
        };
        let ds = Dataset::<f32>::sprites(&dcfg, &WarpConfig::default()).unwrap();
        write_sprite_dataset(&ds, &data_dir).unwrap();
        assert!(data_dir.join("descriptor.json").exists());

        let folder_cfg = DataConfig {
            kind: DataKind::Images,
            path: Some(data_dir.clone()),
            manifest: Some(data_dir.join("landmarks.csv")),
            ..dcfg
        };
        let folder = Dataset::<f32>::ingest_folder(&folder_cfg, &WarpConfig::default()).unwrap();
        assert_eq!(folder.len(), 7);
        assert_eq!(folder.landmark_count(), Some(5));
        // landmarks survive the round trip within a pixel
        let orig = ds.landmarks(3).unwrap();
        let loaded = folder.landmarks(3).unwrap();
        let px = 2.0 / 63.0; // one pixel in normalized units
        for (a, b) in orig.iter().zip(&loaded) {
            assert!((a.x - b.x).abs() < px && (a.y - b.y).abs() < px);
        }
        // pairs are available for any seed
        for seed in [0u64, 1, 999] {
            folder.training_pair(seed).unwrap();
        }
    }

    #[test]
    fn manifest_mismatch_names_offending_file() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::<f32>::zeros(3, 16, 16);
        imgio::save_png(&dir.path().join("a.png"), &img).unwrap();
        imgio::save_png(&dir.path().join("b.png"), &img).unwrap();
        std::fs::write(
            dir.path().join("lm.csv"),
            "a.png,1,2,3,4\nb.png,1,2\n",
        )
        .unwrap();
        let cfg = DataConfig {
            kind: DataKind::Images,
            path: Some(dir.path().to_path_buf()),
            manifest: Some(dir.path().join("lm.csv")),
            image_size: 16,
            sprite: SpriteConfig {
                image_size: 16,
                ..SpriteConfig::default()
            },
            ..DataConfig::default()
        };
        let err = Dataset::<f32>::ingest_folder(&cfg, &WarpConfig::default())
            .err()
            .unwrap();
        let msg = err.to_string();
        assert!(msg.contains("b.png"), "error should name the file: {msg}");
    }

    #[test]
    fn empty_folder_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataConfig {
            kind: DataKind::Images,
            path: Some(dir.path().to_path_buf()),
            ..DataConfig::default()
        };
        assert!(Dataset::<f32>::ingest_folder(&cfg, &WarpConfig::default()).is_err());
    }

    #[test]
    fn short_sequences_are_skipped_with_video_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("vids");
        // one long sequence and one too-short sequence
        for (name, frames) in [("long", 12usize), ("short", 2)] {
            let d = root.join(name);
            std::fs::create_dir_all(&d).unwrap();
            for f in 0..frames {
                let img = Tensor::<f32>::from_fn(3, 16, 16, |_, _, _| f as f32 / 12.0);
                imgio::save_png(&d.join(format!("{f:04}.png")), &img).unwrap();
            }
        }
        let cfg = DataConfig {
            kind: DataKind::Sequences,
            path: Some(root),
            image_size: 16,
            sprite: SpriteConfig {
                image_size: 16,
                ..SpriteConfig::default()
            },
            ..DataConfig::default()
        };
        let warp = WarpConfig {
            video_mode: true,
            gap_min: 3,
            gap_max: 8,
            ..WarpConfig::default()
        };
        let ds = Dataset::<f32>::ingest_folder(&cfg, &warp).unwrap();
        assert_eq!(ds.len(), 2);
        // pair sampling always succeeds by retrying onto the long sequence
        for seed in 0..10u64 {
            let (src, tgt, mask) = ds.training_pair(seed).unwrap();
            assert_eq!(src.shape(), (3, 16, 16));
            assert_eq!(tgt.shape(), (3, 16, 16));
            assert!(mask.weights.iter().all(|&w| w == 1.0));
        }
    }
}
