//! Seedable generators and rasterizers for the toy datasets.
//!
//! Every scene is a pure function of `(config, index)`: the per-scene RNG is
//! seeded from a hash of the dataset seed and the scene index, so datasets
//! can be streamed, regenerated or produced in parallel in any order.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, canonicalize, Point2, Polygon};
use crate::task::Task;

/// Base radius range of gates and polygons, as a fraction of the image size.
pub const RADIUS_RANGE: (f64, f64) = (0.05, 0.40);
/// Maximum relative radial shift of each vertex.
pub const RADIAL_JITTER: f64 = 0.25;
/// Maximum perpendicular shift of line points, as a fraction of the image size.
pub const LINE_SHIFT: f64 = 0.15;
pub const LINE_POINTS: usize = 8;
/// Radius in pixels of the green marker drawn on every line point.
pub const LINE_MARKER_RADIUS: u32 = 3;
pub const MAX_ATTEMPTS: usize = 1000;

pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
pub const GREEN: Rgb<u8> = Rgb([0, 255, 0]);

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: label file does not match generator output: {reason}")]
    Mismatch { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, DatagenError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub task: Task,
    pub image_w: u32,
    pub image_h: u32,
    pub n_min: usize,
    pub n_max: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub seed: u64,
    /// Stroke widths in pixels for line, gate and polygon outlines.
    pub thickness_choices: [u32; 3],
    /// Disc radii in pixels for the point task.
    pub point_size_choices: [u32; 3],
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            task: Task::Gates,
            image_w: 256,
            image_h: 256,
            n_min: 1,
            n_max: 4,
            m_min: 3,
            m_max: 7,
            seed: 0,
            thickness_choices: [1, 3, 5],
            point_size_choices: [2, 3, 5],
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_w == 0 || self.image_h == 0 {
            return Err(DatagenError::Config("image dimensions must be positive".into()));
        }
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(DatagenError::Config(format!(
                "need 1 <= n_min <= n_max, got n_min={} n_max={}",
                self.n_min, self.n_max
            )));
        }
        if self.m_min < 3 || self.m_min > self.m_max {
            return Err(DatagenError::Config(format!(
                "need 3 <= m_min <= m_max, got m_min={} m_max={}",
                self.m_min, self.m_max
            )));
        }
        if self.thickness_choices.contains(&0) {
            return Err(DatagenError::Config("stroke widths must be positive".into()));
        }
        Ok(())
    }

    /// Largest number of objects a scene of this config can hold.
    pub fn max_objects(&self) -> usize {
        match self.task {
            Task::Line => 1,
            _ => self.n_max,
        }
    }
}

/// Ground truth of one scene plus the per-object stroke width or disc radius
/// needed to re-render it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub task: Task,
    /// Points task: one single-vertex object per point. Line task: one object
    /// holding the 8 ordered points. Gates and polygons: canonical vertex rings.
    pub objects: Vec<Vec<Point2>>,
    #[serde(default)]
    pub widths: Vec<u32>,
}

impl Labels {
    pub fn empty(task: Task) -> Self {
        Self {
            task,
            objects: Vec::new(),
            widths: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn polygons(&self) -> Vec<Polygon> {
        self.objects
            .iter()
            .filter_map(|o| Polygon::new(o.clone()).ok())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub labels: Labels,
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG for scene `index` of the dataset seeded with `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let h = mix64(mix64(seed ^ 0x9e37_79b9_7f4a_7c15).wrapping_add(index));
    ChaCha8Rng::seed_from_u64(h)
}

fn sample_count(cfg: &GenConfig, rng: &mut impl Rng) -> usize {
    rng.gen_range(cfg.n_min..=cfg.n_max)
}

/// Vertices of a radial shape: `offsets[k]` is the relative radial shift of
/// vertex `k`, placed at angle `phase + k·2π/m`.
pub fn radial_vertices(center: Point2, radius: f64, phase: f64, offsets: &[f64]) -> Vec<Point2> {
    let m = offsets.len();
    offsets
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let a = phase + k as f64 * TAU / m as f64;
            let r = radius * (1.0 + d);
            Point2::new(center.x + r * a.cos(), center.y + r * a.sin())
        })
        .collect()
}

/// Samples a radial shape of `m` vertices and a centre for which all
/// vertices fall inside the unit square. Returns the canonical polygon.
fn sample_radial_polygon(m: usize, rng: &mut impl Rng) -> Result<Polygon> {
    for _ in 0..MAX_ATTEMPTS {
        let radius = rng.gen_range(RADIUS_RANGE.0..=RADIUS_RANGE.1);
        let phase = rng.gen_range(0.0..TAU);
        let offsets: Vec<f64> = (0..m)
            .map(|_| rng.gen_range(-RADIAL_JITTER..=RADIAL_JITTER))
            .collect();
        let shape = radial_vertices(Point2::new(0.0, 0.0), radius, phase, &offsets);
        let (min_x, max_x) = min_max(shape.iter().map(|p| p.x));
        let (min_y, max_y) = min_max(shape.iter().map(|p| p.y));
        // centre range where the whole shape fits in frame
        let (cx_lo, cx_hi) = (-min_x, 1.0 - max_x);
        let (cy_lo, cy_hi) = (-min_y, 1.0 - max_y);
        if cx_lo > cx_hi || cy_lo > cy_hi {
            continue;
        }
        let cx = rng.gen_range(cx_lo..=cx_hi);
        let cy = rng.gen_range(cy_lo..=cy_hi);
        let vertices: Vec<Point2> = shape
            .iter()
            .map(|p| Point2::new((p.x + cx).clamp(0.0, 1.0), (p.y + cy).clamp(0.0, 1.0)))
            .collect();
        let Ok(poly) = Polygon::new(vertices) else {
            continue;
        };
        if poly.area() < geometry::MIN_AREA {
            continue;
        }
        if let Ok(c) = canonicalize(&poly) {
            return Ok(c);
        }
    }
    Err(DatagenError::Generation(format!(
        "no in-frame {m}-gon after {MAX_ATTEMPTS} attempts"
    )))
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

fn pick(choices: &[u32; 3], rng: &mut impl Rng) -> u32 {
    choices[rng.gen_range(0..3)]
}

pub fn gen_points(cfg: &GenConfig, rng: &mut impl Rng) -> Result<Scene> {
    let n = sample_count(cfg, rng);
    let mut labels = Labels::empty(Task::Points);
    let (w, h) = (cfg.image_w as f64, cfg.image_h as f64);
    for _ in 0..n {
        let r = pick(&cfg.point_size_choices, rng);
        let rf = r as f64;
        if 2.0 * rf > w || 2.0 * rf > h {
            return Err(DatagenError::Config(format!(
                "{}x{} image cannot hold a disc of radius {r}px",
                cfg.image_w, cfg.image_h
            )));
        }
        let x = rng.gen_range(rf / w..=1.0 - rf / w);
        let y = rng.gen_range(rf / h..=1.0 - rf / h);
        labels.objects.push(vec![Point2::new(x, y)]);
        labels.widths.push(r);
    }
    let image = rasterize(&labels, cfg);
    Ok(Scene { image, labels })
}

/// Points of the line task for the given perpendicular shifts, ordered from
/// the bottom-left end.
pub fn line_points(shifts: &[f64; LINE_POINTS]) -> Vec<Point2> {
    let steps = (LINE_POINTS - 1) as f64;
    // the diagonal runs from (0, 1) to (1, 0); (1, 1)/√2 is perpendicular to it
    shifts
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let t = k as f64 / steps;
            let x = t + s * FRAC_1_SQRT_2;
            let y = 1.0 - t + s * FRAC_1_SQRT_2;
            Point2::new(x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))
        })
        .collect()
}

pub fn gen_line(cfg: &GenConfig, rng: &mut impl Rng) -> Result<Scene> {
    let mut shifts = [0.0; LINE_POINTS];
    for s in shifts.iter_mut() {
        *s = rng.gen_range(-LINE_SHIFT..=LINE_SHIFT);
    }
    let thickness = pick(&cfg.thickness_choices, rng);
    let labels = Labels {
        task: Task::Line,
        objects: vec![line_points(&shifts)],
        widths: vec![thickness],
    };
    let image = rasterize(&labels, cfg);
    Ok(Scene { image, labels })
}

pub fn gen_gate(cfg: &GenConfig, rng: &mut impl Rng) -> Result<Scene> {
    let n = sample_count(cfg, rng);
    let mut labels = Labels::empty(Task::Gates);
    for _ in 0..n {
        let poly = sample_radial_polygon(4, rng)?;
        labels.objects.push(poly.into_vertices());
        labels.widths.push(pick(&cfg.thickness_choices, rng));
    }
    let image = rasterize(&labels, cfg);
    Ok(Scene { image, labels })
}

pub fn gen_polygon(cfg: &GenConfig, rng: &mut impl Rng) -> Result<Scene> {
    let n = sample_count(cfg, rng);
    let mut labels = Labels::empty(Task::Polygons);
    for _ in 0..n {
        let m = rng.gen_range(cfg.m_min..=cfg.m_max);
        let poly = sample_radial_polygon(m, rng)?;
        labels.objects.push(poly.into_vertices());
        labels.widths.push(pick(&cfg.thickness_choices, rng));
    }
    let image = rasterize(&labels, cfg);
    Ok(Scene { image, labels })
}

/// Scene `index` of the dataset described by `cfg`.
pub fn generate(cfg: &GenConfig, index: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index);
    match cfg.task {
        Task::Points => gen_points(cfg, &mut rng),
        Task::Line => gen_line(cfg, &mut rng),
        Task::Gates => gen_gate(cfg, &mut rng),
        Task::Polygons => gen_polygon(cfg, &mut rng),
    }
}

/// Lazily yields scenes `0, 1, 2, …` of the dataset.
pub fn stream_dataset(cfg: &GenConfig) -> impl Iterator<Item = Result<Scene>> + '_ {
    (0u64..).map(move |i| generate(cfg, i))
}

fn to_px(p: Point2, w: u32, h: u32) -> (f64, f64) {
    (p.x * w as f64, p.y * h as f64)
}

/// Lights every pixel whose centre lies within `radius` of `(cx, cy)`.
pub fn draw_disc(img: &mut RgbImage, cx: f64, cy: f64, radius: f64, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let x0 = (cx - radius - 1.0).floor().max(0.0) as u32;
    let y0 = (cy - radius - 1.0).floor().max(0.0) as u32;
    let x1 = ((cx + radius + 1.0).ceil().max(0.0) as u32).min(w);
    let y1 = ((cy + radius + 1.0).ceil().max(0.0) as u32).min(h);
    let r2 = radius * radius;
    for j in y0..y1 {
        for i in x0..x1 {
            let dx = i as f64 + 0.5 - cx;
            let dy = j as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r2 {
                img.put_pixel(i, j, color);
            }
        }
    }
}

/// Lights every pixel whose centre lies within `width / 2` of the segment.
pub fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), width: f64, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let half = width / 2.0;
    let x0 = (a.0.min(b.0) - half - 1.0).floor().max(0.0) as u32;
    let y0 = (a.1.min(b.1) - half - 1.0).floor().max(0.0) as u32;
    let x1 = ((a.0.max(b.0) + half + 1.0).ceil().max(0.0) as u32).min(w);
    let y1 = ((a.1.max(b.1) + half + 1.0).ceil().max(0.0) as u32).min(h);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for j in y0..y1 {
        for i in x0..x1 {
            let (px, py) = (i as f64 + 0.5, j as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ex, ey) = (a.0 + t * dx - px, a.1 + t * dy - py);
            if ex * ex + ey * ey <= half * half {
                img.put_pixel(i, j, color);
            }
        }
    }
}

/// Renders labels as white strokes and discs on black, without anti-aliasing.
pub fn rasterize(labels: &Labels, cfg: &GenConfig) -> RgbImage {
    let (w, h) = (cfg.image_w, cfg.image_h);
    let mut img = RgbImage::new(w, h);
    let width_of = |i: usize| labels.widths.get(i).copied().unwrap_or(1) as f64;
    match labels.task {
        Task::Points => {
            for (i, obj) in labels.objects.iter().enumerate() {
                for &p in obj {
                    let (cx, cy) = to_px(p, w, h);
                    draw_disc(&mut img, cx, cy, width_of(i), WHITE);
                }
            }
        }
        Task::Line => {
            for (i, obj) in labels.objects.iter().enumerate() {
                for pair in obj.windows(2) {
                    draw_segment(&mut img, to_px(pair[0], w, h), to_px(pair[1], w, h), width_of(i), WHITE);
                }
                for &p in obj {
                    let (cx, cy) = to_px(p, w, h);
                    draw_disc(&mut img, cx, cy, LINE_MARKER_RADIUS as f64, GREEN);
                }
            }
        }
        Task::Gates | Task::Polygons => {
            for (i, obj) in labels.objects.iter().enumerate() {
                let m = obj.len();
                for k in 0..m {
                    let a = to_px(obj[k], w, h);
                    let b = to_px(obj[(k + 1) % m], w, h);
                    draw_segment(&mut img, a, b, width_of(i), WHITE);
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: GenConfig,
    pub seed: u64,
    pub count: u64,
}

pub fn scene_stem(index: u64) -> String {
    format!("{index:06}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `NNNNNN.png` and `NNNNNN.json` for one scene.
pub fn write_scene(dir: &Path, index: u64, scene: &Scene) -> Result<()> {
    let stem = scene_stem(index);
    let png = dir.join(format!("{stem}.png"));
    scene.image.save(&png).map_err(|source| DatagenError::Image {
        path: png.clone(),
        source,
    })?;
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string(&scene.labels).map_err(|source| DatagenError::Json {
        path: json.clone(),
        source,
    })?;
    fs::write(&json, text).map_err(io_err(&json))
}

pub fn write_manifest(dir: &Path, cfg: &GenConfig, count: u64) -> Result<()> {
    let path = dir.join("manifest.json");
    let manifest = DatasetManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        count,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| DatagenError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text).map_err(io_err(&path))
}

/// Writes `count` scenes plus `manifest.json` into `dir`, creating it if needed.
pub fn write_dataset(cfg: &GenConfig, count: u64, dir: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for index in 0..count {
        write_scene(dir, index, &generate(cfg, index)?)?;
    }
    write_manifest(dir, cfg, count)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| DatagenError::Json { path, source })
}

pub fn read_labels(dir: &Path, index: u64) -> Result<Labels> {
    let path = dir.join(format!("{}.json", scene_stem(index)));
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| DatagenError::Json { path, source })
}

pub fn read_scene(dir: &Path, index: u64) -> Result<Scene> {
    let labels = read_labels(dir, index)?;
    let path = dir.join(format!("{}.png", scene_stem(index)));
    let image = image::open(&path)
        .map_err(|source| DatagenError::Image {
            path: path.clone(),
            source,
        })?
        .to_rgb8();
    Ok(Scene { image, labels })
}
