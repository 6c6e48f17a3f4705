//! Procedural photo/map domain pair with a controlled entropy gap.
//!
//! Every scene renders to a detailed "photo" and a flat-color "map". Each
//! shape carries detail parameters (dot-lattice phase, roof color, dot shade
//! seed) that always alter the photo and, by construction, never reach the
//! map render. A map therefore corresponds to at least P*C distinct photos.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pngio;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 48;
/// Dot-lattice phases per shape.
pub const TEXTURE_PHASES: u8 = 8;
/// Roof colors per shape.
pub const ROOF_COLORS: u8 = 4;
/// Paired scenes held out for probing.
pub const PROBE_SCENES: usize = 50;

const CELL_COLS: usize = 3;
const CELL_ROWS: usize = 2;
const CELL_W: usize = IMAGE_SIZE / CELL_COLS; // 16
const CELL_H: usize = IMAGE_SIZE / CELL_ROWS; // 24

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Building,
    Field,
    Road,
}

impl ShapeKind {
    fn from_index(i: usize) -> Self {
        match i % 3 {
            0 => ShapeKind::Building,
            1 => ShapeKind::Field,
            _ => ShapeKind::Road,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetailParams {
    pub texture_phase: u8,
    pub roof_color: u8,
    pub dot_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub color_id: u8,
    pub detail: DetailParams,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub background_seed: u64,
    pub shapes: Vec<ShapeSpec>,
}

#[derive(Clone, Copy, Debug)]
pub struct SceneGenParams {
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SceneGenParams {
    fn default() -> Self {
        SceneGenParams {
            min_shapes: 2,
            max_shapes: 6,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn hash01(x: u64) -> f64 {
    splitmix64(x) as f64 / u64::MAX as f64
}

/// Deterministic in the seed; shapes land in disjoint grid cells so every
/// shape stays visible (a buried shape would break the entropy-gap invariant).
pub fn sample_scene(rng_seed: u64, params: &SceneGenParams) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let lo = params.min_shapes.clamp(1, CELL_COLS * CELL_ROWS);
    let hi = params.max_shapes.clamp(lo, CELL_COLS * CELL_ROWS);
    let n = rng.gen_range(lo..=hi);
    let mut cells: Vec<usize> = (0..CELL_COLS * CELL_ROWS).collect();
    // Fisher-Yates prefix
    for i in 0..n {
        let j = rng.gen_range(i..cells.len());
        cells.swap(i, j);
    }
    let background_seed = rng.gen::<u64>();
    let mut shapes = Vec::with_capacity(n);
    for &cell in &cells[..n] {
        let cx = (cell % CELL_COLS) * CELL_W;
        let cy = (cell / CELL_COLS) * CELL_H;
        let w = rng.gen_range(8..=CELL_W - 2);
        let h = rng.gen_range(8..=CELL_H - 2);
        let x = cx + rng.gen_range(1..=CELL_W - 1 - w);
        let y = cy + rng.gen_range(1..=CELL_H - 1 - h);
        shapes.push(ShapeSpec {
            kind: ShapeKind::from_index(rng.gen_range(0..3)),
            x,
            y,
            w,
            h,
            color_id: rng.gen_range(0..ROOF_COLORS),
            detail: DetailParams {
                texture_phase: rng.gen_range(0..TEXTURE_PHASES),
                roof_color: rng.gen_range(0..ROOF_COLORS),
                dot_seed: rng.gen::<u64>(),
            },
        });
    }
    SceneSpec {
        background_seed,
        shapes,
    }
}

const MAP_BG: [f64; 3] = [0.62, 0.78, 0.62];
const PHOTO_BG: [f64; 3] = [0.40, 0.55, 0.38];

fn map_color(kind: ShapeKind, color_id: u8) -> [f64; 3] {
    let t = color_id as f64 * 0.05;
    match kind {
        ShapeKind::Building => [0.42 + t, 0.42 + t, 0.48 + t],
        ShapeKind::Field => [0.85 + t * 0.6, 0.78 - t, 0.35 + t],
        ShapeKind::Road => [0.22 + t, 0.22 + t, 0.28 + t * 0.5],
    }
}

fn photo_base_color(kind: ShapeKind, color_id: u8, roof_color: u8) -> [f64; 3] {
    let base = match kind {
        ShapeKind::Building => [0.52, 0.46, 0.44],
        ShapeKind::Field => [0.60, 0.58, 0.28],
        ShapeKind::Road => [0.24, 0.24, 0.26],
    };
    let s = color_id as f64 * 0.04;
    const ROOF_TINTS: [[f64; 3]; 4] = [
        [0.0, 0.0, 0.0],
        [0.10, 0.02, -0.04],
        [-0.06, 0.09, 0.02],
        [0.05, -0.06, 0.10],
    ];
    let tint = ROOF_TINTS[(roof_color % ROOF_COLORS) as usize];
    [
        base[0] + s + tint[0],
        base[1] + s + tint[1],
        base[2] + s + tint[2],
    ]
}

fn quantize8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Detailed rendering: textured background, tinted shapes, and a dot lattice
/// whose offset and shade come entirely from the detail params.
pub fn render_photo(scene: &SceneSpec) -> Tensor {
    let s = IMAGE_SIZE;
    let mut img = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let n = hash01(scene.background_seed ^ ((y as u64) << 16 | x as u64)) - 0.5;
            for c in 0..3 {
                img[(c * s + y) * s + x] = PHOTO_BG[c] + 0.06 * n;
            }
        }
    }
    for shape in &scene.shapes {
        let color = photo_base_color(shape.kind, shape.color_id, shape.detail.roof_color);
        let dx = (shape.detail.texture_phase % 4) as usize;
        let dy = 2 * (shape.detail.texture_phase / 4) as usize;
        for y in shape.y..shape.y + shape.h {
            for x in shape.x..shape.x + shape.w {
                let (lx, ly) = (x - shape.x, y - shape.y);
                // Grain is keyed to the scene, not the detail params, so the
                // detail channel carries only structured, reconstructable
                // information (dot lattice + roof tint).
                let grain =
                    0.02 * (hash01(scene.background_seed ^ 0x5bd1 ^ ((y as u64) << 16 | x as u64)) - 0.5);
                // 2x2 dot blocks on a period-4 lattice: a quarter of the
                // shape's pixels carry per-cell shades, so ignoring the
                // detail channel is expensive for the cycle loss.
                let dot = (lx + dx) % 4 < 2 && (ly + dy) % 4 < 2;
                for c in 0..3 {
                    let mut v = color[c] + grain;
                    if dot {
                        // Per-cell shade from the detail seed, quantized to
                        // four levels: a discrete symbol stream the cycle
                        // must carry through the map.
                        let cell = (((ly + dy) / 4) as u64) << 8 | ((lx + dx) / 4) as u64;
                        let level = (3.0 * hash01(shape.detail.dot_seed ^ 0x9e37 ^ cell)).round();
                        v -= 0.15 + 0.10 * level;
                    }
                    img[(c * s + y) * s + x] = v;
                }
            }
        }
    }
    for v in &mut img {
        *v = quantize8(*v);
    }
    Tensor::new(vec![3, s, s], img).unwrap()
}

/// Flat semantic colors only; reads nothing from the detail params or the
/// background texture seed.
pub fn render_map(scene: &SceneSpec) -> Tensor {
    let s = IMAGE_SIZE;
    let mut img = vec![0.0; 3 * s * s];
    for c in 0..3 {
        for i in 0..s * s {
            img[c * s * s + i] = MAP_BG[c];
        }
    }
    for shape in &scene.shapes {
        let color = map_color(shape.kind, shape.color_id);
        for y in shape.y..shape.y + shape.h {
            for x in shape.x..shape.x + shape.w {
                for c in 0..3 {
                    img[(c * s + y) * s + x] = color[c];
                }
            }
        }
    }
    for v in &mut img {
        *v = quantize8(*v);
    }
    Tensor::new(vec![3, s, s], img).unwrap()
}

/// Shift one shape's detail params to the next setting; used by the
/// entropy-gap tests and the detail-leak metric.
pub fn perturb_details(scene: &SceneSpec, shape_index: usize) -> SceneSpec {
    let mut out = scene.clone();
    let d = &mut out.shapes[shape_index].detail;
    d.texture_phase = (d.texture_phase + 1) % TEXTURE_PHASES;
    d.roof_color = (d.roof_color + 1) % ROOF_COLORS;
    d.dot_seed = splitmix64(d.dot_seed);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    TrainX,
    TrainY,
    Probe,
}

impl Split {
    fn as_str(&self) -> &'static str {
        match self {
            Split::TrainX => "train_x",
            Split::TrainY => "train_y",
            Split::Probe => "probe",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train_x" => Ok(Split::TrainX),
            "train_y" => Ok(Split::TrainY),
            "probe" => Ok(Split::Probe),
            other => Err(Error::Format(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub filename: String,
    pub scene_seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "# cyclesteg-dataset\tversion={}\tseed={}", self.version, self.seed)
            .expect("string write");
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}", e.filename, e.scene_seed, e.split.as_str())
                .expect("string write");
        }
        std::fs::write(dir.join(MANIFEST_NAME), out)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_NAME))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty manifest".into()))?;
        let mut version = 0;
        let mut seed = 0;
        for field in header.split('\t').skip(1) {
            if let Some(v) = field.strip_prefix("version=") {
                version = v
                    .parse()
                    .map_err(|_| Error::Format("bad manifest version".into()))?;
            } else if let Some(v) = field.strip_prefix("seed=") {
                seed = v
                    .parse()
                    .map_err(|_| Error::Format("bad manifest seed".into()))?;
            }
        }
        let mut entries = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let filename = parts
                .next()
                .ok_or_else(|| Error::Format("short manifest line".into()))?
                .to_string();
            let scene_seed = parts
                .next()
                .ok_or_else(|| Error::Format("short manifest line".into()))?
                .parse()
                .map_err(|_| Error::Format("bad scene seed".into()))?;
            let split = Split::parse(
                parts
                    .next()
                    .ok_or_else(|| Error::Format("short manifest line".into()))?,
            )?;
            entries.push(ManifestEntry {
                filename,
                scene_seed,
                split,
            });
        }
        Ok(DatasetManifest {
            version,
            seed,
            entries,
        })
    }

    /// Regenerate every listed scene and compare the re-rendered image with
    /// the file on disk.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let params = SceneGenParams::default();
        for e in &self.entries {
            let path = dir.join(&e.filename);
            if !path.exists() {
                return Err(Error::MissingInput(format!("{}", path.display())));
            }
            let stored = pngio::load_image01(&path)?;
            let scene = sample_scene(e.scene_seed, &params);
            let rendered = if e.filename.contains("map") {
                render_map(&scene)
            } else {
                render_photo(&scene)
            };
            if stored != rendered {
                return Err(Error::Format(format!(
                    "{} does not match its regenerated scene",
                    e.filename
                )));
            }
        }
        Ok(())
    }
}

/// Photos for X and maps for Y come from disjoint scene seeds; the probe
/// split holds 50 scenes rendered to both domains.
pub fn generate_dataset(n_per_domain: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir)?;
    let params = SceneGenParams::default();
    let mut entries = Vec::new();
    let mut emit = |idx: u64, name: String, split: Split, map: bool| -> Result<()> {
        let scene_seed = seed.wrapping_add(idx);
        let scene = sample_scene(scene_seed, &params);
        let img = if map {
            render_map(&scene)
        } else {
            render_photo(&scene)
        };
        pngio::save_image01(&img, &out_dir.join(&name))?;
        entries.push(ManifestEntry {
            filename: name,
            scene_seed,
            split,
        });
        Ok(())
    };
    for i in 0..n_per_domain as u64 {
        emit(i, format!("x_train_{i:04}.png"), Split::TrainX, false)?;
    }
    for i in 0..n_per_domain as u64 {
        emit(
            n_per_domain as u64 + i,
            format!("y_train_{i:04}.png"),
            Split::TrainY,
            true,
        )?;
    }
    for i in 0..PROBE_SCENES as u64 {
        let idx = 2 * n_per_domain as u64 + i;
        emit(idx, format!("probe_{i:02}_photo.png"), Split::Probe, false)?;
        emit(idx, format!("probe_{i:02}_map.png"), Split::Probe, true)?;
    }
    let manifest = DatasetManifest {
        version: 1,
        seed,
        entries,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Dataset loaded into memory, images in [0,1].
pub struct LoadedDataset {
    pub train_x: Vec<Tensor>,
    pub train_y: Vec<Tensor>,
    /// (scene_seed, photo, map) for each probe scene.
    pub probe: Vec<(u64, Tensor, Tensor)>,
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::load(dir)?;
    let mut train_x = Vec::new();
    let mut train_y = Vec::new();
    let mut probe: BTreeMap<u64, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
    for e in &manifest.entries {
        let img = pngio::load_image01(&dir.join(&e.filename))?;
        match e.split {
            Split::TrainX => train_x.push(img),
            Split::TrainY => train_y.push(img),
            Split::Probe => {
                let slot = probe.entry(e.scene_seed).or_default();
                if e.filename.contains("map") {
                    slot.1 = Some(img);
                } else {
                    slot.0 = Some(img);
                }
            }
        }
    }
    let probe = probe
        .into_iter()
        .map(|(seed, (p, m))| match (p, m) {
            (Some(p), Some(m)) => Ok((seed, p, m)),
            _ => Err(Error::Format(format!("probe scene {seed} missing a domain"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset {
        train_x,
        train_y,
        probe,
    })
}

pub fn dataset_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_NAME)
}
