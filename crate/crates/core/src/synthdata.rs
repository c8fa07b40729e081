//! Synthetic multi-view composition scenes.
//!
//! Every object is a textured polygon carrying an off-centre marking, so its
//! pose can be read off a rendered view. A scene places one view of an object
//! inside an axis-aligned box on a procedural background; several scenes of the
//! same object at different rotations form its view set.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{erase_box, BoundingBox, Image};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const MAX_REFERENCES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    TexturedPolygon,
    MarkedSprite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Gradient,
    Checker,
    NoiseTexture,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub rotation_deg: f32,
    pub scale: f32,
    pub translation: (f32, f32),
}

impl Default for ObjectPose {
    fn default() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            translation: (0.0, 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Identity of the object; equal seeds render the same object.
    pub seed: u64,
    pub object_kind: ObjectKind,
    pub pose: ObjectPose,
    pub background_kind: BackgroundKind,
    pub canvas_size: usize,
}

impl SceneSpec {
    pub fn validate(&self, latent_factor: usize) -> Result<()> {
        if self.canvas_size == 0 || self.canvas_size % latent_factor != 0 {
            return Err(Error::Param(format!(
                "canvas_size {} must be a positive multiple of {latent_factor}",
                self.canvas_size
            )));
        }
        let r = self.pose.rotation_deg;
        if !(0.0..360.0).contains(&r) {
            return Err(Error::Param(format!("rotation {r} outside [0, 360)")));
        }
        let s = self.pose.scale;
        if !(0.5..=1.5).contains(&s) {
            return Err(Error::Param(format!("scale {s} outside [0.5, 1.5]")));
        }
        Ok(())
    }
}

/// Seed-derived appearance of one object in its canonical frame, where the
/// unit length is the object's base radius.
#[derive(Clone, Debug)]
struct Appearance {
    polygon: Vec<(f32, f32)>,
    base: [f32; 3],
    stripe: [f32; 3],
    mark: [f32; 3],
    stripe_freq: f32,
    stripe_dir: (f32, f32),
    mark_center: (f32, f32),
    mark_radius: f32,
    bar: Option<((f32, f32), (f32, f32))>,
}

fn random_color(rng: &mut impl Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

impl Appearance {
    fn from_seed(seed: u64, kind: ObjectKind) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f62_6a65_6374);
        let mut polygon: Vec<(f32, f32)> = match kind {
            ObjectKind::TexturedPolygon => {
                let n = rng.gen_range(5..=8);
                (0..n)
                    .map(|i| {
                        let a = (i as f32 + rng.gen_range(-0.3..0.3)) / n as f32
                            * std::f32::consts::TAU;
                        let r = rng.gen_range(0.65..1.0);
                        (r * a.cos(), r * a.sin())
                    })
                    .collect()
            }
            ObjectKind::MarkedSprite => {
                // an L-shaped sprite with random arm proportions
                let arm = rng.gen_range(0.35..0.55);
                let len = rng.gen_range(0.8..1.0);
                let wid = rng.gen_range(0.6..0.9);
                vec![
                    (-wid, -len),
                    (-wid + arm, -len),
                    (-wid + arm, len - arm),
                    (wid, len - arm),
                    (wid, len),
                    (-wid, len),
                ]
            }
        };
        // shift the area centroid to the origin
        let (cx, cy) = polygon_centroid(&polygon);
        for p in &mut polygon {
            p.0 -= cx;
            p.1 -= cy;
        }
        let base = random_color(&mut rng, 0.25, 0.95);
        let stripe = base.map(|c| (c * rng.gen_range(0.45..0.7)).clamp(0.0, 1.0));
        let mark = [1.0 - base[0], 1.0 - base[1], 1.0 - base[2]].map(|c| c.clamp(0.1, 0.95));
        let stripe_angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
        let v0 = polygon[0];
        let mark_center = (v0.0 * 0.5, v0.1 * 0.5);
        let bar = matches!(kind, ObjectKind::MarkedSprite).then(|| {
            let v = polygon[3];
            ((v.0 * 0.2, v.1 * 0.2), (v.0 * 0.75, v.1 * 0.75))
        });
        Self {
            polygon,
            base,
            stripe,
            mark,
            stripe_freq: rng.gen_range(6.0..11.0),
            stripe_dir: (stripe_angle.cos(), stripe_angle.sin()),
            mark_center,
            mark_radius: rng.gen_range(0.16..0.24),
            bar,
        }
    }

    /// Colour at canonical coordinates, `None` outside the object.
    fn shade(&self, u: f32, v: f32) -> Option<[f32; 3]> {
        if !point_in_polygon(&self.polygon, u, v) {
            return None;
        }
        let (mx, my) = self.mark_center;
        if (u - mx).powi(2) + (v - my).powi(2) < self.mark_radius.powi(2) {
            return Some(self.mark);
        }
        if let Some((a, b)) = self.bar {
            if segment_distance((u, v), a, b) < 0.07 {
                return Some(self.mark);
            }
        }
        let phase = self.stripe_freq * (u * self.stripe_dir.0 + v * self.stripe_dir.1);
        let c = if phase.sin() > 0.0 { self.stripe } else { self.base };
        // fixed directional shading in the object frame
        let light = 0.85 + 0.15 * (u * 0.6 - v * 0.8);
        Some(c.map(|x| (x * light).clamp(0.0, 1.0)))
    }
}

fn polygon_centroid(p: &[(f32, f32)]) -> (f32, f32) {
    let (mut a, mut cx, mut cy) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..p.len() {
        let (x0, y0) = (p[i].0 as f64, p[i].1 as f64);
        let (x1, y1) = (p[(i + 1) % p.len()].0 as f64, p[(i + 1) % p.len()].1 as f64);
        let cross = x0 * y1 - x1 * y0;
        a += cross;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    a *= 0.5;
    ((cx / (6.0 * a)) as f32, (cy / (6.0 * a)) as f32)
}

fn point_in_polygon(p: &[(f32, f32)], x: f32, y: f32) -> bool {
    let mut inside = false;
    let mut j = p.len() - 1;
    for i in 0..p.len() {
        let (xi, yi) = p[i];
        let (xj, yj) = p[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Base radius of an object relative to the crop size.
const BASE_RADIUS: f32 = 0.3;

/// Renders the object on black, returning colour and per-pixel coverage.
pub fn render_object(spec: &SceneSpec) -> (Image, Vec<f32>) {
    let app = Appearance::from_seed(spec.seed, spec.object_kind);
    let r = spec.canvas_size;
    let (cx, cy) = (
        r as f32 / 2.0 + spec.pose.translation.0,
        r as f32 / 2.0 + spec.pose.translation.1,
    );
    let theta = spec.pose.rotation_deg.to_radians();
    let (cs, sn) = (theta.cos(), theta.sin());
    let unit = BASE_RADIUS * r as f32 * spec.pose.scale;
    let mut img = Image::zeros(r, r);
    let mut alpha = vec![0.0f32; r * r];
    const OFFS: [f32; 2] = [0.25, 0.75];
    for y in 0..r {
        for x in 0..r {
            let mut acc = [0.0f32; 3];
            let mut hits = 0;
            for oy in OFFS {
                for ox in OFFS {
                    let dx = x as f32 + ox - cx;
                    let dy = y as f32 + oy - cy;
                    // inverse rotation into the object frame
                    let u = (cs * dx + sn * dy) / unit;
                    let v = (-sn * dx + cs * dy) / unit;
                    if let Some(c) = app.shade(u, v) {
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                img.set_pixel(x, y, acc.map(|c| c / 4.0));
                alpha[y * r + x] = hits as f32 / 4.0;
            }
        }
    }
    (img, alpha)
}

/// Foreground crop of the object at the given pose; deterministic in `spec`.
pub fn generate_object(spec: &SceneSpec) -> Image {
    render_object(spec).0
}

pub fn render_background(kind: BackgroundKind, seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6267_7264);
    let c0 = random_color(&mut rng, 0.15, 0.85);
    let c1 = random_color(&mut rng, 0.15, 0.85);
    let mut img = Image::zeros(size, size);
    match kind {
        BackgroundKind::Gradient => {
            let a: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let (dx, dy) = (a.cos(), a.sin());
            for y in 0..size {
                for x in 0..size {
                    let u = ((x as f32 / size as f32 - 0.5) * dx + (y as f32 / size as f32 - 0.5) * dy)
                        .clamp(-0.5, 0.5)
                        + 0.5;
                    img.set_pixel(x, y, [0, 1, 2].map(|k| c0[k] + (c1[k] - c0[k]) * u));
                }
            }
        }
        BackgroundKind::Checker => {
            let cell = [8usize, 16][rng.gen_range(0..2)];
            let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            for y in 0..size {
                for x in 0..size {
                    let on = ((x + ox) / cell + (y + oy) / cell) % 2 == 0;
                    img.set_pixel(x, y, if on { c0 } else { c1 });
                }
            }
        }
        BackgroundKind::NoiseTexture => {
            let g = 5;
            let grid: Vec<[f32; 3]> = (0..g * g)
                .map(|_| {
                    let t: f32 = rng.gen();
                    [0, 1, 2].map(|k| c0[k] + (c1[k] - c0[k]) * t)
                })
                .collect();
            let coarse = Image::new(g, g, grid.concat()).expect("grid size");
            let smooth = coarse.resize(size, size);
            for y in 0..size {
                for x in 0..size {
                    let n: f32 = rng.gen_range(-0.04..0.04);
                    let p = smooth.pixel(x, y).map(|c| (c + n).clamp(0.0, 1.0));
                    img.set_pixel(x, y, p);
                }
            }
        }
    }
    img
}

/// Ranges of the reference perturbation; all-zero ranges give the identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub max_rotation_deg: f32,
    pub scale_jitter: f32,
    pub flip_prob: f64,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            scale_jitter: 0.1,
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

impl PerturbConfig {
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            scale_jitter: 0.0,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }
}

fn jitter(rng: &mut impl Rng, range: f32) -> f32 {
    range * (2.0 * rng.gen::<f32>() - 1.0)
}

/// Geometry then colour jitter of a foreground crop; deterministic in `seed`.
pub fn perturb_reference(fg: &Image, seed: u64, cfg: &PerturbConfig) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7065_7274);
    let angle = jitter(&mut rng, cfg.max_rotation_deg).to_radians();
    let scale = 1.0 + jitter(&mut rng, cfg.scale_jitter);
    let flip = rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let brightness = 1.0 + jitter(&mut rng, cfg.brightness);
    let contrast = 1.0 + jitter(&mut rng, cfg.contrast);
    let saturation = 1.0 + jitter(&mut rng, cfg.saturation);

    let (w, h) = (fg.width(), fg.height());
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let (cs, sn) = (angle.cos(), angle.sin());
    let mut out = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            if flip {
                dx = -dx;
            }
            let sx = (cs * dx + sn * dy) / scale + cx - 0.5;
            let sy = (-sn * dx + cs * dy) / scale + cy - 0.5;
            for c in 0..3 {
                out.set(x, y, c, fg.sample_bilinear(sx, sy, c));
            }
        }
    }

    let n = (w * h) as f32;
    for v in out.data_mut() {
        *v *= brightness;
    }
    let mean = out.data().iter().sum::<f32>() / (3.0 * n);
    for v in out.data_mut() {
        *v = *v * contrast + mean * (1.0 - contrast);
    }
    for px in out.data_mut().chunks_mut(3) {
        let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            *v = *v * saturation + gray * (1.0 - saturation);
        }
    }
    out.clamp01();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    Finetune,
    Test,
}

/// One scene: a view of an object placed in a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub object_id: String,
    pub object_kind: ObjectKind,
    pub view: usize,
    pub split: Split,
    pub ground_truth: String,
    pub background: String,
    pub bbox_file: String,
    pub bbox: BoundingBox,
    /// Foreground crops usable as references for this scene, excluding its own view.
    pub references: Vec<String>,
    pub reference_views: Vec<usize>,
}

impl ExampleRecord {
    pub fn id(&self) -> String {
        format!("{}/view{}", self.object_id, self.view)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator_seed: u64,
    pub canvas_size: usize,
    pub views: usize,
    pub records: Vec<ExampleRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ExampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn object_ids(&self, split: Split) -> Vec<String> {
        let mut ids: Vec<String> = self.split(split).map(|r| r.object_id.clone()).collect();
        ids.dedup();
        ids
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Checks file existence and split disjointness.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<(String, usize), Split> = HashMap::new();
        let mut split_of_object: HashMap<&str, Vec<Split>> = HashMap::new();
        for r in &self.records {
            if let Some(prev) = seen.insert((r.object_id.clone(), r.view), r.split) {
                return Err(Error::Load {
                    record: r.id(),
                    message: format!("listed twice (splits {prev:?} and {:?})", r.split),
                });
            }
            split_of_object.entry(&r.object_id).or_default().push(r.split);
            for rel in [&r.ground_truth, &r.background, &r.bbox_file]
                .into_iter()
                .chain(&r.references)
            {
                if !self.path(rel).is_file() {
                    return Err(Error::Load {
                        record: r.id(),
                        message: format!("missing file {}", self.path(rel).display()),
                    });
                }
            }
        }
        for (obj, splits) in split_of_object {
            if splits.contains(&Split::Pretrain) && splits.iter().any(|s| *s != Split::Pretrain) {
                return Err(Error::Load {
                    record: obj.to_string(),
                    message: "object appears in both pretrain and test splits".into(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Objects whose views are split into finetune and held-out test scenes.
    pub objects: usize,
    /// Objects used only for pretraining.
    pub pretrain_objects: usize,
    pub views: usize,
    pub canvas_size: usize,
    pub latent_factor: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            objects: 10,
            pretrain_objects: 0,
            views: 5,
            canvas_size: 64,
            latent_factor: 4,
            seed: 0,
        }
    }
}

/// A rendered scene before it is written to disk.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Image,
    pub background: Image,
    pub bbox: BoundingBox,
    pub crop: Image,
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(base, |acc, &p| mix_seed(acc, p))
}

/// Renders view `view` of object `object_seed` as a full scene.
pub fn render_scene(
    object_seed: u64,
    kind: ObjectKind,
    view: usize,
    views: usize,
    canvas: usize,
    factor: usize,
) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(object_seed, &[view as u64, 7]));
    let base_rot = (object_seed % 360) as f32;
    let rotation = (base_rot + view as f32 * 360.0 / views.max(1) as f32 + rng.gen_range(-10.0..10.0))
        .rem_euclid(360.0);
    let pose = ObjectPose {
        rotation_deg: rotation,
        scale: rng.gen_range(0.85..1.25),
        translation: (0.0, 0.0),
    };
    let bg_kind = [
        BackgroundKind::Gradient,
        BackgroundKind::Checker,
        BackgroundKind::NoiseTexture,
    ][rng.gen_range(0..3)];
    let background = render_background(bg_kind, rng.gen(), canvas);

    let cells = canvas / factor;
    let (min_c, max_c) = ((cells * 3 / 8).max(1), (cells * 5 / 8).max(1));
    let wc = rng.gen_range(min_c..=max_c);
    let hc = rng.gen_range(min_c..=max_c);
    let xc = rng.gen_range(0..=cells - wc);
    let yc = rng.gen_range(0..=cells - hc);
    let bbox = BoundingBox {
        x: xc * factor,
        y: yc * factor,
        w: wc * factor,
        h: hc * factor,
    };

    let spec = SceneSpec {
        seed: object_seed,
        object_kind: kind,
        pose,
        background_kind: bg_kind,
        canvas_size: canvas,
    };
    let (obj, alpha) = render_object(&spec);
    // the object is lit by the scene: brighter backgrounds brighten it
    let bg_mean = background.data().iter().sum::<f32>() / background.data().len() as f32;
    let light = 0.7 + 0.6 * bg_mean;
    let alpha_img = Image::new(
        canvas,
        canvas,
        alpha.iter().flat_map(|&a| [a, a, a]).collect(),
    )
    .expect("alpha size");
    let obj_small = obj.resize(bbox.w, bbox.h);
    let alpha_small = alpha_img.resize(bbox.w, bbox.h);
    let mut image = background.clone();
    for yy in 0..bbox.h {
        for xx in 0..bbox.w {
            let a = alpha_small.get(xx, yy, 0);
            let (px, py) = (bbox.x + xx, bbox.y + yy);
            let bgp = background.pixel(px, py);
            let fg = obj_small.pixel(xx, yy);
            let blended = [0, 1, 2].map(|k| (fg[k] * light).min(1.0) * a + bgp[k] * (1.0 - a));
            image.set_pixel(px, py, blended);
        }
    }
    // PNG storage quantizes; keep the in-memory scene identical to what is stored
    let image = image.quantized();
    let background = background.quantized();
    let crop = image
        .crop(bbox.x, bbox.y, bbox.w, bbox.h)
        .expect("bbox inside canvas")
        .resize(canvas, canvas)
        .quantized();
    Scene {
        image,
        background,
        bbox,
        crop,
    }
}

fn object_kind_for(seed: u64) -> ObjectKind {
    if seed % 2 == 0 {
        ObjectKind::TexturedPolygon
    } else {
        ObjectKind::MarkedSprite
    }
}

/// Writes all scenes and the manifest under `out_dir`.
pub fn generate_dataset(cfg: &GenConfig, out_dir: &Path, overwrite: bool) -> Result<DatasetManifest> {
    if cfg.views < 2 {
        return Err(Error::Param(format!("views must be >= 2, got {}", cfg.views)));
    }
    if cfg.canvas_size % cfg.latent_factor != 0 {
        return Err(Error::Param(format!(
            "canvas size {} not a multiple of {}",
            cfg.canvas_size, cfg.latent_factor
        )));
    }
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(Error::Param(format!(
                "{} is not empty; pass overwrite to replace it",
                out_dir.display()
            )));
        }
        let scenes = out_dir.join("scenes");
        if scenes.exists() {
            fs::remove_dir_all(&scenes).map_err(|e| Error::io(&scenes, e))?;
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut records = Vec::new();
    let total = cfg.objects + cfg.pretrain_objects;
    for o in 0..total {
        let object_id = format!("obj{o:04}");
        let object_seed = derive_seed(cfg.seed, &[o as u64]);
        let kind = object_kind_for(object_seed);
        let is_test = o < cfg.objects;
        let dir = out_dir.join("scenes").join(&object_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rel = |name: String| format!("scenes/{object_id}/{name}");

        for j in 0..cfg.views {
            let scene = render_scene(object_seed, kind, j, cfg.views, cfg.canvas_size, cfg.latent_factor);
            let save = |img: &Image, name: &str| img.save_png(&dir.join(name));
            save(&scene.image, &format!("view{j}.png"))?;
            save(&scene.background, &format!("bg{j}.png"))?;
            save(&scene.crop, &format!("ref{j}.png"))?;
            let b = scene.bbox;
            let bbox_path = dir.join(format!("bbox_{j}.txt"));
            fs::write(&bbox_path, format!("{} {} {} {}\n", b.x, b.y, b.w, b.h))
                .map_err(|e| Error::io(&bbox_path, e))?;

            let held_out = cfg.views - 1;
            let (split, ref_views): (Split, Vec<usize>) = if !is_test {
                (Split::Pretrain, (0..cfg.views).filter(|&v| v != j).collect())
            } else if j == held_out {
                (Split::Test, (0..held_out).collect())
            } else {
                (Split::Finetune, (0..held_out).filter(|&v| v != j).collect())
            };
            records.push(ExampleRecord {
                object_id: object_id.clone(),
                object_kind: kind,
                view: j,
                split,
                ground_truth: rel(format!("view{j}.png")),
                background: rel(format!("bg{j}.png")),
                bbox_file: rel(format!("bbox_{j}.txt")),
                bbox: scene.bbox,
                references: ref_views.iter().map(|v| rel(format!("ref{v}.png"))).collect(),
                reference_views: ref_views,
            });
        }
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        generator_seed: cfg.seed,
        canvas_size: cfg.canvas_size,
        views: cfg.views,
        records,
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads `manifest.json` from a dataset directory (or the file itself).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let (file, root) = if path.is_dir() {
        (path.join(MANIFEST_FILE), path.to_path_buf())
    } else {
        (
            path.to_path_buf(),
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
        )
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&file, e))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::Version(format!(
            "manifest format {} (expected {MANIFEST_VERSION})",
            m.format_version
        )));
    }
    m.root = root;
    m.validate()?;
    Ok(m)
}

/// One composition instance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub background: Image,
    pub ground_truth: Image,
    pub bbox: BoundingBox,
    pub references: Vec<Image>,
    pub object_id: String,
    pub view_ids: Vec<usize>,
}

/// In-memory image store keyed by manifest-relative path.
#[derive(Default, Debug)]
pub struct ImageCache {
    images: HashMap<String, Image>,
}

impl ImageCache {
    pub fn get(&mut self, manifest: &DatasetManifest, record: &str, rel: &str) -> Result<&Image> {
        if !self.images.contains_key(rel) {
            let img = Image::load_png(&manifest.path(rel)).map_err(|e| Error::Load {
                record: record.to_string(),
                message: e.to_string(),
            })?;
            self.images.insert(rel.to_string(), img);
        }
        Ok(&self.images[rel])
    }

    /// Loads every file of the given records.
    pub fn preload<'a>(
        &mut self,
        manifest: &DatasetManifest,
        records: impl IntoIterator<Item = &'a ExampleRecord>,
    ) -> Result<()> {
        for r in records {
            let id = r.id();
            self.get(manifest, &id, &r.ground_truth)?;
            for rel in &r.references {
                self.get(manifest, &id, rel)?;
            }
        }
        Ok(())
    }
}

/// Builds a composition instance from a record: the ground-truth view with its
/// box erased as background, and `k` perturbed references drawn from the
/// other views.
pub fn assemble_example(
    manifest: &DatasetManifest,
    record: &ExampleRecord,
    k: usize,
    seed: u64,
    perturb: &PerturbConfig,
    cache: &mut ImageCache,
) -> Result<TrainingExample> {
    let available = record.references.len();
    if k == 0 || k > available.min(MAX_REFERENCES) {
        return Err(Error::Param(format!(
            "{}: requested {k} references, {available} available (max {MAX_REFERENCES})",
            record.id()
        )));
    }
    let id = record.id();
    let ground_truth = cache.get(manifest, &id, &record.ground_truth)?.clone();
    let background = erase_box(&ground_truth, &record.bbox);
    let mut order: Vec<usize> = (0..available).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.truncate(k);
    let mut references = Vec::with_capacity(k);
    let mut view_ids = Vec::with_capacity(k);
    for (slot, &i) in order.iter().enumerate() {
        let crop = cache.get(manifest, &id, &record.references[i])?;
        references.push(perturb_reference(crop, derive_seed(seed, &[slot as u64, 1]), perturb));
        view_ids.push(record.reference_views[i]);
    }
    Ok(TrainingExample {
        background,
        ground_truth,
        bbox: record.bbox,
        references,
        object_id: record.object_id.clone(),
        view_ids,
    })
}
