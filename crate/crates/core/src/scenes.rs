//! Synthetic multi-class counting scenes and their on-disk format.
//!
//! A class is a (shape, colour) pair. Every scene has one target class and
//! one distractor class that differs from it in both shape and colour.

use std::fs;
use std::path::{Path, PathBuf};

use mafea_tensor::{io, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, MafeaError, Result};
use crate::objectives::Point;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
    Ring,
}

pub const SHAPES: [Shape; 3] = [Shape::Disc, Shape::Square, Shape::Ring];

/// Class palette, RGB in `[0, 1]`.
pub const COLOURS: [[f64; 3]; 3] = [[0.9, 0.25, 0.2], [0.25, 0.8, 0.3], [0.25, 0.4, 0.95]];

/// Class id `shape * 3 + colour`.
pub fn class_parts(class: usize) -> (Shape, usize) {
    (SHAPES[class / COLOURS.len()], class % COLOURS.len())
}

pub const CLASS_COUNT: usize = SHAPES.len() * COLOURS.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// `[H, W]`
    pub image_size: [usize; 2],
    pub exemplar_size: [usize; 2],
    /// Exemplar crops stored per scene.
    pub exemplars: usize,
    /// Inclusive target count range.
    pub target_count: [usize; 2],
    /// Inclusive distractor count range before the ratio floor.
    pub distractor_count: [usize; 2],
    /// Distractors are at least this fraction of the targets.
    pub min_nontarget_ratio: f64,
    /// Inclusive object radius range in pixels.
    pub radius: [f64; 2],
    /// Pixel noise standard deviation.
    pub noise: f64,
    pub background: [f64; 3],
    /// Density kernel width.
    pub sigma: f64,
    pub non_overlap: bool,
    /// Permits scenes without targets (no exemplar crops).
    pub zero_shot: bool,
}

impl SceneSpec {
    pub fn desk() -> Self {
        Self {
            image_size: [64, 64],
            exemplar_size: [16, 16],
            exemplars: 3,
            target_count: [3, 10],
            distractor_count: [3, 10],
            min_nontarget_ratio: 0.2,
            radius: [2.5, 4.0],
            noise: 0.03,
            background: [0.12, 0.12, 0.12],
            sigma: 2.0,
            non_overlap: true,
            zero_shot: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        let [eh, ew] = self.exemplar_size;
        if h == 0 || w == 0 || eh == 0 || ew == 0 {
            return Err(config_err("image and exemplar sizes must be positive"));
        }
        if self.target_count[0] > self.target_count[1] || self.distractor_count[0] > self.distractor_count[1] {
            return Err(config_err("count ranges must be ordered"));
        }
        if !(self.radius[0] > 0.0 && self.radius[0] <= self.radius[1]) {
            return Err(config_err("radius range must be positive and ordered"));
        }
        if 2.0 * self.radius[1] + 2.0 >= h.min(w) as f64 {
            return Err(config_err("objects do not fit in the image"));
        }
        if !(self.sigma > 0.0) || self.noise < 0.0 || !(self.min_nontarget_ratio >= 0.0) {
            return Err(config_err("sigma must be positive, noise and ratio non-negative"));
        }
        if self.exemplars == 0 && !self.zero_shot {
            return Err(config_err("few-shot scenes need at least one exemplar"));
        }
        Ok(())
    }
}

/// One query image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct CountingSample {
    /// `[3, H, W]`
    pub query: Tensor,
    /// `[3, h, w]` crops of target instances.
    pub exemplars: Vec<Tensor>,
    /// Exemplar box `(w, h)` in query pixels.
    pub boxes: Vec<[f64; 2]>,
    pub points: Vec<Point>,
    pub nontarget_points: Vec<Point>,
    /// `[1, H, W]`
    pub density: Tensor,
    pub target_class: usize,
    pub distractor_class: usize,
}

impl CountingSample {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn image_size(&self) -> [usize; 2] {
        [self.query.shape()[1], self.query.shape()[2]]
    }
}

struct Object {
    centre: Point,
    radius: f64,
    class: usize,
}

fn covers(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Disc => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs().max(dy.abs()) <= 0.85 * r,
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.3 * r * r
        }
    }
}

fn place<R: Rng>(spec: &SceneSpec, rng: &mut R, placed: &mut Vec<Object>, class: usize, n: usize) -> Result<()> {
    let [h, w] = spec.image_size;
    for _ in 0..n {
        let mut ok = false;
        for _ in 0..1000 {
            let r = rng.random_range(spec.radius[0]..=spec.radius[1]);
            let x = rng.random_range(r + 1.0..w as f64 - r - 1.0);
            let y = rng.random_range(r + 1.0..h as f64 - r - 1.0);
            let clear = !spec.non_overlap
                || placed.iter().all(|o| {
                    let (dx, dy) = (o.centre[0] - x, o.centre[1] - y);
                    (dx * dx + dy * dy).sqrt() >= o.radius + r + 1.0
                });
            if clear {
                placed.push(Object {
                    centre: [x, y],
                    radius: r,
                    class,
                });
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(data_err(format!(
                "could not place {n} objects of class {class} without overlap"
            )));
        }
    }
    Ok(())
}

fn render<R: Rng>(spec: &SceneSpec, objects: &[Object], rng: &mut R) -> Tensor {
    let [h, w] = spec.image_size;
    let mut img = Tensor::zeros(&[3, h, w]);
    let data = img.data_mut();
    for c in 0..3 {
        data[c * h * w..(c + 1) * h * w].fill(spec.background[c]);
    }
    for o in objects {
        let (shape, colour) = class_parts(o.class);
        let rgb = COLOURS[colour];
        let [cx, cy] = o.centre;
        let y0 = (cy - o.radius).floor().max(0.0) as usize;
        let y1 = ((cy + o.radius).ceil() as usize + 1).min(h);
        let x0 = (cx - o.radius).floor().max(0.0) as usize;
        let x1 = ((cx + o.radius).ceil() as usize + 1).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                if covers(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, o.radius) {
                    for c in 0..3 {
                        data[(c * h + y) * w + x] = rgb[c];
                    }
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let n = Normal::new(0.0, spec.noise).expect("valid noise");
        for v in data.iter_mut() {
            *v += n.sample(rng);
        }
    }
    img
}

/// Bilinear resize of the `(x0, y0, bw, bh)` window of `img[3, H, W]` to
/// `[3, oh, ow]`, edge-clamped.
pub fn crop_resize(img: &Tensor, x0: f64, y0: f64, bw: f64, bh: f64, out: [usize; 2]) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let [oh, ow] = out;
    let src = img.data();
    let sample = |c: usize, sx: f64, sy: f64| {
        let sx = sx.clamp(0.0, (w - 1) as f64);
        let sy = sy.clamp(0.0, (h - 1) as f64);
        let (ix, iy) = (sx.floor() as usize, sy.floor() as usize);
        let (jx, jy) = ((ix + 1).min(w - 1), (iy + 1).min(h - 1));
        let (fx, fy) = (sx - ix as f64, sy - iy as f64);
        let at = |y: usize, x: usize| src[(c * h + y) * w + x];
        (1.0 - fy) * ((1.0 - fx) * at(iy, ix) + fx * at(iy, jx)) + fy * ((1.0 - fx) * at(jy, ix) + fx * at(jy, jx))
    };
    Tensor::from_fn(&[3, oh, ow], |i| {
        let c = i / (oh * ow);
        let v = (i / ow) % oh;
        let u = i % ow;
        let sx = x0 + (u as f64 + 0.5) * bw / ow as f64 - 0.5;
        let sy = y0 + (v as f64 + 0.5) * bh / oh as f64 - 0.5;
        sample(c, sx, sy)
    })
}

/// Sum of per-point Gaussians over pixel centres, each truncated at 4 sigma,
/// clipped to the image and renormalised to unit mass.
pub fn density_from_points(points: &[Point], image: [usize; 2], sigma: f64) -> Tensor {
    let [h, w] = image;
    let mut map = Tensor::zeros(&[1, h, w]);
    let reach = (4.0 * sigma).ceil();
    let data = map.data_mut();
    let mut kernel = Vec::new();
    for &[px, py] in points {
        let y0 = (py - reach).floor().max(0.0) as usize;
        let y1 = ((py + reach).ceil().max(0.0) as usize).min(h);
        let x0 = (px - reach).floor().max(0.0) as usize;
        let x1 = ((px + reach).ceil().max(0.0) as usize).min(w);
        kernel.clear();
        let mut total = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - px, y as f64 + 0.5 - py);
                let d2 = dx * dx + dy * dy;
                let v = if d2 <= reach * reach {
                    (-d2 / (2.0 * sigma * sigma)).exp()
                } else {
                    0.0
                };
                kernel.push(v);
                total += v;
            }
        }
        if total == 0.0 {
            continue;
        }
        let mut k = kernel.iter();
        for y in y0..y1 {
            for x in x0..x1 {
                data[y * w + x] += k.next().expect("kernel sized to window") / total;
            }
        }
    }
    map
}

/// Draws one scene. Deterministic in `(spec, rng state)`.
pub fn generate_scene<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Result<CountingSample> {
    spec.validate()?;
    let target_class = rng.random_range(0..CLASS_COUNT);
    let (ts, tc) = class_parts(target_class);
    let distractors: Vec<usize> = (0..CLASS_COUNT)
        .filter(|&c| {
            let (s, col) = class_parts(c);
            s != ts && col != tc
        })
        .collect();
    let distractor_class = distractors[rng.random_range(0..distractors.len())];

    let n_target = rng.random_range(spec.target_count[0]..=spec.target_count[1]);
    if n_target == 0 && !spec.zero_shot {
        return Err(data_err("scene has no target objects to crop exemplars from"));
    }
    let floor = (spec.min_nontarget_ratio * n_target as f64).ceil() as usize;
    let n_distractor = rng
        .random_range(spec.distractor_count[0]..=spec.distractor_count[1])
        .max(floor);

    let mut objects = Vec::with_capacity(n_target + n_distractor);
    place(spec, rng, &mut objects, target_class, n_target)?;
    place(spec, rng, &mut objects, distractor_class, n_distractor)?;
    let query = render(spec, &objects, rng);

    let targets: Vec<&Object> = objects.iter().filter(|o| o.class == target_class).collect();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.shuffle(rng);
    let n_ex = if targets.is_empty() { 0 } else { spec.exemplars };
    let mut exemplars = Vec::with_capacity(n_ex);
    let mut boxes = Vec::with_capacity(n_ex);
    for i in 0..n_ex {
        let o = targets[order[i % order.len()]];
        let side = 2.0 * o.radius + 2.0;
        let (x0, y0) = (o.centre[0] - side / 2.0, o.centre[1] - side / 2.0);
        exemplars.push(crop_resize(&query, x0, y0, side, side, spec.exemplar_size));
        boxes.push([side, side]);
    }

    let points: Vec<Point> = targets.iter().map(|o| o.centre).collect();
    let nontarget_points = objects
        .iter()
        .filter(|o| o.class != target_class)
        .map(|o| o.centre)
        .collect();
    let density = density_from_points(&points, spec.image_size, spec.sigma);
    Ok(CountingSample {
        query,
        exemplars,
        boxes,
        points,
        nontarget_points,
        density,
        target_class,
        distractor_class,
    })
}

/// Scene `index` of a dataset seeded with `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Validation splits of the multi-class subset of FSC-147.
pub fn fsc147_multi_indices(split: &str) -> Result<Vec<u32>> {
    match split {
        "val" => Ok(vec![
            216, 236, 243, 244, 252, 752, 913, 1930, 1999, 2303, 2305, 2306, 2826, 2830, 2837, 2868, 2872, 2875,
            2890, 3520, 3592, 3785, 3979, 3980, 4102, 4851, 5103, 5105, 5111, 5669, 6872,
        ]),
        "test" => Ok(vec![336, 343, 344, 681, 2143, 3114, 4495, 4885, 4920, 4921, 5379, 6732]),
        other => Err(data_err(format!("unknown split {other:?}, expected val or test"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Annotation {
    image_size: [usize; 2],
    points: Vec<Point>,
    nontarget_points: Vec<Point>,
    boxes: Vec<[f64; 2]>,
    target_class: usize,
    distractor_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<SceneSpec>,
}

fn exemplar_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("exemplar_{i}.mtnsr"))
}

pub fn save_sample(sample: &CountingSample, dir: impl AsRef<Path>, spec: Option<&SceneSpec>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    io::save_tensor(dir.join("query.mtnsr"), &sample.query)?;
    io::save_tensor(dir.join("density.mtnsr"), &sample.density)?;
    for (i, e) in sample.exemplars.iter().enumerate() {
        io::save_tensor(exemplar_file(dir, i), e)?;
    }
    let annot = Annotation {
        image_size: sample.image_size(),
        points: sample.points.clone(),
        nontarget_points: sample.nontarget_points.clone(),
        boxes: sample.boxes.clone(),
        target_class: sample.target_class,
        distractor_class: sample.distractor_class,
        spec: spec.cloned(),
    };
    fs::write(dir.join("annot.json"), serde_json::to_string_pretty(&annot)?)?;
    Ok(())
}

fn in_image(p: &Point, [h, w]: [usize; 2]) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] < w as f64 && p[1] < h as f64
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    io::load_tensor(path).map_err(|e| match e {
        mafea_tensor::TensorError::Io(err) => data_err(format!("{}: {err}", path.display())),
        other => MafeaError::Tensor(other),
    })
}

pub fn load_sample(dir: impl AsRef<Path>) -> Result<CountingSample> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("annot.json"))
        .map_err(|e| data_err(format!("{}: {e}", dir.join("annot.json").display())))?;
    let annot: Annotation = serde_json::from_str(&text)?;
    let query = read_tensor(&dir.join("query.mtnsr"))?;
    let density = read_tensor(&dir.join("density.mtnsr"))?;
    let [h, w] = annot.image_size;
    if query.shape() != [3, h, w] {
        return Err(data_err(format!("query {:?} does not match image size {h}x{w}", query.shape())));
    }
    if density.shape() != [1, h, w] {
        return Err(data_err(format!("density {:?} does not match image size {h}x{w}", density.shape())));
    }
    if let Some(p) = annot
        .points
        .iter()
        .chain(&annot.nontarget_points)
        .find(|p| !in_image(p, annot.image_size))
    {
        return Err(data_err(format!("point ({}, {}) outside the image", p[0], p[1])));
    }
    if annot.boxes.iter().any(|b| !(b[0] > 0.0 && b[1] > 0.0)) {
        return Err(data_err("non-positive exemplar box"));
    }
    if annot.target_class >= CLASS_COUNT || annot.distractor_class >= CLASS_COUNT {
        return Err(data_err("class id out of range"));
    }
    let mut exemplars = Vec::with_capacity(annot.boxes.len());
    for i in 0..annot.boxes.len() {
        let e = read_tensor(&exemplar_file(dir, i))?;
        if e.rank() != 3 || e.shape()[0] != 3 {
            return Err(data_err(format!("exemplar {i} has shape {:?}", e.shape())));
        }
        exemplars.push(e);
    }
    if exemplar_file(dir, annot.boxes.len()).exists() {
        return Err(data_err("more exemplar files than boxes"));
    }
    Ok(CountingSample {
        query,
        exemplars,
        boxes: annot.boxes,
        points: annot.points,
        nontarget_points: annot.nontarget_points,
        density,
        target_class: annot.target_class,
        distractor_class: annot.distractor_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub spec: SceneSpec,
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<CountingSample>,
    pub eval: Vec<CountingSample>,
}

/// Generates `n` scenes in memory; the last quarter forms the eval split.
pub fn generate_dataset(spec: &SceneSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let n_eval = n / 4;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        samples.push(generate_scene(spec, &mut scene_rng(seed, i as u64))?);
    }
    let eval = samples.split_off(n - n_eval);
    let name = |i: usize| format!("sample_{i:04}");
    Ok(Dataset {
        manifest: Manifest {
            format_version: FORMAT_VERSION,
            seed,
            spec: spec.clone(),
            train: (0..n - n_eval).map(name).collect(),
            eval: (n - n_eval..n).map(name).collect(),
        },
        train: samples,
        eval,
    })
}

impl Dataset {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let names = self.manifest.train.iter().chain(&self.manifest.eval);
        for (name, sample) in names.zip(self.train.iter().chain(&self.eval)) {
            save_sample(sample, dir.join(name), Some(&self.manifest.spec))?;
        }
        fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(data_err(format!("unsupported dataset format {}", manifest.format_version)));
        }
        let load = |names: &[String]| -> Result<Vec<CountingSample>> {
            names.iter().map(|n| load_sample(dir.join(n))).collect()
        };
        let train = load(&manifest.train)?;
        let eval = load(&manifest.eval)?;
        Ok(Self { manifest, train, eval })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_indices() {
        let val = fsc147_multi_indices("val").unwrap();
        assert_eq!(val.len(), 31);
        assert_eq!(val[0], 216);
        let test = fsc147_multi_indices("test").unwrap();
        assert_eq!(test.len(), 12);
        assert!(test.contains(&336));
        assert!(fsc147_multi_indices("train").is_err());
    }

    #[test]
    fn density_mass() {
        assert_eq!(density_from_points(&[], [8, 8], 1.0).sum(), 0.0);
        let one = density_from_points(&[[32.3, 20.7]], [64, 64], 1.0);
        assert!((one.sum() - 1.0).abs() < 1e-12);
        let corner = density_from_points(&[[0.0, 0.0]], [64, 64], 1.0);
        assert!((corner.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distractor_differs_in_shape_and_colour() {
        let spec = SceneSpec::desk();
        for i in 0..20 {
            let s = generate_scene(&spec, &mut scene_rng(3, i)).unwrap();
            let (a, b) = (class_parts(s.target_class), class_parts(s.distractor_class));
            assert_ne!(a.0, b.0);
            assert_ne!(a.1, b.1);
            assert!(s.nontarget_points.len() as f64 >= 0.2 * s.points.len() as f64);
            assert_eq!(s.exemplars.len(), 3);
        }
    }

    #[test]
    fn zero_targets_without_zero_shot_is_an_error() {
        let mut spec = SceneSpec::desk();
        spec.target_count = [0, 0];
        assert!(generate_scene(&spec, &mut scene_rng(0, 0)).is_err());
        spec.zero_shot = true;
        let s = generate_scene(&spec, &mut scene_rng(0, 0)).unwrap();
        assert!(s.exemplars.is_empty());
        assert_eq!(s.density.sum(), 0.0);
    }

    #[test]
    fn crop_of_constant_image_is_constant() {
        let img = Tensor::full(&[3, 10, 10], 0.5);
        let c = crop_resize(&img, 2.0, 3.0, 5.0, 5.0, [16, 16]);
        assert!(c.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }
}
