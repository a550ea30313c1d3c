//! Procedural scenes of flat-colored shapes with exact segmentation maps and
//! edge sketches, plus PNG/JSON-lines dataset storage.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modulation::{ConditionedSet, ModalityBundle};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_NUM_CLASSES: usize = 6;
pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const COLOR_JITTER: f64 = 0.05;
pub const SKETCH_THRESHOLD: f64 = 0.2;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

const PALETTE_LEVEL: f64 = 0.8;

/// `K` colors in `[-1, 1]^3`: the cube corners (scaled to +-0.8) in a fixed
/// order, then greedy farthest-point picks from a 5-level grid.
pub fn palette(num_classes: usize) -> Vec<[f64; 3]> {
    let l = PALETTE_LEVEL;
    let corners = [
        [-l, -l, -l],
        [l, l, l],
        [l, -l, -l],
        [-l, l, -l],
        [-l, -l, l],
        [l, l, -l],
        [-l, l, l],
        [l, -l, l],
    ];
    let mut out: Vec<[f64; 3]> = corners.iter().take(num_classes).copied().collect();
    let levels: Vec<f64> = (0..5).map(|i| -l + i as f64 * l / 2.0).collect();
    let mut grid = Vec::with_capacity(125);
    for &r in &levels {
        for &g in &levels {
            for &b in &levels {
                grid.push([r, g, b]);
            }
        }
    }
    while out.len() < num_classes {
        let best = grid
            .iter()
            .map(|c| {
                let d = out.iter().map(|p| dist2(c, p)).fold(f64::INFINITY, f64::min);
                (d, *c)
            })
            .fold((f64::NEG_INFINITY, grid[0]), |acc, x| if x.0 > acc.0 { x } else { acc });
        if best.0 <= 0.0 {
            // Grid exhausted; fall back to repeating colors.
            out.push(out[out.len() % 8]);
        } else {
            out.push(best.1);
        }
    }
    out
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

/// A placed shape. `half_extent` is the radius for circles, the half width
/// and half height for rectangles, and the circumradius (first component)
/// for upright equilateral triangles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: u8,
    pub center: [f64; 2],
    pub half_extent: [f64; 2],
    pub z: u32,
}

impl Shape {
    /// Whether the point `(x, y)` (pixel units, x to the right) is covered.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.half_extent[0] * self.half_extent[0],
            ShapeKind::Rectangle => dx.abs() <= self.half_extent[0] && dy.abs() <= self.half_extent[1],
            ShapeKind::Triangle => {
                let r = self.half_extent[0];
                let h = 3f64.sqrt() / 2.0 * r;
                let v = [[0.0, -r], [-h, 0.5 * r], [h, 0.5 * r]];
                let edge = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (dy - a[1]) - (b[1] - a[1]) * (dx - a[0]);
                let (e0, e1, e2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams { image_size: DEFAULT_IMAGE_SIZE, num_classes: DEFAULT_NUM_CLASSES, min_shapes: 1, max_shapes: 4 }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::InvalidArgument(format!("num_classes must be in 2..=256, got {}", self.num_classes)));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidArgument(format!("image size {} is too small", self.image_size)));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::InvalidArgument("min_shapes exceeds max_shapes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub background: u8,
    pub shapes: Vec<Shape>,
    /// Base class colors.
    pub palette: Vec<[f64; 3]>,
    /// Per-class brightness offset for this scene.
    pub jitter: Vec<f64>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn class_color(&self, class: u8) -> [f64; 3] {
        let c = self.palette[class as usize];
        let j = self.jitter[class as usize];
        [(c[0] + j).clamp(-1.0, 1.0), (c[1] + j).clamp(-1.0, 1.0), (c[2] + j).clamp(-1.0, 1.0)]
    }
}

/// Random scene drawn from `seed`.
pub fn generate_scene(params: &SceneParams, seed: u64) -> Result<SceneSpec> {
    params.validate()?;
    let mut rng = seeded(seed);
    let k = params.num_classes;
    let size = params.image_size as f64;
    let background = rng.random_range(0..k) as u8;
    let jitter = (0..k).map(|_| rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).collect();
    let count = rng.random_range(params.min_shapes..=params.max_shapes);
    let (lo, hi) = (size * 0.125, size * 0.3);
    let mut shapes = Vec::with_capacity(count);
    for z in 0..count {
        let kind = match rng.random_range(0..3) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Triangle,
        };
        // Shapes take any class except the background.
        let mut class = rng.random_range(0..k - 1) as u8;
        if class >= background {
            class += 1;
        }
        let half_extent = [rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
        let reach = match kind {
            ShapeKind::Rectangle => half_extent,
            _ => [half_extent[0], half_extent[0]],
        };
        let center = [rng.random_range(reach[0]..=size - reach[0]), rng.random_range(reach[1]..=size - reach[1])];
        shapes.push(Shape { kind, class, center, half_extent, z: z as u32 });
    }
    Ok(SceneSpec {
        image_size: params.image_size,
        num_classes: k,
        background,
        shapes,
        palette: palette(k),
        jitter,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    /// `[3, H, W]` in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub seg: Vec<u8>,
    pub sketch: Vec<f32>,
    pub seed: u64,
    pub num_classes: usize,
}

impl PairedExample {
    pub fn size(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn bundle(&self) -> ModalityBundle {
        let s = self.size();
        ModalityBundle {
            height: s,
            width: s,
            num_classes: self.num_classes,
            seg: Some(self.seg.clone()),
            sketch: Some(self.sketch.clone()),
        }
    }
}

/// Painter's rasterization at pixel centers in increasing z order.
pub fn render(spec: &SceneSpec) -> PairedExample {
    let n = spec.image_size;
    let mut seg = vec![spec.background; n * n];
    let mut order: Vec<&Shape> = spec.shapes.iter().collect();
    order.sort_by_key(|s| s.z);
    for shape in order {
        for y in 0..n {
            for x in 0..n {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    seg[y * n + x] = shape.class;
                }
            }
        }
    }
    let colors: Vec<[f64; 3]> = (0..spec.num_classes).map(|k| spec.class_color(k as u8)).collect();
    let mut image = vec![0f32; 3 * n * n];
    for (i, &k) in seg.iter().enumerate() {
        for c in 0..3 {
            image[c * n * n + i] = colors[k as usize][c] as f32;
        }
    }
    let image = Tensor::new(&[3, n, n], image).expect("consistent shape");
    let sketch = sketch_from_image(&image);
    PairedExample { image, seg, sketch, seed: spec.seed, num_classes: spec.num_classes }
}

/// Luma of a `[3, H, W]` image, in the image's own value range.
pub fn grayscale(image: &Tensor<f32>) -> Vec<f64> {
    let plane = image.shape()[1] * image.shape()[2];
    let d = image.data();
    (0..plane).map(|i| 0.299 * d[i] as f64 + 0.587 * d[plane + i] as f64 + 0.114 * d[2 * plane + i] as f64).collect()
}

/// Sobel gradient magnitude of the luma (edge-replicated borders), binarized
/// at [`SKETCH_THRESHOLD`] and smoothed with a 3x3 box filter.
pub fn sketch_from_image(image: &Tensor<f32>) -> Vec<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let g = grayscale(image);
    let at = |v: &[f64], y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        v[yy * w + xx]
    };
    let mut edges = vec![0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(&g, y - 1, x + 1) + 2.0 * at(&g, y, x + 1) + at(&g, y + 1, x + 1))
                - (at(&g, y - 1, x - 1) + 2.0 * at(&g, y, x - 1) + at(&g, y + 1, x - 1));
            let gy = (at(&g, y + 1, x - 1) + 2.0 * at(&g, y + 1, x) + at(&g, y + 1, x + 1))
                - (at(&g, y - 1, x - 1) + 2.0 * at(&g, y - 1, x) + at(&g, y - 1, x + 1));
            if (gx * gx + gy * gy).sqrt() > SKETCH_THRESHOLD {
                edges[y as usize * w + x as usize] = 1.0;
            }
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    acc += at(&edges, y + dy, x + dx);
                }
            }
            out[y as usize * w + x as usize] = (acc / 9.0) as f32;
        }
    }
    out
}

/// Render `count` scenes with seeds `master_seed, master_seed + 1, ..`.
pub fn generate_examples(params: &SceneParams, count: usize, master_seed: u64) -> Result<Vec<PairedExample>> {
    (0..count as u64).map(|i| generate_scene(params, master_seed.wrapping_add(i)).map(|s| render(&s))).collect()
}

/// Stack examples into `[N, 3, H, W]` images plus full condition bundles.
pub fn to_conditioned_set<T: Scalar>(examples: &[PairedExample]) -> Result<ConditionedSet<T>> {
    ConditionedSet::new(stack_images(examples)?, examples.iter().map(|e| e.bundle()).collect())
}

pub fn stack_images<T: Scalar>(examples: &[PairedExample]) -> Result<Tensor<T>> {
    let first = examples.first().ok_or_else(|| Error::Dataset("no examples".into()))?;
    let parts = examples
        .iter()
        .map(|e| {
            if e.image.shape() != first.image.shape() {
                return Err(Error::Dataset(format!("image shape {:?} vs {:?}", e.image.shape(), first.image.shape())));
            }
            let mut shape = vec![1];
            shape.extend_from_slice(e.image.shape());
            e.image.cast::<T>().reshape(&shape)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack0(&parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub seg: String,
    pub sketch: String,
    pub seed: u64,
    pub num_classes: usize,
}

pub fn to_u8(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_u8(v: u8) -> f32 {
    (v as f64 / 127.5 - 1.0) as f32
}

/// Encode a `[3, H, W]` image in `[-1, 1]` as 8-bit RGB PNG bytes.
pub fn image_to_rgb8(image: &Tensor<f32>) -> Vec<u8> {
    let plane = image.shape()[1] * image.shape()[2];
    let d = image.data();
    (0..plane).flat_map(|i| (0..3).map(move |c| to_u8(d[c * plane + i]))).collect()
}

/// Pixel layout of an 8-bit PNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PngColor {
    Gray,
    Rgb,
}

pub fn write_png(path: &Path, width: usize, height: usize, color: PngColor, data: &[u8]) -> Result<()> {
    let channels = match color {
        PngColor::Gray => 1,
        PngColor::Rgb => 3,
    };
    if data.len() != width * height * channels {
        return Err(Error::InvalidArgument(format!("{} bytes for a {width}x{height}x{channels} image", data.len())));
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(match color {
        PngColor::Gray => png::ColorType::Grayscale,
        PngColor::Rgb => png::ColorType::Rgb,
    });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}

/// Decode an 8-bit PNG, returning `(width, height, channels, bytes)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Dataset("png too large".into()))?];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Dataset(format!("{}: expected 8-bit PNG", path.display())));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::Dataset(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, channels, buf))
}

/// Write PNG triples under `dir` and a `manifest.jsonl` listing them.
pub fn write_dataset(examples: &[PairedExample], dir: &Path) -> Result<()> {
    for sub in ["images", "seg", "sketch"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    for (i, ex) in examples.iter().enumerate() {
        let (h, w) = (ex.image.shape()[1], ex.image.shape()[2]);
        let rec = ManifestRecord {
            image: format!("images/{i:06}.png"),
            seg: format!("seg/{i:06}.png"),
            sketch: format!("sketch/{i:06}.png"),
            seed: ex.seed,
            num_classes: ex.num_classes,
        };
        write_png(&dir.join(&rec.image), w, h, PngColor::Rgb, &image_to_rgb8(&ex.image))?;
        write_png(&dir.join(&rec.seg), w, h, PngColor::Gray, &ex.seg)?;
        let sk: Vec<u8> = ex.sketch.iter().map(|&v| (v as f64 * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        write_png(&dir.join(&rec.sketch), w, h, PngColor::Gray, &sk)?;
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

/// Read a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<PairedExample>> {
    let path = dir.join(MANIFEST_FILE);
    let file = File::open(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(read_record(dir, &rec)?);
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("{} lists no examples", path.display())));
    }
    Ok(out)
}

fn read_record(dir: &Path, rec: &ManifestRecord) -> Result<PairedExample> {
    let (w, h, c, rgb) = read_png(&dir.join(&rec.image))?;
    if c != 3 {
        return Err(Error::Dataset(format!("{}: expected RGB", rec.image)));
    }
    let expect_gray = |name: &str| -> Result<Vec<u8>> {
        let (gw, gh, gc, data) = read_png(&dir.join(name))?;
        if (gw, gh, gc) != (w, h, 1) {
            return Err(Error::Dataset(format!("{name}: expected {w}x{h} grayscale, got {gw}x{gh}x{gc}")));
        }
        Ok(data)
    };
    let seg = expect_gray(&rec.seg)?;
    if rec.num_classes < 2 {
        return Err(Error::Dataset(format!("{}: num_classes {}", rec.image, rec.num_classes)));
    }
    if let Some(&bad) = seg.iter().find(|&&k| k as usize >= rec.num_classes) {
        return Err(Error::Dataset(format!("{}: class id {bad} >= {}", rec.seg, rec.num_classes)));
    }
    let sketch = expect_gray(&rec.sketch)?.iter().map(|&v| v as f32 / 255.0).collect();
    let plane = w * h;
    let mut image = vec![0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            image[ch * plane + i] = from_u8(rgb[3 * i + ch]);
        }
    }
    Ok(PairedExample {
        image: Tensor::new(&[3, h, w], image)?,
        seg,
        sketch,
        seed: rec.seed,
        num_classes: rec.num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_scene(background: u8, class: u8) -> SceneSpec {
        SceneSpec {
            image_size: 32,
            num_classes: 6,
            background,
            shapes: vec![Shape {
                kind: ShapeKind::Rectangle,
                class,
                center: [16.0, 16.0],
                half_extent: [6.0, 4.0],
                z: 0,
            }],
            palette: palette(6),
            jitter: vec![0.0; 6],
            seed: 0,
        }
    }

    #[test]
    fn palette_is_separated() {
        for k in [2, 6, 8, 12] {
            let p = palette(k);
            assert_eq!(p.len(), k);
            for i in 0..k {
                for j in 0..i {
                    assert!(dist2(&p[i], &p[j]) > 0.5, "{k}: {i} vs {j}");
                }
            }
        }
    }

    #[test]
    fn scene_is_deterministic() {
        let p = SceneParams::default();
        assert_eq!(generate_scene(&p, 17).unwrap(), generate_scene(&p, 17).unwrap());
        assert_ne!(generate_scene(&p, 17).unwrap(), generate_scene(&p, 18).unwrap());
    }

    #[test]
    fn background_only_scene() {
        let p = SceneParams { min_shapes: 0, max_shapes: 0, ..SceneParams::default() };
        let ex = render(&generate_scene(&p, 3).unwrap());
        assert!(ex.seg.iter().all(|&k| k == ex.seg[0]));
        assert!(ex.sketch.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_stay_inside_canvas() {
        let p = SceneParams::default();
        for seed in 0..500 {
            let s = generate_scene(&p, seed).unwrap();
            assert!((1..=4).contains(&s.shapes.len()));
            for sh in &s.shapes {
                assert!(sh.class != s.background && (sh.class as usize) < 6);
                let r = if sh.kind == ShapeKind::Rectangle { sh.half_extent } else { [sh.half_extent[0]; 2] };
                assert!(sh.center[0] - r[0] >= 0.0 && sh.center[0] + r[0] <= 32.0);
                assert!(sh.center[1] - r[1] >= 0.0 && sh.center[1] + r[1] <= 32.0);
            }
        }
    }

    #[test]
    fn centered_rectangle_geometry() {
        let ex = render(&rect_scene(0, 3));
        let mut classes: Vec<u8> = ex.seg.clone();
        classes.sort();
        classes.dedup();
        assert_eq!(classes, vec![0, 3]);
        // Pixel centers inside [10, 22] x [12, 20] are covered.
        let inside = |x: usize, y: usize| (10..22).contains(&x) && (12..20).contains(&y);
        let mut any = false;
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(ex.seg[y * 32 + x] == 3, inside(x, y));
                // Chebyshev distance to the boundary between covered and uncovered pixels.
                let d = (0..32)
                    .flat_map(|yy| (0..32).map(move |xx| (xx, yy)))
                    .filter(|&(xx, yy)| inside(xx, yy) != inside(x, y))
                    .map(|(xx, yy)| (xx as isize - x as isize).abs().max((yy as isize - y as isize).abs()))
                    .min()
                    .unwrap();
                if ex.sketch[y * 32 + x] > 0.0 {
                    any = true;
                    assert!(d <= 2, "sketch at ({x},{y}) is {d} px from the edge");
                }
            }
        }
        assert!(any);
    }

    #[test]
    fn every_pair_of_classes_leaves_an_edge() {
        let p = palette(6);
        for a in 0..6u8 {
            for b in 0..6u8 {
                if a == b {
                    continue;
                }
                let mut spec = rect_scene(a, b);
                // Worst-case jitter pulls the two colors together.
                let ga = 0.299 * p[a as usize][0] + 0.587 * p[a as usize][1] + 0.114 * p[a as usize][2];
                let gb = 0.299 * p[b as usize][0] + 0.587 * p[b as usize][1] + 0.114 * p[b as usize][2];
                let s = if ga > gb { 1.0 } else { -1.0 };
                spec.jitter[a as usize] = -s * COLOR_JITTER;
                spec.jitter[b as usize] = s * COLOR_JITTER;
                let ex = render(&spec);
                assert!(ex.sketch.iter().any(|&v| v > 0.0), "classes {a} and {b}");
            }
        }
    }

    #[test]
    fn all_classes_appear() {
        let p = SceneParams::default();
        let mut seen = [false; 6];
        for seed in 0..10_000 {
            let s = generate_scene(&p, seed).unwrap();
            seen[s.background as usize] = true;
            for sh in &s.shapes {
                seen[sh.class as usize] = true;
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn quantization_bounds() {
        for i in 0..=2000 {
            let v = -1.0 + i as f32 / 1000.0;
            assert!((from_u8(to_u8(v)) - v).abs() <= 1.0 / 127.5);
        }
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
    }
}
