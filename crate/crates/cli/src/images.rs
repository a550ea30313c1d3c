//! Image grids, strips and line plots written as PNG.

use std::path::Path;

use mcm::synth::{to_u8, write_png, PngColor};
use mcm::{Result, Scalar, Tensor};

pub const SEPARATOR: usize = 2;
const BACKGROUND: u8 = 255;

/// Tile `[N, 3, H, W]` images row-major into `cols` columns with 2 px
/// separators and write an RGB PNG.
pub fn write_grid<T: Scalar>(path: &Path, images: &Tensor<T>, cols: usize) -> Result<()> {
    let (w, h, pixels) = grid_pixels(images, cols);
    write_png(path, w, h, png_rgb(), &pixels)
}

fn png_rgb() -> PngColor {
    PngColor::Rgb
}

pub fn default_columns(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).max(1)
}

pub fn grid_pixels<T: Scalar>(images: &Tensor<T>, cols: usize) -> (usize, usize, Vec<u8>) {
    let [n, _, h, w] = *images.shape() else { panic!("grid expects [N, 3, H, W]") };
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let width = cols * w + (cols - 1) * SEPARATOR;
    let height = rows * h + (rows - 1) * SEPARATOR;
    let mut out = vec![BACKGROUND; width * height * 3];
    let d = images.data();
    let plane = h * w;
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        let (oy, ox) = (r * (h + SEPARATOR), c * (w + SEPARATOR));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = d[(i * 3 + ch) * plane + y * w + x].as_f64() as f32;
                    out[((oy + y) * width + ox + x) * 3 + ch] = to_u8(v);
                }
            }
        }
    }
    (width, height, out)
}

/// Line plot of several series over a shared x axis.
pub fn write_plot(path: &Path, series: &[(&[f64], [u8; 3])]) -> Result<()> {
    let (width, height, margin) = (480usize, 240usize, 16usize);
    let mut px = vec![255u8; width * height * 3];
    let put = |px: &mut Vec<u8>, x: usize, y: usize, c: [u8; 3]| {
        if x < width && y < height {
            px[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&c);
        }
    };
    for x in margin..width - margin {
        put(&mut px, x, height - margin, [0, 0, 0]);
    }
    for y in margin..=height - margin {
        put(&mut px, margin, y, [0, 0, 0]);
    }
    let len = series.iter().map(|s| s.0.len()).max().unwrap_or(0);
    let ymax = series.iter().flat_map(|s| s.0.iter().copied()).fold(0.0f64, f64::max);
    let to_xy = |i: usize, v: f64| {
        let fx = if len > 1 { i as f64 / (len - 1) as f64 } else { 0.0 };
        let fy = if ymax > 0.0 { v / ymax } else { 0.0 };
        let x = margin as f64 + fx * (width - 2 * margin) as f64;
        let y = (height - margin) as f64 - fy * (height - 2 * margin) as f64;
        (x, y)
    };
    for (values, color) in series {
        for i in 1..values.len() {
            let (x0, y0) = to_xy(i - 1, values[i - 1]);
            let (x1, y1) = to_xy(i, values[i]);
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let f = s as f64 / steps as f64;
                put(&mut px, (x0 + f * (x1 - x0)).round() as usize, (y0 + f * (y1 - y0)).round() as usize, *color);
            }
        }
    }
    write_png(path, width, height, png_rgb(), &px)
}
