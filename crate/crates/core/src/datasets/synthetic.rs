use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, ImageDims, LabeledImage};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disk,
    Cross,
    Bar,
    Ring,
}

/// Class geometry: base shape, in-plane rotation and size factor.
#[derive(Clone, Copy, Debug)]
struct ClassGeometry {
    shape: Shape,
    angle: f64,
    size: f64,
}

fn class_geometry(class: usize) -> ClassGeometry {
    let shape = match class % 4 {
        0 => Shape::Disk,
        1 => Shape::Cross,
        2 => Shape::Bar,
        _ => Shape::Ring,
    };
    let variant = class / 4;
    ClassGeometry {
        shape,
        angle: variant as f64 * PI / 7.0,
        size: 1.0 - 0.12 * (variant % 4) as f64,
    }
}

fn sd_box(x: f64, y: f64, half_w: f64, half_h: f64) -> f64 {
    let qx = x.abs() - half_w;
    let qy = y.abs() - half_h;
    let outside = qx.max(0.0).hypot(qy.max(0.0));
    outside + qx.max(qy).min(0.0)
}

/// Signed distance (in pixels) from a point in shape-local coordinates to the shape boundary.
fn signed_distance(shape: Shape, x: f64, y: f64, s: f64) -> f64 {
    match shape {
        Shape::Disk => x.hypot(y) - 0.24 * s,
        Shape::Ring => (x.hypot(y) - 0.28 * s).abs() - 0.08 * s,
        Shape::Cross => sd_box(x, y, 0.32 * s, 0.08 * s).min(sd_box(x, y, 0.08 * s, 0.32 * s)),
        Shape::Bar => sd_box(x, y, 0.36 * s, 0.09 * s),
    }
}

fn render(geom: ClassGeometry, dims: ImageDims, cx: f64, cy: f64, scale: f64) -> Vec<f64> {
    let s = dims.height.min(dims.width) as f64 * scale * geom.size;
    let (sin, cos) = geom.angle.sin_cos();
    let mut pixels = Vec::with_capacity(dims.len());
    for row in 0..dims.height {
        for col in 0..dims.width {
            let dx = col as f64 + 0.5 - cx;
            let dy = row as f64 + 0.5 - cy;
            // rotate into the shape frame
            let lx = cos * dx + sin * dy;
            let ly = -sin * dx + cos * dy;
            let coverage = (0.5 - signed_distance(geom.shape, lx, ly, s)).clamp(0.0, 1.0);
            let v = 2.0 * coverage - 1.0;
            pixels.extend(std::iter::repeat_n(v, dims.channels));
        }
    }
    pixels
}

/// `num_classes` shape classes with `n_per_class` images each, class-major order.
///
/// The class fixes the shape (disk, cross, bar, ring, cycling) plus a rotation
/// and size variant; each sample then gets a random centre offset of up to an
/// eighth of the image side and a random scale in `[0.85, 1.15]`.
pub fn generate_synthetic(
    num_classes: usize,
    n_per_class: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(invalid(format!("need at least 2 classes, got {num_classes}")));
    }
    if height < 8 || width < 8 {
        return Err(invalid(format!("image must be at least 8x8, got {height}x{width}")));
    }
    if n_per_class == 0 {
        return Err(invalid("n_per_class must be positive"));
    }
    let dims = ImageDims::new(height, width, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_offset = height.min(width) as f64 / 8.0;
    let mut images = Vec::with_capacity(num_classes * n_per_class);
    for class in 0..num_classes {
        let geom = class_geometry(class);
        for _ in 0..n_per_class {
            let cx = width as f64 / 2.0 + rng.gen_range(-max_offset..=max_offset);
            let cy = height as f64 / 2.0 + rng.gen_range(-max_offset..=max_offset);
            let scale = rng.gen_range(0.85..=1.15);
            images.push(LabeledImage {
                pixels: render(geom, dims, cx, cy, scale),
                label: class,
            });
        }
    }
    Dataset::new(images, num_classes, dims)
}
