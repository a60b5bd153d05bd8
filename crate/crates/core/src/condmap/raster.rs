use super::{
    BoundaryAnnotation, ConditionalMap, Point, SkeletonAnnotation, TriangleAnnotation,
};
use crate::error::{Error, Result};

/// Intensity of the stripe that marks the palm base inside a triangle map.
pub const BASE_STRIPE_VALUE: f32 = 0.5;

/// Half-width in pixels of the base stripe for an `height x width` frame.
pub fn base_stripe_width(height: usize, width: usize) -> f64 {
    (0.01 * height.max(width) as f64).ceil()
}

/// Distance from `p` to the segment `a`-`b`.
pub fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.x + t * dx, a.y + t * dy);
    ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()
}

/// Whether `p` lies within `r` of the segment `a`-`b`. Compares squared
/// quantities without dividing, so the test is exact for coordinates on a
/// binary grid and agrees between a frame and its mirror image.
pub(crate) fn within_segment(p: Point, a: Point, b: Point, r: f64) -> bool {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let (px, py) = (p.x - a.x, p.y - a.y);
    let len2 = dx * dx + dy * dy;
    let dot = px * dx + py * dy;
    if dot <= 0.0 || len2 == 0.0 {
        px * px + py * py <= r * r
    } else if dot >= len2 {
        let (qx, qy) = (p.x - b.x, p.y - b.y);
        qx * qx + qy * qy <= r * r
    } else {
        let cross = px * dy - py * dx;
        cross * cross <= r * r * len2
    }
}

fn edge_function(a: Point, b: Point, p: Point) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Pixel-center test with edges counted as inside, for either winding.
pub(crate) fn triangle_contains(v: &[Point; 3], p: Point) -> bool {
    let e0 = edge_function(v[0], v[1], p);
    let e1 = edge_function(v[1], v[2], p);
    let e2 = edge_function(v[2], v[0], p);
    (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
}

/// Inclusive pixel range covering `[lo, hi]`, clipped to `0..n`.
fn pixel_span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    if n == 0 || hi < 0.0 || lo > (n - 1) as f64 || lo.is_nan() || hi.is_nan() {
        return None;
    }
    let first = lo.max(0.0).ceil() as usize;
    let last = (hi.min((n - 1) as f64)).floor() as usize;
    (first <= last).then_some((first, last))
}

pub fn rasterize_triangle(
    a: &TriangleAnnotation,
    height: usize,
    width: usize,
) -> Result<ConditionalMap> {
    a.validate()?;
    let mut map = ConditionalMap::zeros(height, width);
    let v = a.vertices();
    let (b0, b1) = a.base_segment();
    let stripe = base_stripe_width(height, width);
    let min_x = v.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_x = v.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = v.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = v.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let (Some((x0, x1)), Some((y0, y1))) = (
        pixel_span(min_x, max_x, width),
        pixel_span(min_y, max_y, height),
    ) else {
        return Ok(map);
    };
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = Point::new(x as f64, y as f64);
            if !triangle_contains(v, p) {
                continue;
            }
            let value = if within_segment(p, b0, b1, stripe) {
                BASE_STRIPE_VALUE
            } else {
                1.0
            };
            map.set(y, x, value);
        }
    }
    Ok(map)
}

fn stroke_segments(
    map: &mut ConditionalMap,
    segments: impl Iterator<Item = (Point, Point)>,
    stroke: f64,
) {
    let r = stroke / 2.0;
    let (h, w) = (map.height(), map.width());
    for (a, b) in segments {
        let spans = (
            pixel_span(a.x.min(b.x) - r, a.x.max(b.x) + r, w),
            pixel_span(a.y.min(b.y) - r, a.y.max(b.y) + r, h),
        );
        let (Some((x0, x1)), Some((y0, y1))) = spans else {
            continue;
        };
        for y in y0..=y1 {
            for x in x0..=x1 {
                if within_segment(Point::new(x as f64, y as f64), a, b, r) {
                    map.set(y, x, 1.0);
                }
            }
        }
    }
}

fn check_stroke(stroke: f64) -> Result<()> {
    if !(stroke >= 1.0) || !stroke.is_finite() {
        return Err(Error::InvalidAnnotation(format!(
            "stroke must be at least one pixel, got {stroke}"
        )));
    }
    Ok(())
}

pub fn rasterize_boundary(
    a: &BoundaryAnnotation,
    height: usize,
    width: usize,
    stroke: f64,
) -> Result<ConditionalMap> {
    a.validate()?;
    check_stroke(stroke)?;
    let pts = a.points();
    let mut map = ConditionalMap::zeros(height, width);
    let segments = (0..pts.len()).map(|i| (pts[i], pts[(i + 1) % pts.len()]));
    stroke_segments(&mut map, segments, stroke);
    Ok(map)
}

pub fn rasterize_skeleton(
    a: &SkeletonAnnotation,
    height: usize,
    width: usize,
    stroke: f64,
) -> Result<ConditionalMap> {
    a.validate()?;
    check_stroke(stroke)?;
    let mut map = ConditionalMap::zeros(height, width);
    let kp = a.keypoints();
    let segments = a
        .edges()
        .iter()
        .map(|&(i, j)| (kp[i].expect("validated"), kp[j].expect("validated")));
    stroke_segments(&mut map, segments, stroke);
    Ok(map)
}
