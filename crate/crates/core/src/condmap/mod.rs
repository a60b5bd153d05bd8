//! Conditional maps: rasterizing user annotations (triangle, boundary,
//! skeleton) into single-channel maps and assembling the condition tensor
//! consumed by the generator's condition encoder and by the discriminator.
//!
//! Coordinates are pixel positions with the origin at the top-left pixel
//! center, `x` to the right and `y` down. Pixel `(row, col)` is sampled at
//! `(col, row)`.

mod raster;
mod schema;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::imaging::{flip_planes, ColorImage};

pub use raster::{
    base_stripe_width, rasterize_boundary, rasterize_skeleton, rasterize_triangle,
    segment_distance, BASE_STRIPE_VALUE,
};
pub use schema::{
    AnnotationRecord, MapType, ShapeAnnotation, SkeletonJson, TriangleJson, HAND_EDGES,
    HAND_KEYPOINT_NAMES,
};

/// Channels of a conditional map.
pub const MAP_CHANNELS: usize = 1;
/// Channels appended to the condition when the first-stage output is rolled back.
pub const ROLLED_CHANNELS: usize = 3;
/// Minimum |signed area| for a triangle annotation.
pub const MIN_TRIANGLE_AREA: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn flip_x(self, width: usize) -> Self {
        Self::new((width as f64 - 1.0) - self.x, self.y)
    }

    /// Rescales between resolutions with pixel centers kept aligned, so
    /// scaling commutes with `flip_x`.
    pub fn scaled(self, sx: f64, sy: f64) -> Self {
        Self::new((self.x + 0.5) * sx - 0.5, (self.y + 0.5) * sy - 0.5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleAnnotation {
    vertices: [Point; 3],
    base_edge: usize,
}

impl TriangleAnnotation {
    pub fn new(vertices: [Point; 3], base_edge: usize) -> Result<Self> {
        let t = Self {
            vertices,
            base_edge,
        };
        t.validate()?;
        Ok(t)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.base_edge > 2 {
            return Err(Error::InvalidAnnotation(format!(
                "base edge must be 0, 1 or 2, got {}",
                self.base_edge
            )));
        }
        if self.vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidAnnotation("non-finite vertex".into()));
        }
        let area = self.signed_area();
        if area.abs() <= MIN_TRIANGLE_AREA {
            return Err(Error::DegenerateAnnotation(format!(
                "triangle area {area} is below {MIN_TRIANGLE_AREA}"
            )));
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[Point; 3] {
        &self.vertices
    }

    pub fn base_edge(&self) -> usize {
        self.base_edge
    }

    pub fn signed_area(&self) -> f64 {
        let [a, b, c] = self.vertices;
        0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
    }

    /// Endpoints of the palm-base edge `(v_i, v_{i+1 mod 3})`.
    pub fn base_segment(&self) -> (Point, Point) {
        (
            self.vertices[self.base_edge],
            self.vertices[(self.base_edge + 1) % 3],
        )
    }

    pub fn flip_x(&self, width: usize) -> Self {
        Self {
            vertices: self.vertices.map(|p| p.flip_x(width)),
            base_edge: self.base_edge,
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            vertices: self.vertices.map(|p| p.scaled(sx, sy)),
            base_edge: self.base_edge,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryAnnotation {
    polyline: Vec<Point>,
}

impl BoundaryAnnotation {
    pub fn new(polyline: Vec<Point>) -> Result<Self> {
        let b = Self { polyline };
        b.validate()?;
        Ok(b)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let n = self.polyline.len();
        if n < 3 {
            return Err(Error::InvalidAnnotation(format!(
                "boundary needs at least 3 points, got {n}"
            )));
        }
        for i in 0..n {
            if self.polyline[i] == self.polyline[(i + 1) % n] {
                return Err(Error::InvalidAnnotation(format!(
                    "boundary repeats point {i} consecutively"
                )));
            }
        }
        Ok(())
    }

    pub fn points(&self) -> &[Point] {
        &self.polyline
    }

    pub fn flip_x(&self, width: usize) -> Self {
        Self {
            polyline: self.polyline.iter().map(|p| p.flip_x(width)).collect(),
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            polyline: self.polyline.iter().map(|p| p.scaled(sx, sy)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonAnnotation {
    keypoints: Vec<Option<Point>>,
    edges: Vec<(usize, usize)>,
}

impl SkeletonAnnotation {
    /// Edges are checked at rasterization, since keypoint detectors routinely
    /// drop points.
    pub fn new(keypoints: Vec<Option<Point>>, edges: Vec<(usize, usize)>) -> Self {
        Self { keypoints, edges }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for &(i, j) in &self.edges {
            for k in [i, j] {
                if self.keypoints.get(k).copied().flatten().is_none() {
                    return Err(Error::InvalidAnnotation(format!(
                        "edge ({i}, {j}) references missing keypoint {k}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn keypoints(&self) -> &[Option<Point>] {
        &self.keypoints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn flip_x(&self, width: usize) -> Self {
        Self {
            keypoints: self
                .keypoints
                .iter()
                .map(|p| p.map(|p| p.flip_x(width)))
                .collect(),
            edges: self.edges.clone(),
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            keypoints: self
                .keypoints
                .iter()
                .map(|p| p.map(|p| p.scaled(sx, sy)))
                .collect(),
            edges: self.edges.clone(),
        }
    }
}

/// Single-channel `H x W` map with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ConditionalMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidAnnotation(format!(
                "map value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub(crate) fn set(&mut self, y: usize, x: usize, v: f32) {
        self.values[y * self.width + x] = v;
    }

    pub fn flip_x(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: flip_planes(&self.values, self.width),
        }
    }

    /// `(1, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.values,
            (1, self.height, self.width),
            device,
        )?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CategoryLabel {
    index: usize,
    n_c: usize,
}

impl CategoryLabel {
    pub fn new(index: usize, n_c: usize) -> Result<Self> {
        if index >= n_c {
            return Err(Error::InvalidCategory { index, n_c });
        }
        Ok(Self { index, n_c })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }
}

pub fn encode_category(c: CategoryLabel) -> Vec<f32> {
    let mut v = vec![0.0; c.n_c];
    v[c.index] = 1.0;
    v
}

/// Channel-first condition: `[map, one-hot..., rolled RGB...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ConditionTensor {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (self.channels, self.height, self.width),
            device,
        )?)
    }
}

pub fn assemble_condition(
    map: &ConditionalMap,
    c: CategoryLabel,
    rolled: Option<&ColorImage>,
) -> Result<ConditionTensor> {
    let (h, w) = (map.height, map.width);
    let plane = h * w;
    let extra = if rolled.is_some() { ROLLED_CHANNELS } else { 0 };
    let channels = MAP_CHANNELS + c.n_c + extra;
    let mut data = Vec::with_capacity(channels * plane);
    data.extend_from_slice(&map.values);
    for v in encode_category(c) {
        data.extend(std::iter::repeat_n(v, plane));
    }
    if let Some(img) = rolled {
        if img.height() != h || img.width() != w {
            return Err(Error::ShapeMismatch(format!(
                "map is {h}x{w} but rolled image is {}x{}",
                img.height(),
                img.width()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Ok(ConditionTensor {
        channels,
        height: h,
        width: w,
        data,
    })
}

/// Batched form of [`assemble_condition`]: `maps` is `(B, 1, H, W)`, the
/// result `(B, 1 + n_c [+ 3], H, W)` with the same channel order.
pub fn condition_batch(
    maps: &Tensor,
    labels: &[usize],
    n_c: usize,
    rolled: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, c, h, w) = maps.dims4()?;
    if c != MAP_CHANNELS || labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "maps {:?} with {} labels",
            maps.dims(),
            labels.len()
        )));
    }
    let mut onehot = vec![0f32; b * n_c];
    for (i, &l) in labels.iter().enumerate() {
        let label = CategoryLabel::new(l, n_c)?;
        onehot[i * n_c + label.index()] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, n_c, 1, 1), maps.device())?
        .to_dtype(maps.dtype())?
        .broadcast_as((b, n_c, h, w))?;
    let mut parts = vec![maps.clone(), onehot];
    if let Some(r) = rolled {
        if r.dims() != [b, ROLLED_CHANNELS, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "rolled image {:?} does not match maps {:?}",
                r.dims(),
                maps.dims()
            )));
        }
        parts.push(r.clone());
    }
    Ok(Tensor::cat(&parts, 1)?)
}
