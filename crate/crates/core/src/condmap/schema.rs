//! On-disk annotation records (one JSON file per image) and 8-bit map PNGs.

use std::collections::BTreeMap;
use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::{
    rasterize_boundary, rasterize_skeleton, rasterize_triangle, BoundaryAnnotation,
    ConditionalMap, Point, SkeletonAnnotation, TriangleAnnotation,
};
use crate::error::{Error, Result};

/// OpenPose hand keypoint names, in index order.
pub const HAND_KEYPOINT_NAMES: [&str; 21] = [
    "wrist", "thumb_1", "thumb_2", "thumb_3", "thumb_4", "index_1", "index_2", "index_3",
    "index_4", "middle_1", "middle_2", "middle_3", "middle_4", "ring_1", "ring_2", "ring_3",
    "ring_4", "pinky_1", "pinky_2", "pinky_3", "pinky_4",
];

/// Fixed hand topology: each finger is a chain rooted at the wrist.
pub const HAND_EDGES: [(usize, usize); 20] = [
    (0, 1), (1, 2), (2, 3), (3, 4),
    (0, 5), (5, 6), (6, 7), (7, 8),
    (0, 9), (9, 10), (10, 11), (11, 12),
    (0, 13), (13, 14), (14, 15), (15, 16),
    (0, 17), (17, 18), (18, 19), (19, 20),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapType {
    Triangle,
    Boundary,
    Skeleton,
}

impl std::fmt::Display for MapType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MapType::Triangle => "triangle",
            MapType::Boundary => "boundary",
            MapType::Skeleton => "skeleton",
        })
    }
}

impl std::str::FromStr for MapType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triangle" => Ok(MapType::Triangle),
            "boundary" => Ok(MapType::Boundary),
            "skeleton" => Ok(MapType::Skeleton),
            other => Err(Error::InvalidConfig(format!("unknown map type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleJson {
    pub vertices: [[f64; 2]; 3],
    pub base: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonJson {
    /// Keyed by hand keypoint name or decimal index; `null` marks a missing point.
    pub keypoints: BTreeMap<String, Option<[f64; 2]>>,
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeAnnotation {
    Triangle(TriangleJson),
    Boundary(Vec<[f64; 2]>),
    Skeleton(SkeletonJson),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub category: usize,
    pub subject: String,
    /// Recording session; pairs never cross sessions.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub scene: String,
    #[serde(flatten)]
    pub shape: ShapeAnnotation,
}

fn point(p: [f64; 2]) -> Point {
    Point::new(p[0], p[1])
}

fn keypoint_index(key: &str) -> Result<usize> {
    if let Some(i) = HAND_KEYPOINT_NAMES.iter().position(|n| *n == key) {
        return Ok(i);
    }
    key.parse()
        .map_err(|_| Error::InvalidAnnotation(format!("unknown keypoint `{key}`")))
}

impl TriangleJson {
    pub fn to_annotation(&self) -> Result<TriangleAnnotation> {
        TriangleAnnotation::new(self.vertices.map(point), self.base)
    }

    pub fn from_annotation(a: &TriangleAnnotation) -> Self {
        Self {
            vertices: a.vertices().map(|p| [p.x, p.y]),
            base: a.base_edge(),
        }
    }
}

impl SkeletonJson {
    pub fn to_annotation(&self) -> Result<SkeletonAnnotation> {
        let mut keypoints: Vec<Option<Point>> = Vec::new();
        for (key, p) in &self.keypoints {
            let i = keypoint_index(key)?;
            if keypoints.len() <= i {
                keypoints.resize(i + 1, None);
            }
            keypoints[i] = p.map(point);
        }
        let edges = self.edges.iter().map(|e| (e[0], e[1])).collect();
        Ok(SkeletonAnnotation::new(keypoints, edges))
    }
}

impl ShapeAnnotation {
    pub fn map_type(&self) -> MapType {
        match self {
            ShapeAnnotation::Triangle(_) => MapType::Triangle,
            ShapeAnnotation::Boundary(_) => MapType::Boundary,
            ShapeAnnotation::Skeleton(_) => MapType::Skeleton,
        }
    }

    /// Parses a bare shape (`{"triangle": ...}`) or a whole annotation
    /// record, and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let shape = match serde_json::from_str::<ShapeAnnotation>(text) {
            Ok(shape) => shape,
            Err(shape_err) => match serde_json::from_str::<AnnotationRecord>(text) {
                Ok(record) => record.shape,
                Err(_) => return Err(Error::InvalidAnnotation(shape_err.to_string())),
            },
        };
        shape.validate()?;
        Ok(shape)
    }

    /// Checks that the shape converts into a valid annotation.
    pub fn validate(&self) -> Result<()> {
        match self {
            ShapeAnnotation::Triangle(t) => t.to_annotation().map(drop),
            ShapeAnnotation::Boundary(b) => {
                BoundaryAnnotation::new(b.iter().copied().map(point).collect()).map(drop)
            }
            ShapeAnnotation::Skeleton(s) => s.to_annotation()?.validate(),
        }
    }

    /// Mirrors the annotation inside a frame `width` pixels wide.
    pub fn flip_x(&self, width: usize) -> Self {
        let flip = |p: [f64; 2]| [(width as f64 - 1.0) - p[0], p[1]];
        match self {
            ShapeAnnotation::Triangle(t) => ShapeAnnotation::Triangle(TriangleJson {
                vertices: t.vertices.map(flip),
                base: t.base,
            }),
            ShapeAnnotation::Boundary(b) => ShapeAnnotation::Boundary(b.iter().copied().map(flip).collect()),
            ShapeAnnotation::Skeleton(s) => ShapeAnnotation::Skeleton(SkeletonJson {
                keypoints: s.keypoints.iter().map(|(k, p)| (k.clone(), p.map(flip))).collect(),
                edges: s.edges.clone(),
            }),
        }
    }

    /// Rasterizes at `height x width`, rescaling coordinates drawn on a
    /// `source_height x source_width` image.
    pub fn rasterize(
        &self,
        source_size: (usize, usize),
        height: usize,
        width: usize,
        stroke: f64,
    ) -> Result<ConditionalMap> {
        let sx = width as f64 / source_size.1 as f64;
        let sy = height as f64 / source_size.0 as f64;
        match self {
            ShapeAnnotation::Triangle(t) => {
                rasterize_triangle(&t.to_annotation()?.scaled(sx, sy), height, width)
            }
            ShapeAnnotation::Boundary(b) => {
                let a = BoundaryAnnotation::new(b.iter().copied().map(point).collect())?;
                rasterize_boundary(&a.scaled(sx, sy), height, width, stroke)
            }
            ShapeAnnotation::Skeleton(s) => {
                rasterize_skeleton(&s.to_annotation()?.scaled(sx, sy), height, width, stroke)
            }
        }
    }
}

impl AnnotationRecord {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// 0 -> 0.0, 128 -> 0.5, 255 -> 1.0.
pub(crate) fn encode_level(v: f32) -> u8 {
    if v == 0.5 {
        128
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

pub(crate) fn decode_level(v: u8) -> f32 {
    match v {
        128 => 0.5,
        v => v as f32 / 255.0,
    }
}

impl ConditionalMap {
    pub fn to_gray8(&self) -> GrayImage {
        let pixels = self.values().iter().map(|&v| encode_level(v)).collect();
        GrayImage::from_raw(self.width() as u32, self.height() as u32, pixels)
            .expect("buffer matches dimensions")
    }

    pub fn from_gray8(img: &GrayImage) -> Self {
        let values = img.as_raw().iter().map(|&v| decode_level(v)).collect();
        ConditionalMap::from_values(img.height() as usize, img.width() as usize, values)
            .expect("decoded levels are in [0, 1]")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray8().save(path.as_ref())?;
        Ok(())
    }

    pub fn open_png(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_gray8(&image::open(path.as_ref())?.to_luma8()))
    }
}
