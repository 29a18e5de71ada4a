//! Point clouds with voxelized geometry and YCbCr attributes.

mod color;
mod ply;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use color::{rgb_to_ycbcr, ycbcr_to_rgb, ColorMatrix};
pub use ply::{parse_ply, read_ply, read_ply_with, write_ply, write_ply_to, ColorMode, Encoding, ReadOptions};

/// One of the three color components. Each is enhanced by its own model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Y,
    Cb,
    Cr,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Y, Component::Cb, Component::Cr];

    pub fn index(self) -> usize {
        match self {
            Component::Y => 0,
            Component::Cb => 1,
            Component::Cr => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Y => "Y",
            Component::Cb => "Cb",
            Component::Cr => "Cr",
        })
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "y" => Ok(Component::Y),
            "cb" | "u" => Ok(Component::Cb),
            "cr" | "v" => Ok(Component::Cr),
            _ => Err(Error::Config(format!("unknown color component '{s}' (expected Y, Cb or Cr)"))),
        }
    }
}

/// A voxelized point cloud: unique integer coordinates below `2^bit_depth`
/// and per-point YCbCr attributes in `[0, 255]`.
///
/// Values are immutable once constructed; every constructor validates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    geometry: Vec<[u32; 3]>,
    attributes: Vec<[f32; 3]>,
    bit_depth: u8,
}

impl PointCloud {
    pub fn new(geometry: Vec<[u32; 3]>, attributes: Vec<[f32; 3]>, bit_depth: u8) -> Result<Self> {
        let pc = PointCloud { geometry, attributes, bit_depth };
        pc.validate()?;
        Ok(pc)
    }

    /// Like [`PointCloud::new`] with the smallest bit depth that holds every coordinate.
    pub fn with_inferred_depth(geometry: Vec<[u32; 3]>, attributes: Vec<[f32; 3]>) -> Result<Self> {
        let depth = min_bit_depth(&geometry);
        Self::new(geometry, attributes, depth)
    }

    /// Builds a cloud from possibly repeated coordinates, averaging the
    /// attributes of points that share a voxel. Output order follows the
    /// first occurrence of each voxel.
    pub fn dedup(geometry: Vec<[u32; 3]>, attributes: Vec<[f32; 3]>, bit_depth: u8) -> Result<Self> {
        if geometry.len() != attributes.len() {
            return Err(Error::InvalidCloud(format!(
                "geometry has {} rows but attributes have {}",
                geometry.len(),
                attributes.len()
            )));
        }
        let mut slot: HashMap<[u32; 3], usize> = HashMap::with_capacity(geometry.len());
        let mut geo = Vec::new();
        let mut sums: Vec<([f64; 3], u32)> = Vec::new();
        for (p, a) in geometry.into_iter().zip(attributes) {
            let i = *slot.entry(p).or_insert_with(|| {
                geo.push(p);
                sums.push(([0.0; 3], 0));
                geo.len() - 1
            });
            for c in 0..3 {
                sums[i].0[c] += f64::from(a[c]);
            }
            sums[i].1 += 1;
        }
        let attrs = sums
            .into_iter()
            .map(|(s, n)| {
                let n = f64::from(n);
                [(s[0] / n) as f32, (s[1] / n) as f32, (s[2] / n) as f32]
            })
            .collect();
        Self::new(geo, attrs, bit_depth)
    }

    /// Checks every type invariant, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        if self.geometry.len() != self.attributes.len() {
            return Err(Error::InvalidCloud(format!(
                "geometry has {} rows but attributes have {}",
                self.geometry.len(),
                self.attributes.len()
            )));
        }
        if self.geometry.is_empty() {
            return Err(Error::InvalidCloud("n must be ≥ 1".into()));
        }
        if !(1..=16).contains(&self.bit_depth) {
            return Err(Error::InvalidCloud(format!("bit_depth {} outside [1, 16]", self.bit_depth)));
        }
        let limit = 1u32 << self.bit_depth;
        for (i, p) in self.geometry.iter().enumerate() {
            if p.iter().any(|&c| c >= limit) {
                return Err(Error::InvalidCloud(format!(
                    "coordinate {:?} of point {i} outside [0, 2^{})",
                    p, self.bit_depth
                )));
            }
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if a.iter().any(|v| !(0.0..=255.0).contains(v)) {
                return Err(Error::InvalidCloud(format!("attribute {:?} of point {i} outside [0, 255]", a)));
            }
        }
        let mut seen: HashMap<[u32; 3], usize> = HashMap::with_capacity(self.geometry.len());
        for (i, p) in self.geometry.iter().enumerate() {
            if let Some(&first) = seen.get(p) {
                return Err(Error::DuplicateCoordinate { index: i, first });
            }
            seen.insert(*p, i);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    /// Always false for a validated cloud; provided for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }

    pub fn geometry(&self) -> &[[u32; 3]] {
        &self.geometry
    }

    pub fn attributes(&self) -> &[[f32; 3]] {
        &self.attributes
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn component(&self, component: Component) -> AttributeVector {
        let c = component.index();
        AttributeVector {
            values: self.attributes.iter().map(|a| a[c]).collect(),
            component,
        }
    }

    /// Returns a copy with one component replaced. Values must lie in `[0, 255]`.
    pub fn with_component(&self, values: &AttributeVector) -> Result<Self> {
        if values.values.len() != self.len() {
            return Err(Error::Shape(format!(
                "attribute vector has {} values, cloud has {} points",
                values.values.len(),
                self.len()
            )));
        }
        let c = values.component.index();
        let mut attributes = self.attributes.clone();
        for (a, &v) in attributes.iter_mut().zip(&values.values) {
            a[c] = v;
        }
        PointCloud::new(self.geometry.clone(), attributes, self.bit_depth)
    }

    /// Same geometry, different attributes.
    pub fn with_attributes(&self, attributes: Vec<[f32; 3]>) -> Result<Self> {
        PointCloud::new(self.geometry.clone(), attributes, self.bit_depth)
    }

    /// The sub-cloud at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let geometry = indices.iter().map(|&i| self.geometry[i]).collect();
        let attributes = indices.iter().map(|&i| self.attributes[i]).collect();
        PointCloud::new(geometry, attributes, self.bit_depth)
    }
}

/// Smallest depth in `[1, 16]` whose grid holds every coordinate (saturates at 16).
pub fn min_bit_depth(geometry: &[[u32; 3]]) -> u8 {
    let max = geometry.iter().flat_map(|p| p.iter().copied()).max().unwrap_or(0);
    let bits = 32 - max.leading_zeros();
    bits.clamp(1, 16) as u8
}

/// One color component of a cloud, in point order.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeVector {
    pub values: Vec<f32>,
    pub component: Component,
}

/// The current frame and its two temporal neighbours.
#[derive(Clone, Debug)]
pub struct FrameTriplet {
    pub prev: PointCloud,
    pub cur: PointCloud,
    pub next: PointCloud,
}

impl FrameTriplet {
    pub fn new(prev: PointCloud, cur: PointCloud, next: PointCloud) -> Result<Self> {
        if prev.bit_depth != cur.bit_depth || next.bit_depth != cur.bit_depth {
            return Err(Error::InvalidCloud(format!(
                "triplet bit depths differ: prev {}, cur {}, next {}",
                prev.bit_depth, cur.bit_depth, next.bit_depth
            )));
        }
        Ok(FrameTriplet { prev, cur, next })
    }
}
