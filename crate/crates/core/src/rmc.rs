//! Recoloring-based motion compensation.
//!
//! A reference frame is projected onto the current frame's geometry without
//! motion estimation: every reference point is assigned to its nearest
//! current point, and each current point takes the mean attribute of the
//! reference points assigned to it (or keeps its own if none were).

use crate::error::{Error, Result};
use crate::pcdata::{FrameTriplet, PointCloud};
use crate::spatial_index::SpatialIndex;

/// A reference frame's colors carried on the current frame's geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualReferenceFrame {
    pub cloud: PointCloud,
    /// Number of reference points mapped onto each current point.
    pub provenance: Vec<u32>,
}

/// Recolors `current`'s geometry from `reference`.
pub fn recolor(current: &PointCloud, reference: &PointCloud) -> Result<VirtualReferenceFrame> {
    if current.bit_depth() != reference.bit_depth() {
        return Err(Error::InvalidCloud(format!(
            "current frame has bit depth {}, reference has {}",
            current.bit_depth(),
            reference.bit_depth()
        )));
    }
    let index = SpatialIndex::build(current.geometry())?;
    recolor_with_index(current, &index, reference)
}

/// As [`recolor`], reusing a prebuilt index over `current`'s geometry.
pub fn recolor_with_index(
    current: &PointCloud,
    index: &SpatialIndex,
    reference: &PointCloud,
) -> Result<VirtualReferenceFrame> {
    let n = current.len();
    let mut sums = vec![[0f64; 3]; n];
    let mut counts = vec![0u32; n];
    for (p, a) in reference.geometry().iter().zip(reference.attributes()) {
        let (_, target) = index.nearest(p, 1)?[0];
        let t = target as usize;
        for c in 0..3 {
            sums[t][c] += f64::from(a[c]);
        }
        counts[t] += 1;
    }
    let attributes = current
        .attributes()
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(own, (s, &cnt))| {
            if cnt == 0 {
                *own
            } else {
                let cnt = f64::from(cnt);
                [(s[0] / cnt) as f32, (s[1] / cnt) as f32, (s[2] / cnt) as f32]
            }
        })
        .collect();
    Ok(VirtualReferenceFrame {
        cloud: current.with_attributes(attributes)?,
        provenance: counts,
    })
}

/// Virtual previous and next frames on the current frame's geometry.
pub fn build_virtual_pair(triplet: &FrameTriplet) -> Result<(VirtualReferenceFrame, VirtualReferenceFrame)> {
    let index = SpatialIndex::build(triplet.cur.geometry())?;
    Ok((
        recolor_with_index(&triplet.cur, &index, &triplet.prev)?,
        recolor_with_index(&triplet.cur, &index, &triplet.next)?,
    ))
}
