use crate::error::{Error, Result};
use crate::spatial_index::SpatialIndex;

/// A subset of a frame's points, by index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patch {
    pub seed: usize,
    pub indices: Vec<usize>,
}

fn d2(a: &[u32; 3], b: &[u32; 3]) -> u64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = u64::from(x.abs_diff(y));
            d * d
        })
        .sum()
}

/// Covers the frame with patches of `patch_size` nearest neighbours around
/// farthest-point seeds. The first seed is point 0; each next seed is the
/// uncovered point farthest from all seeds so far (lowest index on ties).
/// A frame no larger than `patch_size` yields one patch with every point.
pub fn generate_patches(geometry: &[[u32; 3]], patch_size: usize) -> Result<Vec<Patch>> {
    if patch_size == 0 {
        return Err(Error::Config("patch_size must be at least 1".into()));
    }
    let n = geometry.len();
    if n == 0 {
        return Err(Error::InvalidCloud("n must be ≥ 1".into()));
    }
    if n <= patch_size {
        return Ok(vec![Patch { seed: 0, indices: (0..n).collect() }]);
    }
    let index = SpatialIndex::build(geometry)?;
    let mut covered = vec![false; n];
    let mut remaining = n;
    let mut min_d2 = vec![u64::MAX; n];
    let mut patches = Vec::new();
    let mut seed = 0usize;
    loop {
        let indices: Vec<usize> = index
            .nearest(&geometry[seed], patch_size)?
            .into_iter()
            .map(|(_, i)| i as usize)
            .collect();
        for &i in &indices {
            if !covered[i] {
                covered[i] = true;
                remaining -= 1;
            }
        }
        patches.push(Patch { seed, indices });
        if remaining == 0 {
            return Ok(patches);
        }
        let s = geometry[seed];
        let mut best: Option<(u64, usize)> = None;
        for (i, p) in geometry.iter().enumerate() {
            let d = d2(p, &s);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if !covered[i] && best.map_or(true, |(bd, _)| min_d2[i] > bd) {
                best = Some((min_d2[i], i));
            }
        }
        seed = best.expect("an uncovered point exists").1;
    }
}

/// Per-point mean of the predictions of every patch covering the point.
pub fn fuse_patches(n: usize, patches: &[Patch], predictions: &[Vec<f32>]) -> Result<Vec<f32>> {
    if patches.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} patches but {} prediction sets",
            patches.len(),
            predictions.len()
        )));
    }
    let mut sum = vec![0f64; n];
    let mut count = vec![0u32; n];
    for (p, pred) in patches.iter().zip(predictions) {
        if p.indices.len() != pred.len() {
            return Err(Error::Shape(format!(
                "patch of {} points has {} predictions",
                p.indices.len(),
                pred.len()
            )));
        }
        for (&i, &v) in p.indices.iter().zip(pred) {
            if i >= n {
                return Err(Error::Shape(format!("patch index {i} out of range for {n} points")));
            }
            sum[i] += f64::from(v);
            count[i] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .enumerate()
        .map(|(i, (&s, &c))| {
            if c == 0 {
                Err(Error::Shape(format!("point {i} is not covered by any patch")))
            } else {
                Ok((s / f64::from(c)) as f32)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: u32) -> Vec<[u32; 3]> {
        (0..n).map(|i| [i, 0, 0]).collect()
    }

    #[test]
    fn small_frame_is_one_patch() {
        let p = generate_patches(&line(10), 10).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].indices, (0..10).collect::<Vec<_>>());
        assert!(generate_patches(&line(10), 0).is_err());
    }

    #[test]
    fn line_patches_cover() {
        let p = generate_patches(&line(10), 4).unwrap();
        assert_eq!(p[0].indices, vec![0, 1, 2, 3]);
        assert_eq!(p[1].seed, 9);
        let mut seen = [false; 10];
        for patch in &p {
            assert_eq!(patch.indices.len(), 4);
            patch.indices.iter().for_each(|&i| seen[i] = true);
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn fusion_means() {
        let patches = vec![Patch { seed: 0, indices: vec![0, 1] }, Patch { seed: 2, indices: vec![1, 2] }];
        let fused = fuse_patches(3, &patches, &[vec![10.0, 10.0], vec![20.0, 20.0]]).unwrap();
        assert_eq!(fused, vec![10.0, 15.0, 20.0]);
        assert!(fuse_patches(4, &patches, &[vec![1.0, 1.0], vec![1.0, 1.0]]).is_err());
        assert!(fuse_patches(3, &patches, &[vec![1.0]]).is_err());
    }
}
