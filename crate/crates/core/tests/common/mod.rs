#![allow(dead_code)]

pub mod suites;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stqe::loss_train::TrainSample;
use stqe::{FrameTriplet, PointCloud};

/// A 64×32 height-field surface (2048 unique voxels) with a smooth luma
/// field. Returns the clean cloud.
pub fn smooth_surface() -> PointCloud {
    let mut geometry = Vec::with_capacity(2048);
    let mut attributes = Vec::with_capacity(2048);
    for x in 0..64u32 {
        for y in 0..32u32 {
            let (fx, fy) = (f64::from(x), f64::from(y));
            let z = 16.0 + 4.0 * (fx / 10.0).sin() * (fy / 8.0).cos();
            geometry.push([x, y, z.round() as u32]);
            let luma = 128.0 + 50.0 * (std::f64::consts::TAU * fx / 48.0).sin() * (std::f64::consts::TAU * fy / 40.0).cos();
            attributes.push([luma as f32, 110.0 + fx as f32 * 0.5, 140.0 - fy as f32 * 0.5]);
        }
    }
    PointCloud::new(geometry, attributes, 7).unwrap()
}

/// `clean` with independent Gaussian noise on every component.
pub fn distort(clean: &PointCloud, std: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std).unwrap();
    let attributes = clean
        .attributes()
        .iter()
        .map(|a| a.map(|v| (f64::from(v) + noise.sample(&mut rng)).clamp(0.0, 255.0) as f32))
        .collect();
    clean.with_attributes(attributes).unwrap()
}

/// Three noisy observations of one static clean frame.
pub fn toy_sample(noise_std: f64, seed: u64) -> TrainSample {
    let clean = smooth_surface();
    let triplet = FrameTriplet::new(
        distort(&clean, noise_std, seed),
        distort(&clean, noise_std, seed + 1),
        distort(&clean, noise_std, seed + 2),
    )
    .unwrap();
    TrainSample { triplet, original: clean }
}

/// Random voxelized cloud with unique coordinates.
pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: u32, bit_depth: u8) -> PointCloud {
    let mut seen = std::collections::HashSet::new();
    let mut geometry = Vec::with_capacity(n);
    while geometry.len() < n {
        let p = [rng.gen_range(0..extent), rng.gen_range(0..extent), rng.gen_range(0..extent)];
        if seen.insert(p) {
            geometry.push(p);
        }
    }
    let attributes = (0..n)
        .map(|_| [rng.gen_range(0.0..=255.0f32), rng.gen_range(0.0..=255.0f32), rng.gen_range(0.0..=255.0f32)])
        .collect();
    PointCloud::new(geometry, attributes, bit_depth).unwrap()
}

use indexmap::IndexMap;
use stqe::tensorad::{Tape, Tensor, Var};

/// Worst disagreement between analytical and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares `build`'s reverse-mode gradients with central differences of
/// step `h`. `build` records the inputs as parameters and returns the
/// scalar loss plus the handle of every input. At most `per_tensor`
/// entries of each input are perturbed (evenly spaced).
pub fn gradcheck<F>(inputs: &IndexMap<String, Tensor<f64>>, build: F, h: f64, per_tensor: usize) -> GradCheck
where
    F: Fn(&mut Tape<f64>, &IndexMap<String, Tensor<f64>>) -> (Var, IndexMap<String, Var>),
{
    let mut tape = Tape::new();
    let (loss, vars) = build(&mut tape, inputs);
    let grads = tape.backward(loss).unwrap();
    let eval = |x: &IndexMap<String, Tensor<f64>>| {
        let mut t = Tape::new();
        let (l, _) = build(&mut t, x);
        t.value(l).data()[0]
    };
    let mut out = GradCheck { max_rel: 0.0, worst: String::new(), checked: 0 };
    for (name, t) in inputs {
        let g = grads.get(vars[name]).unwrap().data().to_vec();
        let n = t.numel();
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let mut plus = inputs.clone();
            plus[name].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[name].data_mut()[i] -= h;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let e = rel_err(g[i], num);
            out.checked += 1;
            if e > out.max_rel {
                out.max_rel = e;
                out.worst = format!("{name}[{i}]: analytic {:e}, numeric {:e}", g[i], num);
            }
        }
    }
    out
}

/// Projects `v` onto fixed pseudo-random weights and averages, giving a
/// scalar whose gradient exercises every output entry differently.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.reduce_mean(p)
}

/// A tensor of uniform values in `[-1, 1]` kept at least `margin` away
/// from zero.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}
