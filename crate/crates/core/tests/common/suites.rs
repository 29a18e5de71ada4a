//! Finite-difference gradient suites shared by the gradient tests and the
//! acceptance run.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stqe::loss_train::{joint_loss, mse_loss, pcc_loss};
use stqe::network::{
    bife_forward, cta_forward, forward_residual, gnfa_forward, resblock_forward, sfe_forward, stf_forward, Graph,
    ModelConfig, ModelParams, NetInputs, Widths,
};
use stqe::tensorad::{Tape, Tensor, Var};
use stqe::{Component, FrameTriplet};

use super::{gradcheck, project, random_cloud, random_tensor, GradCheck};

pub const H: f64 = 1e-5;

type Inputs = IndexMap<String, Tensor<f64>>;

fn inputs(items: Vec<(&str, Tensor<f64>)>) -> Inputs {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn record(tape: &mut Tape<f64>, x: &Inputs) -> IndexMap<String, Var> {
    x.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect()
}

/// Distinct values spaced 0.01 apart, so a step of `H` never changes an
/// argmax.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.005 * n as f64).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

/// One gradient check per registered tensor op and per loss.
pub fn op_suite() -> Vec<(&'static str, GradCheck)> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut out = Vec::new();
    let m = 1e-2;

    let x = inputs(vec![
        ("x", random_tensor(&mut rng, &[4, 2, 3], m)),
        ("w", random_tensor(&mut rng, &[3, 4], m)),
        ("b", random_tensor(&mut rng, &[4], m)),
    ]);
    out.push((
        "pointwise_linear",
        gradcheck(
            &x,
            |t, x| {
                let v = record(t, x);
                let y = t.linear(v["x"], v["w"], v["b"]).unwrap();
                (project(t, y, 1), v)
            },
            H,
            64,
        ),
    ));

    let x = inputs(vec![("x", random_tensor(&mut rng, &[6, 3], m))]);
    out.push((
        "leaky_relu",
        gradcheck(
            &x,
            |t, x| {
                let v = record(t, x);
                let y = t.leaky_relu(v["x"], 0.01);
                (project(t, y, 2), v)
            },
            H,
            64,
        ),
    ));
    out.push((
        "sigmoid",
        gradcheck(
            &x,
            |t, x| {
                let v = record(t, x);
                let y = t.sigmoid(v["x"]);
                (project(t, y, 3), v)
            },
            H,
            64,
        ),
    ));

    let idx: Vec<u32> = (0..15).map(|_| rng.gen_range(0..6)).collect();
    out.push((
        "gather_neighbors",
        gradcheck(
            &x,
            |t, x| {
                let v = record(t, x);
                let y = t.gather(v["x"], &idx, 3).unwrap();
                (project(t, y, 4), v)
            },
            H,
            64,
        ),
    ));
    out.push((
        "duplicate",
        gradcheck(
            &x,
            |t, x| {
                let v = record(t, x);
                let y = t.duplicate(v["x"], 3).unwrap();
                (project(t, y, 5), v)
            },
            H,
            64,
        ),
    ));
    out.push((
        "slice_channels",
        gradcheck(
            &x,
            |t, x| {
                let v = record(t, x);
                let y = t.slice_channels(v["x"], 1, 3).unwrap();
                (project(t, y, 6), v)
            },
            H,
            64,
        ),
    ));

    let x = inputs(vec![
        ("a", random_tensor(&mut rng, &[3, 2, 2], m)),
        ("b", random_tensor(&mut rng, &[3, 2, 3], m)),
    ]);
    out.push((
        "concat_channels",
        gradcheck(
            &x,
            |t, x| {
                let v = record(t, x);
                let y = t.concat(&[v["a"], v["b"], v["a"]]).unwrap();
                (project(t, y, 7), v)
            },
            H,
            64,
        ),
    ));

    let x = inputs(vec![("x", spaced(&mut rng, &[4, 5, 3]))]);
    out.push((
        "max_pool_neighbors",
        gradcheck(
            &x,
            |t, x| {
                let v = record(t, x);
                let y = t.max_pool_neighbors(v["x"]).unwrap();
                (project(t, y, 8), v)
            },
            H,
            64,
        ),
    ));

    let x = inputs(vec![
        ("a", random_tensor(&mut rng, &[5, 2], m)),
        ("b", random_tensor(&mut rng, &[5, 2], m)),
    ]);
    out.push((
        "elementwise_mul_add_sub",
        gradcheck(
            &x,
            |t, x| {
                let v = record(t, x);
                let p = t.mul(v["a"], v["b"]).unwrap();
                let s = t.add(p, v["a"]).unwrap();
                let d = t.sub(s, v["b"]).unwrap();
                (project(t, d, 9), v)
            },
            H,
            64,
        ),
    ));
    out.push((
        "scalar_ops",
        gradcheck(
            &x,
            |t, x| {
                let v = record(t, x);
                let s = t.scale(v["a"], -1.7);
                let s = t.add_scalar(s, 3.0);
                let p = t.powf(s, -0.5);
                let q = t.powf(s, 2.5);
                let y = t.add(p, q).unwrap();
                let y = t.clamp(y, -10.0, 10.0);
                (project(t, y, 10), v)
            },
            H,
            64,
        ),
    ));
    out.push((
        "reductions",
        gradcheck(
            &x,
            |t, x| {
                let v = record(t, x);
                let m = t.reduce_mean(v["a"]);
                let va = t.reduce_var(v["a"]);
                let c = t.reduce_cov(v["a"], v["b"]).unwrap();
                let s = t.add(m, va).unwrap();
                let s = t.add(s, c).unwrap();
                let s = t.scale(s, 1.3);
                (s, v)
            },
            H,
            64,
        ),
    ));

    let x = inputs(vec![
        ("pred", random_tensor(&mut rng, &[16, 1], m)),
        ("target", random_tensor(&mut rng, &[16, 1], m)),
    ]);
    out.push((
        "mse_loss",
        gradcheck(
            &x,
            |t, x| {
                let v = record(t, x);
                (mse_loss(t, v["pred"], v["target"]).unwrap(), v)
            },
            H,
            64,
        ),
    ));
    out.push((
        "pcc_loss",
        gradcheck(
            &x,
            |t, x| {
                let v = record(t, x);
                (pcc_loss(t, v["pred"], v["target"]).unwrap().0, v)
            },
            H,
            64,
        ),
    ));
    out.push((
        "joint_loss",
        gradcheck(
            &x,
            |t, x| {
                let v = record(t, x);
                (joint_loss(t, v["pred"], v["target"], 1.0).unwrap().total, v)
            },
            H,
            64,
        ),
    ));
    out
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        widths: Widths { shallow: [4, 6, 6], merge: [8, 8], gnfa: 4, stf: [8, 6, 4] },
        ..Default::default()
    }
}

/// A 64-point current frame with differently sized neighbours.
pub fn triplet64(seed: u64) -> FrameTriplet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FrameTriplet::new(
        random_cloud(&mut rng, 60, 8, 4),
        random_cloud(&mut rng, 64, 8, 4),
        random_cloud(&mut rng, 70, 8, 4),
    )
    .unwrap()
}

fn subset(params: &Inputs, prefixes: &[&str]) -> Inputs {
    params
        .iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// Builds a graph from the `params` part of `x` (everything not named
/// `input.*`) and records the `input.*` entries as differentiable leaves.
fn with_graph<F>(t: &mut Tape<f64>, x: &Inputs, slope: f64, body: F) -> (Var, IndexMap<String, Var>)
where
    F: FnOnce(&mut Graph<f64>, &IndexMap<String, Var>) -> Var,
{
    let params: Inputs = x.iter().filter(|(k, _)| !k.starts_with("input.")).map(|(k, v)| (k.clone(), v.clone())).collect();
    let feats: Inputs = x.iter().filter(|(k, _)| k.starts_with("input.")).map(|(k, v)| (k.clone(), v.clone())).collect();
    let mut g = Graph::new(t, &params, true, slope);
    let fv: IndexMap<String, Var> = feats.iter().map(|(k, v)| (k.clone(), g.tape.param(v.clone()))).collect();
    let loss = body(&mut g, &fv);
    let mut vars: IndexMap<String, Var> = g.params().map(|(k, v)| (k.to_string(), v)).collect();
    vars.extend(fv);
    (loss, vars)
}

fn column(values: &[f32]) -> Tensor<f64> {
    Tensor::column(values.iter().map(|&v| f64::from(v) / 255.0).collect()).unwrap()
}

/// Gradient checks for each network block and for the full training graph
/// (network + joint loss) on a 64-point triplet.
pub fn network_suite(config: ModelConfig, per_tensor: usize, h: f64) -> Vec<(&'static str, GradCheck)> {
    let slope = config.leaky_slope;
    let params = ModelParams::init(config.clone(), Component::Y, 17).unwrap();
    let mut p64 = params.tensors_as::<f64>();
    // Small non-zero biases so bias gradients pass through varied activations.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (k, t) in p64.iter_mut() {
        if k.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let triplet = triplet64(5);
    let inputs = NetInputs::from_triplet(&triplet, Component::Y, &config).unwrap();
    let n = inputs.len();
    let w = &config.widths;
    let target: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..255.0)).collect();
    let mut out = Vec::new();

    let mut x = subset(&p64, &["sfe.gnfa0."]);
    x.insert("input.f".into(), random_tensor(&mut rng, &[n, 1], 1e-2));
    out.push((
        "gnfa",
        gradcheck(
            &x,
            |t, x| {
                with_graph(t, x, slope, |g, f| {
                    let y = gnfa_forward(g, "sfe.gnfa0", f["input.f"], &inputs.nbrs, &inputs.weights).unwrap();
                    project(g.tape, y, 31)
                })
            },
            h,
            per_tensor,
        ),
    ));

    let mut x = subset(&p64, &["cta."]);
    x.insert("input.f1".into(), random_tensor(&mut rng, &[n, w.fused()], 1e-2));
    out.push((
        "cta",
        gradcheck(
            &x,
            |t, x| {
                with_graph(t, x, slope, |g, f| {
                    let y = cta_forward(g, f["input.f1"]).unwrap();
                    project(g.tape, y, 32)
                })
            },
            h,
            per_tensor,
        ),
    ));

    let mut x = subset(&p64, &["res."]);
    x.insert("input.x".into(), random_tensor(&mut rng, &[n, w.temporal()], 1e-2));
    out.push((
        "resblock",
        gradcheck(
            &x,
            |t, x| {
                with_graph(t, x, slope, |g, f| {
                    let y = resblock_forward(g, f["input.x"]).unwrap();
                    project(g.tape, y, 33)
                })
            },
            h,
            per_tensor,
        ),
    ));

    let x = subset(&p64, &["bife.", "cta.", "res."]);
    out.push((
        "bife",
        gradcheck(
            &x,
            |t, x| {
                with_graph(t, x, slope, |g, _| {
                    let prev = g.tape.constant(column(&inputs.prev));
                    let next = g.tape.constant(column(&inputs.next));
                    let y = bife_forward(g, prev, next, &inputs.nbrs).unwrap();
                    project(g.tape, y, 34)
                })
            },
            h,
            per_tensor,
        ),
    ));

    let x = subset(&p64, &["sfe."]);
    out.push((
        "sfe",
        gradcheck(
            &x,
            |t, x| {
                with_graph(t, x, slope, |g, _| {
                    let cur = g.tape.constant(column(&inputs.cur));
                    let y = sfe_forward(g, cur, &inputs.nbrs, &inputs.weights).unwrap();
                    project(g.tape, y, 35)
                })
            },
            h,
            per_tensor,
        ),
    ));

    let mut x = subset(&p64, &["stf."]);
    x.insert("input.t".into(), random_tensor(&mut rng, &[n, w.temporal()], 1e-2));
    x.insert("input.s".into(), random_tensor(&mut rng, &[n, w.spatial()], 1e-2));
    out.push((
        "stf",
        gradcheck(
            &x,
            |t, x| {
                with_graph(t, x, slope, |g, f| {
                    let y = stf_forward(g, f["input.t"], f["input.s"]).unwrap();
                    project(g.tape, y, 36)
                })
            },
            h,
            per_tensor,
        ),
    ));

    out.push((
        "stqe_forward+joint_loss",
        gradcheck(
            &p64,
            |t, x| {
                with_graph(t, x, slope, |g, _| {
                    let r = forward_residual(g, &inputs).unwrap();
                    let cur = g.tape.constant(column(&inputs.cur));
                    let tgt = g.tape.constant(column(&target));
                    let pred = g.tape.add(cur, r).unwrap();
                    joint_loss(g.tape, pred, tgt, 1.0).unwrap().total
                })
            },
            h,
            per_tensor,
        ),
    ));
    out
}
