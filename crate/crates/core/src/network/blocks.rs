use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::spatial_index::NeighborIndex;
use crate::tensorad::{Real, Tape, Tensor, Var};

/// A tape with the model's parameters recorded on it, addressed by name.
pub struct Graph<'t, T: Real> {
    pub tape: &'t mut Tape<T>,
    vars: IndexMap<String, Var>,
    slope: T,
}

impl<'t, T: Real> Graph<'t, T> {
    /// Records `params` on `tape`, as trainable leaves or as constants.
    pub fn new(tape: &'t mut Tape<T>, params: &IndexMap<String, Tensor<T>>, trainable: bool, slope: f64) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Graph { tape, vars, slope: T::of(slope) }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Parameter names and their tape handles, in canonical order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn width(&self, layer: &str) -> Result<usize> {
        Ok(self.tape.value(self.var(&format!("{layer}.w"))?).channels())
    }

    /// 1×1 convolution `layer` (weights `layer.w`, bias `layer.b`).
    pub fn conv(&mut self, layer: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{layer}.w"))?;
        let b = self.var(&format!("{layer}.b"))?;
        self.tape.linear(x, w, b)
    }

    pub fn lrelu(&mut self, x: Var) -> Var {
        self.tape.leaky_relu(x, self.slope)
    }

    /// Convolution followed by Leaky ReLU.
    pub fn conv_act(&mut self, layer: &str, x: Var) -> Result<Var> {
        let y = self.conv(layer, x)?;
        Ok(self.lrelu(y))
    }
}

/// Gaussian neighbourhood weights `exp(-e / (2σ²))`.
pub fn gaussian_weights(distances: &[f64], sigma2: f64) -> Result<Vec<f64>> {
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::Config(format!("sigma2 must be positive, got {sigma2}")));
    }
    distances
        .iter()
        .map(|&e| {
            if e >= 0.0 {
                Ok((-e / (2.0 * sigma2)).exp())
            } else {
                Err(Error::Config(format!("negative distance {e}")))
            }
        })
        .collect()
}

/// GNFA: `dup ‖ gather → conv+lrelu → ⊙W′ → conv+lrelu → max over k`.
///
/// `weights` holds the `n×k` Gaussian weights; they enter as a constant.
pub fn gnfa_forward<T: Real>(
    g: &mut Graph<T>,
    prefix: &str,
    f_in: Var,
    nbrs: &NeighborIndex,
    weights: &[f64],
) -> Result<Var> {
    let k = nbrs.k();
    let n = g.tape.value(f_in).rows();
    if weights.len() != n * k || nbrs.rows() != n {
        return Err(Error::Shape(format!(
            "gnfa: {n} points, {} neighbour rows, {} weights for k = {k}",
            nbrs.rows(),
            weights.len()
        )));
    }
    let dup = g.tape.duplicate(f_in, k)?;
    let knn = g.tape.gather(f_in, nbrs.indices(), k)?;
    let cat = g.tape.concat(&[dup, knn])?;
    let com = g.conv_act(&format!("{prefix}.0"), cat)?;

    let l1 = g.width(&format!("{prefix}.0"))?;
    let mut wd = Vec::with_capacity(n * k * l1);
    for &w in weights {
        let w = T::of(w);
        wd.extend(std::iter::repeat(w).take(l1));
    }
    let wv = g.tape.constant(Tensor::new(&[n, k, l1], wd)?);
    let weighted = g.tape.mul(com, wv)?;
    let h = g.conv_act(&format!("{prefix}.1"), weighted)?;
    g.tape.max_pool_neighbors(h)
}

/// Channel-split temporal attention. The first half of `f1` is the forward
/// reference, the second half the backward one; both go through the same
/// two-layer gate.
pub fn cta_forward<T: Real>(g: &mut Graph<T>, f1: Var) -> Result<Var> {
    let c = g.tape.value(f1).channels();
    if c % 2 != 0 {
        return Err(Error::Shape(format!("cta: channel count {c} is odd")));
    }
    let half = c / 2;
    let up = g.tape.slice_channels(f1, 0, half)?;
    let down = g.tape.slice_channels(f1, half, c)?;
    let mut gated = Vec::with_capacity(2);
    for part in [up, down] {
        let h = g.conv_act("cta.0", part)?;
        let a = g.conv("cta.1", h)?;
        let s = g.tape.sigmoid(a);
        gated.push(g.tape.mul(part, s)?);
    }
    g.tape.add(gated[0], gated[1])
}

/// `x + L4(lrelu(L3(lrelu(L2(lrelu(L1 x))))))`.
pub fn resblock_forward<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..3 {
        h = g.conv_act(&format!("res.{i}"), h)?;
    }
    let h = g.conv("res.3", h)?;
    g.tape.add(x, h)
}

fn bife_branch<T: Real>(g: &mut Graph<T>, prefix: &str, v: Var, nbrs: &NeighborIndex) -> Result<Var> {
    let k = nbrs.k();
    let knn = g.tape.gather(v, nbrs.indices(), k)?;
    let dup = g.tape.duplicate(v, k)?;
    let mut h = g.tape.concat(&[knn, dup])?;
    for i in 0..3 {
        h = g.conv_act(&format!("{prefix}.{i}"), h)?;
    }
    g.tape.max_pool_neighbors(h)
}

/// Temporal branch over the two virtual reference frames (`n×1` each).
pub fn bife_forward<T: Real>(g: &mut Graph<T>, prev: Var, next: Var, nbrs: &NeighborIndex) -> Result<Var> {
    let shared = g.var("bife.shallow.0.w").is_ok();
    let (pp, np) = if shared { ("bife.shallow", "bife.shallow") } else { ("bife.shallow_prev", "bife.shallow_next") };
    let a = bife_branch(g, pp, prev, nbrs)?;
    let b = bife_branch(g, np, next, nbrs)?;
    let cat = g.tape.concat(&[a, b])?;
    let h = g.conv_act("bife.merge.0", cat)?;
    let f1 = g.conv_act("bife.merge.1", h)?;
    let cta = cta_forward(g, f1)?;
    resblock_forward(g, cta)
}

/// Spatial branch: three densely connected GNFA modules.
pub fn sfe_forward<T: Real>(g: &mut Graph<T>, attr: Var, nbrs: &NeighborIndex, weights: &[f64]) -> Result<Var> {
    let g1 = gnfa_forward(g, "sfe.gnfa0", attr, nbrs, weights)?;
    let in2 = g.tape.concat(&[attr, g1])?;
    let g2 = gnfa_forward(g, "sfe.gnfa1", in2, nbrs, weights)?;
    let in3 = g.tape.concat(&[attr, g1, g2])?;
    let g3 = gnfa_forward(g, "sfe.gnfa2", in3, nbrs, weights)?;
    g.tape.concat(&[g1, g2, g3])
}

/// Fusion head: `n×1` residual.
pub fn stf_forward<T: Real>(g: &mut Graph<T>, temporal: Var, spatial: Var) -> Result<Var> {
    let mut h = g.tape.concat(&[temporal, spatial])?;
    for i in 0..3 {
        h = g.conv_act(&format!("stf.{i}"), h)?;
    }
    g.conv("stf.3", h)
}
