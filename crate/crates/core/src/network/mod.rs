//! The enhancement network.
//!
//! Attributes enter the network divided by 255 and the network predicts a
//! residual in the same units; the enhanced attribute is
//! `cur + 255 · residual`. Three parts:
//!
//! * BIFE: temporal features from the two recolored neighbour frames,
//!   channel-split attention and a residual block,
//! * SFE: three densely connected Gaussian-weighted neighbourhood
//!   aggregation (GNFA) modules over the current frame,
//! * STF: a fusion head mapping both feature sets to a per-point residual.

mod blocks;
pub mod checkpoint;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcdata::{AttributeVector, Component, FrameTriplet, PointCloud};
use crate::rmc::build_virtual_pair;
use crate::spatial_index::{self_knn, NeighborIndex};
use crate::tensorad::{Real, Tape, Tensor, Var};

pub use blocks::{
    bife_forward, cta_forward, gaussian_weights, gnfa_forward, resblock_forward, sfe_forward, stf_forward, Graph,
};
pub use params::{ModelConfig, ModelParams, Widths};

/// Whether the enhanced attribute is clamped to `[0, 255]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

/// Per-point inputs of one forward pass: the current frame's geometry, the
/// chosen component of the current frame and both virtual reference frames,
/// and the current frame's neighbourhoods.
#[derive(Clone, Debug)]
pub struct NetInputs {
    pub geometry: Vec<[u32; 3]>,
    pub cur: Vec<f32>,
    pub prev: Vec<f32>,
    pub next: Vec<f32>,
    pub nbrs: NeighborIndex,
    /// Gaussian weights, `n×k`, row-major.
    pub weights: Vec<f64>,
}

impl NetInputs {
    /// Recolors both neighbours onto `cur` and builds its neighbourhoods.
    pub fn from_triplet(triplet: &FrameTriplet, component: Component, config: &ModelConfig) -> Result<Self> {
        let (vp, vn) = build_virtual_pair(triplet)?;
        Self::from_parts(
            triplet.cur.geometry().to_vec(),
            triplet.cur.component(component).values,
            vp.cloud.component(component).values,
            vn.cloud.component(component).values,
            config,
        )
    }

    /// Builds neighbourhoods with `k` clamped to the point count.
    pub fn from_parts(
        geometry: Vec<[u32; 3]>,
        cur: Vec<f32>,
        prev: Vec<f32>,
        next: Vec<f32>,
        config: &ModelConfig,
    ) -> Result<Self> {
        let n = geometry.len();
        if n == 0 || cur.len() != n || prev.len() != n || next.len() != n {
            return Err(Error::Shape(format!(
                "inputs: {n} points, {} / {} / {} attribute values",
                cur.len(),
                prev.len(),
                next.len()
            )));
        }
        let k = config.k.min(n);
        let nbrs = self_knn(&geometry, k)?;
        let weights = if config.squared_kernel {
            let sq: Vec<f64> = nbrs.distances().iter().map(|d| d * d).collect();
            gaussian_weights(&sq, config.sigma2)?
        } else {
            gaussian_weights(nbrs.distances(), config.sigma2)?
        };
        Ok(NetInputs { geometry, cur, prev, next, nbrs, weights })
    }

    /// The inputs restricted to `indices`, with neighbourhoods rebuilt
    /// inside the subset.
    pub fn select(&self, indices: &[usize], config: &ModelConfig) -> Result<Self> {
        let pick = |v: &[f32]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self::from_parts(
            indices.iter().map(|&i| self.geometry[i]).collect(),
            pick(&self.cur),
            pick(&self.prev),
            pick(&self.next),
            config,
        )
    }

    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }
}

fn normalized<T: Real>(values: &[f32]) -> Result<Tensor<T>> {
    Tensor::column(values.iter().map(|&v| T::of(f64::from(v) / 255.0)).collect())
}

/// Records the whole network on `g` and returns the `n×1` residual node.
pub fn forward_residual<T: Real>(g: &mut Graph<T>, inputs: &NetInputs) -> Result<Var> {
    let cur = g.tape.constant(normalized(&inputs.cur)?);
    let prev = g.tape.constant(normalized(&inputs.prev)?);
    let next = g.tape.constant(normalized(&inputs.next)?);
    let temporal = bife_forward(g, prev, next, &inputs.nbrs)?;
    let spatial = sfe_forward(g, cur, &inputs.nbrs, &inputs.weights)?;
    stf_forward(g, temporal, spatial)
}

/// Residual in normalized units for every point of `inputs`.
pub fn predict_residual(params: &ModelParams, inputs: &NetInputs) -> Result<Vec<f32>> {
    let mut tape = Tape::<f32>::new();
    let tensors = params.tensors_as::<f32>();
    let mut g = Graph::new(&mut tape, &tensors, false, params.config.leaky_slope);
    let r = forward_residual(&mut g, inputs)?;
    Ok(tape.value(r).data().to_vec())
}

/// `cur + 255 · residual`, clamped in inference mode.
pub fn apply_residual(cur: &[f32], residual: &[f32], mode: Mode) -> Vec<f32> {
    cur.iter()
        .zip(residual)
        .map(|(&c, &r)| {
            let v = c + 255.0 * r;
            match mode {
                Mode::Infer => v.clamp(0.0, 255.0),
                Mode::Train => v,
            }
        })
        .collect()
}

/// Output of one enhancement pass.
#[derive(Clone, Debug)]
pub struct EnhancedFrame {
    /// The current frame with the enhanced component written in. Always a
    /// valid cloud, so its values are clamped even in training mode.
    pub cloud: PointCloud,
    /// `cur + 255 · residual`; unclamped in training mode.
    pub enhanced: AttributeVector,
    /// Raw network output in units of 1/255.
    pub residual: Vec<f32>,
}

impl EnhancedFrame {
    pub fn new(cur: &PointCloud, component: Component, residual: Vec<f32>, mode: Mode) -> Result<Self> {
        let base = cur.component(component).values;
        if residual.len() != base.len() {
            return Err(Error::Shape(format!("{} residuals for {} points", residual.len(), base.len())));
        }
        let values = apply_residual(&base, &residual, mode);
        let clamped = AttributeVector {
            values: values.iter().map(|v| v.clamp(0.0, 255.0)).collect(),
            component,
        };
        Ok(EnhancedFrame {
            cloud: cur.with_component(&clamped)?,
            enhanced: AttributeVector { values, component },
            residual,
        })
    }
}

/// Enhances one component of `triplet.cur` as a single forward pass.
pub fn stqe_forward(
    triplet: &FrameTriplet,
    component: Component,
    params: &ModelParams,
    mode: Mode,
) -> Result<EnhancedFrame> {
    if params.component != component {
        return Err(Error::Config(format!(
            "model was trained for {}, asked to enhance {component}",
            params.component
        )));
    }
    let inputs = NetInputs::from_triplet(triplet, component, &params.config)?;
    let residual = predict_residual(params, &inputs)?;
    EnhancedFrame::new(&triplet.cur, component, residual, mode)
}
