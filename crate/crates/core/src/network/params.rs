use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcdata::Component;
use crate::tensorad::{Real, Tensor};

/// Layer widths. Every stage is a stack of 1×1 convolutions; the values are
/// output widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Widths {
    /// BIFE per-neighbour convs; input is 2 (neighbour ‖ centre).
    pub shallow: [usize; 3],
    /// BIFE merge convs after concatenating both branches. The last width is
    /// `c`; CTA halves it, so it must be even.
    pub merge: [usize; 2],
    /// GNFA output width `l1`, shared by all three modules.
    pub gnfa: usize,
    /// STF hidden widths; a final projection maps to 1.
    pub stf: [usize; 3],
}

impl Default for Widths {
    fn default() -> Self {
        Widths { shallow: [32, 64, 64], merge: [256, 256], gnfa: 32, stf: [256, 128, 64] }
    }
}

impl Widths {
    /// Channel count `c` of F1.
    pub fn fused(&self) -> usize {
        self.merge[1]
    }

    /// Width of the temporal feature, `c/2`.
    pub fn temporal(&self) -> usize {
        self.merge[1] / 2
    }

    /// Width of the spatial feature, `3·l1`.
    pub fn spatial(&self) -> usize {
        3 * self.gnfa
    }

    pub fn to_table(&self) -> Vec<u32> {
        let mut t: Vec<usize> = Vec::with_capacity(9);
        t.extend(self.shallow);
        t.extend(self.merge);
        t.push(self.gnfa);
        t.extend(self.stf);
        t.into_iter().map(|v| v as u32).collect()
    }

    pub fn from_table(t: &[u32]) -> Result<Self> {
        if t.len() != 9 {
            return Err(Error::Config(format!("width table has {} entries, expected 9", t.len())));
        }
        let u = |i: usize| t[i] as usize;
        let w = Widths {
            shallow: [u(0), u(1), u(2)],
            merge: [u(3), u(4)],
            gnfa: u(5),
            stf: [u(6), u(7), u(8)],
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.to_table();
        if all.iter().any(|&v| v == 0 || v > 1 << 16) {
            return Err(Error::Config(format!("widths must lie in [1, 65536], got {all:?}")));
        }
        if self.merge[1] % 2 != 0 {
            return Err(Error::Config(format!("merge output width {} must be even", self.merge[1])));
        }
        Ok(())
    }
}

fn default_k() -> usize {
    20
}
fn default_sigma2() -> f64 {
    0.5
}
fn default_slope() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}

/// Hyperparameters fixed at construction time and stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// Feed squared distances to the Gaussian kernel instead of distances.
    #[serde(default)]
    pub squared_kernel: bool,
    /// One set of shallow-conv weights for both BIFE branches.
    #[serde(default = "default_true")]
    pub shared_branch: bool,
    #[serde(default)]
    pub widths: Widths,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: default_k(),
            sigma2: default_sigma2(),
            leaky_slope: default_slope(),
            squared_kernel: false,
            shared_branch: true,
            widths: Widths::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > 1024 {
            return Err(Error::Config(format!("k must lie in [1, 1024], got {}", self.k)));
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(Error::Config(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config(format!("leaky_slope must be non-negative, got {}", self.leaky_slope)));
        }
        self.widths.validate()
    }

    /// Every parameter's name and shape, in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let w = &self.widths;
        let mut out = Vec::new();
        let mut layer = |name: String, cin: usize, cout: usize| {
            out.push((format!("{name}.w"), vec![cin, cout]));
            out.push((format!("{name}.b"), vec![cout]));
        };
        let branches: &[&str] = if self.shared_branch { &["shallow"] } else { &["shallow_prev", "shallow_next"] };
        for br in branches {
            let mut cin = 2;
            for (i, &c) in w.shallow.iter().enumerate() {
                layer(format!("bife.{br}.{i}"), cin, c);
                cin = c;
            }
        }
        let mut cin = 2 * w.shallow[2];
        for (i, &c) in w.merge.iter().enumerate() {
            layer(format!("bife.merge.{i}"), cin, c);
            cin = c;
        }
        let half = w.temporal();
        layer("cta.0".into(), half, half);
        layer("cta.1".into(), half, half);
        for i in 0..4 {
            layer(format!("res.{i}"), half, half);
        }
        let mut l = 1;
        for g in 0..3 {
            layer(format!("sfe.gnfa{g}.0"), 2 * l, w.gnfa);
            layer(format!("sfe.gnfa{g}.1"), w.gnfa, w.gnfa);
            l += w.gnfa;
        }
        let mut cin = half + w.spatial();
        for (i, &c) in w.stf.iter().enumerate() {
            layer(format!("stf.{i}"), cin, c);
            cin = c;
        }
        layer("stf.3".into(), cin, 1);
        out
    }
}

/// Learnable weights of one per-component model, stored in 32-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub component: Component,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

impl ModelParams {
    /// Kaiming-uniform weights with the Leaky ReLU gain, zero biases.
    pub fn init(config: ModelConfig, component: Component, seed: u64) -> Result<Self> {
        config.validate()?;
        let slope = config.leaky_slope;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        for (name, shape) in config.layout() {
            let numel: usize = shape.iter().product();
            let data = if name.ends_with(".w") {
                let bound = (6.0 / ((1.0 + slope * slope) * shape[0] as f64)).sqrt() as f32;
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..numel).map(|_| dist.sample(&mut rng)).collect()
            } else {
                vec![0.0; numel]
            };
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(ModelParams { config, component, tensors })
    }

    /// Checks that the tensors match the configured layout exactly.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let layout = self.config.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in layout {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("{name}: non-finite value")));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// The tensors converted to `T`, in canonical order.
    pub fn tensors_as<T: Real>(&self) -> IndexMap<String, Tensor<T>> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }
}
