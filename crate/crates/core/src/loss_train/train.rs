use std::collections::HashMap;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::patches::{fuse_patches, generate_patches};
use super::{joint_loss, LossValue};
use crate::error::{Error, Result};
use crate::network::{forward_residual, predict_residual, EnhancedFrame, Graph, Mode, ModelConfig, ModelParams, NetInputs};
use crate::pcdata::{read_ply_with, Component, FrameTriplet, PointCloud, ReadOptions};
use crate::tensorad::{Tape, Tensor};

fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    1e-4
}
fn default_alpha() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_patch() -> usize {
    2048
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    /// Evaluate the patches of a batch on the rayon pool. Results are
    /// bitwise identical to serial evaluation.
    #[serde(default)]
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            alpha: default_alpha(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
            patch_size: default_patch(),
            seed: 0,
            model: ModelConfig::default(),
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return bad(format!(
                "epochs, batch_size and patch_size must be positive (got {}, {}, {})",
                self.epochs, self.batch_size, self.patch_size
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        self.model.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// A decoded triplet with the uncompressed current frame as supervision.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub triplet: FrameTriplet,
    pub original: PointCloud,
}

impl TrainSample {
    /// The original component values in the current frame's point order.
    /// Geometry is lossless, so every current point must exist in the
    /// original.
    pub fn target(&self, component: Component) -> Result<Vec<f32>> {
        let c = component.index();
        let orig: HashMap<[u32; 3], f32> = self
            .original
            .geometry()
            .iter()
            .zip(self.original.attributes())
            .map(|(p, a)| (*p, a[c]))
            .collect();
        self.triplet
            .cur
            .geometry()
            .iter()
            .map(|p| {
                orig.get(p).copied().ok_or_else(|| {
                    Error::InvalidCloud(format!("current point {p:?} is missing from the original frame"))
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
    pub pcc: f64,
    pub degenerate_patches: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
}

struct Item {
    inputs: NetInputs,
    target: Vec<f32>,
}

fn column(values: &[f32]) -> Result<Tensor<f32>> {
    Tensor::column(values.iter().map(|&v| v / 255.0).collect())
}

fn item_gradients(params: &ModelParams, item: &Item, alpha: f64) -> Result<(Vec<Tensor<f32>>, LossValue)> {
    let tensors = &params.tensors;
    let mut tape = Tape::<f32>::new();
    let mut g = Graph::new(&mut tape, tensors, true, params.config.leaky_slope);
    let residual = forward_residual(&mut g, &item.inputs)?;
    let handles: Vec<_> = g.params().map(|(_, v)| v).collect();
    let cur = tape.constant(column(&item.inputs.cur)?);
    let target = tape.constant(column(&item.target)?);
    let pred = tape.add(cur, residual)?;
    let loss = joint_loss(&mut tape, pred, target, alpha)?;
    let value = |v| f64::from(tape.value(v).data()[0]);
    let lv = LossValue {
        total: value(loss.total),
        mse: value(loss.mse),
        pcc: value(loss.pcc),
        degenerate: loss.degenerate,
    };
    if !lv.total.is_finite() {
        return Err(Error::Config(format!("training diverged: loss is {}", lv.total)));
    }
    let grads = tape.backward(loss.total)?;
    let out = handles
        .into_iter()
        .map(|v| grads.get(v).cloned().expect("parameters always receive a gradient"))
        .collect();
    Ok((out, lv))
}

fn build_items(samples: &[TrainSample], component: Component, cfg: &TrainConfig) -> Result<Vec<Item>> {
    let mut items = Vec::new();
    for s in samples {
        let target = s.target(component)?;
        let full = NetInputs::from_triplet(&s.triplet, component, &cfg.model)?;
        for patch in generate_patches(&full.geometry, cfg.patch_size)? {
            items.push(Item {
                inputs: full.select(&patch.indices, &cfg.model)?,
                target: patch.indices.iter().map(|&i| target[i]).collect(),
            });
        }
    }
    Ok(items)
}

/// Trains a fresh model for `component`, initialized from `config.seed`.
pub fn train(samples: &[TrainSample], component: Component, config: &TrainConfig) -> Result<TrainOutput> {
    let params = ModelParams::init(config.model.clone(), component, config.seed)?;
    train_from(params, samples, config)
}

/// Continues training `params` on `samples`.
pub fn train_from(mut params: ModelParams, samples: &[TrainSample], config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if params.config != config.model {
        return Err(Error::Config("model parameters do not match the configured model".into()));
    }
    let items = build_items(samples, params.component, config)?;
    log::info!("training on {} patches from {} samples", items.len(), samples.len());

    let adam = config.adam();
    let mut state = AdamState::new();
    // Distinct stream from parameter initialization.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut mse, mut pcc, mut degenerate) = (0.0, 0.0, 0.0, 0);
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<_>> = if config.parallel {
                batch.par_iter().map(|&i| item_gradients(&params, &items[i], config.alpha)).collect()
            } else {
                batch.iter().map(|&i| item_gradients(&params, &items[i], config.alpha)).collect()
            };
            let mut sum: Option<Vec<Tensor<f32>>> = None;
            for r in results {
                let (grads, lv) = r?;
                total += lv.total;
                mse += lv.mse;
                pcc += lv.pcc;
                degenerate += usize::from(lv.degenerate);
                match sum.as_mut() {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x += y);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            let avg: IndexMap<String, Tensor<f32>> = params
                .tensors
                .keys()
                .cloned()
                .zip(sum.expect("batches are non-empty").into_iter().map(|t| t.map(|v| v * scale)))
                .collect();
            adam_step(&mut params.tensors, &avg, &mut state, &adam)?;
        }
        let n = items.len() as f64;
        let stats = EpochStats { epoch, loss: total / n, mse: mse / n, pcc: pcc / n, degenerate_patches: degenerate };
        if degenerate > 0 {
            log::warn!("epoch {epoch}: {degenerate} patches had degenerate variance in the correlation loss");
        }
        log::info!("epoch {epoch}: loss {:.6} (mse {:.6}, pcc {:.6})", stats.loss, stats.mse, stats.pcc);
        history.push(stats);
    }
    Ok(TrainOutput { params, history })
}

/// Enhances `triplet.cur` patch by patch and fuses overlaps by averaging.
pub fn enhance_frame(
    triplet: &FrameTriplet,
    component: Component,
    params: &ModelParams,
    patch_size: usize,
    parallel: bool,
) -> Result<EnhancedFrame> {
    if params.component != component {
        return Err(Error::Config(format!(
            "model was trained for {}, asked to enhance {component}",
            params.component
        )));
    }
    let full = NetInputs::from_triplet(triplet, component, &params.config)?;
    let patches = generate_patches(&full.geometry, patch_size)?;
    let run = |p: &super::Patch| -> Result<Vec<f32>> {
        let inputs = full.select(&p.indices, &params.config)?;
        predict_residual(params, &inputs)
    };
    let preds: Vec<Vec<f32>> = if parallel {
        patches.par_iter().map(run).collect::<Result<_>>()?
    } else {
        patches.iter().map(run).collect::<Result<_>>()?
    };
    let residual = fuse_patches(full.len(), &patches, &preds)?;
    EnhancedFrame::new(&triplet.cur, component, residual, Mode::Infer)
}

fn component_from_str<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Component, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

/// PLY paths of one training sample.
#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub prev: PathBuf,
    pub cur: PathBuf,
    pub next: PathBuf,
    pub original: PathBuf,
}

/// `{"component": "Y", "samples": [{"prev", "cur", "next", "original"}]}`.
#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainManifest {
    #[serde(deserialize_with = "component_from_str")]
    pub component: Component,
    pub samples: Vec<ManifestSample>,
}

impl TrainManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: TrainManifest = serde_json::from_str(text)?;
        if m.samples.is_empty() {
            return Err(Error::Config("manifest lists no samples".into()));
        }
        Ok(m)
    }

    /// Reads a manifest; relative paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m = Self::parse(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        for s in &mut m.samples {
            for p in [&mut s.prev, &mut s.cur, &mut s.next, &mut s.original] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(m)
    }

    pub fn read_samples(&self, opts: &ReadOptions) -> Result<Vec<TrainSample>> {
        self.samples
            .iter()
            .map(|s| {
                let triplet = FrameTriplet::new(
                    read_ply_with(&s.prev, opts)?,
                    read_ply_with(&s.cur, opts)?,
                    read_ply_with(&s.next, opts)?,
                )?;
                Ok(TrainSample { triplet, original: read_ply_with(&s.original, opts)? })
            })
            .collect()
    }
}
