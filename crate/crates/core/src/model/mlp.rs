//! The MLP itself: parameter layout, batched forward pass with a cache, and
//! the exact reverse-mode pass over that cache.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{count_params, Activation, BlockKind, ModelConfig};
use crate::model::layers::{dropout_mask, LayerNorm, Linear, NormStats};
use crate::tensor::{Scalar, SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockParams<T> {
    Standard {
        norm: LayerNorm<T>,
        linear: Linear<T>,
    },
    Bottleneck {
        norm: LayerNorm<T>,
        expand: Linear<T>,
        collapse: Linear<T>,
    },
}

impl<T: Scalar> BlockParams<T> {
    fn zeros(config: &ModelConfig) -> Self {
        let m = config.width;
        match config.block {
            BlockKind::Standard => BlockParams::Standard {
                norm: LayerNorm::new(m),
                linear: Linear::zeros(m, m),
            },
            BlockKind::InvertedBottleneck => BlockParams::Bottleneck {
                norm: LayerNorm::new(m),
                expand: Linear::zeros(config.hidden_width(), m),
                collapse: Linear::zeros(m, config.hidden_width()),
            },
        }
    }

    fn init(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let m = config.width;
        Ok(match config.block {
            BlockKind::Standard => BlockParams::Standard {
                norm: LayerNorm::new(m),
                linear: Linear::init(m, m, rng)?,
            },
            BlockKind::InvertedBottleneck => BlockParams::Bottleneck {
                norm: LayerNorm::new(m),
                expand: Linear::init(config.hidden_width(), m, rng)?,
                collapse: Linear::init(m, config.hidden_width(), rng)?,
            },
        })
    }

    /// Single-vector block application (no dropout).
    pub fn forward_one(&self, z: &[T], activation: Activation) -> Result<Vec<T>> {
        let (out, _) = self.forward_rows(z, 1, activation, 0.0, None)?;
        Ok(out)
    }

    fn forward_rows(
        &self,
        z: &[T],
        rows: usize,
        activation: Activation,
        dropout: f64,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<(Vec<T>, BlockCache<T>)> {
        let mut draw_mask = |len: usize| -> Option<Vec<T>> {
            match rng.as_deref_mut() {
                Some(r) if dropout > 0.0 => Some(dropout_mask(len, dropout, r)),
                _ => None,
            }
        };
        let apply_mask = |v: &mut [T], mask: &Option<Vec<T>>| {
            if let Some(mask) = mask {
                v.iter_mut().zip(mask).for_each(|(x, &k)| *x = *x * k);
            }
        };
        match self {
            BlockParams::Standard { norm, linear } => {
                let (normed, stats) = norm.forward(z, rows)?;
                let pre = linear.forward(&normed, rows)?;
                let mut act: Vec<T> = pre.iter().map(|&u| activation.apply(u)).collect();
                let mask_act = draw_mask(act.len());
                apply_mask(&mut act, &mask_act);
                let out = act.clone();
                Ok((
                    out,
                    BlockCache {
                        stats,
                        normed,
                        pre,
                        act,
                        mask_act,
                        mask_out: None,
                    },
                ))
            }
            BlockParams::Bottleneck { norm, expand, collapse } => {
                let (normed, stats) = norm.forward(z, rows)?;
                let pre = expand.forward(&normed, rows)?;
                let mut act: Vec<T> = pre.iter().map(|&u| activation.apply(u)).collect();
                let mask_act = draw_mask(act.len());
                apply_mask(&mut act, &mask_act);
                let mut branch = collapse.forward(&act, rows)?;
                let mask_out = draw_mask(branch.len());
                apply_mask(&mut branch, &mask_out);
                let out = z.iter().zip(&branch).map(|(&a, &b)| a + b).collect();
                Ok((
                    out,
                    BlockCache {
                        stats,
                        normed,
                        pre,
                        act,
                        mask_act,
                        mask_out,
                    },
                ))
            }
        }
    }
}

/// Full parameter set; the same layout doubles as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams<T> {
    pub embed: Linear<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head: Linear<T>,
}

impl<T: Scalar> MlpParams<T> {
    /// Zero weights, unit LayerNorm gains; the shape template for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            embed: Linear::zeros(config.width, config.input.dim()),
            blocks: (0..config.depth).map(|_| BlockParams::zeros(config)).collect(),
            head: Linear::zeros(config.num_classes, config.width),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.named_mut() {
            t.fill(T::zero());
        }
        out
    }

    /// Tensors in a fixed order with stable dotted names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("embed.weight".to_string(), &self.embed.weight),
            ("embed.bias".to_string(), &self.embed.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                BlockParams::Standard { norm, linear } => {
                    out.push((format!("blocks.{i}.norm.gain"), &norm.gain));
                    out.push((format!("blocks.{i}.norm.bias"), &norm.bias));
                    out.push((format!("blocks.{i}.linear.weight"), &linear.weight));
                    out.push((format!("blocks.{i}.linear.bias"), &linear.bias));
                }
                BlockParams::Bottleneck { norm, expand, collapse } => {
                    out.push((format!("blocks.{i}.norm.gain"), &norm.gain));
                    out.push((format!("blocks.{i}.norm.bias"), &norm.bias));
                    out.push((format!("blocks.{i}.expand.weight"), &expand.weight));
                    out.push((format!("blocks.{i}.expand.bias"), &expand.bias));
                    out.push((format!("blocks.{i}.collapse.weight"), &collapse.weight));
                    out.push((format!("blocks.{i}.collapse.bias"), &collapse.bias));
                }
            }
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("embed.weight".to_string(), &mut self.embed.weight),
            ("embed.bias".to_string(), &mut self.embed.bias),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            match b {
                BlockParams::Standard { norm, linear } => {
                    out.push((format!("blocks.{i}.norm.gain"), &mut norm.gain));
                    out.push((format!("blocks.{i}.norm.bias"), &mut norm.bias));
                    out.push((format!("blocks.{i}.linear.weight"), &mut linear.weight));
                    out.push((format!("blocks.{i}.linear.bias"), &mut linear.bias));
                }
                BlockParams::Bottleneck { norm, expand, collapse } => {
                    out.push((format!("blocks.{i}.norm.gain"), &mut norm.gain));
                    out.push((format!("blocks.{i}.norm.bias"), &mut norm.bias));
                    out.push((format!("blocks.{i}.expand.weight"), &mut expand.weight));
                    out.push((format!("blocks.{i}.expand.bias"), &mut expand.bias));
                    out.push((format!("blocks.{i}.collapse.weight"), &mut collapse.weight));
                    out.push((format!("blocks.{i}.collapse.bias"), &mut collapse.bias));
                }
            }
        }
        out.push(("head.weight".to_string(), &mut self.head.weight));
        out.push(("head.bias".to_string(), &mut self.head.bias));
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    stats: NormStats<T>,
    normed: Vec<T>,
    pre: Vec<T>,
    /// Post-activation values, dropout already applied.
    act: Vec<T>,
    mask_act: Option<Vec<T>>,
    mask_out: Option<Vec<T>>,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    model_id: u64,
    generation: u64,
    rows: usize,
    input: Vec<T>,
    /// Input to each block; `block_inputs[0]` is the embedding output.
    block_inputs: Vec<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
    features: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Output of the final block, the input to the head.
    pub fn features(&self) -> &[T] {
        &self.features
    }
}

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

/// Materialized MLP. Parameter mutation bumps a generation counter so that a
/// cache from before the mutation is rejected by [`MlpModel::backward`].
#[derive(Debug)]
pub struct MlpModel<T> {
    config: ModelConfig,
    params: MlpParams<T>,
    id: u64,
    generation: u64,
}

impl<T: Scalar> Clone for MlpModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        }
    }
}

impl<T: Scalar> MlpModel<T> {
    /// Fresh model: He-initialized weights, zero biases, unit LN gains.
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let params = MlpParams {
            embed: Linear::init(config.width, config.input.dim(), rng)?,
            blocks: (0..config.depth)
                .map(|_| BlockParams::init(&config, rng))
                .collect::<Result<_>>()?,
            head: Linear::init(config.num_classes, config.width, rng)?,
        };
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: MlpParams<T>) -> Result<Self> {
        config.validate()?;
        let template = MlpParams::<T>::zeros(&config);
        let want = template.named();
        let got = params.named();
        if want.len() != got.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                got.len()
            )));
        }
        for ((wn, wt), (gn, gt)) in want.iter().zip(&got) {
            if wn != gn || wt.shape() != gt.shape() {
                return Err(Error::ShapeMismatch {
                    left: wt.shape().to_vec(),
                    right: gt.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config,
            params,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &MlpParams<T> {
        &self.params
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut MlpParams<T> {
        self.generation += 1;
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, MlpParams<T>) {
        (self.config, self.params)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Replaces the classifier with a fresh He-initialized head for `num_classes`.
    pub fn replace_head(&mut self, num_classes: usize, rng: &mut SeededRng) -> Result<()> {
        let mut config = self.config.clone();
        config.num_classes = num_classes;
        config.validate()?;
        let head = Linear::init(num_classes, config.width, rng)?;
        self.params_mut().head = head;
        self.config = config;
        debug_assert_eq!(self.scalar_count() as u64, count_params(&self.config));
        Ok(())
    }

    /// `W_emb vec(image) + b` for one row-major `h x w x c` image.
    pub fn embed_one(&self, image: &[T]) -> Result<Vec<T>> {
        let d = self.config.input.dim();
        if image.len() != d {
            return Err(Error::ShapeMismatch {
                left: vec![image.len()],
                right: vec![d],
            });
        }
        self.params.embed.forward(image, 1)
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let d = self.config.input.dim();
        let shape = batch.shape();
        let ok = match shape.len() {
            1 => shape[0] == d,
            2 => shape[1] == d,
            _ => false,
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                left: shape.to_vec(),
                right: vec![batch.rows(), d],
            });
        }
        Ok(batch.rows())
    }

    /// Deterministic (dropout off) forward pass over a `B x (h*w*c)` batch.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.forward_impl(batch, None)
    }

    /// Training-mode forward pass; dropout masks are drawn from `rng`.
    pub fn forward_train(&self, batch: &Tensor<T>, rng: &mut SeededRng) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.forward_impl(batch, Some(rng))
    }

    fn forward_impl(&self, batch: &Tensor<T>, mut rng: Option<&mut SeededRng>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let rows = self.check_batch(batch)?;
        let mut z = self.params.embed.forward(batch.data(), rows)?;
        let mut block_inputs = Vec::with_capacity(self.config.depth);
        let mut blocks = Vec::with_capacity(self.config.depth);
        for block in &self.params.blocks {
            let (out, cache) = block.forward_rows(
                &z,
                rows,
                self.config.activation,
                self.config.dropout,
                rng.as_deref_mut(),
            )?;
            block_inputs.push(std::mem::replace(&mut z, out));
            blocks.push(cache);
        }
        let logits = self.params.head.forward(&z, rows)?;
        let cache = ForwardCache {
            model_id: self.id,
            generation: self.generation,
            rows,
            input: batch.data().to_vec(),
            block_inputs,
            blocks,
            features: z,
        };
        Ok((Tensor::from_vec(&[rows, self.config.num_classes], logits)?, cache))
    }

    /// Output of the final block (pre-head), dropout off.
    pub fn features(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = self.check_batch(batch)?;
        let mut z = self.params.embed.forward(batch.data(), rows)?;
        for block in &self.params.blocks {
            z = block.forward_rows(&z, rows, self.config.activation, 0.0, None)?.0;
        }
        Tensor::from_vec(&[rows, self.config.width], z)
    }

    /// Gradients of the scalar loss whose logit gradient is `dlogits`.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Result<MlpParams<T>> {
        if cache.model_id != self.id || cache.generation != self.generation {
            return Err(Error::StaleCache("parameters changed since the forward pass".into()));
        }
        let rows = cache.rows;
        if dlogits.shape() != [rows, self.config.num_classes] {
            return Err(Error::ShapeMismatch {
                left: dlogits.shape().to_vec(),
                right: vec![rows, self.config.num_classes],
            });
        }
        let act = self.config.activation;
        let mut grads = MlpParams::zeros(&self.config);

        let mut dz = self
            .params
            .head
            .backward(&cache.features, dlogits.data(), rows, &mut grads.head, true)?
            .expect("dx requested");

        for (i, block) in self.params.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            let gblock = &mut grads.blocks[i];
            dz = match (block, gblock) {
                (BlockParams::Standard { norm, linear }, BlockParams::Standard { norm: gn, linear: gl }) => {
                    let du: Vec<T> = dz
                        .iter()
                        .zip(&bc.pre)
                        .enumerate()
                        .map(|(j, (&d, &u))| {
                            let k = bc.mask_act.as_ref().map_or(T::one(), |m| m[j]);
                            d * k * act.derivative(u)
                        })
                        .collect();
                    let dnormed = linear.backward(&bc.normed, &du, rows, gl, true)?.expect("dx requested");
                    norm.backward(&bc.stats, &dnormed, gn)
                }
                (
                    BlockParams::Bottleneck { norm, expand, collapse },
                    BlockParams::Bottleneck {
                        norm: gn,
                        expand: ge,
                        collapse: gc,
                    },
                ) => {
                    let dbranch: Vec<T> = match &bc.mask_out {
                        Some(m) => dz.iter().zip(m).map(|(&d, &k)| d * k).collect(),
                        None => dz.clone(),
                    };
                    let dact = collapse.backward(&bc.act, &dbranch, rows, gc, true)?.expect("dx requested");
                    let du: Vec<T> = dact
                        .iter()
                        .zip(&bc.pre)
                        .enumerate()
                        .map(|(j, (&d, &u))| {
                            let k = bc.mask_act.as_ref().map_or(T::one(), |m| m[j]);
                            d * k * act.derivative(u)
                        })
                        .collect();
                    let dnormed = expand.backward(&bc.normed, &du, rows, ge, true)?.expect("dx requested");
                    let dln = norm.backward(&bc.stats, &dnormed, gn);
                    dz.iter().zip(&dln).map(|(&a, &b)| a + b).collect()
                }
                _ => return Err(Error::StaleCache("block kinds differ".into())),
            };
        }
        debug_assert_eq!(cache.block_inputs.len(), self.config.depth);
        self.params.embed.backward(&cache.input, &dz, rows, &mut grads.embed, false)?;
        Ok(grads)
    }
}
