use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{Activation, BatchNorm, BnCache, Conv2d};
use super::{Scalar, Tensor4};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Each slice is a sample; the exam score is the maximum slice score.
    MaxOverSlices,
    /// Slices of all planes are stacked as input channels.
    StackedChannels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    #[serde(default = "one")]
    pub out_tasks: usize,
    #[serde(default = "default_stem_filters")]
    pub stem_filters: usize,
    #[serde(default = "default_stem_stride")]
    pub stem_stride: usize,
    #[serde(default = "default_stage_channels")]
    pub stage_channels: Vec<usize>,
    #[serde(default = "default_stage_blocks")]
    pub stage_blocks: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default)]
    pub activation: Activation,
    pub aggregation: Aggregation,
}

fn one() -> usize {
    1
}
fn default_stem_filters() -> usize {
    16
}
fn default_stem_stride() -> usize {
    2
}
fn default_stage_channels() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_stage_blocks() -> usize {
    2
}
fn default_input_size() -> usize {
    64
}

impl ModelConfig {
    /// Desk-scale defaults for the given input layout.
    pub fn new(in_channels: usize, out_tasks: usize, aggregation: Aggregation) -> Self {
        ModelConfig {
            in_channels,
            out_tasks,
            stem_filters: default_stem_filters(),
            stem_stride: default_stem_stride(),
            stage_channels: default_stage_channels(),
            stage_blocks: default_stage_blocks(),
            input_size: default_input_size(),
            activation: Activation::default(),
            aggregation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 3, 45].contains(&self.in_channels) {
            return Err(Error::Config(format!(
                "in_channels must be 1, 3 or 45, got {}",
                self.in_channels
            )));
        }
        if ![1, 3].contains(&self.out_tasks) {
            return Err(Error::Config(format!(
                "out_tasks must be 1 or 3, got {}",
                self.out_tasks
            )));
        }
        if self.aggregation == Aggregation::StackedChannels && !self.in_channels.is_multiple_of(15) {
            return Err(Error::Config(
                "stacked channels need 15 slices per plane as input channels".into(),
            ));
        }
        if self.stem_filters == 0
            || self.stem_stride == 0
            || self.stage_blocks == 0
            || self.input_size == 0
            || self.stage_channels.is_empty()
            || self.stage_channels.contains(&0)
        {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }

    /// Final feature-map edge length for this input size.
    pub fn feature_size(&self) -> usize {
        let mut size = (self.input_size + 2 - 3) / self.stem_stride + 1;
        for _ in 1..self.stage_channels.len() {
            size = (size - 1) / 2 + 1;
        }
        size
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm<T>,
    projection: Option<(Conv2d<T>, BatchNorm<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockCache<T> {
    bn1: BnCache<T>,
    mid_saved: Tensor4<T>,
    mid: Tensor4<T>,
    bn2: BnCache<T>,
    projection: Option<BnCache<T>>,
}

/// Activations retained by a train-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Cache<T> {
    version: u64,
    input: Tensor4<T>,
    stem_bn: BnCache<T>,
    // acts[0] is the stem output, acts[i + 1] the output of block i.
    acts: Vec<Tensor4<T>>,
    // What each activation in `acts` saved for its backward pass.
    saved: Vec<Tensor4<T>>,
    blocks: Vec<BlockCache<T>>,
    features: Vec<T>,
}

impl<T> Cache<T> {
    pub fn batch(&self) -> usize {
        self.input.n
    }
}

/// Output of [`Model::forward`]: logits are `batch x out_tasks`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward<T> {
    pub logits: Vec<T>,
    pub cache: Option<Cache<T>>,
}

/// Parameter gradients in declaration order (see [`Model::params`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub blocks: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn scale(&mut self, factor: T) {
        self.blocks
            .iter_mut()
            .flatten()
            .for_each(|g| *g = *g * factor);
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|g| g.is_finite())
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Compact residual CNN: 3x3 stem, stages of two-convolution residual
/// blocks with batch normalization, global average pooling and an affine
/// head with one logit per task.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    stem: Conv2d<T>,
    stem_bn: BatchNorm<T>,
    blocks: Vec<Block<T>>,
    head_weight: Vec<T>,
    head_bias: Vec<T>,
    version: u64,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = Conv2d::new(
            config.in_channels,
            config.stem_filters,
            3,
            config.stem_stride,
            rng,
        );
        let stem_bn = BatchNorm::new(config.stem_filters);
        let mut blocks = Vec::new();
        let mut channels = config.stem_filters;
        for (stage, &width) in config.stage_channels.iter().enumerate() {
            for b in 0..config.stage_blocks {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let conv1 = Conv2d::new(channels, width, 3, stride, rng);
                let conv2 = Conv2d::new(width, width, 3, 1, rng);
                let projection = (stride != 1 || channels != width)
                    .then(|| (Conv2d::new(channels, width, 1, stride, rng), BatchNorm::new(width)));
                blocks.push(Block {
                    conv1,
                    bn1: BatchNorm::new(width),
                    conv2,
                    bn2: BatchNorm::new(width),
                    projection,
                });
                channels = width;
            }
        }
        let normal = Normal::new(0.0, libm::sqrt(2.0 / channels as f64)).expect("positive std");
        let head_weight = (0..config.out_tasks * channels)
            .map(|_| T::cast(normal.sample(rng)))
            .collect();
        Ok(Model {
            head_bias: vec![T::zero(); config.out_tasks],
            config,
            stem,
            stem_bn,
            blocks,
            head_weight,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Increments whenever parameters may have changed.
    pub fn version(&self) -> u64 {
        self.version
    }

    fn feature_channels(&self) -> usize {
        *self.config.stage_channels.last().expect("validated")
    }

    /// Trainable parameter blocks in declaration order.
    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![
            &self.stem.weight,
            &self.stem.bias,
            &self.stem_bn.gamma,
            &self.stem_bn.beta,
        ];
        for b in &self.blocks {
            out.extend([
                &b.conv1.weight[..],
                &b.conv1.bias,
                &b.bn1.gamma,
                &b.bn1.beta,
                &b.conv2.weight,
                &b.conv2.bias,
                &b.bn2.gamma,
                &b.bn2.beta,
            ]);
            if let Some((conv, bn)) = &b.projection {
                out.extend([&conv.weight[..], &conv.bias, &bn.gamma, &bn.beta]);
            }
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.version += 1;
        let mut out: Vec<&mut [T]> = vec![
            &mut self.stem.weight,
            &mut self.stem.bias,
            &mut self.stem_bn.gamma,
            &mut self.stem_bn.beta,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.conv1.weight[..],
                &mut b.conv1.bias,
                &mut b.bn1.gamma,
                &mut b.bn1.beta,
                &mut b.conv2.weight,
                &mut b.conv2.bias,
                &mut b.bn2.gamma,
                &mut b.bn2.beta,
            ]);
            if let Some((conv, bn)) = &mut b.projection {
                out.extend([&mut conv.weight[..], &mut conv.bias, &mut bn.gamma, &mut bn.beta]);
            }
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    fn norms(&self) -> Vec<&BatchNorm<T>> {
        let mut out = vec![&self.stem_bn];
        for b in &self.blocks {
            out.push(&b.bn1);
            out.push(&b.bn2);
            if let Some((_, bn)) = &b.projection {
                out.push(bn);
            }
        }
        out
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = vec![&mut self.stem_bn];
        for b in &mut self.blocks {
            out.push(&mut b.bn1);
            out.push(&mut b.bn2);
            if let Some((_, bn)) = &mut b.projection {
                out.push(bn);
            }
        }
        out
    }

    /// Running mean and variance of every normalization layer, in order.
    pub fn buffers(&self) -> Vec<&[T]> {
        self.norms()
            .into_iter()
            .flat_map(|bn| [&bn.running_mean[..], &bn.running_var[..]])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        self.norms_mut()
            .into_iter()
            .flat_map(|bn| [&mut bn.running_mean[..], &mut bn.running_var[..]])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            blocks: self.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let size = self.config.input_size;
        if x.c != self.config.in_channels || x.h != size || x.w != size || x.n == 0 {
            return Err(Error::Shape(format!(
                "expected Nx{}x{size}x{size} input with N >= 1, got {}x{}x{}x{}",
                self.config.in_channels, x.n, x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    /// Runs the network. Train mode normalizes with batch statistics and
    /// returns the activation cache needed by [`Model::backward`].
    pub fn forward(&self, x: &Tensor4<T>, mode: Mode) -> Result<Forward<T>> {
        self.check_input(x)?;
        let train = mode == Mode::Train;
        let bn = |layer: &BatchNorm<T>, t: &Tensor4<T>| -> (Tensor4<T>, Option<BnCache<T>>) {
            if train {
                let (y, c) = layer.forward_train(t);
                (y, Some(c))
            } else {
                (layer.forward_eval(t), None)
            }
        };

        let act = self.config.activation;
        let activate = |t: &mut Tensor4<T>, keep: &mut Vec<Tensor4<T>>| {
            if train {
                keep.push(act.forward_inplace(t));
            } else {
                act.apply(t);
            }
        };
        let mut saved = Vec::new();
        let mut mid_saved = Vec::new();
        let (mut a, stem_cache) = bn(&self.stem_bn, &self.stem.forward(x));
        activate(&mut a, &mut saved);
        let mut acts = Vec::new();
        let mut block_caches = Vec::new();
        for block in &self.blocks {
            let (mut mid, bn1) = bn(&block.bn1, &block.conv1.forward(&a));
            activate(&mut mid, &mut mid_saved);
            let (mut out, bn2) = bn(&block.bn2, &block.conv2.forward(&mid));
            let projection = match &block.projection {
                Some((conv, pbn)) => {
                    let (skip, cache) = bn(pbn, &conv.forward(&a));
                    add_assign(&mut out, &skip);
                    cache
                }
                None => {
                    add_assign(&mut out, &a);
                    None
                }
            };
            activate(&mut out, &mut saved);
            if train {
                block_caches.push(BlockCache {
                    bn1: bn1.expect("train"),
                    mid_saved: mid_saved.pop().expect("train"),
                    mid,
                    bn2: bn2.expect("train"),
                    projection,
                });
            }
            acts.push(core::mem::replace(&mut a, out));
        }

        let channels = a.c;
        let plane = T::cast(a.plane() as f64);
        let features: Vec<T> = a
            .data
            .chunks_exact(a.plane())
            .map(|chunk| chunk.iter().fold(T::zero(), |s, &v| s + v) / plane)
            .collect();
        let tasks = self.config.out_tasks;
        let mut logits = Vec::with_capacity(x.n * tasks);
        for f in features.chunks_exact(channels) {
            for t in 0..tasks {
                let w = &self.head_weight[t * channels..(t + 1) * channels];
                let dot = w.iter().zip(f).fold(T::zero(), |s, (&wi, &fi)| s + wi * fi);
                logits.push(dot + self.head_bias[t]);
            }
        }
        acts.push(a);

        let cache = train.then(|| Cache {
            version: self.version,
            input: x.clone(),
            stem_bn: stem_cache.expect("train"),
            acts,
            saved,
            blocks: block_caches,
            features,
        });
        Ok(Forward { logits, cache })
    }

    /// Eval-mode logits only.
    pub fn logits(&self, x: &Tensor4<T>) -> Result<Vec<T>> {
        Ok(self.forward(x, Mode::Eval)?.logits)
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// averages used in eval mode.
    pub fn commit_batch_stats(&mut self, cache: &Cache<T>) {
        let mut stats: Vec<(&BnCache<T>, usize)> = Vec::new();
        stats.push((&cache.stem_bn, cache.acts[0].n * cache.acts[0].plane()));
        for (i, bc) in cache.blocks.iter().enumerate() {
            let count = cache.acts[i + 1].n * cache.acts[i + 1].plane();
            stats.push((&bc.bn1, count));
            stats.push((&bc.bn2, count));
            if let Some(p) = &bc.projection {
                stats.push((p, count));
            }
        }
        for (bn, (c, count)) in self.norms_mut().into_iter().zip(stats) {
            bn.update_running(c, count);
        }
    }

    /// Backpropagates `dlogits` (`batch x out_tasks`) through a cached
    /// train-mode pass.
    pub fn backward(&self, cache: &Cache<T>, dlogits: &[T]) -> Result<Gradients<T>> {
        if cache.version != self.version {
            return Err(Error::StaleCache);
        }
        let n = cache.input.n;
        let tasks = self.config.out_tasks;
        if dlogits.len() != n * tasks {
            return Err(Error::Shape(format!(
                "expected {} logit gradients, got {}",
                n * tasks,
                dlogits.len()
            )));
        }
        let channels = self.feature_channels();
        let act = self.config.activation;
        let last = cache.acts.last().expect("non-empty");

        let mut head_w = vec![T::zero(); self.head_weight.len()];
        let mut head_b = vec![T::zero(); tasks];
        let mut da = Tensor4::zeros(last.n, last.c, last.h, last.w);
        let inv_plane = T::one() / T::cast(last.plane() as f64);
        for i in 0..n {
            let f = &cache.features[i * channels..(i + 1) * channels];
            let g = &dlogits[i * tasks..(i + 1) * tasks];
            let sample = da.sample_mut(i);
            for (t, &gt) in g.iter().enumerate() {
                head_b[t] = head_b[t] + gt;
                let w = &self.head_weight[t * channels..(t + 1) * channels];
                for c in 0..channels {
                    head_w[t * channels + c] = head_w[t * channels + c] + gt * f[c];
                    let d = gt * w[c] * inv_plane;
                    for v in &mut sample[c * last.plane()..(c + 1) * last.plane()] {
                        *v = *v + d;
                    }
                }
            }
        }

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            let input = &cache.acts[i];
            act.backward(&cache.saved[i + 1], &cache.acts[i + 1], &mut da);

            let mut g1 = block.conv1.zero_grad();
            let mut g2 = block.conv2.zero_grad();
            let mut gb1 = block.bn1.zero_grad();
            let mut gb2 = block.bn2.zero_grad();
            let mut gproj = None;

            let mut d_in = match (&block.projection, &bc.projection) {
                (Some((conv, pbn)), Some(pc)) => {
                    let mut gc = conv.zero_grad();
                    let mut gb = pbn.zero_grad();
                    let d = pbn.backward(pc, &da, &mut gb);
                    let d_in = conv.backward(input, &d, &mut gc, true).expect("input grad");
                    gproj = Some((gc, gb));
                    d_in
                }
                _ => da.clone(),
            };

            let dc2 = block.bn2.backward(&bc.bn2, &da, &mut gb2);
            let mut dmid = block.conv2.backward(&bc.mid, &dc2, &mut g2, true).expect("input grad");
            act.backward(&bc.mid_saved, &bc.mid, &mut dmid);
            let dc1 = block.bn1.backward(&bc.bn1, &dmid, &mut gb1);
            let d_main = block.conv1.backward(input, &dc1, &mut g1, true).expect("input grad");
            add_assign(&mut d_in, &d_main);
            da = d_in;
            block_grads.push((g1, gb1, g2, gb2, gproj));
        }
        block_grads.reverse();

        act.backward(&cache.saved[0], &cache.acts[0], &mut da);
        let mut gstem_bn = self.stem_bn.zero_grad();
        let dstem = self.stem_bn.backward(&cache.stem_bn, &da, &mut gstem_bn);
        let mut gstem = self.stem.zero_grad();
        self.stem.backward(&cache.input, &dstem, &mut gstem, false);

        let mut blocks = vec![gstem.weight, gstem.bias, gstem_bn.gamma, gstem_bn.beta];
        for (g1, gb1, g2, gb2, gproj) in block_grads {
            blocks.extend([g1.weight, g1.bias, gb1.gamma, gb1.beta]);
            blocks.extend([g2.weight, g2.bias, gb2.gamma, gb2.beta]);
            if let Some((gc, gb)) = gproj {
                blocks.extend([gc.weight, gc.bias, gb.gamma, gb.beta]);
            }
        }
        blocks.push(head_w);
        blocks.push(head_b);
        Ok(Gradients { blocks })
    }
}

fn add_assign<T: Scalar>(dst: &mut Tensor4<T>, src: &Tensor4<T>) {
    debug_assert!(dst.same_shape(src));
    dst.data
        .iter_mut()
        .zip(&src.data)
        .for_each(|(d, &s)| *d = *d + s);
}
