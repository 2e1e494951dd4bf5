//! Victim classifiers, the frozen multi-scale identity encoder, target
//! prototypes and adversarial training of victims.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::crafting::{adam_step, AdamState, PatchBundle};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::attack_sample;
use crate::model_io::{self, meta_get, meta_parse};
use crate::nn::{Layer, Network, Shape, Tensor, Trace};
use crate::numerics::{derive_seed, Grid};

fn grid_tensor(x: &Grid) -> Tensor {
    Tensor::from_plane(x.height(), x.width(), x.values().to_vec())
}

fn parse_channels(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|c| c.trim().parse().ok()).collect()
}

fn join_channels(c: &[usize]) -> String {
    c.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// How the last feature map reaches the affine classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VictimHead {
    /// Dense layer over the flattened feature map.
    Flatten,
    /// Dense layer over per-channel global averages.
    GlobalPool,
}

impl std::fmt::Display for VictimHead {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VictimHead::Flatten => "flatten",
            VictimHead::GlobalPool => "global-pool",
        })
    }
}

impl std::str::FromStr for VictimHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flatten" => Ok(VictimHead::Flatten),
            "global-pool" => Ok(VictimHead::GlobalPool),
            _ => Err(Error::invalid(format!("unknown victim head {s:?} (flatten, global-pool)"))),
        }
    }
}

/// Three conv/ReLU/max-pool blocks followed by an affine classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VictimArch {
    pub channels: [usize; 3],
    pub head: VictimHead,
}

impl Default for VictimArch {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            head: VictimHead::GlobalPool,
        }
    }
}

impl VictimArch {
    pub fn network(&self, height: usize, width: usize, n_classes: usize) -> Result<Network> {
        let [c1, c2, c3] = self.channels;
        let mut layers = Vec::new();
        let mut cin = 1;
        for c in [c1, c2, c3] {
            layers.push(Layer::Conv3x3 { cin, cout: c, stride: 1 });
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            cin = c;
        }
        let inputs = match self.head {
            VictimHead::Flatten => c3 * (height / 8) * (width / 8),
            VictimHead::GlobalPool => {
                layers.push(Layer::GlobalAvgPool);
                c3
            }
        };
        layers.push(Layer::Dense {
            inputs,
            outputs: n_classes,
        });
        Network::new(Shape(1, height, width), layers)
    }

    pub fn descriptor(&self) -> String {
        join_channels(&self.channels)
    }

    pub fn parse(s: &str, head: VictimHead) -> Result<Self> {
        match parse_channels(s).as_deref() {
            Some(&[a, b, c]) if a > 0 && b > 0 && c > 0 => Ok(Self { channels: [a, b, c], head }),
            _ => Err(Error::invalid(format!("victim channels must be three positive integers, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VictimModel {
    pub arch: VictimArch,
    pub net: Network,
    pub weights: Vec<f64>,
    pub n_identities: usize,
    pub label: String,
    pub dataset_seed: u64,
    pub clean_accuracy: f64,
}

impl VictimModel {
    pub fn input_size(&self) -> (usize, usize) {
        let Shape(_, h, w) = self.net.input_shape();
        (h, w)
    }

    pub fn predict(&self, x: &Grid) -> Result<usize> {
        Ok(argmax(&victim_forward(self, x)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        model_io::write_network(&dir.join("model.wts"), &self.net, &self.weights)?;
        let (h, w) = self.input_size();
        model_io::write_meta(
            &dir.join("model.meta.tsv"),
            &[
                ("arch".into(), "victim".into()),
                ("channels".into(), self.arch.descriptor()),
                ("head".into(), self.arch.head.to_string()),
                ("input".into(), format!("{h}x{w}")),
                ("n_identities".into(), self.n_identities.to_string()),
                ("label".into(), self.label.clone()),
                ("dataset_seed".into(), self.dataset_seed.to_string()),
                ("clean_accuracy".into(), format!("{:.6}", self.clean_accuracy)),
            ],
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("model.meta.tsv");
        let meta = model_io::read_meta(&meta_path)?;
        if meta_get(&meta, "arch", &meta_path)? != "victim" {
            return Err(Error::format(&meta_path, "not a victim model"));
        }
        let head = meta_get(&meta, "head", &meta_path)?.parse()?;
        let arch = VictimArch::parse(meta_get(&meta, "channels", &meta_path)?, head)?;
        let (h, w) = parse_size(meta_get(&meta, "input", &meta_path)?, &meta_path)?;
        let n_identities = meta_parse(&meta, "n_identities", &meta_path)?;
        let net = arch.network(h, w, n_identities)?;
        let weights = model_io::read_network(&dir.join("model.wts"), &net)?;
        Ok(Self {
            arch,
            net,
            weights,
            n_identities,
            label: meta_get(&meta, "label", &meta_path)?.to_string(),
            dataset_seed: meta_parse(&meta, "dataset_seed", &meta_path)?,
            clean_accuracy: meta_parse(&meta, "clean_accuracy", &meta_path)?,
        })
    }
}

fn parse_size(s: &str, path: &Path) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::format(path, format!("bad size {s:?}")))?;
    match (h.parse(), w.parse()) {
        (Ok(h), Ok(w)) => Ok((h, w)),
        _ => Err(Error::format(path, format!("bad size {s:?}"))),
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

pub fn victim_forward(model: &VictimModel, x: &Grid) -> Result<Vec<f64>> {
    Ok(model.net.infer(&model.weights, &grid_tensor(x))?.data)
}

/// Logits and the input gradient of `sum(dlogits(logits) * logits)`.
pub fn victim_forward_backward(
    model: &VictimModel,
    x: &Grid,
    dlogits: impl FnOnce(&[f64]) -> Result<Vec<f64>>,
) -> Result<(Vec<f64>, Grid)> {
    let (out, trace) = model.net.forward(&model.weights, &grid_tensor(x))?;
    let d = dlogits(&out.data)?;
    let gout = Tensor {
        channels: d.len(),
        height: 1,
        width: 1,
        data: d,
    };
    let gin = model
        .net
        .backward(&model.weights, &trace, gout, None, true)
        .expect("input gradient requested");
    Ok((out.data, Grid::new(x.height(), x.width(), gin.data)?))
}

// ---------------------------------------------------------------------------
// Classifier training

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Softmax cross-entropy and its logit gradient.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Forward/backward for one labelled input: loss and parameter gradient.
type SampleGrad<'a> = dyn Fn(&[f64], &Grid, usize) -> Result<(f64, Vec<f64>)> + Sync + 'a;

/// Mini-batch Adam training loop shared by victims and the encoder.
/// `input_for(epoch, index)` supplies the (possibly patched) training input.
fn train_loop(
    params: &mut [f64],
    labels: &[usize],
    input_for: &(dyn Fn(usize, usize) -> Grid + Sync),
    sample_grad: &SampleGrad<'_>,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut state = AdamState::new(params.len());
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xe9, epoch as u64]));
        order.shuffle(&mut rng);
        for (bi, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let p: &[f64] = params;
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| sample_grad(p, &input_for(epoch, i), labels[i]))
                .collect::<Result<_>>()?;
            let n = batch.len() as f64;
            let mut grad = vec![0.0; params.len()];
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l / n;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b / n;
                }
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            adam_step(params, &grad, &mut state, cfg.lr)?;
        }
    }
    Ok(())
}

fn check_dataset(dataset: &Dataset) -> Result<(usize, usize)> {
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::invalid("dataset needs non-empty train and test splits"));
    }
    Ok(dataset.image_size())
}

pub fn accuracy(model: &VictimModel, images: &[crate::data::RoiImage]) -> Result<f64> {
    let correct = images
        .par_iter()
        .map(|r| model.predict(&r.pixels).map(|p| (p == r.identity) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / images.len() as f64)
}

fn train_victim_with(
    dataset: &Dataset,
    arch: &VictimArch,
    cfg: &TrainConfig,
    label: &str,
    input_for: &(dyn Fn(usize, usize) -> Grid + Sync),
) -> Result<VictimModel> {
    let (h, w) = check_dataset(dataset)?;
    let net = arch.network(h, w, dataset.n_identities)?;
    let mut weights = net.init_params(derive_seed(cfg.seed, &[0x71]));
    let labels: Vec<usize> = dataset.train.iter().map(|r| r.identity).collect();
    let sample_grad = |p: &[f64], x: &Grid, y: usize| -> Result<(f64, Vec<f64>)> {
        let (out, trace) = net.forward(p, &grid_tensor(x))?;
        let (loss, d) = cross_entropy(&out.data, y);
        let mut g = vec![0.0; p.len()];
        let gout = Tensor {
            channels: d.len(),
            height: 1,
            width: 1,
            data: d,
        };
        net.backward(p, &trace, gout, Some(&mut g), false);
        Ok((loss, g))
    };
    train_loop(&mut weights, &labels, input_for, &sample_grad, cfg)?;
    let mut model = VictimModel {
        arch: arch.clone(),
        net,
        weights,
        n_identities: dataset.n_identities,
        label: label.to_string(),
        dataset_seed: dataset.master_seed,
        clean_accuracy: 0.0,
    };
    model.clean_accuracy = accuracy(&model, &dataset.test)?;
    Ok(model)
}

pub fn train_victim(dataset: &Dataset, arch: &VictimArch, cfg: &TrainConfig, label: &str) -> Result<VictimModel> {
    train_victim_with(dataset, arch, cfg, label, &|_, i| dataset.train[i].pixels.clone())
}

/// Retrains the victim architecture from scratch on batches in which a
/// `mix_fraction` share of training images carry the bundle's patch
/// (rendered by the test-time path, labels unchanged).
pub fn adversarial_train(
    victim: &VictimModel,
    bundle: &PatchBundle,
    dataset: &Dataset,
    mix_fraction: f64,
    cfg: &TrainConfig,
) -> Result<VictimModel> {
    if !(0.0..=1.0).contains(&mix_fraction) {
        return Err(Error::invalid(format!("mix fraction must lie in [0, 1], got {mix_fraction}")));
    }
    let patched: Vec<Grid> = if mix_fraction > 0.0 {
        dataset
            .train
            .par_iter()
            .map(|r| attack_sample(&r.pixels, bundle))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let seed = cfg.seed;
    let input_for = |epoch: usize, i: usize| {
        let u = derive_seed(seed, &[0xad, epoch as u64, i as u64]) as f64 / u64::MAX as f64;
        if u < mix_fraction {
            patched[i].clone()
        } else {
            dataset.train[i].pixels.clone()
        }
    };
    let label = format!("{}-adv", victim.label);
    train_victim_with(dataset, &victim.arch, cfg, &label, &input_for)
}

// ---------------------------------------------------------------------------
// Multi-scale identity encoder

/// Two conv/ReLU/max-pool blocks, per-channel sigmoid gating, and adaptive
/// average pooling at each scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderArch {
    pub channels: [usize; 2],
    pub scales: Vec<usize>,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            channels: [16, 32],
            scales: vec![1, 2, 4],
        }
    }
}

impl EncoderArch {
    pub fn network(&self, height: usize, width: usize) -> Result<Network> {
        let [c1, c2] = self.channels;
        Network::new(
            Shape(1, height, width),
            vec![
                Layer::Conv3x3 { cin: 1, cout: c1, stride: 1 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv3x3 { cin: c1, cout: c2, stride: 1 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::ChannelGate { channels: c2 },
            ],
        )
    }

    pub fn embedding_len(&self) -> usize {
        self.channels[1] * self.scales.iter().map(|s| s * s).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub arch: EncoderArch,
    pub net: Network,
    pub weights: Vec<f64>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEmbedding {
    /// Concatenated pooled descriptor before normalization.
    pub v: Vec<f64>,
    /// Unit-norm embedding.
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetPrototype {
    pub g_t: Vec<f64>,
    pub target: usize,
}

/// Near-equal partition of `n` into `s` cells: `[floor(i n / s), ceil((i+1) n / s))`.
fn cell(i: usize, s: usize, n: usize) -> (usize, usize) {
    (i * n / s, ((i + 1) * n).div_ceil(s))
}

fn multiscale_pool(f: &Tensor, scales: &[usize]) -> Vec<f64> {
    let mut v = Vec::new();
    for &s in scales {
        for c in 0..f.channels {
            let plane = f.plane(c);
            for i in 0..s {
                let (r0, r1) = cell(i, s, f.height);
                for j in 0..s {
                    let (c0, c1) = cell(j, s, f.width);
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        acc += plane[r * f.width + c0..r * f.width + c1].iter().sum::<f64>();
                    }
                    v.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
    }
    v
}

fn multiscale_pool_backward(dv: &[f64], shape: Shape, scales: &[usize]) -> Tensor {
    let Shape(channels, h, w) = shape;
    let mut g = Tensor::zeros(channels, h, w);
    let mut k = 0;
    for &s in scales {
        for c in 0..channels {
            for i in 0..s {
                let (r0, r1) = cell(i, s, h);
                for j in 0..s {
                    let (c0, c1) = cell(j, s, w);
                    let share = dv[k] / ((r1 - r0) * (c1 - c0)) as f64;
                    k += 1;
                    for r in r0..r1 {
                        for v in &mut g.data[c * h * w + r * w + c0..c * h * w + r * w + c1] {
                            *v += share;
                        }
                    }
                }
            }
        }
    }
    g
}

fn normalize(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Gradient through `g = v / |v|`.
fn normalize_backward(g: &[f64], norm: f64, dg: &[f64]) -> Vec<f64> {
    let dot: f64 = g.iter().zip(dg).map(|(a, b)| a * b).sum();
    g.iter().zip(dg).map(|(gi, di)| (di - gi * dot) / norm).collect()
}

struct EmbedTrace {
    trace: Trace,
    feature_shape: Shape,
    embedding: FeatureEmbedding,
    norm: f64,
}

fn embed_traced(net: &Network, weights: &[f64], scales: &[usize], x: &Grid) -> Result<EmbedTrace> {
    let (f, trace) = net.forward(weights, &grid_tensor(x))?;
    let v = multiscale_pool(&f, scales);
    let (g, norm) = normalize(&v)?;
    Ok(EmbedTrace {
        trace,
        feature_shape: f.shape(),
        embedding: FeatureEmbedding { v, g },
        norm,
    })
}

fn embed_backward(
    net: &Network,
    weights: &[f64],
    scales: &[usize],
    t: &EmbedTrace,
    dg: &[f64],
    param_grad: Option<&mut [f64]>,
    want_input: bool,
) -> Option<Tensor> {
    let dv = normalize_backward(&t.embedding.g, t.norm, dg);
    let df = multiscale_pool_backward(&dv, t.feature_shape, scales);
    net.backward(weights, &t.trace, df, param_grad, want_input)
}

pub fn msdife_embed(model: &EncoderModel, x: &Grid) -> Result<FeatureEmbedding> {
    embed_traced(&model.net, &model.weights, &model.arch.scales, x).map(|t| t.embedding)
}

/// Embedding of `x` and the input gradient of `sum(dg(g) * g)`.
pub fn msdife_embed_backward(
    model: &EncoderModel,
    x: &Grid,
    dg: impl FnOnce(&[f64]) -> Result<Vec<f64>>,
) -> Result<(FeatureEmbedding, Grid)> {
    let t = embed_traced(&model.net, &model.weights, &model.arch.scales, x)?;
    let d = dg(&t.embedding.g)?;
    let gin = embed_backward(&model.net, &model.weights, &model.arch.scales, &t, &d, None, true)
        .expect("input gradient requested");
    Ok((t.embedding, Grid::new(x.height(), x.width(), gin.data)?))
}

/// Logit scale applied to unit embeddings by the temporary pretraining head.
const ENCODER_HEAD_SCALE: f64 = 16.0;

/// Classification pretraining with a temporary dense head on the scaled
/// unit embedding; the head is discarded and the encoder returned frozen.
pub fn train_encoder(dataset: &Dataset, arch: &EncoderArch, cfg: &TrainConfig) -> Result<EncoderModel> {
    let (h, w) = check_dataset(dataset)?;
    if arch.scales.is_empty() || arch.scales.contains(&0) {
        return Err(Error::invalid("encoder scales must be non-empty and positive"));
    }
    let net = arch.network(h, w)?;
    let head = Network::new(
        Shape(arch.embedding_len(), 1, 1),
        vec![Layer::Dense {
            inputs: arch.embedding_len(),
            outputs: dataset.n_identities,
        }],
    )?;
    let n_trunk = net.param_count();
    let mut params = net.init_params(derive_seed(cfg.seed, &[0xe1]));
    params.extend(head.init_params(derive_seed(cfg.seed, &[0xe2])));
    let labels: Vec<usize> = dataset.train.iter().map(|r| r.identity).collect();
    let scales = arch.scales.clone();
    let sample_grad = |p: &[f64], x: &Grid, y: usize| -> Result<(f64, Vec<f64>)> {
        let (trunk_p, head_p) = p.split_at(n_trunk);
        let t = embed_traced(&net, trunk_p, &scales, x)?;
        let scaled: Vec<f64> = t.embedding.g.iter().map(|v| v * ENCODER_HEAD_SCALE).collect();
        let input = Tensor {
            channels: scaled.len(),
            height: 1,
            width: 1,
            data: scaled,
        };
        let (logits, htrace) = head.forward(head_p, &input)?;
        let (loss, dlogits) = cross_entropy(&logits.data, y);
        let mut grad = vec![0.0; p.len()];
        let (gt, gh) = grad.split_at_mut(n_trunk);
        let gout = Tensor {
            channels: dlogits.len(),
            height: 1,
            width: 1,
            data: dlogits,
        };
        let dscaled = head
            .backward(head_p, &htrace, gout, Some(gh), true)
            .expect("input gradient requested");
        let dg: Vec<f64> = dscaled.data.iter().map(|v| v * ENCODER_HEAD_SCALE).collect();
        embed_backward(&net, trunk_p, &scales, &t, &dg, Some(gt), false);
        Ok((loss, grad))
    };
    train_loop(
        &mut params,
        &labels,
        &|_, i| dataset.train[i].pixels.clone(),
        &sample_grad,
        cfg,
    )?;
    params.truncate(n_trunk);
    Ok(EncoderModel {
        arch: arch.clone(),
        net,
        weights: params,
        frozen: true,
    })
}

impl EncoderModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        model_io::write_network(&dir.join("model.wts"), &self.net, &self.weights)?;
        let Shape(_, h, w) = self.net.input_shape();
        model_io::write_meta(
            &dir.join("model.meta.tsv"),
            &[
                ("arch".into(), "encoder".into()),
                ("channels".into(), join_channels(&self.arch.channels)),
                ("scales".into(), join_channels(&self.arch.scales)),
                ("input".into(), format!("{h}x{w}")),
                ("frozen".into(), self.frozen.to_string()),
            ],
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("model.meta.tsv");
        let meta = model_io::read_meta(&meta_path)?;
        if meta_get(&meta, "arch", &meta_path)? != "encoder" {
            return Err(Error::format(&meta_path, "not an encoder model"));
        }
        let bad = || Error::format(&meta_path, "bad encoder channels/scales");
        let channels = match parse_channels(meta_get(&meta, "channels", &meta_path)?).as_deref() {
            Some(&[a, b]) => [a, b],
            _ => return Err(bad()),
        };
        let scales = parse_channels(meta_get(&meta, "scales", &meta_path)?).ok_or_else(bad)?;
        let arch = EncoderArch { channels, scales };
        let (h, w) = parse_size(meta_get(&meta, "input", &meta_path)?, &meta_path)?;
        let net = arch.network(h, w)?;
        let weights = model_io::read_network(&dir.join("model.wts"), &net)?;
        Ok(Self {
            arch,
            net,
            weights,
            frozen: meta_parse(&meta, "frozen", &meta_path)?,
        })
    }
}

pub fn target_prototype(model: &EncoderModel, dataset: &Dataset, target: usize) -> Result<TargetPrototype> {
    let members: Vec<&Grid> = dataset
        .train
        .iter()
        .filter(|r| r.identity == target)
        .map(|r| &r.pixels)
        .collect();
    if members.is_empty() {
        return Err(Error::invalid(format!("target identity {target} has no training images")));
    }
    let embeddings = members
        .par_iter()
        .map(|x| msdife_embed(model, x))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; model.arch.embedding_len()];
    for e in &embeddings {
        for (m, g) in mean.iter_mut().zip(&e.g) {
            *m += g / embeddings.len() as f64;
        }
    }
    if embeddings.len() == 1 {
        return Ok(TargetPrototype {
            g_t: embeddings[0].g.clone(),
            target,
        });
    }
    let (g_t, _) = normalize(&mean)?;
    Ok(TargetPrototype { g_t, target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_dataset;
    use crate::numerics::{fd_gradient, max_relative_error};
    use rand::Rng;

    fn random_grid(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Grid {
        Grid::from_fn(h, w, |_, _| rng.random_range(0.0..1.0))
    }

    fn tiny_victim(seed: u64) -> VictimModel {
        let arch = VictimArch { channels: [2, 3, 4], head: VictimHead::Flatten };
        let net = arch.network(8, 8, 3).unwrap();
        VictimModel {
            weights: net.init_params(seed),
            arch,
            net,
            n_identities: 3,
            label: "tiny".into(),
            dataset_seed: 0,
            clean_accuracy: 0.0,
        }
    }

    fn tiny_encoder(seed: u64, scales: Vec<usize>, channels: [usize; 2]) -> EncoderModel {
        let arch = EncoderArch { channels, scales };
        let net = arch.network(8, 8).unwrap();
        let mut weights = net.init_params(seed);
        // Positive conv biases keep every feature map alive.
        for t in net.param_tensors() {
            if t.name.ends_with("bias") && !t.name.starts_with("layer6") {
                for w in &mut weights[t.offset..t.offset + t.dims[0]] {
                    *w = 0.1;
                }
            }
        }
        EncoderModel { arch, net, weights, frozen: true }
    }

    #[test]
    fn victim_shape_contract() {
        let v = tiny_victim(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2 {
            let z = victim_forward(&v, &random_grid(8, 8, &mut rng)).unwrap();
            assert_eq!(z.len(), 3);
            assert!(z.iter().all(|x| x.is_finite()));
        }
        assert!(victim_forward(&v, &Grid::zeros(9, 8)).is_err());
    }

    #[test]
    fn victim_input_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..20 {
            let v = tiny_victim(k);
            let x = random_grid(8, 8, &mut rng);
            let (_, g) = victim_forward_backward(&v, &x, |z| {
                let mut d = vec![0.0; z.len()];
                d[0] = 1.0;
                Ok(d)
            })
            .unwrap();
            let fd = fd_gradient(
                |p| victim_forward(&v, &Grid::new(8, 8, p.to_vec()).unwrap()).unwrap()[0],
                x.values(),
                1e-6,
            )
            .unwrap();
            assert!(max_relative_error(g.values(), &fd) < 1e-4);
        }
    }

    #[test]
    fn embedding_is_unit_norm_with_expected_length() {
        let e = tiny_encoder(4, vec![1, 2, 4], [3, 5]);
        assert_eq!(e.arch.embedding_len(), 5 * 21);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let f = msdife_embed(&e, &random_grid(8, 8, &mut rng)).unwrap();
            assert_eq!(f.g.len(), 105);
            let n: f64 = f.g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_channel_single_scale_embedding_is_one() {
        let e = tiny_encoder(6, vec![1], [2, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = msdife_embed(&e, &random_grid(8, 8, &mut rng)).unwrap();
        assert_eq!(f.g, vec![1.0]);
    }

    #[test]
    fn embedding_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for k in 0..20 {
            let e = tiny_encoder(k, vec![1, 2], [3, 4]);
            let x = random_grid(8, 8, &mut rng);
            let w: Vec<f64> = (0..e.arch.embedding_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, g) = msdife_embed_backward(&e, &x, |_| Ok(w.clone())).unwrap();
            let fd = fd_gradient(
                |p| {
                    let f = msdife_embed(&e, &Grid::new(8, 8, p.to_vec()).unwrap()).unwrap();
                    f.g.iter().zip(&w).map(|(a, b)| a * b).sum()
                },
                x.values(),
                1e-6,
            )
            .unwrap();
            assert!(max_relative_error(g.values(), &fd) < 1e-4);
        }
    }

    #[test]
    fn pooling_cells_partition_the_axis() {
        for n in 1..12 {
            for s in 1..=n {
                let mut covered = vec![0; n];
                for i in 0..s {
                    let (a, b) = cell(i, s, n);
                    assert!(a < b);
                    for c in &mut covered[a..b] {
                        *c += 1;
                    }
                }
                assert!(covered.iter().all(|&c| c >= 1));
            }
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let z = [0.3, -1.2, 2.0];
        let (_, g) = cross_entropy(&z, 1);
        let fd = fd_gradient(|v| cross_entropy(v, 1).0, &z, 1e-6).unwrap();
        assert!(max_relative_error(&g, &fd) < 1e-6);
    }

    #[test]
    fn tiny_dataset_training() {
        let ds = build_dataset(2, 4, 0.5, 3, 32).unwrap();
        let cfg = TrainConfig { epochs: 15, lr: 2e-3, batch_size: 4, seed: 1 };
        let arch = VictimArch { channels: [4, 8, 8], head: VictimHead::GlobalPool };
        let a = train_victim(&ds, &arch, &cfg, "a").unwrap();
        assert_eq!(a.clean_accuracy, 1.0);
        let b = train_victim(&ds, &arch, &cfg, "a").unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn prototype_of_single_image_identity() {
        let ds = build_dataset(2, 4, 0.5, 3, 32).unwrap();
        let mut one = ds.clone();
        one.train.retain(|r| r.identity == 1 || r.sample_seed == ds.train[0].sample_seed);
        let arch = EncoderArch { channels: [4, 6], scales: vec![1, 2] };
        let cfg = TrainConfig { epochs: 2, lr: 1e-3, batch_size: 2, seed: 0 };
        let enc = train_encoder(&ds, &arch, &cfg).unwrap();
        assert!(enc.frozen);
        let p = target_prototype(&enc, &one, 0).unwrap();
        assert_eq!(p.g_t, msdife_embed(&enc, &one.train[0].pixels).unwrap().g);
        let p1 = target_prototype(&enc, &ds, 1).unwrap();
        let n: f64 = p1.g_t.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(target_prototype(&enc, &ds, 2).is_err());
    }

    #[test]
    fn models_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let v = tiny_victim(9);
        v.save(dir.path()).unwrap();
        let back = VictimModel::load(dir.path()).unwrap();
        assert_eq!(back.arch, v.arch);
        assert_eq!(back.label, "tiny");
        for (a, b) in back.weights.iter().zip(&v.weights) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let e = tiny_encoder(1, vec![1, 2], [2, 3]);
        let edir = dir.path().join("enc");
        e.save(&edir).unwrap();
        let eb = EncoderModel::load(&edir).unwrap();
        assert_eq!(eb.arch, e.arch);
        assert!(VictimModel::load(&edir).is_err());
    }
}
