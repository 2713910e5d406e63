//! Small-target segmentation network.
//!
//! The architecture is a residual U-Net with a center-surround enhancement
//! head: the input image is expanded to a 16-channel stack (raw image plus
//! the 15 kernel responses), pushed through three stride-2 encoder stages
//! with residual blocks, widened at a 1/8-resolution bottleneck by an ASPP
//! bridge (parallel dilated convolutions plus a global-average branch), then
//! decoded back with nearest-neighbor upsampling and skip connections, and
//! finally mapped by a 1×1 convolution to two logit channels — target and
//! background — that a softmax turns into per-pixel likelihoods.
//!
//! The head comes in two flavors selected by [`NetConfig::head`]:
//!
//! * **fixed** — the enhancement stack is computed by the frozen kernel
//!   bank; its weights never enter the trainable parameter set.
//! * **free** — each bank kernel becomes an ordinary trainable convolution
//!   of the same footprint, initialized to the very same center-surround
//!   weights, so the two variants differ in exactly one thing: whether the
//!   head weights can move.
//!
//! Training minimizes class-weighted binary cross-entropy with Adam or SGD
//! over seeded, shuffled mini-batches; every run with the same seed and
//! data reproduces the same loss trace bit for bit.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataprep::LabeledImage;
use crate::enhance::{build_default_bank, enhance_stack, KernelBank};
use crate::error::{Error, Result};
use crate::imgio::{read_mask_pgm, read_pgm, replicate_pad, Image, Mask};
use crate::metrics::{self, EvaluationReport};
use crate::nn::checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry, CHECKPOINT_VERSION,
};
use crate::nn::init::he_uniform;
use crate::nn::optim::{
    adam_step, sgd_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
use crate::nn::{Tape, Tensor, Var};

/// Enhancement-head variant: frozen kernel bank or trainable copies of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Fixed,
    Free,
}

/// Architecture hyperparameters. The defaults describe the reference
/// network for 64×64 scenes: 16 input channels, three encoder stages of
/// widths [16, 32, 64], one residual block per stage, and an ASPP bridge
/// with dilation rates [1, 2, 4, 8] plus a global-average branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Channels produced by the head: raw image + one per bank kernel.
    pub input_channels: usize,
    /// Output width of each encoder stage; the count sets the depth.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_global_pool: bool,
    pub head: HeadKind,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_channels: 16,
            widths: vec![16, 32, 64],
            blocks_per_stage: 1,
            aspp_rates: vec![1, 2, 4, 8],
            aspp_global_pool: true,
            head: HeadKind::Fixed,
            seed: 0,
        }
    }
}

impl NetConfig {
    /// Input dimensions must be divisible by this (one ×2 per stage).
    pub fn downsample_factor(&self) -> usize {
        1 << self.widths.len()
    }

    fn validate(&self, bank: &KernelBank) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 encoder stages, got {}",
                self.widths.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("stage widths must be positive".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::InvalidConfig("blocks_per_stage must be >= 1".into()));
        }
        let mut rates = self.aspp_rates.clone();
        rates.sort_unstable();
        rates.dedup();
        if rates.len() < 2 || rates.len() != self.aspp_rates.len() {
            return Err(Error::InvalidConfig(format!(
                "aspp rates {:?} must be >= 2 distinct values",
                self.aspp_rates
            )));
        }
        if self.aspp_rates.iter().any(|&r| r == 0) {
            return Err(Error::InvalidConfig("aspp rates must be >= 1".into()));
        }
        if self.input_channels != 1 + bank.len() {
            return Err(Error::InvalidConfig(format!(
                "input_channels {} but head produces {} (raw + {} kernels)",
                self.input_channels,
                1 + bank.len(),
                bank.len()
            )));
        }
        Ok(())
    }

    /// Channels entering encoder stage `i` (and produced by decoder stage
    /// `i`, whose job is to restore that stage's resolution).
    fn stage_input_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.input_channels
        } else {
            self.widths[i - 1]
        }
    }
}

/// Per-pixel target/background likelihoods; the two planes sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMap {
    pub p_t: Image,
    pub p_b: Image,
}

impl LikelihoodMap {
    pub fn new(p_t: Image, p_b: Image) -> Result<Self> {
        if p_t.width() != p_b.width() || p_t.height() != p_b.height() {
            return Err(Error::DimensionMismatch(format!(
                "likelihood planes {}x{} vs {}x{}",
                p_t.width(),
                p_t.height(),
                p_b.width(),
                p_b.height()
            )));
        }
        for (t, b) in p_t.data().iter().zip(p_b.data()) {
            if !(0.0..=1.0).contains(t) || !(0.0..=1.0).contains(b) {
                return Err(Error::NumericContract(format!(
                    "likelihoods ({t}, {b}) outside [0, 1]"
                )));
            }
            if (t + b - 1.0).abs() > 1e-6 {
                return Err(Error::NumericContract(format!(
                    "likelihoods ({t}, {b}) sum to {} != 1",
                    t + b
                )));
            }
        }
        Ok(LikelihoodMap { p_t, p_b })
    }
}

/// One convolution in the network, in wiring order.
#[derive(Debug, Clone, PartialEq)]
struct ConvDef {
    name: String,
    in_c: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
}

impl ConvDef {
    fn weight_numel(&self) -> usize {
        self.out_c * self.in_c * self.kh * self.kw
    }
}

fn push_resblock(defs: &mut Vec<ConvDef>, prefix: &str, in_c: usize, out_c: usize) {
    defs.push(ConvDef {
        name: format!("{prefix}.conv1"),
        in_c,
        out_c,
        kh: 3,
        kw: 3,
    });
    defs.push(ConvDef {
        name: format!("{prefix}.conv2"),
        in_c: out_c,
        out_c,
        kh: 3,
        kw: 3,
    });
    if in_c != out_c {
        defs.push(ConvDef {
            name: format!("{prefix}.proj"),
            in_c,
            out_c,
            kh: 1,
            kw: 1,
        });
    }
}

/// The single authority on which convolutions exist and in what order;
/// initialization, checkpointing, and forward wiring all follow this list.
fn conv_defs(config: &NetConfig, bank: &KernelBank) -> Vec<ConvDef> {
    let mut defs = Vec::new();
    if config.head == HeadKind::Free {
        for (i, k) in bank.kernels().iter().enumerate() {
            defs.push(ConvDef {
                name: format!("head_bank.k{i:02}"),
                in_c: 1,
                out_c: 1,
                kh: k.size(),
                kw: k.size(),
            });
        }
    }
    let mut c = config.input_channels;
    for (i, &width) in config.widths.iter().enumerate() {
        for j in 0..config.blocks_per_stage {
            push_resblock(&mut defs, &format!("enc{i}.block{j}"), c, c);
        }
        defs.push(ConvDef {
            name: format!("enc{i}.down"),
            in_c: c,
            out_c: width,
            kh: 3,
            kw: 3,
        });
        c = width;
    }
    for &r in &config.aspp_rates {
        defs.push(ConvDef {
            name: format!("aspp.rate{r}"),
            in_c: c,
            out_c: c,
            kh: 3,
            kw: 3,
        });
    }
    if config.aspp_global_pool {
        defs.push(ConvDef {
            name: "aspp.pool".into(),
            in_c: c,
            out_c: c,
            kh: 1,
            kw: 1,
        });
    }
    let branches = config.aspp_rates.len() + usize::from(config.aspp_global_pool);
    defs.push(ConvDef {
        name: "aspp.fuse".into(),
        in_c: c * branches,
        out_c: c,
        kh: 1,
        kw: 1,
    });
    for i in (0..config.widths.len()).rev() {
        let skip_c = config.stage_input_channels(i);
        let mut in_c = c + skip_c;
        for j in 0..config.blocks_per_stage {
            push_resblock(&mut defs, &format!("dec{i}.block{j}"), in_c, skip_c);
            in_c = skip_c;
        }
        c = skip_c;
    }
    defs.push(ConvDef {
        name: "head".into(),
        in_c: c,
        out_c: 2,
        kh: 1,
        kw: 1,
    });
    defs
}

/// Head features for one mini-batch, precomputable per image because no
/// trainable weight sits upstream of them.
enum HeadBatch {
    /// Fixed variant: the finished 16-channel stack.
    Features(Tensor),
    /// Free variant: the raw `[B,1,H,W]` image plus one replicate-padded
    /// copy per distinct kernel size, each awaiting its trainable conv.
    Free { raw: Tensor, padded: Vec<Tensor> },
}

/// Concatenate same-shaped `[1,C,H,W]` tensors along the batch axis.
fn batch_concat(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::EmptyBatch)?;
    let [_, c, h, w] = first.shape();
    let mut data = Vec::with_capacity(parts.len() * c * h * w);
    for p in parts {
        if p.shape() != [1, c, h, w] {
            return Err(Error::Shape(format!(
                "batch_concat mixes {:?} with [1, {c}, {h}, {w}]",
                p.shape()
            )));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new([parts.len(), c, h, w], data)
}

/// The assembled network: config, kernel bank, convolution layout, and one
/// flat parameter vector holding every trainable weight and bias.
pub struct Network {
    config: NetConfig,
    bank: KernelBank,
    defs: Vec<ConvDef>,
    /// `(weight_offset, bias_offset)` into `params`, per def.
    offsets: Vec<(usize, usize)>,
    params: Vec<f64>,
    /// Distinct kernel sizes, ascending; indexes `HeadBatch::Free::padded`.
    head_sizes: Vec<usize>,
}

/// Build a network from its config. Construction is a pure function of the
/// config (including the seed): weights are He-uniform, biases zero, the
/// final likelihood head starts at exactly zero (so an untrained network
/// answers 0.5/0.5 everywhere), and a free head starts as a bit-exact copy
/// of the fixed kernel bank.
pub fn build_network(config: NetConfig) -> Result<Network> {
    let bank = build_default_bank();
    config.validate(&bank)?;
    let defs = conv_defs(&config, &bank);
    let mut offsets = Vec::with_capacity(defs.len());
    let mut total = 0;
    for def in &defs {
        offsets.push((total, total + def.weight_numel()));
        total += def.weight_numel() + def.out_c;
    }
    let mut params = vec![0.0; total];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for (def, &(w_off, _)) in defs.iter().zip(&offsets) {
        let n = def.weight_numel();
        if let Some(idx) = def.name.strip_prefix("head_bank.k") {
            let k: usize = idx.parse().expect("two-digit kernel index");
            params[w_off..w_off + n].copy_from_slice(&bank.kernels()[k].weight_grid());
        } else if def.name == "head" {
            // Zero on purpose: symmetric logits before training.
        } else {
            let w = he_uniform(&mut rng, [def.out_c, def.in_c, def.kh, def.kw]);
            params[w_off..w_off + n].copy_from_slice(w.data());
        }
        // Biases stay zero.
    }
    let mut head_sizes: Vec<usize> = bank.kernels().iter().map(|k| k.size()).collect();
    head_sizes.sort_unstable();
    head_sizes.dedup();
    Ok(Network {
        config,
        bank,
        defs,
        offsets,
        params,
        head_sizes,
    })
}

/// Sequential consumer of the network's convolutions during wiring; any
/// mismatch between the wiring code and [`conv_defs`] surfaces immediately
/// as an out-of-order error rather than silently crossed weights.
struct Wire<'a> {
    defs: &'a [ConvDef],
    vars: Vec<(Var, Var)>,
    next: usize,
}

impl Wire<'_> {
    fn conv(
        &mut self,
        tape: &mut Tape,
        name: &str,
        x: Var,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let def = self.defs.get(self.next).ok_or_else(|| {
            Error::Shape(format!("network wiring ran past the layer list at {name}"))
        })?;
        if def.name != name {
            return Err(Error::Shape(format!(
                "network wiring out of order: expected {}, wired {name}",
                def.name
            )));
        }
        let (w, b) = self.vars[self.next];
        self.next += 1;
        tape.conv2d(x, w, b, stride, padding, dilation)
    }

    fn resblock(
        &mut self,
        tape: &mut Tape,
        x: Var,
        prefix: &str,
        in_c: usize,
        out_c: usize,
    ) -> Result<Var> {
        let h = self.conv(tape, &format!("{prefix}.conv1"), x, 1, 1, 1)?;
        let h = tape.relu(h)?;
        let h = self.conv(tape, &format!("{prefix}.conv2"), h, 1, 1, 1)?;
        let skip = if in_c == out_c {
            x
        } else {
            self.conv(tape, &format!("{prefix}.proj"), x, 1, 0, 1)?
        };
        let sum = tape.add(h, skip)?;
        tape.relu(sum)
    }
}

impl Network {
    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn bank(&self) -> &KernelBank {
        &self.bank
    }

    /// The flat trainable parameter vector, in checkpoint order.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access for optimizers and finite-difference probes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Checkpoint layout: `<conv>.weight` then `<conv>.bias` per layer.
    pub fn param_entries(&self) -> Vec<ParamEntry> {
        let mut entries = Vec::with_capacity(2 * self.defs.len());
        for def in &self.defs {
            entries.push(ParamEntry {
                name: format!("{}.weight", def.name),
                shape: vec![def.out_c, def.in_c, def.kh, def.kw],
            });
            entries.push(ParamEntry {
                name: format!("{}.bias", def.name),
                shape: vec![1, def.out_c, 1, 1],
            });
        }
        entries
    }

    fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        let d = self.config.downsample_factor();
        if width % d != 0 || height % d != 0 {
            return Err(Error::DimensionMismatch(format!(
                "input {width}x{height} not divisible by the network's downsample factor {d}"
            )));
        }
        Ok(())
    }

    /// Precompute everything upstream of the first trainable weight for a
    /// mini-batch of equally sized images.
    fn head_batch(&self, images: &[&Image]) -> Result<HeadBatch> {
        match self.config.head {
            HeadKind::Fixed => {
                let stacks: Vec<Tensor> = images
                    .iter()
                    .map(|im| enhance_stack(im, &self.bank))
                    .collect::<Result<_>>()?;
                let refs: Vec<&Tensor> = stacks.iter().collect();
                Ok(HeadBatch::Features(batch_concat(&refs)?))
            }
            HeadKind::Free => {
                let raws: Vec<Tensor> = images.iter().map(|im| Tensor::from_image(im)).collect();
                let refs: Vec<&Tensor> = raws.iter().collect();
                let raw = batch_concat(&refs)?;
                let mut padded = Vec::with_capacity(self.head_sizes.len());
                for &size in &self.head_sizes {
                    let half = size / 2;
                    let pads: Vec<Tensor> = images
                        .iter()
                        .map(|im| Tensor::from_image(&replicate_pad(im, half, half, half, half)))
                        .collect();
                    let refs: Vec<&Tensor> = pads.iter().collect();
                    padded.push(batch_concat(&refs)?);
                }
                Ok(HeadBatch::Free { raw, padded })
            }
        }
    }

    /// Full forward pass on a tape: head → encoder → ASPP → decoder →
    /// softmax; returns the `[B,2,H,W]` probability tensor's var.
    fn forward_on_tape(&self, tape: &mut Tape, head: &HeadBatch) -> Result<Var> {
        let mut wire = Wire {
            defs: &self.defs,
            vars: Vec::with_capacity(self.defs.len()),
            next: 0,
        };
        for (def, &(w_off, b_off)) in self.defs.iter().zip(&self.offsets) {
            let w = tape.leaf(Tensor::new(
                [def.out_c, def.in_c, def.kh, def.kw],
                self.params[w_off..w_off + def.weight_numel()].to_vec(),
            )?);
            let b = tape.leaf(Tensor::new(
                [1, def.out_c, 1, 1],
                self.params[b_off..b_off + def.out_c].to_vec(),
            )?);
            wire.vars.push((w, b));
        }

        let cfg = &self.config;
        let mut cur = match head {
            HeadBatch::Features(feats) => tape.leaf(feats.clone()),
            HeadBatch::Free { raw, padded } => {
                let mut parts = vec![tape.leaf(raw.clone())];
                for (i, k) in self.bank.kernels().iter().enumerate() {
                    let size_idx = self
                        .head_sizes
                        .binary_search(&k.size())
                        .expect("bank size present");
                    let leaf = tape.leaf(padded[size_idx].clone());
                    parts.push(wire.conv(
                        tape,
                        &format!("head_bank.k{i:02}"),
                        leaf,
                        1,
                        0,
                        1,
                    )?);
                }
                tape.concat_channels(&parts)?
            }
        };

        let mut skips = Vec::with_capacity(cfg.widths.len());
        let mut c = cfg.input_channels;
        for (i, &width) in cfg.widths.iter().enumerate() {
            for j in 0..cfg.blocks_per_stage {
                cur = wire.resblock(tape, cur, &format!("enc{i}.block{j}"), c, c)?;
            }
            skips.push(cur);
            cur = wire.conv(tape, &format!("enc{i}.down"), cur, 2, 1, 1)?;
            cur = tape.relu(cur)?;
            c = width;
        }

        let mut branches = Vec::new();
        for &r in &cfg.aspp_rates {
            let b = wire.conv(tape, &format!("aspp.rate{r}"), cur, 1, r, r)?;
            branches.push(tape.relu(b)?);
        }
        if cfg.aspp_global_pool {
            let p = tape.avg_pool_global(cur)?;
            let p = wire.conv(tape, "aspp.pool", p, 1, 0, 1)?;
            branches.push(tape.relu(p)?);
        }
        let cat = tape.concat_channels(&branches)?;
        cur = wire.conv(tape, "aspp.fuse", cat, 1, 0, 1)?;
        cur = tape.relu(cur)?;

        for i in (0..cfg.widths.len()).rev() {
            let skip_c = cfg.stage_input_channels(i);
            cur = tape.upsample_nearest(cur, 2)?;
            cur = tape.concat_channels(&[cur, skips[i]])?;
            let mut in_c = c + skip_c;
            for j in 0..cfg.blocks_per_stage {
                cur = wire.resblock(tape, cur, &format!("dec{i}.block{j}"), in_c, skip_c)?;
                in_c = skip_c;
            }
            c = skip_c;
        }

        let logits = wire.conv(tape, "head", cur, 1, 0, 1)?;
        debug_assert_eq!(wire.next, self.defs.len(), "all layers consumed");
        tape.softmax2(logits)
    }

    /// Likelihood map for a single image.
    pub fn forward(&self, image: &Image) -> Result<LikelihoodMap> {
        self.check_dims(image.width(), image.height())?;
        let head = self.head_batch(&[image])?;
        let mut tape = Tape::new();
        let probs = self.forward_on_tape(&mut tape, &head)?;
        let value = tape.value(probs);
        LikelihoodMap::new(value.plane_image(0, 0)?, value.plane_image(0, 1)?)
    }

    /// Class-weighted BCE loss and its gradient w.r.t. every parameter, for
    /// a mini-batch given as precomputed head input + target tensor.
    fn batch_loss_grad(
        &self,
        head: &HeadBatch,
        targets: &Tensor,
        pos_weight: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let probs = self.forward_on_tape(&mut tape, head)?;
        let loss = tape.bce_loss(probs, targets, pos_weight)?;
        tape.backward(loss)?;
        let mut grads = vec![0.0; self.params.len()];
        // Leaf vars were pushed two per def, weights first, before any other
        // node; recover them by replaying the same order.
        for (i, (def, &(w_off, b_off))) in self.defs.iter().zip(&self.offsets).enumerate() {
            let w_var = Var(2 * i);
            let b_var = Var(2 * i + 1);
            grads[w_off..w_off + def.weight_numel()].copy_from_slice(tape.grad(w_var));
            grads[b_off..b_off + def.out_c].copy_from_slice(tape.grad(b_var));
        }
        Ok((tape.value(loss).item()?, grads))
    }

    /// Loss and gradient over a slice of labeled items (one mini-batch).
    /// Public so the training loop, the CLI, and finite-difference gradient
    /// checks all share one definition of "the loss".
    pub fn loss_and_grad(
        &self,
        items: &[&LabeledImage],
        pos_weight: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let images: Vec<&Image> = items.iter().map(|it| &it.image).collect();
        check_uniform_dims(items.iter().copied())?;
        self.check_dims(images[0].width(), images[0].height())?;
        let head = self.head_batch(&images)?;
        let masks: Vec<Tensor> = items.iter().map(|it| mask_tensor(&it.mask)).collect();
        let refs: Vec<&Tensor> = masks.iter().collect();
        let targets = batch_concat(&refs)?;
        self.batch_loss_grad(&head, &targets, pos_weight)
    }
}

fn mask_tensor(mask: &Mask) -> Tensor {
    Tensor::new(
        [1, 1, mask.height(), mask.width()],
        mask.data().iter().map(|&v| f64::from(v)).collect(),
    )
    .expect("mask dimensions are valid")
}

fn check_uniform_dims<'a>(mut items: impl Iterator<Item = &'a LabeledImage>) -> Result<()> {
    let first = items.next().ok_or(Error::EmptyBatch)?;
    let (w, h) = (first.image.width(), first.image.height());
    for it in items {
        if it.image.width() != w || it.image.height() != h {
            return Err(Error::DimensionMismatch(format!(
                "mixed image sizes in one set: {}x{} vs {w}x{h}",
                it.image.width(),
                it.image.height()
            )));
        }
    }
    Ok(())
}

/// Binary map from a likelihood map: 1 where the target likelihood strictly
/// exceeds the background likelihood, 0 otherwise (ties go to background).
pub fn binarize(map: &LikelihoodMap) -> Mask {
    let data = map
        .p_t
        .data()
        .iter()
        .zip(map.p_b.data())
        .map(|(t, b)| u8::from(b < t))
        .collect();
    Mask::new(map.p_t.width(), map.p_t.height(), data).expect("planes share valid dims")
}

/// Input image with every predicted target pixel forced to full intensity —
/// the quick-look overlay the CLI writes next to inference results.
pub fn overlay(image: &Image, mask: &Mask) -> Result<Image> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(Error::DimensionMismatch(format!(
            "overlay image {}x{} vs mask {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let data = image
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m == 1 { 1.0 } else { v })
        .collect();
    Image::new(image.width(), image.height(), data)
}

/// Forward then binarize.
pub fn infer(net: &Network, image: &Image) -> Result<(LikelihoodMap, Mask)> {
    let map = net.forward(image)?;
    let mask = binarize(&map);
    Ok((map, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Positive-class weight for the BCE loss: a number, or `"auto"` to use the
/// train set's background/target pixel ratio clamped to [1, 100].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PosWeight {
    Auto,
    Value(f64),
}

impl Serialize for PosWeight {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PosWeight::Auto => s.serialize_str("auto"),
            PosWeight::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for PosWeight {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;
        let v = serde_json::Value::deserialize(d)?;
        match &v {
            serde_json::Value::String(s) if s == "auto" => Ok(PosWeight::Auto),
            serde_json::Value::Number(n) => n
                .as_f64()
                .map(PosWeight::Value)
                .ok_or_else(|| DeError::custom("pos_weight number out of f64 range")),
            _ => Err(DeError::custom(format!(
                "pos_weight must be a number or \"auto\", got {v}"
            ))),
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub pos_weight: PosWeight,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 2e-3,
            optimizer: OptimizerKind::Adam,
            pos_weight: PosWeight::Auto,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if let PosWeight::Value(v) = self.pos_weight {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "pos_weight {v} must be > 0"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of a training run; serializes to the JSON training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub epoch_losses: Vec<f64>,
    pub pos_weight: f64,
    pub wall_seconds: f64,
    pub early_stopped: bool,
}

/// Background/target pixel ratio over a set, clamped to [1, 100]; 1 when
/// the set has no target pixels at all.
pub fn auto_pos_weight(items: &[LabeledImage]) -> f64 {
    let mut targets = 0u64;
    let mut background = 0u64;
    for it in items {
        let t = it.mask.target_count() as u64;
        targets += t;
        background += it.mask.data().len() as u64 - t;
    }
    if targets == 0 {
        1.0
    } else {
        (background as f64 / targets as f64).clamp(1.0, 100.0)
    }
}

/// Train in place. See [`train_with_monitor`]; this variant never stops
/// early.
pub fn train(net: &mut Network, items: &[LabeledImage], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_monitor(net, items, cfg, |_, _, _| Ok(false))
}

/// Train in place with a per-epoch callback. The monitor receives the epoch
/// index, that epoch's mean loss, and the network as it stands; returning
/// `Ok(true)` stops training after the current epoch (used for held-out
/// early stopping). Mini-batches are drawn by shuffling the item order each
/// epoch with a generator seeded from `cfg.seed`, so a given (seed, data)
/// pair always produces the same loss trace.
pub fn train_with_monitor<F>(
    net: &mut Network,
    items: &[LabeledImage],
    cfg: &TrainConfig,
    mut monitor: F,
) -> Result<TrainReport>
where
    F: FnMut(usize, f64, &Network) -> Result<bool>,
{
    cfg.validate()?;
    check_uniform_dims(items.iter())?;
    net.check_dims(items[0].image.width(), items[0].image.height())?;
    let pos_weight = match cfg.pos_weight {
        PosWeight::Auto => auto_pos_weight(items),
        PosWeight::Value(v) => v,
    };

    // The head sits upstream of every trainable weight (even the free
    // variant's inputs are fixed), so per-item head inputs and target
    // tensors are computed once, not once per epoch.
    let caches: Vec<HeadBatch> = items
        .iter()
        .map(|it| net.head_batch(&[&it.image]))
        .collect::<Result<_>>()?;
    let targets: Vec<Tensor> = items.iter().map(|it| mask_tensor(&it.mask)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(net.params.len());
    let start = Instant::now();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut early_stopped = false;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let head = merge_head_batches(&caches, chunk)?;
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &targets[i]).collect();
            let batch_targets = batch_concat(&refs)?;
            let (loss, grads) = net.batch_loss_grad(&head, &batch_targets, pos_weight)?;
            match cfg.optimizer {
                OptimizerKind::Adam => adam_step(
                    &mut net.params,
                    &grads,
                    &mut adam,
                    cfg.learning_rate,
                    ADAM_BETA1,
                    ADAM_BETA2,
                    ADAM_EPS,
                )?,
                OptimizerKind::Sgd => sgd_step(&mut net.params, &grads, cfg.learning_rate)?,
            }
            loss_sum += loss * chunk.len() as f64;
        }
        let epoch_loss = loss_sum / items.len() as f64;
        epoch_losses.push(epoch_loss);
        if monitor(epoch, epoch_loss, net)? {
            early_stopped = true;
            break;
        }
    }

    Ok(TrainReport {
        epochs_run: epoch_losses.len(),
        epoch_losses,
        pos_weight,
        wall_seconds: start.elapsed().as_secs_f64(),
        early_stopped,
    })
}

fn merge_head_batches(caches: &[HeadBatch], chunk: &[usize]) -> Result<HeadBatch> {
    match &caches[chunk[0]] {
        HeadBatch::Features(_) => {
            let parts: Vec<&Tensor> = chunk
                .iter()
                .map(|&i| match &caches[i] {
                    HeadBatch::Features(t) => t,
                    HeadBatch::Free { .. } => unreachable!("uniform head variant"),
                })
                .collect();
            Ok(HeadBatch::Features(batch_concat(&parts)?))
        }
        HeadBatch::Free { padded, .. } => {
            let n_sizes = padded.len();
            let raw_parts: Vec<&Tensor> = chunk
                .iter()
                .map(|&i| match &caches[i] {
                    HeadBatch::Free { raw, .. } => raw,
                    HeadBatch::Features(_) => unreachable!("uniform head variant"),
                })
                .collect();
            let raw = batch_concat(&raw_parts)?;
            let mut merged = Vec::with_capacity(n_sizes);
            for s in 0..n_sizes {
                let parts: Vec<&Tensor> = chunk
                    .iter()
                    .map(|&i| match &caches[i] {
                        HeadBatch::Free { padded, .. } => &padded[s],
                        HeadBatch::Features(_) => unreachable!("uniform head variant"),
                    })
                    .collect();
                merged.push(batch_concat(&parts)?);
            }
            Ok(HeadBatch::Free {
                raw,
                padded: merged,
            })
        }
    }
}

/// Pooled-count evaluation of a network over labeled items.
pub fn evaluate_network(net: &Network, items: &[LabeledImage]) -> Result<EvaluationReport> {
    metrics::evaluate(items, |image| infer(net, image).map(|(_, mask)| mask))
}

/// Save config + parameters as a checkpoint directory.
pub fn save_network(net: &Network, dir: impl AsRef<Path>) -> Result<()> {
    let hyper = serde_json::to_value(&net.config)
        .map_err(|e| Error::Checkpoint(format!("config not serializable: {e}")))?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        entries: net.param_entries(),
        hyper,
    };
    save_checkpoint(dir, &manifest, &net.params)
}

/// Rebuild a network from a checkpoint directory; the stored layer list
/// must match what the stored config reconstructs.
pub fn load_network(dir: impl AsRef<Path>) -> Result<Network> {
    let (manifest, flat) = load_checkpoint(dir)?;
    let config: NetConfig = serde_json::from_value(manifest.hyper.clone())
        .map_err(|e| Error::Checkpoint(format!("bad hyperparameters: {e}")))?;
    let mut net = build_network(config)?;
    if manifest.entries != net.param_entries() {
        return Err(Error::Checkpoint(
            "checkpoint layer layout does not match its own config".into(),
        ));
    }
    net.params = flat;
    Ok(net)
}

/// Load labeled items from a dataset manifest: either an object with an
/// `entries` list of `{image, mask}` path pairs (as the scene generator
/// writes) or a bare JSON array of such pairs. Paths resolve relative to
/// the manifest's directory.
pub fn load_manifest_items(path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    #[derive(Deserialize)]
    struct PairEntry {
        image: String,
        mask: String,
    }
    #[derive(Deserialize)]
    struct ManifestDoc {
        entries: Vec<PairEntry>,
    }

    let path = path.as_ref();
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pairs: Vec<PairEntry> = match serde_json::from_str::<ManifestDoc>(&json) {
        Ok(doc) => doc.entries,
        Err(_) => serde_json::from_str(&json).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?,
    };
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut items = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let image = read_pgm(base.join(&pair.image))?;
        let mask = read_mask_pgm(base.join(&pair.mask))?;
        items.push(LabeledImage::new(image, mask)?);
    }
    Ok(items)
}
