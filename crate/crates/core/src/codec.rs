//! The semantic codec: a UNet-style encoder/decoder pair with optional CBAM
//! blocks after each downsampling stage.
//!
//! The encoder runs `num_down` stages of (conv-BN-ReLU x2, 2x2 max pool),
//! recording the pre-pool activation of each stage as a skip tensor. The
//! decoder mirrors them: 2x nearest upsample, concatenation with the matching
//! skip (which exactly doubles the channel count entering the stage's first
//! convolution), two conv-BN-ReLU layers of which the second halves the
//! width, and a final 1x1 convolution to class logits.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::NetworkConfig;
use crate::nn::{BatchNorm2d, Cbam, Conv2d, MaxPool2, Relu, Tensor4, Upsample2};

/// What a tensor means in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorRole {
    Image,
    Feature,
    AttentionMap,
    Logits,
}

/// A `[B, C, H, W]` activation tensor tagged with its semantic role.
#[derive(Debug, Clone)]
pub struct FeatureTensor {
    pub data: Tensor4,
    pub role: TensorRole,
}

impl FeatureTensor {
    pub fn image(data: Tensor4) -> Self {
        FeatureTensor {
            data,
            role: TensorRole::Image,
        }
    }

    pub fn feature(data: Tensor4) -> Self {
        FeatureTensor {
            data,
            role: TensorRole::Feature,
        }
    }

    /// Mean squared value over all elements.
    pub fn mean_square(&self) -> f64 {
        let n = self.data.len() as f64;
        self.data.iter().map(|v| v * v).sum::<f64>() / n
    }
}

/// Everything the encoder hands to the channel: the bottleneck tensor plus
/// one skip tensor per downsampling stage (shallowest first).
#[derive(Debug, Clone)]
pub struct TransmittedFeatures {
    pub bottleneck: FeatureTensor,
    pub skips: Vec<FeatureTensor>,
}

/// Gradients flowing back from the decoder to the encoder, matching the
/// layout of [`TransmittedFeatures`].
#[derive(Debug, Clone)]
pub struct FeatureGrads {
    pub bottleneck: Tensor4,
    pub skips: Vec<Tensor4>,
}

/// Codec errors.
#[derive(Debug, Error)]
pub enum CodecError {
    #[error("input spatial size {got:?} does not match config {expected:?}")]
    SpatialMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("received features do not match config: {0}")]
    GeometryMismatch(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint parameter count {got} does not match the cost model's {expected}")]
    ParamCountMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
}

impl ConvBlock {
    fn new(c_in: usize, c_mid: usize, c_out: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv1: Conv2d::new(c_in, c_mid, kernel, false, rng),
            bn1: BatchNorm2d::new(c_mid),
            relu1: Relu::default(),
            conv2: Conv2d::new(c_mid, c_out, kernel, false, rng),
            bn2: BatchNorm2d::new(c_out),
            relu2: Relu::default(),
        }
    }

    fn forward(&self, x: &Tensor4) -> Tensor4 {
        let x = self.relu1.forward(&self.bn1.forward(&self.conv1.forward(x)));
        self.relu2.forward(&self.bn2.forward(&self.conv2.forward(&x)))
    }

    fn forward_t(&mut self, x: &Tensor4) -> Tensor4 {
        let x = self.conv1.forward_t(x);
        let x = self.bn1.forward_t(&x);
        let x = self.relu1.forward_t(&x);
        let x = self.conv2.forward_t(&x);
        let x = self.bn2.forward_t(&x);
        self.relu2.forward_t(&x)
    }

    fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let d = self.relu2.backward(dy);
        let d = self.bn2.backward(&d);
        let d = self.conv2.backward(&d);
        let d = self.relu1.backward(&d);
        let d = self.bn1.backward(&d);
        self.conv1.backward(&d)
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    block: ConvBlock,
    pool: MaxPool2,
    cbam: Option<Cbam>,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: Upsample2,
    block: ConvBlock,
    /// Channels arriving from below (equals the skip width at this level).
    in_width: usize,
}

/// Trainable state of one codec: encoder parameters (downsampling path and
/// CBAM blocks) and decoder parameters (upsampling path and classifier head).
#[derive(Debug, Clone)]
pub struct CodecState {
    pub config: NetworkConfig,
    pub init_seed: u64,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    head: Conv2d,
}

impl CodecState {
    /// Builds a freshly initialized codec. Convolutions are He-normal, batch
    /// norm starts at gain 1 / bias 0, and the draw order is fixed so a seed
    /// fully determines the weights.
    pub fn new(config: &NetworkConfig, init_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let d = config.num_down;
        let k = config.kernel_main;

        let mut encoder = Vec::with_capacity(d);
        let mut c_prev = config.input_channels;
        for stage in 0..d {
            let width = config.stage_width(stage);
            let block = ConvBlock::new(c_prev, width, width, k, &mut rng);
            let cbam = config
                .cbam_enabled
                .then(|| Cbam::new(width, config.cbam_reduction, &mut rng));
            encoder.push(EncoderStage {
                block,
                pool: MaxPool2::default(),
                cbam,
            });
            c_prev = width;
        }

        let mut decoder = Vec::with_capacity(d);
        for level in (0..d).rev() {
            let width = config.stage_width(level);
            let out_width = if level == 0 {
                config.stage_width(0)
            } else {
                config.stage_width(level - 1)
            };
            decoder.push(DecoderStage {
                up: Upsample2,
                block: ConvBlock::new(2 * width, width, out_width, k, &mut rng),
                in_width: width,
            });
        }

        let head_in = if d == 0 {
            config.input_channels
        } else {
            config.stage_width(0)
        };
        let head = Conv2d::new(head_in, config.num_classes, 1, true, &mut rng);

        CodecState {
            config: config.clone(),
            init_seed,
            encoder,
            decoder,
            head,
        }
    }

    fn check_input(&self, image: &Tensor4) -> Result<(), CodecError> {
        let (_, c, h, w) = image.dim();
        let expected = (self.config.input_height, self.config.input_width);
        if (h, w) != expected {
            return Err(CodecError::SpatialMismatch {
                expected,
                got: (h, w),
            });
        }
        if c != self.config.input_channels {
            return Err(CodecError::GeometryMismatch(format!(
                "input has {c} channels, config says {}",
                self.config.input_channels
            )));
        }
        Ok(())
    }

    /// Inference-mode encoder pass.
    pub fn encode(&self, image: &FeatureTensor) -> Result<TransmittedFeatures, CodecError> {
        self.check_input(&image.data)?;
        let mut x = image.data.clone();
        let mut skips = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            let pre_pool = stage.block.forward(&x);
            x = stage.pool.forward(&pre_pool);
            if let Some(cbam) = &stage.cbam {
                x = cbam.forward(&x);
            }
            skips.push(FeatureTensor::feature(pre_pool));
        }
        Ok(TransmittedFeatures {
            bottleneck: FeatureTensor::feature(x),
            skips,
        })
    }

    /// Training-mode encoder pass; caches activations for [`Self::backward_encoder`].
    pub fn encode_t(&mut self, image: &FeatureTensor) -> Result<TransmittedFeatures, CodecError> {
        self.check_input(&image.data)?;
        let mut x = image.data.clone();
        let mut skips = Vec::with_capacity(self.encoder.len());
        for stage in &mut self.encoder {
            let pre_pool = stage.block.forward_t(&x);
            x = stage.pool.forward_t(&pre_pool);
            if let Some(cbam) = &mut stage.cbam {
                x = cbam.forward_t(&x);
            }
            skips.push(FeatureTensor::feature(pre_pool));
        }
        Ok(TransmittedFeatures {
            bottleneck: FeatureTensor::feature(x),
            skips,
        })
    }

    fn check_received(&self, received: &TransmittedFeatures) -> Result<(), CodecError> {
        let d = self.config.num_down;
        if received.skips.len() != d {
            return Err(CodecError::GeometryMismatch(format!(
                "expected {d} skips, got {}",
                received.skips.len()
            )));
        }
        let (_, c, h, w) = received.bottleneck.data.dim();
        let (bh, bw) = self.config.bottleneck_hw();
        if (c, h, w) != (self.config.bottleneck_width(), bh, bw) {
            return Err(CodecError::GeometryMismatch(format!(
                "bottleneck is {c}x{h}x{w}, expected {}x{bh}x{bw}",
                self.config.bottleneck_width()
            )));
        }
        for (i, skip) in received.skips.iter().enumerate() {
            let (_, c, h, w) = skip.data.dim();
            let eh = self.config.input_height >> i;
            let ew = self.config.input_width >> i;
            if (c, h, w) != (self.config.stage_width(i), eh, ew) {
                return Err(CodecError::GeometryMismatch(format!(
                    "skip {i} is {c}x{h}x{w}, expected {}x{eh}x{ew}",
                    self.config.stage_width(i)
                )));
            }
        }
        Ok(())
    }

    /// Inference-mode decoder pass producing class logits at full input
    /// resolution.
    pub fn decode(&self, received: &TransmittedFeatures) -> Result<FeatureTensor, CodecError> {
        self.check_received(received)?;
        let mut x = received.bottleneck.data.clone();
        let d = self.config.num_down;
        for (i, stage) in self.decoder.iter().enumerate() {
            let level = d - 1 - i;
            let up = stage.up.forward(&x);
            let cat = concat_channels(&up, &received.skips[level].data);
            x = stage.block.forward(&cat);
        }
        Ok(FeatureTensor {
            data: self.head.forward(&x),
            role: TensorRole::Logits,
        })
    }

    /// Training-mode decoder pass; caches activations for
    /// [`Self::backward_decoder`].
    pub fn decode_t(&mut self, received: &TransmittedFeatures) -> Result<FeatureTensor, CodecError> {
        self.check_received(received)?;
        let mut x = received.bottleneck.data.clone();
        let d = self.config.num_down;
        for (i, stage) in self.decoder.iter_mut().enumerate() {
            let level = d - 1 - i;
            let up = stage.up.forward(&x);
            let cat = concat_channels(&up, &received.skips[level].data);
            x = stage.block.forward_t(&cat);
        }
        Ok(FeatureTensor {
            data: self.head.forward_t(&x),
            role: TensorRole::Logits,
        })
    }

    /// Backpropagates logits gradients through the decoder, producing the
    /// gradients w.r.t. the received bottleneck and skips.
    pub fn backward_decoder(&mut self, dlogits: &Tensor4) -> FeatureGrads {
        let d = self.config.num_down;
        let mut dx = self.head.backward(dlogits);
        let mut dskips: Vec<Option<Tensor4>> = vec![None; d];
        for (i, stage) in self.decoder.iter_mut().enumerate().rev() {
            let level = d - 1 - i;
            let dcat = stage.block.backward(&dx);
            let (dup, dskip) = split_channels(&dcat, stage.in_width);
            dskips[level] = Some(dskip);
            dx = stage.up.backward(&dup);
        }
        FeatureGrads {
            bottleneck: dx,
            skips: dskips.into_iter().map(|g| g.unwrap()).collect(),
        }
    }

    /// Backpropagates channel-side gradients through the encoder.
    pub fn backward_encoder(&mut self, grads: &FeatureGrads) {
        let mut g = grads.bottleneck.clone();
        for (stage, dskip) in self.encoder.iter_mut().zip(grads.skips.iter()).rev() {
            if let Some(cbam) = &mut stage.cbam {
                g = cbam.backward(&g);
            }
            g = stage.pool.backward(&g);
            g += dskip;
            g = stage.block.backward(&g);
        }
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |e: TensorEntry| {
            if e.trainable {
                n += e.data.len();
            }
        });
        n
    }

    /// Visits every tensor (trainable parameters and batch-norm running
    /// statistics) in a fixed order.
    pub fn visit_tensors(&self, f: &mut dyn FnMut(TensorEntry)) {
        let conv = |name: String, c: &Conv2d, f: &mut dyn FnMut(TensorEntry)| {
            f(TensorEntry::param(format!("{name}.weight"), c.weight.as_slice().unwrap()));
            if let Some(b) = &c.bias {
                f(TensorEntry::param(format!("{name}.bias"), b.as_slice().unwrap()));
            }
        };
        let bn = |name: String, b: &BatchNorm2d, f: &mut dyn FnMut(TensorEntry)| {
            f(TensorEntry::param(format!("{name}.gamma"), b.gamma.as_slice().unwrap()));
            f(TensorEntry::param(format!("{name}.beta"), b.beta.as_slice().unwrap()));
            f(TensorEntry::state(
                format!("{name}.running_mean"),
                b.running_mean.as_slice().unwrap(),
            ));
            f(TensorEntry::state(
                format!("{name}.running_var"),
                b.running_var.as_slice().unwrap(),
            ));
        };
        for (s, stage) in self.encoder.iter().enumerate() {
            conv(format!("enc.{s}.conv1"), &stage.block.conv1, f);
            bn(format!("enc.{s}.bn1"), &stage.block.bn1, f);
            conv(format!("enc.{s}.conv2"), &stage.block.conv2, f);
            bn(format!("enc.{s}.bn2"), &stage.block.bn2, f);
            if let Some(cbam) = &stage.cbam {
                f(TensorEntry::param(
                    format!("enc.{s}.cbam.w0"),
                    cbam.channel.w0.as_slice().unwrap(),
                ));
                f(TensorEntry::param(
                    format!("enc.{s}.cbam.w1"),
                    cbam.channel.w1.as_slice().unwrap(),
                ));
                conv(format!("enc.{s}.cbam.spatial"), &cbam.spatial.conv, f);
            }
        }
        for (t, stage) in self.decoder.iter().enumerate() {
            conv(format!("dec.{t}.conv1"), &stage.block.conv1, f);
            bn(format!("dec.{t}.bn1"), &stage.block.bn1, f);
            conv(format!("dec.{t}.conv2"), &stage.block.conv2, f);
            bn(format!("dec.{t}.bn2"), &stage.block.bn2, f);
        }
        conv("head".into(), &self.head, f);
    }

    /// Visits `(value, gradient)` slices of every trainable parameter, in the
    /// same order as [`Self::visit_tensors`] restricted to trainables.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        fn conv(c: &mut Conv2d, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
            f(
                c.weight.as_slice_mut().unwrap(),
                c.grad_weight.as_slice_mut().unwrap(),
            );
            if let (Some(b), Some(gb)) = (c.bias.as_mut(), c.grad_bias.as_mut()) {
                f(b.as_slice_mut().unwrap(), gb.as_slice_mut().unwrap());
            }
        }
        fn bn(b: &mut BatchNorm2d, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
            f(
                b.gamma.as_slice_mut().unwrap(),
                b.grad_gamma.as_slice_mut().unwrap(),
            );
            f(
                b.beta.as_slice_mut().unwrap(),
                b.grad_beta.as_slice_mut().unwrap(),
            );
        }
        for stage in &mut self.encoder {
            conv(&mut stage.block.conv1, f);
            bn(&mut stage.block.bn1, f);
            conv(&mut stage.block.conv2, f);
            bn(&mut stage.block.bn2, f);
            if let Some(cbam) = &mut stage.cbam {
                f(
                    cbam.channel.w0.as_slice_mut().unwrap(),
                    cbam.channel.grad_w0.as_slice_mut().unwrap(),
                );
                f(
                    cbam.channel.w1.as_slice_mut().unwrap(),
                    cbam.channel.grad_w1.as_slice_mut().unwrap(),
                );
                conv(&mut cbam.spatial.conv, f);
            }
        }
        for stage in &mut self.decoder {
            conv(&mut stage.block.conv1, f);
            bn(&mut stage.block.bn1, f);
            conv(&mut stage.block.conv2, f);
            bn(&mut stage.block.bn2, f);
        }
        conv(&mut self.head, f);
    }

    /// Mutable access to every tensor by name (used by checkpoint loading).
    fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        fn conv(name: String, c: &mut Conv2d, f: &mut dyn FnMut(String, &mut [f64])) {
            f(format!("{name}.weight"), c.weight.as_slice_mut().unwrap());
            if let Some(b) = c.bias.as_mut() {
                f(format!("{name}.bias"), b.as_slice_mut().unwrap());
            }
        }
        fn bn(name: String, b: &mut BatchNorm2d, f: &mut dyn FnMut(String, &mut [f64])) {
            f(format!("{name}.gamma"), b.gamma.as_slice_mut().unwrap());
            f(format!("{name}.beta"), b.beta.as_slice_mut().unwrap());
            f(
                format!("{name}.running_mean"),
                b.running_mean.as_slice_mut().unwrap(),
            );
            f(
                format!("{name}.running_var"),
                b.running_var.as_slice_mut().unwrap(),
            );
        }
        for s in 0..self.encoder.len() {
            let stage = &mut self.encoder[s];
            conv(format!("enc.{s}.conv1"), &mut stage.block.conv1, f);
            bn(format!("enc.{s}.bn1"), &mut stage.block.bn1, f);
            conv(format!("enc.{s}.conv2"), &mut stage.block.conv2, f);
            bn(format!("enc.{s}.bn2"), &mut stage.block.bn2, f);
            if let Some(cbam) = &mut stage.cbam {
                f(
                    format!("enc.{s}.cbam.w0"),
                    cbam.channel.w0.as_slice_mut().unwrap(),
                );
                f(
                    format!("enc.{s}.cbam.w1"),
                    cbam.channel.w1.as_slice_mut().unwrap(),
                );
                conv(format!("enc.{s}.cbam.spatial"), &mut cbam.spatial.conv, f);
            }
        }
        for t in 0..self.decoder.len() {
            let stage = &mut self.decoder[t];
            conv(format!("dec.{t}.conv1"), &mut stage.block.conv1, f);
            bn(format!("dec.{t}.bn1"), &mut stage.block.bn1, f);
            conv(format!("dec.{t}.conv2"), &mut stage.block.conv2, f);
            bn(format!("dec.{t}.bn2"), &mut stage.block.bn2, f);
        }
        conv("head".into(), &mut self.head, f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, g| g.fill(0.0));
    }

    /// Runs a shape probe through the materialized graph, reporting the
    /// geometry every parameterized layer actually sees. Used by the
    /// graph-walk cost oracle.
    pub fn probe_shapes(&self) -> Vec<ProbeLayer> {
        let mut out = Vec::new();
        let mut x = Tensor4::zeros((
            1,
            self.config.input_channels,
            self.config.input_height,
            self.config.input_width,
        ));
        let mut skips = Vec::new();
        for (s, stage) in self.encoder.iter().enumerate() {
            for (conv, bn, name) in [
                (&stage.block.conv1, &stage.block.bn1, format!("enc.{s}.conv1")),
                (&stage.block.conv2, &stage.block.bn2, format!("enc.{s}.conv2")),
            ] {
                // Geometry read off the tensor that actually flows in.
                let (_, c, h, w) = x.dim();
                out.push(ProbeLayer {
                    name,
                    kind: ProbeKind::StageConv,
                    in_h: h,
                    in_w: w,
                    c_in: c,
                    c_out: conv.c_out,
                    kernel: conv.kernel,
                    weights: conv.weight.len(),
                    bias: conv.bias.as_ref().map_or(0, |b| b.len()),
                    bn: bn.param_count(),
                });
                x = conv.forward(&x);
            }
            skips.push(x.clone());
            x = stage.pool.forward(&x);
            if let Some(cbam) = &stage.cbam {
                let (_, c, h, w) = x.dim();
                out.push(ProbeLayer {
                    name: format!("enc.{s}.cbam.mlp"),
                    kind: ProbeKind::ChannelMlp,
                    in_h: h,
                    in_w: w,
                    c_in: c,
                    c_out: cbam.channel.w0.dim().0,
                    kernel: 1,
                    weights: cbam.channel.w0.len() + cbam.channel.w1.len(),
                    bias: 0,
                    bn: 0,
                });
                out.push(ProbeLayer {
                    name: format!("enc.{s}.cbam.spatial"),
                    kind: ProbeKind::SpatialConv,
                    in_h: h,
                    in_w: w,
                    c_in: 2,
                    c_out: 1,
                    kernel: cbam.spatial.conv.kernel,
                    weights: cbam.spatial.conv.weight.len(),
                    bias: cbam.spatial.conv.bias.as_ref().map_or(0, |b| b.len()),
                    bn: 0,
                });
                x = cbam.forward(&x);
            }
        }
        let d = self.config.num_down;
        for (t, stage) in self.decoder.iter().enumerate() {
            let level = d - 1 - t;
            let up = stage.up.forward(&x);
            x = concat_channels(&up, &skips[level]);
            for (conv, bn, name) in [
                (&stage.block.conv1, &stage.block.bn1, format!("dec.{t}.conv1")),
                (&stage.block.conv2, &stage.block.bn2, format!("dec.{t}.conv2")),
            ] {
                let (_, c, h, w) = x.dim();
                out.push(ProbeLayer {
                    name,
                    kind: ProbeKind::StageConv,
                    in_h: h,
                    in_w: w,
                    c_in: c,
                    c_out: conv.c_out,
                    kernel: conv.kernel,
                    weights: conv.weight.len(),
                    bias: conv.bias.as_ref().map_or(0, |b| b.len()),
                    bn: bn.param_count(),
                });
                x = conv.forward(&x);
            }
        }
        let (_, c, h, w) = x.dim();
        out.push(ProbeLayer {
            name: "head".into(),
            kind: ProbeKind::StageConv,
            in_h: h,
            in_w: w,
            c_in: c,
            c_out: self.head.c_out,
            kernel: self.head.kernel,
            weights: self.head.weight.len(),
            bias: self.head.bias.as_ref().map_or(0, |b| b.len()),
            bn: 0,
        });
        out
    }

    /// Serializes the full state (parameters, running statistics, config and
    /// init seed) into the versioned checkpoint container.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), CodecError> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        self.visit_tensors(&mut |e: TensorEntry| {
            tensors.push(CheckpointTensor {
                name: e.name.clone(),
                len: e.data.len(),
                trainable: e.trainable,
            });
            payload.extend_from_slice(e.data);
        });
        let header = CheckpointHeader {
            config: self.config.clone(),
            init_seed: self.init_seed,
            tensors,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| CodecError::Format(format!("header encode: {e}")))?;

        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        file.write_all(&(header_json.len() as u64).to_le_bytes())?;
        file.write_all(&header_json)?;
        for v in payload {
            file.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Loads a checkpoint, validating the container version and the
    /// parameter-count invariant against the cost model.
    pub fn load_checkpoint(path: &Path) -> Result<CodecState, CodecError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CodecError::Format("bad magic".into()));
        }
        let mut word = [0u8; 4];
        file.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(CodecError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let mut len8 = [0u8; 8];
        file.read_exact(&mut len8)?;
        let header_len = u64::from_le_bytes(len8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| CodecError::Format(format!("header decode: {e}")))?;

        let mut state = CodecState::new(&header.config, header.init_seed);
        let expected = crate::costmodel::model_size(&header.config, crate::costmodel::CostMode::Standard)
            .map_err(|e| CodecError::Format(format!("cost model: {e}")))?
            .params as usize;
        let got: usize = header
            .tensors
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.len)
            .sum();
        if got != expected {
            return Err(CodecError::ParamCountMismatch { expected, got });
        }

        let mut data = std::collections::HashMap::new();
        for t in &header.tensors {
            let mut buf = vec![0.0f64; t.len];
            let mut raw = vec![0u8; t.len * 8];
            file.read_exact(&mut raw)?;
            for (i, chunk) in raw.chunks_exact(8).enumerate() {
                buf[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            data.insert(t.name.clone(), buf);
        }
        let mut missing = Vec::new();
        state.visit_tensors_mut(&mut |name, slice| match data.get(&name) {
            Some(values) if values.len() == slice.len() => slice.copy_from_slice(values),
            _ => missing.push(name),
        });
        if !missing.is_empty() {
            return Err(CodecError::Format(format!(
                "checkpoint missing tensors: {}",
                missing.join(", ")
            )));
        }
        Ok(state)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SCCP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    len: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetworkConfig,
    init_seed: u64,
    tensors: Vec<CheckpointTensor>,
}

/// A named tensor exposed by [`CodecState::visit_tensors`].
pub struct TensorEntry<'a> {
    pub name: String,
    pub data: &'a [f64],
    pub trainable: bool,
}

impl<'a> TensorEntry<'a> {
    fn param(name: String, data: &'a [f64]) -> Self {
        TensorEntry {
            name,
            data,
            trainable: true,
        }
    }

    fn state(name: String, data: &'a [f64]) -> Self {
        TensorEntry {
            name,
            data,
            trainable: false,
        }
    }
}

/// Kind tag of a probed layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    StageConv,
    ChannelMlp,
    SpatialConv,
}

/// Real geometry of one parameterized layer, read off the materialized graph.
#[derive(Debug, Clone)]
pub struct ProbeLayer {
    pub name: String,
    pub kind: ProbeKind,
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub weights: usize,
    pub bias: usize,
    pub bn: usize,
}

fn concat_channels(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    let (ba, ca, h, w) = a.dim();
    let (_, cb, _, _) = b.dim();
    let mut out = Tensor4::zeros((ba, ca + cb, h, w));
    out.slice_mut(s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

fn split_channels(x: &Tensor4, first: usize) -> (Tensor4, Tensor4) {
    (
        x.slice(s![.., ..first, .., ..]).to_owned(),
        x.slice(s![.., first.., .., ..]).to_owned(),
    )
}
