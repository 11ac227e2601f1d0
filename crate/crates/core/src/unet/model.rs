use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{max_pool2, max_pool2_backward, Conv3d, InstanceNorm, NormCache, PRelu, UpConv};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::volume::{NUM_CHANNELS, NUM_CLASSES};

pub const DEFAULT_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_PRELU_INIT: f64 = 0.25;
pub const FOREGROUND_CLASS_WEIGHT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossType {
    Uniform,
    Weighted,
}

impl LossType {
    pub fn class_weights(self) -> [f64; NUM_CLASSES] {
        match self {
            LossType::Uniform => [1.0; NUM_CLASSES],
            LossType::Weighted => [
                1.0,
                FOREGROUND_CLASS_WEIGHT,
                FOREGROUND_CLASS_WEIGHT,
                FOREGROUND_CLASS_WEIGHT,
            ],
        }
    }
}

/// Hyper-parameters of one ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoding (and decoding) blocks, i.e. number of 2× downsamplings.
    pub num_blocks: usize,
    /// Cubic patch side in voxels.
    pub patch_size: usize,
    /// Channels of the first encoding block.
    pub base_features: usize,
    pub loss_type: LossType,
    pub class_weights: [f64; NUM_CLASSES],
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_alpha")]
    pub prelu_init: f64,
}

fn default_eps() -> f64 {
    DEFAULT_NORM_EPS
}

fn default_alpha() -> f64 {
    DEFAULT_PRELU_INIT
}

impl ModelConfig {
    pub fn new(num_blocks: usize, patch_size: usize, base_features: usize, loss_type: LossType) -> Self {
        Self {
            num_blocks,
            patch_size,
            base_features,
            loss_type,
            class_weights: loss_type.class_weights(),
            norm_eps: DEFAULT_NORM_EPS,
            prelu_init: DEFAULT_PRELU_INIT,
        }
    }

    /// The six ensemble members: `(M, N, f, loss)`.
    pub fn ensemble_configs() -> Vec<ModelConfig> {
        use LossType::*;
        [
            (3, 64, 96, Uniform),
            (3, 64, 96, Weighted),
            (4, 64, 96, Uniform),
            (4, 96, 96, Weighted),
            (3, 80, 64, Uniform),
            (3, 80, 64, Weighted),
        ]
        .into_iter()
        .map(|(m, n, f, l)| ModelConfig::new(m, n, f, l))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::InvalidConfig("num_blocks must be at least 1".into()));
        }
        if self.base_features == 0 {
            return Err(Error::InvalidConfig("base_features must be at least 1".into()));
        }
        let factor = 1usize
            .checked_shl(self.num_blocks as u32)
            .ok_or_else(|| Error::InvalidConfig("num_blocks too large".into()))?;
        if self.patch_size == 0 || self.patch_size % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch size {} not divisible by 2^{} = {factor}",
                self.patch_size, self.num_blocks
            )));
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidConfig("class weights must be positive".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::InvalidConfig("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Channels produced at depth `b` (`b == num_blocks` is the bottleneck).
    pub fn features_at(&self, b: usize) -> usize {
        self.base_features << b
    }
}

/// Two `conv → PReLU → norm` stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub conv1: Conv3d,
    pub act1: PRelu,
    pub norm1: InstanceNorm,
    pub conv2: Conv3d,
    pub act2: PRelu,
    pub norm2: InstanceNorm,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Tensor,
    pre1: Tensor,
    norm1: NormCache,
    mid: Tensor,
    pre2: Tensor,
    norm2: NormCache,
}

impl ConvBlock {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            conv1: Conv3d::new(cin, cout, 3, rng),
            act1: PRelu::new(cout, cfg.prelu_init),
            norm1: InstanceNorm::new(cout, cfg.norm_eps),
            conv2: Conv3d::new(cout, cout, 3, rng),
            act2: PRelu::new(cout, cfg.prelu_init),
            norm2: InstanceNorm::new(cout, cfg.norm_eps),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            act1: self.act1.zeros_like(),
            norm1: self.norm1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            act2: self.act2.zeros_like(),
            norm2: self.norm2.zeros_like(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }

    fn forward(&self, x: Tensor) -> (Tensor, BlockCache) {
        let pre1 = self.conv1.forward(&x);
        let (mid, norm1) = self.norm1.forward(&self.act1.forward(&pre1));
        let pre2 = self.conv2.forward(&mid);
        let (out, norm2) = self.norm2.forward(&self.act2.forward(&pre2));
        (
            out,
            BlockCache {
                input: x,
                pre1,
                norm1,
                mid,
                pre2,
                norm2,
            },
        )
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        let h = self.norm1.forward(&self.act1.forward(&self.conv1.forward(x))).0;
        self.norm2.forward(&self.act2.forward(&self.conv2.forward(&h))).0
    }

    fn backward(&self, cache: &BlockCache, dy: &Tensor, grad: &mut ConvBlock) -> Tensor {
        let g = self.norm2.backward(&cache.norm2, dy, &mut grad.norm2);
        let g = self.act2.backward(&cache.pre2, &g, &mut grad.act2);
        let g = self.conv2.backward(&cache.mid, &g, &mut grad.conv2);
        let g = self.norm1.backward(&cache.norm1, &g, &mut grad.norm1);
        let g = self.act1.backward(&cache.pre1, &g, &mut grad.act1);
        self.conv1.backward(&cache.input, &g, &mut grad.conv1)
    }

    fn tensors(&self) -> [&Vec<f64>; 10] {
        [
            &self.conv1.weight,
            &self.conv1.bias,
            &self.act1.alpha,
            &self.norm1.gamma,
            &self.norm1.beta,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.act2.alpha,
            &self.norm2.gamma,
            &self.norm2.beta,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.act1.alpha,
            &mut self.norm1.gamma,
            &mut self.norm1.beta,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.act2.alpha,
            &mut self.norm2.gamma,
            &mut self.norm2.beta,
        ]
    }

    const TENSOR_NAMES: [&'static str; 10] = [
        "conv1.weight",
        "conv1.bias",
        "act1.alpha",
        "norm1.gamma",
        "norm1.beta",
        "conv2.weight",
        "conv2.bias",
        "act2.alpha",
        "norm2.gamma",
        "norm2.beta",
    ];
}

/// Encoder–decoder segmentation network.
///
/// Encoder block `b` outputs `f·2^b` channels at side `N / 2^b`; the
/// bottleneck runs at depth `M`. Each decoder level upsamples with a
/// transposed convolution, concatenates the matching encoder output after
/// the upsampled features and applies another conv block. A 1×1×1
/// convolution maps to the class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNet3d {
    pub config: ModelConfig,
    pub encoders: Vec<ConvBlock>,
    pub bottleneck: ConvBlock,
    /// `ups[b]` maps depth `b + 1` features to depth `b`.
    pub ups: Vec<UpConv>,
    /// `decoders[b]` runs at depth `b`.
    pub decoders: Vec<ConvBlock>,
    pub head: Conv3d,
}

/// Activations kept from a training forward pass.
pub struct ForwardCache {
    encoders: Vec<BlockCache>,
    pool_args: Vec<Vec<u32>>,
    bottleneck: BlockCache,
    dropout_mask: Option<Vec<f64>>,
    up_inputs: Vec<Tensor>,
    decoders: Vec<BlockCache>,
    head_input: Tensor,
}

/// Dropout applied to the bottleneck output during training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

impl UNet3d {
    /// Builds a network with He-normal convolution weights drawn from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = config.num_blocks;
        let mut encoders = Vec::with_capacity(m);
        let mut cin = NUM_CHANNELS;
        for b in 0..m {
            let f = config.features_at(b);
            encoders.push(ConvBlock::new(cin, f, config, &mut rng));
            cin = f;
        }
        let bottleneck = ConvBlock::new(cin, config.features_at(m), config, &mut rng);
        let mut ups = Vec::with_capacity(m);
        let mut decoders = Vec::with_capacity(m);
        for b in 0..m {
            let f = config.features_at(b);
            ups.push(UpConv::new(config.features_at(b + 1), f, &mut rng));
            decoders.push(ConvBlock::new(2 * f, f, config, &mut rng));
        }
        let head = Conv3d::new(config.features_at(0), NUM_CLASSES, 1, &mut rng);
        Ok(Self {
            config: config.clone(),
            encoders,
            bottleneck,
            ups,
            decoders,
            head,
        })
    }

    /// A same-shaped network with every parameter zero, used to accumulate
    /// gradients.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoders: self.encoders.iter().map(ConvBlock::zeros_like).collect(),
            bottleneck: self.bottleneck.zeros_like(),
            ups: self.ups.iter().map(UpConv::zeros_like).collect(),
            decoders: self.decoders.iter().map(ConvBlock::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Output channels of each encoder block followed by the bottleneck.
    pub fn encoder_channels(&self) -> Vec<usize> {
        self.encoders
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .map(ConvBlock::out_channels)
            .collect()
    }

    /// Propagates a `(side, channels)` input through the layer graph without
    /// computing activations, checking that every layer's declared channel
    /// counts chain. Returns the output `(spatial dims, channels)` and the
    /// bottleneck `(side, channels)`.
    pub fn infer_shapes(&self, input: [usize; 3], channels: usize) -> Result<ShapeTrace> {
        let mismatch = |what: &str, want: usize, got: usize| {
            Error::ShapeMismatch(format!("{what}: expects {want} channels, receives {got}"))
        };
        let block = |blk: &ConvBlock, c: usize, what: &str| -> Result<usize> {
            if blk.conv1.in_channels != c {
                return Err(mismatch(what, blk.conv1.in_channels, c));
            }
            if blk.conv2.in_channels != blk.conv1.out_channels {
                return Err(mismatch(what, blk.conv2.in_channels, blk.conv1.out_channels));
            }
            Ok(blk.conv2.out_channels)
        };
        let mut dims = input;
        let mut c = channels;
        let mut skips = Vec::new();
        for (b, enc) in self.encoders.iter().enumerate() {
            c = block(enc, c, &format!("encoder {b}"))?;
            skips.push((dims, c));
            if dims.iter().any(|d| d % 2 != 0) {
                return Err(Error::ShapeMismatch(format!("odd side {dims:?} before pooling")));
            }
            dims = dims.map(|d| d / 2);
        }
        c = block(&self.bottleneck, c, "bottleneck")?;
        let bottleneck = (dims, c);
        for b in (0..self.decoders.len()).rev() {
            let up = &self.ups[b];
            if up.in_channels != c {
                return Err(mismatch("upsampling", up.in_channels, c));
            }
            dims = dims.map(|d| d * 2);
            let (sdims, sc) = skips[b];
            if sdims != dims {
                return Err(Error::ShapeMismatch(format!("skip {sdims:?} vs {dims:?}")));
            }
            c = block(&self.decoders[b], up.out_channels + sc, &format!("decoder {b}"))?;
        }
        if self.head.in_channels != c {
            return Err(mismatch("head", self.head.in_channels, c));
        }
        Ok(ShapeTrace {
            output: dims,
            output_channels: self.head.out_channels,
            bottleneck_dims: bottleneck.0,
            bottleneck_channels: bottleneck.1,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor) {
        assert_eq!(x.channels, NUM_CHANNELS, "network input channels");
        let factor = 1 << self.config.num_blocks;
        assert!(
            x.dims.iter().all(|d| d % factor == 0),
            "input sides {:?} must be divisible by {factor}",
            x.dims
        );
    }

    /// Inference forward pass (no dropout); returns class logits.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.check_input(x);
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = x.clone();
        for enc in &self.encoders {
            let y = enc.forward_eval(&h);
            h = max_pool2(&y).0;
            skips.push(y);
        }
        h = self.bottleneck.forward_eval(&h);
        for b in (0..self.decoders.len()).rev() {
            let up = self.ups[b].forward(&h);
            h = self.decoders[b].forward_eval(&up.concat(&skips[b]));
        }
        self.head.forward(&h)
    }

    /// Training forward pass keeping activations for [`UNet3d::backward`].
    pub fn forward_train(&self, x: &Tensor, dropout: Option<Dropout<'_>>) -> (Tensor, ForwardCache) {
        self.check_input(x);
        let m = self.encoders.len();
        let mut enc_caches = Vec::with_capacity(m);
        let mut pool_args = Vec::with_capacity(m);
        let mut skips = Vec::with_capacity(m);
        let mut h = x.clone();
        for enc in &self.encoders {
            let (y, cache) = enc.forward(h);
            let (pooled, arg) = max_pool2(&y);
            enc_caches.push(cache);
            pool_args.push(arg);
            skips.push(y);
            h = pooled;
        }
        let (mut h, bottleneck) = self.bottleneck.forward(h);
        let dropout_mask = dropout.map(|d| {
            let keep = 1.0 - d.rate;
            let mask: Vec<f64> = (0..h.data.len())
                .map(|_| if d.rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            for (v, s) in h.data.iter_mut().zip(&mask) {
                *v *= s;
            }
            mask
        });
        let mut up_inputs = vec![Tensor::zeros(0, [0; 3]); m];
        let mut dec_caches: Vec<Option<BlockCache>> = (0..m).map(|_| None).collect();
        for b in (0..m).rev() {
            let up = self.ups[b].forward(&h);
            up_inputs[b] = h;
            let (y, cache) = self.decoders[b].forward(up.concat(&skips[b]));
            dec_caches[b] = Some(cache);
            h = y;
        }
        let logits = self.head.forward(&h);
        (
            logits,
            ForwardCache {
                encoders: enc_caches,
                pool_args,
                bottleneck,
                dropout_mask,
                up_inputs,
                decoders: dec_caches.into_iter().map(Option::unwrap).collect(),
                head_input: h,
            },
        )
    }

    /// Accumulates parameter gradients of the loss into `grad` given the
    /// gradient with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor, grad: &mut UNet3d) {
        let m = self.encoders.len();
        let mut g = self.head.backward(&cache.head_input, dlogits, &mut grad.head);
        let mut skip_grads = vec![None; m];
        for b in 0..m {
            let dcat = self.decoders[b].backward(&cache.decoders[b], &g, &mut grad.decoders[b]);
            let (dup, dskip) = dcat.split(self.ups[b].out_channels);
            skip_grads[b] = Some(dskip);
            g = self.ups[b].backward(&cache.up_inputs[b], &dup, &mut grad.ups[b]);
        }
        if let Some(mask) = &cache.dropout_mask {
            for (v, s) in g.data.iter_mut().zip(mask) {
                *v *= s;
            }
        }
        g = self.bottleneck.backward(&cache.bottleneck, &g, &mut grad.bottleneck);
        for b in (0..m).rev() {
            let enc_dims = cache.encoders[b].input.dims;
            let mut dy = max_pool2_backward(&g, &cache.pool_args[b], enc_dims);
            dy.add_assign(skip_grads[b].as_ref().expect("decoder visited"));
            g = self.encoders[b].backward(&cache.encoders[b], &dy, &mut grad.encoders[b]);
        }
    }

    /// Every parameter tensor in canonical order.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for blk in self.encoders.iter().chain([&self.bottleneck]) {
            out.extend(blk.tensors());
        }
        for (up, dec) in self.ups.iter().zip(&self.decoders) {
            out.push(&up.weight);
            out.push(&up.bias);
            out.extend(dec.tensors());
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for blk in self.encoders.iter_mut().chain([&mut self.bottleneck]) {
            out.extend(blk.tensors_mut());
        }
        for (up, dec) in self.ups.iter_mut().zip(self.decoders.iter_mut()) {
            out.push(&mut up.weight);
            out.push(&mut up.bias);
            out.extend(dec.tensors_mut());
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let block = |prefix: String, out: &mut Vec<String>| {
            out.extend(ConvBlock::TENSOR_NAMES.iter().map(|n| format!("{prefix}.{n}")));
        };
        for b in 0..self.encoders.len() {
            block(format!("encoder{b}"), &mut out);
        }
        block("bottleneck".into(), &mut out);
        for b in 0..self.decoders.len() {
            out.push(format!("up{b}.weight"));
            out.push(format!("up{b}.bias"));
            block(format!("decoder{b}"), &mut out);
        }
        out.push("head.weight".into());
        out.push("head.bias".into());
        out
    }
}

/// Result of [`UNet3d::infer_shapes`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeTrace {
    pub output: [usize; 3],
    pub output_channels: usize,
    pub bottleneck_dims: [usize; 3],
    pub bottleneck_channels: usize,
}

/// Voxelwise softmax over the class axis.
pub fn softmax(logits: &Tensor) -> Tensor {
    let v = logits.voxels();
    let k = logits.channels;
    let mut out = logits.clone();
    for i in 0..v {
        let max = (0..k).map(|c| logits.data[c * v + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (logits.data[c * v + i] - max).exp();
            out.data[c * v + i] = e;
            sum += e;
        }
        for c in 0..k {
            out.data[c * v + i] /= sum;
        }
    }
    out
}

/// Mean over voxels of `w[y] · -ln softmax(logits)[y]`, and its gradient
/// with respect to the logits.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[u8], class_weights: &[f64; NUM_CLASSES]) -> Result<(f64, Tensor)> {
    if labels.len() != logits.voxels() || logits.channels != NUM_CLASSES {
        return Err(Error::ShapeMismatch(format!(
            "logits {}×{} vs {} labels",
            logits.channels,
            logits.voxels(),
            labels.len()
        )));
    }
    let v = logits.voxels();
    let n = v as f64;
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= NUM_CLASSES {
            return Err(Error::InvalidClass(y as i64));
        }
        let w = class_weights[y];
        // log-softmax directly for accuracy near one-hot predictions
        let max = (0..NUM_CLASSES).map(|c| logits.data[c * v + i]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + (0..NUM_CLASSES)
                .map(|c| (logits.data[c * v + i] - max).exp())
                .sum::<f64>()
                .ln();
        loss += w * (lse - logits.data[y * v + i]);
        for c in 0..NUM_CLASSES {
            let p = grad.data[c * v + i];
            grad.data[c * v + i] = w * (p - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}
