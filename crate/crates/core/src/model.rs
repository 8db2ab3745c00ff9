//! The stacked dual-encoder network and the patch discriminator.
//!
//! Parameters live in a [`ParamStore`] seeded from a ChaCha stream, so a
//! fixed seed reproduces the same initial weights on any machine.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::normalize::BetaNormalizer;
use crate::error::{invalid_config, invalid_input, PeyeError, Result};
use crate::ops;
use crate::types::{Modality, PhysicalVector};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const CONV_INIT_STD: f64 = 0.02;
const HEAD_INIT_STD: f64 = 0.01;

/// Named trainable parameters plus non-trainable buffers (batch-norm
/// running statistics).
#[derive(Debug)]
pub struct ParamStore {
    rng: ChaCha8Rng,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: device.clone(),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    fn insert(&mut self, name: String, values: Vec<f32>, shape: &[usize], buffer: bool) -> Result<Tensor> {
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        let map = if buffer { &mut self.buffers } else { &mut self.params };
        if map.insert(name.clone(), var).is_some() {
            return Err(invalid_config!("duplicate parameter name {name}"));
        }
        Ok(t)
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<Tensor> {
        let dist = Normal::new(0.0f32, std as f32).map_err(|e| invalid_config!("{e}"))?;
        let n = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape, false)
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Tensor> {
        let dist = Uniform::new_inclusive(-bound as f32, bound as f32).map_err(|e| invalid_config!("{e}"))?;
        let n = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape, false)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f32, buffer: bool) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape, buffer)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Trainable variables in name order.
    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn named_trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_trainable(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// Every parameter and buffer by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every stored value from `tensors`; names and shapes must
    /// match exactly.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if tensors.len() != expected {
            return Err(PeyeError::Checkpoint(format!(
                "checkpoint holds {} tensors, network expects {expected}",
                tensors.len()
            )));
        }
        for (name, var) in self.params.iter().chain(&self.buffers) {
            let src = tensors
                .get(name)
                .ok_or_else(|| PeyeError::Checkpoint(format!("missing tensor {name}")))?;
            if src.dims() != var.dims() {
                return Err(PeyeError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(var.dtype())?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Conv {
    w: Tensor,
    b: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        (c_in, c_out, k): (usize, usize, usize),
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        Ok(Self {
            w: ps.normal(format!("{name}.w"), &[c_out, c_in, k, k], CONV_INIT_STD)?,
            b: if bias {
                Some(ps.constant(format!("{name}.b"), &[c_out], 0.0, false)?)
            } else {
                None
            },
            stride,
            padding,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, &self.w, self.padding, self.stride)?;
        Ok(match &self.b {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// Stride-2 transposed convolution, kernel 4, padding 1: doubles H and W.
#[derive(Debug, Clone)]
struct UpConv {
    w: Tensor,
}

impl UpConv {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            w: ps.normal(format!("{name}.w"), &[c_in, c_out, 4, 4], CONV_INIT_STD)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::conv_transpose2d_k4s2p1(x, &self.w)?)
    }
}

#[derive(Debug, Clone)]
struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm {
    fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let gamma = ps.constant(format!("{name}.gamma"), &[c], 1.0, false)?;
        let beta = ps.constant(format!("{name}.beta"), &[c], 0.0, false)?;
        ps.constant(format!("{name}.running_mean"), &[c], 0.0, true)?;
        ps.constant(format!("{name}.running_var"), &[c], 1.0, true)?;
        Ok(Self {
            gamma,
            beta,
            running_mean: ps.buffers[&format!("{name}.running_mean")].clone(),
            running_var: ps.buffers[&format!("{name}.running_var")].clone(),
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (mean, var) = if train {
            let (b, c, h, w) = x.dims4()?;
            let n = (b * h * w) as f64;
            let xr = x.reshape((b, c, h * w))?;
            let mean = (xr.sum(2)?.sum(0)? / n)?;
            let var = ((xr.sqr()?.sum(2)?.sum(0)? / n)? - mean.sqr()?)?.relu()?;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.running_mean.as_tensor();
            let v = self.running_var.as_tensor();
            self.running_mean
                .set(&((m * (1.0 - BN_MOMENTUM))? + (mean.detach() * BN_MOMENTUM)?)?)?;
            self.running_var
                .set(&((v * (1.0 - BN_MOMENTUM))? + (var.detach() * (BN_MOMENTUM * unbiased))?)?)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().clone(),
                self.running_var.as_tensor().clone(),
            )
        };
        // folded into one per-channel scale and shift
        let scale = self.gamma.mul(&(var + BN_EPS)?.sqrt()?.recip()?)?;
        let shift = (&self.beta - mean.mul(&scale)?)?;
        Ok(ops::channel_affine(x, &scale, &shift)?)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            w: ps.uniform(format!("{name}.w"), &[d_out, d_in], bound)?,
            b: ps.uniform(format!("{name}.b"), &[d_out], bound)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w.t()?)?.broadcast_add(&self.b)?)
    }
}

/// conv → ReLU → batch norm
#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBlock {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?.relu()?, train)
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    up: UpConv,
    bn: BatchNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// Channels contributed by the physical encoder at the bottleneck.
    pub code_channels: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            input_height: 256,
            input_width: 256,
            base_channels: 64,
            depth: 4,
            code_channels: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    SigmoidUnitRange,
}

/// Whole-network geometry. Stages share the architecture but not weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PEyeNetworkConfig {
    pub stages: usize,
    pub stage: StageConfig,
    pub beta_length: usize,
    pub modality: Modality,
    pub pm_rows: usize,
    pub pm_cols: usize,
    pub output_activation: OutputActivation,
}

impl Default for PEyeNetworkConfig {
    fn default() -> Self {
        Self {
            stages: 1,
            stage: StageConfig::default(),
            beta_length: 10,
            modality: Modality::Rgb,
            pm_rows: 64,
            pm_cols: 32,
            output_activation: OutputActivation::SigmoidUnitRange,
        }
    }
}

impl PEyeNetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.stage;
        if self.stages == 0 {
            return Err(invalid_config!("at least one stage is required"));
        }
        if s.base_channels == 0 || s.depth == 0 || s.code_channels == 0 {
            return Err(invalid_config!(
                "base_channels, depth and code_channels must be positive"
            ));
        }
        let f = 1usize << s.depth;
        if s.input_height == 0
            || s.input_width == 0
            || !s.input_height.is_multiple_of(f)
            || !s.input_width.is_multiple_of(f)
        {
            return Err(invalid_config!(
                "input {}x{} is not divisible by 2^depth = {f}",
                s.input_height,
                s.input_width
            ));
        }
        if self.pm_rows == 0
            || self.pm_cols == 0
            || !s.input_height.is_multiple_of(self.pm_rows)
            || !s.input_width.is_multiple_of(self.pm_cols)
        {
            return Err(invalid_config!(
                "input {}x{} must be an integer multiple of the pressure map {}x{}",
                s.input_height,
                s.input_width,
                self.pm_rows,
                self.pm_cols
            ));
        }
        if !PhysicalVector::ALLOWED_LENGTHS.contains(&self.beta_length) {
            return Err(invalid_config!(
                "beta_length {} not in {:?}",
                self.beta_length,
                PhysicalVector::ALLOWED_LENGTHS
            ));
        }
        Ok(())
    }

    fn pool(&self) -> (usize, usize) {
        (
            self.stage.input_height / self.pm_rows,
            self.stage.input_width / self.pm_cols,
        )
    }
}

#[derive(Debug, Clone)]
struct Stage {
    encoder: Vec<ConvBlock>,
    phys_fc1: Linear,
    phys_fc2: Linear,
    decoder: Vec<UpBlock>,
    refine: ConvBlock,
    head: Conv,
}

impl Stage {
    fn new(ps: &mut ParamStore, name: &str, cfg: &PEyeNetworkConfig, c_in: usize) -> Result<Self> {
        let s = &cfg.stage;
        let width = |i: usize| s.base_channels << i;
        let mut encoder = Vec::with_capacity(s.depth);
        let mut prev = c_in;
        for i in 0..s.depth {
            let n = format!("{name}.vision.enc{i}");
            encoder.push(ConvBlock {
                conv: Conv::new(ps, &format!("{n}.conv"), (prev, width(i), 4), 2, 1, false)?,
                bn: BatchNorm::new(ps, &format!("{n}.bn"), width(i))?,
            });
            prev = width(i);
        }
        let hidden = 2 * s.code_channels;
        let phys_fc1 = Linear::new(ps, &format!("{name}.physical.fc1"), cfg.beta_length, hidden)?;
        let phys_fc2 = Linear::new(ps, &format!("{name}.physical.fc2"), hidden, s.code_channels)?;
        // decoder level j upsamples to the resolution of encoder level j-1
        let mut decoder = Vec::with_capacity(s.depth);
        let mut cur = width(s.depth - 1) + s.code_channels;
        for j in (0..s.depth).rev() {
            let out = width(j.saturating_sub(1));
            let n = format!("{name}.decoder.up{j}");
            decoder.push(UpBlock {
                up: UpConv::new(ps, &format!("{n}.convt"), cur, out)?,
                bn: BatchNorm::new(ps, &format!("{n}.bn"), out)?,
            });
            let skip = if j == 0 { c_in } else { width(j - 1) };
            cur = out + skip;
        }
        let refine = ConvBlock {
            conv: Conv::new(
                ps,
                &format!("{name}.decoder.refine.conv"),
                (cur, s.base_channels, 3),
                1,
                1,
                false,
            )?,
            bn: BatchNorm::new(ps, &format!("{name}.decoder.refine.bn"), s.base_channels)?,
        };
        let head = Conv {
            w: ps.normal(
                format!("{name}.decoder.head.w"),
                &[1, s.base_channels, 1, 1],
                HEAD_INIT_STD,
            )?,
            b: Some(ps.constant(format!("{name}.decoder.head.b"), &[1], 0.0, false)?),
            stride: 1,
            padding: 0,
        };
        Ok(Self {
            encoder,
            phys_fc1,
            phys_fc2,
            decoder,
            refine,
            head,
        })
    }

    fn encode_physical(&self, beta: &Tensor) -> Result<Tensor> {
        self.phys_fc2.forward(&self.phys_fc1.forward(beta)?.relu()?)
    }

    fn forward(&self, x: &Tensor, beta: &Tensor, pool: (usize, usize), train: bool) -> Result<Tensor> {
        let mut skips = vec![x.clone()];
        let mut h = x.clone();
        for block in &self.encoder {
            h = block.forward(&h, train)?;
            skips.push(h.clone());
        }
        skips.pop();
        let (b, _, bh, bw) = h.dims4()?;
        let code = tile(&self.encode_physical(beta)?, b, bh, bw)?;
        h = Tensor::cat(&[&h, &code], 1)?;
        for block in &self.decoder {
            h = block.bn.forward(&block.up.forward(&h)?.relu()?, train)?;
            let skip = skips.pop().expect("one skip per decoder level");
            h = Tensor::cat(&[&h, &skip], 1)?;
        }
        h = self.refine.forward(&h, train)?;
        if pool != (1, 1) {
            h = h.avg_pool2d_with_stride(pool, pool)?;
        }
        Ok(candle_nn::ops::sigmoid(&self.head.forward(&h)?)?)
    }
}

/// Nearest upsampling by integer factors per axis. Built from a broadcast so
/// that it stays differentiable when the two factors differ.
fn upsample_integer(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, m, n) = x.dims4()?;
    let (fh, fw) = (h / m, w / n);
    Ok(x.reshape((b, c, m, 1, n, 1))?
        .broadcast_as((b, c, m, fh, n, fw))?
        .reshape((b, c, h, w))?)
}

/// Broadcasts a `(B, K)` code over a `(h, w)` grid.
fn tile(code: &Tensor, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let k = code.dim(D::Minus1)?;
    Ok(code.reshape((b, k, 1, 1))?.broadcast_as((b, k, h, w))?.contiguous()?)
}

/// Stem features shared by all stages, then `S` encoder-decoder stages.
/// Stage `k > 1` sees the stem features concatenated with stage `k-1`'s
/// prediction upsampled to input resolution.
#[derive(Debug)]
pub struct PEyeNetwork {
    cfg: PEyeNetworkConfig,
    store: ParamStore,
    stem: ConvBlock,
    stages: Vec<Stage>,
}

impl PEyeNetwork {
    pub fn new(cfg: PEyeNetworkConfig, seed: u64, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed, device);
        let base = cfg.stage.base_channels;
        let c_img = cfg.modality.channels();
        let stem = ConvBlock {
            conv: Conv::new(&mut ps, "stem.conv", (c_img, base, 3), 1, 1, false)?,
            bn: BatchNorm::new(&mut ps, "stem.bn", base)?,
        };
        let stages = (0..cfg.stages)
            .map(|k| {
                let c_in = if k == 0 { base } else { base + 1 };
                Stage::new(&mut ps, &format!("stage{k}"), &cfg, c_in)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            store: ps,
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &PEyeNetworkConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    fn check_inputs(&self, x: &Tensor, beta: &Tensor) -> Result<()> {
        let (b, c, h, w) = x
            .dims4()
            .map_err(|_| invalid_input!("vision batch must be (B, C, H, W)"))?;
        let s = &self.cfg.stage;
        if c != self.cfg.modality.channels() || (h, w) != (s.input_height, s.input_width) {
            return Err(invalid_input!(
                "vision batch is {c}x{h}x{w}, network expects {}x{}x{}",
                self.cfg.modality.channels(),
                s.input_height,
                s.input_width
            ));
        }
        let (bb, l) = beta
            .dims2()
            .map_err(|_| invalid_input!("physique batch must be (B, L)"))?;
        if bb != b {
            return Err(invalid_input!("batch sizes differ: {b} images, {bb} physique vectors"));
        }
        if l != self.cfg.beta_length {
            return Err(invalid_input!(
                "physique vectors have {l} entries, network expects {}",
                self.cfg.beta_length
            ));
        }
        Ok(())
    }

    /// One `(B, 1, M, N)` prediction per stage, in stage order.
    pub fn forward(&self, x: &Tensor, beta: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        self.check_inputs(x, beta)?;
        let x = x.to_dtype(DType::F32)?;
        let beta = beta.to_dtype(DType::F32)?;
        let feats = self.stem.forward(&x, train)?;
        let (h, w) = (self.cfg.stage.input_height, self.cfg.stage.input_width);
        let pool = self.cfg.pool();
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let input = match outputs.last() {
                None => feats.clone(),
                Some(prev) => Tensor::cat(&[&feats, &upsample_integer(prev, h, w)?], 1)?,
            };
            outputs.push(stage.forward(&input, &beta, pool, train)?);
        }
        Ok(outputs)
    }

    /// Physical code of `stage`, tiled to `(B, code_channels, h, w)`.
    pub fn encode_physical(&self, stage: usize, beta: &Tensor, bottleneck_hw: (usize, usize)) -> Result<Tensor> {
        let st = self
            .stages
            .get(stage)
            .ok_or_else(|| invalid_input!("no stage {stage}"))?;
        let (b, l) = beta.dims2()?;
        if l != self.cfg.beta_length {
            return Err(invalid_input!(
                "physique vectors have {l} entries, expected {}",
                self.cfg.beta_length
            ));
        }
        tile(
            &st.encode_physical(&beta.to_dtype(DType::F32)?)?,
            b,
            bottleneck_hw.0,
            bottleneck_hw.1,
        )
    }

    pub fn bottleneck_hw(&self) -> (usize, usize) {
        let f = 1 << self.cfg.stage.depth;
        (self.cfg.stage.input_height / f, self.cfg.stage.input_width / f)
    }

    /// Trainable variables whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<(String, Var)> {
        self.store
            .named_trainable()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect()
    }
}

/// Dataset calibration stored alongside the weights so a checkpoint is
/// self-contained for prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub beta: BetaNormalizer,
    pub raw_peak: f64,
    pub pixel_area: f64,
}

pub const CHECKPOINT_FORMAT: &str = "peye-checkpoint/1";

pub fn save_checkpoint(path: &Path, net: &PEyeNetwork, calibration: &Calibration) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert("config".to_string(), serde_json::to_string(net.config())?);
    meta.insert("calibration".to_string(), serde_json::to_string(calibration)?);
    let tensors = net.store.tensors();
    safetensors::serialize_to_file(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(meta), path)
        .map_err(|e| PeyeError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(PEyeNetwork, Calibration)> {
    let bytes = std::fs::read(path).map_err(|e| PeyeError::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| PeyeError::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| PeyeError::Checkpoint("missing metadata".into()))?;
    let field = |key: &str| {
        meta.get(key)
            .ok_or_else(|| PeyeError::Checkpoint(format!("missing metadata field {key}")))
    };
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(PeyeError::Checkpoint(format!(
            "unsupported format {:?}, expected {CHECKPOINT_FORMAT:?}",
            field("format")?
        )));
    }
    let cfg: PEyeNetworkConfig = serde_json::from_str(field("config")?)?;
    let calibration: Calibration = serde_json::from_str(field("calibration")?)?;
    let net = PEyeNetwork::new(cfg, 0, device)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    net.store.load(&tensors)?;
    Ok((net, calibration))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Width of the first block; later blocks double it.
    pub base_channels: usize,
    /// Score `(pm, vision)` pairs rather than the map alone.
    pub conditional: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            conditional: true,
        }
    }
}

/// Three stride-2 blocks and a one-channel score conv.
#[derive(Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    store: ParamStore,
    c1: Conv,
    c2: Conv,
    bn2: BatchNorm,
    c3: Conv,
    bn3: BatchNorm,
    score: Conv,
}

/// Smallest map side the three halvings accept.
pub const DISCRIMINATOR_MIN_SIDE: usize = 8;

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, condition_channels: usize, seed: u64, device: &Device) -> Result<Self> {
        if cfg.base_channels == 0 {
            return Err(invalid_config!("discriminator base_channels must be positive"));
        }
        let mut ps = ParamStore::new(seed, device);
        let c_in = 1 + if cfg.conditional { condition_channels } else { 0 };
        let b = cfg.base_channels;
        Ok(Self {
            c1: Conv::new(&mut ps, "disc.c1", (c_in, b, 4), 2, 1, true)?,
            c2: Conv::new(&mut ps, "disc.c2", (b, 2 * b, 4), 2, 1, false)?,
            bn2: BatchNorm::new(&mut ps, "disc.bn2", 2 * b)?,
            c3: Conv::new(&mut ps, "disc.c3", (2 * b, 4 * b, 4), 2, 1, false)?,
            bn3: BatchNorm::new(&mut ps, "disc.bn3", 4 * b)?,
            score: Conv::new(&mut ps, "disc.score", (4 * b, 1, 3), 1, 1, true)?,
            cfg,
            store: ps,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// Patch scores for `pm` `(B, 1, M, N)`; `condition` is the vision batch,
    /// average-pooled to the map resolution when conditioning is on.
    pub fn forward(&self, pm: &Tensor, condition: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let (b, _, m, n) = pm
            .dims4()
            .map_err(|_| invalid_input!("pressure batch must be (B, 1, M, N)"))?;
        if m < DISCRIMINATOR_MIN_SIDE || n < DISCRIMINATOR_MIN_SIDE {
            return Err(invalid_input!(
                "{m}x{n} is below the discriminator minimum of {DISCRIMINATOR_MIN_SIDE}x{DISCRIMINATOR_MIN_SIDE}"
            ));
        }
        let x = match (self.cfg.conditional, condition) {
            (false, _) => pm.clone(),
            (true, None) => return Err(invalid_input!("conditional discriminator needs the vision batch")),
            (true, Some(c)) => {
                let (cb, _, h, w) = c.dims4()?;
                if cb != b || h % m != 0 || w % n != 0 {
                    return Err(invalid_input!("condition {h}x{w} cannot be pooled to {m}x{n}"));
                }
                let c = c.to_dtype(pm.dtype())?;
                let c = if (h, w) == (m, n) {
                    c
                } else {
                    c.avg_pool2d_with_stride((h / m, w / n), (h / m, w / n))?
                };
                Tensor::cat(&[pm, &c], 1)?
            }
        };
        let h = candle_nn::ops::leaky_relu(&self.c1.forward(&x)?, 0.2)?;
        let h = candle_nn::ops::leaky_relu(&self.bn2.forward(&self.c2.forward(&h)?, train)?, 0.2)?;
        let h = candle_nn::ops::leaky_relu(&self.bn3.forward(&self.c3.forward(&h)?, train)?, 0.2)?;
        self.score.forward(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_upsampling_has_gradient() {
        let x = Var::from_tensor(&Tensor::new(&[[[[1f32, 2.], [3., 4.]]]], &Device::Cpu).unwrap()).unwrap();
        let up = upsample_integer(x.as_tensor(), 4, 6).unwrap();
        assert_eq!(up.dims(), &[1, 1, 4, 6]);
        let rows: Vec<Vec<f32>> = up.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(rows[1], vec![1., 1., 1., 2., 2., 2.]);
        assert_eq!(rows[2], vec![3., 3., 3., 4., 4., 4.]);
        let g = up.sum_all().unwrap().backward().unwrap();
        let grad: Vec<f32> = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(grad, vec![6.; 4]);
    }

    fn small(stages: usize, beta_length: usize) -> PEyeNetworkConfig {
        PEyeNetworkConfig {
            stages,
            stage: StageConfig {
                input_height: 32,
                input_width: 16,
                base_channels: 4,
                depth: 2,
                code_channels: 3,
            },
            beta_length,
            modality: Modality::Rgb,
            pm_rows: 16,
            pm_cols: 8,
            output_activation: OutputActivation::SigmoidUnitRange,
        }
    }

    fn inputs(b: usize, l: usize, seed: u64) -> (Tensor, Tensor) {
        let mut ps = ParamStore::new(seed, &Device::Cpu);
        let x = ps.uniform("x".into(), &[b, 3, 32, 16], 1.0).unwrap().abs().unwrap();
        let beta = ps.uniform("b".into(), &[b, l], 1.0).unwrap().abs().unwrap();
        (x, beta)
    }

    #[test]
    fn stage_outputs_share_shape_and_range() {
        let net = PEyeNetwork::new(small(3, 10), 1, &Device::Cpu).unwrap();
        let (x, beta) = inputs(2, 10, 2);
        let outs = net.forward(&x, &beta, true).unwrap();
        assert_eq!(outs.len(), 3);
        for o in &outs {
            assert_eq!(o.dims(), &[2, 1, 16, 8]);
            let v: Vec<f32> = o.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn initial_output_is_near_half() {
        let net = PEyeNetwork::new(small(1, 10), 3, &Device::Cpu).unwrap();
        let (x, beta) = inputs(2, 10, 4);
        let v: Vec<f32> = net.forward(&x, &beta, true).unwrap()[0]
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert!(v.iter().all(|p| (p - 0.5).abs() < 0.05), "{v:?}");
    }

    #[test]
    fn zeroed_physical_encoder_ignores_beta() {
        let net = PEyeNetwork::new(small(2, 3), 5, &Device::Cpu).unwrap();
        for (name, var) in net.store().named_trainable() {
            if name.contains(".physical.fc1.w") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
        }
        let (x, b1) = inputs(2, 3, 6);
        let (_, b2) = inputs(2, 3, 7);
        let a = net.forward(&x, &b1, false).unwrap();
        let b = net.forward(&x, &b2, false).unwrap();
        for (a, b) in a.iter().zip(&b) {
            let a: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn physical_code_is_tiled_and_beta_dependent() {
        let net = PEyeNetwork::new(small(1, 1), 8, &Device::Cpu).unwrap();
        let beta = Tensor::new(&[[0.2f32], [0.9]], &Device::Cpu).unwrap();
        let code = net.encode_physical(0, &beta, (4, 2)).unwrap();
        assert_eq!(code.dims(), &[2, 3, 4, 2]);
        let v: Vec<Vec<Vec<f32>>> = code.reshape((2, 3, 8)).unwrap().to_vec3().unwrap();
        for b in &v {
            for ch in b {
                assert!(ch.iter().all(|&x| x == ch[0]));
            }
        }
        assert_ne!(v[0], v[1]);
    }

    #[test]
    fn param_count_is_affine_in_stages() {
        let count = |s| {
            PEyeNetwork::new(small(s, 10), 0, &Device::Cpu)
                .unwrap()
                .store()
                .num_trainable()
        };
        let (c1, c2, c3) = (count(1), count(2), count(3));
        assert!(c2 > c1);
        assert_eq!(c3 - c2, c2 - c1);
    }

    #[test]
    fn gradient_reaches_physical_encoder() {
        let net = PEyeNetwork::new(small(2, 10), 9, &Device::Cpu).unwrap();
        let (x, beta) = inputs(2, 10, 10);
        let outs = net.forward(&x, &beta, true).unwrap();
        let loss = outs[1].sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in net.group("stage0.physical.fc1") {
            let g = grads.get(var.as_tensor()).unwrap();
            let norm: f32 = g.sqr().unwrap().sum_all().unwrap().to_scalar().unwrap();
            assert!(norm > 0.0, "{name}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = PEyeNetwork::new(small(1, 10), 0, &Device::Cpu).unwrap();
        let (x, _) = inputs(2, 10, 1);
        let (_, short) = inputs(2, 3, 1);
        let (_, other_batch) = inputs(3, 10, 1);
        assert!(matches!(
            net.forward(&x, &short, false),
            Err(PeyeError::InvalidInput(_))
        ));
        assert!(matches!(
            net.forward(&x, &other_batch, false),
            Err(PeyeError::InvalidInput(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(1, 10);
        cfg.stage.input_height = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = small(1, 4);
        assert!(cfg.validate().is_err());
        cfg.beta_length = 10;
        cfg.stages = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let net = PEyeNetwork::new(small(2, 10), 11, &Device::Cpu).unwrap();
        let (x, beta) = inputs(2, 10, 12);
        net.forward(&x, &beta, true).unwrap();
        let before: Vec<f32> = net.forward(&x, &beta, false).unwrap()[1]
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let cal = Calibration {
            beta: BetaNormalizer {
                mins: vec![0.0; 10],
                maxs: vec![1.0; 10],
            },
            raw_peak: 100.0,
            pixel_area: 0.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        save_checkpoint(&path, &net, &cal).unwrap();
        let (back, cal_back) = load_checkpoint(&path, &Device::Cpu).unwrap();
        assert_eq!(cal_back, cal);
        assert_eq!(back.config(), net.config());
        let after: Vec<f32> = back.forward(&x, &beta, false).unwrap()[1]
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn discriminator_patch_grid() {
        let d = Discriminator::new(
            DiscriminatorConfig {
                base_channels: 4,
                conditional: true,
            },
            3,
            0,
            &Device::Cpu,
        )
        .unwrap();
        let pm = Tensor::zeros((2, 1, 64, 32), DType::F32, &Device::Cpu).unwrap();
        let img = Tensor::ones((2, 3, 128, 128), DType::F32, &Device::Cpu).unwrap();
        let s = d.forward(&pm, Some(&img), false).unwrap();
        assert_eq!(s.dims(), &[2, 1, 8, 4]);
        let again = d.forward(&pm, Some(&img), false).unwrap();
        assert_eq!(
            s.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            again.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let wide = Tensor::zeros((2, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let wide_img = Tensor::ones((2, 3, 128, 128), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.forward(&wide, Some(&wide_img), false).unwrap().dims(), &[2, 1, 8, 8]);
        let tiny = Tensor::zeros((2, 1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(d.forward(&tiny, Some(&img), false).is_err());
    }
}
