//! Training engine: configuration, loss-weight resolution, the optimization
//! loop, checkpointing and evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::Serialize;

use crate::data::batch::{epoch_order, for_each_batch, Batch, BatchBuilder};
use crate::data::normalize::BetaNormalizer;
use crate::data::{assign_split, Dataset};
use crate::density::{fit_density, PixelValueDensity, WeightMapConfig};
use crate::error::{invalid_config, invalid_input, PeyeError, Result};
use crate::losses::tensor as lt;
use crate::losses::{total_loss, LossComponents, LossValue, LossWeights, SsimConfig};
use crate::metrics::{
    default_curve_epsilons, pcs_curve, MetricsSummary, PcsCurve, SampleMetrics, HEADLINE_MASK_FRACTION,
    REPORT_MASK_FRACTIONS,
};
use crate::model::{
    save_checkpoint, Calibration, Discriminator, DiscriminatorConfig, OutputActivation, PEyeNetwork, PEyeNetworkConfig,
    StageConfig,
};
use crate::report;
use crate::types::{Grid, PhysicalVector, PressureMap, SampleRecord, Split, VisionImage};

/// The ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConfigName {
    Base,
    Pwrs,
    Phy,
    Ssim,
    D,
    PwrsPhy,
    PwrsPhySsim,
    PwrsPhyD,
    PwrsPhySsimD,
}

impl ConfigName {
    pub const ALL: [ConfigName; 9] = [
        ConfigName::Base,
        ConfigName::Pwrs,
        ConfigName::Phy,
        ConfigName::Ssim,
        ConfigName::D,
        ConfigName::PwrsPhy,
        ConfigName::PwrsPhySsim,
        ConfigName::PwrsPhyD,
        ConfigName::PwrsPhySsimD,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConfigName::Base => "base",
            ConfigName::Pwrs => "pwrs",
            ConfigName::Phy => "phy",
            ConfigName::Ssim => "ssim",
            ConfigName::D => "D",
            ConfigName::PwrsPhy => "pwrs-phy",
            ConfigName::PwrsPhySsim => "pwrs-phy-ssim",
            ConfigName::PwrsPhyD => "pwrs-phy-D",
            ConfigName::PwrsPhySsimD => "pwrs-phy-ssim-D",
        }
    }

    /// Weights of the terms named in the configuration. `base` is the plain
    /// L2 objective; every other name lists the terms it switches on.
    pub fn loss_weights(self) -> LossWeights {
        let mut w = LossWeights::ZERO;
        if self == ConfigName::Base {
            w.lambda_base_l2 = 100.0;
            return w;
        }
        for term in self.as_str().split('-') {
            match term {
                "pwrs" => w.lambda_pwrs = 100.0,
                "phy" => w.lambda_phy = 1e-6,
                "ssim" => w.lambda_ssim = 10.0,
                "D" => w.lambda_d = 1.0,
                _ => unreachable!("config names only contain known terms"),
            }
        }
        w
    }
}

impl fmt::Display for ConfigName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfigName {
    type Err = PeyeError;

    fn from_str(s: &str) -> Result<Self> {
        ConfigName::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| {
            let known: Vec<_> = ConfigName::ALL.iter().map(|c| c.as_str()).collect();
            invalid_config!("unknown config name {s:?}; expected one of {known:?}")
        })
    }
}

pub fn resolve_loss_weights(config_name: &str) -> Result<LossWeights> {
    Ok(config_name.parse::<ConfigName>()?.loss_weights())
}

/// Training configuration. Stored as flat `key = value` text; see
/// [`TrainConfig::KEYS`] for every key.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub config_name: ConfigName,
    pub epochs: usize,
    pub lr: f64,
    pub decay_epochs: usize,
    /// 70 in the original full-scale setup; 8 fits desk hardware.
    pub batch_size: usize,
    pub stages: usize,
    pub beta_length: usize,
    pub seed: u64,
    pub input_height: usize,
    pub input_width: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub code_channels: usize,
    pub density_bins: usize,
    pub xi: f64,
    pub lambda_l2: f64,
    pub disc_base_channels: usize,
    pub disc_conditional: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub workers: usize,
    pub checkpoint_every: usize,
    pub max_steps: usize,
    pub use_best_checkpoint: bool,
    pub validation_subjects: usize,
    pub shuffle: bool,
    pub ssim_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            config_name: ConfigName::PwrsPhy,
            epochs: 30,
            lr: 0.0002,
            decay_epochs: 5,
            batch_size: 8,
            stages: 1,
            beta_length: 10,
            seed: 0,
            input_height: 256,
            input_width: 256,
            base_channels: 64,
            depth: 4,
            code_channels: 64,
            density_bins: 100,
            xi: 0.01,
            lambda_l2: 1.0,
            disc_base_channels: 64,
            disc_conditional: true,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            workers: 1,
            checkpoint_every: 5,
            max_steps: 0,
            use_best_checkpoint: false,
            validation_subjects: 0,
            shuffle: true,
            ssim_window: 11,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| invalid_config!("{key}: cannot parse {value:?}: {e}"))
}

impl TrainConfig {
    /// Every configuration key with its description.
    pub const KEYS: &'static [(&'static str, &'static str)] = &[
        (
            "config_name",
            "loss configuration: base, pwrs, phy, ssim, D, pwrs-phy, pwrs-phy-ssim, pwrs-phy-D, pwrs-phy-ssim-D",
        ),
        ("epochs", "number of training epochs"),
        ("lr", "initial learning rate"),
        (
            "decay_epochs",
            "final epochs over which the learning rate decays linearly to 0",
        ),
        ("batch_size", "mini-batch size"),
        ("stages", "number of stacked stages"),
        ("beta_length", "physique entries fed to the network (1, 2, 3 or 10)"),
        ("seed", "seed for initialization and shuffling"),
        ("input_height", "network input height in pixels"),
        ("input_width", "network input width in pixels"),
        ("base_channels", "channels of the first encoder level"),
        ("depth", "number of down/up-sampling levels"),
        ("code_channels", "channels of the physique code at the bottleneck"),
        ("density_bins", "histogram bins of the pixel-value density"),
        ("xi", "smoothing added to each density bin"),
        ("lambda_l2", "scale of the reweighting map"),
        ("disc_base_channels", "channels of the first discriminator block"),
        (
            "disc_conditional",
            "condition the discriminator on the vision input (true/false)",
        ),
        ("adam_beta1", "Adam first-moment decay"),
        ("adam_beta2", "Adam second-moment decay"),
        ("workers", "batch assembly threads (1 = inline)"),
        (
            "checkpoint_every",
            "save a checkpoint every N epochs (0 = only at the end)",
        ),
        ("max_steps", "stop after this many optimization steps (0 = no limit)"),
        (
            "use_best_checkpoint",
            "evaluate the best-validation checkpoint instead of the final one",
        ),
        (
            "validation_subjects",
            "hold out this many training subjects for validation (0 = validate on the test split)",
        ),
        ("shuffle", "shuffle samples every epoch (true/false)"),
        ("ssim_window", "odd SSIM window size"),
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "config_name" => self.config_name = value.trim().parse()?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "decay_epochs" => self.decay_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "stages" => self.stages = parse(key, value)?,
            "beta_length" => self.beta_length = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "input_height" => self.input_height = parse(key, value)?,
            "input_width" => self.input_width = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "code_channels" => self.code_channels = parse(key, value)?,
            "density_bins" => self.density_bins = parse(key, value)?,
            "xi" => self.xi = parse(key, value)?,
            "lambda_l2" => self.lambda_l2 = parse(key, value)?,
            "disc_base_channels" => self.disc_base_channels = parse(key, value)?,
            "disc_conditional" => self.disc_conditional = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "use_best_checkpoint" => self.use_best_checkpoint = parse(key, value)?,
            "validation_subjects" => self.validation_subjects = parse(key, value)?,
            "shuffle" => self.shuffle = parse(key, value)?,
            "ssim_window" => self.ssim_window = parse(key, value)?,
            _ => return Err(invalid_config!("unknown config key {key:?}")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "config_name" => self.config_name.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.lr.to_string(),
            "decay_epochs" => self.decay_epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "stages" => self.stages.to_string(),
            "beta_length" => self.beta_length.to_string(),
            "seed" => self.seed.to_string(),
            "input_height" => self.input_height.to_string(),
            "input_width" => self.input_width.to_string(),
            "base_channels" => self.base_channels.to_string(),
            "depth" => self.depth.to_string(),
            "code_channels" => self.code_channels.to_string(),
            "density_bins" => self.density_bins.to_string(),
            "xi" => self.xi.to_string(),
            "lambda_l2" => self.lambda_l2.to_string(),
            "disc_base_channels" => self.disc_base_channels.to_string(),
            "disc_conditional" => self.disc_conditional.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "workers" => self.workers.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "use_best_checkpoint" => self.use_best_checkpoint.to_string(),
            "validation_subjects" => self.validation_subjects.to_string(),
            "shuffle" => self.shuffle.to_string(),
            "ssim_window" => self.ssim_window.to_string(),
            _ => unreachable!("get is only called with keys from KEYS"),
        }
    }

    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k)))
            .collect()
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PeyeError::parse(format!("config line {}", i + 1), "expected key = value"))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PeyeError::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| PeyeError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid_config!("epochs must be positive"));
        }
        if self.decay_epochs > self.epochs {
            return Err(invalid_config!(
                "decay_epochs {} exceeds epochs {}",
                self.decay_epochs,
                self.epochs
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid_config!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return Err(invalid_config!("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(invalid_config!("Adam moment decays must lie in [0, 1)"));
        }
        if self.density_bins < 2 {
            return Err(invalid_config!("density_bins must be at least 2"));
        }
        self.weight_map_config().validate()?;
        self.loss_weights().validate()?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.config_name.loss_weights()
    }

    pub fn weight_map_config(&self) -> WeightMapConfig {
        WeightMapConfig {
            lambda_l2: self.lambda_l2,
            xi: self.xi,
            normalize_mean_to_one: true,
        }
    }

    pub fn ssim_config(&self) -> SsimConfig {
        SsimConfig {
            window: self.ssim_window,
            ..SsimConfig::default()
        }
    }

    pub fn network_config(&self, dataset: &Dataset) -> PEyeNetworkConfig {
        PEyeNetworkConfig {
            stages: self.stages,
            stage: StageConfig {
                input_height: self.input_height,
                input_width: self.input_width,
                base_channels: self.base_channels,
                depth: self.depth,
                code_channels: self.code_channels,
            },
            beta_length: self.beta_length,
            modality: dataset.modality,
            pm_rows: dataset.pm_rows,
            pm_cols: dataset.pm_cols,
            output_activation: OutputActivation::SigmoidUnitRange,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: self.disc_base_channels,
            conditional: self.disc_conditional,
        }
    }

    /// Learning rate during 1-based `epoch`: constant, then a linear ramp
    /// that reaches 0 in the final epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let constant = self.epochs - self.decay_epochs;
        if epoch <= constant || self.decay_epochs == 0 {
            self.lr
        } else {
            self.lr * self.epochs.saturating_sub(epoch) as f64 / self.decay_epochs as f64
        }
    }
}

/// Weighted generator objective on one batch, summed over stages.
#[derive(Debug)]
pub struct StepLoss {
    pub total: Tensor,
    pub outputs: Vec<Tensor>,
    /// Weighted value per term, summed over stages.
    pub terms: BTreeMap<&'static str, f64>,
    /// Total per stage.
    pub per_stage: Vec<f64>,
}

pub fn generator_loss(
    net: &PEyeNetwork,
    disc: Option<&Discriminator>,
    batch: &Batch,
    weights: &LossWeights,
    pixel_area: f64,
    ssim: &SsimConfig,
) -> Result<StepLoss> {
    let outputs = net.forward(&batch.vision, &batch.beta, true)?;
    let mut total: Option<Tensor> = None;
    let mut terms = BTreeMap::new();
    let mut per_stage = Vec::with_capacity(outputs.len());
    for out in &outputs {
        let mut c = LossComponents::<Tensor>::default();
        if weights.lambda_pwrs > 0.0 {
            let w = batch
                .weights
                .as_ref()
                .ok_or_else(|| PeyeError::Precondition("pwrs is active but the batch has no weight maps".into()))?;
            c.pwrs = Some(lt::pwrs(out, &batch.target, w)?);
        }
        if weights.lambda_phy > 0.0 {
            c.phy = Some(lt::physical(out, &batch.weight_kg, pixel_area)?);
        }
        if weights.lambda_ssim > 0.0 {
            c.ssim = Some(lt::ssim_loss(out, &batch.target, ssim)?);
        }
        if weights.lambda_base_l2 > 0.0 {
            c.l2 = Some(lt::l2(out, &batch.target)?);
        }
        if weights.lambda_d > 0.0 {
            let d = disc.ok_or_else(|| PeyeError::Precondition("D is active but no discriminator".into()))?;
            c.adv = Some(lt::lsgan_generator(&d.forward(out, Some(&batch.vision), true)?)?);
        }
        let t = total_loss(&c, weights)?;
        for term in &t.breakdown {
            *terms.entry(term.name).or_insert(0.0) += term.weighted;
        }
        per_stage.push(t.total.to_f64()?);
        total = Some(match total {
            None => t.total,
            Some(acc) => (acc + t.total)?,
        });
    }
    Ok(StepLoss {
        total: total.expect("at least one stage"),
        outputs,
        terms,
        per_stage,
    })
}

/// Per-epoch record in the run log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean weighted value per term.
    pub terms: BTreeMap<&'static str, f64>,
    pub total: f64,
    pub d_loss: Option<f64>,
    pub val_pcs: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: PEyeNetwork,
    pub calibration: Calibration,
    pub epochs: Vec<EpochLog>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.total)
    }

    /// Checkpoint selected for evaluation by `use_best_checkpoint`.
    pub fn evaluation_checkpoint(&self, cfg: &TrainConfig) -> Option<&Path> {
        if cfg.use_best_checkpoint {
            self.best_checkpoint.as_deref().or(self.final_checkpoint.as_deref())
        } else {
            self.final_checkpoint.as_deref()
        }
    }
}

/// Train/validation datasets for a run. Validation is the test split unless
/// `validation_subjects` carves a held-out set from the training subjects.
pub fn prepare_splits(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Dataset, Option<Dataset>)> {
    let train = dataset.subset(Split::Train);
    if cfg.validation_subjects == 0 {
        let test = dataset.subset(Split::Test);
        return Ok((train, (!test.records.is_empty()).then_some(test)));
    }
    let inner = assign_split(&train.subjects(), cfg.validation_subjects)?;
    let mut relabeled = train.clone();
    relabeled.split = inner;
    Ok((relabeled.subset(Split::Train), Some(relabeled.subset(Split::Test))))
}

/// Density fitted on the training records with the configured bin count.
pub fn fit_training_density(train: &Dataset, cfg: &TrainConfig) -> Result<PixelValueDensity> {
    fit_density(train.records.iter().map(|r| &r.pressure), cfg.density_bins)
}

fn non_finite(step: usize, terms: &BTreeMap<&'static str, f64>, batch: &Batch) -> PeyeError {
    let term = terms
        .iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(k, _)| k.to_string())
        .unwrap_or_else(|| "total".into());
    PeyeError::NonFiniteLoss {
        step,
        term,
        sample_ids: batch.ids.clone(),
    }
}

fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let names = ["pwrs", "phy", "ssim", "adv", "l2"];
    let mut w = report::csv_writer(path)?;
    let mut header = vec!["epoch", "lr", "steps"];
    header.extend(names);
    header.extend(["total", "d_loss", "val_pcs_efs_0.1", "seconds"]);
    report::write_row(&mut w, path, header.iter().map(|s| s.to_string()))?;
    for e in logs {
        let mut row = vec![e.epoch.to_string(), e.lr.to_string(), e.steps.to_string()];
        row.extend(names.iter().map(|n| report::fmt_opt(e.terms.get(n).copied())));
        row.push(e.total.to_string());
        row.push(report::fmt_opt(e.d_loss));
        row.push(report::fmt_opt(e.val_pcs));
        row.push(format!("{:.3}", e.seconds));
        report::write_row(&mut w, path, row)?;
    }
    w.flush().map_err(|e| PeyeError::io(path, e))
}

/// Runs the optimization. `run_dir`, when given, receives the config copy,
/// checkpoints and `train_log.csv`.
pub fn train(
    train_set: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
    density: Option<&PixelValueDensity>,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let weights = cfg.loss_weights();
    if train_set.records.is_empty() {
        return Err(invalid_input!("training split is empty"));
    }
    if weights.lambda_pwrs > 0.0 && density.is_none() {
        return Err(PeyeError::Precondition(format!(
            "{} needs a pixel-value density fitted on the training split",
            cfg.config_name
        )));
    }
    let device = Device::Cpu;
    let net_cfg = cfg.network_config(train_set);
    let net = PEyeNetwork::new(net_cfg, cfg.seed, &device)?;
    let disc = if weights.lambda_d > 0.0 {
        Some(Discriminator::new(
            cfg.discriminator_config(),
            train_set.modality.channels(),
            cfg.seed.wrapping_add(1),
            &device,
        )?)
    } else {
        None
    };
    let beta = BetaNormalizer::fit(train_set.records.iter().map(|r| &r.physique), cfg.beta_length)?;
    let calibration = Calibration {
        beta: beta.clone(),
        raw_peak: train_set.raw_peak,
        pixel_area: train_set.pixel_area,
    };
    let builder = BatchBuilder {
        input_height: cfg.input_height,
        input_width: cfg.input_width,
        beta,
        density: if weights.lambda_pwrs > 0.0 {
            density.map(|d| (d.clone(), cfg.weight_map_config()))
        } else {
            None
        },
        dtype: DType::F32,
        device: device.clone(),
    };
    let adam = |lr| ParamsAdamW {
        lr,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut g_opt = AdamW::new(net.store().trainable(), adam(cfg.lr))?;
    let mut d_opt = match &disc {
        Some(d) => Some(AdamW::new(d.store().trainable(), adam(cfg.lr))?),
        None => None,
    };
    let ckpt_dir = match run_dir {
        Some(dir) => {
            let c = dir.join("checkpoints");
            std::fs::create_dir_all(&c).map_err(|e| PeyeError::io(&c, e))?;
            cfg.save(&dir.join("config.txt"))?;
            Some(c)
        }
        None => None,
    };
    let ssim = cfg.ssim_config();
    let records: Vec<&SampleRecord> = train_set.records.iter().collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut best: Option<(f64, PathBuf)> = None;
    let mut final_checkpoint = None;
    'epochs: for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at_epoch(epoch);
        g_opt.set_learning_rate(lr);
        if let Some(o) = &mut d_opt {
            o.set_learning_rate(lr);
        }
        let order = epoch_order(records.len(), cfg.seed, epoch, cfg.shuffle);
        let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        let (mut total_sum, mut d_sum, mut steps) = (0.0, 0.0, 0usize);
        let mut stop = false;
        let result = for_each_batch(&records, &order, cfg.batch_size, cfg.workers, &builder, |batch| {
            let loss = generator_loss(&net, disc.as_ref(), &batch, &weights, train_set.pixel_area, &ssim)?;
            let total = loss.total.to_f64()?;
            if !total.is_finite() {
                return Err(non_finite(step, &loss.terms, &batch));
            }
            g_opt.backward_step(&loss.total)?;
            if let (Some(d), Some(opt)) = (&disc, &mut d_opt) {
                let fake = loss.outputs.last().expect("at least one stage").detach();
                let real_score = d.forward(&batch.target, Some(&batch.vision), true)?;
                let fake_score = d.forward(&fake, Some(&batch.vision), true)?;
                let d_loss = lt::lsgan_discriminator(&real_score, &fake_score)?.affine(weights.lambda_d, 0.0)?;
                let v = d_loss.to_f64()?;
                if !v.is_finite() {
                    return Err(non_finite(step, &BTreeMap::from([("discriminator", v)]), &batch));
                }
                opt.backward_step(&d_loss)?;
                d_sum += v;
            }
            for (k, v) in loss.terms {
                *sums.entry(k).or_insert(0.0) += v;
            }
            total_sum += total;
            steps += 1;
            step += 1;
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                stop = true;
                return Err(PeyeError::Precondition("step limit".into()));
            }
            Ok(())
        });
        match result {
            Ok(()) => {}
            Err(_) if stop => {}
            Err(e) => {
                if let (Some(dir), PeyeError::NonFiniteLoss { sample_ids, .. }) = (run_dir, &e) {
                    let dump = dir.join("non_finite_batch.txt");
                    std::fs::write(&dump, sample_ids.join("\n")).map_err(|e| PeyeError::io(&dump, e))?;
                }
                return Err(e);
            }
        }
        let n = steps.max(1) as f64;
        let val_pcs = match validation {
            Some(v) if !v.records.is_empty() => validation_pcs(&net, &calibration, v, cfg.batch_size)?,
            _ => None,
        };
        let log = EpochLog {
            epoch,
            lr,
            steps,
            terms: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            total: total_sum / n,
            d_loss: disc.as_ref().map(|_| d_sum / n),
            val_pcs,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{} lr {lr:.2e} loss {:.6} val PCS {}",
            cfg.epochs,
            log.total,
            report::fmt_opt(val_pcs)
        );
        logs.push(log);
        if let Some(dir) = &ckpt_dir {
            if let Some(pcs) = val_pcs {
                if best.as_ref().is_none_or(|(b, _)| pcs > *b) {
                    let p = dir.join("best.safetensors");
                    save_checkpoint(&p, &net, &calibration)?;
                    best = Some((pcs, p));
                }
            }
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("epoch_{epoch:03}.safetensors")), &net, &calibration)?;
            }
        }
        if stop {
            break 'epochs;
        }
    }
    if let Some(dir) = run_dir {
        write_epoch_log(&dir.join("train_log.csv"), &logs)?;
        let p = dir.join("checkpoints").join("final.safetensors");
        save_checkpoint(&p, &net, &calibration)?;
        final_checkpoint = Some(p);
    }
    Ok(TrainOutcome {
        net,
        calibration,
        epochs: logs,
        final_checkpoint,
        best_checkpoint: best.map(|(_, p)| p),
        steps: step,
    })
}

fn validation_pcs(net: &PEyeNetwork, cal: &Calibration, val: &Dataset, batch_size: usize) -> Result<Option<f64>> {
    let predictor = NetworkPredictor {
        net,
        calibration: cal,
        batch_size,
    };
    let preds = predictor.predict(&val.records.iter().collect::<Vec<_>>())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, r) in preds.iter().zip(&val.records) {
        if let Some(v) = crate::metrics::pcs_efs(p, r.pressure.grid(), HEADLINE_MASK_FRACTION, 0.1)? {
            sum += v;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Anything that maps records to predicted pressure grids.
pub trait Predictor {
    fn predict(&self, records: &[&SampleRecord]) -> Result<Vec<Grid>>;
}

/// Final-stage output of a network in inference mode.
pub struct NetworkPredictor<'a> {
    pub net: &'a PEyeNetwork,
    pub calibration: &'a Calibration,
    pub batch_size: usize,
}

impl NetworkPredictor<'_> {
    fn check_geometry(&self, rec: &SampleRecord) -> Result<()> {
        let cfg = self.net.config();
        if (rec.pressure.rows(), rec.pressure.cols()) != (cfg.pm_rows, cfg.pm_cols) {
            return Err(invalid_input!(
                "{}: pressure map {}x{} does not match the model's {}x{}",
                rec.id(),
                rec.pressure.rows(),
                rec.pressure.cols(),
                cfg.pm_rows,
                cfg.pm_cols
            ));
        }
        if rec.vision.modality() != cfg.modality {
            return Err(invalid_input!(
                "{}: {} image given to a {} model",
                rec.id(),
                rec.vision.modality(),
                cfg.modality
            ));
        }
        Ok(())
    }
}

impl Predictor for NetworkPredictor<'_> {
    fn predict(&self, records: &[&SampleRecord]) -> Result<Vec<Grid>> {
        for r in records {
            self.check_geometry(r)?;
        }
        let cfg = self.net.config();
        let builder = BatchBuilder {
            input_height: cfg.stage.input_height,
            input_width: cfg.stage.input_width,
            beta: self.calibration.beta.clone(),
            density: None,
            dtype: DType::F32,
            device: self.net.device().clone(),
        };
        let order: Vec<usize> = (0..records.len()).collect();
        let mut out = Vec::with_capacity(records.len());
        for_each_batch(records, &order, self.batch_size.max(1), 1, &builder, |batch| {
            let preds = self.net.forward(&batch.vision, &batch.beta, false)?;
            let last = preds.last().expect("at least one stage");
            let (b, _, m, n) = last.dims4()?;
            let values: Vec<f32> = last.flatten_all()?.to_vec1()?;
            for i in 0..b {
                let grid = Grid::new(
                    m,
                    n,
                    values[i * m * n..(i + 1) * m * n].iter().map(|&v| v as f64).collect(),
                )?;
                out.push(grid);
            }
            Ok(())
        })?;
        Ok(out)
    }
}

/// Predicts a single map for a vision image and a physique vector given in
/// physical units.
pub fn predict_one(
    net: &PEyeNetwork,
    calibration: &Calibration,
    vision: &VisionImage,
    physique: &PhysicalVector,
) -> Result<PressureMap> {
    let cfg = net.config();
    if physique.len() != cfg.beta_length && physique.len() != PhysicalVector::SLOT_NAMES.len() {
        return Err(invalid_input!(
            "physique vector has {} entries; the model takes {} (or the full {})",
            physique.len(),
            cfg.beta_length,
            PhysicalVector::SLOT_NAMES.len()
        ));
    }
    let rec = SampleRecord {
        subject_id: "input".into(),
        pose_id: "0".into(),
        posture: crate::types::Posture::Supine,
        vision: vision.clone(),
        pressure: PressureMap::new(Grid::filled(cfg.pm_rows, cfg.pm_cols, 0.0)?, calibration.raw_peak)?,
        physique: physique.clone(),
    };
    let predictor = NetworkPredictor {
        net,
        calibration,
        batch_size: 1,
    };
    let grid = predictor.predict(&[&rec])?.pop().expect("one prediction");
    PressureMap::from_prediction(grid, calibration.raw_peak)
}

/// Per-sample and aggregate metrics plus mean PCS curves per mask threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub samples: Vec<SampleMetrics>,
    pub summary: MetricsSummary,
    /// `(mask fraction, mean curve)`; `None` when no frame had an effective area.
    pub curves: Vec<(f64, Option<PcsCurve>)>,
}

pub fn evaluate(predictor: &dyn Predictor, records: &[&SampleRecord], ssim: &SsimConfig) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(invalid_input!("evaluation split is empty"));
    }
    let preds = predictor.predict(records)?;
    if preds.len() != records.len() {
        return Err(invalid_input!(
            "predictor returned {} maps for {} records",
            preds.len(),
            records.len()
        ));
    }
    let samples = preds
        .iter()
        .zip(records)
        .map(|(p, r)| SampleMetrics::compute(r.id(), p, r.pressure.grid(), ssim))
        .collect::<Result<Vec<_>>>()?;
    let eps = default_curve_epsilons();
    let curves = REPORT_MASK_FRACTIONS
        .iter()
        .map(|&frac| {
            let per_sample = preds
                .iter()
                .zip(records)
                .map(|(p, r)| pcs_curve(p, r.pressure.grid(), frac, &eps))
                .collect::<Result<Vec<_>>>()?;
            Ok((frac, PcsCurve::mean(per_sample.iter().flatten())?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        summary: MetricsSummary::from_samples(&samples)?,
        samples,
        curves,
    })
}

/// One row of the ablation comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub config: ConfigName,
    pub summary: MetricsSummary,
    pub run_dir: Option<PathBuf>,
}

/// Trains and evaluates each configuration in turn on the same splits.
pub fn run_ablation(
    dataset: &Dataset,
    base: &TrainConfig,
    configs: &[ConfigName],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let (train_set, validation) = prepare_splits(dataset, base)?;
    let test = dataset.subset(Split::Test);
    let test_records: Vec<&SampleRecord> = test.records.iter().collect();
    let density = fit_training_density(&train_set, base)?;
    let mut rows = Vec::with_capacity(configs.len());
    for &name in configs {
        let cfg = TrainConfig {
            config_name: name,
            ..base.clone()
        };
        let run_dir = out_dir.map(|d| d.join(name.as_str()));
        if let Some(d) = &run_dir {
            std::fs::create_dir_all(d).map_err(|e| PeyeError::io(d, e))?;
        }
        log::info!("ablation: training {name}");
        let outcome = train(
            &train_set,
            validation.as_ref(),
            &cfg,
            Some(&density),
            run_dir.as_deref(),
        )?;
        let eval = match outcome.evaluation_checkpoint(&cfg) {
            Some(path) if cfg.use_best_checkpoint => {
                let (net, cal) = crate::model::load_checkpoint(path, &Device::Cpu)?;
                evaluate_network(&net, &cal, &test_records, &cfg)?
            }
            _ => evaluate_network(&outcome.net, &outcome.calibration, &test_records, &cfg)?,
        };
        if let Some(d) = &run_dir {
            report::write_evaluation(d, &eval, false)?;
        }
        rows.push(AblationRow {
            config: name,
            summary: eval.summary,
            run_dir,
        });
    }
    if let Some(d) = out_dir {
        report::write_ablation_table(&d.join("ablation.csv"), &rows)?;
    }
    Ok(rows)
}

pub fn evaluate_network(
    net: &PEyeNetwork,
    calibration: &Calibration,
    records: &[&SampleRecord],
    cfg: &TrainConfig,
) -> Result<Evaluation> {
    let predictor = NetworkPredictor {
        net,
        calibration,
        batch_size: cfg.batch_size,
    };
    evaluate(&predictor, records, &cfg.ssim_config())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, RenderConfig, SynthDatasetConfig};

    struct Oracle;

    impl Predictor for Oracle {
        fn predict(&self, records: &[&SampleRecord]) -> Result<Vec<Grid>> {
            Ok(records.iter().map(|r| r.pressure.grid().clone()).collect())
        }
    }

    fn tiny_dataset(subjects: usize, poses: usize, test_subjects: usize) -> Dataset {
        generate_dataset(&SynthDatasetConfig {
            subjects,
            poses_per_subject: poses,
            test_subjects,
            seed: 1,
            render: RenderConfig {
                image_height: 64,
                image_width: 32,
                ..RenderConfig::default()
            },
        })
        .unwrap()
    }

    fn tiny_config(name: ConfigName) -> TrainConfig {
        TrainConfig {
            config_name: name,
            epochs: 3,
            decay_epochs: 1,
            batch_size: 4,
            stages: 1,
            input_height: 64,
            input_width: 32,
            base_channels: 4,
            depth: 2,
            code_channels: 4,
            disc_base_channels: 4,
            lr: 0.002,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_weights_per_config() {
        let w = resolve_loss_weights("pwrs-phy").unwrap();
        assert_eq!((w.lambda_pwrs, w.lambda_phy), (100.0, 1e-6));
        assert_eq!((w.lambda_ssim, w.lambda_d, w.lambda_base_l2), (0.0, 0.0, 0.0));
        let b = resolve_loss_weights("base").unwrap();
        assert_eq!(
            b,
            LossWeights {
                lambda_base_l2: 100.0,
                ..LossWeights::ZERO
            }
        );
        let all = resolve_loss_weights("pwrs-phy-ssim-D").unwrap();
        assert_eq!(
            all,
            LossWeights {
                lambda_pwrs: 100.0,
                lambda_phy: 1e-6,
                lambda_ssim: 10.0,
                lambda_d: 1.0,
                lambda_base_l2: 0.0
            }
        );
        assert!(matches!(
            resolve_loss_weights("pwrs-l1"),
            Err(PeyeError::InvalidConfig(_))
        ));
        for c in ConfigName::ALL {
            assert_eq!(c.as_str().parse::<ConfigName>().unwrap(), c);
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at_epoch(1), 0.0002);
        assert_eq!(cfg.lr_at_epoch(25), 0.0002);
        let want = [0.8, 0.6, 0.4, 0.2, 0.0];
        for (e, f) in (26..=30).zip(want) {
            assert!((cfg.lr_at_epoch(e) - 0.0002 * f).abs() < 1e-18, "epoch {e}");
        }
    }

    #[test]
    fn config_text_round_trip_and_validation() {
        let mut cfg = TrainConfig::default();
        cfg.set("config_name", "pwrs-phy-D").unwrap();
        cfg.set("lr", "0.001").unwrap();
        cfg.set("disc_conditional", "false").unwrap();
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(TrainConfig::KEYS.len(), cfg.to_text().lines().count());
        assert!(TrainConfig::from_text("epochs = 3\ndecay_epochs = 5\n").is_err());
        assert!(TrainConfig::from_text("lr = 0\n").is_err());
        assert!(TrainConfig::from_text("batch_size = 0\n").is_err());
        assert!(TrainConfig::from_text("colour = blue\n").is_err());
        assert_eq!(
            TrainConfig::from_text("# comment\n\nepochs = 7 # trailing\n")
                .unwrap()
                .epochs,
            7
        );
    }

    #[test]
    fn pwrs_without_density_is_a_precondition_error() {
        let ds = tiny_dataset(2, 2, 0);
        let err = train(&ds, None, &tiny_config(ConfigName::Pwrs), None, None).unwrap_err();
        assert!(matches!(err, PeyeError::Precondition(_)));
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let ds = tiny_dataset(2, 2, 1);
        let empty = ds.take(Split::Train, 0);
        assert!(train(&empty, None, &tiny_config(ConfigName::Base), None, None).is_err());
    }

    #[test]
    fn oracle_predictor_scores_ideally() {
        let ds = tiny_dataset(2, 3, 0);
        let recs: Vec<_> = ds.records.iter().collect();
        let eval = evaluate(&Oracle, &recs, &SsimConfig::default()).unwrap();
        for frac in REPORT_MASK_FRACTIONS {
            assert_eq!(eval.summary.mse_efs(frac), Some(0.0));
            for eps in crate::metrics::REPORT_EPSILONS {
                assert_eq!(eval.summary.pcs_at(frac, eps), Some(1.0));
            }
        }
        assert!(eval.summary.psnr.is_infinite());
        assert!((eval.summary.ssim - 1.0).abs() < 1e-9);
        for (_, c) in &eval.curves {
            assert!(c.as_ref().unwrap().pcs().iter().all(|&v| v == 1.0));
        }
        assert!(evaluate(&Oracle, &[], &SsimConfig::default()).is_err());
    }

    #[test]
    fn every_parameter_group_gets_gradient() {
        let ds = tiny_dataset(2, 2, 0);
        let mut cfg = tiny_config(ConfigName::PwrsPhy);
        cfg.stages = 2;
        let net = PEyeNetwork::new(cfg.network_config(&ds), 3, &Device::Cpu).unwrap();
        let density = fit_training_density(&ds, &cfg).unwrap();
        let builder = BatchBuilder {
            input_height: 64,
            input_width: 32,
            beta: BetaNormalizer::fit(ds.records.iter().map(|r| &r.physique), 10).unwrap(),
            density: Some((density, cfg.weight_map_config())),
            dtype: DType::F32,
            device: Device::Cpu,
        };
        let recs: Vec<_> = ds.records.iter().collect();
        let batch = builder.build(&recs).unwrap();
        let loss = generator_loss(
            &net,
            None,
            &batch,
            &cfg.loss_weights(),
            ds.pixel_area,
            &cfg.ssim_config(),
        )
        .unwrap();
        assert_eq!(loss.per_stage.len(), 2);
        assert!(loss.per_stage.iter().all(|v| v.is_finite()));
        let grads = loss.total.backward().unwrap();
        for prefix in [
            "stem.",
            "stage0.vision.",
            "stage0.physical.",
            "stage0.decoder.",
            "stage1.vision.",
            "stage1.physical.",
            "stage1.decoder.",
        ] {
            let norm: f32 = net
                .group(prefix)
                .iter()
                .map(|(_, v)| {
                    grads
                        .get(v.as_tensor())
                        .map(|g| g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap())
                        .unwrap_or(0.0)
                })
                .sum();
            assert!(norm > 0.0, "{prefix}");
        }
    }

    #[test]
    fn overfit_loss_trends_down_and_is_deterministic() {
        let ds = tiny_dataset(2, 3, 0);
        let mut cfg = tiny_config(ConfigName::PwrsPhy);
        cfg.epochs = 6;
        cfg.decay_epochs = 0;
        cfg.batch_size = 6;
        let density = fit_training_density(&ds, &cfg).unwrap();
        let a = train(&ds, None, &cfg, Some(&density), None).unwrap();
        let losses: Vec<f64> = a.epochs.iter().map(|e| e.total).collect();
        for w in losses[..5].windows(2) {
            assert!(w[1] <= w[0] * 1.1, "{losses:?}");
        }
        assert!(losses[4] < losses[0], "{losses:?}");
        let b = train(&ds, None, &cfg, Some(&density), None).unwrap();
        assert!((a.epochs[0].total - b.epochs[0].total).abs() <= 1e-6);
        assert_eq!(a.final_loss(), b.final_loss());
    }

    #[test]
    fn adversarial_run_writes_run_directory() {
        let ds = tiny_dataset(3, 2, 1);
        let mut cfg = tiny_config(ConfigName::PwrsPhySsimD);
        cfg.epochs = 2;
        cfg.ssim_window = 7;
        cfg.checkpoint_every = 1;
        let (tr, val) = prepare_splits(&ds, &cfg).unwrap();
        let density = fit_training_density(&tr, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tr, val.as_ref(), &cfg, Some(&density), Some(dir.path())).unwrap();
        assert!(out.epochs.iter().all(|e| e.d_loss.is_some() && e.val_pcs.is_some()));
        for f in [
            "config.txt",
            "train_log.csv",
            "checkpoints/final.safetensors",
            "checkpoints/epoch_001.safetensors",
            "checkpoints/best.safetensors",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let (net, cal) = crate::model::load_checkpoint(out.final_checkpoint.as_ref().unwrap(), &Device::Cpu).unwrap();
        let recs: Vec<_> = tr.records.iter().collect();
        let a = NetworkPredictor {
            net: &net,
            calibration: &cal,
            batch_size: 2,
        }
        .predict(&recs)
        .unwrap();
        let b = NetworkPredictor {
            net: &out.net,
            calibration: &out.calibration,
            batch_size: 3,
        }
        .predict(&recs)
        .unwrap();
        assert_eq!(a, b);
        let logged = TrainConfig::load(&dir.path().join("config.txt")).unwrap();
        assert_eq!(logged, cfg);
    }

    #[test]
    fn step_limit_and_validation_holdout() {
        let ds = tiny_dataset(4, 2, 1);
        let mut cfg = tiny_config(ConfigName::Base);
        cfg.max_steps = 2;
        cfg.batch_size = 1;
        cfg.validation_subjects = 1;
        let (tr, val) = prepare_splits(&ds, &cfg).unwrap();
        assert_eq!(tr.subjects().len(), 2);
        assert_eq!(val.as_ref().unwrap().subjects().len(), 1);
        let out = train(&tr, val.as_ref(), &cfg, None, None).unwrap();
        assert_eq!(out.steps, 2);
        assert_eq!(out.epochs.len(), 1);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let ds = tiny_dataset(2, 1, 0);
        let cfg = tiny_config(ConfigName::Base);
        let net = PEyeNetwork::new(cfg.network_config(&ds), 0, &Device::Cpu).unwrap();
        let cal = Calibration {
            beta: BetaNormalizer::fit(ds.records.iter().map(|r| &r.physique), 10).unwrap(),
            raw_peak: 100.0,
            pixel_area: ds.pixel_area,
        };
        let mut rec = ds.records[0].clone();
        rec.pressure = PressureMap::new(Grid::filled(32, 32, 0.1).unwrap(), 100.0).unwrap();
        let p = NetworkPredictor {
            net: &net,
            calibration: &cal,
            batch_size: 1,
        };
        assert!(p.predict(&[&rec]).is_err());
        let short = PhysicalVector::new(vec![70.0, 170.0, 1.0]).unwrap();
        assert!(predict_one(&net, &cal, &ds.records[0].vision, &short).is_err());
        let pm = predict_one(&net, &cal, &ds.records[0].vision, &ds.records[0].physique).unwrap();
        assert_eq!((pm.rows(), pm.cols()), (64, 32));
    }
}
