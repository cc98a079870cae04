//! Patch-based L1 training with Adam and a step learning-rate schedule.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::imaging::{self, apply_dihedral, CropPair, DihedralTransform, Image, ImageError};
use crate::model::{Head, ModelError, SrModel};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Tape, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// LR patch side.
    pub crop: usize,
    pub lr: f64,
    /// Epochs after which the learning rate is halved.
    pub milestones: Vec<usize>,
    #[serde(default)]
    pub adam: AdamConfig,
    pub scale_min: f64,
    pub scale_max: f64,
    pub crops_per_image: usize,
    /// Random dihedral transform of each source image before cropping.
    #[serde(default = "yes")]
    pub augment: bool,
    /// Evaluate held-out PSNR every `eval_every` epochs (and after the last).
    /// Zero disables evaluation.
    #[serde(default = "one")]
    pub eval_every: usize,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch: 16,
            crop: 48,
            lr: 1e-4,
            milestones: vec![500, 800, 900, 950],
            adam: AdamConfig::default(),
            scale_min: 1.0,
            scale_max: 4.0,
            crops_per_image: 20,
            augment: true,
            eval_every: 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite value at epoch {epoch}, step {step}: {source}")]
    NonFinite {
        epoch: usize,
        step: usize,
        #[source]
        source: TensorError,
    },
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch == 0 || self.crop == 0 || self.crops_per_image == 0 {
            return bad("batch, crop and crops_per_image must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing");
        }
        if !(self.scale_min.is_finite() && self.scale_max.is_finite()) || self.scale_min < 1.0 || self.scale_max < self.scale_min {
            return bad("scale range must satisfy 1 <= scale_min <= scale_max");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam needs beta1, beta2 in [0, 1) and eps > 0");
        }
        Ok(())
    }

    /// Learning rate after `epoch` completed epochs: halved once per
    /// milestone `<= epoch`.
    pub fn lr_after(&self, epoch: usize) -> f64 {
        let halvings = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * 0.5f64.powi(halvings as i32)
    }
}

/// In-memory HR images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn from_images(images: Vec<Image>) -> Result<Self, TrainError> {
        if images.is_empty() {
            return Err(TrainError::Dataset("no images".into()));
        }
        let names = (0..images.len()).map(|i| format!("image_{i:04}")).collect();
        Ok(Self { names, images })
    }

    /// Every `.png` in `dir`, sorted by file name.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, TrainError> {
        let dir = dir.as_ref();
        let entries = std::fs::read_dir(dir).map_err(|e| TrainError::Dataset(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(TrainError::Dataset(format!("no PNG files in {}", dir.display())));
        }
        let mut names = Vec::new();
        let mut images = Vec::new();
        for p in paths {
            images.push(imaging::load_png(&p)?);
            names.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
        Ok(Self { names, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Fails if some image cannot supply a crop pair at the largest
    /// training scale. Rotations are covered since crops are square.
    pub fn check_crops(&self, cfg: &TrainConfig) -> Result<(), TrainError> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        for (name, img) in self.names.iter().zip(&self.images) {
            for s in [cfg.scale_min, cfg.scale_max] {
                imaging::random_crop_pair(img, s, cfg.crop, &mut rng)
                    .map_err(|e| TrainError::Dataset(format!("{name}: {e}")))?;
            }
        }
        Ok(())
    }
}

/// One training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub pair: CropPair,
    pub coords: Vec<(f64, f64)>,
}

/// Draws one crop pair per listed image, each with its own scale.
pub fn sample_batch(
    dataset: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>, TrainError> {
    indices
        .iter()
        .map(|&i| {
            let s = if cfg.scale_max > cfg.scale_min {
                rng.random_range(cfg.scale_min..=cfg.scale_max)
            } else {
                cfg.scale_min
            };
            let src = &dataset.images[i];
            let pair = if cfg.augment {
                let t = DihedralTransform::new(rng.random_range(0..8u8)).expect("index < 8");
                imaging::random_crop_pair(&apply_dihedral(src, t), s, cfg.crop, rng)
            } else {
                imaging::random_crop_pair(src, s, cfg.crop, rng)
            }
            .map_err(|e| TrainError::Dataset(format!("{}: {e}", dataset.names[i])))?;
            let coords = pair.target_coords();
            Ok(Sample { pair, coords })
        })
        .collect()
}

/// Mean L1 over a batch, recorded on `tape`.
pub fn batch_loss(model: &SrModel, tape: &mut Tape<f32>, batch: &[Sample]) -> Result<Var, ModelError> {
    let mut total = None;
    for s in batch {
        let lr = tape.constant(s.pair.lr.tensor().clone());
        let target = tape.constant(s.pair.hr.tensor().clone());
        let out_shape = [s.pair.hr.height(), s.pair.hr.width()];
        let pred = model
            .arch
            .predict_points(tape, &model.params, &lr, &s.coords, out_shape, s.pair.scale)?;
        let l = tape.l1_loss(&pred, &target)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(&t, &l)?,
        });
    }
    let total = total.ok_or_else(|| TensorError::InvalidArgument {
        op: "batch_loss",
        msg: "empty batch".into(),
    })?;
    Ok(tape.scale(&total, 1.0 / batch.len() as f64)?)
}

/// Held-out PSNR at the standard scales, `None` where the head cannot decode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalScores {
    pub x2: Option<f64>,
    pub x3: Option<f64>,
    pub x4: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_l1: f64,
    pub eval: Option<EvalScores>,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_l1,eval_psnr_x2,eval_psnr_x3,eval_psnr_x4";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(imaging::format_psnr).unwrap_or_default();
        let e = self.eval.clone().unwrap_or_default();
        format!(
            "{},{},{:.6},{},{},{}",
            self.epoch,
            self.lr,
            self.train_l1,
            f(e.x2),
            f(e.x3),
            f(e.x4)
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Mean full-frame RGB PSNR of `model` at integer scale `s`: each HR image
/// is cropped to a multiple of `s`, bicubic-downscaled, and upscaled back.
pub fn eval_psnr(model: &SrModel, data: &Dataset, s: usize) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for img in &data.images {
        let (hr, lr) = degrade(img, s)?;
        let sr = model.upscale(&lr, s as f64, s as f64)?.clamped();
        total += imaging::psnr(hr.tensor(), sr.tensor())?;
    }
    Ok(total / data.len() as f64)
}

/// Mean PSNR of plain bicubic upscaling under the same protocol as [`eval_psnr`].
pub fn bicubic_psnr(data: &Dataset, s: usize) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for img in &data.images {
        let (hr, lr) = degrade(img, s)?;
        let up = imaging::bicubic_resize(&lr, s as f64, s as f64)?.clamped();
        total += imaging::psnr(hr.tensor(), up.tensor())?;
    }
    Ok(total / data.len() as f64)
}

/// `(hr cropped to a multiple of s, bicubic LR)`.
pub fn degrade(img: &Image, s: usize) -> Result<(Image, Image), TrainError> {
    let (h, w) = ((img.height() / s) * s, (img.width() / s) * s);
    let hr = img.crop(0, 0, h, w)?;
    let lr = imaging::bicubic_downscale(&hr, s as f64)?;
    Ok((hr, lr))
}

fn evaluate(model: &SrModel, data: &Dataset) -> Result<EvalScores, TrainError> {
    let at = |s: usize| -> Result<Option<f64>, TrainError> {
        match model.arch.fixed_scale() {
            Some(f) if f != s => Ok(None),
            _ => eval_psnr(model, data, s).map(Some),
        }
    };
    Ok(EvalScores {
        x2: at(2)?,
        x3: at(3)?,
        x4: at(4)?,
    })
}

/// Result of a run: per-epoch metrics and the optimizer state.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub adam: AdamState<f32>,
}

/// Trains `model` in place. `on_epoch` sees each epoch's metrics as they
/// are produced.
pub fn train(
    model: &mut SrModel,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Dataset("no training images".into()));
    }
    data.check_crops(cfg)?;
    if let Some(fixed) = model.arch.fixed_scale() {
        if cfg.scale_min != fixed as f64 || cfg.scale_max != fixed as f64 {
            return Err(TrainError::Config(format!(
                "fixed-scale head needs scale_min = scale_max = {fixed}"
            )));
        }
        if matches!(model.arch.head, Head::Instantiated(_)) {
            return Err(TrainError::Config("instantiated heads are inference-only".into()));
        }
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut adam = AdamState::new(&model.params);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_after(epoch - 1);
        let mut order: Vec<usize> = (0..data.len()).flat_map(|i| std::iter::repeat_n(i, cfg.crops_per_image)).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch = sample_batch(data, chunk, cfg, &mut rng)?;
            let nonfinite = |source: TensorError| TrainError::NonFinite { epoch, step, source };
            let mut tape = Tape::new();
            let loss = batch_loss(model, &mut tape, &batch).map_err(|e| match e {
                ModelError::Tensor(t @ TensorError::NonFinite { .. }) => nonfinite(t),
                other => other.into(),
            })?;
            let value = tape.value(&loss).item()? as f64;
            if !value.is_finite() {
                return Err(nonfinite(TensorError::NonFinite { op: "loss" }));
            }
            model.params.zero_grad();
            tape.backward(loss, &mut model.params).map_err(nonfinite)?;
            adam_step(&mut model.params, &mut adam, lr, &cfg.adam)?;
            if !model.params.iter().all(|p| p.value.all_finite()) {
                return Err(nonfinite(TensorError::NonFinite { op: "adam_step" }));
            }
            loss_sum += value;
            steps += 1;
        }
        let eval_now = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let scores = match (eval, eval_now) {
            (Some(d), true) => Some(evaluate(model, d)?),
            _ => None,
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_l1: loss_sum / steps.max(1) as f64,
            eval: scores,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainReport { metrics, adam })
}

/// Convenience for a loss value of one batch without recording gradients.
pub fn eval_batch_loss(model: &SrModel, batch: &[Sample]) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let l = batch_loss(model, &mut tape, batch)?;
    Ok(tape.value(&l).item()? as f64)
}
