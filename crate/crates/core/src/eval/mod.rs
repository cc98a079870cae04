//! PSNR harness, geometric self-ensemble, cost accounting and filter
//! redundancy analysis.

mod cost;
mod counted;
mod pca;

use serde::{Deserialize, Serialize};

use crate::grid;
use crate::imaging::{self, apply_dihedral, invert_dihedral, DihedralTransform, Image, ImageError};
use crate::model::{ModelError, SrModel};
use crate::tensor::{Tensor, TensorError};

pub use cost::{count_mults, cost_csv, subpixel_dominated, CostQuery, CostReport, HeadKind, StageCost};
pub use counted::{count_multiplies, Counted};
pub use pca::{centered_spectrum, filter_pca, symmetric_eigenvalues, EigenReport};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("scale must be finite and >= 1, got {0}")]
    Scale(f64),
    #[error("{0}")]
    Invalid(String),
}

/// Anything that maps an LR image to an upscaled one.
pub trait Upscaler {
    fn upscale(&self, lr: &Image, s: f64) -> Result<Image, EvalError>;
}

impl Upscaler for SrModel {
    fn upscale(&self, lr: &Image, s: f64) -> Result<Image, EvalError> {
        Ok(SrModel::upscale(self, lr, s, s)?)
    }
}

/// Plain bicubic interpolation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Bicubic;

impl Upscaler for Bicubic {
    fn upscale(&self, lr: &Image, s: f64) -> Result<Image, EvalError> {
        Ok(imaging::bicubic_resize(lr, s, s)?)
    }
}

/// Wraps an upscaler with the 8-transform geometric self-ensemble.
#[derive(Clone, Copy, Debug)]
pub struct GeoEnsemble<U>(pub U);

impl<U: Upscaler> Upscaler for GeoEnsemble<U> {
    fn upscale(&self, lr: &Image, s: f64) -> Result<Image, EvalError> {
        geo_ensemble(&self.0, lr, s)
    }
}

/// Mean of `invert(model(apply(image, t)), t)` over the dihedral group.
pub fn geo_ensemble(model: &impl Upscaler, image: &Image, s: f64) -> Result<Image, EvalError> {
    let mut acc: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for t in DihedralTransform::all() {
        let out = invert_dihedral(&model.upscale(&apply_dihedral(image, t), s)?, t);
        match &mut acc {
            None => {
                shape = out.tensor().shape().to_vec();
                acc = Some(out.tensor().data().iter().map(|&v| v as f64).collect());
            }
            Some(a) => {
                if out.tensor().shape() != shape.as_slice() {
                    return Err(EvalError::Invalid(format!(
                        "transform {} gave shape {:?}, expected {shape:?}",
                        t.index(),
                        out.tensor().shape()
                    )));
                }
                a.iter_mut().zip(out.tensor().data()).for_each(|(a, &v)| *a += v as f64);
            }
        }
    }
    let data: Vec<f64> = acc.expect("eight transforms").into_iter().map(|v| v / 8.0).collect();
    Ok(Image::new(Tensor::from_f64(&shape, &data)?)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    #[default]
    Rgb,
    /// BT.601 luma.
    Y,
}

impl std::str::FromStr for ColorSpace {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Self::Rgb),
            "y" => Ok(Self::Y),
            other => Err(EvalError::Invalid(format!("unknown color space {other:?}, expected rgb or y"))),
        }
    }
}

/// PSNR of `sr` against the top-left `sr`-sized window of `hr`.
pub fn psnr_in(hr: &Image, sr: &Image, space: ColorSpace) -> Result<f64, EvalError> {
    if sr.height() > hr.height() || sr.width() > hr.width() {
        return Err(EvalError::Invalid(format!(
            "output {}x{} is larger than the reference {}x{}",
            sr.height(),
            sr.width(),
            hr.height(),
            hr.width()
        )));
    }
    let hr = hr.crop(0, 0, sr.height(), sr.width())?;
    let sr = sr.clamped();
    Ok(match space {
        ColorSpace::Rgb => imaging::psnr(hr.tensor(), sr.tensor())?,
        ColorSpace::Y => imaging::psnr(&imaging::rgb_to_y(&hr), &imaging::rgb_to_y(&sr))?,
    })
}

/// HR image cropped so an integer scale divides it, plus its bicubic LR.
/// Fractional scales keep the full HR frame.
pub fn degrade(hr: &Image, s: f64) -> Result<(Image, Image), EvalError> {
    if !(s.is_finite() && s >= 1.0) {
        return Err(EvalError::Scale(s));
    }
    let hr = if s.fract() == 0.0 {
        let k = s as usize;
        hr.crop(0, 0, hr.height() / k * k, hr.width() / k * k)?
    } else {
        hr.clone()
    };
    let lr = imaging::bicubic_downscale(&hr, s)?;
    Ok((hr, lr))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsnrRow {
    pub image: String,
    pub scale: f64,
    pub psnr: f64,
}

/// Per-image PSNR plus per-scale means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PsnrTable {
    pub rows: Vec<PsnrRow>,
}

impl PsnrTable {
    pub fn scales(&self) -> Vec<f64> {
        let mut v: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !v.contains(&r.scale) {
                v.push(r.scale);
            }
        }
        v
    }

    pub fn mean(&self, scale: f64) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.scale == scale).map(|r| r.psnr).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// `image,scale,psnr` with a `mean` row closing each scale.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,scale,psnr\n");
        for s in self.scales() {
            for r in self.rows.iter().filter(|r| r.scale == s) {
                out.push_str(&format!("{},{},{}\n", r.image, r.scale, imaging::format_psnr(r.psnr)));
            }
            let m = self.mean(s).expect("scale has rows");
            out.push_str(&format!("mean,{s},{}\n", imaging::format_psnr(m)));
        }
        out
    }
}

/// PSNR over explicit `(name, hr, lr)` triples at one scale.
pub fn psnr_pairs(
    model: &impl Upscaler,
    pairs: &[(String, Image, Image)],
    s: f64,
    space: ColorSpace,
) -> Result<PsnrTable, EvalError> {
    let mut rows = Vec::with_capacity(pairs.len());
    for (name, hr, lr) in pairs {
        let expect = (grid::scaled_len(lr.height(), s), grid::scaled_len(lr.width(), s));
        let sr = model.upscale(lr, s)?;
        if (sr.height(), sr.width()) != expect {
            return Err(EvalError::Invalid(format!(
                "{name}: upscaler returned {}x{}, expected {}x{}",
                sr.height(),
                sr.width(),
                expect.0,
                expect.1
            )));
        }
        rows.push(PsnrRow {
            image: name.clone(),
            scale: s,
            psnr: psnr_in(hr, &sr, space)?,
        });
    }
    Ok(PsnrTable { rows })
}

/// Bicubic-degrades every HR image at every scale and scores `model`.
pub fn psnr_eval(
    model: &impl Upscaler,
    images: &[(String, Image)],
    scales: &[f64],
    space: ColorSpace,
) -> Result<PsnrTable, EvalError> {
    let mut table = PsnrTable::default();
    for &s in scales {
        let pairs = images
            .iter()
            .map(|(n, img)| degrade(img, s).map(|(hr, lr)| (n.clone(), hr, lr)))
            .collect::<Result<Vec<_>, _>>()?;
        table.rows.extend(psnr_pairs(model, &pairs, s, space)?.rows);
    }
    Ok(table)
}
