//! Closed-form multiply counts and peak live-element estimates per head.
//!
//! Only multiplications are counted; additions, ReLUs and layout ops are free.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::cuf::{CufConfig, HIDDEN_LAYERS};
use crate::encoder::EncoderConfig;
use crate::grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    CufInstantiated,
    CufContinuous,
    Subpixel,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::CufInstantiated => "cuf_instantiated",
            Self::CufContinuous => "cuf_continuous",
            Self::Subpixel => "subpixel",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "cuf_instantiated" => Ok(Self::CufInstantiated),
            "cuf_continuous" | "cuf" => Ok(Self::CufContinuous),
            "subpixel" => Ok(Self::Subpixel),
            _ => Err(EvalError::Invalid(format!(
                "unknown head kind {s:?}, expected cuf_instantiated, cuf_continuous or subpixel"
            ))),
        }
    }
}

/// What to cost. `height × width` is the LR input; the output is
/// `⌊s·H⌋ × ⌊s·W⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostQuery {
    pub head: HeadKind,
    pub height: usize,
    pub width: usize,
    pub scale: f64,
    pub channels: usize,
    pub kernel: usize,
    /// Post-shuffle channels of the sub-pixel head.
    pub n_out: usize,
    /// Kernel field shape for the continuous head; its `kernel` is ignored.
    pub field: CufConfig,
    /// Adds an encoder stage when present.
    pub encoder: Option<EncoderConfig>,
}

impl CostQuery {
    pub fn new(head: HeadKind, height: usize, width: usize, scale: f64, channels: usize, kernel: usize) -> Self {
        Self {
            head,
            height,
            width,
            scale,
            channels,
            kernel,
            n_out: channels,
            field: CufConfig::default(),
            encoder: None,
        }
    }

    fn validate(&self) -> Result<(), EvalError> {
        if !(self.scale.is_finite() && self.scale >= 1.0) {
            return Err(EvalError::Scale(self.scale));
        }
        if self.head != HeadKind::CufContinuous && self.scale.fract() != 0.0 {
            return Err(EvalError::Invalid(format!(
                "{} needs an integer scale, got {}",
                self.head.name(),
                self.scale
            )));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.n_out == 0 {
            return Err(EvalError::Invalid("sizes and channel counts must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(EvalError::Invalid(format!("kernel must be odd, got {}", self.kernel)));
        }
        if let Some(e) = &self.encoder {
            if e.channels != self.channels {
                return Err(EvalError::Invalid(format!(
                    "encoder width {} differs from head width {}",
                    e.channels, self.channels
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageCost {
    pub stage: &'static str,
    pub mults: u64,
    /// Largest number of live intermediate elements while the stage runs.
    pub peak_elems: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub query: CostQuery,
    pub out_height: usize,
    pub out_width: usize,
    /// Distinct `(δy, δx)` pairs queried by the continuous head.
    pub unique_offsets: Option<u64>,
    pub stages: Vec<StageCost>,
    pub total_mults: u64,
    pub peak_elems: u64,
}

impl CostReport {
    pub fn stage(&self, name: &str) -> Option<&StageCost> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn mults(&self, name: &str) -> u64 {
        self.stage(name).map_or(0, |s| s.mults)
    }

    pub fn output_pixels(&self) -> u64 {
        (self.out_height * self.out_width) as u64
    }
}

/// `stage,mults,peak_elems` rows followed by a `total` row.
pub fn cost_csv(report: &CostReport) -> String {
    let mut out = String::from("stage,mults,peak_elems\n");
    for s in &report.stages {
        out.push_str(&format!("{},{},{}\n", s.stage, s.mults, s.peak_elems));
    }
    out.push_str(&format!("total,{},{}\n", report.total_mults, report.peak_elems));
    out
}

/// Whether a depthwise-plus-pointwise layer needs fewer multiplies than a
/// dense `K×K` convolution: `K² + N_in + N_out < N_out·K²`.
pub fn subpixel_dominated(k: usize, n_in: usize, n_out: usize) -> bool {
    k * k + n_in + n_out < n_out * k * k
}

/// Straight-line liveness tracker.
struct Live {
    cur: u64,
    peak: u64,
    stage_peak: u64,
}

impl Live {
    fn new(initial: u64) -> Self {
        Self {
            cur: initial,
            peak: initial,
            stage_peak: initial,
        }
    }

    fn alloc(&mut self, n: u64) {
        self.cur += n;
        self.peak = self.peak.max(self.cur);
        self.stage_peak = self.stage_peak.max(self.cur);
    }

    fn free(&mut self, n: u64) {
        self.cur -= n;
    }

    /// `alloc(n)` then `free(input)`: an op replacing its input.
    fn replace(&mut self, input: u64, n: u64) {
        self.alloc(n);
        self.free(input);
    }

    fn close(&mut self, stage: &'static str, mults: u64, out: &mut Vec<StageCost>) {
        out.push(StageCost {
            stage,
            mults,
            peak_elems: self.stage_peak,
        });
        self.stage_peak = self.cur;
    }
}

fn unique_offsets(len: usize, s: f64) -> u64 {
    let keys: HashSet<i64> = (0..len)
        .map(|y| grid::offset_key(grid::source_and_offset(y as f64, s).1))
        .collect();
    keys.len() as u64
}

/// Exact per-stage multiply counts for one forward pass.
pub fn count_mults(q: &CostQuery) -> Result<CostReport, EvalError> {
    q.validate()?;
    let (h, w) = (q.height as u64, q.width as u64);
    let (oh, ow) = (grid::scaled_len(q.height, q.scale), grid::scaled_len(q.width, q.scale));
    let p = (oh * ow) as u64;
    let hw = h * w;
    let c = q.channels as u64;
    let kk = (q.kernel * q.kernel) as u64;
    let mut stages = Vec::new();
    let mut unique = None;

    let mut live = Live::new(0);
    match q.encoder {
        Some(e) => {
            let ek = (e.kernel * e.kernel) as u64;
            let b = e.blocks as u64;
            let m = hw * c;
            let mults = hw * ek * (3 * c + 2 * b * c * c + c * c);
            live.alloc(m);
            let mut x_is_head = true;
            for _ in 0..b {
                live.alloc(m);
                live.replace(m, m);
                live.replace(m, m);
                live.alloc(m);
                live.free(m);
                if !x_is_head {
                    live.free(m);
                }
                x_is_head = false;
            }
            live.alloc(m);
            live.alloc(m);
            live.free(m);
            live.free(m);
            if !x_is_head {
                live.free(m);
            }
            live.close("encoder", mults, &mut stages);
        }
        None => {
            live = Live::new(hw * c);
        }
    }

    match q.head {
        HeadKind::CufContinuous => {
            live.replace(hw * c, hw * c * kk);
            live.close("unfold", 0, &mut stages);
            let u = unique_offsets(oh, q.scale) * unique_offsets(ow, q.scale);
            unique = Some(u);
            let rows = u * kk;
            let d = q.field.input_dim() as u64;
            let hid = q.field.hidden as u64;
            let mut widths = vec![d];
            widths.extend(std::iter::repeat_n(hid, HIDDEN_LAYERS));
            widths.push(c);
            let per_row: u64 = widths.windows(2).map(|p| p[0] * p[1]).sum();
            live.alloc(rows * d);
            for (i, pair) in widths.windows(2).enumerate() {
                live.replace(rows * pair[0], rows * pair[1]);
                if i + 2 < widths.len() {
                    live.replace(rows * pair[1], rows * pair[1]);
                }
            }
            live.close("hypernetwork", rows * per_row, &mut stages);
            live.alloc(p * c);
            live.free(hw * c * kk);
            live.free(rows * c);
            live.close("depthwise", p * c * kk, &mut stages);
            cuf_dense(&mut live, p, c, &mut stages);
        }
        HeadKind::CufInstantiated => {
            live.replace(hw * c, p * c);
            live.replace(p * c, p * c);
            live.close("depthwise", p * c * kk, &mut stages);
            cuf_dense(&mut live, p, c, &mut stages);
        }
        HeadKind::Subpixel => {
            let n = q.n_out as u64;
            let s = q.scale as u64;
            live.replace(hw * c, hw * s * s * n);
            live.replace(hw * s * s * n, p * n);
            live.close("expansion", hw * kk * c * s * s * n, &mut stages);
            live.replace(p * n, p * 3);
            live.close("projection", p * n * 3, &mut stages);
        }
    }
    Ok(CostReport {
        query: *q,
        out_height: oh,
        out_width: ow,
        unique_offsets: unique,
        total_mults: stages.iter().map(|s| s.mults).sum(),
        peak_elems: live.peak,
        stages,
    })
}

fn cuf_dense(live: &mut Live, p: u64, c: u64, stages: &mut Vec<StageCost>) {
    live.replace(p * c, p * c);
    live.replace(p * c, p * c);
    live.close("dense1", p * c * c, stages);
    live.replace(p * c, p * 3);
    live.close("dense2", p * c * 3, stages);
}
