//! Eigenvalue spectra of groups of upsampling filters.

use serde::Serialize;

use super::EvalError;
use crate::model::{Head, SrModel};
use crate::tensor::Tensor;

/// Per-group eigenvalues (descending) and normalized cumulative variance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EigenReport {
    pub scale: usize,
    pub head_kind: &'static str,
    pub eigenvalues: Vec<Vec<f64>>,
    pub cumvar: Vec<Vec<f64>>,
    /// Total centered variance of each group, computed from the filters.
    pub total_variance: Vec<f64>,
}

impl EigenReport {
    pub fn groups(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `group,index,eigenvalue,cumvar`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,index,eigenvalue,cumvar\n");
        for (g, (ev, cv)) in self.eigenvalues.iter().zip(&self.cumvar).enumerate() {
            for (i, (e, c)) in ev.iter().zip(cv).enumerate() {
                out.push_str(&format!("{g},{i},{e:e},{c}\n"));
            }
        }
        out
    }
}

/// Eigenvalues of a symmetric `n×n` row-major matrix by cyclic Jacobi
/// rotations, sorted descending.
pub fn symmetric_eigenvalues(matrix: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(matrix.len(), n * n, "matrix must be n×n");
    let mut a = matrix.to_vec();
    let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off.sqrt() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Sample-covariance spectrum of the rows (rows are observations):
/// `(eigenvalues, total variance)`. Uses the `n×n` Gram matrix of the
/// column-centered rows, whose nonzero spectrum equals the covariance's.
pub fn centered_spectrum(rows: &[Vec<f64>]) -> Result<(Vec<f64>, f64), EvalError> {
    let n = rows.len();
    if n < 2 {
        return Err(EvalError::Invalid(format!("need at least 2 filters per group, got {n}")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(EvalError::Invalid("filters in a group differ in length".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let denom = (n - 1) as f64;
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>() / denom;
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }
    let total = (0..n).map(|i| gram[i * n + i]).sum();
    Ok((symmetric_eigenvalues(&gram, n), total))
}

/// Groups of `s²` filters: one group per channel of a `[s², K², C]` bank.
fn bank_groups(bank: &Tensor<f32>) -> Vec<Vec<Vec<f64>>> {
    let [g, kk, c] = *bank.shape() else {
        unreachable!("banks are rank 3")
    };
    (0..c)
        .map(|ch| {
            (0..g)
                .map(|row| (0..kk).map(|t| bank.data()[(row * kk + t) * c + ch] as f64).collect())
                .collect()
        })
        .collect()
}

/// One group per post-shuffle channel `n`: the `s²` expansion filters
/// `[C·K²]` feeding output channels `n·s² + g`.
fn subpixel_groups(weight: &Tensor<f32>, s: usize) -> Vec<Vec<Vec<f64>>> {
    let s2 = s * s;
    let cout = weight.shape()[0];
    let per = weight.len() / cout;
    (0..cout / s2)
        .map(|n| {
            (0..s2)
                .map(|g| {
                    let o = n * s2 + g;
                    weight.data()[o * per..(o + 1) * per].iter().map(|&v| v as f64).collect()
                })
                .collect()
        })
        .collect()
}

/// Filter-redundancy spectra of a model's upsampling head at integer scale `s`.
pub fn filter_pca(model: &SrModel, s: usize) -> Result<EigenReport, EvalError> {
    if s < 2 {
        return Err(EvalError::Invalid(format!("scale {s} gives fewer than 2 filters per group")));
    }
    let mismatch = |fixed: usize| EvalError::Invalid(format!("head is fixed at scale {fixed}, not {s}"));
    let groups = match &model.arch.head {
        Head::Cuf(h) => bank_groups(&h.instantiate(&model.params, s).map_err(crate::model::ModelError::from)?.weights),
        Head::Instantiated(h) => {
            if h.scale != s {
                return Err(mismatch(h.scale));
            }
            bank_groups(model.params.value(h.kernels))
        }
        Head::SubPixel(h) => {
            if h.scale() != s {
                return Err(mismatch(h.scale()));
            }
            subpixel_groups(model.params.value(h.expansion.weight), s)
        }
    };
    let mut report = EigenReport {
        scale: s,
        head_kind: model.config().head_kind(),
        eigenvalues: Vec::with_capacity(groups.len()),
        cumvar: Vec::with_capacity(groups.len()),
        total_variance: Vec::with_capacity(groups.len()),
    };
    for rows in &groups {
        let (ev, total) = centered_spectrum(rows)?;
        let sum: f64 = ev.iter().sum();
        let mut acc = 0.0;
        let cum = ev
            .iter()
            .map(|e| {
                acc += e;
                if sum > 0.0 {
                    acc / sum
                } else {
                    0.0
                }
            })
            .collect();
        report.eigenvalues.push(ev);
        report.cumvar.push(cum);
        report.total_variance.push(total);
    }
    Ok(report)
}
