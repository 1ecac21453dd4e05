//! Rolling per-tensor optimizer statistics.
//!
//! Three momentum channels, one RMS channel and Adafactor-style factored
//! second moments (row/column means for rank >= 2, an elementwise "diag"
//! accumulator otherwise). There is no bias correction anywhere.
//!
//! Channel data lives in an extra trailing axis: momentum for a `[r, c]`
//! parameter is `[r, c, 3]`, RMS is `[r, c, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tree::ParamTree;

pub const MOMENTUM_CHANNELS: usize = 3;
pub const FACTORED_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccumulatorConfig {
    pub momentum_decays: [f64; MOMENTUM_CHANNELS],
    pub rms_decays: [f64; 1],
    pub adafactor_decays: [f64; FACTORED_CHANNELS],
    pub fac_eps: f64,
}

impl Default for AccumulatorConfig {
    fn default() -> Self {
        Self {
            momentum_decays: [0.9, 0.99, 0.999],
            rms_decays: [0.95],
            adafactor_decays: [0.9, 0.99, 0.999],
            fac_eps: 1e-8,
        }
    }
}

impl AccumulatorConfig {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .momentum_decays
            .iter()
            .chain(self.rms_decays.iter())
            .chain(self.adafactor_decays.iter());
        for &d in all {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::Config(format!("decay {d} must lie in (0, 1)")));
            }
        }
        if !(self.fac_eps > 0.0) {
            return Err(Error::Config("fac_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Factored second-moment accumulators for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Factored {
    /// Rank >= 2: leading axes are flattened into rows, the last axis is columns.
    RowCol { v_row: Tensor, v_col: Tensor },
    /// Rank <= 1: elementwise accumulator.
    Diag { v_diag: Tensor },
}

/// `(rows, cols)` a tensor is factored into, or `None` for rank <= 1.
pub fn factor_dims(shape: &[usize]) -> Option<(usize, usize)> {
    if shape.len() >= 2 {
        let cols = shape[shape.len() - 1];
        Some((shape.iter().product::<usize>() / cols.max(1), cols))
    } else {
        None
    }
}

fn with_channels(shape: &[usize], channels: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.push(channels);
    s
}

/// All rolling statistics for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorAccumulators {
    pub mom: Tensor,
    pub rms: Tensor,
    pub factored: Factored,
}

impl TensorAccumulators {
    pub fn zeros(shape: &[usize]) -> Self {
        let factored = match factor_dims(shape) {
            Some((rows, cols)) => Factored::RowCol {
                v_row: Tensor::zeros(&[rows, FACTORED_CHANNELS]),
                v_col: Tensor::zeros(&[cols, FACTORED_CHANNELS]),
            },
            None => Factored::Diag {
                v_diag: Tensor::zeros(&with_channels(shape, FACTORED_CHANNELS)),
            },
        };
        Self {
            mom: Tensor::zeros(&with_channels(shape, MOMENTUM_CHANNELS)),
            rms: Tensor::zeros(&with_channels(shape, 1)),
            factored,
        }
    }
}

/// Per-tensor slot of the learned optimizer's state.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSlot {
    pub acc: TensorAccumulators,
    /// Running sum of past output RMS values, used by the rolling-norm variants.
    pub output_rms_sum: f64,
}

/// Rolling statistics for every tensor of a model plus a step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct CeloState {
    pub step: u64,
    pub slots: Vec<(String, TensorSlot)>,
}

pub fn init_state(params: &ParamTree) -> CeloState {
    CeloState {
        step: 0,
        slots: params
            .iter()
            .map(|(p, t)| {
                (
                    p.to_string(),
                    TensorSlot {
                        acc: TensorAccumulators::zeros(t.shape()),
                        output_rms_sum: 0.0,
                    },
                )
            })
            .collect(),
    }
}

fn check_channels(op: &'static str, state: &Tensor, grad: &Tensor, channels: usize) -> Result<()> {
    if state.shape() != with_channels(grad.shape(), channels).as_slice() {
        return Err(Error::shape(
            op,
            format!("state {:?} vs grad {:?} x {}", state.shape(), grad.shape(), channels),
        ));
    }
    Ok(())
}

/// `m[..., i] = decays[i] * m[..., i] + (1 - decays[i]) * g`.
pub fn update_momentum(m_prev: &Tensor, grad: &Tensor, decays: &[f64; MOMENTUM_CHANNELS]) -> Result<Tensor> {
    check_channels("update_momentum", m_prev, grad, MOMENTUM_CHANNELS)?;
    let mut out = m_prev.clone();
    for (cell, &g) in out.data_mut().chunks_exact_mut(MOMENTUM_CHANNELS).zip(grad.data()) {
        for (m, &b) in cell.iter_mut().zip(decays) {
            *m = (b * f64::from(*m) + (1.0 - b) * f64::from(g)) as f32;
        }
    }
    out.ensure_finite("update_momentum")?;
    Ok(out)
}

/// `v = decay * v + (1 - decay) * g^2`.
pub fn update_rms(v_prev: &Tensor, grad: &Tensor, decay: f64) -> Result<Tensor> {
    check_channels("update_rms", v_prev, grad, 1)?;
    let mut out = v_prev.clone();
    for (v, &g) in out.data_mut().iter_mut().zip(grad.data()) {
        let g = f64::from(g);
        *v = (decay * f64::from(*v) + (1.0 - decay) * g * g) as f32;
    }
    out.ensure_finite("update_rms")?;
    Ok(out)
}

/// Features derived from the factored accumulators, each shaped `param.shape + [3]`.
///
/// Channels that do not apply to a tensor's rank are zero: `v_diag` for
/// factored tensors, `v_row`/`v_col` for rank <= 1.
#[derive(Clone, Debug, PartialEq)]
pub struct FactoredFeatures {
    pub fac_g: Tensor,
    pub v_col: Tensor,
    pub v_row: Tensor,
    pub v_diag: Tensor,
}

/// Advances the factored accumulators and builds the Adafactor features.
pub fn update_factored(
    fac_prev: &Factored,
    grad: &Tensor,
    decays: &[f64; FACTORED_CHANNELS],
    eps: f64,
) -> Result<(Factored, FactoredFeatures)> {
    const C: usize = FACTORED_CHANNELS;
    let shape = grad.shape();
    let n = grad.len();
    let feat_shape = with_channels(shape, C);
    let g = grad.data();

    match (fac_prev, factor_dims(shape)) {
        (Factored::RowCol { v_row, v_col }, Some((rows, cols))) => {
            if v_row.shape() != [rows, C] || v_col.shape() != [cols, C] {
                return Err(Error::shape(
                    "update_factored",
                    format!("row/col state {:?}/{:?} for grad {:?}", v_row.shape(), v_col.shape(), shape),
                ));
            }
            let mut row_mean = vec![0.0f64; rows];
            let mut col_mean = vec![0.0f64; cols];
            for i in 0..rows {
                for j in 0..cols {
                    let g2 = f64::from(g[i * cols + j]).powi(2);
                    row_mean[i] += g2;
                    col_mean[j] += g2;
                }
            }
            row_mean.iter_mut().for_each(|s| *s /= cols as f64);
            col_mean.iter_mut().for_each(|s| *s /= rows as f64);

            let mut new_row = v_row.clone();
            for (i, cell) in new_row.data_mut().chunks_exact_mut(C).enumerate() {
                for (v, &b) in cell.iter_mut().zip(decays) {
                    *v = (b * f64::from(*v) + (1.0 - b) * row_mean[i]) as f32;
                }
            }
            let mut new_col = v_col.clone();
            for (j, cell) in new_col.data_mut().chunks_exact_mut(C).enumerate() {
                for (v, &b) in cell.iter_mut().zip(decays) {
                    *v = (b * f64::from(*v) + (1.0 - b) * col_mean[j]) as f32;
                }
            }

            let mut fac_g = vec![0.0f32; n * C];
            let mut row_t = vec![0.0f32; n * C];
            let mut col_t = vec![0.0f32; n * C];
            let (r, c) = (new_row.data(), new_col.data());
            for i in 0..rows {
                for j in 0..cols {
                    let e = i * cols + j;
                    for k in 0..C {
                        let rv = r[i * C + k];
                        let cv = c[j * C + k];
                        row_t[e * C + k] = rv;
                        col_t[e * C + k] = cv;
                        let scale = 1.0 / ((f64::from(rv) + eps).sqrt() * (f64::from(cv) + eps).sqrt());
                        fac_g[e * C + k] = (f64::from(g[e]) * scale) as f32;
                    }
                }
            }
            let features = FactoredFeatures {
                fac_g: Tensor::new(feat_shape.clone(), fac_g)?,
                v_col: Tensor::new(feat_shape.clone(), col_t)?,
                v_row: Tensor::new(feat_shape.clone(), row_t)?,
                v_diag: Tensor::zeros(&feat_shape),
            };
            features.fac_g.ensure_finite("update_factored")?;
            Ok((
                Factored::RowCol {
                    v_row: new_row,
                    v_col: new_col,
                },
                features,
            ))
        }
        (Factored::Diag { v_diag }, None) => {
            if v_diag.shape() != feat_shape.as_slice() {
                return Err(Error::shape(
                    "update_factored",
                    format!("diag state {:?} for grad {:?}", v_diag.shape(), shape),
                ));
            }
            let mut new_diag = v_diag.clone();
            let mut fac_g = vec![0.0f32; n * C];
            for (e, cell) in new_diag.data_mut().chunks_exact_mut(C).enumerate() {
                let ge = f64::from(g[e]);
                for (k, (v, &b)) in cell.iter_mut().zip(decays).enumerate() {
                    *v = (b * f64::from(*v) + (1.0 - b) * ge * ge) as f32;
                    fac_g[e * C + k] = (ge / (f64::from(*v) + eps).sqrt()) as f32;
                }
            }
            let features = FactoredFeatures {
                fac_g: Tensor::new(feat_shape.clone(), fac_g)?,
                v_col: Tensor::zeros(&feat_shape),
                v_row: Tensor::zeros(&feat_shape),
                v_diag: new_diag.clone(),
            };
            features.fac_g.ensure_finite("update_factored")?;
            Ok((Factored::Diag { v_diag: new_diag }, features))
        }
        _ => Err(Error::shape(
            "update_factored",
            format!("factored state kind does not match grad rank {}", shape.len()),
        )),
    }
}

/// Advances all accumulators of one tensor; returns the new accumulators and
/// the factored features computed from them.
pub fn update_tensor(
    acc: &TensorAccumulators,
    grad: &Tensor,
    cfg: &AccumulatorConfig,
) -> Result<(TensorAccumulators, FactoredFeatures)> {
    let mom = update_momentum(&acc.mom, grad, &cfg.momentum_decays)?;
    let rms = update_rms(&acc.rms, grad, cfg.rms_decays[0])?;
    let (factored, features) = update_factored(&acc.factored, grad, &cfg.adafactor_decays, cfg.fac_eps)?;
    Ok((TensorAccumulators { mom, rms, factored }, features))
}
