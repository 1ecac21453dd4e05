//! Per-parameter input features for the learned rule.

use crate::accumulators::{FactoredFeatures, FACTORED_CHANNELS, MOMENTUM_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CHANNELS: usize = 18;

/// Canonical channel order of a [`FeatureBlock`] row.
pub const CHANNEL_NAMES: [&str; NUM_CHANNELS] = [
    "grad",
    "param",
    "mom_0",
    "mom_1",
    "mom_2",
    "rms",
    "fac_g_0",
    "fac_g_1",
    "fac_g_2",
    "v_col_0",
    "v_col_1",
    "v_col_2",
    "v_row_0",
    "v_row_1",
    "v_row_2",
    "v_diag_0",
    "v_diag_1",
    "v_diag_2",
];

/// Normalized features, one row of [`NUM_CHANNELS`] values per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    pub matrix: Tensor,
}

impl FeatureBlock {
    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.matrix.data().chunks_exact(NUM_CHANNELS).map(|r| r[c]).collect()
    }
}

/// Size of the contiguous normalization groups: the product of the last two
/// axes (one axis for rank 1, a single element for rank 0).
pub fn norm_group_size(shape: &[usize]) -> usize {
    let r = shape.len();
    shape[r.saturating_sub(2)..].iter().product()
}

/// Raw per-element channel values, interleaved as `n x NUM_CHANNELS`.
fn raw_channels(param: &Tensor, grad: &Tensor, mom: &Tensor, rms: &Tensor, fac: &FactoredFeatures) -> Result<Vec<f64>> {
    let n = param.len();
    let shape = param.shape();
    let with = |c: usize| {
        let mut s = shape.to_vec();
        s.push(c);
        s
    };
    let checks: [(&str, &Tensor, Vec<usize>); 7] = [
        ("grad", grad, shape.to_vec()),
        ("mom", mom, with(MOMENTUM_CHANNELS)),
        ("rms", rms, with(1)),
        ("fac_g", &fac.fac_g, with(FACTORED_CHANNELS)),
        ("v_col", &fac.v_col, with(FACTORED_CHANNELS)),
        ("v_row", &fac.v_row, with(FACTORED_CHANNELS)),
        ("v_diag", &fac.v_diag, with(FACTORED_CHANNELS)),
    ];
    for (name, t, want) in &checks {
        if t.shape() != want.as_slice() {
            return Err(Error::shape(
                "build_features",
                format!("{name} has shape {:?}, expected {:?}", t.shape(), want),
            ));
        }
    }
    let mut out = Vec::with_capacity(n * NUM_CHANNELS);
    let three = |t: &Tensor, e: usize| {
        let d = &t.data()[e * 3..e * 3 + 3];
        [f64::from(d[0]), f64::from(d[1]), f64::from(d[2])]
    };
    for e in 0..n {
        out.push(f64::from(grad.data()[e]));
        out.push(f64::from(param.data()[e]));
        out.extend(three(mom, e));
        out.push(f64::from(rms.data()[e]));
        out.extend(three(&fac.fac_g, e));
        out.extend(three(&fac.v_col, e));
        out.extend(three(&fac.v_row, e));
        out.extend(three(&fac.v_diag, e));
    }
    Ok(out)
}

/// Builds the normalized feature matrix. Each channel `x` becomes
/// `x / sqrt(mean(x^2) + norm_eps)` with the mean taken over the last two
/// axes of the parameter.
pub fn build_features(
    param: &Tensor,
    grad: &Tensor,
    mom: &Tensor,
    rms: &Tensor,
    fac: &FactoredFeatures,
    norm_eps: f64,
) -> Result<FeatureBlock> {
    let n = param.len();
    let mut raw = raw_channels(param, grad, mom, rms, fac)?;
    let group = norm_group_size(param.shape()).max(1);
    for chunk in raw.chunks_mut(group * NUM_CHANNELS) {
        let rows = chunk.len() / NUM_CHANNELS;
        let mut ms = [0.0f64; NUM_CHANNELS];
        for row in chunk.chunks_exact(NUM_CHANNELS) {
            for (acc, x) in ms.iter_mut().zip(row) {
                *acc += x * x;
            }
        }
        let inv: Vec<f64> = ms.iter().map(|s| 1.0 / (s / rows as f64 + norm_eps).sqrt()).collect();
        for row in chunk.chunks_exact_mut(NUM_CHANNELS) {
            for (x, k) in row.iter_mut().zip(&inv) {
                *x *= k;
            }
        }
    }
    let matrix = Tensor::new(vec![n, NUM_CHANNELS], raw.into_iter().map(|x| x as f32).collect())?;
    matrix.ensure_finite("build_features")?;
    Ok(FeatureBlock { matrix })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_fac(shape: &[usize]) -> FactoredFeatures {
        let mut s = shape.to_vec();
        s.push(3);
        FactoredFeatures {
            fac_g: Tensor::zeros(&s),
            v_col: Tensor::zeros(&s),
            v_row: Tensor::zeros(&s),
            v_diag: Tensor::zeros(&s),
        }
    }

    #[test]
    fn channel_order_is_canonical() {
        assert_eq!(CHANNEL_NAMES.len(), 18);
        assert_eq!(CHANNEL_NAMES[0], "grad");
        assert_eq!(CHANNEL_NAMES[5], "rms");
        assert_eq!(CHANNEL_NAMES[17], "v_diag_2");
    }

    #[test]
    fn normalizes_hand_example() {
        let param = Tensor::from_vec(vec![3.0, 4.0]);
        let grad = Tensor::zeros(&[2]);
        let block = build_features(
            &param,
            &grad,
            &Tensor::zeros(&[2, 3]),
            &Tensor::zeros(&[2, 1]),
            &zero_fac(&[2]),
            1e-9,
        )
        .unwrap();
        let p = block.channel(1);
        let k = 12.5f64.sqrt();
        assert!((f64::from(p[0]) - 3.0 / k).abs() < 1e-6);
        assert!((f64::from(p[1]) - 4.0 / k).abs() < 1e-6);
        // zero channels stay zero
        assert!(block.channel(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scale_invariant_per_channel() {
        let param = Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 0.1]]);
        let grad = Tensor::from_rows(&[&[0.3, 0.2], &[-0.7, 1.1]]);
        let mom = Tensor::zeros(&[2, 2, 3]);
        let rms = Tensor::zeros(&[2, 2, 1]);
        let a = build_features(&param, &grad, &mom, &rms, &zero_fac(&[2, 2]), 1e-9).unwrap();
        let b = build_features(&param.scale(10.0).unwrap(), &grad, &mom, &rms, &zero_fac(&[2, 2]), 1e-9).unwrap();
        for (x, y) in a.channel(1).iter().zip(b.channel(1)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn groups_over_last_two_axes() {
        // two [1, 2] slices normalized independently
        let param = Tensor::new(vec![2, 1, 2], vec![1.0, 1.0, 100.0, 100.0]).unwrap();
        let z = Tensor::zeros(&[2, 1, 2]);
        let block = build_features(
            &param,
            &z,
            &Tensor::zeros(&[2, 1, 2, 3]),
            &Tensor::zeros(&[2, 1, 2, 1]),
            &zero_fac(&[2, 1, 2]),
            1e-12,
        )
        .unwrap();
        for v in block.channel(1) {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn scalar_normalizes_per_element() {
        let block = build_features(
            &Tensor::scalar(-5.0),
            &Tensor::scalar(0.0),
            &Tensor::zeros(&[3]),
            &Tensor::zeros(&[1]),
            &zero_fac(&[]),
            1e-9,
        )
        .unwrap();
        assert!((block.channel(1)[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_shapes() {
        let r = build_features(
            &Tensor::zeros(&[2]),
            &Tensor::zeros(&[3]),
            &Tensor::zeros(&[2, 3]),
            &Tensor::zeros(&[2, 1]),
            &zero_fac(&[2]),
            1e-9,
        );
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
