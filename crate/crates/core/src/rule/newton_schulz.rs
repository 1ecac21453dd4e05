//! Quintic Newton-Schulz orthogonalization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::NsConfig;

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let row = &b[p * m..(p + 1) * m];
            for (o, &y) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o += x * y;
            }
        }
    }
    out
}

/// Orthogonalizes one `rows x cols` matrix (f64, row-major) with `rows <= cols`.
fn orthogonalize_wide(mut x: Vec<f64>, rows: usize, cols: usize, ns: &NsConfig) -> Vec<f64> {
    let [a, b, c] = ns.coeffs;
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let k = 1.0 / (norm + ns.eps);
    x.iter_mut().for_each(|v| *v *= k);
    let mut xt = vec![0.0; rows * cols];
    for _ in 0..ns.iters {
        for i in 0..rows {
            for j in 0..cols {
                xt[j * rows + i] = x[i * cols + j];
            }
        }
        let gram = matmul(&x, &xt, rows, cols, rows);
        let gram2 = matmul(&gram, &gram, rows, rows, rows);
        let poly: Vec<f64> = gram.iter().zip(&gram2).map(|(g, g2)| b * g + c * g2).collect();
        let px = matmul(&poly, &x, rows, rows, cols);
        x.iter_mut().zip(&px).for_each(|(v, p)| *v = a * *v + p);
    }
    x
}

/// Approximately maps `x` to the nearest semi-orthogonal matrix, batched over
/// leading axes. Positive rescaling of the input does not change the output.
pub fn newton_schulz(x: &Tensor, ns: &NsConfig) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape("newton_schulz", format!("input must have >= 2 dims, got {:?}", shape)));
    }
    let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut out = Vec::with_capacity(x.len());
    for mat in x.data().chunks(r * c.max(1)) {
        if r == 0 || c == 0 {
            break;
        }
        let m: Vec<f64> = mat.iter().map(|&v| f64::from(v)).collect();
        let y = if r <= c {
            orthogonalize_wide(m, r, c, ns)
        } else {
            let mut t = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    t[j * r + i] = m[i * c + j];
                }
            }
            let yt = orthogonalize_wide(t, c, r, ns);
            let mut y = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    y[i * c + j] = yt[j * r + i];
                }
            }
            y
        };
        out.extend(y.into_iter().map(|v| v as f32));
    }
    let t = Tensor::new(shape.to_vec(), out)?;
    t.ensure_finite("newton_schulz")?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identity_follows_scalar_quintic() {
        let ns = NsConfig::default();
        let [a, b, c] = ns.coeffs;
        let mut s = 1.0 / (2f64.sqrt() + ns.eps);
        for _ in 0..ns.iters {
            s = a * s + b * s.powi(3) + c * s.powi(5);
        }
        let y = newton_schulz(&Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]), &ns).unwrap();
        assert!((f64::from(y.data()[0]) - s).abs() < 1e-6);
        assert!((f64::from(y.data()[3]) - s).abs() < 1e-6);
        assert_eq!(y.data()[1], 0.0);
        assert!((s - 1.1076).abs() < 1e-3);
    }

    #[test]
    fn scale_invariant() {
        let ns = NsConfig::default();
        let x = Tensor::normal(&mut Rng::new(3, 0), &[5, 7]);
        let y0 = newton_schulz(&x, &ns).unwrap();
        let y1 = newton_schulz(&x.scale(37.0).unwrap(), &ns).unwrap();
        for (a, b) in y0.data().iter().zip(y1.data()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn tall_matches_transposed_wide() {
        let ns = NsConfig::default();
        let x = Tensor::normal(&mut Rng::new(8, 0), &[6, 3]);
        let tall = newton_schulz(&x, &ns).unwrap();
        let wide = newton_schulz(&x.transpose().unwrap(), &ns).unwrap().transpose().unwrap();
        assert_eq!(tall, wide);
    }

    #[test]
    fn batched_matches_per_matrix() {
        let ns = NsConfig::default();
        let x = Tensor::normal(&mut Rng::new(2, 0), &[2, 3, 4]);
        let y = newton_schulz(&x, &ns).unwrap();
        for b in 0..2 {
            let slice = Tensor::new(vec![3, 4], x.data()[b * 12..(b + 1) * 12].to_vec()).unwrap();
            let ys = newton_schulz(&slice, &ns).unwrap();
            assert_eq!(&y.data()[b * 12..(b + 1) * 12], ys.data());
        }
    }

    #[test]
    fn rejects_low_rank_input() {
        assert!(newton_schulz(&Tensor::from_vec(vec![1.0, 2.0]), &NsConfig::default()).is_err());
    }

    #[test]
    fn zero_matrix_stays_zero() {
        let y = newton_schulz(&Tensor::zeros(&[3, 3]), &NsConfig::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
