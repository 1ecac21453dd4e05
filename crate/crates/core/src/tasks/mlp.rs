//! Inner MLP classifier: ReLU hidden layers, softmax cross-entropy, analytic
//! backprop. Arithmetic is done in f64.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tree::ParamTree;

use super::data::Dataset;

struct Layer {
    w: Vec<f64>,
    b: Vec<f64>,
    fan_in: usize,
    fan_out: usize,
}

fn weight_path(i: usize) -> String {
    format!("layer{i}/weight")
}

fn bias_path(i: usize) -> String {
    format!("layer{i}/bias")
}

/// Fan-in uniform weights `U(-1/sqrt(in), 1/sqrt(in))` and zero biases.
pub fn init_mlp(widths: &[usize], rng: &mut Rng) -> Result<ParamTree> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::Config(format!("invalid MLP widths {widths:?}")));
    }
    let mut entries = Vec::new();
    for (i, w) in widths.windows(2).enumerate() {
        let bound = 1.0 / (w[0] as f64).sqrt();
        entries.push((weight_path(i), Tensor::uniform(rng, -bound, bound, &[w[0], w[1]])?));
        entries.push((bias_path(i), Tensor::zeros(&[w[1]])));
    }
    ParamTree::new(entries)
}

fn layers(params: &ParamTree) -> Result<Vec<Layer>> {
    let n = params.len() / 2;
    if n == 0 || params.len() != 2 * n {
        return Err(Error::Structure(format!("MLP tree has {} entries", params.len())));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (w, b) = match (params.get(&weight_path(i)), params.get(&bias_path(i))) {
            (Some(w), Some(b)) => (w, b),
            _ => return Err(Error::Structure(format!("missing MLP layer {i}"))),
        };
        if w.rank() != 2 || b.shape() != [w.shape()[1]] {
            return Err(Error::shape("mlp", format!("layer {i}: weight {:?}, bias {:?}", w.shape(), b.shape())));
        }
        if let Some(prev) = out.last() {
            let prev: &Layer = prev;
            if prev.fan_out != w.shape()[0] {
                return Err(Error::shape("mlp", format!("layer {i} input {} != previous output {}", w.shape()[0], prev.fan_out)));
            }
        }
        out.push(Layer {
            w: w.data().iter().map(|&v| f64::from(v)).collect(),
            b: b.data().iter().map(|&v| f64::from(v)).collect(),
            fan_in: w.shape()[0],
            fan_out: w.shape()[1],
        });
    }
    Ok(out)
}

/// Activations per layer: `acts[0]` is the input, `acts[l + 1]` the output of layer `l`
/// (post-ReLU for hidden layers, logits for the last).
fn forward(layers: &[Layer], x: &[f64], batch: usize) -> Vec<Vec<f64>> {
    let mut acts = vec![x.to_vec()];
    let last = layers.len() - 1;
    for (li, l) in layers.iter().enumerate() {
        let input = &acts[li];
        let mut z = vec![0.0; batch * l.fan_out];
        for r in 0..batch {
            let zr = &mut z[r * l.fan_out..(r + 1) * l.fan_out];
            zr.copy_from_slice(&l.b);
            for (i, &a) in input[r * l.fan_in..(r + 1) * l.fan_in].iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (zv, &wv) in zr.iter_mut().zip(&l.w[i * l.fan_out..(i + 1) * l.fan_out]) {
                    *zv += a * wv;
                }
            }
        }
        if li < last {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        acts.push(z);
    }
    acts
}

fn check_batch(layers: &[Layer], data: &Dataset) -> Result<()> {
    if data.dim != layers[0].fan_in {
        return Err(Error::shape("mlp", format!("input dim {} vs network {}", data.dim, layers[0].fan_in)));
    }
    let classes = layers[layers.len() - 1].fan_out;
    if let Some(&bad) = data.y.iter().find(|&&y| y as usize >= classes) {
        return Err(Error::shape("mlp", format!("label {bad} >= {classes} outputs")));
    }
    if data.is_empty() {
        return Err(Error::shape("mlp", "empty batch"));
    }
    Ok(())
}

/// Per-row `(loss, softmax probabilities)`.
fn softmax_ce(logits: &[f64], y: &[u32], classes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut losses = Vec::with_capacity(y.len());
    let mut probs = vec![0.0; logits.len()];
    for (r, &label) in y.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + sum.ln();
        losses.push(lse - row[label as usize]);
        for (p, v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    (losses, probs)
}

/// Mean softmax cross-entropy over `batch` and its gradient.
/// A non-finite loss is reported as [`Error::NonFinite`].
pub fn loss_and_grad(params: &ParamTree, batch: &Dataset) -> Result<(f64, ParamTree)> {
    let layers = layers(params)?;
    check_batch(&layers, batch)?;
    let n = batch.len();
    let x: Vec<f64> = batch.x.iter().map(|&v| f64::from(v)).collect();
    let acts = forward(&layers, &x, n);
    let classes = layers[layers.len() - 1].fan_out;
    let (losses, probs) = softmax_ce(&acts[layers.len()], &batch.y, classes);
    let loss = losses.iter().sum::<f64>() / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("inner loss {loss}")));
    }

    let mut dz = probs;
    for (r, &label) in batch.y.iter().enumerate() {
        dz[r * classes + label as usize] -= 1.0;
    }
    dz.iter_mut().for_each(|v| *v /= n as f64);

    let mut grads = Vec::with_capacity(params.len());
    for li in (0..layers.len()).rev() {
        let l = &layers[li];
        let input = &acts[li];
        let mut dw = vec![0.0; l.fan_in * l.fan_out];
        let mut db = vec![0.0; l.fan_out];
        for r in 0..n {
            let dzr = &dz[r * l.fan_out..(r + 1) * l.fan_out];
            for (d, &g) in db.iter_mut().zip(dzr) {
                *d += g;
            }
            for (i, &a) in input[r * l.fan_in..(r + 1) * l.fan_in].iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &g) in dw[i * l.fan_out..(i + 1) * l.fan_out].iter_mut().zip(dzr) {
                    *d += a * g;
                }
            }
        }
        if li > 0 {
            let mut da = vec![0.0; n * l.fan_in];
            for r in 0..n {
                let dzr = &dz[r * l.fan_out..(r + 1) * l.fan_out];
                for i in 0..l.fan_in {
                    // ReLU derivative: the stored activation is post-ReLU
                    if input[r * l.fan_in + i] <= 0.0 {
                        continue;
                    }
                    da[r * l.fan_in + i] = l.w[i * l.fan_out..(i + 1) * l.fan_out]
                        .iter()
                        .zip(dzr)
                        .map(|(w, g)| w * g)
                        .sum();
                }
            }
            dz = da;
        }
        let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
        grads.push((weight_path(li), Tensor::new(vec![l.fan_in, l.fan_out], to_f32(dw))?));
        grads.push((bias_path(li), Tensor::new(vec![l.fan_out], to_f32(db))?));
    }
    let grads = ParamTree::new(grads)?;
    if !grads.all_finite() {
        return Err(Error::NonFinite("inner gradient".into()));
    }
    Ok((loss, grads))
}

/// Mean loss and accuracy over a dataset.
pub fn evaluate(params: &ParamTree, data: &Dataset) -> Result<(f64, f64)> {
    let layers = layers(params)?;
    check_batch(&layers, data)?;
    let classes = layers[layers.len() - 1].fan_out;
    let mut loss = 0.0;
    let mut correct = 0usize;
    const CHUNK: usize = 1024;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let x: Vec<f64> = data.x[start * data.dim..end * data.dim].iter().map(|&v| f64::from(v)).collect();
        let acts = forward(&layers, &x, end - start);
        let logits = &acts[layers.len()];
        let y = &data.y[start..end];
        let (losses, _) = softmax_ce(logits, y, classes);
        loss += losses.iter().sum::<f64>();
        for (r, &label) in y.iter().enumerate() {
            let row = &logits[r * classes..(r + 1) * classes];
            let pred = (0..classes).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
            correct += usize::from(pred == label as usize);
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(x: Vec<f32>, y: Vec<u32>, dim: usize, classes: usize) -> Dataset {
        Dataset { x, y, dim, classes }
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let params = init_mlp(&[3, 5, 4], &mut Rng::new(0, 0)).unwrap();
        let zeroed = params.map(|_, t| Tensor::zeros(t.shape()));
        let b = batch(vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.5], vec![0, 3], 3, 4);
        let (loss, _) = loss_and_grad(&zeroed, &b).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_rows_match_weighted_mean() {
        let params = init_mlp(&[2, 3, 2], &mut Rng::new(1, 0)).unwrap();
        let a = batch(vec![0.5, -1.0], vec![0], 2, 2);
        let b = batch(vec![2.0, 0.3], vec![1], 2, 2);
        let (la, _) = loss_and_grad(&params, &a).unwrap();
        let (lb, _) = loss_and_grad(&params, &b).unwrap();
        let dup = batch(vec![0.5, -1.0, 0.5, -1.0, 2.0, 0.3], vec![0, 0, 1], 2, 2);
        let (l, _) = loss_and_grad(&params, &dup).unwrap();
        assert!((l - (2.0 * la + lb) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = init_mlp(&[2, 2], &mut Rng::new(0, 0)).unwrap();
        assert!(loss_and_grad(&params, &batch(vec![1.0, 2.0, 3.0], vec![0], 3, 2)).is_err());
        assert!(loss_and_grad(&params, &batch(vec![1.0, 2.0], vec![5], 2, 2)).is_err());
        assert!(init_mlp(&[3], &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn evaluate_matches_loss_and_counts_accuracy() {
        let params = init_mlp(&[2, 4, 3], &mut Rng::new(3, 0)).unwrap();
        let d = batch(vec![0.1, 0.2, -0.3, 1.0, 2.0, -2.0], vec![0, 1, 2], 2, 3);
        let (l1, _) = loss_and_grad(&params, &d).unwrap();
        let (l2, acc) = evaluate(&params, &d).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&acc));
    }
}
