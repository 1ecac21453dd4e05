//! Accumulator recurrences against a straight-line f64 oracle.

// index loops mirror the written recurrences
#![allow(clippy::needless_range_loop)]

use lopt_core::accumulators::{update_tensor, AccumulatorConfig, Factored, TensorAccumulators};
use lopt_core::{Rng, Tensor};

const MOM: [f64; 3] = [0.9, 0.99, 0.999];
const RMS: f64 = 0.95;
const FAC: [f64; 3] = [0.9, 0.99, 0.999];
const EPS: f64 = 1e-8;

/// Oracle state for a `rows x cols` matrix, kept in f64 with no shared code.
struct Oracle {
    rows: usize,
    cols: usize,
    mom: Vec<[f64; 3]>,
    rms: Vec<f64>,
    v_row: Vec<[f64; 3]>,
    v_col: Vec<[f64; 3]>,
}

impl Oracle {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            mom: vec![[0.0; 3]; rows * cols],
            rms: vec![0.0; rows * cols],
            v_row: vec![[0.0; 3]; rows],
            v_col: vec![[0.0; 3]; cols],
        }
    }

    fn step(&mut self, g: &[f64]) -> Vec<[f64; 3]> {
        for e in 0..g.len() {
            for k in 0..3 {
                self.mom[e][k] = MOM[k] * self.mom[e][k] + (1.0 - MOM[k]) * g[e];
            }
            self.rms[e] = RMS * self.rms[e] + (1.0 - RMS) * g[e] * g[e];
        }
        for i in 0..self.rows {
            let mean: f64 = (0..self.cols).map(|j| g[i * self.cols + j].powi(2)).sum::<f64>() / self.cols as f64;
            for k in 0..3 {
                self.v_row[i][k] = FAC[k] * self.v_row[i][k] + (1.0 - FAC[k]) * mean;
            }
        }
        for j in 0..self.cols {
            let mean: f64 = (0..self.rows).map(|i| g[i * self.cols + j].powi(2)).sum::<f64>() / self.rows as f64;
            for k in 0..3 {
                self.v_col[j][k] = FAC[k] * self.v_col[j][k] + (1.0 - FAC[k]) * mean;
            }
        }
        let mut fac_g = vec![[0.0; 3]; g.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                for k in 0..3 {
                    fac_g[i * self.cols + j][k] =
                        g[i * self.cols + j] / ((self.v_row[i][k] + EPS).sqrt() * (self.v_col[j][k] + EPS).sqrt());
                }
            }
        }
        fac_g
    }
}

fn cfg() -> AccumulatorConfig {
    AccumulatorConfig {
        momentum_decays: MOM,
        rms_decays: [RMS],
        adafactor_decays: FAC,
        fac_eps: EPS,
    }
}

fn close(a: f32, b: f64, tol: f64, what: &str) {
    assert!((f64::from(a) - b).abs() <= tol, "{what}: {a} vs {b}");
}

#[test]
fn five_step_matrix_trace() {
    let (rows, cols) = (3, 2);
    let mut rng = Rng::new(42, 0);
    let mut acc = TensorAccumulators::zeros(&[rows, cols]);
    let mut oracle = Oracle::new(rows, cols);
    for step in 0..5 {
        let g = Tensor::normal(&mut rng, &[rows, cols]);
        let g64: Vec<f64> = g.data().iter().map(|&v| f64::from(v)).collect();
        let (next, feats) = update_tensor(&acc, &g, &cfg()).unwrap();
        let fac_g = oracle.step(&g64);
        for e in 0..rows * cols {
            for k in 0..3 {
                close(next.mom.data()[e * 3 + k], oracle.mom[e][k], 1e-6, &format!("mom step {step}"));
                close(feats.fac_g.data()[e * 3 + k], fac_g[e][k], 1e-6 * fac_g[e][k].abs().max(1.0), "fac_g");
            }
            close(next.rms.data()[e], oracle.rms[e], 1e-6, "rms");
        }
        let Factored::RowCol { v_row, v_col } = &next.factored else {
            panic!("matrix must be factored")
        };
        for i in 0..rows {
            for k in 0..3 {
                close(v_row.data()[i * 3 + k], oracle.v_row[i][k], 1e-6, "v_row");
            }
        }
        for j in 0..cols {
            for k in 0..3 {
                close(v_col.data()[j * 3 + k], oracle.v_col[j][k], 1e-6, "v_col");
            }
        }
        acc = next;
    }
}

#[test]
fn five_step_vector_trace() {
    let n = 4;
    let mut rng = Rng::new(7, 1);
    let mut acc = TensorAccumulators::zeros(&[n]);
    let mut v_diag = vec![[0.0f64; 3]; n];
    let mut mom = vec![[0.0f64; 3]; n];
    for _ in 0..5 {
        let g = Tensor::normal(&mut rng, &[n]);
        let (next, feats) = update_tensor(&acc, &g, &cfg()).unwrap();
        for e in 0..n {
            let ge = f64::from(g.data()[e]);
            for k in 0..3 {
                v_diag[e][k] = FAC[k] * v_diag[e][k] + (1.0 - FAC[k]) * ge * ge;
                mom[e][k] = MOM[k] * mom[e][k] + (1.0 - MOM[k]) * ge;
                close(feats.v_diag.data()[e * 3 + k], v_diag[e][k], 1e-6, "v_diag");
                close(next.mom.data()[e * 3 + k], mom[e][k], 1e-6, "mom");
                let want = ge / (v_diag[e][k] + EPS).sqrt();
                close(feats.fac_g.data()[e * 3 + k], want, 1e-6 * want.abs().max(1.0), "fac_g diag");
            }
        }
        assert!(feats.v_row.data().iter().all(|&v| v == 0.0));
        assert!(feats.v_col.data().iter().all(|&v| v == 0.0));
        acc = next;
    }
}

#[test]
fn constant_gradient_fixed_points() {
    // after 10 / (1 - beta) steps every EMA is within 2% of its fixed point
    let g = Tensor::from_rows(&[&[0.5, -2.0], &[1.5, 0.25]]);
    for &beta in &[0.9, 0.95, 0.99, 0.999] {
        let c = AccumulatorConfig {
            momentum_decays: [beta; 3],
            rms_decays: [beta],
            adafactor_decays: [beta; 3],
            fac_eps: EPS,
        };
        let steps = (10.0 / (1.0 - beta)).round() as usize;
        let mut acc = TensorAccumulators::zeros(&[2, 2]);
        for _ in 0..steps {
            acc = update_tensor(&acc, &g, &c).unwrap().0;
        }
        for (e, &gv) in g.data().iter().enumerate() {
            let gv = f64::from(gv);
            for k in 0..3 {
                let m = f64::from(acc.mom.data()[e * 3 + k]);
                assert!((m - gv).abs() <= 0.02 * gv.abs(), "beta {beta}: mom {m} vs {gv}");
            }
            let v = f64::from(acc.rms.data()[e]);
            assert!((v - gv * gv).abs() <= 0.02 * gv * gv, "beta {beta}: rms {v}");
        }
        let Factored::RowCol { v_row, .. } = &acc.factored else { panic!() };
        let row0 = (0.25 + 4.0) / 2.0;
        let got = f64::from(v_row.data()[0]);
        assert!((got - row0).abs() <= 0.02 * row0, "beta {beta}: v_row {got}");
    }
}
