//! Linear centered kernel alignment (CKA) between feature matrices, for
//! comparing intermediate representations across architectures.
//!
//! Similarity is HSIC(K, L) / sqrt(HSIC(K, K) * HSIC(L, L)) with linear Gram
//! matrices K = XX^T, L = YY^T and the biased empirical HSIC estimator
//! tr(KHLH) / (n-1)^2.

use std::fmt::Write as _;

use serde::Serialize;

use crate::tensor::{Elem, Tensor};
use crate::{Error, Result};

/// A labelled per-layer feature matrix: n samples by flattened dimension d.
#[derive(Debug, Clone)]
pub struct FeatureRecord<T: Elem> {
    pub layer_label: String,
    pub matrix: Tensor<T>,
}

impl<T: Elem> FeatureRecord<T> {
    pub fn new(layer_label: impl Into<String>, matrix: Tensor<T>) -> Result<Self> {
        let shape = matrix.shape();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "feature_record",
                details: format!("expected [n, d] feature matrix, got {:?}", shape),
            });
        }
        if shape[0] < 4 {
            return Err(Error::Degenerate(format!(
                "feature record needs at least 4 samples, got {}",
                shape[0]
            )));
        }
        Ok(FeatureRecord {
            layer_label: layer_label.into(),
            matrix,
        })
    }
}

/// Flatten a feature tensor to [n, d] per-sample rows: [b,t,d] token tensors
/// and [b,c,h,w] maps both collapse their trailing axes.
pub fn flatten_features<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.is_empty() || shape.len() == 1 {
        return Err(Error::Shape {
            op: "flatten_features",
            details: format!("need at least 2 axes, got {:?}", shape),
        });
    }
    let n = shape[0];
    x.detach().reshape(vec![n, x.len() / n])
}

/// Reduce a feature tensor to per-sample channel profiles: [b,c,h,w] maps
/// average over space to [b,c], [b,t,d] token tensors average over tokens to
/// [b,d]. Position-free profiles compare what the channels encode rather
/// than where activations happen to land, which is far more stable across
/// seeds than flattened spatial features.
pub fn pooled_features<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    let d = x.detach();
    match shape.len() {
        4 => d.mean_axis(3)?.mean_axis(2),
        3 => d.mean_axis(1),
        2 => Ok(d),
        _ => Err(Error::Shape {
            op: "pooled_features",
            details: format!("need 2-4 axes, got {:?}", shape),
        }),
    }
}

/// Gram matrix XX^T of an [n, d] feature matrix.
pub fn gram<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "gram",
            details: format!("expected [n, d], got {:?}", shape),
        });
    }
    if shape[0] < 2 {
        return Err(Error::Degenerate(format!(
            "gram needs n >= 2, got {}",
            shape[0]
        )));
    }
    let xt = x.swap_axes(0, 1)?;
    x.matmul(&xt)
}

// Center a symmetric n x n matrix: HKH with H = I - (1/n)11^T, computed by
// subtracting row means, column means, and adding back the grand mean.
fn center(k: &[f64], n: usize) -> Vec<f64> {
    let mut row_mean = vec![0.0; n];
    let mut col_mean = vec![0.0; n];
    let mut grand = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = k[i * n + j];
            row_mean[i] += v;
            col_mean[j] += v;
            grand += v;
        }
    }
    for m in row_mean.iter_mut().chain(col_mean.iter_mut()) {
        *m /= n as f64;
    }
    grand /= (n * n) as f64;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k[i * n + j] - row_mean[i] - col_mean[j] + grand;
        }
    }
    out
}

/// Empirical HSIC estimator tr(KHLH) / (n-1)^2, evaluated in f64 as the
/// Frobenius inner product of the explicitly centered matrices.
pub fn hsic<T: Elem>(k: &Tensor<T>, l: &Tensor<T>) -> Result<f64> {
    let (ks, ls) = (k.shape(), l.shape());
    if ks.len() != 2 || ks[0] != ks[1] || ks != ls {
        return Err(Error::Shape {
            op: "hsic",
            details: format!("expected matching square matrices, got {:?} and {:?}", ks, ls),
        });
    }
    let n = ks[0];
    if n < 2 {
        return Err(Error::Degenerate(format!("hsic needs n >= 2, got {n}")));
    }
    let kd: Vec<f64> = k.data().iter().map(|v| v.as_f64()).collect();
    let ld: Vec<f64> = l.data().iter().map(|v| v.as_f64()).collect();
    let kc = center(&kd, n);
    let lc = center(&ld, n);
    let dot: f64 = kc.iter().zip(&lc).map(|(a, b)| a * b).sum();
    Ok(dot / ((n - 1) as f64 * (n - 1) as f64))
}

/// Linear CKA between two [n, d] feature matrices sharing sample order.
/// Errors if either self-HSIC falls below 1e-12 (constant features).
pub fn cka<T: Elem>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape().len() != 2 || y.shape().len() != 2 {
        return Err(Error::Shape {
            op: "cka",
            details: format!("expected [n, d] matrices, got {:?} and {:?}", x.shape(), y.shape()),
        });
    }
    if x.shape()[0] != y.shape()[0] {
        return Err(Error::Shape {
            op: "cka",
            details: format!(
                "sample counts differ: {} vs {}",
                x.shape()[0],
                y.shape()[0]
            ),
        });
    }
    let k = gram(x)?;
    let l = gram(y)?;
    let kk = hsic(&k, &k)?;
    let ll = hsic(&l, &l)?;
    if kk < 1e-12 || ll < 1e-12 {
        return Err(Error::Degenerate(
            "constant features: self-HSIC below 1e-12".into(),
        ));
    }
    Ok(hsic(&k, &l)? / (kk * ll).sqrt())
}

/// Layer-by-layer CKA grid with row/column labels.
#[derive(Debug, Clone, Serialize)]
pub struct CkaMatrix {
    pub values: Vec<Vec<f64>>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

impl CkaMatrix {
    /// CSV rendering: label header row and label-leading rows, values with
    /// six decimal places.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("layer");
        for c in &self.col_labels {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            out.push_str(label);
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    /// Mean of entries where row and column labels match (by position).
    pub fn mean_diagonal(&self) -> Option<f64> {
        let n = self.row_labels.len().min(self.col_labels.len());
        if n == 0 {
            return None;
        }
        Some((0..n).map(|i| self.values[i][i]).sum::<f64>() / n as f64)
    }

    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, row) in self.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i != j {
                    sum += v;
                    count += 1;
                }
            }
        }
        (count > 0).then(|| sum / count as f64)
    }

    /// JSON summary: mean diagonal, mean off-diagonal, and per-position
    /// matched-stage values.
    pub fn summary(&self) -> serde_json::Value {
        let n = self.row_labels.len().min(self.col_labels.len());
        let matched: Vec<serde_json::Value> = (0..n)
            .map(|i| {
                serde_json::json!({
                    "row": self.row_labels[i],
                    "col": self.col_labels[i],
                    "cka": self.values[i][i],
                })
            })
            .collect();
        serde_json::json!({
            "mean_diagonal": self.mean_diagonal(),
            "mean_off_diagonal": self.mean_off_diagonal(),
            "matched_stages": matched,
        })
    }
}

/// Pairwise CKA between every layer of model A and every layer of model B.
pub fn heatmap<T: Elem>(
    model_a: &[FeatureRecord<T>],
    model_b: &[FeatureRecord<T>],
) -> Result<CkaMatrix> {
    if model_a.is_empty() || model_b.is_empty() {
        return Err(Error::Degenerate("heatmap needs at least one layer per model".into()));
    }
    let n = model_a[0].matrix.shape()[0];
    for rec in model_a.iter().chain(model_b) {
        if rec.matrix.shape()[0] != n {
            return Err(Error::Shape {
                op: "heatmap",
                details: format!(
                    "layer {} has {} samples, expected {n}",
                    rec.layer_label,
                    rec.matrix.shape()[0]
                ),
            });
        }
    }
    let mut values = Vec::with_capacity(model_a.len());
    for a in model_a {
        let mut row = Vec::with_capacity(model_b.len());
        for b in model_b {
            row.push(cka(&a.matrix, &b.matrix)?);
        }
        values.push(row);
    }
    Ok(CkaMatrix {
        values,
        row_labels: model_a.iter().map(|r| r.layer_label.clone()).collect(),
        col_labels: model_b.iter().map(|r| r.layer_label.clone()).collect(),
    })
}

/// Mean CKA over consecutive full mini-batches of two aligned sample
/// streams; trailing partial batches are dropped. Errors if the streams
/// cannot fill even one batch.
pub fn batched_cka<T: Elem>(
    stream_a: &Tensor<T>,
    stream_b: &Tensor<T>,
    batch_size: usize,
) -> Result<f64> {
    if batch_size < 4 {
        return Err(Error::Config(format!(
            "batch_size must be at least 4, got {batch_size}"
        )));
    }
    let (sa, sb) = (stream_a.shape(), stream_b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(Error::Shape {
            op: "batched_cka",
            details: format!("expected aligned [n, d] streams, got {:?} and {:?}", sa, sb),
        });
    }
    let n = sa[0];
    let batches = n / batch_size;
    if batches == 0 {
        return Err(Error::Degenerate(format!(
            "stream of {n} samples cannot fill a batch of {batch_size}"
        )));
    }
    let (da, db) = (sa[1], sb[1]);
    let av = stream_a.to_vec();
    let bv = stream_b.to_vec();
    let mut total = 0.0;
    for b in 0..batches {
        let xa = Tensor::<T>::from_vec(
            vec![batch_size, da],
            av[b * batch_size * da..(b + 1) * batch_size * da].to_vec(),
        )?;
        let xb = Tensor::<T>::from_vec(
            vec![batch_size, db],
            bv[b * batch_size * db..(b + 1) * batch_size * db].to_vec(),
        )?;
        total += cka(&xa, &xb)?;
    }
    Ok(total / batches as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    // Literal four-matrix-product trace oracle: tr(K H L H) / (n-1)^2.
    fn hsic_trace_oracle(k: &[f64], l: &[f64], n: usize) -> f64 {
        let mut h = vec![-1.0 / n as f64; n * n];
        for i in 0..n {
            h[i * n + i] += 1.0;
        }
        let matmul = |a: &[f64], b: &[f64]| {
            let mut c = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    for t in 0..n {
                        c[i * n + j] += a[i * n + t] * b[t * n + j];
                    }
                }
            }
            c
        };
        let prod = matmul(&matmul(&matmul(k, &h), l), &h);
        let tr: f64 = (0..n).map(|i| prod[i * n + i]).sum();
        tr / ((n - 1) as f64 * (n - 1) as f64)
    }

    #[test]
    fn gram_of_identity_is_identity() {
        let x = Tensor::<f64>::eye(2);
        let g = gram(&x).unwrap();
        assert_eq!(g.to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn gram_of_single_unit_row() {
        let x = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(gram(&x).unwrap().to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let mut r = rng(1);
        let x = Tensor::<f64>::randn(vec![5, 3], &mut r);
        let g = gram(&x).unwrap();
        let gv = g.to_vec();
        for i in 0..5 {
            for j in 0..5 {
                assert!((gv[i * 5 + j] - gv[j * 5 + i]).abs() <= 1e-12);
            }
        }
        // PSD check: power iteration on (c*I - G) finds the smallest
        // eigenvalue of G as c - lambda_max(shifted).
        let trace: f64 = (0..5).map(|i| gv[i * 5 + i]).sum();
        let c = trace + 1.0;
        let shifted: Vec<f64> = (0..25)
            .map(|idx| {
                let (i, j) = (idx / 5, idx % 5);
                (if i == j { c } else { 0.0 }) - gv[idx]
            })
            .collect();
        let mut v = vec![1.0; 5];
        for _ in 0..500 {
            let mut next = vec![0.0; 5];
            for i in 0..5 {
                for j in 0..5 {
                    next[i] += shifted[i * 5 + j] * v[j];
                }
            }
            let norm: f64 = next.iter().map(|a| a * a).sum::<f64>().sqrt();
            v = next.iter().map(|a| a / norm).collect();
        }
        let mut lambda = 0.0;
        for i in 0..5 {
            let mut row = 0.0;
            for j in 0..5 {
                row += shifted[i * 5 + j] * v[j];
            }
            lambda += v[i] * row;
        }
        let min_eig = c - lambda;
        assert!(min_eig >= -1e-10, "min eigenvalue {min_eig}");
    }

    #[test]
    fn gram_rejects_non_matrix() {
        assert!(gram(&Tensor::<f64>::zeros(vec![3])).is_err());
    }

    #[test]
    fn hsic_identity_grams_n2_is_one() {
        // Hand derivation: H = [[.5,-.5],[-.5,.5]], HKH = H for K = I, so
        // tr(H * H) / 1 = tr(H) = 1 by idempotence.
        let k = Tensor::<f64>::eye(2);
        assert!((hsic(&k, &k).unwrap() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn hsic_annihilates_constant_gram() {
        let mut r = rng(2);
        let x = Tensor::<f64>::randn(vec![4, 4], &mut r);
        let k = gram(&x).unwrap();
        let l = Tensor::<f64>::full(vec![4, 4], 3.7);
        assert!(hsic(&k, &l).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn hsic_matches_trace_oracle() {
        let mut r = rng(3);
        for _ in 0..20 {
            let n = 6;
            let mut k = vec![0.0; n * n];
            let mut l = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let a: f64 = r.gen_range(-2.0..2.0);
                    let b: f64 = r.gen_range(-2.0..2.0);
                    k[i * n + j] = a;
                    k[j * n + i] = a;
                    l[i * n + j] = b;
                    l[j * n + i] = b;
                }
            }
            let kt = Tensor::<f64>::from_vec(vec![n, n], k.clone()).unwrap();
            let lt = Tensor::<f64>::from_vec(vec![n, n], l.clone()).unwrap();
            let got = hsic(&kt, &lt).unwrap();
            let expect = hsic_trace_oracle(&k, &l, n);
            assert!((got - expect).abs() <= 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn hsic_self_nonnegative_for_psd() {
        let mut r = rng(4);
        for _ in 0..10 {
            let x = Tensor::<f64>::randn(vec![6, 4], &mut r);
            let k = gram(&x).unwrap();
            assert!(hsic(&k, &k).unwrap() >= 0.0);
        }
    }

    #[test]
    fn cka_self_is_one() {
        let mut r = rng(5);
        let x = Tensor::<f64>::randn(vec![8, 5], &mut r);
        assert!((cka(&x, &x).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn cka_symmetry_and_range() {
        let mut r = rng(6);
        for _ in 0..20 {
            let x = Tensor::<f64>::randn(vec![8, 5], &mut r);
            let y = Tensor::<f64>::randn(vec![8, 3], &mut r);
            let a = cka(&x, &y).unwrap();
            let b = cka(&y, &x).unwrap();
            assert!((a - b).abs() <= 1e-10);
            assert!((0.0..=1.0 + 1e-9).contains(&a), "out of range: {a}");
        }
    }

    #[test]
    fn cka_invariances() {
        let mut r = rng(7);
        let x = Tensor::<f64>::randn(vec![8, 3], &mut r);
        let y = Tensor::<f64>::randn(vec![8, 4], &mut r);
        let base = cka(&x, &y).unwrap();
        let scaled = x.scale(3.25).unwrap();
        assert!((cka(&scaled, &y).unwrap() - base).abs() <= 1e-9);
        // Orthogonal Q: rotation in the first two feature coordinates.
        let (c, s) = (0.6f64, 0.8f64);
        let q = Tensor::<f64>::from_vec(
            vec![3, 3],
            vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let rotated = x.matmul(&q).unwrap();
        assert!((cka(&rotated, &y).unwrap() - base).abs() <= 1e-9);
    }

    #[test]
    fn cka_matches_direct_formula_on_permuted_scaled_copy() {
        let mut r = rng(8);
        let x = Tensor::<f64>::randn(vec![8, 3], &mut r);
        let xv = x.to_vec();
        // swap columns 0 and 2, scale column 1 by 2.5
        let mut yv = vec![0.0; 24];
        for i in 0..8 {
            yv[i * 3] = xv[i * 3 + 2];
            yv[i * 3 + 1] = 2.5 * xv[i * 3 + 1];
            yv[i * 3 + 2] = xv[i * 3];
        }
        let y = Tensor::<f64>::from_vec(vec![8, 3], yv).unwrap();
        let got = cka(&x, &y).unwrap();
        // brute-force evaluation from raw grams and the trace oracle
        let k = gram(&x).unwrap().to_vec();
        let l = gram(&y).unwrap().to_vec();
        let kl = hsic_trace_oracle(&k, &l, 8);
        let kk = hsic_trace_oracle(&k, &k, 8);
        let ll = hsic_trace_oracle(&l, &l, 8);
        let expect = kl / (kk * ll).sqrt();
        assert!((got - expect).abs() <= 1e-10);
    }

    #[test]
    fn cka_rejects_degenerate_and_mismatch() {
        let c = Tensor::<f64>::full(vec![6, 3], 1.0);
        let mut r = rng(9);
        let x = Tensor::<f64>::randn(vec![6, 3], &mut r);
        assert!(matches!(cka(&c, &x), Err(Error::Degenerate(_))));
        let y = Tensor::<f64>::randn(vec![5, 3], &mut r);
        assert!(cka(&x, &y).is_err());
    }

    #[test]
    fn heatmap_self_has_unit_diagonal() {
        let mut r = rng(10);
        let recs: Vec<FeatureRecord<f64>> = (0..3)
            .map(|i| {
                FeatureRecord::new(format!("stage{i}"), Tensor::randn(vec![8, 4], &mut r)).unwrap()
            })
            .collect();
        let m = heatmap(&recs, &recs).unwrap();
        for i in 0..3 {
            assert!((m.values[i][i] - 1.0).abs() <= 1e-9);
        }
        assert_eq!(m.row_labels, vec!["stage0", "stage1", "stage2"]);
    }

    #[test]
    fn heatmap_single_layer_equals_cka() {
        let mut r = rng(11);
        let a = FeatureRecord::new("a", Tensor::<f64>::randn(vec![8, 4], &mut r)).unwrap();
        let b = FeatureRecord::new("b", Tensor::<f64>::randn(vec![8, 6], &mut r)).unwrap();
        let m = heatmap(&[a.clone()], &[b.clone()]).unwrap();
        assert_eq!(m.values.len(), 1);
        assert_eq!(m.values[0][0], cka(&a.matrix, &b.matrix).unwrap());
    }

    #[test]
    fn heatmap_entries_match_independent_cka() {
        let mut r = rng(12);
        let av: Vec<FeatureRecord<f64>> = (0..4)
            .map(|i| FeatureRecord::new(format!("a{i}"), Tensor::randn(vec![8, 3], &mut r)).unwrap())
            .collect();
        let bv: Vec<FeatureRecord<f64>> = (0..4)
            .map(|i| FeatureRecord::new(format!("b{i}"), Tensor::randn(vec![8, 5], &mut r)).unwrap())
            .collect();
        let m = heatmap(&av, &bv).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let direct = cka(&av[i].matrix, &bv[j].matrix).unwrap();
                assert_eq!(m.values[i][j], direct);
            }
        }
    }

    #[test]
    fn heatmap_rejects_inconsistent_n() {
        let mut r = rng(13);
        let a = FeatureRecord::new("a", Tensor::<f64>::randn(vec![8, 3], &mut r)).unwrap();
        let b = FeatureRecord::new("b", Tensor::<f64>::randn(vec![6, 3], &mut r)).unwrap();
        assert!(heatmap(&[a], &[b]).is_err());
    }

    #[test]
    fn batched_cka_one_batch_is_plain_cka() {
        let mut r = rng(14);
        let x = Tensor::<f64>::randn(vec![8, 3], &mut r);
        let y = Tensor::<f64>::randn(vec![8, 4], &mut r);
        assert_eq!(batched_cka(&x, &y, 8).unwrap(), cka(&x, &y).unwrap());
    }

    #[test]
    fn batched_cka_identical_batches() {
        let mut r = rng(15);
        let x1 = Tensor::<f64>::randn(vec![6, 3], &mut r);
        let y1 = Tensor::<f64>::randn(vec![6, 4], &mut r);
        let twice = |t: &Tensor<f64>, d: usize| {
            let mut v = t.to_vec();
            v.extend(t.to_vec());
            Tensor::<f64>::from_vec(vec![12, d], v).unwrap()
        };
        let got = batched_cka(&twice(&x1, 3), &twice(&y1, 4), 6).unwrap();
        assert!((got - cka(&x1, &y1).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn batched_cka_mean_of_three_batches() {
        let mut r = rng(16);
        let x = Tensor::<f64>::randn(vec![18, 3], &mut r);
        let y = Tensor::<f64>::randn(vec![18, 5], &mut r);
        let got = batched_cka(&x, &y, 6).unwrap();
        let xv = x.to_vec();
        let yv = y.to_vec();
        let mut expect = 0.0;
        for b in 0..3 {
            let xb = Tensor::<f64>::from_vec(vec![6, 3], xv[b * 18..(b + 1) * 18].to_vec()).unwrap();
            let yb = Tensor::<f64>::from_vec(vec![6, 5], yv[b * 30..(b + 1) * 30].to_vec()).unwrap();
            expect += cka(&xb, &yb).unwrap();
        }
        expect /= 3.0;
        assert!((got - expect).abs() <= 1e-12);
    }

    #[test]
    fn batched_cka_rejects_short_stream_and_small_batch() {
        let mut r = rng(17);
        let x = Tensor::<f64>::randn(vec![5, 3], &mut r);
        let y = Tensor::<f64>::randn(vec![5, 3], &mut r);
        assert!(batched_cka(&x, &y, 8).is_err());
        assert!(batched_cka(&x, &y, 3).is_err());
    }

    #[test]
    fn flatten_collapses_trailing_axes() {
        let x = Tensor::<f64>::zeros(vec![4, 3, 2, 2]);
        assert_eq!(flatten_features(&x).unwrap().shape(), vec![4, 12]);
        let t = Tensor::<f64>::zeros(vec![4, 5, 8]);
        assert_eq!(flatten_features(&t).unwrap().shape(), vec![4, 40]);
    }

    #[test]
    fn pooling_averages_non_channel_axes() {
        let x = Tensor::<f64>::from_vec(vec![1, 2, 1, 2], vec![1.0, 3.0, 10.0, 20.0]).unwrap();
        let p = pooled_features(&x).unwrap();
        assert_eq!(p.shape(), vec![1, 2]);
        assert_eq!(&*p.data(), &[2.0, 15.0]);
        let t = Tensor::<f64>::from_vec(vec![1, 2, 3], vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]).unwrap();
        let q = pooled_features(&t).unwrap();
        assert_eq!(q.shape(), vec![1, 3]);
        assert_eq!(&*q.data(), &[3.0, 5.0, 7.0]);
        assert!(pooled_features(&Tensor::<f64>::zeros(vec![5])).is_err());
    }

    #[test]
    fn csv_has_labels_and_six_decimals() {
        let m = CkaMatrix {
            values: vec![vec![1.0, 0.25], vec![0.5, 0.125]],
            row_labels: vec!["r0".into(), "r1".into()],
            col_labels: vec!["c0".into(), "c1".into()],
        };
        let csv = m.to_csv();
        assert_eq!(
            csv,
            "layer,c0,c1\nr0,1.000000,0.250000\nr1,0.500000,0.125000\n"
        );
        let s = m.summary();
        assert!((s["mean_diagonal"].as_f64().unwrap() - 0.5625).abs() < 1e-12);
        assert!((s["mean_off_diagonal"].as_f64().unwrap() - 0.375).abs() < 1e-12);
    }
}
