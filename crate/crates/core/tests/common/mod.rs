//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use m2fusion::nn::Module;

/// Fourth-order central-difference gradient of `loss` with respect to every
/// parameter of `model`.
pub fn numeric_gradient<M: Module>(model: &M, step: f64, loss: impl Fn(&M) -> f64) -> Vec<f64> {
    let all: Vec<usize> = (0..model.num_params()).collect();
    numeric_gradient_at(model, step, &all, loss)
}

/// As [`numeric_gradient`], restricted to the flat parameter `indices`.
pub fn numeric_gradient_at<M: Module>(model: &M, step: f64, indices: &[usize], loss: impl Fn(&M) -> f64) -> Vec<f64> {
    let mut probe = model.clone();
    indices
        .iter()
        .map(|&i| {
            let original = flat_get(&probe, i);
            let mut at = |offset: f64| {
                flat_set(&mut probe, i, original + offset);
                loss(&probe)
            };
            let g = stencil(step, &mut at);
            flat_set(&mut probe, i, original);
            g
        })
        .collect()
}

/// Fourth-order central-difference gradient of `loss` with respect to a plain vector.
pub fn numeric_gradient_vec(x: &[f64], step: f64, loss: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let original = probe[i];
            let g = stencil(step, &mut |offset| {
                probe[i] = original + offset;
                loss(&probe)
            });
            probe[i] = original;
            g
        })
        .collect()
}

fn stencil(h: f64, f: &mut impl FnMut(f64) -> f64) -> f64 {
    let near = f(h) - f(-h);
    let far = f(2.0 * h) - f(-2.0 * h);
    (8.0 * near - far) / (12.0 * h)
}

fn flat_get<M: Module>(m: &M, mut i: usize) -> f64 {
    for p in m.params() {
        if i < p.len() {
            return p[i];
        }
        i -= p.len();
    }
    panic!("parameter index out of range")
}

fn flat_set<M: Module>(m: &mut M, mut i: usize, v: f64) {
    for p in m.params_mut() {
        if i < p.len() {
            p[i] = v;
            return;
        }
        i -= p.len();
    }
    panic!("parameter index out of range")
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over two gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// AUC by counting every (positive, negative) pair; ties count one half.
pub fn brute_force_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

pub fn scalar_max_pool(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = vec![f64::NEG_INFINITY; d];
    for r in rows {
        for j in 0..d {
            if r[j] > out[j] {
                out[j] = r[j];
            }
        }
    }
    out
}

pub fn scalar_avg_pool(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            out[j] += r[j];
        }
    }
    out.iter().map(|v| v / rows.len() as f64).collect()
}

/// Sorts rows by descending squared norm (stable), convolves each channel
/// with zero padding and takes the channel maximum.
pub fn scalar_conv_pool(rows: &[Vec<f64>], kernel: &[Vec<f64>]) -> Vec<f64> {
    let norm = |r: &Vec<f64>| r.iter().map(|v| v * v).sum::<f64>();
    let mut sorted: Vec<&Vec<f64>> = rows.iter().collect();
    sorted.sort_by(|a, b| norm(b).partial_cmp(&norm(a)).unwrap());
    let n = sorted.len() as isize;
    let d = rows[0].len();
    let mut out = vec![f64::NEG_INFINITY; d];
    for c in 0..d {
        let ks = kernel[c].len() as isize;
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..ks {
                let pos = i + j - ks / 2;
                if (0..n).contains(&pos) {
                    acc += kernel[c][j as usize] * sorted[pos as usize][c];
                }
            }
            out[c] = out[c].max(acc);
        }
    }
    out
}

/// `|a - b| <= tol * max(1, |b|)` elementwise.
pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * y.abs().max(1.0))
}
