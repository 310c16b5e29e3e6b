//! Principal-component projection of embeddings onto the plane.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

/// Projection failure. `points` holds one zero coordinate per input so
/// callers that only need a placeholder layout can still proceed.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionError {
    pub reason: String,
    pub points: Vec<Point2>,
}

impl fmt::Display for ProjectionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.reason)
    }
}

impl std::error::Error for ProjectionError {}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as rows.
pub(crate) fn symmetric_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off.sqrt() <= 1e-15 * scale || scale == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

/// Flips each coordinate column so its largest-magnitude entry is positive.
fn fix_signs(cols: &mut [Vec<f64>]) {
    for c in cols {
        let pivot = c.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

/// Centers `embeddings` and projects them onto their top two principal directions.
///
/// When the dimension exceeds the number of points the eigenproblem is solved
/// on the Gram matrix instead, which yields the same coordinates.
pub fn project2d(embeddings: &[Vec<f64>]) -> Result<Vec<Point2>, ProjectionError> {
    let n = embeddings.len();
    let zeros = vec![Point2 { x: 0.0, y: 0.0 }; n];
    let fail = |reason: String| ProjectionError { reason, points: zeros.clone() };
    if n < 2 {
        return Err(fail(format!("projection needs at least two embeddings, got {n}")));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|z| z.len() != d) {
        return Err(fail("embeddings must share one nonzero width".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| embeddings.iter().map(|z| z[j]).sum::<f64>() / n as f64).collect();
    let x: Vec<Vec<f64>> = embeddings.iter().map(|z| z.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let spread: f64 = x.iter().flatten().map(|v| v * v).sum();
    let magnitude = embeddings.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if spread <= (f64::EPSILON * magnitude).powi(2) * (n * d) as f64 {
        return Err(fail("embeddings have rank 0 after centering: all points coincide".into()));
    }
    let mut cols = if d <= n {
        let cov: Vec<Vec<f64>> =
            (0..d).map(|i| (0..d).map(|j| x.iter().map(|r| r[i] * r[j]).sum::<f64>()).collect()).collect();
        let (_, vecs) = symmetric_eigen(cov);
        (0..2)
            .map(|k| x.iter().map(|r| vecs.get(k).map_or(0.0, |v| r.iter().zip(v).map(|(a, b)| a * b).sum())).collect())
            .collect::<Vec<Vec<f64>>>()
    } else {
        let gram: Vec<Vec<f64>> =
            (0..n).map(|i| (0..n).map(|j| x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum::<f64>()).collect()).collect();
        let (vals, vecs) = symmetric_eigen(gram);
        // Roundoff-level eigenvalues stand for missing directions; their
        // square roots would be far larger than the noise itself.
        let root = |k: usize| if vals[k] > 1e-12 * vals[0] { vals[k].sqrt() } else { 0.0 };
        (0..2).map(|k| vecs[k].iter().map(|u| u * root(k)).collect()).collect()
    };
    fix_signs(&mut cols);
    Ok((0..n).map(|i| Point2 { x: cols[0][i], y: cols[1][i] }).collect())
}
