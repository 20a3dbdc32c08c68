//! Slow, direct reference implementations used to check `agcl-core`.
//!
//! Everything here works on plain row-major slices and shares no code with
//! the library under test.

/// InfoNCE loss with the positive logit first.
pub fn info_nce(q: &[f64], k: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let logits: Vec<f64> = std::iter::once(dot(q, k) / tau)
        .chain(negatives.iter().map(|n| dot(q, n) / tau))
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[0]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn matvec(m: &[f64], n: usize, v: &[f64]) -> Vec<f64> {
    (0..n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

/// Eigenpairs of a symmetric positive semidefinite `n × n` matrix, largest
/// first, by power iteration with Hotelling deflation.
pub fn psd_eigenpairs(matrix: &[f64], n: usize) -> Vec<(f64, Vec<f64>)> {
    assert_eq!(matrix.len(), n * n);
    let mut b = matrix.to_vec();
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let mut out = Vec::with_capacity(n);
    for round in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7 + round * 3) % 11) as f64 / 13.0).collect();
        let s = norm(&v);
        v.iter_mut().for_each(|x| *x /= s);
        let mut lambda = 0.0;
        for _ in 0..200_000 {
            let w = matvec(&b, n, &v);
            let len = norm(&w);
            if len <= f64::MIN_POSITIVE || scale == 0.0 {
                lambda = 0.0;
                break;
            }
            // The Rayleigh quotient is accurate to second order in the
            // eigenvector error, so a loose residual still gives a tight value.
            lambda = dot(&w, &v);
            let resid = w.iter().zip(&v).map(|(a, c)| (a - lambda * c).powi(2)).sum::<f64>().sqrt();
            v = w.iter().map(|x| x / len).collect();
            if resid <= 1e-14 * scale {
                break;
            }
        }
        for i in 0..n {
            for j in 0..n {
                b[i * n + j] -= lambda * v[i] * v[j];
            }
        }
        out.push((lambda.max(0.0), v));
    }
    out
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = m[i * cols + j];
        }
    }
    t
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let x = a[i * k + p];
            for j in 0..m {
                out[i * m + j] += x * b[p * m + j];
            }
        }
    }
    out
}

/// Nuclear norm and singular value thresholding of a `rows × cols` matrix.
///
/// Uses the smaller Gram matrix, so no structurally zero eigenvalue goes
/// through a square root.
pub fn nuclear_and_svt(m: &[f64], rows: usize, cols: usize, tau: f64) -> (f64, Vec<f64>) {
    let wide = rows < cols;
    let mt = transpose(m, rows, cols);
    let (gram, n) = if wide {
        (matmul(m, &mt, rows, cols, rows), rows)
    } else {
        (matmul(&mt, m, cols, rows, cols), cols)
    };
    let pairs = psd_eigenpairs(&gram, n);
    let nuclear = pairs.iter().map(|(l, _)| l.sqrt()).sum();
    // svt(M) = M · Σ (max(σ - τ, 0) / σ) v vᵀ, mirrored for wide M.
    let mut p = vec![0.0; n * n];
    for (l, v) in &pairs {
        let s = l.sqrt();
        if s > tau {
            let f = (s - tau) / s;
            for i in 0..n {
                for j in 0..n {
                    p[i * n + j] += f * v[i] * v[j];
                }
            }
        }
    }
    let shrunk = if wide {
        matmul(&p, m, rows, rows, cols)
    } else {
        matmul(m, &p, rows, cols, cols)
    };
    (nuclear, shrunk)
}

/// Whether `A + shift·I` admits a Cholesky factorization, i.e. whether every
/// eigenvalue of the symmetric matrix `A` exceeds `-shift`.
pub fn cholesky_succeeds(a: &[f64], n: usize, shift: f64) -> bool {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j] + if i == j { shift } else { 0.0 };
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return false;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    true
}

/// Foreground pixels with a 4-neighbour outside the mask or the image.
pub fn boundary(bits: &[bool], height: usize, width: usize) -> Vec<(f64, f64)> {
    let (h, w) = (height as i64, width as i64);
    let on = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && bits[(y * w + x) as usize];
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if on(y, x) && (!on(y - 1, x) || !on(y + 1, x) || !on(y, x - 1) || !on(y, x + 1)) {
                pts.push((y as f64, x as f64));
            }
        }
    }
    pts
}

/// Both directed sets of boundary-to-boundary distances, by exhaustive search.
pub fn surface_distances(a: &[bool], b: &[bool], height: usize, width: usize) -> Vec<f64> {
    let (pa, pb) = (boundary(a, height, width), boundary(b, height, width));
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect::<Vec<_>>()
    };
    let mut d = directed(&pa, &pb);
    d.extend(directed(&pb, &pa));
    d
}

/// Linear-interpolation (type 7) quantile.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Positives and negatives of a Top-`n` split, by counting for each patch
/// how many others beat it (higher score, or equal score at a lower index).
pub fn top_n_split(scores: &[f64], anchor: usize, n: usize) -> (Vec<usize>, Vec<usize>) {
    let others = || (0..scores.len()).filter(move |&i| i != anchor);
    let beaten_by = |i: usize| {
        others()
            .filter(|&j| j != i && (scores[j] > scores[i] || (scores[j] == scores[i] && j < i)))
            .count()
    };
    others().partition(|&i| beaten_by(i) < n)
}
