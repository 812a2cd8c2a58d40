//! Direct-formula reference implementations in double-double arithmetic.
//! Nothing here calls into the engine's numeric kernels.

use super::dd::{self, Dd, TWO_PI};

pub type Mat = Vec<Vec<Dd>>;

pub fn lift(v: &[f64]) -> Vec<Dd> {
    v.iter().map(|&x| Dd::new(x)).collect()
}

fn softmax(logits: &[f64]) -> Vec<Dd> {
    let c = lift(logits);
    let lse = dd::logsumexp(&c);
    c.iter().map(|&x| (x - lse).exp()).collect()
}

pub fn msp(logits: &[f64]) -> f64 {
    softmax(logits)
        .into_iter()
        .fold(Dd::ZERO, Dd::max)
        .to_f64()
}

pub fn energy(logits: &[f64], t: f64) -> f64 {
    let scaled: Vec<Dd> = logits.iter().map(|&c| Dd::new(c) / t).collect();
    (dd::logsumexp(&scaled) * t).to_f64()
}

pub fn gen(logits: &[f64], lambda: f64) -> f64 {
    let p = softmax(logits);
    -dd::sum(p.iter().map(|&p| (p * (Dd::ONE - p)).powf(lambda))).to_f64()
}

fn unit(v: &[f64]) -> Vec<Dd> {
    let n = dd::sum(v.iter().map(|&x| Dd::new(x) * x)).sqrt();
    v.iter().map(|&x| Dd::new(x) / n).collect()
}

pub fn knn(train: &[Vec<f64>], z: &[f64], k: usize) -> f64 {
    let q = unit(z);
    let mut d: Vec<Dd> = train
        .iter()
        .map(|t| {
            let u = unit(t);
            dd::sum(u.iter().zip(&q).map(|(&a, &b)| (a - b) * (a - b))).sqrt()
        })
        .collect();
    d.sort_by(Dd::total_cmp);
    -d[k - 1].to_f64()
}

/// Gauss-Jordan inverse with partial pivoting; also returns `ln |det|`.
pub fn invert(m: &Mat) -> (Mat, Dd) {
    let n = m.len();
    let mut a: Mat = m.clone();
    let mut inv: Mat = (0..n)
        .map(|i| (0..n).map(|j| if i == j { Dd::ONE } else { Dd::ZERO }).collect())
        .collect();
    let mut logdet = Dd::ZERO;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, piv);
        inv.swap(col, piv);
        let p = a[col][col];
        logdet = logdet + p.abs().ln();
        for j in 0..n {
            a[col][j] = a[col][j] / p;
            inv[col][j] = inv[col][j] / p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r][col];
            if f.hi == 0.0 {
                continue;
            }
            for j in 0..n {
                a[r][j] = a[r][j] - f * a[col][j];
                inv[r][j] = inv[r][j] - f * inv[col][j];
            }
        }
    }
    (inv, logdet)
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// eigenvalues and eigenvectors (as columns of the second matrix).
#[allow(clippy::needless_range_loop)]
pub fn jacobi_eigen(m: &Mat) -> (Vec<Dd>, Mat) {
    let n = m.len();
    let mut a = m.clone();
    let mut v: Mat = (0..n)
        .map(|i| (0..n).map(|j| if i == j { Dd::ONE } else { Dd::ZERO }).collect())
        .collect();
    let scale = dd::sum(a.iter().flatten().map(|&x| x * x)).sqrt();
    for _sweep in 0..60 {
        let off = dd::sum(
            (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j]),
        )
        .sqrt();
        if off.hi <= 1e-30 * scale.hi {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs().hi <= 1e-34 * scale.hi {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (a[p][q] * 2.0);
                let t = {
                    let r = (theta * theta + 1.0).sqrt();
                    let t = Dd::ONE / (theta.abs() + r);
                    if theta.hi < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = Dd::ONE / (t * t + 1.0).sqrt();
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
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Class-conditional Gaussians with a shared, ridge-regularised covariance.
pub struct GaussOracle {
    means: Vec<Option<Vec<Dd>>>,
    priors: Vec<Dd>,
    precision: Mat,
    logdet: Dd,
    cov: Mat,
}

impl GaussOracle {
    /// `reg_relative` scales `trace(Σ) / d`.
    pub fn fit(train: &[(Vec<f64>, usize)], classes: usize, reg_relative: f64) -> Self {
        let d = train[0].0.len();
        let n = train.len() as f64;
        let means: Vec<Option<Vec<Dd>>> = (0..classes)
            .map(|c| {
                let members: Vec<&Vec<f64>> =
                    train.iter().filter(|(_, k)| *k == c).map(|(v, _)| v).collect();
                (!members.is_empty()).then(|| {
                    (0..d)
                        .map(|j| dd::sum(members.iter().map(|v| Dd::new(v[j]))) / members.len() as f64)
                        .collect()
                })
            })
            .collect();
        let mut cov: Mat = vec![vec![Dd::ZERO; d]; d];
        for (v, c) in train {
            let mu = means[*c].as_ref().unwrap();
            let x: Vec<Dd> = v.iter().zip(mu).map(|(&a, &m)| Dd::new(a) - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] = cov[i][j] + x[i] * x[j];
                }
            }
        }
        for row in cov.iter_mut() {
            for x in row.iter_mut() {
                *x = *x / n;
            }
        }
        let eps = dd::sum((0..d).map(|i| cov[i][i])) * reg_relative / d as f64;
        for (i, row) in cov.iter_mut().enumerate() {
            row[i] = row[i] + eps;
        }
        let (precision, logdet) = invert(&cov);
        let priors = (0..classes)
            .map(|c| Dd::new(train.iter().filter(|(_, k)| *k == c).count() as f64) / n)
            .collect();
        GaussOracle {
            means,
            priors,
            precision,
            logdet,
            cov,
        }
    }

    /// Condition number of the regularised covariance.
    pub fn condition(&self) -> f64 {
        let (vals, _) = jacobi_eigen(&self.cov);
        let hi = vals.iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max);
        let lo = vals.iter().map(|v| v.to_f64().abs()).fold(f64::INFINITY, f64::min);
        hi / lo
    }

    fn sq_dist(&self, z: &[f64], c: usize) -> Option<Dd> {
        let mu = self.means[c].as_ref()?;
        let x: Vec<Dd> = z.iter().zip(mu).map(|(&a, &m)| Dd::new(a) - m).collect();
        Some(dd::sum(x.iter().enumerate().map(|(i, &xi)| {
            xi * dd::sum(self.precision[i].iter().zip(&x).map(|(&p, &xj)| p * xj))
        })))
    }

    pub fn mahalanobis(&self, z: &[f64]) -> f64 {
        (0..self.means.len())
            .filter_map(|c| self.sq_dist(z, c))
            .map(|m| -m)
            .fold(Dd::new(f64::NEG_INFINITY), Dd::max)
            .to_f64()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let d = z.len() as f64;
        let norm = (TWO_PI.ln() * d + self.logdet) * -0.5;
        let terms: Vec<Dd> = (0..self.means.len())
            .filter_map(|c| self.sq_dist(z, c).map(|m| self.priors[c].ln() + norm - m * 0.5))
            .collect();
        dd::logsumexp(&terms).to_f64()
    }
}

fn logits(w: &[Vec<f64>], b: &[f64], z: &[Dd]) -> Vec<Dd> {
    w.iter().zip(b).map(|(row, &bc)| dd::dot(row, z) + bc).collect()
}

/// `pinv(W)` via the normal equations of whichever side has full rank.
fn pinv_times(w: &[Vec<f64>], b: &[f64]) -> Vec<Dd> {
    let c = w.len();
    let d = w[0].len();
    if c <= d {
        // Wᵀ (W Wᵀ)⁻¹ b
        let g: Mat = (0..c)
            .map(|i| (0..c).map(|j| dd::dot(&w[i], &lift(&w[j]))).collect())
            .collect();
        let (gi, _) = invert(&g);
        let y: Vec<Dd> = (0..c).map(|i| dd::dot(b, &gi[i])).collect();
        (0..d).map(|k| dd::sum((0..c).map(|i| y[i] * w[i][k]))).collect()
    } else {
        // (WᵀW)⁻¹ Wᵀ b
        let g: Mat = (0..d)
            .map(|i| (0..d).map(|j| dd::sum((0..c).map(|r| Dd::new(w[r][i]) * w[r][j]))).collect())
            .collect();
        let (gi, _) = invert(&g);
        let wtb: Vec<Dd> = (0..d).map(|k| dd::sum((0..c).map(|r| Dd::new(w[r][k]) * b[r]))).collect();
        (0..d).map(|i| dd::sum(gi[i].iter().zip(&wtb).map(|(&a, &x)| a * x))).collect()
    }
}

/// ViM with `x = z + o`, `o = -pinv(W) b`, residual subspace of the trailing
/// `d - principal` eigenvectors of `Σ x xᵀ`, and α over every training vector.
pub fn vim(train: &[Vec<f64>], w: &[Vec<f64>], b: &[f64], principal: usize, z: &[f64], record_logits: &[f64]) -> f64 {
    let d = z.len();
    let o: Vec<Dd> = pinv_times(w, b).into_iter().map(|v| -v).collect();
    let shift = |v: &[f64]| -> Vec<Dd> { v.iter().zip(&o).map(|(&a, &oi)| oi + a).collect() };
    let xs: Vec<Vec<Dd>> = train.iter().map(|v| shift(v)).collect();
    let mut g: Mat = vec![vec![Dd::ZERO; d]; d];
    for x in &xs {
        for i in 0..d {
            for j in 0..d {
                g[i][j] = g[i][j] + x[i] * x[j];
            }
        }
    }
    let (vals, vecs) = jacobi_eigen(&g);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let residual = &order[principal..];
    let norm = |x: &[Dd]| -> Dd {
        dd::sum(residual.iter().map(|&c| {
            let p = dd::sum((0..d).map(|k| vecs[k][c] * x[k]));
            p * p
        }))
        .sqrt()
    };
    let num = dd::sum(train.iter().map(|v| {
        logits(w, b, &lift(v)).into_iter().fold(Dd::new(f64::NEG_INFINITY), Dd::max)
    }));
    let den = dd::sum(xs.iter().map(|x| norm(x)));
    let alpha = if den.hi == 0.0 { Dd::ONE } else { num / den };
    (dd::logsumexp(&lift(record_logits)) - alpha * norm(&shift(z))).to_f64()
}

/// Linear-interpolation percentile over the pooled entries.
pub fn percentile(values: &[f64], pct: f64) -> Dd {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let h = Dd::new((s.len() - 1) as f64) * pct / 100.0;
    let lo = h.hi.floor() as usize;
    if lo + 1 >= s.len() {
        return Dd::new(s[s.len() - 1]);
    }
    let frac = h - lo as f64;
    Dd::new(s[lo]) + frac * (Dd::new(s[lo + 1]) - s[lo])
}

fn energy_of(l: &[Dd]) -> f64 {
    dd::logsumexp(l).to_f64()
}

fn pooled(train: &[Vec<f64>]) -> Vec<f64> {
    train.iter().flatten().copied().collect()
}

pub fn react(train: &[Vec<f64>], w: &[Vec<f64>], b: &[f64], pct: f64, z: &[f64]) -> f64 {
    let t = percentile(&pooled(train), pct);
    let clipped: Vec<Dd> = z.iter().map(|&v| if Dd::new(v) > t { t } else { Dd::new(v) }).collect();
    energy_of(&logits(w, b, &clipped))
}

/// DICE, optionally after ReAct clipping at `clip_pct`.
pub fn dice(train: &[Vec<f64>], w: &[Vec<f64>], b: &[f64], keep: f64, clip_pct: Option<f64>, z: &[f64]) -> f64 {
    let d = z.len();
    let k = ((keep * d as f64).floor() as usize).max(1).min(d);
    let n = train.len() as f64;
    let sparse: Vec<Vec<f64>> = w
        .iter()
        .map(|row| {
            let contrib: Vec<Dd> = (0..d)
                .map(|j| dd::sum(train.iter().map(|v| Dd::new(row[j]) * v[j])) / n)
                .collect();
            let mut idx: Vec<usize> = (0..d).collect();
            idx.sort_by(|&a, &b| contrib[b].total_cmp(&contrib[a]).then(a.cmp(&b)));
            let mut out = vec![0.0; d];
            for &j in &idx[..k] {
                out[j] = row[j];
            }
            out
        })
        .collect();
    let x: Vec<Dd> = match clip_pct {
        Some(p) => {
            let t = percentile(&pooled(train), p);
            z.iter().map(|&v| if Dd::new(v) > t { t } else { Dd::new(v) }).collect()
        }
        None => lift(z),
    };
    energy_of(&logits(&sparse, b, &x))
}

pub fn ash(train: &[Vec<f64>], w: &[Vec<f64>], b: &[f64], pct: f64, z: &[f64]) -> f64 {
    let t = percentile(&pooled(train), pct);
    let s1 = dd::sum(z.iter().map(|&v| Dd::new(v)));
    let kept: Vec<Dd> = z
        .iter()
        .map(|&v| if Dd::new(v) < t { Dd::ZERO } else { Dd::new(v) })
        .collect();
    let s2 = dd::sum(kept.iter().copied());
    if s2.hi == 0.0 {
        return dd::logsumexp(&lift(b)).to_f64();
    }
    let scale = (s1 / s2).exp();
    let shaped: Vec<Dd> = kept.iter().map(|&v| v * scale).collect();
    energy_of(&logits(w, b, &shaped))
}

/// Bilinear sample with explicit corner weights; `None` beyond one cell
/// outside the map.
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> Option<Dd> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let y = y.max(0.0).min((h - 1) as f64);
    let x = x.max(0.0).min((w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = Dd::new(y) - y0 as f64;
    let lx = Dd::new(x) - x0 as f64;
    let (hy, hx) = (Dd::ONE - ly, Dd::ONE - lx);
    let at = |r: usize, c: usize| plane[r * w + c];
    Some(
        hy * hx * at(y0, x0) + hy * lx * at(y0, x1) + ly * hx * at(y1, x0) + ly * lx * at(y1, x1),
    )
}

/// Aligned RoIAlign with a 2×2 grid per bin, as channel-major `R × R` crops.
pub fn roi_align(
    data: &[f64],
    shape: (usize, usize, usize),
    scale: f64,
    bbox: [f64; 4],
    r: usize,
) -> Vec<f64> {
    let (ch, h, w) = shape;
    let x0 = bbox[0] * scale - 0.5;
    let y0 = bbox[1] * scale - 0.5;
    let bw = (bbox[2] * scale - 0.5 - x0) / r as f64;
    let bh = (bbox[3] * scale - 0.5 - y0) / r as f64;
    let mut out = Vec::new();
    for c in 0..ch {
        let plane = &data[c * h * w..(c + 1) * h * w];
        for py in 0..r {
            for px in 0..r {
                let mut acc = Dd::ZERO;
                for iy in 0..2 {
                    for ix in 0..2 {
                        let y = y0 + py as f64 * bh + (iy as f64 + 0.5) * 0.5 * bh;
                        let x = x0 + px as f64 * bw + (ix as f64 + 0.5) * 0.5 * bw;
                        acc = acc + bilinear(plane, h, w, y, x).unwrap_or(Dd::ZERO);
                    }
                }
                out.push((acc / 4.0).to_f64());
            }
        }
    }
    out
}

pub fn channel_means(crop: &[f64], channels: usize) -> Vec<f64> {
    let plane = crop.len() / channels;
    (0..channels)
        .map(|c| (dd::sum(crop[c * plane..(c + 1) * plane].iter().map(|&v| Dd::new(v))) / plane as f64).to_f64())
        .collect()
}
