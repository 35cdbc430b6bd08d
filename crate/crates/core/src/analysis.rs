//! Frequency-domain statistics and principal-component embeddings of
//! feature populations.

use std::path::Path;

use image::GrayImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::imageio::to_u8;
use crate::tensor::Tensor;

fn plane_of(t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::param(format!("expected a 2-D plane, got shape {:?}", t.shape())));
    }
    Ok(t.plane_dims())
}

/// Unnormalized forward 2-D DFT of a row-major `h x w` plane:
/// `F(u, v) = sum_{y,x} f(y, x) exp(-2 pi i (u y / h + v x / w))`.
pub fn dft2(data: &[f64], h: usize, w: usize) -> Result<Vec<Complex<f64>>> {
    if data.len() != h * w {
        return Err(Error::param("plane size does not match its dimensions"));
    }
    let mut buf: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    if buf.is_empty() {
        return Ok(buf);
    }
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    Ok(buf)
}

/// Move the zero-frequency bin from index `(0, 0)` to `(h / 2, w / 2)`.
pub fn fftshift<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for y in 0..h {
        for x in 0..w {
            out[((y + h / 2) % h) * w + (x + w / 2) % w] = data[y * w + x];
        }
    }
    out
}

/// `log(1 + |F|)` of one plane, origin-centered.
pub fn log_spectrum(t: &Tensor) -> Result<Vec<f64>> {
    let (h, w) = plane_of(t)?;
    let f = dft2(t.data(), h, w)?;
    let mags: Vec<f64> = f.iter().map(|c| c.norm().ln_1p()).collect();
    Ok(fftshift(&mags, h, w))
}

/// Mean log-magnitude spectrum of a population with per-bin standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumMap {
    pub mean: Tensor,
    pub stderr: Tensor,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSidecar {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub origin: [usize; 2],
}

pub fn mean_log_spectrum(features: &[Tensor]) -> Result<SpectrumMap> {
    if features.len() < 2 {
        return Err(Error::param("a spectrum map needs at least two inputs"));
    }
    let (h, w) = plane_of(&features[0])?;
    for f in features {
        features[0].check_same_shape(f)?;
    }
    let spectra: Vec<Vec<f64>> = features.iter().map(log_spectrum).collect::<Result<_>>()?;
    let n = spectra.len() as f64;
    let mut mean = vec![0.0; h * w];
    for s in &spectra {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; h * w];
    for s in &spectra {
        for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let stderr = var.iter().map(|s| (s / (n - 1.0)).sqrt() / n.sqrt()).collect();
    Ok(SpectrumMap {
        mean: Tensor::new(vec![h, w], mean)?,
        stderr: Tensor::new(vec![h, w], stderr)?,
        count: features.len(),
    })
}

impl SpectrumMap {
    pub fn origin(&self) -> (usize, usize) {
        let (h, w) = self.mean.plane_dims();
        (h / 2, w / 2)
    }

    /// Min-max normalized 8-bit rendering of the mean map.
    pub fn render(&self) -> GrayImage {
        let (h, w) = self.mean.plane_dims();
        let d = self.mean.data();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let px = d.iter().map(|&v| to_u8((v - lo) / span * 255.0)).collect();
        GrayImage::from_raw(w as u32, h as u32, px).expect("buffer matches dimensions")
    }

    /// Write `<stem>.mean.dnft`, `<stem>.stderr.dnft`, `<stem>.json` and
    /// optionally `<stem>.png` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str, png: bool) -> Result<()> {
        let (h, w) = self.mean.plane_dims();
        fsutil::write_atomic(&dir.join(format!("{stem}.mean.dnft")), &container::encode(&self.mean)?)?;
        fsutil::write_atomic(
            &dir.join(format!("{stem}.stderr.dnft")),
            &container::encode(&self.stderr)?,
        )?;
        let (oy, ox) = self.origin();
        fsutil::write_json(
            &dir.join(format!("{stem}.json")),
            &SpectrumSidecar {
                count: self.count,
                height: h,
                width: w,
                origin: [oy, ox],
            },
        )?;
        if png {
            crate::imageio::save_png(&dir.join(format!("{stem}.png")), &self.render())?;
        }
        Ok(())
    }
}

/// Ratio of geometric to arithmetic mean of the non-DC power spectrum.
///
/// The periodogram is first averaged over each bin's 3x3 circular
/// neighbourhood (DC excluded); a raw periodogram of white noise has
/// exponentially distributed bins and a flatness near `exp(-0.5772)`.
pub fn spectral_flatness(t: &Tensor) -> Result<f64> {
    let (h, w) = plane_of(t)?;
    let first = t.data().first().copied().unwrap_or(0.0);
    if t.data().iter().all(|&v| v == first) {
        return Err(Error::Metric("spectral flatness of a constant image".into()));
    }
    if !t.all_finite() {
        return Err(Error::Metric("spectral flatness of a non-finite image".into()));
    }
    let power: Vec<f64> = dft2(t.data(), h, w)?.iter().map(|c| c.norm_sqr()).collect();
    let mut log_sum = 0.0;
    let mut sum = 0.0;
    let mut bins = 0usize;
    for u in 0..h {
        for v in 0..w {
            if u == 0 && v == 0 {
                continue;
            }
            let mut acc = 0.0;
            let mut cnt = 0usize;
            for du in [h - 1, 0, 1] {
                for dv in [w - 1, 0, 1] {
                    let (uu, vv) = ((u + du) % h, (v + dv) % w);
                    if (uu, vv) != (0, 0) {
                        acc += power[uu * w + vv];
                        cnt += 1;
                    }
                }
            }
            let s = acc / cnt as f64;
            log_sum += s.ln();
            sum += s;
            bins += 1;
        }
    }
    if bins == 0 || sum <= 0.0 {
        return Err(Error::Metric("no non-DC spectral energy".into()));
    }
    let n = bins as f64;
    Ok(((log_sum / n).exp() / (sum / n)).clamp(0.0, 1.0))
}

/// Principal-component coordinates of a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// `n x k` projections of the centered features.
    pub coords: Vec<Vec<f64>>,
    /// `k x d` unit principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component.
    pub variances: Vec<f64>,
    pub mean: Vec<f64>,
}

impl Embedding {
    pub fn coords_tensor(&self) -> Result<Tensor> {
        let k = self.components.len();
        Tensor::new(
            vec![self.coords.len(), k],
            self.coords.iter().flatten().copied().collect(),
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormalize columns in place (twice-applied modified Gram-Schmidt);
/// columns that collapse are replaced by fresh random directions.
fn orthonormalize(cols: &mut [Vec<f64>], rng: &mut ChaCha8Rng) {
    for i in 0..cols.len() {
        for attempt in 0..8 {
            for _ in 0..2 {
                for j in 0..i {
                    let (done, rest) = cols.split_at_mut(i);
                    let p = dot(&rest[0], &done[j]);
                    for (v, q) in rest[0].iter_mut().zip(&done[j]) {
                        *v -= p * q;
                    }
                }
            }
            let norm = dot(&cols[i], &cols[i]).sqrt();
            if norm > 1e-10 && norm.is_finite() {
                cols[i].iter_mut().for_each(|v| *v /= norm);
                break;
            }
            assert!(attempt < 7, "cannot complete an orthonormal basis");
            cols[i] = (0..cols[i].len()).map(|_| StandardNormal.sample(rng)).collect();
        }
    }
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi
/// rotations. Returns eigenvalues and eigenvectors as rows.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
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
    let values = (0..n).map(|i| a[i][i]).collect();
    let vectors = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (values, vectors)
}

/// Project centered features onto their top `k` principal directions,
/// found by block subspace iteration on the covariance operator with a
/// Rayleigh-Ritz step. Each direction's largest-magnitude loading is made
/// positive.
pub fn pca_embed(features: &[Tensor], k: usize) -> Result<Embedding> {
    let n = features.len();
    let d = features.first().map(Tensor::len).unwrap_or(0);
    if k == 0 {
        return Err(Error::param("embedding dimension must be at least 1"));
    }
    if k > d {
        return Err(Error::param(format!("cannot take {k} components of {d}-dimensional features")));
    }
    if n < k {
        return Err(Error::param(format!("{n} samples are too few for {k} components")));
    }
    for f in features {
        features[0].check_same_shape(f)?;
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.data().iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let apply = |q: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for row in &x {
            let s = dot(row, q);
            for (o, r) in out.iter_mut().zip(row) {
                *o += s * r;
            }
        }
        out
    };

    let block = (k + 4).min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut q: Vec<Vec<f64>> = (0..block)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    orthonormalize(&mut q, &mut rng);
    let mut values = Vec::new();
    let mut vectors = Vec::new();
    for _iter in 0..2000 {
        let z: Vec<Vec<f64>> = q.iter().map(|c| apply(c)).collect();
        let h: Vec<Vec<f64>> = q.iter().map(|qi| z.iter().map(|zj| dot(qi, zj)).collect()).collect();
        let (vals, vecs) = jacobi_eigen(h);
        let mut order: Vec<usize> = (0..block).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        // Ritz vectors and their images under the operator.
        let ritz: Vec<Vec<f64>> = order
            .iter()
            .map(|&j| {
                let mut v = vec![0.0; d];
                for (c, qi) in vecs[j].iter().zip(&q) {
                    for (o, e) in v.iter_mut().zip(qi) {
                        *o += c * e;
                    }
                }
                v
            })
            .collect();
        let scale = vals.iter().copied().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let converged = order.iter().take(k).zip(&ritz).all(|(&j, v)| {
            let av = apply(v);
            let r: f64 = av.iter().zip(v).map(|(a, b)| (a - vals[j] * b).powi(2)).sum::<f64>().sqrt();
            r <= 1e-11 * scale
        });
        values = order.iter().map(|&j| vals[j]).collect();
        vectors = ritz;
        if converged || block == d {
            break;
        }
        let mut next: Vec<Vec<f64>> = vectors.iter().map(|v| apply(v)).collect();
        orthonormalize(&mut next, &mut rng);
        q = next;
    }
    let mut components: Vec<Vec<f64>> = vectors.into_iter().take(k).collect();
    for c in components.iter_mut() {
        let mut best = 0;
        for (i, v) in c.iter().enumerate() {
            if v.abs() > c[best].abs() {
                best = i;
            }
        }
        if c[best] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let coords = x
        .iter()
        .map(|row| components.iter().map(|c| dot(row, c)).collect())
        .collect();
    let variances = values.into_iter().take(k).map(|v| (v / n as f64).max(0.0)).collect();
    Ok(Embedding {
        coords,
        components,
        variances,
        mean,
    })
}

/// Distance between the two class means divided by the pooled within-class
/// deviation (root mean squared distance to the own class mean).
pub fn class_separation(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::param("each class needs at least two samples"));
    }
    let d = a[0].len();
    for t in a.iter().chain(b) {
        a[0].check_same_shape(t)?;
    }
    let mean_of = |set: &[Tensor]| {
        let mut m = vec![0.0; d];
        for t in set {
            for (acc, v) in m.iter_mut().zip(t.data()) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= set.len() as f64);
        m
    };
    let (ma, mb) = (mean_of(a), mean_of(b));
    let spread = |set: &[Tensor], m: &[f64]| -> f64 {
        set.iter()
            .map(|t| t.data().iter().zip(m).map(|(v, c)| (v - c).powi(2)).sum::<f64>())
            .sum()
    };
    let pooled = ((spread(a, &ma) + spread(b, &mb)) / (a.len() + b.len() - 2) as f64).sqrt();
    let gap = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    if pooled == 0.0 {
        return Err(Error::Metric("zero within-class spread".into()));
    }
    Ok(gap / pooled)
}
