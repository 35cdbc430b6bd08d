//! Image corruptions applied before feature extraction: Gaussian blur and a
//! baseline JPEG quantization round trip.

use std::fmt;

use image::{GrayImage, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorModel, EvalReport};
use crate::dnf::{parallel_map, Extractor};
use crate::error::{Error, Result};
use crate::imageio::to_u8;
use crate::tensor::Tensor;

/// Half of a normalized Gaussian kernel: `w[0]` is the center weight and
/// `w[k]` the weight at offsets `+k` and `-k`, with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("kernel sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let raw: Vec<f64> = (0..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total = raw[0] + 2.0 * raw[1..].iter().sum::<f64>();
    Ok(raw.iter().map(|w| w / total).collect())
}

/// Half-sample symmetric reflection (`c b a | a b c | c b a`) of an index.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn blur_line(src: &[f64], kernel: &[f64], out: &mut [f64]) {
    let n = src.len();
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = kernel[0] * src[i];
        for (k, w) in kernel.iter().enumerate().skip(1) {
            let lo = src[reflect(i as isize - k as isize, n)];
            let hi = src[reflect((i + k) as isize, n)];
            // Pair sums are order independent, so mirrored inputs give
            // mirrored outputs exactly.
            acc += w * (lo + hi);
        }
        *o = acc;
    }
}

/// Separable blur of a row-major `h x w` plane with reflect padding.
pub fn blur_plane(data: &[f64], width: usize, height: usize, sigma: f64) -> Result<Vec<f64>> {
    if sigma < 0.0 || sigma.is_nan() {
        return Err(Error::param(format!("blur sigma must be non-negative, got {sigma}")));
    }
    if data.len() != width * height {
        return Err(Error::param("plane size does not match its dimensions"));
    }
    if sigma == 0.0 || data.is_empty() {
        return Ok(data.to_vec());
    }
    let kernel = gaussian_kernel(sigma)?;
    let mut rows = vec![0.0; data.len()];
    for (src, dst) in data.chunks(width).zip(rows.chunks_mut(width)) {
        blur_line(src, &kernel, dst);
    }
    let mut out = vec![0.0; data.len()];
    let mut col = vec![0.0; height];
    let mut col_out = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = rows[y * width + x];
        }
        blur_line(&col, &kernel, &mut col_out);
        for y in 0..height {
            out[y * width + x] = col_out[y];
        }
    }
    Ok(out)
}

/// Blur in `f64`, then round to the nearest 8-bit level.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane: Vec<f64> = img.as_raw().iter().map(|&v| v as f64).collect();
    let out = blur_plane(&plane, w, h, sigma)?;
    Ok(GrayImage::from_raw(w as u32, h as u32, out.into_iter().map(to_u8).collect())
        .expect("buffer matches dimensions"))
}

/// Standard luminance quantization table, row-major.
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

fn check_quality(quality: u8) -> Result<()> {
    if !(1..=100).contains(&quality) {
        return Err(Error::param(format!("JPEG quality {quality} not in 1..=100")));
    }
    Ok(())
}

/// Luminance table scaled for `quality` with the usual integer mapping.
pub fn quant_table(quality: u8) -> Result<[u16; 64]> {
    check_quality(quality)?;
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0u16; 64];
    for (dst, &base) in t.iter_mut().zip(&LUMA_TABLE) {
        *dst = ((base as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(t)
}

/// Orthonormal 8-point DCT-II basis, `basis[u][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

pub(crate) fn dct2(block: &[f64; 64], c: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u * 8 + x] = (0..8).map(|y| c[u][y] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|x| tmp[u * 8 + x] * c[v][x]).sum();
        }
    }
    out
}

pub(crate) fn idct2(coef: &[f64; 64], c: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for v in 0..8 {
            tmp[y * 8 + v] = (0..8).map(|u| c[u][y] * coef[u * 8 + v]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| tmp[y * 8 + v] * c[v][x]).sum();
        }
    }
    out
}

/// JPEG quantization round trip of one 8-bit plane. Partial edge blocks are
/// padded by replicating the last row and column, then cropped.
pub fn jpeg_plane(data: &[u8], width: usize, height: usize, quality: u8) -> Result<Vec<u8>> {
    let table = quant_table(quality)?;
    if data.len() != width * height {
        return Err(Error::param("plane size does not match its dimensions"));
    }
    let c = dct_basis();
    let mut out = vec![0u8; data.len()];
    for by in (0..height).step_by(8) {
        for bx in (0..width).step_by(8) {
            let mut block = [0.0; 64];
            for y in 0..8 {
                for x in 0..8 {
                    let sy = (by + y).min(height - 1);
                    let sx = (bx + x).min(width - 1);
                    block[y * 8 + x] = data[sy * width + sx] as f64 - 128.0;
                }
            }
            let mut coef = dct2(&block, &c);
            for (v, &q) in coef.iter_mut().zip(&table) {
                let q = q as f64;
                *v = (*v / q).round() * q;
            }
            let rec = idct2(&coef, &c);
            for y in 0..8.min(height - by) {
                for x in 0..8.min(width - bx) {
                    out[(by + y) * width + bx + x] = to_u8(rec[y * 8 + x] + 128.0);
                }
            }
        }
    }
    Ok(out)
}

pub fn jpeg_roundtrip(img: &GrayImage, quality: u8) -> Result<GrayImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let out = jpeg_plane(img.as_raw(), w, h, quality)?;
    Ok(GrayImage::from_raw(w as u32, h as u32, out).expect("buffer matches dimensions"))
}

/// Color images are processed channel by channel with the luminance table.
pub fn jpeg_roundtrip_rgb(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut out = vec![0u8; raw.len()];
    for ch in 0..3 {
        let plane: Vec<u8> = raw.iter().skip(ch).step_by(3).copied().collect();
        let done = jpeg_plane(&plane, w, h, quality)?;
        for (i, v) in done.into_iter().enumerate() {
            out[i * 3 + ch] = v;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, out).expect("buffer matches dimensions"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PerturbationSpec {
    Blur { sigma: f64 },
    Jpeg { quality: u8 },
}

impl PerturbationSpec {
    pub const IDENTITY: Self = Self::Blur { sigma: 0.0 };

    /// Blur sigma in {0, 1, 2, 3} followed by JPEG quality in {100, 65, 30}.
    pub fn standard_grid() -> Vec<Self> {
        let mut v: Vec<Self> = [0.0, 1.0, 2.0, 3.0]
            .into_iter()
            .map(|sigma| Self::Blur { sigma })
            .collect();
        v.extend([100, 65, 30].into_iter().map(|quality| Self::Jpeg { quality }));
        v
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Blur { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => Err(Error::param(
                format!("blur sigma must be finite and non-negative, got {sigma}"),
            )),
            Self::Jpeg { quality } => check_quality(quality),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, img: &GrayImage) -> Result<GrayImage> {
        match *self {
            Self::Blur { sigma } => gaussian_blur(img, sigma),
            Self::Jpeg { quality } => jpeg_roundtrip(img, quality),
        }
    }
}

impl fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Blur { sigma } => write!(f, "blur(sigma={sigma})"),
            Self::Jpeg { quality } => write!(f, "jpeg(quality={quality})"),
        }
    }
}

/// Random training-time corruption: independently, a blur with
/// `sigma ~ U[0, blur_sigma_max)` and then a JPEG round trip with quality
/// uniform on `[jpeg_quality_min, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    pub blur_probability: f64,
    pub blur_sigma_max: f64,
    pub jpeg_probability: f64,
    pub jpeg_quality_min: u8,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            blur_probability: 0.0,
            blur_sigma_max: 3.0,
            jpeg_probability: 0.0,
            jpeg_quality_min: 30,
        }
    }
}

impl Augmentation {
    pub fn is_identity(&self) -> bool {
        self.blur_probability == 0.0 && self.jpeg_probability == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.blur_probability, self.jpeg_probability] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(format!("augmentation probability {p} not in [0, 1]")));
            }
        }
        if !(self.blur_sigma_max > 0.0 && self.blur_sigma_max.is_finite()) {
            return Err(Error::param("augmentation blur range must be positive"));
        }
        check_quality(self.jpeg_quality_min)
    }

    /// Draw the corruptions for one image, in application order.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<PerturbationSpec> {
        let mut out = Vec::new();
        if rng.random_bool(self.blur_probability) {
            out.push(PerturbationSpec::Blur {
                sigma: rng.random_range(0.0..self.blur_sigma_max),
            });
        }
        if rng.random_bool(self.jpeg_probability) {
            out.push(PerturbationSpec::Jpeg {
                quality: rng.random_range(self.jpeg_quality_min..=100),
            });
        }
        out
    }
}

pub fn apply_all(img: &GrayImage, specs: &[PerturbationSpec]) -> Result<GrayImage> {
    let mut out = img.clone();
    for s in specs {
        out = s.apply(&out)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub spec: PerturbationSpec,
    pub accuracy: f64,
    pub average_precision: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

/// Perturb every image, extract features and evaluate; one row per spec.
/// Items that fail to perturb or extract are listed in the row and left out
/// of its metrics.
pub fn perturbation_sweep(
    images: &[GrayImage],
    labels: &[u8],
    detector: &DetectorModel,
    extractor: &Extractor,
    specs: &[PerturbationSpec],
    workers: usize,
) -> Result<Vec<SweepRow>> {
    if specs.is_empty() {
        return Err(Error::param("perturbation sweep needs at least one spec"));
    }
    if images.len() != labels.len() {
        return Err(Error::param("one label per image required"));
    }
    specs.iter().try_for_each(PerturbationSpec::validate)?;
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let results = parallel_map(images.len(), workers, |i| -> Result<Tensor> {
            let perturbed = spec.apply(&images[i])?;
            extractor.feature_of_image(&perturbed)
        })?;
        let mut features = Vec::new();
        let mut kept = Vec::new();
        let mut failures = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(f) => {
                    features.push(f);
                    kept.push(labels[i]);
                }
                Err(e) => failures.push(format!("item {i}: {e}")),
            }
        }
        let report: EvalReport = detector.evaluate(&features, &kept, workers)?;
        rows.push(SweepRow {
            spec: *spec,
            accuracy: report.accuracy,
            average_precision: report.average_precision,
            n: report.n(),
            failures,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn augmentation_draws_within_its_ranges() {
        let off = Augmentation::default();
        assert!(off.is_identity());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(off.draw(&mut rng).is_empty());
        let on = Augmentation {
            blur_probability: 0.5,
            jpeg_probability: 1.0,
            ..Augmentation::default()
        };
        on.validate().unwrap();
        let mut blurs = 0;
        for _ in 0..400 {
            let specs = on.draw(&mut rng);
            assert!(matches!(specs.last(), Some(PerturbationSpec::Jpeg { quality: 30..=100 })));
            if let PerturbationSpec::Blur { sigma } = specs[0] {
                assert!((0.0..3.0).contains(&sigma));
                blurs += 1;
            }
        }
        assert!((150..250).contains(&blurs), "{blurs}");
        assert!(Augmentation { jpeg_probability: 1.5, ..on }.validate().is_err());
        let img = textured(9, 9);
        assert_eq!(apply_all(&img, &[]).unwrap(), img);
    }

    fn textured(w: u32, h: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let v = 128.0 + 60.0 * ((x as f64) * 0.7).sin() * ((y as f64) * 0.45).cos()
                + if (x / 5 + y / 3) % 2 == 0 { 40.0 } else { -40.0 };
            image::Luma([v.clamp(0.0, 255.0) as u8])
        })
    }

    #[test]
    fn kernel_is_normalized_with_expected_radius() {
        for sigma in [0.3, 1.0, 2.5, 3.0] {
            let k = gaussian_kernel(sigma).unwrap();
            assert_eq!(k.len(), (3.0 * sigma).ceil() as usize + 1);
            let total = k[0] + 2.0 * k[1..].iter().sum::<f64>();
            assert!((total - 1.0).abs() < 1e-15);
        }
        assert!(gaussian_kernel(0.0).is_err());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = textured(13, 9);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn constant_images_stay_constant() {
        for sigma in [0.5, 1.0, 3.0, 7.0] {
            let img = GrayImage::from_pixel(10, 6, image::Luma([93]));
            assert_eq!(gaussian_blur(&img, sigma).unwrap(), img);
            let plane = vec![93.0; 60];
            let out = blur_plane(&plane, 10, 6, sigma).unwrap();
            assert!((out.iter().sum::<f64>() - plane.iter().sum::<f64>()).abs() < 1e-9);
        }
    }

    #[test]
    fn impulse_response_matches_direct_kernel() {
        let n = 15;
        let mut plane = vec![0.0; n * n];
        plane[7 * n + 7] = 1.0;
        let out = blur_plane(&plane, n, n, 1.0).unwrap();
        // Direct 2-D Gaussian evaluation, normalized over its support.
        let r = 3i32;
        let g = |dx: i32, dy: i32| (-((dx * dx + dy * dy) as f64) / 2.0).exp();
        let total: f64 = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| g(dx, dy))).sum();
        for dy in -r..=r {
            for dx in -r..=r {
                let got = out[((7 + dy) * n as i32 + 7 + dx) as usize];
                assert!((got - g(dx, dy) / total).abs() < 1e-15);
            }
        }
        let k = gaussian_kernel(1.0).unwrap();
        assert!((out[7 * n + 7] - k[0] * k[0]).abs() < 1e-16);
    }

    #[test]
    fn quality_mapping_endpoints() {
        assert_eq!(quant_table(100).unwrap(), [1u16; 64]);
        let q50 = quant_table(50).unwrap();
        assert_eq!(q50[..], LUMA_TABLE[..]);
        // Quality 1 scales by 50 and saturates.
        assert!(quant_table(1).unwrap().iter().all(|&v| v == 255));
        assert!(quant_table(0).is_err());
        assert!(quant_table(101).is_err());
        let q30 = quant_table(30).unwrap();
        assert_eq!(q30[0], ((16 * 166 + 50) / 100) as u16);
    }

    #[test]
    fn dct_is_orthonormal() {
        let c = dct_basis();
        let block: [f64; 64] = std::array::from_fn(|i| ((i * 37) % 255) as f64 - 128.0);
        let back = idct2(&dct2(&block, &c), &c);
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
        let coef = dct2(&[10.0; 64], &c);
        assert!((coef[0] - 80.0).abs() < 1e-12);
        assert!(coef[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn mid_gray_survives_quality_100() {
        let img = GrayImage::from_pixel(16, 16, image::Luma([128]));
        assert_eq!(jpeg_roundtrip(&img, 100).unwrap(), img);
        let odd = GrayImage::from_pixel(11, 5, image::Luma([128]));
        assert_eq!(jpeg_roundtrip(&odd, 100).unwrap(), odd);
    }

    #[test]
    fn stronger_compression_loses_more() {
        let img = textured(32, 32);
        let rmse = |q: u8| {
            let out = jpeg_roundtrip(&img, q).unwrap();
            let se: f64 = img
                .as_raw()
                .iter()
                .zip(out.as_raw())
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum();
            (se / 1024.0).sqrt()
        };
        let (r100, r65, r30) = (rmse(100), rmse(65), rmse(30));
        assert!(r30 >= r65 && r65 >= r100, "{r30} {r65} {r100}");
        assert!(r100 < 1.0);
    }

    #[test]
    fn rgb_channels_are_independent() {
        let g = textured(9, 9);
        let rgb = RgbImage::from_fn(9, 9, |x, y| {
            let v = g.get_pixel(x, y).0[0];
            image::Rgb([v, 128, 255 - v])
        });
        let out = jpeg_roundtrip_rgb(&rgb, 65).unwrap();
        let red: Vec<u8> = out.pixels().map(|p| p.0[0]).collect();
        assert_eq!(red, jpeg_roundtrip(&g, 65).unwrap().into_raw());
        assert!(out.pixels().all(|p| p.0[1] == 128));
    }

    #[test]
    fn grid_has_seven_cells() {
        let grid = PerturbationSpec::standard_grid();
        assert_eq!(grid.len(), 7);
        assert_eq!(grid[0], PerturbationSpec::IDENTITY);
        assert!(PerturbationSpec::Jpeg { quality: 0 }.validate().is_err());
        assert!(PerturbationSpec::Blur { sigma: f64::NAN }.validate().is_err());
        let json = serde_json::to_string(&grid[4]).unwrap();
        assert_eq!(json, r#"{"kind":"jpeg","quality":100}"#);
    }

    fn plane_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..20, 1usize..20).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), proptest::collection::vec(0.0f64..255.0, w * h))
        })
    }

    proptest! {
        #[test]
        fn blur_preserves_the_mean((w, h, data) in plane_strategy(), sigma in 0.1f64..4.0) {
            let out = blur_plane(&data, w, h, sigma).unwrap();
            let before = data.iter().sum::<f64>() / data.len() as f64;
            let after = out.iter().sum::<f64>() / out.len() as f64;
            prop_assert!((before - after).abs() < 1e-6);
        }

        #[test]
        fn blur_commutes_with_mirroring((w, h, data) in plane_strategy(), sigma in 0.1f64..4.0) {
            let bytes: Vec<u8> = data.iter().map(|&v| v as u8).collect();
            let img = GrayImage::from_raw(w as u32, h as u32, bytes).unwrap();
            let mirrored = image::imageops::flip_horizontal(&img);
            let a = image::imageops::flip_horizontal(&gaussian_blur(&img, sigma).unwrap());
            let b = gaussian_blur(&mirrored, sigma).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn jpeg_output_is_eight_bit_for_any_input(
            (w, h, data) in plane_strategy(),
            quality in 1u8..=100,
        ) {
            let bytes: Vec<u8> = data.iter().map(|&v| v as u8).collect();
            let out = jpeg_plane(&bytes, w, h, quality).unwrap();
            prop_assert_eq!(out.len(), bytes.len());
        }
    }
}
