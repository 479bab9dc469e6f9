use serde::Serialize;

use crate::data::{GrayImage, Image};
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DELTA_BASE: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    /// `+∞` for identical inputs.
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const FIELDS: [&'static str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"];

    pub fn values(&self) -> [f64; 7] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        Self {
            abs_rel: v[0],
            sq_rel: v[1],
            rmse: v[2],
            rmse_log: v[3],
            delta1: v[4],
            delta2: v[5],
            delta3: v[6],
        }
    }
}

fn check_unit_range(img: &Image, which: &str) -> Result<()> {
    match img.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::invalid(format!(
            "{which} image value {} at pixel ({}, {}) is outside [0, 1]",
            img.data[i],
            (i / 3) % img.width,
            (i / 3) / img.width
        ))),
        None => Ok(()),
    }
}

/// `10·log₁₀(1 / MSE)` over the channels of valid pixels. `valid` is per
/// pixel; `None` scores every pixel.
pub fn psnr(a: &Image, b: &Image, valid: Option<&[bool]>) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::invalid(format!(
            "psnr: {}×{} vs {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    check_unit_range(a, "first")?;
    check_unit_range(b, "second")?;
    let n = a.width * a.height;
    if valid.is_some_and(|v| v.len() != n) {
        return Err(Error::invalid("psnr: mask size differs from the image"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..n {
        if valid.is_some_and(|v| !v[p]) {
            continue;
        }
        for c in 0..3 {
            let d = a.data[3 * p + c] - b.data[3 * p + c];
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::invalid("psnr: no valid pixels"));
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter over windows fully inside the image.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Per-window SSIM, `(w − 10) × (h − 10)` values indexed by window origin.
pub fn ssim_map(a: &GrayImage, b: &GrayImage) -> Result<Vec<f64>> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::invalid(format!(
            "ssim: {}×{} vs {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (w, h) = (a.width, a.height);
    if w.min(h) < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {w}×{h}"
        )));
    }
    let k = gaussian_kernel();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(&a.data, w, h, &k);
    let mu_b = filter_valid(&b.data, w, h, &k);
    let e_aa = filter_valid(&prod(&a.data, &a.data), w, h, &k);
    let e_bb = filter_valid(&prod(&b.data, &b.data), w, h, &k);
    let e_ab = filter_valid(&prod(&a.data, &b.data), w, h, &k);
    Ok((0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            s.clamp(-1.0, 1.0)
        })
        .collect())
}

/// Mean windowed SSIM.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    let m = ssim_map(a, b)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// Mean SSIM over windows whose centre pixel is valid.
pub fn ssim_masked(a: &GrayImage, b: &GrayImage, valid: Option<&[bool]>) -> Result<f64> {
    let Some(valid) = valid else {
        return ssim(a, b);
    };
    let m = ssim_map(a, b)?;
    let ow = a.width + 1 - SSIM_WINDOW;
    let r = SSIM_WINDOW / 2;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, s) in m.iter().enumerate() {
        let (x, y) = (i % ow + r, i / ow + r);
        if valid[y * a.width + x] {
            sum += s;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("ssim: no valid windows"));
    }
    Ok(sum / n as f64)
}

/// Factor that maps the median valid prediction onto the median reference.
pub fn median_scale(pred: &[f64], reference: &[f64], valid: &[bool]) -> Option<f64> {
    let pick = |v: &[f64]| {
        let mut s: Vec<f64> = v.iter().zip(valid).filter(|(_, &ok)| ok).map(|(x, _)| *x).collect();
        if s.is_empty() {
            return None;
        }
        s.sort_by(f64::total_cmp);
        let m = s.len() / 2;
        Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
    };
    let (p, r) = (pick(pred)?, pick(reference)?);
    (p > 0.0).then(|| r / p)
}

/// Eigen depth metrics over valid pixels of row-major rasters `width` wide.
pub fn depth_metrics(pred: &[f64], reference: &[f64], valid: &[bool], width: usize) -> Result<DepthMetrics> {
    if pred.len() != reference.len() || valid.len() != pred.len() {
        return Err(Error::invalid(format!(
            "depth metrics: {} predictions, {} references, {} mask entries",
            pred.len(),
            reference.len(),
            valid.len()
        )));
    }
    let mut acc = [0.0; 7];
    let mut n = 0usize;
    let thresholds = [DELTA_BASE, DELTA_BASE.powi(2), DELTA_BASE.powi(3)];
    for i in (0..pred.len()).filter(|&i| valid[i]) {
        let (p, r) = (pred[i], reference[i]);
        if !(p > 0.0 && r > 0.0) || !p.is_finite() || !r.is_finite() {
            return Err(Error::invalid(format!(
                "depth metrics: non-positive depth at pixel ({}, {}): predicted {p}, reference {r}",
                i % width,
                i / width
            )));
        }
        let d = p - r;
        acc[0] += d.abs() / r;
        acc[1] += d * d / r;
        acc[2] += d * d;
        acc[3] += (p.ln() - r.ln()).powi(2);
        let ratio = (p / r).max(r / p);
        for (j, t) in thresholds.iter().enumerate() {
            if ratio < *t {
                acc[4 + j] += 1.0;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("depth metrics: no valid pixels"));
    }
    let m = acc.map(|v| v / n as f64);
    Ok(DepthMetrics {
        abs_rel: m[0],
        sq_rel: m[1],
        rmse: m[2].sqrt(),
        rmse_log: m[3].sqrt(),
        delta1: m[4],
        delta2: m[5],
        delta3: m[6],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(w: usize, h: usize, v: f64) -> Image {
        Image {
            width: w,
            height: h,
            data: vec![v; 3 * w * h],
        }
    }

    fn checker(w: usize, h: usize, invert: bool) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let on = ((x + y) % 2 == 0) != invert;
                let v = if on { 1.0 } else { 0.0 };
                img.set_pixel(x, y, [v; 3]);
            }
        }
        img
    }

    #[test]
    fn psnr_closed_forms() {
        let a = uniform(8, 8, 0.3);
        assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
        let p = psnr(&uniform(8, 8, 0.5), &uniform(8, 8, 0.6), None).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
        assert_eq!(psnr(&checker(6, 6, false), &checker(6, 6, true), None).unwrap(), 0.0);
    }

    #[test]
    fn psnr_rejects_empty_masks_and_out_of_range() {
        let a = uniform(4, 4, 0.3);
        assert!(psnr(&a, &a, Some(&[false; 16])).is_err());
        assert!(psnr(&a, &uniform(4, 4, 1.5), None).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = checker(16, 16, false).to_gray();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(ssim(&a, &checker(16, 16, true).to_gray()).unwrap() < 0.0);
        let s = ssim(&uniform(12, 12, 0.5).to_gray(), &uniform(12, 12, 0.6).to_gray()).unwrap();
        let oracle = (2.0 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4);
        assert!((s - oracle).abs() < 1e-9, "{s} vs {oracle}");
        assert!(ssim(&uniform(10, 12, 0.5).to_gray(), &uniform(10, 12, 0.5).to_gray()).is_err());
    }

    #[test]
    fn depth_examples() {
        let r = vec![1.0, 2.0, 4.0, 8.0];
        let v = vec![true; 4];
        let same = depth_metrics(&r, &r, &v, 2).unwrap();
        assert_eq!(same.values(), [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let double: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
        let m = depth_metrics(&double, &r, &v, 2).unwrap();
        assert_eq!(m.abs_rel, 1.0);
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 0.0, 0.0));
        let near: Vec<f64> = r.iter().map(|x| 1.2 * x).collect();
        assert_eq!(depth_metrics(&near, &r, &v, 2).unwrap().delta1, 1.0);
    }

    #[test]
    fn depth_rejects_bad_pixels() {
        let e = depth_metrics(&[1.0, 0.0], &[1.0, 1.0], &[true, true], 2).unwrap_err();
        assert!(e.to_string().contains("(1, 0)"), "{e}");
        assert!(depth_metrics(&[1.0], &[1.0], &[false], 1).is_err());
    }

    #[test]
    fn median_scale_aligns_medians() {
        let s = median_scale(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[true; 3]).unwrap();
        assert_eq!(s, 2.0);
    }
}
