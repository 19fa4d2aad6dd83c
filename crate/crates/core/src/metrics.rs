//! Image quality metrics: PSNR, SSIM (with an analytic gradient for use
//! inside the photometric loss) and the AVG aggregate.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) with the standard
//! constants C1 = 0.01^2, C2 = 0.03^2 on the [0, 1] range, evaluated over
//! the valid region only (no padding) and averaged over RGB.

use crate::img::Image;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MetricError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image too small for the {0}x{0} SSIM window")]
    TooSmall(usize),
}

/// Sentinel reported instead of +inf for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<(), MetricError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricError::ShapeMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over the [0, 1] range, capped at the
/// 99 dB sentinel.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let n = (a.data.len() * 3) as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| {
            let d = x - y;
            d.x * d.x + d.y * d.y + d.z * d.z
        })
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel_1d() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Valid-region separable convolution: the output is (h - 10) x (w - 10).
fn conv_valid(plane: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let hv = h - WINDOW + 1;
    let wv = w - WINDOW + 1;
    // Vertical pass.
    let mut tmp = vec![0.0; hv * w];
    for i in 0..hv {
        for x in 0..w {
            let mut acc = 0.0;
            for (dy, &kv) in k.iter().enumerate() {
                acc += kv * plane[(i + dy) * w + x];
            }
            tmp[i * w + x] = acc;
        }
    }
    // Horizontal pass.
    let mut out = vec![0.0; hv * wv];
    for i in 0..hv {
        for j in 0..wv {
            let mut acc = 0.0;
            for (dx, &kv) in k.iter().enumerate() {
                acc += kv * tmp[i * w + j + dx];
            }
            out[i * wv + j] = acc;
        }
    }
    out
}

/// Transpose of `conv_valid`: scatter a valid-grid field back onto the full
/// image grid.
fn conv_valid_transpose(field: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let hv = h - WINDOW + 1;
    let wv = w - WINDOW + 1;
    let mut tmp = vec![0.0; h * wv];
    for y0 in 0..h {
        for j in 0..wv {
            let mut acc = 0.0;
            for (dy, &kv) in k.iter().enumerate() {
                if y0 >= dy && y0 - dy < hv {
                    acc += kv * field[(y0 - dy) * wv + j];
                }
            }
            tmp[y0 * wv + j] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y0 in 0..h {
        for x0 in 0..w {
            let mut acc = 0.0;
            for (dx, &kv) in k.iter().enumerate() {
                if x0 >= dx && x0 - dx < wv {
                    acc += kv * tmp[y0 * wv + x0 - dx];
                }
            }
            out[y0 * w + x0] = acc;
        }
    }
    out
}

fn channel_plane(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().map(|p| p[ch]).collect()
}

struct SsimChannel {
    mean: f64,
    /// Cotangents on the windowed statistics of x, per valid position.
    g_mu: Vec<f64>,
    g_xx: Vec<f64>,
    g_xy: Vec<f64>,
}

/// Per-channel SSIM map statistics; `with_grad` also fills the cotangent
/// fields of dmean/d(stats of x).
fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, with_grad: bool) -> SsimChannel {
    let k = gaussian_kernel_1d();
    let hv = h - WINDOW + 1;
    let wv = w - WINDOW + 1;
    let n_valid = (hv * wv) as f64;

    let mu_x = conv_valid(x, w, h, &k);
    let mu_y = conv_valid(y, w, h, &k);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a * b).collect();
    let e_xx = conv_valid(&xx, w, h, &k);
    let e_yy = conv_valid(&yy, w, h, &k);
    let e_xy = conv_valid(&xy, w, h, &k);

    let mut mean = 0.0;
    let mut g_mu = vec![0.0; if with_grad { hv * wv } else { 0 }];
    let mut g_xx = vec![0.0; if with_grad { hv * wv } else { 0 }];
    let mut g_xy = vec![0.0; if with_grad { hv * wv } else { 0 }];
    for p in 0..hv * wv {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let sxx = e_xx[p] - mx * mx;
        let syy = e_yy[p] - my * my;
        let sxy = e_xy[p] - mx * my;
        let a1 = 2.0 * mx * my + C1;
        let a2 = 2.0 * sxy + C2;
        let b1 = mx * mx + my * my + C1;
        let b2 = sxx + syy + C2;
        let ssim = (a1 * a2) / (b1 * b2);
        mean += ssim;
        if with_grad {
            let inv = 1.0 / (b1 * b2);
            // d ssim / d mu_x, through A1, A2 (sxy term), B1 and B2 (sxx term).
            let d_mu = 2.0 * my * (a2 - a1) * inv - 2.0 * mx * ssim / b1 + 2.0 * mx * ssim / b2;
            let d_exx = -ssim / b2;
            let d_exy = 2.0 * a1 * inv;
            g_mu[p] = d_mu / n_valid;
            g_xx[p] = d_exx / n_valid;
            g_xy[p] = d_exy / n_valid;
        }
    }
    SsimChannel {
        mean: mean / n_valid,
        g_mu,
        g_xx,
        g_xy,
    }
}

/// Mean SSIM over the valid region, averaged over RGB. Symmetric in its
/// arguments; 1.0 for identical images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    if a.width < WINDOW || a.height < WINDOW {
        return Err(MetricError::TooSmall(WINDOW));
    }
    let mut total = 0.0;
    for ch in 0..3 {
        let x = channel_plane(a, ch);
        let y = channel_plane(b, ch);
        total += ssim_channel(&x, &y, a.width, a.height, false).mean;
    }
    Ok(total / 3.0)
}

/// Mean SSIM plus its gradient with respect to the first image.
pub fn ssim_with_grad(x_img: &Image, y_img: &Image) -> Result<(f64, Image), MetricError> {
    check_shapes(x_img, y_img)?;
    let (w, h) = (x_img.width, x_img.height);
    if w < WINDOW || h < WINDOW {
        return Err(MetricError::TooSmall(WINDOW));
    }
    let k = gaussian_kernel_1d();
    let mut total = 0.0;
    let mut grad = Image::new(w, h);
    for ch in 0..3 {
        let x = channel_plane(x_img, ch);
        let y = channel_plane(y_img, ch);
        let res = ssim_channel(&x, &y, w, h, true);
        total += res.mean;
        // dL/dx = W^T g_mu + 2 x .* (W^T g_xx) + y .* (W^T g_xy), averaged
        // over the three channels outside this loop.
        let s_mu = conv_valid_transpose(&res.g_mu, w, h, &k);
        let s_xx = conv_valid_transpose(&res.g_xx, w, h, &k);
        let s_xy = conv_valid_transpose(&res.g_xy, w, h, &k);
        for (i, px) in grad.data.iter_mut().enumerate() {
            px[ch] = (s_mu[i] + 2.0 * x[i] * s_xx[i] + y[i] * s_xy[i]) / 3.0;
        }
    }
    Ok((total / 3.0, grad))
}

/// The AVG aggregate with its partial (LPIPS-less) fallback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvgMetric {
    pub value: f64,
    /// True when LPIPS was absent and the value is the two-factor geometric
    /// mean only; not comparable against full three-factor numbers.
    pub partial: bool,
}

/// Geometric mean of `MSE = 10^(-PSNR/10)`, `sqrt(1 - SSIM)` and LPIPS.
/// When LPIPS is not supplied the result is the two-factor geometric mean,
/// flagged as partial.
pub fn avg_metric(psnr_db: f64, ssim: f64, lpips: Option<f64>) -> AvgMetric {
    let mse = 10f64.powf(-psnr_db / 10.0);
    let dssim = (1.0 - ssim).max(0.0).sqrt();
    match lpips {
        Some(lp) => AvgMetric {
            value: (mse * dssim * lp).cbrt(),
            partial: false,
        },
        None => AvgMetric {
            value: (mse * dssim).sqrt(),
            partial: true,
        },
    }
}
