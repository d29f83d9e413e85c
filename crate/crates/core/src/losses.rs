//! Online-learning objective and its exact gradient with respect to the two
//! predicted depth maps of a frame pair.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{backproject, project, CameraIntrinsics, Pixel, Pose};
use crate::raster::{ensure_same_size, Bilinear, DepthMap, Image, MaskMap};

pub const DEFAULT_ALPHA: f64 = 0.85;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub lambda_smooth: f64,
    pub lambda_geometry: f64,
    pub lambda_depth: f64,
    /// Treat `W_s` as a constant weight when differentiating.
    pub detach_ws: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            lambda_smooth: DEFAULT_LAMBDA,
            lambda_geometry: DEFAULT_LAMBDA,
            lambda_depth: DEFAULT_LAMBDA,
            detach_ws: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// `W_s`-weighted photometric mean.
    pub l_p: f64,
    pub l_s: f64,
    /// Mask-weighted geometry mean.
    pub l_g: f64,
    /// Mask-weighted depth-consistency mean.
    pub l_d: f64,
    pub l_total: f64,
    pub n_photometric: usize,
    pub n_smooth: usize,
    pub n_depth: usize,
}

impl LossBreakdown {
    /// Element-wise mean of several breakdowns (counts are summed).
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let mut out = LossBreakdown::default();
        if items.is_empty() {
            return out;
        }
        let n = items.len() as f64;
        for b in items {
            out.l_p += b.l_p / n;
            out.l_s += b.l_s / n;
            out.l_g += b.l_g / n;
            out.l_d += b.l_d / n;
            out.l_total += b.l_total / n;
            out.n_photometric += b.n_photometric;
            out.n_smooth += b.n_smooth;
            out.n_depth += b.n_depth;
        }
        out
    }
}

/// Warped view with per-pixel validity.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesized {
    pub image: Image,
    pub valid: Vec<bool>,
}

impl Synthesized {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Samples `i_prev` at the warp of every frame-t pixel.
pub fn synthesize_view(i_prev: &Image, d_cur: &DepthMap, t_prev_cur: &Pose, k: &CameraIntrinsics) -> Result<Synthesized> {
    ensure_same_size(i_prev.dims(), d_cur.dims())?;
    let (w, h) = d_cur.dims();
    let recs: Vec<Option<f64>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let d = d_cur.values()[i];
            let p = Pixel::new((i % w) as f64, (i / w) as f64);
            let y = t_prev_cur.transform(&backproject(p, d, k).ok()?);
            let q = project(&y, k).ok()?;
            i_prev.sample(q)
        })
        .collect();
    let valid: Vec<bool> = recs.iter().map(Option::is_some).collect();
    let data = recs.into_iter().map(|r| r.unwrap_or(0.0)).collect();
    Ok(Synthesized {
        image: Image::new(w, h, data)?,
        valid,
    })
}

/// SSIM statistics of one window with the coefficients of
/// `dS/dy_q = c0 + c1 x_q + c2 y_q`.
#[derive(Clone, Copy, Debug)]
struct SsimWindow {
    value: f64,
    c0: f64,
    c1: f64,
    c2: f64,
}

fn window_ssim(xs: &[f64], ys: &[f64]) -> SsimWindow {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    sxx /= n;
    syy /= n;
    sxy /= n;
    let n1 = 2.0 * mx * my + SSIM_C1;
    let n2 = 2.0 * sxy + SSIM_C2;
    let d1 = mx * mx + my * my + SSIM_C1;
    let d2 = sxx + syy + SSIM_C2;
    let s = n1 * n2 / (d1 * d2);
    let dd = d1 * d2;
    SsimWindow {
        value: s,
        c0: (2.0 * mx * n2 - 2.0 * n1 * mx) / (n * dd) - 2.0 * s * my / (n * d1) + 2.0 * s * my / (n * d2),
        c1: 2.0 * n1 / (n * dd),
        c2: -2.0 * s / (n * d2),
    }
}

fn window_indices(x: usize, y: usize, w: usize, h: usize, valid: Option<&[bool]>, out: &mut Vec<usize>) {
    out.clear();
    for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
        for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
            let j = yy * w + xx;
            if valid.is_none_or(|v| v[j]) {
                out.push(j);
            }
        }
    }
}

fn ssim_windows(a: &[f64], b: &[f64], w: usize, h: usize, valid: Option<&[bool]>) -> Vec<Option<SsimWindow>> {
    (0..w * h)
        .into_par_iter()
        .map_init(
            || (Vec::with_capacity(9), Vec::with_capacity(9), Vec::with_capacity(9)),
            |(idx, xs, ys), i| {
                if valid.is_some_and(|v| !v[i]) {
                    return None;
                }
                window_indices(i % w, i / w, w, h, valid, idx);
                xs.clear();
                ys.clear();
                xs.extend(idx.iter().map(|&j| a[j]));
                ys.extend(idx.iter().map(|&j| b[j]));
                Some(window_ssim(xs, ys))
            },
        )
        .collect()
}

/// Per-pixel SSIM over 3x3 windows clipped at the image border.
pub fn ssim(a: &Image, b: &Image) -> Result<Vec<f64>> {
    ensure_same_size(a.dims(), b.dims())?;
    let (w, h) = a.dims();
    if w == 0 || h == 0 {
        return Ok(Vec::new());
    }
    Ok(ssim_windows(a.data(), b.data(), w, h, None)
        .into_iter()
        .map(|s| s.expect("all pixels valid").value)
        .collect())
}

fn photometric_value(ssim: f64, diff: f64, alpha: f64) -> f64 {
    0.5 * alpha * (1.0 - ssim) + (1.0 - alpha) * diff.abs()
}

/// `(alpha/2)(1 - SSIM) + (1 - alpha)|I_t - I_t'|`, `None` on invalid pixels.
/// SSIM windows only use valid synthesized pixels.
pub fn photometric_loss(i_cur: &Image, synth: &Synthesized, alpha: f64) -> Result<Vec<Option<f64>>> {
    ensure_same_size(i_cur.dims(), synth.image.dims())?;
    let (w, h) = i_cur.dims();
    if w == 0 || h == 0 {
        return Ok(Vec::new());
    }
    let windows = ssim_windows(i_cur.data(), synth.image.data(), w, h, Some(&synth.valid));
    Ok(windows
        .iter()
        .enumerate()
        .map(|(i, s)| s.map(|s| photometric_value(s.value, i_cur.data()[i] - synth.image.data()[i], alpha)))
        .collect())
}

fn geometry_value(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a + b)
}

/// `|a - b| / (a + b)` where both depths are valid.
pub fn geometry_loss(d_prev_interp: &DepthMap, d_proj: &DepthMap) -> Result<Vec<Option<f64>>> {
    ensure_same_size(d_prev_interp.dims(), d_proj.dims())?;
    Ok(d_prev_interp
        .values()
        .iter()
        .zip(d_proj.values())
        .map(|(&a, &b)| (a > 0.0 && b > 0.0).then(|| geometry_value(a, b)))
        .collect())
}

/// `|1/D - 1/D_d|` where both depths are valid.
pub fn depth_consistency_loss(d: &DepthMap, d_dense: &DepthMap) -> Result<Vec<Option<f64>>> {
    ensure_same_size(d.dims(), d_dense.dims())?;
    Ok(d.values()
        .iter()
        .zip(d_dense.values())
        .map(|(&a, &b)| (a > 0.0 && b > 0.0).then(|| (1.0 / a - 1.0 / b).abs()))
        .collect())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Edge-aware smoothness of mean-normalized depth with its gradient.
fn smoothness_with_grad(d: &DepthMap, img: &Image, want_grad: bool) -> (f64, usize, Vec<f64>) {
    let (w, h) = d.dims();
    let vals = d.values();
    let data = img.data();
    if w < 2 || h < 2 {
        return (0.0, 0, vec![0.0; w * h]);
    }
    let n_all = (w * h) as f64;
    let mean = vals.iter().sum::<f64>() / n_all;
    if !(mean > 0.0) {
        return (0.0, 0, vec![0.0; w * h]);
    }
    let count = (w - 1) * (h - 1);
    let cnt = count as f64;
    let mut total = 0.0;
    let mut g_norm = if want_grad { vec![0.0; w * h] } else { Vec::new() };
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let i = y * w + x;
            let ex = (-(data[i + 1] - data[i]).abs()).exp();
            let ey = (-(data[i + w] - data[i]).abs()).exp();
            let gx = (vals[i + 1] - vals[i]) / mean;
            let gy = (vals[i + w] - vals[i]) / mean;
            total += gx.abs() * ex + gy.abs() * ey;
            if want_grad {
                let sx = sign(gx) * ex / cnt;
                let sy = sign(gy) * ey / cnt;
                g_norm[i + 1] += sx;
                g_norm[i] -= sx + sy;
                g_norm[i + w] += sy;
            }
        }
    }
    let loss = total / cnt;
    if !want_grad {
        return (loss, count, Vec::new());
    }
    // D* = D / mean(D): dL/dD_i = G_i / m - sum_j G_j D_j / (m^2 N)
    let coupling: f64 = g_norm.iter().zip(vals).map(|(g, v)| g * v).sum::<f64>() / (mean * mean * n_all);
    let grad = g_norm.iter().map(|g| g / mean - coupling).collect();
    (loss, count, grad)
}

/// Mean over interior pixels of `|dx D*| e^{-|dx I|} + |dy D*| e^{-|dy I|}`
/// with `D* = D / mean(D)` and forward differences.
pub fn smoothness_loss(d: &DepthMap, img: &Image) -> Result<f64> {
    ensure_same_size(d.dims(), img.dims())?;
    Ok(smoothness_with_grad(d, img, false).0)
}

/// Combines precomputed terms into the total objective.
pub fn total_loss(
    photometric: &[Option<f64>],
    ws: &[f64],
    smooth: f64,
    geometry: &[Option<f64>],
    depth: &[Option<f64>],
    mask: &[f64],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let n = photometric.len();
    for len in [ws.len(), geometry.len(), depth.len(), mask.len()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: (n, 1),
                found: (len, 1),
            });
        }
    }
    let mut sp = 0.0;
    let mut np = 0usize;
    for (p, w) in photometric.iter().zip(ws) {
        if let Some(p) = p {
            sp += w * p;
            np += 1;
        }
    }
    let mut sg = 0.0;
    let mut ng = 0usize;
    for (g, m) in geometry.iter().zip(mask) {
        if let Some(g) = g {
            sg += m * g;
            ng += 1;
        }
    }
    let mut sd = 0.0;
    let mut nd = 0usize;
    for (d, m) in depth.iter().zip(mask) {
        if let Some(d) = d {
            sd += m * d;
            nd += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let mut out = LossBreakdown {
        l_p: mean(sp, np),
        l_s: smooth,
        l_g: mean(sg, ng),
        l_d: mean(sd, nd),
        n_photometric: np,
        n_smooth: 0,
        n_depth: nd,
        ..Default::default()
    };
    out.l_total = out.l_p + cfg.lambda_smooth * out.l_s + cfg.lambda_geometry * out.l_g + cfg.lambda_depth * out.l_d;
    Ok(out)
}

/// Everything needed to evaluate the objective on the pair `(t-1, t)`.
#[derive(Clone, Copy, Debug)]
pub struct PairInputs<'a> {
    pub image_cur: &'a Image,
    pub image_prev: &'a Image,
    pub depth_cur: &'a DepthMap,
    pub depth_prev: &'a DepthMap,
    /// Densified pseudo depth `D_d` of frame t.
    pub pseudo_depth: Option<&'a DepthMap>,
    /// Combined mask `M` of frame t; all ones when absent.
    pub mask: Option<&'a MaskMap>,
    /// Maps frame-t camera coordinates into frame t-1.
    pub t_prev_cur: &'a Pose,
    pub intrinsics: &'a CameraIntrinsics,
}

/// Gradient of the pair objective with respect to both depth maps.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrad {
    pub depth_cur: Vec<f64>,
    pub depth_prev: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct WarpRecord {
    /// Derivative of the warped `(u', v', z')` with respect to depth.
    du: f64,
    dv: f64,
    dz: f64,
    z: f64,
    stencil: Bilinear,
    synth: f64,
    synth_grad: (f64, f64),
    ref_depth: f64,
    ref_grad: (f64, f64),
}

fn warp_record(i: usize, inp: &PairInputs) -> Option<WarpRecord> {
    let k = inp.intrinsics;
    let (w, h) = inp.depth_cur.dims();
    let d = inp.depth_cur.values()[i];
    let p = Pixel::new((i % w) as f64, (i / w) as f64);
    let yv = inp.t_prev_cur.transform(&backproject(p, d, k).ok()?);
    let q = project(&yv, k).ok()?;
    let stencil = Bilinear::at(q.u, q.v, w, h)?;
    let dp = inp.depth_prev.values();
    if stencil.idx.iter().any(|&j| dp[j] <= 0.0) {
        return None;
    }
    let g = inp.t_prev_cur.rotation() * k.ray(p);
    let z2 = yv.z * yv.z;
    Some(WarpRecord {
        du: k.fx * (g.x * yv.z - yv.x * g.z) / z2,
        dv: k.fy * (g.y * yv.z - yv.y * g.z) / z2,
        dz: g.z,
        z: yv.z,
        stencil,
        synth: stencil.sample(inp.image_prev.data()),
        synth_grad: stencil.gradient(inp.image_prev.data()),
        ref_depth: stencil.sample(dp),
        ref_grad: stencil.gradient(dp),
    })
}

fn check_pair(inp: &PairInputs) -> Result<()> {
    let dims = inp.depth_cur.dims();
    ensure_same_size(dims, inp.depth_prev.dims())?;
    ensure_same_size(dims, inp.image_cur.dims())?;
    ensure_same_size(dims, inp.image_prev.dims())?;
    if let Some(dd) = inp.pseudo_depth {
        ensure_same_size(dims, dd.dims())?;
    }
    if let Some(m) = inp.mask {
        ensure_same_size(dims, m.dims())?;
    }
    Ok(())
}

/// Objective value for one pair.
pub fn pair_loss(inp: &PairInputs, cfg: &LossConfig) -> Result<LossBreakdown> {
    Ok(evaluate(inp, cfg, false, None)?.0)
}

/// Objective with `W_s` replaced by fixed per-pixel weights; the surrogate
/// whose gradient the detached mode computes.
pub fn pair_loss_fixed_weights(inp: &PairInputs, cfg: &LossConfig, ws: &[f64]) -> Result<LossBreakdown> {
    if ws.len() != inp.depth_cur.values().len() {
        return Err(Error::DimensionMismatch {
            expected: inp.depth_cur.dims(),
            found: (ws.len(), 1),
        });
    }
    Ok(evaluate(inp, cfg, false, Some(ws))?.0)
}

/// Per-pixel `W_s = 1 - L_g` of the pair, 0 where undefined.
pub fn pair_weights(inp: &PairInputs) -> Result<Vec<f64>> {
    check_pair(inp)?;
    let n = inp.depth_cur.values().len();
    Ok((0..n)
        .into_par_iter()
        .map(|i| warp_record(i, inp).map_or(0.0, |r| 1.0 - geometry_value(r.ref_depth, r.z)))
        .collect())
}

/// Objective value and its exact gradient for one pair.
pub fn pair_loss_and_grad(inp: &PairInputs, cfg: &LossConfig) -> Result<(LossBreakdown, PairGrad)> {
    let (b, g) = evaluate(inp, cfg, true, None)?;
    Ok((b, g.expect("gradient requested")))
}

fn evaluate(
    inp: &PairInputs,
    cfg: &LossConfig,
    want_grad: bool,
    fixed_ws: Option<&[f64]>,
) -> Result<(LossBreakdown, Option<PairGrad>)> {
    check_pair(inp)?;
    let (w, h) = inp.depth_cur.dims();
    let n = w * h;
    let recs: Vec<Option<WarpRecord>> = (0..n).into_par_iter().map(|i| warp_record(i, inp)).collect();
    let valid: Vec<bool> = recs.iter().map(Option::is_some).collect();
    let synth: Vec<f64> = recs.iter().map(|r| r.map_or(0.0, |r| r.synth)).collect();
    let cur = inp.image_cur.data();
    let windows = if n == 0 { Vec::new() } else { ssim_windows(cur, &synth, w, h, Some(&valid)) };

    let mask_at = |i: usize| inp.mask.map_or(1.0, |m| m.values()[i]);
    let n_valid = valid.iter().filter(|v| **v).count();
    let inv_valid = if n_valid == 0 { 0.0 } else { 1.0 / n_valid as f64 };

    let mut photometric = vec![0.0; n];
    let mut geometry = vec![0.0; n];
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for i in 0..n {
        if let (Some(r), Some(s)) = (recs[i], windows[i]) {
            photometric[i] = photometric_value(s.value, cur[i] - r.synth, cfg.alpha);
            geometry[i] = geometry_value(r.ref_depth, r.z);
            let ws = fixed_ws.map_or(1.0 - geometry[i], |f| f[i]);
            sum_p += ws * photometric[i];
            sum_g += mask_at(i) * geometry[i];
        }
    }

    let dvals = inp.depth_cur.values();
    let mut sum_d = 0.0;
    let mut n_depth = 0usize;
    if let Some(dd) = inp.pseudo_depth {
        for (i, (&a, &b)) in dvals.iter().zip(dd.values()).enumerate() {
            if a > 0.0 && b > 0.0 {
                sum_d += mask_at(i) * (1.0 / a - 1.0 / b).abs();
                n_depth += 1;
            }
        }
    }
    let inv_depth = if n_depth == 0 { 0.0 } else { 1.0 / n_depth as f64 };
    let (l_s, n_smooth, smooth_grad) = smoothness_with_grad(inp.depth_cur, inp.image_cur, want_grad);

    let mut out = LossBreakdown {
        l_p: sum_p * inv_valid,
        l_s,
        l_g: sum_g * inv_valid,
        l_d: sum_d * inv_depth,
        n_photometric: n_valid,
        n_smooth,
        n_depth,
        ..Default::default()
    };
    out.l_total = out.l_p + cfg.lambda_smooth * out.l_s + cfg.lambda_geometry * out.l_g + cfg.lambda_depth * out.l_d;
    if !want_grad {
        return Ok((out, None));
    }

    let mut g_cur: Vec<f64> = smooth_grad.iter().map(|g| cfg.lambda_smooth * g).collect();
    let mut g_prev = vec![0.0; n];
    let mut g_synth = vec![0.0; n];
    let mut idx = Vec::with_capacity(9);
    for i in 0..n {
        let (Some(r), Some(s)) = (recs[i], windows[i]) else {
            continue;
        };
        let ws = 1.0 - geometry[i];
        let g_lp = ws * inv_valid;
        let mut g_lg = cfg.lambda_geometry * mask_at(i) * inv_valid;
        if !cfg.detach_ws {
            g_lg -= photometric[i] * inv_valid;
        }
        g_synth[i] += (1.0 - cfg.alpha) * sign(r.synth - cur[i]) * g_lp;
        let g_s = -0.5 * cfg.alpha * g_lp;
        if g_s != 0.0 {
            window_indices(i % w, i / w, w, h, Some(&valid), &mut idx);
            for &j in &idx {
                g_synth[j] += g_s * (s.c0 + s.c1 * cur[j] + s.c2 * synth[j]);
            }
        }
        if g_lg != 0.0 {
            let (a, b) = (r.ref_depth, r.z);
            let den = (a + b) * (a + b);
            let da = sign(a - b) * 2.0 * b / den;
            let db = -sign(a - b) * 2.0 * a / den;
            let da_dd = r.ref_grad.0 * r.du + r.ref_grad.1 * r.dv;
            g_cur[i] += g_lg * (da * da_dd + db * r.dz);
            for k in 0..4 {
                g_prev[r.stencil.idx[k]] += g_lg * da * r.stencil.w[k];
            }
        }
    }
    for i in 0..n {
        if let Some(r) = recs[i] {
            g_cur[i] += g_synth[i] * (r.synth_grad.0 * r.du + r.synth_grad.1 * r.dv);
        }
    }
    if let Some(dd) = inp.pseudo_depth {
        for (i, (&a, &b)) in dvals.iter().zip(dd.values()).enumerate() {
            if a > 0.0 && b > 0.0 {
                let m = mask_at(i);
                if m != 0.0 {
                    g_cur[i] += cfg.lambda_depth * m * inv_depth * sign(1.0 / a - 1.0 / b) * (-1.0 / (a * a));
                }
            }
        }
    }
    Ok((
        out,
        Some(PairGrad {
            depth_cur: g_cur,
            depth_prev: g_prev,
        }),
    ))
}
