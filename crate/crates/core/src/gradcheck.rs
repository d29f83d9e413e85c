//! Finite-difference verification of the refiner gradient of the online
//! objective on small randomized pair configurations.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geom::{CameraIntrinsics, Pose};
use crate::losses::{pair_loss, pair_loss_and_grad, pair_loss_fixed_weights, pair_weights, LossConfig, PairInputs};
use crate::net::{backprop_refiners, flatten_refiner_grads, predict_depth, predict_with_tape, NetConfig, ToyDepthNet};
use crate::raster::{DepthMap, Image, MaskMap};

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Relative error `|a - f| / max(|a|, |f|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// One randomized pair: two images, a small net with non-zero refiners, a
/// relative pose, pseudo depth and a binary mask.
#[derive(Clone, Debug)]
pub struct GradProblem {
    pub net: ToyDepthNet,
    pub image_cur: Image,
    pub image_prev: Image,
    pub pseudo_depth: DepthMap,
    pub mask: MaskMap,
    pub t_prev_cur: Pose,
    pub intrinsics: CameraIntrinsics,
    pub loss: LossConfig,
}

fn textured(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.9..0.9),
                rng.random_range(0.0..6.3),
                rng.random_range(0.03..0.1),
            )
        })
        .collect();
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            0.5 + waves.iter().map(|&(a, b, p, amp)| amp * (a * x + b * y + p).sin()).sum::<f64>()
        })
        .collect();
    Image::new(w, h, data).expect("intensities in range")
}

impl GradProblem {
    pub fn random(seed: u64, detach_ws: bool) -> Self {
        let (w, h) = (12, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = ToyDepthNet::random(&NetConfig {
            hidden: vec![8, 6],
            rank: 2,
            seed: seed.wrapping_mul(31).wrapping_add(3),
        });
        net.freeze();
        let params: Vec<f64> = (0..net.trainable_parameter_count()).map(|_| rng.random_range(-0.3..0.3)).collect();
        net.set_refiner_params(&params).expect("matching length");
        let image_cur = textured(w, h, &mut rng);
        let image_prev = textured(w, h, &mut rng);
        let pseudo = (0..w * h)
            .map(|_| if rng.random::<f64>() < 0.25 { 0.0 } else { rng.random_range(2.0..8.0) })
            .collect();
        let mask = (0..w * h).map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { 1.0 }).collect();
        let omega = Vector3::new(
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
        );
        let t = Vector3::new(
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.2..0.2),
        );
        Self {
            net,
            image_cur,
            image_prev,
            pseudo_depth: DepthMap::new(w, h, pseudo).expect("valid depths"),
            mask: MaskMap::new(w, h, mask).expect("binary mask"),
            t_prev_cur: Pose::from_axis_angle(omega, t),
            intrinsics: CameraIntrinsics::new(14.0, 14.0, 5.5, 4.5, w, h).expect("valid intrinsics"),
            loss: LossConfig {
                lambda_smooth: rng.random_range(0.05..0.5),
                lambda_geometry: rng.random_range(0.05..0.5),
                lambda_depth: rng.random_range(0.05..0.5),
                detach_ws,
                ..LossConfig::default()
            },
        }
    }

    fn inputs<'a>(&'a self, d_cur: &'a DepthMap, d_prev: &'a DepthMap) -> PairInputs<'a> {
        PairInputs {
            image_cur: &self.image_cur,
            image_prev: &self.image_prev,
            depth_cur: d_cur,
            depth_prev: d_prev,
            pseudo_depth: Some(&self.pseudo_depth),
            mask: Some(&self.mask),
            t_prev_cur: &self.t_prev_cur,
            intrinsics: &self.intrinsics,
        }
    }

    /// Exact gradient of the objective with respect to the refiner parameters.
    pub fn analytic(&self) -> Result<(f64, Vec<f64>)> {
        let (d_cur, mut tape_cur) = predict_with_tape(&self.image_cur, &self.net);
        let (d_prev, mut tape_prev) = predict_with_tape(&self.image_prev, &self.net);
        let (b, g) = pair_loss_and_grad(&self.inputs(&d_cur, &d_prev), &self.loss)?;
        let mut total = flatten_refiner_grads(&backprop_refiners(&mut tape_cur, &self.net, &g.depth_cur)?);
        let other = flatten_refiner_grads(&backprop_refiners(&mut tape_prev, &self.net, &g.depth_prev)?);
        for (t, o) in total.iter_mut().zip(other) {
            *t += o;
        }
        Ok((b.l_total, total))
    }

    /// Objective at the given refiner parameters. In detached mode `W_s` is
    /// held at the value computed from the unperturbed net.
    pub fn objective(&self, params: &[f64], ws: Option<&[f64]>) -> Result<f64> {
        let mut net = self.net.clone();
        net.set_refiner_params(params)?;
        let d_cur = predict_depth(&self.image_cur, &net);
        let d_prev = predict_depth(&self.image_prev, &net);
        let inp = self.inputs(&d_cur, &d_prev);
        Ok(match ws {
            Some(ws) => pair_loss_fixed_weights(&inp, &self.loss, ws)?.l_total,
            None => pair_loss(&inp, &self.loss)?.l_total,
        })
    }

    /// Central differences for every refiner parameter.
    pub fn numeric(&self, step: f64) -> Result<Vec<f64>> {
        let ws = if self.loss.detach_ws {
            let d_cur = predict_depth(&self.image_cur, &self.net);
            let d_prev = predict_depth(&self.image_prev, &self.net);
            Some(pair_weights(&self.inputs(&d_cur, &d_prev))?)
        } else {
            None
        };
        let base = self.net.refiner_params();
        let mut out = Vec::with_capacity(base.len());
        let mut p = base.clone();
        for i in 0..base.len() {
            p[i] = base[i] + step;
            let plus = self.objective(&p, ws.as_deref())?;
            p[i] = base[i] - step;
            let minus = self.objective(&p, ws.as_deref())?;
            p[i] = base[i];
            out.push((plus - minus) / (2.0 * step));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub detach_ws: bool,
    pub parameters: usize,
    pub loss: f64,
    pub max_relative_error: f64,
    pub worst_parameter: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= TOLERANCE
    }
}

pub fn check_seed(seed: u64, detach_ws: bool) -> Result<GradcheckReport> {
    let problem = GradProblem::random(seed, detach_ws);
    let (loss, analytic) = problem.analytic()?;
    let numeric = problem.numeric(FD_STEP)?;
    let mut worst = (0.0, 0);
    for (i, (a, f)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *f);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    Ok(GradcheckReport {
        seed,
        detach_ws,
        parameters: analytic.len(),
        loss,
        max_relative_error: worst.0,
        worst_parameter: worst.1,
    })
}

/// Runs `count` consecutive seeds starting at `seed`, alternating between the
/// detached and attached `W_s` modes.
pub fn run_suite(seed: u64, count: usize) -> Result<Vec<GradcheckReport>> {
    (0..count as u64)
        .map(|i| check_seed(seed.wrapping_add(i), i % 2 == 0))
        .collect()
}
