//! Online adaptation: Adam on refiner parameters, the learning-rate schedule,
//! the stop-learning controller and the closed-loop driver.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dce::{compute_masks, MaskConfig};
use crate::error::{Error, Result};
use crate::formats::{LossLogRow, Sequence};
use crate::geom::Pose;
use crate::losses::{pair_loss, pair_loss_and_grad, LossBreakdown, LossConfig, PairInputs};
use crate::metrics::Trajectory;
use crate::net::{backprop_refiners, flatten_refiner_grads, predict_depth, predict_with_tape, ToyDepthNet};
use crate::posesolver::{init_map_points, solve_pose, SolverConfig};
use crate::raster::{DepthMap, MaskMap};
use crate::sdd::{densify, GridSpec, DEFAULT_GRID_DIVISIONS};
use crate::sparse::build_sparse_depth;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const BASE_LEARNING_RATE: f64 = 1e-4;
pub const LR_DECAY: f64 = 0.1;
pub const LR_DECAY_INTERVAL: usize = 100;
pub const STOP_MIN_STEPS: usize = 300;
pub const STOP_WINDOW: usize = 50;
pub const STOP_TAU: f64 = 0.1;
pub const EMA_SMOOTHING: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: (state.m.len(), 1),
            found: (grads.len(), params.len()),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidArgument("non-finite gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Step-decayed learning rate: `base * decay^floor(step / interval)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub interval: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: BASE_LEARNING_RATE,
            decay: LR_DECAY,
            interval: LR_DECAY_INTERVAL,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        self.base * self.decay.powi((step / self.interval.max(1)) as i32)
    }
}

/// Default schedule: `1e-4 * 0.1^floor(step / 100)`.
pub fn lr_at(step: usize) -> f64 {
    LrSchedule::default().at(step)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Sample variance of the last `window` EMA-smoothed losses.
    #[default]
    SmoothedWindow,
    /// EMA of squared deviations from the EMA mean.
    EmaOfSquares,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopConfig {
    pub min_steps: usize,
    pub window: usize,
    pub tau: f64,
    pub smoothing: f64,
    pub mode: VarianceMode,
}

impl Default for StopConfig {
    fn default() -> Self {
        Self {
            min_steps: STOP_MIN_STEPS,
            window: STOP_WINDOW,
            tau: STOP_TAU,
            smoothing: EMA_SMOOTHING,
            mode: VarianceMode::SmoothedWindow,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StopState {
    pub config: StopConfig,
    pub ema: Option<f64>,
    pub ema_sq_dev: f64,
    pub window: VecDeque<f64>,
    pub steps: usize,
    pub stopped: bool,
}

impl StopState {
    pub fn new(config: StopConfig) -> Self {
        Self {
            config,
            ema: None,
            ema_sq_dev: 0.0,
            window: VecDeque::with_capacity(config.window),
            steps: 0,
            stopped: false,
        }
    }

    /// Variance statistic the stop rule compares against `tau`.
    pub fn variance(&self) -> Option<f64> {
        match self.config.mode {
            VarianceMode::SmoothedWindow => sample_variance(self.window.iter().copied()),
            VarianceMode::EmaOfSquares => self.ema.map(|_| self.ema_sq_dev),
        }
    }
}

fn sample_variance(xs: impl ExactSizeIterator<Item = f64> + Clone) -> Option<f64> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    Some(xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64)
}

/// Feeds one loss value; returns whether learning should stop. Once true it
/// stays true. Steps are counted from 1.
pub fn stop_check(state: &mut StopState, new_loss: f64) -> bool {
    if state.stopped {
        return true;
    }
    let c = state.config;
    state.steps += 1;
    let prev = state.ema;
    let ema = match prev {
        None => new_loss,
        Some(e) => c.smoothing * e + (1.0 - c.smoothing) * new_loss,
    };
    if let Some(e) = prev {
        let dev = new_loss - e;
        state.ema_sq_dev = c.smoothing * state.ema_sq_dev + (1.0 - c.smoothing) * dev * dev;
    }
    state.ema = Some(ema);
    state.window.push_back(ema);
    while state.window.len() > c.window {
        state.window.pop_front();
    }
    let full = state.window.len() == c.window;
    let small = state.variance().is_some_and(|v| v < c.tau);
    state.stopped = state.steps >= c.min_steps && full && small;
    state.stopped
}

pub const DEFAULT_BATCH_PAIRS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub seed: u64,
    /// When false the refiners are never updated.
    pub learning: bool,
    /// Re-initialize the refiners at this rank before the run.
    pub refiner_rank: Option<usize>,
    pub lr: LrSchedule,
    pub stop: StopConfig,
    pub batch_pairs: usize,
    pub grid_divisions: usize,
    pub loss: LossConfig,
    pub mask: MaskConfig,
    pub solver: SolverConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            learning: true,
            refiner_rank: None,
            lr: LrSchedule::default(),
            stop: StopConfig::default(),
            batch_pairs: DEFAULT_BATCH_PAIRS,
            grid_divisions: DEFAULT_GRID_DIVISIONS,
            loss: LossConfig::default(),
            mask: MaskConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl AdaptConfig {
    /// Settings tuned for the 64x48 synthetic street streams.
    pub fn synthetic() -> Self {
        let mut cfg = Self::default();
        cfg.lr.base = 1e-2;
        cfg.loss.lambda_smooth = 0.01;
        cfg.loss.lambda_depth = 1.0;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Supervision gathered for the pair (`cur - 1`, `cur`).
#[derive(Clone, Debug)]
pub struct PairState {
    pub cur: usize,
    pub t_prev_cur: Pose,
    pub mask: Option<MaskMap>,
    pub pseudo_depth: Option<DepthMap>,
}

#[derive(Clone, Debug)]
pub struct AdaptRun {
    pub log: Vec<LossLogRow>,
    pub net: ToyDepthNet,
    /// Camera-to-world estimates, one per frame.
    pub trajectory: Trajectory,
    pub learning_steps: usize,
    /// Learning step at which the stop rule fired.
    pub stopped_at: Option<usize>,
}

/// Mean objective over `pairs` and, if requested, its gradient with respect
/// to the flattened refiner parameters.
pub fn batch_objective(
    net: &ToyDepthNet,
    seq: &Sequence,
    pairs: &[PairState],
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("training pairs"));
    }
    let k = &seq.camera.intrinsics;
    let mut frames: Vec<usize> = pairs.iter().flat_map(|p| [p.cur - 1, p.cur]).collect();
    frames.sort_unstable();
    frames.dedup();
    let slot = |f: usize| frames.binary_search(&f).expect("frame present");
    let mut preds: Vec<_> = frames.iter().map(|&f| predict_with_tape(&seq.frames[f].image, net)).collect();
    let npx = k.width * k.height;
    let mut seeds = vec![vec![0.0; npx]; frames.len()];
    let scale = 1.0 / pairs.len() as f64;
    let mut parts = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (ic, ip) = (slot(p.cur), slot(p.cur - 1));
        let inp = PairInputs {
            image_cur: &seq.frames[p.cur].image,
            image_prev: &seq.frames[p.cur - 1].image,
            depth_cur: &preds[ic].0,
            depth_prev: &preds[ip].0,
            pseudo_depth: p.pseudo_depth.as_ref(),
            mask: p.mask.as_ref(),
            t_prev_cur: &p.t_prev_cur,
            intrinsics: k,
        };
        if want_grad {
            let (b, g) = pair_loss_and_grad(&inp, cfg)?;
            for (s, d) in seeds[ic].iter_mut().zip(&g.depth_cur) {
                *s += scale * d;
            }
            for (s, d) in seeds[ip].iter_mut().zip(&g.depth_prev) {
                *s += scale * d;
            }
            parts.push(b);
        } else {
            parts.push(pair_loss(&inp, cfg)?);
        }
    }
    let breakdown = LossBreakdown::mean(&parts);
    if !want_grad {
        return Ok((breakdown, None));
    }
    let mut total = vec![0.0; net.trainable_parameter_count()];
    for (i, (_, tape)) in preds.iter_mut().enumerate() {
        let g = flatten_refiner_grads(&backprop_refiners(tape, net, &seeds[i])?);
        for (t, x) in total.iter_mut().zip(g) {
            *t += x;
        }
    }
    Ok((breakdown, Some(total)))
}

fn solve_frame(
    seq: &Sequence,
    t: usize,
    d_prev: &DepthMap,
    t_cw_prev: &Pose,
    guess: &Pose,
    prev_mask: Option<&MaskMap>,
    cfg: &SolverConfig,
) -> Option<Pose> {
    let k = &seq.camera.intrinsics;
    let matches = seq.frames[t].matches.as_ref()?;
    let pixels: Vec<_> = matches.matches().iter().map(|m| m.a).collect();
    let points = init_map_points(d_prev, &pixels, t_cw_prev, k, prev_mask, (t - 1) as u64).ok()?;
    let obs: Vec<_> = points.iter().map(|p| matches.matches()[p.index].b).collect();
    let starts = [*guess, *t_cw_prev];
    let (pose, _) = starts
        .iter()
        .filter_map(|s| solve_pose(&points, &obs, s, k, cfg).ok())
        .min_by(|a, b| a.1.final_cost.total_cmp(&b.1.final_cost))?;
    let finite = pose.translation().iter().chain(pose.rotation().iter()).all(|x| x.is_finite());
    finite.then_some(pose)
}

/// Runs the closed loop over a stored sequence. Frame `t` must carry the
/// matches from frame `t - 1`; frames without them fall back to the motion
/// model and are not learned from. Each pose is solved from the
/// constant-velocity prediction and from the previous pose, keeping the lower
/// final cost.
pub fn run_online(seq: &Sequence, net: &ToyDepthNet, cfg: &AdaptConfig) -> Result<AdaptRun> {
    let n = seq.frames.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least two frames, got {n}")));
    }
    if cfg.batch_pairs == 0 {
        return Err(Error::Config("batch_pairs must be positive".into()));
    }
    let k = &seq.camera.intrinsics;
    let mut net = net.clone();
    if let Some(r) = cfg.refiner_rank {
        net.reset_refiners(r, cfg.seed);
    }
    let grid = GridSpec::new(cfg.grid_divisions, k.width, k.height)?;
    let mut params = net.refiner_params();
    let mut adam = AdamState::new(params.len());
    let mut stop = StopState::new(cfg.stop);
    let mut t_cw = vec![Pose::identity()];
    let mut prev_mask: Option<MaskMap> = None;
    let mut window: VecDeque<PairState> = VecDeque::with_capacity(cfg.batch_pairs + 1);
    let mut log = Vec::with_capacity(n - 1);
    let mut steps = 0;
    let mut stopped_at = None;
    let mut cached: Option<DepthMap> = None;
    for t in 1..n {
        let (fa, fb) = (&seq.frames[t - 1], &seq.frames[t]);
        let d_prev = cached.take().unwrap_or_else(|| predict_depth(&fa.image, &net));
        let d_cur = predict_depth(&fb.image, &net);
        let guess = if t >= 2 {
            t_cw[t - 1].compose(&t_cw[t - 2].inverse()).compose(&t_cw[t - 1])
        } else {
            t_cw[t - 1]
        };
        let solved = solve_frame(seq, t, &d_prev, &t_cw[t - 1], &guess, prev_mask.as_ref(), &cfg.solver);
        let pose_ok = solved.is_some();
        let pose = solved.unwrap_or(guess).renormalized();
        t_cw.push(pose);
        let t_prev_cur = t_cw[t - 1].compose(&pose.inverse());
        let masks = compute_masks(&d_cur, &d_prev, &fb.seg, &fa.seg, t as u64, &t_prev_cur, k, &cfg.mask).ok();
        let pseudo_depth = match (&fb.matches, pose_ok) {
            (Some(m), true) => build_sparse_depth(m, &t_prev_cur.inverse(), k)
                .and_then(|b| densify(&b.sparse, &fb.seg, &grid, masks.as_ref().map(|m| &m.msc)))
                .ok(),
            _ => None,
        };
        prev_mask = masks.as_ref().map(|m| m.combined.clone());
        if pose_ok {
            window.push_back(PairState {
                cur: t,
                t_prev_cur,
                mask: masks.map(|m| m.combined),
                pseudo_depth,
            });
            while window.len() > cfg.batch_pairs {
                window.pop_front();
            }
        }
        let learn = cfg.learning && pose_ok && !stop.stopped;
        let lr = cfg.lr.at(steps);
        let breakdown = if learn {
            let pairs: Vec<PairState> = window.iter().cloned().collect();
            let (b, g) = batch_objective(&net, seq, &pairs, &cfg.loss, true)?;
            adam_step(&mut params, &g.expect("gradient requested"), &mut adam, lr)?;
            net.set_refiner_params(&params)?;
            steps += 1;
            if stop_check(&mut stop, b.l_total) && stopped_at.is_none() {
                stopped_at = Some(steps);
            }
            b
        } else {
            cached = Some(d_cur.clone());
            match window.back().filter(|p| p.cur == t) {
                Some(p) => pair_loss(
                    &PairInputs {
                        image_cur: &fb.image,
                        image_prev: &fa.image,
                        depth_cur: &d_cur,
                        depth_prev: &d_prev,
                        pseudo_depth: p.pseudo_depth.as_ref(),
                        mask: p.mask.as_ref(),
                        t_prev_cur: &p.t_prev_cur,
                        intrinsics: k,
                    },
                    &cfg.loss,
                )?,
                None => LossBreakdown::default(),
            }
        };
        log.push(LossLogRow {
            step: steps,
            frame: t,
            l_p: breakdown.l_p,
            l_s: breakdown.l_s,
            l_g: breakdown.l_g,
            l_d: breakdown.l_d,
            l_total: breakdown.l_total,
            n_photometric: breakdown.n_photometric,
            n_smooth: breakdown.n_smooth,
            n_depth: breakdown.n_depth,
            lr,
            learned: learn,
            pose_ok,
            stopped: stop.stopped,
        });
    }
    let stamps = (0..n).map(|i| i as f64 * seq.camera.frame_interval).collect();
    let trajectory = Trajectory::new(stamps, t_cw.iter().map(Pose::inverse).collect())?;
    Ok(AdaptRun {
        log,
        net,
        trajectory,
        learning_steps: steps,
        stopped_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn adam_examples() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-3).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![0.5];
        let mut s = AdamState::new(1);
        let g = 0.3;
        adam_step(&mut p, &[g], &mut s, 1e-4).unwrap();
        // m_hat = g, v_hat = g^2 after bias correction.
        let expect = 0.5 - 1e-4 * g / (g + 1e-8);
        assert!((p[0] - expect).abs() < 1e-18);
        assert!((s.m[0] - 0.1 * g).abs() < 1e-15);

        let mut s2 = AdamState::new(1);
        let mut q = vec![0.5];
        adam_step(&mut q, &[g], &mut s2, 1e-4).unwrap();
        assert_eq!((p, s), (q, s2));

        let mut s = AdamState::new(1);
        s.m[0] = 1.0;
        s.v[0] = 1.0;
        adam_step(&mut vec![0.0], &[0.0], &mut s, 1e-4).unwrap();
        assert!((s.m[0] - 0.9).abs() < 1e-15 && (s.v[0] - 0.99).abs() < 1e-15);
        assert!(adam_step(&mut vec![0.0], &[0.0, 1.0], &mut AdamState::new(1), 1e-4).is_err());
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at(0), 1e-4);
        assert_eq!(lr_at(99), 1e-4);
        assert!((lr_at(100) - 1e-5).abs() < 1e-20);
        assert!((lr_at(250) - 1e-6).abs() < 1e-21);
    }

    #[test]
    fn constant_stream_stops_at_step_300() {
        let mut s = StopState::new(StopConfig::default());
        let mut first = None;
        for step in 1..=350 {
            if stop_check(&mut s, 0.7) && first.is_none() {
                first = Some(step);
            }
        }
        assert_eq!(first, Some(300));
    }

    #[test]
    fn min_steps_gate() {
        let mut s = StopState::new(StopConfig::default());
        for _ in 0..299 {
            assert!(!stop_check(&mut s, 1.0));
        }
    }

    #[test]
    fn alternating_stream_never_stops() {
        // The EMA settles into a 3.75 / 6.25 cycle whose sample variance is
        // about 1.59 > 0.1.
        let mut s = StopState::new(StopConfig::default());
        for i in 0..1000 {
            assert!(!stop_check(&mut s, if i % 2 == 0 { 0.0 } else { 10.0 }));
        }
        let v = s.variance().unwrap();
        assert!((v - 1.5944).abs() < 1e-3, "{v}");
        let w: Vec<f64> = s.window.iter().copied().collect();
        assert!((w[w.len() - 1] - 6.25).abs() < 1e-9 || (w[w.len() - 1] - 3.75).abs() < 1e-9);
    }

    #[test]
    fn ema_of_squares_mode() {
        let cfg = StopConfig {
            mode: VarianceMode::EmaOfSquares,
            ..StopConfig::default()
        };
        let mut s = StopState::new(cfg);
        let mut first = None;
        for step in 1..=320 {
            if stop_check(&mut s, 2.0) && first.is_none() {
                first = Some(step);
            }
        }
        assert_eq!(first, Some(300));
        let mut s = StopState::new(cfg);
        for i in 0..1000 {
            assert!(!stop_check(&mut s, if i % 2 == 0 { 0.0 } else { 10.0 }));
        }
    }

    proptest! {
        #[test]
        fn stop_flag_is_monotone(losses in prop::collection::vec(0.0..2.0f64, 300..420)) {
            let cfg = StopConfig { min_steps: 10, window: 5, tau: 0.05, ..StopConfig::default() };
            let mut s = StopState::new(cfg);
            let mut seen = false;
            for l in losses {
                let stop = stop_check(&mut s, l);
                prop_assert!(!seen || stop);
                seen |= stop;
            }
        }
    }
}
