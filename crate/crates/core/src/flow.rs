//! Single-layer ℓ1 optical flow with TV or TGV² regularization.
//!
//! Each flow is found by quadratic relaxation: an auxiliary field `w`
//! carries the linearized ℓ1 data term and is coupled to the regularized
//! field `u` by a quadratic penalty. The data half is solved in closed form
//! per pixel ([`data_prox`]), the smoothness half is a TV-L2 or TGV²-L2
//! problem handled by a primal-dual iteration ([`smooth_prox_tv`],
//! [`smooth_prox_tgv2`]). Large motions are handled coarse to fine with
//! repeated re-linearization (warping) at every level.
//!
//! Relaxation weights follow the usual convention of a unit-weight
//! regularizer: with `E = Σ|ρ| + lambda_F R(u)`, the data step uses
//! `theta / lambda_F` and the smoothness step solves
//! `theta R(u) + ½‖u - w‖²`.

use std::thread;

use crate::alternation::Mode;
use crate::diff;
use crate::energy::{self, FlowRegularizer, LayerDecomposition, TgvWeights, Weights};
use crate::error::{Error, Result};
use crate::image::{bilinear_taps, blur_plane, FlowField, Image};
use crate::pyramid::{build_pyramid, rescale_flow, DEFAULT_MIN_SIZE, DEFAULT_SCALE_FACTOR};

/// One flow subproblem: estimate the motion taking `frame0` to `frame1`.
#[derive(Debug, Clone, Copy)]
pub struct FlowProblem<'a> {
    pub frame0: &'a Image,
    pub frame1: &'a Image,
    pub lambda_f: f64,
    pub regularizer: FlowRegularizer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxConfig {
    pub theta: f64,
    pub warps_per_level: usize,
    /// Relaxation rounds per warp; each round is one data step and one
    /// primal-dual step.
    pub pd_iters: usize,
    pub tau: f64,
    pub sigma: f64,
    pub scale_factor: f64,
    pub min_size: usize,
    pub median_filter: bool,
    /// Blur applied before differentiating the moving frame.
    pub gradient_sigma: f64,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        let step = 1.0 / 8f64.sqrt();
        RelaxConfig {
            theta: 0.25,
            warps_per_level: 5,
            pd_iters: 50,
            tau: step,
            sigma: step,
            scale_factor: DEFAULT_SCALE_FACTOR,
            min_size: DEFAULT_MIN_SIZE,
            median_filter: true,
            gradient_sigma: 0.5,
        }
    }
}

/// Squared norm bound of the discrete gradient.
pub const GRADIENT_NORM_SQ: f64 = 8.0;
/// Squared norm bound of the stacked TGV² operator `(grad u - w, sym_grad w)`.
pub const TGV_NORM_SQ: f64 = 16.0;

impl RelaxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) {
            return Err(Error::InvalidArgument("theta must be positive".into()));
        }
        if !(self.tau > 0.0 && self.sigma > 0.0) {
            return Err(Error::InvalidArgument("primal-dual steps must be positive".into()));
        }
        if self.tau * self.sigma * GRADIENT_NORM_SQ > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "tau * sigma * 8 must not exceed 1 (got {})",
                self.tau * self.sigma * GRADIENT_NORM_SQ
            )));
        }
        if !(0.5..=0.95).contains(&self.scale_factor) {
            return Err(Error::InvalidArgument(
                "pyramid scale factor must lie in [0.5, 0.95]".into(),
            ));
        }
        Ok(())
    }

    /// Steps rescaled for the larger TGV² operator norm.
    fn tgv_steps(&self) -> (f64, f64) {
        let k = (GRADIENT_NORM_SQ / TGV_NORM_SQ).sqrt();
        (self.tau * k, self.sigma * k)
    }
}

/// Linearization of the moving frame around a base flow.
struct Linearization {
    channels: usize,
    base: FlowField,
    /// Per sample: `frame1(x + base) - frame0(x)`.
    residual: Vec<f64>,
    gx: Vec<f64>,
    gy: Vec<f64>,
    valid: Vec<bool>,
    /// Principal gradient direction per pixel, used by multi-channel data.
    dir: Vec<Option<(f64, f64)>>,
}

fn central_differences(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; plane.len()];
    let mut gy = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (l, r) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (t, b) = (y.saturating_sub(1), (y + 1).min(h - 1));
            gx[i] = (plane[y * w + r] - plane[y * w + l]) / (r - l) as f64;
            gy[i] = (plane[b * w + x] - plane[t * w + x]) / (b - t) as f64;
        }
    }
    (gx, gy)
}

fn linearize(frame0: &Image, frame1: &Image, base: &FlowField, grad_sigma: f64) -> Linearization {
    let (h, w, ch) = (frame0.height(), frame0.width(), frame0.channels());
    let n = h * w;
    let mut gx_img = vec![0.0; n * ch];
    let mut gy_img = vec![0.0; n * ch];
    for c in 0..ch {
        let blurred = blur_plane(&frame1.plane(c), h, w, grad_sigma);
        let (gx, gy) = central_differences(&blurred, h, w);
        for i in 0..n {
            gx_img[i * ch + c] = gx[i];
            gy_img[i * ch + c] = gy[i];
        }
    }
    let mut residual = vec![0.0; n * ch];
    let mut gx = vec![0.0; n * ch];
    let mut gy = vec![0.0; n * ch];
    let mut valid = vec![false; n];
    let (f0, f1) = (frame0.data(), frame1.data());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (du, dv) = base.at(y, x);
            if let Some(t) = bilinear_taps(h, w, x as f64 + du, y as f64 + dv) {
                valid[i] = true;
                for c in 0..ch {
                    let s = i * ch + c;
                    residual[s] = t.sample(f1, ch, c) - f0[s];
                    gx[s] = t.sample(&gx_img, ch, c);
                    gy[s] = t.sample(&gy_img, ch, c);
                }
            }
        }
    }
    let dir = if ch > 1 {
        (0..n)
            .map(|i| principal_direction(&gx[i * ch..(i + 1) * ch], &gy[i * ch..(i + 1) * ch]))
            .collect()
    } else {
        Vec::new()
    };
    Linearization {
        channels: ch,
        base: base.clone(),
        residual,
        gx,
        gy,
        valid,
        dir,
    }
}

const MIN_GRAD_SQ: f64 = 1e-12;

/// Largest channel count handled by the per-pixel data step.
const MAX_CHANNELS: usize = 3;

/// Minimizes `Σ_c |r_c + s_c t| + t² / (2 theta)` over the scalar `t`.
/// The objective is convex and piecewise quadratic, so the minimizer is a
/// breakpoint or the stationary point of one of the pieces.
fn minimize_piecewise(r: &[f64], s: &[f64], theta: f64) -> f64 {
    let f = |t: f64| -> f64 {
        r.iter()
            .zip(s)
            .map(|(ri, si)| (ri + si * t).abs())
            .sum::<f64>()
            + t * t / (2.0 * theta)
    };
    let mut breaks = [0.0; MAX_CHANNELS];
    let mut nb = 0;
    for (ri, si) in r.iter().zip(s) {
        if si.abs() > 0.0 {
            breaks[nb] = -ri / si;
            nb += 1;
        }
    }
    let breaks = &mut breaks[..nb];
    breaks.sort_by(f64::total_cmp);
    let mut best = (f(0.0), 0.0);
    let mut consider = |t: f64| {
        let v = f(t);
        if v < best.0 {
            best = (v, t);
        }
    };
    for &b in breaks.iter() {
        consider(b);
    }
    // one stationary point per interval between consecutive breakpoints
    for k in 0..=nb {
        let lo = if k == 0 { f64::NEG_INFINITY } else { breaks[k - 1] };
        let hi = if k == nb { f64::INFINITY } else { breaks[k] };
        let probe = match (k == 0, k == nb) {
            (true, true) => 0.0,
            (true, false) => hi - 1.0,
            (false, true) => lo + 1.0,
            (false, false) => 0.5 * (lo + hi),
        };
        let slope: f64 = r
            .iter()
            .zip(s)
            .map(|(ri, si)| si * (ri + si * probe).signum())
            .sum();
        let t = -theta * slope;
        if t > lo && t < hi {
            consider(t);
        }
    }
    best.1
}

/// Per-pixel data step at one pixel. `r` holds the linearized residuals at
/// the auxiliary point, `(gx, gy)` the per-channel gradients.
fn prox_pixel(r: &[f64], gx: &[f64], gy: &[f64], theta: f64) -> (f64, f64) {
    if r.len() == 1 {
        let g2 = gx[0] * gx[0] + gy[0] * gy[0];
        if g2 < MIN_GRAD_SQ {
            return (0.0, 0.0);
        }
        let rho = r[0];
        return if rho < -theta * g2 {
            (theta * gx[0], theta * gy[0])
        } else if rho > theta * g2 {
            (-theta * gx[0], -theta * gy[0])
        } else {
            (-rho * gx[0] / g2, -rho * gy[0] / g2)
        };
    }
    match principal_direction(gx, gy) {
        Some(e) => prox_projected(r, gx, gy, e, theta),
        None => (0.0, 0.0),
    }
}

/// Dominant direction of the structure tensor `Σ g gᵀ`.
fn principal_direction(gx: &[f64], gy: &[f64]) -> Option<(f64, f64)> {
    let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
    for (x, y) in gx.iter().zip(gy) {
        a += x * x;
        b += x * y;
        d += y * y;
    }
    if a + d < MIN_GRAD_SQ {
        return None;
    }
    let angle = 0.5 * (2.0 * b).atan2(a - d);
    Some((angle.cos(), angle.sin()))
}

fn prox_projected(r: &[f64], gx: &[f64], gy: &[f64], (ex, ey): (f64, f64), theta: f64) -> (f64, f64) {
    let mut s = [0.0; MAX_CHANNELS];
    for (k, (x, y)) in gx.iter().zip(gy).enumerate() {
        s[k] = x * ex + y * ey;
    }
    let t = minimize_piecewise(r, &s[..r.len()], theta);
    (t * ex, t * ey)
}

fn prox_with(lin: &Linearization, aux: &FlowField, theta: f64) -> FlowField {
    let ch = lin.channels;
    let mut out = aux.clone();
    let mut r = [0.0; MAX_CHANNELS];
    let n = aux.height() * aux.width();
    for i in 0..n {
        if !lin.valid[i] {
            continue;
        }
        let du = aux.u()[i] - lin.base.u()[i];
        let dv = aux.v()[i] - lin.base.v()[i];
        let s = i * ch;
        for c in 0..ch {
            r[c] = lin.residual[s + c] + lin.gx[s + c] * du + lin.gy[s + c] * dv;
        }
        let (gx, gy) = (&lin.gx[s..s + ch], &lin.gy[s..s + ch]);
        let (a, b) = if ch == 1 {
            prox_pixel(&r[..1], gx, gy, theta)
        } else if let Some(e) = lin.dir[i] {
            prox_projected(&r[..ch], gx, gy, e, theta)
        } else {
            (0.0, 0.0)
        };
        out.u_mut()[i] += a;
        out.v_mut()[i] += b;
    }
    out
}

/// Data half of the relaxation: per pixel, minimizes
/// `Σ_c |ρ_c(w)| + ‖w - aux‖² / (2 theta)` where `ρ` is the residual of
/// `frame1` linearized at `base`. Pixels without data (zero gradient, or
/// `base` pointing outside the image) keep `aux`.
pub fn data_prox(
    frame0: &Image,
    frame1: &Image,
    base: &FlowField,
    aux: &FlowField,
    theta: f64,
) -> Result<FlowField> {
    frame0.check_same_shape(frame1)?;
    frame0.check_flow(base)?;
    frame0.check_flow(aux)?;
    let lin = linearize(frame0, frame1, base, RelaxConfig::default().gradient_sigma);
    Ok(prox_with(&lin, aux, theta))
}

/// Per-pixel objective minimized by [`data_prox`]; exposed for tests and diagnostics.
pub fn data_prox_objective(
    frame0: &Image,
    frame1: &Image,
    base: &FlowField,
    aux: &FlowField,
    candidate: &FlowField,
    theta: f64,
) -> Vec<f64> {
    let lin = linearize(frame0, frame1, base, RelaxConfig::default().gradient_sigma);
    let ch = lin.channels;
    (0..aux.height() * aux.width())
        .map(|i| {
            let (du, dv) = (
                candidate.u()[i] - aux.u()[i],
                candidate.v()[i] - aux.v()[i],
            );
            let quad = (du * du + dv * dv) / (2.0 * theta);
            if !lin.valid[i] {
                return quad;
            }
            let bu = candidate.u()[i] - lin.base.u()[i];
            let bv = candidate.v()[i] - lin.base.v()[i];
            let data: f64 = (0..ch)
                .map(|c| {
                    let s = i * ch + c;
                    (lin.residual[s] + lin.gx[s] * bu + lin.gy[s] * bv).abs()
                })
                .sum();
            data + quad
        })
        .collect()
}

/// Primal-dual state for `weight·TV(p) + ½‖p - target‖²` on one component.
#[derive(Debug, Clone)]
struct TvState {
    h: usize,
    w: usize,
    primal: Vec<f64>,
    primal_bar: Vec<f64>,
    px: Vec<f64>,
    py: Vec<f64>,
}

impl TvState {
    fn new(start: &[f64], h: usize, w: usize) -> Self {
        TvState {
            h,
            w,
            primal: start.to_vec(),
            primal_bar: start.to_vec(),
            px: vec![0.0; start.len()],
            py: vec![0.0; start.len()],
        }
    }

    /// One iteration; `theta_acc` is the extrapolation factor.
    fn step(&mut self, target: &[f64], weight: f64, tau: f64, sigma: f64, theta_acc: f64) {
        let (gx, gy) = diff::gradient(&self.primal_bar, self.h, self.w);
        for i in 0..self.px.len() {
            self.px[i] = (self.px[i] + sigma * gx[i]).clamp(-weight, weight);
            self.py[i] = (self.py[i] + sigma * gy[i]).clamp(-weight, weight);
        }
        let div = diff::divergence(&self.px, &self.py, self.h, self.w);
        for i in 0..self.primal.len() {
            let old = self.primal[i];
            let new = (old + tau * div[i] + tau * target[i]) / (1.0 + tau);
            self.primal[i] = new;
            self.primal_bar[i] = new + theta_acc * (new - old);
        }
    }

    fn set_primal(&mut self, p: &[f64]) {
        self.primal.copy_from_slice(p);
        self.primal_bar.copy_from_slice(p);
    }

    fn gap(&self, target: &[f64], weight: f64) -> f64 {
        let (gx, gy) = diff::gradient(&self.primal, self.h, self.w);
        let primal = weight * (diff::l1_norm(&gx) + diff::l1_norm(&gy))
            + 0.5
                * self
                    .primal
                    .iter()
                    .zip(target)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
        let div = diff::divergence(&self.px, &self.py, self.h, self.w);
        let dual = -diff::dot(target, &div) - 0.5 * diff::dot(&div, &div);
        primal - dual
    }
}

/// Primal-dual state for `weight·TGV²(p) + ½‖p - target‖²` on one component.
#[derive(Debug, Clone)]
struct TgvState {
    h: usize,
    w: usize,
    primal: Vec<f64>,
    primal_bar: Vec<f64>,
    aux: energy::VectorField,
    aux_bar: energy::VectorField,
    px: Vec<f64>,
    py: Vec<f64>,
    q11: Vec<f64>,
    q22: Vec<f64>,
    q12: Vec<f64>,
}

impl TgvState {
    fn new(start: &[f64], h: usize, w: usize) -> Self {
        let n = start.len();
        let aux = energy::initial_tgv_auxiliary(start, h, w);
        TgvState {
            h,
            w,
            primal: start.to_vec(),
            primal_bar: start.to_vec(),
            aux_bar: aux.clone(),
            aux,
            px: vec![0.0; n],
            py: vec![0.0; n],
            q11: vec![0.0; n],
            q22: vec![0.0; n],
            q12: vec![0.0; n],
        }
    }

    fn step(&mut self, target: &[f64], weight: f64, tgv: TgvWeights, tau: f64, sigma: f64) {
        let (h, w) = (self.h, self.w);
        let (gx, gy) = diff::gradient(&self.primal_bar, h, w);
        let b1 = weight * tgv.first_order;
        let b0 = weight * tgv.second_order;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                // boundary differences are not part of the operator
                self.px[i] = if x + 1 < w {
                    (self.px[i] + sigma * (gx[i] - self.aux_bar.x[i])).clamp(-b1, b1)
                } else {
                    0.0
                };
                self.py[i] = if y + 1 < h {
                    (self.py[i] + sigma * (gy[i] - self.aux_bar.y[i])).clamp(-b1, b1)
                } else {
                    0.0
                };
            }
        }
        let (e11, e22, e12) = diff::sym_gradient(&self.aux_bar.x, &self.aux_bar.y, h, w);
        for i in 0..self.q11.len() {
            self.q11[i] = (self.q11[i] + sigma * e11[i]).clamp(-b0, b0);
            self.q22[i] = (self.q22[i] + sigma * e22[i]).clamp(-b0, b0);
            self.q12[i] = (self.q12[i] + sigma * e12[i]).clamp(-b0, b0);
        }
        let div = diff::divergence(&self.px, &self.py, h, w);
        let (t1, t2) = diff::sym_gradient_transpose(&self.q11, &self.q22, &self.q12, h, w);
        for i in 0..self.primal.len() {
            let old = self.primal[i];
            let new = (old + tau * div[i] + tau * target[i]) / (1.0 + tau);
            self.primal[i] = new;
            self.primal_bar[i] = 2.0 * new - old;

            let ox = self.aux.x[i];
            let nx = ox + tau * (self.px[i] - t1[i]);
            self.aux.x[i] = nx;
            self.aux_bar.x[i] = 2.0 * nx - ox;
            let oy = self.aux.y[i];
            let ny = oy + tau * (self.py[i] - t2[i]);
            self.aux.y[i] = ny;
            self.aux_bar.y[i] = 2.0 * ny - oy;
        }
    }

    fn set_primal(&mut self, p: &[f64]) {
        self.primal.copy_from_slice(p);
        self.primal_bar.copy_from_slice(p);
    }
}

/// Result of a standalone smoothness prox.
#[derive(Debug, Clone)]
pub struct ProxResult {
    pub flow: FlowField,
    /// Primal-dual gap on exit (TV only; NaN for TGV²).
    pub gap: f64,
}

/// Approximate minimizer of `weight·TV(flow) + ½‖flow - target‖²`, using the
/// accelerated primal-dual scheme (the quadratic term is 1-strongly convex).
pub fn smooth_prox_tv(
    target: &FlowField,
    weight: f64,
    iters: usize,
    tau: f64,
    sigma: f64,
) -> ProxResult {
    let (h, w) = (target.height(), target.width());
    let mut comps = Vec::with_capacity(2);
    let mut gap = 0.0;
    for t in target.components() {
        let mut st = TvState::new(t, h, w);
        let (mut tau_k, mut sigma_k) = (tau, sigma);
        for _ in 0..iters {
            let theta_k = 1.0 / (1.0 + 2.0 * tau_k).sqrt();
            st.step(t, weight, tau_k, sigma_k, theta_k);
            tau_k *= theta_k;
            sigma_k /= theta_k;
        }
        gap += st.gap(t, weight);
        comps.push(st.primal);
    }
    let v = comps.pop().unwrap();
    let u = comps.pop().unwrap();
    ProxResult {
        flow: FlowField::new(h, w, u, v).expect("prox keeps the shape"),
        gap,
    }
}

/// Approximate minimizer of `weight·TGV²(flow) + ½‖flow - target‖²`.
/// The steps are scaled internally from the gradient-operator bound to the
/// larger TGV² operator bound.
pub fn smooth_prox_tgv2(
    target: &FlowField,
    weight: f64,
    tgv: TgvWeights,
    iters: usize,
    tau: f64,
    sigma: f64,
) -> ProxResult {
    let (h, w) = (target.height(), target.width());
    let k = (GRADIENT_NORM_SQ / TGV_NORM_SQ).sqrt();
    let mut comps = Vec::with_capacity(2);
    for t in target.components() {
        let mut st = TgvState::new(t, h, w);
        for _ in 0..iters {
            st.step(t, weight, tgv, tau * k, sigma * k);
        }
        comps.push(st.primal);
    }
    let v = comps.pop().unwrap();
    let u = comps.pop().unwrap();
    ProxResult {
        flow: FlowField::new(h, w, u, v).expect("prox keeps the shape"),
        gap: f64::NAN,
    }
}

enum Smoother {
    Tv([TvState; 2]),
    Tgv([TgvState; 2], TgvWeights),
}

impl Smoother {
    fn new(flow: &FlowField, regularizer: FlowRegularizer) -> Self {
        let (h, w) = (flow.height(), flow.width());
        match regularizer {
            FlowRegularizer::Tv => {
                Smoother::Tv([TvState::new(flow.u(), h, w), TvState::new(flow.v(), h, w)])
            }
            FlowRegularizer::Tgv2(t) => Smoother::Tgv(
                [TgvState::new(flow.u(), h, w), TgvState::new(flow.v(), h, w)],
                t,
            ),
        }
    }

    fn step(&mut self, target: &FlowField, weight: f64, cfg: &RelaxConfig) {
        match self {
            Smoother::Tv(states) => {
                for (st, t) in states.iter_mut().zip(target.components()) {
                    st.step(t, weight, cfg.tau, cfg.sigma, 1.0);
                }
            }
            Smoother::Tgv(states, tgv) => {
                let (tau, sigma) = cfg.tgv_steps();
                for (st, t) in states.iter_mut().zip(target.components()) {
                    st.step(t, weight, *tgv, tau, sigma);
                }
            }
        }
    }

    fn primal(&self, h: usize, w: usize) -> FlowField {
        let (u, v) = match self {
            Smoother::Tv([a, b]) => (a.primal.clone(), b.primal.clone()),
            Smoother::Tgv([a, b], _) => (a.primal.clone(), b.primal.clone()),
        };
        FlowField::new(h, w, u, v).expect("primal keeps the shape")
    }

    fn set_primal(&mut self, flow: &FlowField) {
        match self {
            Smoother::Tv([a, b]) => {
                a.set_primal(flow.u());
                b.set_primal(flow.v());
            }
            Smoother::Tgv([a, b], _) => {
                a.set_primal(flow.u());
                b.set_primal(flow.v());
            }
        }
    }
}

/// 5x5 median of each component, with the window clipped at the border.
pub fn median_filter(flow: &FlowField) -> FlowField {
    let (h, w) = (flow.height(), flow.width());
    let filt = |p: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; p.len()];
        let mut win = Vec::with_capacity(25);
        for y in 0..h {
            for x in 0..w {
                win.clear();
                for yy in y.saturating_sub(2)..(y + 3).min(h) {
                    for xx in x.saturating_sub(2)..(x + 3).min(w) {
                        win.push(p[yy * w + xx]);
                    }
                }
                let mid = win.len() / 2;
                win.select_nth_unstable_by(mid, f64::total_cmp);
                out[y * w + x] = win[mid];
            }
        }
        out
    };
    FlowField::new(h, w, filt(flow.u()), filt(flow.v())).expect("median keeps the shape")
}

/// `Σ|frame0 - frame1(x + flow)| + lambda_F R(flow)`, the objective of one
/// flow subproblem.
pub fn single_flow_energy(problem: &FlowProblem, flow: &FlowField) -> Result<f64> {
    let dec = LayerDecomposition::new(
        problem.frame0.clone(),
        problem.frame1.clone(),
        problem.frame0.clone(),
        problem.frame0.clone(),
        1.0,
    )?;
    let zero = FlowField::zeros(flow.height(), flow.width());
    let data = energy::data_term(&dec, flow, &zero)?;
    Ok(data + problem.lambda_f * energy::flow_prior(flow, problem.regularizer))
}

fn check_finite(img: &Image, what: &'static str) -> Result<()> {
    if img.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Coarse-to-fine solve of one flow subproblem starting from `init`.
/// Never returns a flow whose subproblem energy exceeds that of `init`.
pub fn solve_single_flow(
    problem: &FlowProblem,
    init: &FlowField,
    cfg: &RelaxConfig,
) -> Result<FlowField> {
    cfg.validate()?;
    problem.frame0.check_same_shape(problem.frame1)?;
    problem.frame0.check_flow(init)?;
    check_finite(problem.frame0, "first frame")?;
    check_finite(problem.frame1, "second frame")?;
    if init.u().iter().chain(init.v()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial flow"));
    }
    if !(problem.lambda_f >= 0.0) {
        return Err(Error::InvalidArgument("lambda_F must be non-negative".into()));
    }
    let lambda_f = problem.lambda_f.max(1e-9);
    let theta_data = cfg.theta / lambda_f;
    let weight = cfg.theta;

    let p0 = build_pyramid(problem.frame0, cfg.scale_factor, cfg.min_size)?;
    let p1 = build_pyramid(problem.frame1, cfg.scale_factor, cfg.min_size)?;
    let run = |levels: &mut dyn Iterator<Item = usize>| {
        let mut flow = init.clone();
        for level in levels {
            let (f0, f1) = (&p0.levels[level], &p1.levels[level]);
            let (h, w) = (f0.height(), f0.width());
            let mut current = rescale_flow(&flow, h, w);
            let mut smoother = Smoother::new(&current, problem.regularizer);
            for _ in 0..cfg.warps_per_level {
                let lin = linearize(f0, f1, &current, cfg.gradient_sigma);
                for _ in 0..cfg.pd_iters {
                    let aux = prox_with(&lin, &smoother.primal(h, w), theta_data);
                    smoother.step(&aux, weight, cfg);
                }
                current = smoother.primal(h, w);
                if cfg.median_filter {
                    current = median_filter(&current);
                    smoother.set_primal(&current);
                }
            }
            flow = current;
        }
        flow
    };
    let init_energy = single_flow_energy(problem, init)?;
    let result = run(&mut (0..p0.len()).rev());
    let result_energy = single_flow_energy(problem, &result)?;
    if result_energy <= init_energy {
        return Ok(result);
    }
    // the pyramid can lose a good initialization; retry at full resolution only
    let local = run(&mut std::iter::once(0));
    if single_flow_energy(problem, &local)? <= init_energy {
        Ok(local)
    } else {
        Ok(init.clone())
    }
}

/// Flow step of the alternation: `U` from the background pair and `V` from
/// the foreground pair, solved independently. In static mode `V` is zero.
pub fn solve_flows(
    dec: &LayerDecomposition,
    u_init: &FlowField,
    v_init: &FlowField,
    weights: &Weights,
    cfg: &RelaxConfig,
    mode: Mode,
) -> Result<(FlowField, FlowField)> {
    let background = FlowProblem {
        frame0: &dec.l1,
        frame1: &dec.l1p,
        lambda_f: weights.flow_weight(dec.channels()),
        regularizer: weights.regularizer,
    };
    match mode {
        Mode::StaticForeground => {
            let u = solve_single_flow(&background, u_init, cfg)?;
            Ok((u, FlowField::zeros(u_init.height(), u_init.width())))
        }
        Mode::DynamicForeground => {
            let foreground = FlowProblem {
                frame0: &dec.l2,
                frame1: &dec.l2p,
                ..background
            };
            let (u, v) = thread::scope(|s| {
                let hu = s.spawn(|| solve_single_flow(&background, u_init, cfg));
                let v = solve_single_flow(&foreground, v_init, cfg);
                (hu.join().expect("flow worker panicked"), v)
            });
            Ok((u?, v?))
        }
    }
}
