//! Synthetic double-layer pairs with exact ground truth.
//!
//! Layers that move are rendered from a 4x supersampled master: the first
//! frame samples the master on the pixel grid and the second frame samples
//! it at `phi^-1(y)`, where `phi(x) = x + flow(x)`. The layer brightness
//! constancy `L(x) = L'(x + flow(x))` then holds up to the interpolation
//! error of reading `L'` between pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::alternation::{repair_layers, Mode};
use crate::energy::{self, LayerDecomposition};
use crate::error::{Error, Result};
use crate::image::{blur_plane, compose, gaussian_blur, sample_clamped, FlowField, Image};

pub const MASTER_SCALE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowKind {
    Constant { dx: f64, dy: f64 },
    /// Affine map `x -> A x + b` as `[a11, a12, b1, a21, a22, b2]`, in
    /// coordinates centred on the image; the flow is `A x + b - x`.
    Affine([f64; 6]),
    /// Gaussian-smoothed white noise rescaled to a maximum magnitude of `amplitude`.
    SmoothRandom {
        amplitude: f64,
        smoothness: f64,
        seed: u64,
    },
    /// A global translation plus a `SmoothRandom` component.
    Drift {
        dx: f64,
        dy: f64,
        amplitude: f64,
        smoothness: f64,
        seed: u64,
    },
}

fn normal_plane(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn make_flow(kind: FlowKind, height: usize, width: usize) -> Result<FlowField> {
    if height < 2 || width < 2 {
        return Err(Error::InvalidShape(format!("{height}x{width}")));
    }
    let (cy, cx) = ((height - 1) as f64 / 2.0, (width - 1) as f64 / 2.0);
    match kind {
        FlowKind::Constant { dx, dy } => Ok(FlowField::constant(height, width, dx, dy)),
        FlowKind::Affine([a11, a12, b1, a21, a22, b2]) => Ok(FlowField::from_fn(height, width, |y, x| {
            let (px, py) = (x as f64 - cx, y as f64 - cy);
            (
                a11 * px + a12 * py + b1 - px,
                a21 * px + a22 * py + b2 - py,
            )
        })),
        FlowKind::Drift {
            dx,
            dy,
            amplitude,
            smoothness,
            seed,
        } => {
            let r = make_flow(
                FlowKind::SmoothRandom {
                    amplitude,
                    smoothness,
                    seed,
                },
                height,
                width,
            )?;
            FlowField::new(
                height,
                width,
                r.u().iter().map(|a| a + dx).collect(),
                r.v().iter().map(|a| a + dy).collect(),
            )
        }
        FlowKind::SmoothRandom {
            amplitude,
            smoothness,
            seed,
        } => {
            let limit = height.min(width) as f64 / 4.0;
            if !(amplitude >= 0.0 && amplitude <= limit) {
                return Err(Error::InvalidArgument(format!(
                    "flow amplitude {amplitude} exceeds min(h, w) / 4 = {limit}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = height * width;
            let u = blur_plane(&normal_plane(n, &mut rng), height, width, smoothness);
            let v = blur_plane(&normal_plane(n, &mut rng), height, width, smoothness);
            let peak = u
                .iter()
                .zip(&v)
                .map(|(a, b)| a.hypot(*b))
                .fold(0.0, f64::max);
            let k = if peak > 0.0 { amplitude / peak } else { 0.0 };
            FlowField::new(
                height,
                width,
                u.iter().map(|a| a * k).collect(),
                v.iter().map(|a| a * k).collect(),
            )
        }
    }
}

/// A layer stored at `scale` times the pixel resolution. Pixel `(y, x)`
/// sits at master coordinate `(scale*y, scale*x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Master {
    pub scale: usize,
    pub height: usize,
    pub width: usize,
    pub image: Image,
}

impl Master {
    /// Master covering a `height x width` pixel grid.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        scale: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let image = Image::from_fn((height - 1) * scale + 1, (width - 1) * scale + 1, channels, f);
        Ok(Master {
            scale,
            height,
            width,
            image,
        })
    }

    /// Bilinear upsampling of a pixel-resolution layer.
    pub fn from_image(img: &Image, scale: usize) -> Result<Self> {
        let (h, w) = (img.height(), img.width());
        let planes = img.planes();
        Self::from_fn(h, w, img.channels(), scale, |y, x, c| {
            sample_clamped(
                &planes[c],
                h,
                w,
                x as f64 / scale as f64,
                y as f64 / scale as f64,
            )
        })
    }

    /// Samples at pixel-unit coordinates, clamped to the grid.
    fn sample(&self, planes: &[Vec<f64>], px: f64, py: f64, c: usize) -> f64 {
        let s = self.scale as f64;
        sample_clamped(
            &planes[c],
            self.image.height(),
            self.image.width(),
            px * s,
            py * s,
        )
    }

    /// The layer on the pixel grid.
    pub fn first_frame(&self) -> Image {
        let s = self.scale;
        Image::from_fn(self.height, self.width, self.image.channels(), |y, x, c| {
            self.image.get(y * s, x * s, c)
        })
    }

    /// The layer moved by `flow`: `out(x + flow(x)) = first_frame(x)`.
    pub fn moved_frame(&self, flow: &FlowField) -> Image {
        let planes = self.image.planes();
        let ch = self.image.channels();
        let mut out = Image::zeros(self.height, self.width, ch);
        for y in 0..self.height {
            for x in 0..self.width {
                let (sx, sy) = invert_displacement(flow, x as f64, y as f64);
                for c in 0..ch {
                    out.set(y, x, c, self.sample(&planes, sx, sy, c));
                }
            }
        }
        out
    }
}

/// Solves `p + flow(p) = (x, y)` for `p` by fixed-point iteration, with
/// the flow interpolated bilinearly and clamped at the border.
pub fn invert_displacement(flow: &FlowField, x: f64, y: f64) -> (f64, f64) {
    let (h, w) = (flow.height(), flow.width());
    let (mut px, mut py) = (x, y);
    for _ in 0..50 {
        let du = sample_clamped(flow.u(), h, w, px, py);
        let dv = sample_clamped(flow.v(), h, w, px, py);
        let (nx, ny) = (x - du, y - dv);
        let done = (nx - px).abs() < 1e-12 && (ny - py).abs() < 1e-12;
        px = nx;
        py = ny;
        if done {
            break;
        }
    }
    (px, py)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBundle {
    pub name: String,
    pub i0: Image,
    pub i1: Image,
    pub gt: LayerDecomposition,
    pub gt_u: FlowField,
    pub gt_v: FlowField,
    pub mode: Mode,
    pub seed: u64,
}

/// Figures reported by [`GroundTruthBundle::verify`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BundleCheck {
    /// Mean absolute layer brightness-constancy residual per valid sample.
    pub bcc_mean_abs: f64,
    /// Fraction of foreground gradient magnitudes below 1e-3.
    pub fg_flat_fraction: f64,
}

/// Fraction of forward-difference gradient magnitudes below `tol`.
pub fn flat_gradient_fraction(img: &Image, tol: f64) -> f64 {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut flat = 0usize;
    for c in 0..ch {
        let p = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let gx = if x + 1 < w { p[i + 1] - p[i] } else { 0.0 };
                let gy = if y + 1 < h { p[i + w] - p[i] } else { 0.0 };
                if gx.hypot(gy) < tol {
                    flat += 1;
                }
            }
        }
    }
    flat as f64 / (h * w * ch) as f64
}

impl GroundTruthBundle {
    /// Checks exact composition, the foreground bounds, static-mode
    /// structure and layer brightness constancy (mean residual ≤ 1e-2).
    pub fn verify(&self) -> Result<BundleCheck> {
        let d = &self.gt;
        for (img, l1, l2, name) in [(&self.i0, &d.l1, &d.l2, "first"), (&self.i1, &d.l1p, &d.l2p, "second")] {
            let comp = compose(l1, l2)?;
            if comp.clipped || comp.image != *img {
                return Err(Error::LayerConstraint(format!(
                    "{name} frame is not the exact sum of its layers"
                )));
            }
        }
        d.check_constraints(&self.i0, &self.i1, 0.0)?;
        if self.mode == Mode::StaticForeground && (d.l2 != d.l2p || !self.gt_v.is_zero()) {
            return Err(Error::LayerConstraint(
                "static bundle needs L2' = L2 and V = 0".into(),
            ));
        }
        let data = energy::data_term_detailed(d, &self.gt_u, &self.gt_v)?;
        let samples = 2 * self.i0.data().len() - data.masked;
        let bcc = if samples == 0 { 0.0 } else { data.value / samples as f64 };
        if bcc > 1e-2 {
            return Err(Error::LayerConstraint(format!(
                "layer brightness constancy residual {bcc:.3e} above 1e-2"
            )));
        }
        Ok(BundleCheck {
            bcc_mean_abs: bcc,
            fg_flat_fraction: flat_gradient_fraction(&d.l2, 1e-3),
        })
    }
}

/// Builds a pair from background and foreground masters and their motions.
/// In static mode the foreground is not moved and `gt_v` is replaced by zero.
pub fn render_pair(
    l1: &Master,
    l2: &Master,
    gt_u: &FlowField,
    gt_v: &FlowField,
    mode: Mode,
    c: f64,
) -> Result<GroundTruthBundle> {
    let bg = l1.first_frame();
    let bgp = if gt_u.is_zero() { bg.clone() } else { l1.moved_frame(gt_u) };
    let fg = l2.first_frame();
    bg.check_same_shape(&fg)?;
    bg.check_flow(gt_u)?;
    bg.check_flow(gt_v)?;
    let (fgp, v) = match mode {
        Mode::StaticForeground => (fg.clone(), FlowField::zeros(gt_u.height(), gt_u.width())),
        Mode::DynamicForeground => {
            let moved = if gt_v.is_zero() { fg.clone() } else { l2.moved_frame(gt_v) };
            (moved, gt_v.clone())
        }
    };
    for (name, img) in [("L2", &fg), ("L2'", &fgp)] {
        if img.min_value() < 0.0 || img.max_value() > c {
            return Err(Error::LayerConstraint(format!("{name} must lie in [0, c = {c}]")));
        }
    }
    let i0 = compose(&bg, &fg)?;
    let i1 = compose(&bgp, &fgp)?;
    if i0.clipped || i1.clipped || bg.min_value() < 0.0 || bgp.min_value() < 0.0 {
        return Err(Error::LayerConstraint(
            "layers must be pre-scaled so that 0 <= L1 and L1 + L2 <= 1".into(),
        ));
    }
    Ok(GroundTruthBundle {
        name: String::new(),
        i0: i0.image,
        i1: i1.image,
        gt: LayerDecomposition::new(bg, bgp, fg, fgp, c)?,
        gt_u: gt_u.clone(),
        gt_v: v,
        mode,
        seed: 0,
    })
}

fn normalize(p: &mut [f64]) {
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p.len() as f64;
    let sd = var.sqrt().max(1e-12);
    p.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

/// Textured background master with values in `[lo, hi]`.
pub fn textured_master(
    height: usize,
    width: usize,
    channels: usize,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Master> {
    let s = MASTER_SCALE;
    let (mh, mw) = ((height - 1) * s + 1, (width - 1) * s + 1);
    let octave = |sigma: f64, rng: &mut ChaCha8Rng| {
        let mut p = blur_plane(&normal_plane(mh * mw, rng), mh, mw, sigma * s as f64);
        normalize(&mut p);
        p
    };
    let shared: Vec<f64> = {
        let fine = octave(1.2, rng);
        let coarse = octave(5.0, rng);
        fine.iter().zip(&coarse).map(|(a, b)| 0.65 * a + 0.35 * b).collect()
    };
    let mut planes = Vec::with_capacity(channels);
    for _ in 0..channels {
        let p = if channels == 1 {
            shared.clone()
        } else {
            let own = octave(2.0, rng);
            shared.iter().zip(&own).map(|(a, b)| 0.8 * a + 0.2 * b).collect()
        };
        planes.push(p);
    }
    let min = planes.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b));
    let max = planes.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = (max - min).max(1e-12);
    for p in &mut planes {
        p.iter_mut().for_each(|v| *v = lo + (hi - lo) * (*v - min) / span);
    }
    Ok(Master {
        scale: s,
        height,
        width,
        image: Image::from_planes(mh, mw, &planes)?,
    })
}

fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (px - ax - t * dx).hypot(py - ay - t * dy)
}

/// Sparse bright streaks on a zero layer, peak value at most `peak`.
pub fn rain_layer(
    height: usize,
    width: usize,
    channels: usize,
    peak: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Image {
    let slant: f64 = rng.gen_range(-0.35..0.35);
    let mut plane = vec![0.0f64; height * width];
    for _ in 0..count {
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let len = rng.gen_range(4.0..12.0);
        let angle = std::f64::consts::FRAC_PI_2 + slant + rng.gen_range(-0.08..0.08);
        let amp = peak * rng.gen_range(0.5..1.0);
        let (hx, hy) = (0.5 * len * angle.cos(), 0.5 * len * angle.sin());
        let (ax, ay, bx, by) = (cx - hx, cy - hy, cx + hx, cy + hy);
        let x0 = (ax.min(bx) - 2.0).floor().max(0.0) as usize;
        let x1 = ((ax.max(bx) + 2.0).ceil() as usize).min(width - 1);
        let y0 = (ay.min(by) - 2.0).floor().max(0.0) as usize;
        let y1 = ((ay.max(by) + 2.0).ceil() as usize).min(height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = segment_distance(x as f64, y as f64, ax, ay, bx, by);
                let val = amp * (1.2 - d).clamp(0.0, 1.0);
                let p = &mut plane[y * width + x];
                *p = p.max(val);
            }
        }
    }
    Image::from_fn(height, width, channels, |y, x, _| plane[y * width + x])
}

const EDGE_WIDTH: f64 = 2.0;

/// Flat discs and boxes with soft edges on a zero layer, at master resolution.
pub fn shapes_master(
    height: usize,
    width: usize,
    channels: usize,
    peak: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Master> {
    let s = MASTER_SCALE as f64;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let r = rng.gen_range(2.5..0.09 * height.min(width) as f64 + 3.0);
        let disc = rng.gen_bool(0.5);
        let amp = peak * rng.gen_range(0.4..1.0);
        shapes.push((cx, cy, r, disc, amp));
    }
    Master::from_fn(height, width, channels, MASTER_SCALE, |y, x, _| {
        let (px, py) = (x as f64 / s, y as f64 / s);
        let mut v = 0.0f64;
        for &(cx, cy, r, disc, amp) in &shapes {
            let depth = if disc {
                r - (px - cx).hypot(py - cy)
            } else {
                (r - (px - cx).abs()).min(0.6 * r - (py - cy).abs())
            };
            // smoothstep edge two pixels wide, so bilinear resampling stays accurate
            let t = (depth / EDGE_WIDTH + 0.5).clamp(0.0, 1.0);
            v = v.max(amp * t * t * (3.0 - 2.0 * t));
        }
        v
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Recipe {
    mode: Mode,
    size: (usize, usize),
    channels: usize,
    flow: FlowKind,
    fg_flow: FlowKind,
    fg_count: usize,
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn recipes(seed: u64) -> Vec<Recipe> {
    let random = |amplitude: f64, smoothness: f64, k: u64| FlowKind::SmoothRandom {
        amplitude,
        smoothness,
        seed: mix_seed(seed, 1000 + k),
    };
    let drift = |dx: f64, dy: f64, amplitude: f64, smoothness: f64, k: u64| FlowKind::Drift {
        dx,
        dy,
        amplitude,
        smoothness,
        seed: mix_seed(seed, 1000 + k),
    };
    let zero = FlowKind::Constant { dx: 0.0, dy: 0.0 };
    let stat = |size, channels, flow, fg_count| Recipe {
        mode: Mode::StaticForeground,
        size,
        channels,
        flow,
        fg_flow: zero,
        fg_count,
    };
    let dynamic = |size, channels, flow, fg_flow, fg_count| Recipe {
        mode: Mode::DynamicForeground,
        size,
        channels,
        flow,
        fg_flow,
        fg_count,
    };
    vec![
        stat((64, 64), 1, drift(1.2, 0.6, 1.5, 24.0, 0), 33),
        stat((64, 64), 1, FlowKind::Constant { dx: 1.6, dy: -0.7 }, 33),
        stat((64, 96), 1, drift(-1.0, 1.1, 2.0, 32.0, 1), 49),
        stat((80, 80), 3, drift(0.9, -1.3, 1.5, 32.0, 2), 51),
        stat((96, 96), 1, FlowKind::Affine([1.02, 0.01, 1.2, -0.01, 1.02, 0.8]), 74),
        stat((96, 64), 3, drift(-1.4, -0.5, 2.0, 32.0, 3), 49),
        stat((64, 64), 1, drift(0.4, 1.5, 1.5, 24.0, 4), 33),
        stat((96, 96), 1, random(4.0, 48.0, 5), 74),
        stat((128, 128), 1, drift(1.5, 0.3, 2.5, 48.0, 6), 131),
        stat((128, 128), 3, drift(-0.8, 1.2, 2.5, 48.0, 7), 131),
        dynamic((64, 64), 1, drift(0.8, 0.5, 1.5, 24.0, 8), FlowKind::Constant { dx: -1.3, dy: 0.6 }, 14),
        dynamic((80, 80), 1, drift(-0.6, 1.0, 2.0, 32.0, 9), FlowKind::Constant { dx: 1.1, dy: 1.0 }, 19),
        dynamic((96, 96), 3, drift(1.0, -0.4, 2.0, 32.0, 10), FlowKind::Affine([0.99, 0.0, -1.2, 0.0, 0.99, 0.4]), 25),
        dynamic((64, 96), 1, drift(-0.9, -0.6, 1.5, 24.0, 11), FlowKind::Constant { dx: 0.8, dy: -1.2 }, 19),
        dynamic((128, 128), 1, drift(0.5, 1.2, 2.5, 48.0, 12), FlowKind::Constant { dx: -1.0, dy: -0.9 }, 38),
    ]
}

// Low contrast behind the streaks so they visibly bias a naive flow; the
// reflection scenes keep the background dominant, as in real captures.
const STATIC_BACKGROUND: (f64, f64) = (0.25, 0.55);
const DYNAMIC_BACKGROUND: (f64, f64) = (0.1, 0.7);

/// Foreground peak relative to the bound `c`.
pub const FOREGROUND_PEAK: f64 = 0.8;

fn build(recipe: &Recipe, index: usize, seed: u64, c: f64) -> Result<GroundTruthBundle> {
    let inst_seed = mix_seed(seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(inst_seed);
    let (h, w) = recipe.size;
    let ch = recipe.channels;
    let peak = FOREGROUND_PEAK * c;
    // low-contrast background so the streaks visibly bias a naive flow
    let (lo, hi) = match recipe.mode {
        Mode::StaticForeground => STATIC_BACKGROUND,
        Mode::DynamicForeground => DYNAMIC_BACKGROUND,
    };
    let bg = textured_master(h, w, ch, lo, hi, &mut rng)?;
    let u = make_flow(recipe.flow, h, w)?;
    let (fg, v) = match recipe.mode {
        Mode::StaticForeground => {
            let rain = rain_layer(h, w, ch, peak, recipe.fg_count, &mut rng);
            (Master::from_image(&rain, 1)?, FlowField::zeros(h, w))
        }
        Mode::DynamicForeground => (
            shapes_master(h, w, ch, peak, recipe.fg_count, &mut rng)?,
            make_flow(recipe.fg_flow, h, w)?,
        ),
    };
    let mut bundle = render_pair(&bg, &fg, &u, &v, recipe.mode, c)?;
    bundle.name = format!(
        "{:02}_{}_{}x{}_{}ch",
        index,
        recipe.mode.name(),
        h,
        w,
        ch
    );
    bundle.seed = seed;
    Ok(bundle)
}

/// The fixed catalog: ten static-foreground instances (sparse streaks) and
/// five dynamic ones (moving piecewise-constant shapes), 64 to 128 pixels
/// on a side, one and three channels.
pub fn standard_suite(seed: u64) -> Vec<GroundTruthBundle> {
    suite_with_bound(seed, crate::layer::DEFAULT_BOUND)
}

pub fn suite_with_bound(seed: u64, c: f64) -> Vec<GroundTruthBundle> {
    recipes(seed)
        .iter()
        .enumerate()
        .map(|(i, r)| build(r, i, seed, c).expect("catalog recipes are valid"))
        .collect()
}

/// Catalog variant: only instances of `mode` (all if `None`), optionally
/// rendered at another size. The foreground density is kept by scaling the
/// streak or shape count with the area. Instance names keep their catalog index.
pub fn custom_suite(
    seed: u64,
    c: f64,
    mode: Option<Mode>,
    size: Option<(usize, usize)>,
) -> Result<Vec<GroundTruthBundle>> {
    if let Some((h, w)) = size {
        if h < 2 || w < 2 {
            return Err(Error::InvalidShape(format!("instances must be at least 2x2, got {h}x{w}")));
        }
    }
    let mut out = Vec::new();
    for (i, r) in recipes(seed).iter().enumerate() {
        if mode.is_some_and(|m| m != r.mode) {
            continue;
        }
        let mut r = *r;
        if let Some((h, w)) = size {
            let ratio = (h * w) as f64 / (r.size.0 * r.size.1) as f64;
            r.fg_count = ((r.fg_count as f64 * ratio).round() as usize).max(1);
            r.size = (h, w);
        }
        out.push(build(&r, i, seed, c)?);
    }
    Ok(out)
}

/// Degraded copies of the ground-truth foreground: Gaussian blur (sigma 1)
/// plus Gaussian noise at 10% of the layer's peak, then clipped into the
/// feasible box with the background completed as `I - L2`.
pub fn perturbed_layers(bundle: &GroundTruthBundle, seed: u64) -> Result<LayerDecomposition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut degrade = |img: &Image| {
        let amp = 0.1 * img.max_value();
        let mut out = gaussian_blur(img, 1.0);
        for v in out.data_mut() {
            *v += amp * rng.sample::<f64, _>(StandardNormal);
        }
        out
    };
    let l2 = degrade(&bundle.gt.l2);
    let l2p = match bundle.mode {
        Mode::StaticForeground => l2.clone(),
        Mode::DynamicForeground => degrade(&bundle.gt.l2p),
    };
    repair_layers(&bundle.i0, &bundle.i1, &l2, &l2p, bundle.gt.c)
}
