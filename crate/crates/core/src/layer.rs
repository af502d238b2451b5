//! Layer separation with the flows held fixed.
//!
//! After substituting `L1 = I - L2` and `L1' = I' - L2'`, the objective
//! `E_B + lambda_L E_L` is a sum of absolute values of sparse affine
//! functions of the stacked foreground unknowns `[L2, L2']`, subject to box
//! bounds. [`assemble_system`] builds those rows and [`irls_solve`] minimizes
//! their Huber-smoothed sum with a projected, reweighted least-squares
//! iteration.

use crate::alternation::Mode;
use crate::energy::LayerDecomposition;
use crate::error::{Error, Result};
use crate::image::{bilinear_taps, FlowField, Image};

pub const DEFAULT_BOUND: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// Brightness constancy of the background layers along `U`.
    BackgroundBcc,
    /// Brightness constancy of the foreground layers along `V`.
    ForegroundBcc,
    /// One weighted forward difference of a layer.
    Gradient,
}

/// `Σ_i |a_i · l - b_i|` with `lower <= l <= upper`, rows stored in CSR form.
#[derive(Debug, Clone)]
pub struct SparseL1System {
    unknowns: usize,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    rhs: Vec<f64>,
    kinds: Vec<RowKind>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SparseL1System {
    pub fn new(unknowns: usize, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != unknowns || upper.len() != unknowns {
            return Err(Error::mismatch(
                format!("{unknowns} bounds"),
                format!("{} / {}", lower.len(), upper.len()),
            ));
        }
        Ok(SparseL1System {
            unknowns,
            row_start: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
            rhs: Vec::new(),
            kinds: Vec::new(),
            lower,
            upper,
        })
    }

    /// Appends one row; repeated columns are merged and exact zeros dropped.
    pub fn push_row(&mut self, coeffs: &[(usize, f64)], rhs: f64, kind: RowKind) {
        let start = self.cols.len();
        for &(j, a) in coeffs {
            debug_assert!(j < self.unknowns);
            match self.cols[start..].iter().position(|&c| c == j) {
                Some(k) => self.vals[start + k] += a,
                None => {
                    self.cols.push(j);
                    self.vals.push(a);
                }
            }
        }
        let mut k = start;
        while k < self.cols.len() {
            if self.vals[k] == 0.0 {
                self.cols.remove(k);
                self.vals.remove(k);
            } else {
                k += 1;
            }
        }
        self.row_start.push(self.cols.len());
        self.rhs.push(rhs);
        self.kinds.push(kind);
    }

    pub fn unknowns(&self) -> usize {
        self.unknowns
    }

    pub fn rows(&self) -> usize {
        self.rhs.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64], f64) {
        let (a, b) = (self.row_start[i], self.row_start[i + 1]);
        (&self.cols[a..b], &self.vals[a..b], self.rhs[i])
    }

    pub fn kind(&self, i: usize) -> RowKind {
        self.kinds[i]
    }

    pub fn count_rows(&self, kind: RowKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }

    pub fn max_row_nonzeros(&self) -> usize {
        self.row_start
            .windows(2)
            .map(|w| w[1] - w[0])
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vals.iter().chain(&self.rhs).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer system"));
        }
        if self
            .lower
            .iter()
            .zip(&self.upper)
            .any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u))
        {
            return Err(Error::InvalidArgument("inconsistent variable bounds".into()));
        }
        Ok(())
    }

    /// `A l - b`.
    pub fn residuals(&self, l: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.rows()];
        self.residuals_into(l, &mut r);
        r
    }

    fn residuals_into(&self, l: &[f64], out: &mut [f64]) {
        for ((o, bounds), &b) in out.iter_mut().zip(self.row_start.windows(2)).zip(&self.rhs) {
            let cols = &self.cols[bounds[0]..bounds[1]];
            let vals = &self.vals[bounds[0]..bounds[1]];
            *o = cols.iter().zip(vals).map(|(&c, &a)| a * l[c]).sum::<f64>() - b;
        }
    }

    fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for k in self.row_start[i]..self.row_start[i + 1] {
                out[self.cols[k]] += self.vals[k] * yi;
            }
        }
    }

    /// `A^T diag(weights) A x` in one pass over the rows.
    fn apply_normal(&self, weights: &[f64], x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (bounds, &wi) in self.row_start.windows(2).zip(weights) {
            let cols = &self.cols[bounds[0]..bounds[1]];
            let vals = &self.vals[bounds[0]..bounds[1]];
            let s: f64 = cols.iter().zip(vals).map(|(&c, &a)| a * x[c]).sum::<f64>() * wi;
            if s != 0.0 {
                for (&c, &a) in cols.iter().zip(vals) {
                    out[c] += a * s;
                }
            }
        }
    }

    /// Plain ℓ1 objective `Σ|A l - b|`.
    pub fn objective(&self, l: &[f64]) -> f64 {
        self.residuals(l).iter().map(|r| r.abs()).sum()
    }

    /// Huber-smoothed objective minimized by [`irls_solve`].
    pub fn smoothed_objective(&self, l: &[f64], epsilon: f64) -> f64 {
        self.residuals(l).iter().map(|&r| huber(r, epsilon)).sum()
    }

    pub fn project(&self, l: &mut [f64]) -> bool {
        let mut changed = false;
        for ((v, lo), hi) in l.iter_mut().zip(&self.lower).zip(&self.upper) {
            let c = v.clamp(*lo, *hi);
            if c != *v {
                changed = true;
                *v = c;
            }
        }
        changed
    }
}

#[inline]
fn huber(r: f64, epsilon: f64) -> f64 {
    let a = r.abs();
    if a >= epsilon {
        a
    } else {
        r * r / (2.0 * epsilon) + epsilon / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsConfig {
    /// Final smoothing of `|r|` near zero, in brightness units.
    pub epsilon: f64,
    /// Smoothing of the first stage; it is divided by 10 whenever a stage
    /// stalls, down to `epsilon`.
    pub epsilon_start: f64,
    pub max_outer: usize,
    pub cg_max_iters: usize,
    /// Relative residual at which the inner conjugate gradient stops.
    pub cg_tol: f64,
    /// A stage ends once an outer step lowers its objective by less than this fraction.
    pub stop_tol: f64,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        IrlsConfig {
            epsilon: 1e-4,
            epsilon_start: 1e-2,
            max_outer: 30,
            cg_max_iters: 20,
            cg_tol: 1e-2,
            stop_tol: 3e-4,
        }
    }
}

impl IrlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("IRLS epsilon must be positive".into()));
        }
        if !(self.epsilon_start >= self.epsilon) {
            return Err(Error::InvalidArgument(
                "IRLS epsilon_start must not be below epsilon".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IrlsOutcome {
    pub values: Vec<f64>,
    /// Exact objective after each accepted iterate, starting with the
    /// (projected) initial point.
    pub history: Vec<f64>,
    pub iterations: usize,
    /// The initial point violated the bounds and was projected.
    pub init_clipped: bool,
}

impl IrlsOutcome {
    /// Exact objective of `values`, the best iterate seen.
    pub fn objective(&self) -> f64 {
        self.history.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Projected IRLS: each outer step fixes the Huber majorizer weights
/// `1 / max(|r_i|, epsilon)`, solves the weighted normal equations on the
/// variables not pinned at an active bound by Jacobi-preconditioned CG,
/// projects onto the box and backtracks until the smoothed objective drops.
/// The smoothing is tightened in stages from `epsilon_start` to `epsilon`.
/// The iterate with the lowest exact objective is returned, so the result
/// is never worse than the projected starting point.
pub fn irls_solve(sys: &SparseL1System, init: &[f64], cfg: &IrlsConfig) -> Result<IrlsOutcome> {
    cfg.validate()?;
    sys.validate()?;
    let n = sys.unknowns();
    if init.len() != n {
        return Err(Error::mismatch(format!("{n} values"), init.len()));
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("IRLS initial point"));
    }
    let mut eps = cfg.epsilon_start;
    let m = sys.rows();
    let mut l = init.to_vec();
    let init_clipped = sys.project(&mut l);
    let mut obj = sys.smoothed_objective(&l, eps);
    let mut history = vec![sys.objective(&l)];
    let mut best = (history[0], l.clone());

    let mut r = vec![0.0; m];
    let mut omega = vec![0.0; m];
    let mut grad = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut free = vec![false; n];
    let mut trial = vec![0.0; n];
    let mut iterations = 0;

    for _ in 0..cfg.max_outer {
        iterations += 1;
        if best.0 == 0.0 {
            break;
        }
        sys.residuals_into(&l, &mut r);
        for (w, &ri) in omega.iter_mut().zip(&r) {
            *w = 1.0 / ri.abs().max(eps);
        }
        let wr: Vec<f64> = omega.iter().zip(&r).map(|(w, ri)| w * ri).collect();
        sys.apply_transpose(&wr, &mut grad);

        diag.iter_mut().for_each(|d| *d = 0.0);
        for i in 0..m {
            for k in sys.row_start[i]..sys.row_start[i + 1] {
                diag[sys.cols[k]] += omega[i] * sys.vals[k] * sys.vals[k];
            }
        }
        for j in 0..n {
            let pinned_low = l[j] <= sys.lower[j] && grad[j] > 0.0;
            let pinned_high = l[j] >= sys.upper[j] && grad[j] < 0.0;
            free[j] = !(pinned_low || pinned_high || sys.lower[j] == sys.upper[j]) && diag[j] > 0.0;
        }

        let step = conjugate_gradient(sys, &omega, &diag, &free, &grad, cfg);
        let mut stalled = step.iter().all(|&d| d == 0.0);

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..if stalled { 0 } else { 12 } {
            for j in 0..n {
                trial[j] = l[j] + t * step[j];
            }
            sys.project(&mut trial);
            let cand = sys.smoothed_objective(&trial, eps);
            if cand < obj {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        if let Some(new_obj) = accepted {
            let rel = (obj - new_obj) / obj.abs().max(f64::MIN_POSITIVE);
            l.copy_from_slice(&trial);
            obj = new_obj;
            let exact = sys.objective(&l);
            history.push(exact);
            if exact < best.0 {
                best = (exact, l.clone());
            }
            stalled = rel < cfg.stop_tol;
        } else {
            stalled = true;
        }
        if stalled {
            if eps <= cfg.epsilon {
                break;
            }
            eps = (eps * 0.1).max(cfg.epsilon);
            obj = sys.smoothed_objective(&l, eps);
        }
    }

    Ok(IrlsOutcome {
        values: best.1,
        history,
        iterations,
        init_clipped,
    })
}

/// Solves `(A^T Ω A)_FF d_F = -grad_F` with `d` zero off the free set.
fn conjugate_gradient(
    sys: &SparseL1System,
    omega: &[f64],
    diag: &[f64],
    free: &[bool],
    grad: &[f64],
    cfg: &IrlsConfig,
) -> Vec<f64> {
    let n = sys.unknowns();
    let mut x = vec![0.0; n];
    let mut res: Vec<f64> = (0..n).map(|j| if free[j] { -grad[j] } else { 0.0 }).collect();
    let rhs_norm = res.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rhs_norm == 0.0 {
        return x;
    }
    let precond = |v: &[f64], out: &mut [f64]| {
        for j in 0..n {
            out[j] = if free[j] { v[j] / diag[j] } else { 0.0 };
        }
    };
    let mut z = vec![0.0; n];
    precond(&res, &mut z);
    let mut p = z.clone();
    let mut rz: f64 = res.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut hp = vec![0.0; n];
    for _ in 0..cfg.cg_max_iters {
        sys.apply_normal(omega, &p, &mut hp);
        for j in 0..n {
            if !free[j] {
                hp[j] = 0.0;
            }
        }
        let php: f64 = p.iter().zip(&hp).map(|(a, b)| a * b).sum();
        if php <= 0.0 {
            break;
        }
        let alpha = rz / php;
        for j in 0..n {
            x[j] += alpha * p[j];
            res[j] -= alpha * hp[j];
        }
        let rn = res.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rn <= cfg.cg_tol * rhs_norm {
            break;
        }
        precond(&res, &mut z);
        let rz_new: f64 = res.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for j in 0..n {
            p[j] = z[j] + beta * p[j];
        }
    }
    x
}

/// Maps foreground samples to unknown indices. In static mode `L2'` shares
/// the unknowns of `L2`.
#[derive(Debug, Clone, Copy)]
pub struct VariableLayout {
    pub samples: usize,
    pub mode: Mode,
}

impl VariableLayout {
    pub fn unknowns(&self) -> usize {
        match self.mode {
            Mode::StaticForeground => self.samples,
            Mode::DynamicForeground => 2 * self.samples,
        }
    }

    #[inline]
    pub fn first(&self, sample: usize) -> usize {
        sample
    }

    #[inline]
    pub fn second(&self, sample: usize) -> usize {
        match self.mode {
            Mode::StaticForeground => sample,
            Mode::DynamicForeground => self.samples + sample,
        }
    }
}

/// Builds the ℓ1 rows of `E_B + lambda_L E_L` in the unknowns `[L2, L2']`.
///
/// Brightness-constancy rows use the same bilinear stencils as
/// [`crate::image::warp_backward`], so the system objective equals the
/// energy module's value for the corresponding decomposition. Rows whose
/// warp leaves the image are omitted. In static mode `V` is ignored, the
/// foreground constancy rows vanish identically and the two foreground
/// gradient rows merge into one with doubled weight.
pub fn assemble_system(
    i0: &Image,
    i1: &Image,
    u: &FlowField,
    v: &FlowField,
    lambda_l: f64,
    c: f64,
    mode: Mode,
) -> Result<SparseL1System> {
    i0.check_same_shape(i1)?;
    i0.check_flow(u)?;
    i0.check_flow(v)?;
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::InvalidArgument(format!("bound c must lie in [0, 1], got {c}")));
    }
    let (h, w, ch) = (i0.height(), i0.width(), i0.channels());
    let samples = h * w * ch;
    let layout = VariableLayout { samples, mode };
    let (d0, d1) = (i0.data(), i1.data());

    let mut lower = vec![0.0; layout.unknowns()];
    let mut upper = vec![0.0; layout.unknowns()];
    for s in 0..samples {
        match mode {
            Mode::StaticForeground => upper[s] = d0[s].min(d1[s]).min(c).max(0.0),
            Mode::DynamicForeground => {
                upper[s] = d0[s].min(c).max(0.0);
                upper[samples + s] = d1[s].min(c).max(0.0);
            }
        }
        lower[s] = 0.0;
    }
    let mut sys = SparseL1System::new(layout.unknowns(), lower, upper)?;

    let mut coeffs: Vec<(usize, f64)> = Vec::with_capacity(5);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (du, dv) = u.at(y, x);
            if let Some(t) = bilinear_taps(h, w, x as f64 + du, y as f64 + dv) {
                for k in 0..ch {
                    let s = p * ch + k;
                    coeffs.clear();
                    coeffs.push((layout.first(s), -1.0));
                    let mut warped = 0.0;
                    for (&q, &wt) in t.index.iter().zip(&t.weight) {
                        if wt != 0.0 {
                            coeffs.push((layout.second(q * ch + k), wt));
                            warped += wt * d1[q * ch + k];
                        }
                    }
                    sys.push_row(&coeffs, warped - d0[s], RowKind::BackgroundBcc);
                }
            }
        }
    }

    if mode == Mode::DynamicForeground {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (du, dv) = v.at(y, x);
                if let Some(t) = bilinear_taps(h, w, x as f64 + du, y as f64 + dv) {
                    for k in 0..ch {
                        let s = p * ch + k;
                        coeffs.clear();
                        coeffs.push((layout.first(s), 1.0));
                        for (&q, &wt) in t.index.iter().zip(&t.weight) {
                            if wt != 0.0 {
                                coeffs.push((layout.second(q * ch + k), -wt));
                            }
                        }
                        sys.push_row(&coeffs, 0.0, RowKind::ForegroundBcc);
                    }
                }
            }
        }
    }

    if lambda_l > 0.0 {
        // (background source image, unknown block, unknown mapper)
        let second = |s: usize| layout.second(s);
        let first = |s: usize| layout.first(s);
        let backgrounds: [(&[f64], &dyn Fn(usize) -> usize); 2] = [(d0, &first), (d1, &second)];
        let push_diff = |sys: &mut SparseL1System, a: usize, b: usize| {
            // forward difference from sample a to sample b
            for (src, map) in backgrounds.iter() {
                sys.push_row(
                    &[(map(b), lambda_l), (map(a), -lambda_l)],
                    lambda_l * (src[b] - src[a]),
                    RowKind::Gradient,
                );
            }
            match mode {
                Mode::StaticForeground => sys.push_row(
                    &[(first(b), 2.0 * lambda_l), (first(a), -2.0 * lambda_l)],
                    0.0,
                    RowKind::Gradient,
                ),
                Mode::DynamicForeground => {
                    for map in [&first as &dyn Fn(usize) -> usize, &second] {
                        sys.push_row(
                            &[(map(b), lambda_l), (map(a), -lambda_l)],
                            0.0,
                            RowKind::Gradient,
                        );
                    }
                }
            }
        };
        for y in 0..h {
            for x in 0..w {
                for k in 0..ch {
                    let s = (y * w + x) * ch + k;
                    if x + 1 < w {
                        push_diff(&mut sys, s, s + ch);
                    }
                    if y + 1 < h {
                        push_diff(&mut sys, s, s + w * ch);
                    }
                }
            }
        }
    }
    Ok(sys)
}

/// Packs the foreground layers of a decomposition into the unknown vector.
pub fn pack_foreground(dec: &LayerDecomposition, mode: Mode) -> Vec<f64> {
    match mode {
        Mode::StaticForeground => dec.l2.data().to_vec(),
        Mode::DynamicForeground => dec
            .l2
            .data()
            .iter()
            .chain(dec.l2p.data())
            .copied()
            .collect(),
    }
}

/// Rebuilds a decomposition from solved foreground unknowns.
pub fn unpack_foreground(
    i0: &Image,
    i1: &Image,
    values: &[f64],
    c: f64,
    mode: Mode,
) -> Result<LayerDecomposition> {
    let n = i0.data().len();
    let shape = |data: Vec<f64>| Image::new(i0.height(), i0.width(), i0.channels(), data);
    let l2 = shape(values[..n].to_vec())?;
    let l2p = match mode {
        Mode::StaticForeground => l2.clone(),
        Mode::DynamicForeground => shape(values[n..2 * n].to_vec())?,
    };
    LayerDecomposition::from_foreground(i0, i1, l2, l2p, c)
}

#[derive(Debug, Clone)]
pub struct LayerSolution {
    pub decomposition: LayerDecomposition,
    pub outcome: IrlsOutcome,
}

/// Moves the largest constant that keeps the foreground non-negative from
/// `l2, l2p` into `l1, l1p`, per channel. The energy does not see such a
/// shift, so this only picks the darkest of the equivalent foregrounds.
pub fn remove_common_offset(dec: &mut LayerDecomposition) {
    let ch = dec.channels();
    for c in 0..ch {
        let floor = dec
            .l2
            .data()
            .iter()
            .chain(dec.l2p.data())
            .skip(c)
            .step_by(ch)
            .fold(f64::INFINITY, |a, &b| a.min(b));
        if !(floor > 0.0 && floor.is_finite()) {
            continue;
        }
        for img in [&mut dec.l2, &mut dec.l2p] {
            img.data_mut().iter_mut().skip(c).step_by(ch).for_each(|v| *v -= floor);
        }
        for img in [&mut dec.l1, &mut dec.l1p] {
            img.data_mut().iter_mut().skip(c).step_by(ch).for_each(|v| *v += floor);
        }
    }
}

/// One layer-separation step, warm-started at `prev`.
#[allow(clippy::too_many_arguments)]
pub fn solve_layers(
    i0: &Image,
    i1: &Image,
    u: &FlowField,
    v: &FlowField,
    lambda_l: f64,
    c: f64,
    mode: Mode,
    prev: &LayerDecomposition,
    cfg: &IrlsConfig,
) -> Result<LayerSolution> {
    i0.check_same_shape(&prev.l2)?;
    let zero_v;
    let v = match mode {
        Mode::StaticForeground => {
            zero_v = FlowField::zeros(u.height(), u.width());
            &zero_v
        }
        Mode::DynamicForeground => v,
    };
    let sys = assemble_system(i0, i1, u, v, lambda_l, c, mode)?;
    let init = pack_foreground(prev, mode);
    let outcome = irls_solve(&sys, &init, cfg)?;
    let mut decomposition = unpack_foreground(i0, i1, &outcome.values, c, mode)?;
    remove_common_offset(&mut decomposition);
    Ok(LayerSolution {
        decomposition,
        outcome,
    })
}
