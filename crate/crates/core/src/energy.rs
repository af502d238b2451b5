//! The double-layer objective: per-layer brightness constancy (`E_B`),
//! sparse-gradient layer prior (`E_L`) and TV / TGV² flow prior (`E_F`).
//!
//! All norms are anisotropic ℓ1. Pixels whose warped position leaves the
//! image are excluded from `E_B` and counted in [`EnergyBreakdown::masked`].
//! Sums run in row-major order so energies are bit-stable across runs.

use crate::diff;
use crate::error::{Error, Result};
use crate::image::{warp_backward, FlowField, Image};

/// Weights of the two TGV² terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TgvWeights {
    /// Weight on `|grad p - w|`.
    pub first_order: f64,
    /// Weight on `|sym_grad w|`.
    pub second_order: f64,
}

impl Default for TgvWeights {
    fn default() -> Self {
        TgvWeights {
            first_order: 1.0,
            second_order: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowRegularizer {
    /// First order: total variation.
    Tv,
    /// Second-order total generalized variation.
    Tgv2(TgvWeights),
}

impl FlowRegularizer {
    pub fn order(&self) -> u32 {
        match self {
            FlowRegularizer::Tv => 1,
            FlowRegularizer::Tgv2(_) => 2,
        }
    }
}

/// Prior weights. `lambda_f` is per channel: the flow prior enters the
/// energy as `channels * lambda_f * E_F`, which keeps its balance against the
/// channel-summed data term the same for gray and color input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub lambda_l: f64,
    pub lambda_f: f64,
    pub regularizer: FlowRegularizer,
}

impl Default for Weights {
    fn default() -> Self {
        Weights {
            lambda_l: 0.3,
            lambda_f: 0.025,
            regularizer: FlowRegularizer::Tv,
        }
    }
}

impl Weights {
    /// Effective flow-prior weight for images with `channels` channels.
    pub fn flow_weight(&self, channels: usize) -> f64 {
        self.lambda_f * channels as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l >= 0.0 && self.lambda_f >= 0.0) {
            return Err(Error::InvalidArgument(
                "lambda_l and lambda_f must be non-negative".into(),
            ));
        }
        if let FlowRegularizer::Tgv2(t) = self.regularizer {
            if !(t.first_order > 0.0 && t.second_order > 0.0) {
                return Err(Error::InvalidArgument("TGV weights must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub e_b: f64,
    pub e_l: f64,
    pub e_f: f64,
    pub total: f64,
    /// Pixel samples excluded from `e_b` because their warp left the image.
    pub masked: usize,
}

/// Background layers `l1, l1p` and foreground layers `l2, l2p` of an input
/// pair, with the foreground brightness bound `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDecomposition {
    pub l1: Image,
    pub l1p: Image,
    pub l2: Image,
    pub l2p: Image,
    pub c: f64,
}

impl LayerDecomposition {
    pub fn new(l1: Image, l1p: Image, l2: Image, l2p: Image, c: f64) -> Result<Self> {
        l1.check_same_shape(&l1p)?;
        l1.check_same_shape(&l2)?;
        l1.check_same_shape(&l2p)?;
        Ok(LayerDecomposition {
            l1,
            l1p,
            l2,
            l2p,
            c,
        })
    }

    /// Completes a decomposition from foreground layers: `L1 = I - L2`, `L1' = I' - L2'`.
    pub fn from_foreground(i0: &Image, i1: &Image, l2: Image, l2p: Image, c: f64) -> Result<Self> {
        let l1 = i0.zip_map(&l2, |a, b| a - b)?;
        let l1p = i1.zip_map(&l2p, |a, b| a - b)?;
        Self::new(l1, l1p, l2, l2p, c)
    }

    /// All foreground in the background layers: `L2 = L2' = 0`.
    pub fn empty_foreground(i0: &Image, i1: &Image, c: f64) -> Result<Self> {
        i0.check_same_shape(i1)?;
        let z = Image::zeros(i0.height(), i0.width(), i0.channels());
        Self::from_foreground(i0, i1, z.clone(), z, c)
    }

    pub fn height(&self) -> usize {
        self.l1.height()
    }

    pub fn width(&self) -> usize {
        self.l1.width()
    }

    pub fn channels(&self) -> usize {
        self.l1.channels()
    }

    /// Checks the additive model (within `tol`) and the foreground bounds
    /// `0 <= L2 <= min(I, c)` (within `tol`) against the input pair.
    pub fn check_constraints(&self, i0: &Image, i1: &Image, tol: f64) -> Result<()> {
        i0.check_same_shape(&self.l1)?;
        i1.check_same_shape(&self.l1)?;
        for (name, l1, l2, img) in [
            ("first frame", &self.l1, &self.l2, i0),
            ("second frame", &self.l1p, &self.l2p, i1),
        ] {
            for ((a, b), i) in l1.data().iter().zip(l2.data()).zip(img.data()) {
                if (a + b - i).abs() > tol {
                    return Err(Error::LayerConstraint(format!(
                        "{name}: layers do not add up to the input (|L1 + L2 - I| = {:.3e})",
                        (a + b - i).abs()
                    )));
                }
                let ub = i.min(self.c);
                if *b < -tol || *b > ub + tol {
                    return Err(Error::LayerConstraint(format!(
                        "{name}: foreground value {b:.4} outside [0, min(I, c) = {ub:.4}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Auxiliary vector field of TGV² for one scalar component.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl VectorField {
    pub fn zeros(n: usize) -> Self {
        VectorField {
            x: vec![0.0; n],
            y: vec![0.0; n],
        }
    }

    pub fn constant(n: usize, a: f64, b: f64) -> Self {
        VectorField {
            x: vec![a; n],
            y: vec![b; n],
        }
    }
}

/// TGV² auxiliary fields for both flow components.
#[derive(Debug, Clone, PartialEq)]
pub struct TgvAuxiliary {
    pub u: VectorField,
    pub v: VectorField,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataTerm {
    pub value: f64,
    pub masked: usize,
}

fn l1_residual(reference: &Image, moving: &Image, flow: &FlowField) -> Result<(f64, usize)> {
    reference.check_same_shape(moving)?;
    let (warped, mask) = warp_backward(moving, flow)?;
    let ch = reference.channels();
    let mut sum = 0.0;
    let mut masked = 0;
    for (i, &valid) in mask.iter().enumerate() {
        if valid {
            for c in 0..ch {
                sum += (reference.data()[i * ch + c] - warped.data()[i * ch + c]).abs();
            }
        } else {
            masked += ch;
        }
    }
    Ok((sum, masked))
}

/// `Σ|L1 - L1'(x + U)| + Σ|L2 - L2'(x + V)|` over unmasked samples.
pub fn data_term_detailed(
    dec: &LayerDecomposition,
    u: &FlowField,
    v: &FlowField,
) -> Result<DataTerm> {
    let (a, ma) = l1_residual(&dec.l1, &dec.l1p, u)?;
    let (b, mb) = l1_residual(&dec.l2, &dec.l2p, v)?;
    Ok(DataTerm {
        value: a + b,
        masked: ma + mb,
    })
}

pub fn data_term(dec: &LayerDecomposition, u: &FlowField, v: &FlowField) -> Result<f64> {
    data_term_detailed(dec, u, v).map(|d| d.value)
}

/// Anisotropic ℓ1 norm of the forward-difference gradient, summed over channels.
pub fn gradient_l1(img: &Image) -> f64 {
    let (h, w) = (img.height(), img.width());
    img.planes()
        .iter()
        .map(|p| {
            let (gx, gy) = diff::gradient(p, h, w);
            diff::l1_norm(&gx) + diff::l1_norm(&gy)
        })
        .sum()
}

pub fn layer_prior(dec: &LayerDecomposition) -> f64 {
    gradient_l1(&dec.l1) + gradient_l1(&dec.l1p) + gradient_l1(&dec.l2) + gradient_l1(&dec.l2p)
}

pub fn flow_prior_tv(flow: &FlowField) -> f64 {
    let (h, w) = (flow.height(), flow.width());
    flow.components()
        .iter()
        .map(|p| {
            let (gx, gy) = diff::gradient(p, h, w);
            diff::l1_norm(&gx) + diff::l1_norm(&gy)
        })
        .sum()
}

/// TGV² of one scalar field `p` for a given auxiliary field.
///
/// The first-order term only covers differences that exist on the grid (the
/// forward difference leaving the image is not penalized), which keeps every
/// affine field in the null space.
pub fn tgv2_component(
    p: &[f64],
    aux: &VectorField,
    height: usize,
    width: usize,
    weights: TgvWeights,
) -> f64 {
    let (gx, gy) = diff::gradient(p, height, width);
    let mut first = 0.0;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width {
                first += (gx[i] - aux.x[i]).abs();
            }
            if y + 1 < height {
                first += (gy[i] - aux.y[i]).abs();
            }
        }
    }
    let (e11, e22, e12) = diff::sym_gradient(&aux.x, &aux.y, height, width);
    let second = diff::l1_norm(&e11) + diff::l1_norm(&e22) + diff::l1_norm(&e12);
    weights.first_order * first + weights.second_order * second
}

pub fn flow_prior_tgv2(flow: &FlowField, aux: &TgvAuxiliary, weights: TgvWeights) -> Result<f64> {
    let n = flow.height() * flow.width();
    for f in [&aux.u, &aux.v] {
        if f.x.len() != n || f.y.len() != n {
            return Err(Error::mismatch(
                format!("auxiliary field of {n} vectors"),
                format!("{} / {}", f.x.len(), f.y.len()),
            ));
        }
    }
    let (h, w) = (flow.height(), flow.width());
    Ok(tgv2_component(flow.u(), &aux.u, h, w, weights)
        + tgv2_component(flow.v(), &aux.v, h, w, weights))
}

/// Iterations used when the auxiliary field is minimized out internally.
pub const TGV_AUX_ITERS: usize = 600;

/// Starting point for the auxiliary field: the grid gradient, with the
/// missing boundary differences copied from their inner neighbours.
pub fn initial_tgv_auxiliary(p: &[f64], height: usize, width: usize) -> VectorField {
    let (mut gx, mut gy) = diff::gradient(p, height, width);
    if width >= 2 {
        for y in 0..height {
            gx[y * width + width - 1] = gx[y * width + width - 2];
        }
    }
    if height >= 2 {
        for x in 0..width {
            gy[(height - 1) * width + x] = gy[(height - 2) * width + x];
        }
    }
    VectorField { x: gx, y: gy }
}

fn soft_toward(z: f64, target: f64, t: f64) -> f64 {
    let d = z - target;
    if d > t {
        z - t
    } else if d < -t {
        z + t
    } else {
        target
    }
}

/// Approximately minimizes [`tgv2_component`] over the auxiliary field with a
/// primal-dual iteration, returning the best field seen (never worse than
/// the starting point).
pub fn optimal_tgv_auxiliary(
    p: &[f64],
    height: usize,
    width: usize,
    weights: TgvWeights,
    iters: usize,
) -> (f64, VectorField) {
    let n = height * width;
    let (gx, gy) = diff::gradient(p, height, width);
    let mut w = initial_tgv_auxiliary(p, height, width);
    let mut best = (tgv2_component(p, &w, height, width, weights), w.clone());
    if best.0 == 0.0 {
        return best;
    }
    // |sym_grad|^2 <= 12
    let step = 0.99 / 12f64.sqrt();
    let (mut q11, mut q22, mut q12) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut w_bar = w.clone();
    let a0 = weights.second_order;
    let a1 = weights.first_order;
    for it in 0..iters {
        let (e11, e22, e12) = diff::sym_gradient(&w_bar.x, &w_bar.y, height, width);
        for i in 0..n {
            q11[i] = (q11[i] + step * e11[i]).clamp(-a0, a0);
            q22[i] = (q22[i] + step * e22[i]).clamp(-a0, a0);
            q12[i] = (q12[i] + step * e12[i]).clamp(-a0, a0);
        }
        let (t1, t2) = diff::sym_gradient_transpose(&q11, &q22, &q12, height, width);
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let zx = w.x[i] - step * t1[i];
                let zy = w.y[i] - step * t2[i];
                let nx = if x + 1 < width {
                    soft_toward(zx, gx[i], step * a1)
                } else {
                    zx
                };
                let ny = if y + 1 < height {
                    soft_toward(zy, gy[i], step * a1)
                } else {
                    zy
                };
                w_bar.x[i] = 2.0 * nx - w.x[i];
                w_bar.y[i] = 2.0 * ny - w.y[i];
                w.x[i] = nx;
                w.y[i] = ny;
            }
        }
        if (it + 1) % 25 == 0 || it + 1 == iters {
            let val = tgv2_component(p, &w, height, width, weights);
            if val < best.0 {
                best = (val, w.clone());
            }
        }
    }
    best
}

/// TGV² with the auxiliary fields minimized out (approximately; an upper
/// bound on the exact value).
pub fn flow_prior_tgv2_min(flow: &FlowField, weights: TgvWeights) -> (f64, TgvAuxiliary) {
    let (h, w) = (flow.height(), flow.width());
    let (a, wu) = optimal_tgv_auxiliary(flow.u(), h, w, weights, TGV_AUX_ITERS);
    let (b, wv) = optimal_tgv_auxiliary(flow.v(), h, w, weights, TGV_AUX_ITERS);
    (a + b, TgvAuxiliary { u: wu, v: wv })
}

pub fn flow_prior(flow: &FlowField, regularizer: FlowRegularizer) -> f64 {
    match regularizer {
        FlowRegularizer::Tv => flow_prior_tv(flow),
        FlowRegularizer::Tgv2(t) => {
            if flow.is_zero() {
                0.0
            } else {
                flow_prior_tgv2_min(flow, t).0
            }
        }
    }
}

/// `E_B + lambda_L E_L + C lambda_F E_F` for `C` channels. A zero `v` (static foreground)
/// contributes nothing to `E_F`.
pub fn total_energy(
    dec: &LayerDecomposition,
    u: &FlowField,
    v: &FlowField,
    weights: &Weights,
) -> Result<EnergyBreakdown> {
    dec.l1.check_flow(u)?;
    dec.l1.check_flow(v)?;
    let data = data_term_detailed(dec, u, v)?;
    let e_l = layer_prior(dec);
    let e_f = flow_prior(u, weights.regularizer) + flow_prior(v, weights.regularizer);
    Ok(EnergyBreakdown {
        e_b: data.value,
        e_l,
        e_f,
        total: data.value + weights.lambda_l * e_l + weights.flow_weight(dec.channels()) * e_f,
        masked: data.masked,
    })
}
