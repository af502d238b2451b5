#![allow(dead_code)]

use duoflow::layer::{assemble_system, SparseL1System};
use duoflow::{FlowField, Image, Mode};
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exact optimum of `Σ |a_i·l - b_i|` under the box bounds, by simplex on
/// the split form `a_i·l - b_i = p_i - n_i`, `p, n >= 0`.
pub fn lp_optimum(sys: &SparseL1System) -> f64 {
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = (0..sys.unknowns())
        .map(|i| lp.add_var(0.0, (sys.lower[i], sys.upper[i])))
        .collect();
    for r in 0..sys.rows() {
        let (cols, vals, rhs) = sys.row(r);
        let p = lp.add_var(1.0, (0.0, f64::INFINITY));
        let n = lp.add_var(1.0, (0.0, f64::INFINITY));
        let mut expr: Vec<_> = cols.iter().zip(vals).map(|(&c, &a)| (vars[c], a)).collect();
        expr.push((p, -1.0));
        expr.push((n, 1.0));
        lp.add_constraint(&expr[..], ComparisonOp::Eq, rhs);
    }
    lp.solve().expect("the LP is feasible and bounded").objective()
}

/// A random 8x8 gray layer system: noise frames, subpixel flows of
/// different directions, random prior weight.
pub fn random_layer_system(seed: u64) -> SparseL1System {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (8, 8);
    let mut noise = |lo: f64, hi: f64| {
        let data = (0..h * w).map(|_| rng.gen_range(lo..hi)).collect();
        Image::new(h, w, 1, data).unwrap()
    };
    let i0 = noise(0.05, 0.95);
    let i1 = noise(0.05, 0.95);
    let flow = |rng: &mut ChaCha8Rng| {
        let (a, b) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
        let jitter: Vec<(f64, f64)> = (0..h * w)
            .map(|_| (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)))
            .collect();
        FlowField::from_fn(h, w, |y, x| {
            let (p, q) = jitter[y * w + x];
            (a + p, b + q)
        })
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let u = flow(&mut rng);
    let v = flow(&mut rng);
    let lambda_l = rng.gen_range(0.1..1.0);
    assemble_system(&i0, &i1, &u, &v, lambda_l, 0.25, Mode::DynamicForeground).unwrap()
}

/// Forward differences with zero derivative on the last column / row,
/// written out independently of the library operators.
pub fn grad(p: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                gx[i] = p[i + 1] - p[i];
            }
            if y + 1 < h {
                gy[i] = p[i + w] - p[i];
            }
        }
    }
    (gx, gy)
}

/// `grad^T (qx, qy)` by scattering each difference onto its two pixels.
pub fn grad_transpose(qx: &[f64], qy: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                out[i + 1] += qx[i];
                out[i] -= qx[i];
            }
            if y + 1 < h {
                out[i + w] += qy[i];
                out[i] -= qy[i];
            }
        }
    }
    out
}

/// Minimizer of `weight·TV(u) + ½‖u - t‖²` (anisotropic TV) through its dual
/// `min_{|q|∞ <= weight} ½‖t - grad^T q‖²`, solved by FISTA with projection.
pub fn rof_dual_oracle(t: &[f64], h: usize, w: usize, weight: f64, iters: usize) -> Vec<f64> {
    let n = h * w;
    let step = 1.0 / 8.0;
    let (mut qx, mut qy) = (vec![0.0; n], vec![0.0; n]);
    let (mut zx, mut zy) = (qx.clone(), qy.clone());
    let mut tk = 1.0f64;
    let primal = |qx: &[f64], qy: &[f64]| -> Vec<f64> {
        let g = grad_transpose(qx, qy, h, w);
        t.iter().zip(&g).map(|(a, b)| a - b).collect()
    };
    for _ in 0..iters {
        let u = primal(&zx, &zy);
        let (gx, gy) = grad(&u, h, w);
        let nx: Vec<f64> = zx.iter().zip(&gx).map(|(z, g)| (z + step * g).clamp(-weight, weight)).collect();
        let ny: Vec<f64> = zy.iter().zip(&gy).map(|(z, g)| (z + step * g).clamp(-weight, weight)).collect();
        let tn = (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) / 2.0;
        let beta = (tk - 1.0) / tn;
        for i in 0..n {
            zx[i] = nx[i] + beta * (nx[i] - qx[i]);
            zy[i] = ny[i] + beta * (ny[i] - qy[i]);
        }
        qx = nx;
        qy = ny;
        tk = tn;
    }
    primal(&qx, &qy)
}

pub fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn random_plane(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-amp..amp)).collect()
}
