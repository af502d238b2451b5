//! Discrete differential operators on scalar planes.
//!
//! Derivatives are forward differences with a zero derivative on the last
//! column (x) or row (y). Every operator has an explicit transpose so the
//! primal-dual solvers can use exact adjoints; `divergence` is the negative
//! transpose of `gradient`.

/// `out[y, x] = p[y, x + 1] - p[y, x]`, zero on the last column.
pub fn dx_forward(p: &[f64], height: usize, width: usize, out: &mut [f64]) {
    for y in 0..height {
        let row = &p[y * width..(y + 1) * width];
        let dst = &mut out[y * width..(y + 1) * width];
        for x in 0..width - 1 {
            dst[x] = row[x + 1] - row[x];
        }
        dst[width - 1] = 0.0;
    }
}

/// `out[y, x] = p[y + 1, x] - p[y, x]`, zero on the last row.
pub fn dy_forward(p: &[f64], height: usize, width: usize, out: &mut [f64]) {
    for y in 0..height - 1 {
        for x in 0..width {
            out[y * width + x] = p[(y + 1) * width + x] - p[y * width + x];
        }
    }
    for x in 0..width {
        out[(height - 1) * width + x] = 0.0;
    }
}

/// Transpose of [`dx_forward`].
pub fn dx_transpose(q: &[f64], height: usize, width: usize, out: &mut [f64]) {
    for y in 0..height {
        let row = &q[y * width..(y + 1) * width];
        let dst = &mut out[y * width..(y + 1) * width];
        for x in 0..width {
            let left = if x >= 1 { row[x - 1] } else { 0.0 };
            let here = if x + 1 < width { row[x] } else { 0.0 };
            dst[x] = left - here;
        }
    }
}

/// Transpose of [`dy_forward`].
pub fn dy_transpose(q: &[f64], height: usize, width: usize, out: &mut [f64]) {
    for y in 0..height {
        for x in 0..width {
            let up = if y >= 1 { q[(y - 1) * width + x] } else { 0.0 };
            let here = if y + 1 < height { q[y * width + x] } else { 0.0 };
            out[y * width + x] = up - here;
        }
    }
}

pub fn gradient(p: &[f64], height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; p.len()];
    let mut gy = vec![0.0; p.len()];
    dx_forward(p, height, width, &mut gx);
    dy_forward(p, height, width, &mut gy);
    (gx, gy)
}

/// Negative adjoint of [`gradient`]: `<grad p, q> = <p, -div q>`.
pub fn divergence(qx: &[f64], qy: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut a = vec![0.0; qx.len()];
    let mut b = vec![0.0; qy.len()];
    dx_transpose(qx, height, width, &mut a);
    dy_transpose(qy, height, width, &mut b);
    a.iter().zip(&b).map(|(s, t)| -(s + t)).collect()
}

/// Symmetrized gradient of a vector field `(w1, w2)`, returned as the three
/// independent entries `(dx w1, dy w2, dy w1 + dx w2)`.
pub fn sym_gradient(
    w1: &[f64],
    w2: &[f64],
    height: usize,
    width: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = w1.len();
    let mut e11 = vec![0.0; n];
    let mut e22 = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    dx_forward(w1, height, width, &mut e11);
    dy_forward(w2, height, width, &mut e22);
    dy_forward(w1, height, width, &mut a);
    dx_forward(w2, height, width, &mut b);
    let e12 = a.iter().zip(&b).map(|(s, t)| s + t).collect();
    (e11, e22, e12)
}

/// Transpose of [`sym_gradient`].
pub fn sym_gradient_transpose(
    q11: &[f64],
    q22: &[f64],
    q12: &[f64],
    height: usize,
    width: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = q11.len();
    let mut t = vec![0.0; n];
    let mut s = vec![0.0; n];
    dx_transpose(q11, height, width, &mut t);
    dy_transpose(q12, height, width, &mut s);
    let w1 = t.iter().zip(&s).map(|(a, b)| a + b).collect();
    dy_transpose(q22, height, width, &mut t);
    dx_transpose(q12, height, width, &mut s);
    let w2 = t.iter().zip(&s).map(|(a, b)| a + b).collect();
    (w1, w2)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l1_norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v.abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn transposes_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w) in &[(2, 2), (3, 7), (9, 4)] {
            let n = h * w;
            let p = random(n, &mut rng);
            let q = random(n, &mut rng);
            let mut a = vec![0.0; n];
            let mut b = vec![0.0; n];
            dx_forward(&p, h, w, &mut a);
            dx_transpose(&q, h, w, &mut b);
            assert!((dot(&a, &q) - dot(&p, &b)).abs() < 1e-12);
            dy_forward(&p, h, w, &mut a);
            dy_transpose(&q, h, w, &mut b);
            assert!((dot(&a, &q) - dot(&p, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn sym_gradient_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (6, 5);
        let n = h * w;
        let (w1, w2) = (random(n, &mut rng), random(n, &mut rng));
        let (q11, q22, q12) = (random(n, &mut rng), random(n, &mut rng), random(n, &mut rng));
        let (e11, e22, e12) = sym_gradient(&w1, &w2, h, w);
        let (t1, t2) = sym_gradient_transpose(&q11, &q22, &q12, h, w);
        let lhs = dot(&e11, &q11) + dot(&e22, &q22) + dot(&e12, &q12);
        let rhs = dot(&w1, &t1) + dot(&w2, &t2);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sym_gradient_of_constant_vanishes() {
        let w1 = vec![0.7; 12];
        let w2 = vec![-1.1; 12];
        let (a, b, c) = sym_gradient(&w1, &w2, 3, 4);
        assert!(a.iter().chain(&b).chain(&c).all(|&v| v == 0.0));
    }
}
