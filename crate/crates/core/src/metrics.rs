//! Evaluation measures: endpoint error, layer error and warping error.

use crate::error::{Error, Result};
use crate::image::{warp_backward, FlowField, Image};

/// Mean endpoint error over the pixels where `mask` is true (all pixels if
/// no mask is given). An empty mask gives 0.
pub fn epe_mean(est: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<f64> {
    est.check_same_shape(gt)?;
    let n = est.height() * est.width();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::mismatch(format!("mask of {n} pixels"), m.len()));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if mask.map_or(true, |m| m[i]) {
            let du = est.u()[i] - gt.u()[i];
            let dv = est.v()[i] - gt.v()[i];
            sum += du.hypot(dv);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Global zero-mean normalized cross-correlation; 0 if either argument is constant.
pub fn ncc(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.min_value() == a.max_value() || b.min_value() == b.max_value() {
        return Ok(0.0);
    }
    let (ma, mb) = (a.mean(), b.mean());
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (p, q) = (x - ma, y - mb);
        ab += p * q;
        aa += p * p;
        bb += q * q;
    }
    if aa <= 0.0 || bb <= 0.0 {
        return Ok(0.0);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// `1 - NCC(gt, est)`, in [0, 2].
pub fn layer_error_ncc(gt_l2: &Image, est_l2: &Image) -> Result<f64> {
    Ok(1.0 - ncc(gt_l2, est_l2)?)
}

/// Mean over valid pixels of `‖lp(x + flow(x)) - l(x)‖₂` across channels,
/// in gray levels (x255). Pixels whose displaced position leaves the image
/// are skipped.
pub fn warping_error(l: &Image, lp: &Image, flow: &FlowField) -> Result<f64> {
    l.check_same_shape(lp)?;
    let (warped, mask) = warp_backward(lp, flow)?;
    let ch = l.channels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &valid) in mask.iter().enumerate() {
        if !valid {
            continue;
        }
        let sq: f64 = (0..ch)
            .map(|c| {
                let d = warped.data()[i * ch + c] - l.data()[i * ch + c];
                d * d
            })
            .sum();
        sum += sq.sqrt();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { 255.0 * sum / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epe_three_four_five() {
        let gt = FlowField::from_fn(3, 4, |y, x| (x as f64, y as f64 * 0.5));
        let est = FlowField::from_fn(3, 4, |y, x| (x as f64 + 3.0, y as f64 * 0.5 + 4.0));
        assert_eq!(epe_mean(&gt, &gt, None).unwrap(), 0.0);
        assert!((epe_mean(&est, &gt, None).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn epe_two_by_two_by_hand() {
        let gt = FlowField::zeros(2, 2);
        let est = FlowField::new(2, 2, vec![1.0, 0.0, 3.0, 0.0], vec![0.0, 2.0, 4.0, 0.0]).unwrap();
        // (1 + 2 + 5 + 0) / 4
        assert_eq!(epe_mean(&est, &gt, None).unwrap(), 2.0);
        let mask = [true, false, true, false];
        assert_eq!(epe_mean(&est, &gt, Some(&mask)).unwrap(), 3.0);
    }

    #[test]
    fn ncc_cases() {
        let gt = Image::from_fn(5, 5, 1, |y, x, _| ((x * 7 + y * 3) % 5) as f64 * 0.05);
        assert!(layer_error_ncc(&gt, &gt).unwrap().abs() < 1e-12);
        let affine = gt.map(|v| 3.0 * v + 0.2);
        assert!(layer_error_ncc(&gt, &affine).unwrap().abs() < 1e-12);
        let neg = gt.map(|v| -v);
        assert!((layer_error_ncc(&gt, &neg).unwrap() - 2.0).abs() < 1e-12);
        let flat = Image::filled(5, 5, 1, 0.1);
        assert_eq!(layer_error_ncc(&gt, &flat).unwrap(), 1.0);
        assert_eq!(layer_error_ncc(&flat, &flat).unwrap(), 1.0);
    }

    #[test]
    fn warping_error_trivial_cases() {
        let l = Image::from_fn(6, 6, 3, |y, x, c| ((x + y + c) % 4) as f64 * 0.2);
        assert_eq!(warping_error(&l, &l, &FlowField::zeros(6, 6)).unwrap(), 0.0);
        let k = Image::filled(6, 6, 1, 0.4);
        let f = FlowField::constant(6, 6, 0.7, -1.3);
        assert!(warping_error(&k, &k, &f).unwrap().abs() < 1e-12);
    }

    #[test]
    fn warping_error_two_by_two_by_hand() {
        // lp sampled one pixel to the right; only the left column stays inside
        let l = Image::new(2, 2, 1, vec![0.2, 0.0, 0.6, 0.0]).unwrap();
        let lp = Image::new(2, 2, 1, vec![0.0, 0.3, 0.0, 0.6]).unwrap();
        let f = FlowField::constant(2, 2, 1.0, 0.0);
        let e = warping_error(&l, &lp, &f).unwrap();
        // (|0.3 - 0.2| + |0.6 - 0.6|) / 2 * 255
        assert!((e - 12.75).abs() < 1e-9);
    }
}
