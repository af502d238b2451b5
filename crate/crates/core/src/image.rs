//! Image and flow containers plus the pixel-level operations every solver
//! shares: composition, backward warping, finite differences and resampling.
//!
//! Images are stored row-major with channels innermost, so the sample at
//! `(y, x, c)` lives at `(y * width + x) * channels + c`. Flow fields keep
//! their horizontal and vertical components in two separate planes.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
    if height < 2 || width < 2 {
        return Err(Error::InvalidShape(format!(
            "images must be at least 2x2, got {height}x{width}"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidShape(format!(
            "images must have 1 or 3 channels, got {channels}"
        )));
    }
    Ok(())
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::mismatch(
                format!("{} samples", height * width * channels),
                format!("{} samples", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data"));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    /// Panics on an invalid shape; use [`Image::new`] for fallible construction.
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        check_dims(height, width, channels).expect("invalid image shape");
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        check_dims(height, width, channels).expect("invalid image shape");
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    /// Builds an image from per-channel planes of `height * width` samples.
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        check_dims(height, width, channels)?;
        let n = height * width;
        if planes.iter().any(|p| p.len() != n) {
            return Err(Error::mismatch(format!("planes of {n} samples"), "ragged planes"));
        }
        let mut data = vec![0.0; n * channels];
        for (c, plane) in planes.iter().enumerate() {
            for (i, v) in plane.iter().enumerate() {
                data[i * channels + c] = *v;
            }
        }
        Image::new(height, width, channels, data)
    }

    fn clone_shape(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: Vec::new(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::mismatch(self.shape_string(), other.shape_string()))
        }
    }

    pub fn check_flow(&self, flow: &FlowField) -> Result<()> {
        if self.height == flow.height() && self.width == flow.width() {
            Ok(())
        } else {
            Err(Error::mismatch(
                format!("flow of {}x{}", self.height, self.width),
                format!("flow of {}x{}", flow.height(), flow.width()),
            ))
        }
    }

    /// One channel as a dense `height * width` plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn planes(&self) -> Vec<Vec<f64>> {
        (0..self.channels).map(|c| self.plane(c)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.check_same_shape(other)?;
        Ok(Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Channel average; a single-channel image is returned unchanged.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let k = self.channels as f64;
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self
                .data
                .chunks_exact(self.channels)
                .map(|px| px.iter().sum::<f64>() / k)
                .collect(),
        }
    }
}

/// A dense displacement field in pixels: `u` horizontal, `v` vertical.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape("flow field must be non-empty".into()));
        }
        let n = height * width;
        if u.len() != n || v.len() != n {
            return Err(Error::mismatch(
                format!("{n} flow vectors"),
                format!("{} / {}", u.len(), v.len()),
            ));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("flow field"));
        }
        Ok(FlowField {
            height,
            width,
            u,
            v,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, du: f64, dv: f64) -> Self {
        assert!(height > 0 && width > 0, "flow field must be non-empty");
        FlowField {
            height,
            width,
            u: vec![du; height * width],
            v: vec![dv; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        assert!(height > 0 && width > 0, "flow field must be non-empty");
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(y, x);
                u.push(a);
                v.push(b);
            }
        }
        FlowField {
            height,
            width,
            u,
            v,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn u_mut(&mut self) -> &mut [f64] {
        &mut self.u
    }

    pub fn v_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }

    pub fn components(&self) -> [&[f64]; 2] {
        [&self.u, &self.v]
    }

    pub fn into_components(self) -> (Vec<f64>, Vec<f64>) {
        (self.u, self.v)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn same_shape(&self, other: &FlowField) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_same_shape(&self, other: &FlowField) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::mismatch(
                format!("flow of {}x{}", self.height, self.width),
                format!("flow of {}x{}", other.height, other.width),
            ))
        }
    }

    pub fn scaled(&self, t: f64) -> FlowField {
        FlowField {
            height: self.height,
            width: self.width,
            u: self.u.iter().map(|a| a * t).collect(),
            v: self.v.iter().map(|a| a * t).collect(),
        }
    }

    pub fn negated(&self) -> FlowField {
        self.scaled(-1.0)
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().chain(&self.v).all(|&a| a == 0.0)
    }

    /// Mean Euclidean length of the flow vectors.
    pub fn mean_magnitude(&self) -> f64 {
        let s: f64 = self
            .u
            .iter()
            .zip(&self.v)
            .map(|(a, b)| a.hypot(*b))
            .sum();
        s / self.u.len() as f64
    }

    pub fn max_magnitude(&self) -> f64 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }
}

/// Bilinear interpolation stencil: four pixel indices and their weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTaps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
}

/// Stencil for sampling a `height x width` grid at `(px, py)`; `None` when
/// the point lies outside the closed rectangle `[0, w-1] x [0, h-1]`.
/// Integer positions get a single unit weight, so sampling there is exact.
#[inline]
pub fn bilinear_taps(height: usize, width: usize, px: f64, py: f64) -> Option<BilinearTaps> {
    let xmax = (width - 1) as f64;
    let ymax = (height - 1) as f64;
    // NaN fails both comparisons and is rejected as well
    if !(px >= 0.0 && px <= xmax && py >= 0.0 && py <= ymax) {
        return None;
    }
    let (x0, fx) = split_coord(px, width);
    let (y0, fy) = split_coord(py, height);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    Some(BilinearTaps {
        index: [
            y0 * width + x0,
            y0 * width + x1,
            y1 * width + x0,
            y1 * width + x1,
        ],
        weight: [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ],
    })
}

#[inline]
fn split_coord(p: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let base = (p.floor() as usize).min(n - 2);
    (base, p - base as f64)
}

impl BilinearTaps {
    /// Evaluates the stencil on an interleaved buffer with `channels` samples per pixel.
    #[inline]
    pub fn sample(&self, data: &[f64], channels: usize, c: usize) -> f64 {
        self.index
            .iter()
            .zip(&self.weight)
            .map(|(&i, &wt)| wt * data[i * channels + c])
            .sum()
    }
}

/// Bilinear sample with coordinates clamped into the grid; used for resampling.
pub fn sample_clamped(plane: &[f64], height: usize, width: usize, px: f64, py: f64) -> f64 {
    let px = px.clamp(0.0, (width - 1) as f64);
    let py = py.clamp(0.0, (height - 1) as f64);
    let (x0, fx) = split_coord(px, width);
    let (y0, fy) = split_coord(py, height);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let top = (1.0 - fx) * plane[y0 * width + x0] + fx * plane[y0 * width + x1];
    let bottom = (1.0 - fx) * plane[y1 * width + x0] + fx * plane[y1 * width + x1];
    (1.0 - fy) * top + fy * bottom
}

/// Result of [`compose`]: the clamped sum and whether any sample saturated.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub image: Image,
    pub clipped: bool,
}

/// Linear additive imaging model: pixel-wise `l1 + l2`, clamped to `[0, 1]`.
pub fn compose(l1: &Image, l2: &Image) -> Result<Composite> {
    l1.check_same_shape(l2)?;
    let mut clipped = false;
    let data = l1
        .data
        .iter()
        .zip(&l2.data)
        .map(|(a, b)| {
            let s = a + b;
            if (0.0..=1.0).contains(&s) {
                s
            } else {
                clipped = true;
                s.clamp(0.0, 1.0)
            }
        })
        .collect();
    Ok(Composite {
        image: Image {
            data,
            ..l1.clone_shape()
        },
        clipped,
    })
}

/// Samples `img` at `x + flow(x)` for every pixel. The mask is false where the
/// displaced point leaves the image; such pixels keep their unwarped value.
pub fn warp_backward(img: &Image, flow: &FlowField) -> Result<(Image, Vec<bool>)> {
    img.check_flow(flow)?;
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut out = img.clone();
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = x as f64 + flow.u[i];
            let py = y as f64 + flow.v[i];
            if let Some(taps) = bilinear_taps(h, w, px, py) {
                mask[i] = true;
                for c in 0..ch {
                    out.data[i * ch + c] = taps.sample(&img.data, ch, c);
                }
            }
        }
    }
    Ok((out, mask))
}

/// Forward differences with a zero derivative on the last column / row.
pub fn spatial_gradient(img: &Image) -> (Image, Image) {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut gx = Image::zeros(h, w, ch);
    let mut gy = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let here = img.get(y, x, c);
                if x + 1 < w {
                    gx.set(y, x, c, img.get(y, x + 1, c) - here);
                }
                if y + 1 < h {
                    gy.set(y, x, c, img.get(y + 1, x, c) - here);
                }
            }
        }
    }
    (gx, gy)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of one plane with replicated borders.
pub fn blur_plane(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = (x as isize + j as isize - r).clamp(0, width as isize - 1) as usize;
                acc += kv * row[xx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = (y as isize + j as isize - r).clamp(0, height as isize - 1) as usize;
                acc += kv * tmp[yy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let planes: Vec<Vec<f64>> = img
        .planes()
        .iter()
        .map(|p| blur_plane(p, img.height(), img.width(), sigma))
        .collect();
    Image::from_planes(img.height(), img.width(), &planes).expect("shape preserved")
}

/// Bilinear resize of a plane using pixel-centre alignment.
pub fn resize_plane(
    plane: &[f64],
    height: usize,
    width: usize,
    new_height: usize,
    new_width: usize,
) -> Vec<f64> {
    if height == new_height && width == new_width {
        return plane.to_vec();
    }
    let sx = width as f64 / new_width as f64;
    let sy = height as f64 / new_height as f64;
    let mut out = Vec::with_capacity(new_height * new_width);
    for y in 0..new_height {
        let py = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..new_width {
            let px = (x as f64 + 0.5) * sx - 0.5;
            out.push(sample_clamped(plane, height, width, px, py));
        }
    }
    out
}

pub fn resize_image(img: &Image, new_height: usize, new_width: usize) -> Result<Image> {
    let planes: Vec<Vec<f64>> = img
        .planes()
        .iter()
        .map(|p| resize_plane(p, img.height(), img.width(), new_height, new_width))
        .collect();
    Image::from_planes(new_height, new_width, &planes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, |_, x, _| x as f64 / w as f64)
    }

    #[test]
    fn compose_constant_layers() {
        let a = Image::filled(4, 4, 1, 0.5);
        let b = Image::filled(4, 4, 1, 0.2);
        let out = compose(&a, &b).unwrap();
        assert!(!out.clipped);
        assert!(out.image.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn compose_with_zero_is_identity() {
        let a = ramp(5, 7);
        let out = compose(&a, &Image::zeros(5, 7, 1)).unwrap();
        assert_eq!(out.image, a);
        assert!(!out.clipped);
    }

    #[test]
    fn compose_saturates_and_flags() {
        let a = Image::filled(3, 3, 3, 0.9);
        let b = Image::filled(3, 3, 3, 0.2);
        let out = compose(&a, &b).unwrap();
        assert!(out.clipped);
        assert!(out.image.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn compose_rejects_mismatch() {
        let a = Image::zeros(3, 3, 1);
        let b = Image::zeros(3, 4, 1);
        assert!(matches!(
            compose(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_warp_is_identity() {
        let img = Image::from_fn(6, 5, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 11.0);
        let (out, mask) = warp_backward(&img, &FlowField::zeros(6, 5)).unwrap();
        assert_eq!(out, img);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn integer_warp_shifts_and_masks_last_column() {
        let img = Image::from_fn(4, 5, 1, |y, x, _| (y * 5 + x) as f64 / 20.0);
        let (out, mask) = warp_backward(&img, &FlowField::constant(4, 5, 1.0, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert!(mask[y * 5 + x]);
                assert_eq!(out.get(y, x, 0), img.get(y, x + 1, 0));
            }
            assert!(!mask[y * 5 + 4]);
        }
    }

    #[test]
    fn half_pixel_warp_on_ramp() {
        // weights (0.5, 0.5) between x and x+1: (x/4 + (x+1)/4)/2 = (x+0.5)/4
        let img = ramp(4, 4);
        let (out, mask) = warp_backward(&img, &FlowField::constant(4, 4, 0.5, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                if x < 3 {
                    assert!(mask[y * 4 + x]);
                    assert!((out.get(y, x, 0) - (x as f64 + 0.5) / 4.0).abs() < 1e-15);
                } else {
                    assert!(!mask[y * 4 + x]);
                }
            }
        }
    }

    #[test]
    fn taps_at_far_corner_are_exact() {
        let t = bilinear_taps(3, 3, 2.0, 2.0).unwrap();
        let data: Vec<f64> = (0..9).map(|i| i as f64 * 0.1).collect();
        assert_eq!(t.sample(&data, 1, 0), data[8]);
        assert!(bilinear_taps(3, 3, 2.0000001, 0.0).is_none());
        assert!(bilinear_taps(3, 3, -1e-12, 0.0).is_none());
        assert!(bilinear_taps(3, 3, f64::NAN, 0.0).is_none());
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let (gx, gy) = spatial_gradient(&Image::filled(5, 6, 3, 0.3));
        assert!(gx.data().iter().chain(gy.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_ramp() {
        let h = 0.125;
        let img = Image::from_fn(4, 5, 1, |_, x, _| x as f64 * h);
        let (gx, gy) = spatial_gradient(&img);
        for y in 0..4 {
            for x in 0..5 {
                let want = if x < 4 { h } else { 0.0 };
                assert_eq!(gx.get(y, x, 0), want);
                assert_eq!(gy.get(y, x, 0), 0.0);
            }
        }
    }

    #[test]
    fn gradient_two_by_two() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let (gx, gy) = spatial_gradient(&img);
        assert_eq!(gx.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(gy.data(), &[0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn blur_preserves_constants() {
        let p = vec![0.42; 7 * 9];
        let b = blur_plane(&p, 7, 9, 1.3);
        assert!(b.iter().all(|v| (v - 0.42).abs() < 1e-14));
    }

    #[test]
    fn image_validation() {
        assert!(Image::new(1, 4, 1, vec![0.0; 4]).is_err());
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
    }
}
