//! Coarse-to-fine image pyramids and flow transfer between levels.

use crate::error::{Error, Result};
use crate::image::{blur_plane, resize_plane, FlowField, Image};

pub const DEFAULT_SCALE_FACTOR: f64 = 0.5;
pub const DEFAULT_MIN_SIZE: usize = 16;

/// Levels ordered from finest (index 0) to coarsest.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid<T> {
    pub levels: Vec<T>,
    pub scale_factor: f64,
}

impl<T> Pyramid<T> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn finest(&self) -> &T {
        &self.levels[0]
    }

    pub fn coarsest(&self) -> &T {
        self.levels.last().expect("pyramid has at least one level")
    }
}

fn check_factor(scale_factor: f64) -> Result<()> {
    if (0.5..=0.95).contains(&scale_factor) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "pyramid scale factor must lie in [0.5, 0.95], got {scale_factor}"
        )))
    }
}

fn next_dim(dim: usize, scale_factor: f64) -> usize {
    // guard against 64 * 0.5 landing a hair above an integer
    (dim as f64 * scale_factor - 1e-9).ceil() as usize
}

/// Level sizes produced by [`build_pyramid`] for a `height x width` input.
pub fn pyramid_sizes(
    height: usize,
    width: usize,
    scale_factor: f64,
    min_size: usize,
) -> Result<Vec<(usize, usize)>> {
    check_factor(scale_factor)?;
    let min_size = min_size.max(2);
    let mut sizes = vec![(height, width)];
    loop {
        let (h, w) = *sizes.last().unwrap();
        let (nh, nw) = (next_dim(h, scale_factor), next_dim(w, scale_factor));
        if nh < min_size || nw < min_size || (nh == h && nw == w) {
            break;
        }
        sizes.push((nh, nw));
    }
    Ok(sizes)
}

/// Gaussian blur (sigma = 1 / sqrt(2 * factor)) followed by bilinear subsampling.
pub fn build_pyramid(img: &Image, scale_factor: f64, min_size: usize) -> Result<Pyramid<Image>> {
    let sizes = pyramid_sizes(img.height(), img.width(), scale_factor, min_size)?;
    let sigma = 1.0 / (2.0 * scale_factor).sqrt();
    let mut levels = vec![img.clone()];
    for &(nh, nw) in &sizes[1..] {
        let prev = levels.last().unwrap();
        let planes: Vec<Vec<f64>> = prev
            .planes()
            .iter()
            .map(|p| {
                let blurred = blur_plane(p, prev.height(), prev.width(), sigma);
                resize_plane(&blurred, prev.height(), prev.width(), nh, nw)
            })
            .collect();
        levels.push(Image::from_planes(nh, nw, &planes)?);
    }
    Ok(Pyramid {
        levels,
        scale_factor,
    })
}

/// Bilinear resampling of both components, with displacements rescaled to
/// the new pixel units.
pub fn rescale_flow(flow: &FlowField, new_height: usize, new_width: usize) -> FlowField {
    let (h, w) = (flow.height(), flow.width());
    if h == new_height && w == new_width {
        return flow.clone();
    }
    let sx = new_width as f64 / w as f64;
    let sy = new_height as f64 / h as f64;
    let u: Vec<f64> = resize_plane(flow.u(), h, w, new_height, new_width)
        .into_iter()
        .map(|a| a * sx)
        .collect();
    let v: Vec<f64> = resize_plane(flow.v(), h, w, new_height, new_width)
        .into_iter()
        .map(|a| a * sy)
        .collect();
    FlowField::new(new_height, new_width, u, v).expect("resampled flow is well formed")
}
