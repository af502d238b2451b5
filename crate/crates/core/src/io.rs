//! Image, flow and bundle files.
//!
//! Images are PNG (8/16-bit gray or RGB) or binary PGM/PPM, mapped to
//! [0, 1] by the maximum code value. Flows use the Middlebury `.flo`
//! layout: magic `202021.25` (`PIEH`), `i32` width, `i32` height, then
//! interleaved little-endian `f32` pairs in row-major order.

use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alternation::{convergence_report, Mode, Trace};
use crate::energy::LayerDecomposition;
use crate::error::{Error, Result};
use crate::image::{FlowField, Image};
use crate::synth::GroundTruthBundle;

pub const FLO_MAGIC: f32 = 202021.25;
const FLO_HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max_code(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// True when every value is exactly `k / 255` for an integer `k` in 0..=255.
pub fn on_8bit_lattice(img: &Image) -> bool {
    img.data().iter().all(|&v| {
        let k = (v * 255.0).round();
        (0.0..=255.0).contains(&k) && k / 255.0 == v
    })
}

fn quantize(img: &Image, depth: BitDepth) -> Vec<u16> {
    let m = depth.max_code();
    img.data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * m).round() as u16)
        .collect()
}

fn dequantize(codes: impl Iterator<Item = u32>, max_code: f64) -> Vec<f64> {
    codes.map(|k| k as f64 / max_code).collect()
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| corrupt(format!("PNG header: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| corrupt("PNG too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| corrupt(format!("PNG data: {e}")))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Unsupported(format!(
                "PNG color type {other:?} (expected grayscale or RGB)"
            )))
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let n = w * h * channels;
    let data = match info.bit_depth {
        png::BitDepth::Eight => dequantize(buf[..n].iter().map(|&b| b as u32), 255.0),
        png::BitDepth::Sixteen => dequantize(
            buf[..2 * n]
                .chunks_exact(2)
                .map(|p| u16::from_be_bytes([p[0], p[1]]) as u32),
            65535.0,
        ),
        other => return Err(Error::Unsupported(format!("PNG bit depth {other:?}"))),
    };
    Image::new(h, w, channels, data)
}

pub fn encode_png(img: &Image, depth: BitDepth) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(if img.channels() == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        let codes = quantize(img, depth);
        let raw: Vec<u8> = match depth {
            BitDepth::Eight => {
                enc.set_depth(png::BitDepth::Eight);
                codes.iter().map(|&k| k as u8).collect()
            }
            BitDepth::Sixteen => {
                enc.set_depth(png::BitDepth::Sixteen);
                codes.iter().flat_map(|k| k.to_be_bytes()).collect()
            }
        };
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidArgument(format!("PNG encode: {e}")))?;
        writer
            .write_image_data(&raw)
            .map_err(|e| Error::InvalidArgument(format!("PNG encode: {e}")))?;
    }
    Ok(out)
}

/// Binary PGM (`P5`) or PPM (`P6`), maxval up to 65535.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Unsupported("PNM magic (expected P5 or P6)".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(corrupt("PNM header truncated")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("PNM header field is not a number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("PNM header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corrupt("PNM header truncated"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Unsupported(format!("PNM maxval {maxval}")));
    }
    let n = w * h * channels;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(corrupt(format!(
            "PNM raster truncated: {} of {need} bytes",
            raster.len()
        )));
    }
    let codes: Vec<u32> = if wide {
        raster[..need]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as u32)
            .collect()
    } else {
        raster[..need].iter().map(|&b| b as u32).collect()
    };
    if codes.iter().any(|&k| k as usize > maxval) {
        return Err(corrupt("PNM sample exceeds maxval"));
    }
    Image::new(h, w, channels, dequantize(codes.into_iter(), maxval as f64))
}

pub fn encode_pnm(img: &Image, depth: BitDepth) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let max = depth.max_code() as u32;
    let mut out = format!("{magic}\n{} {}\n{max}\n", img.width(), img.height()).into_bytes();
    let codes = quantize(img, depth);
    match depth {
        BitDepth::Eight => out.extend(codes.iter().map(|&k| k as u8)),
        BitDepth::Sixteen => out.extend(codes.iter().flat_map(|k| k.to_be_bytes())),
    }
    out
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Reads a PNG, PGM or PPM file, dispatching on the file contents.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(&bytes)
    } else {
        Err(Error::Unsupported(format!(
            "{}: not a PNG, PGM or PPM file",
            path.as_ref().display()
        )))
    }
}

/// Writes with 8 bits per sample when every value lies on the 8-bit
/// lattice and 16 bits otherwise; the format follows the extension
/// (`png`, `pgm`, `ppm`, `pnm`).
pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let depth = if on_8bit_lattice(img) {
        BitDepth::Eight
    } else {
        BitDepth::Sixteen
    };
    write_image_with_depth(img, path, depth)
}

pub fn write_image_with_depth(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let bytes = match extension(path).as_str() {
        "png" => encode_png(img, depth)?,
        "pgm" | "ppm" | "pnm" => {
            let ext = extension(path);
            if (ext == "pgm" && img.channels() != 1) || (ext == "ppm" && img.channels() != 3) {
                return Err(Error::InvalidArgument(format!(
                    "{}: {} channels do not fit the extension",
                    path.display(),
                    img.channels()
                )));
            }
            encode_pnm(img, depth)
        }
        other => {
            return Err(Error::Unsupported(format!(
                "image extension {other:?} (expected png, pgm or ppm)"
            )))
        }
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let n = flow.height() * flow.width();
    let mut out = Vec::with_capacity(FLO_HEADER_LEN + 8 * n);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        out.extend_from_slice(&(*u as f32).to_le_bytes());
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < FLO_HEADER_LEN {
        return Err(corrupt("flo header truncated"));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(corrupt("bad flo magic (expected PIEH)"));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(corrupt(format!("flo size {w}x{h}")));
    }
    let n = w as usize * h as usize;
    let expected = FLO_HEADER_LEN + 8 * n;
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "flo payload of {} bytes does not match {w}x{h} ({expected} bytes)",
            bytes.len()
        )));
    }
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for k in 0..n {
        let p = FLO_HEADER_LEN + 8 * k;
        u.push(f32::from_le_bytes(word(p)) as f64);
        v.push(f32::from_le_bytes(word(p + 4)) as f64);
    }
    FlowField::new(h as usize, w as usize, u, v)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&fs::read(path)?)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_flo(flow))?;
    Ok(())
}

const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;

/// The 55-entry Middlebury color wheel, RGB in 0..=255.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let ramp = |i: usize, n: usize| (255 * i / n) as f64;
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    wheel.extend((0..RY).map(|i| [255.0, ramp(i, RY), 0.0]));
    wheel.extend((0..YG).map(|i| [255.0 - ramp(i, YG), 255.0, 0.0]));
    wheel.extend((0..GC).map(|i| [0.0, 255.0, ramp(i, GC)]));
    wheel.extend((0..CB).map(|i| [0.0, 255.0 - ramp(i, CB), 255.0]));
    wheel.extend((0..BM).map(|i| [ramp(i, BM), 0.0, 255.0]));
    wheel.extend((0..MR).map(|i| [255.0, 0.0, 255.0 - ramp(i, MR)]));
    wheel
}

/// 99th percentile of the flow magnitudes.
pub fn auto_max_magnitude(flow: &FlowField) -> f64 {
    let mut mags: Vec<f64> = flow
        .u()
        .iter()
        .zip(flow.v())
        .map(|(a, b)| a.hypot(*b))
        .collect();
    mags.sort_by(f64::total_cmp);
    let k = ((mags.len() - 1) as f64 * 0.99).round() as usize;
    mags[k]
}

/// Middlebury visualization: hue encodes direction, saturation the
/// magnitude relative to `max_mag` (99th percentile when `None`).
/// Magnitudes beyond `max_mag` are darkened; zero flow is white.
pub fn flow_to_color(flow: &FlowField, max_mag: Option<f64>) -> Image {
    let wheel = color_wheel();
    let ncols = wheel.len();
    let mut max = max_mag.unwrap_or_else(|| auto_max_magnitude(flow));
    if !(max > 0.0) {
        max = 1.0;
    }
    let mut data = Vec::with_capacity(flow.height() * flow.width() * 3);
    for (&u, &v) in flow.u().iter().zip(flow.v()) {
        let rad = u.hypot(v) / max;
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
        let k0 = fk.floor() as usize % ncols;
        let k1 = (k0 + 1) % ncols;
        let f = fk - fk.floor();
        for c in 0..3 {
            let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
            let col = if rad <= 1.0 {
                1.0 - rad * (1.0 - col)
            } else {
                col * 0.75
            };
            data.push(col);
        }
    }
    Image::new(flow.height(), flow.width(), 3, data).expect("color image is well formed")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub mode: String,
    pub c: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

pub const BUNDLE_FILES: [&str; 9] = [
    "I.png", "Iprime.png", "L1.png", "L1p.png", "L2.png", "L2p.png", "U.flo", "V.flo", "meta.json",
];

/// Writes a bundle in the directory layout `I.png, Iprime.png, L1.png,
/// L1p.png, L2.png, L2p.png, U.flo, V.flo, meta.json`.
pub fn save_bundle(bundle: &GroundTruthBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let d = &bundle.gt;
    for (name, img) in [
        ("I.png", &bundle.i0),
        ("Iprime.png", &bundle.i1),
        ("L1.png", &d.l1),
        ("L1p.png", &d.l1p),
        ("L2.png", &d.l2),
        ("L2p.png", &d.l2p),
    ] {
        write_image(img, dir.join(name))?;
    }
    write_flo(&bundle.gt_u, dir.join("U.flo"))?;
    write_flo(&bundle.gt_v, dir.join("V.flo"))?;
    let meta = BundleMeta {
        mode: bundle.mode.name().to_string(),
        c: d.c,
        seed: bundle.seed,
        name: Some(bundle.name.clone()),
    };
    let mut f = BufWriter::new(fs::File::create(dir.join("meta.json"))?);
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Reads a bundle directory. Layers are taken as stored (quantized);
/// use [`crate::alternation::repair_layers`] to restore the additive model exactly.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<GroundTruthBundle> {
    let dir = dir.as_ref();
    let meta: BundleMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let mode: Mode = meta.mode.parse()?;
    let img = |name: &str| read_image(dir.join(name));
    let gt = LayerDecomposition::new(img("L1.png")?, img("L1p.png")?, img("L2.png")?, img("L2p.png")?, meta.c)?;
    Ok(GroundTruthBundle {
        name: meta.name.unwrap_or_default(),
        i0: img("I.png")?,
        i1: img("Iprime.png")?,
        gt,
        gt_u: read_flo(dir.join("U.flo"))?,
        gt_v: read_flo(dir.join("V.flo"))?,
        mode,
        seed: meta.seed,
    })
}

pub fn write_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, convergence_report(trace).csv)?;
    Ok(())
}
