use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use duoflow::io::{read_flo, read_image};
use duoflow::metrics::{epe_mean, layer_error_ncc, warping_error};
use duoflow::{FlowField, Image};
use serde::Serialize;

#[derive(Args)]
pub struct EvalArgs {
    /// Output directory of `estimate` (or any directory with L*.png and U.flo).
    #[arg(long)]
    pub result: PathBuf,
    /// Ground-truth bundle directory.
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Default, Serialize)]
pub struct Report {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epe_u: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epe_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer_err: Option<f64>,
    pub warp_err_l1: f64,
    pub warp_err_l2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub naive_epe_u: Option<f64>,
    /// Naive EPE minus final EPE; positive when the joint estimate helped.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_epe_u: Option<f64>,
    pub notes: Vec<String>,
}

fn image(dir: &Path, name: &str) -> Result<Option<Image>> {
    let p = dir.join(name);
    if !p.is_file() {
        return Ok(None);
    }
    read_image(&p).map(Some).with_context(|| format!("reading {}", p.display()))
}

fn flow(dir: &Path, name: &str) -> Result<Option<FlowField>> {
    let p = dir.join(name);
    if !p.is_file() {
        return Ok(None);
    }
    read_flo(&p).map(Some).with_context(|| format!("reading {}", p.display()))
}

fn required<T>(v: Option<T>, dir: &Path, name: &str) -> Result<T> {
    v.with_context(|| format!("{} has no {name}", dir.display()))
}

/// Compares the result directory with the ground truth. The result must
/// hold the four layers and U.flo; ground-truth files that are missing
/// only drop the measures that need them.
pub fn evaluate(result: &Path, gt: &Path) -> Result<Report> {
    let u = required(flow(result, "U.flo")?, result, "U.flo")?;
    let v = flow(result, "V.flo")?;
    let layer = |name: &str| required(image(result, name)?, result, name);
    let (l1, l1p, l2, l2p) = (layer("L1.png")?, layer("L1p.png")?, layer("L2.png")?, layer("L2p.png")?);
    let mut r = Report::default();

    let gt_u = flow(gt, "U.flo")?;
    match &gt_u {
        Some(g) => r.epe_u = Some(epe_mean(&u, g, None)?),
        None => r.notes.push("ground truth has no U.flo: epe_u omitted".into()),
    }
    match (&v, flow(gt, "V.flo")?) {
        (Some(v), Some(g)) => r.epe_v = Some(epe_mean(v, &g, None)?),
        (None, _) => r.notes.push("result has no V.flo: epe_v omitted".into()),
        (_, None) => r.notes.push("ground truth has no V.flo: epe_v omitted".into()),
    }
    match image(gt, "L2.png")? {
        Some(g) => r.layer_err = Some(layer_error_ncc(&g, &l2)?),
        None => r.notes.push("ground truth has no L2.png: layer_err omitted".into()),
    }
    r.warp_err_l1 = warping_error(&l1, &l1p, &u)?;
    if v.is_none() {
        r.notes.push("L2 warped with U".into());
    }
    r.warp_err_l2 = warping_error(&l2, &l2p, v.as_ref().unwrap_or(&u))?;

    match (flow(result, "U_init.flo")?, &gt_u, r.epe_u) {
        (Some(n), Some(g), Some(e)) => {
            let naive = epe_mean(&n, g, None)?;
            r.naive_epe_u = Some(naive);
            r.delta_epe_u = Some(naive - e);
        }
        (None, _, _) => r.notes.push("result has no U_init.flo: naive comparison omitted".into()),
        _ => {}
    }
    Ok(r)
}

pub fn run(a: &EvalArgs) -> Result<()> {
    let report = evaluate(&a.result, &a.gt)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    let out = a.result.join("eval.json");
    fs::write(&out, json + "\n").with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
