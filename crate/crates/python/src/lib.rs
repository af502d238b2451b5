//! Python bindings. Images are float64 arrays of shape (H, W) or (H, W, C)
//! in [0, 1]; flows are (H, W, 2) arrays holding (u, v) per pixel.

use duoflow::io::{read_flo, write_flo};
use duoflow::metrics::{epe_mean, layer_error_ncc, warping_error};
use duoflow::synth::custom_suite;
use duoflow::{
    alternate, FlowField, FlowRegularizer, Image, InitPolicy, LayerDecomposition, Mode, SolverConfig,
    TgvWeights,
};
use numpy::{PyArray1, PyArrayMethods, PyReadonlyArrayDyn, PyUntypedArrayMethods};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_image(a: &PyReadonlyArrayDyn<'_, f64>) -> PyResult<Image> {
    let shape = a.shape();
    let (h, w, c) = match *shape {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(err(format!("expected an (H, W) or (H, W, C) array, got shape {shape:?}"))),
    };
    let data = a.as_array().iter().copied().collect();
    Image::new(h, w, c, data).map_err(err)
}

fn to_flow(a: &PyReadonlyArrayDyn<'_, f64>) -> PyResult<FlowField> {
    let shape = a.shape();
    let [h, w, 2] = *shape else {
        return Err(err(format!("expected an (H, W, 2) flow array, got shape {shape:?}")));
    };
    let view = a.as_array();
    let (mut u, mut v) = (Vec::with_capacity(h * w), Vec::with_capacity(h * w));
    for p in view.iter().copied().collect::<Vec<_>>().chunks_exact(2) {
        u.push(p[0]);
        v.push(p[1]);
    }
    FlowField::new(h, w, u, v).map_err(err)
}

fn image_array<'py>(py: Python<'py>, img: &Image) -> PyResult<Bound<'py, PyAny>> {
    let flat = PyArray1::from_vec(py, img.data().to_vec());
    Ok(if img.channels() == 1 {
        flat.reshape([img.height(), img.width()])?.into_any()
    } else {
        flat.reshape([img.height(), img.width(), img.channels()])?.into_any()
    })
}

fn flow_array<'py>(py: Python<'py>, f: &FlowField) -> PyResult<Bound<'py, PyAny>> {
    let data: Vec<f64> = f.u().iter().zip(f.v()).flat_map(|(&a, &b)| [a, b]).collect();
    Ok(PyArray1::from_vec(py, data)
        .reshape([f.height(), f.width(), 2])?
        .into_any())
}

fn layers_dict<'py>(py: Python<'py>, d: &LayerDecomposition) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("l1", image_array(py, &d.l1)?)?;
    out.set_item("l1p", image_array(py, &d.l1p)?)?;
    out.set_item("l2", image_array(py, &d.l2)?)?;
    out.set_item("l2p", image_array(py, &d.l2p)?)?;
    Ok(out)
}

/// Jointly estimates the layers and flows of a frame pair.
///
/// Returns a dict with l1, l1p, l2, l2p, u, v, u_init, v_init and
/// energies (total energy per outer iteration).
#[pyfunction]
#[pyo3(signature = (
    i0, i1, mode = "static", *, c = None, lambda_l = None, lambda_f = None, reg = "tv",
    tgv_alpha1 = 1.0, tgv_alpha0 = 2.0, outer_iters = None, init_layers = None, init_flows = None
))]
#[allow(clippy::too_many_arguments)]
fn estimate<'py>(
    py: Python<'py>,
    i0: PyReadonlyArrayDyn<'py, f64>,
    i1: PyReadonlyArrayDyn<'py, f64>,
    mode: &str,
    c: Option<f64>,
    lambda_l: Option<f64>,
    lambda_f: Option<f64>,
    reg: &str,
    tgv_alpha1: f64,
    tgv_alpha0: f64,
    outer_iters: Option<usize>,
    init_layers: Option<[PyReadonlyArrayDyn<'py, f64>; 4]>,
    init_flows: Option<[PyReadonlyArrayDyn<'py, f64>; 2]>,
) -> PyResult<Bound<'py, PyDict>> {
    let mode: Mode = mode.parse().map_err(err)?;
    let (i0, i1) = (to_image(&i0)?, to_image(&i1)?);
    let mut cfg = SolverConfig::default();
    cfg.c = c.unwrap_or(cfg.c);
    cfg.weights.lambda_l = lambda_l.unwrap_or(cfg.weights.lambda_l);
    cfg.weights.lambda_f = lambda_f.unwrap_or(cfg.weights.lambda_f);
    cfg.weights.regularizer = match reg {
        "tv" => FlowRegularizer::Tv,
        "tgv2" => FlowRegularizer::Tgv2(TgvWeights {
            first_order: tgv_alpha1,
            second_order: tgv_alpha0,
        }),
        other => return Err(err(format!("unknown regularizer {other:?} (expected tv or tgv2)"))),
    };
    cfg.outer_iters = outer_iters.unwrap_or(cfg.outer_iters);
    cfg.init = match (init_layers, init_flows) {
        (Some(_), Some(_)) => return Err(err("give init_layers or init_flows, not both")),
        (Some([a, b, c2, d]), None) => InitPolicy::SuppliedLayers(
            LayerDecomposition::new(to_image(&a)?, to_image(&b)?, to_image(&c2)?, to_image(&d)?, cfg.c)
                .map_err(err)?,
        ),
        (None, Some([u, v])) => InitPolicy::SuppliedFlows(to_flow(&u)?, to_flow(&v)?),
        (None, None) => InitPolicy::ZeroForeground,
    };
    let est = py
        .detach(|| alternate(&i0, &i1, mode, &cfg, None))
        .map_err(err)?;
    let out = layers_dict(py, &est.decomposition)?;
    out.set_item("u", flow_array(py, &est.u)?)?;
    out.set_item("v", flow_array(py, &est.v)?)?;
    out.set_item("u_init", flow_array(py, &est.u_init)?)?;
    out.set_item("v_init", flow_array(py, &est.v_init)?)?;
    out.set_item("energies", est.trace.totals())?;
    Ok(out)
}

/// The synthetic ground-truth catalog as a list of dicts.
#[pyfunction]
#[pyo3(signature = (seed = 1, mode = None, size = None, c = 0.25))]
fn synthesize<'py>(
    py: Python<'py>,
    seed: u64,
    mode: Option<&str>,
    size: Option<(usize, usize)>,
    c: f64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mode = mode.map(str::parse::<Mode>).transpose().map_err(err)?;
    let suite = py.detach(|| custom_suite(seed, c, mode, size)).map_err(err)?;
    suite
        .iter()
        .map(|b| {
            let d = layers_dict(py, &b.gt)?;
            d.set_item("name", &b.name)?;
            d.set_item("mode", b.mode.name())?;
            d.set_item("i0", image_array(py, &b.i0)?)?;
            d.set_item("i1", image_array(py, &b.i1)?)?;
            d.set_item("u", flow_array(py, &b.gt_u)?)?;
            d.set_item("v", flow_array(py, &b.gt_v)?)?;
            Ok(d)
        })
        .collect()
}

/// Mean endpoint error between two (H, W, 2) flows.
#[pyfunction]
fn epe(est: PyReadonlyArrayDyn<'_, f64>, gt: PyReadonlyArrayDyn<'_, f64>) -> PyResult<f64> {
    epe_mean(&to_flow(&est)?, &to_flow(&gt)?, None).map_err(err)
}

/// `1 - NCC` between a ground-truth and an estimated foreground layer.
#[pyfunction]
fn layer_error(gt_l2: PyReadonlyArrayDyn<'_, f64>, est_l2: PyReadonlyArrayDyn<'_, f64>) -> PyResult<f64> {
    layer_error_ncc(&to_image(&gt_l2)?, &to_image(&est_l2)?).map_err(err)
}

/// Mean warping error of `lp` onto `l` along `flow`, in gray levels.
#[pyfunction]
fn warp_error(
    l: PyReadonlyArrayDyn<'_, f64>,
    lp: PyReadonlyArrayDyn<'_, f64>,
    flow: PyReadonlyArrayDyn<'_, f64>,
) -> PyResult<f64> {
    warping_error(&to_image(&l)?, &to_image(&lp)?, &to_flow(&flow)?).map_err(err)
}

#[pyfunction(name = "read_flo")]
fn py_read_flo<'py>(py: Python<'py>, path: std::path::PathBuf) -> PyResult<Bound<'py, PyAny>> {
    flow_array(py, &read_flo(path).map_err(err)?)
}

#[pyfunction(name = "write_flo")]
fn py_write_flo(flow: PyReadonlyArrayDyn<'_, f64>, path: std::path::PathBuf) -> PyResult<()> {
    write_flo(&to_flow(&flow)?, path).map_err(err)
}

#[pymodule]
#[pyo3(name = "duoflow")]
fn duoflow_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(epe, m)?)?;
    m.add_function(wrap_pyfunction!(layer_error, m)?)?;
    m.add_function(wrap_pyfunction!(warp_error, m)?)?;
    m.add_function(wrap_pyfunction!(py_read_flo, m)?)?;
    m.add_function(wrap_pyfunction!(py_write_flo, m)?)?;
    Ok(())
}
