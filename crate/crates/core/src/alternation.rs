//! Block coordinate descent over layers and flows.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::energy::{self, EnergyBreakdown, LayerDecomposition, Weights};
use crate::error::{Error, Result};
use crate::flow::{solve_flows, RelaxConfig};
use crate::image::{FlowField, Image};
use crate::layer::{solve_layers, IrlsConfig, DEFAULT_BOUND};
use crate::metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// The foreground is identical in both frames: one flow, `L2' = L2`.
    StaticForeground,
    /// Both layers move, each with its own flow.
    DynamicForeground,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::StaticForeground => "static",
            Mode::DynamicForeground => "dynamic",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Mode::StaticForeground),
            "dynamic" => Ok(Mode::DynamicForeground),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (expected static or dynamic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitPolicy {
    /// `L2 = L2' = 0` and the naive flow on the input frames. Static mode only.
    ZeroForeground,
    /// Layers given; flows are estimated on them.
    SuppliedLayers(LayerDecomposition),
    /// Flows given; layers come from one layer-separation step.
    SuppliedFlows(FlowField, FlowField),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub weights: Weights,
    pub c: f64,
    pub outer_iters: usize,
    pub irls: IrlsConfig,
    pub relax: RelaxConfig,
    pub init: InitPolicy,
    /// Stop early once an outer iteration lowers the energy by less than
    /// this fraction; 0 runs all `outer_iters`.
    pub stop_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            weights: Weights::default(),
            c: DEFAULT_BOUND,
            outer_iters: 25,
            irls: IrlsConfig::default(),
            relax: RelaxConfig::default(),
            init: InitPolicy::ZeroForeground,
            stop_tol: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.irls.validate()?;
        self.relax.validate()?;
        if self.outer_iters == 0 {
            return Err(Error::InvalidArgument("outer_iters must be at least 1".into()));
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "foreground bound c must lie in (0, 1], got {}",
                self.c
            )));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(Error::InvalidArgument("stop_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Optional ground truth used only for reporting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub u: Option<FlowField>,
    pub v: Option<FlowField>,
    pub l2: Option<Image>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    /// 0 is the initialization.
    pub iter: usize,
    pub energy: EnergyBreakdown,
    pub epe_u: Option<f64>,
    pub epe_v: Option<f64>,
    pub layer_err: Option<f64>,
    pub layer_step_rejected: bool,
    pub flow_step_rejected: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.energy.total).collect()
    }

    pub fn rejected_steps(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.layer_step_rejected as usize + r.flow_step_rejected as usize)
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub decomposition: LayerDecomposition,
    pub u: FlowField,
    pub v: FlowField,
    pub trace: Trace,
    /// Flows right after initialization (the naive flow for `ZeroForeground`).
    pub u_init: FlowField,
    pub v_init: FlowField,
}

fn check_inputs(i0: &Image, i1: &Image) -> Result<()> {
    i0.check_same_shape(i1)?;
    for (img, what) in [(i0, "first frame"), (i1, "second frame")] {
        if img.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what));
        }
    }
    Ok(())
}

/// Clips supplied foreground layers into `[0, min(I, c)]` and recomputes
/// the background as `I - L2`.
pub fn repair_layers(i0: &Image, i1: &Image, l2: &Image, l2p: &Image, c: f64) -> Result<LayerDecomposition> {
    let clip = |fg: &Image, img: &Image| fg.zip_map(img, |f, i| f.clamp(0.0, i.min(c).max(0.0)));
    LayerDecomposition::from_foreground(i0, i1, clip(l2, i0)?, clip(l2p, i1)?, c)
}

/// Tolerance for supplied layers: two 16-bit quantization steps.
pub const SUPPLIED_LAYER_TOL: f64 = 2.0 / 65535.0;

/// Builds the starting decomposition and flows.
pub fn initialize(
    mode: Mode,
    i0: &Image,
    i1: &Image,
    policy: &InitPolicy,
    cfg: &SolverConfig,
) -> Result<(LayerDecomposition, FlowField, FlowField)> {
    check_inputs(i0, i1)?;
    let (h, w) = (i0.height(), i0.width());
    let zero = FlowField::zeros(h, w);
    match policy {
        InitPolicy::ZeroForeground => {
            if mode == Mode::DynamicForeground {
                return Err(Error::InvalidArgument(
                    "dynamic mode needs initial layers (supply L1, L1', L2, L2')".into(),
                ));
            }
            let dec = LayerDecomposition::empty_foreground(i0, i1, cfg.c)?;
            let (u, v) = solve_flows(&dec, &zero, &zero, &cfg.weights, &cfg.relax, mode)?;
            Ok((dec, u, v))
        }
        InitPolicy::SuppliedLayers(given) => {
            let mut given = given.clone();
            given.c = cfg.c;
            if mode == Mode::StaticForeground && given.l2 != given.l2p {
                return Err(Error::LayerConstraint(
                    "static mode needs identical foreground layers L2 and L2'".into(),
                ));
            }
            given.check_constraints(i0, i1, SUPPLIED_LAYER_TOL).map_err(|e| {
                Error::LayerConstraint(format!(
                    "{e}; clip the foreground to [0, min(I, c)] and set L1 = I - L2 to repair"
                ))
            })?;
            // absorb quantization so the additive model holds exactly
            let dec = repair_layers(i0, i1, &given.l2, &given.l2p, cfg.c)?;
            let (u, v) = solve_flows(&dec, &zero, &zero, &cfg.weights, &cfg.relax, mode)?;
            Ok((dec, u, v))
        }
        InitPolicy::SuppliedFlows(u, v) => {
            i0.check_flow(u)?;
            i0.check_flow(v)?;
            let v = match mode {
                Mode::StaticForeground => zero.clone(),
                Mode::DynamicForeground => v.clone(),
            };
            let start = LayerDecomposition::empty_foreground(i0, i1, cfg.c)?;
            let sol = solve_layers(
                i0,
                i1,
                u,
                &v,
                cfg.weights.lambda_l,
                cfg.c,
                mode,
                &start,
                &cfg.irls,
            )?;
            Ok((sol.decomposition, u.clone(), v))
        }
    }
}

fn record(
    iter: usize,
    energy: EnergyBreakdown,
    dec: &LayerDecomposition,
    u: &FlowField,
    v: &FlowField,
    gt: Option<&GroundTruth>,
) -> Result<TraceRecord> {
    let gt = gt.cloned().unwrap_or_default();
    Ok(TraceRecord {
        iter,
        energy,
        epe_u: gt.u.as_ref().map(|g| metrics::epe_mean(u, g, None)).transpose()?,
        epe_v: gt.v.as_ref().map(|g| metrics::epe_mean(v, g, None)).transpose()?,
        layer_err: gt
            .l2
            .as_ref()
            .map(|g| metrics::layer_error_ncc(g, &dec.l2))
            .transpose()?,
        layer_step_rejected: false,
        flow_step_rejected: false,
    })
}

fn breakdown(
    dec: &LayerDecomposition,
    u: &FlowField,
    v: &FlowField,
    e_f: f64,
    weights: &Weights,
) -> Result<EnergyBreakdown> {
    let data = energy::data_term_detailed(dec, u, v)?;
    let e_l = energy::layer_prior(dec);
    Ok(EnergyBreakdown {
        e_b: data.value,
        e_l,
        e_f,
        total: data.value + weights.lambda_l * e_l + weights.flow_weight(dec.channels()) * e_f,
        masked: data.masked,
    })
}

fn flow_energy(u: &FlowField, v: &FlowField, weights: &Weights) -> f64 {
    energy::flow_prior(u, weights.regularizer) + energy::flow_prior(v, weights.regularizer)
}

/// Runs the alternation from `cfg.init`. Each half-step is kept only if it
/// does not raise the total energy; rejected steps are flagged in the trace.
pub fn alternate(
    i0: &Image,
    i1: &Image,
    mode: Mode,
    cfg: &SolverConfig,
    gt: Option<&GroundTruth>,
) -> Result<Estimate> {
    cfg.validate()?;
    check_inputs(i0, i1)?;
    let (mut dec, mut u, mut v) = initialize(mode, i0, i1, &cfg.init, cfg)?;
    let (u_init, v_init) = (u.clone(), v.clone());
    let weights = &cfg.weights;

    let mut e_f = flow_energy(&u, &v, weights);
    let mut current = breakdown(&dec, &u, &v, e_f, weights)?;
    let mut trace = Trace {
        records: vec![record(0, current, &dec, &u, &v, gt)?],
    };

    for iter in 1..=cfg.outer_iters {
        let before = current.total;

        let sol = solve_layers(
            i0,
            i1,
            &u,
            &v,
            weights.lambda_l,
            cfg.c,
            mode,
            &dec,
            &cfg.irls,
        )?;
        let candidate = breakdown(&sol.decomposition, &u, &v, e_f, weights)?;
        let layer_rejected = candidate.total > current.total;
        if !layer_rejected {
            dec = sol.decomposition;
            current = candidate;
        }

        let (nu, nv) = solve_flows(&dec, &u, &v, weights, &cfg.relax, mode)?;
        let nf = flow_energy(&nu, &nv, weights);
        let candidate = breakdown(&dec, &nu, &nv, nf, weights)?;
        let flow_rejected = candidate.total > current.total;
        if !flow_rejected {
            u = nu;
            v = nv;
            e_f = nf;
            current = candidate;
        }

        let mut rec = record(iter, current, &dec, &u, &v, gt)?;
        rec.layer_step_rejected = layer_rejected;
        rec.flow_step_rejected = flow_rejected;
        trace.records.push(rec);

        if cfg.stop_tol > 0.0 && before - current.total < cfg.stop_tol * before.abs() {
            break;
        }
    }

    Ok(Estimate {
        decomposition: dec,
        u,
        v,
        trace,
        u_init,
        v_init,
    })
}

pub const TRACE_HEADER: &str = "iter,e_b,e_l,e_f,total,epe_u,epe_v,layer_err";

/// Trace rendered as CSV plus a short human-readable summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub csv: String,
    pub summary: String,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn convergence_report(trace: &Trace) -> ConvergenceReport {
    let mut csv = String::from(TRACE_HEADER);
    csv.push('\n');
    for r in &trace.records {
        let e = &r.energy;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.iter,
            e.e_b,
            e.e_l,
            e.e_f,
            e.total,
            opt(r.epe_u),
            opt(r.epe_v),
            opt(r.layer_err)
        );
    }
    let summary = match (trace.records.first(), trace.records.last()) {
        (Some(first), Some(last)) => {
            let mut s = format!(
                "{} records; total energy {:.6} -> {:.6}; {} rejected half-steps",
                trace.records.len(),
                first.energy.total,
                last.energy.total,
                trace.rejected_steps()
            );
            if let (Some(a), Some(b)) = (first.epe_u, last.epe_u) {
                let _ = write!(s, "; EPE(U) {a:.4} -> {b:.4}");
            }
            if let (Some(a), Some(b)) = (first.epe_v, last.epe_v) {
                let _ = write!(s, "; EPE(V) {a:.4} -> {b:.4}");
            }
            if let (Some(a), Some(b)) = (first.layer_err, last.layer_err) {
                let _ = write!(s, "; layer error {a:.4} -> {b:.4}");
            }
            s
        }
        _ => "empty trace".to_string(),
    };
    ConvergenceReport { csv, summary }
}
