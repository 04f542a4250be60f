//! The operations behind the command-line verbs, kept in the library so
//! every behavior is testable in-process; the binary is a thin argument
//! parser over these.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::blocks::{ModelConfig, ScaleMode};
use crate::builder::{dequantized_float_params, seeded_input, toy_encoder, zero_input};
use crate::error::{Error, Result};
use crate::kernels::WORST_CASE_SQRT_ITERS;
use crate::mac::Tile;
use crate::package::ModelPackage;
use crate::quant::QMat8;
use crate::reference::{float_encoder_forward, CalibStat, JunctionSink};
use crate::report::{compare_outputs, digest_mat, CompareReport, RunReport};
use crate::sched::{run_with_trace, schedule, CycleReport};

/// Stimulus selection for run and compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSpec {
    Zero,
    Seed(u64),
}

impl fmt::Display for InputSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputSpec::Zero => write!(f, "zero"),
            InputSpec::Seed(s) => write!(f, "seed {s}"),
        }
    }
}

/// Command-line knobs layered over a loaded configuration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub clock_ns: Option<f64>,
    pub heads_parallel: Option<usize>,
    pub scale_mode: Option<ScaleMode>,
    pub tile: Option<Tile>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ModelConfig) -> Result<()> {
        if let Some(c) = self.clock_ns {
            cfg.clock_period_ns = c;
        }
        if let Some(h) = self.heads_parallel {
            cfg.heads_parallel = h;
        }
        if let Some(m) = self.scale_mode {
            cfg.scale_mode = m;
        }
        if let Some(t) = self.tile {
            cfg.tile = Some(t);
        }
        cfg.validate()
    }
}

/// Read and validate a model configuration file (JSON).
pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: ModelConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Fit the two kernel polynomials and report them. With a package path the
/// constants are refreshed in place: the model is reloaded, refit, and
/// saved, re-deriving every stored integer constant.
pub fn cmd_fit(package: Option<&Path>) -> Result<String> {
    let fits = crate::blocks::KernelFits::compute()?;
    if let Some(dir) = package {
        let mut w = ModelPackage::load(dir)?.to_weights()?;
        w.fits = fits;
        ModelPackage::from_weights(&w)?.save(dir)?;
    }
    let mut text = serde_json::to_string_pretty(&fits)?;
    text.push('\n');
    Ok(text)
}

/// How a toy model is generated and calibrated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrateSpec {
    pub n_layers: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub stat: CalibStat,
}

fn stat_name(stat: CalibStat) -> String {
    match stat {
        CalibStat::MaxAbs => "max-abs".into(),
        CalibStat::Percentile(p) => format!("percentile {p}"),
    }
}

/// Generate a seeded toy model, calibrate its junctions on seeded samples,
/// freeze everything, and write the package.
pub fn cmd_calibrate(cfg: &ModelConfig, spec: &CalibrateSpec, out_dir: &Path) -> Result<String> {
    if spec.n_layers == 0 {
        return Err(Error::usage("a package needs at least one layer"));
    }
    let tm = toy_encoder(cfg, spec.n_layers, spec.seed, spec.n_samples, spec.stat)?;
    let pkg = ModelPackage::from_weights(&tm.weights)?;
    pkg.save(out_dir)?;
    let mut text = String::new();
    text.push_str("package written\n");
    text.push_str(&format!(
        "dims: d={} k_heads={} m={} d_ff={}\n",
        cfg.d, cfg.k_heads, cfg.m, cfg.d_ff
    ));
    text.push_str(&format!("layers: {}\n", spec.n_layers));
    text.push_str(&format!("seed: {}\n", spec.seed));
    text.push_str(&format!(
        "calibration: {} samples, statistic {}\n",
        spec.n_samples,
        stat_name(spec.stat)
    ));
    text.push_str(&format!("blobs: {}\n", pkg.blobs.len()));
    text.push_str(&format!(
        "junction dyadics: {}\n",
        pkg.manifest.dyadics.len()
    ));
    Ok(text)
}

/// Everything a run produces; the caller decides what to write where.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub report_text: String,
    pub trace_text: String,
    pub outputs: Vec<QMat8>,
}

fn load_for_run(package_dir: &Path, ov: &Overrides) -> Result<crate::blocks::EncoderWeights> {
    let mut w = ModelPackage::load(package_dir)?.to_weights()?;
    ov.apply(&mut w.config)?;
    if w.layers.is_empty() {
        return Err(Error::usage("package holds no layers to run"));
    }
    Ok(w)
}

fn make_input(
    w: &crate::blocks::EncoderWeights,
    input: InputSpec,
) -> Result<(QMat8, crate::reference::FMat)> {
    let s_in = w.layers[0].s_in;
    match input {
        InputSpec::Zero => zero_input(&w.config, s_in),
        InputSpec::Seed(seed) => seeded_input(&w.config, s_in, seed),
    }
}

fn float_mirror_output(
    w: &crate::blocks::EncoderWeights,
    xf: &crate::reference::FMat,
) -> Result<crate::reference::FMat> {
    let fp = dequantized_float_params(w)?;
    let mut nop = |_: &str, _: &[f64]| {};
    let mut sink: JunctionSink = &mut nop;
    float_encoder_forward(&fp, xf, &mut sink)
}

/// Integer inference over a packaged model with a generated stimulus:
/// returns the report, the FSM trace, and the raw outputs.
pub fn cmd_run(package_dir: &Path, input: InputSpec, ov: &Overrides) -> Result<RunArtifacts> {
    let w = load_for_run(package_dir, ov)?;
    let (x8, xf) = make_input(&w, input)?;
    let (outs, cycles, trace, sat) = run_with_trace(&x8, &w)?;
    let float_out = float_mirror_output(&w, &xf)?;
    let last = outs.last().expect("at least one layer");
    let metrics = compare_outputs(&last.dequant(), float_out.data(), w.config.d)?;
    let report = RunReport {
        input: input.to_string(),
        layer_digests: outs.iter().map(digest_mat).collect(),
        metrics,
        cycles,
        saturation: sat,
    };
    let report_text = report.to_text()?;
    Ok(RunArtifacts {
        report,
        report_text,
        trace_text: trace.to_text(),
        outputs: outs,
    })
}

/// Integer vs float comparison with both output tensors dumped in full, so
/// the metrics can be recomputed from the document alone.
pub fn cmd_compare(
    package_dir: &Path,
    input: InputSpec,
    ov: &Overrides,
) -> Result<(CompareReport, String)> {
    let w = load_for_run(package_dir, ov)?;
    let (x8, xf) = make_input(&w, input)?;
    let mut sat = crate::quant::SatCounters::default();
    let (outs, _) = crate::blocks::encoder_stack(&x8, &w, &mut sat)?;
    let float_out = float_mirror_output(&w, &xf)?;
    let int_output = outs.last().expect("at least one layer").dequant();
    let float_output = float_out.data().to_vec();
    let metrics = compare_outputs(&int_output, &float_output, w.config.d)?;
    let report = CompareReport {
        input: input.to_string(),
        rows: w.config.m,
        cols: w.config.d,
        metrics,
        int_output,
        float_output,
    };
    let text = report.to_text()?;
    Ok((report, text))
}

fn format_clock(ns: f64) -> String {
    if ns.fract() == 0.0 {
        format!("{}", ns as u64)
    } else {
        format!("{ns}")
    }
}

fn scale_mode_name(m: ScaleMode) -> &'static str {
    match m {
        ScaleMode::SqrtDhShift => "sqrt-dh-shift",
        ScaleMode::ModelDim => "model-dim",
    }
}

/// Schedule-only cycle and latency report; no weights are needed.
pub fn cmd_cycles(
    cfg: &ModelConfig,
    n_layers: usize,
    ov: &Overrides,
) -> Result<(CycleReport, String)> {
    let mut cfg = *cfg;
    ov.apply(&mut cfg)?;
    let (report, _trace) = schedule(&cfg, n_layers)?;
    let mhz = (1000.0 / cfg.clock_period_ns).round() as u64;
    let tile = match cfg.tile {
        None => "full".to_string(),
        Some(t) => format!("{}x{}", t.rows, t.cols),
    };
    let mut text = String::new();
    text.push_str("cycle report\n");
    text.push_str(&format!(
        "clock: {} ns ({mhz} MHz)\n",
        format_clock(cfg.clock_period_ns)
    ));
    text.push_str(&format!(
        "dims: d={} k_heads={} m={} d_ff={}\n",
        cfg.d, cfg.k_heads, cfg.m, cfg.d_ff
    ));
    text.push_str(&format!("layers: {n_layers}\n"));
    text.push_str(&format!("heads_parallel: {}\n", cfg.heads_parallel));
    text.push_str(&format!("tile: {tile}\n"));
    text.push_str(&format!(
        "scale_mode: {}\n",
        scale_mode_name(cfg.scale_mode)
    ));
    for (block, cycles) in &report.per_block {
        text.push_str(&format!("{block} cycles: {cycles}\n"));
    }
    text.push_str(&format!("total cycles: {}\n", report.total_cycles));
    text.push_str(&format!(
        "worst-case sqrt iterations per row: {WORST_CASE_SQRT_ITERS}\n"
    ));
    text.push_str(&format!("latency_ms: {}\n", report.latency_ms));
    Ok((report, text))
}
