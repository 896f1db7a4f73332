use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::backbone::Depth;
use crate::error::{Error, Result};
use crate::nn::{self, Params};

use super::arch::Architecture;

pub const COMPONENTS: [&str; 3] = ["encoder", "unet", "decoder"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComputeRow {
    pub name: String,
    pub kind: String,
    pub depth: Option<Depth>,
    pub params: u64,
    pub macs: u64,
    pub latency_ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
    pub latency_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComputeReport {
    pub label: String,
    pub input_size: (usize, usize),
    pub rows: Vec<ComputeRow>,
    pub totals: Totals,
}

/// Analytic per-block parameters and MACs.
pub fn compute_report(label: &str, arch: &Architecture) -> Result<ComputeReport> {
    let mut rows = Vec::with_capacity(arch.blocks.len());
    for b in &arch.blocks {
        rows.push(ComputeRow {
            name: b.name.clone(),
            kind: b.kind.clone(),
            depth: b.depth,
            params: b.params(),
            macs: b.macs()?,
            latency_ms: None,
        });
    }
    let totals = Totals {
        params: rows.iter().map(|r| r.params).sum(),
        macs: rows.iter().map(|r| r.macs).sum(),
        latency_ms: None,
    };
    Ok(ComputeReport {
        label: label.into(),
        input_size: arch.input_size,
        rows,
        totals,
    })
}

fn component_of(name: &str) -> &str {
    name.split('.').next().unwrap_or("")
}

impl ComputeReport {
    pub fn component(&self, component: &str) -> Totals {
        let rows = self.rows.iter().filter(|r| component_of(&r.name) == component);
        let (params, macs) = rows.fold((0, 0), |(p, m), r| (p + r.params, m + r.macs));
        Totals {
            params,
            macs,
            latency_ms: None,
        }
    }

    pub fn with_latency(mut self, latency_ms: f64) -> Self {
        self.totals.latency_ms = Some(latency_ms);
        self
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let (h, w) = self.input_size;
        let _ = writeln!(out, "{} @ {h}x{w}", self.label);
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let kind_w = self.rows.iter().map(|r| r.kind.len()).max().unwrap_or(4).max(4);
        let _ = writeln!(
            out,
            "{:<name_w$}  {:<kind_w$}  {:>5}  {:>14}  {:>18}",
            "block", "kind", "depth", "params", "MACs"
        );
        for r in &self.rows {
            let depth = r.depth.map(|d| d.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<name_w$}  {:<kind_w$}  {:>5}  {:>14}  {:>18}",
                r.name, r.kind, depth, r.params, r.macs
            );
        }
        for c in COMPONENTS {
            let t = self.component(c);
            let _ = writeln!(
                out,
                "{:<name_w$}  {:<kind_w$}  {:>5}  {:>14}  {:>18}",
                format!("[{c}]"),
                "",
                "",
                t.params,
                t.macs
            );
        }
        let _ = write!(
            out,
            "{:<name_w$}  {:<kind_w$}  {:>5}  {:>14}  {:>18}",
            "TOTAL", "", "", self.totals.params, self.totals.macs
        );
        if let Some(ms) = self.totals.latency_ms {
            let _ = write!(out, "  {ms:.2} ms");
        }
        out.push('\n');
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("report,block,kind,depth,params,macs,latency_ms\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},",
                self.label,
                r.name,
                r.kind,
                r.depth.map(|d| d.to_string()).unwrap_or_default(),
                r.params,
                r.macs
            );
        }
        let _ = writeln!(
            out,
            "{},TOTAL,,,{},{},{}",
            self.label,
            self.totals.params,
            self.totals.macs,
            self.totals.latency_ms.map(|v| format!("{v:.4}")).unwrap_or_default()
        );
        out
    }

    /// One JSON object per row, then one for the totals.
    pub fn jsonl_records(&self) -> Result<Vec<String>> {
        let mut lines = Vec::with_capacity(self.rows.len() + 1);
        for r in &self.rows {
            let mut v = serde_json::to_value(r)?;
            v["report"] = self.label.clone().into();
            lines.push(serde_json::to_string(&v)?);
        }
        let mut v = serde_json::to_value(&self.totals)?;
        v["report"] = self.label.clone().into();
        v["name"] = "TOTAL".into();
        v["input_size"] = serde_json::to_value(self.input_size)?;
        lines.push(serde_json::to_string(&v)?);
        Ok(lines)
    }
}

/// Parameter counts of a built model grouped by the architecture's block
/// names. Each tensor goes to the block whose name is its longest prefix;
/// tensors no block claims are an error.
pub fn model_block_params<P: Params + ?Sized>(model: &P, arch: &Architecture) -> Result<BTreeMap<String, u64>> {
    let mut out: BTreeMap<String, u64> = arch.blocks.iter().map(|b| (b.name.clone(), 0)).collect();
    for (name, count) in nn::param_counts_by_name(model) {
        let owner = arch
            .blocks
            .iter()
            .filter(|b| name == b.name || name.starts_with(&format!("{}.", b.name)))
            .max_by_key(|b| b.name.len())
            .ok_or_else(|| Error::InvalidArgument(format!("tensor `{name}` belongs to no described block")))?;
        *out.entry(owner.name.clone()).or_default() += count as u64;
    }
    Ok(out)
}

/// Compare analytic block counts with a built model, listing every mismatch.
pub fn cross_check<P: Params + ?Sized>(model: &P, arch: &Architecture) -> Result<()> {
    let measured = model_block_params(model, arch)?;
    let mismatches: Vec<String> = arch
        .blocks
        .iter()
        .filter_map(|b| {
            let m = measured.get(&b.name).copied().unwrap_or(0);
            (m != b.params()).then(|| format!("{}: analytic {} vs model {m}", b.name, b.params()))
        })
        .collect();
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "parameter counts disagree: {}",
            mismatches.join("; ")
        )))
    }
}

/// Median wall-clock of `trials` runs after `warmup` discarded runs.
pub fn measure_latency(trials: usize, warmup: usize, mut run: impl FnMut() -> Result<()>) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidArgument("latency needs at least one trial".into()));
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = trials / 2;
    Ok(if trials % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    })
}

/// Short description of the measuring machine.
pub fn hardware_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("cpu {} {} threads", std::env::consts::ARCH, threads)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reduction {
    pub component: String,
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
    /// Percent removed, `100 · (1 − after / before)`; 0 when `before` is 0.
    pub params_pct: f64,
    pub macs_pct: f64,
}

fn pct(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (1.0 - after as f64 / before as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompressionReport {
    pub before: ComputeReport,
    pub after: ComputeReport,
    pub reductions: Vec<Reduction>,
}

pub fn compression_report(before: ComputeReport, after: ComputeReport) -> CompressionReport {
    let mut reductions = Vec::with_capacity(4);
    let mut push = |name: &str, b: Totals, a: Totals| {
        reductions.push(Reduction {
            component: name.into(),
            params_before: b.params,
            params_after: a.params,
            macs_before: b.macs,
            macs_after: a.macs,
            params_pct: pct(b.params, a.params),
            macs_pct: pct(b.macs, a.macs),
        })
    };
    for c in COMPONENTS {
        push(c, before.component(c), after.component(c));
    }
    push("total", before.totals.clone(), after.totals.clone());
    CompressionReport {
        before,
        after,
        reductions,
    }
}

pub const REPORT_FOOTER: &str = "params include biases and normalization affine terms; MACs count \
convolutions, projections, attention score/mix products and normalization (2 per element); \
activations, softmax, bias adds and nearest upsampling are excluded";

impl CompressionReport {
    pub fn reduction(&self, component: &str) -> Option<&Reduction> {
        self.reductions.iter().find(|r| r.component == component)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8}  {:>14}  {:>14}  {:>8}  {:>18}  {:>18}  {:>8}",
            "module", "params", "params'", "red.%", "MACs", "MACs'", "red.%"
        );
        for r in &self.reductions {
            let _ = writeln!(
                out,
                "{:<8}  {:>14}  {:>14}  {:>8.2}  {:>18}  {:>18}  {:>8.2}",
                r.component, r.params_before, r.params_after, r.params_pct, r.macs_before, r.macs_after, r.macs_pct
            );
        }
        for (label, t) in [(&self.before.label, &self.before.totals), (&self.after.label, &self.after.totals)] {
            if let Some(ms) = t.latency_ms {
                let _ = writeln!(out, "latency {label}: {ms:.2} ms ({})", hardware_descriptor());
            }
        }
        let _ = writeln!(out, "note: {REPORT_FOOTER}");
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,params_before,params_after,params_pct,macs_before,macs_after,macs_pct\n");
        for r in &self.reductions {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{},{},{:.4}",
                r.component, r.params_before, r.params_after, r.params_pct, r.macs_before, r.macs_after, r.macs_pct
            );
        }
        out
    }

    pub fn jsonl_records(&self) -> Result<Vec<String>> {
        let mut lines = self.before.jsonl_records()?;
        lines.extend(self.after.jsonl_records()?);
        for r in &self.reductions {
            let mut v = serde_json::to_value(r)?;
            v["report"] = "reduction".into();
            lines.push(serde_json::to_string(&v)?);
        }
        Ok(lines)
    }
}

/// Write `header` (if any) and `records` as JSON lines.
pub fn write_jsonl(path: &Path, header: Option<&serde_json::Value>, records: &[String]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut write = |line: &str| writeln!(f, "{line}").map_err(|e| Error::io(path, e));
    if let Some(h) = header {
        write(&serde_json::to_string(h)?)?;
    }
    for r in records {
        write(r)?;
    }
    Ok(())
}
