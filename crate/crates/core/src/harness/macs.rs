//! Multiply-accumulate accounting over a static layer trace.
//!
//! Conventions: convolution `N·Cout·H'·W'·Cin·kh·kw`, linear `N·O·F`;
//! batch norm, activations, pooling and residual additions are free. The
//! optical convolution is reported separately and never counted as
//! electronic work. Totals in "MFLOPs" are electronic MACs / 1e6.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Domain {
    Electronic,
    Optical,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Conv2d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Depthwise optical convolution producing `maps` planes with a `kernel×kernel` PSF tile each.
    OpticalConv { maps: usize, kernel: usize },
    Linear { d_in: usize, d_out: usize },
    BatchNorm,
    Activation,
    Pool,
    Add,
    Reshape,
    Other(String),
}

/// One executed operation with its output shape `[N,C,H,W]` (or `[N,F]`).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOp {
    pub name: String,
    pub kind: OpKind,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacRow {
    pub name: String,
    pub op: String,
    pub domain: Domain,
    pub macs: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MacReport {
    pub rows: Vec<MacRow>,
    pub electronic: u64,
    pub optical: u64,
}

impl MacReport {
    pub fn mflops(&self) -> f64 {
        self.electronic as f64 / 1e6
    }

    /// Fractional reduction of electronic MACs relative to `baseline`.
    pub fn reduction_vs(&self, baseline: &MacReport) -> f64 {
        1.0 - self.electronic as f64 / baseline.electronic as f64
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<32} {:<12} {:<10} {:>14}\n", "layer", "op", "domain", "MACs");
        for r in &self.rows {
            s += &format!("{:<32} {:<12} {:<10} {:>14}\n", r.name, r.op, format!("{:?}", r.domain), r.macs);
        }
        s += &format!("electronic total: {} ({:.1} MFLOPs)\n", self.electronic, self.mflops());
        s += &format!("optical total: {}\n", self.optical);
        s
    }
}

fn spatial(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

pub fn op_macs(op: &LayerOp) -> Result<(Domain, u64)> {
    let n = op.output[0] as u64;
    Ok(match &op.kind {
        OpKind::Conv2d { c_in, c_out, kernel, .. } => (
            Domain::Electronic,
            n * (*c_out * spatial(&op.output) * c_in * kernel * kernel) as u64,
        ),
        OpKind::OpticalConv { maps, kernel } => {
            (Domain::Optical, n * (*maps * spatial(&op.output) * kernel * kernel) as u64)
        }
        OpKind::Linear { d_in, d_out } => (Domain::Electronic, n * (*d_in * *d_out) as u64),
        OpKind::BatchNorm | OpKind::Activation | OpKind::Pool | OpKind::Add | OpKind::Reshape => (Domain::Electronic, 0),
        OpKind::Other(_) => return Err(Error::Unsupported(op.name.clone())),
    })
}

fn op_label(kind: &OpKind) -> String {
    match kind {
        OpKind::Conv2d { kernel, .. } => format!("conv{kernel}x{kernel}"),
        OpKind::OpticalConv { kernel, .. } => format!("optical{kernel}x{kernel}"),
        OpKind::Linear { .. } => "linear".into(),
        OpKind::BatchNorm => "batchnorm".into(),
        OpKind::Activation => "activation".into(),
        OpKind::Pool => "pool".into(),
        OpKind::Add => "add".into(),
        OpKind::Reshape => "reshape".into(),
        OpKind::Other(s) => s.clone(),
    }
}

/// Counts every op of a trace. Unknown ops are all listed in the error.
pub fn count_trace(trace: &[LayerOp]) -> Result<MacReport> {
    let unsupported: Vec<String> = trace
        .iter()
        .filter_map(|op| match &op.kind {
            OpKind::Other(kind) => Some(format!("{} ({kind})", op.name)),
            _ => None,
        })
        .collect();
    if !unsupported.is_empty() {
        return Err(Error::Unsupported(format!("no MAC rule for: {}", unsupported.join(", "))));
    }
    let mut report = MacReport::default();
    for op in trace {
        let (domain, macs) = op_macs(op)?;
        match domain {
            Domain::Electronic => report.electronic += macs,
            Domain::Optical => report.optical += macs,
        }
        report.rows.push(MacRow {
            name: op.name.clone(),
            op: op_label(&op.kind),
            domain,
            macs,
        });
    }
    Ok(report)
}
