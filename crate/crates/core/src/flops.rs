//! Training-compute accounting for full-scale image backbones.
//!
//! Per iteration, forward work is `Σ crops × batch` over the unlabeled and
//! labeled streams (backward likewise). Totals multiply by iterations and
//! epochs, and FLOPs count a backward pass as twice a forward pass.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CmsfError, Result};

/// Forward cost of one 224×224 image through a ResNet-50 backbone.
pub const RESNET50_FWD_FLOPS: f64 = 3.9e9;

/// Area ratio of a `resolution²` crop to a 224² image.
pub fn crop_factor(resolution: f64) -> f64 {
    (resolution / 224.0).powi(2)
}

/// Crop count of a multi-crop recipe with `full` 224² views and `small`
/// views at `small_res`.
pub fn multi_crop(full: f64, small: f64, small_res: f64) -> f64 {
    full + small * crop_factor(small_res)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamCost {
    pub fwd_crops: f64,
    pub bwd_crops: f64,
    pub batch: f64,
}

impl StreamCost {
    pub fn new(fwd_crops: f64, bwd_crops: f64, batch: f64) -> Self {
        Self { fwd_crops, bwd_crops, batch }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeRow {
    pub unlabeled: StreamCost,
    pub labeled: Option<StreamCost>,
    /// For recipes given as a total iteration count, the total with
    /// `epochs = 1`.
    pub iters_per_epoch: f64,
    pub epochs: f64,
    pub per_image_fwd_flops: f64,
}

impl ComputeRow {
    pub fn validate(&self) -> Result<()> {
        let streams = std::iter::once(self.unlabeled).chain(self.labeled);
        let mut values: Vec<f64> = streams.flat_map(|s| [s.fwd_crops, s.bwd_crops, s.batch]).collect();
        values.extend([self.iters_per_epoch, self.epochs]);
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CmsfError::BadConfig("compute row values must be finite and non-negative".into()));
        }
        if !(self.per_image_fwd_flops > 0.0 && self.per_image_fwd_flops.is_finite()) {
            return Err(CmsfError::BadConfig("per-image forward FLOPs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeTotals {
    pub mini_batch_fwd: f64,
    pub mini_batch_bwd: f64,
    pub total_fwd_passes: f64,
    pub total_bwd_passes: f64,
    pub total_flops: f64,
}

impl ComputeTotals {
    /// Forward plus backward images per iteration.
    pub fn mini_batch(&self) -> f64 {
        self.mini_batch_fwd + self.mini_batch_bwd
    }

    pub fn total_passes(&self) -> f64 {
        self.total_fwd_passes + self.total_bwd_passes
    }
}

pub fn compute_totals(row: &ComputeRow) -> ComputeTotals {
    let streams = std::iter::once(row.unlabeled).chain(row.labeled);
    let (fwd, bwd) = streams.fold((0.0, 0.0), |(f, b), s| (f + s.fwd_crops * s.batch, b + s.bwd_crops * s.batch));
    let iters = row.iters_per_epoch * row.epochs;
    let (total_fwd, total_bwd) = (fwd * iters, bwd * iters);
    ComputeTotals {
        mini_batch_fwd: fwd,
        mini_batch_bwd: bwd,
        total_fwd_passes: total_fwd,
        total_bwd_passes: total_bwd,
        total_flops: (total_fwd + 2.0 * total_bwd) * row.per_image_fwd_flops,
    }
}

/// Values as printed in the published comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrintedRow {
    pub mini_batch: f64,
    /// Total passes in units of 1e8.
    pub passes_e8: f64,
    /// FLOPs in units of 1e18.
    pub flops_e18: f64,
    /// Decimal places of the printed FLOPs figure.
    pub flops_decimals: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub row: ComputeRow,
    pub printed: PrintedRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowCheck {
    pub method: String,
    pub totals: ComputeTotals,
    pub passes_e8: f64,
    pub flops_e18: f64,
    pub printed: PrintedRow,
    pub passes_match: bool,
    pub flops_match: bool,
}

impl RowCheck {
    pub fn matches(&self) -> bool {
        self.passes_match && self.flops_match
    }
}

/// Allowed distance between recomputed and printed total passes (×1e8).
pub const PASSES_TOLERANCE_E8: f64 = 0.05;
const SLACK: f64 = 1e-9;

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

/// Passes must land within ±0.05e8 of the printed value. FLOPs are first
/// rounded to one decimal (the precision the narrowest printed entry implies)
/// and must then round to the printed figure at its own precision.
pub fn check_row(r: &TableRow) -> RowCheck {
    let totals = compute_totals(&r.row);
    let passes_e8 = totals.total_passes() / 1e8;
    let flops_e18 = totals.total_flops / 1e18;
    let half_unit = 0.5 * 10f64.powi(-r.printed.flops_decimals);
    RowCheck {
        method: r.method.clone(),
        totals,
        passes_e8,
        flops_e18,
        printed: r.printed,
        passes_match: (passes_e8 - r.printed.passes_e8).abs() <= PASSES_TOLERANCE_E8 + SLACK,
        flops_match: (round_to(flops_e18, 1) - r.printed.flops_e18).abs() <= half_unit + SLACK,
    }
}

/// The published per-method compute rows. Multi-crop entries printed as 3.1
/// are two full views plus six 96² views.
pub fn table9() -> Vec<TableRow> {
    let mc = multi_crop(2.0, 6.0, 96.0);
    let row = |method: &str, unl: (f64, f64, f64), lab: Option<(f64, f64, f64)>, iters: f64, epochs: f64, printed: (f64, f64, f64)| TableRow {
        method: method.to_string(),
        row: ComputeRow {
            unlabeled: StreamCost::new(unl.0, unl.1, unl.2),
            labeled: lab.map(|l| StreamCost::new(l.0, l.1, l.2)),
            iters_per_epoch: iters,
            epochs,
            per_image_fwd_flops: RESNET50_FWD_FLOPS,
        },
        printed: PrintedRow { mini_batch: printed.0, passes_e8: printed.1, flops_e18: printed.2, flops_decimals: 0 },
    };
    vec![
        row("Mean Shift", (2.0, 1.0, 256.0), None, 5004.0, 200.0, (768.0, 7.7, 4.0)),
        row("BYOL", (4.0, 2.0, 4096.0), None, 312.0, 1000.0, (24576.0, 76.7, 40.0)),
        row("SwAV", (mc, mc, 4096.0), None, 312.0, 800.0, (25395.0, 63.4, 37.0)),
        row("SimCLRv2", (2.0, 2.0, 4096.0), None, 312.0, 800.0, (16384.0, 40.9, 16.0)),
        row("UDA", (2.0, 1.0, 15360.0), Some((1.0, 1.0, 512.0)), 40000.0, 1.0, (47104.0, 18.8, 10.0)),
        row("FixMatch", (2.0, 1.0, 5120.0), Some((1.0, 1.0, 1024.0)), 250.0, 300.0, (17408.0, 13.1, 70.0)),
        row("MPL", (3.0, 2.0, 2048.0), Some((2.0, 2.0, 128.0)), 500000.0, 1.0, (10752.0, 53.8, 30.0)),
        row("PAWS (sup=6720)", (mc, mc, 4096.0), Some((1.0, 1.0, 6720.0)), 312.0, 300.0, (38835.0, 36.6, 21.0)),
        row("PAWS (sup=1680)", (mc, mc, 256.0), Some((1.0, 1.0, 1680.0)), 5004.0, 100.0, (4947.0, 24.8, 15.0)),
        row("PAWS (sup=400)", (mc, mc, 256.0), Some((1.0, 1.0, 400.0)), 5004.0, 100.0, (2387.0, 12.0, 7.0)),
        row("CMSF semi-basic", (2.0, 1.0, 256.0), None, 5004.0, 200.0, (768.0, 7.7, 4.0)),
        row("CMSF semi", (2.0, 1.0, 256.0), None, 5004.0, 200.0, (768.0, 7.7, 4.0)),
        row("CMSF semi mixed precision", (2.0, 1.0, 768.0), None, 1668.0, 200.0, (2304.0, 7.7, 4.0)),
    ]
}

pub fn check_table9() -> Vec<RowCheck> {
    table9().iter().map(check_row).collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn table9_csv() -> String {
    let mut out = String::from(
        "method,unl_fwd,unl_bwd,unl_bs,lab_fwd,lab_bwd,lab_bs,iters_per_epoch,epochs,mini_batch,total_pass_e8,flops_e18,\
         printed_mini_batch,printed_pass_e8,printed_flops_e18,pass_match,flops_match\n",
    );
    for (row, check) in table9().iter().zip(check_table9()) {
        let r = &row.row;
        let (lf, lb, lbs) = r.labeled.map_or((String::new(), String::new(), String::new()), |l| {
            (format!("{}", l.fwd_crops), format!("{}", l.bwd_crops), format!("{}", l.batch))
        });
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{},{},{},{},{},{},{:.1},{:.3},{:.3},{},{},{},{},{}",
            csv_field(&row.method),
            r.unlabeled.fwd_crops,
            r.unlabeled.bwd_crops,
            r.unlabeled.batch,
            lf,
            lb,
            lbs,
            r.iters_per_epoch,
            r.epochs,
            check.totals.mini_batch(),
            check.passes_e8,
            check.flops_e18,
            row.printed.mini_batch,
            row.printed.passes_e8,
            row.printed.flops_e18,
            check.passes_match,
            check.flops_match,
        );
    }
    out
}

/// CSV for a single row.
pub fn row_csv(row: &ComputeRow) -> String {
    let t = compute_totals(row);
    format!(
        "mini_batch_fwd,mini_batch_bwd,total_fwd_passes,total_bwd_passes,total_pass_e8,flops_e18\n{},{},{},{},{:.4},{:.4}\n",
        t.mini_batch_fwd,
        t.mini_batch_bwd,
        t.total_fwd_passes,
        t.total_bwd_passes,
        t.total_passes() / 1e8,
        t.total_flops / 1e18
    )
}
