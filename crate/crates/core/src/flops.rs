//! Analytic floating-point operation counts.
//!
//! One multiply-accumulate counts as 2 FLOPs. Bias additions, softmax,
//! normalization layers, activations and pooling are not counted. With
//! this convention the counts for a batch of one equal twice the MACs
//! recorded by [`crate::kernels::mac_counter`] during a forward pass.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::model::{ModelConfig, NUM_STAGES};
use crate::sta::{StaBlock, StaConfig, StaGeometry};

pub const CONVENTION: &str = "mac=2flops; bias, softmax, normalization, activation and pooling excluded";

/// `2·K²·(Cin/groups)·Cout·Hout·Wout`.
pub fn flops_conv2d(cin: usize, cout: usize, kernel: usize, groups: usize, hout: usize, wout: usize) -> u64 {
    2 * (kernel * kernel * (cin / groups) * cout * hout * wout) as u64
}

/// Transposed convolution on an `h×w` input: `2·Cin·Cout·K²·h·w`.
pub fn flops_conv_transpose2d(cin: usize, cout: usize, kernel: usize, h: usize, w: usize) -> u64 {
    2 * (cin * cout * kernel * kernel * h * w) as u64
}

/// FLOPs of one attention block, split by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StaFlops {
    pub cpe: u64,
    pub association: u64,
    pub update: u64,
    pub attention: u64,
    pub projections: u64,
    pub upsample: u64,
}

impl StaFlops {
    pub fn total(&self) -> u64 {
        self.cpe + self.association + self.update + self.attention + self.projections + self.upsample
    }
}

/// Cost of an attention block on an `h×w` map: association, update and
/// upsampling `N·k·C` MACs each (`k` = window size), attention `2·m²·C`,
/// q/k/v projections `3·m·C²`, positional depthwise conv `9·C·h·w`.
pub fn flops_sta(h: usize, w: usize, cfg: &StaConfig) -> Result<StaFlops> {
    cfg.validate()?;
    let geo = StaGeometry::new(h, w, cfg.token_size.0, cfg.token_size.1)?;
    let (n, m, k, c) = (geo.num_tokens() as u64, geo.num_super_tokens() as u64, geo.window_len() as u64, cfg.channels as u64);
    let rounds = cfg.iterations as u64;
    Ok(StaFlops {
        cpe: flops_conv2d(cfg.channels, cfg.channels, 3, cfg.channels, h, w),
        association: 2 * n * k * c * rounds,
        update: 2 * n * k * c * rounds,
        attention: 2 * 2 * m * m * c,
        projections: 2 * 3 * m * c * c,
        upsample: 2 * n * k * c,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsRow {
    pub name: String,
    pub kind: &'static str,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub rows: Vec<FlopsRow>,
    pub total: u64,
    pub convention: &'static str,
}

impl FlopsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,kind,flops,params\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.name, r.kind, r.flops, r.params);
        }
        let params: u64 = self.rows.iter().map(|r| r.params).sum();
        let _ = writeln!(s, "total,all,{},{params}", self.total);
        s
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = format!("{:<width$}  {:<16}  {:>16}  {:>12}\n", "layer", "kind", "FLOPs", "params");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:<16}  {:>16}  {:>12}", r.name, r.kind, r.flops, r.params);
        }
        let params: u64 = self.rows.iter().map(|r| r.params).sum();
        let _ = writeln!(s, "{:<width$}  {:<16}  {:>16}  {:>12}", "total", "", self.total, params);
        let _ = writeln!(s, "({})", self.convention);
        s
    }
}

/// Per-layer FLOPs for one input image.
pub fn flops_model(cfg: &ModelConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let (h0, w0) = cfg.input_extent;
    let mut rows = Vec::new();
    let conv = |rows: &mut Vec<FlopsRow>, name: String, cin: usize, cout: usize, k: usize, h: usize, w: usize| {
        rows.push(FlopsRow {
            name,
            kind: "conv2d",
            flops: flops_conv2d(cin, cout, k, 1, h, w),
            params: (k * k * cin * cout + cout) as u64,
        });
    };
    let sta_rows = |rows: &mut Vec<FlopsRow>, prefix: &str, layers: usize, cfg: StaConfig, h: usize, w: usize| -> Result<()> {
        let f = flops_sta(h, w, &cfg)?;
        for i in 0..layers {
            rows.push(FlopsRow {
                name: format!("{prefix}.sta{i}"),
                kind: "sta_block",
                flops: f.total(),
                params: StaBlock::parameter_count(cfg.channels) as u64,
            });
        }
        Ok(())
    };

    let mut cin = cfg.input_channels;
    for s in &cfg.stages {
        let k = s.stage_index;
        let (h, w) = (h0 >> (k - 1), w0 >> (k - 1));
        conv(&mut rows, format!("encoder{k}.conv1"), cin, s.channels, 3, h, w);
        conv(&mut rows, format!("encoder{k}.conv2"), s.channels, s.channels, 3, h, w);
        let sta = StaConfig::new(s.channels, s.token_size, s.heads);
        sta_rows(&mut rows, &format!("encoder{k}"), s.num_sta_layers, sta, h / 2, w / 2)?;
        cin = s.channels;
    }
    let (hb, wb) = (h0 >> NUM_STAGES, w0 >> NUM_STAGES);
    conv(&mut rows, "bottleneck.conv1".into(), cin, cin, 3, hb, wb);
    conv(&mut rows, "bottleneck.conv2".into(), cin, cin, 3, hb, wb);
    for s in cfg.stages.iter().rev() {
        let k = s.stage_index;
        let (h, w) = (h0 >> k, w0 >> k);
        rows.push(FlopsRow {
            name: format!("decoder{k}.up"),
            kind: "conv_transpose2d",
            flops: flops_conv_transpose2d(cin, s.channels, 2, h, w),
            params: (4 * cin * s.channels + s.channels) as u64,
        });
        conv(&mut rows, format!("decoder{k}.fuse"), 2 * s.channels, s.channels, 3, 2 * h, 2 * w);
        let sta = StaConfig::new(s.channels, s.token_size, s.heads);
        sta_rows(&mut rows, &format!("decoder{k}"), s.num_sta_layers, sta, 2 * h, 2 * w)?;
        cin = s.channels;
    }
    conv(&mut rows, "head".into(), cfg.base_channels, cfg.num_classes, 1, h0, w0);
    let total = rows.iter().map(|r| r.flops).sum();
    Ok(FlopsReport {
        rows,
        total,
        convention: CONVENTION,
    })
}
