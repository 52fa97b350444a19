//! Closed-form FLOPs and parameter counts.
//!
//! One multiply-accumulate counts as one FLOP. Batch norm, ReLU and pooling
//! count as zero FLOPs; batch-norm scale and shift count as parameters.
//!
//! Three conventions exist for the temporally-adaptive convolution:
//!
//! - `Table1`: the compact formulas, where the global descriptor layer adds
//!   `Ci * Ci/r` FLOPs but no parameters,
//! - `AppendixB`: as `Table1` plus `Ci * Ci/r` parameters for that layer,
//! - `Executable`: what the executable layer actually holds, including the
//!   `Ci -> Ci` global layer, the generator batch norm and the second
//!   aggregation batch norm. Parameter totals under this convention equal
//!   the trainable scalar count of a built network.

use std::fmt;
use std::str::FromStr;

use crate::blocks::{ConvKind, NetSpec, MIDDLE_K, TEMPORAL_TAPS};
use crate::error::{query_err, Result};
use crate::tada::{CalibrationSource, GeneratorForm, TAdaConvConfig};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Spatial,
    Temporal,
    Shift,
    TwoPlusOneD,
    ThreeD,
    /// Cost only; no executable kernel.
    Correlation,
    TadaConv,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::Spatial,
        OpKind::Temporal,
        OpKind::Shift,
        OpKind::TwoPlusOneD,
        OpKind::ThreeD,
        OpKind::Correlation,
        OpKind::TadaConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Spatial => "spatial",
            OpKind::Temporal => "temporal",
            OpKind::Shift => "shift",
            OpKind::TwoPlusOneD => "2plus1d",
            OpKind::ThreeD => "3d",
            OpKind::Correlation => "correlation",
            OpKind::TadaConv => "tadaconv",
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown op kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Convention {
    #[default]
    Table1,
    AppendixB,
    Executable,
}

impl Convention {
    pub fn name(self) -> &'static str {
        match self {
            Convention::Table1 => "table1",
            Convention::AppendixB => "appendixB",
            Convention::Executable => "executable",
        }
    }
}

impl FromStr for Convention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Convention::Table1, Convention::AppendixB, Convention::Executable]
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown convention {s:?}")))
    }
}

/// A single-operator cost query. `k` is the kernel extent; `kt`, when given,
/// replaces `k` as the temporal extent of temporal, (2+1)D and 3D kernels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpCostQuery {
    pub kind: OpKind,
    pub ci: usize,
    pub co: usize,
    pub k: Option<usize>,
    pub kt: Option<usize>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub r: Option<usize>,
    pub convention: Convention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cost {
    pub flops: u64,
    pub params: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost { flops: self.flops + o.flops, params: self.params + o.params }
    }
}

fn need(field: Option<usize>, name: &str, kind: OpKind) -> Result<u64> {
    match field {
        Some(0) => Err(query_err!("{name} must be >= 1 for {}", kind.name())),
        Some(v) => Ok(v as u64),
        None => Err(query_err!("{} cost needs {name}", kind.name())),
    }
}

/// Geometry of one calibrated convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TadaGeometry {
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub t: usize,
    /// Input frame size, seen by the descriptor pooling.
    pub h_in: usize,
    pub w_in: usize,
    /// Output frame size, seen by the convolution.
    pub h_out: usize,
    pub w_out: usize,
}

/// Cost of a calibrated convolution, generator included.
pub fn tada_cost(g: &TadaGeometry, cfg: &TAdaConvConfig, convention: Convention) -> Cost {
    let (ci, co, k, t) = (g.ci as u64, g.co as u64, g.k as u64, g.t as u64);
    let hw_in = (g.h_in * g.w_in) as u64;
    let conv = Cost { flops: co * ci * k * k * t * (g.h_out * g.w_out) as u64, params: co * ci * k * k };
    match convention {
        Convention::Table1 | Convention::AppendixB => {
            let hidden = ci / cfg.reduction_ratio as u64;
            let flops = conv.flops + ci * (t * hw_in + t) + ci * hidden * (2 * k * t + 1) + co * ci * k * k * t;
            let mut params = conv.params + 2 * ci * hidden * k;
            if convention == Convention::AppendixB {
                params += ci * hidden;
            }
            Cost { flops, params }
        }
        Convention::Executable => {
            let len = cfg.calibration_dim.len(g.ci, g.co, g.k) as u64;
            let steps = if cfg.mode.temporally_varying { t } else { 1 };
            let calibrate = co * ci * k * k * steps;
            match cfg.mode.source {
                CalibrationSource::None => conv,
                CalibrationSource::Learnable => Cost { flops: conv.flops + calibrate, params: conv.params + len * steps },
                CalibrationSource::Dynamic => {
                    let mut extra = Cost { flops: ci * t * hw_in + calibrate, params: 0 };
                    if cfg.use_global {
                        let pool = if cfg.mode.temporally_varying { ci * t } else { 0 };
                        extra = extra + Cost { flops: pool + ci * ci, params: ci * ci };
                    }
                    let (k1, k2) = (cfg.k1 as u64, cfg.k2 as u64);
                    extra = extra
                        + match cfg.generator {
                            GeneratorForm::Linear => Cost { flops: ci * len * k1 * steps, params: ci * len * k1 },
                            GeneratorForm::NonLinear => {
                                let h = ci / cfg.reduction_ratio as u64;
                                Cost {
                                    flops: (ci * h * k1 + h * len * k2) * steps,
                                    params: ci * h * k1 + 2 * h + h * len * k2,
                                }
                            }
                        };
                    conv + extra
                }
            }
        }
    }
}

/// Closed-form cost of one operator.
pub fn op_cost(q: &OpCostQuery) -> Result<Cost> {
    let kind = q.kind;
    let ci = need(Some(q.ci), "ci", kind)?;
    let t = need(Some(q.t), "t", kind)?;
    let hw = need(Some(q.h), "h", kind)? * need(Some(q.w), "w", kind)?;
    let k = need(q.k, "k", kind)?;
    let kt = match q.kt {
        Some(_) => need(q.kt, "kt", kind)?,
        None => k,
    };
    if kind == OpKind::Correlation {
        return Ok(Cost { flops: ci * k * k * t * hw, params: ci * t * k * k });
    }
    let co = need(Some(q.co), "co", kind)?;
    let per_position = match kind {
        OpKind::Spatial | OpKind::Shift => co * ci * k * k,
        OpKind::Temporal => co * ci * kt,
        OpKind::TwoPlusOneD => co * ci * (k * k + kt),
        OpKind::ThreeD => co * ci * k * k * kt,
        OpKind::TadaConv => {
            let r = need(q.r, "r", kind)? as usize;
            if q.ci < r {
                return Err(query_err!("tadaconv needs ci >= r, got ci={} r={}", q.ci, r));
            }
            let cfg = TAdaConvConfig { reduction_ratio: r, ..Default::default() };
            let g = TadaGeometry { ci: q.ci, co: q.co, k: k as usize, t: q.t, h_in: q.h, w_in: q.w, h_out: q.h, w_out: q.w };
            return Ok(tada_cost(&g, &cfg, q.convention));
        }
        OpKind::Correlation => unreachable!(),
    };
    Ok(Cost { flops: per_position * t * hw, params: per_position })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub layer: String,
    pub kind: String,
    pub ci: usize,
    pub co: usize,
    /// Output geometry.
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowDelta {
    pub layer: String,
    pub flops: i128,
    pub params: i128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostDelta {
    pub baseline: String,
    pub flops: i128,
    pub params: i128,
    pub flops_pct: f64,
    pub params_pct: f64,
    /// Per-layer differences for layers whose cost differs, matched by name.
    pub rows: Vec<RowDelta>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub name: String,
    pub convention: Convention,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total(&self) -> Cost {
        self.rows.iter().fold(Cost::default(), |acc, r| acc + Cost { flops: r.flops, params: r.params })
    }

    pub fn delta(&self, baseline: &CostReport) -> CostDelta {
        let (a, b) = (self.total(), baseline.total());
        let pct = |x: u64, y: u64| if y == 0 { 0.0 } else { 100.0 * (x as f64 - y as f64) / y as f64 };
        let find = |rep: &CostReport, name: &str| {
            rep.rows.iter().find(|r| r.layer == name).map_or((0, 0), |r| (r.flops as i128, r.params as i128))
        };
        let mut names: Vec<&str> = self.rows.iter().map(|r| r.layer.as_str()).collect();
        for r in &baseline.rows {
            if !names.contains(&r.layer.as_str()) {
                names.push(&r.layer);
            }
        }
        let rows = names
            .into_iter()
            .filter_map(|n| {
                let (fa, pa) = find(self, n);
                let (fb, pb) = find(baseline, n);
                (fa != fb || pa != pb).then(|| RowDelta { layer: n.to_string(), flops: fa - fb, params: pa - pb })
            })
            .collect();
        CostDelta {
            baseline: baseline.name.clone(),
            flops: a.flops as i128 - b.flops as i128,
            params: a.params as i128 - b.params as i128,
            flops_pct: pct(a.flops, b.flops),
            params_pct: pct(a.params, b.params),
            rows,
        }
    }

    /// Machine-readable rows: `layer,kind,Ci,Co,T,H,W,flops,params`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(["layer", "kind", "Ci", "Co", "T", "H", "W", "flops", "params"]).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.layer.clone(),
                r.kind.clone(),
                r.ci.to_string(),
                r.co.to_string(),
                r.t.to_string(),
                r.h.to_string(),
                r.w.to_string(),
                r.flops.to_string(),
                r.params.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

impl fmt::Display for CostReport {
    /// Aligned text table followed by totals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let header = ["layer", "kind", "Ci", "Co", "T", "H", "W", "flops", "params"];
        let cells: Vec<[String; 9]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.layer.clone(),
                    r.kind.clone(),
                    r.ci.to_string(),
                    r.co.to_string(),
                    r.t.to_string(),
                    r.h.to_string(),
                    r.w.to_string(),
                    r.flops.to_string(),
                    r.params.to_string(),
                ]
            })
            .collect();
        let mut width = header.map(str::len);
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |f: &mut fmt::Formatter<'_>, row: &[String]| -> fmt::Result {
            for (i, c) in row.iter().enumerate() {
                if i < 2 {
                    write!(f, "{:<w$}  ", c, w = width[i])?;
                } else {
                    write!(f, "{:>w$}  ", c, w = width[i])?;
                }
            }
            writeln!(f)
        };
        writeln!(f, "{} ({} convention)", self.name, self.convention.name())?;
        line(f, &header.map(String::from))?;
        for row in &cells {
            line(f, row)?;
        }
        let t = self.total();
        writeln!(f, "total: {} FLOPs ({:.4} G), {} params ({:.2} M)", t.flops, t.flops as f64 / 1e9, t.params, t.params as f64 / 1e6)
    }
}

impl fmt::Display for CostDelta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "delta vs {}: {:+} FLOPs ({:+.2}%), {:+} params ({:+.2}%)",
            self.baseline, self.flops, self.flops_pct, self.params, self.params_pct
        )?;
        for r in &self.rows {
            writeln!(f, "  {}: {:+} FLOPs, {:+} params", r.layer, r.flops, r.params)?;
        }
        Ok(())
    }
}

struct Walker {
    rows: Vec<CostRow>,
}

impl Walker {
    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, layer: String, kind: &str, ci: usize, co: usize, out: [usize; 3], cost: Cost) {
        self.rows.push(CostRow {
            layer,
            kind: kind.to_string(),
            ci,
            co,
            t: out[0],
            h: out[1],
            w: out[2],
            flops: cost.flops,
            params: cost.params,
        });
    }

    /// Dense convolution with kernel `[kt, k, k]` evaluated at `out`.
    fn conv(&mut self, layer: String, kind: &str, ci: usize, co: usize, kernel: [usize; 3], out: [usize; 3]) {
        let per = (co * ci * kernel.iter().product::<usize>()) as u64;
        let positions = out.iter().product::<usize>() as u64;
        self.push(layer, kind, ci, co, out, Cost { flops: per * positions, params: per });
    }

    fn bn(&mut self, layer: String, c: usize, out: [usize; 3]) {
        self.push(layer, "bn", c, c, out, Cost { flops: 0, params: 2 * c as u64 });
    }
}

/// Walks stem, every block convolution, projection and the head.
pub fn net_cost(spec: &NetSpec, convention: Convention) -> Result<CostReport> {
    let plan = spec.plan()?;
    let mut w = Walker { rows: Vec::new() };
    let st = &spec.stem;
    w.conv("stem.conv".into(), "stem", spec.in_channels, st.width, [st.kt, st.k, st.k], plan.stem_output);
    w.bn("stem.bn".into(), st.width, plan.stem_output);
    for b in &plan.blocks {
        let s = &b.spec;
        let n = &b.name;
        let (input, output) = (b.input, b.output);
        let mid_in = input;
        w.conv(format!("{n}.conv_a"), "conv1x1", s.c_in, s.mid, [1, 1, 1], mid_in);
        w.bn(format!("{n}.bn_a"), s.mid, mid_in);
        match s.conv_kind {
            ConvKind::Spatial => {
                w.conv(format!("{n}.conv_b"), "spatial", s.mid, s.mid, [1, MIDDLE_K, MIDDLE_K], output);
                w.bn(format!("{n}.bn_b"), s.mid, output);
            }
            ConvKind::Tada => {
                let g = TadaGeometry {
                    ci: s.mid,
                    co: s.mid,
                    k: MIDDLE_K,
                    t: input[0],
                    h_in: input[1],
                    w_in: input[2],
                    h_out: output[1],
                    w_out: output[2],
                };
                w.push(format!("{n}.conv_b"), "tadaconv", s.mid, s.mid, output, tada_cost(&g, &s.tada, convention));
                w.bn(format!("{n}.bn_b"), s.mid, output);
                let f = s.aggregation.flags;
                if f.use_aggregation && f.separate_bn {
                    w.bn(format!("{n}.bn_b_pool"), s.mid, output);
                }
            }
            ConvKind::TemporalSpatial => {
                w.conv(format!("{n}.conv_b"), "spatial", s.mid, s.mid, [1, MIDDLE_K, MIDDLE_K], output);
                w.bn(format!("{n}.bn_b"), s.mid, output);
                w.conv(format!("{n}.conv_t"), "temporal", s.mid, s.mid, [TEMPORAL_TAPS, 1, 1], output);
                w.bn(format!("{n}.bn_t"), s.mid, output);
            }
            ConvKind::ThreeD => {
                w.conv(format!("{n}.conv_b"), "3d", s.mid, s.mid, [TEMPORAL_TAPS, MIDDLE_K, MIDDLE_K], output);
                w.bn(format!("{n}.bn_b"), s.mid, output);
            }
        }
        w.conv(format!("{n}.conv_c"), "conv1x1", s.mid, s.c_out, [1, 1, 1], output);
        w.bn(format!("{n}.bn_c"), s.c_out, output);
        if s.has_projection() {
            w.conv(format!("{n}.proj"), "conv1x1", s.c_in, s.c_out, [1, 1, 1], output);
            w.bn(format!("{n}.proj_bn"), s.c_out, output);
        }
    }
    let (c, k) = (plan.features, spec.num_classes);
    w.push(
        "head".into(),
        "linear",
        c,
        k,
        [1, 1, 1],
        Cost { flops: (c * k) as u64, params: (c * k + k) as u64 },
    );
    Ok(CostReport { name: spec.name.clone(), convention, rows: w.rows })
}
