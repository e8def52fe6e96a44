//! Reporting: weight histograms with a kernel-density column, per-layer size
//! reports, and the three-mode comparison table.

use crate::compress::Mode;
use crate::models::Model;
use crate::quant::LayerDesc;

/// One histogram row: bin center, count, Gaussian-kernel density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct HistRow {
    pub bin_center: f32,
    pub count: u64,
    pub density: f64,
}

pub const HIST_BINS: usize = 101;

/// 101-bin histogram over a symmetric range [-R, R] with R = max |value|,
/// plus a Gaussian KDE evaluated at bin centers (Silverman bandwidth).
pub fn weight_histogram(values: &[f32]) -> Vec<HistRow> {
    let n = values.len();
    let mut r = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if r == 0.0 {
        r = 1.0;
    }
    let width = 2.0 * r / HIST_BINS as f32;
    let mut counts = vec![0u64; HIST_BINS];
    for &v in values {
        let mut idx = ((v + r) / width) as usize;
        if idx >= HIST_BINS {
            idx = HIST_BINS - 1;
        }
        counts[idx] += 1;
    }

    // Silverman's rule: 0.9 * min(sd, iqr/1.34) * n^(-1/5)
    let mean = values.iter().map(|v| *v as f64).sum::<f64>() / n.max(1) as f64;
    let var = values
        .iter()
        .map(|v| (*v as f64 - mean).powi(2))
        .sum::<f64>()
        / n.max(1) as f64;
    let sd = var.sqrt();
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let q = |p: f64| -> f64 {
        if sorted.is_empty() {
            return 0.0;
        }
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let mut h = 0.9 * spread * (n.max(1) as f64).powf(-0.2);
    if h <= 0.0 {
        h = 1e-3 * r as f64;
    }

    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    (0..HIST_BINS)
        .map(|i| {
            let center = -r + (i as f32 + 0.5) * width;
            let mut dens = 0.0f64;
            for &v in values {
                let z = (center as f64 - v as f64) / h;
                dens += (-0.5 * z * z).exp();
            }
            HistRow {
                bin_center: center,
                count: counts[i],
                density: dens * norm,
            }
        })
        .collect()
}

pub fn histogram_csv(rows: &[HistRow]) -> String {
    let mut s = String::from("bin_center,count,density\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.bin_center, r.count, r.density));
    }
    s
}

/// Human-readable per-layer size report.
pub fn size_report(model: &Model, quantized: bool) -> String {
    let sm = model.size_model();
    let mut s = String::new();
    s.push_str("layer  kind       groups(live/total)  mean_bits  z_bits        bytes\n");
    for (l, desc) in sm.layers.iter().enumerate() {
        let qp = model.quant(l);
        let live = qp.live_count();
        let total = qp.groups();
        let mean_bits = if live > 0 {
            qp.bits
                .data
                .iter()
                .zip(&qp.live)
                .filter(|(_, lv)| **lv)
                .map(|(b, _)| b.max(0.0) as f64)
                .sum::<f64>()
                / live as f64
        } else {
            0.0
        };
        let z = match desc {
            LayerDesc::Conv { .. } => {
                crate::quant::layer_quantized_size(desc, &qp.bits.data, &qp.live).unwrap_or(0.0)
            }
            LayerDesc::Attention { .. } => {
                crate::quant::attention_quantized_size(desc, &qp.bits.data, &qp.live)
                    .unwrap_or(0.0)
            }
        };
        let kind = match desc {
            LayerDesc::Conv { .. } => "conv",
            LayerDesc::Attention { .. } => "attention",
        };
        let bytes: f64 = (0..total)
            .filter(|&g| qp.live[g])
            .map(|g| {
                if quantized {
                    desc.group_elems() as f64 * qp.bits.data[g].max(0.0).ceil() as f64 / 8.0 + 4.0
                } else {
                    4.0 * desc.group_elems() as f64
                }
            })
            .sum();
        s.push_str(&format!(
            "{:<6} {:<10} {:>6}/{:<12} {:>9.3} {:>12.1} {:>12.1}\n",
            l, kind, live, total, mean_bits, z, bytes
        ));
    }
    s.push_str(&format!(
        "\naverage bit depth Q: {:.1} bits\nquantized component: {:.0} bytes\nunquantized params:  {} elements ({:.0} bytes)\ntotal model bytes:   {:.0}\n",
        model.average_q(),
        model.quantized_component_bytes(quantized),
        model.unquantized_live_params(),
        4.0 * model.unquantized_live_params() as f64,
        model.report_bytes(quantized),
    ));
    s
}

/// One row of the three-mode comparison.
#[derive(Debug, Clone)]
pub struct CompareRow {
    pub mode: Mode,
    pub test_metric: f64,
    pub model_bytes: f64,
    pub bytes_ratio: f64,
}

pub fn compare_table(rows: &[CompareRow], classifier: bool) -> String {
    let metric_name = if classifier {
        "test accuracy (%)"
    } else {
        "test loss (nats)"
    };
    let mut s = format!(
        "{:<10} {:>18} {:>14} {:>12}\n",
        "mode", metric_name, "model bytes", "ratio"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:>18.3} {:>14.0} {:>12.4}\n",
            r.mode.as_str(),
            r.test_metric,
            r.model_bytes,
            r.bytes_ratio
        ));
    }
    s
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("mode,test_metric,model_bytes,bytes_ratio\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.mode.as_str(),
            r.test_metric,
            r.model_bytes,
            r.bytes_ratio
        ));
    }
    s
}
