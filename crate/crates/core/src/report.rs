//! Metrics serialization: CSV with locale-independent, 17-significant-
//! digit numeric fields, so runs replay bit-identically from their
//! logs.

use crate::fed::{EpochRecord, RoundRecord};
use crate::Result;
use std::path::Path;

/// 17 significant digits in scientific notation; round-trips any f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Header plus one row per evaluated round:
/// round, mode, agg, lr, l_sup, l_cons, l_teacher, l_mclip,
/// masked_frac, miou_eval, per-class IoUs, client ids (; separated).
pub fn metrics_csv(records: &[RoundRecord], classes: usize) -> String {
    let mut out = String::new();
    out.push_str("round,mode,agg,lr,l_sup,l_cons,l_teacher,l_mclip,masked_frac,miou_eval");
    for c in 0..classes {
        out.push_str(&format!(",iou_{c}"));
    }
    out.push_str(",client_ids\n");
    for r in records {
        let b = &r.breakdown;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.mode.as_str(),
            r.aggregator.as_str(),
            fmt_f64(r.lr),
            fmt_f64(b.l_sup),
            fmt_f64(b.l_cons_s1 + b.l_cons_s2),
            fmt_f64(b.l_teacher),
            fmt_f64(b.l_mclip_s1 + b.l_mclip_s2),
            fmt_f64(b.masked_pixel_fraction),
            fmt_f64(r.miou_eval),
        ));
        for c in 0..classes {
            let v = r.per_class.get(c).copied().unwrap_or(f64::NAN);
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push(',');
        let ids: Vec<String> = r.client_ids.iter().map(|i| i.to_string()).collect();
        out.push_str(&ids.join(";"));
        out.push('\n');
    }
    out
}

/// Header plus one row per pretraining epoch.
pub fn pretrain_csv(epochs: &[EpochRecord], classes: usize) -> String {
    let mut out = String::new();
    out.push_str("epoch,lr,l_sup,l_cons,l_mclip,total,masked_frac,miou_eval");
    for c in 0..classes {
        out.push_str(&format!(",iou_{c}"));
    }
    out.push('\n');
    for e in epochs {
        let b = &e.breakdown;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}",
            e.epoch,
            fmt_f64(e.lr),
            fmt_f64(b.l_sup),
            fmt_f64(b.l_cons_s1 + b.l_cons_s2),
            fmt_f64(b.l_mclip_s1 + b.l_mclip_s2),
            fmt_f64(b.total),
            fmt_f64(b.masked_pixel_fraction),
            fmt_f64(e.miou_eval),
        ));
        for c in 0..classes {
            let v = e.per_class.get(c).copied().unwrap_or(f64::NAN);
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fed::{Aggregator, TrainMode};
    use crate::loss::LossBreakdown;

    #[test]
    fn f64_formatting_round_trips() {
        for &x in &[0.5, 1.0 / 3.0, 1e-300, 123456.789, -0.0625] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
            assert!(!s.contains(','));
        }
    }

    #[test]
    fn metrics_row_count_and_shape() {
        let rec = RoundRecord {
            round: 1,
            mode: TrainMode::Unsup,
            aggregator: Aggregator::FedSwa,
            lr: 0.05,
            breakdown: LossBreakdown::default(),
            miou_eval: 0.5,
            per_class: vec![0.5, f64::NAN, 0.25],
            client_ids: vec![3, 7, 12],
        };
        let csv = metrics_csv(&[rec.clone(), rec], 3);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 3); // header + 2 rows
        assert!(lines[0].starts_with("round,mode,agg,"));
        assert!(lines[1].ends_with("3;7;12"));
        let fields = lines[1].split(',').count();
        assert_eq!(fields, 10 + 3 + 1);
    }
}
