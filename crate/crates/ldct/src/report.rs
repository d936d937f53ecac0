//! Diagnostic exports: training-log parsing, per-loss convergence curves,
//! residual probability-density histograms, and the uncertainty-discrepancy
//! scatter that relates alignment quality to reconstruction metrics.

use crate::training::{EpochLog, TRAIN_LOG_HEADER};
use crate::{Error, Result};
use std::path::Path;

/// Number of bins in a residual PDF histogram.
pub const HISTOGRAM_BINS: usize = 256;
/// Residual histogram support (display units; residuals of [0, 1] images).
pub const HISTOGRAM_LO: f64 = -0.5;
/// Upper edge of the residual histogram support.
pub const HISTOGRAM_HI: f64 = 0.5;

/// Header of the loss-curve CSV: epoch plus the six loss components.
pub const LOSS_CURVE_HEADER: &str = "epoch,l1,pl,kl_enc,kl_dec,bnua,rda";
/// Header of the uncertainty-discrepancy scatter CSV.
pub const SCATTER_HEADER: &str = "run,epoch,discrepancy,psnr,ssim,gmsd,dss";

/// Parses a training log produced by the fit loop. Any structural defect is
/// rejected with its 1-based row number (the header is row 1).
pub fn parse_train_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == TRAIN_LOG_HEADER => {}
        Some((_, header)) => {
            return Err(Error::MalformedLog {
                path: path.to_path_buf(),
                row: 1,
                detail: format!("expected header `{TRAIN_LOG_HEADER}`, found `{header}`"),
            })
        }
        None => {
            return Err(Error::MalformedLog {
                path: path.to_path_buf(),
                row: 1,
                detail: "empty file".into(),
            })
        }
    }

    let n_fields = TRAIN_LOG_HEADER.split(',').count();
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let row = idx + 1; // 1-based, counting the header
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_fields {
            return Err(Error::MalformedLog {
                path: path.to_path_buf(),
                row,
                detail: format!("expected {n_fields} fields, found {}", fields.len()),
            });
        }
        let epoch = fields[0].parse::<usize>().map_err(|e| Error::MalformedLog {
            path: path.to_path_buf(),
            row,
            detail: format!("bad epoch `{}`: {e}", fields[0]),
        })?;
        let mut vals = [0.0f64; 11];
        for (k, field) in fields[1..].iter().enumerate() {
            vals[k] = field.parse::<f64>().map_err(|e| Error::MalformedLog {
                path: path.to_path_buf(),
                row,
                detail: format!("bad value `{field}`: {e}"),
            })?;
        }
        rows.push(EpochLog {
            epoch,
            l1: vals[0],
            pl: vals[1],
            kl_enc: vals[2],
            kl_dec: vals[3],
            bnua: vals[4],
            rda: vals[5],
            val_psnr: vals[6],
            val_ssim: vals[7],
            val_gmsd: vals[8],
            val_dss: vals[9],
            val_bnua_disc: vals[10],
        });
    }
    Ok(rows)
}

/// Convergence-curve CSV: one row per epoch, the six loss components as
/// columns.
pub fn loss_curves_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from(LOSS_CURVE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.l1, r.pl, r.kl_enc, r.kl_dec, r.bnua, r.rda
        ));
    }
    out
}

/// One scatter point: a checkpoint (identified by run label and epoch), its
/// source/target uncertainty discrepancy, and its validation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub run: String,
    pub epoch: usize,
    pub discrepancy: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub gmsd: f64,
    pub dss: f64,
}

/// Builds one scatter row per logged epoch (each epoch corresponds to a
/// saved checkpoint of that run).
pub fn scatter_rows(run: &str, rows: &[EpochLog]) -> Vec<ScatterRow> {
    rows.iter()
        .map(|r| ScatterRow {
            run: run.to_string(),
            epoch: r.epoch,
            discrepancy: r.val_bnua_disc,
            psnr: r.val_psnr,
            ssim: r.val_ssim,
            gmsd: r.val_gmsd,
            dss: r.val_dss,
        })
        .collect()
}

/// Uncertainty-discrepancy scatter CSV across checkpoints.
pub fn scatter_csv(rows: &[ScatterRow]) -> String {
    let mut out = String::from(SCATTER_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.run, r.epoch, r.discrepancy, r.psnr, r.ssim, r.gmsd, r.dss
        ));
    }
    out
}

/// A fixed-support histogram normalized as a probability density: the sum of
/// `density × bin_width` over all bins is exactly 1 for nonempty data.
#[derive(Debug, Clone)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArg(format!(
                "histogram needs finite lo < hi, got [{lo}, {hi}]"
            )));
        }
        if bins == 0 {
            return Err(Error::InvalidArg("histogram needs at least one bin".into()));
        }
        Ok(Histogram {
            lo,
            hi,
            counts: vec![0; bins],
            total: 0,
        })
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    /// Adds samples; values outside the support are clamped into the edge
    /// bins so no probability mass is lost.
    pub fn add(&mut self, values: impl IntoIterator<Item = f64>) -> Result<()> {
        let bins = self.counts.len();
        for v in values {
            if !v.is_finite() {
                return Err(Error::InvalidArg(format!(
                    "histogram sample must be finite, got {v}"
                )));
            }
            let idx = (((v - self.lo) / self.bin_width()).floor() as i64)
                .clamp(0, bins as i64 - 1) as usize;
            self.counts[idx] += 1;
            self.total += 1;
        }
        Ok(())
    }

    /// Bin centers.
    pub fn centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.counts.len())
            .map(|i| self.lo + (i as f64 + 0.5) * w)
            .collect()
    }

    /// Probability densities per bin (`count / (total × bin_width)`).
    pub fn densities(&self) -> Result<Vec<f64>> {
        if self.total == 0 {
            return Err(Error::InvalidArg(
                "histogram has no samples to normalize".into(),
            ));
        }
        let norm = 1.0 / (self.total as f64 * self.bin_width());
        Ok(self.counts.iter().map(|&c| c as f64 * norm).collect())
    }

    /// Density CSV with `bin_center,density` columns.
    pub fn csv(&self) -> Result<String> {
        let mut out = String::from("bin_center,density\n");
        for (c, d) in self.centers().into_iter().zip(self.densities()?) {
            out.push_str(&format!("{c},{d}\n"));
        }
        Ok(out)
    }
}

/// Residual PDF over the standard support (256 bins on [−0.5, 0.5]).
pub fn residual_histogram(residuals: &[f32]) -> Result<Histogram> {
    let mut h = Histogram::new(HISTOGRAM_LO, HISTOGRAM_HI, HISTOGRAM_BINS)?;
    h.add(residuals.iter().map(|&v| f64::from(v)))?;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TRAIN_LOG_NAME;

    fn sample_rows() -> Vec<EpochLog> {
        (0..3)
            .map(|epoch| EpochLog {
                epoch,
                l1: 0.1 / (epoch + 1) as f64,
                pl: 0.01,
                kl_enc: 2.0,
                kl_dec: 3.0,
                bnua: 1e-4,
                rda: 0.25,
                val_psnr: 20.0 + epoch as f64,
                val_ssim: 0.8,
                val_gmsd: 0.1,
                val_dss: 0.05,
                val_bnua_disc: 1e-3,
            })
            .collect()
    }

    #[test]
    fn log_roundtrip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TRAIN_LOG_NAME);
        let rows = sample_rows();
        let mut text = String::from(TRAIN_LOG_HEADER);
        text.push('\n');
        for r in &rows {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        std::fs::write(&path, &text).unwrap();
        let parsed = parse_train_log(&path).unwrap();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn malformed_logs_are_rejected_with_row_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");

        std::fs::write(&path, "epoch,l1\n").unwrap();
        match parse_train_log(&path) {
            Err(Error::MalformedLog { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected MalformedLog, got {other:?}"),
        }

        let mut text = String::from(TRAIN_LOG_HEADER);
        text.push('\n');
        text.push_str(&sample_rows()[0].csv_row());
        text.push('\n');
        text.push_str("1,0.1,oops\n");
        std::fs::write(&path, &text).unwrap();
        match parse_train_log(&path) {
            Err(Error::MalformedLog { row, detail, .. }) => {
                assert_eq!(row, 3);
                assert!(detail.contains("fields"), "{detail}");
            }
            other => panic!("expected MalformedLog, got {other:?}"),
        }

        let mut text = String::from(TRAIN_LOG_HEADER);
        text.push('\n');
        text.push_str("0,0.1,0.01,2,3,1e-4,0.25,20,0.8,0.1,abc,1e-3\n");
        std::fs::write(&path, &text).unwrap();
        match parse_train_log(&path) {
            Err(Error::MalformedLog { row, detail, .. }) => {
                assert_eq!(row, 2);
                assert!(detail.contains("abc"), "{detail}");
            }
            other => panic!("expected MalformedLog, got {other:?}"),
        }
    }

    #[test]
    fn loss_curve_csv_has_six_components() {
        let csv = loss_curves_csv(&sample_rows());
        let mut lines = csv.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header, ["epoch", "l1", "pl", "kl_enc", "kl_dec", "bnua", "rda"]);
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn scatter_has_one_row_per_checkpoint() {
        let rows = sample_rows();
        let scatter = scatter_rows("run-a", &rows);
        assert_eq!(scatter.len(), rows.len());
        let csv = scatter_csv(&scatter);
        assert_eq!(csv.lines().count(), rows.len() + 1);
        assert!(csv.starts_with(SCATTER_HEADER));
        assert_eq!(scatter[1].epoch, 1);
        assert_eq!(scatter[1].discrepancy, 1e-3);
    }

    #[test]
    fn histogram_density_integrates_to_one() {
        let mut rng_vals = Vec::new();
        let mut state = 0x9e3779b97f4a7c15u64;
        for _ in 0..10_000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            rng_vals.push((u - 0.5) as f32 * 1.4); // some values out of range
        }
        let h = residual_histogram(&rng_vals).unwrap();
        let integral: f64 = h.densities().unwrap().iter().sum::<f64>() * h.bin_width();
        assert!((integral - 1.0).abs() <= 1e-6, "integral {integral}");
        assert_eq!(h.total, 10_000, "clamping keeps all samples");
        assert_eq!(h.counts.len(), HISTOGRAM_BINS);
        let csv = h.csv().unwrap();
        assert_eq!(csv.lines().count(), HISTOGRAM_BINS + 1);
    }

    #[test]
    fn histogram_argument_errors() {
        assert!(Histogram::new(0.5, -0.5, 8).is_err());
        assert!(Histogram::new(0.0, 1.0, 0).is_err());
        let mut h = Histogram::new(0.0, 1.0, 4).unwrap();
        assert!(h.add([f64::NAN]).is_err());
        assert!(h.densities().is_err(), "empty histogram cannot normalize");
        h.add([0.1, 0.9]).unwrap();
        assert_eq!(h.counts, vec![1, 0, 0, 1]);
    }

    #[test]
    fn residuals_centered_at_zero_peak_in_middle_bins() {
        let vals: Vec<f32> = (0..2000).map(|i| ((i % 21) as f32 - 10.0) * 0.005).collect();
        let h = residual_histogram(&vals).unwrap();
        let densities = h.densities().unwrap();
        let mid = HISTOGRAM_BINS / 2;
        let edge_mass: f64 = densities[..8].iter().sum::<f64>() + densities[248..].iter().sum::<f64>();
        assert_eq!(edge_mass, 0.0);
        assert!(densities[mid - 12..mid + 12].iter().sum::<f64>() > 0.0);
    }
}
