//! Counting evaluation: total absolute error per count band, MAE and R².
//!
//! Bands are assigned by the ground-truth count. Predictions are evaluated as
//! raw reals; [`evaluate_rounded`] gives the integer-count variant.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::dataset::CountBand;
use crate::{Error, Result};

/// One evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Residual {
    pub id: String,
    pub truth: u32,
    pub prediction: f64,
    pub abs_error: f64,
    pub band: CountBand,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub tae_low: f64,
    pub tae_medium: f64,
    pub tae_high: f64,
    pub tae_total: f64,
    pub mae: f64,
    /// `None` when every truth is identical.
    pub r2: Option<f64>,
    pub residuals: Vec<Residual>,
}

/// Per-band totals of a report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandRow {
    pub band: CountBand,
    pub images: usize,
    pub structures: u64,
    pub tae: f64,
}

impl EvalReport {
    pub fn tae(&self, band: CountBand) -> f64 {
        match band {
            CountBand::Low => self.tae_low,
            CountBand::Medium => self.tae_medium,
            CountBand::High => self.tae_high,
        }
    }

    pub fn bands(&self) -> Vec<BandRow> {
        CountBand::ALL
            .iter()
            .map(|&band| {
                let members = self.residuals.iter().filter(|r| r.band == band);
                let (images, structures) = members.fold((0, 0u64), |(n, s), r| (n + 1, s + u64::from(r.truth)));
                BandRow {
                    band,
                    images,
                    structures,
                    tae: self.tae(band),
                }
            })
            .collect()
    }

    /// Tab-separated band table: `band range images structures tae`, then a
    /// `TOTAL` row and `MAE`/`R2` rows.
    pub fn band_tsv(&self) -> String {
        let mut out = String::from("band\trange\timages\tstructures\ttae\n");
        let mut structures = 0;
        for row in self.bands() {
            structures += row.structures;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                row.band,
                row.band.range_label(),
                row.images,
                row.structures,
                row.tae
            );
        }
        let _ = writeln!(out, "TOTAL\tall\t{}\t{structures}\t{}", self.n_images, self.tae_total);
        let _ = writeln!(out, "MAE\t-\t-\t-\t{}", self.mae);
        let _ = writeln!(out, "R2\t-\t-\t-\t{}", self.r2.map_or("nan".to_string(), |r| r.to_string()));
        out
    }

    /// Tab-separated per-image table: `id truth prediction abs_error band`.
    pub fn residual_tsv(&self) -> String {
        let mut out = String::from("id\ttruth\tprediction\tabs_error\tband\n");
        for r in &self.residuals {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.id, r.truth, r.prediction, r.abs_error, r.band);
        }
        out
    }

    /// Human-readable summary: one row per band, then totals, MAE and R².
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "images evaluated: {}", self.n_images);
        let _ = writeln!(out, "{:<8} {:<16} {:>7} {:>11} {:>12}", "band", "truth range", "images", "structures", "TAE");
        let mut structures = 0;
        for row in self.bands() {
            structures += row.structures;
            let _ = writeln!(
                out,
                "{:<8} {:<16} {:>7} {:>11} {:>12.3}",
                row.band.name(),
                row.band.range_label(),
                row.images,
                row.structures,
                row.tae
            );
        }
        let _ = writeln!(out, "{:<8} {:<16} {:>7} {:>11} {:>12.3}", "TOTAL", "", self.n_images, structures, self.tae_total);
        let _ = writeln!(out, "MAE (TAE / images): {:.4}", self.mae);
        match self.r2 {
            Some(r) => {
                let _ = writeln!(out, "R2: {r:.4}");
            }
            None => {
                let _ = writeln!(out, "R2: undefined (all truths identical)");
            }
        }
        out
    }

    /// Write `<stem>.bands.tsv`, `<stem>.residuals.tsv` and `<stem>.txt`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (suffix, text) in [
            ("bands.tsv", self.band_tsv()),
            ("residuals.tsv", self.residual_tsv()),
            ("txt", self.summary()),
        ] {
            let p = dir.join(format!("{stem}.{suffix}"));
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Input row for [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub id: String,
    pub truth: u32,
    pub prediction: f64,
}

impl Scored {
    pub fn new(id: impl Into<String>, truth: u32, prediction: f64) -> Self {
        Self {
            id: id.into(),
            truth,
            prediction,
        }
    }
}

pub fn evaluate(items: &[Scored]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty prediction list".into()));
    }
    if let Some(bad) = items.iter().find(|s| !s.prediction.is_finite()) {
        return Err(Error::Domain(format!("prediction for '{}' is not finite", bad.id)));
    }
    let residuals: Vec<Residual> = items
        .iter()
        .map(|s| Residual {
            id: s.id.clone(),
            truth: s.truth,
            prediction: s.prediction,
            abs_error: (f64::from(s.truth) - s.prediction).abs(),
            band: CountBand::of(s.truth),
        })
        .collect();
    let tae_of = |band| residuals.iter().filter(|r| r.band == band).fold(0.0, |acc, r| acc + r.abs_error);
    let (tae_low, tae_medium, tae_high) = (tae_of(CountBand::Low), tae_of(CountBand::Medium), tae_of(CountBand::High));
    let tae_total = tae_low + tae_medium + tae_high;
    let n = items.len();

    let mean = items.iter().map(|s| f64::from(s.truth)).sum::<f64>() / n as f64;
    let ss_tot: f64 = items.iter().map(|s| (f64::from(s.truth) - mean).powi(2)).sum();
    let ss_res: f64 = items.iter().map(|s| (f64::from(s.truth) - s.prediction).powi(2)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);

    Ok(EvalReport {
        n_images: n,
        tae_low,
        tae_medium,
        tae_high,
        tae_total,
        mae: tae_total / n as f64,
        r2,
        residuals,
    })
}

/// [`evaluate`] on anonymous `(truth, prediction)` pairs.
pub fn evaluate_pairs(pairs: &[(u32, f64)]) -> Result<EvalReport> {
    let items: Vec<Scored> = pairs
        .iter()
        .enumerate()
        .map(|(i, &(t, p))| Scored::new(i.to_string(), t, p))
        .collect();
    evaluate(&items)
}

/// [`evaluate`] after clamping predictions to `max(0, round(p))`.
pub fn evaluate_rounded(items: &[Scored]) -> Result<EvalReport> {
    let rounded: Vec<Scored> = items
        .iter()
        .map(|s| Scored {
            prediction: if s.prediction.is_finite() { s.prediction.round().max(0.0) + 0.0 } else { s.prediction },
            ..s.clone()
        })
        .collect();
    evaluate(&rounded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_examples() {
        let r = evaluate_pairs(&[(4, 3.0), (4, 5.0)]).unwrap();
        assert_eq!(r.mae, 1.0);
        assert_eq!(r.tae_total, 2.0);
        assert_eq!(r.r2, None);
        let perfect = evaluate_pairs(&[(1, 1.0), (40, 40.0), (70, 70.0)]).unwrap();
        assert_eq!(perfect.mae, 0.0);
        assert_eq!(perfect.r2, Some(1.0));
        assert!(evaluate(&[]).is_err());
        assert!(evaluate_pairs(&[(1, f64::NAN)]).is_err());
    }

    #[test]
    fn constant_mean_predictor_has_zero_r2() {
        let truths = [3u32, 9, 14, 40, 77];
        let mean = truths.iter().map(|&t| f64::from(t)).sum::<f64>() / 5.0;
        let pairs: Vec<_> = truths.iter().map(|&t| (t, mean)).collect();
        assert!(evaluate_pairs(&pairs).unwrap().r2.unwrap().abs() < 1e-9);
    }

    #[test]
    fn low_only_report_has_empty_upper_bands() {
        let r = evaluate_pairs(&[(3, 2.0), (10, 12.5)]).unwrap();
        let bands = r.bands();
        assert_eq!((bands[1].images, bands[1].tae), (0, 0.0));
        assert_eq!((bands[2].images, bands[2].tae), (0, 0.0));
        assert!(r.band_tsv().contains("MEDIUM\t31 to 60\t0\t0\t0\n"));
    }

    #[test]
    fn bands_partition_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pairs: Vec<(u32, f64)> = (0..30).map(|_| (rng.random_range(0..90), rng.random_range(0.0..90.0))).collect();
        let r = evaluate_pairs(&pairs).unwrap();
        assert_eq!(r.bands().iter().map(|b| b.images).sum::<usize>(), 30);
        assert_eq!(r.tae_low + r.tae_medium + r.tae_high, r.tae_total);
        assert_eq!(r.mae, r.tae_total / 30.0);
        pairs.reverse();
        let back = evaluate_pairs(&pairs).unwrap();
        assert!((back.mae - r.mae).abs() < 1e-12);
    }

    #[test]
    fn rounded_report_clamps() {
        let items = [Scored::new("a", 0, -0.7), Scored::new("b", 5, 5.4)];
        let r = evaluate_rounded(&items).unwrap();
        assert_eq!(r.residuals[0].prediction, 0.0);
        assert_eq!(r.residuals[1].prediction, 5.0);
        assert_eq!(r.mae, 0.0);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = evaluate_pairs(&[(3, 2.0), (50, 45.0), (70, 71.0)]).unwrap();
        r.write(dir.path(), "eval").unwrap();
        let res = std::fs::read_to_string(dir.path().join("eval.residuals.tsv")).unwrap();
        assert_eq!(res.lines().count(), 4);
        assert!(std::fs::read_to_string(dir.path().join("eval.txt")).unwrap().contains("MAE"));
    }
}
