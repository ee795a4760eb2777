//! Threshold-free evaluation: ROC AUC, average precision, and per-category
//! tables.
//!
//! Orientation: a higher detection score means "more likely real". AUC is
//! the probability that a random real item outscores a random fake one
//! (ties count one half). AP treats fake as the positive class, ranking
//! items by ascending score; equal scores keep their input order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// `1` for real, `0` for fake.
    pub fn from_flag(flag: u8) -> Result<Label> {
        match flag {
            1 => Ok(Label::Real),
            0 => Ok(Label::Fake),
            other => Err(Error::config("label", format!("expected 0 (fake) or 1 (real), got {other}"))),
        }
    }

    pub fn flag(self) -> u8 {
        match self {
            Label::Real => 1,
            Label::Fake => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
    pub category: Option<String>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!("{} scores but {} labels", scores.len(), labels.len())));
        }
        if let Some(k) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::InsufficientData(format!("score {k} is not finite")));
        }
        Ok(LabeledScores {
            scores,
            labels,
            category: None,
        })
    }

    pub fn from_groups(real: &[f64], fake: &[f64]) -> Result<Self> {
        let scores = real.iter().chain(fake).copied().collect();
        let labels = std::iter::repeat_n(Label::Real, real.len())
            .chain(std::iter::repeat_n(Label::Fake, fake.len()))
            .collect();
        Self::new(scores, labels)
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    fn check_both_classes(&self) -> Result<(usize, usize)> {
        let (r, f) = (self.count(Label::Real), self.count(Label::Fake));
        if r == 0 || f == 0 {
            return Err(Error::InsufficientData(format!(
                "need both classes, got {r} real and {f} fake"
            )));
        }
        Ok((r, f))
    }
}

/// Mann-Whitney AUC via mid-ranks: `O(n log n)`.
pub fn roc_auc(data: &LabeledScores) -> Result<f64> {
    let (n_real, n_fake) = data.check_both_classes()?;
    let mut order: Vec<usize> = (0..data.scores.len()).collect();
    order.sort_by(|&a, &b| data.scores[a].total_cmp(&data.scores[b]));
    let mut real_rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && data.scores[order[end]] == data.scores[order[k]] {
            end += 1;
        }
        // 1-based ranks k+1..=end share their mean
        let mid = (k + 1 + end) as f64 / 2.0;
        let reals = order[k..end].iter().filter(|&&i| data.labels[i] == Label::Real).count();
        real_rank_sum += mid * reals as f64;
        k = end;
    }
    let (r, f) = (n_real as f64, n_fake as f64);
    Ok((real_rank_sum - r * (r + 1.0) / 2.0) / (r * f))
}

/// Step-wise AP with fake as the positive class, ranked by ascending score.
pub fn average_precision(data: &LabeledScores) -> Result<f64> {
    let (_, n_fake) = data.check_both_classes()?;
    let mut order: Vec<usize> = (0..data.scores.len()).collect();
    // stable sort keeps input order among ties
    order.sort_by(|&a, &b| data.scores[a].total_cmp(&data.scores[b]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if data.labels[i] == Label::Fake {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / n_fake as f64)
}

/// One row of a score CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub path: String,
    pub category: String,
    /// 1 real, 0 fake.
    pub label: u8,
    pub score_intra: f64,
    pub score_cross: f64,
    pub score_combined: f64,
}

pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let rows = reader.deserialize().collect::<std::result::Result<Vec<ScoreRow>, _>>().map_err(csv_err)?;
    for r in &rows {
        Label::from_flag(r.label)?;
    }
    Ok(rows)
}

pub fn write_score_csv(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    /// The category's file could not be read.
    Absent,
    /// Only one class present; metrics undefined.
    SingleClass,
}

/// AP and AUC, in percent, for each score column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricPair {
    pub ap: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryRow {
    pub category: String,
    pub status: RowStatus,
    pub n_real: usize,
    pub n_fake: usize,
    pub intra: Option<MetricPair>,
    pub cross: Option<MetricPair>,
    pub combined: Option<MetricPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalTable {
    pub rows: Vec<CategoryRow>,
    /// Mean over fake-video categories (names not starting with `RV`).
    pub avg_fv: Option<CategoryRow>,
}

fn pair(real: &[f64], fake: &[f64]) -> Result<MetricPair> {
    let d = LabeledScores::from_groups(real, fake)?;
    Ok(MetricPair {
        ap: 100.0 * average_precision(&d)?,
        auc: 100.0 * roc_auc(&d)?,
    })
}

fn rows_for_file(rows: &[ScoreRow], fallback: &str) -> Result<Vec<CategoryRow>> {
    let real: Vec<&ScoreRow> = rows.iter().filter(|r| r.label == 1).collect();
    let mut fakes: BTreeMap<&str, Vec<&ScoreRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.label == 0) {
        fakes.entry(r.category.as_str()).or_default().push(r);
    }
    if fakes.is_empty() || real.is_empty() {
        log::warn!("{fallback}: only one class present; metrics skipped");
        return Ok(vec![CategoryRow {
            category: fakes.keys().next().map_or(fallback.to_string(), |c| c.to_string()),
            status: RowStatus::SingleClass,
            n_real: real.len(),
            n_fake: fakes.values().map(Vec::len).sum(),
            intra: None,
            cross: None,
            combined: None,
        }]);
    }
    let col = |rs: &[&ScoreRow], f: fn(&ScoreRow) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
    fakes
        .into_iter()
        .map(|(cat, fk)| {
            Ok(CategoryRow {
                category: cat.to_string(),
                status: RowStatus::Ok,
                n_real: real.len(),
                n_fake: fk.len(),
                intra: Some(pair(&col(&real, |r| r.score_intra), &col(&fk, |r| r.score_intra))?),
                cross: Some(pair(&col(&real, |r| r.score_cross), &col(&fk, |r| r.score_cross))?),
                combined: Some(pair(&col(&real, |r| r.score_combined), &col(&fk, |r| r.score_combined))?),
            })
        })
        .collect()
}

fn mean_pair(pairs: &[MetricPair]) -> Option<MetricPair> {
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    Some(MetricPair {
        ap: pairs.iter().map(|p| p.ap).sum::<f64>() / n,
        auc: pairs.iter().map(|p| p.auc).sum::<f64>() / n,
    })
}

/// Builds the table from already-grouped rows.
pub fn table_from_rows(rows: Vec<CategoryRow>) -> EvalTable {
    let fv: Vec<&CategoryRow> = rows
        .iter()
        .filter(|r| r.status == RowStatus::Ok && !r.category.starts_with("RV"))
        .collect();
    let avg_fv = (!fv.is_empty()).then(|| {
        let pick = |f: fn(&CategoryRow) -> Option<MetricPair>| mean_pair(&fv.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
        CategoryRow {
            category: "AVG-FV".into(),
            status: RowStatus::Ok,
            n_real: fv.iter().map(|r| r.n_real).max().unwrap_or(0),
            n_fake: fv.iter().map(|r| r.n_fake).sum(),
            intra: pick(|r| r.intra),
            cross: pick(|r| r.cross),
            combined: pick(|r| r.combined),
        }
    });
    EvalTable { rows, avg_fv }
}

/// Evaluates score CSVs. Within each file, real rows are pooled and every
/// fake category gets its own row against them. Unreadable files become
/// `absent` rows.
pub fn evaluate_categories(paths: &[PathBuf]) -> Result<EvalTable> {
    if paths.is_empty() {
        return Err(Error::config("inputs", "no score CSV given"));
    }
    let mut rows = Vec::new();
    for path in paths {
        let stem = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        match read_score_csv(path) {
            Ok(file_rows) => rows.extend(rows_for_file(&file_rows, &stem)?),
            Err(e @ (Error::Csv { .. } | Error::Io { .. })) if !path.exists() => {
                log::warn!("{e}; row marked absent");
                rows.push(CategoryRow {
                    category: stem,
                    status: RowStatus::Absent,
                    n_real: 0,
                    n_fake: 0,
                    intra: None,
                    cross: None,
                    combined: None,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(table_from_rows(rows))
}

const HEADER: [&str; 10] = [
    "category", "status", "n_real", "n_fake", "ap_intra", "auc_intra", "ap_cross", "auc_cross", "ap_combined", "auc_combined",
];

fn cells(row: &CategoryRow) -> Vec<String> {
    let status = match row.status {
        RowStatus::Ok => "ok",
        RowStatus::Absent => "absent",
        RowStatus::SingleClass => "single_class",
    };
    let mut out = vec![row.category.clone(), status.into(), row.n_real.to_string(), row.n_fake.to_string()];
    for p in [row.intra, row.cross, row.combined] {
        match p {
            Some(p) => {
                out.push(format!("{:.2}", p.ap));
                out.push(format!("{:.2}", p.auc));
            }
            None => out.extend(["-".to_string(), "-".to_string()]),
        }
    }
    out
}

impl EvalTable {
    fn all_rows(&self) -> impl Iterator<Item = &CategoryRow> {
        self.rows.iter().chain(self.avg_fv.as_ref())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(HEADER).map_err(csv_err)?;
        for row in self.all_rows() {
            w.write_record(cells(row)).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Aligned text table, AP and AUC in percent.
    pub fn to_text(&self) -> String {
        let body: Vec<Vec<String>> = self.all_rows().map(cells).collect();
        let widths: Vec<usize> = (0..HEADER.len())
            .map(|c| body.iter().map(|r| r[c].len()).chain([HEADER[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::from("# score orientation: higher = real; AP positive class = fake; values in %\n");
        let line = |cols: &[String], out: &mut String| {
            for (c, v) in cols.iter().enumerate() {
                if c == 0 {
                    let _ = write!(out, "{v:<w$}", w = widths[c]);
                } else {
                    let _ = write!(out, "  {v:>w$}", w = widths[c]);
                }
            }
            out.push('\n');
        };
        line(&HEADER.map(String::from), &mut out);
        for r in &body {
            line(r, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(real: &[f64], fake: &[f64]) -> LabeledScores {
        LabeledScores::from_groups(real, fake).unwrap()
    }

    #[test]
    fn auc_fixed_cases() {
        assert_eq!(roc_auc(&ls(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
        assert_eq!(roc_auc(&ls(&[0.8, 0.3], &[0.5, 0.1])).unwrap(), 0.75);
        assert_eq!(roc_auc(&ls(&[0.4, 0.4], &[0.4, 0.4, 0.4])).unwrap(), 0.5);
    }

    #[test]
    fn ap_fixed_cases() {
        // ascending score order puts fake, real, fake, real
        let d = LabeledScores::new(
            vec![0.1, 0.2, 0.3, 0.4],
            vec![Label::Fake, Label::Real, Label::Fake, Label::Real],
        )
        .unwrap();
        assert!((average_precision(&d).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&ls(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(roc_auc(&ls(&[0.1, 0.2], &[])).is_err());
        assert!(average_precision(&ls(&[], &[0.3])).is_err());
    }

    #[test]
    fn avg_fv_skips_real_video_categories() {
        let mk = |c: &str, auc: f64| CategoryRow {
            category: c.into(),
            status: RowStatus::Ok,
            n_real: 10,
            n_fake: 10,
            intra: Some(MetricPair { ap: auc, auc }),
            cross: None,
            combined: Some(MetricPair { ap: auc, auc }),
        };
        let t = table_from_rows(vec![mk("RVFA", 10.0), mk("FVRA-WL", 90.0), mk("FVFA-FS", 70.0)]);
        let avg = t.avg_fv.clone().unwrap();
        assert!((avg.combined.unwrap().auc - 80.0).abs() < 1e-12);
        assert!(avg.cross.is_none());
        assert!(t.to_text().contains("AVG-FV"));
    }
}
