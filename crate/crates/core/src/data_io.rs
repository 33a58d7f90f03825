//! CSV input for semi-synthetic and observational data, CSV output for
//! reports.
//!
//! Input schema: a header with `treatment`, `y_factual` and covariates
//! `x1..xp`; `rep`, `mu0` and `mu1` where the caller needs them. Other
//! columns are ignored.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::experiments::AggregateReport;
use crate::model::{Dataset, Oracle};
use crate::sum::mean_over;

#[derive(Debug, Clone, PartialEq)]
pub struct SemiSyntheticReplication {
    pub rep: i64,
    pub dataset: Dataset,
    /// `(1/n) Σ (mu1_i - mu0_i)`.
    pub true_ate: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Row {
    rep: Option<i64>,
    d: u8,
    y: f64,
    mu: Option<(f64, f64)>,
    x: Vec<f64>,
}

struct Columns {
    rep: Option<usize>,
    treatment: usize,
    y: usize,
    mu: Option<(usize, usize)>,
    x: Vec<usize>,
}

fn find(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

fn require(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    find(headers, name).ok_or_else(|| Error::MissingColumn {
        path: path.to_path_buf(),
        column: name.to_string(),
    })
}

fn resolve_columns(
    headers: &csv::StringRecord,
    path: &Path,
    need_rep: bool,
    need_oracle: bool,
) -> Result<Columns> {
    let rep = if need_rep {
        Some(require(headers, "rep", path)?)
    } else {
        find(headers, "rep")
    };
    let treatment = require(headers, "treatment", path)?;
    let y = require(headers, "y_factual", path)?;
    let mu = if need_oracle {
        Some((
            require(headers, "mu0", path)?,
            require(headers, "mu1", path)?,
        ))
    } else {
        match (find(headers, "mu0"), find(headers, "mu1")) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        }
    };
    let mut numbered: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(c, h)| {
            let h = h.trim();
            h.strip_prefix('x')
                .and_then(|k| k.parse::<usize>().ok())
                .map(|k| (k, c))
        })
        .collect();
    numbered.sort_unstable();
    if numbered.is_empty() {
        return Err(Error::MissingColumn {
            path: path.to_path_buf(),
            column: "x1".into(),
        });
    }
    for (expected, &(k, _)) in (1..).zip(&numbered) {
        if k != expected {
            return Err(Error::MissingColumn {
                path: path.to_path_buf(),
                column: format!("x{expected}"),
            });
        }
    }
    Ok(Columns {
        rep,
        treatment,
        y,
        mu,
        x: numbered.into_iter().map(|(_, c)| c).collect(),
    })
}

fn read_rows(path: &Path, need_rep: bool, need_oracle: bool) -> Result<(Vec<Row>, usize)> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let cols = resolve_columns(&headers, path, need_rep, need_oracle)?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row_no = r + 1;
        let bad = |message: String| Error::BadRow {
            path: path.to_path_buf(),
            row: row_no,
            message,
        };
        let number = |c: usize, name: &str| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            let v: f64 = raw
                .parse()
                .map_err(|_| bad(format!("`{name}` is not a number: {raw:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(format!("`{name}` is not finite")))
            }
        };
        let d = match number(cols.treatment, "treatment")? {
            0.0 => 0,
            1.0 => 1,
            v => return Err(bad(format!("treatment must be 0 or 1, got {v}"))),
        };
        let rep = match cols.rep {
            Some(c) => {
                let v = number(c, "rep")?;
                if v.fract() != 0.0 {
                    return Err(bad(format!("rep must be an integer, got {v}")));
                }
                Some(v as i64)
            }
            None => None,
        };
        let mu = match cols.mu {
            Some((a, b)) => Some((number(a, "mu0")?, number(b, "mu1")?)),
            None => None,
        };
        let x = cols
            .x
            .iter()
            .enumerate()
            .map(|(k, &c)| number(c, &format!("x{}", k + 1)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(Row {
            rep,
            d,
            y: number(cols.y, "y_factual")?,
            mu,
            x,
        });
    }
    Ok((rows, cols.x.len()))
}

fn canonical_order(a: &Row, b: &Row) -> std::cmp::Ordering {
    a.d.cmp(&b.d)
        .then(a.y.total_cmp(&b.y))
        .then_with(|| {
            let (a0, a1) = a.mu.unwrap_or_default();
            let (b0, b1) = b.mu.unwrap_or_default();
            a0.total_cmp(&b0).then(a1.total_cmp(&b1))
        })
        .then_with(|| {
            a.x.iter()
                .zip(&b.x)
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}

fn build_dataset(mut rows: Vec<Row>, p: usize) -> Result<Dataset> {
    rows.sort_by(canonical_order);
    let n = rows.len();
    let z = DMatrix::from_fn(n, p, |i, j| rows[i].x[j]);
    let d = rows.iter().map(|r| r.d).collect();
    let y = rows.iter().map(|r| r.y).collect();
    let dataset = Dataset::new(d, z, y)?;
    if rows.iter().all(|r| r.mu.is_some()) {
        let (mu0, mu1) = rows.iter().map(|r| r.mu.unwrap_or_default()).unzip();
        dataset.with_oracle(Oracle::SemiSynthetic { mu0, mu1 })
    } else {
        Ok(dataset)
    }
}

/// Loads replications from one or more files, pooling rows that share a
/// `rep` value across files. Rows within a replication are put in a
/// canonical order, so results do not depend on file row order.
pub fn load_semisynthetic<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<SemiSyntheticReplication>> {
    if paths.is_empty() {
        return Err(Error::InvalidInput("no input files".into()));
    }
    let mut by_rep: BTreeMap<i64, Vec<Row>> = BTreeMap::new();
    let mut width = None;
    for path in paths {
        let path = path.as_ref();
        let (rows, p) = read_rows(path, true, true)?;
        if *width.get_or_insert(p) != p {
            return Err(Error::InvalidInput(format!(
                "{} has {p} covariates, earlier files have {}",
                path.display(),
                width.unwrap_or(0)
            )));
        }
        for row in rows {
            by_rep
                .entry(row.rep.unwrap_or_default())
                .or_default()
                .push(row);
        }
    }
    let p = width.unwrap_or(0);
    by_rep
        .into_iter()
        .map(|(rep, rows)| {
            let dataset = build_dataset(rows, p)?;
            let gamma = dataset.gamma_true()?;
            let n = dataset.n();
            let true_ate = mean_over((0..n).map(|i| gamma.at1[i] - gamma.at0[i]), n);
            Ok(SemiSyntheticReplication {
                rep,
                dataset,
                true_ate,
            })
        })
        .collect()
}

/// Loads one sample; `mu0`/`mu1` become the oracle when both are present.
/// With `rep` set, only rows of that replication are kept.
pub fn load_observational(path: &Path, rep: Option<i64>) -> Result<Dataset> {
    let (rows, p) = read_rows(path, rep.is_some(), false)?;
    let rows: Vec<Row> = match rep {
        Some(r) => rows.into_iter().filter(|row| row.rep == Some(r)).collect(),
        None => rows,
    };
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no rows selected",
            path.display()
        )));
    }
    build_dataset(rows, p)
}

/// Six significant digits, printed in the shortest form that parses back to
/// the rounded value.
pub fn format_sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.5e}").parse().unwrap_or(x);
    rounded.to_string()
}

pub const REPORT_HEADER: [&str; 9] = [
    "scheme",
    "loss",
    "lambda",
    "crossfit",
    "rmse_ra",
    "rmse_rw",
    "rmse_arw",
    "cov_imbalance",
    "reg_imbalance",
];

pub const REPLICATION_HEADER: [&str; 19] = [
    "rep",
    "scheme",
    "loss",
    "lambda",
    "crossfit",
    "theta0",
    "theta_ra",
    "theta_rw",
    "theta_arw",
    "err_ra",
    "err_rw",
    "err_arw",
    "cov_imbalance",
    "reg_imbalance",
    "cov_max",
    "reg_max",
    "ne",
    "noise",
    "drift",
];

fn crossfit_label(k: Option<usize>) -> String {
    k.map_or_else(|| "none".to_string(), |k| k.to_string())
}

/// `<stem>_reps.csv` next to `path`.
pub fn replication_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    path.with_file_name(format!("{stem}_reps.csv"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

fn render<F>(header: &[&str], fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let wrap = |source| Error::Csv {
        path: PathBuf::from("<memory>"),
        source,
    };
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    writer.write_record(header).map_err(wrap)?;
    fill(&mut writer).map_err(wrap)?;
    writer
        .into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv buffer: {e}")))
}

/// Writes one row per cell to `path` and the per-replication rows to
/// [`replication_path`]. Both files are replaced atomically.
pub fn write_report_csv(report: &AggregateReport, path: &Path) -> Result<()> {
    let summary = render(&REPORT_HEADER, |w| {
        for cell in &report.cells {
            let k = &cell.key;
            w.write_record([
                k.scheme.name().to_string(),
                k.loss.to_string(),
                format_sig6(k.lambda),
                crossfit_label(k.crossfit),
                format_sig6(cell.rmse_ra),
                format_sig6(cell.rmse_rw),
                format_sig6(cell.rmse_arw),
                format_sig6(cell.cov_imbalance),
                format_sig6(cell.reg_imbalance),
            ])?;
        }
        Ok(())
    })?;
    let long = render(&REPLICATION_HEADER, |w| {
        for row in &report.replications {
            let Some(cell) = report.cells.get(row.cell) else {
                continue;
            };
            let k = &cell.key;
            let r = &row.result;
            let ney = |f: fn(&crate::estimators::NeymanTerms) -> f64| {
                r.neyman
                    .as_ref()
                    .map(f)
                    .map(format_sig6)
                    .unwrap_or_default()
            };
            w.write_record([
                row.rep.to_string(),
                k.scheme.name().to_string(),
                k.loss.to_string(),
                format_sig6(k.lambda),
                crossfit_label(k.crossfit),
                format_sig6(row.theta0),
                format_sig6(r.theta_ra),
                format_sig6(r.theta_rw),
                format_sig6(r.theta_arw),
                format_sig6(r.theta_ra - row.theta0),
                format_sig6(r.theta_rw - row.theta0),
                format_sig6(r.theta_arw - row.theta0),
                format_sig6(r.imbalance.covariate_rms),
                format_sig6(r.imbalance.regressor_rms),
                format_sig6(r.imbalance.covariate_max),
                format_sig6(r.imbalance.regressor_max),
                ney(|t| t.ne),
                ney(|t| t.noise),
                ney(|t| t.drift),
            ])?;
        }
        Ok(())
    })?;
    write_atomic(path, &summary)?;
    write_atomic(&replication_path(path), &long)
}

/// One parsed row of a summary report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scheme: String,
    pub loss: String,
    pub lambda: f64,
    pub crossfit: Option<usize>,
    pub rmse_ra: f64,
    pub rmse_rw: f64,
    pub rmse_arw: f64,
    pub cov_imbalance: f64,
    pub reg_imbalance: f64,
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let idx: Vec<usize> = REPORT_HEADER
        .iter()
        .map(|name| require(&headers, name, path))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let field = |k: usize| record.get(idx[k]).unwrap_or("");
        let num = |k: usize| -> Result<f64> {
            field(k).parse().map_err(|_| Error::BadRow {
                path: path.to_path_buf(),
                row: r + 1,
                message: format!("`{}` is not a number", REPORT_HEADER[k]),
            })
        };
        let crossfit = match field(3) {
            "none" => None,
            k => Some(k.parse().map_err(|_| Error::BadRow {
                path: path.to_path_buf(),
                row: r + 1,
                message: format!("bad crossfit value {k:?}"),
            })?),
        };
        out.push(ReportRow {
            scheme: field(0).to_string(),
            loss: field(1).to_string(),
            lambda: num(2)?,
            crossfit,
            rmse_ra: num(4)?,
            rmse_rw: num(5)?,
            rmse_arw: num(6)?,
            cov_imbalance: num(7)?,
            reg_imbalance: num(8)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn two_row_true_ate() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "a.csv",
            "rep,treatment,y_factual,mu0,mu1,x1\n1,1,3.0,1,3,0.5\n1,0,1.0,1,5,-0.5\n",
        );
        let reps = load_semisynthetic(&[path]).unwrap();
        assert_eq!(reps.len(), 1);
        assert_eq!(reps[0].true_ate, 3.0);
        assert_eq!(reps[0].dataset.n(), 2);
    }

    #[test]
    fn pools_train_and_test_by_rep() {
        let dir = tempfile::tempdir().unwrap();
        let header = "rep,treatment,y_factual,y_cfactual,mu0,mu1,x1,x2\n";
        let train = write(
            dir.path(),
            "train.csv",
            &format!("{header}1,1,1,9,0,1,0.1,0.2\n2,0,2,9,0,1,0.3,0.4\n1,0,3,9,0,1,0.5,0.6\n"),
        );
        let test = write(
            dir.path(),
            "test.csv",
            &format!("{header}2,1,4,9,0,1,0.7,0.8\n1,1,5,9,0,1,0.9,1.0\n"),
        );
        let reps = load_semisynthetic(&[train, test]).unwrap();
        assert_eq!(reps.iter().map(|r| r.rep).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(reps[0].dataset.n(), 3);
        assert_eq!(reps[1].dataset.n(), 2);
        assert_eq!(reps[0].dataset.p(), 2);
    }

    #[test]
    fn row_order_within_rep_is_irrelevant() {
        let dir = tempfile::tempdir().unwrap();
        let header = "rep,treatment,y_factual,mu0,mu1,x1\n";
        let rows = [
            "1,1,1.5,0,1,0.2",
            "1,0,0.5,0,2,0.9",
            "1,1,2.5,1,1,-0.3",
            "1,0,0.1,0,0,0.0",
        ];
        let a = write(
            dir.path(),
            "a.csv",
            &format!("{header}{}\n", rows.join("\n")),
        );
        let mut rev = rows;
        rev.reverse();
        let b = write(
            dir.path(),
            "b.csv",
            &format!("{header}{}\n", rev.join("\n")),
        );
        assert_eq!(
            load_semisynthetic(&[a]).unwrap(),
            load_semisynthetic(&[b]).unwrap()
        );
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "a.csv",
            "rep,treatment,y_factual,mu0,x1\n1,1,0,0,0\n",
        );
        let err = load_semisynthetic(&[path]).unwrap_err();
        assert!(err.to_string().contains("`mu1`"), "{err}");
    }

    #[test]
    fn bad_values_carry_row_index() {
        let dir = tempfile::tempdir().unwrap();
        let header = "rep,treatment,y_factual,mu0,mu1,x1\n";
        let nan = write(
            dir.path(),
            "n.csv",
            &format!("{header}1,1,0,0,0,0\n1,0,NaN,0,0,0\n"),
        );
        let err = load_semisynthetic(&[nan]).unwrap_err();
        assert!(matches!(err, Error::BadRow { row: 2, .. }), "{err}");
        let two = write(dir.path(), "t.csv", &format!("{header}1,2,0,0,0,0\n"));
        let err = load_semisynthetic(&[two]).unwrap_err();
        assert!(
            err.to_string().contains("treatment must be 0 or 1"),
            "{err}"
        );
    }

    #[test]
    fn observational_file_without_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "o.csv",
            "treatment,y_factual,x2,x1\n1,2.0,5,6\n0,1.0,7,8\n",
        );
        let ds = load_observational(&path, None).unwrap();
        assert!(ds.oracle().is_none());
        // x1 is the first covariate whatever the column order
        assert_eq!(ds.covariates()[(0, 0)], 8.0);
        assert_eq!(ds.covariates()[(1, 1)], 5.0);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.043803449), "0.0438034");
        assert_eq!(format_sig6(1234567.0), "1234570");
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(-2.5e-7), "-0.00000025");
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_report_csv(&AggregateReport::default(), &path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            format!("{}\n", REPORT_HEADER.join(","))
        );
        assert!(replication_path(&path).ends_with("r_reps.csv"));
        assert!(read_report_csv(&path).unwrap().is_empty());
    }
}
