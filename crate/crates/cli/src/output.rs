//! CSV exports. Every file has a header row; floats carry 17 significant
//! digits.

use std::fmt::Write as _;
use std::path::Path;

use function_encoder::datasets::fmt_f64;
use function_encoder::training::SpectrumReport;
use function_encoder::Matrix;

use crate::CliError;

/// `epoch,mse`; fine-tune epochs continue the numbering.
pub fn loss_csv(curve: &[f64], fine_tune: &[f64]) -> String {
    let mut s = String::from("epoch,mse\n");
    for (i, v) in curve.iter().chain(fine_tune).enumerate() {
        writeln!(s, "{},{}", i + 1, fmt_f64(*v)).unwrap();
    }
    s
}

/// `component,eigenvalue,evr,cev`, components numbered from 1.
pub fn scree_csv(report: &SpectrumReport) -> String {
    let mut s = String::from("component,eigenvalue,evr,cev\n");
    for i in 0..report.eigenvalues.len() {
        writeln!(
            s,
            "{},{},{},{}",
            i + 1,
            fmt_f64(report.eigenvalues[i]),
            fmt_f64(report.evr[i]),
            fmt_f64(report.cev[i])
        )
        .unwrap();
    }
    s
}

/// `t,true_0..,pred_0..`.
pub fn trajectory_csv(dt: f64, truth: &[Vec<f64>], predicted: &[Vec<f64>]) -> String {
    let d = truth.first().map_or(0, Vec::len);
    let mut cols = vec!["t".to_string()];
    cols.extend((0..d).map(|i| format!("true_{i}")));
    cols.extend((0..d).map(|i| format!("pred_{i}")));
    let mut s = cols.join(",") + "\n";
    for (k, (a, b)) in truth.iter().zip(predicted).enumerate() {
        s.push_str(&fmt_f64(k as f64 * dt));
        for v in a.iter().chain(b) {
            s.push(',');
            s.push_str(&fmt_f64(*v));
        }
        s.push('\n');
    }
    s
}

/// Header `x0,x1,..` then one point per row.
pub fn points_csv(points: &[Vec<f64>]) -> String {
    let k = points.first().map_or(0, Vec::len);
    let mut s = (0..k).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",") + "\n";
    for p in points {
        s.push_str(&p.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

/// Square matrix with header `c0,c1,..`.
pub fn matrix_csv(m: &Matrix) -> String {
    let mut s = (0..m.cols()).map(|i| format!("c{i}")).collect::<Vec<_>>().join(",") + "\n";
    for r in 0..m.rows() {
        s.push_str(&m.row(r).iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

/// Reads a header-plus-rows numeric CSV.
pub fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| CliError::Input(format!("{}: empty file", path.display())))?;
    let width = header.split(',').count();
    lines
        .enumerate()
        .map(|(i, line)| {
            let row: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| CliError::Input(format!("{}: row {}: {e}", path.display(), i + 1)))?;
            if row.len() != width {
                return Err(CliError::Input(format!(
                    "{}: row {} has {} fields, header has {width}",
                    path.display(),
                    i + 1,
                    row.len()
                )));
            }
            Ok(row)
        })
        .collect()
}

pub fn read_matrix(path: &Path) -> Result<Matrix, CliError> {
    let rows = read_rows(path)?;
    Matrix::from_rows(&rows).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}
