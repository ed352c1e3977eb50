//! CSV files with header `x0,…,x{d−1}[,label]`.

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Shortest representation that parses back to the same bits.
pub fn format_f64(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Loads features and, when present, a trailing `label` column. A missing
/// label column is an error when `require_label` is set.
pub fn load_csv(path: &Path, require_label: bool) -> Result<(Tensor, Option<Vec<usize>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(parse_err(path, 1, "empty file: missing header"));
    }
    let has_label = header.iter().next_back() == Some("label");
    let d = header.len() - usize::from(has_label);
    for (i, name) in header.iter().take(d).enumerate() {
        if name != format!("x{i}") {
            return Err(parse_err(path, 1, format!("column {i} is `{name}`, expected `x{i}`")));
        }
    }
    if d == 0 {
        return Err(parse_err(path, 1, "no feature columns"));
    }
    if require_label && !has_label {
        return Err(parse_err(path, 1, "missing `label` column"));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for (i, field) in record.iter().take(d).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("column x{i}: `{field}` is not a number")))?;
            data.push(v);
        }
        if has_label {
            let field = &record[d];
            let y: usize = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("label `{field}` is not a class index")))?;
            labels.push(y);
        }
    }
    if data.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    let rows = data.len() / d;
    Ok((Tensor::new(vec![rows, d], data)?, has_label.then_some(labels)))
}

pub fn save_csv(path: &Path, x: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    if let Some(y) = labels {
        if y.len() != x.rows() {
            return Err(Error::dim("save_csv", format!("{} rows, {} labels", x.rows(), y.len())));
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    let mut header: Vec<String> = (0..x.cols()).map(|i| format!("x{i}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    let csv_err = |e: csv::Error| Error::Serde(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..x.rows() {
        let mut row: Vec<String> = x.row(i).iter().map(|&v| format_f64(v)).collect();
        if let Some(y) = labels {
            row.push(y[i].to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{RngStream, StreamLabel};

    #[test]
    fn roundtrip_is_bit_faithful() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let mut x = RngStream::new(1, StreamLabel::new("csv")).gaussian(&[30, 3]);
        x.data_mut()[0] = 1e-300;
        x.data_mut()[1] = -3.5e20;
        x.data_mut()[2] = 0.1 + 0.2;
        let y: Vec<usize> = (0..30).map(|i| i % 4).collect();
        save_csv(&p, &x, Some(&y)).unwrap();
        let (lx, ly) = load_csv(&p, true).unwrap();
        assert_eq!(ly.unwrap(), y);
        for (a, b) in lx.data().iter().zip(x.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "x0,x1,label\n1,2,0\n3,oops,1\n").unwrap();
        match load_csv(&p, true) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "x0,x1,label\n1,2,0\n3,4\n").unwrap();
        assert!(matches!(load_csv(&p, true), Err(Error::Parse { line: 3, .. })));
        std::fs::write(&p, "x0,x1\n1,2\n").unwrap();
        assert!(load_csv(&p, true).is_err());
        let (x, y) = load_csv(&p, false).unwrap();
        assert_eq!((x.rows(), y), (1, None));
        std::fs::write(&p, "").unwrap();
        assert!(load_csv(&p, false).is_err());
        std::fs::write(&p, "x0,x1\n").unwrap();
        assert!(load_csv(&p, false).is_err());
    }
}
