//! CSV and JSON artifacts: co-occurrence matrix, feature sets, metrics
//! reports and the relabel audit log.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::features::{ClassVocabulary, CoocMatrix, TrainingSet};
use crate::pipelines::AuditRecord;

/// Normalized co-occurrence as CSV: a header row and a leading column of
/// class names, values with six decimals.
pub fn write_cooc_csv<W: Write>(out: W, m: &CoocMatrix, vocab: &ClassVocabulary) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let names: Vec<&str> = (0..vocab.len()).map(|c| vocab.name(c).unwrap_or("")).collect();
    w.write_record(std::iter::once("").chain(names.iter().copied()))?;
    for (i, row) in m.rows().enumerate() {
        let cells = row.iter().map(|v| format!("{v:.6}"));
        w.write_record(std::iter::once(names[i].to_string()).chain(cells))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a co-occurrence CSV back as `(class names, rows)`.
pub fn read_cooc_csv<R: Read>(input: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let names: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::with_capacity(names.len());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| Error::parse(format!("cooc row {i}"), e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != names.len() {
            return Err(Error::parse(format!("cooc row {i}"), "row width differs from header"));
        }
        rows.push(row);
    }
    Ok((names, rows))
}

/// Feature CSV: `f0..f{N-1},ref_class,label`, one row per sample.
/// `ref_class` is the vocabulary index of the reference detection's label.
pub fn write_features_csv<W: Write>(out: W, set: &TrainingSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..set.feature_dim()).map(|i| format!("f{i}")).collect();
    header.push("ref_class".into());
    header.push("label".into());
    w.write_record(&header)?;
    for ((row, class), label) in set.features.outer_iter().zip(&set.ref_classes).zip(&set.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(class.to_string());
        rec.push(u8::from(*label).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features_csv<R: Read>(input: R) -> Result<TrainingSet> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let n_cols = header.len();
    if n_cols < 3 || &header[n_cols - 1] != "label" || &header[n_cols - 2] != "ref_class" {
        return Err(Error::parse("features csv", "header must end with ref_class,label"));
    }
    let dim = n_cols - 2;
    let mut data = Vec::new();
    let mut ref_classes = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |m: String| Error::parse(format!("features csv row {i}"), m);
        for v in rec.iter().take(dim) {
            data.push(v.parse::<f64>().map_err(|e| bad(e.to_string()))?);
        }
        ref_classes.push(rec[dim].parse::<usize>().map_err(|e| bad(e.to_string()))?);
        labels.push(match &rec[dim + 1] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("label must be 0 or 1, got {other:?}"))),
        });
    }
    let features = Array2::from_shape_vec((labels.len(), dim), data)
        .map_err(|e| Error::parse("features csv", e.to_string()))?;
    Ok(TrainingSet {
        features,
        ref_classes,
        labels,
    })
}

pub fn metrics_json(report: &MetricsReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn read_metrics_json(text: &str) -> Result<MetricsReport> {
    Ok(serde_json::from_str(text)?)
}

/// One JSON object per line.
pub fn write_audit_log<W: Write>(mut out: W, records: &[AuditRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_audit_log(path: impl AsRef<Path>) -> Result<Vec<AuditRecord>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("audit line {}", i + 1), e.to_string()))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::build_cooccurrence;
    use ndarray::array;
    use std::collections::BTreeMap;

    #[test]
    fn cooc_csv_layout_and_round_trip() {
        let vocab = ClassVocabulary::synthetic(2);
        let m = build_cooccurrence(vec![vec![0, 1], vec![0], vec![0, 1]], &vocab).unwrap();
        let mut buf = Vec::new();
        write_cooc_csv(&mut buf, &m, &vocab).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, ",class0,class1\nclass0,1.000000,0.666667\nclass1,1.000000,1.000000\n");
        let (names, rows) = read_cooc_csv(buf.as_slice()).unwrap();
        assert_eq!(names, vec!["class0", "class1"]);
        assert_eq!(rows[0], vec![1.0, 0.666667]);
        // second save of the loaded values is byte-identical
        let mut again = Vec::new();
        let mut w = csv::Writer::from_writer(&mut again);
        w.write_record(std::iter::once("".to_string()).chain(names.iter().cloned())).unwrap();
        for (n, r) in names.iter().zip(&rows) {
            w.write_record(std::iter::once(n.clone()).chain(r.iter().map(|v| format!("{v:.6}")))).unwrap();
        }
        drop(w);
        assert_eq!(again, buf);
    }

    #[test]
    fn features_csv_round_trip() {
        let set = TrainingSet {
            features: array![[0.0, 1.0, 0.123456789012345], [1.0, 0.0, 0.5]],
            ref_classes: vec![2, 0],
            labels: vec![true, false],
        };
        let mut buf = Vec::new();
        write_features_csv(&mut buf, &set).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("f0,f1,f2,ref_class,label\n"));
        assert_eq!(read_features_csv(buf.as_slice()).unwrap(), set);
    }

    #[test]
    fn metrics_round_trip() {
        let report = MetricsReport {
            format_version: 1,
            mode: "detector".into(),
            threshold: 0.5,
            auc: Some(0.7712345678901234),
            map50: 0.1 + 0.2,
            f1: 2.0 / 3.0,
            precision: 0.5,
            recall: 1.0,
            per_class_ap: BTreeMap::from([("dog".to_string(), 0.25)]),
            detections: 3,
        };
        let text = metrics_json(&report).unwrap();
        assert_eq!(read_metrics_json(&text).unwrap(), report);
    }
}
