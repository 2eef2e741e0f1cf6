//! Report emission: CSV (RFC 4180, `\n` terminated) and JSON with sorted
//! keys, plus the percentile convention used in every summary.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// Linear-interpolation percentile (`q` in `[0, 100]`) of the finite values;
/// NaN when there are none.
///
/// ```
/// assert_eq!(projinf::report::percentile(&[1.0, 2.0, 3.0, 4.0], 50.0), 2.5);
/// assert_eq!(projinf::report::percentile(&[5.0], 95.0), 5.0);
/// ```
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

/// Writes serializable rows with a header derived from the field names.
pub fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a header and raw records.
pub fn write_csv_records<W: Write>(w: W, header: &[&str], records: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(header).map_err(csv_err)?;
    for r in records {
        out.write_record(&r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Pretty JSON with object keys sorted at every level, newline terminated.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's map is a BTreeMap unless `preserve_order` is enabled, so
    // routing through `Value` sorts keys.
    let v = serde_json::to_value(value).map_err(|e| Error::Format(format!("json: {e}")))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Format(format!("json: {e}")))?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        b: f64,
        a: usize,
    }

    #[test]
    fn percentile_matches_hand_computation() {
        let v = [10.0, 0.0, 30.0, 20.0, f64::NAN];
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&v, 100.0), 30.0);
        assert!((percentile(&v, 95.0) - 28.5).abs() < 1e-12);
        assert!(percentile(&[], 50.0).is_nan());
    }

    #[test]
    fn csv_uses_lf_and_field_order() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[Row { b: 0.5, a: 1 }, Row { b: 1e-7, a: 2 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "b,a\n0.5,1\n1e-7,2\n");
    }

    #[test]
    fn json_keys_sorted() {
        let s = to_json_string(&Row { b: 1.0, a: 2 }).unwrap();
        assert!(s.find("\"a\"").unwrap() < s.find("\"b\"").unwrap());
        assert!(s.ends_with("}\n"));
    }
}
