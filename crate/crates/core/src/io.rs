//! Small writers shared by the data-producing modules.

use std::io::Write;

/// Shortest round-trip text for `v`, switching to exponent form for very
/// small or large magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) || !a.is_finite() {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

/// Write a header row and numeric rows as CSV.
pub fn write_csv<W, I, R>(w: W, header: &[&str], rows: I) -> csv::Result<()>
where
    W: Write,
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = f64>,
{
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    let mut buf: Vec<String> = Vec::with_capacity(header.len());
    for row in rows {
        buf.clear();
        buf.extend(row.into_iter().map(fmt_f64));
        out.write_record(&buf)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_rows() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &["a", "b"], [[1.0, 0.5], [2.0, -3e-20]]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "a,b\n1,0.5\n2,-3e-20\n");
    }

    #[test]
    fn formatting_round_trips() {
        for v in [0.1 + 0.2, -1e-300, 6.02e23, 1e-4, 12345.678, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
