//! CSV output.
//!
//! Floats are written with nine significant digits so files diff cleanly and
//! round-trip every 32-bit value.

use std::io::Write;

use anyhow::Result;
use serde::{Serialize, Serializer};

/// `v` rounded to nine significant digits, in its shortest decimal form.
pub fn sig9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let r: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    let a = r.abs();
    if r == 0.0 || (1e-5..1e15).contains(&a) {
        format!("{r}")
    } else {
        format!("{r:e}")
    }
}

/// `serialize_with` adapter for `f64` fields.
pub fn ser_f64<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&sig9(*v))
}

/// `serialize_with` adapter for optional `f64` fields; `None` is an empty cell.
pub fn ser_opt_f64<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_str(&sig9(*x)),
        None => s.serialize_str(""),
    }
}

/// Levels as `5x5x5x5x5`.
pub fn levels_label(levels: &[u32]) -> String {
    levels.iter().map(u32::to_string).collect::<Vec<_>>().join("x")
}

/// Writes `rows` with a header line.
pub fn write_csv<W: Write, R: Serialize>(w: W, rows: &[R]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Rows rendered to a string, for tests and byte comparisons.
pub fn csv_string<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    Ok(String::from_utf8(buf)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_digits() {
        assert_eq!(sig9(0.954499736103642), "0.954499736");
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(-2.5), "-2.5");
        assert_eq!(sig9(48.130_803_608_679_11), "48.1308036");
        assert_eq!(sig9(1.234567891234e-9), "1.23456789e-9");
        assert_eq!(sig9(f64::NAN), "nan");
        assert_eq!(sig9(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn f32_values_round_trip() {
        for v in [0.1f32, 3.4028235e38, 1.1754944e-38, 2.7182817, -0.33333334] {
            let back: f64 = sig9(f64::from(v)).parse().unwrap();
            assert_eq!(back as f32, v);
        }
    }

    #[derive(Serialize)]
    struct Row {
        name: &'static str,
        #[serde(serialize_with = "ser_f64")]
        x: f64,
        #[serde(serialize_with = "ser_opt_f64")]
        y: Option<f64>,
    }

    #[test]
    fn header_and_cells() {
        let rows = [Row { name: "a", x: 1.0 / 3.0, y: None }, Row { name: "b,c", x: 2.0, y: Some(0.5) }];
        assert_eq!(csv_string(&rows).unwrap(), "name,x,y\na,0.333333333,\n\"b,c\",2,0.5\n");
    }
}
