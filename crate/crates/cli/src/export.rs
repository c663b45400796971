//! Field export: `x,y,re,im` CSV and 16-bit PGM of `|H|`.

use std::fmt::Write as _;

use snapddm_core::{c64, ComplexField2D};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Pgm16,
}

impl std::str::FromStr for ExportFormat {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "pgm16" => Ok(Self::Pgm16),
            other => Err(CliError::Usage(format!("unsupported export format {other:?}; expected csv or pgm16"))),
        }
    }
}

/// One `x,y,re,im` row per cell in storage order. Floats use the shortest
/// representation that parses back to the same value.
pub fn field_to_csv(h: &ComplexField2D) -> String {
    let mut s = String::from("x,y,re,im\n");
    let ny = h.ny();
    for (i, v) in h.as_slice().iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{}", i / ny, i % ny, v.re, v.im);
    }
    s
}

pub fn field_from_csv(text: &str) -> Result<ComplexField2D> {
    let bad = |m: String| CliError::Failed(format!("field CSV: {m}"));
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("line {} has {} fields", i + 1, f.len())));
        }
        let parse_u = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(format!("line {}: {e}", i + 1)));
        let parse_f = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 1)));
        rows.push((parse_u(f[0])?, parse_u(f[1])?, c64::new(parse_f(f[2])?, parse_f(f[3])?)));
    }
    let nx = rows.iter().map(|r| r.0 + 1).max().ok_or_else(|| bad("no rows".into()))?;
    let ny = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    if rows.len() != nx * ny {
        return Err(bad(format!("{} rows for a {nx}x{ny} grid", rows.len())));
    }
    let mut h = ComplexField2D::zeros(nx, ny);
    let mut seen = vec![false; nx * ny];
    for (x, y, v) in rows {
        let i = x * ny + y;
        if std::mem::replace(&mut seen[i], true) {
            return Err(bad(format!("cell ({x}, {y}) listed twice")));
        }
        h.set(x, y, v);
    }
    Ok(h)
}

/// Binary PGM (`P5`, maxval 65535, big-endian samples as netpbm requires).
/// Image rows run from `y = ny - 1` at the top down to `y = 0`; columns are
/// `x`. Pixel = `round(65535 |H| / max|H|)`; the comment line records
/// `max|H|` (zero for an all-zero field, which maps to black).
pub fn field_to_pgm16(h: &ComplexField2D) -> Vec<u8> {
    let (nx, ny) = h.shape();
    let max = h.as_slice().iter().map(|v| v.norm()).fold(0.0f64, f64::max);
    let mut out = format!("P5\n# max_abs {max:e}\n{nx} {ny}\n65535\n").into_bytes();
    for y in (0..ny).rev() {
        for x in 0..nx {
            let p = if max > 0.0 { (h.get(x, y).norm() / max * 65535.0).round() as u16 } else { 0 };
            out.extend_from_slice(&p.to_be_bytes());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_field_gives_zero_rows() {
        let csv = field_to_csv(&ComplexField2D::zeros(2, 3));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "x,y,re,im");
        assert!(lines[1..].iter().all(|l| l.ends_with(",0,0")));
        assert_eq!(lines[3], "0,2,0,0");
    }

    #[test]
    fn constant_field_gives_uniform_image() {
        let h = ComplexField2D::from_fn(4, 3, |_, _| c64::new(0.6, -0.8));
        let img = field_to_pgm16(&h);
        let header = "P5\n# max_abs 1e0\n4 3\n65535\n";
        assert_eq!(&img[..header.len()], header.as_bytes());
        let px = &img[header.len()..];
        assert_eq!(px.len(), 4 * 3 * 2);
        assert!(px.chunks(2).all(|p| p == [0xff, 0xff]));
        let z = field_to_pgm16(&ComplexField2D::zeros(2, 2));
        assert!(z.ends_with(&[0u8; 8]));
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(field_from_csv("x,y,re,im\n").is_err());
        assert!(field_from_csv("x,y,re,im\n0,0,1\n").is_err());
        assert!(field_from_csv("x,y,re,im\n0,0,1,2\n0,0,1,2\n").is_err());
        assert!(field_from_csv("x,y,re,im\n0,0,1,2\n1,1,1,2\n").is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(nx in 1usize..6, ny in 1usize..6, vals in proptest::collection::vec(-1e6f64..1e6, 72)) {
            let h = ComplexField2D::from_fn(nx, ny, |x, y| {
                let i = x * ny + y;
                c64::new(vals[2 * i] / 7.0, vals[2 * i + 1] * 1e-9)
            });
            let csv = field_to_csv(&h);
            let back = field_from_csv(&csv).unwrap();
            prop_assert_eq!(&back, &h);
            prop_assert_eq!(field_to_csv(&back), csv);
        }
    }
}
