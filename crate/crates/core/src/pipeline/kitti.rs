//! KITTI object-benchmark calibration files.

use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4};

use crate::error::{Error, Result};
use crate::geom::Calibration;

const FIELDS: [(&str, usize); 3] = [("P2", 12), ("R0_rect", 9), ("Tr_velo_to_cam", 12)];

/// Parses calibration text. Only `P2`, `R0_rect` and `Tr_velo_to_cam` are
/// read; other keys are ignored. `path` only labels errors.
pub fn parse_kitti_calib_str(text: &str, path: &str) -> Result<Calibration> {
    let err = |line: usize, field: &str, msg: String| Error::Parse {
        path: path.to_string(),
        line,
        field: field.to_string(),
        msg,
    };
    let mut found: [Option<Vec<f64>>; 3] = [None, None, None];
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let Some((key, rest)) = raw.split_once(':') else {
            return Err(err(line, raw, "expected `key: values`".into()));
        };
        let key = key.trim();
        let Some(slot) = FIELDS.iter().position(|(k, _)| *k == key) else {
            continue;
        };
        if found[slot].is_some() {
            return Err(err(line, key, "duplicate key".into()));
        }
        let values = rest
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(line, key, format!("`{tok}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let want = FIELDS[slot].1;
        if values.len() != want {
            return Err(err(line, key, format!("expected {want} floats, found {}", values.len())));
        }
        found[slot] = Some(values);
    }
    let last = text.lines().count();
    let mut take = |slot: usize| found[slot].take().ok_or_else(|| err(last, FIELDS[slot].0, "missing key".into()));
    let p2 = take(0)?;
    let r0 = take(1)?;
    let tr = take(2)?;
    Calibration::from_kitti(
        Matrix3x4::from_row_slice(&p2),
        Matrix3::from_row_slice(&r0),
        Matrix3x4::from_row_slice(&tr),
    )
}

pub fn parse_kitti_calib(path: &Path) -> Result<Calibration> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_calib_str(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vector3;

    const IDENTITY: &str = "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n\
        P2: 1 0 0 0 0 1 0 0 0 0 1 0\n\
        R0_rect: 1 0 0 0 1 0 0 0 1\n\
        Tr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";

    #[test]
    fn identity_fixture() {
        let c = parse_kitti_calib_str(IDENTITY, "mem").unwrap();
        assert_eq!(*c.projection(), Matrix3x4::identity());
        let p = c.project(&Vector3::new(2.0, 4.0, 2.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (1.0, 2.0, 2.0));
    }

    #[test]
    fn scientific_notation_is_accepted() {
        let text = IDENTITY.replace("P2: 1 0 0 0", "P2: 1.000000e+00 0.0e0 0 0");
        assert!(parse_kitti_calib_str(&text, "mem").is_ok());
    }

    #[test]
    fn errors_name_line_and_field() {
        let short = IDENTITY.replace("R0_rect: 1 0 0 0 1 0 0 0 1", "R0_rect: 1 0 0 0 1 0 0 0");
        match parse_kitti_calib_str(&short, "calib.txt") {
            Err(Error::Parse { line, field, path, .. }) => {
                assert_eq!((line, field.as_str(), path.as_str()), (3, "R0_rect", "calib.txt"));
            }
            other => panic!("{other:?}"),
        }
        let bad = IDENTITY.replace("Tr_velo_to_cam: 1", "Tr_velo_to_cam: x");
        assert!(matches!(
            parse_kitti_calib_str(&bad, "m"),
            Err(Error::Parse { line: 4, ref field, .. }) if field == "Tr_velo_to_cam"
        ));
        let truncated: String = IDENTITY.lines().take(2).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            parse_kitti_calib_str(&truncated, "m"),
            Err(Error::Parse { ref field, .. }) if field == "R0_rect"
        ));
        let dup = format!("{IDENTITY}P2: 1 0 0 0 0 1 0 0 0 0 1 0\n");
        assert!(parse_kitti_calib_str(&dup, "m").is_err());
    }
}
