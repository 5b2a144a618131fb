//! Binary PGM (P5, maxval 255) codec. A byte `v` decodes to `v / 255`;
//! encoding rounds `p * 255` to the nearest byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f64 {
    f64::from(v) / 255.0
}

pub fn encode(grid: &Grid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.cols(), grid.rows()).into_bytes();
    out.extend(grid.data().iter().map(|v| quantize(*v)));
    out
}

pub fn decode(bytes: &[u8]) -> Result<Grid> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("expected P5 magic, found {:?}", fields[0])));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM {what}: {s:?}")))
    };
    let cols = parse(&fields[1], "width")?;
    let rows = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Format("PGM has zero size".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != rows * cols {
        return Err(Error::Format(format!("PGM raster has {} bytes, expected {}", raster.len(), rows * cols)));
    }
    Grid::new(rows, cols, raster.iter().map(|v| dequantize(*v)).collect())
}

pub fn write(path: &Path, grid: &Grid) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode(grid))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Grid> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::NotFound(path.display().to_string())),
        Err(e) => return Err(e.into()),
    };
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantization_rule() {
        let g = decode(b"P5\n1 1\n255\n\x80").unwrap();
        assert!((g.get(0, 0) - 128.0 / 255.0).abs() < 1e-9);
    }

    #[test]
    fn header_comments_are_skipped() {
        let g = decode(b"P5\n# made by hand\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(decode(b"P2\n1 1\n255\n0"), Err(Error::Format(_))));
        assert!(matches!(decode(b"P5\n2 2\n255\n\x00"), Err(Error::Format(_))));
        assert!(matches!(decode(b"P5\n2"), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn byte_grids_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| dequantize((crate::rng::derive(seed, i as u64) % 256) as u8))
                .collect();
            let g = Grid::new(rows, cols, data).unwrap();
            prop_assert_eq!(decode(&encode(&g)).unwrap(), g);
        }
    }
}
