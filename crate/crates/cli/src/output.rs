//! Artifact formats: 16-bit binary PGM and CSV with a schema comment line.

use std::fmt::Write as _;
use std::path::Path;

use ctuq_core::Image;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// First two lines of every CSV this tool writes.
pub fn csv_header(schema: &str, columns: &[&str]) -> String {
    format!("# ctuq {schema} schema v{SCHEMA_VERSION}\n{}\n", columns.join(","))
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, contents).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(format!("renaming into {}", path.display()), e))
}

/// `P5` with maxval 65535; `value * scale` is clamped to `[0, 1]` and 1.0
/// maps to 65535. Samples are big-endian.
pub fn pgm16(img: &Image, scale: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    for &v in img.as_slice() {
        let q = ((v * scale).clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_pgm16(path: &Path, img: &Image, scale: f64) -> Result<(), CliError> {
    write_atomic(path, &pgm16(img, scale))
}

/// Parses what [`pgm16`] writes; returns `(width, height, samples)`.
pub fn parse_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>), CliError> {
    let bad = |m: &str| CliError::Runtime(format!("malformed PGM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("short header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ASCII"))?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(bad("expected P5 with maxval 65535"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
    if body.len() != 2 * w * h {
        return Err(bad("raster size"));
    }
    Ok((w, h, body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

/// One CSV row per image row.
pub fn image_csv(schema: &str, img: &Image) -> String {
    let mut s = format!("# ctuq {schema} schema v{SCHEMA_VERSION}\n");
    for r in 0..img.height() {
        let row: Vec<String> = (0..img.width()).map(|c| img.get(r, c).to_string()).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

pub fn parse_image_csv(text: &str) -> Result<Image, CliError> {
    let rows: Vec<Vec<f64>> = data_lines(text)
        .map(|l| l.split(',').map(parse_f64).collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()?;
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(CliError::Runtime("ragged image CSV".into()));
    }
    Ok(Image::new(h, w, rows.into_iter().flatten().collect())?)
}

fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty())
}

pub fn parse_f64(v: &str) -> Result<f64, CliError> {
    v.trim().parse().map_err(|_| CliError::Runtime(format!("bad number `{v}` in CSV")))
}

/// Data rows of a table CSV: comment lines and the column header are skipped.
pub fn table_rows(text: &str) -> Vec<Vec<String>> {
    data_lines(text).skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

/// Tiles `rows[i][j]` into one image; every tile must share a shape.
pub fn mosaic(rows: &[Vec<Image>]) -> Result<Image, CliError> {
    let first = rows.first().and_then(|r| r.first()).ok_or_else(|| CliError::Runtime("empty mosaic".into()))?;
    let (th, tw) = (first.height(), first.width());
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut data = vec![0.0; rows.len() * th * cols * tw];
    let stride = cols * tw;
    for (i, row) in rows.iter().enumerate() {
        for (j, tile) in row.iter().enumerate() {
            if (tile.height(), tile.width()) != (th, tw) {
                return Err(CliError::Runtime("mosaic tiles differ in shape".into()));
            }
            for r in 0..th {
                for c in 0..tw {
                    data[(i * th + r) * stride + j * tw + c] = tile.get(r, c);
                }
            }
        }
    }
    Ok(Image::new(rows.len() * th, stride, data)?)
}
