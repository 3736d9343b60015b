//! Per-frame grayscale maps of one token's attention over the visual lattice.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use speaker_align::PatchGrid;

use crate::error::{CliError, Result};

/// Gray level used when a map is constant.
pub const FLAT_GRAY: u8 = 128;

/// Linear min-max scaling to `0..=255`, rounded to nearest.
pub fn normalize(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![FLAT_GRAY; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Plain (P2) portable graymap with max value 255.
pub fn pgm(width: usize, height: usize, pixels: &[u8]) -> String {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in pixels.chunks(width) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Splits an attention row into one `H×W` map per frame (values in grid order).
pub fn frame_maps(row: &[f64], grid: &PatchGrid) -> Vec<Vec<f64>> {
    (0..grid.frames).map(|t| row[grid.frame_range(t)].to_vec()).collect()
}

/// One heatmap cell as written to CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapCell {
    pub variant: String,
    pub frame: usize,
    pub y: usize,
    pub x: usize,
    pub value: f64,
}

/// Writes `{stem}_{variant}_f{t}.pgm` for every frame and variant plus
/// `{stem}.csv` with the raw values. Returns the paths written.
pub fn export(dir: &Path, stem: &str, grid: &PatchGrid, variants: &[(&str, &[f64])]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut written = Vec::new();
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["variant", "frame", "y", "x", "value"])?;
    for (name, row) in variants {
        for (t, map) in frame_maps(row, grid).iter().enumerate() {
            let path = dir.join(format!("{stem}_{name}_f{t}.pgm"));
            fs::write(&path, pgm(grid.width, grid.height, &normalize(map))).map_err(|e| CliError::io(&path, e))?;
            written.push(path);
            for (k, v) in map.iter().enumerate() {
                csv.write_record([
                    name.to_string(),
                    t.to_string(),
                    (k / grid.width).to_string(),
                    (k % grid.width).to_string(),
                    v.to_string(),
                ])?;
            }
        }
    }
    let bytes = csv.into_inner().map_err(|e| CliError::Heatmap(e.to_string()))?;
    let path = dir.join(format!("{stem}.csv"));
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    written.push(path);
    Ok(written)
}

pub fn read_csv(path: &Path) -> Result<Vec<HeatmapCell>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut cells = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let field = |k: usize| {
            rec.get(k)
                .ok_or_else(|| CliError::Heatmap(format!("short record {rec:?}")))
        };
        let num = |k: usize| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| CliError::Heatmap(format!("bad integer in {rec:?}")))
        };
        cells.push(HeatmapCell {
            variant: field(0)?.to_string(),
            frame: num(1)?,
            y: num(2)?,
            x: num(3)?,
            value: field(4)?
                .parse()
                .map_err(|_| CliError::Heatmap(format!("bad value in {rec:?}")))?,
        });
    }
    Ok(cells)
}

/// Parses a P2 graymap back into `(width, height, pixels)`.
pub fn parse_pgm(text: &str) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| CliError::Heatmap(format!("pgm: {m}"));
    let mut it = text.split_ascii_whitespace();
    if it.next() != Some("P2") {
        return Err(bad("missing P2 magic"));
    }
    let mut num = || -> Result<usize> {
        it.next()
            .ok_or_else(|| bad("unexpected end"))?
            .parse()
            .map_err(|_| bad("not a number"))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(bad("max value is not 255"));
    }
    let mut pixels = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let v = num()?;
        pixels.push(u8::try_from(v).map_err(|_| bad("pixel above 255"))?);
    }
    Ok((w, h, pixels))
}

/// Summary line per written file, for stdout.
pub fn listing(paths: &[PathBuf]) -> String {
    let mut s = String::new();
    for p in paths {
        let _ = writeln!(s, "{}", p.display());
    }
    s
}
