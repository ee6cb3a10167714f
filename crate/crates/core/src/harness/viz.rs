//! Heatmap images, raw attention arrays and schedule dumps.

use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::fae::{schedule_dump, AttentionMap, BiasScheduleParams};

/// Grey-to-red colour ramp over `[0, 1]`.
fn ramp(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * v.sqrt()).round() as u8;
    let g = (255.0 * v * v).round() as u8;
    let b = (255.0 * (1.0 - v) * 0.25).round() as u8;
    [r, g, b]
}

/// Writes a 2D map as an RGB PNG, min-max normalised, each cell `scale` pixels wide.
pub fn write_heatmap_png(path: &Path, map: &Array2<f64>, scale: usize) -> Result<()> {
    let (h, w) = map.dim();
    let scale = scale.max(1);
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (ph, pw) = (h * scale, w * scale);
    let mut pixels = Vec::with_capacity(ph * pw * 3);
    for y in 0..ph {
        for x in 0..pw {
            pixels.extend_from_slice(&ramp((map[[y / scale, x / scale]] - lo) / span));
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), pw as u32, ph as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Serde(e.to_string()))?;
    writer.write_image_data(&pixels).map_err(|e| Error::Serde(e.to_string()))
}

/// One PNG per temporal slot plus a little-endian `f64` dump of the map.
pub fn export_attention_map(dir: &Path, map: &AttentionMap, scale: usize) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (s, slot) in map.map.outer_iter().enumerate() {
        let p = dir.join(format!("attn_t{:04}_slot{s}.png", map.timestep));
        write_heatmap_png(&p, &slot.to_owned(), scale)?;
        written.push(p);
    }
    let raw = dir.join(format!("attn_t{:04}.f64", map.timestep));
    let bytes: Vec<u8> = map.map.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    written.push(raw);
    Ok(written)
}

pub fn read_attention_raw(path: &Path, shape: (usize, usize, usize)) -> Result<Array3<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Array3::from_shape_vec(shape, data).map_err(|e| Error::Shape(e.to_string()))
}

/// `t,w_bias` rows for every integer timestep.
pub fn write_schedule_csv(path: &Path, params: &BiasScheduleParams) -> Result<()> {
    let rows = schedule_dump(params)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "t,w_bias").map_err(|e| Error::io(path, e))?;
    for (t, v) in rows {
        writeln!(w, "{t},{v:?}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a [`write_schedule_csv`] file.
pub fn read_schedule_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    r.deserialize::<(usize, f64)>()
        .map(|row| row.map_err(|e| Error::Serde(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fae::Transition;

    #[test]
    fn schedule_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        for tr in Transition::ALL {
            let p = BiasScheduleParams::default().with_transition(tr);
            let path = dir.path().join(format!("{tr}.csv"));
            write_schedule_csv(&path, &p).unwrap();
            assert_eq!(read_schedule_csv(&path).unwrap(), schedule_dump(&p).unwrap());
        }
    }

    #[test]
    fn heatmap_png_has_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.png");
        write_heatmap_png(&path, &Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64), 8).unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&path).unwrap()));
        let reader = dec.read_info().unwrap();
        assert_eq!((reader.info().width, reader.info().height), (24, 32));
    }
}
