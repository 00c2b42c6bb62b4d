//! Binary file codecs for the scene corpus: `PC3D` point clouds, binary
//! PPM/PGM rasters and the `DPTH` depth format. All multi-byte integers are
//! little-endian.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::PointCloud;

const PC_MAGIC: &[u8; 4] = b"PC3D";
const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

/// `PC3D`: magic, u32 point count, then per point 3×f32 position, 3×f32
/// color, u16 label.
pub fn write_point_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PC_MAGIC)?;
    w.write_all(&(cloud.len() as u32).to_le_bytes())?;
    for i in 0..cloud.len() {
        for v in cloud.positions[i] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in cloud.colors[i] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&cloud.labels[i].to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PC_MAGIC {
        return Err(Error::Format {
            format: "PC3D",
            detail: format!("bad magic {magic:?}"),
        });
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4) as usize;
    let mut cloud = PointCloud {
        positions: Vec::with_capacity(count),
        colors: Vec::with_capacity(count),
        labels: Vec::with_capacity(count),
    };
    let mut rec = [0u8; 26];
    for _ in 0..count {
        r.read_exact(&mut rec)?;
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]);
        cloud.positions.push([f(0), f(4), f(8)]);
        cloud.colors.push([f(12), f(16), f(20)]);
        cloud.labels.push(u16::from_le_bytes([rec[24], rec[25]]));
    }
    Ok(cloud)
}

/// Binary PPM (P6, 8-bit) from interleaved [0,1] floats.
pub fn write_ppm(rgb: &[f32], width: usize, height: usize, path: &Path) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::shape(
            "write_ppm",
            format!("{} floats", width * height * 3),
            format!("{}", rgb.len()),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = rgb
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Read a P6 PPM back to interleaved [0,1] floats.
pub fn read_ppm(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let (width, height) = read_pnm_header(&mut r, "P6")?;
    let mut bytes = vec![0u8; width * height * 3];
    r.read_exact(&mut bytes)?;
    Ok((
        bytes.iter().map(|b| f32::from(*b) / 255.0).collect(),
        width,
        height,
    ))
}

/// Binary PGM (P5, 8-bit) label image; 255 encodes the ignore label.
pub fn write_pgm(labels: &[u8], width: usize, height: usize, path: &Path) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::shape(
            "write_pgm",
            format!("{} labels", width * height),
            format!("{}", labels.len()),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(labels)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let (width, height) = read_pnm_header(&mut r, "P5")?;
    let mut bytes = vec![0u8; width * height];
    r.read_exact(&mut bytes)?;
    Ok((bytes, width, height))
}

/// `DPTH`: magic, u32 height, u32 width, then H·W f32 meters row-major.
pub fn write_depth(depth: &[f32], width: usize, height: usize, path: &Path) -> Result<()> {
    if depth.len() != width * height {
        return Err(Error::shape(
            "write_depth",
            format!("{} values", width * height),
            format!("{}", depth.len()),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&(height as u32).to_le_bytes())?;
    w.write_all(&(width as u32).to_le_bytes())?;
    for v in depth {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DEPTH_MAGIC {
        return Err(Error::Format {
            format: "DPTH",
            detail: format!("bad magic {magic:?}"),
        });
    }
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    let height = u32::from_le_bytes(buf) as usize;
    r.read_exact(&mut buf)?;
    let width = u32::from_le_bytes(buf) as usize;
    let mut depth = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        r.read_exact(&mut buf)?;
        depth.push(f32::from_le_bytes(buf));
    }
    Ok((depth, width, height))
}

fn read_pnm_header(r: &mut impl BufRead, magic: &str) -> Result<(usize, usize)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != magic {
        return Err(Error::Format {
            format: "PNM",
            detail: format!("expected {magic}, got {line:?}"),
        });
    }
    let mut dims = String::new();
    r.read_line(&mut dims)?;
    let mut it = dims.split_whitespace();
    let width = it
        .next()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::Format {
            format: "PNM",
            detail: "missing width".into(),
        })?;
    let height = it
        .next()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::Format {
            format: "PNM",
            detail: "missing height".into(),
        })?;
    let mut maxval = String::new();
    r.read_line(&mut maxval)?;
    if maxval.trim() != "255" {
        return Err(Error::Format {
            format: "PNM",
            detail: format!("unsupported maxval {maxval:?}"),
        });
    }
    Ok((width, height))
}
