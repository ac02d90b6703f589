//! Binary field snapshots.
//!
//! Byte layout (all multi-byte values in the byte order named by the tag):
//!
//! | offset | size | content |
//! |-------:|-----:|---------|
//! | 0 | 8 | magic `BOHMSNAP` |
//! | 8 | 1 | endianness tag: `L` little, `B` big |
//! | 9 | 1 | format version (1) |
//! | 10 | 1 | scalar width in bytes: 4 (complex64, f32 pairs) or 8 (f64 pairs) |
//! | 11 | 1 | number of axes `A` (1..=3) |
//! | 12 | 4 | spin dimension `d` (u32) |
//! | 16 | 32·A | per axis: origin f64, extent f64, points u64, periodic u8, 7 zero bytes |
//! | … | | `cells × d` pairs `(re, im)`, cells row-major, spin index innermost |
//!
//! Writers in this crate always emit little-endian; readers accept both.

use std::io::{self, Read, Write};

use num_complex::Complex64;
use thiserror::Error;

use super::{Axis, Grid, LatticeError, RealField, SpinorField};

pub const MAGIC: &[u8; 8] = b"BOHMSNAP";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a field snapshot (bad magic)")]
    Magic,
    #[error("unsupported snapshot: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Width of each stored real number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScalarWidth {
    /// `complex64`: two `f32` per amplitude.
    #[default]
    F32,
    /// Two `f64` per amplitude (lossless).
    F64,
}

impl ScalarWidth {
    fn bytes(self) -> u8 {
        match self {
            ScalarWidth::F32 => 4,
            ScalarWidth::F64 => 8,
        }
    }
}

pub fn write_field<W: Write>(mut w: W, field: &SpinorField, width: ScalarWidth) -> Result<(), SnapshotError> {
    let grid = field.grid();
    let mut header = Vec::with_capacity(16 + 32 * grid.ndim());
    header.extend_from_slice(MAGIC);
    header.push(b'L');
    header.push(VERSION);
    header.push(width.bytes());
    header.push(grid.ndim() as u8);
    header.extend_from_slice(&(field.spin_dim() as u32).to_le_bytes());
    for a in grid.axes() {
        header.extend_from_slice(&a.origin.to_le_bytes());
        header.extend_from_slice(&a.extent.to_le_bytes());
        header.extend_from_slice(&(a.points as u64).to_le_bytes());
        header.push(a.periodic as u8);
        header.extend_from_slice(&[0u8; 7]);
    }
    w.write_all(&header)?;
    let mut body = Vec::with_capacity(field.amplitudes().len() * 2 * width.bytes() as usize);
    for a in field.amplitudes() {
        match width {
            ScalarWidth::F32 => {
                body.extend_from_slice(&(a.re as f32).to_le_bytes());
                body.extend_from_slice(&(a.im as f32).to_le_bytes());
            }
            ScalarWidth::F64 => {
                body.extend_from_slice(&a.re.to_le_bytes());
                body.extend_from_slice(&a.im.to_le_bytes());
            }
        }
    }
    w.write_all(&body)?;
    Ok(())
}

pub fn read_field<R: Read>(mut r: R) -> Result<SpinorField, SnapshotError> {
    let mut fixed = [0u8; 16];
    r.read_exact(&mut fixed)?;
    if &fixed[..8] != MAGIC {
        return Err(SnapshotError::Magic);
    }
    let little = match fixed[8] {
        b'L' => true,
        b'B' => false,
        t => return Err(SnapshotError::Unsupported(format!("endianness tag {t:#x}"))),
    };
    if fixed[9] != VERSION {
        return Err(SnapshotError::Unsupported(format!("version {}", fixed[9])));
    }
    let width = match fixed[10] {
        4 => ScalarWidth::F32,
        8 => ScalarWidth::F64,
        w => return Err(SnapshotError::Unsupported(format!("scalar width {w}"))),
    };
    let naxes = fixed[11] as usize;
    let spin_dim = u32_from(&fixed[12..16], little) as usize;
    let mut axes = Vec::with_capacity(naxes);
    for _ in 0..naxes.min(super::MAX_AXES + 1) {
        let mut rec = [0u8; 32];
        r.read_exact(&mut rec)?;
        axes.push(Axis {
            origin: f64_from(&rec[0..8], little),
            extent: f64_from(&rec[8..16], little),
            points: u64_from(&rec[16..24], little) as usize,
            periodic: rec[24] != 0,
        });
    }
    let grid = Grid::new(axes)?;
    let count = grid.cells() * spin_dim;
    let mut field = SpinorField::zeros(&grid, spin_dim)?;
    let bytes = width.bytes() as usize;
    let mut body = vec![0u8; count * 2 * bytes];
    r.read_exact(&mut body)?;
    for (amp, chunk) in field.amplitudes_mut().iter_mut().zip(body.chunks_exact(2 * bytes)) {
        *amp = match width {
            ScalarWidth::F32 => Complex64::new(f32_from(&chunk[..4], little) as f64, f32_from(&chunk[4..], little) as f64),
            ScalarWidth::F64 => Complex64::new(f64_from(&chunk[..8], little), f64_from(&chunk[8..], little)),
        };
    }
    Ok(field)
}

/// Reads a tabulated real field (e.g. a potential) stored as a scalar snapshot;
/// imaginary parts are ignored.
pub fn read_real_field<R: Read>(r: R) -> Result<RealField, SnapshotError> {
    let field = read_field(r)?;
    if field.spin_dim() != 1 {
        return Err(SnapshotError::Unsupported(format!("real field with spin_dim {}", field.spin_dim())));
    }
    let values = field.amplitudes().iter().map(|a| a.re).collect();
    Ok(RealField::new(field.grid(), values)?)
}

pub fn write_real_field<W: Write>(w: W, field: &RealField, width: ScalarWidth) -> Result<(), SnapshotError> {
    let amps = field.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let spinor = SpinorField::from_amplitudes(field.grid(), 1, amps)?;
    write_field(w, &spinor, width)
}

fn u32_from(b: &[u8], little: bool) -> u32 {
    let a: [u8; 4] = b.try_into().expect("4 bytes");
    if little { u32::from_le_bytes(a) } else { u32::from_be_bytes(a) }
}

fn u64_from(b: &[u8], little: bool) -> u64 {
    let a: [u8; 8] = b.try_into().expect("8 bytes");
    if little { u64::from_le_bytes(a) } else { u64::from_be_bytes(a) }
}

fn f64_from(b: &[u8], little: bool) -> f64 {
    f64::from_bits(u64_from(b, little))
}

fn f32_from(b: &[u8], little: bool) -> f32 {
    f32::from_bits(u32_from(b, little))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SpinorField {
        let g = Grid::new(vec![Axis::centered(4.0, 8), Axis::new(2.0, 16).with_periodic(false)]).unwrap();
        SpinorField::from_fn(&g, 2, |x, out| {
            out[0] = Complex64::new(x[0], x[1]);
            out[1] = Complex64::new(0.1 * x[0] * x[1], -1.0 / 3.0);
        })
        .unwrap()
    }

    #[test]
    fn f64_round_trip_is_lossless() {
        let f = sample();
        let mut buf = Vec::new();
        write_field(&mut buf, &f, ScalarWidth::F64).unwrap();
        assert_eq!(buf.len(), 16 + 64 + 128 * 2 * 16);
        assert_eq!(read_field(&buf[..]).unwrap(), f);
    }

    #[test]
    fn complex64_round_trip_within_f32_precision() {
        let f = sample();
        let mut buf = Vec::new();
        write_field(&mut buf, &f, ScalarWidth::F32).unwrap();
        let back = read_field(&buf[..]).unwrap();
        assert_eq!(back.grid(), f.grid());
        assert!(back.max_abs_diff(&f).unwrap() < 1e-6);
    }

    #[test]
    fn header_layout_is_fixed() {
        let f = sample();
        let mut buf = Vec::new();
        write_field(&mut buf, &f, ScalarWidth::F32).unwrap();
        assert_eq!(&buf[..8], b"BOHMSNAP");
        assert_eq!(buf[8], b'L');
        assert_eq!(buf[10], 4);
        assert_eq!(buf[11], 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[16..24].try_into().unwrap()), -2.0);
        assert_eq!(u64::from_le_bytes(buf[32..40].try_into().unwrap()), 8);
        assert_eq!(buf[40 + 32], 0); // second axis is open
        // first amplitude: cell (0, 0), spin 0 = (-2, 0)
        let body = 16 + 64;
        assert_eq!(f32::from_le_bytes(buf[body..body + 4].try_into().unwrap()), -2.0);
    }

    #[test]
    fn big_endian_files_are_accepted() {
        let g = Grid::new(vec![Axis::new(1.0, 8)]).unwrap();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&[b'B', 1, 8, 1]);
        buf.extend_from_slice(&1u32.to_be_bytes());
        buf.extend_from_slice(&0.0f64.to_be_bytes());
        buf.extend_from_slice(&1.0f64.to_be_bytes());
        buf.extend_from_slice(&8u64.to_be_bytes());
        buf.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0, 0]);
        for j in 0..8 {
            buf.extend_from_slice(&(j as f64).to_be_bytes());
            buf.extend_from_slice(&0.5f64.to_be_bytes());
        }
        let f = read_field(&buf[..]).unwrap();
        assert_eq!(f.grid(), &g);
        assert_eq!(f.value(3, 0), Complex64::new(3.0, 0.5));
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_field(&b"NOTASNAPSHOT0000"[..]), Err(SnapshotError::Magic)));
    }

    #[test]
    fn real_field_round_trip() {
        let g = Grid::new(vec![Axis::centered(4.0, 16)]).unwrap();
        let v = RealField::from_fn(&g, |x| 0.5 * x[0] * x[0]);
        let mut buf = Vec::new();
        write_real_field(&mut buf, &v, ScalarWidth::F64).unwrap();
        assert_eq!(read_real_field(&buf[..]).unwrap(), v);
    }
}
