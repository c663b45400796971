//! Little-endian binary containers for fields (`CF2D`) and permittivity maps (`EPS2`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64 as c64;

use crate::error::{Error, Result};
use crate::field::{ComplexField2D, MaterialMap, RealField2D};

pub const CF2D_MAGIC: &[u8; 4] = b"CF2D";
pub const EPS2_MAGIC: &[u8; 4] = b"EPS2";
pub const FORMAT_VERSION: u16 = 1;

fn write_header(w: &mut impl Write, magic: &[u8; 4], nx: usize, ny: usize) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(nx as u32).to_le_bytes())?;
    w.write_all(&(ny as u32).to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<(usize, usize)> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)
        .map_err(|_| Error::Format("file too short for header".into()))?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut d = [0u8; 4];
    r.read_exact(&mut d)?;
    let nx = u32::from_le_bytes(d) as usize;
    r.read_exact(&mut d)?;
    let ny = u32::from_le_bytes(d) as usize;
    Ok((nx, ny))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated payload".into()))?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_cf2d(w: &mut impl Write, field: &ComplexField2D) -> Result<()> {
    write_header(w, CF2D_MAGIC, field.nx(), field.ny())?;
    for v in field.as_slice() {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_cf2d(r: &mut impl Read) -> Result<ComplexField2D> {
    let (nx, ny) = read_header(r, CF2D_MAGIC)?;
    let mut data = Vec::with_capacity(nx * ny);
    for _ in 0..nx * ny {
        let re = read_f64(r)?;
        let im = read_f64(r)?;
        data.push(c64::new(re, im));
    }
    ComplexField2D::from_vec(nx, ny, data)
}

pub fn write_eps2(w: &mut impl Write, eps: &MaterialMap) -> Result<()> {
    let e = eps.eps();
    write_header(w, EPS2_MAGIC, e.nx(), e.ny())?;
    for v in e.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_eps2(r: &mut impl Read) -> Result<MaterialMap> {
    let (nx, ny) = read_header(r, EPS2_MAGIC)?;
    let mut data = Vec::with_capacity(nx * ny);
    for _ in 0..nx * ny {
        data.push(read_f64(r)?);
    }
    MaterialMap::new(RealField2D::from_vec(nx, ny, data)?)
}

pub fn save_cf2d(path: impl AsRef<Path>, field: &ComplexField2D) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_cf2d(&mut w, field)?;
    w.flush()?;
    Ok(())
}

pub fn load_cf2d(path: impl AsRef<Path>) -> Result<ComplexField2D> {
    read_cf2d(&mut BufReader::new(File::open(path)?))
}

pub fn save_eps2(path: impl AsRef<Path>, eps: &MaterialMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_eps2(&mut w, eps)?;
    w.flush()?;
    Ok(())
}

pub fn load_eps2(path: impl AsRef<Path>) -> Result<MaterialMap> {
    read_eps2(&mut BufReader::new(File::open(path)?))
}
