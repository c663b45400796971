//! `SNDS` sample files: a JSON header followed by fixed-size 64x64 records.
//!
//! Layout (little-endian): magic, `u16` version, `u32` header capacity,
//! then the header JSON padded with spaces to the capacity. Each record
//! holds eps (f32), source (2 x f32), PML profile (f32), the four traces
//! (2 x f32 each, W E N S), H (2 x f32) and a class byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64 as c64;
use serde::{Deserialize, Serialize};

use crate::datagen::{crop_subdomains, simulate, CropParams, MaterialMode, SimulationParams, SubdomainSample};
use crate::error::{Error, Result};
use crate::field::{ComplexField2D, RealField2D, WavevectorConvention};
use crate::robin::BoundaryTraceSet;
use crate::subdomain::{SubdomainClass, SUBDOMAIN_SIZE};

pub const SNDS_MAGIC: &[u8; 4] = b"SNDS";
pub const SNDS_VERSION: u16 = 1;
const HEADER_CAPACITY: usize = 8192;
const PREAMBLE: usize = 4 + 2 + 4;

pub const fn record_bytes(size: usize) -> usize {
    let cells = size * size;
    cells * 4 + cells * 8 + cells * 4 + 4 * size * 8 + cells * 8 + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub size: usize,
    pub count: usize,
    pub class_counts: [usize; 3],
    pub k0_delta: f64,
    pub convention: WavevectorConvention,
    /// Free-form generator description.
    #[serde(default)]
    pub generator: serde_json::Value,
}

impl DatasetHeader {
    pub fn new(k0_delta: f64, convention: WavevectorConvention, generator: serde_json::Value) -> Self {
        Self { size: SUBDOMAIN_SIZE, count: 0, class_counts: [0; 3], k0_delta, convention, generator }
    }
}

fn put_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

fn put_c32(buf: &mut Vec<u8>, v: c64) {
    put_f32(buf, v.re);
    put_f32(buf, v.im);
}

fn encode(s: &SubdomainSample, size: usize) -> Result<Vec<u8>> {
    if s.eps.shape() != (size, size) {
        return Err(Error::ShapeMismatch { expected: (size, size), got: s.eps.shape() });
    }
    let mut b = Vec::with_capacity(record_bytes(size));
    s.eps.as_slice().iter().for_each(|v| put_f32(&mut b, *v));
    s.source.as_slice().iter().for_each(|v| put_c32(&mut b, *v));
    s.pml_profile.as_slice().iter().for_each(|v| put_f32(&mut b, *v));
    s.g.iter().for_each(|v| put_c32(&mut b, *v));
    s.h.as_slice().iter().for_each(|v| put_c32(&mut b, *v));
    b.push(s.class.as_u8());
    debug_assert_eq!(b.len(), record_bytes(size));
    Ok(b)
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn f32(&mut self) -> f64 {
        let (h, t) = self.0.split_at(4);
        self.0 = t;
        f32::from_le_bytes(h.try_into().expect("4 bytes")) as f64
    }

    fn c32(&mut self) -> c64 {
        let re = self.f32();
        c64::new(re, self.f32())
    }
}

fn decode(b: &[u8], size: usize) -> Result<SubdomainSample> {
    let n = size * size;
    let mut c = Cursor(b);
    let eps = RealField2D::from_vec(size, size, (0..n).map(|_| c.f32()).collect())?;
    let source = ComplexField2D::from_vec(size, size, (0..n).map(|_| c.c32()).collect())?;
    let pml_profile = RealField2D::from_vec(size, size, (0..n).map(|_| c.f32()).collect())?;
    let mut g = BoundaryTraceSet::zeros(size, size);
    g.iter_mut().for_each(|v| *v = c.c32());
    let h = ComplexField2D::from_vec(size, size, (0..n).map(|_| c.c32()).collect())?;
    let class = SubdomainClass::from_u8(c.0[0])?;
    Ok(SubdomainSample { eps, source, pml_profile, g, h, class })
}

pub struct SndsWriter {
    out: BufWriter<File>,
    header: DatasetHeader,
    path: PathBuf,
}

impl SndsWriter {
    pub fn create(path: impl AsRef<Path>, header: DatasetHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut out = BufWriter::new(File::create(&path)?);
        write_header(&mut out, &header)?;
        Ok(Self { out, header, path })
    }

    pub fn push(&mut self, s: &SubdomainSample) -> Result<()> {
        self.out.write_all(&encode(s, self.header.size)?)?;
        self.header.count += 1;
        self.header.class_counts[s.class.as_u8() as usize] += 1;
        Ok(())
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    /// Rewrites the header with final counts.
    pub fn finish(mut self) -> Result<DatasetHeader> {
        self.out.flush()?;
        let mut f = self.out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        f.seek(SeekFrom::Start(0))?;
        write_header(&mut f, &self.header)?;
        f.sync_all()?;
        log::info!("wrote {} samples to {}", self.header.count, self.path.display());
        Ok(self.header)
    }
}

fn write_header(w: &mut impl Write, h: &DatasetHeader) -> Result<()> {
    let mut json = serde_json::to_vec(h)?;
    if json.len() > HEADER_CAPACITY {
        return Err(Error::Format(format!("header JSON is {} bytes, capacity {HEADER_CAPACITY}", json.len())));
    }
    json.resize(HEADER_CAPACITY, b' ');
    w.write_all(SNDS_MAGIC)?;
    w.write_all(&SNDS_VERSION.to_le_bytes())?;
    w.write_all(&(HEADER_CAPACITY as u32).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

pub struct SndsReader {
    file: BufReader<File>,
    header: DatasetHeader,
    data_start: u64,
}

impl SndsReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = BufReader::new(File::open(path.as_ref())?);
        let mut pre = [0u8; PREAMBLE];
        file.read_exact(&mut pre).map_err(|_| Error::Format("file too short for header".into()))?;
        if &pre[..4] != SNDS_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&pre[..4]))));
        }
        let version = u16::from_le_bytes([pre[4], pre[5]]);
        if version != SNDS_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let cap = u32::from_le_bytes(pre[6..10].try_into().expect("4 bytes")) as usize;
        let mut json = vec![0u8; cap];
        file.read_exact(&mut json).map_err(|_| Error::Format("truncated header".into()))?;
        let header: DatasetHeader = serde_json::from_slice(json.trim_ascii_end())?;
        let data_start = (PREAMBLE + cap) as u64;
        let len = file.get_ref().metadata()?.len();
        let need = data_start + (header.count * record_bytes(header.size)) as u64;
        if len < need {
            return Err(Error::Format(format!("file holds {len} bytes, header promises {need}")));
        }
        Ok(Self { file, header, data_start })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn read(&mut self, i: usize) -> Result<SubdomainSample> {
        if i >= self.len() {
            return Err(Error::InvalidParams(format!("sample {i} out of {}", self.len())));
        }
        let rb = record_bytes(self.header.size);
        self.file.seek(SeekFrom::Start(self.data_start + (i * rb) as u64))?;
        let mut buf = vec![0u8; rb];
        self.file.read_exact(&mut buf)?;
        decode(&buf, self.header.size)
    }

    pub fn read_all(&mut self) -> Result<Vec<SubdomainSample>> {
        (0..self.len()).map(|i| self.read(i)).collect()
    }
}

/// Parameters for a whole synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub simulations: usize,
    pub crops_per_simulation: usize,
    pub n: usize,
    pub pml_thickness: usize,
    pub max_eps: f64,
    pub material: MaterialMode,
    pub augment_rot: bool,
    pub convention: WavevectorConvention,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            simulations: 4,
            crops_per_simulation: 64,
            n: 256,
            pml_thickness: 40,
            max_eps: 16.0,
            material: MaterialMode::default(),
            augment_rot: true,
            convention: WavevectorConvention::default(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Even simulations put the source lines just inside the PML; odd ones
    /// push them one tile further in so PML crops without sources exist.
    pub fn simulation(&self, i: usize) -> SimulationParams {
        let mut p = SimulationParams::new(self.n, crate::datagen::sub_seed(self.seed, 1000 + i as u64));
        p.pml_thickness = self.pml_thickness;
        p.material = self.material;
        p.max_eps = self.max_eps;
        p.source_inset = if i % 2 == 0 { self.pml_thickness } else { self.pml_thickness + SUBDOMAIN_SIZE + 2 };
        p
    }

    pub fn crops(&self, i: usize) -> CropParams {
        CropParams {
            count: self.crops_per_simulation,
            seed: crate::datagen::sub_seed(self.seed, 2000 + i as u64),
            augment_rot: self.augment_rot,
            stride: None,
            convention: self.convention,
        }
    }
}

/// Runs every simulation and streams its crops into `sink`.
pub fn generate(spec: &DatasetSpec, mut sink: impl FnMut(SubdomainSample) -> Result<()>) -> Result<()> {
    for i in 0..spec.simulations {
        let sim = simulate(&spec.simulation(i))?;
        log::info!("simulation {i}: relative residual {:.2e}", sim.relative_residual);
        for s in crop_subdomains(&sim, &spec.crops(i))? {
            sink(s)?;
        }
    }
    Ok(())
}

/// Generates a dataset straight to an `SNDS` file.
pub fn generate_to_file(spec: &DatasetSpec, path: impl AsRef<Path>) -> Result<DatasetHeader> {
    let k0 = crate::field::GridSpec::new(spec.n, spec.n)?.k0_delta();
    let path = path.as_ref();
    let mut w = SndsWriter::create(path, DatasetHeader::new(k0, spec.convention, serde_json::to_value(spec)?))?;
    match generate(spec, |s| w.push(&s)) {
        Ok(()) => w.finish(),
        Err(e) => {
            drop(w);
            let _ = std::fs::remove_file(path);
            Err(e)
        }
    }
}
