//! Raw volume files and legacy VTK export.
//!
//! A raw volume starts with a header of fixed 64-byte text lines. The first
//! line is `WFVOL 1 <line count>`; the others are `key value...` pairs. The
//! payload follows: one little-endian array per component, x fastest.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{ScalarField, TriMesh, VelocityField, VolumeGrid, VoxelClass};
use crate::wss::WssSample;

pub const HEADER_LINE: usize = 64;
const MAGIC: &str = "WFVOL";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScalarType {
    #[default]
    F32,
    F64,
}

impl ScalarType {
    pub fn size(self) -> usize {
        match self {
            ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            ScalarType::F32 => "f32",
            ScalarType::F64 => "f64",
        }
    }
}

impl std::str::FromStr for ScalarType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "float32" => Ok(Self::F32),
            "f64" | "float64" => Ok(Self::F64),
            other => Err(Error::UnsupportedScalar(other.to_string())),
        }
    }
}

/// What the components of a volume hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    /// `u, v, w, weight, class`.
    Velocity,
    Scalar,
}

impl VolumeKind {
    fn tag(self) -> &'static str {
        match self {
            VolumeKind::Velocity => "velocity",
            VolumeKind::Scalar => "scalar",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub components: usize,
    pub scalar: ScalarType,
    pub timestep: usize,
    pub kind: VolumeKind,
}

impl VolumeHeader {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn payload_bytes(&self) -> usize {
        self.voxels() * self.components * self.scalar.size()
    }

    pub fn grid(&self) -> Result<VolumeGrid> {
        VolumeGrid::new(self.dims, self.spacing, self.origin)
    }

    fn lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("kind {}", self.kind.tag()),
            format!("dims {} {} {}", self.dims[0], self.dims[1], self.dims[2]),
        ];
        for (a, axis) in ["x", "y", "z"].iter().enumerate() {
            out.push(format!("spacing_{axis} {:e}", self.spacing[a]));
        }
        for (a, axis) in ["x", "y", "z"].iter().enumerate() {
            out.push(format!("origin_{axis} {:e}", self.origin[a]));
        }
        out.push(format!("components {}", self.components));
        out.push(format!("scalar {}", self.scalar.tag()));
        out.push(format!("timestep {}", self.timestep));
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let body = self.lines();
        let mut text = Vec::with_capacity((body.len() + 1) * HEADER_LINE);
        let first = format!("{MAGIC} {VERSION} {}", body.len() + 1);
        for line in std::iter::once(first).chain(body) {
            let mut l = line.into_bytes();
            l.resize(HEADER_LINE - 1, b' ');
            l.push(b'\n');
            text.extend(l);
        }
        text
    }

    /// Parses the header at the start of `bytes`; returns it with its length.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let malformed = |m: String| Error::MalformedHeader(m);
        let line = |i: usize| -> Result<String> {
            let chunk = bytes
                .get(i * HEADER_LINE..(i + 1) * HEADER_LINE)
                .ok_or_else(|| malformed(format!("file ends inside header line {}", i + 1)))?;
            let text = std::str::from_utf8(chunk).map_err(|_| malformed(format!("header line {} is not text", i + 1)))?;
            Ok(text.trim_end().to_string())
        };
        let first = line(0)?;
        let mut parts = first.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(malformed("missing WFVOL magic".into()));
        }
        match parts.next().map(str::parse::<u32>) {
            Some(Ok(VERSION)) => {}
            _ => return Err(malformed("unsupported format version".into())),
        }
        let count: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .filter(|&c| c >= 2)
            .ok_or_else(|| malformed("bad header line count".into()))?;
        let mut dims = None;
        let mut spacing = [None; 3];
        let mut origin = [None; 3];
        let mut components = None;
        let mut scalar = None;
        let mut timestep = 0;
        let mut kind = None;
        for i in 1..count {
            let l = line(i)?;
            let mut it = l.split_whitespace();
            let key = it.next().ok_or_else(|| malformed(format!("empty header line {}", i + 1)))?;
            let vals: Vec<&str> = it.collect();
            let one = || -> Result<&str> {
                match vals.as_slice() {
                    [v] => Ok(v),
                    _ => Err(malformed(format!("`{key}` expects one value"))),
                }
            };
            let float = |v: &str| -> Result<f64> { v.parse().map_err(|_| malformed(format!("bad number `{v}` for `{key}`"))) };
            let int = |v: &str| -> Result<usize> { v.parse().map_err(|_| malformed(format!("bad integer `{v}` for `{key}`"))) };
            match key {
                "kind" => {
                    kind = Some(match one()? {
                        "velocity" => VolumeKind::Velocity,
                        "scalar" => VolumeKind::Scalar,
                        other => return Err(malformed(format!("unknown kind `{other}`"))),
                    })
                }
                "dims" => {
                    if vals.len() != 3 {
                        return Err(malformed("`dims` expects three values".into()));
                    }
                    dims = Some([int(vals[0])?, int(vals[1])?, int(vals[2])?]);
                }
                "spacing_x" | "spacing_y" | "spacing_z" => {
                    spacing[axis_of(key)] = Some(float(one()?)?);
                }
                "origin_x" | "origin_y" | "origin_z" => {
                    origin[axis_of(key)] = Some(float(one()?)?);
                }
                "components" => components = Some(int(one()?)?),
                "scalar" => scalar = Some(one()?.parse::<ScalarType>()?),
                "timestep" => timestep = int(one()?)?,
                other => return Err(malformed(format!("unknown key `{other}`"))),
            }
        }
        let need = |name: &str| malformed(format!("missing `{name}`"));
        let spacing = [
            spacing[0].ok_or_else(|| need("spacing_x"))?,
            spacing[1].ok_or_else(|| need("spacing_y"))?,
            spacing[2].ok_or_else(|| need("spacing_z"))?,
        ];
        let origin = [origin[0].unwrap_or(0.0), origin[1].unwrap_or(0.0), origin[2].unwrap_or(0.0)];
        let header = VolumeHeader {
            dims: dims.ok_or_else(|| need("dims"))?,
            spacing,
            origin,
            components: components.ok_or_else(|| need("components"))?,
            scalar: scalar.ok_or_else(|| need("scalar"))?,
            timestep,
            kind: kind.ok_or_else(|| need("kind"))?,
        };
        if header.components == 0 {
            return Err(malformed("zero components".into()));
        }
        if header.kind == VolumeKind::Velocity && header.components != 5 {
            return Err(malformed(format!("velocity volumes hold 5 components, header says {}", header.components)));
        }
        Ok((header, count * HEADER_LINE))
    }
}

fn axis_of(key: &str) -> usize {
    match key.as_bytes()[key.len() - 1] {
        b'x' => 0,
        b'y' => 1,
        _ => 2,
    }
}

/// A decoded volume: header and per-component arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    pub data: Vec<Vec<f64>>,
}

pub fn encode_volume(volume: &Volume) -> Result<Vec<u8>> {
    let h = &volume.header;
    let n = h.voxels();
    if volume.data.len() != h.components || volume.data.iter().any(|c| c.len() != n) {
        return Err(Error::Parameter("volume arrays do not match the header".into()));
    }
    let mut out = h.encode();
    out.reserve(h.payload_bytes());
    for comp in &volume.data {
        match h.scalar {
            ScalarType::F32 => comp.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            ScalarType::F64 => comp.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let (header, offset) = VolumeHeader::decode(bytes)?;
    let expected = header.payload_bytes();
    let actual = bytes.len() - offset;
    if actual != expected {
        return Err(Error::SizeMismatch { expected, actual });
    }
    let n = header.voxels();
    let size = header.scalar.size();
    let payload = &bytes[offset..];
    let data = (0..header.components)
        .map(|c| {
            payload[c * n * size..(c + 1) * n * size]
                .chunks_exact(size)
                .map(|b| match header.scalar {
                    ScalarType::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
                    ScalarType::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
                })
                .collect()
        })
        .collect();
    Ok(Volume { header, data })
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match fs::read(path) {
        Ok(bytes) => decode_volume(&bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingInput(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    write_atomic(path, &encode_volume(volume)?)
}

fn class_code(c: VoxelClass) -> f64 {
    match c {
        VoxelClass::Exterior => 0.0,
        VoxelClass::Interior => 1.0,
        VoxelClass::NearWall => 2.0,
        VoxelClass::OpenBoundary => 3.0,
    }
}

fn class_from_code(v: f64) -> Result<VoxelClass> {
    Ok(match v {
        c if c == 0.0 => VoxelClass::Exterior,
        c if c == 1.0 => VoxelClass::Interior,
        c if c == 2.0 => VoxelClass::NearWall,
        c if c == 3.0 => VoxelClass::OpenBoundary,
        other => return Err(Error::MalformedHeader(format!("invalid voxel class code {other}"))),
    })
}

fn header_for(grid: &VolumeGrid, kind: VolumeKind, components: usize, scalar: ScalarType) -> VolumeHeader {
    VolumeHeader {
        dims: grid.dims(),
        spacing: grid.spacing(),
        origin: grid.origin(),
        components,
        scalar,
        timestep: 0,
        kind,
    }
}

pub fn velocity_volume(field: &VelocityField, scalar: ScalarType) -> Volume {
    let class = field.class.iter().map(|&c| class_code(c)).collect();
    let [u, v, w] = field.velocity.clone();
    Volume {
        header: header_for(&field.grid, VolumeKind::Velocity, 5, scalar),
        data: vec![u, v, w, field.weight.clone(), class],
    }
}

pub fn velocity_from_volume(volume: Volume) -> Result<VelocityField> {
    if volume.header.kind != VolumeKind::Velocity {
        return Err(Error::MalformedHeader("expected a velocity volume".into()));
    }
    let grid = volume.header.grid()?;
    let mut data = volume.data;
    let class = data[4].iter().map(|&c| class_from_code(c)).collect::<Result<Vec<_>>>()?;
    let weight = std::mem::take(&mut data[3]);
    let w = std::mem::take(&mut data[2]);
    let v = std::mem::take(&mut data[1]);
    let u = std::mem::take(&mut data[0]);
    let mut field = VelocityField::new(grid, [u, v, w], class)?;
    field.set_weights(weight)?;
    Ok(field)
}

pub fn scalar_volume(field: &ScalarField, scalar: ScalarType) -> Volume {
    Volume {
        header: header_for(&field.grid, VolumeKind::Scalar, 1, scalar),
        data: vec![field.values.clone()],
    }
}

pub fn scalar_from_volume(volume: Volume) -> Result<ScalarField> {
    if volume.header.kind != VolumeKind::Scalar || volume.header.components != 1 {
        return Err(Error::MalformedHeader("expected a one-component scalar volume".into()));
    }
    let grid = volume.header.grid()?;
    ScalarField::new(grid, volume.data.into_iter().next().expect("one component"))
}

pub fn write_velocity(path: &Path, field: &VelocityField, scalar: ScalarType) -> Result<()> {
    write_volume(path, &velocity_volume(field, scalar))
}

pub fn read_velocity(path: &Path) -> Result<VelocityField> {
    velocity_from_volume(read_volume(path)?)
}

pub fn write_scalar(path: &Path, field: &ScalarField, scalar: ScalarType) -> Result<()> {
    write_volume(path, &scalar_volume(field, scalar))
}

pub fn read_scalar(path: &Path) -> Result<ScalarField> {
    scalar_from_volume(read_volume(path)?)
}

fn structured_points_header(out: &mut String, title: &str, grid: &VolumeGrid) {
    let [nx, ny, nz] = grid.dims();
    let h = grid.spacing();
    let o = grid.origin();
    let _ = writeln!(out, "# vtk DataFile Version 3.0");
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "ASCII");
    let _ = writeln!(out, "DATASET STRUCTURED_POINTS");
    let _ = writeln!(out, "DIMENSIONS {nx} {ny} {nz}");
    let _ = writeln!(out, "ORIGIN {:e} {:e} {:e}", o[0], o[1], o[2]);
    let _ = writeln!(out, "SPACING {:e} {:e} {:e}", h[0], h[1], h[2]);
    let _ = writeln!(out, "POINT_DATA {}", grid.len());
}

/// Legacy ASCII structured points with one scalar array.
pub fn vtk_scalar(field: &ScalarField, name: &str) -> String {
    let mut out = String::new();
    structured_points_header(&mut out, "wallflow scalar volume", &field.grid);
    let _ = writeln!(out, "SCALARS {name} double 1");
    let _ = writeln!(out, "LOOKUP_TABLE default");
    for v in &field.values {
        let _ = writeln!(out, "{v:e}");
    }
    out
}

/// Legacy ASCII structured points with the velocity vectors and voxel class.
pub fn vtk_velocity(field: &VelocityField) -> String {
    let mut out = String::new();
    structured_points_header(&mut out, "wallflow velocity volume", &field.grid);
    let _ = writeln!(out, "VECTORS velocity double");
    for i in 0..field.grid.len() {
        let v = field.at(i);
        let _ = writeln!(out, "{:e} {:e} {:e}", v[0], v[1], v[2]);
    }
    let _ = writeln!(out, "SCALARS class int 1");
    let _ = writeln!(out, "LOOKUP_TABLE default");
    for c in &field.class {
        let _ = writeln!(out, "{}", class_code(*c) as i32);
    }
    out
}

/// Legacy ASCII polydata of the wall mesh with per-vertex WSS.
pub fn vtk_wss(mesh: &TriMesh, samples: &[WssSample]) -> Result<String> {
    if samples.len() != mesh.vertices.len() {
        return Err(Error::Parameter(format!(
            "{} WSS samples for {} vertices",
            samples.len(),
            mesh.vertices.len()
        )));
    }
    let mut out = String::new();
    let _ = writeln!(out, "# vtk DataFile Version 3.0");
    let _ = writeln!(out, "wallflow wall shear stress");
    let _ = writeln!(out, "ASCII");
    let _ = writeln!(out, "DATASET POLYDATA");
    let _ = writeln!(out, "POINTS {} double", mesh.vertices.len());
    for p in &mesh.vertices {
        let _ = writeln!(out, "{:e} {:e} {:e}", p[0], p[1], p[2]);
    }
    let _ = writeln!(out, "POLYGONS {} {}", mesh.triangles.len(), 4 * mesh.triangles.len());
    for t in &mesh.triangles {
        let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(out, "POINT_DATA {}", mesh.vertices.len());
    let _ = writeln!(out, "SCALARS wss double 1");
    let _ = writeln!(out, "LOOKUP_TABLE default");
    for s in samples {
        let _ = writeln!(out, "{:e}", s.tau);
    }
    let _ = writeln!(out, "SCALARS status int 1");
    let _ = writeln!(out, "LOOKUP_TABLE default");
    for s in samples {
        let _ = writeln!(out, "{}", s.status.code());
    }
    let _ = writeln!(out, "VECTORS wss_vector double");
    for s in samples {
        let d = s.direction;
        let _ = writeln!(out, "{:e} {:e} {:e}", s.tau * d[0], s.tau * d[1], s.tau * d[2]);
    }
    Ok(out)
}
