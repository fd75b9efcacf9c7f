//! Label, scalar and vector volumes with a minimal NIfTI-1 reader/writer,
//! plus backward-mapping resampling.
//!
//! Supported file subset, byte-exact: 348-byte NIfTI-1 header plus the
//! 4-byte extender, single-file magic "n+1\0", payload at `vox_offset`
//! (352 on write), little-endian on write, either endianness on read
//! (detected through `sizeof_hdr`). Datatypes: uint8, int16, int32 (labels),
//! float32, float64 (scalars), and 5-D [X,Y,Z,1,3] float32 vector fields.
//! The voxel-to-world affine comes from the s-form rows when
//! `sform_code >= 1`, otherwise from a pixdim-scaled identity; q-form
//! quaternions are not parsed. Files ending in `.gz` (or starting with the
//! gzip magic on read) are wrapped transparently.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::exec;
use crate::fusion::{DisplacementField, FlatAffine, GridSpec};
use crate::linalg::AffineTransform;

/// Integer label per voxel, background 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: GridSpec,
    data: Vec<u32>,
}

/// Real value per voxel. `FloatDtype` records the on-disk payload width so
/// a read volume writes back bitwise identical.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    grid: GridSpec,
    data: Vec<f64>,
    dtype: FloatDtype,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatDtype {
    F32,
    F64,
}

/// Anything `read_volume` can hand back.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Label(LabelVolume),
    Scalar(ScalarVolume),
    /// 5-D [X,Y,Z,1,3] float32 vector field, world-mm displacements.
    Field(DisplacementField),
}

impl LabelVolume {
    pub fn new(grid: GridSpec, data: Vec<u32>) -> Result<Self> {
        if grid.dim() != 3 {
            return Err(Error::InvalidArgument("label volumes are 3-D".into()));
        }
        if data.len() != grid.num_voxels() {
            return Err(Error::InvalidArgument(format!(
                "label data has {} voxels, grid wants {}",
                data.len(),
                grid.num_voxels()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }
}

impl ScalarVolume {
    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(grid, data, FloatDtype::F32)
    }

    pub fn with_dtype(grid: GridSpec, data: Vec<f64>, dtype: FloatDtype) -> Result<Self> {
        if grid.dim() != 3 {
            return Err(Error::InvalidArgument("scalar volumes are 3-D".into()));
        }
        if data.len() != grid.num_voxels() {
            return Err(Error::InvalidArgument(format!(
                "scalar data has {} voxels, grid wants {}",
                data.len(),
                grid.num_voxels()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("scalar data must be finite".into()));
        }
        Ok(Self { grid, data, dtype })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dtype(&self) -> FloatDtype {
        self.dtype
    }
}

// NIfTI-1 datatype codes.
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

struct HeaderFields {
    dim: [i16; 8],
    datatype: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    scl_slope: f32,
    sform_code: i16,
    srow: [[f32; 4]; 3],
}

fn is_gz(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if is_gz(&raw) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::CorruptFile(format!("gzip decode failed: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "gz") {
        let file = std::fs::File::create(path)?;
        let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        std::fs::write(path, bytes)?;
    }
    Ok(())
}

fn get_i32(b: &[u8], off: usize, swap: bool) -> i32 {
    let v = i32::from_le_bytes(b[off..off + 4].try_into().unwrap());
    if swap {
        v.swap_bytes()
    } else {
        v
    }
}

fn get_i16(b: &[u8], off: usize, swap: bool) -> i16 {
    let v = i16::from_le_bytes(b[off..off + 2].try_into().unwrap());
    if swap {
        v.swap_bytes()
    } else {
        v
    }
}

fn get_f32(b: &[u8], off: usize, swap: bool) -> f32 {
    let raw = u32::from_le_bytes(b[off..off + 4].try_into().unwrap());
    f32::from_bits(if swap { raw.swap_bytes() } else { raw })
}

fn parse_header(bytes: &[u8]) -> Result<(HeaderFields, bool)> {
    if bytes.len() < VOX_OFFSET {
        return Err(Error::CorruptFile(format!(
            "file is {} bytes, smaller than the 352-byte header",
            bytes.len()
        )));
    }
    let swap = match get_i32(bytes, 0, false) {
        348 => false,
        v if v.swap_bytes() == 348 => true,
        v => {
            return Err(Error::CorruptFile(format!(
                "sizeof_hdr is {v}, expected 348 in either byte order"
            )))
        }
    };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        if magic[..3] == *b"ni1" {
            return Err(Error::UnsupportedFormat(
                "two-file NIfTI (magic \"ni1\") is not supported".into(),
            ));
        }
        return Err(Error::CorruptFile(format!("bad magic {magic:?}")));
    }

    let mut dim = [0i16; 8];
    for (k, d) in dim.iter_mut().enumerate() {
        *d = get_i16(bytes, 40 + 2 * k, swap);
    }
    let mut pixdim = [0f32; 8];
    for (k, p) in pixdim.iter_mut().enumerate() {
        *p = get_f32(bytes, 76 + 4 * k, swap);
    }
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = get_f32(bytes, 280 + 16 * r + 4 * c, swap);
        }
    }
    Ok((
        HeaderFields {
            dim,
            datatype: get_i16(bytes, 70, swap),
            pixdim,
            vox_offset: get_f32(bytes, 108, swap),
            scl_slope: get_f32(bytes, 112, swap),
            sform_code: get_i16(bytes, 254, swap),
            srow,
        },
        swap,
    ))
}

fn grid_from_header(h: &HeaderFields, dims: [usize; 3]) -> Result<GridSpec> {
    let mut m = DMatrix::<f64>::identity(4, 4);
    if h.sform_code >= 1 {
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = f64::from(h.srow[r][c]);
            }
        }
    } else {
        for k in 0..3 {
            let p = h.pixdim[k + 1];
            m[(k, k)] = if p > 0.0 { f64::from(p) } else { 1.0 };
        }
    }
    GridSpec::new(dims.to_vec(), m)
        .map_err(|_| Error::CorruptFile("header affine is singular".into()))
}

fn payload<'a>(bytes: &'a [u8], h: &HeaderFields, elem_size: usize, count: usize) -> Result<&'a [u8]> {
    let start = h.vox_offset as usize;
    if (h.vox_offset as f64) < HEADER_SIZE as f64 {
        return Err(Error::CorruptFile(format!(
            "vox_offset {} is inside the header",
            h.vox_offset
        )));
    }
    let need = count * elem_size;
    if bytes.len() < start + need {
        return Err(Error::CorruptFile(format!(
            "payload truncated: need {} bytes at offset {start}, file has {}",
            need,
            bytes.len()
        )));
    }
    Ok(&bytes[start..start + need])
}

fn decode_scalars(raw: &[u8], datatype: i16, swap: bool) -> Vec<f64> {
    match datatype {
        DT_UINT8 => raw.iter().map(|&v| f64::from(v)).collect(),
        DT_INT16 => raw
            .chunks_exact(2)
            .map(|c| {
                let v = i16::from_le_bytes(c.try_into().unwrap());
                f64::from(if swap { v.swap_bytes() } else { v })
            })
            .collect(),
        DT_INT32 => raw
            .chunks_exact(4)
            .map(|c| {
                let v = i32::from_le_bytes(c.try_into().unwrap());
                f64::from(if swap { v.swap_bytes() } else { v })
            })
            .collect(),
        DT_FLOAT32 => raw
            .chunks_exact(4)
            .map(|c| {
                let v = u32::from_le_bytes(c.try_into().unwrap());
                f64::from(f32::from_bits(if swap { v.swap_bytes() } else { v }))
            })
            .collect(),
        _ => raw
            .chunks_exact(8)
            .map(|c| {
                let v = u64::from_le_bytes(c.try_into().unwrap());
                f64::from_bits(if swap { v.swap_bytes() } else { v })
            })
            .collect(),
    }
}

fn elem_size(datatype: i16) -> usize {
    match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        _ => 8,
    }
}

/// Read a label, scalar or vector-field volume; the payload dtype decides
/// which (integers are labels, floats are scalars, 5-D is a field).
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (h, swap) = parse_header(&bytes)?;

    if h.scl_slope != 0.0 && h.scl_slope != 1.0 {
        eprintln!(
            "warning: {}: scl_slope = {} is ignored (intensities read as stored)",
            path.display(),
            h.scl_slope
        );
    }
    if !matches!(
        h.datatype,
        DT_UINT8 | DT_INT16 | DT_INT32 | DT_FLOAT32 | DT_FLOAT64
    ) {
        return Err(Error::UnsupportedFormat(format!(
            "datatype {} (supported: uint8, int16, int32, float32, float64)",
            h.datatype
        )));
    }

    let ndim = h.dim[0];
    let spatial_ok = h.dim[1] > 0 && h.dim[2] > 0 && h.dim[3] > 0;
    if !spatial_ok {
        return Err(Error::CorruptFile(format!(
            "non-positive spatial dims {:?}",
            &h.dim[1..4]
        )));
    }
    let dims = [h.dim[1] as usize, h.dim[2] as usize, h.dim[3] as usize];
    let nvox: usize = dims.iter().product();

    match ndim {
        3 | 4 if ndim == 3 || h.dim[4] == 1 => {
            let grid = grid_from_header(&h, dims)?;
            let raw = payload(&bytes, &h, elem_size(h.datatype), nvox)?;
            let values = decode_scalars(raw, h.datatype, swap);
            match h.datatype {
                DT_UINT8 | DT_INT16 | DT_INT32 => {
                    let mut labels = Vec::with_capacity(nvox);
                    for &v in &values {
                        if v < 0.0 {
                            return Err(Error::UnsupportedFormat(format!(
                                "negative value {v} in integer volume; labels must be nonnegative"
                            )));
                        }
                        labels.push(v as u32);
                    }
                    Ok(Volume::Label(LabelVolume::new(grid, labels)?))
                }
                dt => Ok(Volume::Scalar(ScalarVolume::with_dtype(
                    grid,
                    values,
                    if dt == DT_FLOAT32 {
                        FloatDtype::F32
                    } else {
                        FloatDtype::F64
                    },
                )?)),
            }
        }
        5 => {
            if h.dim[4] != 1 || h.dim[5] != 3 {
                return Err(Error::UnsupportedFormat(format!(
                    "5-D volume must be [X,Y,Z,1,3], got dim[4]={} dim[5]={}",
                    h.dim[4], h.dim[5]
                )));
            }
            if h.datatype != DT_FLOAT32 {
                return Err(Error::UnsupportedFormat(format!(
                    "vector fields must be float32, got datatype {}",
                    h.datatype
                )));
            }
            let grid = grid_from_header(&h, dims)?;
            let raw = payload(&bytes, &h, 4, nvox * 3)?;
            let planes = decode_scalars(raw, DT_FLOAT32, swap);
            // File stores component-slowest; memory is component-minor.
            let mut vectors = vec![0.0f64; nvox * 3];
            for c in 0..3 {
                for v in 0..nvox {
                    vectors[v * 3 + c] = planes[c * nvox + v];
                }
            }
            Ok(Volume::Field(DisplacementField::from_vectors(grid, vectors)?))
        }
        d => Err(Error::UnsupportedFormat(format!(
            "dim[0] = {d} (supported: 3-D volumes and 5-D [X,Y,Z,1,3] fields)"
        ))),
    }
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn build_header(grid: &GridSpec, dim: [i16; 8], datatype: i16, bitpix: i16, intent: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    put_i32(&mut h, 0, 348);
    for (k, d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * k, *d);
    }
    put_i16(&mut h, 68, intent);
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    // pixdim: qfac then voxel spacings (column norms of the linear part).
    put_f32(&mut h, 76, 1.0);
    let m = grid.voxel_to_world();
    for k in 0..3 {
        let s = (0..3).map(|r| m[(r, k)] * m[(r, k)]).sum::<f64>().sqrt();
        put_f32(&mut h, 76 + 4 * (k + 1), s as f32);
    }
    for k in 4..8 {
        put_f32(&mut h, 76 + 4 * k, 1.0);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0); // scl_slope
    put_f32(&mut h, 116, 0.0); // scl_inter
    h[123] = 2; // xyzt_units: mm
    put_i16(&mut h, 252, 0); // qform_code
    put_i16(&mut h, 254, 1); // sform_code
    for r in 0..3 {
        for c in 0..4 {
            put_f32(&mut h, 280 + 16 * r + 4 * c, m[(r, c)] as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    // bytes 348..352 stay zero: no header extensions.
    h
}

/// Write a label volume with the smallest integer dtype that fits.
pub fn write_label_volume(volume: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let dims = volume.grid().dims();
    let dim = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    let max = volume.data().iter().copied().max().unwrap_or(0);
    let (datatype, bitpix) = if max <= u32::from(u8::MAX) {
        (DT_UINT8, 8)
    } else if max <= i16::MAX as u32 {
        (DT_INT16, 16)
    } else if max <= i32::MAX as u32 {
        (DT_INT32, 32)
    } else {
        return Err(Error::InvalidArgument(format!(
            "label value {max} does not fit in int32"
        )));
    };
    let mut bytes = build_header(volume.grid(), dim, datatype, bitpix, 0);
    match datatype {
        DT_UINT8 => bytes.extend(volume.data().iter().map(|&v| v as u8)),
        DT_INT16 => {
            for &v in volume.data() {
                bytes.extend_from_slice(&(v as i16).to_le_bytes());
            }
        }
        _ => {
            for &v in volume.data() {
                bytes.extend_from_slice(&(v as i32).to_le_bytes());
            }
        }
    }
    write_bytes(path.as_ref(), &bytes)
}

/// Write a scalar volume (float32 by default, float64 if the volume came
/// from a float64 file).
pub fn write_scalar_volume(volume: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    let dims = volume.grid().dims();
    let dim = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    let (datatype, bitpix) = match volume.dtype() {
        FloatDtype::F32 => (DT_FLOAT32, 32),
        FloatDtype::F64 => (DT_FLOAT64, 64),
    };
    let mut bytes = build_header(volume.grid(), dim, datatype, bitpix, 0);
    match volume.dtype() {
        FloatDtype::F32 => {
            for &v in volume.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        FloatDtype::F64 => {
            for &v in volume.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    write_bytes(path.as_ref(), &bytes)
}

/// Write a displacement field as a 5-D [X,Y,Z,1,3] float32 vector volume
/// (world-mm vectors, grid affine in the s-form).
pub fn write_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let grid = field.grid();
    if grid.dim() != 3 {
        return Err(Error::InvalidArgument("only 3-D fields are written to file".into()));
    }
    let dims = grid.dims();
    let nvox = grid.num_voxels();
    let dim = [5, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 3, 1, 1];
    // NIFTI_INTENT_VECTOR
    let mut bytes = build_header(grid, dim, DT_FLOAT32, 32, 1007);
    let vectors = field.vectors();
    for c in 0..3 {
        for v in 0..nvox {
            bytes.extend_from_slice(&(vectors[v * 3 + c] as f32).to_le_bytes());
        }
    }
    write_bytes(path.as_ref(), &bytes)
}

/// Dispatch on the volume kind.
pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    match volume {
        Volume::Label(v) => write_label_volume(v, path),
        Volume::Scalar(v) => write_scalar_volume(v, path),
        Volume::Field(f) => write_field(f, path),
    }
}

/// A backward-mapping transform: maps target (reference) world coordinates
/// into the moving volume's world coordinates.
#[derive(Debug, Clone, Copy)]
pub enum ResampleTransform<'a> {
    Affine(&'a AffineTransform),
    Dense(&'a DisplacementField),
}

impl ResampleTransform<'_> {
    #[inline]
    fn map(&self, x: [f64; 3]) -> [f64; 3] {
        match self {
            ResampleTransform::Affine(a) => FlatAffine::from_affine(a).apply(x),
            ResampleTransform::Dense(f) => {
                let u = f.sample_world(&x);
                [x[0] + u[0], x[1] + u[1], x[2] + u[2]]
            }
        }
    }
}

/// Pull the moving labels onto `target_grid` through a backward-mapping
/// transform, nearest-neighbor; outside the moving grid the label is 0.
pub fn resample_labels(
    moving: &LabelVolume,
    transform: ResampleTransform<'_>,
    target_grid: &GridSpec,
) -> Result<LabelVolume> {
    if target_grid.dim() != 3 {
        return Err(Error::InvalidArgument("target grid must be 3-D".into()));
    }
    // Flatten the per-kind state once; the dense path keeps its own view.
    let affine_flat = match transform {
        ResampleTransform::Affine(a) => {
            if a.dim() != 3 {
                return Err(Error::InvalidArgument("transform must be 3-D".into()));
            }
            Some(FlatAffine::from_affine(a))
        }
        ResampleTransform::Dense(_) => None,
    };
    let tgt_dims = [target_grid.dims()[0], target_grid.dims()[1], target_grid.dims()[2]];
    let tgt_vtw = FlatAffine::from_homogeneous(target_grid.voxel_to_world(), 3);
    let mov_wtv = FlatAffine::from_homogeneous(moving.grid().world_to_voxel(), 3);
    let mov_dims = [moving.grid().dims()[0], moving.grid().dims()[1], moving.grid().dims()[2]];
    let src = moving.data();

    let data: Vec<u32> = exec::map_indices(target_grid.num_voxels(), |voxel| {
        let i = voxel % tgt_dims[0];
        let rest = voxel / tgt_dims[0];
        let x = tgt_vtw.apply([i as f64, (rest % tgt_dims[1]) as f64, (rest / tgt_dims[1]) as f64]);
        let mapped = match (&affine_flat, &transform) {
            (Some(fa), _) => fa.apply(x),
            (None, t) => t.map(x),
        };
        let p = mov_wtv.apply(mapped);
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let r = p[k].round();
            if r < 0.0 || r > (mov_dims[k] - 1) as f64 {
                return 0;
            }
            idx[k] = r as usize;
        }
        src[idx[0] + mov_dims[0] * (idx[1] + mov_dims[1] * idx[2])]
    });
    LabelVolume::new(target_grid.clone(), data)
}

/// Pull moving intensities onto `target_grid`, multilinear; outside -> 0.
pub fn resample_scalar(
    moving: &ScalarVolume,
    transform: ResampleTransform<'_>,
    target_grid: &GridSpec,
) -> Result<ScalarVolume> {
    if target_grid.dim() != 3 {
        return Err(Error::InvalidArgument("target grid must be 3-D".into()));
    }
    let tgt_dims = [target_grid.dims()[0], target_grid.dims()[1], target_grid.dims()[2]];
    let tgt_vtw = FlatAffine::from_homogeneous(target_grid.voxel_to_world(), 3);
    let mov_wtv = FlatAffine::from_homogeneous(moving.grid().world_to_voxel(), 3);
    let mov_dims = [moving.grid().dims()[0], moving.grid().dims()[1], moving.grid().dims()[2]];
    let src = moving.data();

    let data: Vec<f64> = exec::map_indices(target_grid.num_voxels(), |voxel| {
        let i = voxel % tgt_dims[0];
        let rest = voxel / tgt_dims[0];
        let x = tgt_vtw.apply([i as f64, (rest % tgt_dims[1]) as f64, (rest / tgt_dims[1]) as f64]);
        let p = mov_wtv.apply(transform.map(x));
        for k in 0..3 {
            if p[k] < 0.0 || p[k] > (mov_dims[k] - 1) as f64 {
                return 0.0;
            }
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for k in 0..3 {
            let b = p[k].floor().min(mov_dims[k].saturating_sub(2) as f64).max(0.0);
            base[k] = b as usize;
            frac[k] = if mov_dims[k] > 1 { p[k] - b } else { 0.0 };
        }
        let mut acc = 0.0;
        for corner in 0..8usize {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for k in 0..3 {
                if corner & (1 << k) != 0 {
                    w *= frac[k];
                    idx[k] = (base[k] + 1).min(mov_dims[k] - 1);
                } else {
                    w *= 1.0 - frac[k];
                    idx[k] = base[k];
                }
            }
            if w != 0.0 {
                acc += w * src[idx[0] + mov_dims[0] * (idx[1] + mov_dims[1] * idx[2])];
            }
        }
        acc
    });
    ScalarVolume::with_dtype(target_grid.clone(), data, moving.dtype())
}
