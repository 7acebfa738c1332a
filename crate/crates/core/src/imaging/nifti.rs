//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Reads either byte order; always writes little-endian with matching sform
//! and qform so standard viewers agree on the voxel-to-world mapping.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::{Compression, GzBuilder};
use ndarray::{Array3, ShapeBuilder};

use super::geometry::{Geometry, Orientation};
use super::volume::{LabelVolume, Volume, LABEL_SET};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

mod off {
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DataType {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl DataType {
    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => DataType::U8,
            4 => DataType::I16,
            8 => DataType::I32,
            16 => DataType::F32,
            64 => DataType::F64,
            256 => DataType::I8,
            512 => DataType::U16,
            768 => DataType::U32,
            _ => return None,
        })
    }

    fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::I32 => 8,
            DataType::F32 => 16,
            DataType::F64 => 64,
            DataType::I8 => 256,
            DataType::U16 => 512,
            DataType::U32 => 768,
        }
    }

    fn size(self) -> usize {
        match self {
            DataType::U8 | DataType::I8 => 1,
            DataType::I16 | DataType::U16 => 2,
            DataType::I32 | DataType::U32 | DataType::F32 => 4,
            DataType::F64 => 8,
        }
    }
}

/// Header fields the pipeline uses.
#[derive(Clone, Debug)]
struct Header {
    dims: [usize; 3],
    datatype: DataType,
    vox_offset: usize,
    slope: f64,
    inter: f64,
    affine: [[f64; 4]; 3],
}

fn nifti_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| nifti_err(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Quaternion + offsets + qfac to a 3×4 affine.
fn quatern_to_affine(q: [f64; 3], offset: [f64; 3], pixdim: [f64; 3], qfac: f64) -> [[f64; 4]; 3] {
    let [b, c, d] = q;
    let a2 = 1.0 - (b * b + c * c + d * d);
    let (a, b, c, d) = if a2 < 1e-7 {
        let n = (b * b + c * c + d * d).sqrt();
        (0.0, b / n, c / n, d / n)
    } else {
        (a2.sqrt(), b, c, d)
    };
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let scale = [pixdim[0], pixdim[1], pixdim[2] * qfac];
    let mut out = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[i][j] * scale[j];
        }
        out[i][3] = offset[i];
    }
    out
}

/// Rotation part of a signed permutation to (quaternion b, c, d; qfac).
fn rotation_to_quatern(m: [[f64; 3]; 3]) -> ([f64; 3], f64) {
    let mut r = m;
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    let qfac = if det < 0.0 {
        for row in r.iter_mut() {
            row[2] = -row[2];
        }
        -1.0
    } else {
        1.0
    };
    let trace = r[0][0] + r[1][1] + r[2][2] + 1.0;
    let (mut a, mut b, mut c, mut d);
    if trace > 0.5 {
        a = 0.5 * trace.sqrt();
        b = 0.25 * (r[2][1] - r[1][2]) / a;
        c = 0.25 * (r[0][2] - r[2][0]) / a;
        d = 0.25 * (r[1][0] - r[0][1]) / a;
    } else {
        let xd = 1.0 + r[0][0] - (r[1][1] + r[2][2]);
        let yd = 1.0 + r[1][1] - (r[0][0] + r[2][2]);
        let zd = 1.0 + r[2][2] - (r[0][0] + r[1][1]);
        if xd > 1.0 {
            b = 0.5 * xd.sqrt();
            c = 0.25 * (r[0][1] + r[1][0]) / b;
            d = 0.25 * (r[0][2] + r[2][0]) / b;
            a = 0.25 * (r[2][1] - r[1][2]) / b;
        } else if yd > 1.0 {
            c = 0.5 * yd.sqrt();
            b = 0.25 * (r[0][1] + r[1][0]) / c;
            d = 0.25 * (r[1][2] + r[2][1]) / c;
            a = 0.25 * (r[0][2] - r[2][0]) / c;
        } else {
            d = 0.5 * zd.sqrt();
            b = 0.25 * (r[0][2] + r[2][0]) / d;
            c = 0.25 * (r[1][2] + r[2][1]) / d;
            a = 0.25 * (r[1][0] - r[0][1]) / d;
        }
        if a < 0.0 {
            b = -b;
            c = -c;
            d = -d;
            a = -a;
        }
    }
    let _ = a;
    ([b, c, d], qfac)
}

fn parse_header<B: ByteOrder>(buf: &[u8], path: &Path) -> Result<Header> {
    let i16_at = |o: usize| B::read_i16(&buf[o..o + 2]);
    let f32_at = |o: usize| f64::from(B::read_f32(&buf[o..o + 4]));
    let magic = &buf[off::MAGIC..off::MAGIC + 4];
    if magic != b"n+1\0" {
        return Err(nifti_err(path, format!("unsupported magic {magic:?} (single-file NIfTI-1 only)")));
    }
    let ndim = i16_at(off::DIM);
    if !(1..=7).contains(&ndim) {
        return Err(nifti_err(path, format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 3];
    for k in 0..3 {
        if (k as i16) < ndim {
            let d = i16_at(off::DIM + 2 * (k + 1));
            if d < 1 {
                return Err(nifti_err(path, format!("dim[{}] = {d}", k + 1)));
            }
            dims[k] = d as usize;
        }
    }
    for k in 3..ndim as usize {
        let d = i16_at(off::DIM + 2 * (k + 1));
        if d > 1 {
            return Err(nifti_err(path, format!("dim[{}] = {d}: only 3D volumes are supported", k + 1)));
        }
    }
    let code = i16_at(off::DATATYPE);
    let datatype = DataType::from_code(code).ok_or_else(|| nifti_err(path, format!("unsupported datatype {code}")))?;
    let vox_offset = f32_at(off::VOX_OFFSET).max(HEADER_SIZE as f64) as usize;
    let mut slope = f32_at(off::SCL_SLOPE);
    let inter = f32_at(off::SCL_INTER);
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let pixdim = [0, 1, 2, 3].map(|k| f32_at(off::PIXDIM + 4 * k));
    let spacing = [1, 2, 3].map(|k| if pixdim[k] > 0.0 { pixdim[k] } else { 1.0 });

    let sform_code = i16_at(off::SFORM_CODE);
    let qform_code = i16_at(off::QFORM_CODE);
    let affine = if sform_code > 0 {
        let mut a = [[0.0; 4]; 3];
        for (r, row) in a.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(off::SROW_X + 16 * r + 4 * c);
            }
        }
        a
    } else if qform_code > 0 {
        let q = [0, 1, 2].map(|k| f32_at(off::QUATERN_B + 4 * k));
        let o = [0, 1, 2].map(|k| f32_at(off::QOFFSET_X + 4 * k));
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        quatern_to_affine(q, o, spacing, qfac)
    } else {
        let mut a = [[0.0; 4]; 3];
        for k in 0..3 {
            a[k][k] = spacing[k];
        }
        a
    };
    Ok(Header {
        dims,
        datatype,
        vox_offset,
        slope,
        inter,
        affine,
    })
}

fn decode<B: ByteOrder>(bytes: &[u8], dt: DataType, n: usize) -> Vec<f64> {
    let sz = dt.size();
    (0..n)
        .map(|i| {
            let b = &bytes[i * sz..(i + 1) * sz];
            match dt {
                DataType::U8 => f64::from(b[0]),
                DataType::I8 => f64::from(b[0] as i8),
                DataType::I16 => f64::from(B::read_i16(b)),
                DataType::U16 => f64::from(B::read_u16(b)),
                DataType::I32 => f64::from(B::read_i32(b)),
                DataType::U32 => f64::from(B::read_u32(b)),
                DataType::F32 => f64::from(B::read_f32(b)),
                DataType::F64 => B::read_f64(b),
            }
        })
        .collect()
}

fn geometry_from_affine(a: &[[f64; 4]; 3], path: &Path) -> Result<Geometry> {
    let mut dir = [[0.0; 3]; 3];
    let mut spacing = [0.0; 3];
    for k in 0..3 {
        let norm = (0..3).map(|r| a[r][k] * a[r][k]).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(nifti_err(path, format!("degenerate affine column {k}")));
        }
        spacing[k] = norm;
        for r in 0..3 {
            dir[r][k] = a[r][k] / norm;
        }
    }
    let (orientation, oblique) = Orientation::snap(dir)?;
    if oblique {
        log::warn!(
            "{}: oblique direction matrix snapped to {}",
            path.display(),
            orientation
        );
    }
    Geometry::new(spacing, [a[0][3], a[1][3], a[2][3]], orientation)
}

/// Raw voxel values (scaled) in C order plus geometry.
fn read_raw(path: &Path) -> Result<(Array3<f64>, Geometry)> {
    let buf = read_bytes(path)?;
    if buf.len() < HEADER_SIZE {
        return Err(nifti_err(path, "file shorter than a NIfTI-1 header"));
    }
    let little = LittleEndian::read_i32(&buf[0..4]) == HEADER_SIZE as i32;
    let big = BigEndian::read_i32(&buf[0..4]) == HEADER_SIZE as i32;
    let header = if little {
        parse_header::<LittleEndian>(&buf, path)?
    } else if big {
        parse_header::<BigEndian>(&buf, path)?
    } else {
        return Err(nifti_err(path, "sizeof_hdr is not 348"));
    };
    let n: usize = header.dims.iter().product();
    let need = header.vox_offset + n * header.datatype.size();
    if buf.len() < need {
        return Err(nifti_err(
            path,
            format!("truncated data: need {need} bytes, have {}", buf.len()),
        ));
    }
    let body = &buf[header.vox_offset..need];
    let mut vals = if little {
        decode::<LittleEndian>(body, header.datatype, n)
    } else {
        decode::<BigEndian>(body, header.datatype, n)
    };
    if header.slope != 1.0 || header.inter != 0.0 {
        for v in &mut vals {
            *v = *v * header.slope + header.inter;
        }
    }
    let fortran = Array3::from_shape_vec(header.dims.f(), vals)
        .map_err(|e| nifti_err(path, e.to_string()))?;
    let data = fortran.as_standard_layout().into_owned();
    let geometry = geometry_from_affine(&header.affine, path)?;
    Ok((data, geometry))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (raw, geometry) = read_raw(path)?;
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(nifti_err(path, "non-finite voxel values"));
    }
    Volume::new(raw.mapv(|v| v as f32), geometry)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let (raw, geometry) = read_raw(path)?;
    let mut data = Array3::<u8>::zeros(raw.dim());
    for (d, &v) in data.iter_mut().zip(raw.iter()) {
        let r = v.round();
        if (v - r).abs() > 1e-6 || !(0.0..=255.0).contains(&r) || !LABEL_SET.contains(&(r as u8)) {
            return Err(nifti_err(path, format!("voxel value {v} is not a label in {{0, 1, 2}}")));
        }
        *d = r as u8;
    }
    LabelVolume::new(data, geometry)
}

fn build_header(dims: [usize; 3], geometry: &Geometry, dt: DataType) -> Result<Vec<u8>> {
    let mut h = vec![0u8; VOX_OFFSET];
    type E = LittleEndian;
    E::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    E::write_i16(&mut h[off::DIM..], 3);
    for k in 0..3 {
        let d = i16::try_from(dims[k])
            .map_err(|_| Error::Geometry(format!("dim {} exceeds NIfTI-1 limit", dims[k])))?;
        E::write_i16(&mut h[off::DIM + 2 * (k + 1)..], d);
    }
    for k in 4..8 {
        E::write_i16(&mut h[off::DIM + 2 * k..], 1);
    }
    E::write_i16(&mut h[off::DATATYPE..], dt.code());
    E::write_i16(&mut h[off::BITPIX..], (dt.size() * 8) as i16);

    let (quat, qfac) = rotation_to_quatern(geometry.orientation.matrix());
    E::write_f32(&mut h[off::PIXDIM..], qfac as f32);
    for k in 0..3 {
        E::write_f32(&mut h[off::PIXDIM + 4 * (k + 1)..], geometry.spacing[k] as f32);
    }
    for k in 4..8 {
        E::write_f32(&mut h[off::PIXDIM + 4 * k..], 1.0);
    }
    E::write_f32(&mut h[off::VOX_OFFSET..], VOX_OFFSET as f32);
    E::write_f32(&mut h[off::SCL_SLOPE..], 1.0);
    E::write_f32(&mut h[off::SCL_INTER..], 0.0);
    h[off::XYZT_UNITS] = 2; // mm
    let descrip = b"pocketseg";
    h[off::DESCRIP..off::DESCRIP + descrip.len()].copy_from_slice(descrip);
    E::write_i16(&mut h[off::QFORM_CODE..], 1);
    E::write_i16(&mut h[off::SFORM_CODE..], 1);
    for k in 0..3 {
        E::write_f32(&mut h[off::QUATERN_B + 4 * k..], quat[k] as f32);
        E::write_f32(&mut h[off::QOFFSET_X + 4 * k..], geometry.origin[k] as f32);
    }
    let a = geometry.affine();
    for r in 0..3 {
        for c in 0..4 {
            E::write_f32(&mut h[off::SROW_X + 16 * r + 4 * c..], a[r][c] as f32);
        }
    }
    h[off::MAGIC..off::MAGIC + 4].copy_from_slice(b"n+1\0");
    Ok(h)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        // Fixed mtime keeps compressed output byte-identical across runs.
        let mut enc = GzBuilder::new().mtime(0).write(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Voxel values in NIfTI (x-fastest) order.
fn fortran_order<T: Copy>(data: &Array3<T>) -> impl Iterator<Item = T> + '_ {
    data.t().into_iter().copied()
}

pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = build_header(vol.dims(), &vol.geometry, DataType::F32)?;
    bytes.reserve(vol.data.len() * 4);
    let mut word = [0u8; 4];
    for v in fortran_order(&vol.data) {
        LittleEndian::write_f32(&mut word, v);
        bytes.extend_from_slice(&word);
    }
    write_file(path, &bytes)
}

pub fn write_labels(path: impl AsRef<Path>, lbl: &LabelVolume) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = build_header(lbl.dims(), &lbl.geometry, DataType::U8)?;
    bytes.extend(fortran_order(&lbl.data));
    write_file(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quaternion_round_trip_for_all_orientations() {
        for a in "RLAPSI".chars() {
            for b in "RLAPSI".chars() {
                for c in "RLAPSI".chars() {
                    let Ok(o) = Orientation::parse(&[a, b, c].iter().collect::<String>()) else {
                        continue;
                    };
                    let (q, qfac) = rotation_to_quatern(o.matrix());
                    let aff = quatern_to_affine(q, [0.0; 3], [1.0; 3], qfac);
                    let m = o.matrix();
                    for r in 0..3 {
                        for k in 0..3 {
                            assert!((aff[r][k] - m[r][k]).abs() < 1e-6, "{o} {aff:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn volume_round_trip_nii_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([0.469, 0.8, 5.0], [-10.5, 3.25, 40.0], "PIL".parse().unwrap()).unwrap();
        let data = Array3::from_shape_fn((4, 3, 2), |(i, j, k)| (i * 6 + j * 2 + k) as f32 * 0.5 - 3.0);
        let v = Volume::new(data, g).unwrap();
        for name in ["v.nii", "v.nii.gz"] {
            let p = dir.path().join(name);
            write_volume(&p, &v).unwrap();
            let back = read_volume(&p).unwrap();
            assert_eq!(back.data, v.data);
            assert_eq!(back.geometry.orientation, g.orientation);
            for k in 0..3 {
                assert!((back.geometry.spacing[k] - g.spacing[k]).abs() < 1e-5);
                assert!((back.geometry.origin[k] - g.origin[k]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn labels_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::with_spacing([1.0, 1.0, 2.0]).unwrap();
        let data = Array3::from_shape_fn((3, 3, 3), |(i, j, k)| ((i + j + k) % 3) as u8);
        let l = LabelVolume::new(data, g).unwrap();
        let p = dir.path().join("l.nii.gz");
        write_labels(&p, &l).unwrap();
        assert_eq!(read_labels(&p).unwrap().data, l.data);

        // A float volume with a non-label value is rejected as labels.
        let v = Volume::new(Array3::from_elem((2, 2, 2), 1.5), g).unwrap();
        let p = dir.path().join("bad.nii");
        write_volume(&p, &v).unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Nifti { .. })));
    }

    #[test]
    fn gz_output_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::with_spacing([1.0; 3]).unwrap();
        let v = Volume::new(Array3::from_shape_fn((5, 4, 3), |(i, j, k)| (i + j * k) as f32), g).unwrap();
        let a = dir.path().join("a.nii.gz");
        let b = dir.path().join("b.nii.gz");
        write_volume(&a, &v).unwrap();
        write_volume(&b, &v).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn big_endian_int16_with_scaling() {
        // Hand-built big-endian header: 2×1×1 int16, slope 2, intercept 1, no transforms.
        let mut h = vec![0u8; VOX_OFFSET + 4];
        BigEndian::write_i32(&mut h[0..4], 348);
        BigEndian::write_i16(&mut h[off::DIM..], 3);
        for (k, d) in [2i16, 1, 1].iter().enumerate() {
            BigEndian::write_i16(&mut h[off::DIM + 2 * (k + 1)..], *d);
        }
        BigEndian::write_i16(&mut h[off::DATATYPE..], 4);
        BigEndian::write_i16(&mut h[off::BITPIX..], 16);
        for k in 1..4 {
            BigEndian::write_f32(&mut h[off::PIXDIM + 4 * k..], 2.0);
        }
        BigEndian::write_f32(&mut h[off::VOX_OFFSET..], 352.0);
        BigEndian::write_f32(&mut h[off::SCL_SLOPE..], 2.0);
        BigEndian::write_f32(&mut h[off::SCL_INTER..], 1.0);
        h[off::MAGIC..off::MAGIC + 4].copy_from_slice(b"n+1\0");
        BigEndian::write_i16(&mut h[352..], 3);
        BigEndian::write_i16(&mut h[354..], -4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.nii");
        fs::write(&p, &h).unwrap();
        let v = read_volume(&p).unwrap();
        assert_eq!(v.data.as_slice().unwrap(), &[7.0, -7.0]);
        assert_eq!(v.geometry.spacing, [2.0; 3]);
        assert_eq!(v.geometry.orientation, Orientation::RAS);
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        fs::write(&p, [0u8; 100]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Nifti { .. })));
    }
}
