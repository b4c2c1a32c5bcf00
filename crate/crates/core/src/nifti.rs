//! Minimal single-file NIfTI-1 I/O: little-endian writes, endian-adaptive
//! reads, four voxel types (uint8, int16, float32, float64), no
//! compression and no extensions.
//!
//! The 348-byte header is laid out exactly per the standard; voxel data
//! starts at `vox_offset` (352 on write: header plus the four-byte "no
//! extensions" indicator). On read the `sizeof_hdr` field decides byte
//! order: 348 read natively means the file matches host order assumptions
//! fail-safe, otherwise every multi-byte field and voxel is swapped.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

const HEADER_LEN: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
const MAGIC_DETACHED: [u8; 4] = *b"ni1\0";

/// The header fields this crate reads and writes; everything else is
/// zeroed on write and ignored on read.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
}

impl NiftiHeader {
    /// Default header for a `[D, H, W]` volume with per-axis spacing in
    /// the same order: unit slope, zero intercept, diagonal affine.
    pub fn for_volume(extents: [usize; 3], spacing: [f64; 3], datatype: i16) -> Result<Self> {
        let [d, h, w] = extents;
        if extents.iter().any(|&e| e == 0 || e > i16::MAX as usize) {
            return Err(Error::Nifti(format!("extents {extents:?} out of range")));
        }
        let bitpix = bitpix_for(datatype)?;
        let (sd, sh, sw) = (spacing[0] as f32, spacing[1] as f32, spacing[2] as f32);
        Ok(Self {
            dim: [3, w as i16, h as i16, d as i16, 1, 1, 1, 1],
            datatype,
            bitpix,
            pixdim: [1.0, sw, sh, sd, 0.0, 0.0, 0.0, 0.0],
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            srow: [
                [sw, 0.0, 0.0, 0.0],
                [0.0, sh, 0.0, 0.0],
                [0.0, 0.0, sd, 0.0],
            ],
            magic: MAGIC_SINGLE,
        })
    }

    /// Volume extents as `[D, H, W]`.
    pub fn extents(&self) -> Result<[usize; 3]> {
        if self.dim[0] != 3 {
            return Err(Error::Nifti(format!("expected rank 3, got {}", self.dim[0])));
        }
        if self.dim[1..4].iter().any(|&n| n <= 0) {
            return Err(Error::Nifti(format!("non-positive dim {:?}", &self.dim[..4])));
        }
        Ok([self.dim[3] as usize, self.dim[2] as usize, self.dim[1] as usize])
    }

    /// Voxel spacing as `[D, H, W]`.
    pub fn spacing(&self) -> [f64; 3] {
        [
            self.pixdim[3] as f64,
            self.pixdim[2] as f64,
            self.pixdim[1] as f64,
        ]
    }
}

fn bitpix_for(datatype: i16) -> Result<i16> {
    match datatype {
        DT_UINT8 => Ok(8),
        DT_INT16 => Ok(16),
        DT_FLOAT32 => Ok(32),
        DT_FLOAT64 => Ok(64),
        other => Err(Error::Nifti(format!("unsupported datatype code {other}"))),
    }
}

/// Voxel payload in file order (fastest axis first, matching `[D, H, W]`
/// row-major memory order).
#[derive(Debug, Clone, PartialEq)]
pub enum NiftiData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl NiftiData {
    pub fn len(&self) -> usize {
        match self {
            NiftiData::U8(v) => v.len(),
            NiftiData::I16(v) => v.len(),
            NiftiData::F32(v) => v.len(),
            NiftiData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn datatype(&self) -> i16 {
        match self {
            NiftiData::U8(_) => DT_UINT8,
            NiftiData::I16(_) => DT_INT16,
            NiftiData::F32(_) => DT_FLOAT32,
            NiftiData::F64(_) => DT_FLOAT64,
        }
    }

    /// Values as f32 with the slope/intercept applied; a zero slope means
    /// unscaled per the standard.
    pub fn scaled(&self, slope: f32, inter: f32) -> Vec<f32> {
        let raw: Vec<f32> = match self {
            NiftiData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            NiftiData::I16(v) => v.iter().map(|&x| x as f32).collect(),
            NiftiData::F32(v) => v.clone(),
            NiftiData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        };
        if slope == 0.0 {
            return raw;
        }
        raw.into_iter().map(|x| slope * x + inter).collect()
    }
}

/// Writes a volume with the default header (see
/// [`NiftiHeader::for_volume`]).
pub fn write_nifti(
    path: &Path,
    data: &NiftiData,
    extents: [usize; 3],
    spacing: [f64; 3],
) -> Result<()> {
    let header = NiftiHeader::for_volume(extents, spacing, data.datatype())?;
    write_nifti_with(path, &header, data)
}

/// Writes a volume under a caller-supplied header; use this to override
/// the affine or the scaling fields.
pub fn write_nifti_with(path: &Path, header: &NiftiHeader, data: &NiftiData) -> Result<()> {
    let extents = header.extents()?;
    let voxels: usize = extents.iter().product();
    if data.len() != voxels {
        return Err(Error::Nifti(format!(
            "{} voxels supplied for extents {extents:?}",
            data.len()
        )));
    }
    if data.datatype() != header.datatype || bitpix_for(header.datatype)? != header.bitpix {
        return Err(Error::Nifti("datatype/bitpix mismatch".into()));
    }
    if header.magic != MAGIC_SINGLE {
        return Err(Error::Nifti("only single-file magic supported".into()));
    }
    if (header.vox_offset as usize) < DATA_OFFSET {
        return Err(Error::Nifti(format!(
            "vox_offset {} below minimum {DATA_OFFSET}",
            header.vox_offset
        )));
    }

    let mut out = Vec::with_capacity(DATA_OFFSET + data.len() * (header.bitpix as usize / 8));
    out.extend((HEADER_LEN as i32).to_le_bytes()); // sizeof_hdr
    out.extend([0u8; 10]); // data_type
    out.extend([0u8; 18]); // db_name
    out.extend(0i32.to_le_bytes()); // extents
    out.extend(0i16.to_le_bytes()); // session_error
    out.extend([0u8; 2]); // regular, dim_info
    for v in header.dim {
        out.extend(v.to_le_bytes());
    }
    out.extend([0u8; 12]); // intent_p1..p3
    out.extend(0i16.to_le_bytes()); // intent_code
    out.extend(header.datatype.to_le_bytes());
    out.extend(header.bitpix.to_le_bytes());
    out.extend(0i16.to_le_bytes()); // slice_start
    for v in header.pixdim {
        out.extend(v.to_le_bytes());
    }
    out.extend(header.vox_offset.to_le_bytes());
    out.extend(header.scl_slope.to_le_bytes());
    out.extend(header.scl_inter.to_le_bytes());
    out.extend(0i16.to_le_bytes()); // slice_end
    out.extend([0u8; 2]); // slice_code, xyzt_units
    out.extend([0u8; 16]); // cal_max, cal_min, slice_duration, toffset
    out.extend([0u8; 8]); // glmax, glmin
    out.extend([0u8; 80]); // descrip
    out.extend([0u8; 24]); // aux_file
    out.extend(0i16.to_le_bytes()); // qform_code
    out.extend(1i16.to_le_bytes()); // sform_code
    out.extend([0u8; 24]); // quatern_b..d, qoffset_x..z
    for row in header.srow {
        for v in row {
            out.extend(v.to_le_bytes());
        }
    }
    out.extend([0u8; 16]); // intent_name
    out.extend(header.magic);
    debug_assert_eq!(out.len(), HEADER_LEN);
    out.extend([0u8; 4]); // extension indicator: none
    match data {
        NiftiData::U8(v) => out.extend(v.iter().copied()),
        NiftiData::I16(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
        NiftiData::F32(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
        NiftiData::F64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
    }
    fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    swap: bool,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Nifti("truncated file".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn skip(&mut self, n: usize) -> Result<()> {
        self.take(n).map(|_| ())
    }

    fn i16(&mut self) -> Result<i16> {
        let b: [u8; 2] = self.take(2)?.try_into().expect("len checked");
        Ok(if self.swap {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        })
    }

    fn f32(&mut self) -> Result<f32> {
        let b: [u8; 4] = self.take(4)?.try_into().expect("len checked");
        Ok(if self.swap {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        })
    }
}

/// Reads a single-file NIfTI-1 volume, detecting endianness from
/// `sizeof_hdr`. Voxels come back raw; apply
/// [`NiftiData::scaled`] with the header's slope and intercept for
/// calibrated values.
pub fn read_nifti(path: &Path) -> Result<(NiftiHeader, NiftiData)> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Nifti("truncated file".into()));
    }
    let raw_size = i32::from_le_bytes(bytes[..4].try_into().expect("len checked"));
    let swap = match raw_size {
        x if x == HEADER_LEN as i32 => false,
        x if x.swap_bytes() == HEADER_LEN as i32 => true,
        other => {
            return Err(Error::Nifti(format!(
                "sizeof_hdr {other} is not 348 in either byte order"
            )))
        }
    };

    let mut c = Cursor {
        bytes: &bytes,
        pos: 4,
        swap,
    };
    c.skip(36)?; // data_type..dim_info
    let mut dim = [0i16; 8];
    for v in &mut dim {
        *v = c.i16()?;
    }
    c.skip(14)?; // intent_p1..p3, intent_code
    let datatype = c.i16()?;
    let bitpix = c.i16()?;
    c.skip(2)?; // slice_start
    let mut pixdim = [0.0f32; 8];
    for v in &mut pixdim {
        *v = c.f32()?;
    }
    let vox_offset = c.f32()?;
    let scl_slope = c.f32()?;
    let scl_inter = c.f32()?;
    c.skip(160)?; // slice_end..qoffset_z
    let mut srow = [[0.0f32; 4]; 3];
    for row in &mut srow {
        for v in row.iter_mut() {
            *v = c.f32()?;
        }
    }
    c.skip(16)?; // intent_name
    let magic: [u8; 4] = c.take(4)?.try_into().expect("len checked");
    debug_assert_eq!(c.pos, HEADER_LEN);

    if magic == MAGIC_DETACHED {
        return Err(Error::Nifti("detached header files are unsupported".into()));
    }
    if magic != MAGIC_SINGLE {
        return Err(Error::Nifti(format!("bad magic {magic:?}")));
    }
    if bitpix_for(datatype)? != bitpix {
        return Err(Error::Nifti(format!(
            "bitpix {bitpix} inconsistent with datatype {datatype}"
        )));
    }
    if !vox_offset.is_finite() || (vox_offset as usize) < DATA_OFFSET {
        return Err(Error::Nifti(format!(
            "vox_offset {vox_offset} below minimum {DATA_OFFSET}"
        )));
    }

    let header = NiftiHeader {
        dim,
        datatype,
        bitpix,
        pixdim,
        vox_offset,
        scl_slope,
        scl_inter,
        srow,
        magic,
    };
    let voxels: usize = header.extents()?.iter().product();
    let start = vox_offset as usize;
    let need = voxels * (bitpix as usize / 8);
    if bytes.len() < start + need {
        return Err(Error::Nifti("truncated file".into()));
    }
    let payload = &bytes[start..start + need];
    let data = match datatype {
        DT_UINT8 => NiftiData::U8(payload.to_vec()),
        DT_INT16 => NiftiData::I16(decode(payload, swap, i16::from_le_bytes, i16::from_be_bytes)),
        DT_FLOAT32 => {
            NiftiData::F32(decode(payload, swap, f32::from_le_bytes, f32::from_be_bytes))
        }
        DT_FLOAT64 => {
            NiftiData::F64(decode(payload, swap, f64::from_le_bytes, f64::from_be_bytes))
        }
        _ => unreachable!("datatype validated above"),
    };
    Ok((header, data))
}

fn decode<T, const N: usize>(
    payload: &[u8],
    swap: bool,
    le: fn([u8; N]) -> T,
    be: fn([u8; N]) -> T,
) -> Vec<T> {
    payload
        .chunks_exact(N)
        .map(|c| {
            let b: [u8; N] = c.try_into().expect("chunks_exact");
            if swap {
                be(b)
            } else {
                le(b)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const GOLDEN: &[u8] =
        include_bytes!(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden_2x2x2.nii"));
    const GOLDEN_BE: &[u8] = include_bytes!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/golden_2x2x2_be.nii"
    ));
    const GOLDEN_VOXELS: [f32; 8] = [0.5, -1.25, 2.0, 3.5, -4.75, 5.0, 6.25, 7.5];

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trips_every_datatype() {
        let dir = tmp();
        let extents = [3, 4, 5];
        let n = 60usize;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cases = [
            NiftiData::U8((0..n).map(|_| rng.gen()).collect()),
            NiftiData::I16((0..n).map(|_| rng.gen()).collect()),
            NiftiData::F32((0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()),
            NiftiData::F64((0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()),
        ];
        for data in &cases {
            let path = dir.path().join(format!("t{}.nii", data.datatype()));
            write_nifti(&path, data, extents, [1.5, 1.0, 2.0]).unwrap();
            let (header, back) = read_nifti(&path).unwrap();
            assert_eq!(&back, data);
            assert_eq!(header.extents().unwrap(), extents);
            assert_eq!(header.spacing(), [1.5, 1.0, 2.0]);
            assert_eq!(header.vox_offset, 352.0);
            assert_eq!((header.scl_slope, header.scl_inter), (1.0, 0.0));
            assert_eq!(header.magic, *b"n+1\0");
            assert_eq!(
                header,
                NiftiHeader::for_volume(extents, [1.5, 1.0, 2.0], data.datatype()).unwrap()
            );
        }
    }

    #[test]
    fn emitted_bytes_match_golden_dump() {
        let dir = tmp();
        let path = dir.path().join("golden.nii");
        write_nifti(
            &path,
            &NiftiData::F32(GOLDEN_VOXELS.to_vec()),
            [2, 2, 2],
            [1.0, 2.0, 3.0],
        )
        .unwrap();
        let written = std::fs::read(&path).unwrap();
        assert_eq!(written.len(), GOLDEN.len());
        assert_eq!(written, GOLDEN, "byte-for-byte header and payload");
        assert_eq!(&GOLDEN[..4], &348i32.to_le_bytes());
    }

    #[test]
    fn big_endian_twin_decodes_identically() {
        let dir = tmp();
        let le = dir.path().join("le.nii");
        let be = dir.path().join("be.nii");
        std::fs::write(&le, GOLDEN).unwrap();
        std::fs::write(&be, GOLDEN_BE).unwrap();
        let (h_le, d_le) = read_nifti(&le).unwrap();
        let (h_be, d_be) = read_nifti(&be).unwrap();
        assert_eq!(h_le, h_be);
        assert_eq!(d_le, d_be);
        assert_eq!(d_le, NiftiData::F32(GOLDEN_VOXELS.to_vec()));
    }

    #[test]
    fn rejects_malformed_files() {
        let dir = tmp();
        let patch = |bytes: &mut Vec<u8>, at: usize, with: &[u8]| {
            bytes[at..at + with.len()].copy_from_slice(with);
        };
        let write_read = |name: &str, bytes: &[u8]| {
            let p = dir.path().join(name);
            std::fs::write(&p, bytes).unwrap();
            read_nifti(&p)
        };

        let mut detached = GOLDEN.to_vec();
        patch(&mut detached, 344, b"ni1\0");
        assert!(matches!(write_read("detached.nii", &detached), Err(Error::Nifti(_))));

        let mut bad_dtype = GOLDEN.to_vec();
        patch(&mut bad_dtype, 70, &8i16.to_le_bytes());
        assert!(write_read("dtype.nii", &bad_dtype).is_err());

        let mut low_offset = GOLDEN.to_vec();
        patch(&mut low_offset, 108, &348.0f32.to_le_bytes());
        assert!(write_read("offset.nii", &low_offset).is_err());

        assert!(write_read("trunc.nii", &GOLDEN[..380]).is_err());
        assert!(write_read("tiny.nii", &GOLDEN[..100]).is_err());

        let mut bad_size = GOLDEN.to_vec();
        patch(&mut bad_size, 0, &500i32.to_le_bytes());
        assert!(write_read("size.nii", &bad_size).is_err());
    }

    #[test]
    fn slope_and_intercept_scale_on_request() {
        let dir = tmp();
        let path = dir.path().join("scaled.nii");
        let mut header = NiftiHeader::for_volume([2, 2, 2], [1.0; 3], DT_INT16).unwrap();
        header.scl_slope = 2.0;
        header.scl_inter = 0.5;
        let data = NiftiData::I16(vec![0, 1, 2, 3, -1, -2, 10, 100]);
        write_nifti_with(&path, &header, &data).unwrap();
        let (h, d) = read_nifti(&path).unwrap();
        let scaled = d.scaled(h.scl_slope, h.scl_inter);
        assert_eq!(scaled[1], 2.5);
        assert_eq!(scaled[4], -1.5);
        assert_eq!(scaled[7], 200.5);
        // Zero slope means raw values.
        assert_eq!(d.scaled(0.0, 9.0)[7], 100.0);
    }

    #[test]
    fn validates_payload_against_extents() {
        let dir = tmp();
        let path = dir.path().join("short.nii");
        let err = write_nifti(&path, &NiftiData::U8(vec![1, 2, 3]), [2, 2, 2], [1.0; 3]);
        assert!(err.is_err());
    }
}
