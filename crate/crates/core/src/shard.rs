//! EVSH shard files: a collection of regions in one little-endian binary file.
//!
//! ```text
//! 0..4   magic "EVSH"
//! 4      version (0x01)
//! 5      endian flag (0x01 = little-endian)
//! 6..8   zero
//! 8..12  u32 region_count
//! per region:
//!   u32 meta_len, meta_len bytes of UTF-8 JSON
//!     {"region_id":..,"bounds":[4 x f64],"sources":{name:{"timestamps":[[y,m,d,h],..]}}}
//!   u16 source_count
//!   per source, in lexicographic name order:
//!     u8 name_len, name bytes, u8 dtype code, u32 x 4 dims (t,c,h,w),
//!     t*c*h*w*sizeof(dtype) bytes of row-major payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::region::{catalog_profile, ensure_valid, Bounds, Dtype, Region, SourceProfile, SourceTensor, TensorData, Timestamp};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EVSH";
pub const VERSION: u8 = 0x01;
pub const LITTLE_ENDIAN: u8 = 0x01;
pub const HEADER_LEN: usize = 12;

#[derive(Serialize, Deserialize)]
struct SourceMeta {
    timestamps: Vec<[u16; 4]>,
}

// Field order here is the on-disk key order.
#[derive(Serialize, Deserialize)]
struct RegionMeta {
    region_id: String,
    bounds: [f64; 4],
    sources: BTreeMap<String, SourceMeta>,
}

/// Serialize `regions` into EVSH bytes.
pub fn encode_shard(regions: &[Region]) -> Result<Vec<u8>> {
    for r in regions {
        ensure_valid(r)?;
    }
    let mut buf = Vec::with_capacity(HEADER_LEN);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(LITTLE_ENDIAN);
    buf.extend_from_slice(&[0, 0]);
    buf.extend_from_slice(&u32_len(regions.len(), "region count")?.to_le_bytes());
    for region in regions {
        encode_region(region, &mut buf)?;
    }
    Ok(buf)
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} exceeds u32")))
}

fn encode_region(region: &Region, buf: &mut Vec<u8>) -> Result<()> {
    let meta = RegionMeta {
        region_id: region.region_id.clone(),
        bounds: region.bounds.to_array(),
        sources: region
            .sources
            .iter()
            .map(|(name, s)| {
                let timestamps = s.timestamps.iter().map(Timestamp::to_array).collect();
                (name.clone(), SourceMeta { timestamps })
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Metadata(e.to_string()))?;
    buf.extend_from_slice(&u32_len(json.len(), "metadata length")?.to_le_bytes());
    buf.extend_from_slice(&json);
    let count = u16::try_from(region.sources.len())
        .map_err(|_| Error::InvalidArgument("more than 65535 sources".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, src) in &region.sources {
        buf.push(name.len() as u8);
        buf.extend_from_slice(name.as_bytes());
        buf.push(src.data.dtype().code());
        for d in src.data.shape() {
            buf.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
        }
        match &src.data {
            TensorData::U8(a) => buf.extend(a.iter().copied()),
            TensorData::U16(a) => a.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            TensorData::F32(a) => a.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(())
}

/// Write `regions` to `path`; returns the number of bytes written.
pub fn write_shard(regions: &[Region], path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode_shard(regions)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

/// Read every region stored in the shard at `path`, in stored order.
pub fn read_shard(path: impl AsRef<Path>) -> Result<Vec<Region>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_shard(&bytes)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedPayload)?;
        let out = self.buf.get(self.pos..end).ok_or(Error::TruncatedPayload)?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse EVSH bytes.
pub fn decode_shard(bytes: &[u8]) -> Result<Vec<Region>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = cur.u8()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let endian = cur.u8()?;
    if endian != LITTLE_ENDIAN {
        return Err(Error::UnsupportedEndian(endian));
    }
    cur.take(2)?;
    let count = cur.u32()? as usize;
    let mut regions = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let region = decode_region(&mut cur)?;
        ensure_valid(&region)?;
        regions.push(region);
    }
    Ok(regions)
}

fn decode_region(cur: &mut Cursor<'_>) -> Result<Region> {
    let meta_len = cur.u32()? as usize;
    let meta: RegionMeta =
        serde_json::from_slice(cur.take(meta_len)?).map_err(|e| Error::Metadata(e.to_string()))?;
    let n_sources = cur.u16()? as usize;
    let mut sources = BTreeMap::new();
    for _ in 0..n_sources {
        let name_len = cur.u8()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Metadata(format!("source name: {e}")))?
            .to_string();
        let dtype = Dtype::from_code(cur.u8()?)?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32()? as usize;
        }
        let n: usize = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::TruncatedPayload)?;
        let payload = cur.take(n.checked_mul(dtype.size_of()).ok_or(Error::TruncatedPayload)?)?;
        let shape = (dims[0], dims[1], dims[2], dims[3]);
        let data = match dtype {
            Dtype::U8 => TensorData::U8(Array4::from_shape_vec(shape, payload.to_vec()).unwrap()),
            Dtype::U16 => TensorData::U16(
                Array4::from_shape_vec(
                    shape,
                    payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
                )
                .unwrap(),
            ),
            Dtype::F32 => TensorData::F32(
                Array4::from_shape_vec(
                    shape,
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
                .unwrap(),
            ),
        };
        let source_meta = meta
            .sources
            .get(&name)
            .ok_or_else(|| Error::Metadata(format!("no metadata for source {name:?}")))?;
        let timestamps = source_meta
            .timestamps
            .iter()
            .map(|&a| Timestamp::from_array(a))
            .collect::<Result<Vec<_>>>()?;
        // Profiles are not stored; GSD comes from the catalog when the name is known.
        let gsd_m = catalog_profile(&name).map(|p| p.gsd_m).unwrap_or(0.0);
        let profile = SourceProfile {
            name: name.clone(),
            bands: dims[1],
            gsd_m,
            height: dims[2],
            width: dims[3],
            dtype,
        };
        sources.insert(
            name,
            SourceTensor {
                profile,
                data,
                timestamps,
            },
        );
    }
    if sources.len() != meta.sources.len() {
        return Err(Error::Metadata(format!(
            "metadata lists {} sources, payload has {}",
            meta.sources.len(),
            sources.len()
        )));
    }
    Ok(Region {
        region_id: meta.region_id,
        bounds: Bounds::from_array(meta.bounds),
        sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_region() -> Region {
        let profile = SourceProfile {
            name: "sentinel2".into(),
            bands: 1,
            gsd_m: 10.0,
            height: 2,
            width: 2,
            dtype: Dtype::U8,
        };
        let data = TensorData::U8(Array4::from_shape_vec((1, 1, 2, 2), vec![1, 2, 3, 4]).unwrap());
        Region {
            region_id: "a".into(),
            bounds: Bounds::from_array([0.5, -1.0, 0.75, 1.0e-3]),
            sources: BTreeMap::from([(
                "sentinel2".to_string(),
                SourceTensor {
                    profile,
                    data,
                    timestamps: vec![Timestamp::with_hour(2019, 6, 15, 12)],
                },
            )]),
        }
    }

    #[test]
    fn empty_shard_is_header_only() {
        let bytes = encode_shard(&[]).unwrap();
        assert_eq!(bytes, b"EVSH\x01\x01\x00\x00\x00\x00\x00\x00");
        assert!(decode_shard(&bytes).unwrap().is_empty());
    }

    #[test]
    fn payload_is_row_major_at_the_tail() {
        let bytes = encode_shard(&[tiny_region()]).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[1, 2, 3, 4]);
        // dims precede the payload
        let dims = &bytes[bytes.len() - 20..bytes.len() - 4];
        assert_eq!(dims, &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes[bytes.len() - 21], 0, "dtype code u8");
    }

    #[test]
    fn metadata_key_order_is_fixed() {
        let bytes = encode_shard(&[tiny_region()]).unwrap();
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        assert_eq!(
            json,
            r#"{"region_id":"a","bounds":[0.5,-1.0,0.75,0.001],"sources":{"sentinel2":{"timestamps":[[2019,6,15,13]]}}}"#
        );
    }

    #[test]
    fn round_trip_single() {
        let r = tiny_region();
        assert_eq!(decode_shard(&encode_shard(&[r.clone()]).unwrap()).unwrap(), vec![r]);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_shard(&[]).unwrap();
        bytes[0] = b'X';
        let err = decode_shard(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "bad magic");
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = encode_shard(&[]).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_shard(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_shard(&[tiny_region()]).unwrap();
        let err = decode_shard(&bytes[..bytes.len() - 1]).unwrap_err();
        assert_eq!(err.to_string(), "truncated payload");
    }

    #[test]
    fn dtype_out_of_range() {
        let mut bytes = encode_shard(&[tiny_region()]).unwrap();
        let pos = bytes.len() - 21;
        bytes[pos] = 9;
        assert!(matches!(decode_shard(&bytes), Err(Error::DtypeCode(9))));
    }

    #[test]
    fn invalid_region_is_rejected_by_id() {
        let mut r = tiny_region();
        r.bounds.lat_max = r.bounds.lat_min;
        match encode_shard(&[r]) {
            Err(Error::InvalidRegion { region_id, violations }) => {
                assert_eq!(region_id, "a");
                assert_eq!(violations.len(), 1);
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }
}
