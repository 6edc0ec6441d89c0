//! Split file layout, all little-endian:
//!
//! ```text
//! "MSWS" | u16 version | u32 len | header text (UTF-8)
//! u32 samples | u32 sources
//! per source: u32 rank | u32 extents | f32 payload
//! u16 label × samples
//! per source: (i16 row, i16 col) × samples
//! ```
//!
//! The header text is `split: NAME` followed by the manifest lines.

use std::path::Path;

use super::{Dataset, DatasetManifest, GroundTruth, Split};
use crate::binio::{self, put_tensor, put_u16, put_u32, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSWS";
pub const FORMAT_VERSION: u16 = 1;

pub fn write_split_bytes(d: &Dataset) -> Vec<u8> {
    let header = format!("split: {}\n{}", d.split.as_str(), d.manifest.to_text());
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u16(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, header.len() as u32);
    buf.extend_from_slice(header.as_bytes());
    put_u32(&mut buf, d.len() as u32);
    put_u32(&mut buf, d.images.len() as u32);
    for img in &d.images {
        put_tensor(&mut buf, img.shape(), img.data());
    }
    for &l in &d.labels {
        put_u16(&mut buf, l);
    }
    for offsets in &d.ground_truth().offsets {
        for &(y, x) in offsets {
            buf.extend_from_slice(&y.to_le_bytes());
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

pub fn read_split_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format("header is not UTF-8"))?;
    let (first, rest) = header
        .split_once('\n')
        .ok_or_else(|| Error::format("empty header"))?;
    let split = Split::parse(
        first
            .strip_prefix("split: ")
            .ok_or_else(|| Error::format("header must start with `split:`"))?,
    )?;
    let manifest = DatasetManifest::parse(rest)?;
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    if m != manifest.sources.len() {
        return Err(Error::format("source count disagrees with manifest"));
    }
    let images = (0..m).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let labels = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    let offsets = (0..m)
        .map(|_| (0..n).map(|_| Ok((r.i16()?, r.i16()?))).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Dataset::new(split, manifest, images, labels, GroundTruth { offsets })
}

pub fn write_split(path: &Path, d: &Dataset) -> Result<()> {
    binio::write_atomic(path, &write_split_bytes(d))
}

pub fn read_split(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Missing(format!("cannot read dataset file {}: {e}", path.display()))
    })?;
    read_split_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, GeneratorConfig, SourceSpec};

    fn data() -> crate::data::SplitDataset {
        let cfg = GeneratorConfig {
            base_count: 10,
            imbalance: 2.0,
            ..GeneratorConfig::new(SourceSpec::defaults(), 3, 11)
        };
        gen_dataset(&cfg).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let d = data();
        for split in Split::ALL {
            let bytes = write_split_bytes(d.get(split));
            let back = read_split_bytes(&bytes).unwrap();
            assert_eq!(&back, d.get(split));
            assert_eq!(write_split_bytes(&back), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = write_split_bytes(&data().train);
        assert_eq!(&bytes[..4], b"MSWS");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[10..10 + len]).unwrap();
        assert!(text.starts_with("split: train\nformat: MSWS/1\nclasses: 3\n"));
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = write_split_bytes(&data().val);
        assert!(read_split_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_split_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(read_split_bytes(&long).is_err());
    }

    #[test]
    fn save_and_load_directory() {
        let d = data();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = crate::data::SplitDataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.content_hash(), d.content_hash());
        let text = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(DatasetManifest::parse(&text).unwrap(), d.manifest);
    }
}
