//! Little-endian image container:
//!
//! ```text
//! "MLAB" | version u32 = 1 | count u32 | channels u32 | height u32 | width u32
//! count × ( label u8 | channels·height·width pixels u8 )
//! ```
//!
//! Pixels map to `[0, 1]` by `/255`.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"MLAB";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

fn format_err(offset: usize, what: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        what: what.into(),
    }
}

/// Parses a container; `class_count` bounds labels when given, otherwise it is
/// inferred as `max label + 1`.
pub fn parse_image_binary(bytes: &[u8], class_count: Option<usize>, split: Split) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != IMAGE_MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != VERSION as usize {
        return Err(format_err(4, format!("unsupported version {}", word(0))));
    }
    let (count, c, h, w) = (word(1), word(2), word(3), word(4));
    if c == 0 || h == 0 || w == 0 {
        return Err(format_err(12, "zero image extent"));
    }
    let pixels = c * h * w;
    let record = 1 + pixels;
    let mut data = Vec::with_capacity(count * pixels);
    let mut labels = Vec::with_capacity(count);
    for r in 0..count {
        let start = HEADER_LEN + r * record;
        if bytes.len() < start + record {
            return Err(format_err(bytes.len(), format!("truncated record {r}")));
        }
        let label = bytes[start] as usize;
        if let Some(k) = class_count {
            if label >= k {
                return Err(format_err(start, format!("label {label} out of range for {k} classes")));
            }
        }
        labels.push(label);
        data.extend(bytes[start + 1..start + record].iter().map(|&p| p as f32 / 255.0));
    }
    let classes = class_count.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::new(Tensor::new(vec![count, c, h, w], data)?, labels, classes, split, 0)
}

pub fn read_image_binary(path: &Path, class_count: Option<usize>, split: Split) -> Result<Dataset> {
    parse_image_binary(&std::fs::read(path)?, class_count, split)
}

/// Serializes a dataset of images whose pixels are multiples of 1/255.
pub fn encode_image_binary(data: &Dataset) -> Result<Vec<u8>> {
    let [n, c, h, w] = *data.inputs().shape() else {
        return Err(Error::Data("image container needs [N, C, H, W] inputs".into()));
    };
    if data.labels().iter().any(|&l| l > u8::MAX as usize) {
        return Err(Error::Data("labels must fit in one byte".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + n * (1 + c * h * w));
    out.extend_from_slice(IMAGE_MAGIC);
    for v in [VERSION, n as u32, c as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let pixels = c * h * w;
    for (i, &label) in data.labels().iter().enumerate() {
        out.push(label as u8);
        for &p in &data.inputs().data()[i * pixels..(i + 1) * pixels] {
            out.push((p * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn write_image_binary(path: &Path, data: &Dataset) -> Result<()> {
    std::fs::write(path, encode_image_binary(data)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn container(count: u32, labels: &[u8]) -> Vec<u8> {
        let mut b = IMAGE_MAGIC.to_vec();
        for v in [1u32, count, 3, 8, 8] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for (i, &l) in labels.iter().enumerate() {
            b.push(l);
            b.extend((0..192).map(|p| ((p + i) % 256) as u8));
        }
        b
    }

    #[test]
    fn two_records() {
        let bytes = container(2, &[0, 1]);
        assert_eq!(bytes.len(), 24 + 2 * 193);
        let d = parse_image_binary(&bytes, None, Split::Train).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.sample_shape(), &[3, 8, 8]);
        assert_eq!(d.inputs().data()[1], 1.0 / 255.0);
    }

    #[test]
    fn bad_magic_at_offset_zero() {
        let mut bytes = container(1, &[0]);
        bytes[0] = b'X';
        match parse_image_binary(&bytes, None, Split::Train) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_and_out_of_range() {
        let bytes = container(2, &[0, 1]);
        assert!(matches!(
            parse_image_binary(&bytes[..bytes.len() - 1], None, Split::Train),
            Err(Error::Format { offset, .. }) if offset == bytes.len() as u64 - 1
        ));
        assert!(matches!(
            parse_image_binary(&container(2, &[0, 7]), Some(5), Split::Train),
            Err(Error::Format { offset, .. }) if offset == 24 + 193
        ));
    }

    #[test]
    fn write_read_round_trip() {
        let d = parse_image_binary(&container(2, &[3, 1]), Some(4), Split::Test).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("images.bin");
        write_image_binary(&path, &d).unwrap();
        let back = read_image_binary(&path, Some(4), Split::Test).unwrap();
        assert_eq!(back, d);
        assert_eq!(std::fs::read(&path).unwrap(), container(2, &[3, 1]));
    }
}
