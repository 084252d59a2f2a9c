//! Payload → 16×16 byte-frequency grayscale image.
//!
//! Pixel `(row, col)` holds the count of byte value `16·row + col`, divided
//! by the largest count in the same payload. Only real payload bytes are
//! counted; zero padding never enters the histogram.

use std::io::{Read, Write};

use crate::ingest::MAX_PAYLOAD;

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteHistogram {
    pub counts: [u32; 256],
}

impl ByteHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// 16×16 grid of pixels in [0, 1], stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayscaleImage {
    pub pixels: [f32; IMAGE_PIXELS],
}

impl GrayscaleImage {
    pub fn zeros() -> Self {
        Self { pixels: [0.0; IMAGE_PIXELS] }
    }

    pub fn pixel(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * IMAGE_SIDE + col]
    }

    pub fn max_pixel(&self) -> f32 {
        self.pixels.iter().copied().fold(0.0, f32::max)
    }
}

/// Image plus its class id, as stored in image dataset files.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub class_id: u16,
    pub image: GrayscaleImage,
}

pub fn byte_histogram(payload: &[u8]) -> ByteHistogram {
    debug_assert!(payload.len() <= MAX_PAYLOAD);
    let mut counts = [0u32; 256];
    for &b in payload {
        counts[b as usize] += 1;
    }
    ByteHistogram { counts }
}

/// Divides every count by the histogram's maximum; all zeros when empty.
pub fn normalize_histogram(h: &ByteHistogram) -> [f32; 256] {
    let max = h.counts.iter().copied().max().unwrap_or(0);
    let mut out = [0.0f32; 256];
    if max == 0 {
        return out;
    }
    let max = max as f32;
    for (o, &c) in out.iter_mut().zip(&h.counts) {
        *o = c as f32 / max;
    }
    out
}

pub fn histogram_to_image(values: &[f32; 256]) -> GrayscaleImage {
    GrayscaleImage { pixels: *values }
}

pub fn transform_payload(payload: &[u8]) -> GrayscaleImage {
    histogram_to_image(&normalize_histogram(&byte_histogram(payload)))
}

pub const DATASET_MAGIC: &[u8; 4] = b"BSID";
pub const DATASET_VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ImageFileError {
    #[error("not an image dataset (bad magic)")]
    BadMagic,
    #[error("unsupported image dataset version {0}")]
    VersionMismatch(u8),
    #[error("record {index} has class {class_id} but the file declares {classes} classes")]
    ClassOutOfRange { index: usize, class_id: u16, classes: u16 },
    #[error("image dataset is truncated or has trailing bytes")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Image dataset file.
///
/// ```text
/// "BSID" | version:u8 | record_count:u32 | class_count:u16
/// record_count × (class_id:u16 | 256 × f32)
/// ```
/// Little-endian throughout; pixels in byte-value order.
pub fn write_image_dataset<W: Write>(mut w: W, records: &[LabeledImage], class_count: u16) -> Result<(), ImageFileError> {
    let mut buf = Vec::with_capacity(11 + records.len() * (2 + 4 * IMAGE_PIXELS));
    buf.extend_from_slice(DATASET_MAGIC);
    buf.push(DATASET_VERSION);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    buf.extend_from_slice(&class_count.to_le_bytes());
    for (index, r) in records.iter().enumerate() {
        if r.class_id >= class_count {
            return Err(ImageFileError::ClassOutOfRange { index, class_id: r.class_id, classes: class_count });
        }
        buf.extend_from_slice(&r.class_id.to_le_bytes());
        for p in &r.image.pixels {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Returns the records and the declared class count.
pub fn read_image_dataset<R: Read>(mut r: R) -> Result<(Vec<LabeledImage>, u16), ImageFileError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(ImageFileError::BadMagic);
    }
    if bytes.len() < 11 {
        return Err(ImageFileError::Truncated);
    }
    if bytes[4] != DATASET_VERSION {
        return Err(ImageFileError::VersionMismatch(bytes[4]));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let classes = u16::from_le_bytes(bytes[9..11].try_into().unwrap());
    let rec_len = 2 + 4 * IMAGE_PIXELS;
    let body = &bytes[11..];
    if count.checked_mul(rec_len) != Some(body.len()) {
        return Err(ImageFileError::Truncated);
    }
    let mut out = Vec::with_capacity(count);
    for (index, rec) in body.chunks_exact(rec_len).enumerate() {
        let class_id = u16::from_le_bytes([rec[0], rec[1]]);
        if class_id >= classes {
            return Err(ImageFileError::ClassOutOfRange { index, class_id, classes });
        }
        let mut image = GrayscaleImage::zeros();
        for (p, b) in image.pixels.iter_mut().zip(rec[2..].chunks_exact(4)) {
            *p = f32::from_le_bytes(b.try_into().unwrap());
        }
        out.push(LabeledImage { class_id, image });
    }
    Ok((out, classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn histogram_examples() {
        assert!(byte_histogram(&[]).counts.iter().all(|&c| c == 0));
        let h = byte_histogram(&[0x41, 0x41, 0x42]);
        assert_eq!((h.counts[65], h.counts[66], h.total()), (2, 1, 3));
        assert_eq!(byte_histogram(&[0u8; 1500]).counts[0], 1500);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_histogram(&byte_histogram(&[])), [0.0; 256]);
        let n = normalize_histogram(&byte_histogram(&[0x41, 0x41, 0x42]));
        assert_eq!((n[65], n[66]), (1.0, 0.5));
        let uniform = ByteHistogram { counts: [5; 256] };
        assert_eq!(normalize_histogram(&uniform), [1.0; 256]);
    }

    #[test]
    fn layout_is_row_major() {
        let mut v = [0.0f32; 256];
        v[0] = 1.0;
        assert_eq!(histogram_to_image(&v).pixel(0, 0), 1.0);
        let mut v = [0.0f32; 256];
        v[255] = 1.0;
        assert_eq!(histogram_to_image(&v).pixel(15, 15), 1.0);
        let mut v = [0.0f32; 256];
        v[37] = 0.5;
        assert_eq!(histogram_to_image(&v).pixel(2, 5), 0.5);
    }

    #[test]
    fn transform_examples() {
        assert_eq!(transform_payload(&[]), GrayscaleImage::zeros());
        let img = transform_payload(&[0x41, 0x41, 0x42]);
        assert_eq!((img.pixel(4, 1), img.pixel(4, 2)), (1.0, 0.5));
        assert_eq!(img.pixels.iter().filter(|&&p| p != 0.0).count(), 2);
    }

    #[test]
    fn dataset_file_rejects_damage() {
        let recs = vec![LabeledImage { class_id: 1, image: transform_payload(b"abc") }];
        let mut buf = Vec::new();
        write_image_dataset(&mut buf, &recs, 2).unwrap();
        assert!(matches!(read_image_dataset(&buf[..buf.len() - 1]), Err(ImageFileError::Truncated)));
        assert!(matches!(read_image_dataset(&b"XXXX"[..]), Err(ImageFileError::BadMagic)));
        assert!(matches!(write_image_dataset(Vec::new(), &recs, 1), Err(ImageFileError::ClassOutOfRange { .. })));
        let mut v = buf.clone();
        v[4] = 9;
        assert!(matches!(read_image_dataset(&v[..]), Err(ImageFileError::VersionMismatch(9))));
    }

    proptest! {
        #[test]
        fn permutation_and_repetition_invariant(payload in proptest::collection::vec(any::<u8>(), 1..300), k in 1usize..5, seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let base = transform_payload(&payload);
            let mut shuffled = payload.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(&transform_payload(&shuffled), &base);
            let repeated: Vec<u8> = payload.iter().copied().cycle().take(payload.len() * k).collect();
            if repeated.len() <= MAX_PAYLOAD {
                prop_assert_eq!(&transform_payload(&repeated), &base);
            }
            prop_assert_eq!(base.max_pixel(), 1.0);
            prop_assert!(base.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn dataset_file_round_trips_bit_exact(payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..64), 0..20)) {
            let recs: Vec<LabeledImage> = payloads
                .iter()
                .enumerate()
                .map(|(i, p)| LabeledImage { class_id: (i % 3) as u16, image: transform_payload(p) })
                .collect();
            let mut buf = Vec::new();
            write_image_dataset(&mut buf, &recs, 3).unwrap();
            let (back, classes) = read_image_dataset(&buf[..]).unwrap();
            prop_assert_eq!(classes, 3);
            prop_assert_eq!(&back, &recs);
            let mut again = Vec::new();
            write_image_dataset(&mut again, &back, 3).unwrap();
            prop_assert_eq!(again, buf);
        }
    }
}
