//! Binary detection stream (`DETS`), the pipeline's input format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic    "DETS"
//! version  u32 = 1
//! frame*   t_ms u64, face_count u16, face*
//! face     bbox 4×f32, payload_type u8, payload_len u32, payload
//! ```
//!
//! `payload_type` 0 carries a raw embedding of `payload_len` f32 values;
//! type 1 carries `payload_len` opaque crop bytes for a real embedder.

use std::io::{self, ErrorKind, Read, Write};

use thiserror::Error;

use crate::model::BBox;

pub const MAGIC: &[u8; 4] = b"DETS";
pub const VERSION: u32 = 1;

const PAYLOAD_EMBEDDING: u8 = 0;
const PAYLOAD_CROP: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Embedding(Vec<f32>),
    Crop(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub bbox: BBox,
    pub payload: Payload,
}

/// All faces found at one frame time.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t_ms: u64,
    pub faces: Vec<Face>,
}

#[derive(Debug, Error)]
pub enum DetsError {
    #[error("not a detection stream (bad magic)")]
    BadMagic,
    #[error("unsupported detection stream version {0}")]
    VersionUnsupported(u32),
    #[error("detection stream ends mid-frame")]
    Truncated,
    #[error("unknown payload type {0}")]
    BadPayloadType(u8),
    #[error("frame at {t_ms} ms has {count} faces, more than a u16 can hold")]
    TooManyFaces { t_ms: u64, count: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_header<W: Write>(out: &mut W) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())
}

pub fn write_frame<W: Write>(out: &mut W, frame: &Frame) -> Result<(), DetsError> {
    let count = u16::try_from(frame.faces.len())
        .map_err(|_| DetsError::TooManyFaces { t_ms: frame.t_ms, count: frame.faces.len() })?;
    out.write_all(&frame.t_ms.to_le_bytes())?;
    out.write_all(&count.to_le_bytes())?;
    for face in &frame.faces {
        for v in <[f32; 4]>::from(face.bbox) {
            out.write_all(&v.to_le_bytes())?;
        }
        match &face.payload {
            Payload::Embedding(e) => {
                out.write_all(&[PAYLOAD_EMBEDDING])?;
                out.write_all(&(e.len() as u32).to_le_bytes())?;
                for v in e {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
            Payload::Crop(bytes) => {
                out.write_all(&[PAYLOAD_CROP])?;
                out.write_all(&(bytes.len() as u32).to_le_bytes())?;
                out.write_all(bytes)?;
            }
        }
    }
    Ok(())
}

pub fn write_stream<W: Write>(mut out: W, frames: &[Frame]) -> Result<(), DetsError> {
    write_header(&mut out)?;
    for f in frames {
        write_frame(&mut out, f)?;
    }
    out.flush()?;
    Ok(())
}

/// Streaming reader over a `DETS` source.
pub struct DetsReader<R> {
    inner: R,
    done: bool,
}

impl<R: Read> DetsReader<R> {
    pub fn new(mut inner: R) -> Result<Self, DetsError> {
        let mut magic = [0u8; 4];
        read_exact(&mut inner, &mut magic)?;
        if &magic != MAGIC {
            return Err(DetsError::BadMagic);
        }
        let mut v = [0u8; 4];
        read_exact(&mut inner, &mut v)?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(DetsError::VersionUnsupported(version));
        }
        Ok(Self { inner, done: false })
    }

    fn next_frame(&mut self) -> Result<Option<Frame>, DetsError> {
        let mut t = [0u8; 8];
        // a clean EOF is only allowed on a frame boundary
        let mut filled = 0;
        while filled < t.len() {
            match self.inner.read(&mut t[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => return Err(DetsError::Truncated),
                Ok(n) => filled += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let t_ms = u64::from_le_bytes(t);
        let count = u16::from_le_bytes(read_array(&mut self.inner)?) as usize;
        let mut faces = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0f32; 4];
            for v in &mut b {
                *v = f32::from_le_bytes(read_array(&mut self.inner)?);
            }
            let [kind] = read_array::<_, 1>(&mut self.inner)?;
            let len = u32::from_le_bytes(read_array(&mut self.inner)?) as usize;
            let payload = match kind {
                PAYLOAD_EMBEDDING => {
                    let mut raw = vec![0u8; len * 4];
                    read_exact(&mut self.inner, &mut raw)?;
                    Payload::Embedding(
                        raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
                    )
                }
                PAYLOAD_CROP => {
                    let mut raw = vec![0u8; len];
                    read_exact(&mut self.inner, &mut raw)?;
                    Payload::Crop(raw)
                }
                other => return Err(DetsError::BadPayloadType(other)),
            };
            faces.push(Face { bbox: BBox::from(b), payload });
        }
        Ok(Some(Frame { t_ms, faces }))
    }
}

impl<R: Read> Iterator for DetsReader<R> {
    type Item = Result<Frame, DetsError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_frame() {
            Ok(Some(f)) => Some(Ok(f)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

pub fn read_stream<R: Read>(input: R) -> Result<Vec<Frame>, DetsError> {
    DetsReader::new(input)?.collect()
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), DetsError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => DetsError::Truncated,
        _ => DetsError::Io(e),
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], DetsError> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<Frame> {
        vec![
            Frame {
                t_ms: 0,
                faces: vec![
                    Face { bbox: BBox::new(0.1, 0.2, 0.3, 0.4), payload: Payload::Embedding(vec![1.0, -0.5, 0.25]) },
                    Face { bbox: BBox::FULL, payload: Payload::Crop(vec![1, 2, 3, 4, 5]) },
                ],
            },
            Frame { t_ms: 500, faces: vec![] },
        ]
    }

    #[test]
    fn layout_is_little_endian() {
        let mut buf = Vec::new();
        write_stream(&mut buf, &sample()[1..]).unwrap();
        assert_eq!(&buf[..4], b"DETS");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..16], &500u64.to_le_bytes());
        assert_eq!(&buf[16..18], &[0, 0]);
        assert_eq!(buf.len(), 18);
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(matches!(read_stream(&b"DETX\x01\0\0\0"[..]), Err(DetsError::BadMagic)));
        assert!(matches!(read_stream(&b"DETS\x02\0\0\0"[..]), Err(DetsError::VersionUnsupported(2))));
        assert!(matches!(read_stream(&b"DE"[..]), Err(DetsError::Truncated)));
    }

    #[test]
    fn truncated_frame_is_an_error() {
        let mut buf = Vec::new();
        write_stream(&mut buf, &sample()).unwrap();
        for cut in [9, 17, 30, buf.len() - 19] {
            let res = read_stream(&buf[..cut]);
            assert!(matches!(res, Err(DetsError::Truncated)), "cut at {cut}: {res:?}");
        }
    }

    #[test]
    fn unknown_payload_type() {
        let mut buf = Vec::new();
        write_stream(&mut buf, &sample()[..1]).unwrap();
        // first face payload type sits after t_ms, count, and bbox
        buf[8 + 8 + 2 + 16] = 9;
        assert!(matches!(read_stream(&buf[..]), Err(DetsError::BadPayloadType(9))));
    }

    proptest! {
        #[test]
        fn round_trip(frames in proptest::collection::vec(
            (any::<u64>(), proptest::collection::vec(
                (proptest::collection::vec(any::<f32>().prop_filter("nan", |v| !v.is_nan()), 0..8),
                 proptest::option::of(proptest::collection::vec(any::<u8>(), 0..8))),
                0..4)),
            0..6)) {
            let frames: Vec<Frame> = frames.into_iter().map(|(t_ms, faces)| Frame {
                t_ms,
                faces: faces.into_iter().map(|(e, crop)| Face {
                    bbox: BBox::new(0.5, 0.25, 0.125, 0.0625),
                    payload: crop.map(Payload::Crop).unwrap_or(Payload::Embedding(e)),
                }).collect(),
            }).collect();
            let mut buf = Vec::new();
            write_stream(&mut buf, &frames).unwrap();
            prop_assert_eq!(read_stream(&buf[..]).unwrap(), frames);
        }
    }
}
