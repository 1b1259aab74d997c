//! Container for one compressed pyramid: a fixed 39-byte header, the `ẑ`
//! payload, then the `ŷ` payload.
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4 | magic `LMFC` |
//! | 4  | 1 | version |
//! | 5  | 1 | flags: bit0 context model, bit1 top-down pathway |
//! | 6  | 2 | N |
//! | 8  | 1 | quality index |
//! | 9  | 2 | channels |
//! | 11 | 4 | image width |
//! | 15 | 4 | image height |
//! | 19 | 2 | y height |
//! | 21 | 2 | y width |
//! | 23 | 2 | z height |
//! | 25 | 2 | z width |
//! | 27 | 4 | z payload length |
//! | 31 | 4 | y payload length |
//! | 35 | 4 | CRC32 of bytes 0..35 |
//!
//! All integers are little-endian.

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"LMFC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 39;
pub const FLAG_CONTEXT_MODEL: u8 = 1;
pub const FLAG_TOP_DOWN: u8 = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitstreamError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("header CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated stream: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after the payloads")]
    TrailingBytes(usize),
    #[error("inconsistent header: {0}")]
    Inconsistent(String),
    #[error("bpp of an image with zero pixels")]
    ZeroPixels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u8,
    pub flags: u8,
    pub n: u16,
    pub quality_index: u8,
    pub channels: u16,
    pub image_width: u32,
    pub image_height: u32,
    pub y_height: u16,
    pub y_width: u16,
    pub z_height: u16,
    pub z_width: u16,
    pub z_len: u32,
    pub y_len: u32,
}

/// Latent dims for an image: stride 64 on the padded geometry.
pub fn latent_dims(image_width: u32, image_height: u32) -> (usize, usize) {
    (image_height.div_ceil(64) as usize, image_width.div_ceil(64) as usize)
}

/// Hyper-latent dims: two further halvings of the latent, stride 256.
pub fn hyper_latent_dims(image_width: u32, image_height: u32) -> (usize, usize) {
    let (h, w) = latent_dims(image_width, image_height);
    (h.div_ceil(4), w.div_ceil(4))
}

impl StreamHeader {
    pub fn context_model(&self) -> bool {
        self.flags & FLAG_CONTEXT_MODEL != 0
    }

    pub fn top_down(&self) -> bool {
        self.flags & FLAG_TOP_DOWN != 0
    }

    fn check_geometry(&self) -> Result<(), BitstreamError> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(BitstreamError::Inconsistent("zero image dims".into()));
        }
        let y = latent_dims(self.image_width, self.image_height);
        let z = hyper_latent_dims(self.image_width, self.image_height);
        if (self.y_height as usize, self.y_width as usize) != y {
            return Err(BitstreamError::Inconsistent(format!(
                "y dims {}x{} do not match {y:?} for a {}x{} image",
                self.y_height, self.y_width, self.image_width, self.image_height
            )));
        }
        if (self.z_height as usize, self.z_width as usize) != z {
            return Err(BitstreamError::Inconsistent(format!(
                "z dims {}x{} do not match {z:?}",
                self.z_height, self.z_width
            )));
        }
        if self.flags & !(FLAG_CONTEXT_MODEL | FLAG_TOP_DOWN) != 0 {
            return Err(BitstreamError::Inconsistent(format!("unknown flag bits {:#04x}", self.flags)));
        }
        Ok(())
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(MAGIC);
        b[4] = self.version;
        b[5] = self.flags;
        b[6..8].copy_from_slice(&self.n.to_le_bytes());
        b[8] = self.quality_index;
        b[9..11].copy_from_slice(&self.channels.to_le_bytes());
        b[11..15].copy_from_slice(&self.image_width.to_le_bytes());
        b[15..19].copy_from_slice(&self.image_height.to_le_bytes());
        b[19..21].copy_from_slice(&self.y_height.to_le_bytes());
        b[21..23].copy_from_slice(&self.y_width.to_le_bytes());
        b[23..25].copy_from_slice(&self.z_height.to_le_bytes());
        b[25..27].copy_from_slice(&self.z_width.to_le_bytes());
        b[27..31].copy_from_slice(&self.z_len.to_le_bytes());
        b[31..35].copy_from_slice(&self.y_len.to_le_bytes());
        let crc = crc32fast::hash(&b[..35]);
        b[35..39].copy_from_slice(&crc.to_le_bytes());
        b
    }
}

/// Header followed by both payloads. `z_len` and `y_len` are taken from the
/// payloads.
pub fn serialize(header: &StreamHeader, z: &[u8], y: &[u8]) -> Result<Vec<u8>, BitstreamError> {
    let header = StreamHeader {
        z_len: z.len() as u32,
        y_len: y.len() as u32,
        ..*header
    };
    header.check_geometry()?;
    let mut out = Vec::with_capacity(HEADER_LEN + z.len() + y.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(z);
    out.extend_from_slice(y);
    Ok(out)
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(b[i..i + 4].try_into().unwrap())
}

/// Splits a stream into header, `ẑ` payload and `ŷ` payload.
pub fn parse(bytes: &[u8]) -> Result<(StreamHeader, &[u8], &[u8]), BitstreamError> {
    if bytes.len() < 4 {
        return Err(BitstreamError::Truncated {
            needed: HEADER_LEN,
            have: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(BitstreamError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(BitstreamError::Truncated {
            needed: HEADER_LEN,
            have: bytes.len(),
        });
    }
    let stored = u32_at(bytes, 35);
    let computed = crc32fast::hash(&bytes[..35]);
    if stored != computed {
        return Err(BitstreamError::CrcMismatch { stored, computed });
    }
    if bytes[4] != VERSION {
        return Err(BitstreamError::UnsupportedVersion(bytes[4]));
    }
    let header = StreamHeader {
        version: bytes[4],
        flags: bytes[5],
        n: u16_at(bytes, 6),
        quality_index: bytes[8],
        channels: u16_at(bytes, 9),
        image_width: u32_at(bytes, 11),
        image_height: u32_at(bytes, 15),
        y_height: u16_at(bytes, 19),
        y_width: u16_at(bytes, 21),
        z_height: u16_at(bytes, 23),
        z_width: u16_at(bytes, 25),
        z_len: u32_at(bytes, 27),
        y_len: u32_at(bytes, 31),
    };
    header.check_geometry()?;
    let needed = HEADER_LEN + header.z_len as usize + header.y_len as usize;
    if bytes.len() < needed {
        return Err(BitstreamError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(BitstreamError::TrailingBytes(bytes.len() - needed));
    }
    let z_end = HEADER_LEN + header.z_len as usize;
    Ok((header, &bytes[HEADER_LEN..z_end], &bytes[z_end..]))
}

/// Bits per input-image pixel of a whole stream, header included.
pub fn bpp_of(stream_len: usize, image_width: u32, image_height: u32) -> Result<f64, BitstreamError> {
    let pixels = image_width as u64 * image_height as u64;
    if pixels == 0 {
        return Err(BitstreamError::ZeroPixels);
    }
    Ok(8.0 * stream_len as f64 / pixels as f64)
}
