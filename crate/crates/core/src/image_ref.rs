//! Content-addressed handles to image bytes.

use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::hashing::{is_sha256_hex, sha256_hex};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ImageRefError {
    #[error("image payload is empty")]
    Empty,
    #[error("not a lowercase hex SHA-256 digest: {0:?}")]
    BadHash(String),
    #[error("payload is not a recognised image format")]
    Undecodable,
}

/// Handle to an image stored by content hash.
///
/// Equality and hashing consider only the digest, so two refs to the same
/// bytes compare equal regardless of the declared media type.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRef {
    pub hash: String,
    pub media_type: String,
    pub byte_len: u64,
}

impl ImageRef {
    /// Builds a ref for `bytes`, sniffing the media type from magic bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ImageRefError> {
        if bytes.is_empty() {
            return Err(ImageRefError::Empty);
        }
        let media_type = sniff_media_type(bytes)
            .unwrap_or("application/octet-stream")
            .to_string();
        Ok(Self {
            hash: sha256_hex(bytes),
            media_type,
            byte_len: bytes.len() as u64,
        })
    }

    /// Like [`ImageRef::from_bytes`] but rejects payloads that are not a known
    /// image format.
    pub fn from_image_bytes(bytes: &[u8]) -> Result<Self, ImageRefError> {
        if bytes.is_empty() {
            return Err(ImageRefError::Empty);
        }
        if sniff_media_type(bytes).is_none() {
            return Err(ImageRefError::Undecodable);
        }
        Self::from_bytes(bytes)
    }

    pub fn validate(&self) -> Result<(), ImageRefError> {
        if !is_sha256_hex(&self.hash) {
            return Err(ImageRefError::BadHash(self.hash.clone()));
        }
        if self.byte_len == 0 {
            return Err(ImageRefError::Empty);
        }
        Ok(())
    }

    /// File extension matching the media type.
    pub fn extension(&self) -> &'static str {
        match self.media_type.as_str() {
            "image/png" => "png",
            "image/jpeg" => "jpg",
            "image/gif" => "gif",
            "image/webp" => "webp",
            "image/bmp" => "bmp",
            _ => "bin",
        }
    }

    /// `data:` URL embedding `bytes` with this ref's media type.
    pub fn data_url(&self, base64_payload: &str) -> String {
        format!("data:{};base64,{}", self.media_type, base64_payload)
    }

    pub fn short(&self) -> &str {
        &self.hash[..12.min(self.hash.len())]
    }
}

impl PartialEq for ImageRef {
    fn eq(&self, other: &Self) -> bool {
        self.hash == other.hash
    }
}

impl Eq for ImageRef {}

impl Hash for ImageRef {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.hash.hash(state);
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.media_type, self.hash)
    }
}

/// Media type from magic bytes, `None` for unknown formats.
pub fn sniff_media_type(bytes: &[u8]) -> Option<&'static str> {
    const PNG: &[u8] = b"\x89PNG\r\n\x1a\n";
    if bytes.starts_with(PNG) {
        Some("image/png")
    } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        Some("image/jpeg")
    } else if bytes.starts_with(b"GIF87a") || bytes.starts_with(b"GIF89a") {
        Some("image/gif")
    } else if bytes.len() >= 12 && &bytes[..4] == b"RIFF" && &bytes[8..12] == b"WEBP" {
        Some("image/webp")
    } else if bytes.starts_with(b"BM") && bytes.len() > 14 {
        Some("image/bmp")
    } else {
        None
    }
}
