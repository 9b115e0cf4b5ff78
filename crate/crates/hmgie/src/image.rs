//! Image payloads for vision requests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::Engine;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("cannot read image {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0} is not a PNG, JPEG, GIF, WebP or BMP image")]
    Unrecognized(String),
}

/// Encoded image bytes with their media type and SHA-256 digest.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageInput {
    bytes: Arc<[u8]>,
    media_type: &'static str,
    digest: String,
}

impl fmt::Debug for ImageInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageInput")
            .field("media_type", &self.media_type)
            .field("len", &self.bytes.len())
            .field("digest", &self.digest)
            .finish()
    }
}

impl ImageInput {
    /// Wraps encoded bytes. The format is recognized from its signature;
    /// pixels are not decoded.
    pub fn from_bytes(bytes: Vec<u8>, origin: &str) -> Result<Self, ImageError> {
        let media_type =
            sniff_media_type(&bytes).ok_or_else(|| ImageError::Unrecognized(origin.to_owned()))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        Ok(Self {
            bytes: bytes.into(),
            media_type,
            digest,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_bytes(bytes, &path.display().to_string())
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn media_type(&self) -> &'static str {
        self.media_type
    }

    /// Lowercase hex SHA-256 of the encoded bytes.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn data_url(&self) -> String {
        let encoded = base64::engine::general_purpose::STANDARD.encode(&self.bytes);
        format!("data:{};base64,{}", self.media_type, encoded)
    }
}

pub fn sniff_media_type(bytes: &[u8]) -> Option<&'static str> {
    const SIGNATURES: &[(&[u8], &str)] = &[
        (b"\x89PNG\r\n\x1a\n", "image/png"),
        (b"\xff\xd8\xff", "image/jpeg"),
        (b"GIF87a", "image/gif"),
        (b"GIF89a", "image/gif"),
        (b"BM", "image/bmp"),
    ];
    if bytes.len() >= 12 && &bytes[..4] == b"RIFF" && &bytes[8..12] == b"WEBP" {
        return Some("image/webp");
    }
    SIGNATURES
        .iter()
        .find(|(magic, _)| bytes.starts_with(magic))
        .map(|(_, media)| *media)
}
