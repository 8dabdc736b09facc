//! Content-addressed, append-only image store shared by all sessions.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Side-channel facts attached to an image (scene JSON, ground-truth text, objects).
pub type ImageMetadata = BTreeMap<String, String>;

/// Stable reference to a stored image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredImage {
    pub reference: ImageRef,
    /// File extension of the encoded bytes, e.g. `png`.
    pub format: String,
    pub bytes: Vec<u8>,
    pub metadata: ImageMetadata,
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
    #[error("image store io ({path}): {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    width: u32,
    height: u32,
    format: String,
    metadata: ImageMetadata,
}

/// Images keyed by a hash of their bytes and metadata. Optionally mirrored to
/// a directory as `<id>.<format>` plus `<id>.json`.
#[derive(Debug, Default)]
pub struct ImageStore {
    images: RwLock<HashMap<String, Arc<StoredImage>>>,
    dir: Option<PathBuf>,
}

pub fn content_id(bytes: &[u8], metadata: &ImageMetadata) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.update([0u8]);
    hasher.update(serde_json::to_vec(metadata).expect("string map serializes"));
    let digest = hasher.finalize();
    format!("img-{}", hex::encode(&digest[..8]))
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store that persists every inserted image under `dir`.
    pub fn persistent(dir: impl Into<PathBuf>) -> Result<Self, ImageError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| ImageError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            images: RwLock::default(),
            dir: Some(dir),
        })
    }

    /// Loads every image previously persisted under `dir`.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ImageError> {
        let store = Self::persistent(dir)?;
        let dir = store.dir.clone().expect("persistent store has dir");
        let io_err = |source| ImageError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut loaded = HashMap::new();
        for entry in fs::read_dir(&dir).map_err(io_err)? {
            let path = entry.map_err(io_err)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let sidecar: Sidecar = serde_json::from_slice(&read(&path)?)
                .map_err(|e| ImageError::Decode(format!("{}: {e}", path.display())))?;
            let bytes = read(&dir.join(format!("{id}.{}", sidecar.format)))?;
            let image = StoredImage {
                reference: ImageRef {
                    id: id.clone(),
                    width: sidecar.width,
                    height: sidecar.height,
                },
                format: sidecar.format,
                bytes,
                metadata: sidecar.metadata,
            };
            loaded.insert(id, Arc::new(image));
        }
        *store.images.write().expect("image store lock") = loaded;
        Ok(store)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.images.read().expect("image store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Result<Arc<StoredImage>, ImageError> {
        self.images
            .read()
            .expect("image store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ImageError::UnknownImage(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.images.read().expect("image store lock").contains_key(id)
    }

    /// Inserts already-encoded bytes. Dimensions are read from the header.
    pub fn insert_encoded(
        &self,
        bytes: Vec<u8>,
        metadata: ImageMetadata,
    ) -> Result<ImageRef, ImageError> {
        let format = image::guess_format(&bytes).map_err(|e| ImageError::Decode(e.to_string()))?;
        let (width, height) = image::load_from_memory_with_format(&bytes, format)
            .map(|img| (img.width(), img.height()))
            .map_err(|e| ImageError::Decode(e.to_string()))?;
        let ext = format.extensions_str().first().copied().unwrap_or("bin");
        self.insert_raw(bytes, ext, width, height, metadata)
    }

    /// Encodes an RGBA buffer as PNG and stores it.
    pub fn insert_rgba(
        &self,
        pixels: &image::RgbaImage,
        metadata: ImageMetadata,
    ) -> Result<ImageRef, ImageError> {
        let mut bytes = Vec::new();
        pixels
            .write_to(&mut io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        self.insert_raw(bytes, "png", pixels.width(), pixels.height(), metadata)
    }

    fn insert_raw(
        &self,
        bytes: Vec<u8>,
        format: &str,
        width: u32,
        height: u32,
        metadata: ImageMetadata,
    ) -> Result<ImageRef, ImageError> {
        let id = content_id(&bytes, &metadata);
        let reference = ImageRef { id: id.clone(), width, height };
        let mut images = self.images.write().expect("image store lock");
        if images.contains_key(&id) {
            return Ok(reference);
        }
        let stored = StoredImage {
            reference: reference.clone(),
            format: format.to_string(),
            bytes,
            metadata,
        };
        if let Some(dir) = &self.dir {
            persist(dir, &stored)?;
        }
        images.insert(id, Arc::new(stored));
        Ok(reference)
    }

    /// Decodes a stored image to RGBA pixels.
    pub fn decode(&self, id: &str) -> Result<(Arc<StoredImage>, image::RgbaImage), ImageError> {
        let stored = self.get(id)?;
        let pixels = image::load_from_memory(&stored.bytes)
            .map_err(|e| ImageError::Decode(e.to_string()))?
            .to_rgba8();
        Ok((stored, pixels))
    }
}

fn read(path: &Path) -> Result<Vec<u8>, ImageError> {
    fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn persist(dir: &Path, image: &StoredImage) -> Result<(), ImageError> {
    let id = &image.reference.id;
    let write = |path: PathBuf, data: &[u8]| {
        fs::write(&path, data).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    write(dir.join(format!("{id}.{}", image.format)), &image.bytes)?;
    let sidecar = Sidecar {
        width: image.reference.width,
        height: image.reference.height,
        format: image.format.clone(),
        metadata: image.metadata.clone(),
    };
    write(
        dir.join(format!("{id}.json")),
        &serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(w: u32, h: u32, px: [u8; 4]) -> image::RgbaImage {
        image::RgbaImage::from_pixel(w, h, image::Rgba(px))
    }

    #[test]
    fn identical_content_shares_an_id() {
        let store = ImageStore::new();
        let a = store.insert_rgba(&solid(4, 3, [1, 2, 3, 255]), ImageMetadata::new()).unwrap();
        let b = store.insert_rgba(&solid(4, 3, [1, 2, 3, 255]), ImageMetadata::new()).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width, a.height), (4, 3));
        assert_eq!(store.len(), 1);

        let mut meta = ImageMetadata::new();
        meta.insert("text".into(), "STOP".into());
        let c = store.insert_rgba(&solid(4, 3, [1, 2, 3, 255]), meta).unwrap();
        assert_ne!(a.id, c.id);
    }

    #[test]
    fn unknown_image_is_an_error() {
        assert!(matches!(ImageStore::new().get("img-0"), Err(ImageError::UnknownImage(_))));
    }

    #[test]
    fn persisted_store_reopens() {
        let dir = tempfile::tempdir().unwrap();
        let mut meta = ImageMetadata::new();
        meta.insert("caption".into(), "a red square".into());
        let r = {
            let store = ImageStore::persistent(dir.path()).unwrap();
            store.insert_rgba(&solid(2, 2, [255, 0, 0, 255]), meta.clone()).unwrap()
        };
        let reopened = ImageStore::open(dir.path()).unwrap();
        let stored = reopened.get(&r.id).unwrap();
        assert_eq!(stored.metadata, meta);
        assert_eq!(stored.reference, r);
        let (_, px) = reopened.decode(&r.id).unwrap();
        assert_eq!(px.get_pixel(1, 1).0, [255, 0, 0, 255]);
    }

    #[test]
    fn encoded_insert_reads_dimensions() {
        let store = ImageStore::new();
        let mut bytes = Vec::new();
        solid(5, 7, [0, 0, 0, 255])
            .write_to(&mut io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .unwrap();
        let r = store.insert_encoded(bytes, ImageMetadata::new()).unwrap();
        assert_eq!((r.width, r.height), (5, 7));
        assert!(store.insert_encoded(b"not an image".to_vec(), ImageMetadata::new()).is_err());
    }
}
