//! Content-addressed media files and thumbnails.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{DynamicImage, RgbImage};
use pimap::encoder::MediaDescriptor;
use pimap::io::atomic_write;
use pimap::seed::sha256_hex;
use pimap::world::render::{encode_png, render};
use pimap::world::World;

use crate::error::{ServiceError, ServiceResult};

/// Hex characters of the content hash used as an uploaded media id.
const ID_LEN: usize = 16;

pub struct MediaFiles {
    dir: PathBuf,
    thumbs: PathBuf,
    thumb_size: u32,
}

fn io_err(e: std::io::Error) -> ServiceError {
    ServiceError::internal(format!("media store: {e}"))
}

impl MediaFiles {
    pub fn new(data_dir: &Path, thumb_size: u32) -> ServiceResult<Self> {
        let dir = data_dir.join("media");
        let thumbs = data_dir.join("thumbs");
        std::fs::create_dir_all(&dir).map_err(io_err)?;
        std::fs::create_dir_all(&thumbs).map_err(io_err)?;
        Ok(Self { dir, thumbs, thumb_size })
    }

    /// Decodes and stores uploaded bytes under their hash. Returns the
    /// media id, stored path and decoded pixels.
    pub fn store_upload(&self, bytes: &[u8]) -> ServiceResult<(String, PathBuf, RgbImage)> {
        let format = image::guess_format(bytes).map_err(|_| ServiceError::bad_request("upload is not a recognised image"))?;
        let img = image::load_from_memory_with_format(bytes, format)
            .map_err(|e| ServiceError::bad_request(format!("cannot decode image: {e}")))?
            .to_rgb8();
        let hash = sha256_hex(bytes);
        let ext = format.extensions_str().first().copied().unwrap_or("bin");
        let path = self.dir.join(format!("{hash}.{ext}"));
        if !path.exists() {
            atomic_write(&path, bytes)?;
        }
        Ok((hash[..ID_LEN].to_string(), path, img))
    }

    /// Content-addressed copy of a local file.
    pub fn store_file(&self, src: &Path) -> ServiceResult<(PathBuf, RgbImage)> {
        let bytes = std::fs::read(src).map_err(|e| ServiceError::bad_request(format!("{}: {e}", src.display())))?;
        let (_, path, img) = self.store_upload(&bytes)?;
        Ok((path, img))
    }

    pub fn thumbnail_path(&self, media_id: &str) -> PathBuf {
        self.thumbs.join(format!("{media_id}.png"))
    }

    pub fn write_thumbnail(&self, media_id: &str, img: &RgbImage) -> ServiceResult<()> {
        let t = DynamicImage::ImageRgb8(img.clone())
            .thumbnail(self.thumb_size, self.thumb_size)
            .to_rgb8();
        atomic_write(&self.thumbnail_path(media_id), &encode_png(&t, None)?)?;
        Ok(())
    }

    /// Copies manifest media into the store and writes its thumbnail.
    /// Synthetic media are rendered from the world.
    pub fn ingest_descriptor(&self, media: &MediaDescriptor, world: Option<&Arc<World>>) -> ServiceResult<MediaDescriptor> {
        match media {
            MediaDescriptor::Synthetic(d) => {
                let world =
                    world.ok_or_else(|| ServiceError::bad_request(format!("`{}`: synthetic media need the toy encoder", d.media_id)))?;
                let view = if d.is_video { d.frame(0) } else { d.clone() };
                let (img, _) = render(world, &view, self.thumb_size, self.thumb_size)?;
                self.write_thumbnail(&d.media_id, &img)?;
                Ok(media.clone())
            }
            MediaDescriptor::Image { media_id, path } => {
                let (stored, img) = self.store_file(path)?;
                self.write_thumbnail(media_id, &img)?;
                Ok(MediaDescriptor::Image {
                    media_id: media_id.clone(),
                    path: stored,
                })
            }
            MediaDescriptor::Video { media_id, frames } => {
                let mut stored = Vec::with_capacity(frames.len());
                for (k, f) in frames.iter().enumerate() {
                    let (p, img) = self.store_file(f)?;
                    if k == 0 {
                        self.write_thumbnail(media_id, &img)?;
                    }
                    stored.push(p);
                }
                if stored.is_empty() {
                    return Err(ServiceError::bad_request(format!("video `{media_id}` has no frames")));
                }
                Ok(MediaDescriptor::Video {
                    media_id: media_id.clone(),
                    frames: stored,
                })
            }
        }
    }
}
