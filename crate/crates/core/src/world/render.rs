//! Raster stand-ins for synthetic media.
//!
//! A rendered PNG shows a flat background colour with a rectangular object
//! patch and carries the source descriptor in a `tEXt` chunk, so the file
//! can travel through upload paths and resolve back to the exact synthetic
//! descriptor on ingestion.

use std::io::Cursor;
use std::path::Path;

use image::RgbImage;
use rand::Rng;

use crate::encoder::MediaDescriptor;
use crate::error::{Error, Result};
use crate::localize::BoundingBox;
use crate::seed::substream;
use crate::world::{SyntheticMediaDescriptor, World};

/// `tEXt` keyword holding the descriptor JSON.
pub const DESCRIPTOR_KEY: &str = "pimap-synthetic";

fn colour(seed: u64, label: &str) -> [u8; 3] {
    let mut rng = substream(seed, label);
    [rng.random_range(40..216), rng.random_range(40..216), rng.random_range(40..216)]
}

/// Renders a still view; the returned box is the object patch.
pub fn render(world: &World, d: &SyntheticMediaDescriptor, width: u32, height: u32) -> Result<(RgbImage, BoundingBox)> {
    d.validate()?;
    let inst = world.instance(&d.instance_id)?;
    world.background(&d.background_id)?;
    let seed = world.cfg.seed;
    let bg = colour(seed, &format!("render/bg/{}", d.background_id));
    let cat = colour(seed, &format!("render/cat/{}", world.category_of(inst).name));
    let own = colour(seed, &format!("render/inst/{}", inst.id));
    let fg: [u8; 3] = std::array::from_fn(|k| ((cat[k] as u16 * 2 + own[k] as u16) / 3) as u8);

    // Patch side shrinks as the background share grows.
    let share = (1.0 - d.background_weight).clamp(0.1, 1.0);
    let pw = ((width as f64) * (0.3 + 0.5 * share)).round().max(1.0) as u32;
    let ph = ((height as f64) * (0.3 + 0.5 * share)).round().max(1.0) as u32;
    let mut rng = substream(seed, &format!("render/pos/{}", d.noise_label()));
    let x0 = rng.random_range(0..=width - pw.min(width));
    let y0 = rng.random_range(0..=height - ph.min(height));
    let (x1, y1) = ((x0 + pw).min(width), (y0 + ph).min(height));

    let img = RgbImage::from_fn(width, height, |x, y| {
        if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
            image::Rgb(fg)
        } else {
            image::Rgb(bg)
        }
    });
    let b = BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)?;
    Ok((img, b))
}

/// PNG bytes of `img`, tagged with `d` when given.
pub fn encode_png(img: &RgbImage, d: Option<&SyntheticMediaDescriptor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width(), img.height());
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(d) = d {
            enc.add_text_chunk(DESCRIPTOR_KEY.to_string(), serde_json::to_string(d)?)
                .map_err(|e| Error::Decode(format!("png: {e}")))?;
        }
        let mut w = enc.write_header().map_err(|e| Error::Decode(format!("png: {e}")))?;
        w.write_image_data(img.as_raw()).map_err(|e| Error::Decode(format!("png: {e}")))?;
    }
    Ok(out)
}

/// Descriptor embedded in PNG bytes, if any.
pub fn read_tag(bytes: &[u8]) -> Option<SyntheticMediaDescriptor> {
    let reader = png::Decoder::new(Cursor::new(bytes)).read_info().ok()?;
    reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|t| t.keyword == DESCRIPTOR_KEY)
        .and_then(|t| serde_json::from_str(&t.text).ok())
}

/// Renders `d` (first frame for videos) and writes a tagged PNG.
pub fn write_rendered(world: &World, d: &SyntheticMediaDescriptor, path: &Path, size: u32) -> Result<BoundingBox> {
    let view = if d.is_video { d.frame(0) } else { d.clone() };
    let (img, b) = render(world, &view, size, size)?;
    crate::io::atomic_write(path, &encode_png(&img, Some(d))?)?;
    Ok(b)
}

/// Media descriptor for a file: tagged PNGs resolve to their synthetic
/// descriptor under `media_id`, anything else stays a plain image.
pub fn resolve_file(path: &Path, media_id: &str) -> Result<MediaDescriptor> {
    let bytes = std::fs::read(path)?;
    Ok(match read_tag(&bytes) {
        Some(mut d) => {
            d.media_id = media_id.to_string();
            MediaDescriptor::Synthetic(d)
        }
        None => MediaDescriptor::Image {
            media_id: media_id.to_string(),
            path: path.to_path_buf(),
        },
    })
}
