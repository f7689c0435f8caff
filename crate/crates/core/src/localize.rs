//! Localized templates: a detector proposes a box for the generic category
//! and a red ellipse through the midpoints of the box sides is drawn onto
//! the image.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::encoder::MediaDescriptor;
use crate::error::{Error, Result};
use crate::world::localize_descriptor;

/// Axis-aligned box in pixel coordinates, pixel `(i, j)` sitting at `(i, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: f64::from(width),
            y1: f64::from(height),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite());
        if !finite || self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Validation(format!(
                "box ({}, {})-({}, {}) must satisfy x0 < x1 and y0 < y1",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(())
    }

    /// Clamps to `[0, width] × [0, height]`; `None` if nothing is left.
    pub fn clamp(&self, width: u32, height: u32) -> Option<Self> {
        let (w, h) = (f64::from(width), f64::from(height));
        let b = Self {
            x0: self.x0.clamp(0.0, w),
            y0: self.y0.clamp(0.0, h),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
        };
        b.validate().ok().map(|_| b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub color: [u8; 3],
    pub stroke_width: f64,
}

pub const DEFAULT_STROKE_WIDTH: f64 = 3.0;
pub const RED: [u8; 3] = [255, 0, 0];

impl EllipseSpec {
    /// Curve point at parameter `theta`; exact at multiples of π/2.
    pub fn point_at(&self, theta: f64) -> (f64, f64) {
        let (c, s) = unit_circle(theta);
        let (cx, cy) = self.center;
        let (a, b) = self.semi_axes;
        (cx + a * c, cy + b * s)
    }

    /// Euclidean distance from `(px, py)` to the ellipse curve.
    pub fn distance(&self, px: f64, py: f64) -> f64 {
        let (a, b) = self.semi_axes;
        let dx = (px - self.center.0).abs();
        let dy = (py - self.center.1).abs();
        if a >= b {
            distance_first_quadrant(a, b, dx, dy)
        } else {
            distance_first_quadrant(b, a, dy, dx)
        }
    }
}

fn unit_circle(theta: f64) -> (f64, f64) {
    let q = theta / std::f64::consts::FRAC_PI_2;
    if q.fract() == 0.0 {
        match q.rem_euclid(4.0) as u8 {
            0 => return (1.0, 0.0),
            1 => return (0.0, 1.0),
            2 => return (-1.0, 0.0),
            _ => return (0.0, -1.0),
        }
    }
    (theta.cos(), theta.sin())
}

/// Distance from `(y0, y1)` (both ≥ 0) to the ellipse with semi-axes
/// `e0 ≥ e1 > 0`, by bisection on the normal-line parameter.
fn distance_first_quadrant(e0: f64, e1: f64, y0: f64, y1: f64) -> f64 {
    if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g == 0.0 {
                return 0.0;
            }
            let r0 = (e0 / e1) * (e0 / e1);
            let s = ellipse_root(r0, z0, z1, g);
            let x0 = r0 * y0 / (s + r0);
            let x1 = y1 / (s + 1.0);
            ((x0 - y0).powi(2) + (x1 - y1).powi(2)).sqrt()
        } else {
            (y1 - e1).abs()
        }
    } else {
        let numer = e0 * y0;
        let denom = e0 * e0 - e1 * e1;
        if numer < denom {
            let xde = numer / denom;
            let x0 = e0 * xde;
            let x1 = e1 * (1.0 - xde * xde).max(0.0).sqrt();
            ((x0 - y0).powi(2) + x1 * x1).sqrt()
        } else {
            (y0 - e0).abs()
        }
    }
}

fn ellipse_root(r0: f64, z0: f64, z1: f64, g: f64) -> f64 {
    let n0 = r0 * z0;
    let mut s0 = z1 - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { n0.hypot(z1) - 1.0 };
    let mut s = 0.0;
    for _ in 0..256 {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let r_0 = n0 / (s + r0);
        let r_1 = z1 / (s + 1.0);
        let g = r_0 * r_0 + r_1 * r_1 - 1.0;
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

pub fn ellipse_from_box(b: &BoundingBox) -> EllipseSpec {
    EllipseSpec {
        center: ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0),
        semi_axes: ((b.x1 - b.x0) / 2.0, (b.y1 - b.y0) / 2.0),
        color: RED,
        stroke_width: DEFAULT_STROKE_WIDTH,
    }
}

/// Paints every pixel within `stroke_width / 2` of the curve.
pub fn draw_ellipse(image: &mut RgbImage, e: &EllipseSpec) {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return;
    }
    let half = e.stroke_width / 2.0;
    let reach_x = e.semi_axes.0 + half + 1.0;
    let reach_y = e.semi_axes.1 + half + 1.0;
    let lo_x = (e.center.0 - reach_x).floor().max(0.0) as u32;
    let hi_x = ((e.center.0 + reach_x).ceil().max(0.0) as u32).min(w - 1);
    let lo_y = (e.center.1 - reach_y).floor().max(0.0) as u32;
    let hi_y = ((e.center.1 + reach_y).ceil().max(0.0) as u32).min(h - 1);
    for j in lo_y..=hi_y {
        for i in lo_x..=hi_x {
            if e.distance(f64::from(i), f64::from(j)) <= half {
                image.put_pixel(i, j, Rgb(e.color));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectRequest<'a> {
    pub media_id: &'a str,
    pub path: Option<&'a Path>,
    pub width: u32,
    pub height: u32,
    pub category: &'a str,
}

/// Language-guided detector interface.
pub trait Detector: Send + Sync {
    fn detect(&self, req: &DetectRequest<'_>) -> Result<Vec<Detection>>;
}

/// Returns stored boxes keyed by media id.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthDetector {
    pub boxes: BTreeMap<String, BoundingBox>,
}

impl Detector for GroundTruthDetector {
    fn detect(&self, req: &DetectRequest<'_>) -> Result<Vec<Detection>> {
        Ok(self
            .boxes
            .get(req.media_id)
            .map(|b| Detection { bbox: *b, confidence: 1.0 })
            .into_iter()
            .collect())
    }
}

/// Returns the same detections for every request.
#[derive(Debug, Clone, Default)]
pub struct ScriptedDetector {
    pub detections: Vec<Detection>,
}

impl Detector for ScriptedDetector {
    fn detect(&self, _req: &DetectRequest<'_>) -> Result<Vec<Detection>> {
        Ok(self.detections.clone())
    }
}

/// Runs `<program> <args…> <request.json>` and reads a JSON array of
/// `{x0, y0, x1, y1, confidence}` objects from stdout.
#[derive(Debug, Clone)]
pub struct ExternalDetector {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl Detector for ExternalDetector {
    fn detect(&self, req: &DetectRequest<'_>) -> Result<Vec<Detection>> {
        let mut file = tempfile::NamedTempFile::new()?;
        serde_json::to_writer(&mut file, req)?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(file.path())
            .output()
            .map_err(|e| Error::External(format!("{}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(Error::External(format!(
                "{} exited with {}: {}",
                self.program.display(),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        serde_json::from_slice(&out.stdout).map_err(|e| Error::External(format!("bad detector output: {e}")))
    }
}

/// Highest-confidence detection, clamped to the image. Earlier detections
/// win confidence ties.
pub fn detect_box(req: &DetectRequest<'_>, detector: &dyn Detector) -> Result<BoundingBox> {
    let mut best: Option<(f64, BoundingBox)> = None;
    for d in detector.detect(req)? {
        let Some(b) = d.bbox.clamp(req.width, req.height) else {
            continue;
        };
        if best.is_none_or(|(c, _)| d.confidence > c) {
            best = Some((d.confidence, b));
        }
    }
    best.map(|(_, b)| b).ok_or_else(|| Error::NoBoxFound(req.category.to_string()))
}

/// [`detect_box`] with the whole image as fallback; the flag reports
/// whether the fallback was used.
pub fn detect_box_or_full(req: &DetectRequest<'_>, detector: &dyn Detector) -> Result<(BoundingBox, bool)> {
    match detect_box(req, detector) {
        Ok(b) => Ok((b, false)),
        Err(Error::NoBoxFound(_)) => {
            tracing::warn!(
                media_id = req.media_id,
                category = req.category,
                "no box found, using the full image"
            );
            Ok((BoundingBox::full(req.width, req.height), true))
        }
        Err(e) => Err(e),
    }
}

/// Detects, draws and returns the localized copy of an image.
pub fn localize_image(
    image: &RgbImage,
    media_id: &str,
    path: Option<&Path>,
    category: &str,
    detector: &dyn Detector,
    stroke_width: f64,
) -> Result<(RgbImage, BoundingBox, bool)> {
    let (width, height) = image.dimensions();
    let req = DetectRequest {
        media_id,
        path,
        width,
        height,
        category,
    };
    let (b, fallback) = detect_box_or_full(&req, detector)?;
    let mut out = image.clone();
    draw_ellipse(
        &mut out,
        &EllipseSpec {
            stroke_width,
            ..ellipse_from_box(&b)
        },
    );
    Ok((out, b, fallback))
}

/// Produces localized media. Synthetic descriptors are transformed
/// analytically; image files are rewritten with an ellipse into `out_dir`.
pub struct Localizer<'a> {
    pub detector: &'a dyn Detector,
    pub out_dir: Option<PathBuf>,
    pub stroke_width: f64,
    pub synthetic_factor: f64,
}

impl Localizer<'_> {
    pub fn localize(&self, media: &MediaDescriptor, category: &str) -> Result<MediaDescriptor> {
        match media {
            MediaDescriptor::Synthetic(s) => Ok(MediaDescriptor::Synthetic(localize_descriptor(s, self.synthetic_factor))),
            MediaDescriptor::Image { media_id, path } => Ok(MediaDescriptor::Image {
                media_id: media_id.clone(),
                path: self.localize_file(media_id, path, category)?,
            }),
            MediaDescriptor::Video { media_id, frames } => {
                let frames = frames
                    .iter()
                    .enumerate()
                    .map(|(k, p)| self.localize_file(&format!("{media_id}#{k}"), p, category))
                    .collect::<Result<_>>()?;
                Ok(MediaDescriptor::Video {
                    media_id: media_id.clone(),
                    frames,
                })
            }
        }
    }

    fn localize_file(&self, media_id: &str, path: &Path, category: &str) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .as_ref()
            .ok_or_else(|| Error::Config("localizing image files needs an output directory".into()))?;
        let img = image::open(path)
            .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (out, _, _) = localize_image(&img, media_id, Some(path), category, self.detector, self.stroke_width)?;
        std::fs::create_dir_all(dir)?;
        let name: String = media_id
            .chars()
            .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let target = dir.join(format!("{name}.loc.png"));
        out.save(&target).map_err(|e| Error::Decode(format!("{}: {e}", target.display())))?;
        Ok(target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ellipse_geometry_examples() {
        let e = ellipse_from_box(&BoundingBox::new(10.0, 20.0, 50.0, 60.0).unwrap());
        assert_eq!(e.center, (30.0, 40.0));
        assert_eq!(e.semi_axes, (20.0, 20.0));
        let e = ellipse_from_box(&BoundingBox::new(0.0, 0.0, 100.0, 40.0).unwrap());
        assert_eq!(e.semi_axes, (50.0, 20.0));
        for (x, y) in [(50.0, 0.0), (50.0, 40.0), (0.0, 20.0), (100.0, 20.0)] {
            assert!(e.distance(x, y) < 1e-12);
        }
        assert_eq!(e.color, [255, 0, 0]);
    }

    #[test]
    fn distance_matches_dense_curve_sampling() {
        let e = ellipse_from_box(&BoundingBox::new(3.0, 5.0, 41.0, 17.0).unwrap());
        for &(px, py) in &[(22.0, 11.0), (0.0, 0.0), (40.0, 11.5), (25.0, 30.0), (22.0, 5.5)] {
            let sampled = (0..200_000)
                .map(|k| {
                    let (x, y) = e.point_at(k as f64 * std::f64::consts::TAU / 200_000.0);
                    (x - px).hypot(y - py)
                })
                .fold(f64::INFINITY, f64::min);
            assert!((e.distance(px, py) - sampled).abs() < 1e-6, "{px},{py}");
        }
    }

    #[test]
    fn boxes_are_clamped_and_empty_detection_falls_back() {
        let gt = ScriptedDetector {
            detections: vec![Detection {
                bbox: BoundingBox::new(-5.0, 10.0, 30.0, 90.0).unwrap(),
                confidence: 0.3,
            }],
        };
        let req = DetectRequest {
            media_id: "m",
            path: None,
            width: 20,
            height: 50,
            category: "dog",
        };
        assert_eq!(detect_box(&req, &gt).unwrap(), BoundingBox::new(0.0, 10.0, 20.0, 50.0).unwrap());
        let none = ScriptedDetector::default();
        assert!(matches!(detect_box(&req, &none), Err(Error::NoBoxFound(_))));
        assert_eq!(detect_box_or_full(&req, &none).unwrap(), (BoundingBox::full(20, 50), true));
    }

    #[test]
    fn highest_confidence_wins() {
        let d = ScriptedDetector {
            detections: vec![
                Detection {
                    bbox: BoundingBox::new(0.0, 0.0, 5.0, 5.0).unwrap(),
                    confidence: 0.4,
                },
                Detection {
                    bbox: BoundingBox::new(1.0, 1.0, 6.0, 6.0).unwrap(),
                    confidence: 0.9,
                },
                Detection {
                    bbox: BoundingBox::new(2.0, 2.0, 7.0, 7.0).unwrap(),
                    confidence: 0.9,
                },
            ],
        };
        let req = DetectRequest {
            media_id: "m",
            path: None,
            width: 10,
            height: 10,
            category: "mug",
        };
        assert_eq!(detect_box(&req, &d).unwrap(), BoundingBox::new(1.0, 1.0, 6.0, 6.0).unwrap());
    }

    #[test]
    fn ground_truth_detector_returns_stored_box() {
        let b = BoundingBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        let gt = GroundTruthDetector {
            boxes: [("a".to_string(), b)].into_iter().collect(),
        };
        let req = DetectRequest {
            media_id: "a",
            path: None,
            width: 10,
            height: 10,
            category: "dog",
        };
        assert_eq!(detect_box(&req, &gt).unwrap(), b);
    }

    #[test]
    fn zero_size_image_is_untouched() {
        let mut img = RgbImage::new(0, 0);
        draw_ellipse(&mut img, &ellipse_from_box(&BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap()));
        assert_eq!(img.dimensions(), (0, 0));
    }
}
