//! On-disk formats: RGB PNG images, 8-bit mask PNGs and JSON pose manifests.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::change_render::{provenance_hash, ChangeMap};
use crate::error::{Error, Result};
use crate::render::ColorImage;

pub const MANIFEST_FILE: &str = "manifest.json";

/// One posed image. The camera fields are stored inline next to the image
/// file name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub image: String,
    #[serde(flatten)]
    pub camera: Camera,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub views: Vec<ManifestView>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera).collect()
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

fn image_error(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.into(),
        source,
    }
}

pub fn write_png(path: &Path, image: &ColorImage) -> Result<()> {
    let buf = RgbImage::from_raw(image.width, image.height, image.to_rgb8()).expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(image_error(path))
}

pub fn read_png(path: &Path) -> Result<ColorImage> {
    let img = image::open(path).map_err(image_error(path))?.to_rgb8();
    ColorImage::from_rgb8(img.width(), img.height(), img.as_raw())
}

/// Masks are single-channel PNGs, 255 for changed and 0 otherwise.
pub fn write_mask(path: &Path, map: &ChangeMap) -> Result<()> {
    let bytes = map.values.iter().map(|&v| if v { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(map.width, map.height, bytes).expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(image_error(path))
}

/// Any nonzero pixel counts as changed.
pub fn read_mask(path: &Path) -> Result<ChangeMap> {
    let img = image::open(path).map_err(image_error(path))?.to_luma8();
    let values: Vec<bool> = img.as_raw().iter().map(|&v| v > 0).collect();
    let provenance = provenance_hash(&values);
    Ok(ChangeMap::new(img.width(), img.height(), values, provenance))
}

/// Sorted `*.png` files in a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Vec3};

    #[test]
    fn image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ColorImage::new(5, 3);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = Vec3::new(i as f64 / 15.0, 0.5, 1.0 - i as f64 / 15.0);
        }
        let path = dir.path().join("a.png");
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let map = ChangeMap::new(4, 3, values.clone(), String::new());
        let path = dir.path().join("m.png");
        write_mask(&path, &map).unwrap();
        assert_eq!(read_mask(&path).unwrap().values, values);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let camera = Camera::look_at(Intrinsics::centered(8, 6, 5.0), Vec3::new(0.1, 0.2, 3.0), Vec3::zeros(), Vec3::y(), 1.0, 5.0).unwrap();
        let m = Manifest { views: vec![ManifestView { image: "000.png".into(), camera }] };
        m.write(dir.path()).unwrap();
        assert_eq!(Manifest::read(dir.path()).unwrap(), m);
        let text = read_text(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("\"fx\""));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_png(Path::new("/nonexistent/x.png")), Err(Error::Image { .. })));
        assert!(matches!(Manifest::read(Path::new("/nonexistent")), Err(Error::Io { .. })));
    }
}
