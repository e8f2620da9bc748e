use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::labels::LabelRegistry;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Something that can produce an H×W×3 image in `[0, 1]` for a manifest path.
pub trait ImageSource: Sync {
    fn load(&self, relative_path: &str) -> Result<Array3<f32>>;
}

/// Images stored under a dataset root, addressed by `/`-separated relative paths.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    root: PathBuf,
}

impl DirectorySource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl ImageSource for DirectorySource {
    fn load(&self, relative_path: &str) -> Result<Array3<f32>> {
        let mut path = self.root.clone();
        path.extend(relative_path.split('/'));
        load_image_file(&path)
    }
}

/// Decodes an image file to RGB floats in `[0, 1]`.
pub fn load_image_file(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::BadImage(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
    Array3::from_shape_vec((h as usize, w as usize, 3), data).map_err(|e| Error::BadImage(e.to_string()))
}

/// In-memory images, mostly for tests and generated fixtures.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    images: HashMap<String, Array3<f32>>,
}

impl MemorySource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, image: Array3<f32>) {
        self.images.insert(path.into(), image);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl ImageSource for MemorySource {
    fn load(&self, relative_path: &str) -> Result<Array3<f32>> {
        self.images
            .get(relative_path)
            .cloned()
            .ok_or_else(|| Error::BadImage(format!("no image `{relative_path}`")))
    }
}

/// Lists every image under `root/<class name>/`, as (`class/…/file`, class id), sorted by path.
pub fn list_dataset(root: &Path, registry: &LabelRegistry) -> Result<Vec<(String, usize)>> {
    let mut files = Vec::new();
    for class in registry.classes() {
        let dir = root.join(&class.name);
        for entry in WalkDir::new(&dir).follow_links(true) {
            let entry = entry.map_err(|e| {
                let path = e.path().unwrap_or(&dir).to_path_buf();
                Error::io(path, e.into())
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let is_image = entry
                .path()
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if !is_image {
                continue;
            }
            let rel = entry.path().strip_prefix(root).expect("walked under root");
            let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            files.push((rel.join("/"), class.id));
        }
    }
    files.sort_unstable();
    Ok(files)
}
