//! Class vocabulary, id assignment and crop grouping.
//!
//! Class ids are assigned by byte-wise sort of the class (directory) names,
//! so the same set of names always yields the same registry regardless of
//! the order they were discovered in.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

/// The 15 pepper, potato and tomato classes of the PlantVillage subset.
pub const PLANTVILLAGE_CLASSES: [&str; 15] = [
    "Pepper__bell___Bacterial_spot",
    "Pepper__bell___healthy",
    "Potato___Early_blight",
    "Potato___Late_blight",
    "Potato___healthy",
    "Tomato_Bacterial_spot",
    "Tomato_Early_blight",
    "Tomato_Late_blight",
    "Tomato_Leaf_Mold",
    "Tomato_Septoria_leaf_spot",
    "Tomato_Spider_mites_Two_spotted_spider_mite",
    "Tomato__Target_Spot",
    "Tomato__Tomato_YellowLeaf__Curl_Virus",
    "Tomato__Tomato_mosaic_virus",
    "Tomato_healthy",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Crop {
    Pepper,
    Potato,
    Tomato,
    /// Any class whose name has no recognized crop prefix.
    Other,
}

impl Crop {
    pub const ALL: [Crop; 4] = [Crop::Pepper, Crop::Potato, Crop::Tomato, Crop::Other];

    /// Crop implied by a class name prefix (ASCII case-insensitive).
    pub fn from_class_name(name: &str) -> Crop {
        let lower = name.to_ascii_lowercase();
        if lower.starts_with("pepper") {
            Crop::Pepper
        } else if lower.starts_with("potato") {
            Crop::Potato
        } else if lower.starts_with("tomato") {
            Crop::Tomato
        } else {
            Crop::Other
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Crop::Pepper => "Pepper",
            Crop::Potato => "Potato",
            Crop::Tomato => "Tomato",
            Crop::Other => "Other",
        }
    }
}

impl fmt::Display for Crop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Crop {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Crop::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown crop `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub id: usize,
    pub name: String,
    pub crop: Crop,
}

/// Immutable class vocabulary with its crop buckets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRegistry {
    classes: Vec<ClassLabel>,
    crop_index: BTreeMap<Crop, Vec<usize>>,
}

impl LabelRegistry {
    /// Builds a registry from class names in any order.
    pub fn build<S: AsRef<str>>(class_names: &[S]) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::EmptyRegistry);
        }
        let mut names: Vec<&str> = class_names.iter().map(AsRef::as_ref).collect();
        if let Some(bad) = names.iter().find(|n| n.contains([',', '\n', '\r'])) {
            return Err(Error::BadClassName(bad.to_string()));
        }
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateClass(w[0].to_string()));
        }

        let classes: Vec<ClassLabel> = names
            .into_iter()
            .enumerate()
            .map(|(id, name)| ClassLabel {
                id,
                name: name.to_string(),
                crop: Crop::from_class_name(name),
            })
            .collect();
        let mut crop_index: BTreeMap<Crop, Vec<usize>> = BTreeMap::new();
        for c in &classes {
            crop_index.entry(c.crop).or_default().push(c.id);
        }
        Ok(Self {
            classes,
            crop_index,
        })
    }

    /// Registry for the 15-class PlantVillage subset.
    pub fn plantvillage() -> Self {
        Self::build(&PLANTVILLAGE_CLASSES).expect("static class list is valid")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassLabel] {
        &self.classes
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.name.as_str())
    }

    pub fn name(&self, id: usize) -> Result<&str> {
        self.label(id).map(|c| c.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.classes
            .binary_search_by(|c| c.name.as_str().cmp(name))
            .ok()
    }

    pub fn crop_of(&self, class_id: usize) -> Result<Crop> {
        self.label(class_id).map(|c| c.crop)
    }

    /// Crop buckets, in [`Crop`] order. Crops without classes are absent.
    pub fn crop_index(&self) -> &BTreeMap<Crop, Vec<usize>> {
        &self.crop_index
    }

    fn label(&self, id: usize) -> Result<&ClassLabel> {
        self.classes.get(id).ok_or(Error::UnknownClass {
            id,
            num_classes: self.classes.len(),
        })
    }

    /// Serialized form: one `<id>,<name>,<crop>\n` line per class, in id order.
    pub fn to_file_string(&self) -> String {
        self.classes
            .iter()
            .map(|c| format!("{},{},{}\n", c.id, c.name, c.crop))
            .collect()
    }

    /// SHA-256 (lowercase hex) of [`Self::to_file_string`].
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_file_string().as_bytes())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut names = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            let [id, name, crop] = fields[..] else {
                return Err(Error::parse(origin, i + 1, "expected `<id>,<name>,<crop>`"));
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::parse(origin, i + 1, format!("bad class id `{id}`")))?;
            if id != i {
                return Err(Error::parse(origin, i + 1, "class ids must be contiguous from 0"));
            }
            let crop: Crop = crop.parse().map_err(|e| Error::parse(origin, i + 1, e))?;
            if crop != Crop::from_class_name(name) {
                return Err(Error::parse(origin, i + 1, format!("crop {crop} does not match `{name}`")));
            }
            names.push(name);
        }
        let registry = Self::build(&names)?;
        if registry.names().ne(names.iter().copied()) {
            return Err(Error::parse(origin, 0, "class names are not in sorted order"));
        }
        Ok(registry)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    /// Builds a registry from the immediate subdirectories of `root`.
    pub fn from_directory(root: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut names = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        Self::build(&names)
    }
}
