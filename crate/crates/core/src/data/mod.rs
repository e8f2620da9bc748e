//! Split manifests, image sources and preprocessing.

mod preprocess;
mod source;
mod split;

pub use preprocess::{preprocess, preprocess_batch, resize_bilinear, PreprocessConfig, IMAGENET_MEAN, IMAGENET_STD};
pub use source::{list_dataset, load_image_file, DirectorySource, ImageSource, MemorySource};
pub use split::{make_split, split_counts, ManifestEntry, Split, SplitManifest, SplitRatios};
