use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        let ok = r.iter().all(|v| v.is_finite() && *v > 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(Error::BadRatios(self.train, self.val, self.test))
        }
    }

    fn get(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Per-class (train, val, test) counts for a class of `n` files.
///
/// Largest-remainder apportionment: each split gets the floor of its quota,
/// and the leftover images go to the largest fractional parts (ties to the
/// earlier split in train/val/test order). Every count is therefore the floor
/// or the ceiling of `ratio * n`.
pub fn split_counts(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    // Quotas like 0.15 * 1000 land a hair below the integer in binary.
    const EPS: f64 = 1e-9;
    let quotas = Split::ALL.map(|s| ratios.get(s) * n as f64);
    let mut counts = quotas.map(|q| (q + EPS).floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    let rem = |i: usize| quotas[i] - counts[i] as f64;
    order.sort_by(|&a, &b| rem(b).partial_cmp(&rem(a)).unwrap().then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub class_id: usize,
    pub split: Split,
}

/// Assignment of every image to train/val/test, sorted by path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub ratios: SplitRatios,
    pub registry_hash: String,
}

/// Stratified, seeded split of `files` (relative path, class id).
///
/// Within each class the paths are sorted, shuffled with a ChaCha8 stream
/// keyed by `(seed, class_id)`, then cut into train, val and test blocks
/// using [`split_counts`]. The result depends only on the set of files, the
/// ratios and the seed.
pub fn make_split(
    files: &[(String, usize)],
    registry: &LabelRegistry,
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitManifest> {
    ratios.validate()?;
    if files.is_empty() {
        return Err(Error::EmptyFileList);
    }
    let num_classes = registry.len();
    let mut per_class: Vec<Vec<&str>> = vec![Vec::new(); num_classes];
    let mut seen = HashSet::with_capacity(files.len());
    for (path, class_id) in files {
        if path.contains([',', '\n', '\r']) || path.is_empty() {
            return Err(Error::BadPath(path.clone()));
        }
        if !seen.insert(path.as_str()) {
            return Err(Error::DuplicatePath(path.clone()));
        }
        per_class
            .get_mut(*class_id)
            .ok_or(Error::UnknownClass {
                id: *class_id,
                num_classes,
            })?
            .push(path);
    }

    let mut entries = Vec::with_capacity(files.len());
    for (class_id, paths) in per_class.iter_mut().enumerate() {
        if paths.is_empty() {
            return Err(Error::EmptyClass(class_id));
        }
        paths.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class_id as u64);
        paths.shuffle(&mut rng);

        let [n_train, n_val, _] = split_counts(paths.len(), &ratios);
        for (i, path) in paths.iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            entries.push(ManifestEntry {
                path: path.to_string(),
                class_id,
                split,
            });
        }
    }
    entries.sort_unstable_by(|a, b| a.path.cmp(&b.path));
    Ok(SplitManifest {
        entries,
        seed,
        ratios,
        registry_hash: registry.content_hash(),
    })
}

impl SplitManifest {
    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries_in(split).count()
    }

    /// Per-class counts, indexed `[class][train, val, test]`.
    pub fn class_counts(&self, num_classes: usize) -> Vec<[usize; 3]> {
        let mut counts = vec![[0usize; 3]; num_classes];
        for e in &self.entries {
            counts[e.class_id][e.split as usize] += 1;
        }
        counts
    }

    pub fn check_registry(&self, registry: &LabelRegistry) -> Result<()> {
        let found = registry.content_hash();
        if found != self.registry_hash {
            return Err(Error::RegistryMismatch {
                expected: self.registry_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Header line, then `<relative_path>,<class_id>,<split>` per entry.
    pub fn to_file_string(&self) -> String {
        let mut out = format!(
            "# seed={} ratios={},{},{} registry={}\n",
            self.seed, self.ratios.train, self.ratios.val, self.ratios.test, self.registry_hash
        );
        for e in &self.entries {
            out.push_str(&e.path);
            out.push(',');
            out.push_str(&e.class_id.to_string());
            out.push(',');
            out.push_str(e.split.as_str());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(origin, 1, "missing header"))?;
        let bad_header = || Error::parse(origin, 1, "expected `# seed=<int> ratios=<t>,<v>,<s> registry=<hash>`");
        let rest = header.strip_prefix("# ").ok_or_else(bad_header)?;
        let fields: Vec<&str> = rest.split(' ').collect();
        let [seed, ratios, registry] = fields[..] else {
            return Err(bad_header());
        };
        let seed: u64 = seed
            .strip_prefix("seed=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(bad_header)?;
        let ratios: Vec<f64> = ratios
            .strip_prefix("ratios=")
            .ok_or_else(bad_header)?
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad_header())?;
        let [train, val, test] = ratios[..] else {
            return Err(bad_header());
        };
        let registry_hash = registry.strip_prefix("registry=").ok_or_else(bad_header)?.to_string();

        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let mut parts = line.rsplitn(3, ',');
            let (Some(split), Some(class_id), Some(path)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(origin, lineno, "expected `<path>,<class_id>,<split>`"));
            };
            entries.push(ManifestEntry {
                path: path.to_string(),
                class_id: class_id
                    .parse()
                    .map_err(|_| Error::parse(origin, lineno, format!("bad class id `{class_id}`")))?,
                split: split.parse().map_err(|e| Error::parse(origin, lineno, e))?,
            });
        }
        if entries.windows(2).any(|w| w[0].path >= w[1].path) {
            return Err(Error::parse(origin, 0, "entries must be sorted by path with no duplicates"));
        }
        Ok(Self {
            entries,
            seed,
            ratios: SplitRatios { train, val, test },
            registry_hash,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }
}
