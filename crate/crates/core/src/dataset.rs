//! On-disk datasets: PNG images plus a JSON manifest of splits and tags, and a
//! JSON-lines log of the degradation recipe behind every stored LR image.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::degradation::{bicubic, synthesize_pair, DegradationRecipe};
use crate::error::{bail, Error, Result};
use crate::image::ImageTensor;
use crate::parallel::Execution;
use crate::rng::derive_seed;
use crate::tags::{TagSet, TagVocabulary};
use crate::toydata::{generate_scene, toy_vocabulary};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECIPE_LOG: &str = "recipes.jsonl";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Heldout,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Heldout, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Heldout => "heldout",
            SplitName::Test => "test",
        }
    }

    /// Training pairs are degraded on the fly; only evaluation splits store LR images.
    pub fn stores_lr(self) -> bool {
        self != SplitName::Train
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    /// Relative to the dataset root.
    pub hr: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<PathBuf>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub hr_size: usize,
    pub lr_size: usize,
    pub vocabulary: TagVocabulary,
    pub splits: BTreeMap<String, Vec<DatasetEntry>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecipeRecord {
    pub split: SplitName,
    pub id: String,
    pub recipe: DegradationRecipe,
}

/// A loaded split; `lr` is empty for the training split.
#[derive(Debug, Clone)]
pub struct Split {
    pub ids: Vec<String>,
    pub hr: Vec<ImageTensor>,
    pub lr: Vec<ImageTensor>,
    pub tags: Vec<TagSet>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn take(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            ids: self.ids[..n].to_vec(),
            hr: self.hr[..n].to_vec(),
            lr: self.lr[..n.min(self.lr.len())].to_vec(),
            tags: self.tags[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                artifact: path.display().to_string(),
                hint: "run `make-dataset` first".to_string(),
            });
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.version != DATASET_VERSION {
            bail!(State, "dataset format version {} is not supported", manifest.version);
        }
        Ok(Self { root, manifest })
    }

    pub fn vocabulary(&self) -> &TagVocabulary {
        &self.manifest.vocabulary
    }

    pub fn entries(&self, split: SplitName) -> &[DatasetEntry] {
        self.manifest.splits.get(split.as_str()).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn load(&self, split: SplitName, exec: Execution) -> Result<Split> {
        let entries = self.entries(split);
        let vocab = self.vocabulary();
        let hr = exec.try_map_range(entries.len(), |i| ImageTensor::load_png(self.root.join(&entries[i].hr)))?;
        let lr = if split.stores_lr() {
            exec.try_map_range(entries.len(), |i| match &entries[i].lr {
                Some(p) => ImageTensor::load_png(self.root.join(p)),
                None => bail!(State, "{} entry {} has no LR image", split.as_str(), entries[i].id),
            })?
        } else {
            Vec::new()
        };
        let tags = entries
            .iter()
            .map(|e| TagSet::from_names(&e.tags, vocab))
            .collect::<Result<Vec<_>>>()?;
        Ok(Split {
            ids: entries.iter().map(|e| e.id.clone()).collect(),
            hr,
            lr,
            tags,
        })
    }

    /// Ground-truth tags and HR path of an entry in any split.
    pub fn find(&self, id: &str) -> Option<(SplitName, &DatasetEntry)> {
        SplitName::ALL
            .into_iter()
            .find_map(|s| self.entries(s).iter().find(|e| e.id == id).map(|e| (s, e)))
    }
}

/// HR images with their tags before splitting.
struct Source {
    images: Vec<ImageTensor>,
    tags: Vec<TagSet>,
    vocab: TagVocabulary,
}

fn generated_source(cfg: &RunConfig, exec: Execution) -> Result<Source> {
    let d = &cfg.data;
    let n = d.train_count + d.heldout_count + d.test_count;
    let scene = d.scene();
    let base = derive_seed(cfg.seed, "dataset");
    let scenes = exec.try_map_range(n, |i| generate_scene(&scene, base.wrapping_add(i as u64)))?;
    Ok(Source {
        images: scenes.iter().map(|s| s.image.clone()).collect(),
        tags: scenes.into_iter().map(|s| s.tags).collect(),
        vocab: toy_vocabulary(),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TagFile {
    vocabulary: Vec<String>,
    tags: BTreeMap<String, Vec<String>>,
}

/// Center-crops to a square and resizes to `size`.
fn fit_square(img: &ImageTensor, size: usize) -> Result<ImageTensor> {
    let (h, w, c) = img.dims();
    let s = h.min(w);
    let (y0, x0) = ((h - s) / 2, (w - s) / 2);
    let sq = ImageTensor::from_fn(s, s, c.min(3), |y, x, k| img.get(y0 + y, x0 + x, if c == 1 { 0 } else { k }))?;
    let sq = if c == 1 {
        ImageTensor::from_fn(s, s, 3, |y, x, _| sq.get(y, x, 0))?
    } else {
        sq
    };
    if s == size {
        Ok(sq)
    } else {
        Ok(bicubic(&sq, size, size)?.clamp01())
    }
}

fn ingested_source(dir: &Path, cfg: &RunConfig) -> Result<Source> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let need = cfg.data.heldout_count + cfg.data.test_count + 1;
    if files.len() < need {
        bail!(Config, "{} holds {} PNG images, need at least {need}", dir.display(), files.len());
    }
    files.truncate(cfg.data.train_count + cfg.data.heldout_count + cfg.data.test_count);
    let tag_path = dir.join("tags.json");
    let (vocab, table) = if tag_path.is_file() {
        let text = std::fs::read_to_string(&tag_path).map_err(|e| Error::io(&tag_path, e))?;
        let tf: TagFile = serde_json::from_str(&text)?;
        (TagVocabulary::new(tf.vocabulary)?, tf.tags)
    } else {
        (toy_vocabulary(), BTreeMap::new())
    };
    let mut images = Vec::with_capacity(files.len());
    let mut tags = Vec::with_capacity(files.len());
    for f in &files {
        images.push(fit_square(&ImageTensor::load_png(f)?, cfg.data.hr_size)?);
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        tags.push(match table.get(name) {
            Some(names) => TagSet::from_names(names, &vocab)?,
            None => TagSet::empty(),
        });
    }
    Ok(Source { images, tags, vocab })
}

fn quantize8(img: &ImageTensor) -> Result<ImageTensor> {
    let (h, w, c) = img.dims();
    ImageTensor::new(h, w, c, img.to_u8().iter().map(|&v| v as f32 / 255.0).collect())
}

/// Writes the dataset under `root` and returns the files written, manifest last.
pub fn make_dataset(cfg: &RunConfig, root: &Path, exec: Execution) -> Result<(Dataset, Vec<PathBuf>)> {
    let source = match &cfg.data.source_dir {
        Some(dir) => ingested_source(dir, cfg)?,
        None => generated_source(cfg, exec)?,
    };
    // Degrade the 8-bit HR that is stored, so recipes replay exactly from disk.
    let source = Source {
        images: source.images.iter().map(quantize8).collect::<Result<_>>()?,
        ..source
    };
    let n = source.images.len();
    let (n_held, n_test) = (cfg.data.heldout_count, cfg.data.test_count);
    // Evaluation splits come first so that their content does not depend on train_count.
    let split_of = |i: usize| {
        if i < n_held {
            SplitName::Heldout
        } else if i < n_held + n_test {
            SplitName::Test
        } else {
            SplitName::Train
        }
    };
    let lr_seed = derive_seed(cfg.seed, "dataset-lr");
    let degraded = exec.try_map_range(n, |i| {
        if split_of(i).stores_lr() {
            synthesize_pair(&source.images[i], &cfg.degradation, lr_seed.wrapping_add(i as u64)).map(Some)
        } else {
            Ok(None)
        }
    })?;

    let mut written = Vec::new();
    let mut splits: BTreeMap<String, Vec<DatasetEntry>> = BTreeMap::new();
    let mut recipes = Vec::new();
    for s in SplitName::ALL {
        std::fs::create_dir_all(root.join(s.as_str()).join("hr")).map_err(|e| Error::io(root, e))?;
        if s.stores_lr() {
            std::fs::create_dir_all(root.join(s.as_str()).join("lr")).map_err(|e| Error::io(root, e))?;
        }
        splits.insert(s.as_str().to_string(), Vec::new());
    }
    for i in 0..n {
        let s = split_of(i);
        let id = format!("{}-{i:05}", s.as_str());
        let hr_rel = PathBuf::from(s.as_str()).join("hr").join(format!("{id}.png"));
        source.images[i].save_png(root.join(&hr_rel))?;
        written.push(root.join(&hr_rel));
        let lr_rel = match &degraded[i] {
            Some((lr, recipe)) => {
                let rel = PathBuf::from(s.as_str()).join("lr").join(format!("{id}.png"));
                lr.save_png(root.join(&rel))?;
                written.push(root.join(&rel));
                recipes.push(RecipeRecord {
                    split: s,
                    id: id.clone(),
                    recipe: recipe.clone(),
                });
                Some(rel)
            }
            None => None,
        };
        splits.get_mut(s.as_str()).expect("split created above").push(DatasetEntry {
            id,
            hr: hr_rel,
            lr: lr_rel,
            tags: source.tags[i].names(&source.vocab).iter().map(|t| t.to_string()).collect(),
        });
    }
    let recipe_path = root.join(RECIPE_LOG);
    let mut f = std::fs::File::create(&recipe_path).map_err(|e| Error::io(&recipe_path, e))?;
    for r in &recipes {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&recipe_path, e))?;
    }
    written.push(recipe_path);
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        hr_size: cfg.data.hr_size,
        lr_size: cfg.data.lr_size,
        vocabulary: source.vocab,
        splits,
    };
    let mpath = root.join(MANIFEST_FILE);
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    written.push(mpath);
    Ok((
        Dataset {
            root: root.to_path_buf(),
            manifest,
        },
        written,
    ))
}

/// Recipes from a dataset's log, keyed by image id.
pub fn read_recipes(root: &Path) -> Result<BTreeMap<String, DegradationRecipe>> {
    let path = root.join(RECIPE_LOG);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: RecipeRecord = serde_json::from_str(l)?;
            Ok((r.id, r.recipe))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::replay;

    fn tiny_config(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::minimal(5, out);
        cfg.data.hr_size = 64;
        cfg.data.lr_size = 16;
        cfg.data.train_count = 4;
        cfg.data.heldout_count = 2;
        cfg.data.test_count = 2;
        cfg
    }

    #[test]
    fn roundtrip_and_recipe_replay() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let root = dir.path().join("dataset");
        let (ds, written) = make_dataset(&cfg, &root, Execution::Sequential).unwrap();
        assert_eq!(written.len(), 8 + 4 + 2);
        let reopened = Dataset::open(&root).unwrap();
        assert_eq!(reopened.manifest, ds.manifest);
        let test = reopened.load(SplitName::Test, Execution::Sequential).unwrap();
        assert_eq!((test.hr.len(), test.lr.len()), (2, 2));
        assert!(reopened.load(SplitName::Train, Execution::Sequential).unwrap().lr.is_empty());
        let recipes = read_recipes(&root).unwrap();
        assert_eq!(recipes.len(), 4);
        // Stored LR images are the 8-bit quantization of the replayed recipe.
        let lr = replay(&test.hr[0], &recipes[&test.ids[0]]).unwrap();
        let q = quantize8(&lr).unwrap();
        assert!(q.mean_abs_diff(&test.lr[0]).unwrap() < 1e-6);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (da, _) = make_dataset(&tiny_config(a.path()), &a.path().join("d"), Execution::Sequential).unwrap();
        let (db, _) = make_dataset(&tiny_config(b.path()), &b.path().join("d"), Execution::default()).unwrap();
        assert_eq!(da.manifest, db.manifest);
        for e in da.entries(SplitName::Heldout) {
            let x = std::fs::read(a.path().join("d").join(e.lr.as_ref().unwrap())).unwrap();
            let y = std::fs::read(b.path().join("d").join(e.lr.as_ref().unwrap())).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn missing_manifest_names_the_command() {
        let dir = tempfile::tempdir().unwrap();
        let err = Dataset::open(dir.path()).unwrap_err();
        assert!(err.to_string().contains("make-dataset"));
    }
}
