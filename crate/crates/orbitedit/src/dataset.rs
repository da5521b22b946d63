//! On-disk orbit datasets: procedurally generated scenes rendered to view
//! sequences, split into train/val/test, with a manifest of content digests.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json
//! train/train_0000/{scene.json, orbit.npy}
//! val/val_0000/{scene.json, orbit.npy}
//! test/test_0000/{scene.json, orbit.npy, edit.json, edited.npy}
//! ```
//!
//! Test records carry a verified back insert together with its rendered
//! ground truth, so evaluation can compare generated orbits against exact
//! targets. The manifest is written last; a directory without one is treated
//! as unclaimed and regenerated in place.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::EvalCase;
use crate::scenegen::{
    apply_edit, render_orbit, sample_random_scene, sample_visible_back_insert_edit, Difficulty,
    EditSpec, OrbitParams, SceneSpec,
};
use crate::sequence::ViewSequence;
use crate::util::{atomic_write, derive_seed_index, sha256_file, DirLock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub orbit: OrbitParams,
    pub difficulty: Difficulty,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 400,
            n_val: 16,
            n_test: 12,
            orbit: OrbitParams::default(),
            difficulty: Difficulty::Medium,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.orbit.validate()?;
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        Ok(())
    }
}

/// One stored scene: where its files live and what they must hash to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub id: String,
    pub split: Split,
    pub scene_seed: u64,
    /// File name to content digest, for every file in the record directory.
    pub files: BTreeMap<String, String>,
}

impl RecordEntry {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(self.split.dir_name()).join(&self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub records: Vec<RecordEntry>,
}

impl DatasetManifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &RecordEntry> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Extra data stored with each test record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestEditRecord {
    pub edit: EditSpec,
    pub visibility: Vec<usize>,
    pub anchor: usize,
}

const MANIFEST: &str = "manifest.json";

/// Builds the dataset under `root`, or verifies and reuses it when a
/// manifest with the same configuration is already present. A manifest with
/// a different configuration is an error, as is any file whose content no
/// longer matches its recorded digest.
pub fn generate_dataset(root: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(root)?;
    let _lock = DirLock::acquire(root)?;

    if root.join(MANIFEST).exists() {
        let existing = load_manifest(root)?;
        if existing.config != *cfg {
            return Err(Error::Config(format!(
                "dataset at {} was generated with a different configuration; \
                 remove it to regenerate",
                root.display()
            )));
        }
        verify_files(root, &existing)?;
        return Ok(existing);
    }

    let mut records = Vec::with_capacity(cfg.n_train + cfg.n_val + cfg.n_test);
    for (split, count) in [(Split::Train, cfg.n_train), (Split::Val, cfg.n_val)] {
        for i in 0..count {
            let label = format!("{}-scene", split.dir_name());
            let scene_seed = derive_seed_index(cfg.seed, &label, i as u64);
            let scene = sample_random_scene(scene_seed, cfg.difficulty);
            records.push(write_plain_record(root, cfg, split, i, scene_seed, &scene)?);
        }
    }
    for i in 0..cfg.n_test {
        records.push(write_test_record(root, cfg, i)?);
    }

    let manifest = DatasetManifest { config: cfg.clone(), records };
    atomic_write(&root.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn write_plain_record(
    root: &Path,
    cfg: &DatasetConfig,
    split: Split,
    index: usize,
    scene_seed: u64,
    scene: &SceneSpec,
) -> Result<RecordEntry> {
    let id = format!("{}_{index:04}", split.dir_name());
    let dir = root.join(split.dir_name()).join(&id);
    std::fs::create_dir_all(&dir)?;

    atomic_write(&dir.join("scene.json"), &serde_json::to_vec_pretty(scene)?)?;
    render_orbit(scene, &cfg.orbit)?.quantized().save_npy(&dir.join("orbit.npy"))?;

    let files = digest_dir_files(&dir, &["scene.json", "orbit.npy"])?;
    Ok(RecordEntry { id, split, scene_seed, files })
}

fn write_test_record(root: &Path, cfg: &DatasetConfig, index: usize) -> Result<RecordEntry> {
    // Not every scene admits a cleanly localized edit, so each test slot may
    // burn through a few candidate scenes before it finds one.
    let mut last_err = None;
    for attempt in 0..8u64 {
        let draw = index as u64 * 8 + attempt;
        let scene_seed = derive_seed_index(cfg.seed, "test-scene", draw);
        let scene = sample_random_scene(scene_seed, cfg.difficulty);
        let edit_seed = derive_seed_index(cfg.seed, "test-edit", draw);
        let (edit, visibility) =
            match sample_visible_back_insert_edit(&scene, edit_seed, &cfg.orbit) {
                Ok(found) => found,
                Err(e) => {
                    last_err = Some(e);
                    continue;
                }
            };

        let id = format!("test_{index:04}");
        let dir = root.join(Split::Test.dir_name()).join(&id);
        std::fs::create_dir_all(&dir)?;

        atomic_write(&dir.join("scene.json"), &serde_json::to_vec_pretty(&scene)?)?;
        let base = render_orbit(&scene, &cfg.orbit)?.quantized();
        base.save_npy(&dir.join("orbit.npy"))?;
        let edited = apply_edit(&scene, &edit)?;
        render_orbit(&edited, &cfg.orbit)?.quantized().save_npy(&dir.join("edited.npy"))?;

        let anchor = crate::propagate::select_anchor(
            &base,
            &ViewSequence::load_npy(&dir.join("edited.npy"))?,
        )?
        .0;
        let meta = TestEditRecord { edit, visibility, anchor };
        atomic_write(&dir.join("edit.json"), &serde_json::to_vec_pretty(&meta)?)?;

        let files =
            digest_dir_files(&dir, &["scene.json", "orbit.npy", "edit.json", "edited.npy"])?;
        return Ok(RecordEntry { id, split: Split::Test, scene_seed, files });
    }
    Err(last_err.unwrap_or_else(|| Error::Data("no test scenes requested".into())))
}

fn digest_dir_files(dir: &Path, names: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    for name in names {
        files.insert((*name).to_string(), sha256_file(&dir.join(name))?);
    }
    Ok(files)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Err(Error::Data(format!("no dataset manifest at {}", path.display())));
    }
    Ok(serde_json::from_slice(&std::fs::read(&path)?)?)
}

fn verify_files(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    for record in &manifest.records {
        let dir = record.dir(root);
        for (name, want) in &record.files {
            let path = dir.join(name);
            if !path.exists() {
                return Err(Error::Integrity {
                    path: path.display().to_string(),
                    detail: "file is missing".into(),
                });
            }
            let got = sha256_file(&path)?;
            if &got != want {
                return Err(Error::Integrity {
                    path: path.display().to_string(),
                    detail: format!("digest {got} does not match manifest digest {want}"),
                });
            }
        }
    }
    Ok(())
}

/// Re-hashes every recorded file against the manifest.
pub fn verify_dataset(root: &Path) -> Result<DatasetManifest> {
    let manifest = load_manifest(root)?;
    verify_files(root, &manifest)?;
    Ok(manifest)
}

/// Loads every orbit of a split as float frames in the unit range, in record
/// order, verifying digests on the way.
pub fn load_orbits(root: &Path, split: Split) -> Result<Vec<Array4<f64>>> {
    let manifest = load_manifest(root)?;
    let mut out = Vec::new();
    for record in manifest.records_in(split) {
        let dir = record.dir(root);
        check_digest(&dir, record, "orbit.npy")?;
        out.push(ViewSequence::load_npy(&dir.join("orbit.npy"))?.into_frames());
    }
    if out.is_empty() {
        return Err(Error::Data(format!("dataset at {} has no {split} records", root.display())));
    }
    Ok(out)
}

/// Loads the test split as evaluation cases.
pub fn load_eval_cases(root: &Path) -> Result<Vec<EvalCase>> {
    let manifest = load_manifest(root)?;
    let mut out = Vec::new();
    for record in manifest.records_in(Split::Test) {
        let dir = record.dir(root);
        for name in ["scene.json", "edit.json"] {
            check_digest(&dir, record, name)?;
        }
        let scene: SceneSpec = serde_json::from_slice(&std::fs::read(dir.join("scene.json"))?)?;
        let meta: TestEditRecord = serde_json::from_slice(&std::fs::read(dir.join("edit.json"))?)?;
        out.push(EvalCase {
            scene_seed: record.scene_seed,
            scene,
            edit: meta.edit,
            visibility: meta.visibility,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("dataset at {} has no test records", root.display())));
    }
    Ok(out)
}

fn check_digest(dir: &Path, record: &RecordEntry, name: &str) -> Result<()> {
    let want = record.files.get(name).ok_or_else(|| Error::Integrity {
        path: dir.join(name).display().to_string(),
        detail: "file is not listed in the manifest".into(),
    })?;
    let got = sha256_file(&dir.join(name))?;
    if &got != want {
        return Err(Error::Integrity {
            path: dir.join(name).display().to_string(),
            detail: format!("digest {got} does not match manifest digest {want}"),
        });
    }
    Ok(())
}
