//! (o_c, o_g) frame pairs: scripted generation, ingestion of external pairs,
//! train/val splits and on-disk persistence.
//!
//! A dataset directory holds `manifest.toml` plus `<id>_c.png` / `<id>_g.png`
//! for every pair. Generated datasets also carry `scenes.jsonl` with the
//! ground-truth start and outcome states.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;
use crate::simenv::scripted::{perform, Behavior};
use crate::simenv::{render, reset, EnvConfig, SceneState};

pub const MANIFEST: &str = "manifest.toml";
const SCENES: &str = "scenes.jsonl";
const RASTER_EXTS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "gif", "tiff"];

/// Relative frequency of each scripted behavior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorMix {
    pub push: f64,
    pub pick_place: f64,
    pub stack: f64,
    pub reorient: f64,
}

impl Default for BehaviorMix {
    fn default() -> Self {
        Self { push: 0.4, pick_place: 0.3, stack: 0.2, reorient: 0.1 }
    }
}

impl BehaviorMix {
    pub fn only(b: Behavior) -> Self {
        let mut m = Self { push: 0.0, pick_place: 0.0, stack: 0.0, reorient: 0.0 };
        *m.weight_mut(b) = 1.0;
        m
    }

    fn weight_mut(&mut self, b: Behavior) -> &mut f64 {
        match b {
            Behavior::Push => &mut self.push,
            Behavior::PickPlace => &mut self.pick_place,
            Behavior::Stack => &mut self.stack,
            Behavior::Reorient => &mut self.reorient,
        }
    }

    fn weights(&self) -> [f64; 4] {
        [self.push, self.pick_place, self.stack, self.reorient]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("dataset.behavior_mix: proportions must be finite and >= 0".into()));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("dataset.behavior_mix: proportions sum to {total}, expected 1")));
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Behavior {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (b, w) in Behavior::ALL.into_iter().zip(self.weights()) {
            acc += w;
            if u < acc && w > 0.0 {
                return b;
            }
        }
        Behavior::ALL.into_iter().zip(self.weights()).rev().find(|(_, w)| *w > 0.0).map(|(b, _)| b).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub pairs: usize,
    pub behavior_mix: BehaviorMix,
    pub val_fraction: f64,
    /// Fresh scenes tried per pair before generation fails.
    pub max_scene_attempts: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { pairs: 20_000, behavior_mix: BehaviorMix::default(), val_fraction: 0.1, max_scene_attempts: 16 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.behavior_mix.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("dataset.val_fraction must be in [0, 1)".into()));
        }
        if self.max_scene_attempts == 0 {
            return Err(Error::Config("dataset.max_scene_attempts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePair {
    pub start: SceneState,
    pub outcome: SceneState,
    pub behavior: Behavior,
    pub moved: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub id: String,
    pub o_c: Image,
    pub o_g: Image,
    pub scenes: Option<ScenePair>,
}

impl FramePair {
    pub fn hash(&self) -> String {
        crate::checkpoint::sha256_hex(format!("{}{}{}", self.id, self.o_c.hash(), self.o_g.hash()).as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub pairs: usize,
    pub height: usize,
    pub width: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    /// Generation seed; absent for ingested data.
    pub seed: Option<u64>,
    pub behavior_mix: Option<BehaviorMix>,
    pub source: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<FramePair>,
    pub seed: Option<u64>,
    pub behavior_mix: Option<BehaviorMix>,
    pub split: Split,
}

/// Disjoint, exhaustive index sets into `Dataset::pairs`, each ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.pairs.first().map(|p| p.o_c.dims())
    }

    /// Applies a fresh split; all pairs are in train until this is called.
    pub fn with_split(mut self, val_fraction: f64, seed: u64) -> Self {
        self.split = split(self.len(), val_fraction, seed);
        self
    }

    pub fn train(&self) -> impl Iterator<Item = &FramePair> + '_ {
        self.split.train.iter().map(|&i| &self.pairs[i])
    }

    pub fn val(&self) -> impl Iterator<Item = &FramePair> + '_ {
        self.split.val.iter().map(|&i| &self.pairs[i])
    }

    /// Every image in the given pairs, conditioning and outcome frames alike.
    pub fn images<'a>(pairs: impl Iterator<Item = &'a FramePair>) -> Vec<&'a Image> {
        pairs.flat_map(|p| [&p.o_c, &p.o_g]).collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        let (height, width) = self.dims().unwrap_or((0, 0));
        let ids = |ix: &[usize]| ix.iter().map(|&i| self.pairs[i].id.clone()).collect();
        DatasetManifest {
            pairs: self.len(),
            height,
            width,
            train: ids(&self.split.train),
            val: ids(&self.split.val),
            seed: self.seed,
            behavior_mix: self.behavior_mix.clone(),
            source: if self.seed.is_some() { "generated".into() } else { "ingested".into() },
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        for p in &self.pairs {
            p.o_c.save_png(&dir.join(format!("{}_c.png", p.id)))?;
            p.o_g.save_png(&dir.join(format!("{}_g.png", p.id)))?;
        }
        if self.pairs.iter().any(|p| p.scenes.is_some()) {
            let path = dir.join(SCENES);
            let mut w = BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::file(&path, e))?);
            for p in &self.pairs {
                if let Some(s) = &p.scenes {
                    writeln!(w, "{}", serde_json::to_string(&(p.id.as_str(), s))?)?;
                }
            }
            w.flush()?;
        }
        let manifest = toml::to_string(&self.manifest()).map_err(|e| Error::file(dir.join(MANIFEST), e))?;
        std::fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    /// Loads a directory written by [`Dataset::save`], verifying the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::file(&mpath, e))?;
        let m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::file(&mpath, e))?;
        let mut scenes: BTreeMap<String, ScenePair> = BTreeMap::new();
        let spath = dir.join(SCENES);
        if spath.exists() {
            let f = std::fs::File::open(&spath).map_err(|e| Error::file(&spath, e))?;
            for line in BufReader::new(f).lines() {
                let (id, s): (String, ScenePair) = serde_json::from_str(&line?).map_err(|e| Error::file(&spath, e))?;
                scenes.insert(id, s);
            }
        }
        let mut ids: Vec<&String> = m.train.iter().chain(&m.val).collect();
        ids.sort_by(|a, b| id_order(a, b));
        let mut pairs = Vec::with_capacity(ids.len());
        for id in ids {
            let o_c = Image::load(&dir.join(format!("{id}_c.png")))?;
            let o_g = Image::load(&dir.join(format!("{id}_g.png")))?;
            pairs.push(FramePair { id: id.clone(), o_c, o_g, scenes: scenes.remove(id) });
        }
        if pairs.len() != m.pairs {
            return Err(Error::file(&mpath, format!("manifest lists {} pairs but splits name {}", m.pairs, pairs.len())));
        }
        let pos: BTreeMap<&str, usize> = pairs.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
        let index = |ids: &[String]| {
            let mut v: Vec<usize> = ids.iter().map(|id| pos[id.as_str()]).collect();
            v.sort_unstable();
            v
        };
        let split = Split { train: index(&m.train), val: index(&m.val) };
        Ok(Dataset { pairs, seed: m.seed, behavior_mix: m.behavior_mix, split })
    }
}

/// Numeric ids sort numerically, others lexically after them.
fn id_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        _ => a.cmp(b),
    }
}

/// Generates one pair per episode. Episode `i` draws everything from
/// `derive_seed(seed, i)`, so any episode can be regenerated on its own.
pub fn generate_episode(env: &EnvConfig, cfg: &DatasetConfig, seed: u64, index: u64) -> Result<FramePair> {
    let episode_seed = seed::derive_seed(seed, index);
    let mut rng = seed::rng(episode_seed);
    let behavior = cfg.behavior_mix.draw(&mut rng);
    for attempt in 0..cfg.max_scene_attempts as u64 {
        let start = reset(env, seed::derive_seed(episode_seed, attempt))?;
        if let Some((outcome, moved)) = perform(&start, env, behavior, &mut rng) {
            return Ok(FramePair {
                id: index.to_string(),
                o_c: render(&start, env),
                o_g: render(&outcome, env),
                scenes: Some(ScenePair { start, outcome, behavior, moved }),
            });
        }
    }
    Err(Error::Invalid(format!(
        "episode {index}: no {behavior:?} outcome found in {} scenes",
        cfg.max_scene_attempts
    )))
}

pub fn generate_pairs(env: &EnvConfig, cfg: &DatasetConfig, n: usize, seed: u64) -> Result<Dataset> {
    env.validate()?;
    cfg.validate()?;
    let pairs = (0..n as u64).map(|i| generate_episode(env, cfg, seed, i)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { pairs, seed: Some(seed), behavior_mix: Some(cfg.behavior_mix.clone()), split: Split::default() }
        .with_split(cfg.val_fraction, seed::derive_named(seed, "split")))
}

fn pair_files(dir: &Path) -> Result<BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)>> {
    let mut found: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::file(dir, e))?;
    for entry in entries {
        let path = entry?.path();
        let (Some(stem), Some(ext)) = (path.file_stem().and_then(|s| s.to_str()), path.extension().and_then(|s| s.to_str()))
        else {
            continue;
        };
        if !RASTER_EXTS.contains(&ext.to_ascii_lowercase().as_str()) {
            continue;
        }
        let slot = if let Some(id) = stem.strip_suffix("_c") {
            &mut found.entry(id.to_string()).or_default().0
        } else if let Some(id) = stem.strip_suffix("_g") {
            &mut found.entry(id.to_string()).or_default().1
        } else {
            continue;
        };
        if let Some(prev) = slot.replace(path.clone()) {
            return Err(Error::file(&path, format!("duplicate frame for pair, also found {}", prev.display())));
        }
    }
    Ok(found)
}

/// Loads externally supplied `<id>_c.<ext>` / `<id>_g.<ext>` pairs, resized to
/// `size`×`size`.
pub fn ingest_pairs(dir: &Path, size: usize) -> Result<Dataset> {
    let mut pairs = Vec::new();
    let mut found: Vec<_> = pair_files(dir)?.into_iter().collect();
    found.sort_by(|a, b| id_order(&a.0, &b.0));
    for (id, files) in found {
        let (c, g) = match files {
            (Some(c), Some(g)) => (c, g),
            (Some(c), None) => return Err(Error::MissingPartner { missing: sibling(&c, &id, "g"), id }),
            (None, Some(g)) => return Err(Error::MissingPartner { missing: sibling(&g, &id, "c"), id }),
            (None, None) => unreachable!(),
        };
        pairs.push(FramePair { id, o_c: Image::load_resized(&c, size)?, o_g: Image::load_resized(&g, size)?, scenes: None });
    }
    let n = pairs.len();
    Ok(Dataset { pairs, seed: None, behavior_mix: None, split: Split { train: (0..n).collect(), val: vec![] } })
}

fn sibling(path: &Path, id: &str, role: &str) -> PathBuf {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("png");
    path.with_file_name(format!("{id}_{role}.{ext}"))
}

/// Deterministic train/val split with `round(n * val_fraction)` validation
/// pairs.
pub fn split(n: usize, val_fraction: f64, seed: u64) -> Split {
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut val = order[..n_val.min(n)].to_vec();
    let mut train = order[n_val.min(n)..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Split { train, val }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::{parse, ParseConfig};

    fn small_env() -> EnvConfig {
        EnvConfig::default()
    }

    #[test]
    fn zero_pairs_is_valid() {
        let d = generate_pairs(&small_env(), &DatasetConfig::default(), 0, 1).unwrap();
        assert!(d.is_empty());
        let m = d.manifest();
        assert_eq!(m.pairs, 0);
        assert!(m.train.is_empty() && m.val.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = DatasetConfig::default();
        let a = generate_pairs(&small_env(), &cfg, 30, 5).unwrap();
        let b = generate_pairs(&small_env(), &cfg, 30, 5).unwrap();
        let h = |d: &Dataset| d.pairs.iter().map(FramePair::hash).collect::<Vec<_>>();
        assert_eq!(h(&a), h(&b));
        assert_ne!(h(&a), h(&generate_pairs(&small_env(), &cfg, 30, 6).unwrap()));
    }

    #[test]
    fn push_pairs_move_exactly_one_object() {
        let env = small_env();
        let pc = ParseConfig::default();
        let cfg = DatasetConfig { behavior_mix: BehaviorMix::only(Behavior::Push), ..Default::default() };
        let d = generate_pairs(&env, &cfg, 60, 9).unwrap();
        for p in &d.pairs {
            let a = parse(&p.o_c, &env, &pc, None).unwrap();
            let b = parse(&p.o_g, &env, &pc, None).unwrap();
            assert!(a.is_plausible() && b.is_plausible(), "pair {}", p.id);
            assert_eq!(a.multiset(), b.multiset());
            let mut moved = 0;
            for da in &a.detections {
                let db = b.detections.iter().find(|d| d.color == da.color).unwrap();
                assert_eq!(da.objects_above, db.objects_above, "pair {}", p.id);
                let px = 32.0 * ((da.pos[0] - db.pos[0]).powi(2) + (da.pos[1] - db.pos[1]).powi(2)).sqrt();
                if px > 1.0 {
                    moved += 1;
                }
            }
            assert_eq!(moved, 1, "pair {}", p.id);
        }
    }

    #[test]
    fn generated_frames_are_plausible_rearrangements() {
        let env = small_env();
        let pc = ParseConfig::default();
        let d = generate_pairs(&env, &DatasetConfig::default(), 80, 21).unwrap();
        for p in &d.pairs {
            let s = p.scenes.as_ref().unwrap();
            let reference = s.start.multiset();
            assert!(parse(&p.o_c, &env, &pc, Some(&reference)).unwrap().is_plausible(), "pair {}", p.id);
            let o = parse(&p.o_g, &env, &pc, Some(&reference)).unwrap();
            assert!(o.is_plausible(), "pair {}: {:?}", p.id, o.verdict);
        }
    }

    #[test]
    fn persistence_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_pairs(&small_env(), &DatasetConfig::default(), 12, 3).unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn saved_dataset_is_ingestable() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_pairs(&small_env(), &DatasetConfig::default(), 5, 4).unwrap();
        d.save(dir.path()).unwrap();
        let ing = ingest_pairs(dir.path(), 32).unwrap();
        assert_eq!(ing.len(), 5);
        for (a, b) in ing.pairs.iter().zip(&d.pairs) {
            assert_eq!((a.id.as_str(), &a.o_c, &a.o_g), (b.id.as_str(), &b.o_c, &b.o_g));
        }
    }

    #[test]
    fn ingest_empty_and_single() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest_pairs(dir.path(), 32).unwrap().is_empty());
        let img = Image::filled(48, 40, [0.2, 0.4, 0.6]);
        img.save_png(&dir.path().join("a_c.png")).unwrap();
        img.save_png(&dir.path().join("a_g.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let d = ingest_pairs(dir.path(), 32).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.pairs[0].o_c.dims(), (32, 32));
        assert_eq!(d.pairs[0].o_g.dims(), (32, 32));
    }

    #[test]
    fn ingest_missing_partner_names_id() {
        let dir = tempfile::tempdir().unwrap();
        Image::filled(8, 8, [0.0; 3]).save_png(&dir.path().join("7_c.png")).unwrap();
        match ingest_pairs(dir.path(), 32) {
            Err(Error::MissingPartner { id, missing }) => {
                assert_eq!(id, "7");
                assert!(missing.ends_with("7_g.png"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ingest_undecodable_names_file() {
        let dir = tempfile::tempdir().unwrap();
        Image::filled(8, 8, [0.0; 3]).save_png(&dir.path().join("3_c.png")).unwrap();
        std::fs::write(dir.path().join("3_g.png"), b"garbage").unwrap();
        match ingest_pairs(dir.path(), 32) {
            Err(Error::File { path, .. }) => assert!(path.ends_with("3_g.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        assert_eq!(split(10, 0.0, 1).train.len(), 10);
        let s = split(10, 0.2, 1);
        assert_eq!((s.train.len(), s.val.len()), (8, 2));
        assert_eq!(s, split(10, 0.2, 1));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn mix_validation() {
        assert!(BehaviorMix::default().validate().is_ok());
        let bad = BehaviorMix { push: 0.5, ..BehaviorMix::only(Behavior::Stack) };
        assert!(bad.validate().is_err());
    }
}
