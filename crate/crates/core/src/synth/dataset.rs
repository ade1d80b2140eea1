//! Datasets of subjects: generation from scenario mixes, persistence,
//! splitting and lesion-distribution statistics.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::components::label_components;
use super::phantom::{generate_phantom, Hemisphere, PhantomSpec};
use super::{Result, SynthError};
use crate::volume::{load_mask, load_volume, save_mask, save_volume, Subject};

/// Lesion-count class of a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountClass {
    None,
    Single,
    Multiple,
}

/// Scenario of a subject: how many lesions and on which side(s).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Scenario {
    pub count: CountClass,
    pub side: Hemisphere,
}

impl Scenario {
    pub fn none() -> Self {
        Self { count: CountClass::None, side: Hemisphere::None }
    }

    /// `none`, or `single-left`, `multiple-both`, ...
    pub fn key(&self) -> String {
        match self.count {
            CountClass::None => "none".into(),
            CountClass::Single => format!("single-{}", self.side.name()),
            CountClass::Multiple => format!("multiple-{}", self.side.name()),
        }
    }

    pub fn of_spec(spec: &PhantomSpec) -> Self {
        match spec.lesion_count {
            0 => Self::none(),
            1 => Self { count: CountClass::Single, side: spec.hemisphere },
            _ => Self { count: CountClass::Multiple, side: spec.hemisphere },
        }
    }

    /// Parses a [`Scenario::key`].
    pub fn parse(key: &str) -> Option<Self> {
        if key == "none" {
            return Some(Self::none());
        }
        let (count, side) = key.split_once('-')?;
        let count = match count {
            "single" => CountClass::Single,
            "multiple" => CountClass::Multiple,
            _ => return None,
        };
        let side = match side {
            "left" => Hemisphere::Left,
            "right" => Hemisphere::Right,
            "both" if count == CountClass::Multiple => Hemisphere::Both,
            _ => return None,
        };
        Some(Self { count, side })
    }

    /// `base` adjusted to produce this scenario (two or three lesions for "multiple").
    pub fn template(&self, base: &PhantomSpec, multiple_count: usize) -> PhantomSpec {
        let (lesion_count, hemisphere) = match self.count {
            CountClass::None => (0, Hemisphere::None),
            CountClass::Single => (1, self.side),
            CountClass::Multiple => (multiple_count.max(2), self.side),
        };
        PhantomSpec { lesion_count, hemisphere, ..base.clone() }
    }
}

/// One weighted template of a scenario mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixEntry {
    pub spec: PhantomSpec,
    pub weight: f64,
}

/// Builds a mix from `key:weight` pairs such as `single-left:1,multiple-both:2`.
pub fn parse_mix(text: &str, base: &PhantomSpec) -> Result<Vec<MixEntry>> {
    let mut mix = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, weight) = match part.split_once(':') {
            Some((k, w)) => (k, w.parse::<f64>().map_err(|_| SynthError::InvalidMix(format!("bad weight in {part:?}")))?),
            None => (part, 1.0),
        };
        let scenario = Scenario::parse(key).ok_or_else(|| SynthError::InvalidMix(format!("unknown scenario {key:?}")))?;
        mix.push(MixEntry { spec: scenario.template(base, 3), weight });
    }
    Ok(mix)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub scenario: Option<Scenario>,
    pub seed: Option<u64>,
    pub image: String,
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    /// Generation scenario per subject, when known.
    pub scenarios: Vec<Option<Scenario>>,
    pub seeds: Vec<Option<u64>>,
    pub provenance: String,
}

impl Dataset {
    /// Panics on duplicate ids.
    pub fn from_subjects(subjects: Vec<Subject>, provenance: impl Into<String>) -> Self {
        let mut seen = HashSet::new();
        for s in &subjects {
            assert!(seen.insert(s.id.clone()), "duplicate subject id {}", s.id);
        }
        let n = subjects.len();
        Self { subjects, scenarios: vec![None; n], seeds: vec![None; n], provenance: provenance.into() }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.subjects.iter().map(|s| s.id.as_str()).collect()
    }

    fn select(&self, idx: &[usize], provenance: String) -> Self {
        Self {
            subjects: idx.iter().map(|&i| self.subjects[i].clone()).collect(),
            scenarios: idx.iter().map(|&i| self.scenarios[i]).collect(),
            seeds: idx.iter().map(|&i| self.seeds[i]).collect(),
            provenance,
        }
    }
}

/// `n` phantoms whose templates are drawn from `mix` in proportion to the weights.
pub fn generate_dataset(n: usize, mix: &[MixEntry], seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(SynthError::InvalidMix("dataset size must be at least 1".into()));
    }
    let total: f64 = mix.iter().map(|m| m.weight).sum();
    if mix.is_empty() || mix.iter().any(|m| !(m.weight >= 0.0)) || !(total > 0.0) {
        return Err(SynthError::InvalidMix("mix needs non-negative weights with a positive sum".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects = Vec::with_capacity(n);
    let mut scenarios = Vec::with_capacity(n);
    let mut seeds = Vec::with_capacity(n);
    for i in 0..n {
        let mut u = rng.random::<f64>() * total;
        let entry = mix
            .iter()
            .find(|m| {
                u -= m.weight;
                u < 0.0 && m.weight > 0.0
            })
            .unwrap_or_else(|| mix.iter().rev().find(|m| m.weight > 0.0).expect("positive weight"));
        let s: u64 = rng.random();
        subjects.push(generate_phantom(&format!("phantom_{i:04}"), &entry.spec, s)?);
        scenarios.push(Some(Scenario::of_spec(&entry.spec)));
        seeds.push(Some(s));
    }
    Ok(Dataset { subjects, scenarios, seeds, provenance: format!("synthetic phantoms, seed {seed}") })
}

/// Shuffles deterministically and puts `floor(train_fraction * n)` subjects in the training part.
pub fn split_dataset(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if d.is_empty() {
        return Err(SynthError::InvalidSplit("dataset is empty".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SynthError::InvalidSplit(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * d.len() as f64).floor() as usize;
    let (a, b) = idx.split_at(n_train);
    Ok((d.select(a, format!("{} (train part)", d.provenance)), d.select(b, format!("{} (test part)", d.provenance))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionDistribution {
    /// Subjects per scenario key (`none`, `single-left`, ...).
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
    /// Share of lesioned subjects per side (`left`, `right`, `both`), in percent.
    pub percentages: BTreeMap<String, f64>,
}

/// Scenario of a mask from its components: count class by component count,
/// side by which half of the first axis each component centroid falls in.
pub fn classify_mask(mask: &crate::volume::Mask) -> Scenario {
    let (_, comps) = label_components(mask);
    if comps.is_empty() {
        return Scenario::none();
    }
    let mid = 0.5 * (mask.shape()[0] - 1) as f64;
    let left = comps.iter().any(|c| c.centroid[0] < mid);
    let right = comps.iter().any(|c| c.centroid[0] >= mid);
    let side = match (left, right) {
        (true, true) => Hemisphere::Both,
        (true, false) => Hemisphere::Left,
        _ => Hemisphere::Right,
    };
    let count = if comps.len() == 1 { CountClass::Single } else { CountClass::Multiple };
    Scenario { count, side }
}

pub fn dataset_statistics(d: &Dataset) -> Result<LesionDistribution> {
    let mut counts = BTreeMap::new();
    let mut sides: BTreeMap<String, usize> = BTreeMap::new();
    for s in &d.subjects {
        let mask = s.mask.as_ref().ok_or_else(|| SynthError::MissingMask(s.id.clone()))?;
        let sc = classify_mask(mask);
        *counts.entry(sc.key()).or_insert(0) += 1;
        if sc.count != CountClass::None {
            *sides.entry(sc.side.name().to_string()).or_insert(0) += 1;
        }
    }
    let lesioned: usize = sides.values().sum();
    let percentages = sides.into_iter().map(|(k, v)| (k, 100.0 * v as f64 / lesioned as f64)).collect();
    Ok(LesionDistribution { counts, total: d.len(), percentages })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    provenance: String,
    subjects: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `images/<id>.nii.gz`, `masks/<id>.nii.gz` and a JSON manifest.
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| SynthError::io(dir, e))?;
    fs::create_dir_all(dir.join("masks")).map_err(|e| SynthError::io(dir, e))?;
    let mut entries = Vec::with_capacity(d.len());
    for (i, s) in d.subjects.iter().enumerate() {
        let image = format!("images/{}.nii.gz", s.id);
        save_volume(&s.image, dir.join(&image))?;
        let mask = match &s.mask {
            Some(m) => {
                let rel = format!("masks/{}.nii.gz", s.id);
                save_mask(m, dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry { id: s.id.clone(), scenario: d.scenarios[i], seed: d.seeds[i], image, mask });
    }
    let manifest = Manifest { provenance: d.provenance.clone(), subjects: entries };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(dir.join(MANIFEST), text).map_err(|e| SynthError::io(&dir.join(MANIFEST), e))
}

/// Loads a dataset written by [`save_dataset`]. A directory without a manifest
/// is ingested as `<id>.nii[.gz]` images with optional `<id>_mask.nii[.gz]` masks.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return ingest_dir(dir);
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| SynthError::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| SynthError::Manifest(format!("{}: {e}", manifest_path.display())))?;
    let mut subjects = Vec::new();
    let mut scenarios = Vec::new();
    let mut seeds = Vec::new();
    for e in manifest.subjects {
        let image = load_volume(dir.join(&e.image))?;
        let mask = e.mask.as_ref().map(|m| load_mask(dir.join(m))).transpose()?;
        subjects.push(Subject::new(e.id, image, mask)?);
        scenarios.push(e.scenario);
        seeds.push(e.seed);
    }
    let mut d = Dataset::from_subjects(subjects, manifest.provenance);
    d.scenarios = scenarios;
    d.seeds = seeds;
    Ok(d)
}

fn ingest_dir(dir: &Path) -> Result<Dataset> {
    let entries = fs::read_dir(dir).map_err(|e| SynthError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    let stem = |p: &Path| -> Option<String> {
        let name = p.file_name()?.to_str()?;
        name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).map(str::to_string)
    };
    let mut subjects = Vec::new();
    for p in &paths {
        let Some(id) = stem(p) else { continue };
        if id.ends_with("_mask") {
            continue;
        }
        let mask_path = paths.iter().find(|q| stem(q).as_deref() == Some(&format!("{id}_mask")));
        let image = load_volume(p)?;
        let mask = mask_path.map(load_mask).transpose()?;
        subjects.push(Subject::new(id, image, mask)?);
    }
    if subjects.is_empty() {
        return Err(SynthError::Manifest(format!("{} has no manifest and no NIfTI images", dir.display())));
    }
    Ok(Dataset::from_subjects(subjects, format!("ingested from {}", dir.display())))
}
