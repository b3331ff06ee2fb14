//! Deterministic synthetic specimens, templated reports and split records.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::embed::{
    assemble_all, encode_tile_synthetic, read_store, write_store, ConceptBasis, EmbeddingStore,
    SpecimenBag, TileKey, MAX_TILES_PER_SPECIMEN,
};
use crate::error::{Error, Result};
use crate::eval::{LabeledBag, PromptSet};
use crate::rng::{derive_seed, stream};
use crate::text::Vocabulary;
use crate::tiling::{read_manifest, write_manifest, ManifestEntry, TileRecord};
use crate::train::TrainExample;

/// Diagnostic keyword of each concept, in concept order.
pub const KEYWORDS: [&str; 12] = [
    "carcinoma",
    "adenoma",
    "lymphoma",
    "melanoma",
    "sarcoma",
    "glioma",
    "mesothelioma",
    "seminoma",
    "thymoma",
    "myeloma",
    "blastoma",
    "hepatoma",
];

/// Rewrites per report.
pub const REWRITES: usize = 5;

const SITES: [&str; 6] = ["breast", "colon", "lung", "skin", "prostate", "stomach"];
const GRADES: [&str; 3] = ["low", "intermediate", "high"];
const MARGINS: [&str; 3] = ["margins negative", "margins involved", "margins close"];
const FEATURES: [&str; 4] = ["necrosis", "ulceration", "fibrosis", "inflammation"];

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const STORE_FILE: &str = "store.bin";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const SPLIT_FILE: &str = "split.jsonl";
pub const PROMPTS_FILE: &str = "prompts.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
    TransferTrain,
    TransferTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub specimen_id: String,
    pub concept: usize,
    pub rewrites: Vec<String>,
    pub corpus_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub specimen_id: String,
    pub split: Split,
    /// Concept id, or the transfer class (0 or 1).
    pub label: usize,
    pub corpus_digest: String,
}

/// In-memory corpus; every file artifact derives from these fields.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub digest: String,
    pub manifest: Vec<ManifestEntry>,
    pub store: EmbeddingStore,
    pub reports: Vec<ReportRecord>,
    pub splits: Vec<SplitRecord>,
    pub prompts: PromptSet,
    pub vocab: Vocabulary,
}

/// The five report templates of one concept.
pub fn report_templates(keyword: &str) -> [String; REWRITES] {
    [
        format!("{keyword} ."),
        format!("findings consistent with {keyword} ."),
        format!("sections show {{grade}} grade {keyword} of the {{site}} ."),
        format!("diagnosis : {keyword} , {{margin}} ."),
        format!("the specimen demonstrates {keyword} with {{feature}} ."),
    ]
}

/// Zero-shot prompt of one concept.
pub fn concept_prompt(keyword: &str) -> String {
    format!("findings consistent with {keyword} .")
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

fn instantiate<R: Rng>(keyword: &str, rng: &mut R) -> Vec<String> {
    let site = pick(rng, &SITES);
    let grade = pick(rng, &GRADES);
    let margin = pick(rng, &MARGINS);
    let feature = pick(rng, &FEATURES);
    report_templates(keyword)
        .iter()
        .map(|t| {
            t.replace("{site}", site)
                .replace("{grade}", grade)
                .replace("{margin}", margin)
                .replace("{feature}", feature)
        })
        .collect()
}

struct Builder<'a> {
    cfg: &'a RunConfig,
    basis: ConceptBasis,
    tile_seed: u64,
    manifest: Vec<ManifestEntry>,
    store: EmbeddingStore,
}

impl Builder<'_> {
    /// Adds the tiles of one specimen carrying `direction` at `signal`.
    fn specimen(
        &mut self,
        specimen_id: &str,
        index: u64,
        direction: usize,
        signal: f64,
    ) -> Result<()> {
        let cfg = self.cfg;
        let mut rng = stream(cfg.seed, "corpus-specimen", &[index]);
        let n = rng.random_range(cfg.tiles_min..=cfg.tiles_max);
        let slides = rng.random_range(1..=cfg.max_slides_per_specimen.min(n));
        let informative = ((n as f64 * cfg.informative_fraction).ceil() as usize).clamp(1, n);
        let mut carries: Vec<bool> = (0..n).map(|i| i < informative).collect();
        carries.shuffle(&mut rng);
        for (i, &carry) in carries.iter().enumerate() {
            let slide = i % slides;
            let pos = (i / slides) as u32;
            let tile = TileRecord {
                slide_id: format!("{specimen_id}-s{slide}"),
                grid_x: pos % 16,
                grid_y: pos / 16,
                tissue_fraction: (rng.random_range(25..=100) as f64) / 100.0,
            };
            let strength = if carry { signal } else { 0.0 };
            let emb =
                encode_tile_synthetic(&tile, direction, self.tile_seed, strength, &self.basis)?;
            let key = TileKey {
                slide_id: tile.slide_id.clone(),
                grid_x: tile.grid_x,
                grid_y: tile.grid_y,
            };
            self.store.push(key, &emb.0)?;
            self.manifest.push(ManifestEntry {
                tile,
                specimen_id: Some(specimen_id.to_string()),
                concept: carry.then_some(direction),
            });
        }
        Ok(())
    }
}

/// Concept directions followed by the two transfer-class mixtures (the
/// first and second halves of the concepts).
pub fn concept_basis(cfg: &RunConfig) -> Result<ConceptBasis> {
    let k = cfg.concepts;
    let mut basis =
        ConceptBasis::orthonormal(cfg.tile_dim, k, derive_seed(cfg.seed, "concept-basis", &[]))?;
    basis.push_mixture(&(0..k / 2).collect::<Vec<_>>())?;
    basis.push_mixture(&(k / 2..k).collect::<Vec<_>>())?;
    Ok(basis)
}

/// Noise seed shared by every synthetic tile of a run.
pub fn tile_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "tiles", &[])
}

/// Embeds manifest tiles: entries with a concept carry `signal_strength`
/// along it, the rest are pure noise. The store digest is the corpus
/// digest of `cfg`.
pub fn embed_manifest(cfg: &RunConfig, entries: &[ManifestEntry]) -> Result<EmbeddingStore> {
    let basis = concept_basis(cfg)?;
    let seed = tile_seed(cfg);
    let mut store = EmbeddingStore::new(cfg.tile_dim);
    for e in entries {
        let (concept, signal) = match e.concept {
            Some(c) => (c, cfg.signal_strength),
            None => (0, 0.0),
        };
        let emb = encode_tile_synthetic(&e.tile, concept, seed, signal, &basis)?;
        let key = TileKey {
            slide_id: e.tile.slide_id.clone(),
            grid_x: e.tile.grid_x,
            grid_y: e.tile.grid_y,
        };
        store.push(key, &emb.0)?;
    }
    store.digest = cfg.corpus_digest();
    Ok(store)
}

/// Generates the corpus described by the corpus fields of `cfg`.
///
/// Concept specimens (`specimens_per_concept` training plus
/// `heldout_per_concept` held-out per concept) carry one concept direction.
/// The binary transfer task uses two mixtures of the concept directions,
/// each split evenly into transfer-train and transfer-test, and has no
/// reports.
pub fn gen_corpus(cfg: &RunConfig) -> Result<Corpus> {
    cfg.validate()?;
    let digest = cfg.corpus_digest();
    let k = cfg.concepts;
    let basis = concept_basis(cfg)?;
    let transfer_dirs = [k, k + 1];
    let mut b = Builder {
        cfg,
        basis,
        tile_seed: tile_seed(cfg),
        manifest: Vec::new(),
        store: EmbeddingStore::new(cfg.tile_dim),
    };
    let mut reports = Vec::new();
    let mut splits = Vec::new();
    let mut index = 0u64;
    let per_concept = cfg.specimens_per_concept + cfg.heldout_per_concept;
    for (concept, keyword) in KEYWORDS.iter().enumerate().take(k) {
        for j in 0..per_concept {
            let id = format!("S{index:05}");
            b.specimen(&id, index, concept, cfg.signal_strength)?;
            let mut rng = stream(cfg.seed, "corpus-report", &[index]);
            reports.push(ReportRecord {
                specimen_id: id.clone(),
                concept,
                rewrites: instantiate(keyword, &mut rng),
                corpus_digest: digest.clone(),
            });
            let split = if j < cfg.specimens_per_concept {
                Split::Train
            } else {
                Split::Heldout
            };
            splits.push(SplitRecord {
                specimen_id: id,
                split,
                label: concept,
                corpus_digest: digest.clone(),
            });
            index += 1;
        }
    }
    let n_train = cfg.transfer_per_class / 2;
    for (class, &dir) in transfer_dirs.iter().enumerate() {
        for j in 0..cfg.transfer_per_class {
            let id = format!("T{index:05}");
            b.specimen(&id, index, dir, cfg.transfer_signal)?;
            let split = if j < n_train {
                Split::TransferTrain
            } else {
                Split::TransferTest
            };
            splits.push(SplitRecord {
                specimen_id: id,
                split,
                label: class,
                corpus_digest: digest.clone(),
            });
            index += 1;
        }
    }
    let mut classes = BTreeMap::new();
    for kw in KEYWORDS.iter().take(k) {
        classes.insert(kw.to_string(), vec![concept_prompt(kw)]);
    }
    let prompts = PromptSet::new(classes)?;
    let texts: Vec<&str> = reports
        .iter()
        .flat_map(|r| r.rewrites.iter().map(String::as_str))
        .chain(prompts.classes.values().flatten().map(String::as_str))
        .collect();
    let vocab = Vocabulary::build(texts);
    let mut store = b.store;
    store.digest = digest.clone();
    Ok(Corpus {
        digest,
        manifest: b.manifest,
        store,
        reports,
        splits,
        prompts,
        vocab,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

impl Corpus {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_manifest(dir.join(MANIFEST_FILE), &self.manifest)?;
        write_store(dir.join(STORE_FILE), &self.store)?;
        write_jsonl(&dir.join(REPORTS_FILE), &self.reports)?;
        write_jsonl(&dir.join(SPLIT_FILE), &self.splits)?;
        std::fs::write(dir.join(PROMPTS_FILE), self.prompts.to_file_string())?;
        self.vocab.save(dir.join(VOCAB_FILE))?;
        Ok(())
    }

    /// Loads a saved corpus, requiring every record to carry one digest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let store = read_store(dir.join(STORE_FILE))?;
        let digest = store.digest.clone();
        let reports: Vec<ReportRecord> = read_jsonl(&dir.join(REPORTS_FILE))?;
        let splits: Vec<SplitRecord> = read_jsonl(&dir.join(SPLIT_FILE))?;
        let stray = reports
            .iter()
            .map(|r| &r.corpus_digest)
            .chain(splits.iter().map(|s| &s.corpus_digest))
            .find(|d| **d != digest);
        if let Some(found) = stray {
            return Err(Error::DigestMismatch {
                expected: digest,
                found: found.clone(),
            });
        }
        Ok(Self {
            manifest: read_manifest(dir.join(MANIFEST_FILE))?,
            store,
            reports,
            splits,
            prompts: PromptSet::load(dir.join(PROMPTS_FILE))?,
            vocab: Vocabulary::load(dir.join(VOCAB_FILE))?,
            digest,
        })
    }

    /// Fails unless the corpus was produced by the corpus fields of `cfg`.
    pub fn check_config(&self, cfg: &RunConfig) -> Result<()> {
        let expected = cfg.corpus_digest();
        if self.digest != expected {
            return Err(Error::DigestMismatch {
                expected,
                found: self.digest.clone(),
            });
        }
        Ok(())
    }

    /// Specimen bags keyed by specimen id.
    pub fn bags(&self) -> Result<HashMap<String, SpecimenBag>> {
        Ok(
            assemble_all(&self.manifest, &self.store, MAX_TILES_PER_SPECIMEN)?
                .into_iter()
                .map(|b| (b.specimen_id.clone(), b))
                .collect(),
        )
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SplitRecord> {
        self.splits.iter().filter(move |s| s.split == split)
    }

    /// Training examples (tiles plus tokenized rewrites) of `split`.
    pub fn examples(
        &self,
        bags: &HashMap<String, SpecimenBag>,
        split: Split,
    ) -> Result<Vec<TrainExample>> {
        let reports: HashMap<&str, &ReportRecord> = self
            .reports
            .iter()
            .map(|r| (r.specimen_id.as_str(), r))
            .collect();
        self.split(split)
            .map(|s| {
                let report = reports.get(s.specimen_id.as_str()).ok_or_else(|| {
                    Error::InvalidArgument(format!("no report for specimen {}", s.specimen_id))
                })?;
                Ok(TrainExample {
                    specimen_id: s.specimen_id.clone(),
                    tiles: bag_of(bags, &s.specimen_id)?.embeddings.clone(),
                    rewrites: report
                        .rewrites
                        .iter()
                        .map(|t| self.vocab.tokenize(t))
                        .collect(),
                })
            })
            .collect()
    }

    /// `(specimen id, bag, label)` triples of `split`.
    pub fn labeled<'a>(
        &'a self,
        bags: &'a HashMap<String, SpecimenBag>,
        split: Split,
    ) -> Result<Vec<(&'a str, &'a SpecimenBag, usize)>> {
        self.split(split)
            .map(|s| {
                Ok((
                    s.specimen_id.as_str(),
                    bag_of(bags, &s.specimen_id)?,
                    s.label,
                ))
            })
            .collect()
    }

    /// Binary bags of a transfer split (label 1 for the second class).
    pub fn transfer_bags(
        &self,
        bags: &HashMap<String, SpecimenBag>,
        split: Split,
    ) -> Result<Vec<LabeledBag>> {
        Ok(self
            .labeled(bags, split)?
            .into_iter()
            .map(|(_, b, label)| LabeledBag {
                tiles: b.embeddings.clone(),
                label: label == 1,
            })
            .collect())
    }
}

fn bag_of<'a>(bags: &'a HashMap<String, SpecimenBag>, id: &str) -> Result<&'a SpecimenBag> {
    bags.get(id)
        .ok_or_else(|| Error::InvalidArgument(format!("no tiles for specimen {id}")))
}
