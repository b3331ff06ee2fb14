//! Synthetic tile embeddings, the on-disk embedding store and specimen
//! assembly.
//!
//! The synthetic embedder stands in for a pretrained tile encoder: each tile
//! vector is seeded unit Gaussian noise plus `signal_strength` times a fixed
//! direction for the tile's concept, so class separability is controlled by
//! a single knob.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::rng::hash_seed;
use crate::tensor::Tensor;
use crate::tiling::{ManifestEntry, TileRecord};

/// Largest specimen admitted to training or inference.
pub const MAX_TILES_PER_SPECIMEN: usize = 100_000;

/// Full-scale tile embedding width (class token ‖ mean patch token).
pub const PAPER_TILE_DIM: usize = 2560;

const STORE_MAGIC: &[u8; 4] = b"PRSM";
const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// Tile vector laid out as `[class-token half | mean-patch half]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TileEmbedding(pub Vec<f32>);

impl TileEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn class_token_half(&self) -> &[f32] {
        &self.0[..self.0.len() / 2]
    }

    pub fn mean_patch_half(&self) -> &[f32] {
        &self.0[self.0.len() / 2..]
    }
}

/// Unit-norm concept directions. The first `base` directions are mutually
/// orthogonal; later ones may be normalized mixtures of base directions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBasis {
    dim: usize,
    directions: Vec<Vec<f64>>,
}

impl ConceptBasis {
    /// `count` orthonormal directions from Gram-Schmidt over seeded Gaussians.
    pub fn orthonormal(dim: usize, count: usize, seed: u64) -> Result<Self> {
        if count > dim {
            return Err(Error::InvalidArgument(format!(
                "{count} orthogonal concepts need dim >= {count}, got {dim}"
            )));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(hash_seed(&[b"concept-basis", &seed.to_le_bytes()]));
        let mut directions: Vec<Vec<f64>> = Vec::with_capacity(count);
        while directions.len() < count {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for u in &directions {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                v.iter_mut().for_each(|a| *a /= n);
                directions.push(v);
            }
        }
        Ok(Self { dim, directions })
    }

    /// Appends the normalized sum of existing directions and returns its id.
    pub fn push_mixture(&mut self, components: &[usize]) -> Result<usize> {
        let mut v = vec![0.0; self.dim];
        for &c in components {
            let d = self
                .directions
                .get(c)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown concept {c}")))?;
            v.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n < 1e-9 {
            return Err(Error::InvalidArgument("degenerate concept mixture".into()));
        }
        v.iter_mut().for_each(|a| *a /= n);
        self.directions.push(v);
        Ok(self.directions.len() - 1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn direction(&self, concept: usize) -> Option<&[f64]> {
        self.directions.get(concept).map(Vec::as_slice)
    }
}

/// Deterministic per-tile noise plus `signal_strength` along the concept
/// direction.
pub fn encode_tile_synthetic(
    tile: &TileRecord,
    concept: usize,
    seed: u64,
    signal_strength: f64,
    basis: &ConceptBasis,
) -> Result<TileEmbedding> {
    if !(signal_strength >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "signal_strength must be >= 0, got {signal_strength}"
        )));
    }
    if !basis.dim().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "tile dimension must be even, got {}",
            basis.dim()
        )));
    }
    let dir = basis
        .direction(concept)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown concept {concept}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(hash_seed(&[
        tile.slide_id.as_bytes(),
        &tile.grid_x.to_le_bytes(),
        &tile.grid_y.to_le_bytes(),
        &seed.to_le_bytes(),
    ]));
    let v = dir
        .iter()
        .map(|d| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            (noise + signal_strength * d) as f32
        })
        .collect();
    Ok(TileEmbedding(v))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TileKey {
    pub slide_id: String,
    pub grid_x: u32,
    pub grid_y: u32,
}

impl From<&TileRecord> for TileKey {
    fn from(t: &TileRecord) -> Self {
        Self {
            slide_id: t.slide_id.clone(),
            grid_x: t.grid_x,
            grid_y: t.grid_y,
        }
    }
}

/// Tile vectors keyed by provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: Vec<f32>,
    keys: Vec<TileKey>,
    index: HashMap<TileKey, usize>,
    /// Digest of the config that produced this store (may be empty).
    pub digest: String,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: Vec::new(),
            keys: Vec::new(),
            index: HashMap::new(),
            digest: String::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn push(&mut self, key: TileKey, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::shape(
                "embedding_store",
                format!("vector of {} into store of dim {}", vector.len(), self.dim),
            ));
        }
        if self.index.contains_key(&key) {
            return Err(Error::InvalidArgument(format!(
                "duplicate tile {}@({},{})",
                key.slide_id, key.grid_x, key.grid_y
            )));
        }
        self.index.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    pub fn get(&self, key: &TileKey) -> Option<&[f32]> {
        self.index.get(key).map(|&i| self.vector(i))
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn key(&self, i: usize) -> &TileKey {
        &self.keys[i]
    }

    pub fn raw_vectors(&self) -> &[f32] {
        &self.vectors
    }
}

/// Writes the little-endian store: magic, version, dim, count, vectors,
/// then the provenance index (config digest, then one key per vector).
pub fn write_store(path: impl AsRef<Path>, store: &EmbeddingStore) -> Result<()> {
    let mut w = ByteWriter::with_capacity(HEADER_LEN + store.vectors.len() * 4 + store.len() * 24);
    w.bytes(STORE_MAGIC);
    w.u32(STORE_VERSION);
    w.u32(store.dim as u32);
    w.u64(store.len() as u64);
    w.f32s(&store.vectors);
    w.str(&store.digest);
    for k in &store.keys {
        w.str(&k.slide_id);
        w.u32(k.grid_x);
        w.u32(k.grid_y);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&w.buf)?;
    f.flush()?;
    Ok(())
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(4, "magic")? != STORE_MAGIC {
        return Err(r.error("bad magic, not an embedding store"));
    }
    let version = r.u32("version")?;
    if version != STORE_VERSION {
        return Err(r.error(format!("unsupported store version {version}")));
    }
    let dim = r.u32("dim")? as usize;
    let count = r.u64("count")? as usize;
    let payload = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| r.error("header count overflows"))?;
    if r.remaining() < payload {
        return Err(r.error(format!(
            "header declares {count} vectors of dim {dim} ({payload} bytes) but payload has {} bytes",
            r.remaining()
        )));
    }
    let vectors = r.f32s(count * dim, "vectors")?;
    let digest = r.str("digest")?;
    let mut keys = Vec::with_capacity(count);
    for _ in 0..count {
        let slide_id = r.str("provenance")?;
        let grid_x = r.u32("provenance")?;
        let grid_y = r.u32("provenance")?;
        keys.push(TileKey {
            slide_id,
            grid_x,
            grid_y,
        });
    }
    r.finish()?;
    let index = keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.clone(), i))
        .collect::<HashMap<_, _>>();
    if index.len() != keys.len() {
        return Err(r.error("duplicate tile keys in provenance index"));
    }
    Ok(EmbeddingStore {
        dim,
        vectors,
        keys,
        index,
        digest,
    })
}

/// All tile embeddings of one specimen, in slide order.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecimenBag {
    pub specimen_id: String,
    /// `N × d` tile embeddings.
    pub embeddings: Tensor<f32>,
    pub provenance: Vec<TileKey>,
}

impl SpecimenBag {
    pub fn new(
        specimen_id: impl Into<String>,
        embeddings: Tensor<f32>,
        provenance: Vec<TileKey>,
    ) -> Result<Self> {
        let specimen_id = specimen_id.into();
        let n = embeddings.rows();
        if embeddings.shape().len() != 2 || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "specimen {specimen_id} has no tiles"
            )));
        }
        if n > MAX_TILES_PER_SPECIMEN {
            return Err(Error::OverCap {
                specimen_id,
                count: n,
                cap: MAX_TILES_PER_SPECIMEN,
            });
        }
        if provenance.len() != n {
            return Err(Error::shape(
                "specimen_bag",
                format!("{n} tiles, {} provenance keys", provenance.len()),
            ));
        }
        Ok(Self {
            specimen_id,
            embeddings,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Same bag with tiles reordered by `order` (a permutation of `0..len`).
    pub fn permuted(&self, order: &[usize]) -> Self {
        let d = self.dim();
        let data = order
            .iter()
            .flat_map(|&i| self.embeddings.row(i).iter().copied())
            .collect();
        Self {
            specimen_id: self.specimen_id.clone(),
            embeddings: Tensor::from_parts(vec![order.len(), d], data),
            provenance: order.iter().map(|&i| self.provenance[i].clone()).collect(),
        }
    }
}

/// Gathers the tiles listed in `entries` (manifest order) from the store.
/// Specimens above `cap` tiles are rejected rather than truncated.
pub fn assemble_specimen(
    specimen_id: &str,
    entries: &[&ManifestEntry],
    store: &EmbeddingStore,
    cap: usize,
) -> Result<SpecimenBag> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "specimen {specimen_id} has an empty manifest"
        )));
    }
    if entries.len() > cap {
        return Err(Error::OverCap {
            specimen_id: specimen_id.to_string(),
            count: entries.len(),
            cap,
        });
    }
    let mut data = Vec::with_capacity(entries.len() * store.dim());
    let mut provenance = Vec::with_capacity(entries.len());
    for e in entries {
        let key = TileKey::from(&e.tile);
        let v = store.get(&key).ok_or_else(|| Error::MissingTile {
            slide_id: key.slide_id.clone(),
            grid_x: key.grid_x,
            grid_y: key.grid_y,
        })?;
        data.extend_from_slice(v);
        provenance.push(key);
    }
    let embeddings = Tensor::from_parts(vec![entries.len(), store.dim()], data);
    SpecimenBag::new(specimen_id, embeddings, provenance)
}

/// Groups manifest entries by specimen (first-appearance order) and
/// assembles each bag.
pub fn assemble_all(
    entries: &[ManifestEntry],
    store: &EmbeddingStore,
    cap: usize,
) -> Result<Vec<SpecimenBag>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&ManifestEntry>> = HashMap::new();
    for e in entries {
        let id = e.specimen();
        groups
            .entry(id)
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(e);
    }
    order
        .into_iter()
        .map(|id| assemble_specimen(id, &groups[id], store, cap))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(slide: &str, x: u32, y: u32) -> TileRecord {
        TileRecord {
            slide_id: slide.into(),
            grid_x: x,
            grid_y: y,
            tissue_fraction: 1.0,
        }
    }

    #[test]
    fn basis_is_orthonormal() {
        let b = ConceptBasis::orthonormal(16, 5, 1).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = b
                    .direction(i)
                    .unwrap()
                    .iter()
                    .zip(b.direction(j).unwrap())
                    .map(|(a, c)| a * c)
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
        assert!(ConceptBasis::orthonormal(4, 5, 1).is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let b = ConceptBasis::orthonormal(8, 2, 1).unwrap();
        let t = tile("s", 3, 4);
        let a = encode_tile_synthetic(&t, 1, 7, 2.0, &b).unwrap();
        let c = encode_tile_synthetic(&t, 1, 7, 2.0, &b).unwrap();
        assert_eq!(a, c);
        let other = encode_tile_synthetic(&tile("s", 4, 3), 1, 7, 2.0, &b).unwrap();
        assert_ne!(a, other);
        assert_eq!(a.class_token_half().len(), 4);
        assert!(encode_tile_synthetic(&t, 1, 7, -1.0, &b).is_err());
    }

    #[test]
    fn assemble_in_manifest_order() {
        let b = ConceptBasis::orthonormal(4, 1, 0).unwrap();
        let mut store = EmbeddingStore::new(4);
        let mut entries = Vec::new();
        for s in ["s1", "s2"] {
            for x in 0..3 {
                let t = tile(s, x, 0);
                store
                    .push(
                        TileKey::from(&t),
                        &encode_tile_synthetic(&t, 0, 1, 1.0, &b).unwrap().0,
                    )
                    .unwrap();
                entries.push(ManifestEntry {
                    tile: t,
                    specimen_id: Some("spec".into()),
                    concept: None,
                });
            }
        }
        let refs: Vec<&ManifestEntry> = entries.iter().collect();
        let bag = assemble_specimen("spec", &refs, &store, MAX_TILES_PER_SPECIMEN).unwrap();
        assert_eq!(bag.len(), 6);
        assert_eq!(bag.provenance[3].slide_id, "s2");
        assert_eq!(
            bag.embeddings.row(4),
            store.get(&TileKey::from(&tile("s2", 1, 0))).unwrap()
        );

        assert!(matches!(
            assemble_specimen("spec", &[], &store, 10),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            assemble_specimen("spec", &refs, &store, 5),
            Err(Error::OverCap { .. })
        ));
        let missing = ManifestEntry::from(tile("zz", 0, 0));
        assert!(matches!(
            assemble_specimen("spec", &[&missing], &store, 10),
            Err(Error::MissingTile { .. })
        ));
    }

    #[test]
    fn over_cap_specimen_is_excluded() {
        let entries: Vec<ManifestEntry> = (0..=MAX_TILES_PER_SPECIMEN as u32)
            .map(|x| tile("s", x, 0).into())
            .collect();
        let refs: Vec<&ManifestEntry> = entries.iter().collect();
        let store = EmbeddingStore::new(2);
        let err = assemble_specimen("big", &refs, &store, MAX_TILES_PER_SPECIMEN).unwrap_err();
        assert!(matches!(err, Error::OverCap { count: 100_001, .. }));
    }
}
