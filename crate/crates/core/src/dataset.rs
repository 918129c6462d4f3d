//! Sharded binary storage and deterministic streaming of training
//! records.
//!
//! A record bundles everything one optimization sample needs: a same-
//! position view pair with its ground-truth angular offset, a source and
//! a target view joined by a walked path, the top-down semantic map of
//! that path, and the four explorable-distance targets. Records are
//! written to fixed-size shards in a little-endian length-prefixed
//! layout chosen to be trivially bit-exact, and a plain-text manifest
//! lists the shards alongside the world ids so train/val splits stay
//! disjoint and subsetting by world or sample fraction is reproducible.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path as FsPath, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::Point;
use crate::mapper::SemanticMap;
use crate::render::RgbdImage;
use crate::sampler::ViewId;
use crate::world::ByteReader;

/// Records per shard file unless the caller overrides it.
pub const DEFAULT_SHARD_SIZE: usize = 500;

const SHARD_MAGIC: &[u8; 4] = b"E2MS";
const SHARD_VERSION: u16 = 1;

/// Optional provenance of the walked path behind a record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathMeta {
    pub actions: u32,
    pub traveled_m: f32,
}

/// One training sample.
///
/// `d_stars` holds the explorable straight-line distances of the four
/// images in the fixed order `[pair[0], pair[1], source, target]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub world_id: u32,
    /// Unique within a dataset; writers reject duplicates.
    pub record_id: u32,
    pub pair_ids: [ViewId; 2],
    /// Signed angular offset between the pair views, radians in (-pi, pi].
    pub theta_star: f64,
    pub pair: [RgbdImage; 2],
    pub source_id: ViewId,
    pub target_id: ViewId,
    pub source: RgbdImage,
    pub target: RgbdImage,
    pub map: SemanticMap,
    pub d_stars: [f32; 4],
    pub meta: Option<PathMeta>,
}

impl TrainingRecord {
    /// Key under which the record is stored inside a shard.
    pub fn key(&self) -> String {
        format!("w{:04}:r{:06}", self.world_id, self.record_id)
    }
}

// --- record payload codec ---------------------------------------------------
//
// Little-endian throughout. Tensors carry a shape header (u8 rank, u32
// dims) before their f32 data; the kind grid of the map is raw bytes.

fn put_tensor(buf: &mut Vec<u8>, dims: &[u32], data: &[f32]) {
    debug_assert_eq!(dims.iter().product::<u32>() as usize, data.len());
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn take_tensor(r: &mut ByteReader, want_rank: usize) -> Result<(Vec<u32>, Vec<f32>)> {
    let rank = r.u8()? as usize;
    if rank != want_rank {
        return Err(Error::format(r.path(), format!("tensor rank {rank}, expected {want_rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()?);
    }
    let n = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64)).unwrap_or(u64::MAX);
    if n > (1 << 28) {
        return Err(Error::format(r.path(), format!("tensor of {n} elements is implausible")));
    }
    let mut data = Vec::with_capacity(n as usize);
    for _ in 0..n {
        data.push(r.f32()?);
    }
    Ok((dims, data))
}

fn put_image(buf: &mut Vec<u8>, img: &RgbdImage) {
    put_tensor(buf, &[img.height as u32, img.width as u32, 3], &img.rgb);
    put_tensor(buf, &[img.height as u32, img.width as u32], &img.depth);
}

fn take_image(r: &mut ByteReader) -> Result<RgbdImage> {
    let (rgb_dims, rgb) = take_tensor(r, 3)?;
    let (d_dims, depth) = take_tensor(r, 2)?;
    if rgb_dims[2] != 3 || rgb_dims[0] != d_dims[0] || rgb_dims[1] != d_dims[1] {
        return Err(Error::format(r.path(), "image rgb/depth shapes disagree"));
    }
    Ok(RgbdImage {
        width: rgb_dims[1] as usize,
        height: rgb_dims[0] as usize,
        rgb,
        depth,
    })
}

fn encode_record(rec: &TrainingRecord) -> Vec<u8> {
    let mut buf = Vec::with_capacity(
        64 + 4 * (rec.source.rgb.len() + rec.source.depth.len()) * 4 + rec.map.rgb.len() * 4,
    );
    buf.extend_from_slice(&rec.world_id.to_le_bytes());
    buf.extend_from_slice(&rec.record_id.to_le_bytes());
    buf.extend_from_slice(&rec.pair_ids[0].0.to_le_bytes());
    buf.extend_from_slice(&rec.pair_ids[1].0.to_le_bytes());
    buf.extend_from_slice(&rec.theta_star.to_le_bytes());
    buf.extend_from_slice(&rec.source_id.0.to_le_bytes());
    buf.extend_from_slice(&rec.target_id.0.to_le_bytes());
    for d in rec.d_stars {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    match rec.meta {
        Some(m) => {
            buf.push(1);
            buf.extend_from_slice(&m.actions.to_le_bytes());
            buf.extend_from_slice(&m.traveled_m.to_le_bytes());
        }
        None => buf.push(0),
    }
    put_image(&mut buf, &rec.pair[0]);
    put_image(&mut buf, &rec.pair[1]);
    put_image(&mut buf, &rec.source);
    put_image(&mut buf, &rec.target);
    // map: geometry scalars, rgb tensor, kind bytes
    buf.extend_from_slice(&(rec.map.size as u32).to_le_bytes());
    buf.extend_from_slice(&rec.map.half_extent_m.to_le_bytes());
    buf.extend_from_slice(&rec.map.origin.x.to_le_bytes());
    buf.extend_from_slice(&rec.map.origin.y.to_le_bytes());
    put_tensor(&mut buf, &[rec.map.size as u32, rec.map.size as u32, 3], &rec.map.rgb);
    buf.extend_from_slice(&rec.map.kind);
    buf
}

fn decode_record(bytes: &[u8], path: &FsPath) -> Result<TrainingRecord> {
    let mut r = ByteReader::new(bytes, path);
    let world_id = r.u32()?;
    let record_id = r.u32()?;
    let pair_ids = [ViewId(r.u32()?), ViewId(r.u32()?)];
    let theta_star = r.f64()?;
    let source_id = ViewId(r.u32()?);
    let target_id = ViewId(r.u32()?);
    let mut d_stars = [0f32; 4];
    for d in &mut d_stars {
        *d = r.f32()?;
    }
    let meta = match r.u8()? {
        0 => None,
        1 => Some(PathMeta { actions: r.u32()?, traveled_m: r.f32()? }),
        b => return Err(Error::format(path, format!("bad meta presence byte {b}"))),
    };
    let pair = [take_image(&mut r)?, take_image(&mut r)?];
    let source = take_image(&mut r)?;
    let target = take_image(&mut r)?;
    let size = r.u32()? as usize;
    let half_extent_m = r.f64()?;
    let origin = Point::new(r.f64()?, r.f64()?);
    let (dims, rgb) = take_tensor(&mut r, 3)?;
    if dims[0] as usize != size || dims[1] as usize != size || dims[2] != 3 {
        return Err(Error::format(path, "map tensor shape disagrees with header"));
    }
    let kind = r.take(size * size)?.to_vec();
    if r.remaining() != 0 {
        return Err(Error::format(path, "trailing bytes in record payload"));
    }
    Ok(TrainingRecord {
        world_id,
        record_id,
        pair_ids,
        theta_star,
        source_id,
        target_id,
        source,
        target,
        pair,
        map: SemanticMap { size, half_extent_m, origin, rgb, kind },
        d_stars,
        meta,
    })
}

// --- shard files -------------------------------------------------------------

/// Sequential reader over one shard file. Loads the file once and decodes
/// records on demand; records come back in storage order.
pub struct ShardReader {
    path: PathBuf,
    bytes: Vec<u8>,
    /// (payload offset, payload length) per record.
    index: Vec<(usize, usize)>,
}

impl ShardReader {
    pub fn open(path: &FsPath) -> Result<ShardReader> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader::new(&bytes, path);
        if r.take(4)? != SHARD_MAGIC {
            return Err(Error::format(path, "bad magic (not a shard file)"));
        }
        let version = r.u16()?;
        if version != SHARD_VERSION {
            return Err(Error::format(path, format!("unsupported shard version {version}")));
        }
        let count = r.u32()? as usize;
        let mut index = Vec::with_capacity(count);
        let mut at = 10; // magic + version + count
        for i in 0..count {
            let mut h = ByteReader::new(&bytes[at..], path);
            let key_len = h
                .u32()
                .map_err(|_| Error::format(path, format!("truncated record header {i}")))? as usize;
            h.take(key_len)?;
            let payload_len = h.u64()? as usize;
            let start = at + 4 + key_len + 8;
            if start + payload_len > bytes.len() {
                return Err(Error::format(path, format!("record {i} runs past end of file")));
            }
            index.push((start, payload_len));
            at = start + payload_len;
        }
        if at != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last record"));
        }
        Ok(ShardReader { path: path.to_path_buf(), bytes, index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Decode the record at a position in storage order.
    pub fn record(&self, i: usize) -> Result<TrainingRecord> {
        let (off, len) = self.index[i];
        decode_record(&self.bytes[off..off + len], &self.path)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<TrainingRecord>> + '_ {
        (0..self.len()).map(move |i| self.record(i))
    }
}

// --- manifest -----------------------------------------------------------------

/// Plain-text description of a dataset split: the shards, their record
/// counts, the world ids the records came from, and the provenance seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardManifest {
    /// Directory the shard paths are relative to (the manifest's home).
    pub dir: PathBuf,
    pub split: String,
    pub seed: u64,
    pub world_fraction: f64,
    pub sample_fraction: f64,
    /// Sorted, deduplicated world ids present in this split.
    pub worlds: Vec<u32>,
    /// Shard file names (relative to `dir`) and their record counts.
    pub shards: Vec<(String, u32)>,
}

impl ShardManifest {
    pub fn record_count(&self) -> u64 {
        self.shards.iter().map(|&(_, n)| n as u64).sum()
    }

    pub fn shard_path(&self, i: usize) -> PathBuf {
        self.dir.join(&self.shards[i].0)
    }

    /// Standard manifest file name for a split.
    pub fn file_name(split: &str) -> String {
        format!("{split}.manifest")
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.dir.join(Self::file_name(&self.split));
        let mut text = String::new();
        text.push_str("format: e2ms-manifest v1\n");
        text.push_str(&format!("split: {}\n", self.split));
        text.push_str(&format!("seed: {}\n", self.seed));
        text.push_str(&format!("world_fraction: {}\n", self.world_fraction));
        text.push_str(&format!("sample_fraction: {}\n", self.sample_fraction));
        let worlds: Vec<String> = self.worlds.iter().map(|w| w.to_string()).collect();
        text.push_str(&format!("worlds: {}\n", worlds.join(",")));
        for (name, count) in &self.shards {
            text.push_str(&format!("shard: {name} {count}\n"));
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &FsPath) -> Result<ShardManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(FsPath::new(".")).to_path_buf();
        let mut split = None;
        let mut seed = None;
        let mut world_fraction = 1.0;
        let mut sample_fraction = 1.0;
        let mut worlds = Vec::new();
        let mut shards = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| Error::format(path, format!("line {}: missing ':'", ln + 1)))?;
            let value = value.trim();
            let bad = |what: &str| Error::format(path, format!("line {}: bad {what}", ln + 1));
            match key.trim() {
                "format" => {
                    if value != "e2ms-manifest v1" {
                        return Err(Error::format(path, format!("unsupported format '{value}'")));
                    }
                }
                "split" => split = Some(value.to_string()),
                "seed" => seed = Some(value.parse().map_err(|_| bad("seed"))?),
                "world_fraction" => world_fraction = value.parse().map_err(|_| bad("fraction"))?,
                "sample_fraction" => sample_fraction = value.parse().map_err(|_| bad("fraction"))?,
                "worlds" => {
                    for tok in value.split(',').filter(|t| !t.is_empty()) {
                        worlds.push(tok.trim().parse().map_err(|_| bad("world id"))?);
                    }
                }
                "shard" => {
                    let (name, count) = value.rsplit_once(' ').ok_or_else(|| bad("shard line"))?;
                    shards.push((name.trim().to_string(), count.parse().map_err(|_| bad("count"))?));
                }
                other => return Err(Error::format(path, format!("unknown key '{other}'"))),
            }
        }
        Ok(ShardManifest {
            dir,
            split: split.ok_or_else(|| Error::format(path, "missing split"))?,
            seed: seed.ok_or_else(|| Error::format(path, "missing seed"))?,
            world_fraction,
            sample_fraction,
            worlds,
            shards,
        })
    }
}

/// True when two manifests share no world id (the train/val contract).
pub fn worlds_disjoint(a: &ShardManifest, b: &ShardManifest) -> bool {
    let set: BTreeSet<u32> = a.worlds.iter().copied().collect();
    !b.worlds.iter().any(|w| set.contains(w))
}

/// Write records into fixed-size shards under `dir` (created if absent)
/// and return the manifest, which is also saved as `{split}.manifest`.
/// A failed write removes the partial shard before returning.
pub fn write_shards<I>(
    records: I,
    dir: &FsPath,
    split: &str,
    seed: u64,
    shard_size: usize,
) -> Result<ShardManifest>
where
    I: IntoIterator<Item = TrainingRecord>,
{
    if shard_size == 0 {
        return Err(Error::InvalidArgument("shard_size must be positive".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut seen_ids = BTreeSet::new();
    let mut worlds = BTreeSet::new();
    let mut shards: Vec<(String, u32)> = Vec::new();
    let mut chunk: Vec<(String, Vec<u8>)> = Vec::new();

    let flush = |chunk: &mut Vec<(String, Vec<u8>)>, shards: &mut Vec<(String, u32)>| -> Result<()> {
        if chunk.is_empty() {
            return Ok(());
        }
        let name = format!("{split}-{:04}.e2ms", shards.len());
        let path = dir.join(&name);
        let write = || -> std::io::Result<()> {
            let mut f = std::io::BufWriter::new(File::create(&path)?);
            f.write_all(SHARD_MAGIC)?;
            f.write_all(&SHARD_VERSION.to_le_bytes())?;
            f.write_all(&(chunk.len() as u32).to_le_bytes())?;
            for (key, payload) in chunk.iter() {
                f.write_all(&(key.len() as u32).to_le_bytes())?;
                f.write_all(key.as_bytes())?;
                f.write_all(&(payload.len() as u64).to_le_bytes())?;
                f.write_all(payload)?;
            }
            f.flush()
        };
        if let Err(e) = write() {
            let _ = std::fs::remove_file(&path);
            return Err(Error::io(&path, e));
        }
        shards.push((name, chunk.len() as u32));
        chunk.clear();
        Ok(())
    };

    let mut any = false;
    for rec in records {
        any = true;
        if !seen_ids.insert(rec.record_id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate record_id {} in dataset",
                rec.record_id
            )));
        }
        worlds.insert(rec.world_id);
        chunk.push((rec.key(), encode_record(&rec)));
        if chunk.len() == shard_size {
            flush(&mut chunk, &mut shards)?;
        }
    }
    if !any {
        return Err(Error::InvalidArgument("no records to write".into()));
    }
    flush(&mut chunk, &mut shards)?;

    let manifest = ShardManifest {
        dir: dir.to_path_buf(),
        split: split.to_string(),
        seed,
        world_fraction: 1.0,
        sample_fraction: 1.0,
        worlds: worlds.into_iter().collect(),
        shards,
    };
    manifest.save()?;
    Ok(manifest)
}

// --- deterministic streaming ---------------------------------------------------

/// One epoch's worth of records: a deterministic selection (world prefix,
/// per-record sample hash) in a deterministic shuffled order. Shards load
/// lazily, one at a time, as the iteration first touches them.
pub struct EpochStream {
    manifest: ShardManifest,
    /// (shard index, record index within shard), pre-shuffled.
    order: Vec<(u32, u32)>,
    at: usize,
    cached: Option<(u32, ShardReader)>,
}

/// Uniform-in-[0,1) hash of (seed, world, record) used for sample-fraction
/// subsetting; monotone thresholds make smaller fractions subsets of
/// larger ones.
fn sample_unit(seed: u64, world_id: u32, record_id: u32) -> f64 {
    // splitmix64 over the packed inputs
    let mut z = seed ^ ((world_id as u64) << 32 | record_id as u64).wrapping_mul(0x9E3779B97F4A7C15);
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Select and order one epoch of records.
///
/// `world_fraction` keeps a prefix of the sorted world ids (`ceil(f * n)`
/// of them); `sample_fraction` keeps records whose per-record hash falls
/// below the fraction; `shuffle_seed` fixes the iteration order. Callers
/// that stream several epochs mix the epoch index into the seed.
pub fn stream_records(
    manifest: &ShardManifest,
    sample_fraction: f64,
    world_fraction: f64,
    shuffle_seed: u64,
) -> Result<EpochStream> {
    for (name, f) in [("sample_fraction", sample_fraction), ("world_fraction", world_fraction)] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidArgument(format!("{name} {f} outside (0, 1]")));
        }
    }
    let kept_worlds: BTreeSet<u32> = {
        let n = manifest.worlds.len();
        let keep = ((world_fraction * n as f64).ceil() as usize).clamp(1, n);
        manifest.worlds.iter().copied().take(keep).collect()
    };

    // Walk shard headers and payload prefixes to find each record's ids
    // without decoding images.
    let mut order = Vec::new();
    for (si, _) in manifest.shards.iter().enumerate() {
        let reader = ShardReader::open(&manifest.shard_path(si))?;
        for ri in 0..reader.len() {
            let (off, len) = reader.index[ri];
            let mut r = ByteReader::new(&reader.bytes[off..off + len.min(8)], &reader.path);
            let world_id = r.u32()?;
            let record_id = r.u32()?;
            if !kept_worlds.contains(&world_id) {
                continue;
            }
            if sample_fraction < 1.0
                && sample_unit(manifest.seed, world_id, record_id) >= sample_fraction
            {
                continue;
            }
            order.push((si as u32, ri as u32));
        }
    }
    if order.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "selection is empty (sample_fraction {sample_fraction}, world_fraction {world_fraction})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);
    Ok(EpochStream { manifest: manifest.clone(), order, at: 0, cached: None })
}

impl EpochStream {
    /// Records this epoch will yield.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl Iterator for EpochStream {
    type Item = Result<TrainingRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let &(si, ri) = self.order.get(self.at)?;
        self.at += 1;
        let load = |cache: &mut Option<(u32, ShardReader)>| -> Result<TrainingRecord> {
            let hit = matches!(cache, Some((s, _)) if *s == si);
            if !hit {
                *cache = Some((si, ShardReader::open(&self.manifest.shard_path(si as usize))?));
            }
            cache.as_ref().unwrap().1.record(ri as usize)
        };
        Some(load(&mut self.cached))
    }
}
