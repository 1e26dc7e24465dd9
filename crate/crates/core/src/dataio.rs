//! Region-feature files, vocabularies, caption files, the synthetic
//! aligned-corpus generator and image-level splits.
//!
//! # SCNF layout
//!
//! All integers are little-endian `u32`.
//!
//! | field        | size          |
//! |--------------|---------------|
//! | magic `SCNF` | 4 bytes       |
//! | version = 1  | 4             |
//! | image count  | 4             |
//! | per image: regions `k`, width `D`, then `k·D` little-endian `f32` |
//!
//! Regions are stored in descending detector-confidence order, so
//! truncating to the first `m` rows keeps the `m` most confident ones.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScanError};
use crate::linalg::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"SCNF";
pub const FEATURE_VERSION: u32 = 1;
pub const MAX_REGIONS: usize = 128;
pub const UNKNOWN_TOKEN: &str = "<unk>";

/// One image's regions as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionBlock {
    pub regions: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl RegionBlock {
    pub fn from_matrix(m: &Matrix) -> Self {
        RegionBlock {
            regions: m.rows(),
            dim: m.cols(),
            values: m.data().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Widens to 64-bit; exact for every `f32`.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.regions,
            self.dim,
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("validated on construction")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureFile {
    pub images: Vec<RegionBlock>,
}

impl FeatureFile {
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.images.iter().enumerate() {
            if b.regions == 0 || b.regions > MAX_REGIONS {
                return Err(ScanError::Spec(format!(
                    "image {i} has {} regions (allowed 1..={MAX_REGIONS})",
                    b.regions
                )));
            }
            if b.values.len() != b.regions * b.dim {
                return Err(ScanError::Spec(format!(
                    "image {i}: {} values for {}x{} regions",
                    b.values.len(),
                    b.regions,
                    b.dim
                )));
            }
            if b.values.iter().any(|v| !v.is_finite()) {
                return Err(ScanError::Spec(format!("image {i} has a non-finite value")));
            }
        }
        Ok(())
    }
}

pub fn encode_features(file: &FeatureFile) -> Result<Vec<u8>> {
    file.validate()?;
    let payload: usize = file.images.iter().map(|b| 8 + 4 * b.values.len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(file.images.len() as u32).to_le_bytes());
    for b in &file.images {
        out.extend_from_slice(&(b.regions as u32).to_le_bytes());
        out.extend_from_slice(&(b.dim as u32).to_le_bytes());
        for v in &b.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(ScanError::format(
                self.pos as u64,
                format!("truncated {what}: expected {n} bytes, found {remaining}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureFile> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(ScanError::format(0, format!("bad magic {magic:02x?}, expected \"SCNF\"")));
    }
    let version = cur.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(ScanError::format(4, format!("unsupported version {version}")));
    }
    let count = cur.u32("image count")? as usize;
    let mut images = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let header_at = cur.pos as u64;
        let regions = cur.u32("region count")? as usize;
        let dim = cur.u32("feature width")? as usize;
        if regions == 0 || regions > MAX_REGIONS {
            return Err(ScanError::format(
                header_at,
                format!("image {i}: region count {regions} outside 1..={MAX_REGIONS}"),
            ));
        }
        let n = regions * dim;
        let raw = cur.take(4 * n, &format!("payload of image {i} ({regions}x{dim} f32)"))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(ScanError::format(
                header_at + 8 + 4 * j as u64,
                format!("image {i}: non-finite value"),
            ));
        }
        images.push(RegionBlock { regions, dim, values });
    }
    if cur.pos != bytes.len() {
        return Err(ScanError::format(
            cur.pos as u64,
            format!("{} trailing bytes after {count} images", bytes.len() - cur.pos),
        ));
    }
    Ok(FeatureFile { images })
}

/// Writes via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| format!(".{}.tmp", n.to_string_lossy()))
        .unwrap_or_else(|| ".tmp".into());
    tmp.set_file_name(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_features(path: &Path, file: &FeatureFile) -> Result<()> {
    write_atomic(path, &encode_features(file)?)
}

pub fn read_features(path: &Path) -> Result<FeatureFile> {
    decode_features(&fs::read(path)?)
}

/// Token ↔ index map; index 0 is always [`UNKNOWN_TOKEN`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = ScanError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            return Err(ScanError::format(0, format!("line 0 must be the sentinel {UNKNOWN_TOKEN}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(ScanError::format(i as u64, format!("invalid token {t:?} on line {i}")));
            }
            if let Some(prev) = index.insert(t.clone(), i) {
                return Err(ScanError::format(
                    i as u64,
                    format!("duplicate token {t:?} on lines {prev} and {i}"),
                ));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Maps a token to its index, or 0 when unknown.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(0)
    }

    /// Encodes whitespace-separated text; also returns the tokens that
    /// fell back to the sentinel.
    pub fn encode(&self, text: &str) -> (Vec<usize>, Vec<String>) {
        let mut unknown = Vec::new();
        let ids = text
            .split_whitespace()
            .map(|t| {
                self.get(t).unwrap_or_else(|| {
                    unknown.push(t.to_string());
                    0
                })
            })
            .collect();
        (ids, unknown)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }
}

/// Reads a one-token-per-line vocabulary (line number = index).
/// Offsets in format errors are line numbers.
pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path)?;
    Vocab::from_tokens(text.lines().map(str::to_string).collect())
}

pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    write_atomic(path, vocab.to_text().as_bytes())
}

/// One caption line: `image_id<TAB>token token …`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image: usize,
    pub tokens: Vec<String>,
}

pub fn parse_captions(text: &str) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (lineno, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| {
            ScanError::format(start, format!("line {}: missing TAB after image id", lineno + 1))
        })?;
        let image = id.trim().parse::<usize>().map_err(|_| {
            ScanError::format(start, format!("line {}: bad image id {id:?}", lineno + 1))
        })?;
        let tokens: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(ScanError::format(start, format!("line {}: empty caption", lineno + 1)));
        }
        out.push(CaptionRecord { image, tokens });
    }
    Ok(out)
}

pub fn captions_to_text(captions: &[CaptionRecord]) -> String {
    let mut s = String::new();
    for c in captions {
        s.push_str(&c.image.to_string());
        s.push('\t');
        s.push_str(&c.tokens.join(" "));
        s.push('\n');
    }
    s
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    parse_captions(&fs::read_to_string(path)?)
}

pub fn write_captions(path: &Path, captions: &[CaptionRecord]) -> Result<()> {
    write_atomic(path, captions_to_text(captions).as_bytes())
}

/// Region features plus captions referring to them by position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub features: FeatureFile,
    pub captions: Vec<CaptionRecord>,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        let m = self.features.images.len();
        if let Some(c) = self.captions.iter().find(|c| c.image >= m) {
            return Err(ScanError::Spec(format!(
                "caption refers to image {} but only {m} images exist",
                c.image
            )));
        }
        Ok(())
    }
}

pub fn save_corpus(dir: &Path, name: &str, corpus: &Corpus) -> Result<()> {
    write_features(&dir.join(format!("{name}.scnf")), &corpus.features)?;
    write_captions(&dir.join(format!("{name}.captions")), &corpus.captions)
}

pub fn load_corpus(dir: &Path, name: &str) -> Result<Corpus> {
    let corpus = Corpus {
        features: read_features(&dir.join(format!("{name}.scnf")))?,
        captions: read_captions(&dir.join(format!("{name}.captions")))?,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// A caption resolved against a vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    pub image: usize,
    pub tokens: Vec<usize>,
}

/// Tensor-ready view of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Matrix>,
    pub captions: Vec<Caption>,
    /// How many caption tokens fell back to the sentinel.
    pub unknown_tokens: usize,
}

impl Dataset {
    pub fn from_corpus(corpus: &Corpus, vocab: &Vocab) -> Result<Self> {
        corpus.validate()?;
        let mut unknown_tokens = 0;
        let captions = corpus
            .captions
            .iter()
            .map(|c| {
                let tokens = c
                    .tokens
                    .iter()
                    .map(|t| {
                        vocab.get(t).unwrap_or_else(|| {
                            unknown_tokens += 1;
                            0
                        })
                    })
                    .collect();
                Caption { image: c.image, tokens }
            })
            .collect();
        Ok(Dataset {
            images: corpus.features.images.iter().map(RegionBlock::to_matrix).collect(),
            captions,
            unknown_tokens,
        })
    }

    pub fn raw_dim(&self) -> Option<usize> {
        self.images.first().map(Matrix::cols)
    }
}

/// Parameters of the synthetic aligned corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub concepts: usize,
    pub images: usize,
    pub regions: usize,
    pub captions_per_image: usize,
    pub noise: f64,
    pub raw_dim: usize,
    /// Share of caption tokens that are filler words.
    pub filler_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            concepts: 30,
            images: 150,
            regions: 6,
            captions_per_image: 5,
            noise: 0.1,
            raw_dim: 64,
            filler_fraction: 0.2,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ScanError::Spec(m));
        if self.concepts < 2 {
            return fail(format!("need at least 2 concepts, got {}", self.concepts));
        }
        if self.regions == 0 || self.regions > MAX_REGIONS {
            return fail(format!("regions per image must be in 1..={MAX_REGIONS}, got {}", self.regions));
        }
        if self.images == 0 || self.captions_per_image == 0 || self.raw_dim == 0 {
            return fail("images, captions per image and raw width must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be >= 0, got {}", self.noise));
        }
        if !(0.0..1.0).contains(&self.filler_fraction) {
            return fail(format!("filler fraction must be in [0, 1), got {}", self.filler_fraction));
        }
        Ok(())
    }
}

pub const FILLER_WORDS: [&str; 8] = ["a", "is", "the", "of", "on", "with", "and", "in"];

/// Generated corpus together with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub vocab: Vocab,
    /// `concepts × raw_dim`, unit rows.
    pub prototypes: Matrix,
    /// Concept id of every region, per image.
    pub region_concepts: Vec<Vec<usize>>,
}

pub fn concept_token(c: usize, concepts: usize) -> String {
    let width = (concepts.saturating_sub(1)).to_string().len();
    format!("c{c:0width$}")
}

/// Builds a corpus in which every caption word is either a filler or
/// names a concept present in one of the image's regions.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut protos = Matrix::zeros(spec.concepts, spec.raw_dim);
    for c in 0..spec.concepts {
        let row = protos.row_mut(c);
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let n = crate::linalg::norm2(row);
            if n > 1e-6 {
                row.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
    }

    let mut tokens = vec![UNKNOWN_TOKEN.to_string()];
    tokens.extend(FILLER_WORDS.iter().map(|s| s.to_string()));
    tokens.extend((0..spec.concepts).map(|c| concept_token(c, spec.concepts)));
    let vocab = Vocab::from_tokens(tokens)?;

    let noise = Normal::new(0.0, spec.noise).map_err(|e| ScanError::Spec(e.to_string()))?;
    let k = spec.regions;
    let min_mentions = ((2 * k).div_ceil(3)).max(1);
    let all_concepts: Vec<usize> = (0..spec.concepts).collect();

    let mut images = Vec::with_capacity(spec.images);
    let mut region_concepts = Vec::with_capacity(spec.images);
    let mut captions = Vec::new();
    for img in 0..spec.images {
        let chosen: Vec<usize> = if spec.concepts >= k {
            all_concepts.choose_multiple(&mut rng, k).copied().collect()
        } else {
            (0..k).map(|_| rng.random_range(0..spec.concepts)).collect()
        };
        let mut feats = Matrix::zeros(k, spec.raw_dim);
        for (r, &c) in chosen.iter().enumerate() {
            for (d, v) in feats.row_mut(r).iter_mut().enumerate() {
                *v = protos.get(c, d) + noise.sample(&mut rng);
            }
        }
        images.push(RegionBlock::from_matrix(&feats));

        for _ in 0..spec.captions_per_image {
            let mentions = rng.random_range(min_mentions..=k);
            let mut regions: Vec<usize> = (0..k).collect();
            regions.shuffle(&mut rng);
            let mut words: Vec<String> = regions[..mentions]
                .iter()
                .map(|&r| concept_token(chosen[r], spec.concepts))
                .collect();
            let fillers =
                (mentions as f64 * spec.filler_fraction / (1.0 - spec.filler_fraction)).round() as usize;
            for _ in 0..fillers {
                let at = rng.random_range(0..=words.len());
                let w = FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())];
                words.insert(at, w.to_string());
            }
            captions.push(CaptionRecord { image: img, tokens: words });
        }
        region_concepts.push(chosen);
    }

    Ok(SyntheticData {
        corpus: Corpus {
            features: FeatureFile { images },
            captions,
        },
        vocab,
        prototypes: protos,
        region_concepts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl std::str::FromStr for SplitCounts {
    type Err = ScanError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let parse = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| ScanError::Config(format!("bad split count {p:?}")))
        };
        match parts.as_slice() {
            [a, b, c] => Ok(SplitCounts {
                train: parse(a)?,
                val: parse(b)?,
                test: parse(c)?,
            }),
            _ => Err(ScanError::Config(format!("split must be TRAIN,VAL,TEST, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
    /// Original image index of each image, per split.
    pub origin: [Vec<usize>; 3],
}

/// Seeded image-level partition; captions follow their image and are
/// renumbered to positions within the split.
pub fn split(corpus: &Corpus, counts: SplitCounts, seed: u64) -> Result<Splits> {
    corpus.validate()?;
    let m = corpus.features.images.len();
    let want = counts.train + counts.val + counts.test;
    if want > m {
        return Err(ScanError::Spec(format!("split counts sum to {want} but only {m} images exist")));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = [
        order[..counts.train].to_vec(),
        order[counts.train..counts.train + counts.val].to_vec(),
        order[counts.train + counts.val..want].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    let build = |ids: &[usize]| {
        let pos: HashMap<usize, usize> = ids.iter().enumerate().map(|(i, &o)| (o, i)).collect();
        Corpus {
            features: FeatureFile {
                images: ids.iter().map(|&i| corpus.features.images[i].clone()).collect(),
            },
            captions: corpus
                .captions
                .iter()
                .filter_map(|c| {
                    pos.get(&c.image).map(|&p| CaptionRecord {
                        image: p,
                        tokens: c.tokens.clone(),
                    })
                })
                .collect(),
        }
    };
    Ok(Splits {
        train: build(&parts[0]),
        val: build(&parts[1]),
        test: build(&parts[2]),
        origin: parts,
    })
}
