//! Deterministic synthetic image/report corpus.
//!
//! Directory layout:
//!
//! ```text
//! manifest.jsonl   one JSON record per sample: id, modality, class,
//!                  token_ids, image (relative path), checksum (CRC-32 of the image file)
//! images/<id>.mmt  3×H×W image
//! vocab.txt        one token per line, line number = token id
//! ```
//!
//! Vocabulary layout for `M` modalities and `C` classes: id 0 is `<pad>`,
//! ids `1..=M` are modality tokens, then two finding tokens per
//! (modality, class) pair, then [`DISTRACTORS`].
//!
//! Sample `id` belongs to modality `id / n` (n samples per modality) and
//! class `(id % n) % C`, so class balance is exact with any remainder going
//! to the lowest classes. Its random stream is ChaCha8 keyed by the corpus
//! seed with the sample id as stream number, so every sample can be rendered
//! independently of the others.

mod render;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::TokenBatch;
use crate::error::{Error, Result};
use crate::ndtensor::{mmt, Tensor};

pub use render::MODALITY_NAMES;

pub const PAD_ID: usize = 0;
pub const DISTRACTORS: [&str; 8] = ["the", "no", "seen", "study", "view", "noted", "with", "of"];

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub height: usize,
    pub width: usize,
    pub samples_per_modality: usize,
    pub modalities: usize,
    pub classes: usize,
    /// Upper bound on distractor tokens appended to a report.
    pub max_distractors: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            samples_per_modality: 100,
            modalities: 4,
            classes: 4,
            max_distractors: 3,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.height < 32 || self.width < 32 || !self.height.is_multiple_of(32) || !self.width.is_multiple_of(32) {
            return bad(format!("image size {}x{} must be positive multiples of 32", self.height, self.width));
        }
        if !(1..=4).contains(&self.modalities) || !(1..=4).contains(&self.classes) {
            return bad(format!(
                "modalities and classes must be in 1..=4, got {} and {}",
                self.modalities, self.classes
            ));
        }
        if self.samples_per_modality == 0 {
            return bad("samples_per_modality must be at least 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.samples_per_modality * self.modalities
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::layout(self.modalities, self.classes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub tokens: Vec<String>,
    pub modalities: usize,
    pub classes: usize,
}

impl Vocab {
    pub fn layout(modalities: usize, classes: usize) -> Self {
        let mut tokens = vec!["<pad>".to_string()];
        for name in &MODALITY_NAMES[..modalities] {
            tokens.push(format!("mod_{name}"));
        }
        for name in &MODALITY_NAMES[..modalities] {
            for c in 0..classes {
                tokens.push(format!("find_{name}_{c}_a"));
                tokens.push(format!("find_{name}_{c}_b"));
            }
        }
        tokens.extend(DISTRACTORS.iter().map(|s| s.to_string()));
        Self {
            tokens,
            modalities,
            classes,
        }
    }

    /// Recovers the layout from a token list, rejecting anything that is
    /// not exactly a [`Vocab::layout`].
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let modalities = tokens.iter().filter(|t| t.starts_with("mod_")).count();
        let finds = tokens.iter().filter(|t| t.starts_with("find_")).count();
        if modalities == 0 || finds % (2 * modalities) != 0 {
            return Err(Error::BadFormat("vocabulary does not follow the corpus layout".into()));
        }
        let v = Self::layout(modalities.min(4), finds / (2 * modalities));
        if v.tokens != tokens {
            return Err(Error::BadFormat("vocabulary does not follow the corpus layout".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn modality_token(&self, m: usize) -> usize {
        1 + m
    }

    /// `j ∈ {0, 1}` selects the first or second finding word.
    pub fn finding_token(&self, m: usize, c: usize, j: usize) -> usize {
        1 + self.modalities + (m * self.classes + c) * 2 + j
    }

    pub fn distractor_token(&self, i: usize) -> usize {
        1 + self.modalities + 2 * self.modalities * self.classes + i
    }

    /// Canonical class description: modality token and both finding words.
    pub fn prompt(&self, m: usize, c: usize) -> Vec<usize> {
        vec![self.modality_token(m), self.finding_token(m, c, 0), self.finding_token(m, c, 1)]
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub token_ids: Vec<usize>,
    pub modality: usize,
    pub class_label: usize,
}

/// The sample's private random stream.
pub fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Renders sample `id` in memory (f64, before any file truncation).
pub fn render_sample(cfg: &CorpusConfig, id: u64) -> Result<Sample> {
    cfg.validate()?;
    let n = cfg.samples_per_modality as u64;
    if id >= cfg.total_samples() as u64 {
        return Err(Error::IndexOutOfRange {
            index: id as usize,
            len: cfg.total_samples(),
        });
    }
    let modality = (id / n) as usize;
    let class_label = ((id % n) as usize) % cfg.classes;
    let mut rng = sample_rng(cfg.seed, id);
    let vocab = cfg.vocab();

    let mut token_ids = vec![vocab.modality_token(modality), vocab.finding_token(modality, class_label, 0)];
    if rng.gen_bool(0.5) {
        token_ids.push(vocab.finding_token(modality, class_label, 1));
    }
    for _ in 0..rng.gen_range(0..=cfg.max_distractors) {
        token_ids.push(vocab.distractor_token(rng.gen_range(0..DISTRACTORS.len())));
    }

    let data = render::render(modality, class_label, cfg.height, cfg.width, cfg.noise, &mut rng);
    let image = Tensor::new(vec![3, cfg.height, cfg.width], data)?;
    Ok(Sample {
        id,
        image,
        token_ids,
        modality,
        class_label,
    })
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub modality: usize,
    pub class: usize,
    pub token_ids: Vec<usize>,
    pub image: String,
    pub checksum: u32,
}

/// Writes the corpus into `dir` (created if missing) and returns the manifest.
pub fn generate_corpus(cfg: &CorpusConfig, dir: &Path) -> Result<Vec<Record>> {
    cfg.validate()?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::new();
    let mut records = Vec::with_capacity(cfg.total_samples());
    for id in 0..cfg.total_samples() as u64 {
        let s = render_sample(cfg, id)?;
        let bytes = mmt::to_bytes(&s.image);
        let rel = format!("images/{id}.mmt");
        let path = dir.join(&rel);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        let rec = Record {
            id,
            modality: s.modality,
            class: s.class_label,
            token_ids: s.token_ids,
            image: rel,
            checksum: crc32fast::hash(&bytes),
        };
        manifest.push_str(&serde_json::to_string(&rec).expect("record serialises"));
        manifest.push('\n');
        records.push(rec);
    }
    let mpath = dir.join("manifest.jsonl");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let vpath = dir.join("vocab.txt");
    fs::write(&vpath, cfg.vocab().to_text()).map_err(|e| Error::io(&vpath, e))?;
    Ok(records)
}

/// Fixed 80/20 split on a hash of the id, independent of the corpus seed.
pub fn is_validation(id: u64) -> bool {
    let mut z = id.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)).is_multiple_of(5)
}

/// A stacked batch ready for the encoders.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<u64>,
    /// `[B, 3, H, W]`.
    pub images: Tensor,
    pub tokens: TokenBatch,
    pub modality: Vec<usize>,
    pub class_label: Vec<usize>,
}

/// An opened corpus directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub vocab: Vocab,
    cache: Option<Vec<Tensor>>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.jsonl");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| Error::CorruptRecord(format!("manifest line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        let vpath = dir.join("vocab.txt");
        let vtext = fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
        let vocab = Vocab::from_tokens(vtext.lines().map(str::to_string).collect())?;
        for r in &records {
            if r.modality >= vocab.modalities || r.class >= vocab.classes {
                return Err(Error::CorruptRecord(format!("record {} has labels outside the vocabulary", r.id)));
            }
            if let Some(&t) = r.token_ids.iter().find(|&&t| t >= vocab.len() || t == PAD_ID) {
                return Err(Error::CorruptRecord(format!("record {} has token id {t}", r.id)));
            }
        }
        Ok(Self {
            root: dir.to_path_buf(),
            records,
            vocab,
            cache: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads and checks every image once, keeping them in memory.
    pub fn preload(&mut self) -> Result<()> {
        let imgs = (0..self.len()).map(|i| self.read_image(i)).collect::<Result<Vec<_>>>()?;
        self.cache = Some(imgs);
        Ok(())
    }

    fn read_image(&self, index: usize) -> Result<Tensor> {
        let rec = &self.records[index];
        let path = self.root.join(&rec.image);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if crc32fast::hash(&bytes) != rec.checksum {
            return Err(Error::CorruptRecord(format!("checksum mismatch for {}", path.display())));
        }
        let (t, used) = mmt::decode(&bytes).map_err(|e| Error::CorruptRecord(format!("{}: {e}", path.display())))?;
        if used != bytes.len() || t.rank() != 3 || t.shape()[0] != 3 {
            return Err(Error::CorruptRecord(format!("{} is not a 3×H×W image", path.display())));
        }
        Ok(t)
    }

    /// Image of record `index` (by position in the manifest).
    pub fn image(&self, index: usize) -> Result<Tensor> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange { index, len: self.len() });
        }
        match &self.cache {
            Some(c) => Ok(c[index].clone()),
            None => self.read_image(index),
        }
    }

    pub fn load_batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let mut shape = None;
        let mut data = Vec::new();
        let mut reports = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self.image(i)?;
            match &shape {
                None => shape = Some(img.shape().to_vec()),
                Some(s) if s.as_slice() != img.shape() => {
                    return Err(Error::CorruptRecord(format!("image {} has shape {:?}", self.records[i].id, img.shape())));
                }
                _ => {}
            }
            data.extend_from_slice(img.data());
            reports.push(self.records[i].token_ids.clone());
        }
        let s = shape.expect("non-empty batch");
        let images = Tensor::new(vec![indices.len(), s[0], s[1], s[2]], data)?;
        Ok(Batch {
            ids: indices.iter().map(|&i| self.records[i].id).collect(),
            images,
            tokens: TokenBatch::from_reports(&reports, PAD_ID)?,
            modality: indices.iter().map(|&i| self.records[i].modality).collect(),
            class_label: indices.iter().map(|&i| self.records[i].class).collect(),
        })
    }

    /// Manifest positions of the (train, validation) split.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| !is_validation(self.records[i].id))
    }
}
