//! Deterministic synthetic phone-sequence corpus. Each utterance samples a
//! phone sequence without immediate repeats, geometric per-phone durations,
//! and emits frames as the phone's mean vector plus isotropic Gaussian noise.
//! Tokens are the phone identities, so the transducer vocabulary is the
//! phone inventory.

use rand::Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub phones: usize,
    pub feature_dim: usize,
    /// Norm of each phone's mean vector (means are orthogonal directions).
    pub mean_norm: f64,
    pub noise_sigma: f64,
    /// Mean frames per phone occurrence (geometric, support >= 1).
    pub mean_duration: f64,
    pub min_phones: usize,
    pub max_phones: usize,
    pub pretrain_utterances: usize,
    pub train_utterances: usize,
    pub test_utterances: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            phones: 8,
            feature_dim: 16,
            mean_norm: 2.0,
            noise_sigma: 0.5,
            mean_duration: 4.0,
            min_phones: 3,
            max_phones: 8,
            pretrain_utterances: 2000,
            train_utterances: 1000,
            test_utterances: 200,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phones < 2 {
            return Err(Error::Config("phones must be >= 2".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be >= 2".into()));
        }
        if self.phones > self.feature_dim {
            return Err(Error::Config(format!(
                "phones ({}) cannot exceed feature_dim ({}) with orthogonal means",
                self.phones, self.feature_dim
            )));
        }
        if self.phones > u16::MAX as usize {
            return Err(Error::Config("phones must fit in u16".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.mean_duration < 1.0 {
            return Err(Error::Config("mean_duration must be >= 1".into()));
        }
        if self.min_phones < 1 || self.min_phones > self.max_phones {
            return Err(Error::Config("need 1 <= min_phones <= max_phones".into()));
        }
        if self.pretrain_utterances + self.train_utterances + self.test_utterances == 0 {
            return Err(Error::Config("corpus must contain at least one utterance".into()));
        }
        Ok(())
    }
}

/// Phone inventory: orthogonal mean directions scaled to a common norm, and
/// a geometric duration parameter per phone.
#[derive(Debug, Clone, PartialEq)]
pub struct PhoneInventory {
    pub means: Tensor,
    pub duration_p: Vec<f64>,
    pub noise_sigma: f64,
}

impl PhoneInventory {
    pub fn phones(&self) -> usize {
        self.means.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    /// T x d feature frames.
    pub frames: Tensor,
    /// Phone id per frame.
    pub frame_labels: Vec<u16>,
    /// Phone sequence with repeats collapsed; the transducer reference.
    pub tokens: Vec<u16>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.frame_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Pretrain,
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub inventory: PhoneInventory,
    pub pretrain: Vec<Utterance>,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

fn orthonormal_rows<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    // Gram-Schmidt on Gaussian rows; restart a row on (measure-zero) collapse.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
}

pub fn build_inventory(config: &CorpusConfig, seed: u64) -> Result<PhoneInventory> {
    config.validate()?;
    let mut rng = seeds::rng(seeds::derive(seed, "inventory"));
    let dirs = orthonormal_rows(&mut rng, config.phones, config.feature_dim);
    let rows: Vec<Vec<f64>> = dirs
        .into_iter()
        .map(|r| r.into_iter().map(|x| x * config.mean_norm).collect())
        .collect();
    Ok(PhoneInventory {
        means: Tensor::from_rows(&rows)?,
        duration_p: vec![1.0 / config.mean_duration; config.phones],
        noise_sigma: config.noise_sigma,
    })
}

fn generate_utterance<R: Rng>(
    config: &CorpusConfig,
    inventory: &PhoneInventory,
    rng: &mut R,
) -> Result<Utterance> {
    let p = config.phones;
    let n_phones = rng.gen_range(config.min_phones..=config.max_phones);
    let mut tokens: Vec<u16> = Vec::with_capacity(n_phones);
    for i in 0..n_phones {
        let phone = if i == 0 {
            rng.gen_range(0..p) as u16
        } else {
            // Uniform over the other P-1 phones; keeps tokens == collapsed runs.
            let prev = tokens[i - 1] as usize;
            let pick = rng.gen_range(0..p - 1);
            (if pick >= prev { pick + 1 } else { pick }) as u16
        };
        tokens.push(phone);
    }
    let mut frame_labels = Vec::new();
    let mut rows = Vec::new();
    for &phone in &tokens {
        let geo = Geometric::new(inventory.duration_p[phone as usize])
            .map_err(|e| Error::Numeric(format!("geometric duration: {e}")))?;
        let duration = 1 + geo.sample(rng) as usize;
        let mean = inventory.means.row(phone as usize);
        for _ in 0..duration {
            let row: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let noise: f64 = StandardNormal.sample(rng);
                    m + inventory.noise_sigma * noise
                })
                .collect();
            rows.push(row);
            frame_labels.push(phone);
        }
    }
    Ok(Utterance {
        frames: Tensor::from_rows(&rows)?,
        frame_labels,
        tokens,
    })
}

/// Deterministic corpus: every utterance derives its own seed from
/// (seed, split, index), so generation order and parallelism cannot change
/// the result and splits never alias.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let inventory = build_inventory(config, seed)?;
    let gen_split = |split: Split, count: usize| -> Result<Vec<Utterance>> {
        (0..count)
            .map(|i| {
                let mut rng = seeds::rng(seeds::derive_indexed(seed, split.tag(), i as u64));
                generate_utterance(config, &inventory, &mut rng)
            })
            .collect()
    };
    Ok(Corpus {
        config: config.clone(),
        seed,
        inventory: inventory.clone(),
        pretrain: gen_split(Split::Pretrain, config.pretrain_utterances)?,
        train: gen_split(Split::Train, config.train_utterances)?,
        test: gen_split(Split::Test, config.test_utterances)?,
    })
}

// ---- statistics ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub frames_per_phone: Vec<u64>,
    pub total_frames: u64,
    pub split_sizes: [usize; 3],
    /// (length, count) pairs sorted by length.
    pub length_histogram: Vec<(usize, usize)>,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut frames_per_phone = vec![0u64; corpus.config.phones];
    let mut histogram = std::collections::BTreeMap::new();
    let mut total = 0u64;
    for split in [Split::Pretrain, Split::Train, Split::Test] {
        for utt in corpus.split(split) {
            *histogram.entry(utt.len()).or_insert(0usize) += 1;
            for &l in &utt.frame_labels {
                frames_per_phone[l as usize] += 1;
                total += 1;
            }
        }
    }
    CorpusStats {
        frames_per_phone,
        total_frames: total,
        split_sizes: [corpus.pretrain.len(), corpus.train.len(), corpus.test.len()],
        length_histogram: histogram.into_iter().collect(),
    }
}

// ---- dataset file format --------------------------------------------------------
//
// magic "GCDS", u32 version = 1, all integers little-endian.
// Config block, u64 seed, inventory (means row-major + duration params),
// then per split: u32 count and utterance records
// (u32 T, T*d f64 frames, T u16 labels, u16 token count, tokens).

const DATASET_MAGIC: &[u8; 4] = b"GCDS";
const DATASET_VERSION: u32 = 1;

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated file: needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u16_vec(&mut self, n: usize, what: &str) -> Result<Vec<u16>> {
        let raw = self.take(2 * n, what)?;
        Ok(raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "trailing bytes at offset {}",
                self.pos
            )));
        }
        Ok(())
    }
}

fn write_utterance(out: &mut Vec<u8>, utt: &Utterance) {
    out.extend((utt.len() as u32).to_le_bytes());
    for v in utt.frames.data() {
        out.extend(v.to_le_bytes());
    }
    for l in &utt.frame_labels {
        out.extend(l.to_le_bytes());
    }
    out.extend((utt.tokens.len() as u16).to_le_bytes());
    for t in &utt.tokens {
        out.extend(t.to_le_bytes());
    }
}

pub fn corpus_to_bytes(corpus: &Corpus) -> Vec<u8> {
    let c = &corpus.config;
    let mut out = Vec::new();
    out.extend(DATASET_MAGIC);
    out.extend(DATASET_VERSION.to_le_bytes());
    out.extend((c.phones as u32).to_le_bytes());
    out.extend((c.feature_dim as u32).to_le_bytes());
    out.extend(c.mean_norm.to_le_bytes());
    out.extend(c.noise_sigma.to_le_bytes());
    out.extend(c.mean_duration.to_le_bytes());
    out.extend((c.min_phones as u32).to_le_bytes());
    out.extend((c.max_phones as u32).to_le_bytes());
    out.extend((c.pretrain_utterances as u32).to_le_bytes());
    out.extend((c.train_utterances as u32).to_le_bytes());
    out.extend((c.test_utterances as u32).to_le_bytes());
    out.extend(corpus.seed.to_le_bytes());
    for v in corpus.inventory.means.data() {
        out.extend(v.to_le_bytes());
    }
    for v in &corpus.inventory.duration_p {
        out.extend(v.to_le_bytes());
    }
    out.extend(corpus.inventory.noise_sigma.to_le_bytes());
    for split in [&corpus.pretrain, &corpus.train, &corpus.test] {
        out.extend((split.len() as u32).to_le_bytes());
        for utt in split {
            write_utterance(&mut out, utt);
        }
    }
    out
}

pub fn corpus_from_bytes(buf: &[u8]) -> Result<Corpus> {
    let mut r = ByteReader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?} at offset 0, expected \"GCDS\""
        )));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let config = CorpusConfig {
        phones: r.u32("phones")? as usize,
        feature_dim: r.u32("feature_dim")? as usize,
        mean_norm: r.f64("mean_norm")?,
        noise_sigma: r.f64("noise_sigma")?,
        mean_duration: r.f64("mean_duration")?,
        min_phones: r.u32("min_phones")? as usize,
        max_phones: r.u32("max_phones")? as usize,
        pretrain_utterances: r.u32("pretrain_utterances")? as usize,
        train_utterances: r.u32("train_utterances")? as usize,
        test_utterances: r.u32("test_utterances")? as usize,
    };
    let seed = r.u64("seed")?;
    let means = Tensor::matrix(
        config.phones,
        config.feature_dim,
        r.f64_vec(config.phones * config.feature_dim, "inventory means")?,
    )?;
    let duration_p = r.f64_vec(config.phones, "duration params")?;
    let noise_sigma = r.f64("inventory sigma")?;
    let inventory = PhoneInventory {
        means,
        duration_p,
        noise_sigma,
    };
    let mut read_split = |what: &str| -> Result<Vec<Utterance>> {
        let count = r.u32(what)? as usize;
        let mut utts = Vec::with_capacity(count);
        for _ in 0..count {
            let t_len = r.u32("utterance length")? as usize;
            if t_len == 0 {
                return Err(Error::Format(format!(
                    "utterance with zero frames at offset {}",
                    r.pos
                )));
            }
            let frames = Tensor::matrix(
                t_len,
                config.feature_dim,
                r.f64_vec(t_len * config.feature_dim, "frames")?,
            )?;
            let frame_labels = r.u16_vec(t_len, "frame labels")?;
            let n_tokens = r.u16("token count")? as usize;
            let tokens = r.u16_vec(n_tokens, "tokens")?;
            utts.push(Utterance {
                frames,
                frame_labels,
                tokens,
            });
        }
        Ok(utts)
    };
    let pretrain = read_split("pretrain count")?;
    let train = read_split("train count")?;
    let test = read_split("test count")?;
    r.done()?;
    Ok(Corpus {
        config,
        seed,
        inventory,
        pretrain,
        train,
        test,
    })
}

pub fn write_corpus(path: &std::path::Path, corpus: &Corpus) -> Result<()> {
    std::fs::write(path, corpus_to_bytes(corpus))?;
    Ok(())
}

pub fn read_corpus(path: &std::path::Path) -> Result<Corpus> {
    let buf = std::fs::read(path)?;
    corpus_from_bytes(&buf)
}
