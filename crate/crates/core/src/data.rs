//! Synthetic incongruity task, modality corruption, batching and the binary
//! embedding file format.
//!
//! The synthetic task draws `C` unit-norm prototypes per modality. A sample
//! picks a text cluster uniformly; with probability ½ its image cluster is the
//! same index (label 0, congruent), otherwise a uniformly chosen different
//! cluster (label 1, incongruent). Tokens and patches are the prototype plus
//! isotropic Gaussian noise with a per-element standard deviation. The label
//! depends only on the cluster pair, so neither modality alone carries any
//! information about it.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::kv;
use crate::rng;

const MAGIC: &[u8; 4] = b"URMF";
const VERSION: u32 = 1;
/// Bytes before the first record.
pub const HEADER_LEN: usize = 4 + 4 + 8 + 4 * 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub clusters: usize,
    pub n_tokens: usize,
    pub n_patches: usize,
    pub d_text: usize,
    pub d_image: usize,
    /// Per-element standard deviation of the token noise.
    pub text_noise: f64,
    /// Per-element standard deviation of the patch noise.
    pub image_noise: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            clusters: 4,
            n_tokens: 16,
            n_patches: 8,
            d_text: 32,
            d_image: 32,
            text_noise: 0.5,
            image_noise: 0.5,
            samples: 4000,
            seed: 0,
        }
    }
}

const SPEC_KEYS: &[&str] = &[
    "clusters",
    "n_tokens",
    "n_patches",
    "d_text",
    "d_image",
    "text_noise",
    "image_noise",
    "samples",
    "seed",
];

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 clusters, got {}",
                self.clusters
            )));
        }
        if self.samples < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 samples, got {}",
                self.samples
            )));
        }
        if [self.n_tokens, self.n_patches, self.d_text, self.d_image].contains(&0) {
            return Err(Error::InvalidSpec(
                "token counts and dimensions must be at least 1".into(),
            ));
        }
        for noise in [self.text_noise, self.image_noise] {
            if !(noise >= 0.0 && noise.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "noise scale {noise} is not a finite non-negative number"
                )));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let map = kv::parse(text, SPEC_KEYS)?;
        let mut s = Self::default();
        kv::take(&map, "clusters", &mut s.clusters)?;
        kv::take(&map, "n_tokens", &mut s.n_tokens)?;
        kv::take(&map, "n_patches", &mut s.n_patches)?;
        kv::take(&map, "d_text", &mut s.d_text)?;
        kv::take(&map, "d_image", &mut s.d_image)?;
        kv::take(&map, "text_noise", &mut s.text_noise)?;
        kv::take(&map, "image_noise", &mut s.image_noise)?;
        kv::take(&map, "samples", &mut s.samples)?;
        kv::take(&map, "seed", &mut s.seed)?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// One sample: label and row-major `f32` feature matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub label: u8,
    /// `n_tokens × d_text` values.
    pub text: Vec<f32>,
    /// `n_patches × d_image` values.
    pub image: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_tokens: usize,
    pub n_patches: usize,
    pub d_text: usize,
    pub d_image: usize,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label as usize).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            ..self.empty_like()
        }
    }

    fn empty_like(&self) -> Dataset {
        Dataset {
            n_tokens: self.n_tokens,
            n_patches: self.n_patches,
            d_text: self.d_text,
            d_image: self.d_image,
            records: Vec::new(),
        }
    }

    /// Seeded shuffle, then the last `round(test_fraction·N)` samples form the
    /// test split.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&test_fraction) {
            return Err(Error::Proportion(test_fraction));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[0x5911]));
        let n_test = (test_fraction * self.len() as f64).round() as usize;
        let (train, test) = order.split_at(self.len() - n_test);
        Ok((self.subset(train), self.subset(test)))
    }

    /// Stacks the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> ModalBatch {
        let b = indices.len();
        let mut text = Vec::with_capacity(b * self.n_tokens * self.d_text);
        let mut image = Vec::with_capacity(b * self.n_patches * self.d_image);
        let mut labels = Vec::with_capacity(b);
        for &i in indices {
            let r = &self.records[i];
            text.extend(r.text.iter().map(|&v| v as f64));
            image.extend(r.image.iter().map(|&v| v as f64));
            labels.push(r.label as usize);
        }
        ModalBatch {
            text: Tensor::new([b, self.n_tokens, self.d_text], text).expect("record sizes checked"),
            image: Tensor::new([b, self.n_patches, self.d_image], image)
                .expect("record sizes checked"),
            labels,
            corrupted_text: vec![false; b],
            corrupted_image: vec![false; b],
        }
    }

    /// The whole dataset as one batch, in order.
    pub fn full_batch(&self) -> ModalBatch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Model inputs for `B` samples plus corruption bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalBatch {
    /// `[B×n×d_t]`.
    pub text: Tensor,
    /// `[B×m×d_i]`.
    pub image: Tensor,
    /// Class per sample; 1 marks an incongruent pair.
    pub labels: Vec<usize>,
    pub corrupted_text: Vec<bool>,
    pub corrupted_image: Vec<bool>,
}

impl ModalBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `start..start+len` as a new batch.
    pub fn slice(&self, start: usize, len: usize) -> ModalBatch {
        let cut = |t: &Tensor| {
            let s = t.shape();
            let row = s[1] * s[2];
            Tensor::new(
                [len, s[1], s[2]],
                t.data()[start * row..(start + len) * row].to_vec(),
            )
            .expect("slice within bounds")
        };
        ModalBatch {
            text: cut(&self.text),
            image: cut(&self.image),
            labels: self.labels[start..start + len].to_vec(),
            corrupted_text: self.corrupted_text[start..start + len].to_vec(),
            corrupted_image: self.corrupted_image[start..start + len].to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputModality {
    Text,
    Image,
}

impl std::str::FromStr for InputModality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "text" => Ok(Self::Text),
            "image" => Ok(Self::Image),
            other => Err(format!(
                "unknown modality {other:?} (expected text or image)"
            )),
        }
    }
}

impl std::fmt::Display for InputModality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Text => "text",
            Self::Image => "image",
        })
    }
}

fn unit_prototypes(r: &mut impl Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn noisy_rows(r: &mut impl Rng, proto: &[f64], rows: usize, sd: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * proto.len());
    for _ in 0..rows {
        for &p in proto {
            let e: f64 = StandardNormal.sample(r);
            out.push((p + sd * e) as f32);
        }
    }
    out
}

/// Generates the synthetic dataset. Each sample draws from its own stream
/// keyed by `(seed, index)`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let text_protos = unit_prototypes(
        &mut rng::stream(spec.seed, &[0x7e47]),
        spec.clusters,
        spec.d_text,
    );
    let image_protos = unit_prototypes(
        &mut rng::stream(spec.seed, &[0x1a6e]),
        spec.clusters,
        spec.d_image,
    );
    let records = (0..spec.samples)
        .map(|k| {
            let mut r = rng::stream(spec.seed, &[0x5a3e, k as u64]);
            let c_t = r.random_range(0..spec.clusters);
            let incongruent = r.random_bool(0.5);
            let c_i = if incongruent {
                let other = r.random_range(0..spec.clusters - 1);
                if other >= c_t {
                    other + 1
                } else {
                    other
                }
            } else {
                c_t
            };
            Record {
                label: incongruent as u8,
                text: noisy_rows(&mut r, &text_protos[c_t], spec.n_tokens, spec.text_noise),
                image: noisy_rows(&mut r, &image_protos[c_i], spec.n_patches, spec.image_noise),
            }
        })
        .collect();
    Ok(Dataset {
        n_tokens: spec.n_tokens,
        n_patches: spec.n_patches,
        d_text: spec.d_text,
        d_image: spec.d_image,
        records,
    })
}

/// Replaces the chosen modality of exactly `round(p·B)` samples, picked by a
/// seeded permutation, with standard-normal noise and flags them.
pub fn corrupt(
    batch: &ModalBatch,
    modality: InputModality,
    p: f64,
    seed: u64,
) -> Result<ModalBatch> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Proportion(p));
    }
    let b = batch.len();
    let count = (p * b as f64).round() as usize;
    let mut order: Vec<usize> = (0..b).collect();
    let mut r = rng::stream(seed, &[0xc022]);
    order.shuffle(&mut r);
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();

    let mut out = batch.clone();
    let (tensor, flags) = match modality {
        InputModality::Text => (&mut out.text, &mut out.corrupted_text),
        InputModality::Image => (&mut out.image, &mut out.corrupted_image),
    };
    let row = tensor.shape()[1] * tensor.shape()[2];
    let data = tensor.data_mut();
    for &k in &chosen {
        for v in &mut data[k * row..(k + 1) * row] {
            *v = StandardNormal.sample(&mut r);
        }
        flags[k] = true;
    }
    Ok(out)
}

/// Seeded shuffle of `0..n` cut into batches of `batch_size`; a final batch
/// of one sample is dropped because the contrastive loss needs two.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(shuffle_seed, &[0xba7c]));
    let mut out: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if out.last().is_some_and(|b| b.len() == 1) {
        log::info!(
            "dropping final batch of one sample (index {})",
            out.last().unwrap()[0]
        );
        out.pop();
    }
    out
}

pub fn batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> Vec<ModalBatch> {
    batch_indices(dataset.len(), batch_size, shuffle_seed)
        .iter()
        .map(|idx| dataset.batch(idx))
        .collect()
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v)
        .map_err(|_| Error::InvalidSpec(format!("{what} {v} does not fit the file header")))
}

/// Serializes a dataset to the little-endian embedding format.
pub fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    let text_len = dataset.n_tokens * dataset.d_text;
    let image_len = dataset.n_patches * dataset.d_image;
    let mut buf = Vec::with_capacity(HEADER_LEN + dataset.len() * (1 + 4 * (text_len + image_len)));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    for (v, what) in [
        (dataset.n_tokens, "n_tokens"),
        (dataset.n_patches, "n_patches"),
        (dataset.d_text, "d_text"),
        (dataset.d_image, "d_image"),
    ] {
        buf.extend_from_slice(&dim_u32(v, what)?.to_le_bytes());
    }
    for (k, r) in dataset.records.iter().enumerate() {
        if r.label > 1 {
            return Err(Error::InvalidLabel {
                row: k,
                label: r.label as usize,
                classes: 2,
            });
        }
        if r.text.len() != text_len || r.image.len() != image_len {
            return Err(Error::InvalidSpec(format!(
                "record {k} does not match the dataset dimensions"
            )));
        }
        buf.push(r.label);
        for v in r.text.iter().chain(&r.image) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                message: format!(
                    "need {len} bytes for {what}, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(count * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Parses the embedding format. Errors carry the byte offset of the problem.
pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut rd = Reader { bytes, pos: 0 };
    let magic = rd.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:02x?}, expected \"URMF\""),
        });
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let n = rd.u64("record count")?;
    let mut dims = [0usize; 4];
    for (slot, what) in dims
        .iter_mut()
        .zip(["n_tokens", "n_patches", "d_text", "d_image"])
    {
        let at = rd.pos as u64;
        *slot = rd.u32(what)? as usize;
        if *slot == 0 {
            return Err(Error::Parse {
                offset: at,
                message: format!("{what} is zero"),
            });
        }
    }
    let [n_tokens, n_patches, d_text, d_image] = dims;
    let text_len = n_tokens * d_text;
    let image_len = n_patches * d_image;
    let record_len = 1 + 4 * (text_len + image_len) as u64;
    let available = (bytes.len() - HEADER_LEN) as u64;
    if available / record_len < n {
        let complete = available / record_len;
        return Err(Error::Truncated {
            offset: HEADER_LEN as u64 + complete * record_len,
            message: format!("header declares {n} records, file holds {complete} complete"),
        });
    }
    if available != n * record_len {
        return Err(Error::Parse {
            offset: HEADER_LEN as u64 + n * record_len,
            message: format!(
                "{} trailing bytes after {n} records; dimension header does not match the payload",
                available - n * record_len
            ),
        });
    }
    let mut records = Vec::with_capacity(n as usize);
    for row in 0..n as usize {
        let at = rd.pos as u64;
        let label = rd.take(1, "label")?[0];
        if label > 1 {
            return Err(Error::Parse {
                offset: at,
                message: format!("record {row} has label {label}, expected 0 or 1"),
            });
        }
        let text = rd.f32s(text_len, "text values")?;
        let image = rd.f32s(image_len, "image values")?;
        records.push(Record { label, text, image });
    }
    Ok(Dataset {
        n_tokens,
        n_patches,
        d_text,
        d_image,
        records,
    })
}

pub fn write_embeddings(path: &Path, dataset: &Dataset) -> Result<()> {
    let bytes = encode(dataset)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
