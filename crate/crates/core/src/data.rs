//! Synthetic loosely-correlated image-text pairs.
//!
//! Each modality has one random unit prototype per latent concept. A pair
//! draws a small set of concepts; its image (text) vector is the mean of the
//! concepts' image (text) prototypes plus Gaussian noise. Distinct pairs that
//! share concepts are therefore plausible partners of each other, which is
//! the loose correlation of web-crawled captions.
//!
//! Feature values are rounded to `f32` at generation time so the binary file
//! format round-trips them exactly.
//!
//! # File format
//!
//! All integers little-endian:
//!
//! ```text
//! "NCLP"  u32 version
//! u32 num_pairs, u32 img_dim, u32 txt_dim, u32 num_concepts, u32 max_concepts
//! f32[num_pairs * img_dim]   images, row-major
//! f32[num_pairs * txt_dim]   texts, row-major
//! per pair: u16 count, u16[count] concept ids
//! u16[num_pairs]             source tags
//! u16[num_pairs]             labels
//! u32 CRC32 of every byte between the version field and the checksum
//! ```

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::l2_normalize_rows;
use crate::rng;

pub const MAGIC: &[u8; 4] = b"NCLP";
pub const FORMAT_VERSION: u32 = 1;

const PROTOTYPE_STREAM: u64 = 1;
const PAIR_STREAM: u64 = 2;
const HELDOUT_STREAM: u64 = 3;
const TAG_STREAM: u64 = 4;
const SHUFFLE_STREAM_BASE: u64 = 1 << 40;

/// Parameters of the synthetic concept world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConceptWorld {
    pub num_concepts: usize,
    pub img_dim: usize,
    pub txt_dim: usize,
    pub noise_scale: f64,
    /// Upper end of the `1..=max_concepts` range of concepts per pair.
    pub max_concepts: usize,
    pub num_pairs: usize,
    pub source_tags: usize,
}

impl Default for ConceptWorld {
    fn default() -> Self {
        Self {
            num_concepts: 16,
            img_dim: 32,
            txt_dim: 32,
            noise_scale: 0.3,
            max_concepts: 3,
            num_pairs: 6400,
            source_tags: 4,
        }
    }
}

impl ConceptWorld {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_concepts < 2 || self.num_concepts > u16::MAX as usize {
            return fail(format!("num_concepts must be in [2, 65535], got {}", self.num_concepts));
        }
        if self.img_dim < 2 || self.txt_dim < 2 {
            return fail(format!(
                "feature dims must be >= 2, got ({}, {})",
                self.img_dim, self.txt_dim
            ));
        }
        if self.max_concepts == 0 || self.max_concepts > self.num_concepts {
            return fail(format!(
                "max_concepts must be in [1, num_concepts = {}], got {}",
                self.num_concepts, self.max_concepts
            ));
        }
        if self.source_tags == 0 || self.source_tags > u16::MAX as usize {
            return fail(format!("source_tags must be in [1, 65535], got {}", self.source_tags));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return fail(format!("noise_scale must be >= 0, got {}", self.noise_scale));
        }
        Ok(())
    }

    /// Unit-norm concept prototypes for both modalities.
    pub fn prototypes(&self, seed: u64) -> Prototypes {
        let mut r = rng::stream(seed, PROTOTYPE_STREAM);
        let image = unit_rows(&mut r, self.num_concepts, self.img_dim);
        let text = unit_rows(&mut r, self.num_concepts, self.txt_dim);
        Prototypes { image, text }
    }
}

fn unit_rows(r: &mut rand_chacha::ChaCha8Rng, n: usize, dim: usize) -> Matrix {
    let raw = rng::normal_matrix(r, n, dim, 1.0);
    round_f32(&l2_normalize_rows(&raw).expect("gaussian rows are non-degenerate"))
}

fn round_f32(m: &Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    /// `C × img_dim`.
    pub image: Matrix,
    /// `C × txt_dim`.
    pub text: Matrix,
}

/// Paired features with their ground-truth concept sets.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub images: Matrix,
    pub texts: Matrix,
    /// Sorted concept ids per pair, never empty.
    pub concepts: Vec<Vec<u16>>,
    pub sources: Vec<u16>,
    /// Dominant (lowest-index) concept of each pair.
    pub labels: Vec<u16>,
    pub num_concepts: usize,
    pub max_concepts: usize,
}

impl PairDataset {
    pub fn empty(img_dim: usize, txt_dim: usize, num_concepts: usize, max_concepts: usize) -> Self {
        Self {
            images: Matrix::zeros(0, img_dim),
            texts: Matrix::zeros(0, txt_dim),
            concepts: Vec::new(),
            sources: Vec::new(),
            labels: Vec::new(),
            num_concepts,
            max_concepts,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sub-dataset with the given pair indices, in order.
    pub fn subset(&self, indices: &[usize]) -> PairDataset {
        PairDataset {
            images: self.images.select_rows(indices),
            texts: self.texts.select_rows(indices),
            concepts: indices.iter().map(|&i| self.concepts[i].clone()).collect(),
            sources: indices.iter().map(|&i| self.sources[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_concepts: self.num_concepts,
            max_concepts: self.max_concepts,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.images.rows() != n || self.texts.rows() != n || self.concepts.len() != n || self.sources.len() != n {
            return Err(Error::Format("pair dataset field counts disagree".into()));
        }
        if let Some(i) = self.concepts.iter().position(|c| c.is_empty()) {
            return Err(Error::Format(format!("pair {i} has an empty concept set")));
        }
        Ok(())
    }
}

/// Draws `world.num_pairs` training pairs.
pub fn generate_synthetic(world: &ConceptWorld, seed: u64) -> Result<PairDataset> {
    generate_pairs(world, seed, PAIR_STREAM, world.num_pairs)
}

/// Draws `count` further pairs from the same world (same prototypes,
/// independent samples) for evaluation.
pub fn generate_heldout(world: &ConceptWorld, seed: u64, count: usize) -> Result<PairDataset> {
    generate_pairs(world, seed, HELDOUT_STREAM, count)
}

fn generate_pairs(world: &ConceptWorld, seed: u64, stream: u64, count: usize) -> Result<PairDataset> {
    world.validate()?;
    let protos = world.prototypes(seed);
    let mut r = rng::stream(seed, stream);
    let mut ds = PairDataset::empty(world.img_dim, world.txt_dim, world.num_concepts, world.max_concepts);
    let mut images = Vec::with_capacity(count * world.img_dim);
    let mut texts = Vec::with_capacity(count * world.txt_dim);
    for _ in 0..count {
        let source = r.gen_range(0..world.source_tags);
        let size = r.gen_range(1..=world.max_concepts);
        let set = sample_concepts(&mut r, world, source, size);
        images.extend(mix(&protos.image, &set, world.noise_scale, &mut r));
        texts.extend(mix(&protos.text, &set, world.noise_scale, &mut r));
        ds.labels.push(set[0]);
        ds.sources.push(source as u16);
        ds.concepts.push(set);
    }
    ds.images = Matrix::new(count, world.img_dim, images)?;
    ds.texts = Matrix::new(count, world.txt_dim, texts)?;
    Ok(ds)
}

/// Weighted sampling without replacement; concepts congruent to the source
/// tag are twice as likely, so sources differ in their concept mix.
fn sample_concepts(r: &mut impl Rng, world: &ConceptWorld, source: usize, size: usize) -> Vec<u16> {
    let mut weights: Vec<f64> = (0..world.num_concepts)
        .map(|c| if c % world.source_tags == source { 2.0 } else { 1.0 })
        .collect();
    let mut set = Vec::with_capacity(size);
    for _ in 0..size {
        let total: f64 = weights.iter().sum();
        let mut u = r.gen::<f64>() * total;
        let mut pick = weights.iter().rposition(|w| *w > 0.0).unwrap();
        for (c, w) in weights.iter().enumerate() {
            if *w > 0.0 && u < *w {
                pick = c;
                break;
            }
            u -= w;
        }
        weights[pick] = 0.0;
        set.push(pick as u16);
    }
    set.sort_unstable();
    set
}

fn mix(protos: &Matrix, set: &[u16], noise: f64, r: &mut impl Rng) -> Vec<f64> {
    let dim = protos.cols();
    let mut v = vec![0.0; dim];
    for &c in set {
        for (a, &p) in v.iter_mut().zip(protos.row(c as usize)) {
            *a += p;
        }
    }
    let n = set.len() as f64;
    v.iter_mut()
        .map(|a| {
            let z: f64 = StandardNormal.sample(r);
            (*a / n + noise * z) as f32 as f64
        })
        .collect()
}

pub fn to_bytes(ds: &PairDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut body = Vec::new();
    for v in [
        ds.len(),
        ds.images.cols(),
        ds.texts.cols(),
        ds.num_concepts,
        ds.max_concepts,
    ] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("count {v} exceeds u32")))?;
        body.extend_from_slice(&v.to_le_bytes());
    }
    for m in [&ds.images, &ds.texts] {
        for &x in m.data() {
            body.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    for set in &ds.concepts {
        let n = u16::try_from(set.len()).map_err(|_| Error::Format("concept set too large".into()))?;
        body.extend_from_slice(&n.to_le_bytes());
        for c in set {
            body.extend_from_slice(&c.to_le_bytes());
        }
    }
    for v in ds.sources.iter().chain(&ds.labels) {
        body.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&body);
    let mut out = Vec::with_capacity(body.len() + 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated file: needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_block(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("block too large".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<PairDataset> {
    let mut rd = Reader { buf, pos: 0 };
    if rd.take(4)? != MAGIC {
        return Err(Error::Format("bad magic bytes (not an NCLP dataset)".into()));
    }
    let version = rd.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if buf.len() < 12 {
        return Err(Error::Format("truncated file".into()));
    }
    let body_end = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&buf[8..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut rd = Reader {
        buf: &buf[..body_end],
        pos: 8,
    };
    let n = rd.u32()? as usize;
    let img_dim = rd.u32()? as usize;
    let txt_dim = rd.u32()? as usize;
    let num_concepts = rd.u32()? as usize;
    let max_concepts = rd.u32()? as usize;
    let images = Matrix::new(n, img_dim, rd.f32_block(n * img_dim)?)?;
    let texts = Matrix::new(n, txt_dim, rd.f32_block(n * txt_dim)?)?;
    let mut concepts = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rd.u16()? as usize;
        concepts.push((0..c).map(|_| rd.u16()).collect::<Result<Vec<_>>>()?);
    }
    let sources = (0..n).map(|_| rd.u16()).collect::<Result<Vec<_>>>()?;
    let labels = (0..n).map(|_| rd.u16()).collect::<Result<Vec<_>>>()?;
    if rd.pos != body_end {
        return Err(Error::Format(format!("{} trailing bytes", body_end - rd.pos)));
    }
    let ds = PairDataset {
        images,
        texts,
        concepts,
        sources,
        labels,
        num_concepts,
        max_concepts,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &PairDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<PairDataset> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

/// A source tag that had too few pairs to fill one single-source batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SkippedSource {
    pub source: u16,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub skipped: Vec<SkippedSource>,
}

/// Index batches for one epoch. The permutation is keyed by `(seed, epoch)`
/// and the final ragged batch is dropped.
///
/// In debiased mode the permuted indices are split by source tag (keeping
/// their permuted order) and each source is chunked on its own; batches are
/// emitted in the order of their first element in the permutation. With a
/// single source this is exactly the plain plan.
pub fn batches(ds: &PairDataset, batch_size: usize, seed: u64, epoch: u64, debiased: bool) -> Result<BatchPlan> {
    if batch_size == 0 || batch_size > ds.len() {
        return Err(Error::Parameter(format!(
            "batch size {batch_size} must be in [1, {}]",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream(seed, SHUFFLE_STREAM_BASE + epoch));
    if !debiased {
        return Ok(BatchPlan {
            batches: order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect(),
            skipped: Vec::new(),
        });
    }
    let mut rank = vec![0usize; ds.len()];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos;
    }
    let mut groups: std::collections::BTreeMap<u16, Vec<usize>> = Default::default();
    for &i in &order {
        groups.entry(ds.sources[i]).or_default().push(i);
    }
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for (&source, members) in &groups {
        if members.len() < batch_size {
            warn!(
                "source {source} has {} pairs, fewer than batch size {batch_size}; skipped",
                members.len()
            );
            skipped.push(SkippedSource {
                source,
                size: members.len(),
            });
            continue;
        }
        out.extend(members.chunks_exact(batch_size).map(<[usize]>::to_vec));
    }
    out.sort_by_key(|b| rank[b[0]]);
    Ok(BatchPlan { batches: out, skipped })
}

/// Label-name supervision: every image carries a single label and its text
/// is the label's prototype perturbed by a sampled prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct TagDataset {
    /// `L × txt_dim` label-name vectors.
    pub label_prototypes: Matrix,
    /// Per label, `prompts_per_label × txt_dim` prompted label texts.
    pub prompts: Vec<Matrix>,
    pub images: Matrix,
    /// Label of each image row; images are grouped by label.
    pub labels: Vec<u16>,
    pub prompt_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagOptions {
    pub prompts_per_label: usize,
    pub prompt_noise: f64,
    pub images_per_label: usize,
    /// Draw fresh label concepts instead of reusing the pair-data concepts.
    pub disjoint_labels: bool,
}

impl Default for TagOptions {
    fn default() -> Self {
        Self {
            prompts_per_label: 8,
            prompt_noise: 0.05,
            images_per_label: 64,
            disjoint_labels: false,
        }
    }
}

pub fn make_tag_dataset(world: &ConceptWorld, opts: &TagOptions, seed: u64) -> Result<TagDataset> {
    world.validate()?;
    if opts.prompts_per_label == 0 || opts.images_per_label == 0 {
        return Err(Error::Config(
            "tag dataset needs at least one prompt and one image per label".into(),
        ));
    }
    let mut r = rng::stream(seed, TAG_STREAM);
    let protos = if opts.disjoint_labels {
        Prototypes {
            image: unit_rows(&mut r, world.num_concepts, world.img_dim),
            text: unit_rows(&mut r, world.num_concepts, world.txt_dim),
        }
    } else {
        world.prototypes(seed)
    };
    let labels_n = world.num_concepts;
    let mut prompts = Vec::with_capacity(labels_n);
    for l in 0..labels_n {
        let base = protos.text.row(l);
        prompts.push(Matrix::from_fn(opts.prompts_per_label, world.txt_dim, |_, j| {
            let z: f64 = StandardNormal.sample(&mut r);
            (base[j] + opts.prompt_noise * z) as f32 as f64
        }));
    }
    let mut images = Vec::with_capacity(labels_n * opts.images_per_label * world.img_dim);
    let mut labels = Vec::new();
    for l in 0..labels_n {
        for _ in 0..opts.images_per_label {
            images.extend(mix(&protos.image, &[l as u16], world.noise_scale, &mut r));
            labels.push(l as u16);
        }
    }
    Ok(TagDataset {
        label_prototypes: protos.text,
        prompts,
        images: Matrix::new(labels.len(), world.img_dim, images)?,
        labels,
        prompt_noise: opts.prompt_noise,
    })
}

impl TagDataset {
    /// Prompt-ensembled class text vectors (mean over prompts), `L × txt_dim`.
    pub fn class_texts(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = self.prompts.iter().map(crate::numerics::column_means).collect();
        Matrix::from_rows(&rows).expect("uniform prompt width")
    }

    /// Pairs each image with one sampled prompt of its label.
    pub fn to_pairs(&self, seed: u64) -> PairDataset {
        let mut r = rng::stream(seed, TAG_STREAM + 1);
        let n = self.labels.len();
        let txt_dim = self.label_prototypes.cols();
        let mut texts = Matrix::zeros(n, txt_dim);
        for (i, &l) in self.labels.iter().enumerate() {
            let p = &self.prompts[l as usize];
            let k = r.gen_range(0..p.rows());
            texts.row_mut(i).copy_from_slice(p.row(k));
        }
        PairDataset {
            images: self.images.clone(),
            texts,
            concepts: self.labels.iter().map(|&l| vec![l]).collect(),
            sources: vec![0; n],
            labels: self.labels.clone(),
            num_concepts: self.label_prototypes.rows(),
            max_concepts: 1,
        }
    }
}
