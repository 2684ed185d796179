//! Frozen toy image and text encoders.
//!
//! Both towers are small transformer stacks generated from a seed. A handful
//! of color and shape words get embeddings partially aligned with the image
//! features of matching renders, standing in for a pretrained joint space;
//! every other word is a random vector.

use std::io::{self, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::data::{self, Image, Pattern};
use crate::io::write_tensor_record;
use crate::par;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const TEMPLATE: [&str; 4] = ["a", "photo", "of", "a"];

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("patching error: {height}x{width} image is not divisible by patch size {patch}")]
    Patching {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub patch: usize,
    pub image_side: usize,
    pub channels: usize,
    pub vocab: usize,
    pub max_text_len: usize,
    /// Per-coordinate standard deviation of word embeddings.
    pub token_scale: f64,
    /// Share of each concept word's embedding that points along its visual
    /// anchor; `None` leaves every word random.
    pub alignment: Option<f64>,
    pub anchor_renders: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            blocks: 2,
            patch: 8,
            image_side: 32,
            channels: 3,
            vocab: 4096,
            max_text_len: 16,
            token_scale: 1.0,
            alignment: Some(0.9),
            anchor_renders: 8,
        }
    }
}

impl EncoderConfig {
    /// Small unaligned configuration for gradient and oracle tests.
    pub fn tiny(dim: usize, heads: usize) -> Self {
        Self {
            dim,
            heads,
            blocks: 2,
            patch: 4,
            image_side: 8,
            channels: 3,
            vocab: 256,
            max_text_len: 8,
            token_scale: 1.0,
            alignment: None,
            anchor_renders: 0,
        }
    }

    pub fn patches_per_image(&self) -> usize {
        (self.image_side / self.patch).pow(2)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: Arc<Tensor>,
    pub wk: Arc<Tensor>,
    pub wv: Arc<Tensor>,
    pub wo: Arc<Tensor>,
    pub w1: Arc<Tensor>,
    pub b1: Arc<Tensor>,
    pub w2: Arc<Tensor>,
    pub b2: Arc<Tensor>,
}

impl BlockWeights {
    fn tensors(&self) -> [(&'static str, &Arc<Tensor>); 8] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }
}

/// Frozen parameters of both encoders; never registered as learnable.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub seed: u64,
    pub config: EncoderConfig,
    pub token_table: Arc<Tensor>,
    pub text_pos: Arc<Tensor>,
    pub text_blocks: Vec<BlockWeights>,
    pub patch_proj: Arc<Tensor>,
    pub image_pos: Arc<Tensor>,
    pub image_blocks: Vec<BlockWeights>,
}

/// Each tensor draws from its own ChaCha stream, so generation order and
/// the presence of other tensors never change its values.
fn normal(seed: u64, stream: u64, shape: &[usize], std: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

const INIT_STD: f64 = 0.02;

fn block(seed: u64, base: u64, d: usize) -> BlockWeights {
    let w = |i: u64, shape: &[usize]| Arc::new(normal(seed, base + i, shape, INIT_STD));
    BlockWeights {
        wq: w(0, &[d, d]),
        wk: w(1, &[d, d]),
        wv: w(2, &[d, d]),
        wo: w(3, &[d, d]),
        w1: w(4, &[d, 4 * d]),
        b1: Arc::new(Tensor::zeros(&[4 * d])),
        w2: w(5, &[4 * d, d]),
        b2: Arc::new(Tensor::zeros(&[d])),
    }
}

impl EncoderWeights {
    pub fn generate(seed: u64, config: EncoderConfig) -> Self {
        let d = config.dim;
        let c = &config;
        let mut w = Self {
            seed,
            token_table: Arc::new(normal(seed, 1, &[c.vocab, d], c.token_scale)),
            text_pos: Arc::new(normal(seed, 2, &[c.max_text_len, d], INIT_STD)),
            patch_proj: Arc::new(normal(seed, 3, &[c.patch * c.patch * c.channels, d], INIT_STD)),
            image_pos: Arc::new(normal(seed, 4, &[c.patches_per_image(), d], INIT_STD)),
            text_blocks: (0..c.blocks as u64).map(|b| block(seed, 100 + 16 * b, d)).collect(),
            image_blocks: (0..c.blocks as u64).map(|b| block(seed, 1000 + 16 * b, d)).collect(),
            config,
        };
        if let Some(rho) = w.config.alignment {
            w.align_concepts(rho);
        }
        w
    }

    pub fn default_for_seed(seed: u64) -> Self {
        Self::generate(seed, EncoderConfig::default())
    }

    /// Rewrites the embeddings of the color and shape words so that a share
    /// `rho` of each points along the mean image feature of its concept.
    fn align_concepts(&mut self, rho: f64) {
        let cfg = &self.config;
        if cfg.image_side != data::SIDE || cfg.channels != data::CHANNELS {
            return;
        }
        let (nc, ns) = (data::COLORS.len(), data::SHAPES.len());
        let renders = cfg.anchor_renders.max(1);
        let jobs: Vec<(usize, usize)> =
            (0..nc).flat_map(|c| (0..ns).map(move |s| (c, s))).collect();
        let seed = self.seed;
        let means: Vec<Vec<f64>> = par::map(&jobs, |&(c, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(5000 + (c * ns + s) as u64);
            let mut acc = vec![0.0; cfg.dim];
            for _ in 0..renders {
                let img = data::render(Pattern { color: c, shape: s }, data::BACKGROUND_NOISE, &mut rng);
                let f = encode_image(self, &img).expect("anchor render matches config");
                acc.iter_mut().zip(f.pooled.data()).for_each(|(a, v)| *a += v / renders as f64);
            }
            acc
        });
        let d = cfg.dim;
        let mut global = vec![0.0; d];
        for m in &means {
            global.iter_mut().zip(m).for_each(|(g, v)| *g += v / means.len() as f64);
        }
        let centered_mean = |sel: &dyn Fn(usize, usize) -> bool| -> Vec<f64> {
            let picked: Vec<&Vec<f64>> = jobs
                .iter()
                .zip(&means)
                .filter(|((c, s), _)| sel(*c, *s))
                .map(|(_, m)| m)
                .collect();
            (0..d)
                .map(|k| picked.iter().map(|m| m[k]).sum::<f64>() / picked.len() as f64 - global[k])
                .collect()
        };
        let mut anchors: Vec<(&str, Vec<f64>)> = Vec::new();
        for (ci, name) in data::COLORS.iter().enumerate() {
            anchors.push((name, centered_mean(&|c, _| c == ci)));
        }
        for (si, name) in data::SHAPES.iter().enumerate() {
            anchors.push((name, centered_mean(&|_, s| s == si)));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let reference =
            anchors.iter().map(|(_, a)| norm(a)).sum::<f64>() / anchors.len() as f64;
        let mut table = self.token_table.as_ref().clone().into_data();
        let length = cfg.token_scale * (d as f64).sqrt();
        for (word, anchor) in anchors {
            let id = word_id(word, cfg.vocab);
            let row = &mut table[id * d..(id + 1) * d];
            let rn = norm(row);
            for (r, a) in row.iter_mut().zip(&anchor) {
                *r = length * (rho * a / reference + (1.0 - rho * rho).sqrt() * *r / rn);
            }
        }
        self.token_table = Arc::new(Tensor::matrix(cfg.vocab, d, table).expect("table shape"));
    }

    fn named_tensors(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out = vec![
            ("token_table".to_string(), &self.token_table),
            ("text_pos".to_string(), &self.text_pos),
        ];
        for (i, b) in self.text_blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("text.{i}.{n}"), t)));
        }
        out.push(("patch_proj".to_string(), &self.patch_proj));
        out.push(("image_pos".to_string(), &self.image_pos));
        for (i, b) in self.image_blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("image.{i}.{n}"), t)));
        }
        out
    }

    /// FNV-1a over the bit patterns of every weight.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::io::Fnv::new();
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Shape-headed little-endian dump of every weight tensor.
    pub fn dump(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "PROMPTFORGE-WEIGHTS v1 seed={}", self.seed)?;
        for (name, t) in self.named_tensors() {
            write_tensor_record(out, &name, t)?;
        }
        Ok(())
    }

    /// Zeroes the position embeddings; used to probe patch symmetry.
    pub fn without_positions(mut self) -> Self {
        self.text_pos = Arc::new(Tensor::zeros(self.text_pos.shape()));
        self.image_pos = Arc::new(Tensor::zeros(self.image_pos.shape()));
        self
    }

    pub fn word_embedding(&self, id: usize) -> &[f64] {
        self.token_table.row(id)
    }

    /// Class token: mean embedding of the words in the class name.
    pub fn class_token(&self, name: &str) -> Result<Vec<f64>> {
        let seq = tokenize(name, self.config.vocab)?;
        let ids = seq.class_ids();
        let d = self.config.dim;
        let mut out = vec![0.0; d];
        for &id in ids {
            out.iter_mut()
                .zip(self.word_embedding(id))
                .for_each(|(o, v)| *o += v / ids.len() as f64);
        }
        Ok(out)
    }

    pub fn class_tokens(&self, names: &[String]) -> Result<Tensor> {
        let rows = names.iter().map(|n| self.class_token(n)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::matrix(rows.len(), self.config.dim, rows.concat())?)
    }

    /// Embeddings of the fixed "a photo of a" prefix, one row per word.
    pub fn template_tokens(&self) -> Tensor {
        let d = self.config.dim;
        let data = TEMPLATE
            .iter()
            .flat_map(|w| self.word_embedding(word_id(w, self.config.vocab)).to_vec())
            .collect();
        Tensor::matrix(TEMPLATE.len(), d, data).expect("template shape")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    /// Ids of the class-name words, after the template prefix.
    pub fn class_ids(&self) -> &[usize] {
        &self.ids[TEMPLATE.len()..]
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = crate::io::Fnv::new();
    h.write(bytes);
    h.finish()
}

pub fn word_id(word: &str, vocab: usize) -> usize {
    (fnv1a(word.as_bytes()) % vocab as u64) as usize
}

/// Lowercase alphabetic words of a class name; digits and punctuation split
/// words and are dropped.
pub fn words(name: &str) -> Vec<String> {
    name.split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Expands `name` into the "a photo of a [CLASS]" template and hashes each
/// word into the vocabulary.
pub fn tokenize(name: &str, vocab: usize) -> Result<TokenSequence> {
    let ws = words(name);
    if ws.is_empty() {
        return Err(EncoderError::Argument(format!("class name {name:?} has no words")));
    }
    let ids = TEMPLATE
        .iter()
        .map(|w| word_id(w, vocab))
        .chain(ws.iter().map(|w| word_id(w, vocab)))
        .collect();
    Ok(TokenSequence { ids })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub patches: Tensor,
    pub pooled: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub per_class: Tensor,
}

fn transformer_block(
    g: &mut Graph,
    w: &BlockWeights,
    x: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let d = g.shape(x)[1];
    let dh = d / heads;
    let wq = g.constant_shared(w.wq.clone());
    let wk = g.constant_shared(w.wk.clone());
    let wv = g.constant_shared(w.wv.clone());
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let mut s = g.scale(s, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            s = g.add(s, m)?;
        }
        let a = g.softmax_rows(s);
        outs.push(g.matmul(a, vh)?);
    }
    let cat = g.concat_cols(&outs)?;
    let wo = g.constant_shared(w.wo.clone());
    let o = g.matmul(cat, wo)?;
    let x = g.add(x, o)?;
    let w1 = g.constant_shared(w.w1.clone());
    let b1 = g.constant_shared(w.b1.clone());
    let w2 = g.constant_shared(w.w2.clone());
    let b2 = g.constant_shared(w.b2.clone());
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let h = g.matmul(h, w2)?;
    let h = g.add_row(h, b2)?;
    Ok(g.add(x, h)?)
}

fn patchify(w: &EncoderWeights, img: &Image) -> Result<Tensor> {
    let p = w.config.patch;
    if !img.height.is_multiple_of(p) || !img.width.is_multiple_of(p) {
        return Err(EncoderError::Patching {
            height: img.height,
            width: img.width,
            patch: p,
        });
    }
    if img.channels != w.config.channels || img.height * img.width / (p * p) != w.config.patches_per_image() {
        return Err(EncoderError::Shape(format!(
            "image {}x{}x{} does not match encoder input {}x{}x{}",
            img.height, img.width, img.channels, w.config.image_side, w.config.image_side, w.config.channels
        )));
    }
    let (gh, gw, c) = (img.height / p, img.width / p, img.channels);
    let mut data = Vec::with_capacity(img.pixels.len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                for x in 0..p {
                    let base = ((py * p + y) * img.width + px * p + x) * c;
                    for ch in 0..c {
                        data.push((img.pixels[base + ch] as f64 / 255.0 - 0.5) / 0.25);
                    }
                }
            }
        }
    }
    Ok(Tensor::matrix(gh * gw, p * p * c, data)?)
}

/// Image tower inside a graph; returns per-patch features (N×d).
pub fn encode_image_graph(g: &mut Graph, w: &EncoderWeights, img: &Image) -> Result<Var> {
    let x = g.constant(patchify(w, img)?);
    let proj = g.constant_shared(w.patch_proj.clone());
    let pos = g.constant_shared(w.image_pos.clone());
    let mut h = g.matmul(x, proj)?;
    h = g.add(h, pos)?;
    for b in &w.image_blocks {
        h = transformer_block(g, b, h, w.config.heads, None)?;
    }
    Ok(h)
}

/// Patch features plus their mean as the pooled image feature.
pub fn encode_image(w: &EncoderWeights, img: &Image) -> Result<ImageFeatures> {
    let mut g = Graph::new();
    let patches = encode_image_graph(&mut g, w, img)?;
    let pooled = g.mean_rows(patches)?;
    Ok(ImageFeatures {
        patches: g.value(patches).clone(),
        pooled: g.value(pooled).clone(),
    })
}

fn block_mask(count: usize, len: usize) -> Tensor {
    let n = count * len;
    let data = (0..n * n)
        .map(|i| if (i / n) / len == (i % n) / len { 0.0 } else { -1e9 })
        .collect();
    Tensor::matrix(n, n, data).expect("mask shape")
}

/// Text tower over M token-embedding sequences of equal length L; returns
/// the M×d per-class embedding. Sequences share one stacked pass with a
/// block-diagonal attention mask.
pub fn encode_text(g: &mut Graph, w: &EncoderWeights, sequences: &[Var]) -> Result<Var> {
    let first = sequences
        .first()
        .ok_or_else(|| EncoderError::Shape("no prompt sequences".into()))?;
    let shape = g.shape(*first).to_vec();
    if shape.len() != 2 || shape[1] != w.config.dim {
        return Err(EncoderError::Shape(format!(
            "prompt sequence shape {shape:?} does not have width {}",
            w.config.dim
        )));
    }
    let len = shape[0];
    if len > w.config.max_text_len {
        return Err(EncoderError::Shape(format!(
            "sequence length {len} exceeds {}",
            w.config.max_text_len
        )));
    }
    if let Some(bad) = sequences.iter().find(|s| g.shape(**s) != shape.as_slice()) {
        return Err(EncoderError::Shape(format!(
            "ragged prompt sequences: {shape:?} vs {:?}",
            g.shape(*bad)
        )));
    }
    let m = sequences.len();
    let d = w.config.dim;
    let x = g.concat_rows(sequences)?;
    let pos: Vec<f64> = (0..m).flat_map(|_| w.text_pos.data()[..len * d].to_vec()).collect();
    let pos = g.constant(Tensor::matrix(m * len, d, pos)?);
    let mut h = g.add(x, pos)?;
    let mask = (m > 1).then(|| g.constant(block_mask(m, len)));
    for b in &w.text_blocks {
        h = transformer_block(g, b, h, w.config.heads, mask)?;
    }
    let pooled = g.segment_mean(h, len)?;
    Ok(g.layer_norm_rows(pooled))
}

/// Graph-free text encoding for fixed prompts.
pub fn encode_text_values(w: &EncoderWeights, sequences: &[Tensor]) -> Result<TextEmbedding> {
    let mut g = Graph::new();
    let vars: Vec<Var> = sequences.iter().map(|s| g.constant(s.clone())).collect();
    let out = encode_text(&mut g, w, &vars)?;
    Ok(TextEmbedding {
        per_class: g.value(out).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error};

    fn tiny() -> EncoderWeights {
        EncoderWeights::generate(3, EncoderConfig::tiny(8, 2))
    }

    fn seq(w: &EncoderWeights, len: usize, salt: u64) -> Tensor {
        normal(salt, 77, &[len, w.config.dim], 1.0)
    }

    #[test]
    fn same_seed_same_weights() {
        let a = EncoderWeights::generate(9, EncoderConfig::tiny(8, 2));
        let b = EncoderWeights::generate(9, EncoderConfig::tiny(8, 2));
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), EncoderWeights::generate(10, EncoderConfig::tiny(8, 2)).checksum());
    }

    #[test]
    fn streams_are_order_independent() {
        let a = normal(4, 2, &[3, 3], 1.0);
        let _ = normal(4, 1, &[100], 1.0);
        assert_eq!(a, normal(4, 2, &[3, 3], 1.0));
    }

    #[test]
    fn tokenize_expands_template() {
        let cat = tokenize("cat", 4096).unwrap();
        let expected: Vec<usize> =
            ["a", "photo", "of", "a", "cat"].iter().map(|w| word_id(w, 4096)).collect();
        assert_eq!(cat.ids, expected);
        assert_eq!(cat, tokenize("Cat", 4096).unwrap());
        assert_ne!(cat, tokenize("dog", 4096).unwrap());
        assert!(matches!(tokenize("", 4096), Err(EncoderError::Argument(_))));
        assert!(matches!(tokenize("42", 4096), Err(EncoderError::Argument(_))));
        assert_eq!(tokenize("03_red_disc", 4096).unwrap().class_ids().len(), 2);
    }

    #[test]
    fn concept_words_have_distinct_ids() {
        let mut ids: Vec<usize> = data::COLORS
            .iter()
            .chain(data::SHAPES.iter())
            .chain(TEMPLATE.iter().take(3))
            .map(|w| word_id(w, 4096))
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 15);
    }

    #[test]
    fn image_patch_count() {
        let w = EncoderWeights::generate(1, EncoderConfig { alignment: None, ..Default::default() });
        let f = encode_image(&w, &Image::filled(32, 32, 3, 77)).unwrap();
        assert_eq!(f.patches.shape(), &[(32 / 8) * (32 / 8), 64]);
        assert_eq!(f.pooled.shape(), &[64]);
    }

    #[test]
    fn image_rejects_bad_patching() {
        let w = tiny();
        let err = encode_image(&w, &Image::filled(9, 8, 3, 0)).unwrap_err();
        assert!(matches!(err, EncoderError::Patching { .. }));
    }

    #[test]
    fn zero_image_without_positions_gives_equal_patches() {
        let w = tiny().without_positions();
        let f = encode_image(&w, &Image::filled(8, 8, 3, 0)).unwrap();
        let first = f.patches.row(0).to_vec();
        for i in 1..f.patches.rows() {
            assert_eq!(f.patches.row(i), first.as_slice());
        }
    }

    #[test]
    fn image_encoding_is_deterministic_and_pooled_is_mean() {
        let w = tiny();
        let img = Image::new(8, 8, 3, (0..192).map(|i| (i * 31 % 256) as u8).collect());
        let a = encode_image(&w, &img).unwrap();
        let b = encode_image(&w, &img).unwrap();
        assert_eq!(a, b);
        for k in 0..8 {
            let mean: f64 = (0..a.patches.rows()).map(|i| a.patches.get(i, k)).sum::<f64>()
                / a.patches.rows() as f64;
            assert!((mean - a.pooled.data()[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn text_rows_follow_class_order() {
        let w = tiny();
        let s: Vec<Tensor> = (0..3).map(|i| seq(&w, 3, i)).collect();
        let out = encode_text_values(&w, &s).unwrap().per_class;
        let perm = vec![s[2].clone(), s[0].clone(), s[1].clone()];
        let out_p = encode_text_values(&w, &perm).unwrap().per_class;
        for (pi, oi) in [(0, 2), (1, 0), (2, 1)] {
            for (a, b) in out_p.row(pi).iter().zip(out.row(oi)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let same = encode_text_values(&w, &[s[0].clone(), s[0].clone()]).unwrap().per_class;
        assert_eq!(same.row(0), same.row(1));
        let single = encode_text_values(&w, &[s[1].clone()]).unwrap().per_class;
        for (a, b) in single.row(0).iter().zip(out.row(1)) {
            assert!((a - b).abs() < 1e-12, "masking isolates sequences");
        }
    }

    #[test]
    fn text_rejects_ragged() {
        let w = tiny();
        let err = encode_text_values(&w, &[seq(&w, 3, 0), seq(&w, 4, 1)]).unwrap_err();
        assert!(matches!(err, EncoderError::Shape(_)));
    }

    #[test]
    fn text_gradient_matches_finite_differences() {
        let w = tiny();
        let s0 = seq(&w, 3, 5);
        let s1 = seq(&w, 3, 6);
        let mut g = Graph::new();
        let a = g.param(s0.clone());
        let b = g.constant(s1.clone());
        let out = encode_text(&mut g, &w, &[a, b]).unwrap();
        let wt = g.constant(normal(1, 9, &[2, 8], 1.0));
        let p = g.hadamard(out, wt).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        let numeric = finite_diff_grad(
            |x| {
                let e = encode_text_values(&w, &[x.clone(), s1.clone()]).unwrap().per_class;
                e.data().iter().zip(normal(1, 9, &[2, 8], 1.0).data()).map(|(a, b)| a * b).sum()
            },
            &s0,
            1e-5,
        );
        assert!(relative_error(g.grad(a).unwrap().data(), numeric.data()) < 1e-4);
    }

    #[test]
    fn image_output_carries_gradient_but_weights_do_not() {
        let w = tiny();
        let before = w.checksum();
        let img = Image::filled(8, 8, 3, 100);
        let mut g = Graph::new();
        let f = encode_image_graph(&mut g, &w, &img).unwrap();
        let scale = g.param(Tensor::vector(vec![1.0; 8]));
        let shifted = g.add_row(f, scale).unwrap();
        let loss = g.sum(shifted);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(scale).unwrap().data(), &[4.0; 8]);
        assert!(g.grad(f).is_none());
        assert_eq!(before, w.checksum());
    }

    #[test]
    fn dump_has_header_and_all_tensors() {
        let w = tiny();
        let mut buf = Vec::new();
        w.dump(&mut buf).unwrap();
        assert!(buf.starts_with(b"PROMPTFORGE-WEIGHTS v1 seed=3\n"));
        let floats: usize = w.named_tensors().iter().map(|(_, t)| t.len()).sum();
        assert!(buf.len() > floats * 8);
    }

    #[test]
    fn aligned_concepts_point_at_their_renders() {
        let w = EncoderWeights::default_for_seed(7);
        let red = w.class_token("red").unwrap();
        let blue = w.class_token("blue").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = data::render(Pattern { color: 0, shape: 0 }, data::BACKGROUND_NOISE, &mut rng);
        let f = encode_image(&w, &img).unwrap().pooled;
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        assert!(cos(&red, f.data()) > cos(&blue, f.data()));
    }
}
