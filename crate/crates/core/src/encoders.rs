//! Toy vision and text encoders that emit global and fine-grained embeddings
//! in one shared space.
//!
//! Vision: patch embedding, 2-D sinusoidal positions, a pre-norm transformer
//! stack, mean pooling and a projection. Text: token embedding plus
//! within-sentence sinusoidal positions and the same block stack. Sentence
//! embeddings are the projected mean of their tokens, so reordering sentences
//! reorders the embeddings and nothing else.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::data::{TokenizedReport, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::nn::{self, Block, Init, LayerNorm, Linear, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub max_sentences: usize,
    /// Vision attention radius in patches (Chebyshev distance); 0 attends
    /// over the whole grid.
    pub attn_window: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            vocab_size: Vocabulary::standard().len(),
            max_tokens: 48,
            max_sentences: 6,
            attn_window: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim < 2 || self.depth == 0 {
            return Err(Error::Config("embed_dim >= 2 and depth >= 1 required".into()));
        }
        if self.vocab_size <= crate::data::PERIOD as usize {
            return Err(Error::Config("vocab_size must cover the special tokens".into()));
        }
        if self.max_tokens == 0 || self.max_sentences == 0 {
            return Err(Error::Config("max_tokens and max_sentences must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Batched image features. `global` rows are unit-norm; `patches` are the
/// projected per-patch features before normalization.
#[derive(Debug, Clone)]
pub struct VisionFeatures {
    pub global: Tensor,
    pub patches: Tensor,
    /// Encoder output before the projections, `[B, P, D]`.
    pub hidden: Tensor,
}

#[derive(Debug, Clone)]
pub struct TextFeatures {
    pub global: Tensor,
    /// `[B, S_max, D]`; unit rows in valid slots, zero rows in padded slots.
    pub sentences: Tensor,
    /// `[B, S_max]`, 1.0 for valid slots.
    pub sentence_mask: Tensor,
    pub valid: Vec<Vec<bool>>,
    /// Token features before projection, `[B, T, D]`.
    pub hidden: Tensor,
}

impl TextFeatures {
    pub fn num_valid(&self, b: usize) -> usize {
        self.valid[b].iter().filter(|v| **v).count()
    }
}

/// Plain cosine similarity; zero-norm inputs are rejected.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero-norm vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `[B, 1, H, W]` tensor from row-major grayscale buffers.
pub fn images_tensor(images: &[&[f32]], size: usize, dtype: DType) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.len() != size * size {
            return Err(Error::shape("image buffer", size * size, img.len()));
        }
        flat.extend_from_slice(img);
    }
    Ok(Tensor::from_vec(flat, (images.len(), 1, size, size), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    cfg: EncoderConfig,
    patch_embed: Linear,
    pos: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
    global_proj: Linear,
    local_proj: Linear,
    /// `[P, P]` additive attention bias, present when `attn_window > 0`.
    window: Option<Vec<f64>>,
}

impl VisionEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut pb.pp(format!("blocks.{i}")), d, cfg.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: Linear::new(&mut pb.pp("patch_embed"), cfg.patch_pixels(), d)?,
            pos: nn::sincos_2d(cfg.grid(), d, pb.dtype())?,
            blocks,
            ln: LayerNorm::new(&mut pb.pp("ln"), d)?,
            global_proj: Linear::new(&mut pb.pp("global_proj"), d, d)?,
            local_proj: Linear::new(&mut pb.pp("local_proj"), d, d)?,
            window: (cfg.attn_window > 0).then(|| window_table(cfg.grid(), cfg.attn_window)),
        })
    }

    /// Attention bias restricting each patch in `index` (grid positions, one
    /// list per image, equal lengths) to its window; `None` for global
    /// attention.
    pub fn window_bias(&self, index: &[Vec<usize>]) -> Result<Option<Tensor>> {
        let Some(table) = &self.window else {
            return Ok(None);
        };
        let p = self.cfg.num_patches();
        let n = index.first().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(index.len() * n * n);
        for idx in index {
            if idx.len() != n {
                return Err(Error::shape("window index", n, idx.len()));
            }
            for &q in idx {
                out.extend(idx.iter().map(|&k| table[q * p + k]));
            }
        }
        let t = Tensor::from_vec(out, (index.len(), 1, n, n), &Device::Cpu)?;
        Ok(Some(t.to_dtype(self.pos.dtype())?))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn pos_table(&self) -> &Tensor {
        &self.pos
    }

    /// `[B, 1, H, W]` to `[B, P, patch_size^2]`, patches in row-major grid order.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let dims = images.dims();
        let s = self.cfg.image_size;
        if dims.len() != 4 || dims[1] != 1 || dims[2] != s || dims[3] != s {
            return Err(Error::shape(
                "image batch",
                format!("[B, 1, {s}, {s}]"),
                format!("{dims:?}"),
            ));
        }
        let (b, g, p) = (dims[0], self.cfg.grid(), self.cfg.patch_size);
        Ok(images
            .reshape((b, g, p, g, p))?
            .permute((0, 1, 3, 2, 4))?
            .contiguous()?
            .reshape((b, g * g, p * p))?)
    }

    /// Runs the transformer on a subset of patches. `pos` is `[B, N, D]`;
    /// `bias` comes from [`Self::window_bias`].
    pub fn encode_patches(&self, patch_pixels: &Tensor, pos: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let mut x = self.patch_embed.forward(patch_pixels)?.broadcast_add(pos)?;
        for block in &self.blocks {
            x = block.forward(&x, bias)?;
        }
        self.ln.forward(&x)
    }

    pub fn forward(&self, images: &Tensor) -> Result<VisionFeatures> {
        let pixels = self.patchify(images)?;
        let lo = images.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let hi = images.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !(lo >= 0.0 && hi <= 1.0) {
            return Err(Error::invalid(format!(
                "pixel values must lie in [0, 1], got [{lo}, {hi}]"
            )));
        }
        let all: Vec<usize> = (0..self.cfg.num_patches()).collect();
        let bias = self.window_bias(&[all])?;
        let hidden = self.encode_patches(&pixels, &self.pos.unsqueeze(0)?, bias.as_ref())?;
        self.project(hidden)
    }

    pub fn project(&self, hidden: Tensor) -> Result<VisionFeatures> {
        let pooled = hidden.mean(1)?;
        let global = nn::l2_normalize(&self.global_proj.forward(&pooled)?)?;
        let patches = self.local_proj.forward(&hidden)?;
        Ok(VisionFeatures {
            global,
            patches,
            hidden,
        })
    }
}

fn window_table(grid: usize, radius: usize) -> Vec<f64> {
    let p = grid * grid;
    let mut t = vec![0.0; p * p];
    for q in 0..p {
        for k in 0..p {
            let dy = (q / grid).abs_diff(k / grid);
            let dx = (q % grid).abs_diff(k % grid);
            if dy.max(dx) > radius {
                t[q * p + k] = -1e9;
            }
        }
    }
    t
}

/// Padded text batch with the pooling matrices the encoder needs.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub ids: Vec<Vec<u32>>,
    pub tokens: Tensor,
    pub pos_ids: Tensor,
    pub key_bias: Tensor,
    pub sentence_pool: Tensor,
    pub token_pool: Tensor,
    pub sentence_mask: Tensor,
    pub valid: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

impl TextBatch {
    pub fn new(reports: &[&TokenizedReport], cfg: &EncoderConfig, dtype: DType) -> Result<Self> {
        let ids: Vec<Vec<u32>> = reports.iter().map(|r| r.ids.clone()).collect();
        let spans: Vec<Vec<(usize, usize)>> = reports.iter().map(|r| r.spans.clone()).collect();
        Self::from_parts(ids, &spans, cfg, dtype)
    }

    pub fn from_parts(
        ids: Vec<Vec<u32>>,
        spans: &[Vec<(usize, usize)>],
        cfg: &EncoderConfig,
        dtype: DType,
    ) -> Result<Self> {
        let b = ids.len();
        if b == 0 || spans.len() != b {
            return Err(Error::invalid("text batch must be non-empty with spans per report"));
        }
        let t = ids.iter().map(Vec::len).max().unwrap_or(0);
        if t == 0 {
            return Err(Error::invalid("empty report in text batch"));
        }
        if t > cfg.max_tokens {
            return Err(Error::shape("report length", format!("<= {}", cfg.max_tokens), t));
        }
        let s_max = cfg.max_sentences;
        let mut tok = vec![PAD; b * t];
        let mut pos = vec![0u32; b * t];
        let mut bias = vec![-1e9f64; b * t];
        let mut spool = vec![0f64; b * s_max * t];
        let mut tpool = vec![0f64; b * t];
        let mut smask = vec![0f64; b * s_max];
        let mut valid = vec![vec![false; s_max]; b];
        for (i, (row, sp)) in ids.iter().zip(spans).enumerate() {
            if row.is_empty() || sp.is_empty() {
                return Err(Error::invalid(format!("report {i} has no sentences")));
            }
            if sp.len() > s_max {
                return Err(Error::shape("sentence count", format!("<= {s_max}"), sp.len()));
            }
            for (j, &id) in row.iter().enumerate() {
                if id as usize >= cfg.vocab_size {
                    return Err(Error::invalid(format!(
                        "token id {id} >= vocab_size {}",
                        cfg.vocab_size
                    )));
                }
                tok[i * t + j] = id;
                bias[i * t + j] = 0.0;
                tpool[i * t + j] = 1.0 / row.len() as f64;
            }
            let mut prev_end = 0;
            for (k, &(s, e)) in sp.iter().enumerate() {
                if s >= e {
                    return Err(Error::invalid(format!(
                        "report {i}: empty sentence span {k} ({s}, {e})"
                    )));
                }
                if s < prev_end || e > row.len() {
                    return Err(Error::invalid(format!(
                        "report {i}: span {k} ({s}, {e}) overlaps or exceeds {} tokens",
                        row.len()
                    )));
                }
                prev_end = e;
                for j in s..e {
                    pos[i * t + j] = (j - s) as u32;
                    spool[(i * s_max + k) * t + j] = 1.0 / (e - s) as f64;
                }
                smask[i * s_max + k] = 1.0;
                valid[i][k] = true;
            }
        }
        let dev = Device::Cpu;
        Ok(Self {
            lengths: ids.iter().map(Vec::len).collect(),
            ids,
            tokens: Tensor::from_vec(tok, (b, t), &dev)?,
            pos_ids: Tensor::from_vec(pos, (b, t), &dev)?,
            key_bias: Tensor::from_vec(bias, (b, 1, 1, t), &dev)?.to_dtype(dtype)?,
            sentence_pool: Tensor::from_vec(spool, (b, s_max, t), &dev)?.to_dtype(dtype)?,
            token_pool: Tensor::from_vec(tpool, (b, 1, t), &dev)?.to_dtype(dtype)?,
            sentence_mask: Tensor::from_vec(smask, (b, s_max), &dev)?.to_dtype(dtype)?,
            valid,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.dims()[1]
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    cfg: EncoderConfig,
    embed: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
    global_proj: Linear,
    local_proj: Linear,
}

impl TextEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut pb.pp(format!("blocks.{i}")), d, cfg.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            embed: pb.param("embed", &[cfg.vocab_size, d], Init::Normal(0.5))?,
            pos: nn::sincos_1d(cfg.max_tokens, d, pb.dtype())?,
            blocks,
            ln: LayerNorm::new(&mut pb.pp("ln"), d)?,
            global_proj: Linear::new(&mut pb.pp("global_proj"), d, d)?,
            local_proj: Linear::new(&mut pb.pp("local_proj"), d, d)?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn forward(&self, batch: &TextBatch) -> Result<TextFeatures> {
        self.forward_ids(batch, &batch.tokens)
    }

    /// Encodes `tokens` (same shape as `batch.tokens`) with the batch's
    /// padding, positions and sentence spans; used for the masked pass.
    pub fn forward_ids(&self, batch: &TextBatch, tokens: &Tensor) -> Result<TextFeatures> {
        let (b, t) = tokens.dims2()?;
        let d = self.cfg.embed_dim;
        let emb = self
            .embed
            .index_select(&tokens.flatten_all()?, 0)?
            .reshape((b, t, d))?;
        let pos = self
            .pos
            .index_select(&batch.pos_ids.flatten_all()?, 0)?
            .reshape((b, t, d))?;
        let mut x = (emb + pos)?;
        for block in &self.blocks {
            x = block.forward(&x, Some(&batch.key_bias))?;
        }
        let hidden = self.ln.forward(&x)?;

        let pooled = batch.token_pool.matmul(&hidden)?.squeeze(1)?;
        let global = nn::l2_normalize(&self.global_proj.forward(&pooled)?)?;
        let sent = batch.sentence_pool.matmul(&hidden)?;
        let sentences = nn::l2_normalize(&self.local_proj.forward(&sent)?)?
            .broadcast_mul(&batch.sentence_mask.unsqueeze(D::Minus1)?)?;
        Ok(TextFeatures {
            global,
            sentences,
            sentence_mask: batch.sentence_mask.clone(),
            valid: batch.valid.clone(),
            hidden,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_rng, ParamStore};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            max_tokens: 32,
            max_sentences: 4,
            ..Default::default()
        }
    }

    fn build(cfg: &EncoderConfig) -> (ParamStore, VisionEncoder, TextEncoder) {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = init_rng(1);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let v = VisionEncoder::new(&mut pb.pp("vision"), cfg).unwrap();
        let t = TextEncoder::new(&mut pb.pp("text"), cfg).unwrap();
        (store, v, t)
    }

    #[test]
    fn config_invariants() {
        let mut cfg = tiny_cfg();
        assert_eq!(cfg.num_patches(), 16);
        cfg.patch_size = 7;
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig {
            heads: 3,
            ..tiny_cfg()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn vision_shapes_norms_and_determinism() {
        let cfg = tiny_cfg();
        let (_s, v, _t) = build(&cfg);
        let img = Tensor::zeros((1, 1, 32, 32), DType::F64, &Device::Cpu).unwrap();
        let f1 = v.forward(&img).unwrap();
        let f2 = v.forward(&img).unwrap();
        assert_eq!(f1.patches.dims(), &[1, 16, 16]);
        let g = f1.global.to_vec2::<f64>().unwrap();
        let n: f64 = g[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
        assert_eq!(g, f2.global.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn vision_rejects_bad_shape_and_range() {
        let (_s, v, _t) = build(&tiny_cfg());
        let img = Tensor::zeros((1, 1, 16, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(v.forward(&img), Err(Error::Shape { .. })));
        let img = Tensor::full(2.0f64, (1, 1, 32, 32), &Device::Cpu).unwrap();
        assert!(v.forward(&img).is_err());
    }

    #[test]
    fn one_changed_patch_changes_that_patch() {
        let (_s, v, _t) = build(&tiny_cfg());
        let mut a = vec![0.2f64; 32 * 32];
        let base = Tensor::from_vec(a.clone(), (1, 1, 32, 32), &Device::Cpu).unwrap();
        // patch index 5 = grid row 1, col 1
        for y in 8..16 {
            for x in 8..16 {
                a[y * 32 + x] = 0.9;
            }
        }
        let changed = Tensor::from_vec(a, (1, 1, 32, 32), &Device::Cpu).unwrap();
        let p0 = v.forward(&base).unwrap().patches.to_vec3::<f64>().unwrap();
        let p1 = v.forward(&changed).unwrap().patches.to_vec3::<f64>().unwrap();
        let diff: f64 = p0[0][5]
            .iter()
            .zip(&p1[0][5])
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn sentence_mask_counts_sentences() {
        let cfg = tiny_cfg();
        let (_s, _v, t) = build(&cfg);
        let vocab = Vocabulary::standard();
        let one = vocab.tokenize("there is a blob.").unwrap();
        let three = vocab
            .tokenize("there is a blob. the background is clear. there is a ring.")
            .unwrap();
        let batch = TextBatch::new(&[&one, &three], &cfg, DType::F64).unwrap();
        let f = t.forward(&batch).unwrap();
        assert_eq!(f.num_valid(0), 1);
        assert_eq!(f.num_valid(1), 3);
        let s = f.sentences.to_vec3::<f64>().unwrap();
        for (b, n) in [(0usize, 1usize), (1, 3)] {
            for k in 0..cfg.max_sentences {
                let norm: f64 = s[b][k].iter().map(|x| x * x).sum::<f64>().sqrt();
                if k < n {
                    assert!((norm - 1.0).abs() < 1e-5);
                } else {
                    assert_eq!(norm, 0.0);
                }
            }
        }
    }

    #[test]
    fn empty_span_and_bad_ids_rejected() {
        let cfg = tiny_cfg();
        let err = TextBatch::from_parts(vec![vec![5, 6, 4]], &[vec![(0, 0)]], &cfg, DType::F64);
        assert!(err.is_err());
        let err = TextBatch::from_parts(vec![vec![500]], &[vec![(0, 1)]], &cfg, DType::F64);
        assert!(err.is_err());
        let err = TextBatch::from_parts(
            vec![vec![5, 6, 4, 7]],
            &[vec![(0, 3), (2, 4)]],
            &cfg,
            DType::F64,
        );
        assert!(err.is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = [0.3, -1.2, 2.0];
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }
}
