//! Vision and text encoders, the visual mapper and expert-token pooling.
//!
//! The vision encoder's pooled token (row 0) is the global average of its
//! final patch rows, as in windowed vision transformers that carry no class
//! token. The text encoder prepends a learned CLS embedding.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, EncoderBlock, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Splits a row-major `height × width` image into flattened
/// `patch × patch` tiles, returned as `[n, patch²]` in raster order.
pub fn patchify<T: Real>(pixels: &[T], height: usize, width: usize, patch: usize) -> Result<Tensor<T>> {
    if patch == 0 || height == 0 || width == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Shape {
            shape: alloc::vec![height, width],
            reason: format!("image is not divisible into {patch}×{patch} patches"),
        });
    }
    if pixels.len() != height * width {
        return Err(Error::Shape {
            shape: alloc::vec![height, width],
            reason: format!("expected {} pixels, got {}", height * width, pixels.len()),
        });
    }
    let (ph, pw) = (height / patch, width / patch);
    let mut out = Vec::with_capacity(pixels.len());
    for pr in 0..ph {
        for pc in 0..pw {
            for r in 0..patch {
                let start = (pr * patch + r) * width + pc * patch;
                out.extend_from_slice(&pixels[start..start + patch]);
            }
        }
    }
    Tensor::new(&[ph * pw, patch * patch], out)
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub patch_embed: Linear,
    pub position: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub patch: usize,
    pub image_size: usize,
}

impl VisionEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        image_size: usize,
        patch: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = (image_size / patch) * (image_size / patch);
        let patch_embed = Linear::new(store, &format!("{name}.patch_embed"), patch * patch, dim, true, rng);
        let position = store.add(&format!("{name}.position"), normal_tensor(&[n, dim], 0.02, rng));
        let blocks = (0..depth)
            .map(|i| EncoderBlock::new(store, &format!("{name}.block{i}"), dim, heads, ffn_mult, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch_embed,
            position,
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            patch,
            image_size,
        })
    }

    pub fn patches(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    /// Encodes a `[n, patch²]` patch tensor into `[n + 1, d]`; row 0 is the
    /// pooled token.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, patches: Var) -> Result<Var> {
        if g.shape(patches)[0] != self.patches() {
            return Err(Error::Dimension {
                op: "vision_encoder",
                lhs: g.shape(patches).to_vec(),
                rhs: alloc::vec![self.patches(), self.patch * self.patch],
            });
        }
        let x = self.patch_embed.forward(g, ps, patches)?;
        let pos = g.param(ps, self.position);
        let mut x = g.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, ps, x, None)?;
        }
        let x = self.norm.forward(g, ps, x)?;
        let pooled = pool_expert_token(g, x)?;
        g.concat(&[pooled, x], 0)
    }

    /// Convenience wrapper taking raw pixels.
    pub fn encode_image<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        pixels: &[T],
        height: usize,
        width: usize,
    ) -> Result<Var> {
        if height != self.image_size || width != self.image_size {
            return Err(Error::Shape {
                shape: alloc::vec![height, width],
                reason: format!("encoder expects {0}×{0} images", self.image_size),
            });
        }
        let p = patchify(pixels, height, width, self.patch)?;
        let p = g.constant(p);
        self.forward(g, ps, p)
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub cls: ParamId,
    pub position: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub max_len: usize,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        max_len: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let token_embed = store.add(&format!("{name}.token_embed"), normal_tensor(&[vocab, dim], 0.02, rng));
        let cls = store.add(&format!("{name}.cls"), normal_tensor(&[1, dim], 0.02, rng));
        let position = store.add(&format!("{name}.position"), normal_tensor(&[max_len + 1, dim], 0.02, rng));
        let blocks = (0..depth)
            .map(|i| EncoderBlock::new(store, &format!("{name}.block{i}"), dim, heads, ffn_mult, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            token_embed,
            cls,
            position,
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            max_len,
        })
    }

    /// Encodes token ids into `[len + 1, d]`; row 0 is CLS. Sequences longer
    /// than the positional table are truncated.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        let ids = &ids[..ids.len().min(self.max_len)];
        let cls = g.param(ps, self.cls);
        let x = if ids.is_empty() {
            cls
        } else {
            let table = g.param(ps, self.token_embed);
            let tok = g.embedding(table, ids)?;
            g.concat(&[cls, tok], 0)?
        };
        let pos = g.param(ps, self.position);
        let pos = g.narrow(pos, 0, 0, ids.len() + 1)?;
        let mut x = g.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, ps, x, None)?;
        }
        self.norm.forward(g, ps, x)
    }
}

/// Trainable affine map from encoder width to decoder width, row-wise.
pub type VisualMapper = Linear;

/// Mean of the patch rows of `[n, d]` (or of rows `1..` when the caller
/// passes the full encoder output and strips the pooled row first).
pub fn pool_expert_token<T: Real>(g: &mut Graph<T>, patches: Var) -> Result<Var> {
    let d = g.shape(patches)[1];
    let m = g.mean_axis(patches, 0)?;
    g.reshape(m, &[1, d])
}

/// Plain-value mean of the rows of a `[n, d]` tensor.
pub fn mean_rows(x: &Tensor<f32>) -> Vec<f32> {
    let d = x.cols();
    let mut out = alloc::vec![0f32; d];
    for r in x.data().chunks(d) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = x.rows() as f32;
    out.iter_mut().for_each(|o| *o /= n);
    out
}
