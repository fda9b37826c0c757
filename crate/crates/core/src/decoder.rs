//! Two-way transformer mask decoder with transposed-convolution upscaling.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::EmbeddingGrid;
use crate::error::{Error, Result};
use crate::nn::{attention2, depth_to_space, init_attention, init_mlp, layer_norm, linear, mlp};
use crate::params::{Binder, ParamStore, Scope};
use crate::prompts::{grid_pe, DensePromptGrid, TokenSet};
use crate::tensor::Tensor;
use crate::volcore::{Dims, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub upscale_stages: usize,
    pub mlp_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { depth: 2, embed_dim: 96, heads: 4, upscale_stages: 2, mlp_dim: 192 }
    }
}

impl DecoderConfig {
    pub fn validate(&self, token_size: usize) -> Result<()> {
        if self.upscale_stages == 0 || 1usize << self.upscale_stages != token_size {
            return Err(Error::InvalidArgument(format!(
                "2^upscale_stages = 2^{} must equal token size {token_size}",
                self.upscale_stages
            )));
        }
        let c = self.embed_dim;
        if !c.is_multiple_of(1 << (self.upscale_stages + 1)) || !c.is_multiple_of(2 * self.heads) {
            return Err(Error::InvalidArgument(format!(
                "decoder width {c} incompatible with {} heads and {} upscale stages",
                self.heads, self.upscale_stages
            )));
        }
        Ok(())
    }

    /// Channel count after each upscale stage: C/4, then halving.
    pub fn upscale_channels(&self) -> Vec<usize> {
        (0..self.upscale_stages).map(|i| self.embed_dim >> (i + 2)).collect()
    }

    fn cross_dim(&self) -> usize {
        self.embed_dim / 2
    }
}

pub fn init_decoder(store: &mut ParamStore, cfg: &DecoderConfig, seed: u64) {
    let c = cfg.embed_dim;
    store.init_normal(seed, "decoder.output_token", &[1, c], 1.0);
    for i in 0..cfg.depth {
        let b = format!("decoder.blocks.{i}");
        init_attention(store, seed, &format!("{b}.self_attn"), c, c, c, c, false);
        store.init_layer_norm(&format!("{b}.norm1"), c);
        init_attention(store, seed, &format!("{b}.cross_t2i"), c, c, cfg.cross_dim(), c, false);
        store.init_layer_norm(&format!("{b}.norm2"), c);
        init_mlp(store, seed, &format!("{b}.mlp"), c, cfg.mlp_dim, c);
        store.init_layer_norm(&format!("{b}.norm3"), c);
        init_attention(store, seed, &format!("{b}.cross_i2t"), c, c, cfg.cross_dim(), c, false);
        store.init_layer_norm(&format!("{b}.norm4"), c);
    }
    init_attention(store, seed, "decoder.final_attn", c, c, cfg.cross_dim(), c, false);
    store.init_layer_norm("decoder.final_norm", c);
    let mut ch = c;
    for (i, &out) in cfg.upscale_channels().iter().enumerate() {
        store.init_linear(seed, &format!("decoder.upscale.{i}"), ch, 8 * out);
        if i == 0 {
            store.init_layer_norm("decoder.upscale_norm", out);
        }
        ch = out;
    }
    init_mlp(store, seed, "decoder.hyper", c, c, ch);
}

/// Decoder forward on graph variables. `img`, `dense`: `[T, C]`; `sparse`: `[n, C]`;
/// `pe`: `[T, C]` grid positional encoding. Returns flat voxel logits `[V]`.
#[allow(clippy::too_many_arguments)]
pub fn decode_var<'t>(
    s: &Scope<'_, '_, 't>,
    cfg: &DecoderConfig,
    img: &Var<'t>,
    grid: Dims,
    sparse: &Var<'t>,
    dense: &Var<'t>,
    pe: &Tensor,
) -> Var<'t> {
    let tape = s.tape();
    let key_pe = tape.constant(pe.clone());
    let token_pe = Var::concat0(&[s.var("output_token"), *sparse]);
    let mut queries = token_pe;
    let mut keys = img.add(dense);
    for i in 0..cfg.depth {
        let b = s.sub(&format!("blocks.{i}"));
        let q = queries.add(&token_pe);
        queries = layer_norm(&b.sub("norm1"), &queries.add(&attention2(&b.sub("self_attn"), &q, &q, &queries, cfg.heads, None)));
        let q = queries.add(&token_pe);
        let k = keys.add(&key_pe);
        queries = layer_norm(&b.sub("norm2"), &queries.add(&attention2(&b.sub("cross_t2i"), &q, &k, &keys, cfg.heads, None)));
        queries = layer_norm(&b.sub("norm3"), &queries.add(&mlp(&b.sub("mlp"), &queries)));
        let q = queries.add(&token_pe);
        let k = keys.add(&key_pe);
        keys = layer_norm(&b.sub("norm4"), &keys.add(&attention2(&b.sub("cross_i2t"), &k, &q, &queries, cfg.heads, None)));
    }
    let q = queries.add(&token_pe);
    let k = keys.add(&key_pe);
    queries = layer_norm(&s.sub("final_norm"), &queries.add(&attention2(&s.sub("final_attn"), &q, &k, &keys, cfg.heads, None)));

    let mut x = keys;
    let mut dims = grid;
    for i in 0..cfg.upscale_stages {
        x = depth_to_space(&linear(&s.sub(&format!("upscale.{i}")), &x), dims, 2);
        dims = dims.map(|d| d * 2);
        if i == 0 {
            x = layer_norm(&s.sub("upscale_norm"), &x);
        }
        x = x.gelu();
    }
    let out_token = queries.narrow0(0, 1);
    let h = mlp(&s.sub("hyper"), &out_token); // [1, c_out]
    let v = x.shape()[0];
    x.matmul(&h.t()).reshape(&[v])
}

/// Binary mask of strictly positive logits.
pub fn threshold(dims: Dims, logits: &[f64]) -> Result<Mask> {
    Mask::new(dims, logits.iter().map(|&l| (l > 0.0) as u8).collect())
}

/// Decodes a full-resolution mask. Returns logits of shape `[D, H, W]` and the mask.
pub fn decode(
    img: &EmbeddingGrid,
    sparse: &TokenSet,
    dense: &DensePromptGrid,
    cfg: &DecoderConfig,
    params: &ParamStore,
) -> Result<(Tensor, Mask)> {
    cfg.validate(img.token_size)?;
    if dense.dims != img.dims || dense.data.shape() != img.data.shape() {
        return Err(Error::Shape(format!(
            "dense prompt {:?}{:?} vs image embedding {:?}{:?}",
            dense.dims,
            dense.data.shape(),
            img.dims,
            img.data.shape()
        )));
    }
    if img.channels() != cfg.embed_dim || sparse.tokens.shape()[1] != cfg.embed_dim {
        return Err(Error::Shape(format!(
            "decoder width {} vs embedding {} / tokens {}",
            cfg.embed_dim,
            img.channels(),
            sparse.tokens.shape()[1]
        )));
    }
    let tape = Tape::new();
    let binder = Binder::frozen(params, &tape);
    let logits = decode_var(
        &binder.scope("decoder"),
        cfg,
        &tape.constant(img.data.clone()),
        img.dims,
        &tape.constant(sparse.tokens.clone()),
        &tape.constant(dense.data.clone()),
        &grid_pe(params, img.dims),
    );
    let dims = img.dims.map(|d| d * img.token_size);
    let logits = logits.value().as_ref().clone().reshape(&dims);
    let mask = threshold(dims, logits.data())?;
    Ok((logits, mask))
}
