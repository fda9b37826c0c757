//! 3-D ViT image encoder: strided patch embedding, additive learned position
//! embedding, and pre-norm transformer blocks with 3-D relative position bias.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{attention2, init_attention, init_mlp, layer_norm, linear, mlp, space_to_depth};
use crate::params::{Binder, ParamStore, Scope};
use crate::tensor::Tensor;
use crate::volcore::{Dims, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub token_size: usize,
    pub mlp_ratio: f64,
    /// Largest token-grid extent per axis the position tables cover.
    pub max_grid: usize,
    pub rel_pos: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { embed_dim: 96, depth: 4, heads: 4, token_size: 4, mlp_ratio: 4.0, max_grid: 32, rel_pos: true }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.token_size == 0 || self.max_grid == 0 {
            return Err(Error::InvalidArgument("token_size and max_grid must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    /// Token grid for a volume of `dims`, or an error when not divisible.
    pub fn grid_dims(&self, dims: Dims) -> Result<Dims> {
        let p = self.token_size;
        if dims.iter().any(|&d| d == 0 || d % p != 0) {
            return Err(Error::IndivisibleDims { dims, token_size: p });
        }
        let g = dims.map(|d| d / p);
        if g.iter().any(|&e| e > self.max_grid) {
            return Err(Error::InvalidArgument(format!(
                "token grid {g:?} exceeds max_grid {}",
                self.max_grid
            )));
        }
        Ok(g)
    }
}

/// Dense per-token features, channels-last: `data` is `[D'·H'·W', C]`, z-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrid {
    pub dims: Dims,
    pub token_size: usize,
    pub data: Tensor,
}

impl EmbeddingGrid {
    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    /// `(C, D', H', W')`.
    pub fn shape(&self) -> [usize; 4] {
        [self.channels(), self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn tokens(&self) -> usize {
        self.dims.iter().product()
    }
}

pub fn init_encoder(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) {
    let c = cfg.embed_dim;
    let p3 = cfg.token_size.pow(3);
    store.init_linear(seed, "encoder.patch_embed", p3, c);
    for axis in ["z", "y", "x"] {
        store.init_normal(seed, &format!("encoder.pos_embed.{axis}"), &[cfg.max_grid, c], 0.02);
    }
    let table = 2 * cfg.max_grid - 1;
    for i in 0..cfg.depth {
        let b = format!("encoder.blocks.{i}");
        store.init_layer_norm(&format!("{b}.norm1"), c);
        init_attention(store, seed, &format!("{b}.attn"), c, c, c, c, false);
        if cfg.rel_pos {
            for axis in ["z", "y", "x"] {
                store.init_normal(seed, &format!("{b}.rel_pos.{axis}"), &[cfg.heads, table], 0.02);
            }
        }
        store.init_layer_norm(&format!("{b}.norm2"), c);
        init_mlp(store, seed, &format!("{b}.mlp"), c, cfg.hidden(), c);
    }
}

type IndexKey = (Dims, usize, usize);

thread_local! {
    static REL_INDEX: RefCell<HashMap<IndexKey, Rc<[Rc<Vec<usize>>; 3]>>> = RefCell::new(HashMap::new());
}

/// Flat gather indices into each `[heads, 2M-1]` table, shaped `[heads, T, T]`.
fn rel_indices(dims: Dims, max_grid: usize, heads: usize) -> Rc<[Rc<Vec<usize>>; 3]> {
    REL_INDEX.with(|cache| {
        cache
            .borrow_mut()
            .entry((dims, max_grid, heads))
            .or_insert_with(|| {
                let t: usize = dims.iter().product();
                let coords: Vec<[usize; 3]> = (0..t)
                    .map(|i| [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]])
                    .collect();
                let width = 2 * max_grid - 1;
                let build = |axis: usize| {
                    let mut idx = Vec::with_capacity(heads * t * t);
                    for h in 0..heads {
                        for ci in &coords {
                            for cj in &coords {
                                let delta = ci[axis] as isize - cj[axis] as isize;
                                idx.push(h * width + (delta + max_grid as isize - 1) as usize);
                            }
                        }
                    }
                    Rc::new(idx)
                };
                Rc::new([build(0), build(1), build(2)])
            })
            .clone()
    })
}

fn rel_bias_var<'t>(s: &Scope<'_, '_, 't>, dims: Dims, cfg: &EncoderConfig) -> Var<'t> {
    let t: usize = dims.iter().product();
    let idx = rel_indices(dims, cfg.max_grid, cfg.heads);
    let shape = [cfg.heads, t, t];
    let z = s.var("z").gather(idx[0].clone(), &shape);
    let y = s.var("y").gather(idx[1].clone(), &shape);
    let x = s.var("x").gather(idx[2].clone(), &shape);
    z.add(&y).add(&x)
}

/// Relative position bias of one block, evaluated for a token grid.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    /// Per-axis tables restricted to the deltas the grid can produce: `[heads, 2·extent−1]`.
    pub tables: [Tensor; 3],
    /// `[heads, T, T]`, `bias[h, i, j] = z[Δz] + y[Δy] + x[Δx]`.
    pub bias: Tensor,
}

pub fn rel_pos_bias(
    dims: Dims,
    params: &ParamStore,
    cfg: &EncoderConfig,
    block: usize,
) -> Result<RelPosBias> {
    if dims.iter().any(|&e| e == 0 || e > cfg.max_grid) {
        return Err(Error::InvalidArgument(format!("grid {dims:?} outside 1..={}", cfg.max_grid)));
    }
    let prefix = format!("encoder.blocks.{block}.rel_pos");
    let tape = Tape::new();
    let binder = Binder::frozen(params, &tape);
    let s = binder.scope(prefix.clone());
    for a in ["z", "y", "x"] {
        if !s.has(a) {
            return Err(Error::MissingParam(format!("{prefix}.{a}")));
        }
    }
    let bias = rel_bias_var(&s, dims, cfg).value().as_ref().clone();
    let m = cfg.max_grid;
    let tables = [0usize, 1, 2].map(|axis| {
        let full = params.get(&format!("{prefix}.{}", ["z", "y", "x"][axis])).unwrap();
        let e = dims[axis];
        let width = 2 * m - 1;
        let mut data = Vec::with_capacity(cfg.heads * (2 * e - 1));
        for h in 0..cfg.heads {
            data.extend_from_slice(&full.data()[h * width + m - e..h * width + m + e - 1]);
        }
        Tensor::from_parts(vec![cfg.heads, 2 * e - 1], data)
    });
    Ok(RelPosBias { tables, bias })
}

/// Encoder forward on a `[D·H·W, 1]` normalized-intensity variable.
pub fn encode<'t>(s: &Scope<'_, '_, 't>, cfg: &EncoderConfig, voxels: &Var<'t>, dims: Dims) -> Result<Var<'t>> {
    let grid = cfg.grid_dims(dims)?;
    let p = cfg.token_size;
    let patches = space_to_depth(voxels, dims, p);
    let mut x = linear(&s.sub("patch_embed"), &patches);
    x = x.add(&abs_pos_embed(&s.sub("pos_embed"), grid));
    for i in 0..cfg.depth {
        let b = s.sub(&format!("blocks.{i}"));
        let bias = if cfg.rel_pos { Some(rel_bias_var(&b.sub("rel_pos"), grid, cfg)) } else { None };
        let h = layer_norm(&b.sub("norm1"), &x);
        x = x.add(&attention2(&b.sub("attn"), &h, &h, &h, cfg.heads, bias.as_ref()));
        let h = layer_norm(&b.sub("norm2"), &x);
        x = x.add(&mlp(&b.sub("mlp"), &h));
    }
    Ok(x)
}

/// `pe[z,y,x] = Z[z] + Y[y] + X[x]` flattened z-major to `[T, C]`.
fn abs_pos_embed<'t>(s: &Scope<'_, '_, 't>, grid: Dims) -> Var<'t> {
    let [d, h, w] = grid;
    let zt = s.var("z");
    let c = zt.shape()[1];
    let idx = |axis: usize| -> Rc<Vec<usize>> {
        let mut v = Vec::with_capacity(d * h * w * c);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let row = [z, y, x][axis];
                    v.extend((0..c).map(|k| row * c + k));
                }
            }
        }
        Rc::new(v)
    };
    let shape = [d * h * w, c];
    s.var("z")
        .gather(idx(0), &shape)
        .add(&s.var("y").gather(idx(1), &shape))
        .add(&s.var("x").gather(idx(2), &shape))
}

pub fn volume_var<'t>(tape: &'t Tape, v: &Volume) -> Var<'t> {
    let n = v.data().len();
    tape.constant(Tensor::from_parts(vec![n, 1], v.data().iter().map(|&x| x as f64).collect()))
}

/// Runs the encoder once, without gradients.
pub fn embed_volume(v: &Volume, cfg: &EncoderConfig, params: &ParamStore) -> Result<EmbeddingGrid> {
    cfg.validate()?;
    let grid = cfg.grid_dims(v.dims())?;
    let tape = Tape::new();
    let binder = Binder::frozen(params, &tape);
    let out = encode(&binder.scope("encoder"), cfg, &volume_var(&tape, v), v.dims())?;
    Ok(EmbeddingGrid { dims: grid, token_size: cfg.token_size, data: out.value().as_ref().clone() })
}
