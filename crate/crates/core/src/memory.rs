//! FIFO memory bank of past interactions and the memory-attention block that
//! conditions the image embedding on it.
//!
//! Each memory holds the click tokens of one interaction and the mask embedding
//! after it. Memory tensors are stored rounded to `f32` and enter the graph as
//! constants: no gradient flows into banked memories.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Entry};
use crate::autodiff::{Tape, Var};
use crate::encoder::EmbeddingGrid;
use crate::error::{Error, Result};
use crate::nn::{attention, attention2, init_attention, init_mlp, layer_norm, linear, mlp};
use crate::params::{Binder, ParamStore, Scope};
use crate::prompts::{grid_pe, DensePromptGrid, TokenSet};
use crate::tensor::Tensor;
use crate::volcore::{Dims, Polarity};

/// Which interaction embeddings the bank keeps and attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    None,
    Sparse,
    Dense,
    SparseDense,
}

impl MemoryMode {
    pub const ALL: [MemoryMode; 4] =
        [MemoryMode::None, MemoryMode::Sparse, MemoryMode::Dense, MemoryMode::SparseDense];

    pub fn as_str(self) -> &'static str {
        match self {
            MemoryMode::None => "none",
            MemoryMode::Sparse => "sparse",
            MemoryMode::Dense => "dense",
            MemoryMode::SparseDense => "sparse_dense",
        }
    }

    pub fn uses_sparse(self) -> bool {
        matches!(self, MemoryMode::Sparse | MemoryMode::SparseDense)
    }

    pub fn uses_dense(self) -> bool {
        matches!(self, MemoryMode::Dense | MemoryMode::SparseDense)
    }
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MemoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MemoryMode::None),
            "sparse" => Ok(MemoryMode::Sparse),
            "dense" => Ok(MemoryMode::Dense),
            "sparse_dense" | "sparse+dense" => Ok(MemoryMode::SparseDense),
            other => Err(Error::InvalidArgument(format!("unknown memory mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub mode: MemoryMode,
    /// Bank capacity N.
    pub capacity: usize,
    /// Width of the memory-attention layers.
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { mode: MemoryMode::SparseDense, capacity: 60, dim: 32, heads: 4, mlp_ratio: 2.0 }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode != MemoryMode::None && self.capacity == 0 {
            return Err(Error::InvalidArgument("memory capacity must be positive".into()));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "memory dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

/// One interaction's snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Memory {
    pub sparse: TokenSet,
    pub dense: DensePromptGrid,
    pub interaction_index: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    mode: MemoryMode,
    entries: VecDeque<Memory>,
}

impl MemoryBank {
    pub fn new(capacity: usize, mode: MemoryMode) -> Self {
        Self { capacity, mode, entries: VecDeque::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn mode(&self) -> MemoryMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &Memory> {
        self.entries.iter()
    }

    pub fn interaction_indices(&self) -> Vec<u64> {
        self.entries.iter().map(|m| m.interaction_index).collect()
    }

    /// Appends `m`, evicting the oldest entries beyond capacity. A no-op when the
    /// bank is disabled.
    pub fn push(&mut self, mut m: Memory) -> Result<()> {
        if self.mode == MemoryMode::None || self.capacity == 0 {
            return Ok(());
        }
        if self.entries.iter().any(|e| e.interaction_index == m.interaction_index) {
            return Err(Error::DuplicateInteraction(m.interaction_index));
        }
        m.sparse.tokens = m.sparse.tokens.round_to_f32();
        m.dense.data = m.dense.data.round_to_f32();
        self.entries.push_back(m);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn write_archive(&self, a: &mut Archive, prefix: &str) {
        a.put_meta(format!("{prefix}.capacity"), self.capacity.to_string());
        a.put_meta(format!("{prefix}.mode"), self.mode.as_str());
        a.put_meta(format!("{prefix}.len"), self.entries.len().to_string());
        for (i, m) in self.entries.iter().enumerate() {
            let p = format!("{prefix}.{i}");
            a.put_tensor(format!("{p}.sparse_tokens"), &m.sparse.tokens);
            let n = m.sparse.len();
            a.put(
                format!("{p}.positions"),
                Entry::I64 {
                    shape: vec![n, 3],
                    data: m.sparse.positions.iter().flatten().map(|&x| x as i64).collect(),
                },
            );
            a.put(
                format!("{p}.polarities"),
                Entry::I64 {
                    shape: vec![n],
                    data: m.sparse.polarities.iter().map(|p| p.sign() as i64).collect(),
                },
            );
            a.put_tensor(format!("{p}.dense"), &m.dense.data);
            a.put(
                format!("{p}.dense_dims"),
                Entry::I64 { shape: vec![3], data: m.dense.dims.iter().map(|&d| d as i64).collect() },
            );
            a.put(
                format!("{p}.interaction_index"),
                Entry::I64 { shape: vec![1], data: vec![m.interaction_index as i64] },
            );
        }
    }

    pub fn read_archive(a: &Archive, prefix: &str) -> Result<Self> {
        let parse = |k: &str| -> Result<usize> {
            a.meta(&format!("{prefix}.{k}"))?
                .parse()
                .map_err(|_| Error::Archive(format!("bad {prefix}.{k}")))
        };
        let capacity = parse("capacity")?;
        let len = parse("len")?;
        let mode: MemoryMode = a.meta(&format!("{prefix}.mode"))?.parse()?;
        let mut bank = MemoryBank::new(capacity, mode);
        for i in 0..len {
            let p = format!("{prefix}.{i}");
            let tokens = a.tensor(&format!("{p}.sparse_tokens"))?;
            let (_, pos) = a.i64s(&format!("{p}.positions"))?;
            let (_, pol) = a.i64s(&format!("{p}.polarities"))?;
            let positions: Vec<[usize; 3]> =
                pos.chunks_exact(3).map(|c| [c[0] as usize, c[1] as usize, c[2] as usize]).collect();
            let polarities = pol
                .iter()
                .map(|&s| match s {
                    1 => Ok(Polarity::Positive),
                    -1 => Ok(Polarity::Negative),
                    other => Err(Error::Archive(format!("bad polarity {other}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if positions.len() != polarities.len() || tokens.shape()[0] != positions.len() {
                return Err(Error::Archive(format!("inconsistent token set in {p}")));
            }
            let dense = a.tensor(&format!("{p}.dense"))?;
            let (_, dd) = a.i64s(&format!("{p}.dense_dims"))?;
            if dd.len() != 3 {
                return Err(Error::Archive(format!("bad dense dims in {p}")));
            }
            let dims = [dd[0] as usize, dd[1] as usize, dd[2] as usize];
            let (_, idx) = a.i64s(&format!("{p}.interaction_index"))?;
            let memory = Memory {
                sparse: TokenSet { tokens, positions, polarities },
                dense: DensePromptGrid { dims, data: dense },
                interaction_index: *idx.first().ok_or_else(|| Error::Archive("empty index".into()))? as u64,
            };
            bank.entries.push_back(memory);
        }
        if bank.entries.len() > bank.capacity && mode != MemoryMode::None {
            return Err(Error::Archive("bank holds more entries than its capacity".into()));
        }
        Ok(bank)
    }
}

/// Registers the parameters memory attention needs for `cfg.mode`.
///
/// The projections that write into the image embedding start at zero, so an
/// untrained memory module leaves the embedding untouched.
pub fn init_memory(store: &mut ParamStore, cfg: &MemoryConfig, embed_dim: usize, seed: u64) {
    let (c, d) = (embed_dim, cfg.dim);
    match cfg.mode {
        MemoryMode::None => {}
        MemoryMode::Sparse => {
            store.init_layer_norm("memory.sparse_cross_norm", c);
            init_attention(store, seed, "memory.sparse_cross", c, c, d, c, true);
        }
        MemoryMode::Dense => {
            store.init_linear(seed, "memory.dense_in", c, d);
            init_conv_block(store, cfg, "memory.dense_block", seed);
            store.init_linear_zero("memory.dense_out", d, c);
        }
        MemoryMode::SparseDense => {
            store.init_linear(seed, "memory.sparse_in", c, d);
            store.init_layer_norm("memory.sparse_self_norm", d);
            init_attention(store, seed, "memory.sparse_self", d, d, d, d, false);
            store.init_linear(seed, "memory.dense_in", c, d);
            init_conv_block(store, cfg, "memory.dense_block", seed);
            store.init_linear_zero("memory.dense_out", d, c);
            store.init_layer_norm("memory.mem_cross_norm_q", d);
            store.init_layer_norm("memory.mem_cross_norm_kv", d);
            init_attention(store, seed, "memory.mem_cross", d, d, d, d, false);
            store.init_layer_norm("memory.image_cross_norm", c);
            init_attention(store, seed, "memory.image_cross", c, d, d, c, true);
        }
    }
}

pub fn init_conv_block(store: &mut ParamStore, cfg: &MemoryConfig, name: &str, seed: u64) {
    let d = cfg.dim;
    store.init_layer_norm(&format!("{name}.norm1"), d);
    init_attention(store, seed, &format!("{name}.attn"), d, d, d, d, false);
    store.init_layer_norm(&format!("{name}.norm2"), d);
    init_mlp(store, seed, &format!("{name}.mlp"), d, cfg.hidden(), d);
    store.init_layer_norm(&format!("{name}.pool_norm"), d);
    store.init_linear(seed, &format!("{name}.pool"), d, 1);
}

/// Names of every projection that writes into a residual stream of the memory module.
pub fn output_projection_names(store: &ParamStore) -> Vec<String> {
    store
        .names()
        .into_iter()
        .filter(|n| {
            n.starts_with("memory.")
                && (n.contains(".out.") || n.contains("dense_out.") || n.contains(".mlp.fc2."))
        })
        .collect()
}

/// Zeroes every memory output projection, making `condition` the identity.
pub fn zero_output_projections(store: &mut ParamStore) {
    for n in output_projection_names(store) {
        store.fill(&n, 0.0).expect("name listed from the store");
    }
}

/// Convolutional transformer over a `[k, T, d]` stack of grids.
///
/// Per spatial location the `k` stacked vectors self-attend (1³-convolution
/// projections, i.e. per-location linear maps), pass through a per-location MLP,
/// and are reduced to one vector by learned attention pooling. Without positional
/// encoding across the stack, the result is invariant to stack order.
pub fn conv_block<'t>(s: &Scope<'_, '_, 't>, heads: usize, stack: &Var<'t>) -> Var<'t> {
    let sh = stack.shape();
    let (k, t, d) = (sh[0], sh[1], sh[2]);
    let mut x = stack.permute(&[1, 0, 2]); // [T, k, d]
    let h = layer_norm(&s.sub("norm1"), &x);
    x = x.add(&attention(&s.sub("attn"), &h, &h, &h, heads, None));
    let h = layer_norm(&s.sub("norm2"), &x);
    x = x.add(&mlp(&s.sub("mlp"), &h));
    let scores = linear(&s.sub("pool"), &layer_norm(&s.sub("pool_norm"), &x)); // [T, k, 1]
    let weights = scores.reshape(&[t, 1, k]).softmax_last();
    weights.bmm(&x, false, false).reshape(&[t, d])
}

/// Stand-alone evaluation of a convolutional transformer block on concrete grids.
pub fn conv_transformer_block(
    stack: &[DensePromptGrid],
    params: &ParamStore,
    prefix: &str,
    heads: usize,
) -> Result<DensePromptGrid> {
    let first = stack.first().ok_or_else(|| Error::InvalidArgument("empty stack".into()))?;
    for g in stack {
        if g.dims != first.dims || g.data.shape() != first.data.shape() {
            return Err(Error::Shape(format!(
                "stack grids differ: {:?}{:?} vs {:?}{:?}",
                g.dims,
                g.data.shape(),
                first.dims,
                first.data.shape()
            )));
        }
    }
    let tape = Tape::new();
    let binder = Binder::frozen(params, &tape);
    let parts: Vec<&Tensor> = stack.iter().map(|g| &g.data).collect();
    let t = first.data.shape()[0];
    let d = first.data.shape()[1];
    let stacked = tape.constant(Tensor::concat0(&parts).reshape(&[stack.len(), t, d]));
    let out = conv_block(&binder.scope(prefix), heads, &stacked);
    Ok(DensePromptGrid { dims: first.dims, data: out.value().as_ref().clone() })
}

/// Memory attention on graph variables.
///
/// `img`, `cur_dense`: `[T, C]`; `cur_sparse`: `[n, C]`. Returns `img` itself when
/// the bank is empty or disabled.
#[allow(clippy::too_many_arguments)]
pub fn condition_var<'t>(
    s: &Scope<'_, '_, 't>,
    cfg: &MemoryConfig,
    img: Var<'t>,
    grid: Dims,
    bank: &MemoryBank,
    cur_sparse: &Var<'t>,
    cur_dense: &Var<'t>,
    pe: &Tensor,
) -> Result<Var<'t>> {
    if cfg.mode == MemoryMode::None || bank.is_empty() {
        return Ok(img);
    }
    let tape = s.tape();
    let img_shape = img.shape();
    let t = img_shape[0];
    for m in bank.entries() {
        if m.dense.dims != grid || m.dense.data.shape() != img_shape.as_slice() {
            return Err(Error::Shape(format!(
                "memory {} grid {:?}{:?} vs image {:?}{:?}",
                m.interaction_index,
                m.dense.dims,
                m.dense.data.shape(),
                grid,
                img_shape
            )));
        }
    }
    let sparse_stack = || -> Option<Var<'t>> {
        let mut parts: Vec<Var<'t>> = bank
            .entries()
            .filter(|m| !m.sparse.is_empty())
            .map(|m| tape.constant(m.sparse.tokens.clone()))
            .collect();
        if cur_sparse.shape()[0] > 0 {
            parts.push(*cur_sparse);
        }
        (!parts.is_empty()).then(|| Var::concat0(&parts))
    };
    let pe_var = tape.constant(pe.clone());
    let dense_stack = || -> Var<'t> {
        let mut parts: Vec<Var<'t>> =
            bank.entries().map(|m| tape.constant(m.dense.data.clone())).collect();
        parts.push(*cur_dense);
        let k = parts.len();
        let c = pe.shape()[1];
        let stacked = Var::concat0(&parts).reshape(&[k, t, c]);
        let projected = linear(&s.sub("dense_in"), &stacked.add_bcast(&pe_var));
        projected.reshape(&[k, t, cfg.dim])
    };
    match cfg.mode {
        MemoryMode::None => Ok(img),
        MemoryMode::Sparse => {
            let Some(tokens) = sparse_stack() else { return Ok(img) };
            let q = layer_norm(&s.sub("sparse_cross_norm"), &img).add(&pe_var);
            Ok(img.add(&attention2(&s.sub("sparse_cross"), &q, &tokens, &tokens, cfg.heads, None)))
        }
        MemoryMode::Dense => {
            let pooled = conv_block(&s.sub("dense_block"), cfg.heads, &dense_stack());
            Ok(img.add(&linear(&s.sub("dense_out"), &pooled)))
        }
        MemoryMode::SparseDense => {
            // (1) self-attention within each memory stack
            let sparse = sparse_stack().map(|tokens| {
                let x = linear(&s.sub("sparse_in"), &tokens);
                let h = layer_norm(&s.sub("sparse_self_norm"), &x);
                x.add(&attention2(&s.sub("sparse_self"), &h, &h, &h, cfg.heads, None))
            });
            let dense = conv_block(&s.sub("dense_block"), cfg.heads, &dense_stack());
            // (2) dense output added to the image embedding
            let img1 = img.add(&linear(&s.sub("dense_out"), &dense));
            // (3) dense memory queries the sparse memory, then the image queries the result
            let memory = match sparse {
                Some(sp) => {
                    let q = layer_norm(&s.sub("mem_cross_norm_q"), &dense);
                    let kv = layer_norm(&s.sub("mem_cross_norm_kv"), &sp);
                    dense.add(&attention2(&s.sub("mem_cross"), &q, &kv, &kv, cfg.heads, None))
                }
                None => dense,
            };
            let q = layer_norm(&s.sub("image_cross_norm"), &img1).add(&pe_var);
            Ok(img1.add(&attention2(&s.sub("image_cross"), &q, &memory, &memory, cfg.heads, None)))
        }
    }
}

/// Conditions a concrete image embedding on the bank and the current interaction.
pub fn condition(
    img: &EmbeddingGrid,
    bank: &MemoryBank,
    current: (&TokenSet, &DensePromptGrid),
    cfg: &MemoryConfig,
    params: &ParamStore,
) -> Result<EmbeddingGrid> {
    if cfg.mode == MemoryMode::None || bank.is_empty() {
        return Ok(img.clone());
    }
    if current.1.dims != img.dims || current.1.data.shape() != img.data.shape() {
        return Err(Error::Shape(format!(
            "current dense prompt {:?} vs image {:?}",
            current.1.data.shape(),
            img.data.shape()
        )));
    }
    let tape = Tape::new();
    let binder = Binder::frozen(params, &tape);
    let out = condition_var(
        &binder.scope("memory"),
        cfg,
        tape.constant(img.data.clone()),
        img.dims,
        bank,
        &tape.constant(current.0.tokens.clone()),
        &tape.constant(current.1.data.clone()),
        &grid_pe(params, img.dims),
    )?;
    Ok(EmbeddingGrid { dims: img.dims, token_size: img.token_size, data: out.value().as_ref().clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{init_prompts, PromptConfig};
    use crate::volcore::Polarity;
    use proptest::prelude::*;

    fn dummy(i: u64) -> Memory {
        Memory {
            sparse: TokenSet::empty(2),
            dense: DensePromptGrid { dims: [1, 1, 1], data: Tensor::full(&[1, 2], i as f64) },
            interaction_index: i,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut bank = MemoryBank::new(2, MemoryMode::SparseDense);
        for i in 1..=3 {
            bank.push(dummy(i)).unwrap();
        }
        assert_eq!(bank.interaction_indices(), vec![2, 3]);
        assert_eq!(MemoryConfig::default().capacity, 60);
    }

    #[test]
    fn disabled_bank_ignores_pushes() {
        let mut bank = MemoryBank::new(5, MemoryMode::None);
        bank.push(dummy(1)).unwrap();
        assert!(bank.is_empty());
    }

    #[test]
    fn duplicate_index_rejected() {
        let mut bank = MemoryBank::new(5, MemoryMode::Dense);
        bank.push(dummy(1)).unwrap();
        assert!(matches!(bank.push(dummy(1)), Err(Error::DuplicateInteraction(1))));
    }

    proptest! {
        #[test]
        fn fifo_matches_last_n_slice(cap in 1usize..12, k in 0usize..40) {
            let mut bank = MemoryBank::new(cap, MemoryMode::Sparse);
            for i in 0..k as u64 {
                bank.push(dummy(i)).unwrap();
            }
            let all: Vec<u64> = (0..k as u64).collect();
            prop_assert_eq!(bank.interaction_indices(), all[k.saturating_sub(cap)..].to_vec());
        }
    }

    fn setup(mode: MemoryMode) -> (MemoryConfig, ParamStore) {
        let cfg = MemoryConfig { mode, capacity: 4, dim: 4, heads: 2, mlp_ratio: 2.0 };
        let mut store = ParamStore::new();
        init_prompts(&mut store, &PromptConfig { embed_dim: 6, token_size: 4, mask_hidden: 2 }, 0);
        init_memory(&mut store, &cfg, 6, 3);
        // make the untrained output projections non-trivial
        for n in output_projection_names(&store) {
            let t = crate::params::normal_tensor(9, &n, store.get(&n).unwrap().shape(), 0.3);
            store.insert(n, t);
        }
        (cfg, store)
    }

    fn random_grid(seed: u64, dims: Dims, c: usize) -> DensePromptGrid {
        let t = dims.iter().product();
        DensePromptGrid { dims, data: crate::params::normal_tensor(seed, "g", &[t, c], 1.0) }
    }

    fn token_set(seed: u64, n: usize, c: usize) -> TokenSet {
        TokenSet {
            tokens: crate::params::normal_tensor(seed, "t", &[n, c], 1.0),
            positions: vec![[0, 0, 0]; n],
            polarities: vec![Polarity::Positive; n],
        }
    }

    fn filled_bank(cfg: &MemoryConfig, dims: Dims, c: usize) -> MemoryBank {
        let mut bank = MemoryBank::new(cfg.capacity, cfg.mode);
        for i in 0..3 {
            bank.push(Memory { sparse: token_set(10 + i, 1 + i as usize, c), dense: random_grid(20 + i, dims, c), interaction_index: i })
                .unwrap();
        }
        bank
    }

    #[test]
    fn empty_bank_is_bit_exact_identity() {
        for mode in MemoryMode::ALL {
            let (cfg, store) = setup(mode);
            let dims = [2, 2, 1];
            let img = EmbeddingGrid { dims, token_size: 4, data: random_grid(1, dims, 6).data };
            let bank = MemoryBank::new(4, mode);
            let out = condition(&img, &bank, (&token_set(2, 1, 6), &random_grid(3, dims, 6)), &cfg, &store).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn active_modes_change_embedding_and_keep_shape() {
        for mode in [MemoryMode::Sparse, MemoryMode::Dense, MemoryMode::SparseDense] {
            let (cfg, store) = setup(mode);
            let dims = [2, 2, 1];
            let img = EmbeddingGrid { dims, token_size: 4, data: random_grid(1, dims, 6).data };
            let bank = filled_bank(&cfg, dims, 6);
            let out = condition(&img, &bank, (&token_set(2, 1, 6), &random_grid(3, dims, 6)), &cfg, &store).unwrap();
            assert_eq!(out.data.shape(), img.data.shape());
            assert_ne!(out.data, img.data, "{mode}");
        }
    }

    #[test]
    fn zero_output_projections_give_identity() {
        for mode in [MemoryMode::Sparse, MemoryMode::Dense, MemoryMode::SparseDense] {
            let (cfg, mut store) = setup(mode);
            zero_output_projections(&mut store);
            let dims = [2, 2, 1];
            let img = EmbeddingGrid { dims, token_size: 4, data: random_grid(1, dims, 6).data };
            let bank = filled_bank(&cfg, dims, 6);
            let out = condition(&img, &bank, (&token_set(2, 1, 6), &random_grid(3, dims, 6)), &cfg, &store).unwrap();
            assert_eq!(out.data, img.data, "{mode}");
        }
    }

    #[test]
    fn grid_shape_mismatch_is_an_error() {
        let (cfg, store) = setup(MemoryMode::Dense);
        let dims = [2, 2, 1];
        let img = EmbeddingGrid { dims, token_size: 4, data: random_grid(1, dims, 6).data };
        let bank = filled_bank(&cfg, [1, 2, 2], 6);
        let r = condition(&img, &bank, (&token_set(2, 1, 6), &random_grid(3, dims, 6)), &cfg, &store);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    /// Single head, width 2, one memory token, 1×1×1 grid: softmax over one key is 1,
    /// so the update is exactly the value projection of that token through `out`.
    #[test]
    fn sparse_single_token_hand_evaluation() {
        let cfg = MemoryConfig { mode: MemoryMode::Sparse, capacity: 2, dim: 2, heads: 1, mlp_ratio: 1.0 };
        let c = 2;
        let mut store = ParamStore::new();
        store.insert_buffer(crate::prompts::PE_GAUSSIAN, Tensor::zeros(&[3, 1]));
        init_memory(&mut store, &cfg, c, 0);
        let set = |s: &mut ParamStore, n: &str, v: Vec<f64>| {
            let shape = s.get(n).unwrap().shape().to_vec();
            s.insert(n, Tensor::new(shape, v).unwrap());
        };
        set(&mut store, "memory.sparse_cross.v.weight", vec![2.0, 0.0, 1.0, -1.0]);
        set(&mut store, "memory.sparse_cross.v.bias", vec![0.5, 0.0]);
        set(&mut store, "memory.sparse_cross.out.weight", vec![1.0, 0.0, 0.0, 1.0]);
        set(&mut store, "memory.sparse_cross.out.bias", vec![0.0, 0.0]);
        let token = [3.0, 4.0];
        let img = EmbeddingGrid { dims: [1, 1, 1], token_size: 4, data: Tensor::new(vec![1, 2], vec![0.25, -1.0]).unwrap() };
        let mut bank = MemoryBank::new(2, MemoryMode::Sparse);
        bank.push(Memory {
            sparse: TokenSet { tokens: Tensor::new(vec![1, 2], token.to_vec()).unwrap(), positions: vec![[0; 3]], polarities: vec![Polarity::Positive] },
            dense: DensePromptGrid { dims: [1, 1, 1], data: Tensor::zeros(&[1, 2]) },
            interaction_index: 0,
        })
        .unwrap();
        let cur_dense = DensePromptGrid { dims: [1, 1, 1], data: Tensor::zeros(&[1, 2]) };
        let out = condition(&img, &bank, (&TokenSet::empty(2), &cur_dense), &cfg, &store).unwrap();
        // v = token·W_v + b = [3·2 + 4·1 + 0.5, 3·0 + 4·(−1)] = [10.5, −4]
        assert_eq!(out.data.data(), &[0.25 + 10.5, -1.0 - 4.0]);
    }

    fn block_store(d: usize) -> (MemoryConfig, ParamStore) {
        let cfg = MemoryConfig { mode: MemoryMode::Dense, capacity: 4, dim: d, heads: 2, mlp_ratio: 2.0 };
        let mut store = ParamStore::new();
        init_conv_block(&mut store, &cfg, "blk", 5);
        (cfg, store)
    }

    #[test]
    fn conv_block_single_grid_identity_with_zero_outputs() {
        let (cfg, mut store) = block_store(4);
        for n in ["blk.attn.out.weight", "blk.attn.out.bias", "blk.mlp.fc2.weight", "blk.mlp.fc2.bias"] {
            store.fill(n, 0.0).unwrap();
        }
        let g = random_grid(7, [2, 1, 2], 4);
        let out = conv_transformer_block(std::slice::from_ref(&g), &store, "blk", cfg.heads).unwrap();
        assert_eq!(out.data, g.data);
    }

    #[test]
    fn conv_block_identical_copies_match_single() {
        let (cfg, store) = block_store(4);
        let g = random_grid(8, [2, 2, 1], 4);
        let one = conv_transformer_block(std::slice::from_ref(&g), &store, "blk", cfg.heads).unwrap();
        let three = conv_transformer_block(&[g.clone(), g.clone(), g], &store, "blk", cfg.heads).unwrap();
        for (a, b) in one.data.data().iter().zip(three.data.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_block_rejects_inconsistent_stack() {
        let (cfg, store) = block_store(4);
        let r = conv_transformer_block(&[random_grid(1, [2, 2, 1], 4), random_grid(2, [1, 2, 2], 4)], &store, "blk", cfg.heads);
        assert!(r.is_err());
        assert!(conv_transformer_block(&[], &store, "blk", cfg.heads).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn conv_block_is_permutation_invariant(seed in 0u64..1000, k in 2usize..6, swaps in proptest::collection::vec((0usize..6, 0usize..6), 1..6)) {
            let (cfg, store) = block_store(4);
            let grids: Vec<DensePromptGrid> = (0..k).map(|i| random_grid(seed * 10 + i as u64, [2, 1, 2], 4)).collect();
            let mut perm = grids.clone();
            for (a, b) in swaps {
                perm.swap(a % k, b % k);
            }
            let x = conv_transformer_block(&grids, &store, "blk", cfg.heads).unwrap();
            let y = conv_transformer_block(&perm, &store, "blk", cfg.heads).unwrap();
            for (a, b) in x.data.data().iter().zip(y.data.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
