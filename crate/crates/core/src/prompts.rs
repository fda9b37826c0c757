//! Sparse (click) and dense (mask) prompt encoders.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{fourier_features, grid_centres, linear, space_to_depth};
use crate::params::{normal_tensor, Binder, ParamStore, Scope};
use crate::tensor::Tensor;
use crate::volcore::{Click, Dims, Mask, Polarity};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub embed_dim: usize,
    pub token_size: usize,
    /// Channels of the intermediate mask-downscaling convolutions.
    pub mask_hidden: usize,
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("prompt embed_dim must be even".into()));
        }
        if !self.token_size.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "token size {} must be a power of two for the mask encoder",
                self.token_size
            )));
        }
        Ok(())
    }

    fn halvings(&self) -> usize {
        self.token_size.trailing_zeros() as usize
    }
}

/// Encoded clicks of one interaction: `tokens` is `[n, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub tokens: Tensor,
    pub positions: Vec<[usize; 3]>,
    pub polarities: Vec<Polarity>,
}

impl TokenSet {
    pub fn empty(dim: usize) -> Self {
        Self { tokens: Tensor::zeros(&[0, dim]), positions: Vec::new(), polarities: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Mask embedding aligned with the image embedding grid: `data` is `[T, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensePromptGrid {
    pub dims: Dims,
    pub data: Tensor,
}

pub const PE_GAUSSIAN: &str = "prompts.pe_gaussian";
const PE_SEED: u64 = 0x5eed_f00d;

pub fn init_prompts(store: &mut ParamStore, cfg: &PromptConfig, seed: u64) {
    let c = cfg.embed_dim;
    // Fixed-seed buffer, independent of the model seed.
    store.insert_buffer(PE_GAUSSIAN, normal_tensor(PE_SEED, PE_GAUSSIAN, &[3, c / 2], 1.0));
    store.init_normal(seed, "prompts.point.polarity", &[2, c], 1.0);
    let mut ch = 1;
    for i in 0..cfg.halvings() {
        store.init_linear(seed, &format!("prompts.mask.down{i}"), 8 * ch, cfg.mask_hidden);
        ch = cfg.mask_hidden;
    }
    store.init_linear(seed, "prompts.mask.proj", ch, c);
}

fn normalized(p: [usize; 3], dims: Dims) -> [f64; 3] {
    std::array::from_fn(|a| (p[a] as f64 + 0.5) / dims[a] as f64)
}

/// Fourier encoding of the token-cell centres of a grid, `[T, C]`.
pub fn grid_pe(params: &ParamStore, grid: Dims) -> Tensor {
    let g = params.get(PE_GAUSSIAN).expect("prompt encoder buffer missing");
    fourier_features(g, &grid_centres(grid))
}

fn check_clicks(clicks: &[Click], dims: Dims) -> Result<()> {
    clicks.iter().try_for_each(|c| c.check_bounds(dims))
}

/// `[n, C]` click tokens: positional encoding plus the learned polarity embedding.
pub fn click_tokens<'t>(s: &Scope<'_, '_, 't>, clicks: &[Click], dims: Dims) -> Result<Var<'t>> {
    check_clicks(clicks, dims)?;
    let gaussian = s.var("pe_gaussian").value();
    let coords: Vec<[f64; 3]> = clicks.iter().map(|c| normalized(c.position, dims)).collect();
    let pe = fourier_features(&gaussian, &coords);
    let table = s.var("point.polarity");
    let c = table.shape()[1];
    let idx: Vec<usize> = clicks
        .iter()
        .flat_map(|k| {
            let row = match k.polarity {
                Polarity::Positive => 0,
                Polarity::Negative => 1,
            };
            (0..c).map(move |j| row * c + j)
        })
        .collect();
    let emb = table.gather(Rc::new(idx), &[clicks.len(), c]);
    Ok(s.tape().constant(pe).add(&emb))
}

pub fn encode_clicks(clicks: &[Click], dims: Dims, params: &ParamStore) -> Result<TokenSet> {
    let tape = Tape::new();
    let binder = Binder::frozen(params, &tape);
    let tokens = click_tokens(&binder.scope("prompts"), clicks, dims)?;
    Ok(TokenSet {
        tokens: tokens.value().as_ref().clone(),
        positions: clicks.iter().map(|c| c.position).collect(),
        polarities: clicks.iter().map(|c| c.polarity).collect(),
    })
}

pub fn mask_var<'t>(tape: &'t Tape, m: &Mask) -> Var<'t> {
    let n = m.data().len();
    tape.constant(Tensor::from_parts(vec![n, 1], m.data().iter().map(|&b| b as f64).collect()))
}

/// Strided-convolution downscaling of a `[V, 1]` mask to the token grid, `[T, C]`.
pub fn mask_embed<'t>(s: &Scope<'_, '_, 't>, cfg: &PromptConfig, mask: &Var<'t>, dims: Dims) -> Result<Var<'t>> {
    let p = cfg.token_size;
    if dims.iter().any(|&d| d % p != 0) {
        return Err(Error::IndivisibleDims { dims, token_size: p });
    }
    let mut x = *mask;
    let mut cur = dims;
    for i in 0..cfg.halvings() {
        x = space_to_depth(&x, cur, 2);
        x = linear(&s.sub(&format!("mask.down{i}")), &x).gelu();
        cur = cur.map(|d| d / 2);
    }
    Ok(linear(&s.sub("mask.proj"), &x))
}

pub fn encode_mask(m: &Mask, target: Dims, cfg: &PromptConfig, params: &ParamStore) -> Result<DensePromptGrid> {
    let grid = m.dims().map(|d| d / cfg.token_size);
    if grid != target || m.dims().iter().any(|&d| d % cfg.token_size != 0) {
        return Err(Error::Shape(format!(
            "mask {:?} does not map onto embedding grid {target:?} at token size {}",
            m.dims(),
            cfg.token_size
        )));
    }
    let tape = Tape::new();
    let binder = Binder::frozen(params, &tape);
    let out = mask_embed(&binder.scope("prompts"), cfg, &mask_var(&tape, m), m.dims())?;
    Ok(DensePromptGrid { dims: target, data: out.value().as_ref().clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> PromptConfig {
        PromptConfig { embed_dim: 8, token_size: 4, mask_hidden: 4 }
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        init_prompts(&mut s, &cfg(), 2);
        s
    }

    #[test]
    fn empty_clicks_give_empty_tokens() {
        let t = encode_clicks(&[], [8; 3], &store()).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.tokens.shape(), &[0, 8]);
    }

    #[test]
    fn opposite_polarity_differs_by_embedding_difference() {
        let params = store();
        let pos = Click::new([1, 2, 3], Polarity::Positive);
        let neg = Click::new([1, 2, 3], Polarity::Negative);
        let t = encode_clicks(&[pos, neg, pos], [8; 3], &params).unwrap();
        let table = params.get("prompts.point.polarity").unwrap().data();
        for j in 0..8 {
            let diff = t.tokens.data()[j] - t.tokens.data()[8 + j];
            assert!((diff - (table[j] - table[8 + j])).abs() < 1e-12);
            assert_eq!(t.tokens.data()[j], t.tokens.data()[16 + j]);
        }
    }

    #[test]
    fn out_of_bounds_click_rejected() {
        let c = Click::new([8, 0, 0], Polarity::Positive);
        assert!(matches!(encode_clicks(&[c], [8; 3], &store()), Err(Error::ClickOutOfBounds { .. })));
    }

    #[test]
    fn zero_mask_zero_bias_gives_zero_grid() {
        let params = store();
        let g = encode_mask(&Mask::empty([32; 3]), [8; 3], &cfg(), &params).unwrap();
        assert_eq!(g.data.shape(), &[512, 8]);
        assert!(g.data.data().iter().all(|&x| x == 0.0));
        assert!(encode_mask(&Mask::empty([32; 3]), [4; 3], &cfg(), &params).is_err());
    }

    #[test]
    fn mask_encoder_is_translation_equivariant_by_token_steps() {
        // bias-free stack
        let mut params = store();
        for n in params.names() {
            if n.ends_with(".bias") {
                params.fill(&n, 0.0).unwrap();
            }
        }
        let dims = [16, 8, 8];
        let blob = |shift: usize| {
            Mask::from_fn(dims, |p| {
                p[0] >= 2 + shift && p[0] < 7 + shift && p[1] >= 1 && p[1] < 6 && p[2] >= 3 && p[2] < 7
            })
        };
        let a = encode_mask(&blob(0), [4, 2, 2], &cfg(), &params).unwrap();
        let b = encode_mask(&blob(4), [4, 2, 2], &cfg(), &params).unwrap();
        let c = 8;
        let row = 2 * 2 * c; // one step along D'
        for t in 0..3 * row {
            assert!((a.data.data()[t] - b.data.data()[t + row]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn click_encoding_is_permutation_equivariant(
            pts in proptest::collection::vec((0usize..8, 0usize..8, 0usize..8, any::<bool>()), 1..6),
            rot in 0usize..6,
        ) {
            let params = store();
            let clicks: Vec<Click> = pts.iter().map(|&(z, y, x, p)| {
                Click::new([z, y, x], if p { Polarity::Positive } else { Polarity::Negative })
            }).collect();
            let mut permuted = clicks.clone();
            let k = rot % clicks.len();
            permuted.rotate_left(k);
            let a = encode_clicks(&clicks, [8; 3], &params).unwrap();
            let b = encode_clicks(&permuted, [8; 3], &params).unwrap();
            let n = clicks.len();
            for i in 0..n {
                let j = (i + n - k) % n;
                prop_assert_eq!(&a.tokens.data()[i * 8..(i + 1) * 8], &b.tokens.data()[j * 8..(j + 1) * 8]);
            }
        }
    }
}
