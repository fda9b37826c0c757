//! Model assembly, interactive sessions and the simulated user.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Entry};
use crate::autodiff::{Tape, Var};
use crate::decoder::{decode_var, init_decoder, threshold, DecoderConfig};
use crate::encoder::{embed_volume, init_encoder, EmbeddingGrid, EncoderConfig};
use crate::error::{Error, Result};
use crate::memory::{condition_var, init_memory, Memory, MemoryBank, MemoryConfig, MemoryMode};
use crate::params::{Binder, ParamStore};
use crate::prompts::{
    click_tokens, encode_mask, grid_pe, init_prompts, mask_embed, mask_var, PromptConfig, TokenSet,
};
use crate::tensor::Tensor;
use crate::volcore::{dice, unflatten, Click, Dims, Mask, Polarity, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub encoder: EncoderConfig,
    pub prompts: PromptConfig,
    pub decoder: DecoderConfig,
    pub memory: MemoryConfig,
    pub clicks_per_interaction: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            prompts: PromptConfig { embed_dim: encoder.embed_dim, token_size: encoder.token_size, mask_hidden: 16 },
            decoder: DecoderConfig { embed_dim: encoder.embed_dim, ..DecoderConfig::default() },
            memory: MemoryConfig::default(),
            encoder,
            clicks_per_interaction: 1,
        }
    }
}

impl EngineConfig {
    /// Width-32 model used for the desk-scale experiments.
    pub fn small() -> Self {
        let encoder = EncoderConfig { embed_dim: 32, depth: 2, heads: 4, token_size: 4, mlp_ratio: 2.0, max_grid: 16, rel_pos: true };
        Self {
            prompts: PromptConfig { embed_dim: 32, token_size: 4, mask_hidden: 8 },
            decoder: DecoderConfig { depth: 2, embed_dim: 32, heads: 4, upscale_stages: 2, mlp_dim: 64 },
            memory: MemoryConfig { mode: MemoryMode::SparseDense, capacity: 60, dim: 16, heads: 2, mlp_ratio: 2.0 },
            encoder,
            clicks_per_interaction: 1,
        }
    }

    /// Smallest consistent configuration, for gradient checks.
    pub fn tiny() -> Self {
        let encoder = EncoderConfig { embed_dim: 8, depth: 1, heads: 2, token_size: 2, mlp_ratio: 2.0, max_grid: 4, rel_pos: true };
        Self {
            prompts: PromptConfig { embed_dim: 8, token_size: 2, mask_hidden: 2 },
            decoder: DecoderConfig { depth: 1, embed_dim: 8, heads: 2, upscale_stages: 1, mlp_dim: 8 },
            memory: MemoryConfig { mode: MemoryMode::SparseDense, capacity: 4, dim: 4, heads: 2, mlp_ratio: 1.0 },
            encoder,
            clicks_per_interaction: 1,
        }
    }

    pub fn with_memory(mut self, mode: MemoryMode, capacity: usize) -> Self {
        self.memory.mode = mode;
        self.memory.capacity = capacity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompts.validate()?;
        self.memory.validate()?;
        let c = self.encoder.embed_dim;
        if self.prompts.embed_dim != c || self.decoder.embed_dim != c {
            return Err(Error::InvalidArgument(format!(
                "embedding widths differ: encoder {c}, prompts {}, decoder {}",
                self.prompts.embed_dim, self.decoder.embed_dim
            )));
        }
        if self.prompts.token_size != self.encoder.token_size {
            return Err(Error::InvalidArgument("prompt and encoder token sizes differ".into()));
        }
        self.decoder.validate(self.encoder.token_size)?;
        if self.clicks_per_interaction == 0 {
            return Err(Error::InvalidArgument("clicks_per_interaction must be positive".into()));
        }
        Ok(())
    }
}

/// Fresh parameters for `cfg`. Each tensor's initialization depends only on
/// `(seed, name)`, so models differing in memory mode share all other weights.
pub fn init_params(cfg: &EngineConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    init_encoder(&mut store, &cfg.encoder, seed);
    init_prompts(&mut store, &cfg.prompts, seed);
    init_memory(&mut store, &cfg.memory, cfg.encoder.embed_dim, seed);
    init_decoder(&mut store, &cfg.decoder, seed);
    Ok(store)
}

/// Checks that `params` holds exactly the tensors `cfg` needs.
pub fn check_params(cfg: &EngineConfig, params: &ParamStore) -> Result<()> {
    params.check_layout(&init_params(cfg, 0)?)
}

/// Outputs of one interaction's forward graph.
pub struct InteractionVars<'t> {
    pub logits: Var<'t>,
    pub conditioned: Var<'t>,
    pub tokens: Var<'t>,
}

/// Prompt encoding, memory conditioning and decoding for one interaction on a tape.
/// Shared by inference and training so both run the same graph.
pub fn interaction_forward<'t>(
    b: &Binder<'_, 't>,
    cfg: &EngineConfig,
    embedding: Var<'t>,
    grid: Dims,
    bank: &MemoryBank,
    clicks: &[Click],
    prev_mask: &Mask,
) -> Result<InteractionVars<'t>> {
    let tape = b.tape();
    let dims = prev_mask.dims();
    let tokens = click_tokens(&b.scope("prompts"), clicks, dims)?;
    let dense = mask_embed(&b.scope("prompts"), &cfg.prompts, &mask_var(tape, prev_mask), dims)?;
    let pe = grid_pe(b.store(), grid);
    let conditioned = condition_var(&b.scope("memory"), &cfg.memory, embedding, grid, bank, &tokens, &dense, &pe)?;
    let logits = decode_var(&b.scope("decoder"), &cfg.decoder, &conditioned, grid, &tokens, &dense, &pe);
    Ok(InteractionVars { logits, conditioned, tokens })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionState {
    pub volume_id: String,
    /// Normalized intensities the session was started on.
    pub volume: Volume,
    pub embedding: EmbeddingGrid,
    pub current_mask: Mask,
    pub bank: MemoryBank,
    pub clicks: Vec<Click>,
    pub gt: Option<Mask>,
    pub dice_trace: Vec<f64>,
    pub interaction_count: u64,
    pub rng_seed: u64,
    /// Number of encoder passes run for this session.
    pub encoder_calls: usize,
}

/// Normalizes `v`, embeds it once and opens an empty session.
pub fn start_session(
    v: &Volume,
    cfg: &EngineConfig,
    params: &ParamStore,
    gt: Option<Mask>,
    rng_seed: u64,
) -> Result<SessionState> {
    cfg.validate()?;
    cfg.encoder.grid_dims(v.dims())?;
    check_params(cfg, params)?;
    if let Some(gt) = &gt {
        if gt.dims() != v.dims() {
            return Err(Error::Shape(format!("ground truth {:?} vs volume {:?}", gt.dims(), v.dims())));
        }
    }
    let volume = v.normalize()?;
    let mut embedding = embed_volume(&volume, &cfg.encoder, params)?;
    embedding.data = embedding.data.round_to_f32();
    Ok(SessionState {
        volume_id: v.id.clone(),
        embedding,
        current_mask: Mask::empty(v.dims()),
        bank: MemoryBank::new(cfg.memory.capacity, cfg.memory.mode),
        clicks: Vec::new(),
        gt,
        dice_trace: Vec::new(),
        interaction_count: 0,
        rng_seed,
        encoder_calls: 1,
        volume,
    })
}

/// Result of one refinement.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub logits: Tensor,
    pub mask: Mask,
    pub dice: Option<f64>,
}

/// One interaction: encode prompts, condition on memory, decode, commit the memory.
/// On error the session is left unchanged.
pub fn refine(s: &mut SessionState, clicks: &[Click], cfg: &EngineConfig, params: &ParamStore) -> Result<Refinement> {
    if clicks.is_empty() && s.interaction_count > 0 {
        return Err(Error::NoClicks);
    }
    let dims = s.volume.dims();
    for c in clicks {
        c.check_bounds(dims)?;
    }
    let index = s.interaction_count;
    let stamped: Vec<Click> = clicks.iter().map(|c| Click { interaction_index: index, ..*c }).collect();

    let tape = Tape::new();
    let binder = Binder::frozen(params, &tape);
    let embedding = tape.constant(s.embedding.data.clone());
    let out = interaction_forward(&binder, cfg, embedding, s.embedding.dims, &s.bank, &stamped, &s.current_mask)?;
    if s.bank.is_empty() {
        // first interaction (or disabled memory): decoder sees the raw embedding
        assert!(
            *out.conditioned.value() == s.embedding.data,
            "unconditioned path altered the image embedding"
        );
    }
    let logits = out.logits.value().as_ref().clone().reshape(&dims);
    let mask = threshold(dims, logits.data())?;
    let sparse = TokenSet {
        tokens: out.tokens.value().as_ref().clone(),
        positions: stamped.iter().map(|c| c.position).collect(),
        polarities: stamped.iter().map(|c| c.polarity).collect(),
    };
    let dense = encode_mask(&mask, s.embedding.dims, &cfg.prompts, params)?;
    let mut bank = s.bank.clone();
    bank.push(Memory { sparse, dense, interaction_index: index })?;
    let score = s.gt.as_ref().map(|gt| dice(&mask, gt)).transpose()?;

    s.bank = bank;
    s.clicks.extend(stamped);
    s.current_mask = mask.clone();
    if let Some(d) = score {
        s.dice_trace.push(d);
    }
    s.interaction_count += 1;
    Ok(Refinement { logits, mask, dice: score })
}

/// Samples a corrective click from the error region of `pred` against `gt`.
///
/// A voxel is drawn uniformly from `FN ∪ FP`, so the false-negative branch is taken
/// with probability `|FN| / (|FN| + |FP|)`. Returns `None` when the prediction is
/// already exact.
pub fn simulate_click<R: Rng + ?Sized>(pred: &Mask, gt: &Mask, rng: &mut R) -> Result<Option<Click>> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    if gt.is_empty() && pred.is_empty() {
        return Err(Error::EmptyMask);
    }
    let fn_set = gt.difference(pred)?;
    let fp_set = pred.difference(gt)?;
    let total = fn_set.len() + fp_set.len();
    if total == 0 {
        return Ok(None);
    }
    let k = rng.random_range(0..total);
    let dims = gt.dims();
    Ok(Some(if k < fn_set.len() {
        Click::new(unflatten(dims, fn_set[k]), Polarity::Positive)
    } else {
        Click::new(unflatten(dims, fp_set[k - fn_set.len()]), Polarity::Negative)
    }))
}

/// Simulated interactive session with `n_clicks` interactions. Returns Dice in
/// `[0, 1]` after each; if the prediction becomes exact the last value is repeated.
pub fn run_interactive(
    v: &Volume,
    gt: &Mask,
    cfg: &EngineConfig,
    params: &ParamStore,
    n_clicks: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_clicks == 0 {
        return Err(Error::InvalidArgument("n_clicks must be >= 1".into()));
    }
    let mut s = start_session(v, cfg, params, Some(gt.clone()), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while s.dice_trace.len() < n_clicks {
        let mut clicks = Vec::with_capacity(cfg.clicks_per_interaction);
        for _ in 0..cfg.clicks_per_interaction {
            if let Some(c) = simulate_click(&s.current_mask, gt, &mut rng)? {
                clicks.push(c);
            }
        }
        if clicks.is_empty() {
            let last = *s.dice_trace.last().unwrap_or(&1.0);
            s.dice_trace.resize(n_clicks, last);
            break;
        }
        refine(&mut s, &clicks, cfg, params)?;
    }
    Ok(s.dice_trace)
}

impl SessionState {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.put_meta("volume_id", self.volume_id.clone());
        a.put_meta("interaction_count", self.interaction_count.to_string());
        a.put_meta("rng_seed", self.rng_seed.to_string());
        a.put_meta("encoder_calls", self.encoder_calls.to_string());
        a.put_meta("token_size", self.embedding.token_size.to_string());
        a.put_meta("spacing", serde_json::to_string(&self.volume.spacing).expect("spacing serializes"));
        let dims = self.volume.dims();
        a.put(
            "volume",
            Entry::F32 { shape: dims.to_vec(), data: self.volume.data().to_vec() },
        );
        a.put_tensor("embedding", &self.embedding.data);
        a.put("embedding_dims", Entry::I64 { shape: vec![3], data: self.embedding.dims.map(|d| d as i64).to_vec() });
        a.put("current_mask", Entry::U8 { shape: dims.to_vec(), data: self.current_mask.data().to_vec() });
        if let Some(gt) = &self.gt {
            a.put("gt", Entry::U8 { shape: dims.to_vec(), data: gt.data().to_vec() });
        }
        let clicks: Vec<i64> = self
            .clicks
            .iter()
            .flat_map(|c| {
                let [z, y, x] = c.position;
                [z as i64, y as i64, x as i64, c.polarity.sign() as i64, c.interaction_index as i64]
            })
            .collect();
        a.put("clicks", Entry::I64 { shape: vec![self.clicks.len(), 5], data: clicks });
        let trace = self.dice_trace.iter().map(|d| d.to_bits() as i64).collect();
        a.put("dice_trace", Entry::I64 { shape: vec![self.dice_trace.len()], data: trace });
        self.bank.write_archive(&mut a, "bank");
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let num = |k: &str| -> Result<u64> {
            a.meta(k)?.parse().map_err(|_| Error::Archive(format!("bad {k}")))
        };
        let (shape, data) = match a.get("volume")? {
            Entry::F32 { shape, data } if shape.len() == 3 => (shape.clone(), data.clone()),
            _ => return Err(Error::Archive("volume entry malformed".into())),
        };
        let dims: Dims = [shape[0], shape[1], shape[2]];
        let mut volume = Volume::new(dims, data, a.meta("volume_id")?)?;
        volume.spacing = serde_json::from_str(a.meta("spacing")?)?;
        let mask = |name: &str| -> Result<Mask> {
            let (_, bytes) = a.u8s(name)?;
            Mask::new(dims, bytes.to_vec())
        };
        let (_, ed) = a.i64s("embedding_dims")?;
        if ed.len() != 3 {
            return Err(Error::Archive("embedding dims malformed".into()));
        }
        let embedding = EmbeddingGrid {
            dims: [ed[0] as usize, ed[1] as usize, ed[2] as usize],
            token_size: num("token_size")? as usize,
            data: a.tensor("embedding")?,
        };
        let (_, raw) = a.i64s("clicks")?;
        let clicks = raw
            .chunks_exact(5)
            .map(|c| {
                let polarity = match c[3] {
                    1 => Polarity::Positive,
                    -1 => Polarity::Negative,
                    p => return Err(Error::Archive(format!("bad polarity {p}"))),
                };
                let click = Click {
                    position: [c[0] as usize, c[1] as usize, c[2] as usize],
                    polarity,
                    interaction_index: c[4] as u64,
                };
                click.check_bounds(dims)?;
                Ok(click)
            })
            .collect::<Result<Vec<_>>>()?;
        let (_, trace) = a.i64s("dice_trace")?;
        Ok(SessionState {
            volume_id: volume.id.clone(),
            volume,
            embedding,
            current_mask: mask("current_mask")?,
            bank: MemoryBank::read_archive(a, "bank")?,
            clicks,
            gt: if a.entries.contains_key("gt") { Some(mask("gt")?) } else { None },
            dice_trace: trace.iter().map(|&b| f64::from_bits(b as u64)).collect(),
            interaction_count: num("interaction_count")?,
            rng_seed: num("rng_seed")?,
            encoder_calls: num("encoder_calls")? as usize,
        })
    }
}
