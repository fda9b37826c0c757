//! Dice-loss training on simulated interaction episodes, and finite-difference
//! gradient checks.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::autodiff::{Tape, Var};
use crate::decoder::threshold;
use crate::encoder::{encode, volume_var};
use crate::decoder::decode_var;
use crate::engine::{check_params, init_params, interaction_forward, simulate_click, EngineConfig};
use crate::error::{Error, Result};
use crate::memory::{condition_var, Memory, MemoryBank, MemoryMode};
use crate::params::{normal_tensor, Binder, Component, ParamStore};
use crate::prompts::{click_tokens, encode_mask, grid_pe, mask_embed, mask_var, DensePromptGrid, TokenSet};
use crate::tensor::Tensor;
use crate::volcore::{crop_patch, gen_synthetic, Click, Mask, PatchSpec, Polarity, Volume};

pub const DICE_EPS: f64 = 1e-5;
const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Prompt encoders and decoder (and the encoder when unfrozen).
    pub lr_main: f64,
    /// Memory attention.
    pub lr_mem: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub epochs: usize,
    pub freeze_encoder: bool,
    pub interactions_per_sample: usize,
    pub patch: PatchSpec,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_main: 8e-5,
            lr_mem: 8e-4,
            milestones: vec![129, 180],
            gamma: 0.1,
            epochs: 200,
            freeze_encoder: true,
            interactions_per_sample: 5,
            patch: PatchSpec::default(),
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_main > 0.0 && self.lr_mem > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("milestones must be strictly increasing".into()));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(Error::InvalidArgument("milestones must precede the last epoch".into()));
        }
        if self.interactions_per_sample == 0 {
            return Err(Error::InvalidArgument("interactions_per_sample must be positive".into()));
        }
        Ok(())
    }
}

/// `lr0 · gamma^(#milestones ≤ epoch)`.
pub fn lr_at(lr0: f64, milestones: &[usize], gamma: f64, epoch: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    lr0 * gamma.powi(passed as i32)
}

fn mask_tensor(gt: &Mask) -> Tensor {
    Tensor::from_parts(vec![gt.data().len()], gt.data().iter().map(|&b| b as f64).collect())
}

/// Soft Dice loss `1 − (2Σσ(l)g + ε) / (Σσ(l) + Σg + ε)` on flat logits `[V]`.
pub fn dice_loss_var<'t>(logits: &Var<'t>, gt: &Mask) -> Result<Var<'t>> {
    let n = gt.data().len();
    if logits.shape() != [n] {
        return Err(Error::Shape(format!("logits {:?} vs mask of {n} voxels", logits.shape())));
    }
    let g = logits.tape().constant(mask_tensor(gt));
    let p = logits.sigmoid();
    let num = p.mul(&g).sum_all().scale(2.0).add_scalar(DICE_EPS);
    let den = p.sum_all().add_scalar(gt.count() as f64 + DICE_EPS);
    Ok(num.div(&den).scale(-1.0).add_scalar(1.0))
}

pub fn dice_loss(logits: &Tensor, gt: &Mask) -> Result<f64> {
    let tape = Tape::new();
    let flat = logits.clone().reshape(&[logits.numel()]);
    Ok(dice_loss_var(&tape.constant(flat), gt)?.value().item())
}

fn is_memory(name: &str) -> bool {
    Component::of(name) == Some(Component::MemoryAttention)
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, ..Self::default() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter in `names`; a missing gradient counts as zero.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        names: &[String],
        grads: &BTreeMap<String, Tensor>,
        lr_for: impl Fn(&str) -> f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for name in names {
            let p = params.get_mut(name).expect("trainable parameter present");
            let shape = p.shape().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let lr = lr_for(name);
            let zero = Tensor::zeros(&[0]);
            let g = grads.get(name).unwrap_or(&zero);
            for i in 0..p.numel() {
                let gi = g.data().get(i).copied().unwrap_or(0.0);
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let (mh, vh) = (m.data()[i] / bc1, v.data()[i] / bc2);
                let x = &mut p.data_mut()[i];
                *x -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *x);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr_main: f64,
    pub lr_mem: f64,
}

pub struct TrainOutput {
    pub params: ParamStore,
    pub log: Vec<EpochLog>,
}

/// Loss and parameter gradients of one simulated interaction episode.
pub struct Episode {
    pub loss: f64,
    pub interactions: usize,
    pub grads: BTreeMap<String, Tensor>,
    /// Dice of the last decoded mask.
    pub final_dice: f64,
}

fn accumulate(into: &mut BTreeMap<String, Tensor>, from: BTreeMap<String, Tensor>) {
    for (k, g) in from {
        match into.get_mut(&k) {
            Some(acc) => acc.add_assign(&g),
            None => {
                into.insert(k, g);
            }
        }
    }
}

/// Runs `interactions` simulated interactions on one (already cropped, normalized)
/// patch and returns the mean Dice loss with its gradients. Banked memories enter
/// each interaction's graph as constants.
pub fn episode(
    volume: &Volume,
    gt: &Mask,
    cfg: &EngineConfig,
    params: &ParamStore,
    interactions: usize,
    freeze_encoder: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let trainable = |n: &str| !(freeze_encoder && Component::of(n) == Some(Component::ImageEncoder));
    let grid = cfg.encoder.grid_dims(volume.dims())?;
    let enc_tape = Tape::new();
    let enc_binder = Binder::with_trainable(params, &enc_tape, |n| !freeze_encoder && trainable(n));
    let embedding = encode(&enc_binder.scope("encoder"), &cfg.encoder, &volume_var(&enc_tape, volume), volume.dims())?;
    let emb_value = embedding.value();

    let mut grads = BTreeMap::new();
    let mut emb_grad = Tensor::zeros(emb_value.shape());
    let mut bank = MemoryBank::new(cfg.memory.capacity, cfg.memory.mode);
    let mut pred = Mask::empty(volume.dims());
    let mut total = 0.0;
    let mut run = 0;
    let mut final_dice = 0.0;
    for index in 0..interactions as u64 {
        let mut clicks = Vec::with_capacity(cfg.clicks_per_interaction);
        for _ in 0..cfg.clicks_per_interaction {
            if let Some(mut c) = simulate_click(&pred, gt, rng)? {
                c.interaction_index = index;
                clicks.push(c);
            }
        }
        if clicks.is_empty() {
            break;
        }
        let tape = Tape::new();
        let binder = Binder::with_trainable(params, &tape, trainable);
        let emb = tape.leaf_rc(emb_value.clone(), !freeze_encoder);
        let out = interaction_forward(&binder, cfg, emb, grid, &bank, &clicks, &pred)?;
        let loss = dice_loss_var(&out.logits, gt)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, step: index as usize, detail: format!("loss {value}") });
        }
        total += value;
        run += 1;
        let g = tape.backward(loss);
        if !freeze_encoder {
            if let Some(eg) = g.get(emb) {
                emb_grad.add_assign(eg);
            }
        }
        accumulate(&mut grads, binder.collect(&g));

        pred = threshold(volume.dims(), out.logits.value().data())?;
        final_dice = crate::volcore::dice(&pred, gt)?;
        let sparse = TokenSet {
            tokens: out.tokens.value().as_ref().clone(),
            positions: clicks.iter().map(|c| c.position).collect(),
            polarities: clicks.iter().map(|c| c.polarity).collect(),
        };
        let dense = encode_mask(&pred, grid, &cfg.prompts, params)?;
        bank.push(Memory { sparse, dense, interaction_index: index })?;
    }
    if !freeze_encoder && run > 0 {
        let g = enc_tape.backward_with(embedding, emb_grad);
        accumulate(&mut grads, enc_binder.collect(&g));
    }
    let scale = 1.0 / run.max(1) as f64;
    for g in grads.values_mut() {
        *g = g.map(|x| x * scale);
    }
    Ok(Episode { loss: total * scale, interactions: run, grads, final_dice })
}

/// Where a training run writes its artifacts.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:04}.safetensors"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("final.safetensors")
    }
}

#[derive(Serialize)]
struct RunSnapshot<'a> {
    train: &'a TrainConfig,
    engine: &'a EngineConfig,
    samples: usize,
}

/// Trains on `dataset` (raw volumes with labels). Deterministic under `cfg.seed`.
pub fn train(
    dataset: &[(Volume, Mask)],
    cfg: &TrainConfig,
    engine: &EngineConfig,
    init: ParamStore,
    run_dir: Option<&Path>,
    mut observer: impl FnMut(&EpochLog),
) -> Result<TrainOutput> {
    cfg.validate()?;
    engine.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    cfg.patch.validate(engine.encoder.token_size)?;
    check_params(engine, &init)?;
    let dir = run_dir.map(RunDir::create).transpose()?;
    let mut csv = None;
    if let Some(d) = &dir {
        let snapshot = RunSnapshot { train: cfg, engine, samples: dataset.len() };
        write_atomic(&d.root.join("config.json"), &serde_json::to_vec_pretty(&snapshot)?)?;
        let path = d.loss_csv();
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "epoch,loss,lr_main,lr_mem").map_err(|e| Error::io(&path, e))?;
        csv = Some((f, path));
    }

    let normalized: Vec<Volume> = dataset.iter().map(|(v, _)| v.normalize()).collect::<Result<_>>()?;
    let mut params = init;
    let trainable: Vec<String> = params
        .params()
        .map(|(n, _)| n.clone())
        .filter(|n| !(cfg.freeze_encoder && Component::of(n) == Some(Component::ImageEncoder)))
        .collect();
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr_main = lr_at(cfg.lr_main, &cfg.milestones, cfg.gamma, epoch);
        let lr_mem = lr_at(cfg.lr_mem, &cfg.milestones, cfg.gamma, epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let (pv, pm) = crop_patch(&normalized[i], &dataset[i].1, &cfg.patch, &mut rng)?;
            let ep = episode(&pv, &pm, engine, &params, cfg.interactions_per_sample, cfg.freeze_encoder, &mut rng)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { epoch, step, detail },
                    other => other,
                })?;
            if let Some((name, _)) = ep.grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step, detail: format!("gradient of {name}") });
            }
            sum += ep.loss;
            opt.step(&mut params, &trainable, &ep.grads, |n| if is_memory(n) { lr_mem } else { lr_main });
            params.trained_steps += 1;
        }
        let entry = EpochLog { epoch, loss: sum / dataset.len() as f64, lr_main, lr_mem };
        if let Some((f, path)) = &mut csv {
            writeln!(f, "{},{},{},{}", entry.epoch, entry.loss, entry.lr_main, entry.lr_mem)
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(d) = &dir {
            if cfg.milestones.contains(&epoch) {
                params.save(&d.checkpoint(epoch))?;
            }
        }
        observer(&entry);
        log.push(entry);
    }
    if let Some(d) = &dir {
        params.save(&d.final_checkpoint())?;
    }
    Ok(TrainOutput { params, log })
}

/// Maximum relative gradient error of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub tolerance: f64,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        Err(Error::GradCheck(
            self.entries
                .iter()
                .filter(|e| e.max_rel_err >= self.tolerance)
                .map(|e| format!("{}: {:.3e}", e.name, e.max_rel_err))
                .collect(),
        ))
    }
}

/// Compares reverse-mode gradients of the scalar `f` with central finite
/// differences, step `h = 1e-5·max(1, |θ|)`, for every non-buffer parameter.
///
/// Per tensor the error is `max_i |a_i − n_i| / max(max_i |a_i|, max_i |n_i|, 1e-6)`:
/// the largest elementwise deviation relative to the tensor's gradient scale. The
/// floor covers gradients that vanish identically (e.g. key biases under softmax),
/// where both sides are round-off.
pub fn grad_check<F>(params: &ParamStore, f: F, tolerance: f64) -> Result<GradReport>
where
    F: for<'p, 't> Fn(&Binder<'p, 't>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let binder = Binder::new(params, &tape);
    let out = f(&binder)?;
    if out.value().numel() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar, got {:?}", out.shape())));
    }
    let analytic = if out.requires_grad() { binder.collect(&tape.backward(out)) } else { BTreeMap::new() };
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let b = Binder::frozen(store, &tape);
        Ok(f(&b)?.value().item())
    };
    let mut work = params.clone();
    let mut entries = Vec::new();
    let names: Vec<String> = params.params().map(|(n, _)| n.clone()).collect();
    for name in names {
        let n = params.get(&name).expect("listed").numel();
        let zeros = Tensor::zeros(params.get(&name).expect("listed").shape());
        let a = analytic.get(&name).unwrap_or(&zeros);
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let theta = params.get(&name).expect("listed").data()[i];
            let h = 1e-5 * theta.abs().max(1.0);
            work.get_mut(&name).expect("listed").data_mut()[i] = theta + h;
            let up = eval(&work)?;
            work.get_mut(&name).expect("listed").data_mut()[i] = theta - h;
            let down = eval(&work)?;
            work.get_mut(&name).expect("listed").data_mut()[i] = theta;
            numeric.push((up - down) / (2.0 * h));
        }
        let scale = a.data().iter().chain(&numeric).fold(0.0f64, |m, x| m.max(x.abs()));
        let dev = a.data().iter().zip(&numeric).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let max_rel_err = dev / scale.max(GRAD_FLOOR);
        entries.push(GradEntry { name, numel: n, max_rel_err });
    }
    // unreferenced parameters have zero analytic and numeric gradients
    Ok(GradReport { tolerance, entries })
}

/// Fixed random weighting turning a tensor output into a scalar probe.
fn probe<'t>(x: &Var<'t>, seed: u64) -> Var<'t> {
    let w = normal_tensor(seed, "probe", &x.shape(), 1.0);
    x.mul(&x.tape().constant(w)).sum_all()
}

fn subset(store: &ParamStore, prefixes: &[&str]) -> ParamStore {
    let mut s = store.clone();
    s.retain(|n| prefixes.iter().any(|p| n.starts_with(p)));
    s
}

/// Randomizes zero-initialized tensors so every gradient path is exercised.
fn randomize_zero_tensors(store: &mut ParamStore, seed: u64) {
    for name in store.names() {
        let t = store.get(&name).expect("listed");
        if !store.is_buffer(&name) && t.data().iter().all(|&x| x == 0.0) && name.ends_with("weight") {
            let shape = t.shape().to_vec();
            store.insert(name.clone(), normal_tensor(seed, &name, &shape, 0.5));
        }
    }
}

/// Gradient checks of every differentiable module on the tiny configuration.
pub fn grad_check_suite(tolerance: f64) -> Result<Vec<(String, GradReport)>> {
    let mut out = Vec::new();
    let base = EngineConfig::tiny();
    let (volume, _) = gen_synthetic(3, [8, 8, 8], 1)?;
    let volume = volume.normalize()?;
    let small = Volume::new([4, 4, 4], volume.data()[..64].to_vec(), "gc")?;
    let all = init_params(&base, 5)?;

    let enc = subset(&all, &["encoder."]);
    let ecfg = base.encoder.clone();
    out.push((
        "encoder".to_string(),
        grad_check(&enc, |b| {
            let x = encode(&b.scope("encoder"), &ecfg, &volume_var(b.tape(), &small), small.dims())?;
            Ok(probe(&x, 1))
        }, tolerance)?,
    ));

    let prompts = subset(&all, &["prompts.pe_gaussian", "prompts.point."]);
    let clicks = [
        Click::new([1, 2, 3], Polarity::Positive),
        Click::new([3, 0, 1], Polarity::Negative),
        Click::new([2, 2, 2], Polarity::Positive),
    ];
    out.push((
        "prompts.clicks".to_string(),
        grad_check(&prompts, |b| Ok(probe(&click_tokens(&b.scope("prompts"), &clicks, [4, 4, 4])?, 2)), tolerance)?,
    ));

    let mask_params = subset(&all, &["prompts.mask."]);
    let pcfg = base.prompts.clone();
    let m = Mask::from_fn([4, 4, 4], |p| (p[0] + 2 * p[1] + p[2]) % 3 == 0);
    out.push((
        "prompts.mask".to_string(),
        grad_check(&mask_params, |b| {
            Ok(probe(&mask_embed(&b.scope("prompts"), &pcfg, &mask_var(b.tape(), &m), [4, 4, 4])?, 3))
        }, tolerance)?,
    ));

    let grid = [2, 2, 2];
    let c = base.encoder.embed_dim;
    let img = normal_tensor(10, "img", &[8, c], 1.0);
    let cur_tokens = normal_tensor(11, "cur", &[1, c], 1.0);
    let cur_dense = normal_tensor(12, "curd", &[8, c], 1.0);
    for mode in [MemoryMode::Sparse, MemoryMode::Dense, MemoryMode::SparseDense] {
        let cfg = base.clone().with_memory(mode, 4);
        let mut store = subset(&init_params(&cfg, 5)?, &["memory.", "prompts.pe_gaussian"]);
        randomize_zero_tensors(&mut store, 6);
        let mut bank = MemoryBank::new(4, mode);
        for i in 0..2u64 {
            bank.push(Memory {
                sparse: TokenSet {
                    tokens: normal_tensor(20 + i, "t", &[1 + i as usize, c], 1.0),
                    positions: vec![[0, 0, 0]; 1 + i as usize],
                    polarities: vec![Polarity::Positive; 1 + i as usize],
                },
                dense: DensePromptGrid { dims: grid, data: normal_tensor(30 + i, "d", &[8, c], 1.0) },
                interaction_index: i,
            })?;
        }
        let pe = grid_pe(&store, grid);
        let mcfg = cfg.memory.clone();
        let report = grad_check(&store, |b| {
            let t = b.tape();
            let y = condition_var(
                &b.scope("memory"),
                &mcfg,
                t.constant(img.clone()),
                grid,
                &bank,
                &t.constant(cur_tokens.clone()),
                &t.constant(cur_dense.clone()),
                &pe,
            )?;
            Ok(probe(&y, 4))
        }, tolerance)?;
        out.push((format!("memory.condition[{mode}]"), report));
    }

    let dec = subset(&all, &["decoder.", "prompts.pe_gaussian"]);
    let dcfg = base.decoder.clone();
    let gt = Mask::from_fn([4, 4, 4], |p| p[0] + p[1] < 4 && p[2] > 0);
    let pe = grid_pe(&dec, grid);
    out.push((
        "decoder".to_string(),
        grad_check(&dec, |b| {
            let t = b.tape();
            let logits = decode_var(
                &b.scope("decoder"),
                &dcfg,
                &t.constant(img.clone()),
                grid,
                &t.constant(cur_tokens.clone()),
                &t.constant(cur_dense.clone()),
                &pe,
            );
            dice_loss_var(&logits, &gt)
        }, tolerance)?,
    ));

    let mut logits = ParamStore::new();
    logits.insert("logits", normal_tensor(40, "logits", &[64], 2.0));
    out.push((
        "dice_loss".to_string(),
        grad_check(&logits, |b| dice_loss_var(&b.var("logits"), &gt), tolerance)?,
    ));
    Ok(out)
}
