//! Desk-scale experiment harness: Dice-vs-clicks curves, memory-size sweep,
//! prompt-type ablation, the train-fraction grid, parameter accounting and cost.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alloc::MemoryProbe;
use crate::engine::{init_params, run_interactive, EngineConfig};
use crate::error::{Error, Result};
use crate::memory::MemoryMode;
use crate::params::{Component, ParamStore};
use crate::training::{episode, train, AdamW, TrainConfig};
use crate::volcore::{gen_synthetic_with, Dims, Mask, SynthOptions, Volume};

pub const MEMORY_SIZES: [usize; 7] = [10, 20, 30, 40, 50, 60, 80];
pub const ABLATION_BUDGETS: [usize; 4] = [5, 10, 20, 50];
pub const TABLE_BUDGETS: [usize; 5] = [1, 10, 20, 50, 150];
pub const COST_INTERACTIONS: usize = 150;
pub const COST_CONFIGS: [(MemoryMode, usize); 10] = [
    (MemoryMode::None, 0),
    (MemoryMode::Sparse, 10),
    (MemoryMode::Sparse, 20),
    (MemoryMode::Sparse, 60),
    (MemoryMode::Dense, 10),
    (MemoryMode::Dense, 20),
    (MemoryMode::Dense, 60),
    (MemoryMode::SparseDense, 10),
    (MemoryMode::SparseDense, 20),
    (MemoryMode::SparseDense, 60),
];

pub const CORPUS_SIZE: u64 = 20;
pub const CORPUS_DIMS: Dims = [32, 32, 32];
/// Training volumes use seeds from here on, disjoint from the corpus.
pub const TRAIN_SEED_BASE: u64 = 1000;

pub type Case = (Volume, Mask);

/// Dice (percent) after each click budget, mean and population std over cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveResult {
    pub label: String,
    pub clicks: Vec<usize>,
    pub dice_mean: Vec<f64>,
    pub dice_std: Vec<f64>,
    pub n_cases: usize,
}

impl CurveResult {
    pub fn at(&self, clicks: usize) -> Option<f64> {
        self.clicks.iter().position(|&c| c == clicks).map(|i| self.dice_mean[i])
    }

    /// Mean Dice at the largest budget.
    pub fn final_dice(&self) -> f64 {
        *self.dice_mean.last().unwrap_or(&0.0)
    }
}

pub const CURVE_CSV_HEADER: &str = "label,clicks,dice_mean,dice_std,n_cases";

pub fn curves_csv(curves: &[CurveResult]) -> String {
    let mut out = format!("{CURVE_CSV_HEADER}\n");
    for c in curves {
        for i in 0..c.clicks.len() {
            let _ = writeln!(out, "{},{},{:.4},{:.4},{}", c.label, c.clicks[i], c.dice_mean[i], c.dice_std[i], c.n_cases);
        }
    }
    out
}

fn blob_options(seed: u64, distractors: usize) -> SynthOptions {
    SynthOptions { distractors, ..SynthOptions::blobs(1 + (seed % 3) as usize) }
}

/// Benchmark corpus: volumes for seeds 0..20, 32³, one to three blobs.
pub fn corpus(distractors: usize) -> Result<Vec<Case>> {
    (0..CORPUS_SIZE).map(|s| gen_synthetic_with(s, CORPUS_DIMS, blob_options(s, distractors))).collect()
}

/// `n` training volumes with seeds disjoint from the corpus.
pub fn training_pool(n: usize, distractors: usize) -> Result<Vec<Case>> {
    (0..n as u64)
        .map(|i| gen_synthetic_with(TRAIN_SEED_BASE + i, CORPUS_DIMS, blob_options(i, distractors)))
        .collect()
}

fn check_budgets(budgets: &[usize]) -> Result<()> {
    if budgets.is_empty() || budgets[0] == 0 || budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("click budgets must be increasing and positive: {budgets:?}")));
    }
    Ok(())
}

/// One simulated session per case at the largest budget, sampled at each budget.
/// Case `i` uses click seed `seed + i`.
pub fn evaluate_curve(
    label: impl Into<String>,
    cases: &[Case],
    cfg: &EngineConfig,
    params: &ParamStore,
    budgets: &[usize],
    seed: u64,
) -> Result<CurveResult> {
    check_budgets(budgets)?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no evaluation cases".into()));
    }
    let max = *budgets.last().unwrap();
    let mut per_budget = vec![Vec::with_capacity(cases.len()); budgets.len()];
    for (i, (v, gt)) in cases.iter().enumerate() {
        let trace = run_interactive(v, gt, cfg, params, max, seed.wrapping_add(i as u64))?;
        for (k, &b) in budgets.iter().enumerate() {
            per_budget[k].push(100.0 * trace[b - 1]);
        }
    }
    let n = cases.len() as f64;
    let dice_mean: Vec<f64> = per_budget.iter().map(|d| d.iter().sum::<f64>() / n).collect();
    let dice_std = per_budget
        .iter()
        .zip(&dice_mean)
        .map(|(d, m)| (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    Ok(CurveResult { label: label.into(), clicks: budgets.to_vec(), dice_mean, dice_std, n_cases: cases.len() })
}

/// Everything needed to train the models of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub engine: EngineConfig,
    pub train: TrainConfig,
    /// Size of the synthetic training pool; train sizes take a prefix of it.
    pub pool: usize,
    pub distractors: usize,
    /// Size sweep: train once and vary capacity at inference only.
    pub shared_size_weights: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Width-32 models, unfrozen encoder, raised learning rates, 10-click episodes and two
    /// unlabelled distractor blobs per volume.
    pub fn desk() -> Self {
        Self {
            engine: EngineConfig::small(),
            train: TrainConfig {
                lr_main: 1e-3,
                lr_mem: 1e-3,
                epochs: 20,
                milestones: vec![],
                freeze_encoder: false,
                interactions_per_sample: 10,
                patch: crate::volcore::PatchSpec::cube(32),
                ..TrainConfig::default()
            },
            pool: 20,
            distractors: 2,
            shared_size_weights: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct ModelKey {
    mode: MemoryMode,
    capacity: usize,
    n_train: usize,
    seed: u64,
}

/// Trains models on demand and caches them by (mode, capacity, train size, seed).
pub struct ModelZoo {
    pub cfg: ExperimentConfig,
    pool: Vec<Case>,
    cache: BTreeMap<ModelKey, ParamStore>,
    observer: Option<Box<dyn FnMut(&str)>>,
}

impl ModelZoo {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.engine.validate()?;
        cfg.train.validate()?;
        let pool = training_pool(cfg.pool, cfg.distractors)?;
        Self::with_pool(cfg, pool)
    }

    /// Zoo over an explicit training pool; `cfg.pool` and `cfg.distractors` are ignored.
    pub fn with_pool(cfg: ExperimentConfig, pool: Vec<Case>) -> Result<Self> {
        cfg.engine.validate()?;
        cfg.train.validate()?;
        if pool.is_empty() {
            return Err(Error::InvalidArgument("training pool is empty".into()));
        }
        Ok(Self { cfg, pool, cache: BTreeMap::new(), observer: None })
    }

    /// Receives a line after each model finishes training.
    pub fn with_observer(mut self, f: impl FnMut(&str) + 'static) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    pub fn engine(&self, mode: MemoryMode, capacity: usize) -> EngineConfig {
        self.cfg.engine.clone().with_memory(mode, capacity)
    }

    pub fn pool(&self) -> &[Case] {
        &self.pool
    }

    pub fn trained(&self) -> usize {
        self.cache.len()
    }

    /// Model trained on the first `n_train` pool volumes. With shared size weights
    /// the requested capacity is ignored for training.
    pub fn model(&mut self, mode: MemoryMode, capacity: usize, n_train: usize, seed: u64) -> Result<&ParamStore> {
        if n_train == 0 || n_train > self.pool.len() {
            return Err(Error::InvalidArgument(format!("train size {n_train} outside pool of {}", self.pool.len())));
        }
        let capacity = match mode {
            MemoryMode::None => 0,
            _ if self.cfg.shared_size_weights => self.cfg.engine.memory.capacity,
            _ => capacity,
        };
        let key = ModelKey { mode, capacity, n_train, seed };
        if !self.cache.contains_key(&key) {
            let engine = self.engine(mode, capacity);
            let tc = TrainConfig { seed, ..self.cfg.train.clone() };
            let start = Instant::now();
            let out = train(&self.pool[..n_train], &tc, &engine, init_params(&engine, seed)?, None, |_| {})?;
            if let Some(f) = &mut self.observer {
                let last = out.log.last().map_or(f64::NAN, |l| l.loss);
                f(&format!(
                    "trained {mode} N={capacity} n_train={n_train} seed={seed}: loss {last:.4} in {:.0}s",
                    start.elapsed().as_secs_f64()
                ));
            }
            self.cache.insert(key.clone(), out.params);
        }
        Ok(&self.cache[&key])
    }
}

fn require_trained(p: &ParamStore) -> Result<()> {
    if p.trained_steps == 0 {
        return Err(Error::Untrained);
    }
    Ok(())
}

/// One curve per memory size. `N = 0` evaluates the memory-free model.
pub fn sweep_memory_size(
    sizes: &[usize],
    cases: &[Case],
    zoo: &mut ModelZoo,
    n_train: usize,
    budgets: &[usize],
    seed: u64,
) -> Result<Vec<CurveResult>> {
    let mode = zoo.cfg.engine.memory.mode;
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let m = if n == 0 { MemoryMode::None } else { mode };
        let cfg = zoo.engine(m, n);
        let params = zoo.model(m, n, n_train, seed)?;
        require_trained(params)?;
        out.push(evaluate_curve(format!("N={n}"), cases, &cfg, params, budgets, seed)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub mode: MemoryMode,
    pub train_size: usize,
    pub curve: CurveResult,
}

/// Curve per (mode, train size), modes outermost.
pub fn ablate_prompt_types(
    modes: &[MemoryMode],
    train_sizes: &[usize],
    budgets: &[usize],
    cases: &[Case],
    zoo: &mut ModelZoo,
    seed: u64,
) -> Result<Vec<AblationCell>> {
    let capacity = zoo.cfg.engine.memory.capacity;
    let mut out = Vec::new();
    for &mode in modes {
        for &n in train_sizes {
            let cfg = zoo.engine(mode, capacity);
            let params = zoo.model(mode, capacity, n, seed)?;
            require_trained(params)?;
            let curve = evaluate_curve(format!("{mode}/{n}"), cases, &cfg, params, budgets, seed)?;
            out.push(AblationCell { mode, train_size: n, curve });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Untrained weights, no memory.
    ZeroShot,
    /// Fine-tuned without memory.
    NoMemory,
    SparseDense,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::ZeroShot, Method::NoMemory, Method::SparseDense];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero_shot",
            Method::NoMemory => "none",
            Method::SparseDense => "sparse_dense",
        }
    }

    fn mode(self) -> MemoryMode {
        match self {
            Method::SparseDense => MemoryMode::SparseDense,
            _ => MemoryMode::None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Mean Dice per click budget (rows) and (train fraction, method) column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableGrid {
    pub budgets: Vec<usize>,
    pub columns: Vec<(f64, Method)>,
    /// `cells[row][column]`
    pub cells: Vec<Vec<f64>>,
}

impl TableGrid {
    pub fn header(&self) -> Vec<String> {
        std::iter::once("clicks".to_string())
            .chain(self.columns.iter().map(|(f, m)| format!("{m}@{f}")))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for (b, row) in self.budgets.iter().zip(&self.cells) {
            out.push_str(&b.to_string());
            for v in row {
                let _ = write!(out, ",{v:.2}");
            }
            out.push('\n');
        }
        out
    }
}

/// Train size for a fraction of the pool, at least one volume.
pub fn train_size(fraction: f64, pool: usize) -> usize {
    ((fraction * pool as f64).round() as usize).clamp(1, pool.max(1))
}

pub fn table_grid(
    fractions: &[f64],
    budgets: &[usize],
    methods: &[Method],
    cases: &[Case],
    zoo: &mut ModelZoo,
    seed: u64,
) -> Result<TableGrid> {
    check_budgets(budgets)?;
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::InvalidArgument(format!("train fractions must lie in (0, 1]: {fractions:?}")));
    }
    let capacity = zoo.cfg.engine.memory.capacity;
    let mut columns = Vec::new();
    let mut curves = Vec::new();
    for &f in fractions {
        let n = train_size(f, zoo.pool().len());
        for &m in methods {
            let cfg = zoo.engine(m.mode(), capacity);
            let curve = if m == Method::ZeroShot {
                evaluate_curve(m.as_str(), cases, &cfg, &init_params(&cfg, seed)?, budgets, seed)?
            } else {
                let params = zoo.model(m.mode(), capacity, n, seed)?;
                require_trained(params)?;
                evaluate_curve(m.as_str(), cases, &cfg, params, budgets, seed)?
            };
            columns.push((f, m));
            curves.push(curve);
        }
    }
    let cells = (0..budgets.len()).map(|r| curves.iter().map(|c| c.dice_mean[r]).collect()).collect();
    Ok(TableGrid { budgets: budgets.to_vec(), columns, cells })
}

/// One row of the parameter breakdown. Percentages are `None` where the
/// published table leaves the cell empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub component: String,
    pub parameters: f64,
    pub pct_of_ft: Option<f64>,
    pub pct_of_total: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub by_component: BTreeMap<Component, usize>,
    /// Parameters outside every component prefix.
    pub other: usize,
    pub fine_tuned: usize,
    pub total: usize,
    pub rows: Vec<ParamRow>,
}

pub const PARAM_CSV_HEADER: &str = "Component,# Parameters,% of FT Parameters,% of total Parameters";

fn pct(part: f64, whole: f64) -> f64 {
    if whole == 0.0 {
        0.0
    } else {
        100.0 * part / whole
    }
}

fn rows_csv(rows: &[ParamRow], fmt_count: impl Fn(f64) -> String) -> String {
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |p| format!("{p:.2}%"));
    let mut out = format!("{PARAM_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.component, fmt_count(r.parameters), cell(r.pct_of_ft), cell(r.pct_of_total));
    }
    out
}

impl ParamReport {
    pub fn to_csv(&self) -> String {
        rows_csv(&self.rows, |n| format!("{n}"))
    }
}

/// Published breakdown of the full-scale model, for side-by-side reporting.
pub fn reference_param_rows() -> Vec<ParamRow> {
    let row = |c: &str, p: f64, ft: Option<f64>, tot: Option<f64>| ParamRow {
        component: c.into(),
        parameters: p,
        pct_of_ft: ft,
        pct_of_total: tot,
    };
    vec![
        row("Memory Attention", 2.84e6, Some(29.79), Some(2.77)),
        row("Total Memory module", 2.84e6, Some(29.79), Some(2.77)),
        row("Mask decoder", 6.69e6, Some(70.21), Some(6.53)),
        row("Total parameters finetuned", 9.53e6, None, Some(9.30)),
        row("Image encoder", 92.92e6, None, Some(90.69)),
        row("Total parameters", 102.46e6, None, None),
    ]
}

pub fn reference_param_csv() -> String {
    rows_csv(&reference_param_rows(), |n| format!("{:.2}M", n / 1e6))
}

/// Per-component parameter counts. Fine-tuned parameters are memory attention
/// plus mask decoder, as in the published breakdown; prompt encoders get their
/// own row.
pub fn count_params(params: &ParamStore) -> ParamReport {
    let mut by_component: BTreeMap<Component, usize> = Component::ALL.iter().map(|&c| (c, 0)).collect();
    let mut other = 0;
    for (name, t) in params.params() {
        match Component::of(name) {
            Some(c) => *by_component.get_mut(&c).unwrap() += t.numel(),
            None => other += t.numel(),
        }
    }
    let memory = by_component[&Component::MemoryAttention];
    let decoder = by_component[&Component::MaskDecoder];
    let prompts = by_component[&Component::PromptEncoders];
    let encoder = by_component[&Component::ImageEncoder];
    let fine_tuned = memory + decoder;
    let total = by_component.values().sum::<usize>() + other;
    let (ft, tot) = (fine_tuned as f64, total as f64);
    let row = |c: &str, n: usize, of_ft: bool, of_total: bool| ParamRow {
        component: c.into(),
        parameters: n as f64,
        pct_of_ft: of_ft.then(|| pct(n as f64, ft)),
        pct_of_total: of_total.then(|| pct(n as f64, tot)),
    };
    let rows = vec![
        row("Memory Attention", memory, true, true),
        row("Total Memory module", memory, true, true),
        row("Mask decoder", decoder, true, true),
        row("Prompt encoders", prompts, false, true),
        row("Total parameters finetuned", fine_tuned, false, true),
        row("Image encoder", encoder, false, true),
        row("Total parameters", total, false, false),
    ];
    ParamReport { by_component, other, fine_tuned, total, rows }
}

/// Training and inference cost of one memory configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub mode: MemoryMode,
    pub memory_size: usize,
    pub train_peak_bytes: Option<usize>,
    pub train_secs: f64,
    pub infer_peak_bytes: Option<usize>,
    pub infer_secs: f64,
}

pub const COST_CSV_HEADER: &str =
    "method_conf,memory_size,train_memory_mb,train_time_min,infer_memory_mb,infer_time_s";

pub fn method_conf_label(mode: MemoryMode) -> &'static str {
    match mode {
        MemoryMode::None => "No Attention",
        MemoryMode::Sparse => "Sparse",
        MemoryMode::Dense => "Dense",
        MemoryMode::SparseDense => "Sparse + Dense",
    }
}

pub fn cost_csv(rows: &[CostRow]) -> String {
    let mb = |b: Option<usize>| b.map_or(String::new(), |b| format!("{:.3}", b as f64 / (1024.0 * 1024.0)));
    let mut out = format!("{COST_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{},{:.3}",
            method_conf_label(r.mode),
            r.memory_size,
            mb(r.train_peak_bytes),
            r.train_secs / 60.0,
            mb(r.infer_peak_bytes),
            r.infer_secs
        );
    }
    out
}

/// Per configuration: one training step over an episode of `interactions`
/// simulated interactions, then an inference session of the same length.
/// Peak memory is the live-heap high-water mark of each phase.
pub fn cost_harness(
    configs: &[(MemoryMode, usize)],
    case: &Case,
    base: &EngineConfig,
    train_cfg: &TrainConfig,
    interactions: usize,
    seed: u64,
    probe: &dyn MemoryProbe,
) -> Result<Vec<CostRow>> {
    let (volume, gt) = case;
    let normalized = volume.normalize()?;
    let mut rows = Vec::with_capacity(configs.len());
    for &(mode, n) in configs {
        let cfg = base.clone().with_memory(mode, n);
        let mut params = init_params(&cfg, seed)?;

        probe.reset_peak();
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ep = episode(&normalized, gt, &cfg, &params, interactions, train_cfg.freeze_encoder, &mut rng)?;
        let names: Vec<String> = ep.grads.keys().cloned().collect();
        let mut opt = AdamW::new(train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps, train_cfg.weight_decay);
        opt.step(&mut params, &names, &ep.grads, |_| train_cfg.lr_main);
        drop(ep);
        let train_secs = start.elapsed().as_secs_f64();
        let train_peak_bytes = probe.peak_bytes();

        probe.reset_peak();
        let start = Instant::now();
        run_interactive(volume, gt, &cfg, &params, interactions, seed)?;
        let infer_secs = start.elapsed().as_secs_f64();
        let infer_peak_bytes = probe.peak_bytes();
        rows.push(CostRow { mode, memory_size: n, train_peak_bytes, train_secs, infer_peak_bytes, infer_secs });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alloc::NoProbe;
    use crate::volcore::gen_synthetic;

    fn tiny_cases(n: u64) -> Vec<Case> {
        (0..n).map(|s| gen_synthetic(s, [8, 8, 8], 1).unwrap()).collect()
    }

    fn tiny_zoo(epochs: usize) -> ModelZoo {
        let mut cfg = ExperimentConfig::desk();
        cfg.engine = EngineConfig::tiny();
        cfg.train.epochs = epochs;
        cfg.train.milestones.clear();
        cfg.train.patch = crate::volcore::PatchSpec::cube(8);
        cfg.pool = 2;
        ModelZoo::with_pool(cfg, tiny_cases(2)).unwrap()
    }

    #[test]
    fn published_grids() {
        assert_eq!(MEMORY_SIZES, [10, 20, 30, 40, 50, 60, 80]);
        assert_eq!(ABLATION_BUDGETS, [5, 10, 20, 50]);
        assert_eq!(TABLE_BUDGETS, [1, 10, 20, 50, 150]);
        assert_eq!(COST_CONFIGS.len(), 10);
        assert_eq!(COST_INTERACTIONS, 150);
        assert_eq!(&MemoryMode::ALL[..], &[MemoryMode::None, MemoryMode::Sparse, MemoryMode::Dense, MemoryMode::SparseDense]);
    }

    #[test]
    fn corpus_layout() {
        let c = corpus(0).unwrap();
        assert_eq!(c.len(), 20);
        assert!(c.iter().all(|(v, g)| v.dims() == [32, 32, 32] && !g.is_empty()));
        let p = training_pool(2, 0).unwrap();
        assert_ne!(p[0].1, c[0].1);
    }

    #[test]
    fn curve_shape_and_determinism() {
        let cases = tiny_cases(3);
        let cfg = EngineConfig::tiny();
        let params = init_params(&cfg, 1).unwrap();
        let a = evaluate_curve("x", &cases, &cfg, &params, &[1, 3], 7).unwrap();
        let b = evaluate_curve("x", &cases, &cfg, &params, &[1, 3], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.clicks.len(), a.dice_mean.len());
        assert_eq!(a.dice_std.len(), 2);
        assert_eq!(a.n_cases, 3);
        assert!(a.dice_mean.iter().chain(&a.dice_std).all(|d| (0.0..=100.0).contains(d)));
        assert!(evaluate_curve("x", &cases, &cfg, &params, &[3, 1], 7).is_err());
        assert!(evaluate_curve("x", &cases, &cfg, &params, &[], 7).is_err());
        let csv = curves_csv(&[a]);
        assert!(csv.starts_with(CURVE_CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn untrained_zoo_is_rejected() {
        let mut zoo = tiny_zoo(0);
        let cases = tiny_cases(1);
        assert!(matches!(sweep_memory_size(&[2], &cases, &mut zoo, 1, &[1], 0), Err(Error::Untrained)));
        assert!(matches!(
            ablate_prompt_types(&[MemoryMode::Sparse], &[1], &[1], &cases, &mut zoo, 0),
            Err(Error::Untrained)
        ));
        assert!(matches!(
            table_grid(&[1.0], &[1], &[Method::NoMemory], &cases, &mut zoo, 0),
            Err(Error::Untrained)
        ));
    }

    #[test]
    fn zero_size_is_memory_free_model() {
        let mut zoo = tiny_zoo(1);
        let cases = tiny_cases(2);
        let sweep = sweep_memory_size(&[0, 2], &cases, &mut zoo, 1, &[1, 2], 3).unwrap();
        let cfg = zoo.engine(MemoryMode::None, 0);
        let none = zoo.model(MemoryMode::None, 0, 1, 3).unwrap().clone();
        let direct = evaluate_curve("N=0", &cases, &cfg, &none, &[1, 2], 3).unwrap();
        assert_eq!(sweep[0], direct);
        assert_eq!(sweep[1].label, "N=2");
    }

    #[test]
    fn shared_weights_train_once_per_mode() {
        let mut zoo = tiny_zoo(1);
        let cases = tiny_cases(1);
        sweep_memory_size(&[1, 2, 3], &cases, &mut zoo, 1, &[1], 0).unwrap();
        assert_eq!(zoo.trained(), 1);
        zoo.cfg.shared_size_weights = false;
        sweep_memory_size(&[1, 2], &cases, &mut zoo, 1, &[1], 0).unwrap();
        assert_eq!(zoo.trained(), 3);
    }

    #[test]
    fn ablation_grid_layout() {
        let mut zoo = tiny_zoo(1);
        let cases = tiny_cases(1);
        let grid = ablate_prompt_types(&MemoryMode::ALL, &[1, 2], &[1, 2], &cases, &mut zoo, 0).unwrap();
        assert_eq!(grid.len(), 8);
        assert_eq!(grid[0].mode, MemoryMode::None);
        assert_eq!(grid[1].train_size, 2);
        assert_eq!(grid[7].mode, MemoryMode::SparseDense);
    }

    #[test]
    fn table_shape_and_reproducibility() {
        let cases = tiny_cases(1);
        let run = || {
            let mut zoo = tiny_zoo(1);
            table_grid(&[0.5, 1.0], &[1, 2, 3], &Method::ALL, &cases, &mut zoo, 5).unwrap()
        };
        let t = run();
        assert_eq!(t.cells.len(), 3);
        assert!(t.cells.iter().all(|r| r.len() == 6));
        assert_eq!(t.header()[1], "zero_shot@0.5");
        assert_eq!(t.header()[6], "sparse_dense@1");
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().all(|l| l.split(',').count() == 7));
        assert_eq!(t, run());
    }

    #[test]
    fn train_size_rounding() {
        assert_eq!(train_size(0.1, 20), 2);
        assert_eq!(train_size(0.01, 20), 1);
        assert_eq!(train_size(1.0, 20), 20);
    }

    #[test]
    fn param_report_identity() {
        let params = init_params(&EngineConfig::tiny(), 0).unwrap();
        let r = count_params(&params);
        let brute: usize = params.params().map(|(_, t)| t.shape().iter().product::<usize>()).sum();
        assert_eq!(r.total, brute);
        assert_eq!(r.by_component.values().sum::<usize>() + r.other, brute);
        assert_eq!(r.other, 0);
        assert_eq!(r.rows.len(), 7);
        let csv = r.to_csv();
        assert!(csv.starts_with(PARAM_CSV_HEADER));
        let ft: f64 = r.rows[0].pct_of_ft.unwrap() + r.rows[2].pct_of_ft.unwrap();
        assert!((ft - 100.0).abs() < 1e-9);
    }

    #[test]
    fn reference_rows_match_published_shares() {
        let rows = reference_param_rows();
        assert_eq!(rows[0].parameters + rows[2].parameters, rows[3].parameters);
        let csv = reference_param_csv();
        assert!(csv.contains("Memory Attention,2.84M,29.79%,2.77%"));
        assert!(csv.contains("Total parameters,102.46M,-,-"));
    }

    #[test]
    fn cost_rows_follow_configs() {
        let case = gen_synthetic(0, [8, 8, 8], 1).unwrap();
        let configs = [(MemoryMode::None, 0), (MemoryMode::Sparse, 2), (MemoryMode::SparseDense, 3)];
        let rows = cost_harness(&configs, &case, &EngineConfig::tiny(), &TrainConfig::default(), 4, 0, &NoProbe).unwrap();
        let csv = cost_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], COST_CSV_HEADER);
        assert!(lines[1].starts_with("No Attention,0,,"));
        assert!(lines[3].starts_with("Sparse + Dense,3,"));
        assert_eq!(lines.len(), 4);
    }
}
