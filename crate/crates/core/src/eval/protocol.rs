use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_pool, precision_at_1, EvalError, EvalPool, POOL_SIZE};
use crate::data::{generate_corpus, CorpusSpec, Generator, MetaTask, Split, TrainingInstance, Vocab, DEFAULT_CODE_SEED, PATCH_DIM};
use crate::model::{ModelConfig, ModelParams};
use crate::pipeline::{begin_stage, train, StageConfig, TextObjective, TrainerState};
use crate::rng;

const TAG_CORPUS: u64 = 0xc0;
const TAG_POOL: u64 = 0x9001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    Full,
    NoStage1,
    NoStage2,
    Stage1MaeOnly,
    Stage1MntpOnly,
    Stage1MlmVariant,
    ContrastiveOnly,
}

impl Arm {
    pub const ALL: [Arm; 7] =
        [Arm::Full, Arm::NoStage1, Arm::NoStage2, Arm::Stage1MaeOnly, Arm::Stage1MntpOnly, Arm::Stage1MlmVariant, Arm::ContrastiveOnly];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoStage1 => "no-stage1",
            Arm::NoStage2 => "no-stage2",
            Arm::Stage1MaeOnly => "stage1-mae-only",
            Arm::Stage1MntpOnly => "stage1-mntp-only",
            Arm::Stage1MlmVariant => "stage1-mlm-variant",
            Arm::ContrastiveOnly => "contrastive-only",
        }
    }

    pub fn parse(s: &str) -> Result<Arm, EvalError> {
        let s = s.trim().to_ascii_lowercase();
        Arm::ALL.into_iter().find(|a| a.name() == s).ok_or(EvalError::UnknownArm(s))
    }

    fn recipe(self, bridge_ratio: f64) -> Recipe {
        let (warmup, bridge) = match self {
            Arm::Full => (Some(Warmup::Full), true),
            Arm::NoStage1 => (None, true),
            Arm::NoStage2 => (Some(Warmup::Full), false),
            Arm::Stage1MaeOnly => (Some(Warmup::MaeOnly), true),
            Arm::Stage1MntpOnly => (Some(Warmup::MntpOnly), true),
            Arm::Stage1MlmVariant => (Some(Warmup::Mlm), true),
            Arm::ContrastiveOnly => (None, false),
        };
        Recipe { warmup, bridge: bridge.then_some(bridge_ratio.to_bits()) }
    }
}

/// Stage-1 objective variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Warmup {
    Full,
    MaeOnly,
    MntpOnly,
    Mlm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct Recipe {
    warmup: Option<Warmup>,
    /// Stage-2 Block-B ratio as raw bits, or no stage 2.
    bridge: Option<u64>,
}

/// Everything that determines an experiment apart from the seed list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub model: ModelConfig,
    pub code_seed: u64,
    pub hard: bool,
    pub train_counts: Vec<(MetaTask, usize)>,
    /// Paired data for stage 3, drawn separately from the stage 1-2 corpus.
    pub contrastive_counts: Vec<(MetaTask, usize)>,
    pub eval_counts: Vec<(MetaTask, usize)>,
    pub pool_size: usize,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

fn stage(stage: u8, lr: f64, epochs: usize) -> StageConfig {
    StageConfig { learning_rate: lr, epochs, ..StageConfig::new(stage) }
}

impl Protocol {
    /// Desk-scale setting used by the acceptance suite.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig {
                d_model: 64,
                n_layers: 2,
                n_heads: 2,
                vocab_size: Vocab::standard().len(),
                patch_dim: PATCH_DIM,
                max_seq: 48,
                mae_decoder_layers: 1,
            },
            code_seed: DEFAULT_CODE_SEED,
            hard: false,
            train_counts: vec![(MetaTask::Retrieval, 2000), (MetaTask::Classification, 500), (MetaTask::Vqa, 500)],
            contrastive_counts: vec![(MetaTask::Retrieval, 2000), (MetaTask::Classification, 500), (MetaTask::Vqa, 500)],
            eval_counts: vec![(MetaTask::Retrieval, 500), (MetaTask::Classification, 200), (MetaTask::Vqa, 200)],
            pool_size: POOL_SIZE,
            stage1: stage(1, 3e-4, 1),
            stage2: stage(2, 3e-4, 10),
            stage3: stage(3, 3e-4, 6),
        }
    }

    /// Seconds-scale setting for smoke tests.
    pub fn smoke() -> Self {
        let mut p = Self::desk();
        p.model.d_model = 16;
        p.model.n_layers = 1;
        p.train_counts = vec![(MetaTask::Retrieval, 48), (MetaTask::Classification, 16), (MetaTask::Vqa, 16)];
        p.contrastive_counts = p.train_counts.clone();
        p.eval_counts = vec![(MetaTask::Retrieval, 24), (MetaTask::Classification, 8), (MetaTask::Vqa, 8)];
        p.pool_size = 16;
        for s in [&mut p.stage1, &mut p.stage2, &mut p.stage3] {
            s.batch_size = 16;
            s.epochs = 1;
        }
        p
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        self.model.validate()?;
        for (want, cfg) in [(1, &self.stage1), (2, &self.stage2), (3, &self.stage3)] {
            if cfg.stage != want {
                return Err(EvalError::Protocol(format!("stage{want} config says stage {}", cfg.stage)));
            }
            cfg.validate()?;
        }
        let empty = |c: &[(MetaTask, usize)]| c.iter().all(|&(_, n)| n == 0);
        if empty(&self.train_counts) || empty(&self.contrastive_counts) || empty(&self.eval_counts) {
            return Err(EvalError::Protocol("empty train, contrastive or eval corpus".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 prefix of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("protocol serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn seeded(&self, cfg: &StageConfig, seed: u64) -> StageConfig {
        StageConfig { root_seed: seed, ..cfg.clone() }
    }

    /// The configured hyperparameters of stage 1, 2 or 3.
    pub fn stage_config(&self, stage: u8) -> StageConfig {
        match stage {
            1 => self.stage1.clone(),
            2 => self.stage2.clone(),
            _ => self.stage3.clone(),
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Corpus, pools and cached checkpoints of one seed, shared across arms.
pub struct SeedRun<'a> {
    pub protocol: &'a Protocol,
    pub seed: u64,
    pub train: Vec<TrainingInstance>,
    pub contrastive: Vec<TrainingInstance>,
    pub eval: Vec<TrainingInstance>,
    pub pools: Vec<EvalPool>,
    stage1: HashMap<Warmup, TrainerState>,
    stage2: HashMap<(Option<Warmup>, u64), TrainerState>,
    finals: HashMap<Recipe, Vec<(MetaTask, f64)>>,
    progress: &'a mut dyn FnMut(&str),
}

impl<'a> SeedRun<'a> {
    pub fn new(protocol: &'a Protocol, seed: u64, progress: &'a mut dyn FnMut(&str)) -> Result<Self, EvalError> {
        protocol.validate()?;
        let gen = Generator::new(protocol.code_seed)?;
        let root = rng::derive_seed(seed, &[TAG_CORPUS]);
        let corpus = |split, counts: &[(MetaTask, usize)]| {
            let spec = CorpusSpec { root_seed: root, split, counts: counts.to_vec(), hard: protocol.hard };
            generate_corpus(&gen, &spec).into_iter().map(|r| r.instance).collect::<Vec<_>>()
        };
        let train = corpus(Split::Pretrain, &protocol.train_counts);
        let contrastive = corpus(Split::Contrastive, &protocol.contrastive_counts);
        let eval = corpus(Split::Eval, &protocol.eval_counts);
        let mut pools = Vec::new();
        for &(task, n) in &protocol.eval_counts {
            if n == 0 {
                continue;
            }
            let items: Vec<TrainingInstance> = eval.iter().filter(|i| i.meta_task == task).cloned().collect();
            pools.push(build_pool(task, &items, &gen.vocab, protocol.pool_size, rng::derive_seed(seed, &[TAG_POOL]))?);
        }
        Ok(Self { protocol, seed, train, contrastive, eval, pools, stage1: HashMap::new(), stage2: HashMap::new(), finals: HashMap::new(), progress })
    }

    fn run(&mut self, cfg: StageConfig, init: Option<TrainerState>, label: &str) -> Result<TrainerState, EvalError> {
        let started = std::time::Instant::now();
        let corpus = if cfg.stage == 3 { &self.contrastive } else { &self.train };
        let mut state = begin_stage(cfg, &self.protocol.model, init, true)?;
        train(&mut state, corpus, None, &mut |_| {})?;
        let last = state.metrics.last().map_or(f64::NAN, |m| m.loss.total);
        (self.progress)(&format!(
            "seed {} {label}: {} steps, final loss {last:.4}, {:.1}s",
            self.seed,
            state.step,
            started.elapsed().as_secs_f64()
        ));
        Ok(state)
    }

    fn warmup(&mut self, w: Warmup) -> Result<TrainerState, EvalError> {
        if let Some(s) = self.stage1.get(&w) {
            return Ok(s.clone());
        }
        let base = self.protocol.seeded(&self.protocol.stage1, self.seed);
        let cfg = match w {
            Warmup::Full => base,
            Warmup::MaeOnly => StageConfig { text_objective: TextObjective::None, ..base },
            Warmup::MntpOnly => StageConfig { mae_weight: 0.0, ..base },
            Warmup::Mlm => StageConfig { mae_weight: 0.0, text_objective: TextObjective::Mlm, ..base },
        };
        let state = self.run(cfg, None, &format!("stage1 {w:?}"))?;
        self.stage1.insert(w, state.clone());
        Ok(state)
    }

    /// Stage-2 state after the given warm-up, at a Block-B mask ratio.
    pub fn bridge(&mut self, warmup_full: bool, ratio: f64) -> Result<TrainerState, EvalError> {
        self.bridge_after(warmup_full.then_some(Warmup::Full), ratio)
    }

    fn bridge_after(&mut self, w: Option<Warmup>, ratio: f64) -> Result<TrainerState, EvalError> {
        let key = (w, ratio.to_bits());
        if let Some(s) = self.stage2.get(&key) {
            return Ok(s.clone());
        }
        let init = w.map(|w| self.warmup(w)).transpose()?;
        let cfg = StageConfig { blockb_ratio: ratio, ..self.protocol.seeded(&self.protocol.stage2, self.seed) };
        let state = self.run(cfg, init, &format!("stage2 after {w:?} ratio {ratio}"))?;
        self.stage2.insert(key, state.clone());
        Ok(state)
    }

    fn finish(&mut self, recipe: Recipe) -> Result<Vec<(MetaTask, f64)>, EvalError> {
        if let Some(r) = self.finals.get(&recipe) {
            return Ok(r.clone());
        }
        let init = match recipe.bridge {
            Some(bits) => Some(self.bridge_after(recipe.warmup, f64::from_bits(bits))?),
            None => recipe.warmup.map(|w| self.warmup(w)).transpose()?,
        };
        let cfg = self.protocol.seeded(&self.protocol.stage3, self.seed);
        let state = self.run(cfg, init, &format!("stage3 {recipe:?}"))?;
        let scores = self.evaluate(&state.params)?;
        self.finals.insert(recipe, scores.clone());
        Ok(scores)
    }

    pub fn evaluate(&self, params: &ModelParams) -> Result<Vec<(MetaTask, f64)>, EvalError> {
        self.pools.iter().map(|p| Ok((p.meta_task, precision_at_1(p, params)?))).collect()
    }

    /// P@1 per meta-task after training one ablation arm.
    pub fn arm(&mut self, arm: Arm) -> Result<Vec<(MetaTask, f64)>, EvalError> {
        self.finish(arm.recipe(self.protocol.stage2.blockb_ratio))
    }

    /// P@1 per meta-task of the full pipeline at another Block-B ratio.
    pub fn sweep_point(&mut self, ratio: f64) -> Result<Vec<(MetaTask, f64)>, EvalError> {
        self.finish(Arm::Full.recipe(ratio))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub arm: String,
    pub meta_task: String,
    pub per_seed: Vec<f64>,
}

impl ReportRow {
    /// Median over seeds.
    pub fn p_at_1(&self) -> f64 {
        median(&self.per_seed)
    }
}

/// Per-arm, per-meta-task P@1 with an unweighted `mean` row per arm.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

pub const REPORT_HEADER: &str = "arm,meta_task,p_at_1,seeds,config_hash";

impl Report {
    pub fn new(protocol: &Protocol, seeds: &[u64]) -> Self {
        Self { rows: Vec::new(), seeds: seeds.to_vec(), config_hash: protocol.config_hash() }
    }

    /// Adds an arm from its per-seed results, which list meta-tasks in the
    /// same order for every seed.
    pub fn push(&mut self, arm: &str, per_seed: &[Vec<(MetaTask, f64)>]) {
        let Some(first) = per_seed.first() else { return };
        for (k, &(task, _)) in first.iter().enumerate() {
            self.rows.push(ReportRow {
                arm: arm.to_string(),
                meta_task: task.name().to_string(),
                per_seed: per_seed.iter().map(|s| s[k].1).collect(),
            });
        }
        let means = per_seed.iter().map(|s| s.iter().map(|&(_, p)| p).sum::<f64>() / s.len() as f64).collect();
        self.rows.push(ReportRow { arm: arm.to_string(), meta_task: "mean".into(), per_seed: means });
    }

    pub fn get(&self, arm: &str, meta_task: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.arm == arm && r.meta_task == meta_task)
    }

    pub fn to_csv(&self) -> String {
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6},{},{}\n", r.arm, r.meta_task, r.p_at_1(), seeds, self.config_hash));
        }
        out
    }
}

pub fn sweep_label(ratio: f64) -> String {
    format!("ratio={ratio:.2}")
}

/// Trains each arm for every seed and reports P@1 per arm.
pub fn run_ablation(protocol: &Protocol, arms: &[Arm], seeds: &[u64], progress: &mut dyn FnMut(&str)) -> Result<Report, EvalError> {
    let mut results: Vec<Vec<Vec<(MetaTask, f64)>>> = vec![Vec::new(); arms.len()];
    for &seed in seeds {
        let mut run = SeedRun::new(protocol, seed, progress)?;
        for (a, &arm) in arms.iter().enumerate() {
            results[a].push(run.arm(arm)?);
        }
    }
    let mut report = Report::new(protocol, seeds);
    for (arm, res) in arms.iter().zip(&results) {
        report.push(arm.name(), res);
    }
    Ok(report)
}

/// Runs stages 2 and 3 after the full warm-up at each Block-B ratio.
pub fn run_mask_sweep(protocol: &Protocol, ratios: &[f64], seeds: &[u64], progress: &mut dyn FnMut(&str)) -> Result<Report, EvalError> {
    if let Some(r) = ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(EvalError::Protocol(format!("ratio {r} outside (0, 1]")));
    }
    let mut results: Vec<Vec<Vec<(MetaTask, f64)>>> = vec![Vec::new(); ratios.len()];
    for &seed in seeds {
        let mut run = SeedRun::new(protocol, seed, progress)?;
        for (k, &r) in ratios.iter().enumerate() {
            results[k].push(run.sweep_point(r)?);
        }
    }
    let mut report = Report::new(protocol, seeds);
    for (&r, res) in ratios.iter().zip(&results) {
        report.push(&sweep_label(r), res);
    }
    Ok(report)
}
