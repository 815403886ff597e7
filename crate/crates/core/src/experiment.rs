//! The end-to-end ablation: stage-1 flow matching, on-policy auto-labelled candidate groups,
//! stage-2 variants, and evaluation on a held-out test set. Shared by the CLI and tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalbench::{
    annotations_from_cells, categorize, evaluate_images, glyph_region_accuracy, sample_cases,
    BenchmarkEntry, EvalReport, SamplerMode, TestCase,
};
use crate::glyphkit::{
    build_group_synthetic, compose_ground_truth, corrupt_glyphs, mutate_condition_texts,
    random_condition, CandidateGroup, CanvasImage, Charset, Condition, CorruptionMagnitude,
    GroupSource, Rect, RegionAnnotation,
};
use crate::objectives::{implicit_reward_gaps, NoiseDraw, TrainHyper};
use crate::sampler::{euler_sample, SampleConfig};
use crate::train::{
    train_stage1, train_stage2, FlowExample, GroupExample, LossLog, Objective, StageConfig,
    TrainRun,
};
use crate::velocitynet::{ModelConfig, ModelParams, PreparedCondition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Symbols never shown in stage-1 training; they appear in stage-2 groups and the test set.
    pub held_out: Vec<char>,
    pub stage1_conditions: usize,
    /// Per-cell probability that a stage-1 training image carries a glyph error.
    pub stage1_error_rate: f64,
    pub stage1: StageConfig,
    pub stage2_groups: usize,
    pub stage2: StageConfig,
    pub hyper: TrainHyper,
    /// Sampling used to generate candidate groups and to evaluate.
    pub sample: SampleConfig,
    pub test_cases: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            held_out: vec!['田', '目', '回', '甲', '8', 'E'],
            stage1_conditions: 2000,
            stage1_error_rate: 0.6,
            stage1: StageConfig::stage1_default(),
            stage2_groups: 200,
            stage2: StageConfig::stage2_default(),
            hyper: TrainHyper {
                t_mult: 0.1,
                ..TrainHyper::default()
            },
            sample: SampleConfig::default(),
            test_cases: 150,
        }
    }
}

impl ExperimentConfig {
    pub fn train_pool(&self) -> Vec<char> {
        Charset::toy()
            .symbols()
            .into_iter()
            .filter(|c| !self.held_out.contains(c))
            .collect()
    }

    pub fn full_pool(&self) -> Vec<char> {
        Charset::toy().symbols()
    }

    fn canvas(&self) -> (usize, usize) {
        (self.model.image_size, self.model.image_size)
    }
}

/// Seed streams derived from one experiment seed so that every stage is independent.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Stage-1 conditions with their training images, carrying glyph errors at `stage1_error_rate`.
pub fn stage1_examples(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<(Condition, CanvasImage)>> {
    let (w, h) = cfg.canvas();
    let pool = cfg.train_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1));
    (0..cfg.stage1_conditions)
        .map(|_| {
            let c = random_condition(&pool, w, h, cfg.model.max_blocks, &mut rng)?;
            let clean = compose_ground_truth(&c, w, h)?;
            let (image, _) = corrupt_glyphs(
                &clean,
                &c,
                cfg.stage1_error_rate,
                CorruptionMagnitude::Max,
                &mut rng,
            )?;
            Ok((c, image))
        })
        .collect()
}

pub fn stage1_data(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<FlowExample>> {
    stage1_examples(cfg, seed)?
        .into_iter()
        .map(|(c, image)| {
            Ok(FlowExample {
                image,
                cond: PreparedCondition::new(&c, &cfg.model)?,
            })
        })
        .collect()
}

/// Stage-2 conditions: random layouts whose texts are re-drawn from the full charset.
pub fn stage2_conditions(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Condition>> {
    let (w, h) = cfg.canvas();
    let train_pool = cfg.train_pool();
    let full = cfg.full_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 2));
    (0..cfg.stage2_groups)
        .map(|_| {
            let c = random_condition(&train_pool, w, h, cfg.model.max_blocks, &mut rng)?;
            mutate_condition_texts(&c, &full, &mut rng)
        })
        .collect()
}

/// Test conditions drawn like stage-2 conditions from a separate seed stream.
pub fn test_set(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TestCase>> {
    let (w, h) = cfg.canvas();
    let train_pool = cfg.train_pool();
    let full = cfg.full_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 3));
    (0..cfg.test_cases)
        .map(|_| {
            let c = random_condition(&train_pool, w, h, cfg.model.max_blocks, &mut rng)?;
            let c = mutate_condition_texts(&c, &full, &mut rng)?;
            Ok(TestCase {
                category: categorize(&c, &cfg.held_out),
                condition: c,
            })
        })
        .collect()
}

/// Oracle-labelled groups: every member is the ground truth with cells corrupted at `rate`.
pub fn synthetic_groups(
    cfg: &ExperimentConfig,
    conditions: &[Condition],
    rate: f64,
    seed: u64,
) -> Result<Vec<CandidateGroup>> {
    let (w, h) = cfg.canvas();
    let n = cfg.hyper.group_size;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 9));
    conditions
        .iter()
        .map(|c| build_group_synthetic(c, n, &vec![rate; n], w, h, &mut rng))
        .collect()
}

/// Samples `group_size` images per condition from `model` and labels every cell with the
/// recognition oracle.
pub fn autolabel_groups(
    model: &ModelParams,
    conditions: &[Condition],
    group_size: usize,
    sample: &SampleConfig,
    seed: u64,
) -> Result<Vec<GroupExample>> {
    if group_size < 2 {
        return Err(Error::GroupTooSmall(group_size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 4));
    let seeds: Vec<u64> = conditions.iter().map(|_| rng.gen()).collect();
    conditions
        .par_iter()
        .zip(seeds)
        .map(|(c, s)| {
            let cond = PreparedCondition::new(c, model.config())?;
            let mut images = Vec::with_capacity(group_size);
            let mut annotations = Vec::with_capacity(group_size);
            for k in 0..group_size {
                let cfg = SampleConfig {
                    seed: s.wrapping_add(k as u64),
                    ..*sample
                };
                let img = euler_sample(model, &cond, &cfg)?.image;
                let acc = glyph_region_accuracy(&img, c)?;
                annotations.push(annotations_from_cells(c, &acc.cells)?);
                images.push(img);
            }
            let group =
                CandidateGroup::new(c.clone(), images, annotations, GroupSource::ModelAutolabel)?;
            Ok(GroupExample { cond, group })
        })
        .collect()
}

/// Mean implicit reward over winning (`M_i^+`) and losing (`M_i^-`) cell regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardGapSummary {
    pub winning_mean: f64,
    pub losing_mean: f64,
    pub winning_regions: usize,
    pub losing_regions: usize,
}

/// An image with per-block annotations, as scored by [`reward_gap_summary`].
#[derive(Debug, Clone, Copy)]
pub struct AnnotatedImage<'a> {
    pub cond: &'a PreparedCondition,
    pub condition: &'a Condition,
    pub image: &'a CanvasImage,
    pub annotations: &'a [RegionAnnotation],
}

/// Every member of every group.
pub fn group_images(groups: &[GroupExample]) -> Vec<AnnotatedImage<'_>> {
    groups
        .iter()
        .flat_map(|g| {
            g.group
                .images
                .iter()
                .zip(&g.group.annotations)
                .map(move |(image, annotations)| AnnotatedImage {
                    cond: &g.cond,
                    condition: &g.group.condition,
                    image,
                    annotations,
                })
        })
        .collect()
}

/// Evaluates the implicit reward on every character cell of `items`, with `n_mc` shared
/// noise draws per image. Cells hit by an incorrect rect are losing regions, the rest winning.
/// Cell rewards are normalized by cell token count so that regions of different size compare.
pub fn reward_gap_summary(
    theta: &ModelParams,
    reference: &ModelParams,
    items: &[AnnotatedImage<'_>],
    hyper: &TrainHyper,
    n_mc: usize,
    seed: u64,
) -> Result<RewardGapSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 5));
    let seeds: Vec<u64> = items.iter().map(|_| rng.gen()).collect();
    let per_image: Vec<(Vec<f64>, Vec<f64>)> = items
        .par_iter()
        .zip(seeds)
        .map(|(it, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let layout = &it.cond.layout;
            let draws: Vec<NoiseDraw> = (0..n_mc)
                .map(|_| NoiseDraw::sample(&mut rng, it.image.width, it.image.height))
                .collect();
            let mut cells = Vec::new();
            for (b, block) in it.condition.blocks.iter().enumerate() {
                let marked: Vec<&Rect> = it
                    .annotations
                    .iter()
                    .filter(|a| a.block_index == b)
                    .flat_map(|a| &a.incorrect_rects)
                    .collect();
                for rect in block.cell_rects() {
                    let bad = marked.iter().any(|r| r.intersects(&rect));
                    cells.push((crate::maskforge::rasterize_bbox(&rect, layout)?, bad));
                }
            }
            let region_masks: Vec<_> = cells.iter().map(|(m, _)| m.clone()).collect();
            let gaps = implicit_reward_gaps(
                theta,
                reference,
                it.image,
                it.cond,
                &region_masks,
                hyper,
                &draws,
            )?;
            let mut win = Vec::new();
            let mut lose = Vec::new();
            for ((m, bad), gap) in cells.iter().zip(gaps) {
                let v = gap / m.count() as f64;
                if *bad {
                    lose.push(v);
                } else {
                    win.push(v);
                }
            }
            Ok((win, lose))
        })
        .collect::<Result<_>>()?;
    let win: Vec<f64> = per_image
        .iter()
        .flat_map(|(w, _)| w.iter().copied())
        .collect();
    let lose: Vec<f64> = per_image
        .iter()
        .flat_map(|(_, l)| l.iter().copied())
        .collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(RewardGapSummary {
        winning_mean: mean(&win),
        losing_mean: mean(&lose),
        winning_regions: win.len(),
        losing_regions: lose.len(),
    })
}

/// Which stage-2 variants to train; `Stage1` is always evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    Stage1,
    Sft,
    MaskSft,
    Dpo,
    Rgdpo,
    RgdpoRrg,
    LambdaOne,
    LambdaZero,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Stage1 => "Stage1",
            Method::Sft => "SFT",
            Method::MaskSft => "MaskSFT",
            Method::Dpo => "DPO",
            Method::Rgdpo => "R-GDPO",
            Method::RgdpoRrg => "R-GDPO+RRG",
            Method::LambdaOne => "lambda_inter=1",
            Method::LambdaZero => "lambda_inter=0",
        }
    }

    /// The ablation table's column set.
    pub const TABLE: [Method; 7] = [
        Method::Stage1,
        Method::Sft,
        Method::MaskSft,
        Method::Rgdpo,
        Method::RgdpoRrg,
        Method::LambdaOne,
        Method::LambdaZero,
    ];
}

#[derive(Debug)]
pub struct AblationRun {
    pub seed: u64,
    pub stage1: ModelParams,
    pub stage1_log: Vec<LossLog>,
    pub checkpoints: BTreeMap<Method, ModelParams>,
    pub groups: Vec<GroupExample>,
    pub tests: Vec<TestCase>,
    pub reports: BTreeMap<Method, EvalReport>,
    /// Stage-1 samples of the test set, used as evaluation regions for the reward gap.
    pub stage1_images: Vec<CanvasImage>,
    /// R-GDPO against stage 1 on the oracle-labelled cells of `stage1_images`.
    pub eval_gap: Option<RewardGapSummary>,
}

impl AblationRun {
    pub fn glyph_acc(&self, m: Method) -> Option<f64> {
        self.reports.get(&m).map(|r| r.overall.glyph_acc)
    }
}

fn finished(run: TrainRun, what: &str) -> Result<TrainRun> {
    match run.failure {
        Some(e) => Err(Error::Config(format!("{what} stopped: {e}"))),
        None => Ok(run),
    }
}

/// Trains stage 1, builds auto-labelled groups, trains each requested stage-2 variant, and
/// evaluates everything on the test set. `progress` receives one-line status messages.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    methods: &[Method],
    seed: u64,
    mut progress: impl FnMut(&str),
) -> Result<AblationRun> {
    let init = ModelParams::init(&cfg.model, sub_seed(seed, 0))?;
    let data = stage1_data(cfg, seed)?;
    let s1 = finished(
        train_stage1(&init, &data, &cfg.stage1, sub_seed(seed, 6), |_| {})?,
        "stage 1",
    )?;
    progress(&format!(
        "seed {seed}: stage 1 loss {:.4} -> {:.4}",
        s1.log.first().map_or(f64::NAN, |l| l.loss),
        s1.log.last().map_or(f64::NAN, |l| l.loss)
    ));
    let stage1 = s1.params;
    let conditions = stage2_conditions(cfg, seed)?;
    let groups = autolabel_groups(
        &stage1,
        &conditions,
        cfg.hyper.group_size,
        &cfg.sample,
        seed,
    )?;
    let tests = test_set(cfg, seed)?;

    let mut checkpoints = BTreeMap::new();
    let mut trained: BTreeMap<(Objective, u64), ModelParams> = BTreeMap::new();
    for &m in methods {
        let (objective, hyper) = match m {
            Method::Stage1 | Method::RgdpoRrg => continue,
            Method::Sft => (Objective::Sft, cfg.hyper),
            Method::MaskSft => (Objective::MaskSft, cfg.hyper),
            Method::Dpo => (Objective::Dpo, cfg.hyper),
            Method::Rgdpo => (Objective::Rgdpo, cfg.hyper),
            Method::LambdaOne => (
                Objective::Rgdpo,
                TrainHyper {
                    lambda_inter: 1.0,
                    ..cfg.hyper
                },
            ),
            Method::LambdaZero => (
                Objective::Rgdpo,
                TrainHyper {
                    lambda_inter: 0.0,
                    ..cfg.hyper
                },
            ),
        };
        let key = (objective, hyper.lambda_inter.to_bits());
        if let Some(p) = trained.get(&key) {
            checkpoints.insert(m, p.clone());
            continue;
        }
        let run = finished(
            train_stage2(
                &stage1,
                &groups,
                objective,
                &hyper,
                &cfg.stage2,
                sub_seed(seed, 7),
                |_| {},
            )?,
            m.label(),
        )?;
        progress(&format!(
            "seed {seed}: {} loss {:.4} -> {:.4}",
            m.label(),
            run.log.first().map_or(f64::NAN, |l| l.loss),
            run.log.last().map_or(f64::NAN, |l| l.loss)
        ));
        trained.insert(key, run.params.clone());
        checkpoints.insert(m, run.params);
    }
    if methods.contains(&Method::RgdpoRrg) && !checkpoints.contains_key(&Method::Rgdpo) {
        let run = finished(
            train_stage2(
                &stage1,
                &groups,
                Objective::Rgdpo,
                &cfg.hyper,
                &cfg.stage2,
                sub_seed(seed, 7),
                |_| {},
            )?,
            "R-GDPO",
        )?;
        checkpoints.insert(Method::Rgdpo, run.params);
    }

    let eval_cfg = SampleConfig {
        seed: sub_seed(seed, 8),
        ..cfg.sample
    };
    let stage1_entry = BenchmarkEntry {
        name: Method::Stage1.label().into(),
        model: &stage1,
        reference: None,
        mode: SamplerMode::Plain,
    };
    let stage1_images = sample_cases(&stage1_entry, &tests, &eval_cfg)?;
    let mut reports = BTreeMap::new();
    for &m in methods {
        let entry = match m {
            Method::Stage1 => BenchmarkEntry {
                name: m.label().into(),
                model: &stage1,
                reference: None,
                mode: SamplerMode::Plain,
            },
            Method::RgdpoRrg => BenchmarkEntry {
                name: m.label().into(),
                model: &checkpoints[&Method::Rgdpo],
                reference: Some(&stage1),
                mode: SamplerMode::Rrg {
                    omega: cfg.sample.omega,
                },
            },
            _ => BenchmarkEntry {
                name: m.label().into(),
                model: &checkpoints[&m],
                reference: None,
                mode: SamplerMode::Plain,
            },
        };
        let images = match m {
            Method::Stage1 => stage1_images.clone(),
            _ => sample_cases(&entry, &tests, &eval_cfg)?,
        };
        let report = evaluate_images(&entry.name, &tests, &images)?;
        progress(&format!(
            "seed {seed}: {} Glyph.Acc {:.4}",
            m.label(),
            report.overall.glyph_acc
        ));
        reports.insert(m, report);
    }
    let eval_gap = match checkpoints.get(&Method::Rgdpo) {
        Some(theta) => {
            let gap =
                evaluation_region_gap(theta, &stage1, &tests, &stage1_images, &cfg.hyper, seed)?;
            progress(&format!(
                "seed {seed}: reward gap winning {:.4} ({}) losing {:.4} ({})",
                gap.winning_mean, gap.winning_regions, gap.losing_mean, gap.losing_regions
            ));
            Some(gap)
        }
        None => None,
    };
    Ok(AblationRun {
        seed,
        stage1,
        stage1_log: s1.log,
        checkpoints,
        groups,
        tests,
        reports,
        stage1_images,
        eval_gap,
    })
}

/// Noise draws per image when measuring the reward gap.
pub const GAP_DRAWS: usize = 4;

/// Reward gap of `theta` over `reference` on reference samples of the test set, with every
/// cell labelled by the recognition oracle.
pub fn evaluation_region_gap(
    theta: &ModelParams,
    reference: &ModelParams,
    tests: &[TestCase],
    images: &[CanvasImage],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<RewardGapSummary> {
    if tests.len() != images.len() {
        return Err(Error::shape(tests.len(), images.len()));
    }
    let prepared = tests
        .iter()
        .zip(images)
        .map(|(t, img)| {
            let cond = PreparedCondition::new(&t.condition, reference.config())?;
            let acc = glyph_region_accuracy(img, &t.condition)?;
            Ok((cond, annotations_from_cells(&t.condition, &acc.cells)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<AnnotatedImage<'_>> = tests
        .iter()
        .zip(images)
        .zip(&prepared)
        .map(|((t, image), (cond, annotations))| AnnotatedImage {
            cond,
            condition: &t.condition,
            image,
            annotations,
        })
        .collect();
    reward_gap_summary(theta, reference, &items, hyper, GAP_DRAWS, seed)
}
