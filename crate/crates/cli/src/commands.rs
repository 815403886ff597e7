use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use glyphforge_core::checkpoint::{sha256_file, stage_tag, write_atomic, Checkpoint};
use glyphforge_core::dataset::{
    decode_pgm, encode_pgm, ConditionEntry, Dataset, GroupEntry, Split,
};
use glyphforge_core::evalbench::{
    annotations_from_cells, categorize, evaluate_images, format_table, glyph_region_accuracy,
    reports_json, sample_cases, BenchmarkEntry, EvalReport, SamplerMode, TestCase,
};
use glyphforge_core::experiment::{
    autolabel_groups, stage1_examples, stage2_conditions, sub_seed, synthetic_groups, test_set,
};
use glyphforge_core::glyphkit::{CandidateGroup, Condition, GroupSource};
use glyphforge_core::sampler::{euler_sample, rrg_sample, trace_csv, SampleConfig};
use glyphforge_core::train::{
    train_stage1, train_stage2, FlowExample, GroupExample, LossLog, Objective,
};
use glyphforge_core::velocitynet::{ModelParams, PreparedCondition};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

fn log_line(entry: &LossLog) {
    eprintln!("step {:>6}  loss {:.6}", entry.step, entry.loss);
}

fn group_dir(id: &str) -> String {
    format!("images/groups/{id}")
}

fn push_group(
    ds: &mut Dataset,
    id: String,
    condition_id: &str,
    group: &CandidateGroup,
) -> Result<()> {
    let dir = group_dir(&id);
    let mut images = Vec::with_capacity(group.len());
    for (k, img) in group.images.iter().enumerate() {
        let rel = format!("{dir}/{k}.pgm");
        ds.write_image(&rel, img)?;
        images.push(rel);
    }
    ds.manifest.groups.push(GroupEntry {
        id,
        condition_id: condition_id.into(),
        source: group.source,
        images,
        annotations: group.annotations.clone(),
        revision: 0,
    });
    Ok(())
}

/// Writes stage-1 conditions with training images, stage-2 conditions with synthetic groups,
/// and test conditions.
pub fn gen_data(cfg: &RunConfig, root: &Path, force: bool) -> Result<Dataset> {
    let e = &cfg.experiment;
    let seed = cfg.seed;
    let mut ds = Dataset::create(root, e.model.image_size, e.model.image_size);
    if ds.manifest_path().exists() && !force {
        bail!(
            "{} already exists; pass --force to overwrite it",
            ds.manifest_path().display()
        );
    }
    for (i, (c, img)) in stage1_examples(e, seed)?.into_iter().enumerate() {
        let rel = format!("images/stage1/{i:05}.pgm");
        ds.write_image(&rel, &img)?;
        ds.manifest
            .conditions
            .push(entry(format!("s1-{i:05}"), &c, Split::Stage1, Some(rel)));
    }
    let stage2 = stage2_conditions(e, seed)?;
    for (i, c) in stage2.iter().enumerate() {
        ds.manifest
            .conditions
            .push(entry(format!("s2-{i:05}"), c, Split::Stage2, None));
    }
    let n_syn = cfg.synthetic_groups.min(stage2.len());
    for (i, g) in synthetic_groups(e, &stage2[..n_syn], cfg.synthetic_error_rate, seed)?
        .iter()
        .enumerate()
    {
        push_group(&mut ds, format!("syn-s2-{i:05}"), &format!("s2-{i:05}"), g)?;
    }
    for (i, t) in test_set(e, seed)?.iter().enumerate() {
        ds.manifest
            .conditions
            .push(entry(format!("t-{i:05}"), &t.condition, Split::Test, None));
    }
    ds.save()?;
    Ok(ds)
}

fn entry(id: String, c: &Condition, split: Split, image: Option<String>) -> ConditionEntry {
    ConditionEntry {
        id,
        prompt_id: c.prompt_id,
        blocks: c.blocks.clone(),
        split,
        image,
    }
}

/// Flow-matching training on the dataset's stage-1 images. On a non-finite loss the last
/// good parameters are still written before the error is returned.
pub fn train_stage1_cmd(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<Checkpoint> {
    let e = &cfg.experiment;
    let mut data = Vec::new();
    for c in ds.manifest.conditions_in(Split::Stage1) {
        let rel = c
            .image
            .as_ref()
            .ok_or_else(|| anyhow!("stage-1 condition {} has no image", c.id))?;
        data.push(FlowExample {
            cond: PreparedCondition::new(&c.condition(), &e.model)?,
            image: ds.read_image(rel)?,
        });
    }
    let init = ModelParams::init(&e.model, sub_seed(cfg.seed, 0))?;
    let run = train_stage1(&init, &data, &e.stage1, sub_seed(cfg.seed, 6), log_line)?;
    let steps = run.log.last().map_or(0, |l| l.step);
    let ck = Checkpoint::new(run.params, cfg.seed, "stage1", steps);
    ck.save(out)?;
    if let Some(err) = run.failure {
        bail!("{err}; last good parameters written to {}", out.display());
    }
    Ok(ck)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GroupMode {
    SyntheticOracle,
    ModelAutolabel,
}

/// Builds one group per stage-2 condition. Existing groups with the same id are replaced
/// unless they are human-sourced or have accepted label edits.
pub fn gen_groups(
    cfg: &RunConfig,
    ds: &mut Dataset,
    mode: GroupMode,
    checkpoint: Option<&Path>,
) -> Result<usize> {
    let e = &cfg.experiment;
    let entries: Vec<ConditionEntry> = ds.manifest.conditions_in(Split::Stage2).cloned().collect();
    let conds: Vec<Condition> = entries.iter().map(ConditionEntry::condition).collect();
    let (prefix, groups) = match mode {
        GroupMode::SyntheticOracle => (
            "syn",
            synthetic_groups(e, &conds, cfg.synthetic_error_rate, cfg.seed)?,
        ),
        GroupMode::ModelAutolabel => {
            let path = checkpoint.ok_or_else(|| anyhow!("model-autolabel needs --checkpoint"))?;
            let ck = Checkpoint::load(path)?;
            let built =
                autolabel_groups(&ck.params, &conds, e.hyper.group_size, &e.sample, cfg.seed)?;
            let stored = built
                .into_iter()
                .map(|g| relabel_quantized(g.group))
                .collect::<Result<Vec<_>>>()?;
            ("auto", stored)
        }
    };
    let mut written = 0;
    for (c, g) in entries.iter().zip(&groups) {
        let id = format!("{prefix}-{}", c.id);
        if let Some(pos) = ds.manifest.groups.iter().position(|x| x.id == id) {
            let old = &ds.manifest.groups[pos];
            if old.source == GroupSource::Human || old.revision > 0 {
                eprintln!("keeping {id}: it carries human labels");
                continue;
            }
            ds.manifest.groups.remove(pos);
        }
        push_group(ds, id, &c.id, g)?;
        written += 1;
    }
    ds.save()?;
    Ok(written)
}

/// Re-scores a group on its 8-bit images so the labels describe exactly what is stored.
fn relabel_quantized(g: CandidateGroup) -> Result<CandidateGroup> {
    let mut images = Vec::with_capacity(g.len());
    let mut annotations = Vec::with_capacity(g.len());
    for img in &g.images {
        let q = decode_pgm(&encode_pgm(img))?;
        let acc = glyph_region_accuracy(&q, &g.condition)?;
        annotations.push(annotations_from_cells(&g.condition, &acc.cells)?);
        images.push(q);
    }
    Ok(CandidateGroup::new(
        g.condition,
        images,
        annotations,
        g.source,
    )?)
}

pub struct Stage2Args<'a> {
    pub objective: Objective,
    pub stage1: &'a Path,
    pub lambda_inter: Option<f64>,
    pub beta: Option<f64>,
    pub source: Option<GroupSource>,
    pub out: &'a Path,
}

pub fn train_stage2_cmd(cfg: &RunConfig, ds: &Dataset, args: &Stage2Args) -> Result<Checkpoint> {
    let e = &cfg.experiment;
    let reference = Checkpoint::load(args.stage1)?;
    if reference.header.stage != "stage1" {
        bail!(
            "{} is a {} checkpoint; stage 2 starts from a stage1 checkpoint",
            args.stage1.display(),
            reference.header.stage
        );
    }
    let parent = sha256_file(args.stage1)?;
    let mut hyper = e.hyper;
    if let Some(l) = args.lambda_inter {
        hyper.lambda_inter = l;
    }
    if let Some(b) = args.beta {
        hyper.beta = b;
    }
    let mut groups = Vec::new();
    for g in &ds.manifest.groups {
        if args.source.is_some_and(|s| s != g.source) {
            continue;
        }
        let group = ds.load_group(&g.id)?;
        groups.push(GroupExample {
            cond: PreparedCondition::new(&group.condition, &reference.header.config)?,
            group,
        });
    }
    let run = train_stage2(
        &reference.params,
        &groups,
        args.objective,
        &hyper,
        &e.stage2,
        sub_seed(cfg.seed, 7),
        log_line,
    )?;
    let steps = run.log.last().map_or(0, |l| l.step);
    let mut ck = Checkpoint::new(run.params, cfg.seed, stage_tag(args.objective), steps);
    ck.header.objective = Some(args.objective);
    ck.header.hyper = Some(hyper);
    ck.header.parent_sha256 = Some(parent);
    ck.save(args.out)?;
    if let Some(err) = run.failure {
        bail!(
            "{err}; last good parameters written to {}",
            args.out.display()
        );
    }
    Ok(ck)
}

/// Loads a tuned checkpoint and its reference, checking that the tuned one was trained from it.
fn load_pair(theta: &Path, reference: &Path) -> Result<(Checkpoint, Checkpoint)> {
    let t = Checkpoint::load(theta)?;
    let r = Checkpoint::load(reference)?;
    if t.header.config != r.header.config {
        return Err(glyphforge_core::Error::CheckpointMismatch(format!(
            "{} and {} have different model configs",
            theta.display(),
            reference.display()
        ))
        .into());
    }
    if let Some(parent) = &t.header.parent_sha256 {
        if *parent != sha256_file(reference)? {
            return Err(glyphforge_core::Error::CheckpointMismatch(format!(
                "{} was not trained from {}",
                theta.display(),
                reference.display()
            ))
            .into());
        }
    }
    Ok((t, r))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub reference: Option<String>,
    pub mode: SamplerMode,
    pub steps: usize,
    pub omega: f64,
    pub seed: u64,
    pub images: Vec<SampledImage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampledImage {
    pub condition_id: String,
    pub file: String,
    pub seed: u64,
}

pub struct SampleArgs<'a> {
    pub checkpoint: &'a Path,
    pub reference: Option<&'a Path>,
    pub rrg: bool,
    pub sample: SampleConfig,
    pub conditions: Vec<(String, Condition)>,
    pub trace: bool,
    pub out: &'a Path,
}

/// Samples every condition with seed `sample.seed + i` into `out`, plus `metadata.json`.
pub fn sample_cmd(args: &SampleArgs) -> Result<SampleMetadata> {
    args.sample.validate()?;
    let (theta, reference) = match (args.rrg, args.reference) {
        (true, Some(r)) => {
            let (t, r) = load_pair(args.checkpoint, r)?;
            (t, Some(r))
        }
        (true, None) => bail!("--rrg needs --reference"),
        (false, _) => (Checkpoint::load(args.checkpoint)?, None),
    };
    std::fs::create_dir_all(args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut images = Vec::new();
    for (i, (id, c)) in args.conditions.iter().enumerate() {
        let prep = PreparedCondition::new(c, &theta.header.config)?;
        let cfg = SampleConfig {
            seed: args.sample.seed.wrapping_add(i as u64),
            ..args.sample
        };
        let out = match &reference {
            Some(r) => {
                let mut traces = Vec::new();
                let out = rrg_sample(&theta.params, &r.params, &prep, &cfg, |t| traces.push(*t))?;
                if args.trace {
                    write_atomic(
                        &args.out.join(format!("{id}.trace.csv")),
                        trace_csv(&traces).as_bytes(),
                    )?;
                }
                out
            }
            None => euler_sample(&theta.params, &prep, &cfg)?,
        };
        let file = format!("{id}.pgm");
        write_atomic(&args.out.join(&file), &encode_pgm(&out.image))?;
        images.push(SampledImage {
            condition_id: id.clone(),
            file,
            seed: cfg.seed,
        });
    }
    let meta = SampleMetadata {
        checkpoint: args.checkpoint.display().to_string(),
        checkpoint_sha256: sha256_file(args.checkpoint)?,
        reference: args
            .reference
            .filter(|_| args.rrg)
            .map(|p| p.display().to_string()),
        mode: if args.rrg {
            SamplerMode::Rrg {
                omega: args.sample.omega,
            }
        } else {
            SamplerMode::Plain
        },
        steps: args.sample.steps,
        omega: args.sample.omega,
        seed: args.sample.seed,
        images,
    };
    write_atomic(
        &args.out.join("metadata.json"),
        &serde_json::to_vec_pretty(&meta)?,
    )?;
    Ok(meta)
}

/// Conditions from a JSON file holding an array of `{prompt_id, blocks}` objects.
pub fn read_conditions(
    path: &Path,
    width: usize,
    height: usize,
) -> Result<Vec<(String, Condition)>> {
    let text = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let conds: Vec<Condition> =
        serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))?;
    conds
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            c.validate(width, height)?;
            Ok((format!("c-{i:05}"), c))
        })
        .collect()
}

pub fn split_conditions(ds: &Dataset, split: Split) -> Vec<(String, Condition)> {
    ds.manifest
        .conditions_in(split)
        .map(|c| (c.id.clone(), c.condition()))
        .collect()
}

/// One evaluated column: `label=path`, sampled plainly or with RRG against the reference.
#[derive(Debug, Clone)]
pub struct EvalModel {
    pub label: String,
    pub path: PathBuf,
    pub rrg: bool,
}

/// A `label>=value` floor on overall Glyph.Acc.
#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    pub label: String,
    pub min_glyph_acc: f64,
}

impl std::str::FromStr for Assertion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (label, v) = s
            .split_once(">=")
            .ok_or_else(|| format!("expected LABEL>=VALUE, got {s:?}"))?;
        let min_glyph_acc = v
            .trim()
            .parse()
            .map_err(|_| format!("bad threshold in {s:?}"))?;
        Ok(Assertion {
            label: label.trim().into(),
            min_glyph_acc,
        })
    }
}

pub fn parse_labeled(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (label, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected LABEL=PATH, got {s:?}"))?;
    if label.is_empty() || path.is_empty() {
        return Err(format!("expected LABEL=PATH, got {s:?}"));
    }
    Ok((label.into(), PathBuf::from(path)))
}

pub struct EvalArgs<'a> {
    pub models: Vec<EvalModel>,
    pub reference: Option<&'a Path>,
    pub omega: f64,
    pub asserts: Vec<Assertion>,
    pub out: Option<&'a Path>,
}

/// Evaluates each model on the dataset's test split. Returns the reports and the failed
/// assertions, if any.
pub fn eval_cmd(
    cfg: &RunConfig,
    ds: &Dataset,
    args: &EvalArgs,
) -> Result<(Vec<EvalReport>, Vec<String>)> {
    let e = &cfg.experiment;
    let tests: Vec<TestCase> = ds
        .manifest
        .conditions_in(Split::Test)
        .map(|c| {
            let condition = c.condition();
            TestCase {
                category: categorize(&condition, &e.held_out),
                condition,
            }
        })
        .collect();
    if tests.is_empty() {
        bail!("dataset has no test conditions");
    }
    let mut labels = HashSet::new();
    let base = SampleConfig {
        seed: sub_seed(cfg.seed, 8),
        ..e.sample
    };
    let mut reports = Vec::new();
    for m in &args.models {
        if !labels.insert(m.label.as_str()) {
            bail!("duplicate model label {}", m.label);
        }
        let (model, reference) = if m.rrg {
            let r = args
                .reference
                .ok_or_else(|| anyhow!("--rrg-model {} needs --reference", m.label))?;
            let (t, r) = load_pair(&m.path, r)?;
            (t, Some(r))
        } else {
            (Checkpoint::load(&m.path)?, None)
        };
        let mode = if m.rrg {
            SamplerMode::Rrg { omega: args.omega }
        } else {
            SamplerMode::Plain
        };
        let entry = BenchmarkEntry {
            name: m.label.clone(),
            model: &model.params,
            reference: reference.as_ref().map(|r| &r.params),
            mode,
        };
        let images = sample_cases(&entry, &tests, &base)?;
        let report = evaluate_images(&m.label, &tests, &images)?;
        eprintln!("{}: Glyph.Acc {:.4}", m.label, report.overall.glyph_acc);
        reports.push(report);
    }
    if let Some(dir) = args.out {
        write_atomic(&dir.join("report.json"), reports_json(&reports)?.as_bytes())?;
        write_atomic(&dir.join("report.txt"), format_table(&reports).as_bytes())?;
    }
    let mut failed = Vec::new();
    for a in &args.asserts {
        match reports.iter().find(|r| r.method == a.label) {
            Some(r) if r.overall.glyph_acc >= a.min_glyph_acc => {}
            Some(r) => failed.push(format!(
                "{}: Glyph.Acc {:.4} < {}",
                a.label, r.overall.glyph_acc, a.min_glyph_acc
            )),
            None => failed.push(format!("{}: no such model", a.label)),
        }
    }
    Ok((reports, failed))
}
