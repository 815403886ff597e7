//! Pixel-exact recognition oracle, text metrics, and the benchmark runner.
//!
//! Sen.Acc is counted per text block: a block scores 1 when its recognized string equals the
//! target exactly. Block scores are averaged within a case, then over cases.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyphkit::{
    style_for, CanvasImage, Charset, Complexity, Condition, RegionAnnotation, Style, TextBlock,
};
use crate::sampler::{euler_sample, rrg_sample, SampleConfig};
use crate::velocitynet::{PreparedCondition, VelocityField};

pub const MATCH_THRESHOLD: f64 = 0.85;

pub const SEN_ACC_NOTE: &str =
    "Sen.Acc counts each text block as one sentence (exact string match), averaged over blocks then cases.";

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Similarity `1 − lev(a, b) / max(|a|, |b|)`; 1 when both are empty.
pub fn ned(a: &str, b: &str) -> f64 {
    let n = a.chars().count().max(b.chars().count());
    if n == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReading {
    pub block_index: usize,
    pub recognized: String,
    pub per_char_correct: Vec<bool>,
    pub per_char_score: Vec<f64>,
}

impl BlockReading {
    pub fn all_correct(&self) -> bool {
        self.per_char_correct.iter().all(|&c| c)
    }
}

/// Reads each fixed character cell of `block` by nearest-bitmap matching.
pub fn recognize_block(
    image: &CanvasImage,
    block_index: usize,
    block: &TextBlock,
    style: &Style,
) -> Result<BlockReading> {
    let b = &block.bbox;
    if b.x1 > image.width || b.y1 > image.height {
        return Err(Error::InvalidCondition(format!(
            "block {block_index} bbox {b} outside {}x{} image",
            image.width, image.height
        )));
    }
    let charset = Charset::toy();
    let (cw, ch) = block.cell_size();
    let area = (cw * ch) as f64;
    let mut reading = BlockReading {
        block_index,
        recognized: String::new(),
        per_char_correct: Vec::new(),
        per_char_score: Vec::new(),
    };
    for (k, expected) in block.text.chars().enumerate() {
        let cell = block.cell_rect(k);
        let mut bits = Vec::with_capacity(cw * ch);
        for y in 0..ch {
            for x in 0..cw {
                bits.push(style.is_foreground(image.get(cell.x0 + x, cell.y0 + y)));
            }
        }
        let mut best = (0usize, -1.0f64);
        for (gi, glyph) in charset.glyphs().iter().enumerate() {
            let mut agree = 0usize;
            for y in 0..ch {
                for x in 0..cw {
                    agree += usize::from(bits[y * cw + x] == glyph.sample(x, y, cw, ch));
                }
            }
            let score = agree as f64 / area;
            if score > best.1 {
                best = (gi, score);
            }
        }
        let symbol = charset.glyphs()[best.0].symbol;
        reading.recognized.push(symbol);
        reading
            .per_char_correct
            .push(symbol == expected && best.1 >= MATCH_THRESHOLD);
        reading.per_char_score.push(best.1);
    }
    Ok(reading)
}

pub fn recognize_condition(
    image: &CanvasImage,
    condition: &Condition,
) -> Result<Vec<BlockReading>> {
    let style = style_for(condition.prompt_id)?;
    condition
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| recognize_block(image, i, b, &style))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphAccuracy {
    pub score: f64,
    /// Per block, per character cell.
    pub cells: Vec<Vec<bool>>,
    pub readings: Vec<BlockReading>,
}

pub fn glyph_region_accuracy(image: &CanvasImage, condition: &Condition) -> Result<GlyphAccuracy> {
    let readings = recognize_condition(image, condition)?;
    let cells: Vec<Vec<bool>> = readings
        .iter()
        .map(|r| r.per_char_correct.clone())
        .collect();
    let total: usize = cells.iter().map(Vec::len).sum();
    let correct = cells.iter().flatten().filter(|&&c| c).count();
    Ok(GlyphAccuracy {
        score: correct as f64 / total as f64,
        cells,
        readings,
    })
}

/// Turns a per-cell correctness map into one annotation per block, each incorrect cell a rect.
pub fn annotations_from_cells(
    condition: &Condition,
    cells: &[Vec<bool>],
) -> Result<Vec<RegionAnnotation>> {
    if cells.len() != condition.blocks.len() {
        return Err(Error::shape(condition.blocks.len(), cells.len()));
    }
    condition
        .blocks
        .iter()
        .zip(cells)
        .enumerate()
        .map(|(b, (block, ok))| {
            if ok.len() != block.char_count() {
                return Err(Error::shape(block.char_count(), ok.len()));
            }
            Ok(RegionAnnotation {
                block_index: b,
                incorrect_rects: ok
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| !c)
                    .map(|(k, _)| block.cell_rect(k))
                    .collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Simple,
    Complex,
    HeldOut,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Simple, Category::Complex, Category::HeldOut];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Simple => "simple",
            Category::Complex => "complex",
            Category::HeldOut => "held-out",
        }
    }
}

/// Held-out wins over complex, complex over simple.
pub fn categorize(condition: &Condition, held_out: &[char]) -> Category {
    let charset = Charset::toy();
    if condition.chars().any(|c| held_out.contains(&c)) {
        Category::HeldOut
    } else if condition.chars().any(|c| {
        charset
            .get(c)
            .map(|g| g.complexity == Complexity::Complex)
            .unwrap_or(false)
    }) {
        Category::Complex
    } else {
        Category::Simple
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub condition: Condition,
    pub category: Category,
}

/// Metrics of one generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub ned: f64,
    pub sen_acc: f64,
    pub glyph_acc: f64,
}

pub fn score_image(image: &CanvasImage, condition: &Condition) -> Result<CaseScore> {
    let acc = glyph_region_accuracy(image, condition)?;
    let n = acc.readings.len() as f64;
    let mut ned_sum = 0.0;
    let mut sen = 0.0;
    for (r, block) in acc.readings.iter().zip(&condition.blocks) {
        ned_sum += ned(&r.recognized, &block.text);
        if r.recognized == block.text {
            sen += 1.0;
        }
    }
    Ok(CaseScore {
        ned: ned_sum / n,
        sen_acc: sen / n,
        glyph_acc: acc.score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub cases: usize,
    pub ned: f64,
    pub sen_acc: f64,
    pub glyph_acc: f64,
}

impl MetricRow {
    fn from_scores<'a>(scores: impl Iterator<Item = &'a CaseScore>) -> MetricRow {
        let mut row = MetricRow {
            cases: 0,
            ned: 0.0,
            sen_acc: 0.0,
            glyph_acc: 0.0,
        };
        for s in scores {
            row.cases += 1;
            row.ned += s.ned;
            row.sen_acc += s.sen_acc;
            row.glyph_acc += s.glyph_acc;
        }
        if row.cases > 0 {
            let n = row.cases as f64;
            row.ned /= n;
            row.sen_acc /= n;
            row.glyph_acc /= n;
        }
        row
    }
}

/// Metrics for one method over a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub categories: BTreeMap<Category, MetricRow>,
    pub overall: MetricRow,
    pub cases: Vec<CaseScore>,
}

impl EvalReport {
    pub fn from_cases(
        method: impl Into<String>,
        tests: &[TestCase],
        cases: Vec<CaseScore>,
    ) -> Self {
        let mut categories = BTreeMap::new();
        for cat in Category::ALL {
            let row = MetricRow::from_scores(
                tests
                    .iter()
                    .zip(&cases)
                    .filter(|(t, _)| t.category == cat)
                    .map(|(_, s)| s),
            );
            if row.cases > 0 {
                categories.insert(cat, row);
            }
        }
        let overall = MetricRow::from_scores(cases.iter());
        EvalReport {
            method: method.into(),
            categories,
            overall,
            cases,
        }
    }
}

/// Scores already-generated images (one per test case).
pub fn evaluate_images(
    method: &str,
    tests: &[TestCase],
    images: &[CanvasImage],
) -> Result<EvalReport> {
    if tests.len() != images.len() {
        return Err(Error::shape(tests.len(), images.len()));
    }
    let cases = tests
        .par_iter()
        .zip(images.par_iter())
        .map(|(t, img)| score_image(img, &t.condition))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_cases(method, tests, cases))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum SamplerMode {
    Plain,
    Rrg { omega: f64 },
}

/// One benchmark column: a model, optionally with its reference for guided sampling.
pub struct BenchmarkEntry<'a, M> {
    pub name: String,
    pub model: &'a M,
    pub reference: Option<&'a M>,
    pub mode: SamplerMode,
}

/// Case `i` is sampled with seed `base.seed + i` for every entry.
pub fn sample_cases<M: VelocityField>(
    entry: &BenchmarkEntry<'_, M>,
    tests: &[TestCase],
    base: &SampleConfig,
) -> Result<Vec<CanvasImage>> {
    tests
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let prep = PreparedCondition::new(&t.condition, entry.model.config())?;
            let cfg = SampleConfig {
                seed: base.seed.wrapping_add(i as u64),
                ..*base
            };
            let out = match (entry.mode, entry.reference) {
                (SamplerMode::Plain, _) => euler_sample(entry.model, &prep, &cfg)?,
                (SamplerMode::Rrg { omega }, Some(r)) => rrg_sample(
                    entry.model,
                    r,
                    &prep,
                    &SampleConfig { omega, ..cfg },
                    |_| {},
                )?,
                (SamplerMode::Rrg { .. }, None) => {
                    return Err(Error::Config(format!(
                        "{} needs a reference model for RRG",
                        entry.name
                    )))
                }
            };
            Ok(out.image)
        })
        .collect()
}

pub fn run_benchmark<M: VelocityField>(
    entries: &[BenchmarkEntry<'_, M>],
    tests: &[TestCase],
    base: &SampleConfig,
) -> Result<Vec<EvalReport>> {
    if let Some(first) = entries.first() {
        for e in entries {
            let mismatched = e.model.config() != first.model.config()
                || e.reference
                    .is_some_and(|r| r.config() != first.model.config());
            if mismatched {
                return Err(Error::CheckpointMismatch(format!(
                    "{} does not share the configuration of {}",
                    e.name, first.name
                )));
            }
        }
    }
    entries
        .iter()
        .map(|e| {
            let images = sample_cases(e, tests, base)?;
            evaluate_images(&e.name, tests, &images)
        })
        .collect()
}

/// Methods as columns; per category NED and Sen.Acc, then overall Glyph.Acc.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {SEN_ACC_NOTE}");
    let label_w = 22;
    let col_w = reports
        .iter()
        .map(|r| r.method.len())
        .max()
        .unwrap_or(0)
        .max(10)
        + 2;
    let _ = write!(out, "{:<label_w$}", "metric");
    for r in reports {
        let _ = write!(out, "{:>col_w$}", r.method);
    }
    out.push('\n');
    let mut row = |label: String, f: &dyn Fn(&EvalReport) -> Option<f64>| {
        let _ = write!(out, "{label:<label_w$}");
        for r in reports {
            match f(r) {
                Some(v) => {
                    let _ = write!(out, "{v:>col_w$.4}");
                }
                None => {
                    let _ = write!(out, "{:>col_w$}", "-");
                }
            }
        }
        out.push('\n');
    };
    for cat in Category::ALL {
        if reports.iter().all(|r| !r.categories.contains_key(&cat)) {
            continue;
        }
        row(format!("{} NED", cat.name()), &|r| {
            r.categories.get(&cat).map(|m| m.ned)
        });
        row(format!("{} Sen.Acc", cat.name()), &|r| {
            r.categories.get(&cat).map(|m| m.sen_acc)
        });
    }
    row("overall NED".into(), &|r| Some(r.overall.ned));
    row("overall Sen.Acc".into(), &|r| Some(r.overall.sen_acc));
    row("Glyph.Acc".into(), &|r| Some(r.overall.glyph_acc));
    out
}

/// JSON document with the Sen.Acc note and every report.
pub fn reports_json(reports: &[EvalReport]) -> Result<String> {
    #[derive(Serialize)]
    struct Doc<'a> {
        sen_acc_granularity: &'a str,
        match_threshold: f64,
        reports: &'a [EvalReport],
    }
    Ok(serde_json::to_string_pretty(&Doc {
        sen_acc_granularity: SEN_ACC_NOTE,
        match_threshold: MATCH_THRESHOLD,
        reports,
    })?)
}
