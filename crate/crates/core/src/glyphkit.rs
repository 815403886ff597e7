//! The toy glyph domain.
//!
//! A 24-symbol bitmap charset (16 simple, 8 dense "complex" symbols), ground-truth
//! text-image composition, stroke corruption with exact region labels, and the
//! condition mutation used to build preference groups.

use std::collections::HashSet;
use std::fmt;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Native bitmap cell width in pixels.
pub const GLYPH_W: usize = 5;
/// Native bitmap cell height in pixels.
pub const GLYPH_H: usize = 7;

pub const CHARSET_VERSION: &str = "toy-24-v1";

/// Default toy canvas side length.
pub const DEFAULT_IMAGE_SIZE: usize = 16;
pub const DEFAULT_MAX_BLOCKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Complexity {
    Simple,
    Complex,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphBitmap {
    pub symbol: char,
    pub complexity: Complexity,
    rows: [u8; GLYPH_H],
}

impl GlyphBitmap {
    fn parse(symbol: char, complexity: Complexity, art: [&str; GLYPH_H]) -> Self {
        let mut rows = [0u8; GLYPH_H];
        for (row, line) in rows.iter_mut().zip(art) {
            assert_eq!(line.len(), GLYPH_W, "bad bitmap row for {symbol:?}");
            for (x, c) in line.chars().enumerate() {
                if c == '#' {
                    *row |= 1 << x;
                }
            }
        }
        Self {
            symbol,
            complexity,
            rows,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> bool {
        self.rows[y] >> x & 1 == 1
    }

    pub fn on_pixels(&self) -> usize {
        self.rows.iter().map(|r| r.count_ones() as usize).sum()
    }

    /// Nearest-neighbour sample of the bitmap stretched over a `cell_w`×`cell_h` cell.
    #[inline]
    pub fn sample(&self, x: usize, y: usize, cell_w: usize, cell_h: usize) -> bool {
        self.pixel(x * GLYPH_W / cell_w, y * GLYPH_H / cell_h)
    }
}

#[derive(Debug, Clone)]
pub struct Charset {
    glyphs: Vec<GlyphBitmap>,
}

static TOY_CHARSET: LazyLock<Charset> = LazyLock::new(Charset::build_toy);

impl Charset {
    pub fn toy() -> &'static Charset {
        &TOY_CHARSET
    }

    fn build_toy() -> Charset {
        use Complexity::{Complex, Simple};
        #[rustfmt::skip]
        let table: [(char, Complexity, [&str; GLYPH_H]); 24] = [
            ('0', Simple, [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."]),
            ('1', Simple, ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."]),
            ('2', Simple, [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"]),
            ('3', Simple, ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."]),
            ('4', Simple, ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."]),
            ('5', Simple, ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."]),
            ('6', Simple, ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."]),
            ('7', Simple, ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."]),
            ('8', Simple, [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."]),
            ('9', Simple, [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."]),
            ('A', Simple, [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"]),
            ('B', Simple, ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."]),
            ('C', Simple, [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."]),
            ('E', Simple, ["#####", "#....", "#....", "####.", "#....", "#....", "#####"]),
            ('H', Simple, ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"]),
            ('K', Simple, ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"]),
            ('田', Complex, ["#####", "#.#.#", "#.#.#", "#####", "#.#.#", "#.#.#", "#####"]),
            ('日', Complex, ["#####", "#...#", "#...#", "#####", "#...#", "#...#", "#####"]),
            ('目', Complex, ["#####", "#...#", "#####", "#...#", "#####", "#...#", "#####"]),
            ('井', Complex, [".#.#.", "#####", ".#.#.", ".#.#.", "#####", ".#.#.", ".#.#."]),
            ('王', Complex, ["#####", "..#..", "..#..", "#####", "..#..", "..#..", "#####"]),
            ('回', Complex, ["#####", "#...#", "#.#.#", "#.#.#", "#.#.#", "#...#", "#####"]),
            ('曲', Complex, [".#.#.", "#####", "#.#.#", "#####", "#.#.#", "#.#.#", "#####"]),
            ('甲', Complex, ["#####", "#.#.#", "#####", "#.#.#", "#####", "..#..", "..#.."]),
        ];
        Charset {
            glyphs: table
                .into_iter()
                .map(|(symbol, complexity, art)| GlyphBitmap::parse(symbol, complexity, art))
                .collect(),
        }
    }

    pub fn glyphs(&self) -> &[GlyphBitmap] {
        &self.glyphs
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn index_of(&self, symbol: char) -> Option<usize> {
        self.glyphs.iter().position(|g| g.symbol == symbol)
    }

    pub fn get(&self, symbol: char) -> Result<&GlyphBitmap> {
        self.index_of(symbol)
            .map(|i| &self.glyphs[i])
            .ok_or(Error::UnknownChar(symbol))
    }

    pub fn symbols(&self) -> Vec<char> {
        self.glyphs.iter().map(|g| g.symbol).collect()
    }

    pub fn symbols_of(&self, complexity: Complexity) -> Vec<char> {
        self.glyphs
            .iter()
            .filter(|g| g.complexity == complexity)
            .map(|g| g.symbol)
            .collect()
    }
}

/// Foreground/background shades for one prompt style.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub background: f64,
    pub foreground: f64,
}

impl Style {
    /// Binarization threshold halfway between the two shades.
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.background + self.foreground)
    }

    pub fn is_foreground(&self, value: f64) -> bool {
        if self.foreground > self.background {
            value > self.midpoint()
        } else {
            value < self.midpoint()
        }
    }
}

pub const STYLES: [Style; 4] = [
    Style {
        background: 0.2,
        foreground: 0.9,
    },
    Style {
        background: 0.85,
        foreground: 0.1,
    },
    Style {
        background: 0.0,
        foreground: 0.7,
    },
    Style {
        background: 0.7,
        foreground: 0.05,
    },
];

pub fn style_for(prompt_id: usize) -> Result<Style> {
    STYLES
        .get(prompt_id)
        .copied()
        .ok_or_else(|| Error::InvalidCondition(format!("prompt_id {prompt_id} has no style")))
}

/// Axis-aligned half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub const fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

impl From<[usize; 4]> for Rect {
    fn from([x0, y0, x1, y1]: [usize; 4]) -> Self {
        Rect { x0, y0, x1, y1 }
    }
}

impl From<Rect> for [usize; 4] {
    fn from(r: Rect) -> Self {
        [r.x0, r.y0, r.x1, r.y1]
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x0, self.y0, self.x1, self.y1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBlock {
    pub text: String,
    pub bbox: Rect,
}

impl TextBlock {
    pub fn new(text: impl Into<String>, bbox: Rect) -> Self {
        Self {
            text: text.into(),
            bbox,
        }
    }

    pub fn char_count(&self) -> usize {
        self.text.chars().count()
    }

    /// Character cell size: the bbox split evenly into `|text|` columns.
    pub fn cell_size(&self) -> (usize, usize) {
        (
            self.bbox.width() / self.char_count().max(1),
            self.bbox.height(),
        )
    }

    pub fn cell_rect(&self, k: usize) -> Rect {
        let (cw, ch) = self.cell_size();
        let x0 = self.bbox.x0 + k * cw;
        Rect::new(x0, self.bbox.y0, x0 + cw, self.bbox.y0 + ch)
    }

    pub fn cell_rects(&self) -> Vec<Rect> {
        (0..self.char_count()).map(|k| self.cell_rect(k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub prompt_id: usize,
    pub blocks: Vec<TextBlock>,
}

impl Condition {
    /// Builds a condition and checks every structural invariant against a `width`×`height` canvas.
    pub fn new(
        prompt_id: usize,
        blocks: Vec<TextBlock>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let condition = Condition { prompt_id, blocks };
        condition.validate(width, height)?;
        Ok(condition)
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        style_for(self.prompt_id)?;
        if self.blocks.is_empty() {
            return Err(Error::InvalidCondition(
                "a condition needs at least one text block".into(),
            ));
        }
        let charset = Charset::toy();
        for (i, block) in self.blocks.iter().enumerate() {
            let b = block.bbox;
            if !(b.x0 < b.x1 && b.x1 <= width && b.y0 < b.y1 && b.y1 <= height) {
                return Err(Error::InvalidCondition(format!(
                    "block {i} bbox {b} outside {width}x{height} canvas"
                )));
            }
            let n = block.char_count();
            if n == 0 {
                return Err(Error::InvalidCondition(format!("block {i} has empty text")));
            }
            for c in block.text.chars() {
                charset.get(c)?;
            }
            if b.width() < n * GLYPH_W || b.height() < GLYPH_H {
                return Err(Error::BlockTooSmall {
                    block: i,
                    bbox: b,
                    chars: n,
                });
            }
            for (j, other) in self.blocks.iter().enumerate().skip(i + 1) {
                if b.intersects(&other.bbox) {
                    return Err(Error::InvalidCondition(format!(
                        "blocks {i} and {j} overlap"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.blocks.iter().flat_map(|b| b.text.chars())
    }

    pub fn cell_count(&self) -> usize {
        self.blocks.iter().map(TextBlock::char_count).sum()
    }
}

/// Row-major binary grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BitGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }
}

/// Row-major grayscale image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanvasImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl CanvasImage {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(width * height, data.len()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn clamped(&self) -> CanvasImage {
        CanvasImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub block_index: usize,
    pub incorrect_rects: Vec<Rect>,
}

impl RegionAnnotation {
    pub fn clean(block_index: usize) -> Self {
        Self {
            block_index,
            incorrect_rects: Vec::new(),
        }
    }

    pub fn validate(&self, condition: &Condition) -> Result<()> {
        let block = condition.blocks.get(self.block_index).ok_or_else(|| {
            Error::InvalidCondition(format!(
                "annotation references block {} of {}",
                self.block_index,
                condition.blocks.len()
            ))
        })?;
        for rect in &self.incorrect_rects {
            if rect.area() == 0 {
                return Err(Error::DegenerateRegion(*rect));
            }
            if !block.bbox.contains_rect(rect) {
                return Err(Error::AnnotationOutOfBlock {
                    block: self.block_index,
                    rect: *rect,
                    bbox: block.bbox,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupSource {
    SyntheticOracle,
    ModelAutolabel,
    Human,
}

#[derive(Debug, Clone)]
pub struct CandidateGroup {
    pub condition: Condition,
    pub images: Vec<CanvasImage>,
    /// One annotation per block, per image.
    pub annotations: Vec<Vec<RegionAnnotation>>,
    pub source: GroupSource,
}

impl CandidateGroup {
    pub fn new(
        condition: Condition,
        images: Vec<CanvasImage>,
        annotations: Vec<Vec<RegionAnnotation>>,
        source: GroupSource,
    ) -> Result<Self> {
        if images.len() < 2 {
            return Err(Error::GroupTooSmall(images.len()));
        }
        if images.len() != annotations.len() {
            return Err(Error::shape(
                format!("{} annotation lists", images.len()),
                annotations.len(),
            ));
        }
        for ann in annotations.iter().flatten() {
            ann.validate(&condition)?;
        }
        Ok(Self {
            condition,
            images,
            annotations,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Number of character cells not covered by any incorrect rect, per image.
    pub fn correct_cells(&self, image: usize) -> usize {
        let mut correct = 0;
        for (b, block) in self.condition.blocks.iter().enumerate() {
            let rects: Vec<&Rect> = self.annotations[image]
                .iter()
                .filter(|a| a.block_index == b)
                .flat_map(|a| a.incorrect_rects.iter())
                .collect();
            correct += block
                .cell_rects()
                .iter()
                .filter(|cell| !rects.iter().any(|r| r.intersects(cell)))
                .count();
        }
        correct
    }
}

/// Renders `text` into a binary strip of `|text|` cells, each `cell.0`×`cell.1` pixels.
pub fn render_glyph_image(text: &str, cell: (usize, usize)) -> Result<BitGrid> {
    let (cell_w, cell_h) = cell;
    if text.is_empty() {
        return Err(Error::InvalidCondition("cannot render empty text".into()));
    }
    if cell_w < GLYPH_W || cell_h < GLYPH_H {
        return Err(Error::Config(format!(
            "cell {cell_w}x{cell_h} smaller than native {GLYPH_W}x{GLYPH_H}"
        )));
    }
    let charset = Charset::toy();
    let glyphs = text
        .chars()
        .map(|c| charset.get(c))
        .collect::<Result<Vec<_>>>()?;
    let mut grid = BitGrid::new(glyphs.len() * cell_w, cell_h);
    for (k, glyph) in glyphs.iter().enumerate() {
        for y in 0..cell_h {
            for x in 0..cell_w {
                grid.set(k * cell_w + x, y, glyph.sample(x, y, cell_w, cell_h));
            }
        }
    }
    Ok(grid)
}

/// Draws every block's glyph strip into its bbox over the prompt style's background.
///
/// The result is a pure function of the condition.
pub fn compose_ground_truth(
    condition: &Condition,
    width: usize,
    height: usize,
) -> Result<CanvasImage> {
    condition.validate(width, height)?;
    let style = style_for(condition.prompt_id)?;
    let mut image = CanvasImage::filled(width, height, style.background);
    for block in &condition.blocks {
        let strip = render_glyph_image(&block.text, block.cell_size())?;
        for y in 0..strip.height {
            for x in 0..strip.width {
                if strip.get(x, y) {
                    image.set(block.bbox.x0 + x, block.bbox.y0 + y, style.foreground);
                }
            }
        }
    }
    Ok(image)
}

/// How hard a corrupted cell is hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionMagnitude {
    /// Keep applying runs until the cell fails the recognition match threshold.
    #[default]
    Max,
    /// Apply exactly this many runs (at least one pixel always ends up changed).
    Runs(usize),
}

/// Smallest number of flipped pixels that drops a cell of `area` pixels below the match threshold.
pub fn max_magnitude_flips(area: usize) -> usize {
    let tolerated =
        ((1.0 - crate::evalbench::MATCH_THRESHOLD) * area as f64 + 1e-9).floor() as usize;
    tolerated + 1
}

fn apply_run<R: Rng + ?Sized>(image: &mut CanvasImage, cell: &Rect, style: Style, rng: &mut R) {
    let mut on = Vec::new();
    let mut off = Vec::new();
    for y in cell.y0..cell.y1 {
        for x in cell.x0..cell.x1 {
            if style.is_foreground(image.get(x, y)) {
                on.push((x, y));
            } else {
                off.push((x, y));
            }
        }
    }
    let delete = if on.is_empty() {
        false
    } else if off.is_empty() {
        true
    } else {
        rng.gen_bool(0.5)
    };
    let (start, value) = if delete {
        (*on.choose(rng).expect("non-empty"), style.background)
    } else {
        (*off.choose(rng).expect("non-empty"), style.foreground)
    };
    let len = rng.gen_range(1..=3);
    let horizontal = rng.gen_bool(0.5);
    for step in 0..len {
        let (x, y) = if horizontal {
            (start.0 + step, start.1)
        } else {
            (start.0, start.1 + step)
        };
        if cell.contains(x, y) {
            image.set(x, y, value);
        }
    }
}

fn differing_pixels(a: &CanvasImage, b: &CanvasImage, cell: &Rect) -> usize {
    let mut n = 0;
    for y in cell.y0..cell.y1 {
        for x in cell.x0..cell.x1 {
            if a.get(x, y) != b.get(x, y) {
                n += 1;
            }
        }
    }
    n
}

/// Independently corrupts each character cell with probability `rate` by adding or deleting
/// short stroke runs, and reports every corrupted cell as an incorrect rect.
///
/// Returns one annotation per block, in block order.
pub fn corrupt_glyphs<R: Rng + ?Sized>(
    image: &CanvasImage,
    condition: &Condition,
    rate: f64,
    magnitude: CorruptionMagnitude,
    rng: &mut R,
) -> Result<(CanvasImage, Vec<RegionAnnotation>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "corruption rate {rate} outside [0, 1]"
        )));
    }
    let style = style_for(condition.prompt_id)?;
    let mut out = image.clone();
    let mut annotations = Vec::with_capacity(condition.blocks.len());
    for (b, block) in condition.blocks.iter().enumerate() {
        let mut ann = RegionAnnotation::clean(b);
        for cell in block.cell_rects() {
            if !rng.gen_bool(rate) {
                continue;
            }
            let needed = match magnitude {
                CorruptionMagnitude::Max => max_magnitude_flips(cell.area()),
                CorruptionMagnitude::Runs(_) => 1,
            };
            let mut runs = 0usize;
            loop {
                apply_run(&mut out, &cell, style, rng);
                runs += 1;
                let enough_runs = match magnitude {
                    CorruptionMagnitude::Max => true,
                    CorruptionMagnitude::Runs(k) => runs >= k,
                };
                if enough_runs && differing_pixels(image, &out, &cell) >= needed {
                    break;
                }
            }
            ann.incorrect_rects.push(cell);
        }
        annotations.push(ann);
    }
    Ok((out, annotations))
}

/// Replaces each block's text with a uniform random string of the same length drawn from `pool`.
pub fn mutate_condition_texts<R: Rng + ?Sized>(
    condition: &Condition,
    pool: &[char],
    rng: &mut R,
) -> Result<Condition> {
    if pool.is_empty() {
        return Err(Error::PoolEmpty);
    }
    let blocks = condition
        .blocks
        .iter()
        .map(|block| TextBlock {
            text: (0..block.char_count())
                .map(|_| *pool.choose(rng).expect("non-empty pool"))
                .collect(),
            bbox: block.bbox,
        })
        .collect();
    Ok(Condition {
        prompt_id: condition.prompt_id,
        blocks,
    })
}

/// `n_g` independent corruptions of the ground-truth composition, image `i` at `rates[i]`.
pub fn build_group_synthetic<R: Rng + ?Sized>(
    condition: &Condition,
    n_g: usize,
    rates: &[f64],
    width: usize,
    height: usize,
    rng: &mut R,
) -> Result<CandidateGroup> {
    if n_g < 2 {
        return Err(Error::GroupTooSmall(n_g));
    }
    if rates.len() != n_g {
        return Err(Error::shape(format!("{n_g} rates"), rates.len()));
    }
    let clean = compose_ground_truth(condition, width, height)?;
    let mut images = Vec::with_capacity(n_g);
    let mut annotations = Vec::with_capacity(n_g);
    for &rate in rates {
        let (img, ann) = corrupt_glyphs(&clean, condition, rate, CorruptionMagnitude::Max, rng)?;
        images.push(img);
        annotations.push(ann);
    }
    CandidateGroup::new(
        condition.clone(),
        images,
        annotations,
        GroupSource::SyntheticOracle,
    )
}

/// Draws a random valid condition on a `width`×`height` canvas.
///
/// Blocks are stacked vertically on even pixel offsets with native-size cells, so bbox
/// origins land on the token grid for any even patch size.
pub fn random_condition<R: Rng + ?Sized>(
    pool: &[char],
    width: usize,
    height: usize,
    max_blocks: usize,
    rng: &mut R,
) -> Result<Condition> {
    if pool.is_empty() {
        return Err(Error::PoolEmpty);
    }
    let max_chars = (width / GLYPH_W).clamp(1, 4);
    let rows_available = height / (GLYPH_H + 1);
    if rows_available == 0 || width < GLYPH_W {
        return Err(Error::Config(format!(
            "canvas {width}x{height} too small for one glyph"
        )));
    }
    let n_blocks = rng.gen_range(1..=max_blocks.min(rows_available).max(1));
    let band = height / n_blocks;
    let mut blocks = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        let n = rng.gen_range(1..=max_chars);
        let w = n * GLYPH_W;
        let x0 = even_offset(width - w, rng);
        let y0 = b * band + even_offset(band - GLYPH_H, rng);
        let text: String = (0..n)
            .map(|_| *pool.choose(rng).expect("non-empty"))
            .collect();
        blocks.push(TextBlock::new(
            text,
            Rect::new(x0, y0, x0 + w, y0 + GLYPH_H),
        ));
    }
    let prompt_id = rng.gen_range(0..STYLES.len());
    Condition::new(prompt_id, blocks, width, height)
}

fn even_offset<R: Rng + ?Sized>(slack: usize, rng: &mut R) -> usize {
    2 * rng.gen_range(0..=slack / 2)
}

/// Distinct symbols of a string set, in first-seen order.
pub fn distinct_symbols<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<char> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in texts {
        for c in t.chars() {
            if seen.insert(c) {
                out.push(c);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn one_block(text: &str, bbox: Rect, prompt_id: usize) -> Condition {
        Condition::new(prompt_id, vec![TextBlock::new(text, bbox)], 16, 16).unwrap()
    }

    #[test]
    fn charset_invariants() {
        let cs = Charset::toy();
        assert_eq!(cs.len(), 24);
        assert_eq!(cs.symbols_of(Complexity::Simple).len(), 16);
        assert_eq!(cs.symbols_of(Complexity::Complex).len(), 8);
        let symbols: HashSet<char> = cs.symbols().into_iter().collect();
        assert_eq!(symbols.len(), 24);
        for g in cs.glyphs() {
            assert!(g.on_pixels() >= 1, "{:?}", g.symbol);
            if g.complexity == Complexity::Complex {
                assert!(g.on_pixels() >= 18, "{:?} has {}", g.symbol, g.on_pixels());
            }
        }
        for (i, a) in cs.glyphs().iter().enumerate() {
            for b in &cs.glyphs()[i + 1..] {
                assert_ne!(a.rows, b.rows, "{:?} == {:?}", a.symbol, b.symbol);
            }
        }
    }

    #[test]
    fn render_native_cell_is_the_bitmap() {
        let grid = render_glyph_image("A", (5, 7)).unwrap();
        let a = Charset::toy().get('A').unwrap();
        assert_eq!((grid.width, grid.height), (5, 7));
        for y in 0..7 {
            for x in 0..5 {
                assert_eq!(grid.get(x, y), a.pixel(x, y));
            }
        }
    }

    #[test]
    fn render_two_chars_side_by_side() {
        let grid = render_glyph_image("AB", (5, 7)).unwrap();
        let cs = Charset::toy();
        let (a, b) = (cs.get('A').unwrap(), cs.get('B').unwrap());
        assert_eq!((grid.width, grid.height), (10, 7));
        for y in 0..7 {
            for x in 0..5 {
                assert_eq!(grid.get(x, y), a.pixel(x, y));
                assert_eq!(grid.get(x + 5, y), b.pixel(x, y));
            }
        }
    }

    #[test]
    fn render_scales_nearest_neighbour() {
        let grid = render_glyph_image("1", (10, 14)).unwrap();
        let one = Charset::toy().get('1').unwrap();
        for y in 0..14 {
            for x in 0..10 {
                assert_eq!(grid.get(x, y), one.pixel(x / 2, y / 2));
            }
        }
    }

    #[test]
    fn render_unknown_char() {
        assert!(matches!(
            render_glyph_image("A?", (5, 7)),
            Err(Error::UnknownChar('?'))
        ));
    }

    #[test]
    fn compose_single_block_matches_bitmap() {
        let cond = one_block("A", Rect::new(0, 0, 5, 7), 0);
        let img = compose_ground_truth(&cond, 16, 16).unwrap();
        let a = Charset::toy().get('A').unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let expected = if x < 5 && y < 7 && a.pixel(x, y) {
                    0.9
                } else {
                    0.2
                };
                assert_eq!(img.get(x, y), expected, "({x},{y})");
            }
        }
        assert_eq!(img, compose_ground_truth(&cond, 16, 16).unwrap());
    }

    #[test]
    fn condition_rejects_small_and_overlapping_blocks() {
        let err = Condition::new(0, vec![TextBlock::new("AB", Rect::new(0, 0, 8, 7))], 16, 16);
        assert!(matches!(err, Err(Error::BlockTooSmall { .. })));
        let err = Condition::new(
            0,
            vec![
                TextBlock::new("A", Rect::new(0, 0, 5, 7)),
                TextBlock::new("B", Rect::new(4, 2, 9, 9)),
            ],
            16,
            16,
        );
        assert!(matches!(err, Err(Error::InvalidCondition(_))));
        assert!(Condition::new(0, vec![], 16, 16).is_err());
    }

    #[test]
    fn style_contrast() {
        for s in STYLES {
            assert!((s.foreground - s.background).abs() >= 0.5);
        }
    }

    #[test]
    fn zero_rate_is_identity() {
        let cond = one_block("AB", Rect::new(0, 0, 10, 7), 1);
        let img = compose_ground_truth(&cond, 16, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, ann) =
            corrupt_glyphs(&img, &cond, 0.0, CorruptionMagnitude::Max, &mut rng).unwrap();
        assert_eq!(out, img);
        assert!(ann.iter().all(|a| a.incorrect_rects.is_empty()));
    }

    #[test]
    fn full_rate_reports_every_cell_and_stays_local() {
        let cond = one_block("AB", Rect::new(2, 4, 12, 11), 2);
        let img = compose_ground_truth(&cond, 16, 16).unwrap();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, ann) =
                corrupt_glyphs(&img, &cond, 1.0, CorruptionMagnitude::Max, &mut rng).unwrap();
            assert_eq!(ann.len(), 1);
            assert_eq!(ann[0].incorrect_rects, cond.blocks[0].cell_rects());
            for y in 0..16 {
                for x in 0..16 {
                    let inside = ann[0].incorrect_rects.iter().any(|r| r.contains(x, y));
                    if !inside {
                        assert_eq!(out.get(x, y), img.get(x, y));
                    }
                }
            }
            for r in &ann[0].incorrect_rects {
                assert!(differing_pixels(&img, &out, r) >= max_magnitude_flips(r.area()));
            }
        }
    }

    #[test]
    fn runs_magnitude_changes_at_least_one_pixel() {
        let cond = one_block("田", Rect::new(0, 0, 5, 7), 0);
        let img = compose_ground_truth(&cond, 16, 16).unwrap();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, ann) =
                corrupt_glyphs(&img, &cond, 1.0, CorruptionMagnitude::Runs(1), &mut rng).unwrap();
            let r = ann[0].incorrect_rects[0];
            let d = differing_pixels(&img, &out, &r);
            assert!((1..=3).contains(&d), "{d}");
        }
    }

    #[test]
    fn max_flips_for_native_cell() {
        // 35 pixels at 0.85 agreement tolerate 5 mismatches
        assert_eq!(max_magnitude_flips(35), 6);
    }

    #[test]
    fn mutation_preserves_geometry() {
        let cond = one_block("AB", Rect::new(0, 0, 10, 7), 3);
        let pool = ['1', '2', '3'];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let m = mutate_condition_texts(&cond, &pool, &mut rng).unwrap();
            assert_eq!(m.prompt_id, 3);
            assert_eq!(m.blocks[0].bbox, cond.blocks[0].bbox);
            assert_eq!(m.blocks[0].char_count(), 2);
            assert!(m.blocks[0].text.chars().all(|c| pool.contains(&c)));
        }
        let same = mutate_condition_texts(&cond, &['A'], &mut rng).unwrap();
        assert_eq!(same.blocks[0].bbox, cond.blocks[0].bbox);
        assert!(matches!(
            mutate_condition_texts(&cond, &[], &mut rng),
            Err(Error::PoolEmpty)
        ));
    }

    #[test]
    fn synthetic_groups() {
        let cond = one_block("AB", Rect::new(0, 0, 10, 7), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = build_group_synthetic(&cond, 4, &[0.0; 4], 16, 16, &mut rng).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.source, GroupSource::SyntheticOracle);
        assert!(g
            .annotations
            .iter()
            .flatten()
            .all(|a| a.incorrect_rects.is_empty()));

        let g = build_group_synthetic(&cond, 2, &[0.0, 1.0], 16, 16, &mut rng).unwrap();
        assert_eq!(g.correct_cells(0), 2);
        assert_eq!(g.correct_cells(1), 0);
        assert!(matches!(
            build_group_synthetic(&cond, 1, &[0.0], 16, 16, &mut rng),
            Err(Error::GroupTooSmall(1))
        ));
    }

    #[test]
    fn random_conditions_are_valid_and_aligned() {
        let pool = Charset::toy().symbols();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let c = random_condition(&pool, 16, 16, 2, &mut rng).unwrap();
            c.validate(16, 16).unwrap();
            for b in &c.blocks {
                assert_eq!(b.bbox.x0 % 2, 0);
                assert_eq!(b.bbox.y0 % 2, 0);
                assert!(b.char_count() <= 3);
            }
        }
    }
}
