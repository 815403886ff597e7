//! Token layout, the block-localized attention mask, and region/preference masks over
//! image tokens.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::glyphkit::{CandidateGroup, Condition, Rect};
use crate::velocitynet::ModelConfig;

/// Sequence partition `[prompt | image | glyph_1 | … | glyph_Nt]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_prompt: usize,
    /// Image token grid as (rows, cols).
    pub image_grid: (usize, usize),
    /// Pixels per token side.
    pub patch: usize,
    /// Glyph canvas token grid as (rows, cols); identical for every block.
    pub glyph_grid: (usize, usize),
    pub glyph_ranges: Vec<Range<usize>>,
    pub total: usize,
}

impl TokenLayout {
    /// Assembles a layout from raw counts. Used directly by tests and by [`build_token_layout`].
    pub fn from_parts(
        n_prompt: usize,
        image_grid: (usize, usize),
        patch: usize,
        glyph_grid: (usize, usize),
        n_blocks: usize,
    ) -> Self {
        let n_image = image_grid.0 * image_grid.1;
        let per_block = glyph_grid.0 * glyph_grid.1;
        let start = n_prompt + n_image;
        let glyph_ranges = (0..n_blocks)
            .map(|b| start + b * per_block..start + (b + 1) * per_block)
            .collect();
        TokenLayout {
            n_prompt,
            image_grid,
            patch,
            glyph_grid,
            glyph_ranges,
            total: start + n_blocks * per_block,
        }
    }

    pub fn prompt_range(&self) -> Range<usize> {
        0..self.n_prompt
    }

    pub fn n_image(&self) -> usize {
        self.image_grid.0 * self.image_grid.1
    }

    pub fn image_range(&self) -> Range<usize> {
        self.n_prompt..self.n_prompt + self.n_image()
    }

    pub fn n_blocks(&self) -> usize {
        self.glyph_ranges.len()
    }

    pub fn glyph_tokens_per_block(&self) -> usize {
        self.glyph_grid.0 * self.glyph_grid.1
    }

    /// Image-relative token index of grid cell (r, c).
    pub fn image_token(&self, r: usize, c: usize) -> usize {
        r * self.image_grid.1 + c
    }

    pub fn image_pixels(&self) -> (usize, usize) {
        (
            self.image_grid.1 * self.patch,
            self.image_grid.0 * self.patch,
        )
    }
}

pub fn build_token_layout(condition: &Condition, cfg: &ModelConfig) -> Result<TokenLayout> {
    cfg.validate()?;
    if condition.blocks.len() > cfg.max_blocks {
        return Err(Error::Config(format!(
            "{} blocks exceed max_blocks {}",
            condition.blocks.len(),
            cfg.max_blocks
        )));
    }
    let (gw, gh) = cfg.glyph_canvas;
    for (i, block) in condition.blocks.iter().enumerate() {
        let (cw, ch) = block.cell_size();
        if cw * block.char_count() > gw || ch > gh {
            return Err(Error::Config(format!(
                "block {i} glyph strip {}x{ch} does not fit the {gw}x{gh} glyph canvas",
                cw * block.char_count()
            )));
        }
    }
    let grid = cfg.image_size / cfg.patch;
    Ok(TokenLayout::from_parts(
        cfg.n_prompt,
        (grid, grid),
        cfg.patch,
        (gh / cfg.patch, gw / cfg.patch),
        condition.blocks.len(),
    ))
}

/// Binary mask over image tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RegionMask {
    bits: Vec<bool>,
}

impl RegionMask {
    pub fn zeros(n: usize) -> Self {
        Self {
            bits: vec![false; n],
        }
    }

    pub fn ones(n: usize) -> Self {
        Self {
            bits: vec![true; n],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.bits[i] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn and(&self, other: &RegionMask) -> RegionMask {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &RegionMask) -> RegionMask {
        self.zip(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &RegionMask) -> RegionMask {
        self.zip(other, |a, b| a && !b)
    }

    pub fn not(&self) -> RegionMask {
        RegionMask {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &RegionMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    fn zip(&self, other: &RegionMask, f: impl Fn(bool, bool) -> bool) -> RegionMask {
        assert_eq!(self.len(), other.len(), "region masks of different lengths");
        RegionMask {
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Expands the token mask to a row-major 0/1 pixel grid.
    pub fn to_pixels(&self, layout: &TokenLayout) -> Vec<f64> {
        let (w, h) = layout.image_pixels();
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                if self.bits[layout.image_token(y / layout.patch, x / layout.patch)] {
                    out[y * w + x] = 1.0;
                }
            }
        }
        out
    }
}

/// Marks every image token whose patch overlaps `bbox` by at least one pixel.
pub fn rasterize_bbox(bbox: &Rect, layout: &TokenLayout) -> Result<RegionMask> {
    if bbox.area() == 0 {
        return Err(Error::DegenerateRegion(*bbox));
    }
    let (w, h) = layout.image_pixels();
    if bbox.x1 > w || bbox.y1 > h {
        return Err(Error::Config(format!(
            "region {bbox} outside {w}x{h} image"
        )));
    }
    let p = layout.patch;
    let mut mask = RegionMask::zeros(layout.n_image());
    for r in bbox.y0 / p..=(bbox.y1 - 1) / p {
        for c in bbox.x0 / p..=(bbox.x1 - 1) / p {
            mask.set(layout.image_token(r, c), true);
        }
    }
    Ok(mask)
}

/// Dense N×N attention mask, row = query, column = key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.n..(q + 1) * self.n]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|q| (0..q).all(|k| self.get(q, k) == self.get(k, q)))
    }
}

/// Prompt and image tokens attend to each other and within themselves; glyph tokens attend
/// within their own block and to/from the image tokens of that block's region only.
pub fn build_attention_mask(
    layout: &TokenLayout,
    block_regions: &[RegionMask],
) -> Result<AttentionMask> {
    if block_regions.len() != layout.n_blocks() {
        return Err(Error::shape(
            format!("{} block regions", layout.n_blocks()),
            block_regions.len(),
        ));
    }
    let n = layout.total;
    let mut allowed = vec![false; n * n];
    let shared = layout.n_prompt + layout.n_image();
    for q in 0..shared {
        allowed[q * n..q * n + shared].fill(true);
    }
    let img0 = layout.n_prompt;
    for (range, region) in layout.glyph_ranges.iter().zip(block_regions) {
        if region.len() != layout.n_image() {
            return Err(Error::shape(layout.n_image(), region.len()));
        }
        for q in range.clone() {
            allowed[q * n + range.start..q * n + range.end].fill(true);
            for (i, _) in region.bits().iter().enumerate().filter(|(_, &b)| b) {
                allowed[q * n + img0 + i] = true;
                allowed[(img0 + i) * n + q] = true;
            }
        }
    }
    Ok(AttentionMask { n, allowed })
}

/// Union of every block's rasterized bbox.
pub fn overall_text_region(condition: &Condition, layout: &TokenLayout) -> Result<RegionMask> {
    let mut region = RegionMask::zeros(layout.n_image());
    for block in &condition.blocks {
        region = region.or(&rasterize_bbox(&block.bbox, layout)?);
    }
    Ok(region)
}

pub fn block_regions(condition: &Condition, layout: &TokenLayout) -> Result<Vec<RegionMask>> {
    condition
        .blocks
        .iter()
        .map(|b| rasterize_bbox(&b.bbox, layout))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPreferenceMasks {
    /// Correct text region of each image.
    pub intra_pos: Vec<RegionMask>,
    /// Incorrect text region of each image.
    pub intra_neg: Vec<RegionMask>,
    /// `inter[i][j]`: where image i is correct and image j is not.
    pub inter: Vec<Vec<RegionMask>>,
    pub text_region: RegionMask,
}

pub fn build_preference_masks(
    group: &CandidateGroup,
    layout: &TokenLayout,
) -> Result<GroupPreferenceMasks> {
    let text_region = overall_text_region(&group.condition, layout)?;
    let mut intra_pos = Vec::with_capacity(group.len());
    let mut intra_neg = Vec::with_capacity(group.len());
    for anns in &group.annotations {
        let mut wrong = RegionMask::zeros(layout.n_image());
        for ann in anns {
            ann.validate(&group.condition)?;
            for rect in &ann.incorrect_rects {
                wrong = wrong.or(&rasterize_bbox(rect, layout)?);
            }
        }
        let neg = wrong.and(&text_region);
        intra_pos.push(text_region.and_not(&neg));
        intra_neg.push(neg);
    }
    let inter = intra_pos
        .iter()
        .map(|pos| intra_neg.iter().map(|neg| pos.and(neg)).collect())
        .collect();
    Ok(GroupPreferenceMasks {
        intra_pos,
        intra_neg,
        inter,
        text_region,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphkit::{CanvasImage, GroupSource, RegionAnnotation, TextBlock};

    fn cfg() -> ModelConfig {
        ModelConfig {
            glyph_canvas: (8, 8),
            ..ModelConfig::default()
        }
    }

    fn cond(blocks: Vec<TextBlock>) -> Condition {
        Condition::new(0, blocks, 16, 16).unwrap()
    }

    #[test]
    fn layout_counts() {
        let c = cond(vec![TextBlock::new("A", Rect::new(0, 0, 5, 7))]);
        let l = build_token_layout(&c, &cfg()).unwrap();
        assert_eq!(l.total, 4 + 64 + 16);
        assert_eq!(l.glyph_ranges, vec![68..84]);

        let c = cond(vec![
            TextBlock::new("A", Rect::new(0, 0, 5, 7)),
            TextBlock::new("B", Rect::new(0, 8, 5, 15)),
        ]);
        let l = build_token_layout(&c, &cfg()).unwrap();
        assert_eq!(l.total, 100);
        assert_eq!(l.glyph_ranges, vec![68..84, 84..100]);
    }

    #[test]
    fn layout_rejects_indivisible_patch() {
        let c = cond(vec![TextBlock::new("A", Rect::new(0, 0, 5, 7))]);
        let bad = ModelConfig { patch: 3, ..cfg() };
        assert!(matches!(
            build_token_layout(&c, &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rasterize_examples() {
        let l = TokenLayout::from_parts(4, (8, 8), 2, (4, 8), 0);
        assert_eq!(
            rasterize_bbox(&Rect::new(0, 0, 16, 16), &l).unwrap(),
            RegionMask::ones(64)
        );
        let m = rasterize_bbox(&Rect::new(0, 0, 4, 4), &l).unwrap();
        let set: Vec<usize> = (0..64).filter(|&i| m.get(i)).collect();
        assert_eq!(set, vec![0, 1, 8, 9]);
        let m = rasterize_bbox(&Rect::new(1, 1, 2, 2), &l).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(0));
        let m = rasterize_bbox(&Rect::new(2, 3, 3, 4), &l).unwrap();
        assert!(m.get(l.image_token(1, 1)) && m.count() == 1);
        assert!(matches!(
            rasterize_bbox(&Rect::new(3, 3, 3, 5), &l),
            Err(Error::DegenerateRegion(_))
        ));
    }

    #[test]
    fn attention_mask_worked_example() {
        // prompt {0,1}, image 2x2 = {2..6}, glyph {6,7}
        let l = TokenLayout::from_parts(2, (2, 2), 2, (1, 2), 1);
        let region = RegionMask::from_bits(vec![true, true, false, false]);
        let a = build_attention_mask(&l, &[region]).unwrap();
        assert!(a.get(0, 3));
        assert!(a.get(2, 6) && a.get(6, 2));
        assert!(!a.get(4, 6));
        assert!(!a.get(0, 6));
        assert!(a.get(6, 7));
        assert!(a.is_symmetric());
    }

    #[test]
    fn attention_mask_without_blocks() {
        let l = TokenLayout::from_parts(2, (2, 2), 2, (1, 2), 0);
        let a = build_attention_mask(&l, &[]).unwrap();
        assert_eq!(a.size(), 6);
        assert!((0..6).all(|q| (0..6).all(|k| a.get(q, k))));
    }

    #[test]
    fn glyphs_of_different_blocks_do_not_attend() {
        let l = TokenLayout::from_parts(1, (2, 2), 2, (1, 1), 2);
        let r = RegionMask::ones(4);
        let a = build_attention_mask(&l, &[r.clone(), r]).unwrap();
        assert!(!a.get(5, 6) && !a.get(6, 5));
        assert!(a.get(5, 5) && a.get(6, 6));
    }

    #[test]
    fn preference_mask_examples() {
        let c = cond(vec![TextBlock::new("AB", Rect::new(0, 0, 10, 7))]);
        let l = build_token_layout(&c, &ModelConfig::default()).unwrap();
        let img = CanvasImage::filled(16, 16, 0.0);
        let group = CandidateGroup::new(
            c.clone(),
            vec![img.clone(), img],
            vec![
                vec![RegionAnnotation::clean(0)],
                vec![RegionAnnotation {
                    block_index: 0,
                    incorrect_rects: c.blocks[0].cell_rects(),
                }],
            ],
            GroupSource::Human,
        )
        .unwrap();
        let m = build_preference_masks(&group, &l).unwrap();
        let text = overall_text_region(&c, &l).unwrap();
        assert_eq!(m.intra_pos[0], text);
        assert!(!m.intra_neg[0].any());
        assert_eq!(m.inter[0][1], text);
        assert!(!m.inter[1][0].any());
        assert!(!m.inter[0][0].any() && !m.inter[1][1].any());
    }

    #[test]
    fn annotation_outside_block_rejected() {
        let c = cond(vec![TextBlock::new("A", Rect::new(0, 0, 5, 7))]);
        let l = build_token_layout(&c, &ModelConfig::default()).unwrap();
        let img = CanvasImage::filled(16, 16, 0.0);
        let group = CandidateGroup {
            condition: c,
            images: vec![img.clone(), img],
            annotations: vec![
                vec![RegionAnnotation {
                    block_index: 0,
                    incorrect_rects: vec![Rect::new(4, 0, 9, 7)],
                }],
                vec![RegionAnnotation::clean(0)],
            ],
            source: GroupSource::Human,
        };
        assert!(matches!(
            build_preference_masks(&group, &l),
            Err(Error::AnnotationOutOfBlock { .. })
        ));
    }

    #[test]
    fn two_block_text_region_popcount() {
        let c = cond(vec![
            TextBlock::new("AB", Rect::new(0, 0, 10, 7)),
            TextBlock::new("1", Rect::new(6, 8, 11, 15)),
        ]);
        let l = build_token_layout(&c, &ModelConfig::default()).unwrap();
        let regions = block_regions(&c, &l).unwrap();
        let text = overall_text_region(&c, &l).unwrap();
        assert_eq!(
            text.count(),
            regions.iter().map(RegionMask::count).sum::<usize>()
        );
        assert_eq!(text, regions[0].or(&regions[1]));
    }

    #[test]
    fn pixel_broadcast() {
        let l = TokenLayout::from_parts(0, (2, 2), 2, (1, 1), 0);
        let m = RegionMask::from_bits(vec![false, true, false, false]);
        let px = m.to_pixels(&l);
        assert_eq!(
            px,
            vec![0., 0., 1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0.]
        );
    }
}
