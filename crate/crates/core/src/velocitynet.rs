//! The velocity-field network `v_θ(x_t, t, c)`.
//!
//! A small pre-norm transformer over `[prompt | image patches | glyph patches per block]`
//! tokens under the block-localized attention mask. Image and glyph tokens share one
//! positional table: a glyph token takes the position of the image token its canvas
//! offset lands on when the canvas is anchored at the block's bbox origin.
//!
//! Reverse-mode gradients are written by hand. Everything runs in `f64`.

use std::fmt;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyphkit::{
    render_glyph_image, BitGrid, CanvasImage, Condition, CHARSET_VERSION, STYLES,
};
use crate::maskforge::{
    block_regions, build_attention_mask, build_token_layout, overall_text_region, AttentionMask,
    RegionMask, TokenLayout,
};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square image side, in pixels.
    pub image_size: usize,
    pub patch: usize,
    pub n_prompt: usize,
    pub n_styles: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Number of sinusoid frequencies in the time features.
    pub time_freqs: usize,
    /// Per-block glyph canvas as (width, height) in pixels.
    pub glyph_canvas: (usize, usize),
    pub max_blocks: usize,
    /// Relative-position attention bias covers grid offsets in `[-r, r]²` (clipped beyond).
    pub rel_radius: usize,
    pub charset_version: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 16,
            patch: 2,
            n_prompt: 4,
            n_styles: STYLES.len(),
            embed_dim: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            time_freqs: 4,
            glyph_canvas: (16, 8),
            max_blocks: 2,
            rel_radius: 2,
            charset_version: CHARSET_VERSION.to_string(),
        }
    }
}

impl ModelConfig {
    /// The configuration used by gradient checks: one layer, narrow, small canvas.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 8,
            patch: 2,
            n_prompt: 2,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 12,
            time_freqs: 2,
            glyph_canvas: (8, 8),
            max_blocks: 1,
            rel_radius: 1,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return fail(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        let (gw, gh) = self.glyph_canvas;
        if gw == 0 || gh == 0 || gw % self.patch != 0 || gh % self.patch != 0 {
            return fail(format!(
                "glyph canvas {gw}x{gh} not divisible by patch {}",
                self.patch
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.n_styles < STYLES.len() {
            return fail(format!(
                "{} styles configured, {} needed",
                self.n_styles,
                STYLES.len()
            ));
        }
        if self.charset_version != CHARSET_VERSION {
            return fail(format!(
                "charset {} != {CHARSET_VERSION}",
                self.charset_version
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn n_image(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn time_dim(&self) -> usize {
        1 + 2 * self.time_freqs
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Relative-bias buckets per head: (image|glyph)² token kinds × clipped 2-D offsets.
    pub fn rel_buckets(&self) -> usize {
        let side = 2 * self.rel_radius + 1;
        4 * side * side
    }
}

/// One named parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
struct LayerSlots {
    attn_norm: Slot,
    rel_bias: Slot,
    wq: Slot,
    wk: Slot,
    wv: Slot,
    wo: Slot,
    ff_norm: Slot,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    prompt_embed: Slot,
    pos_embed: Slot,
    image_w: Slot,
    image_b: Slot,
    glyph_w: Slot,
    glyph_b: Slot,
    time_w: Slot,
    time_b: Slot,
    layers: Vec<LayerSlots>,
    out_norm: Slot,
    out_w: Slot,
    out_b: Slot,
    named: Vec<(String, Slot)>,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut named = Vec::new();
        let mut offset = 0;
        let mut slot = |name: String, rows: usize, cols: usize| {
            let s = Slot { offset, rows, cols };
            offset += rows * cols;
            named.push((name, s));
            s
        };
        let d = cfg.embed_dim;
        let pd = cfg.patch_dim();
        let prompt_embed = slot("prompt_embed".into(), cfg.n_styles * cfg.n_prompt, d);
        let pos_embed = slot("pos_embed".into(), cfg.n_image(), d);
        let image_w = slot("image_in.weight".into(), pd, d);
        let image_b = slot("image_in.bias".into(), 1, d);
        let glyph_w = slot("glyph_in.weight".into(), pd, d);
        let glyph_b = slot("glyph_in.bias".into(), 1, d);
        let time_w = slot("time.weight".into(), cfg.time_dim(), d);
        let time_b = slot("time.bias".into(), 1, d);
        let layers = (0..cfg.layers)
            .map(|l| LayerSlots {
                attn_norm: slot(format!("layers.{l}.attn_norm"), 1, d),
                rel_bias: slot(format!("layers.{l}.rel_bias"), cfg.heads, cfg.rel_buckets()),
                wq: slot(format!("layers.{l}.wq"), d, d),
                wk: slot(format!("layers.{l}.wk"), d, d),
                wv: slot(format!("layers.{l}.wv"), d, d),
                wo: slot(format!("layers.{l}.wo"), d, d),
                ff_norm: slot(format!("layers.{l}.ff_norm"), 1, d),
                w1: slot(format!("layers.{l}.w1"), d, cfg.ff_dim),
                b1: slot(format!("layers.{l}.b1"), 1, cfg.ff_dim),
                w2: slot(format!("layers.{l}.w2"), cfg.ff_dim, d),
                b2: slot(format!("layers.{l}.b2"), 1, d),
            })
            .collect();
        let out_norm = slot("out_norm".into(), 1, d);
        let out_w = slot("out.weight".into(), d, pd);
        let out_b = slot("out.bias".into(), 1, pd);
        ParamLayout {
            prompt_embed,
            pos_embed,
            image_w,
            image_b,
            glyph_w,
            glyph_b,
            time_w,
            time_b,
            layers,
            out_norm,
            out_w,
            out_b,
            named,
            total: offset,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn named(&self) -> &[(String, Slot)] {
        &self.named
    }
}

/// All trainable weights as one flat vector with a named layout.
#[derive(Clone)]
pub struct ModelParams {
    cfg: ModelConfig,
    layout: ParamLayout,
    pub data: Vec<f64>,
}

impl fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelParams")
            .field("cfg", &self.cfg)
            .field("len", &self.data.len())
            .finish()
    }
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.data == other.data
    }
}

/// Parameter gradients, laid out exactly like [`ModelParams::data`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Gradients {
            data: vec![0.0; len],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

impl ModelParams {
    /// Scaled-uniform initialization: weights ~ U(±√(3/fan_in)), embeddings ~ U(±√3/2),
    /// norm gains 1, biases 0.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, slot) in &layout.named {
            let bound = if name.ends_with("norm") {
                data[slot.range()].fill(1.0);
                continue;
            } else if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                continue;
            } else if name.ends_with("embed") {
                3f64.sqrt() * 0.5
            } else {
                (3.0 / slot.rows as f64).sqrt()
            };
            for v in &mut data[slot.range()] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(ModelParams {
            cfg: cfg.clone(),
            layout,
            data,
        })
    }

    pub fn from_data(cfg: &ModelConfig, data: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        if data.len() != layout.total {
            return Err(Error::shape(layout.total, data.len()));
        }
        Ok(ModelParams {
            cfg: cfg.clone(),
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Named view of one tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| &self.data[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let slot = self
            .layout
            .named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)?;
        Some(&mut self.data[slot.range()])
    }

    fn mat(&self, s: Slot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((s.rows, s.cols), &self.data[s.range()]).expect("slot shape")
    }

    fn vec(&self, s: Slot) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[s.range()])
    }

    /// Velocity at every pixel.
    pub fn forward(
        &self,
        x_t: &CanvasImage,
        t: f64,
        cond: &PreparedCondition,
    ) -> Result<CanvasImage> {
        Ok(self.forward_taped(x_t, t, cond)?.0)
    }

    pub fn forward_taped(
        &self,
        x_t: &CanvasImage,
        t: f64,
        cond: &PreparedCondition,
    ) -> Result<(CanvasImage, Tape)> {
        self.check_inputs(x_t, cond)?;
        let l = &self.layout;
        let cfg = &self.cfg;
        let tl = &cond.layout;
        let n = tl.total;
        let d = cfg.embed_dim;
        let n_img = tl.n_image();
        let img0 = tl.n_prompt;

        let patches = patchify(x_t, cfg.patch);
        let tfeat = time_features(t, cfg.time_freqs);

        let mut x = Array2::<f64>::zeros((n, d));
        let prompt = self.mat(l.prompt_embed);
        let base = cond.condition.prompt_id * cfg.n_prompt;
        x.slice_mut(s![0..img0, ..])
            .assign(&prompt.slice(s![base..base + cfg.n_prompt, ..]));

        let time_vec = tfeat.dot(&self.mat(l.time_w)) + self.vec(l.time_b);
        let mut img = x.slice_mut(s![img0..img0 + n_img, ..]);
        img.assign(&patches.dot(&self.mat(l.image_w)));
        img += &self.mat(l.pos_embed);
        img += &self.vec(l.image_b);
        img += &time_vec;

        let g0 = img0 + n_img;
        if !cond.glyph_patches.is_empty() {
            let pos = self.mat(l.pos_embed);
            let mut glyph = x.slice_mut(s![g0..n, ..]);
            glyph.assign(&cond.glyph_patches.dot(&self.mat(l.glyph_w)));
            glyph += &self.vec(l.glyph_b);
            for (row, p) in cond.glyph_positions.iter().enumerate() {
                if let Some(p) = *p {
                    let mut r = glyph.row_mut(row);
                    r += &pos.row(p);
                }
            }
        }

        let mut layer_tapes = Vec::with_capacity(cfg.layers);
        for ls in &l.layers {
            let (x_next, tape) = self.layer_forward(ls, x, cond)?;
            layer_tapes.push(tape);
            x = x_next;
        }

        let x_img = x.slice(s![img0..img0 + n_img, ..]).to_owned();
        let (normed, inv_rms) = rms_normalize(&x_img);
        let z = &normed * &self.vec(l.out_norm);
        let y = z.dot(&self.mat(l.out_w)) + self.vec(l.out_b);
        let out = unpatchify(&y, cfg.patch, cfg.image_size);
        let tape = Tape {
            patches,
            tfeat,
            layers: layer_tapes,
            final_normed: normed,
            final_inv_rms: inv_rms,
            final_z: z,
            n_tokens: n,
            img0,
            n_img,
        };
        Ok((out, tape))
    }

    fn check_inputs(&self, x_t: &CanvasImage, cond: &PreparedCondition) -> Result<()> {
        let side = self.cfg.image_size;
        if x_t.width != side || x_t.height != side || x_t.data.len() != side * side {
            return Err(Error::shape(
                format!("{side}x{side} grid"),
                format!("{}x{}", x_t.width, x_t.height),
            ));
        }
        if cond.cfg != self.cfg {
            return Err(Error::CheckpointMismatch(
                "condition prepared for a different model config".into(),
            ));
        }
        Ok(())
    }

    fn layer_forward(
        &self,
        ls: &LayerSlots,
        x_in: Array2<f64>,
        cond: &PreparedCondition,
    ) -> Result<(Array2<f64>, LayerTape)> {
        let cfg = &self.cfg;
        let (n, d) = x_in.dim();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let (n1, inv1) = rms_normalize(&x_in);
        let a = &n1 * &self.vec(ls.attn_norm);
        let q = a.dot(&self.mat(ls.wq));
        let k = a.dot(&self.mat(ls.wk));
        let v = a.dot(&self.mat(ls.wv));
        let mut o = Array2::<f64>::zeros((n, d));
        let mut probs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores.mapv_inplace(|s| s * scale);
            let bias = self.mat(ls.rel_bias);
            add_rel_bias(&mut scores, &cond.rel_index, bias.row(h));
            masked_softmax_rows(&mut scores, &cond.mask);
            o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let x_mid = &x_in + &o.dot(&self.mat(ls.wo));

        let (n2, inv2) = rms_normalize(&x_mid);
        let b = &n2 * &self.vec(ls.ff_norm);
        let u = b.dot(&self.mat(ls.w1)) + self.vec(ls.b1);
        let hid = u.mapv(silu);
        let x_out = &x_mid + &(hid.dot(&self.mat(ls.w2)) + self.vec(ls.b2));
        let tape = LayerTape {
            n1,
            inv1,
            a,
            q,
            k,
            v,
            probs,
            o,
            n2,
            inv2,
            b,
            u,
            hid,
        };
        Ok((x_out, tape))
    }

    /// Accumulates `∂⟨cotangent, output⟩/∂θ` for one taped forward pass into `grads`.
    pub fn backward(
        &self,
        tape: &Tape,
        cond: &PreparedCondition,
        cotangent: &CanvasImage,
        grads: &mut Gradients,
    ) -> Result<()> {
        let cfg = &self.cfg;
        let side = cfg.image_size;
        if cotangent.width != side || cotangent.height != side {
            return Err(Error::shape(
                format!("{side}x{side} cotangent"),
                format!("{}x{}", cotangent.width, cotangent.height),
            ));
        }
        let l = &self.layout;
        let d = cfg.embed_dim;
        let dy = patchify(cotangent, cfg.patch);
        let g = &mut grads.data;

        // output head
        add_mat(g, l.out_w, &tape.final_z.t().dot(&dy));
        add_vec(g, l.out_b, &dy.sum_axis(Axis(0)));
        let dz = dy.dot(&self.mat(l.out_w).t());
        add_vec(g, l.out_norm, &(&dz * &tape.final_normed).sum_axis(Axis(0)));
        let dn = &dz * &self.vec(l.out_norm);
        let dx_img = rms_backward(&dn, &tape.final_normed, &tape.final_inv_rms);

        let mut dx = Array2::<f64>::zeros((tape.n_tokens, d));
        dx.slice_mut(s![tape.img0..tape.img0 + tape.n_img, ..])
            .assign(&dx_img);

        for (ls, lt) in l.layers.iter().zip(&tape.layers).rev() {
            dx = self.layer_backward(ls, lt, dx, cond, g);
        }

        // input embeddings
        let img = s![tape.img0..tape.img0 + tape.n_img, ..];
        let dimg = dx.slice(img);
        add_mat(g, l.image_w, &tape.patches.t().dot(&dimg));
        let dimg_sum = dimg.sum_axis(Axis(0));
        add_vec(g, l.image_b, &dimg_sum);
        add_mat(g, l.pos_embed, &dimg.to_owned());
        add_vec(g, l.time_b, &dimg_sum);
        let tf = tape.tfeat.view().insert_axis(Axis(1));
        add_mat(g, l.time_w, &tf.dot(&dimg_sum.view().insert_axis(Axis(0))));

        let base = cond.condition.prompt_id * cfg.n_prompt;
        {
            let mut pe = slot_mat_mut(g, l.prompt_embed);
            let mut rows = pe.slice_mut(s![base..base + cfg.n_prompt, ..]);
            rows += &dx.slice(s![0..tape.img0, ..]);
        }

        let g0 = tape.img0 + tape.n_img;
        if !cond.glyph_patches.is_empty() {
            let dg = dx.slice(s![g0..tape.n_tokens, ..]);
            add_mat(g, l.glyph_w, &cond.glyph_patches.t().dot(&dg));
            add_vec(g, l.glyph_b, &dg.sum_axis(Axis(0)));
            let mut pe = slot_mat_mut(g, l.pos_embed);
            for (row, p) in cond.glyph_positions.iter().enumerate() {
                if let Some(p) = *p {
                    let mut r = pe.row_mut(p);
                    r += &dg.row(row);
                }
            }
        }
        Ok(())
    }

    fn layer_backward(
        &self,
        ls: &LayerSlots,
        lt: &LayerTape,
        dx_out: Array2<f64>,
        cond: &PreparedCondition,
        g: &mut [f64],
    ) -> Array2<f64> {
        let cfg = &self.cfg;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // feed-forward branch
        let df = &dx_out;
        add_mat(g, ls.w2, &lt.hid.t().dot(df));
        add_vec(g, ls.b2, &df.sum_axis(Axis(0)));
        let dhid = df.dot(&self.mat(ls.w2).t());
        let mut du = dhid;
        Zip::from(&mut du)
            .and(&lt.u)
            .for_each(|d, &u| *d *= silu_grad(u));
        add_mat(g, ls.w1, &lt.b.t().dot(&du));
        add_vec(g, ls.b1, &du.sum_axis(Axis(0)));
        let db = du.dot(&self.mat(ls.w1).t());
        add_vec(g, ls.ff_norm, &(&db * &lt.n2).sum_axis(Axis(0)));
        let dn2 = &db * &self.vec(ls.ff_norm);
        let dx_mid = &dx_out + &rms_backward(&dn2, &lt.n2, &lt.inv2);

        // attention branch
        add_mat(g, ls.wo, &lt.o.t().dot(&dx_mid));
        let do_ = dx_mid.dot(&self.mat(ls.wo).t());
        let mut dq = Array2::<f64>::zeros(lt.q.dim());
        let mut dk = Array2::<f64>::zeros(lt.k.dim());
        let mut dv = Array2::<f64>::zeros(lt.v.dim());
        for (h, p) in lt.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let doh = do_.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let dp = doh.dot(&lt.v.slice(cols).t());
            let mut ds = softmax_backward(p, &dp, &cond.mask);
            {
                let mut bias = slot_mat_mut(g, ls.rel_bias);
                let mut row = bias.row_mut(h);
                for (&idx, &v) in cond.rel_index.iter().zip(ds.iter()) {
                    if idx != NO_BUCKET {
                        row[idx as usize] += v;
                    }
                }
            }
            ds.mapv_inplace(|x| x * scale);
            dq.slice_mut(cols).assign(&ds.dot(&lt.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lt.q.slice(cols)));
        }
        add_mat(g, ls.wq, &lt.a.t().dot(&dq));
        add_mat(g, ls.wk, &lt.a.t().dot(&dk));
        add_mat(g, ls.wv, &lt.a.t().dot(&dv));
        let da = dq.dot(&self.mat(ls.wq).t())
            + dk.dot(&self.mat(ls.wk).t())
            + dv.dot(&self.mat(ls.wv).t());
        add_vec(g, ls.attn_norm, &(&da * &lt.n1).sum_axis(Axis(0)));
        let dn1 = &da * &self.vec(ls.attn_norm);
        dx_mid + rms_backward(&dn1, &lt.n1, &lt.inv1)
    }

    /// Attention probabilities of one forward pass, per layer and head.
    pub fn attention_probs<'t>(&self, tape: &'t Tape) -> Vec<&'t [Array2<f64>]> {
        tape.layers.iter().map(|l| l.probs.as_slice()).collect()
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    patches: Array2<f64>,
    tfeat: Array1<f64>,
    layers: Vec<LayerTape>,
    final_normed: Array2<f64>,
    final_inv_rms: Array1<f64>,
    final_z: Array2<f64>,
    n_tokens: usize,
    img0: usize,
    n_img: usize,
}

#[derive(Debug, Clone)]
struct LayerTape {
    n1: Array2<f64>,
    inv1: Array1<f64>,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    n2: Array2<f64>,
    inv2: Array1<f64>,
    b: Array2<f64>,
    u: Array2<f64>,
    hid: Array2<f64>,
}

/// A condition with everything the network needs precomputed: layout, attention mask,
/// glyph canvas patches and their aligned positions, and region masks.
#[derive(Debug, Clone)]
pub struct PreparedCondition {
    pub condition: Condition,
    pub layout: TokenLayout,
    pub mask: AttentionMask,
    pub block_regions: Vec<RegionMask>,
    pub text_region: RegionMask,
    glyph_patches: Array2<f64>,
    glyph_positions: Vec<Option<usize>>,
    /// Row-major `n × n` relative-bias bucket per (query, key), or [`NO_BUCKET`].
    rel_index: Vec<u32>,
    cfg: ModelConfig,
}

impl PreparedCondition {
    pub fn new(condition: &Condition, cfg: &ModelConfig) -> Result<Self> {
        condition.validate(cfg.image_size, cfg.image_size)?;
        let layout = build_token_layout(condition, cfg)?;
        let regions = block_regions(condition, &layout)?;
        let mask = build_attention_mask(&layout, &regions)?;
        let text_region = overall_text_region(condition, &layout)?;
        let (gw, gh) = cfg.glyph_canvas;
        let p = cfg.patch;
        let per_block = layout.glyph_tokens_per_block();
        let mut glyph_patches =
            Array2::<f64>::zeros((per_block * condition.blocks.len(), cfg.patch_dim()));
        let mut glyph_positions = Vec::with_capacity(per_block * condition.blocks.len());
        let grid = cfg.grid();
        for (b, block) in condition.blocks.iter().enumerate() {
            let strip = render_glyph_image(&block.text, block.cell_size())?;
            let mut canvas = BitGrid::new(gw, gh);
            for y in 0..strip.height {
                for x in 0..strip.width {
                    canvas.set(x, y, strip.get(x, y));
                }
            }
            let (r0, c0) = (block.bbox.y0 / p, block.bbox.x0 / p);
            for gr in 0..layout.glyph_grid.0 {
                for gc in 0..layout.glyph_grid.1 {
                    let row = b * per_block + gr * layout.glyph_grid.1 + gc;
                    for dy in 0..p {
                        for dx in 0..p {
                            if canvas.get(gc * p + dx, gr * p + dy) {
                                glyph_patches[[row, dy * p + dx]] = 1.0;
                            }
                        }
                    }
                    let (r, c) = (r0 + gr, c0 + gc);
                    glyph_positions.push((r < grid && c < grid).then(|| r * grid + c));
                }
            }
        }
        let rel_index = relative_buckets(&layout, &glyph_positions, cfg);
        Ok(PreparedCondition {
            condition: condition.clone(),
            layout,
            mask,
            block_regions: regions,
            text_region,
            glyph_patches,
            glyph_positions,
            rel_index,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Text region expanded to a per-pixel 0/1 grid.
    pub fn text_region_pixels(&self) -> Vec<f64> {
        self.text_region.to_pixels(&self.layout)
    }
}

/// Anything that predicts a velocity grid and can backpropagate a cotangent into parameter
/// gradients. Implemented by [`ModelParams`]; tests substitute analytic stubs.
pub trait VelocityField: Sync {
    type Tape: Send;

    fn config(&self) -> &ModelConfig;

    fn velocity(&self, x_t: &CanvasImage, t: f64, cond: &PreparedCondition) -> Result<CanvasImage>;

    fn velocity_taped(
        &self,
        x_t: &CanvasImage,
        t: f64,
        cond: &PreparedCondition,
    ) -> Result<(CanvasImage, Self::Tape)>;

    fn accumulate_grads(
        &self,
        tape: &Self::Tape,
        cond: &PreparedCondition,
        cotangent: &CanvasImage,
        grads: &mut Gradients,
    ) -> Result<()>;

    fn zero_grads(&self) -> Gradients;
}

impl VelocityField for ModelParams {
    type Tape = Tape;

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn velocity(&self, x_t: &CanvasImage, t: f64, cond: &PreparedCondition) -> Result<CanvasImage> {
        self.forward(x_t, t, cond)
    }

    fn velocity_taped(
        &self,
        x_t: &CanvasImage,
        t: f64,
        cond: &PreparedCondition,
    ) -> Result<(CanvasImage, Tape)> {
        self.forward_taped(x_t, t, cond)
    }

    fn accumulate_grads(
        &self,
        tape: &Tape,
        cond: &PreparedCondition,
        cotangent: &CanvasImage,
        grads: &mut Gradients,
    ) -> Result<()> {
        self.backward(tape, cond, cotangent, grads)
    }

    fn zero_grads(&self) -> Gradients {
        Gradients::zeros(self.data.len())
    }
}

/// One element of a gradient batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub x_t: &'a CanvasImage,
    pub t: f64,
    pub cond: &'a PreparedCondition,
}

/// `∂(Σ_b ⟨cotangent_b, v_θ(x_t^b, t^b, c^b)⟩)/∂θ`. Elements run in parallel; the sum is
/// reduced in batch order so results are reproducible.
pub fn forward_with_gradients<M: VelocityField>(
    params: &M,
    batch: &[BatchItem<'_>],
    cotangents: &[CanvasImage],
) -> Result<Gradients> {
    if batch.len() != cotangents.len() {
        return Err(Error::shape(
            format!("{} cotangents", batch.len()),
            cotangents.len(),
        ));
    }
    let parts: Vec<Gradients> = batch
        .par_iter()
        .zip(cotangents.par_iter())
        .map(|(item, cot)| {
            let (_, tape) = params.velocity_taped(item.x_t, item.t, item.cond)?;
            let mut g = params.zero_grads();
            params.accumulate_grads(&tape, item.cond, cot, &mut g)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut total = params.zero_grads();
    for g in &parts {
        total.add_assign(g);
    }
    Ok(total)
}

/// `[t, sin(ω_k t), cos(ω_k t)]` with `ω_k = 2^k·π/2`.
pub fn time_features(t: f64, freqs: usize) -> Array1<f64> {
    let mut f = Array1::zeros(1 + 2 * freqs);
    f[0] = t;
    for k in 0..freqs {
        let w = std::f64::consts::FRAC_PI_2 * (1u64 << k) as f64;
        f[1 + 2 * k] = (w * t).sin();
        f[2 + 2 * k] = (w * t).cos();
    }
    f
}

/// Image → (tokens × patch²), tokens row-major over the grid, pixels row-major in a patch.
pub fn patchify(img: &CanvasImage, p: usize) -> Array2<f64> {
    let (gr, gc) = (img.height / p, img.width / p);
    let mut out = Array2::zeros((gr * gc, p * p));
    for r in 0..gr {
        for c in 0..gc {
            for dy in 0..p {
                for dx in 0..p {
                    out[[r * gc + c, dy * p + dx]] = img.get(c * p + dx, r * p + dy);
                }
            }
        }
    }
    out
}

pub fn unpatchify(tokens: &Array2<f64>, p: usize, side: usize) -> CanvasImage {
    let g = side / p;
    let mut img = CanvasImage::filled(side, side, 0.0);
    for r in 0..g {
        for c in 0..g {
            for dy in 0..p {
                for dx in 0..p {
                    img.set(c * p + dx, r * p + dy, tokens[[r * g + c, dy * p + dx]]);
                }
            }
        }
    }
    img
}

fn rms_normalize(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let inv: Array1<f64> = x
        .rows()
        .into_iter()
        .map(|r| 1.0 / (r.dot(&r) / d + RMS_EPS).sqrt())
        .collect();
    let normed = x * &inv.view().insert_axis(Axis(1));
    (normed, inv)
}

/// Backward of `n = x / rms(x)` given `dn`.
fn rms_backward(dn: &Array2<f64>, normed: &Array2<f64>, inv: &Array1<f64>) -> Array2<f64> {
    let d = dn.ncols() as f64;
    let mut dx = dn.clone();
    for ((mut row, n), &r) in dx.rows_mut().into_iter().zip(normed.rows()).zip(inv) {
        let m = row.dot(&n) / d;
        Zip::from(&mut row)
            .and(&n)
            .for_each(|g, &nv| *g = r * (*g - nv * m));
    }
    dx
}

const NO_BUCKET: u32 = u32::MAX;

/// Bucket of every (query, key) pair where both tokens sit on the image grid: image tokens at
/// their own cell, glyph tokens at their aligned cell. Prompt tokens and off-grid glyph tokens
/// get no bias.
fn relative_buckets(
    layout: &TokenLayout,
    glyph_positions: &[Option<usize>],
    cfg: &ModelConfig,
) -> Vec<u32> {
    let n = layout.total;
    let grid = cfg.grid();
    let mut place: Vec<Option<(usize, usize, usize)>> = vec![None; n];
    for (i, p) in place[layout.image_range()].iter_mut().enumerate() {
        *p = Some((0, i / grid, i % grid));
    }
    let g0 = layout.image_range().end;
    for (i, pos) in glyph_positions.iter().enumerate() {
        place[g0 + i] = pos.map(|p| (1, p / grid, p % grid));
    }
    let r = cfg.rel_radius as isize;
    let side = (2 * r + 1) as usize;
    let mut out = vec![NO_BUCKET; n * n];
    for (q, pq) in place.iter().enumerate() {
        let Some((kq, rq, cq)) = *pq else { continue };
        for (k, pk) in place.iter().enumerate() {
            let Some((kk, rk, ck)) = *pk else { continue };
            let dr = (rk as isize - rq as isize).clamp(-r, r) + r;
            let dc = (ck as isize - cq as isize).clamp(-r, r) + r;
            let kind = kq * 2 + kk;
            out[q * n + k] = (kind * side * side + dr as usize * side + dc as usize) as u32;
        }
    }
    out
}

fn add_rel_bias(scores: &mut Array2<f64>, index: &[u32], bias: ArrayView1<'_, f64>) {
    for (s, &idx) in scores.iter_mut().zip(index) {
        if idx != NO_BUCKET {
            *s += bias[idx as usize];
        }
    }
}

fn masked_softmax_rows(scores: &mut Array2<f64>, mask: &AttentionMask) {
    for (q, mut row) in scores.rows_mut().into_iter().enumerate() {
        let allowed = mask.row(q);
        let mut max = f64::NEG_INFINITY;
        for (s, &a) in row.iter().zip(allowed) {
            if a && *s > max {
                max = *s;
            }
        }
        let mut sum = 0.0;
        for (s, &a) in row.iter_mut().zip(allowed) {
            *s = if a { (*s - max).exp() } else { 0.0 };
            sum += *s;
        }
        row.mapv_inplace(|s| s / sum);
    }
}

fn softmax_backward(p: &Array2<f64>, dp: &Array2<f64>, mask: &AttentionMask) -> Array2<f64> {
    let mut ds = Array2::zeros(p.dim());
    for (q, ((mut out, pr), dpr)) in ds
        .rows_mut()
        .into_iter()
        .zip(p.rows())
        .zip(dp.rows())
        .enumerate()
    {
        let dot = pr.dot(&dpr);
        let allowed = mask.row(q);
        for (k, o) in out.iter_mut().enumerate() {
            if allowed[k] {
                *o = pr[k] * (dpr[k] - dot);
            }
        }
    }
    ds
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn slot_mat_mut(g: &mut [f64], s: Slot) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut g[s.range()]).expect("slot shape")
}

fn add_mat(g: &mut [f64], s: Slot, m: &Array2<f64>) {
    let mut view = slot_mat_mut(g, s);
    view += m;
}

fn add_vec(g: &mut [f64], s: Slot, v: &Array1<f64>) {
    let mut view = ArrayViewMut1::from(&mut g[s.range()]);
    view += v;
}
