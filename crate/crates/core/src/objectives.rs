//! Training objectives: flow matching, (masked) SFT, image-level DPO, region DPO, and
//! region-grouped DPO with inter-/intra-sample preference masks, plus the Monte-Carlo
//! implicit reward diagnostic.
//!
//! Every path uses `x_t = (1−t)·x_0 + t·ε` and target velocity `v = ε − x_0`. Squared
//! norms are sums over pixels. Preference losses differentiate only through `θ`; the
//! reference model is evaluated but never receives gradients.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyphkit::{CandidateGroup, CanvasImage};
use crate::maskforge::{build_preference_masks, GroupPreferenceMasks, RegionMask};
use crate::velocitynet::{Gradients, PreparedCondition, VelocityField};

/// Timestep weight `ω_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum TimestepWeight {
    Constant(f64),
    /// `ω_t = 1 − t`, down-weighting near-noise timesteps.
    OneMinusT,
}

impl TimestepWeight {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            TimestepWeight::Constant(w) => w,
            TimestepWeight::OneMinusT => 1.0 - t,
        }
    }
}

impl Default for TimestepWeight {
    fn default() -> Self {
        TimestepWeight::Constant(1.0)
    }
}

/// How `(t, ε)` is drawn for the members of one candidate group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSharing {
    /// One draw reused by every member, so pixels where members agree contribute
    /// identical terms to each contrast.
    #[default]
    PerGroup,
    PerMember,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub beta: f64,
    /// Step-count multiplier; only the product `beta * t_mult` matters.
    pub t_mult: f64,
    pub lambda_inter: f64,
    #[serde(default)]
    pub timestep_weight: TimestepWeight,
    pub group_size: usize,
    #[serde(default)]
    pub noise_sharing: NoiseSharing,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            beta: 2.0,
            t_mult: 1.0,
            lambda_inter: 0.7,
            timestep_weight: TimestepWeight::default(),
            group_size: 4,
            noise_sharing: NoiseSharing::default(),
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta <= 0.0 || self.t_mult.is_nan() || self.t_mult <= 0.0 {
            return Err(Error::Config(format!(
                "beta {} and T {} must be positive",
                self.beta, self.t_mult
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_inter) {
            return Err(Error::Config(format!(
                "lambda_inter {} outside [0, 1]",
                self.lambda_inter
            )));
        }
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if let TimestepWeight::Constant(w) = self.timestep_weight {
            if w.is_nan() || w <= 0.0 {
                return Err(Error::Config(format!(
                    "timestep weight {w} must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn beta_t(&self) -> f64 {
        self.beta * self.t_mult
    }
}

/// One noise draw `(t, ε)` for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: f64,
    pub eps: CanvasImage,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize) -> Self {
        let t = rng.gen::<f64>().clamp(1e-6, 1.0 - 1e-6);
        let eps = CanvasImage {
            width,
            height,
            data: (0..width * height)
                .map(|_| rng.sample(StandardNormal))
                .collect(),
        };
        NoiseDraw { t, eps }
    }

    /// Returns `(x_t, v)` for clean image `x0`.
    pub fn interpolate(&self, x0: &CanvasImage) -> (CanvasImage, CanvasImage) {
        let t = self.t;
        let x_t = zip_map(x0, &self.eps, |x, e| (1.0 - t) * x + t * e);
        let v = zip_map(x0, &self.eps, |x, e| e - x);
        (x_t, v)
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Gradients,
}

/// One training image with its condition and noise draw.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x0: &'a CanvasImage,
    pub cond: &'a PreparedCondition,
    pub draw: &'a NoiseDraw,
}

/// Everything about one group member needed by the preference losses.
struct MemberEval<T> {
    /// `v − v_θ` per pixel.
    resid_theta: Vec<f64>,
    /// `(v − v_θ)² − (v − v_ref)²` per pixel.
    excess: Vec<f64>,
    tape: Option<T>,
    weight: f64,
}

fn eval_member<M: VelocityField>(
    theta: &M,
    reference: Option<&M>,
    s: &Sample<'_>,
    hyper: &TrainHyper,
    with_tape: bool,
) -> Result<MemberEval<M::Tape>> {
    let (x_t, v) = s.draw.interpolate(s.x0);
    let (v_theta, tape) = if with_tape {
        let (out, tape) = theta.velocity_taped(&x_t, s.draw.t, s.cond)?;
        (out, Some(tape))
    } else {
        (theta.velocity(&x_t, s.draw.t, s.cond)?, None)
    };
    let resid_theta: Vec<f64> = v
        .data
        .iter()
        .zip(&v_theta.data)
        .map(|(a, b)| a - b)
        .collect();
    let excess = match reference {
        Some(r) => {
            let v_ref = r.velocity(&x_t, s.draw.t, s.cond)?;
            resid_theta
                .iter()
                .zip(v.data.iter().zip(&v_ref.data))
                .map(|(rt, (vv, vr))| rt * rt - (vv - vr) * (vv - vr))
                .collect()
        }
        None => resid_theta.iter().map(|r| r * r).collect(),
    };
    Ok(MemberEval {
        resid_theta,
        excess,
        tape,
        weight: hyper.timestep_weight.at(s.draw.t),
    })
}

/// `Σ_p M(p)·e(p)` with `M` broadcast from tokens to pixels.
fn masked_sum(values: &[f64], mask_px: &[f64]) -> f64 {
    values.iter().zip(mask_px).map(|(v, m)| v * m).sum()
}

fn backprop_members<M: VelocityField>(
    theta: &M,
    samples: &[Sample<'_>],
    members: Vec<MemberEval<M::Tape>>,
    coeffs: &[Vec<f64>],
) -> Result<Gradients> {
    let parts: Vec<Gradients> = members
        .into_par_iter()
        .zip(samples.par_iter())
        .zip(coeffs.par_iter())
        .map(|((m, s), c)| {
            let mut g = theta.zero_grads();
            if c.iter().all(|&v| v == 0.0) {
                return Ok(g);
            }
            // d‖M(v − v_θ)‖²/dv_θ = −2·M·(v − v_θ)
            let cot = CanvasImage {
                width: s.x0.width,
                height: s.x0.height,
                data: c
                    .iter()
                    .zip(&m.resid_theta)
                    .map(|(c, r)| -2.0 * c * r)
                    .collect(),
            };
            let tape = m.tape.as_ref().expect("taped member");
            theta.accumulate_grads(tape, s.cond, &cot, &mut g)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut total = theta.zero_grads();
    for g in &parts {
        total.add_assign(g);
    }
    Ok(total)
}

fn eval_all<M: VelocityField>(
    theta: &M,
    reference: Option<&M>,
    samples: &[Sample<'_>],
    hyper: &TrainHyper,
) -> Result<Vec<MemberEval<M::Tape>>> {
    samples
        .par_iter()
        .map(|s| eval_member(theta, reference, s, hyper, true))
        .collect()
}

/// Mean over samples of `‖v − v_θ(x_t, t, c)‖²`.
pub fn flow_matching_loss<M: VelocityField>(
    theta: &M,
    samples: &[Sample<'_>],
) -> Result<LossOutput> {
    let ones: Vec<Vec<f64>> = samples.iter().map(|s| vec![1.0; s.x0.data.len()]).collect();
    masked_flow_loss(theta, samples, &ones)
}

/// Draws `(t, ε)` for every image, then evaluates [`flow_matching_loss`].
pub fn flow_matching_loss_sampled<M: VelocityField, R: Rng + ?Sized>(
    theta: &M,
    batch: &[(&CanvasImage, &PreparedCondition)],
    rng: &mut R,
) -> Result<LossOutput> {
    let draws: Vec<NoiseDraw> = batch
        .iter()
        .map(|(x0, _)| NoiseDraw::sample(rng, x0.width, x0.height))
        .collect();
    let samples: Vec<Sample<'_>> = batch
        .iter()
        .zip(&draws)
        .map(|(&(x0, cond), draw)| Sample { x0, cond, draw })
        .collect();
    flow_matching_loss(theta, &samples)
}

/// Mean over samples of `‖M_s ⊙ (v − v_θ)‖²` with per-pixel masks.
pub fn masked_flow_loss<M: VelocityField>(
    theta: &M,
    samples: &[Sample<'_>],
    masks_px: &[Vec<f64>],
) -> Result<LossOutput> {
    if samples.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let hyper = TrainHyper::default();
    let members = eval_all(theta, None, samples, &hyper)?;
    let n = samples.len() as f64;
    let loss = members
        .iter()
        .zip(masks_px)
        .map(|(m, mask)| masked_sum(&m.excess, mask))
        .sum::<f64>()
        / n;
    let coeffs: Vec<Vec<f64>> = masks_px
        .iter()
        .map(|m| m.iter().map(|v| v / n).collect())
        .collect();
    let grads = backprop_members(theta, samples, members, &coeffs)?;
    Ok(LossOutput { loss, grads })
}

/// Flow matching restricted to each member's correct text region `M_i^+`.
pub fn masked_sft_loss<M: VelocityField>(theta: &M, group: &GroupBatch<'_>) -> Result<LossOutput> {
    let masks: Vec<Vec<f64>> = group
        .masks
        .intra_pos
        .iter()
        .map(|m| m.to_pixels(&group.cond.layout))
        .collect();
    masked_flow_loss(theta, &group.samples(), &masks)
}

/// Plain flow matching over every member of a group.
pub fn sft_loss<M: VelocityField>(theta: &M, group: &GroupBatch<'_>) -> Result<LossOutput> {
    flow_matching_loss(theta, &group.samples())
}

#[inline]
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Preference logit `−βT·(ω_w·Δ_w − ω_l·Δ_l)` and `−log σ(logit)`.
pub fn preference_logit(beta_t: f64, weighted_delta_w: f64, weighted_delta_l: f64) -> (f64, f64) {
    let logit = -beta_t * (weighted_delta_w - weighted_delta_l);
    (logit, -log_sigmoid(logit))
}

/// Image-level DPO on one winner/loser pair.
pub fn dpo_loss<M: VelocityField>(
    theta: &M,
    reference: &M,
    winner: Sample<'_>,
    loser: Sample<'_>,
    hyper: &TrainHyper,
) -> Result<LossOutput> {
    let full = RegionMask::ones(winner.cond.layout.n_image());
    region_dpo_loss(theta, reference, winner, &full, loser, &full, hyper)
}

/// DPO with region masks `M^w`, `M^l` applied to winner and loser before the squared norms.
pub fn region_dpo_loss<M: VelocityField>(
    theta: &M,
    reference: &M,
    winner: Sample<'_>,
    winner_mask: &RegionMask,
    loser: Sample<'_>,
    loser_mask: &RegionMask,
    hyper: &TrainHyper,
) -> Result<LossOutput> {
    let samples = [winner, loser];
    let members = eval_all(theta, Some(reference), &samples, hyper)?;
    let mw = winner_mask.to_pixels(&winner.cond.layout);
    let ml = loser_mask.to_pixels(&loser.cond.layout);
    let dw = members[0].weight * masked_sum(&members[0].excess, &mw);
    let dl = members[1].weight * masked_sum(&members[1].excess, &ml);
    let bt = hyper.beta_t();
    let (logit, loss) = preference_logit(bt, dw, dl);
    // dloss/dlogit = −σ(−logit); dlogit/dΔ_w = −βT·ω_w
    let k = sigmoid(-logit) * bt;
    let coeffs = vec![
        mw.iter().map(|m| k * members[0].weight * m).collect(),
        ml.iter().map(|m| -k * members[1].weight * m).collect(),
    ];
    let grads = backprop_members(theta, &samples, members, &coeffs)?;
    Ok(LossOutput { loss, grads })
}

/// One candidate group ready for a loss evaluation: condition, clean images, one noise draw
/// per member, and the preference masks.
#[derive(Debug, Clone)]
pub struct GroupBatch<'a> {
    pub cond: &'a PreparedCondition,
    pub images: &'a [CanvasImage],
    pub draws: Vec<NoiseDraw>,
    pub masks: GroupPreferenceMasks,
}

impl<'a> GroupBatch<'a> {
    pub fn new(
        cond: &'a PreparedCondition,
        images: &'a [CanvasImage],
        draws: Vec<NoiseDraw>,
        masks: GroupPreferenceMasks,
    ) -> Result<Self> {
        let n = images.len();
        if n < 2 {
            return Err(Error::GroupTooSmall(n));
        }
        if draws.len() != n || masks.intra_pos.len() != n || masks.inter.len() != n {
            return Err(Error::shape(format!("{n} draws and masks"), draws.len()));
        }
        Ok(GroupBatch {
            cond,
            images,
            draws,
            masks,
        })
    }

    /// Builds the masks from the group's annotations and draws fresh noise.
    pub fn from_group<R: Rng + ?Sized>(
        cond: &'a PreparedCondition,
        group: &'a CandidateGroup,
        sharing: NoiseSharing,
        rng: &mut R,
    ) -> Result<Self> {
        let masks = build_preference_masks(group, &cond.layout)?;
        let draws = match sharing {
            NoiseSharing::PerMember => group
                .images
                .iter()
                .map(|img| NoiseDraw::sample(rng, img.width, img.height))
                .collect(),
            NoiseSharing::PerGroup => {
                let first = &group.images[0];
                vec![NoiseDraw::sample(rng, first.width, first.height); group.len()]
            }
        };
        GroupBatch::new(cond, &group.images, draws, masks)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn samples(&self) -> Vec<Sample<'_>> {
        self.images
            .iter()
            .zip(&self.draws)
            .map(|(x0, draw)| Sample {
                x0,
                cond: self.cond,
                draw,
            })
            .collect()
    }
}

/// Region-grouped DPO over a batch of groups (mean over groups).
///
/// Per group: `−(1/N_G)·Σ_i Σ_j λ_ij·log σ(−βT·L_ij)` where off-diagonal pairs contrast
/// members `i` and `j` under the shared inter mask `M_ij^{+,−}` with weight
/// `λ_inter/(N_G−1)`, and the diagonal contrasts the correct vs incorrect region of one
/// member with weight `1 − λ_inter`. An empty mask gives a `log σ(0)` term with zero gradient.
pub fn rgdpo_loss<M: VelocityField>(
    theta: &M,
    reference: &M,
    groups: &[GroupBatch<'_>],
    hyper: &TrainHyper,
) -> Result<LossOutput> {
    hyper.validate()?;
    if groups.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let n_groups = groups.len() as f64;
    let mut loss = 0.0;
    let mut grads = theta.zero_grads();
    for group in groups {
        let out = rgdpo_group(theta, reference, group, hyper)?;
        loss += out.loss / n_groups;
        let mut g = out.grads;
        g.scale(1.0 / n_groups);
        grads.add_assign(&g);
    }
    Ok(LossOutput { loss, grads })
}

fn rgdpo_group<M: VelocityField>(
    theta: &M,
    reference: &M,
    group: &GroupBatch<'_>,
    hyper: &TrainHyper,
) -> Result<LossOutput> {
    let n = group.len();
    let samples = group.samples();
    let members = eval_all(theta, Some(reference), &samples, hyper)?;
    let layout = &group.cond.layout;
    let pos: Vec<Vec<f64>> = group
        .masks
        .intra_pos
        .iter()
        .map(|m| m.to_pixels(layout))
        .collect();
    let neg: Vec<Vec<f64>> = group
        .masks
        .intra_neg
        .iter()
        .map(|m| m.to_pixels(layout))
        .collect();
    let bt = hyper.beta_t();
    let ng = n as f64;
    let lambda_pair = hyper.lambda_inter / (ng - 1.0);
    let lambda_self = 1.0 - hyper.lambda_inter;
    let npx = group.images[0].data.len();
    let mut coeffs = vec![vec![0.0; npx]; n];
    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                let wi = members[i].weight;
                let (logit, l) = preference_logit(
                    bt,
                    wi * masked_sum(&members[i].excess, &pos[i]),
                    wi * masked_sum(&members[i].excess, &neg[i]),
                );
                loss += lambda_self / ng * l;
                let k = lambda_self / ng * sigmoid(-logit) * bt * wi;
                for ((c, p), q) in coeffs[i].iter_mut().zip(&pos[i]).zip(&neg[i]) {
                    *c += k * (p - q);
                }
            } else {
                let mask = group.masks.inter[i][j].to_pixels(layout);
                let (wi, wj) = (members[i].weight, members[j].weight);
                let (logit, l) = preference_logit(
                    bt,
                    wi * masked_sum(&members[i].excess, &mask),
                    wj * masked_sum(&members[j].excess, &mask),
                );
                loss += lambda_pair / ng * l;
                let k = lambda_pair / ng * sigmoid(-logit) * bt;
                for (p, m) in mask.iter().enumerate().filter(|(_, &m)| m != 0.0) {
                    coeffs[i][p] += k * wi * m;
                    coeffs[j][p] -= k * wj * m;
                }
            }
        }
    }
    let grads = backprop_members(theta, &samples, members, &coeffs)?;
    Ok(LossOutput { loss, grads })
}

/// Image-level DPO over every ordered pair whose correct-cell counts differ (ties skipped),
/// averaged over pairs. Returns `None` when the group has no strict preference.
pub fn group_dpo_loss<M: VelocityField>(
    theta: &M,
    reference: &M,
    group: &GroupBatch<'_>,
    correct_cells: &[usize],
    hyper: &TrainHyper,
) -> Result<Option<LossOutput>> {
    let pairs = winner_pairs(correct_cells);
    if pairs.is_empty() {
        return Ok(None);
    }
    let samples = group.samples();
    let members = eval_all(theta, Some(reference), &samples, hyper)?;
    let bt = hyper.beta_t();
    let np = pairs.len() as f64;
    let npx = group.images[0].data.len();
    let mut coeffs = vec![vec![0.0; npx]; group.len()];
    let mut loss = 0.0;
    for &(w, l) in &pairs {
        let dw = members[w].weight * members[w].excess.iter().sum::<f64>();
        let dl = members[l].weight * members[l].excess.iter().sum::<f64>();
        let (logit, pl) = preference_logit(bt, dw, dl);
        loss += pl / np;
        let k = sigmoid(-logit) * bt / np;
        coeffs[w]
            .iter_mut()
            .for_each(|c| *c += k * members[w].weight);
        coeffs[l]
            .iter_mut()
            .for_each(|c| *c -= k * members[l].weight);
    }
    let grads = backprop_members(theta, &samples, members, &coeffs)?;
    Ok(Some(LossOutput { loss, grads }))
}

/// Ordered (winner, loser) pairs by strictly more correct cells.
pub fn winner_pairs(correct_cells: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, &a) in correct_cells.iter().enumerate() {
        for (j, &b) in correct_cells.iter().enumerate() {
            if a > b {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Monte-Carlo estimate of the regional implicit reward, up to its additive partition term:
/// `−βT · mean_draws ω_t·(‖M(v−v_θ)‖² − ‖M(v−v_ref)‖²)`. Only differences across regions
/// and images are meaningful.
#[allow(clippy::too_many_arguments)]
pub fn implicit_reward_gap<M: VelocityField, R: Rng + ?Sized>(
    theta: &M,
    reference: &M,
    x0: &CanvasImage,
    cond: &PreparedCondition,
    mask: &RegionMask,
    hyper: &TrainHyper,
    n_mc: usize,
    rng: &mut R,
) -> Result<f64> {
    let draws: Vec<NoiseDraw> = (0..n_mc)
        .map(|_| NoiseDraw::sample(rng, x0.width, x0.height))
        .collect();
    Ok(implicit_reward_gaps(
        theta,
        reference,
        x0,
        cond,
        std::slice::from_ref(mask),
        hyper,
        &draws,
    )?[0])
}

/// [`implicit_reward_gap`] for several masks of one image, sharing the same draws.
pub fn implicit_reward_gaps<M: VelocityField>(
    theta: &M,
    reference: &M,
    x0: &CanvasImage,
    cond: &PreparedCondition,
    masks: &[RegionMask],
    hyper: &TrainHyper,
    draws: &[NoiseDraw],
) -> Result<Vec<f64>> {
    if draws.is_empty() {
        return Err(Error::Config("n_mc must be at least 1".into()));
    }
    let masks_px: Vec<Vec<f64>> = masks.iter().map(|m| m.to_pixels(&cond.layout)).collect();
    let mut sums = vec![0.0; masks.len()];
    for draw in draws {
        let m = eval_member(
            theta,
            Some(reference),
            &Sample { x0, cond, draw },
            hyper,
            false,
        )?;
        for (s, mp) in sums.iter_mut().zip(&masks_px) {
            *s += m.weight * masked_sum(&m.excess, mp);
        }
    }
    let scale = -hyper.beta_t() / draws.len() as f64;
    Ok(sums.into_iter().map(|s| scale * s).collect())
}

fn zip_map(a: &CanvasImage, b: &CanvasImage, f: impl Fn(f64, f64) -> f64) -> CanvasImage {
    CanvasImage {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}
