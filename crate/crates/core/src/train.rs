//! Adam optimizer and the two training stages.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyphkit::{CandidateGroup, CanvasImage};
use crate::objectives::{
    flow_matching_loss_sampled, group_dpo_loss, masked_sft_loss, rgdpo_loss, sft_loss, GroupBatch,
    LossOutput, TrainHyper,
};
use crate::velocitynet::{Gradients, ModelParams, PreparedCondition};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&grads.data)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub log_every: usize,
}

impl StageConfig {
    pub fn stage1_default() -> Self {
        StageConfig {
            steps: 5000,
            batch: 8,
            lr: 1e-3,
            log_every: 100,
        }
    }

    pub fn stage2_default() -> Self {
        StageConfig {
            steps: 300,
            batch: 4,
            lr: 3e-4,
            log_every: 25,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "batch {} and lr {} must be positive",
                self.batch, self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainRun {
    /// Parameters after the last step with a finite loss.
    pub params: ModelParams,
    pub log: Vec<LossLog>,
    /// Set when training stopped on a non-finite loss.
    pub failure: Option<Error>,
}

/// One training image for flow matching.
#[derive(Debug, Clone)]
pub struct FlowExample {
    pub cond: PreparedCondition,
    pub image: CanvasImage,
}

fn run_loop(
    init: &ModelParams,
    cfg: &StageConfig,
    mut step_loss: impl FnMut(&ModelParams, usize) -> Result<Option<LossOutput>>,
    mut on_log: impl FnMut(&LossLog),
) -> Result<TrainRun> {
    cfg.validate()?;
    let mut params = init.clone();
    let mut adam = Adam::new(cfg.lr, params.len());
    let mut log = Vec::new();
    let mut window = (0.0, 0usize);
    for step in 0..cfg.steps {
        let Some(out) = step_loss(&params, step)? else {
            continue;
        };
        if !out.loss.is_finite() || out.grads.data.iter().any(|g| !g.is_finite()) {
            return Ok(TrainRun {
                params,
                log,
                failure: Some(Error::NonFiniteLoss { step }),
            });
        }
        let before = params.data.clone();
        adam.step(&mut params.data, &out.grads);
        if !params.is_finite() {
            params.data = before;
            return Ok(TrainRun {
                params,
                log,
                failure: Some(Error::NonFiniteLoss { step }),
            });
        }
        window.0 += out.loss;
        window.1 += 1;
        let last = step + 1 == cfg.steps;
        if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) || last {
            let entry = LossLog {
                step: step + 1,
                loss: window.0 / window.1 as f64,
            };
            on_log(&entry);
            log.push(entry);
            window = (0.0, 0);
        }
    }
    Ok(TrainRun {
        params,
        log,
        failure: None,
    })
}

/// Flow-matching training over `data`; each step draws a batch with replacement.
pub fn train_stage1(
    init: &ModelParams,
    data: &[FlowExample],
    cfg: &StageConfig,
    seed: u64,
    on_log: impl FnMut(&LossLog),
) -> Result<TrainRun> {
    if data.is_empty() {
        return Err(Error::Config("stage-1 dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run_loop(
        init,
        cfg,
        |params, _| {
            let batch: Vec<(&CanvasImage, &PreparedCondition)> = (0..cfg.batch)
                .map(|_| {
                    let ex = &data[rng.gen_range(0..data.len())];
                    (&ex.image, &ex.cond)
                })
                .collect();
            flow_matching_loss_sampled(params, &batch, &mut rng).map(Some)
        },
        on_log,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Rgdpo,
    Dpo,
    Sft,
    MaskSft,
}

impl Objective {
    pub fn needs_annotations(&self) -> bool {
        !matches!(self, Objective::Sft)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Objective::Rgdpo => "rgdpo",
            Objective::Dpo => "dpo",
            Objective::Sft => "sft",
            Objective::MaskSft => "mask-sft",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgdpo" => Ok(Objective::Rgdpo),
            "dpo" => Ok(Objective::Dpo),
            "sft" => Ok(Objective::Sft),
            "mask-sft" => Ok(Objective::MaskSft),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

/// A candidate group with its prepared condition.
#[derive(Debug, Clone)]
pub struct GroupExample {
    pub cond: PreparedCondition,
    pub group: CandidateGroup,
}

/// Preference (or SFT) training starting from `reference`, which stays frozen. `batch` counts
/// groups per step.
pub fn train_stage2(
    reference: &ModelParams,
    groups: &[GroupExample],
    objective: Objective,
    hyper: &TrainHyper,
    cfg: &StageConfig,
    seed: u64,
    on_log: impl FnMut(&LossLog),
) -> Result<TrainRun> {
    hyper.validate()?;
    if groups.is_empty() {
        return Err(Error::Config("stage-2 dataset is empty".into()));
    }
    if objective.needs_annotations()
        && groups.iter().all(|g| {
            g.group
                .annotations
                .iter()
                .flatten()
                .all(|a| a.incorrect_rects.is_empty())
        })
    {
        return Err(Error::MissingAnnotations(objective.tag().into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    run_loop(
        reference,
        cfg,
        |params, _| {
            let mut picked = Vec::with_capacity(cfg.batch);
            while picked.len() < cfg.batch {
                if order.is_empty() {
                    order = (0..groups.len()).collect();
                    order.shuffle(&mut rng);
                }
                picked.push(order.pop().expect("refilled"));
            }
            let batches = picked
                .iter()
                .map(|&i| {
                    GroupBatch::from_group(
                        &groups[i].cond,
                        &groups[i].group,
                        hyper.noise_sharing,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            group_step(
                params, reference, &batches, &picked, groups, objective, hyper,
            )
        },
        on_log,
    )
}

fn group_step(
    theta: &ModelParams,
    reference: &ModelParams,
    batches: &[GroupBatch<'_>],
    picked: &[usize],
    groups: &[GroupExample],
    objective: Objective,
    hyper: &TrainHyper,
) -> Result<Option<LossOutput>> {
    if objective == Objective::Rgdpo {
        return rgdpo_loss(theta, reference, batches, hyper).map(Some);
    }
    let mut total: Option<LossOutput> = None;
    let mut count = 0usize;
    for (b, &gi) in batches.iter().zip(picked) {
        let out = match objective {
            Objective::Sft => Some(sft_loss(theta, b)?),
            Objective::MaskSft => Some(masked_sft_loss(theta, b)?),
            Objective::Dpo => {
                let g = &groups[gi].group;
                let counts: Vec<usize> = (0..g.len()).map(|i| g.correct_cells(i)).collect();
                group_dpo_loss(theta, reference, b, &counts, hyper)?
            }
            Objective::Rgdpo => unreachable!("handled above"),
        };
        if let Some(out) = out {
            count += 1;
            match &mut total {
                Some(t) => {
                    t.loss += out.loss;
                    t.grads.add_assign(&out.grads);
                }
                None => total = Some(out),
            }
        }
    }
    Ok(total.map(|mut t| {
        let n = count as f64;
        t.loss /= n;
        t.grads.scale(1.0 / n);
        t
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -1.0, 0.0];
        let g = Gradients {
            data: vec![0.5, -2.0, 0.0],
        };
        let mut adam = Adam::new(0.1, 3);
        adam.step(&mut p, &g);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0];
        let mut adam = Adam::new(0.05, 1);
        for _ in 0..2000 {
            let g = Gradients {
                data: vec![2.0 * (p[0] - 1.0)],
            };
            adam.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn objective_names_round_trip() {
        for o in [
            Objective::Rgdpo,
            Objective::Dpo,
            Objective::Sft,
            Objective::MaskSft,
        ] {
            assert_eq!(o.tag().parse::<Objective>().unwrap(), o);
        }
        assert!("ppo".parse::<Objective>().is_err());
    }
}
