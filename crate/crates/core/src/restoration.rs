//! MAP restoration in latent space.
//!
//! The objective for latents `z` is `lambda * ||m * (x_hat - T(z))||_2 - log p(T(z))`.
//! Optimization runs coarse to fine: stage `j` updates `u_0 ..= u_j` with Adam
//! while every finer latent is set to its predicted conditional mean, and a
//! final stage updates the whole stack.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::{Bound, FlowModel, LatentStack, Mode};
use crate::optim::Adam;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::PIXEL_LEVELS;

/// Pixel intensity to the model range (bin centres of the dequantized data).
pub fn pixels_to_model(pixels: &Tensor) -> Tensor {
    pixels.map(|p| (p + 0.5) / PIXEL_LEVELS)
}

/// Model range back to rounded, clamped 0-255 intensities.
pub fn model_to_pixels(x: &Tensor) -> Tensor {
    x.map(|v| (v * PIXEL_LEVELS - 0.5).round().clamp(0.0, 255.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestorationProblem {
    /// Degraded image `x_hat`, model range, shape `(1, C, H, W)`.
    pub degraded: Tensor,
    /// 1 marks valid pixels, 0 missing ones.
    pub mask: Tensor,
    pub lambda: f64,
}

impl RestorationProblem {
    pub fn new(degraded: Tensor, mask: Option<Tensor>, lambda: f64) -> Result<Self> {
        let mask = mask.unwrap_or_else(|| Tensor::ones(degraded.shape().to_vec()));
        if mask.shape() != degraded.shape() {
            return Err(Error::shape("restoration mask", degraded.shape(), mask.shape()));
        }
        if let Some(i) = mask.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain {
                op: "restoration mask",
                detail: format!("entry {i} = {} is not 0 or 1", mask.data()[i]),
            });
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Param(format!("lambda must be non-negative, got {lambda}")));
        }
        Ok(RestorationProblem { degraded, mask, lambda })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    /// Iterations per stage, deepest level first; one stage per level.
    pub steps_per_stage: Vec<usize>,
    /// Iterations with every level active after the staged part.
    pub final_steps: usize,
    pub eta: f64,
}

impl Schedule {
    /// 50 iterations per level, 150 final ones, `eta = 1`.
    pub fn per_level(levels: usize) -> Self {
        Schedule {
            steps_per_stage: vec![50; levels],
            final_steps: 150,
            eta: 1.0,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_stage.iter().sum::<usize>() + self.final_steps
    }
}

/// `a,b,c+f`: per-stage counts, then final steps. `eta` is not part of the text.
impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Param(format!("invalid schedule '{s}', expected e.g. 50,50,50+150"));
        let (stages, fin) = match s.split_once('+') {
            Some((a, b)) => (a, b.trim().parse().map_err(|_| bad())?),
            None => (s, 0),
        };
        let steps_per_stage = stages
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Schedule {
            steps_per_stage,
            final_steps: fin,
            eta: 1.0,
        })
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stages: Vec<String> = self.steps_per_stage.iter().map(usize::to_string).collect();
        write!(f, "{}+{}", stages.join(","), self.final_steps)
    }
}

/// `lambda * || m * (x_hat - x) ||_2`.
pub fn data_term(problem: &RestorationProblem, x: &Tensor) -> Result<f64> {
    if x.shape() != problem.degraded.shape() {
        return Err(Error::shape("data term", problem.degraded.shape(), x.shape()));
    }
    let mut sq = 0.0;
    for ((&a, &b), &m) in problem.degraded.data().iter().zip(x.data()).zip(problem.mask.data()) {
        sq += (m * (a - b)).powi(2);
    }
    Ok(problem.lambda * sq.sqrt())
}

pub fn data_term_var<'t>(problem: &RestorationProblem, x: Var<'t>) -> Result<Var<'t>> {
    let tape = x.tape();
    let diff = tape.constant(problem.degraded.clone()).sub(x)?;
    Ok(diff
        .mul(tape.constant(problem.mask.clone()))?
        .l2_norm()
        .scale(problem.lambda))
}

pub struct Objective<'t> {
    pub objective: Var<'t>,
    pub data_term: Var<'t>,
    pub neg_log_prior: Var<'t>,
    pub x: Var<'t>,
    /// Latents used by the decode, `u_0` first.
    pub latents: Vec<Var<'t>>,
}

/// MAP objective of `z`. Latents marked inactive in `active` are replaced by
/// their conditional means; `active[0]` must hold.
pub fn map_objective_var<'t>(
    model: &FlowModel,
    p: &Bound<'t>,
    problem: &RestorationProblem,
    z: &[Var<'t>],
    active: &[bool],
) -> Result<Objective<'t>> {
    if z.len() != model.levels.len() || active.len() != z.len() || !active[0] {
        return Err(Error::Contract(format!(
            "map objective needs {} latents with u_0 active",
            model.levels.len()
        )));
    }
    let dec = model.decode_var(
        p,
        z[0],
        |i, mu, _| Ok(if active[i] { z[i] } else { mu }),
        &mut Mode::Eval,
    )?;
    let data = data_term_var(problem, dec.x)?;
    let neg_log_prior = dec.log_prob.sum().neg();
    Ok(Objective {
        objective: data.add(neg_log_prior)?,
        data_term: data,
        neg_log_prior,
        x: dec.x,
        latents: dec.latents,
    })
}

/// Objective value of a full latent stack.
pub fn map_objective(model: &FlowModel, problem: &RestorationProblem, z: &LatentStack) -> Result<f64> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let vars: Vec<Var> = z.latents.iter().map(|u| tape.constant(u.clone())).collect();
    model.validate_latents(z)?;
    let obj = map_objective_var(model, &p, problem, &vars, &vec![true; vars.len()])?;
    Ok(obj.objective.item())
}

/// Starting point of the optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `u_0` from encoding the degraded image, finer latents at their conditional means.
    Encode,
    /// `u_0` at the base mean, finer latents at their conditional means.
    BaseMean,
}

fn mean_path(model: &FlowModel, u0: Tensor) -> Result<LatentStack> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let dec = model.mean_decode_var(&p, tape.constant(u0), &mut Mode::Eval)?;
    Ok(LatentStack {
        latents: dec.latents.iter().map(|v| (*v.value()).clone()).collect(),
    })
}

pub fn init_latents(model: &FlowModel, degraded: &Tensor, init: Init) -> Result<LatentStack> {
    let u0 = match init {
        Init::Encode => model.encode(degraded)?.0.latents.swap_remove(0),
        Init::BaseMean => {
            let n = model.check_input(degraded.shape())?;
            let mean = model.params.get(model.base_mean);
            Tensor::stack_batch(&vec![mean.batch_item(0)?; n])?
        }
    };
    mean_path(model, u0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// `0..L` for the staged part, `L` for the final stage.
    pub stage: usize,
    pub objective: f64,
    pub data_term: f64,
    pub neg_log_prior: f64,
    /// Gradient norm per latent level at this step, `u_0` first.
    pub grad_norms: Vec<f64>,
}

impl StepRecord {
    pub const HEADER: &'static str = "step,stage,objective,data_term,neg_log_prior";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.stage, self.objective, self.data_term, self.neg_log_prior
        )
    }
}

#[derive(Clone, Debug)]
pub struct Restoration {
    /// Decode of the lowest-objective iterate, clamped to `[0, 1]`.
    pub restored: Tensor,
    pub best_objective: f64,
    pub latents: LatentStack,
    pub trace: Vec<StepRecord>,
    /// Set when a non-finite objective stopped the optimization early.
    pub aborted: bool,
}

/// Trace file contents with a header comment naming the run parameters.
pub fn trace_csv(schedule: &Schedule, lambda: f64, trace: &[StepRecord]) -> String {
    let mut s = format!(
        "# schedule={schedule} lambda={lambda} eta={}\n{}\n",
        schedule.eta,
        StepRecord::HEADER
    );
    for r in trace {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn restore(
    model: &FlowModel,
    problem: &RestorationProblem,
    schedule: &Schedule,
    init: Init,
) -> Result<Restoration> {
    let levels = model.levels.len();
    if schedule.steps_per_stage.len() != levels {
        return Err(Error::Param(format!(
            "schedule has {} stages, model has {levels} levels",
            schedule.steps_per_stage.len()
        )));
    }
    if !(schedule.eta.is_finite() && schedule.eta > 0.0) {
        return Err(Error::Param(format!("eta must be positive, got {}", schedule.eta)));
    }
    model.check_input(problem.degraded.shape())?;
    let mut z = init_latents(model, &problem.degraded, init)?.latents;
    let mut adam = Adam::new(schedule.eta, z.iter().map(Tensor::shape));
    let mut trace = Vec::with_capacity(schedule.total_steps() + 1);
    let mut best: Option<(f64, Tensor, Vec<Tensor>)> = None;
    let mut aborted = false;

    let plan: Vec<(usize, usize)> = schedule
        .steps_per_stage
        .iter()
        .copied()
        .enumerate()
        .chain(std::iter::once((levels, schedule.final_steps)))
        .collect();
    let mut step = 0;
    'stages: for (k, &(stage, n)) in plan.iter().enumerate() {
        let last_stage = k + 1 == plan.len();
        let active: Vec<bool> = (0..levels).map(|i| i <= stage).collect();
        adam.reset();
        // The last stage also evaluates the final iterate.
        let evaluations = if last_stage { n + 1 } else { n };
        for it in 0..evaluations {
            let update = it < n;
            let tape = Tape::new();
            let p = model.params.bind(&tape, false);
            let vars: Vec<Var> = z.iter().map(|u| tape.var(u.clone())).collect();
            let obj = map_objective_var(model, &p, problem, &vars, &active)?;
            let value = obj.objective.item();
            if !value.is_finite() {
                aborted = true;
                break 'stages;
            }
            let x = obj.x.value().map(|v| v.clamp(0.0, 1.0));
            if best.as_ref().is_none_or(|(b, _, _)| value < *b) {
                best = Some((value, x, z.clone()));
            }
            let g: Vec<Tensor> = if update {
                let grads = tape.backprop(obj.objective)?;
                vars.iter().map(|&v| grads.wrt(v)).collect()
            } else {
                z.iter().map(Tensor::zeros_like).collect()
            };
            trace.push(StepRecord {
                step,
                stage,
                objective: value,
                data_term: obj.data_term.item(),
                neg_log_prior: obj.neg_log_prior.item(),
                grad_norms: g.iter().map(Tensor::l2_norm).collect(),
            });
            if !update {
                break;
            }
            // Inactive latents follow their conditional means.
            for (i, u) in obj.latents.iter().enumerate() {
                if !active[i] {
                    z[i] = (*u.value()).clone();
                }
            }
            let mut refs: Vec<&mut Tensor> = z.iter_mut().collect();
            adam.step_masked(&mut refs, &g, |i| active[i])?;
            step += 1;
        }
    }

    let (best_objective, restored, latents) = match best {
        Some(b) => b,
        None => {
            // Non-finite at the initialization itself.
            let x = model.decode(&LatentStack { latents: z.clone() })?;
            (f64::INFINITY, x.map(|v| v.clamp(0.0, 1.0)), z)
        }
    };
    Ok(Restoration {
        restored,
        best_objective,
        latents: LatentStack { latents },
        trace,
        aborted,
    })
}
