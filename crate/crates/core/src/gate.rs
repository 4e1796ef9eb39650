//! Relevance gates over the two relation logits, and the visual mask.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    #[default]
    Soft,
    HardSt,
    Gumbel,
}

impl FromStr for GateKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "soft" => Ok(GateKind::Soft),
            "hard_st" | "hard" => Ok(GateKind::HardSt),
            "gumbel" => Ok(GateKind::Gumbel),
            other => Err(format!("unknown gate `{other}` (expected soft, hard_st or gumbel)")),
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateKind::Soft => "soft",
            GateKind::HardSt => "hard_st",
            GateKind::Gumbel => "gumbel",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateOutput {
    pub kind: GateKind,
    pub logits: Var,
    /// `[π0, π1]`.
    pub probs: Var,
    /// `π1`, shape `[1]`.
    pub r: Var,
}

impl GateOutput {
    pub fn r_value(&self, g: &Graph) -> Real {
        g.value(self.r).item()
    }

    pub fn mask(&self, g: &mut Graph, m: usize, d_model: usize) -> Result<Var> {
        build_mask(g, self.r, m, d_model)
    }
}

fn check_logits(g: &Graph, logits: Var, op: &'static str) -> Result<()> {
    if g.shape(logits) != [2] {
        return Err(Error::shape(op, g.shape(logits), &[2]));
    }
    Ok(())
}

fn finish(g: &mut Graph, kind: GateKind, logits: Var, probs: Var) -> Result<GateOutput> {
    let r = g.gather(probs, &[1])?;
    Ok(GateOutput { kind, logits, probs, r })
}

pub fn gate_soft(g: &mut Graph, logits: Var) -> Result<GateOutput> {
    check_logits(g, logits, "gate_soft")?;
    let probs = g.softmax(logits, 0)?;
    finish(g, GateKind::Soft, logits, probs)
}

/// Forward `[π1 > 0.5]`, backward through the soft probabilities.
pub fn gate_hard_st(g: &mut Graph, logits: Var) -> Result<GateOutput> {
    check_logits(g, logits, "gate_hard_st")?;
    let soft = g.softmax(logits, 0)?;
    let on = (g.value(soft).data()[1] > 0.5) as u8 as Real;
    let probs = g.straight_through(Tensor::vector(vec![1.0 - on, on]), soft)?;
    finish(g, GateKind::HardSt, logits, probs)
}

/// `softmax((x + noise) / τ)` for given noise.
pub fn gumbel_relaxed(g: &mut Graph, logits: Var, noise: [Real; 2], tau: Real) -> Result<GateOutput> {
    check_logits(g, logits, "gate_gumbel")?;
    if !(tau > 0.0) {
        return Err(Error::invalid(
            "gate_gumbel",
            format!("temperature must be positive, got {tau}"),
        ));
    }
    let noise = g.input(Tensor::vector(noise.to_vec()));
    let x = g.add(logits, noise)?;
    let x = g.scale(x, 1.0 / tau);
    let probs = g.softmax(x, 0)?;
    finish(g, GateKind::Gumbel, logits, probs)
}

pub fn sample_gumbel(rng: &mut Rng) -> Real {
    // open interval keeps both logs finite
    let u: Real = loop {
        let u = rng.gen::<Real>();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// Train mode samples Gumbel noise; eval mode takes the hard argmax of the
/// logits (lowest index on ties) with a straight-through soft backward.
pub fn gate_gumbel(g: &mut Graph, logits: Var, tau: Real, train: bool, rng: &mut Rng) -> Result<GateOutput> {
    if train {
        let noise = [sample_gumbel(rng), sample_gumbel(rng)];
        return gumbel_relaxed(g, logits, noise, tau);
    }
    let out = gumbel_relaxed(g, logits, [0.0, 0.0], tau)?;
    let x = g.value(logits).data();
    let on = (x[1] > x[0]) as u8 as Real;
    let probs = g.straight_through(Tensor::vector(vec![1.0 - on, on]), out.probs)?;
    finish(g, GateKind::Gumbel, logits, probs)
}

pub fn apply_gate(
    g: &mut Graph,
    kind: GateKind,
    logits: Var,
    tau: Real,
    train: bool,
    rng: &mut Rng,
) -> Result<GateOutput> {
    match kind {
        GateKind::Soft => gate_soft(g, logits),
        GateKind::HardSt => gate_hard_st(g, logits),
        GateKind::Gumbel => gate_gumbel(g, logits, tau, train, rng),
    }
}

/// `[m, d_model]` matrix with every entry equal to `r`.
pub fn build_mask(g: &mut Graph, r: Var, m: usize, d_model: usize) -> Result<Var> {
    g.expand(r, &[m, d_model])
}

/// Linear temperature decay from `start` to `end` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub start: Real,
    pub end: Real,
    pub total_steps: usize,
}

impl AnnealSchedule {
    pub fn new(total_steps: usize) -> Self {
        AnnealSchedule {
            start: 1.0,
            end: 0.1,
            total_steps,
        }
    }

    pub fn tau(&self, step: usize) -> Real {
        if self.total_steps == 0 {
            return self.end;
        }
        let f = step.min(self.total_steps) as Real / self.total_steps as Real;
        // convex combination keeps both endpoints exact
        self.start * (1.0 - f) + self.end * f
    }
}

pub fn anneal(schedule: &AnnealSchedule, step: usize) -> Real {
    schedule.tau(step)
}
