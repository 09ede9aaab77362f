//! Group performance under detector gating, the overall accuracy change it
//! implies, the detector-quality condition for that change to be
//! non-negative, and a Monte Carlo check of the closed forms.
//!
//! G1 is the majority (`s = 0`), G2 the minority (`s = 1`).

use serde::{Deserialize, Serialize};

use crate::error::{dim, invalid, FairNetError, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryInputs {
    /// Minority share.
    pub p: f64,
    /// `(P(M,G1), P(M,G2))`.
    pub perf_base: [f64; 2],
    /// `(P(M_LoRA,G1), P(M_LoRA,G2))` with adapters always applied.
    pub perf_lora: [f64; 2],
    pub tpr: f64,
    pub fpr: f64,
}

impl TheoryInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(invalid(format!("p = {} outside (0, 1)", self.p)));
        }
        let probs = [
            self.perf_base[0],
            self.perf_base[1],
            self.perf_lora[0],
            self.perf_lora[1],
            self.tpr,
            self.fpr,
        ];
        if probs.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("accuracies and rates must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `(P(M_FairNet,G1), P(M_FairNet,G2))`.
pub fn predicted_group_perf(x: &TheoryInputs) -> [f64; 2] {
    [
        (1.0 - x.fpr) * x.perf_base[0] + x.fpr * x.perf_lora[0],
        x.tpr * x.perf_lora[1] + (1.0 - x.tpr) * x.perf_base[1],
    ]
}

pub fn delta_p(x: &TheoryInputs) -> f64 {
    (1.0 - x.p) * x.fpr * (x.perf_lora[0] - x.perf_base[0])
        + x.p * x.tpr * (x.perf_lora[1] - x.perf_base[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict", content = "reason")]
pub enum Verdict {
    Holds,
    Fails,
    HoldsTrivially,
    Vacuous(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preservation {
    pub rhs: Option<f64>,
    pub ratio: Option<f64>,
    pub condition: Verdict,
}

/// `TPR/FPR ≥ ((1−p)/p)·(P(M,G1) − P(M_LoRA,G1)) / (P(M_LoRA,G2) − P(M,G2))`.
pub fn preservation_condition(x: &TheoryInputs) -> Preservation {
    let gain2 = x.perf_lora[1] - x.perf_base[1];
    let loss1 = x.perf_base[0] - x.perf_lora[0];
    let ratio = crate::detector::ratio(x.tpr, x.fpr);
    if x.fpr <= 0.0 {
        return Preservation {
            rhs: None,
            ratio,
            condition: Verdict::Vacuous("FPR is zero".into()),
        };
    }
    if gain2 <= 0.0 {
        return Preservation {
            rhs: None,
            ratio,
            condition: Verdict::Vacuous("adapters do not improve the minority group".into()),
        };
    }
    let rhs = (1.0 - x.p) / x.p * loss1 / gain2;
    let condition = if rhs <= 0.0 {
        Verdict::HoldsTrivially
    } else if x.tpr / x.fpr >= rhs {
        Verdict::Holds
    } else {
        Verdict::Fails
    };
    Preservation {
        rhs: Some(rhs),
        ratio,
        condition,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub n: usize,
    pub g1: Estimate,
    pub g2: Estimate,
    pub delta_p: Estimate,
}

fn binomial(hits: usize, n: usize) -> Estimate {
    if n == 0 {
        return Estimate {
            mean: f64::NAN,
            se: f64::NAN,
        };
    }
    let m = hits as f64 / n as f64;
    Estimate {
        mean: m,
        se: (m * (1.0 - m) / n as f64).sqrt(),
    }
}

/// Simulates `n` individuals: group, detector firing, then correctness of
/// the applied model. Base and gated correctness share one uniform so the
/// per-individual difference estimates the accuracy change directly.
pub fn monte_carlo_validate(x: &TheoryInputs, n: usize, seed: u64) -> Result<MonteCarlo> {
    x.validate()?;
    if n == 0 {
        return Err(invalid("Monte Carlo needs at least one sample"));
    }
    let mut rng = SplitMix64::new(seed);
    let mut count = [0usize; 2];
    let mut correct = [0usize; 2];
    let mut diff_sum = 0i64;
    let mut diff_sq = 0u64;
    for _ in 0..n {
        let g = usize::from(rng.bernoulli(x.p));
        let fired = rng.bernoulli(if g == 1 { x.tpr } else { x.fpr });
        let u = rng.next_f64();
        let applied = if fired {
            x.perf_lora[g]
        } else {
            x.perf_base[g]
        };
        let c_gated = u < applied;
        let c_base = u < x.perf_base[g];
        count[g] += 1;
        correct[g] += usize::from(c_gated);
        let d = i64::from(c_gated) - i64::from(c_base);
        diff_sum += d;
        diff_sq += d.unsigned_abs();
    }
    let nf = n as f64;
    let mean = diff_sum as f64 / nf;
    let var = (diff_sq as f64 / nf - mean * mean).max(0.0);
    Ok(MonteCarlo {
        n,
        g1: binomial(correct[0], count[0]),
        g2: binomial(correct[1], count[1]),
        delta_p: Estimate {
            mean,
            se: (var / nf).sqrt(),
        },
    })
}

/// Per-sample facts measured on held-out data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeSample {
    pub minority: bool,
    pub fired: bool,
    pub base_correct: bool,
    pub lora_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryBridge {
    pub inputs: TheoryInputs,
    pub predicted_group: [f64; 2],
    pub measured_group: [f64; 2],
    pub predicted_delta_p: f64,
    pub measured_delta_p: f64,
    pub max_group_gap: f64,
    pub preservation: Preservation,
}

/// Measures the theory inputs from `samples` and compares the closed-form
/// gated group accuracies with the observed ones.
pub fn empirical_theory_bridge(samples: &[BridgeSample]) -> Result<TheoryBridge> {
    if samples.is_empty() {
        return Err(dim("no samples"));
    }
    let mut n = [0usize; 2];
    let mut fired = [0usize; 2];
    let mut base = [0usize; 2];
    let mut lora = [0usize; 2];
    let mut gated = [0usize; 2];
    for s in samples {
        let g = usize::from(s.minority);
        n[g] += 1;
        fired[g] += usize::from(s.fired);
        base[g] += usize::from(s.base_correct);
        lora[g] += usize::from(s.lora_correct);
        gated[g] += usize::from(if s.fired {
            s.lora_correct
        } else {
            s.base_correct
        });
    }
    if n[0] == 0 || n[1] == 0 {
        return Err(FairNetError::InsufficientData(
            "theory bridge needs both groups".into(),
        ));
    }
    let frac = |a: [usize; 2]| [a[0] as f64 / n[0] as f64, a[1] as f64 / n[1] as f64];
    let inputs = TheoryInputs {
        p: n[1] as f64 / samples.len() as f64,
        perf_base: frac(base),
        perf_lora: frac(lora),
        tpr: frac(fired)[1],
        fpr: frac(fired)[0],
    };
    let predicted_group = predicted_group_perf(&inputs);
    let measured_group = frac(gated);
    let overall = |g: [f64; 2]| (1.0 - inputs.p) * g[0] + inputs.p * g[1];
    Ok(TheoryBridge {
        inputs,
        predicted_group,
        measured_group,
        predicted_delta_p: delta_p(&inputs),
        measured_delta_p: overall(measured_group) - overall(inputs.perf_base),
        max_group_gap: (predicted_group[0] - measured_group[0])
            .abs()
            .max((predicted_group[1] - measured_group[1]).abs()),
        preservation: preservation_condition(&inputs),
    })
}
