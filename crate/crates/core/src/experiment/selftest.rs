//! `check`: gradient checks, metric oracles and invariants in one pass.
//!
//! Setting [`INJECT_ENV`] to an op name corrupts that op's gradient in the
//! op fixtures (the value is left intact), which must make the suite fail.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::fisher::{stability_factor, task_similarity, ActivationStats, FisherSnapshot};
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::metrics::{dice_coeff, forgetting_rate};
use crate::model::{build_model, forward_on_tape, Group, ModelConfig, ParamStore, ParamVars, SegLogits};
use crate::objectives::{composite_loss, dice_loss_value, ewc_penalty, LossWeights};
use crate::prompts::{complexity_of_texts, Lexicon};
use crate::tensor::Tensor;
use crate::trainer::Method;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const INJECT_ENV: &str = "PAEWC_INJECT_GRAD_BUG";

/// Finite-difference step for every gradient check.
pub const GRAD_STEP: f64 = 1e-5;
/// Bound on [`GradCheckReport::norm_relative_error`].
pub const GRAD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn failed_names(&self) -> Vec<String> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect()
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!("{} {} ({})\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        s.push_str(&format!("{} checks, {} failed\n", self.checks.len(), self.failures()));
        s
    }
}

/// Ops covered by the per-op gradient fixtures.
pub const OPS: [&str; 26] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "add_row",
    "scale",
    "add_scalar",
    "neg",
    "relu",
    "sigmoid",
    "log",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "sum_axis",
    "reshape",
    "concat",
    "select",
    "embedding",
    "segment_mean",
    "repeat_rows",
    "tile_rows",
    "cross_attention",
    "upsample_patches",
];

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if positive {
                rng.random_range(0.5..1.5)
            } else {
                // Keep clear of zero so kinks such as relu's are never straddled.
                let m: f64 = rng.random_range(0.1..1.0);
                if rng.random::<bool>() { m } else { -m }
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Output of `op` given its inputs; `None` for an unknown op.
fn apply_op(tape: &mut Tape, op: &str, x: &[Var]) -> Option<Result<Var>> {
    Some(match op {
        "matmul" => tape.matmul(x[0], x[1]),
        "add" => tape.add(x[0], x[1]),
        "sub" => tape.sub(x[0], x[1]),
        "mul" => tape.mul(x[0], x[1]),
        "div" => tape.div(x[0], x[1]),
        "add_row" => tape.add_row(x[0], x[1]),
        "scale" => Ok(tape.scale(x[0], 1.7)),
        "add_scalar" => Ok(tape.add_scalar(x[0], 0.3)),
        "neg" => Ok(tape.neg(x[0])),
        "relu" => Ok(tape.relu(x[0])),
        "sigmoid" => Ok(tape.sigmoid(x[0])),
        "log" => Ok(tape.log(x[0])),
        "softmax" => tape.softmax(x[0], 1),
        "log_softmax" => tape.log_softmax(x[0], 1),
        "sum" => Ok(tape.sum(x[0])),
        "mean" => tape.mean(x[0]),
        "sum_axis" => tape.sum_axis(x[0], 0),
        "reshape" => tape.reshape(x[0], &[4, 3]),
        "concat" => tape.concat(&[x[0], x[1]], 0),
        "select" => tape.select(x[0], 0, 1),
        "embedding" => tape.embedding(x[0], &[0, 2, 2, 4]),
        "segment_mean" => tape.segment_mean(x[0], &[0, 2, 5]),
        "repeat_rows" => tape.repeat_rows(x[0], 3),
        "tile_rows" => tape.tile_rows(x[0], 3),
        "cross_attention" => tape.cross_attention(x[0], x[1], x[2], 3, &[0, 2, 5], 2),
        "upsample_patches" => tape.upsample_patches(x[0], 2, 2),
        _ => return None,
    })
}

/// Input shapes and whether the inputs must be positive.
fn op_inputs(op: &str) -> (Vec<Vec<usize>>, bool) {
    let m = vec![3, 4];
    match op {
        "matmul" => (vec![vec![3, 4], vec![4, 2]], false),
        "add" | "sub" | "mul" => (vec![m.clone(), m], false),
        "div" => (vec![m.clone(), m], true),
        "add_row" => (vec![m, vec![4]], false),
        "log" => (vec![m], true),
        "concat" => (vec![vec![2, 4], m], false),
        "embedding" => (vec![vec![5, 3]], false),
        "segment_mean" => (vec![vec![5, 3]], false),
        "repeat_rows" | "tile_rows" => (vec![vec![2, 3]], false),
        "cross_attention" => (vec![vec![6, 4], vec![5, 4], vec![5, 4]], false),
        "upsample_patches" => (vec![vec![8, 2]], false),
        _ => (vec![m], false),
    }
}

/// Gradient check of one op under a random weighted-sum readout.
pub fn op_gradcheck(op: &str, seed: u64, inject: Option<&str>) -> Result<GradCheckReport> {
    let (shapes, positive) = op_inputs(op);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: IndexMap<String, Tensor<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("x{i}"), random_tensor(&mut rng, s, positive).with_grad()))
        .collect();
    let params = ParamStore::from_blocks(ModelConfig::default(), blocks);
    let corrupt = inject == Some(op);
    let readout_seed = rng.random::<u64>();
    finite_diff_check(
        |tape, vars| {
            let inputs: Vec<Var> = vars.values().copied().collect();
            let Some(y) = apply_op(tape, op, &inputs) else {
                crate::error::bail!(Input, "no gradient fixture for op `{op}`");
            };
            let mut y = y?;
            if corrupt {
                // Same value, doubled gradient.
                let frozen = tape.constant(tape.value(y).clone());
                let delta = tape.sub(y, frozen)?;
                y = tape.add(y, delta)?;
            }
            let mut r = ChaCha8Rng::seed_from_u64(readout_seed);
            let shape = tape.shape(y).to_vec();
            let w = tape.constant(random_tensor(&mut r, &shape, false));
            let weighted = tape.mul(y, w)?;
            Ok(tape.sum(weighted))
        },
        &params,
        GRAD_STEP,
    )
}

/// Small model used by the whole-objective gradient checks.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig { image_size: 8, channels: 3, patch_size: 4, embed_dim: 4, vocab_size: 16, n_heads: 2 }
}

/// A random previous-task snapshot shaped like `method` would produce.
fn fixture_snapshot(method: Method, params: &ParamStore, rng: &mut ChaCha8Rng) -> FisherSnapshot {
    let mut snap = FisherSnapshot::empty(0);
    for (name, t) in params.iter() {
        snap.per_block_fisher.insert(name.to_string(), (0..t.len()).map(|_| rng.random_range(0.0..2.0)).collect());
        snap.anchor.insert(name.to_string(), t.data().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect());
    }
    match method {
        Method::GeneralEwc | Method::Sequential => {
            snap.group_weight.insert(Group::Unassigned, 1.0);
        }
        Method::PaEwc => {
            for name in params.names() {
                snap.groups.insert(name.to_string(), Group::CORE[rng.random_range(0..3)]);
            }
            for g in Group::CORE {
                snap.group_weight.insert(g, rng.random_range(0.5..3.0));
            }
        }
    }
    snap
}

/// Gradient check of the full composite objective in `method`'s
/// configuration on one random fixture.
pub fn model_gradcheck(method: Method, seed: u64) -> Result<GradCheckReport> {
    let cfg = gradcheck_model_config();
    let params: ParamStore = build_model(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let side = cfg.image_size;
    let n_img = 2 * cfg.channels * side * side;
    let image = Tensor::new(vec![2, cfg.channels, side, side], (0..n_img).map(|_| rng.random::<f64>()).collect())?;
    let mask = Tensor::new(vec![2, side, side], (0..2 * side * side).map(|_| rng.random_range(0..2) as f64).collect())?;
    let prompts: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..rng.random_range(1..5)).map(|_| rng.random_range(0..cfg.vocab_size)).collect())
        .collect();
    let mut weights = LossWeights::default();
    let snapshots = match method {
        Method::Sequential => {
            weights.w_ewc = 0.0;
            Vec::new()
        }
        _ => vec![fixture_snapshot(method, &params, &mut rng)],
    };
    finite_diff_check(
        |tape, vars| {
            let trace = forward_on_tape(&cfg, tape, vars, &image, &prompts)?;
            Ok(composite_loss(tape, vars, trace.logits, &mask, &snapshots, &weights)?.total)
        },
        &params,
        GRAD_STEP,
    )
}

fn grad_result(name: String, report: Result<GradCheckReport>) -> CheckResult {
    match report {
        Ok(r) => CheckResult {
            passed: r.norm_relative_error() <= GRAD_TOLERANCE,
            detail: format!(
                "norm-relative {:.2e}, max relative {:.2e}, {} coordinates",
                r.norm_relative_error(),
                r.max_rel_error,
                r.coordinates
            ),
            name,
        },
        Err(e) => CheckResult { name, passed: false, detail: e.to_string() },
    }
}

fn oracle(name: &str, ok: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult { name: name.to_string(), passed: ok, detail: detail.into() }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn metric_oracles() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let dice = [
        (vec![1, 1, 0], vec![1, 1, 0], 1.0),
        (vec![1, 0, 0], vec![0, 1, 0], 0.0),
        (vec![1, 1, 0, 0], vec![0, 1, 1, 0], 0.5),
        (vec![0, 0], vec![0, 0], 1.0),
    ];
    let ok = dice.iter().all(|(p, g, e)| dice_coeff(p, g).is_ok_and(|d| d == *e));
    out.push(oracle("oracle:dice_coeff", ok, "four hand-counted cases"));

    let two = vec![vec![0.9, 0.0, 0.0], vec![0.85, 0.8, 0.0], vec![0.8, 0.7, 0.6]];
    let kvasir = vec![vec![0.8951, 0.0], vec![0.6736, 0.5]];
    let ok = forgetting_rate(&two).is_ok_and(|r| close(r.forgetting_total, 0.2) && close(r.forgetting_mean_pct, 10.0))
        && forgetting_rate(&kvasir).is_ok_and(|r| close(r.forgetting_total, 0.2215));
    out.push(oracle("oracle:forgetting_rate", ok, "three-task and two-task matrices"));

    let ok = crate::fisher::adaptive_weight(3.0, 4.0, 18.0).is_ok_and(|w| close(w, 3.0 * (1.0 + 4.0 / 18.0)))
        && crate::fisher::adaptive_weight(2.0, 5.0, 5.0).is_ok_and(|w| close(w, 4.0))
        && crate::fisher::adaptive_weight(1.0, 1.0, 0.0).is_err();
    out.push(oracle("oracle:adaptive_weight", ok, "hand-evaluated weights"));

    let lex = Lexicon::default();
    let ok = complexity_of_texts(&["polyp"], &lex).is_ok_and(|c| c.value == 4.0)
        && complexity_of_texts(&["the image"], &lex).is_ok_and(|c| c.value == 2.0);
    out.push(oracle("oracle:complexity", ok, "single-term prompts"));

    let flat: BTreeMap<Group, Vec<f64>> = [(Group::Visual, vec![2.0; 8])].into();
    let ok = stability_factor(&flat).is_ok_and(|s| s[&Group::Visual] == 0.5);
    let stats = ActivationStats { per_layer: vec![(0.1, 1.0), (-0.3, 0.5)] };
    let ok = ok && task_similarity(&stats, &stats).is_ok_and(|a| a == 1.0);
    out.push(oracle("oracle:stability_similarity", ok, "constant norms and identical statistics"));
    out
}

fn invariants(samples: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut violations = Vec::new();
    for i in 0..samples {
        let n: Vec<f64> = (0..rng.random_range(2..10)).map(|_| rng.random_range(0.0..20.0)).collect();
        let s = stability_factor(&[(Group::Spatial, n)].into()).map(|m| m[&Group::Spatial]);
        if !s.as_ref().is_ok_and(|&s| s > 0.0 && s <= 0.5) {
            violations.push(format!("stability #{i}: {s:?}"));
        }
        let layers = rng.random_range(1..5);
        let mut stats = || ActivationStats {
            per_layer: (0..layers).map(|_| (rng.random_range(-5.0..5.0), rng.random_range(0.0..5.0))).collect(),
        };
        let (a, b) = (stats(), stats());
        let sim = task_similarity(&a, &b);
        if !sim.as_ref().is_ok_and(|&v| v > 0.0 && v <= 1.0) || sim.ok() != task_similarity(&b, &a).ok() {
            violations.push(format!("similarity #{i}"));
        }
        let len = rng.random_range(1..40);
        let p: Vec<u8> = (0..len).map(|_| rng.random_range(0..2)).collect();
        let g: Vec<u8> = (0..len).map(|_| rng.random_range(0..2)).collect();
        if !dice_coeff(&p, &g).is_ok_and(|d| (0.0..=1.0).contains(&d)) {
            violations.push(format!("dice #{i}"));
        }
        let hw = rng.random_range(1..5);
        let logits = Tensor::new(vec![1, 2, hw, hw], (0..2 * hw * hw).map(|_| rng.random_range(-30.0..30.0)).collect())
            .expect("shape matches data");
        let mask = Tensor::new(vec![1, hw, hw], (0..hw * hw).map(|_| rng.random_range(0..2) as f64).collect())
            .expect("shape matches data");
        let dl = dice_loss_value(&SegLogits { values: logits }, &mask, 1e-6);
        if !dl.as_ref().is_ok_and(|&v| (0.0..=1.0 + 1e-6).contains(&v)) {
            violations.push(format!("dice_loss #{i}: {dl:?}"));
        }
    }
    let anchor = anchor_check();
    vec![
        oracle(
            "invariant:ranges",
            violations.is_empty(),
            if violations.is_empty() { format!("{samples} random inputs") } else { violations.join("; ") },
        ),
        anchor,
    ]
}

/// Penalty and its gradient vanish at the anchor.
fn anchor_check() -> CheckResult {
    let run = || -> Result<(f64, f64)> {
        let params: ParamStore = build_model(&gradcheck_model_config(), 7)?;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut snap = fixture_snapshot(Method::PaEwc, &params, &mut rng);
        for (name, t) in params.iter() {
            snap.anchor.insert(name.to_string(), t.data().to_vec());
        }
        let mut tape = Tape::new();
        let vars: ParamVars = params.register(&mut tape);
        let pen = ewc_penalty(&mut tape, &vars, &[snap])?;
        let value = tape.value(pen).item()?;
        let grads = tape.backward(pen)?;
        let inf = grads.iter().flat_map(|(_, g)| g.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        Ok((value, inf))
    };
    match run() {
        Ok((v, g)) => oracle("invariant:ewc_anchor", v == 0.0 && g <= 1e-9, format!("penalty {v:e}, gradient inf-norm {g:e}")),
        Err(e) => oracle("invariant:ewc_anchor", false, e.to_string()),
    }
}

/// Runs the whole suite. `inject` names an op whose gradient is corrupted.
pub fn run_selftest(inject: Option<&str>) -> SelftestReport {
    let mut checks = Vec::new();
    for (i, op) in OPS.iter().enumerate() {
        checks.push(grad_result(format!("grad:{op}"), op_gradcheck(op, 1000 + i as u64, inject)));
    }
    if let Some(op) = inject.filter(|op| !OPS.contains(op)) {
        checks.push(oracle("grad:inject", false, format!("cannot inject into unknown op `{op}`")));
    }
    for method in Method::ALL {
        for seed in 0..10 {
            checks.push(grad_result(format!("grad:total_loss[{method},seed={seed}]"), model_gradcheck(method, seed)));
        }
    }
    checks.extend(metric_oracles());
    checks.extend(invariants(200));
    SelftestReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_fixture_passes() {
        for op in OPS {
            let r = op_gradcheck(op, 5, None).unwrap();
            assert!(r.norm_relative_error() <= GRAD_TOLERANCE, "{op}: {r:?}");
            assert!(r.grad_inf_norm > 0.0, "{op} has a vacuous readout");
        }
    }

    #[test]
    fn injected_bug_is_caught_and_named() {
        let r = op_gradcheck("relu", 5, Some("relu")).unwrap();
        assert!(r.norm_relative_error() > 0.1);
        let unaffected = op_gradcheck("sigmoid", 5, Some("relu")).unwrap();
        assert!(unaffected.norm_relative_error() <= GRAD_TOLERANCE);
    }

    #[test]
    fn oracles_and_invariants_hold() {
        for c in metric_oracles().into_iter().chain(invariants(50)) {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn model_checks_pass_for_every_method() {
        for method in Method::ALL {
            let r = model_gradcheck(method, 1).unwrap();
            assert!(r.norm_relative_error() <= GRAD_TOLERANCE, "{method}: {r:?}");
        }
    }
}
