//! Built-in invariant suites behind `davit selftest`.
//!
//! Every check is deterministic and its detail line carries no timing, so
//! two runs print identical reports.

use serde::Serialize;

use crate::analysis::{count_flops, count_params, scaling_probe};
use crate::attention::{self, AttentionParams, ScaleMode, WindowGrid};
use crate::autodiff::{grad_check, Tape, Var};
use crate::container;
use crate::error::Result;
use crate::model::{BlockLayout, Mode, Model, ModelConfig, WindowSize};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::verify;

/// Reference sizes: (preset, params in millions).
pub const REFERENCE_PARAMS: &[(&str, f64)] = &[
    ("tiny", 28.3),
    ("small", 49.7),
    ("base", 87.9),
    ("large", 196.8),
    ("tiny_no_ffn", 25.8),
];

/// Reference compute: (preset, resolution, GFLOPs under the MAC convention).
pub const REFERENCE_FLOPS: &[(&str, usize, f64)] = &[
    ("tiny", 224, 4.5),
    ("small", 224, 8.8),
    ("base", 224, 15.5),
    ("base", 384, 46.4),
    ("large", 384, 103.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                )
            })
            .collect()
    }
}

type Outcome = std::result::Result<String, String>;

fn run(checks: &mut Vec<CheckResult>, name: &str, f: impl FnOnce() -> Outcome) {
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    checks.push(CheckResult {
        name: name.to_string(),
        passed,
        detail,
    });
}

fn ok_if(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lift<X>(r: Result<X>) -> std::result::Result<X, String> {
    r.map_err(|e| e.to_string())
}

pub fn run_selftest(level: Level) -> SelftestReport {
    let mut checks = Vec::new();
    let c = &mut checks;

    run(c, "param_counts", || {
        let mut worst = 0.0f64;
        for &(name, reference) in REFERENCE_PARAMS {
            let got = lift(count_params(&lift(ModelConfig::preset(name))?))?.params_m();
            worst = worst.max((got - reference).abs() / reference);
        }
        ok_if(
            worst <= 0.02,
            format!("worst relative deviation {:.4} (limit 0.02)", worst),
        )
    });

    run(c, "flop_counts", || {
        let mut worst = 0.0f64;
        for &(name, res, reference) in REFERENCE_FLOPS {
            let cfg = lift(ModelConfig::preset_for_resolution(name, res))?;
            let got = lift(count_flops(&cfg, res, res))?.flops_g();
            worst = worst.max((got - reference).abs() / reference);
        }
        ok_if(
            worst <= 0.05,
            format!("worst relative deviation {:.4} (limit 0.05)", worst),
        )
    });

    run(c, "counter_matches_built_model", || {
        let names: &[&str] = match level {
            Level::Quick => &["micro", "micro_grad"],
            Level::Full => &["micro", "micro_grad", "tiny", "tiny_no_ffn"],
        };
        for &name in names {
            let cfg = lift(ModelConfig::preset(name))?;
            let counted = lift(count_params(&cfg))?.total_params;
            let built = lift(Model::<f32>::build(cfg, 0))?.num_params() as u64;
            if counted != built {
                return Err(format!("{name}: counter {counted} vs model {built}"));
            }
        }
        Ok(format!("{} presets exact", names.len()))
    });

    run(c, "layouts_share_param_count", || {
        let mut counts = Vec::new();
        for layout in [
            BlockLayout::WindowFirst,
            BlockLayout::ChannelFirst,
            BlockLayout::Parallel,
        ] {
            let mut cfg = lift(ModelConfig::preset("micro"))?;
            cfg.layout = layout;
            counts.push(lift(Model::<f32>::build(cfg, 0))?.num_params());
        }
        ok_if(
            counts.iter().all(|&n| n == counts[0]),
            format!("{counts:?}"),
        )
    });

    run(c, "scaling_probe", || {
        let tiny = lift(ModelConfig::preset("tiny"))?;
        let rows = lift(scaling_probe(&tiny, &[224, 448]))?;
        let drift = (rows[1].ratio - rows[0].ratio).abs() / rows[0].ratio;
        let mut global = tiny.clone();
        global.window = WindowSize::Global;
        let g = lift(scaling_probe(&global, &[224, 448]))?;
        ok_if(
            drift <= 0.01 && g[1].ratio > g[0].ratio,
            format!(
                "windowed ratio drift {drift:.2e}, global ratio {:.0} -> {:.0}",
                g[0].ratio, g[1].ratio
            ),
        )
    });

    let instances = if level == Level::Full { 100 } else { 10 };
    run(c, "window_full_grid_equals_global", || {
        let mut worst = 0.0f64;
        for i in 0..instances {
            worst = worst.max(lift(full_window_vs_global(i as u64))?);
        }
        ok_if(
            worst <= 1e-5,
            format!("{instances} instances, max abs diff {worst:.2e}"),
        )
    });

    run(c, "channel_attention_oracle", || {
        let mut worst = 0.0f64;
        for i in 0..instances {
            worst = worst.max(lift(channel_vs_loop(i as u64))?);
        }
        ok_if(
            worst <= 1e-6,
            format!("{instances} instances, max abs diff {worst:.2e}"),
        )
    });

    run(c, "partition_round_trip", || {
        let x = Rng::new(5).normal_tensor::<f32>(&[2, 12, 8, 3], 1.0);
        let grid = lift(WindowGrid::new(12, 8, 4))?;
        let back = lift(attention::reverse_tensor(
            &lift(attention::partition_tensor(&x, 4))?,
            &grid,
        ))?;
        ok_if(back == x, "bit-exact".into())
    });

    run(c, "container_round_trip", || {
        let x = Rng::new(6).normal_tensor::<f64>(&[3, 1, 5], 1.0);
        let (back, used) = lift(container::decode(&container::encode(&x)))?;
        let back = back.into_dtype::<f64>();
        ok_if(
            back == x && used == container::encode(&x).len(),
            "bit-exact".into(),
        )
    });

    run(c, "forward_determinism", || {
        let m = lift(Model::<f32>::preset("micro", 3))?;
        let x = Rng::new(1).uniform_tensor::<f32>(&[2, 3, 32, 32], 0.0, 1.0);
        let a = lift(m.forward(&x, Mode::Train, &mut Rng::new(8)))?;
        let b = lift(m.forward(&x, Mode::Train, &mut Rng::new(8)))?;
        ok_if(a == b, "train-mode logits bit-identical".into())
    });

    if level == Level::Full {
        run(c, "op_grad_checks", || {
            let mut worst = 0.0f64;
            for (name, err) in lift(op_grad_errors())? {
                if err >= 1e-4 {
                    return Err(format!("{name}: relative error {err:.2e}"));
                }
                worst = worst.max(err);
            }
            Ok(format!("worst relative error {worst:.2e} (limit 1e-4)"))
        });
        run(c, "end_to_end_grad_check", || {
            let err = lift(micro_model_grad_error(0))?;
            ok_if(err < 1e-3, format!("relative error {err:.2e} (limit 1e-3)"))
        });
    }
    SelftestReport { checks }
}

fn eval_tensor(
    x: &Tensor<f64>,
    f: impl FnOnce(&mut Tape<f64>, Var) -> Result<Var>,
) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

/// Max abs diff between window attention with one full-grid window and
/// global attention over the flattened grid.
pub fn full_window_vs_global(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let side = 2 + rng.below(3);
    let heads = 1 + rng.below(3);
    let dim = heads * (2 + rng.below(3));
    let params = AttentionParams::<f64>::init(dim, heads, 0.5, &mut rng)?;
    let x = rng.normal_tensor::<f64>(&[2, side, side, dim], 1.0);
    let windowed = eval_tensor(&x, |t, v| {
        let p = params.register(t, false);
        attention::window_attention(t, v, &p, side)
    })?;
    let flat = x.reshape(&[2, side * side, dim])?;
    let global = eval_tensor(&flat, |t, v| {
        let p = params.register(t, false);
        attention::global_mhsa(t, v, &p)
    })?;
    windowed
        .reshape(&[2, side * side, dim])?
        .max_abs_diff(&global)
}

/// Max abs diff between channel group attention and the transpose-and-loop oracle.
pub fn channel_vs_loop(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed ^ 0xC0FFEE);
    let groups = 1 + rng.below(3);
    let dim = groups * (1 + rng.below(4));
    let tokens = 1 + rng.below(9);
    let mode = if rng.bernoulli(0.5) {
        ScaleMode::InvSqrtCg
    } else {
        ScaleMode::InvSqrtP
    };
    let params = AttentionParams::<f64>::init(dim, groups, 0.5, &mut rng)?;
    let x = rng.normal_tensor::<f64>(&[2, tokens, dim], 1.0);
    let got = eval_tensor(&x, |t, v| {
        let p = params.register(t, false);
        attention::channel_group_attention(t, v, &p, mode)
    })?;
    let want = verify::per_sample(&x, |s| verify::channel_attention_loop(s, &params, mode));
    Ok(got
        .data()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Worst relative gradient error of each differentiable op, in 64-bit.
pub fn op_grad_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = Rng::new(77);
    let h = 1e-5;
    let mut out = Vec::new();
    let mut weights = |shape: &[usize]| rng.normal_tensor::<f64>(shape, 1.0);
    // scalarize with a random linear functional so no gradient is trivially zero
    fn dot(t: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv)?;
        t.sum(p)
    }
    let x = weights(&[2, 3, 4]);
    let b = weights(&[4, 5]);
    let w = weights(&[2, 3, 5]);
    out.push((
        "matmul",
        grad_check(
            |t, v| {
                let bv = t.constant(b.clone());
                let y = t.matmul(v, bv)?;
                dot(t, y, &w)
            },
            &x,
            h,
        )?,
    ));
    let w4 = weights(&[2, 3, 4]);
    out.push((
        "softmax",
        grad_check(
            |t, v| {
                let y = t.softmax_lastaxis(v)?;
                dot(t, y, &w4)
            },
            &x,
            h,
        )?,
    ));
    let (g, be) = (weights(&[4]), weights(&[4]));
    out.push((
        "layer_norm",
        grad_check(
            |t, v| {
                let (gv, bv) = (t.constant(g.clone()), t.constant(be.clone()));
                let y = t.layer_norm(v, gv, bv, 1e-5)?;
                dot(t, y, &w4)
            },
            &x,
            h,
        )?,
    ));
    out.push((
        "gelu",
        grad_check(
            |t, v| {
                let y = t.gelu(v)?;
                dot(t, y, &w4)
            },
            &x,
            h,
        )?,
    ));
    let img = weights(&[1, 2, 5, 5]);
    let cw = weights(&[4, 1, 3, 3]);
    let cb = weights(&[4]);
    let wc = weights(&[1, 4, 3, 3]);
    out.push((
        "grouped_conv2d",
        grad_check(
            |t, v| {
                let (wv, bv) = (t.constant(cw.clone()), t.constant(cb.clone()));
                let y = t.conv2d(v, wv, bv, 2, 1, 2)?;
                dot(t, y, &wc)
            },
            &img,
            h,
        )?,
    ));
    let params = AttentionParams::<f64>::init(4, 2, 0.5, &mut Rng::new(3))?;
    let grid = Rng::new(4).normal_tensor::<f64>(&[1, 4, 4, 4], 1.0);
    let wg = Rng::new(5).normal_tensor::<f64>(&[1, 4, 4, 4], 1.0);
    out.push((
        "window_attention",
        grad_check(
            |t, v| {
                let p = params.register(t, false);
                let y = attention::window_attention(t, v, &p, 2)?;
                dot(t, y, &wg)
            },
            &grid,
            h,
        )?,
    ));
    let seq = Rng::new(6).normal_tensor::<f64>(&[1, 5, 4], 1.0);
    let ws = Rng::new(7).normal_tensor::<f64>(&[1, 5, 4], 1.0);
    out.push((
        "channel_attention",
        grad_check(
            |t, v| {
                let p = params.register(t, false);
                let y = attention::channel_group_attention(t, v, &p, ScaleMode::InvSqrtCg)?;
                dot(t, y, &ws)
            },
            &seq,
            h,
        )?,
    ));
    let logits = Rng::new(8).normal_tensor::<f64>(&[3, 4], 1.0);
    out.push((
        "cross_entropy",
        grad_check(|t, v| t.cross_entropy(v, &[0, 3, 1]), &logits, h)?,
    ));
    Ok(out)
}

/// Relative error of the full micro model's input gradient, eval mode.
pub fn micro_model_grad_error(seed: u64) -> Result<f64> {
    let model = Model::<f64>::preset("micro_grad", seed)?;
    let x = Rng::new(seed + 1).normal_tensor::<f64>(&[2, 3, 8, 8], 1.0);
    grad_check(
        |t, v| {
            let vars = model.register(t, false);
            let trace = model.forward_on_tape(t, &vars, v, Mode::Eval, &mut Rng::new(0))?;
            t.cross_entropy(trace.logits, &[1, 2])
        },
        &x,
        1e-5,
    )
}
