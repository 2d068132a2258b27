//! Self-verification: independent reference implementations and the oracle
//! suites run by `transdeeplab verify`. Every suite runs in 64-bit mode.

pub mod oracles;

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradcheck, CustomBackward, GradcheckOptions, Graph, SparseMap, Var};
use crate::encoder_decoder::{bilinear_upsample, PatchExpanding, PatchMerging};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Builder, Ctx, ParamStore};
use crate::rng;
use crate::sspp::{Fusion, FusionMode, PyramidFeatures};
use crate::swin::{build_shift_mask, SwinBlockPair, SwinStageOutput, WindowAttention, WindowGrid};
use crate::tensor::Tensor;
use crate::train::loss::{combined_loss, LossWeights};
use crate::train::metrics::{hausdorff, Confusion};

use self::oracles::{AttentionParams, FusionGateParams};

/// Gradient tolerance on the maximum relative error.
pub const GRAD_TOL: f64 = 1e-4;
/// Kernel versus brute-force tolerance for attention outputs.
pub const ATTENTION_TOL: f64 = 1e-6;
/// Tolerance of the fusion gate identities and loop oracle.
pub const FUSION_TOL: f64 = 1e-7;
/// Tolerance of the metric oracle comparisons.
pub const METRIC_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    /// Finite-difference gradient checks of every op, the blocks and the tiny model.
    Gradcheck,
    /// Shifted-window attention and its mask against brute force.
    Swin,
    /// Cross-contextual fusion gates against closed forms and a loop oracle.
    Fusion,
    /// Dice and Hausdorff against naive references.
    Metrics,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Gradcheck, Suite::Swin, Suite::Fusion, Suite::Metrics];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Swin => "swin",
            Suite::Fusion => "fusion",
            Suite::Metrics => "metrics",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown suite `{s}` (expected gradcheck, swin, fusion or metrics)"
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Corrupts the backward rule of one op in the gradient suite; used as a
    /// negative control.
    pub inject_fault: bool,
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ok = self.checks.iter().filter(|c| c.passed).count();
        write!(
            f,
            "{} {}: {}/{} checks passed in {:.1}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            ok,
            self.checks.len(),
            self.elapsed.as_secs_f64()
        )
    }
}

pub fn run_suite(suite: Suite, opts: VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    let checks = match suite {
        Suite::Gradcheck => gradient_checks(opts),
        Suite::Swin => swin_checks(),
        Suite::Fusion => fusion_checks(),
        Suite::Metrics => metric_checks(),
    };
    SuiteReport {
        suite,
        checks,
        elapsed: start.elapsed(),
    }
}

pub fn run_all(opts: VerifyOptions) -> Vec<SuiteReport> {
    Suite::ALL.into_iter().map(|s| run_suite(s, opts)).collect()
}

/// Runs `f`, turning errors into failed checks.
fn check(name: impl Into<String>, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("extents")
}

/// Random values with magnitude in `[0.2, 1.5)`, away from activation kinks.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.2..1.5);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("extents")
}

fn randomize(store: &mut ParamStore<f64>, bound: f64, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.tensor.data_mut() {
            *v = r.random_range(-bound..bound);
        }
    }
}

/// `sum(y * probe)` with a fixed random probe, so every output element
/// carries a distinct upstream gradient.
fn probe_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let probe = random(g.shape(y), -1.0, 1.0, 0x5eed);
    let p = g.constant(probe);
    let m = g.mul(y, p)?;
    Ok(g.sum_all(m))
}

fn grad_check(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    max_checks: Option<usize>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Check {
    grad_check_with(name, inputs, grad_opts(max_checks), f)
}

fn grad_opts(max_checks: Option<usize>) -> GradcheckOptions {
    GradcheckOptions {
        max_checks_per_input: max_checks,
        ..GradcheckOptions::with_tol(GRAD_TOL)
    }
}

fn grad_check_with(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    opts: GradcheckOptions,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Check {
    check(name, || {
        let rep = gradcheck(
            |g, v| {
                let y = f(g, v)?;
                probe_sum(g, y)
            },
            &inputs,
            &opts,
        )?;
        Ok((rep.passed, rep.to_string()))
    })
}

/// Gradient check over a module's parameters plus extra inputs. The closure
/// receives a context bound to the parameters and the extra input vars.
fn module_check(
    name: &str,
    store: &ParamStore<f64>,
    extra: Vec<Tensor<f64>>,
    max_checks: Option<usize>,
    f: impl Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>,
) -> Check {
    module_check_with(name, store, extra, grad_opts(max_checks), f)
}

fn module_check_with(
    name: &str,
    store: &ParamStore<f64>,
    extra: Vec<Tensor<f64>>,
    opts: GradcheckOptions,
    f: impl Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>,
) -> Check {
    let n = store.len();
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|p| p.tensor.clone()).collect();
    inputs.extend(extra);
    grad_check_with(name, inputs, opts, move |g, v| {
        let (params, rest) = v.split_at(n);
        let mut cx = Ctx::new(g, params);
        f(&mut cx, rest)
    })
}

fn cube_backward(fault: bool) -> CustomBackward<f64> {
    let k = if fault { 6.0 } else { 3.0 };
    Arc::new(move |x: &Tensor<f64>, _y: &Tensor<f64>, grad: &[f64]| {
        x.data().iter().zip(grad).map(|(v, g)| k * v * v * g).collect()
    })
}

fn gradient_checks(opts: VerifyOptions) -> Vec<Check> {
    let s = [2, 3, 4];
    let x = |seed| random(&s, -1.0, 1.0, seed);
    let mut out = vec![
        grad_check("add", vec![x(1), x(2)], None, |g, v| g.add(v[0], v[1])),
        grad_check("sub", vec![x(3), x(4)], None, |g, v| g.sub(v[0], v[1])),
        grad_check("mul", vec![x(5), x(6)], None, |g, v| g.mul(v[0], v[1])),
        grad_check("div", vec![x(7), random(&s, 0.5, 1.5, 8)], None, |g, v| {
            g.div(v[0], v[1])
        }),
        grad_check("scale", vec![x(9)], None, |g, v| Ok(g.scale(v[0], 1.7))),
        grad_check("add_scalar", vec![x(10)], None, |g, v| {
            let y = g.add_scalar(v[0], 0.3);
            g.mul(y, y)
        }),
        grad_check(
            "matmul",
            vec![x(11), random(&[2, 4, 5], -1.0, 1.0, 12)],
            None,
            |g, v| g.matmul(v[0], v[1]),
        ),
        grad_check(
            "linear",
            vec![x(13), random(&[4, 5], -1.0, 1.0, 14), random(&[5], -1.0, 1.0, 15)],
            None,
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        ),
        grad_check("reshape", vec![x(16)], None, |g, v| {
            let y = g.reshape(v[0], vec![6, 4])?;
            g.mul(y, y)
        }),
        grad_check("permute", vec![x(17)], None, |g, v| g.permute(v[0], &[2, 0, 1])),
        grad_check("transpose_last", vec![x(18)], None, |g, v| g.transpose_last(v[0])),
        grad_check("roll", vec![x(19)], None, |g, v| g.roll(v[0], &[(1, 1), (2, -3)])),
        grad_check("expand", vec![random(&[2, 1, 4], -1.0, 1.0, 20)], None, |g, v| {
            g.expand(v[0], &[2, 3, 4])
        }),
        grad_check("slice", vec![x(21)], None, |g, v| g.slice(v[0], 2, 1, 2)),
        grad_check("split_concat", vec![x(22)], None, |g, v| {
            let parts = g.split(v[0], 2, &[1, 3])?;
            g.concat(&[parts[1], parts[0]], 2)
        }),
        grad_check("gather", vec![x(23)], None, |g, v| {
            g.gather(v[0], vec![2, 3], Arc::from(vec![0usize, 5, 5, 23, 11, 2]))
        }),
        grad_check("sparse_map", vec![random(&[4], -1.0, 1.0, 24)], None, |g, v| {
            let map = SparseMap::from_rows(vec![
                vec![(0, 1.0)],
                vec![(0, 0.75), (1, 0.25)],
                vec![(1, 0.5), (2, 0.5), (3, -0.2)],
                vec![],
                vec![(3, 2.0), (3, 1.0)],
            ]);
            g.sparse_map(v[0], vec![5], Arc::new(map))
        }),
        grad_check("sum", vec![x(25)], None, |g, v| g.sum(v[0], 1)),
        grad_check("mean", vec![x(26)], None, |g, v| g.mean(v[0], 2)),
        grad_check("sum_all", vec![x(27)], None, |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum_all(y))
        }),
        grad_check("mean_all", vec![x(28)], None, |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean_all(y))
        }),
        grad_check("softmax", vec![random(&s, -3.0, 3.0, 29)], None, |g, v| {
            g.softmax(v[0], 1)
        }),
        grad_check("log_softmax", vec![random(&s, -3.0, 3.0, 30)], None, |g, v| {
            g.log_softmax(v[0], 2)
        }),
        grad_check(
            "layernorm",
            vec![x(31), random(&[4], 0.5, 1.5, 32), random(&[4], -0.5, 0.5, 33)],
            None,
            |g, v| g.layernorm(v[0], v[1], v[2], 1e-5),
        ),
        grad_check("gelu", vec![random(&s, -3.0, 3.0, 34)], None, |g, v| Ok(g.gelu(v[0]))),
        grad_check("relu", vec![away_from_zero(&s, 35)], None, |g, v| Ok(g.relu(v[0]))),
        grad_check("sigmoid", vec![random(&s, -4.0, 4.0, 36)], None, |g, v| {
            Ok(g.sigmoid(v[0]))
        }),
    ];
    let fault = opts.inject_fault;
    out.push(grad_check(
        if fault { "custom (fault injected)" } else { "custom" },
        vec![x(37)],
        None,
        move |g, v| g.custom(v[0], |t| t.map(|a| a * a * a), cube_backward(fault)),
    ));
    out.extend(block_checks());
    out
}

fn builder_store(seed: u64, build: impl FnOnce(&mut Builder<f64>) -> Result<()>) -> Result<ParamStore<f64>> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, rng::INIT);
    build(&mut Builder::new(&mut store, &mut r))?;
    randomize(&mut store, 0.5, seed + 100);
    Ok(store)
}

fn grid_input(g: &Graph<f64>, x: Var, h: usize, w: usize) -> Result<SwinStageOutput> {
    SwinStageOutput::new(g, x, h, w)
}

fn block_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let cap = Some(6);

    // Shifted, masked window attention on a 4x4 grid with 2x2 windows.
    let mut attn = None;
    match builder_store(1, |b| {
        attn = Some(WindowAttention::new(&mut b.sub("attn"), 4, 2, 2)?);
        Ok(())
    }) {
        Ok(store) => {
            let attn = attn.expect("built");
            let grid = WindowGrid::new(4, 4, 2, 1).expect("valid grid");
            let mask = build_shift_mask(&grid);
            out.push(module_check(
                "window attention (shifted, masked)",
                &store,
                vec![random(&[1, 4, 4, 4], -1.0, 1.0, 40)],
                cap,
                move |cx, v| attn.forward_grid(cx, v[0], &grid, Some(&mask)),
            ));
        }
        Err(e) => out.push(failed("window attention (shifted, masked)", e)),
    }

    let mut pair = None;
    match builder_store(2, |b| {
        pair = Some(SwinBlockPair::new(&mut b.sub("pair"), 4, 4, 4, 2, 2, 2)?);
        Ok(())
    }) {
        Ok(store) => {
            let pair = pair.expect("built");
            out.push(module_check(
                "swin block pair",
                &store,
                vec![random(&[1, 16, 4], -1.0, 1.0, 41)],
                cap,
                move |cx, v| {
                    let x = grid_input(cx.g, v[0], 4, 4)?;
                    Ok(pair.forward(cx, x)?.tokens)
                },
            ));
        }
        Err(e) => out.push(failed("swin block pair", e)),
    }

    let mut merge = None;
    match builder_store(3, |b| {
        merge = Some(PatchMerging::new(&mut b.sub("merge"), 4)?);
        Ok(())
    }) {
        Ok(store) => {
            let merge = merge.expect("built");
            out.push(module_check(
                "patch merging",
                &store,
                vec![random(&[1, 16, 4], -1.0, 1.0, 42)],
                cap,
                move |cx, v| {
                    let x = grid_input(cx.g, v[0], 4, 4)?;
                    Ok(merge.forward(cx, x)?.tokens)
                },
            ));
        }
        Err(e) => out.push(failed("patch merging", e)),
    }

    let mut expand = None;
    match builder_store(4, |b| {
        expand = Some(PatchExpanding::new(&mut b.sub("expand"), 8, 2)?);
        Ok(())
    }) {
        Ok(store) => {
            let expand = expand.expect("built");
            out.push(module_check(
                "patch expanding",
                &store,
                vec![random(&[1, 4, 8], -1.0, 1.0, 43)],
                cap,
                move |cx, v| {
                    let x = grid_input(cx.g, v[0], 2, 2)?;
                    Ok(expand.forward(cx, x)?.tokens)
                },
            ));
        }
        Err(e) => out.push(failed("patch expanding", e)),
    }

    out.push(module_check(
        "bilinear upsample",
        &ParamStore::new(),
        vec![random(&[1, 6, 2], -1.0, 1.0, 44)],
        None,
        |cx, v| {
            let x = grid_input(cx.g, v[0], 2, 3)?;
            Ok(bilinear_upsample(cx, x, 2)?.tokens)
        },
    ));

    let mut fusion = None;
    match builder_store(5, |b| {
        fusion = Some(Fusion::new(&mut b.sub("fusion"), FusionMode::CrossAttention, 2, 4, 2)?);
        Ok(())
    }) {
        Ok(store) => {
            let fusion = fusion.expect("built");
            out.push(module_check(
                "cross-contextual fusion",
                &store,
                vec![random(&[2, 4, 8], -1.0, 1.0, 45)],
                cap,
                move |cx, v| {
                    let levels = cx.g.split(v[0], 2, &[4, 4])?;
                    let pyr = PyramidFeatures {
                        levels,
                        window_sizes: vec![1, 2],
                        height: 2,
                        width: 2,
                    };
                    Ok(fusion.forward(cx, &pyr)?.tokens)
                },
            ));
        }
        Err(e) => out.push(failed("cross-contextual fusion", e)),
    }

    let labels: Vec<usize> = {
        let mut r = ChaCha8Rng::seed_from_u64(46);
        (0..2 * 16).map(|_| r.random_range(0..3)).collect()
    };
    out.push(grad_check(
        "dice + cross-entropy loss",
        vec![random(&[2, 3, 4, 4], -2.0, 2.0, 47)],
        None,
        move |g, v| Ok(combined_loss(g, v[0], &labels, LossWeights::default())?.total),
    ));

    out.push(tiny_model_check());
    out
}

fn failed(name: &str, e: Error) -> Check {
    Check {
        name: name.into(),
        passed: false,
        detail: format!("error: {e}"),
    }
}

fn tiny_model_check() -> Check {
    let name = "tiny model end to end";
    let cfg = ModelConfig::tiny();
    let mut m = match Model::<f64>::build(&cfg) {
        Ok(m) => m,
        Err(e) => return failed(name, e),
    };
    // Move zero-initialized tensors off their symmetric starting point.
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for p in m.params.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    let img = random(&[1, cfg.in_channels, cfg.img_size, cfg.img_size], 0.0, 1.0, 7);
    // The probed loss sums ~2k outputs, so finite differences carry ~1e-10 of
    // round-off; gradients below 1e-5 are compared on that absolute scale.
    let opts = GradcheckOptions {
        floor: 1e-5,
        ..grad_opts(Some(2))
    };
    module_check_with(name, &m.params.clone(), vec![img], opts, move |cx, v| {
        m.forward(cx, v[0])
    })
}

fn attention_params(store: &ParamStore<f64>, prefix: &str) -> Result<AttentionParams> {
    let get = |n: &str| {
        store
            .by_name(&format!("{prefix}.{n}"))
            .map(|p| p.tensor.clone())
            .ok_or_else(|| Error::invalid("verify", format!("missing parameter {prefix}.{n}")))
    };
    Ok(AttentionParams {
        qkv_w: get("qkv.weight")?,
        qkv_b: get("qkv.bias")?,
        proj_w: get("proj.weight")?,
        proj_b: get("proj.bias")?,
        table: get("relative_position_bias_table")?,
    })
}

/// Brute-force mask: tokens `i`, `j` of a shifted window may attend iff their
/// displacement is the same before and after undoing the cyclic shift.
fn brute_force_allowed(grid: &WindowGrid) -> Vec<bool> {
    let (h, w, m, s) = (grid.height, grid.width, grid.window_size, grid.shift);
    let n = m * m;
    let wc = w / m;
    let mut allowed = Vec::with_capacity(grid.num_windows() * n * n);
    for win in 0..grid.num_windows() {
        let (wr, wcol) = (win / wc, win % wc);
        let pos = |t: usize| {
            let (si, sj) = (wr * m + t / m, wcol * m + t % m);
            (
                si as isize,
                sj as isize,
                ((si + s) % h) as isize,
                ((sj + s) % w) as isize,
            )
        };
        for i in 0..n {
            let (si, sj, oi, oj) = pos(i);
            for j in 0..n {
                let (ti, tj, qi, qj) = pos(j);
                allowed.push(qi - oi == ti - si && qj - oj == tj - sj);
            }
        }
    }
    allowed
}

fn swin_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let heads = 2;
    let c = 4;
    let mut seed = 200;
    for h in [4, 6, 8] {
        for w in [4, 6, 8] {
            for requested in [2, 4] {
                seed += 3;
                let m = WindowGrid::effective_window(h, w, requested);
                let shift = m / 2;
                let name = format!("sw-msa {h}x{w} window {requested} (effective {m}, shift {shift})");
                out.push(check(name, || swin_case(h, w, m, shift, heads, c, seed)));
            }
        }
    }
    out.push(check("softmax logit-shift invariance", || {
        let mut worst = 0.0f64;
        for (i, shift) in [-50.0, -1.5, 0.25, 3.0, 100.0].into_iter().enumerate() {
            let x = random(&[5, 16], -4.0, 4.0, 300 + i as u64);
            let mut g = Graph::new();
            let a = g.constant(x.clone());
            let b = g.constant(x.map(|v| v + shift));
            let (sa, sb) = (g.softmax(a, 1)?, g.softmax(b, 1)?);
            worst = worst.max(g.value(sa).max_abs_diff(g.value(sb)));
        }
        Ok((worst <= ATTENTION_TOL, format!("max diff {worst:.3e}")))
    }));
    out
}

fn swin_case(h: usize, w: usize, m: usize, shift: usize, heads: usize, c: usize, seed: u64) -> Result<(bool, String)> {
    let mut attn = None;
    let store = builder_store(seed, |b| {
        attn = Some(WindowAttention::new(&mut b.sub("attn"), c, heads, m)?);
        Ok(())
    })?;
    let attn = attn.expect("built");
    let grid = WindowGrid::new(h, w, m, shift)?;
    let mask = build_shift_mask(&grid);

    let mask_ok = mask.allowed == brute_force_allowed(&grid);

    let x0 = random(&[2, h, w, c], -1.0, 1.0, seed + 1);
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let mut cx = Ctx::new(&mut g, &vars);
    let x = cx.g.constant(x0.clone());
    let y = attn.forward_grid(&mut cx, x, &grid, Some(&mask))?;
    let expect = oracles::shifted_window_attention(&x0, &attention_params(&store, "attn")?, heads, m, shift);
    let diff = g.value(y).max_abs_diff(&expect);

    // Attention weights: rows normalized, masked entries negligible.
    let n = m * m;
    let windows = random(&[2 * grid.num_windows(), n, c], -1.0, 1.0, seed + 2);
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let mut cx = Ctx::new(&mut g, &vars);
    let xw = cx.g.constant(windows);
    let (_, weights) = attn.forward_with_weights(&mut cx, xw, Some(&mask))?;
    let mut row_err = 0.0f64;
    let mut leaked = 0.0f64;
    for (r, row) in g.value(weights).data().chunks(n).enumerate() {
        row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        let win = (r / (heads * n)) % grid.num_windows();
        let i = r % n;
        for (j, &a) in row.iter().enumerate() {
            if !mask.allowed[(win * n + i) * n + j] {
                leaked = leaked.max(a);
            }
        }
    }
    let passed = mask_ok && diff <= ATTENTION_TOL && row_err <= ATTENTION_TOL && leaked < 1e-8;
    Ok((
        passed,
        format!(
            "max diff {diff:.3e}, row sum err {row_err:.3e}, masked weight {leaked:.1e}, mask {}",
            if mask_ok {
                "matches brute force"
            } else {
                "DIFFERS from brute force"
            }
        ),
    ))
}

fn fusion_setup(levels: usize, dim: usize, reduction: usize) -> Result<(ParamStore<f64>, Fusion)> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(3, rng::INIT);
    let f = Fusion::new(
        &mut Builder::new(&mut store, &mut r).sub("fusion"),
        FusionMode::CrossAttention,
        levels,
        dim,
        reduction,
    )?;
    Ok((store, f))
}

fn set_param(store: &mut ParamStore<f64>, name: &str, data: &[f64]) -> Result<()> {
    let p = store
        .iter_mut()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::invalid("verify", format!("missing parameter {name}")))?;
    if p.tensor.len() != data.len() {
        return Err(Error::invalid(
            "verify",
            format!("{name} has {} elements", p.tensor.len()),
        ));
    }
    p.tensor.data_mut().copy_from_slice(data);
    Ok(())
}

/// Splits `z: [B, P, M*C]` into levels and fuses them, returning the graph
/// and the gate vars `(z_all, w_scale, w_tokens, z_out)`.
fn fuse(store: &ParamStore<f64>, f: &Fusion, z: &Tensor<f64>, h: usize, w: usize) -> Result<(Graph<f64>, [Var; 4])> {
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let mut cx = Ctx::new(&mut g, &vars);
    let zv = cx.g.constant(z.clone());
    let levels = cx.g.split(zv, 2, &vec![f.dim; f.levels])?;
    let pyr = PyramidFeatures {
        levels,
        window_sizes: vec![1; f.levels],
        height: h,
        width: w,
    };
    let (_, ff) = f.fuse_detailed(&mut cx, &pyr)?;
    Ok((g, [ff.z_all, ff.w_scale, ff.w_tokens, ff.z_out]))
}

fn gate_params(store: &ParamStore<f64>) -> Result<FusionGateParams> {
    let get = |n: &str| {
        store
            .by_name(&format!("fusion.{n}"))
            .map(|p| p.tensor.clone())
            .ok_or_else(|| Error::invalid("verify", format!("missing parameter fusion.{n}")))
    };
    Ok(FusionGateParams {
        w1: get("scale.w1.weight")?,
        b1: get("scale.w1.bias")?,
        w2: get("scale.w2.weight")?,
        b2: get("scale.w2.bias")?,
        w4: get("token.w4.weight")?,
        b4: get("token.w4.bias")?,
        w3: get("token.w3.weight")?,
        b3: get("token.w3.bias")?,
    })
}

fn fusion_checks() -> Vec<Check> {
    let mut out = Vec::new();

    out.push(check("zero weights give half gates", || {
        let (mut store, f) = fusion_setup(2, 4, 2)?;
        for p in store.iter_mut() {
            if p.name.contains(".scale.") || p.name.contains(".token.") {
                p.tensor.data_mut().fill(0.0);
            }
        }
        let z = random(&[2, 4, 8], -2.0, 2.0, 500);
        let (g, [_, ws, wt, _]) = fuse(&store, &f, &z, 2, 2)?;
        let exact = g.value(ws).data().iter().chain(g.value(wt).data()).all(|&v| v == 0.5);
        Ok((
            exact,
            format!(
                "all {} gates exactly 0.5: {exact}",
                g.value(ws).len() + g.value(wt).len()
            ),
        ))
    }));

    out.push(check("scale gate hand example", || {
        let (mut store, f) = fusion_setup(1, 2, 1)?;
        set_param(&mut store, "fusion.scale.w1.weight", &[1., 0., 0., 1.])?;
        set_param(&mut store, "fusion.scale.w2.weight", &[1., 0., 0., 1.])?;
        let att = f
            .attention
            .as_ref()
            .ok_or_else(|| Error::invalid("verify", "no attention"))?;
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let mut cx = Ctx::new(&mut g, &vars);
        let z = cx.g.constant(Tensor::new(vec![1, 2, 2], vec![2., 0., 4., 0.])?);
        let (ws, zs) = att.scale_attention(&mut cx, z)?;
        let want_ws = [0.9526, 0.5];
        let want_z = [1.9051, 0.0, 3.8103, 0.0];
        let e1 = g
            .value(ws)
            .data()
            .iter()
            .zip(want_ws)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let e2 = g
            .value(zs)
            .data()
            .iter()
            .zip(want_z)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let err = e1.max(e2);
        Ok((
            err <= 1e-4,
            format!(
                "w_scale {:?}, z' {:?}, max err {err:.2e}",
                g.value(ws).data(),
                g.value(zs).data()
            ),
        ))
    }));

    out.push(check("gated output equals gate product", || {
        let (mut store, f) = fusion_setup(3, 4, 4)?;
        randomize(&mut store, 0.8, 501);
        let (b, p, d) = (2, 9, 12);
        let z = random(&[b, p, d], -2.0, 2.0, 502);
        let (g, [za, ws, wt, zo]) = fuse(&store, &f, &z, 3, 3)?;
        let (za, ws, wt, zo) = (
            g.value(za).data(),
            g.value(ws).data(),
            g.value(wt).data(),
            g.value(zo).data(),
        );
        let mut err = 0.0f64;
        for bi in 0..b {
            for t in 0..p {
                for c in 0..d {
                    let i = (bi * p + t) * d + c;
                    err = err.max((zo[i] - wt[bi * p + t] * ws[bi * d + c] * za[i]).abs());
                }
            }
        }
        Ok((err <= FUSION_TOL, format!("max err {err:.3e}")))
    }));

    out.push(check("gates match loop oracle", || {
        let (mut store, f) = fusion_setup(2, 6, 3)?;
        randomize(&mut store, 0.8, 503);
        let z = random(&[2, 16, 12], -2.0, 2.0, 504);
        let (g, [_, ws, wt, zo]) = fuse(&store, &f, &z, 4, 4)?;
        let (ows, owt, ozo) = oracles::fusion_gates(&z, &gate_params(&store)?);
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let err = diff(g.value(ws).data(), &ows)
            .max(diff(g.value(wt).data(), &owt))
            .max(diff(g.value(zo).data(), &ozo));
        Ok((err <= FUSION_TOL, format!("max err {err:.3e}")))
    }));

    out
}

fn random_mask(r: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let density = [0.0, 0.05, 0.2, 0.5, 0.8][r.random_range(0..5)];
    let mut m: Vec<bool> = (0..n).map(|_| r.random_bool(density)).collect();
    // occasionally a solid rectangle, which has an interior
    if r.random_bool(0.3) {
        let side = (n as f64).sqrt() as usize;
        let (i0, j0) = (r.random_range(0..side), r.random_range(0..side));
        let (i1, j1) = (r.random_range(i0..side), r.random_range(j0..side));
        for i in i0..=i1 {
            for j in j0..=j1 {
                m[i * side + j] = true;
            }
        }
    }
    m
}

fn metric_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let (h, w) = (16, 16);
    out.push(check("200 random 16x16 pairs", || {
        let mut r = ChaCha8Rng::seed_from_u64(600);
        let (mut dice_err, mut hd_err, mut mismatched) = (0.0f64, 0.0f64, 0usize);
        for _ in 0..200 {
            let (a, b) = (random_mask(&mut r, h * w), random_mask(&mut r, h * w));
            dice_err = dice_err.max((Confusion::of(&a, &b).dice() - oracles::dice(&a, &b)).abs());
            let fast = hausdorff(&a, &b, h, w, None);
            match oracles::hausdorff(&a, &b, h, w) {
                Some(v) => hd_err = hd_err.max((fast - v).abs()),
                None if fast.is_infinite() => {}
                None => mismatched += 1,
            }
        }
        let passed = dice_err <= METRIC_TOL && hd_err <= METRIC_TOL && mismatched == 0;
        Ok((
            passed,
            format!("dice max err {dice_err:.1e}, hausdorff max err {hd_err:.1e}, convention mismatches {mismatched}"),
        ))
    }));

    out.push(check("edge-case conventions", || {
        let n = h * w;
        let empty = vec![false; n];
        let mut left = empty.clone();
        let mut right = empty.clone();
        for i in 0..h {
            for j in 0..4 {
                left[i * w + j] = true;
                right[i * w + w - 1 - j] = true;
            }
        }
        let cases = [
            (
                "perfect match",
                Confusion::of(&left, &left).dice() == 1.0 && hausdorff(&left, &left, h, w, None) == 0.0,
            ),
            (
                "disjoint",
                Confusion::of(&left, &right).dice() == 0.0 && hausdorff(&left, &right, h, w, None) == 12.0,
            ),
            (
                "one empty",
                Confusion::of(&empty, &left).dice() == 0.0 && hausdorff(&empty, &left, h, w, None).is_infinite(),
            ),
            (
                "both empty",
                Confusion::of(&empty, &empty).dice() == 1.0 && hausdorff(&empty, &empty, h, w, None) == 0.0,
            ),
        ];
        let failed: Vec<&str> = cases.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
        Ok((
            failed.is_empty(),
            if failed.is_empty() {
                "perfect match 1/0, disjoint 0/finite, one empty 0/inf, both empty 1/0".into()
            } else {
                format!("violated: {}", failed.join(", "))
            },
        ))
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_injection_is_detected() {
        let rep = run_suite(Suite::Gradcheck, VerifyOptions { inject_fault: true });
        let bad: Vec<&str> = rep.failures().map(|c| c.name.as_str()).collect();
        assert_eq!(
            bad,
            ["custom (fault injected)"],
            "{:#?}",
            rep.failures().collect::<Vec<_>>()
        );
    }

    #[test]
    fn swin_fusion_and_metric_suites_pass() {
        for s in [Suite::Swin, Suite::Fusion, Suite::Metrics] {
            let rep = run_suite(s, VerifyOptions::default());
            for c in &rep.checks {
                assert!(c.passed, "{s} / {}: {}", c.name, c.detail);
            }
        }
    }

    #[test]
    fn swin_suite_covers_every_grid() {
        let rep = run_suite(Suite::Swin, VerifyOptions::default());
        assert_eq!(rep.checks.iter().filter(|c| c.name.starts_with("sw-msa")).count(), 18);
    }

    #[test]
    fn brute_force_mask_is_all_allowed_without_shift() {
        let g = WindowGrid::new(6, 4, 2, 0).unwrap();
        assert!(brute_force_allowed(&g).iter().all(|&a| a));
    }

    #[test]
    fn suite_names_roundtrip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }
}
