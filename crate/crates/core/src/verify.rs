//! Self-verification battery: every differentiable operation and every loss
//! path re-checked against central finite differences, the fast pooling route
//! checked against the reference route, and the closed-form values the losses
//! must reproduce.
//!
//! The battery is deterministic — each check draws from a named stream of a
//! fixed master seed — so on a given build it either always passes or always
//! fails.  [`run`] executes every check and reports one timed outcome per
//! check.  The optional `corrupt` argument names a single check whose
//! comparison is deliberately falsified (for gradient checks, the
//! finite-difference path sees a slightly different function than the tape);
//! the named check must then fail while every other check passes, which is
//! the negative control proving the battery can actually catch a wrong
//! derivative.

use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::Domain;
use crate::losses::{
    kl_distance, loss_adv, loss_cml, loss_dscml, loss_seg, loss_std_avg, miou, Modality,
    PooledTriple, PredictionMap, Sidedness,
};
use crate::networks::{sparse_conv_at, Model, ModelConfig};
use crate::pooling::{
    base_grid, bilinear_sample, brute_force_pool, deformable_pool, pool_samples, reduce_patch,
    PoolMode,
};
use crate::rng::stream;
use crate::tensor::{grad_check, Tape, Tensor, FD_STEP, FD_TOL};

/// Instances per finite-difference suite.  Every operation and loss path is
/// checked at this many independently drawn miniature configurations.
pub const INSTANCES: usize = 100;

/// Master seed for the battery's named streams.  Arbitrary but fixed: the
/// battery must be reproducible run to run.
const VERIFY_SEED: u64 = 0x5e1f_c8ec;

/// Factor applied to the finite-difference path by the corruption hook.
/// Large against the gradient tolerance, so the targeted check fails
/// decisively rather than marginally.
const CORRUPT_SCALE: f64 = 1.0 + 5e-3;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub seconds: f64,
    /// Failure description; empty when the check passed.
    pub detail: String,
}

/// Outcomes of the whole battery, in execution order.
#[derive(Debug)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Names of the checks that failed, in execution order.
    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    /// Total time spent across all checks, in seconds.
    pub fn seconds_total(&self) -> f64 {
        self.checks.iter().map(|c| c.seconds).sum()
    }

    /// Plain-text report: one `ok`/`FAIL` line with timing per check, then a
    /// summary line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            if c.passed {
                out.push_str(&format!("ok   {:>7.3}s  {}\n", c.seconds, c.name));
            } else {
                out.push_str(&format!("FAIL {:>7.3}s  {}: {}\n", c.seconds, c.name, c.detail));
            }
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        out.push_str(&format!(
            "{}: {passed}/{} checks passed in {:.3}s\n",
            if self.all_passed() { "PASS" } else { "FAIL" },
            self.checks.len(),
            self.seconds_total(),
        ));
        out
    }
}

struct Check {
    name: &'static str,
    run: Box<dyn FnMut(bool) -> Result<(), String>>,
}

/// Names of every check in execution order — the valid corruption targets.
pub fn check_names() -> Vec<&'static str> {
    all_checks().iter().map(|c| c.name).collect()
}

/// Runs the whole battery.  `corrupt` optionally names one check to run with
/// a deliberately falsified comparison; a name matching no check leaves the
/// battery pristine (callers validate names against [`check_names`]).
pub fn run(corrupt: Option<&str>) -> VerifyReport {
    let mut checks = Vec::new();
    for mut check in all_checks() {
        let corrupted = corrupt == Some(check.name);
        let start = Instant::now();
        let result = (check.run)(corrupted);
        checks.push(CheckOutcome {
            name: check.name,
            passed: result.is_ok(),
            seconds: start.elapsed().as_secs_f64(),
            detail: result.err().unwrap_or_default(),
        });
    }
    VerifyReport { checks }
}

fn all_checks() -> Vec<Check> {
    let mut v = Vec::new();
    op_checks(&mut v);
    pooling_checks(&mut v);
    network_checks(&mut v);
    loss_checks(&mut v);
    oracle_checks(&mut v);
    closed_form_checks(&mut v);
    property_checks(&mut v);
    v
}

// ---------------------------------------------------------------- plumbing

type BuiltInstance = (Vec<usize>, Vec<f64>, Box<dyn Fn(&Tensor) -> Tensor>);

fn boxed(f: impl Fn(&Tensor) -> Tensor + 'static) -> Box<dyn Fn(&Tensor) -> Tensor> {
    Box::new(f)
}

/// A finite-difference suite: `count` instances, each a fresh shape, point of
/// evaluation and scalar-valued function.  Under corruption the difference
/// quotients see the function scaled by [`CORRUPT_SCALE`] while the tape
/// differentiates the original — a wrong derivative the comparison must flag.
fn grad(
    name: &'static str,
    count: usize,
    mut build: impl FnMut(usize, &mut ChaCha8Rng) -> BuiltInstance + 'static,
) -> Check {
    Check {
        name,
        run: Box::new(move |corrupted| {
            let mut rng = stream(VERIFY_SEED, name);
            for i in 0..count {
                let (shape, x0, f) = build(i, &mut rng);
                let wrapped = |x: &Tensor| {
                    let y = f(x);
                    if corrupted && !x.is_attached() {
                        y.scale(CORRUPT_SCALE)
                    } else {
                        y
                    }
                };
                let report = grad_check(&wrapped, &shape, &x0, FD_STEP, FD_TOL);
                if !report.pass() {
                    return Err(format!("instance {i}: {report}"));
                }
            }
            Ok(())
        }),
    }
}

fn plain(name: &'static str, f: impl Fn(bool) -> Result<(), String> + 'static) -> Check {
    Check { name, run: Box::new(f) }
}

fn vals(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random constant projection to a scalar, so every output coordinate gets a
/// distinct weight and routing mistakes surface as gradient errors.
fn project(rng: &mut ChaCha8Rng, shape: &[usize]) -> impl Fn(&Tensor) -> Tensor {
    let len = shape.iter().product();
    let w = Tensor::constant(shape, vals(rng, len, -1.0, 1.0));
    move |y: &Tensor| y.mul(&w).sum()
}

fn alignment(n: usize) -> Rc<[u32]> {
    (0..n as u32).collect::<Vec<u32>>().into()
}

/// Constant probability rows drawn through a softmax.
fn const_map(
    rng: &mut ChaCha8Rng,
    n: usize,
    c: usize,
    domain: Domain,
    modality: Modality,
) -> PredictionMap {
    let probs = Tensor::constant(&[n, c], vals(rng, n * c, -2.0, 2.0)).softmax(1);
    PredictionMap::new(probs, alignment(n), domain, modality)
}

// ------------------------------------------------------------- tensor ops

fn op_checks(v: &mut Vec<Check>) {
    v.push(grad("grad/add", INSTANCES, |i, rng| {
        let (m, c) = (rng.random_range(2..5usize), rng.random_range(2..6usize));
        let other = Tensor::constant(&[m, c], vals(rng, m * c, -2.0, 2.0));
        let proj = project(rng, &[m, c]);
        match i % 3 {
            0 => (vec![m, c], vals(rng, m * c, -2.0, 2.0), boxed(move |x| proj(&x.add(&other)))),
            1 => (vec![m, c], vals(rng, m * c, -2.0, 2.0), boxed(move |x| proj(&other.add(x)))),
            // Row broadcast, as used by every bias addition.
            _ => (vec![c], vals(rng, c, -2.0, 2.0), boxed(move |x| proj(&other.add(x)))),
        }
    }));
    v.push(grad("grad/sub", INSTANCES, |i, rng| {
        let (m, c) = (rng.random_range(2..5usize), rng.random_range(2..6usize));
        let other = Tensor::constant(&[m, c], vals(rng, m * c, -2.0, 2.0));
        let proj = project(rng, &[m, c]);
        if i % 2 == 0 {
            (vec![m, c], vals(rng, m * c, -2.0, 2.0), boxed(move |x| proj(&x.sub(&other))))
        } else {
            (vec![m, c], vals(rng, m * c, -2.0, 2.0), boxed(move |x| proj(&other.sub(x))))
        }
    }));
    v.push(grad("grad/mul", INSTANCES, |i, rng| {
        let (m, c) = (rng.random_range(2..5usize), rng.random_range(2..6usize));
        let other = Tensor::constant(&[m, c], vals(rng, m * c, -2.0, 2.0));
        let proj = project(rng, &[m, c]);
        match i % 3 {
            0 => (vec![m, c], vals(rng, m * c, -2.0, 2.0), boxed(move |x| proj(&x.mul(&other)))),
            1 => (vec![m, c], vals(rng, m * c, -2.0, 2.0), boxed(move |x| proj(&other.mul(x)))),
            _ => (vec![c], vals(rng, c, -2.0, 2.0), boxed(move |x| proj(&other.mul(x)))),
        }
    }));
    v.push(grad("grad/scale", INSTANCES, |_i, rng| {
        let n = rng.random_range(2..8usize);
        let k = {
            let k: f64 = rng.random_range(-2.0..2.0);
            if k.abs() < 0.1 { 0.7 } else { k }
        };
        let proj = project(rng, &[n]);
        (vec![n], vals(rng, n, -2.0, 2.0), boxed(move |x| proj(&x.scale(k))))
    }));
    v.push(grad("grad/add-scalar", INSTANCES, |_i, rng| {
        let n = rng.random_range(2..8usize);
        let k = rng.random_range(-2.0..2.0);
        let proj = project(rng, &[n]);
        (vec![n], vals(rng, n, -2.0, 2.0), boxed(move |x| proj(&x.add_scalar(k))))
    }));
    v.push(grad("grad/neg", INSTANCES, |_i, rng| {
        let n = rng.random_range(2..8usize);
        let proj = project(rng, &[n]);
        (vec![n], vals(rng, n, -2.0, 2.0), boxed(move |x| proj(&x.neg())))
    }));
    v.push(grad("grad/relu", INSTANCES, |_i, rng| {
        // Values bounded away from the kink at zero, where central
        // differences straddle the two branches.
        let n = rng.random_range(2..8usize);
        let x0 = (0..n)
            .map(|_| {
                let m = rng.random_range(1e-3..2.0);
                if rng.random_bool(0.5) { m } else { -m }
            })
            .collect();
        let proj = project(rng, &[n]);
        (vec![n], x0, boxed(move |x| proj(&x.relu())))
    }));
    v.push(grad("grad/exp", INSTANCES, |_i, rng| {
        let n = rng.random_range(2..8usize);
        let proj = project(rng, &[n]);
        (vec![n], vals(rng, n, -2.0, 2.0), boxed(move |x| proj(&x.exp())))
    }));
    v.push(grad("grad/log-clamped", INSTANCES, |_i, rng| {
        // Arguments well above the clamp floor, where the op is smooth.
        let n = rng.random_range(2..8usize);
        let proj = project(rng, &[n]);
        (vec![n], vals(rng, n, 1e-3, 3.0), boxed(move |x| proj(&x.log_clamped())))
    }));
    v.push(grad("grad/sigmoid", INSTANCES, |_i, rng| {
        let n = rng.random_range(2..8usize);
        let proj = project(rng, &[n]);
        (vec![n], vals(rng, n, -4.0, 4.0), boxed(move |x| proj(&x.sigmoid())))
    }));
    v.push(grad("grad/sum", INSTANCES, |i, rng| {
        let rank = 1 + i % 3;
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..4usize)).collect();
        let len = shape.iter().product();
        (shape, vals(rng, len, -2.0, 2.0), boxed(|x| x.sum()))
    }));
    v.push(grad("grad/mean", INSTANCES, |i, rng| {
        let rank = 1 + i % 3;
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..4usize)).collect();
        let len = shape.iter().product();
        (shape, vals(rng, len, -2.0, 2.0), boxed(|x| x.mean()))
    }));
    v.push(grad("grad/reshape", INSTANCES, |i, rng| {
        let (m, c) = (rng.random_range(2..5usize), rng.random_range(2..5usize));
        let target = match i % 3 {
            0 => vec![c, m],
            1 => vec![m * c],
            _ => vec![1, m, c],
        };
        let proj = project(rng, &target);
        (vec![m, c], vals(rng, m * c, -2.0, 2.0), boxed(move |x| proj(&x.reshape(&target))))
    }));
    v.push(grad("grad/gather-rows", INSTANCES, |_i, rng| {
        // Repeated indices exercise gradient accumulation onto one row.
        let (m, c) = (rng.random_range(2..5usize), rng.random_range(2..5usize));
        let r = rng.random_range(1..2 * m);
        let idx: Vec<usize> = (0..r).map(|_| rng.random_range(0..m)).collect();
        let proj = project(rng, &[r, c]);
        (vec![m, c], vals(rng, m * c, -2.0, 2.0), boxed(move |x| proj(&x.gather_rows(&idx))))
    }));
    v.push(grad("grad/concat-rows", INSTANCES, |i, rng| {
        let c = rng.random_range(2..5usize);
        let ms: Vec<usize> = (0..3).map(|_| rng.random_range(1..4usize)).collect();
        let slot = i % 3;
        let ca = Tensor::constant(
            &[ms[(slot + 1) % 3], c],
            vals(rng, ms[(slot + 1) % 3] * c, -2.0, 2.0),
        );
        let cb = Tensor::constant(
            &[ms[(slot + 2) % 3], c],
            vals(rng, ms[(slot + 2) % 3] * c, -2.0, 2.0),
        );
        let total: usize = ms.iter().sum();
        let proj = project(rng, &[total, c]);
        let mx = ms[slot];
        let f = boxed(move |x: &Tensor| {
            let parts: [&Tensor; 3] = match slot {
                0 => [x, &ca, &cb],
                1 => [&ca, x, &cb],
                _ => [&ca, &cb, x],
            };
            proj(&Tensor::concat_rows(&parts))
        });
        (vec![mx, c], vals(rng, mx * c, -2.0, 2.0), f)
    }));
    v.push(grad("grad/matmul", INSTANCES, |i, rng| {
        let (m, k, n) =
            (rng.random_range(2..5usize), rng.random_range(2..5usize), rng.random_range(2..5usize));
        let proj = project(rng, &[m, n]);
        if i % 2 == 0 {
            let b = Tensor::constant(&[k, n], vals(rng, k * n, -1.0, 1.0));
            (vec![m, k], vals(rng, m * k, -1.0, 1.0), boxed(move |x| proj(&x.matmul(&b))))
        } else {
            let a = Tensor::constant(&[m, k], vals(rng, m * k, -1.0, 1.0));
            (vec![k, n], vals(rng, k * n, -1.0, 1.0), boxed(move |x| proj(&a.matmul(x))))
        }
    }));
    v.push(grad("grad/conv2d", INSTANCES, |i, rng| {
        let (h, w) = (rng.random_range(3..6usize), rng.random_range(3..6usize));
        let (cin, cout) = (rng.random_range(1..3usize), rng.random_range(1..3usize));
        let kh = [1usize, 3][rng.random_range(0..2usize)];
        let kw = [1usize, 3][rng.random_range(0..2usize)];
        let img = vals(rng, h * w * cin, -1.0, 1.0);
        let ker = vals(rng, kh * kw * cin * cout, -1.0, 1.0);
        let bias = vals(rng, cout, -1.0, 1.0);
        let proj = project(rng, &[h, w, cout]);
        match i % 3 {
            0 => {
                let kt = Tensor::constant(&[kh, kw, cin, cout], ker);
                let bt = Tensor::constant(&[cout], bias);
                (vec![h, w, cin], img, boxed(move |x| proj(&x.conv2d(&kt, Some(&bt)))))
            }
            1 => {
                let it = Tensor::constant(&[h, w, cin], img);
                let bt = Tensor::constant(&[cout], bias);
                (
                    vec![kh, kw, cin, cout],
                    ker,
                    boxed(move |x| proj(&it.conv2d(x, Some(&bt)))),
                )
            }
            _ => {
                let it = Tensor::constant(&[h, w, cin], img);
                let kt = Tensor::constant(&[kh, kw, cin, cout], ker);
                (vec![cout], bias, boxed(move |x| proj(&it.conv2d(&kt, Some(x)))))
            }
        }
    }));
    v.push(grad("grad/softmax", INSTANCES, |i, rng| {
        let (m, c) = (rng.random_range(2..5usize), rng.random_range(2..6usize));
        let axis = i % 2;
        let proj = project(rng, &[m, c]);
        (vec![m, c], vals(rng, m * c, -3.0, 3.0), boxed(move |x| proj(&x.softmax(axis))))
    }));
}

// ---------------------------------------------------------------- pooling

fn pooling_checks(v: &mut Vec<Check>) {
    v.push(grad("grad/pool-map", INSTANCES, |i, rng| {
        // The sampled values are linear in the map (even where positions
        // clamp to the border), so any position is a safe evaluation point.
        let (h, w) = (rng.random_range(3..7usize), rng.random_range(3..7usize));
        let d = rng.random_range(1..3usize);
        let k = [1usize, 3][i % 2];
        let kk = k * k;
        let n = rng.random_range(1..4usize);
        let centers: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                (rng.random_range(-1.0..w as f64), rng.random_range(-1.0..h as f64))
            })
            .collect();
        let offsets = if i % 3 == 0 {
            None
        } else {
            Some(Tensor::constant(&[n, kk, 2], vals(rng, n * kk * 2, -1.5, 1.5)))
        };
        if i % 3 == 2 {
            // Through the average reduction, which is linear as well.
            let proj = project(rng, &[n, d]);
            let f = boxed(move |x: &Tensor| {
                proj(&deformable_pool(x, &centers, offsets.as_ref(), k, PoolMode::Avg))
            });
            (vec![h, w, d], vals(rng, h * w * d, -2.0, 2.0), f)
        } else {
            let proj = project(rng, &[n, kk, d]);
            let f = boxed(move |x: &Tensor| {
                proj(&pool_samples(x, &centers, offsets.as_ref(), k))
            });
            (vec![h, w, d], vals(rng, h * w * d, -2.0, 2.0), f)
        }
    }));
    v.push(grad("grad/pool-offsets", INSTANCES, |i, rng| {
        // Positions are kept strictly inside the map and away from the
        // bilinear lattice: centres sit on half-integers, offsets stay within
        // (-0.3, 0.3), so every sample lands with a fractional part in
        // [0.2, 0.8], far from any kink at the finite-difference step.
        let (h, w) = (rng.random_range(7..10usize), rng.random_range(7..10usize));
        let d = rng.random_range(1..3usize);
        let k = [1usize, 3][i % 2];
        let kk = k * k;
        let half = k / 2;
        let n = rng.random_range(1..4usize);
        let centers: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(half + 2..w - half - 2) as f64 + 0.5,
                    rng.random_range(half + 2..h - half - 2) as f64 + 0.5,
                )
            })
            .collect();
        let map = Tensor::constant(&[h, w, d], vals(rng, h * w * d, -2.0, 2.0));
        let proj = project(rng, &[n, kk, d]);
        let f = boxed(move |x: &Tensor| proj(&pool_samples(&map, &centers, Some(x), k)));
        (vec![n, kk, 2], vals(rng, n * kk * 2, -0.3, 0.3), f)
    }));
    v.push(grad("grad/pool-reduce", INSTANCES, |i, rng| {
        // For max/min the patch values of each (point, channel) column are
        // spread onto well-separated levels so the selection cannot flip
        // within the finite-difference step.
        let n = rng.random_range(1..4usize);
        let k = [1usize, 3][i % 2];
        let kk = k * k;
        let d = rng.random_range(1..3usize);
        let mode = [PoolMode::Max, PoolMode::Min, PoolMode::Avg][i % 3];
        let mut data = vec![0.0; n * kk * d];
        for pt in 0..n {
            for ch in 0..d {
                let mut levels: Vec<usize> = (0..kk).collect();
                levels.shuffle(rng);
                for (j, &lv) in levels.iter().enumerate() {
                    data[(pt * kk + j) * d + ch] = lv as f64 * 0.4 + rng.random_range(-0.05..0.05);
                }
            }
        }
        let proj = project(rng, &[n, d]);
        (vec![n, kk, d], data, boxed(move |x| proj(&reduce_patch(x, mode))))
    }));
    v.push(grad("grad/bilinear-coords", INSTANCES, |i, rng| {
        // Mostly interior positions with safe fractional parts; every fourth
        // instance reads far outside the border, where the clamp makes both
        // the analytic and the numeric coordinate gradient zero.
        let (h, w) = (rng.random_range(4..8usize), rng.random_range(4..8usize));
        let d = rng.random_range(1..3usize);
        let map = Tensor::constant(&[h, w, d], vals(rng, h * w * d, -2.0, 2.0));
        let coord = |rng: &mut ChaCha8Rng, lim: usize, outside: bool| -> f64 {
            if outside {
                if rng.random_bool(0.5) {
                    rng.random_range(-3.0..-1.0)
                } else {
                    (lim - 1) as f64 + rng.random_range(1.0..3.0)
                }
            } else {
                rng.random_range(0..lim - 1) as f64 + rng.random_range(0.15..0.85)
            }
        };
        let outside = i % 4 == 3;
        let x0 = vec![coord(rng, w, outside), coord(rng, h, outside)];
        let proj = project(rng, &[d]);
        let f = boxed(move |x: &Tensor| {
            let wide = x.reshape(&[2, 1]);
            let u = wide.gather_rows(&[0]);
            let vv = wide.gather_rows(&[1]);
            proj(&bilinear_sample(&map, &u, &vv))
        });
        (vec![2], x0, f)
    }));
}

// --------------------------------------------------------------- networks

fn network_checks(v: &mut Vec<Check>) {
    v.push(grad("grad/sparse-conv", INSTANCES, |i, rng| {
        let (h, w) = (rng.random_range(3..6usize), rng.random_range(3..6usize));
        let (cin, cout) = (rng.random_range(1..3usize), rng.random_range(1..3usize));
        let kh = [1usize, 3][rng.random_range(0..2usize)];
        let kw = [1usize, 3][rng.random_range(0..2usize)];
        let m = rng.random_range(1..5usize);
        let pixels: Vec<(usize, usize)> =
            (0..m).map(|_| (rng.random_range(0..w), rng.random_range(0..h))).collect();
        let feat = vals(rng, h * w * cin, -1.0, 1.0);
        let ker = vals(rng, kh * kw * cin * cout, -1.0, 1.0);
        let proj = project(rng, &[m, cout]);
        if i % 2 == 0 {
            let kt = Tensor::constant(&[kh, kw, cin, cout], ker);
            (
                vec![h, w, cin],
                feat,
                boxed(move |x| proj(&sparse_conv_at(x, &kt, &pixels))),
            )
        } else {
            let ft = Tensor::constant(&[h, w, cin], feat);
            (
                vec![kh, kw, cin, cout],
                ker,
                boxed(move |x| proj(&sparse_conv_at(&ft, x, &pixels))),
            )
        }
    }));
    v.push(grad("grad/full-chain", 24, |i, rng| {
        build_full_chain_instance(i, rng)
    }));
}

/// Encoder -> offset head -> deformable pooling -> classifier -> mimicry +
/// segmentation, differentiated end to end through the image (even
/// instances) or the offset-head kernel (odd instances).
///
/// The builder redraws any instance whose unperturbed forward pass runs too
/// close to a kink — a pre-activation near the ReLU threshold, patch samples
/// nearly tying in max/min, or a sample position near the bilinear lattice
/// or the border — since central differences straddle such points.  The
/// redraw consumes the same deterministic stream, so the battery stays
/// reproducible.
fn build_full_chain_instance(i: usize, rng: &mut ChaCha8Rng) -> BuiltInstance {
    let (h, w) = (7usize, 8usize);
    let (cw, d, c) = (3usize, 3usize, 3usize);
    let k = 3usize;
    let kk = k * k;
    let n = 2usize;
    let grid = base_grid(k);
    for _attempt in 0..500 {
        let w1 = Tensor::constant(&[3, 3, 3, cw], vals(rng, 27 * cw, -0.4, 0.4));
        let b1 = Tensor::constant(&[cw], vals(rng, cw, -0.2, 0.2));
        let w2 = Tensor::constant(&[3, 3, cw, d], vals(rng, 9 * cw * d, -0.4, 0.4));
        let b2 = Tensor::constant(&[d], vals(rng, d, -0.2, 0.2));
        let woff = Tensor::constant(&[3, 3, d, kk * 2], vals(rng, 9 * d * kk * 2, -0.05, 0.05));
        let boff = Tensor::constant(&[kk * 2], vals(rng, kk * 2, -0.1, 0.1));
        let wh = Tensor::constant(&[d, c], vals(rng, d * c, -0.8, 0.8));
        let bh = Tensor::constant(&[c], vals(rng, c, -0.3, 0.3));
        let image = vals(rng, h * w * 3, -1.0, 1.0);

        let mut centers_px: Vec<(usize, usize)> = Vec::new();
        while centers_px.len() < n {
            let p = (rng.random_range(2..w - 2), rng.random_range(2..h - 2));
            if !centers_px.contains(&p) {
                centers_px.push(p);
            }
        }
        let centers_f: Vec<(f64, f64)> =
            centers_px.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        let labels: Vec<u16> = (0..n).map(|_| rng.random_range(0..c) as u16).collect();
        let points = const_map(rng, n, c, Domain::Source, Modality::Points);

        // One forward pass, returning the kink-relevant intermediates along
        // with the loss so the margins below inspect exactly what the
        // gradient check will differentiate.
        let chain = {
            let (centers_px, centers_f) = (centers_px.clone(), centers_f.clone());
            let (boff, wh, bh) = (boff.clone(), wh.clone(), bh.clone());
            let (w1, b1, w2, b2) = (w1.clone(), b1.clone(), w2.clone(), b2.clone());
            let (points, labels) = (points.clone(), labels.clone());
            let al = alignment(n);
            Rc::new(move |img: &Tensor, wo: &Tensor| -> (Tensor, Tensor, Tensor, Tensor) {
                let pre = img.conv2d(&w1, Some(&b1));
                let feat = pre.relu().conv2d(&w2, Some(&b2));
                let offs = sparse_conv_at(&feat, wo, &centers_px).add(&boff).reshape(&[n, kk, 2]);
                let samples = pool_samples(&feat, &centers_f, Some(&offs), k);
                let classify = |rows: &Tensor| rows.matmul(&wh).add(&bh).softmax(1);
                let mk = |t: &Tensor| {
                    PredictionMap::new(classify(t), Rc::clone(&al), Domain::Source, Modality::Image)
                };
                let triple = PooledTriple::new(
                    mk(&reduce_patch(&samples, PoolMode::Max)),
                    mk(&reduce_patch(&samples, PoolMode::Min)),
                    mk(&reduce_patch(&samples, PoolMode::Avg)),
                );
                let loss = loss_dscml(&triple, &points, Sidedness::Mutual)
                    .add(&loss_seg(&triple, &points, &labels));
                (pre, offs, samples, loss)
            })
        };

        let img0 = Tensor::constant(&[h, w, 3], image.clone());
        let (pre, offs, samples, _) = chain(&img0, &woff);
        let relu_ok = pre.data().iter().all(|p| p.abs() > 3e-4);
        let od = offs.data();
        let pos_ok = (0..n).all(|pt| {
            (0..kk).all(|j| {
                let u = centers_f[pt].0 + grid[j].0 + od[(pt * kk + j) * 2];
                let vv = centers_f[pt].1 + grid[j].1 + od[(pt * kk + j) * 2 + 1];
                let inside = |p: f64, lim: usize| p > 0.02 && p < (lim - 1) as f64 - 0.02;
                let off_lattice = |p: f64| (p - p.round()).abs() > 1e-3;
                inside(u, w) && inside(vv, h) && off_lattice(u) && off_lattice(vv)
            })
        });
        let sd = samples.data();
        let gap_ok = (0..n).all(|pt| {
            (0..d).all(|ch| {
                let col: Vec<f64> = (0..kk).map(|j| sd[(pt * kk + j) * d + ch]).collect();
                col.iter()
                    .enumerate()
                    .all(|(a, &va)| col.iter().skip(a + 1).all(|&vb| (va - vb).abs() > 5e-4))
            })
        });
        if !(relu_ok && pos_ok && gap_ok) {
            continue;
        }

        if i % 2 == 0 {
            let f = {
                let chain = Rc::clone(&chain);
                boxed(move |x: &Tensor| chain(x, &woff).3)
            };
            return (vec![h, w, 3], image, f);
        } else {
            let woff_data = woff.data().to_vec();
            let f = {
                let chain = Rc::clone(&chain);
                boxed(move |x: &Tensor| chain(&img0, x).3)
            };
            return (vec![3, 3, d, kk * 2], woff_data, f);
        }
    }
    panic!("no kink-free full-chain instance found (seed drift?)");
}

// ----------------------------------------------------------------- losses

fn loss_checks(v: &mut Vec<Check>) {
    v.push(grad("grad/loss-kl", INSTANCES, |i, rng| {
        let c = rng.random_range(2..6usize);
        let other = Tensor::constant(&[1, c], vals(rng, c, -2.0, 2.0)).softmax(1);
        let f = if i % 2 == 0 {
            boxed(move |x: &Tensor| kl_distance(&x.reshape(&[1, x.len()]).softmax(1), &other))
        } else {
            boxed(move |x: &Tensor| kl_distance(&other, &x.reshape(&[1, x.len()]).softmax(1)))
        };
        (vec![c], vals(rng, c, -2.0, 2.0), f)
    }));

    // Single-position mimicry under each sidedness.  The one-sided modes are
    // differentiated through the live branch only: the detached branch's
    // analytic gradient is zero by design while the loss value still depends
    // on it, so a difference quotient there would not measure a derivative
    // of the training objective (the detachment itself is pinned by the
    // sidedness property check).
    v.push(grad("grad/loss-cml-mutual", INSTANCES, |i, rng| {
        cml_instance(i, rng, Sidedness::Mutual, i % 2 == 0)
    }));
    v.push(grad("grad/loss-cml-image-only", INSTANCES, |i, rng| {
        cml_instance(i, rng, Sidedness::ImageOnly, true)
    }));
    v.push(grad("grad/loss-cml-points-only", INSTANCES, |i, rng| {
        cml_instance(i, rng, Sidedness::PointsOnly, false)
    }));

    // Patch mimicry (max and min pooled rows against the point rows).
    v.push(grad("grad/loss-dscml-mutual", INSTANCES, |i, rng| {
        dscml_instance(i, rng, Sidedness::Mutual, i % 2 == 0, false)
    }));
    v.push(grad("grad/loss-dscml-image-only", INSTANCES, |i, rng| {
        dscml_instance(i, rng, Sidedness::ImageOnly, true, false)
    }));
    v.push(grad("grad/loss-dscml-points-only", INSTANCES, |i, rng| {
        dscml_instance(i, rng, Sidedness::PointsOnly, false, false)
    }));
    // Average-pool variant of the patch mimicry.
    v.push(grad("grad/loss-std-avg", INSTANCES, |i, rng| {
        dscml_instance(i, rng, Sidedness::Mutual, i % 2 == 0, true)
    }));

    v.push(grad("grad/loss-seg", INSTANCES, |i, rng| {
        let (n, c) = (rng.random_range(2..5usize), rng.random_range(2..6usize));
        let labels: Vec<u16> = (0..n).map(|_| rng.random_range(0..c) as u16).collect();
        let al = alignment(n);
        let cmax = const_map(rng, n, c, Domain::Source, Modality::Image);
        let cmin = const_map(rng, n, c, Domain::Source, Modality::Image);
        let cavg = const_map(rng, n, c, Domain::Source, Modality::Image);
        let cpts = const_map(rng, n, c, Domain::Source, Modality::Points);
        let f = if i % 2 == 0 {
            boxed(move |x: &Tensor| {
                let avg = PredictionMap::new(
                    x.softmax(1),
                    Rc::clone(&al),
                    Domain::Source,
                    Modality::Image,
                );
                let triple = PooledTriple::new(cmax.clone(), cmin.clone(), avg);
                loss_seg(&triple, &cpts, &labels)
            })
        } else {
            boxed(move |x: &Tensor| {
                let pts = PredictionMap::new(
                    x.softmax(1),
                    Rc::clone(&al),
                    Domain::Source,
                    Modality::Points,
                );
                let triple = PooledTriple::new(cmax.clone(), cmin.clone(), cavg.clone());
                loss_seg(&triple, &pts, &labels)
            })
        };
        (vec![n, c], vals(rng, n * c, -2.0, 2.0), f)
    }));

    v.push(grad("grad/loss-adv-d", INSTANCES, |i, rng| {
        let m = rng.random_range(1..5usize);
        let mo = rng.random_range(1..5usize);
        let other = Tensor::constant(&[mo, 1], vals(rng, mo, 0.1, 0.9));
        let f = if i % 2 == 0 {
            boxed(move |x: &Tensor| loss_adv(&x.sigmoid(), &other, false).0)
        } else {
            boxed(move |x: &Tensor| loss_adv(&other, &x.sigmoid(), false).0)
        };
        (vec![m, 1], vals(rng, m, -2.5, 2.5), f)
    }));
    v.push(grad("grad/loss-adv-g", INSTANCES, |i, rng| {
        let m = rng.random_range(1..5usize);
        let mo = rng.random_range(1..5usize);
        let src = Tensor::constant(&[mo, 1], vals(rng, mo, 0.1, 0.9));
        let saturating = i % 2 == 1;
        let f = boxed(move |x: &Tensor| loss_adv(&src, &x.sigmoid(), saturating).1);
        (vec![m, 1], vals(rng, m, -2.5, 2.5), f)
    }));
}

/// One `loss_cml` gradient instance; `x` drives the image rows when
/// `x_is_image`, otherwise the point rows.
fn cml_instance(
    i: usize,
    rng: &mut ChaCha8Rng,
    side: Sidedness,
    x_is_image: bool,
) -> BuiltInstance {
    let (n, c) = (rng.random_range(2..5usize), rng.random_range(2..6usize));
    let domain = if i % 4 < 2 { Domain::Source } else { Domain::Target };
    let al = alignment(n);
    let (cimg, cpts) = (
        const_map(rng, n, c, domain, Modality::Image),
        const_map(rng, n, c, domain, Modality::Points),
    );
    let f = if x_is_image {
        boxed(move |x: &Tensor| {
            let img =
                PredictionMap::new(x.softmax(1), Rc::clone(&al), domain, Modality::Image);
            loss_cml(&img, &cpts, side)
        })
    } else {
        boxed(move |x: &Tensor| {
            let pts =
                PredictionMap::new(x.softmax(1), Rc::clone(&al), domain, Modality::Points);
            loss_cml(&cimg, &pts, side)
        })
    };
    (vec![n, c], vals(rng, n * c, -2.0, 2.0), f)
}

/// One patch-mimicry gradient instance (`loss_dscml`, or `loss_std_avg` when
/// `avg_form`).  When `x` drives the image side, the three pooled maps are
/// derived from it through three fixed mixing matrices so each map carries a
/// distinct gradient path.
fn dscml_instance(
    i: usize,
    rng: &mut ChaCha8Rng,
    side: Sidedness,
    x_is_image: bool,
    avg_form: bool,
) -> BuiltInstance {
    let (n, c) = (rng.random_range(2..5usize), rng.random_range(2..6usize));
    let domain = if i % 4 < 2 { Domain::Source } else { Domain::Target };
    let al = alignment(n);
    let cpts = const_map(rng, n, c, domain, Modality::Points);
    let f = if x_is_image {
        let mix: Vec<Tensor> =
            (0..3).map(|_| Tensor::constant(&[c, c], vals(rng, c * c, -1.0, 1.0))).collect();
        boxed(move |x: &Tensor| {
            let mk = |m: &Tensor| {
                PredictionMap::new(
                    x.matmul(m).softmax(1),
                    Rc::clone(&al),
                    domain,
                    Modality::Image,
                )
            };
            let triple = PooledTriple::new(mk(&mix[0]), mk(&mix[1]), mk(&mix[2]));
            if avg_form {
                loss_std_avg(&triple, &cpts, side)
            } else {
                loss_dscml(&triple, &cpts, side)
            }
        })
    } else {
        let cmax = const_map(rng, n, c, domain, Modality::Image);
        let cmin = const_map(rng, n, c, domain, Modality::Image);
        let cavg = const_map(rng, n, c, domain, Modality::Image);
        boxed(move |x: &Tensor| {
            let pts =
                PredictionMap::new(x.softmax(1), Rc::clone(&al), domain, Modality::Points);
            let triple = PooledTriple::new(cmax.clone(), cmin.clone(), cavg.clone());
            if avg_form {
                loss_std_avg(&triple, &pts, side)
            } else {
                loss_dscml(&triple, &pts, side)
            }
        })
    };
    (vec![n, c], vals(rng, n * c, -2.0, 2.0), f)
}

// ---------------------------------------------------------------- oracles

fn oracle_checks(v: &mut Vec<Check>) {
    // Fast route against the reference route over random miniature cases,
    // including centres outside the map and large offsets.
    v.push(plain("oracle/pooling", |corrupted| {
        let mut rng = stream(VERIFY_SEED, "oracle/pooling");
        let modes = [PoolMode::Max, PoolMode::Min, PoolMode::Avg];
        for case in 0..1000usize {
            let (h, w) = (rng.random_range(2..9usize), rng.random_range(2..9usize));
            let d = rng.random_range(1..4usize);
            let n = rng.random_range(1..6usize);
            let k = [1usize, 3, 5][case % 3];
            let kk = k * k;
            let mode = modes[(case / 3) % 3];
            let map_data = vals(&mut rng, h * w * d, -3.0, 3.0);
            let centers: Vec<(f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.random_range(-1.5..w as f64 + 0.5),
                        rng.random_range(-1.5..h as f64 + 0.5),
                    )
                })
                .collect();
            let off_data =
                if case % 2 == 0 { Some(vals(&mut rng, n * kk * 2, -2.0, 2.0)) } else { None };
            let map = Tensor::constant(&[h, w, d], map_data.clone());
            let off_t = off_data
                .as_ref()
                .map(|o| Tensor::constant(&[n, kk, 2], o.clone()));
            let fast = deformable_pool(&map, &centers, off_t.as_ref(), k, mode);
            let mut fd = fast.data().to_vec();
            if corrupted && case == 0 {
                fd[0] += 1e-9;
            }
            let slow =
                brute_force_pool(&map_data, h, w, d, &centers, off_data.as_deref(), k, mode);
            let diff = fd
                .iter()
                .zip(&slow)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if diff > 1e-12 {
                return Err(format!("case {case}: routes differ by {diff:.3e} (k={k})"));
            }
        }
        Ok(())
    }));

    // A zero offset tensor must reproduce the fixed-grid result bit for bit:
    // the learned-offset path at zero displacement IS the fixed-grid path.
    v.push(plain("oracle/fixed-grid-coincidence", |corrupted| {
        let mut rng = stream(VERIFY_SEED, "oracle/fixed-grid-coincidence");
        let modes = [PoolMode::Max, PoolMode::Min, PoolMode::Avg];
        for case in 0..100usize {
            let (h, w) = (rng.random_range(2..8usize), rng.random_range(2..8usize));
            let d = rng.random_range(1..4usize);
            let n = rng.random_range(1..5usize);
            let k = [1usize, 3, 5][case % 3];
            let mode = modes[(case / 3) % 3];
            let map = Tensor::constant(&[h, w, d], vals(&mut rng, h * w * d, -3.0, 3.0));
            let centers: Vec<(f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.random_range(-1.0..w as f64),
                        rng.random_range(-1.0..h as f64),
                    )
                })
                .collect();
            let zero = Tensor::zeros(&[n, k * k, 2]);
            let with = deformable_pool(&map, &centers, Some(&zero), k, mode);
            let without = deformable_pool(&map, &centers, None, k, mode);
            let mut wd = with.data().to_vec();
            if corrupted && case == 0 {
                wd[0] = f64::from_bits(wd[0].to_bits() ^ 1);
            }
            for (j, (a, b)) in wd.iter().zip(without.data()).enumerate() {
                if a.to_bits() != b.to_bits() {
                    return Err(format!(
                        "case {case}: element {j} differs bitwise ({a:e} vs {b:e})"
                    ));
                }
            }
        }
        Ok(())
    }));
}

// ----------------------------------------------------------- closed forms

fn closed_form_checks(v: &mut Vec<Check>) {
    v.push(plain("closed-form/self-distance-zero", |corrupted| {
        let mut rng = stream(VERIFY_SEED, "closed-form/self-distance-zero");
        for case in 0..100usize {
            let c = rng.random_range(2..8usize);
            let p = Tensor::constant(&[1, c], vals(&mut rng, c, -2.0, 2.0)).softmax(1);
            let mut v = kl_distance(&p, &p).item();
            if corrupted && case == 0 {
                v += 1e-9;
            }
            if v != 0.0 {
                return Err(format!("case {case}: K(p, p) = {v:e}, want exactly 0"));
            }
        }
        Ok(())
    }));
    v.push(plain("closed-form/ln2", |corrupted| {
        let p = Tensor::constant(&[2], vec![1.0, 0.0]);
        let q = Tensor::constant(&[2], vec![0.5, 0.5]);
        let v = kl_distance(&p, &q).item();
        let target = std::f64::consts::LN_2 + if corrupted { 1e-8 } else { 0.0 };
        if (v - target).abs() > 1e-9 {
            return Err(format!("K([1,0],[1/2,1/2]) = {v:.17}, want ln 2 = {target:.17}"));
        }
        Ok(())
    }));
    v.push(plain("closed-form/uniform-seg", |corrupted| {
        let mut rng = stream(VERIFY_SEED, "closed-form/uniform-seg");
        for c in 2..=6usize {
            let n = 5;
            let uniform = || Tensor::constant(&[n, c], vec![1.0 / c as f64; n * c]);
            let mk = |modality| {
                PredictionMap::new(uniform(), alignment(n), Domain::Source, modality)
            };
            let triple =
                PooledTriple::new(mk(Modality::Image), mk(Modality::Image), mk(Modality::Image));
            let points = mk(Modality::Points);
            let labels: Vec<u16> = (0..n).map(|_| rng.random_range(0..c) as u16).collect();
            let v = loss_seg(&triple, &points, &labels).item();
            let target = 2.0 * (c as f64).ln() + if corrupted { 1e-8 } else { 0.0 };
            if (v - target).abs() > 1e-9 {
                return Err(format!(
                    "uniform loss at {c} classes = {v:.17}, want 2 ln {c} = {target:.17}"
                ));
            }
        }
        Ok(())
    }));
    v.push(plain("closed-form/fresh-discriminator", |corrupted| {
        let mut rng = stream(VERIFY_SEED, "closed-form/fresh-discriminator");
        let cfg = ModelConfig {
            classes: 4,
            feature_dim: 4,
            conv_width: 4,
            mlp_width: 4,
            disc_width: 8,
            patch_k: 3,
            offset_head: false,
            pairings: vec!["s2d_t3d".into(), "s3d_t2d".into()],
        };
        let model = Model::new(cfg, 7).map_err(|e| e.to_string())?;
        let bound = model.store.bind_with(&Tape::new(), |_| false);
        for pairing in ["s2d_t3d", "s3d_t2d"] {
            let src = Tensor::constant(&[5, 4], vals(&mut rng, 20, -2.0, 2.0)).softmax(1);
            let trg = Tensor::constant(&[5, 4], vals(&mut rng, 20, -2.0, 2.0)).softmax(1);
            let (s_src, _) = model.discriminate(&bound, pairing, &src);
            let (s_trg, _) = model.discriminate(&bound, pairing, &trg);
            if !s_src.data().iter().chain(s_trg.data()).all(|&s| s == 0.5) {
                return Err(format!("{pairing}: fresh scores are not exactly 0.5"));
            }
            let d = loss_adv(&s_src, &s_trg, false).0.item();
            let target = 2.0 * std::f64::consts::LN_2 + if corrupted { 1e-8 } else { 0.0 };
            if (d - target).abs() > 1e-9 {
                return Err(format!(
                    "{pairing}: fresh discriminator loss {d:.17}, want 2 ln 2 = {target:.17}"
                ));
            }
        }
        Ok(())
    }));
    v.push(plain("closed-form/miou", |corrupted| {
        // Hand case: class 0 has tp=2 fp=1 fn=1, class 1 has tp=2 fp=1 fn=0,
        // class 2 has tp=0 fp=0 fn=1.
        let truth = [0u16, 0, 0, 1, 1, 2];
        let pred = [0u16, 1, 0, 1, 1, 0];
        let rep = miou(&pred, &truth, 3);
        let want0 = 0.5 + if corrupted { 1e-9 } else { 0.0 };
        let want = [Some(want0), Some(2.0 / 3.0), Some(0.0)];
        if rep.per_class != want {
            return Err(format!("per-class IoU {:?}, want {want:?}", rep.per_class));
        }
        let mean = (0.5 + 2.0 / 3.0 + 0.0) / 3.0;
        if (rep.miou - mean).abs() > 1e-15 {
            return Err(format!("mIoU {} differs from {mean}", rep.miou));
        }
        // A class absent from both prediction and truth is skipped, not
        // counted as zero.
        let rep = miou(&[1u16, 0, 0, 1], &[0u16, 1, 0, 1], 3);
        if rep.per_class != [Some(1.0 / 3.0), Some(1.0 / 3.0), None] {
            return Err(format!("absent-class handling wrong: {:?}", rep.per_class));
        }
        if (rep.miou - 1.0 / 3.0).abs() > 1e-15 {
            return Err(format!("absent-class mean wrong: {}", rep.miou));
        }
        Ok(())
    }));
}

// ------------------------------------------------------------- properties

fn property_checks(v: &mut Vec<Check>) {
    v.push(plain("property/kl-nonnegative", |corrupted| {
        let mut rng = stream(VERIFY_SEED, "property/kl-nonnegative");
        for case in 0..300usize {
            let c = rng.random_range(2..8usize);
            let p = Tensor::constant(&[1, c], vals(&mut rng, c, -2.0, 2.0)).softmax(1);
            let same = case % 5 == 0;
            let q = if same {
                // Identical distribution: the divergence must be exactly 0.
                // The corruption nudges q just inside the simplex tolerance,
                // which drives the divergence negative.
                let scale = if corrupted { 1.0 + 5e-7 } else { 1.0 };
                Tensor::constant(&[1, c], p.data().iter().map(|x| x * scale).collect())
            } else {
                Tensor::constant(&[1, c], vals(&mut rng, c, -2.0, 2.0)).softmax(1)
            };
            let v = kl_distance(&p, &q).item();
            if v < -1e-12 {
                return Err(format!("case {case}: K(p, q) = {v:e} is negative"));
            }
            if same && !corrupted && v != 0.0 {
                return Err(format!("case {case}: K(p, p) = {v:e}, want exactly 0"));
            }
            if same && corrupted && v >= 0.0 {
                return Err(format!("case {case}: corrupted K = {v:e} failed to go negative"));
            }
        }
        Ok(())
    }));
    v.push(plain("property/miou-agreement", |corrupted| {
        let mut rng = stream(VERIFY_SEED, "property/miou-agreement");
        for case in 0..50usize {
            let classes = rng.random_range(2..7usize);
            let len = rng.random_range(10..200usize);
            let pred: Vec<u16> = (0..len).map(|_| rng.random_range(0..classes) as u16).collect();
            let truth: Vec<u16> = (0..len).map(|_| rng.random_range(0..classes) as u16).collect();
            let rep = miou(&pred, &truth, classes);
            // Independent recount: per class, scan the label pairs directly.
            for c in 0..classes {
                let cc = c as u16;
                let mut tp = pred.iter().zip(&truth).filter(|&(&p, &t)| p == cc && t == cc).count()
                    as u64;
                let fp =
                    pred.iter().zip(&truth).filter(|&(&p, &t)| p == cc && t != cc).count() as u64;
                let fnn =
                    pred.iter().zip(&truth).filter(|&(&p, &t)| p != cc && t == cc).count() as u64;
                if corrupted && case == 0 && c == 0 {
                    tp += 1;
                }
                let want = if tp + fp + fnn == 0 {
                    None
                } else {
                    Some(tp as f64 / (tp + fp + fnn) as f64)
                };
                if rep.per_class[c] != want {
                    return Err(format!(
                        "case {case} class {c}: IoU {:?} vs recount {want:?}",
                        rep.per_class[c]
                    ));
                }
            }
            let present: Vec<f64> = rep.per_class.iter().flatten().copied().collect();
            let mean = present.iter().sum::<f64>() / present.len() as f64;
            if (rep.miou - mean).abs() > 1e-12 {
                return Err(format!("case {case}: mIoU {} vs recount {mean}", rep.miou));
            }
        }
        Ok(())
    }));
    v.push(plain("property/sidedness-detach", |corrupted| {
        let mut rng = stream(VERIFY_SEED, "property/sidedness-detach");
        for case in 0..12usize {
            let (n, c) = (rng.random_range(2..4usize), rng.random_range(3..5usize));
            let tape = Tape::new();
            let img_logits = tape.leaf(&[n, c], vals(&mut rng, n * c, -2.0, 2.0));
            let pts_logits = tape.leaf(&[n, c], vals(&mut rng, n * c, -2.0, 2.0));
            let al = alignment(n);
            let img = PredictionMap::new(
                img_logits.softmax(1),
                Rc::clone(&al),
                Domain::Target,
                Modality::Image,
            );
            let pts = PredictionMap::new(
                pts_logits.softmax(1),
                Rc::clone(&al),
                Domain::Target,
                Modality::Points,
            );
            let image_side = case % 2 == 0;
            let side = if corrupted {
                Sidedness::Mutual
            } else if image_side {
                Sidedness::ImageOnly
            } else {
                Sidedness::PointsOnly
            };
            let loss = if case % 4 < 2 {
                loss_cml(&img, &pts, side)
            } else {
                let triple = PooledTriple::new(img.clone(), img.clone(), img.clone());
                loss_dscml(&triple, &pts, side)
            };
            let grads = tape.backward(&loss).map_err(|e| e.to_string())?;
            let (live, dead) =
                if image_side { (&img_logits, &pts_logits) } else { (&pts_logits, &img_logits) };
            let nonzero =
                |g: Option<&[f64]>| g.map_or(false, |g| g.iter().any(|&x| x != 0.0));
            if nonzero(grads.wrt(dead)) {
                return Err(format!("case {case}: gradient leaked into the detached branch"));
            }
            if !nonzero(grads.wrt(live)) {
                return Err(format!("case {case}: no gradient reached the trained branch"));
            }
        }
        Ok(())
    }));
}
