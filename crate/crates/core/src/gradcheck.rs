//! Finite-difference verification of every backward rule, run in f64.
//!
//! Non-scalar outputs are reduced with fixed random weights before
//! differentiating, so no output direction is silently skipped and the
//! gradients stay away from the cancellations a plain sum would cause.

use std::fmt::Write as _;

use crate::amg::AmgNetwork;
use crate::autograd::{Tape, Var};
use crate::deform::{sample_with_grad, bilinear_sample};
use crate::dme::{inject_attention_features, DmeNetwork};
use crate::error::{Error, Result};
use crate::ops::Conv2dParams;
use crate::params::{BoundParams, NetworkParams};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Largest relative error a case may show and still pass.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;
/// Elements checked per tensor; larger tensors are subsampled.
const MAX_ELEMENTS: usize = 48;
const PROJECTION_SEED: u64 = 0x9C;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floored(a, b, 1e-8)
}

fn relative_error_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Smallest gradient magnitude a central difference of step `h` can resolve
/// to [`GRADCHECK_TOLERANCE`] when the loss is `loss`: rounding in
/// `f(x + h) - f(x - h)` contributes about `eps * |loss| / h`. Entries below it
/// are compared in absolute terms.
fn resolution_floor(loss: f64, h: f64) -> f64 {
    (f64::EPSILON * loss.abs() / (h * GRADCHECK_TOLERANCE)).max(1e-8)
}

fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let value = tape.value(y);
    if value.len() == 1 {
        return Ok(tape.sum(y));
    }
    let mut rng = SplitMix64::new(PROJECTION_SEED);
    let weights = Tensor::from_fn(value.shape(), |_| rng.range(-1.0, 1.0));
    let w = tape.constant(weights);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn element_sample(len: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if len > MAX_ELEMENTS {
        SplitMix64::derive(seed, &[len as u64]).shuffle(&mut idx);
        idx.truncate(MAX_ELEMENTS);
        idx.sort_unstable();
    }
    idx
}

/// Max relative error between the analytic gradient of `f` at `input` and
/// central differences `(f(x + h) - f(x - h)) / 2h` over every element
/// (a deterministic subset for large tensors). Entries too small for the
/// differences to resolve are compared against the resolution floor instead.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |x: Tensor<f64>, grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let v = tape.leaf(x, grad);
        let y = f(&mut tape, v)?;
        let loss = project(&mut tape, y)?;
        let value = tape.value(loss).data()[0];
        let g = if grad {
            Some(
                tape.backward(loss)?
                    .take(v)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()]),
            )
        } else {
            None
        };
        Ok((value, g))
    };
    let (loss, analytic) = eval(input.clone(), true)?;
    let analytic = analytic.expect("requested");
    let floor = resolution_floor(loss, h);
    let mut worst: f64 = 0.0;
    for i in element_sample(input.len(), 0) {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus, false)?.0 - eval(minus, false)?.0) / (2.0 * h);
        worst = worst.max(relative_error_floored(analytic[i], numeric, floor));
    }
    Ok(worst)
}

/// Like [`grad_check`], over every parameter tensor of a network; `f` builds
/// a loss from bound parameters.
pub fn grad_check_params<F>(params: &NetworkParams<f64>, f: F, h: f64, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &BoundParams) -> Result<Var>,
{
    let eval = |p: &NetworkParams<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let y = f(&mut tape, &bound)?;
        let loss = project(&mut tape, y)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let y = f(&mut tape, &bound)?;
    let loss = project(&mut tape, y)?;
    let floor = resolution_floor(tape.value(loss).data()[0], h);
    let mut grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, entry) in params.entries().iter().enumerate() {
        let var = bound.get(&entry.name)?;
        let analytic = grads
            .take(var)
            .unwrap_or_else(|| vec![0.0; entry.tensor.len()]);
        for i in element_sample(entry.tensor.len(), seed ^ k as u64) {
            let mut probe = params.clone();
            let t = probe.get_mut(&entry.name).expect("same names");
            let x0 = t.data()[i];
            t.data_mut()[i] = x0 + h;
            let up = eval(&probe)?;
            probe.get_mut(&entry.name).expect("same names").data_mut()[i] = x0 - h;
            let down = eval(&probe)?;
            worst = worst.max(relative_error_floored(analytic[i], (up - down) / (2.0 * h), floor));
        }
    }
    Ok(worst)
}

/// One row of the suite report.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CaseResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub seeds: Vec<u64>,
    pub cases: Vec<CaseResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed(self.tolerance))
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !c.passed(self.tolerance)).collect()
    }

    /// One line per case: name, max relative error, PASS/FAIL.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<34} {:>14}  result", "operation", "max rel err");
        for c in &self.cases {
            let verdict = if c.passed(self.tolerance) { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{:<34} {:>14.3e}  {verdict}", c.name, c.max_rel_error);
        }
        let _ = writeln!(
            s,
            "{} of {} operations within {:e}",
            self.cases.len() - self.failures().len(),
            self.cases.len(),
            self.tolerance
        );
        s
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: Vec<u64>,
    pub step: f64,
    /// Adds a case whose backward rule is deliberately wrong (negative
    /// control for the harness itself).
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: vec![1, 2, 3],
            step: DEFAULT_STEP,
            inject_fault: false,
        }
    }
}

fn random(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.range(lo, hi))
}

type Case = (&'static str, fn(u64, f64) -> Result<f64>);

fn case_conv2d(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[1]);
    let x = random(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
    let w = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = random(&mut rng, &[3], -1.0, 1.0);
    let mut worst: f64 = 0.0;
    for p in [Conv2dParams::new(1, 1, 1), Conv2dParams::new(2, 2, 2)] {
        let (w1, b1) = (w.clone(), b.clone());
        worst = worst.max(grad_check(
            |t, v| {
                let (wv, bv) = (t.constant(w1.clone()), t.constant(b1.clone()));
                t.conv2d(v, wv, bv, p)
            },
            &x,
            h,
        )?);
        let (x1, b1) = (x.clone(), b.clone());
        worst = worst.max(grad_check(
            |t, v| {
                let (xv, bv) = (t.constant(x1.clone()), t.constant(b1.clone()));
                t.conv2d(xv, v, bv, p)
            },
            &w,
            h,
        )?);
        let (x1, w1) = (x.clone(), w.clone());
        worst = worst.max(grad_check(
            |t, v| {
                let (xv, wv) = (t.constant(x1.clone()), t.constant(w1.clone()));
                t.conv2d(xv, wv, v, p)
            },
            &b,
            h,
        )?);
    }
    Ok(worst)
}

fn case_max_pool(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[2]);
    grad_check(|t, v| t.max_pool2(v), &random(&mut rng, &[2, 2, 6, 4], -1.0, 1.0), h)
}

fn case_gap(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[3]);
    grad_check(|t, v| t.global_avg_pool(v), &random(&mut rng, &[2, 3, 4, 5], -1.0, 1.0), h)
}

fn case_softmax(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[4]);
    grad_check(|t, v| t.softmax(v), &random(&mut rng, &[3, 4], -3.0, 3.0), h)
}

fn case_resize(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[5]);
    let x = random(&mut rng, &[1, 2, 4, 5], -1.0, 1.0);
    let up = grad_check(|t, v| t.bilinear_resize(v, 9, 7), &x, h)?;
    let down = grad_check(|t, v| t.bilinear_resize(v, 3, 2), &x, h)?;
    Ok(up.max(down))
}

fn case_relu(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[6]);
    grad_check(|t, v| Ok(t.relu(v)), &random(&mut rng, &[2, 3, 4, 4], -1.0, 1.0), h)
}

fn case_cross_entropy(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[7]);
    let labels = [0u8, 1, 1, 0];
    grad_check(
        |t, v| t.cross_entropy_2class(v, &labels),
        &random(&mut rng, &[4, 2], -3.0, 3.0),
        h,
    )
}

/// Value and spatial/feature gradients of a single bilinear read.
fn case_bilinear_sample(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[8]);
    let (ph, pw) = (4, 5);
    let plane: Vec<f64> = (0..ph * pw).map(|_| rng.range(-1.0, 1.0)).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..24 {
        // stay off the integer grid, where the spatial gradient jumps
        let y = rng.below(ph as u64 + 1) as f64 - 1.0 + rng.range(0.05, 0.95);
        let x = rng.below(pw as u64 + 1) as f64 - 1.0 + rng.range(0.05, 0.95);
        let s = sample_with_grad(&plane, ph, pw, y, x);
        let f = |p: &[f64], y: f64, x: f64| bilinear_sample(p, ph, pw, y, x);
        let ny = (f(&plane, y + h, x) - f(&plane, y - h, x)) / (2.0 * h);
        let nx = (f(&plane, y, x + h) - f(&plane, y, x - h)) / (2.0 * h);
        worst = worst.max(relative_error(s.d_y, ny)).max(relative_error(s.d_x, nx));
        let mut dplane = vec![0.0; plane.len()];
        for &(i, wt) in &s.taps[..s.n_taps] {
            dplane[i] += wt;
        }
        for (i, &analytic) in dplane.iter().enumerate() {
            let mut up = plane.clone();
            up[i] += h;
            let mut dn = plane.clone();
            dn[i] -= h;
            let numeric = (f(&up, y, x) - f(&dn, y, x)) / (2.0 * h);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

fn case_deform(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[9]);
    let mut worst: f64 = 0.0;
    for k in [3usize, 5] {
        let pad = k / 2;
        let x = random(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        let off = random(&mut rng, &[1, 2 * k * k, 6, 6], -1.5, 1.5);
        let w = random(&mut rng, &[3, 2, k, k], -1.0, 1.0);
        let b = random(&mut rng, &[3], -1.0, 1.0);
        let all = [x, off, w, b];
        for slot in 0..4 {
            let fixed = all.clone();
            worst = worst.max(grad_check(
                move |t, v| {
                    let vars: Vec<Var> = (0..4)
                        .map(|i| if i == slot { v } else { t.constant(fixed[i].clone()) })
                        .collect();
                    t.deform_conv2d(vars[0], vars[1], vars[2], vars[3], 1, pad)
                },
                &all[slot],
                h,
            )?);
        }
    }
    Ok(worst)
}

/// Full deformable layer, offsets predicted by its own branch.
fn case_deform_layer(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[10]);
    let layer = crate::deform::DeformConvLayer::same("d", 2, 3, 3);
    let mut params = NetworkParams::new();
    for (name, shape) in layer.param_names().iter().zip([
        vec![3, 2, 3, 3],
        vec![3],
        vec![18, 2, 3, 3],
        vec![18],
    ]) {
        params.insert(name, random(&mut rng, &shape, -0.8, 0.8))?;
    }
    let x = random(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
    grad_check_params(
        &params,
        |t, bound| {
            let xv = t.constant(x.clone());
            let vars = crate::deform::bind_layer(&layer, bound)?;
            layer.forward(t, xv, &vars)
        },
        h,
        seed,
    )
}

fn case_density_loss(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[11]);
    let pred = random(&mut rng, &[2, 1, 4, 4], 0.0, 1.0);
    let gt = random(&mut rng, &[2, 1, 4, 4], 0.0, 1.0);
    let (g1, p1) = (gt.clone(), pred.clone());
    let a = grad_check(
        |t, v| {
            let g = t.constant(g1.clone());
            t.squared_error(v, g, 2)
        },
        &pred,
        h,
    )?;
    let b = grad_check(
        |t, v| {
            let p = t.constant(p1.clone());
            t.squared_error(p, v, 2)
        },
        &gt,
        h,
    )?;
    Ok(a.max(b))
}

fn case_inject_attention(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[12]);
    let feats = random(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
    let att = random(&mut rng, &[1, 1, 16, 16], 0.0, 1.0);
    let (a1, f1) = (att.clone(), feats.clone());
    let a = grad_check(
        |t, v| {
            let at = t.constant(a1.clone());
            inject_attention_features(t, v, at)
        },
        &feats,
        h,
    )?;
    let b = grad_check(
        |t, v| {
            let f = t.constant(f1.clone());
            inject_attention_features(t, f, v)
        },
        &att,
        h,
    )?;
    Ok(a.max(b))
}

fn case_weighted_fusion(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[13]);
    let maps = random(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let weights = random(&mut rng, &[2, 2], 0.0, 1.0);
    let (w1, m1) = (weights.clone(), maps.clone());
    let a = grad_check(
        |t, v| {
            let w = t.constant(w1.clone());
            t.weighted_channel_sum(v, w)
        },
        &maps,
        h,
    )?;
    let b = grad_check(
        |t, v| {
            let m = t.constant(m1.clone());
            t.weighted_channel_sum(m, v)
        },
        &weights,
        h,
    )?;
    Ok(a.max(b))
}

fn case_concat_add_mul(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[14]);
    let other = random(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
    grad_check(
        |t, v| {
            let o = t.constant(other.clone());
            let s = t.add(v, o)?;
            let p = t.mul(s, v)?;
            t.concat_channels(&[p, v, o])
        },
        &random(&mut rng, &[1, 2, 3, 3], -1.0, 1.0),
        h,
    )
}

/// Copy of `params` with uniform noise in `[-scale, scale)` added.
fn randomized(params: &NetworkParams<f64>, seed: u64, scale: f64) -> NetworkParams<f64> {
    let mut p = params.clone();
    let mut rng = SplitMix64::derive(seed, &[15]);
    let names: Vec<String> = p.names().map(String::from).collect();
    for n in names {
        let t = p.get_mut(&n).expect("listed");
        for v in t.data_mut() {
            *v += rng.range(-scale, scale);
        }
    }
    p
}

/// Whole classifier, input to cross-entropy, on a 16x16 image.
fn case_amg_path(seed: u64, h: f64) -> Result<f64> {
    let params = randomized(&AmgNetwork::<f64>::build_in(seed).params, seed, 0.05);
    let net = AmgNetwork { params };
    let mut rng = SplitMix64::derive(seed, &[16]);
    let x = random(&mut rng, &[2, 1, 16, 16], 0.0, 1.0);
    grad_check_params(
        &net.params,
        |t, bound| {
            let xv = t.constant(x.clone());
            let trace = net.trace(t, bound, xv)?;
            t.cross_entropy_2class(trace.logits, &[1, 0])
        },
        h,
        seed,
    )
}

/// Whole estimator, input to density loss, on a 16x16 image; the offset
/// branches are perturbed off zero so sampling points are fractional.
fn case_dme_path(seed: u64, h: f64) -> Result<f64> {
    let params = randomized(&DmeNetwork::<f64>::build_in(seed).params, seed, 0.05);
    let net = DmeNetwork { params };
    let mut rng = SplitMix64::derive(seed, &[17]);
    let x = random(&mut rng, &[1, 1, 16, 16], 0.0, 1.0);
    let att = random(&mut rng, &[1, 1, 16, 16], 0.0, 1.0);
    let gt = random(&mut rng, &[1, 1, 4, 4], 0.0, 0.5);
    grad_check_params(
        &net.params,
        |t, bound| {
            let xv = t.constant(x.clone());
            let av = t.constant(att.clone());
            let pred = net.trace(t, bound, xv, Some(av))?;
            let g = t.constant(gt.clone());
            t.squared_error(pred, g, 1)
        },
        h,
        seed,
    )
}

/// ReLU whose backward rule is off by 10%: must fail.
fn case_fault(seed: u64, h: f64) -> Result<f64> {
    let mut rng = SplitMix64::derive(seed, &[99]);
    grad_check(
        |t, v| {
            let value = t.value(v).map(|e| e.max(0.0));
            Ok(t.custom(
                &[v],
                value,
                Box::new(|inputs, _, g| {
                    let x = inputs[0].data();
                    vec![Some(
                        g.iter()
                            .zip(x)
                            .map(|(g, x)| if *x > 0.0 { 0.9 * g } else { 0.0 })
                            .collect(),
                    )]
                }),
            ))
        },
        &random(&mut rng, &[1, 1, 4, 4], -1.0, 1.0),
        h,
    )
}

const CASES: [Case; 15] = [
    ("conv2d", case_conv2d),
    ("max_pool2", case_max_pool),
    ("global_avg_pool", case_gap),
    ("softmax", case_softmax),
    ("bilinear_resize", case_resize),
    ("relu", case_relu),
    ("cross_entropy", case_cross_entropy),
    ("bilinear_sample", case_bilinear_sample),
    ("deform_conv2d", case_deform),
    ("deform_layer (offset branch)", case_deform_layer),
    ("density_loss", case_density_loss),
    ("inject_attention_features", case_inject_attention),
    ("weighted_channel_sum", case_weighted_fusion),
    ("concat/add/mul", case_concat_add_mul),
    ("amg classification path", case_amg_path),
];

/// Runs every case on every seed; each row holds the worst seed.
pub fn run_suite(options: &SuiteOptions) -> Result<GradCheckReport> {
    if options.seeds.is_empty() || !(options.step > 0.0) {
        return Err(Error::invalid("gradcheck needs at least one seed and a positive step"));
    }
    let mut cases: Vec<Case> = CASES.to_vec();
    cases.push(("dme density_loss path", case_dme_path));
    if options.inject_fault {
        cases.push(("relu (fault injected)", case_fault));
    }
    let mut rows = Vec::with_capacity(cases.len());
    for (name, run) in cases {
        let mut worst: f64 = 0.0;
        for &seed in &options.seeds {
            let e = run(seed, options.step)?;
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
            if worst.is_nan() {
                break;
            }
        }
        rows.push(CaseResult {
            name: name.to_string(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport {
        tolerance: GRADCHECK_TOLERANCE,
        seeds: options.seeds.clone(),
        cases: rows,
    })
}
