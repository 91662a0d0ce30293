//! Finite-difference verification of every tape operator, the GRU and the
//! full debiased fine-tuning loss. Shared by the `gradcheck` command and the
//! test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{
    finite_difference_check_with_fault, relative_error, AdError, GradCheckReport, OpKind, Tape, Tensor, Var,
};
use crate::data::{Frames, NoiseLevel, Segment, SegmentId, SessionId, SubjectId};
use crate::nn::{init_mlp, mlp_forward, mse_loss, triplet_loss, Activation, Parameters};
use crate::pipeline::{batch_loss, AgeNorm, Instance, LossToggles, ModelBundle, ModelVariant};
use crate::seed::derive_seed;

pub const OP_RTOL: f64 = 1e-4;
pub const END_TO_END_RTOL: f64 = 1e-3;
pub const EPSILON: f64 = 1e-5;
/// Minimum distance of relu / hinge / sqrt arguments from their kinks.
pub const KINK_MARGIN: f64 = 1e-2;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteCheck {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub rtol: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<SuiteCheck>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &SuiteCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).expect("valid shape")
}

/// Uniform on [−2, 2] but at least `KINK_MARGIN` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape);
    for v in t.values_mut() {
        while v.abs() < KINK_MARGIN {
            *v = rng.gen_range(-2.0..2.0);
        }
    }
    t
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(KINK_MARGIN..2.0)).collect()).expect("valid shape")
}

/// `Σ w ⊙ y` with a fixed random weighting, so no output element cancels another.
fn weighted_sum(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var, AdError> {
    let wv = tape.constant(w.clone())?;
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AdError>>);

fn op_case(kind: OpKind, i: usize, rng: &mut ChaCha8Rng) -> Case {
    macro_rules! unary {
        ($x:expr, $shape:expr, $f:expr) => {{
            let w = uniform(rng, &$shape);
            let f = $f;
            (vec![$x], Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = f(t, v[0])?;
                weighted_sum(t, y, &w)
            }) as Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AdError>>)
        }};
    }
    macro_rules! binary {
        ($shape:expr, $f:expr) => {{
            let xs = vec![uniform(rng, &$shape), uniform(rng, &$shape)];
            let w = uniform(rng, &$shape);
            let f = $f;
            (xs, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = f(t, v[0], v[1])?;
                weighted_sum(t, y, &w)
            }) as Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AdError>>)
        }};
    }
    match kind {
        OpKind::MatMul => {
            // matrix × matrix, matrix × vector and vector × matrix in turn
            let (sa, sb, so): (Vec<usize>, Vec<usize>, Vec<usize>) = match i % 3 {
                0 => (vec![3, 4], vec![4, 2], vec![3, 2]),
                1 => (vec![3, 4], vec![4], vec![3]),
                _ => (vec![3], vec![3, 4], vec![4]),
            };
            let xs = vec![uniform(rng, &sa), uniform(rng, &sb)];
            let w = uniform(rng, &so);
            (xs, Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, &w)
            }))
        }
        OpKind::Add => binary!([5], |t: &mut Tape, a, b| t.add(a, b)),
        OpKind::Sub => binary!([5], |t: &mut Tape, a, b| t.sub(a, b)),
        OpKind::Mul => binary!([2, 3], |t: &mut Tape, a, b| t.mul(a, b)),
        OpKind::Scale => {
            let c = rng.gen_range(-2.0..2.0);
            unary!(uniform(rng, &[5]), [5], move |t: &mut Tape, a| t.scale(a, c))
        }
        OpKind::AddScalar => {
            let c = rng.gen_range(-2.0..2.0);
            unary!(uniform(rng, &[5]), [5], move |t: &mut Tape, a| t.add_scalar(a, c))
        }
        OpKind::Sigmoid => unary!(uniform(rng, &[5]), [5], |t: &mut Tape, a| t.sigmoid(a)),
        OpKind::Tanh => unary!(uniform(rng, &[5]), [5], |t: &mut Tape, a| t.tanh(a)),
        OpKind::Relu => unary!(away_from_zero(rng, &[6]), [6], |t: &mut Tape, a| t.relu(a)),
        OpKind::Sqrt => unary!(positive(rng, &[5]), [5], |t: &mut Tape, a| t.sqrt(a)),
        OpKind::ConcatLastAxis => {
            let xs = vec![uniform(rng, &[2, 3]), uniform(rng, &[2, 2])];
            let w = uniform(rng, &[2, 5]);
            (xs, Box::new(move |t, v| {
                let y = t.concat_last_axis(&[v[0], v[1]])?;
                weighted_sum(t, y, &w)
            }))
        }
        OpKind::MeanOverAxis => {
            let axis = i % 2;
            let out = if axis == 0 { 4 } else { 3 };
            unary!(uniform(rng, &[3, 4]), [out], move |t: &mut Tape, a| t.mean_over_axis(a, axis))
        }
        OpKind::Sum => unary!(uniform(rng, &[2, 3]), [1], |t: &mut Tape, a| t.sum(a)),
        OpKind::SquaredEuclideanDistance => {
            let xs = vec![uniform(rng, &[5]), uniform(rng, &[5])];
            let w = uniform(rng, &[1]);
            (xs, Box::new(move |t, v| {
                let y = t.squared_euclidean_distance(v[0], v[1])?;
                weighted_sum(t, y, &w)
            }))
        }
        OpKind::BceWithLogits => {
            let label = f64::from(u8::from(rng.gen_bool(0.5)));
            unary!(uniform(rng, &[1]), [1], move |t: &mut Tape, a| t.bce_with_logits(a, label))
        }
        OpKind::Row => {
            let r = i % 3;
            unary!(uniform(rng, &[3, 4]), [4], move |t: &mut Tape, a| t.row(a, r))
        }
        OpKind::Stack => {
            let xs = vec![uniform(rng, &[4]), uniform(rng, &[4]), uniform(rng, &[4])];
            let w = uniform(rng, &[3, 4]);
            (xs, Box::new(move |t, v| {
                let y = t.stack(&[v[0], v[1], v[2]])?;
                weighted_sum(t, y, &w)
            }))
        }
        OpKind::GruSequence => {
            let (d, h, steps) = (3, 4, 5);
            let mut xs = vec![uniform(rng, &[steps, d])];
            for shape in [[h, d], [h, d], [h, d], [h, h], [h, h], [h, h]] {
                xs.push(uniform(rng, &shape));
            }
            for _ in 0..3 {
                xs.push(uniform(rng, &[h]));
            }
            xs.push(uniform(rng, &[h]));
            let w = uniform(rng, &[steps, h]);
            (xs, Box::new(move |t, v| {
                let p = crate::nn::gru_inputs_from(&v[1..10])?;
                let y = t.gru_sequence(v[0], &p, v[10])?;
                weighted_sum(t, y, &w)
            }))
        }
        OpKind::GradientReversal | OpKind::Leaf => unreachable!("handled separately"),
    }
}

fn fold(name: &str, rtol: f64, reports: Vec<GradCheckReport>) -> SuiteCheck {
    let instances = reports.len();
    let error = reports.iter().find_map(|r| r.error.clone());
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    SuiteCheck {
        name: name.to_string(),
        instances,
        max_rel_error,
        rtol,
        passed: error.is_none() && reports.iter().all(|r| r.passed),
        error,
    }
}

/// The reversal layer is the identity going forward, so its analytic
/// gradient must equal the negated central difference.
fn grl_check(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> GradCheckReport {
    let x = uniform(rng, &[5]);
    let w = uniform(rng, &[5]);
    let run = |xv: &Tensor, analytic: bool| -> Result<(f64, Vec<f64>), AdError> {
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        let v = if analytic { tape.param(xv.clone())? } else { tape.constant(xv.clone())? };
        let y = tape.gradient_reversal(v)?;
        let l = weighted_sum(&mut tape, y, &w)?;
        let value = tape.value(l).item();
        if analytic {
            tape.backward(l)?;
            return Ok((value, tape.grad(v).unwrap_or(&[]).to_vec()));
        }
        Ok((value, Vec::new()))
    };
    let analytic = match run(&x, true) {
        Ok((_, g)) => g,
        Err(e) => return failed(OP_RTOL, e),
    };
    let mut rel = Vec::new();
    let mut xp = x.clone();
    for j in 0..x.len() {
        let o = x.values()[j];
        xp.values_mut()[j] = o + EPSILON;
        let p = run(&xp, false).map(|r| r.0);
        xp.values_mut()[j] = o - EPSILON;
        let m = run(&xp, false).map(|r| r.0);
        xp.values_mut()[j] = o;
        match (p, m) {
            (Ok(p), Ok(m)) => rel.push(relative_error(analytic[j], -(p - m) / (2.0 * EPSILON))),
            (Err(e), _) | (_, Err(e)) => return failed(OP_RTOL, e),
        }
    }
    report(rel, OP_RTOL)
}

fn failed(rtol: f64, e: AdError) -> GradCheckReport {
    GradCheckReport {
        max_rel_error: f64::INFINITY,
        rel_errors: Vec::new(),
        rtol,
        passed: false,
        error: Some(e.to_string()),
    }
}

fn report(rel_errors: Vec<f64>, rtol: f64) -> GradCheckReport {
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    GradCheckReport {
        max_rel_error,
        rel_errors,
        rtol,
        passed: max_rel_error < rtol,
        error: None,
    }
}

fn triplet_case(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    loop {
        let xs = vec![uniform(rng, &[6]), uniform(rng, &[6]), uniform(rng, &[6])];
        let d = |a: &Tensor, b: &Tensor| {
            a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let (dap, dan) = (d(&xs[0], &xs[1]), d(&xs[0], &xs[2]));
        if dap >= KINK_MARGIN && dan >= KINK_MARGIN && (1.0 + dap - dan).abs() >= KINK_MARGIN {
            return xs;
        }
    }
}

fn tiny_segment(id: u32, subject: u32, level: NoiseLevel, order: u32, rng: &mut ChaCha8Rng) -> Segment {
    let (d, steps) = (2, 4);
    Segment {
        segment_id: SegmentId(id),
        session_id: SessionId(0),
        subject_id: SubjectId(subject),
        order_index: order,
        noise_level: level,
        frames: Frames::new(d, (0..d * steps).map(|_| rng.gen_range(-2.0..2.0)).collect()).expect("frames"),
    }
}

/// Full debiased loss (mean BCE + mean MSE behind the reversal layer) for a
/// d=2, H=3, T=4 model on a batch of two. The expected gradient is the
/// central difference of the BCE term plus that of the MSE term, the latter
/// negated for encoder parameters, which sit upstream of the reversal.
fn end_to_end_check(seed: u64, fault: Option<OpKind>) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segs = [
        tiny_segment(0, 0, NoiseLevel::Quiet, 0, &mut rng),
        tiny_segment(1, 0, NoiseLevel::Db75, 1, &mut rng),
        tiny_segment(2, 1, NoiseLevel::Quiet, 0, &mut rng),
        tiny_segment(3, 1, NoiseLevel::Db55, 1, &mut rng),
    ];
    let batch = [
        Instance {
            current: &segs[1],
            anchor: Some(&segs[0]),
            label: 1.0,
            age: rng.gen_range(18.0..88.0),
        },
        Instance {
            current: &segs[3],
            anchor: Some(&segs[2]),
            label: 0.0,
            age: rng.gen_range(18.0..88.0),
        },
    ];
    let mut bundle = match ModelBundle::fresh(
        ModelVariant::AnchorVmAbm,
        2,
        3,
        AgeNorm { mean: 50.0, std: 20.0 },
        derive_seed(seed, "gradsuite-bundle", 0),
    ) {
        Ok(b) => b,
        Err(e) => return failed(END_TO_END_RTOL, AdError::ShapeMismatch(e.to_string())),
    };
    // non-zero biases so every parameter receives a generic gradient
    for t in bundle.tensors_mut() {
        if t.rank() == 1 {
            t.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    let params: Vec<Tensor> = bundle.tensors().into_iter().cloned().collect();
    let eval = |xs: &[Tensor], toggles: LossToggles, analytic: bool| -> Result<(f64, Vec<Vec<f64>>), AdError> {
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        let vars = xs
            .iter()
            .map(|x| if analytic { tape.param(x.clone()) } else { tape.constant(x.clone()) })
            .collect::<Result<Vec<_>, _>>()?;
        let loss = batch_loss(&mut tape, &bundle, &vars, &batch, toggles)?;
        let value = tape.value(loss.total).item();
        if !analytic {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss.total)?;
        Ok((
            value,
            vars.iter()
                .zip(xs)
                .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
                .collect(),
        ))
    };
    let bce_only = LossToggles {
        classification: true,
        age: false,
        reverse_gradient: true,
    };
    let mse_only = LossToggles {
        classification: false,
        age: true,
        reverse_gradient: true,
    };
    let analytic = match eval(&params, LossToggles::default(), true) {
        Ok((_, g)) => g,
        Err(e) => return failed(END_TO_END_RTOL, e),
    };
    let mut xs = params.clone();
    let mut rel = Vec::new();
    for i in 0..params.len() {
        let sign = if i < 9 { -1.0 } else { 1.0 };
        for j in 0..params[i].len() {
            let o = params[i].values()[j];
            let mut diff = |toggles| -> Result<f64, AdError> {
                xs[i].values_mut()[j] = o + EPSILON;
                let p = eval(&xs, toggles, false)?.0;
                xs[i].values_mut()[j] = o - EPSILON;
                let m = eval(&xs, toggles, false)?.0;
                xs[i].values_mut()[j] = o;
                Ok((p - m) / (2.0 * EPSILON))
            };
            match (diff(bce_only), diff(mse_only)) {
                (Ok(b), Ok(m)) => rel.push(relative_error(analytic[i][j], b + sign * m)),
                (Err(e), _) | (_, Err(e)) => return failed(END_TO_END_RTOL, e),
            }
        }
    }
    report(rel, END_TO_END_RTOL)
}

/// Runs every check on `instances` random instances each. With `fault`, the
/// backward rule of that operator is negated on every analytic tape.
pub fn run_suite(instances: usize, seed: u64, fault: Option<OpKind>) -> SuiteReport {
    let mut checks = Vec::new();
    let ops = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Sqrt,
        OpKind::ConcatLastAxis,
        OpKind::MeanOverAxis,
        OpKind::Sum,
        OpKind::SquaredEuclideanDistance,
        OpKind::BceWithLogits,
        OpKind::Row,
        OpKind::Stack,
        OpKind::GruSequence,
    ];
    for (k, kind) in ops.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradsuite-op", k as u64));
        let reports = (0..instances)
            .map(|i| {
                let (xs, f) = op_case(kind, i, &mut rng);
                finite_difference_check_with_fault(f, &xs, EPSILON, OP_RTOL, fault)
            })
            .collect();
        checks.push(fold(kind.name(), OP_RTOL, reports));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradsuite-grl", 0));
    let reports = (0..instances).map(|_| grl_check(&mut rng, fault)).collect();
    checks.push(fold(OpKind::GradientReversal.name(), OP_RTOL, reports));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradsuite-triplet", 0));
    let reports = (0..instances)
        .map(|_| {
            let xs = triplet_case(&mut rng);
            finite_difference_check_with_fault(|t, v| triplet_loss(t, v[0], v[1], v[2]), &xs, EPSILON, OP_RTOL, fault)
        })
        .collect();
    checks.push(fold("triplet_loss", OP_RTOL, reports));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradsuite-mse", 0));
    let reports = (0..instances)
        .map(|_| {
            let target = rng.gen_range(-2.0..2.0);
            let xs = vec![uniform(&mut rng, &[1])];
            finite_difference_check_with_fault(move |t, v| mse_loss(t, v[0], target), &xs, EPSILON, OP_RTOL, fault)
        })
        .collect();
    checks.push(fold("mse_loss", OP_RTOL, reports));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradsuite-mlp", 0));
    let reports = (0..instances)
        .map(|i| {
            let head = init_mlp(&[4, 3, 1], Activation::Relu, derive_seed(seed, "gradsuite-mlp-init", i as u64))
                .expect("valid dims");
            let mut xs: Vec<Tensor> = head.tensors().into_iter().cloned().collect();
            xs.push(away_from_zero(&mut rng, &[4]));
            let head = head.clone();
            finite_difference_check_with_fault(
                move |t, v| {
                    let vars = head.vars_from(&v[..4])?;
                    let y = mlp_forward(t, v[4], &vars)?;
                    t.sum(y)
                },
                &xs,
                EPSILON,
                OP_RTOL,
                fault,
            )
        })
        .collect();
    checks.push(fold("mlp_head", OP_RTOL, reports));

    let reports = (0..instances)
        .map(|i| end_to_end_check(derive_seed(seed, "gradsuite-e2e", i as u64), fault))
        .collect();
    checks.push(fold("anchor_vm_abm_loss", END_TO_END_RTOL, reports));

    let passed = checks.iter().all(|c| c.passed);
    SuiteReport { checks, passed }
}
