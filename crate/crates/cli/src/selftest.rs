//! `selftest`: quarter-turn invariance and equivariance of the ensemble
//! modes, finite-difference gradient checks, and the ensemble operators
//! against direct loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotens::ensemble::{feature_combine, score_combine};
use rotens::geometry::rot90;
use rotens::model::{build_default, build_small_cnn, Arch, ModeKind, ModelGraph};
use rotens::{
    BranchSet, Combine, InferenceMode, QuarterTurn, ScoreSet, Tape, Tensor4, TensorError, Var,
};

use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn other<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Other(e.to_string())
}

pub fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    let n = shape.iter().product();
    Tensor4::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("length matches shape")
}

/// `max |a − b| / max |b|`; zero when both are zero.
pub fn max_rel_dev(a: &Tensor4, b: &Tensor4) -> f64 {
    let num = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let den = b.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn bitwise_eq(a: &Tensor4, b: &Tensor4) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn default_model(seed: u64) -> Result<ModelGraph> {
    Ok(build_default(Arch::SmallCnn, 10, [1, 28, 28], seed)?)
}

/// Logits of the default model for `inputs` random images and each of
/// their quarter turns: `ours_max` must not change a bit, `ours_mean` stay
/// within `mean_tol`.
pub fn invariance(inputs: usize, seed: u64, mean_tol: f64) -> Result<Vec<Check>> {
    let model = default_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = random_tensor([inputs, 1, 28, 28], &mut rng);
    let mut out = Vec::new();
    for (combine, name) in [
        (Combine::Max, "ours_max invariance"),
        (Combine::Mean, "ours_mean invariance"),
    ] {
        let base = model.forward_ours(&x, &QuarterTurn::ALL, combine)?;
        let mut worst = 0.0_f64;
        let mut all_bitwise = true;
        for turn in QuarterTurn::ALL {
            let y =
                model.forward_ours(&rot90(&x, turn).map_err(other)?, &QuarterTurn::ALL, combine)?;
            all_bitwise &= bitwise_eq(&y, &base);
            worst = worst.max(max_rel_dev(&y, &base));
        }
        out.push(match combine {
            Combine::Max => Check::new(
                name,
                all_bitwise,
                format!("{inputs} inputs x 4 turns, bitwise={all_bitwise}"),
            ),
            Combine::Mean => Check::new(
                name,
                worst <= mean_tol,
                format!(
                    "{inputs} inputs x 4 turns, max rel dev {worst:.3e} (limit {mean_tol:.0e})"
                ),
            ),
        });
    }
    Ok(out)
}

/// `ẑ(R_a x)` against `R_a ẑ(x)` over `trials` random inputs and turns.
pub fn equivariance(trials: usize, seed: u64, mean_tol: f64) -> Result<Vec<Check>> {
    let model = default_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe9);
    let mut bitwise = true;
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let x = random_tensor([1, 1, 28, 28], &mut rng);
        let turn = QuarterTurn::from_steps(rng.gen_range(0..4));
        let xr = rot90(&x, turn).map_err(other)?;
        for combine in [Combine::Max, Combine::Mean] {
            let lhs = model.ensembled_map(&xr, &QuarterTurn::ALL, combine)?;
            let rhs = rot90(&model.ensembled_map(&x, &QuarterTurn::ALL, combine)?, turn)
                .map_err(other)?;
            match combine {
                Combine::Max => bitwise &= bitwise_eq(&lhs, &rhs),
                Combine::Mean => worst = worst.max(max_rel_dev(&lhs, &rhs)),
            }
        }
    }
    Ok(vec![
        Check::new(
            "max feature map equivariance",
            bitwise,
            format!("{trials} trials, bitwise={bitwise}"),
        ),
        Check::new(
            "mean feature map equivariance",
            worst <= mean_tol,
            format!("{trials} trials, max rel dev {worst:.3e} (limit {mean_tol:.0e})"),
        ),
    ])
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> std::result::Result<Var, TensorError> + 'a;

/// `‖a − n‖ / max(‖a‖, ‖n‖)` between the tape gradients of `sum(f(x)·r)`
/// and central differences, worst over the inputs.
fn fd_error(
    inputs: &[Tensor4],
    build: &Build<'_>,
    seed: u64,
) -> std::result::Result<f64, TensorError> {
    const H: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objective = |xs: &[Tensor4],
                     r: Option<&Tensor4>|
     -> std::result::Result<(f64, Tape, Vec<Var>, Var), TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| tape.leaf(x.clone().with_requires_grad(true)))
            .collect();
        let y = build(&mut tape, &vars)?;
        let loss = match r {
            Some(r) => {
                let rv = tape.constant(r.clone());
                let m = tape.mul(y, rv)?;
                tape.sum(m)?
            }
            None => y,
        };
        let v = tape.value(loss)?.data()[0];
        Ok((v, tape, vars, loss))
    };
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let y = build(&mut tape, &vars)?;
        tape.shape(y)?
    };
    let r = (shape.iter().product::<usize>() > 1).then(|| random_tensor(shape, &mut rng));
    let (_, mut tape, vars, loss) = objective(inputs, r.as_ref())?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0_f64;
    for (i, &v) in vars.iter().enumerate() {
        let zero = Tensor4::zeros(inputs[i].shape())?;
        let analytic = grads.get(v).unwrap_or(&zero);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..inputs[i].len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += H;
            let (fp, ..) = objective(&xs, r.as_ref())?;
            xs[i].data_mut()[j] -= 2.0 * H;
            let (fm, ..) = objective(&xs, r.as_ref())?;
            let numeric = (fp - fm) / (2.0 * H);
            let a = analytic.data()[j];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let den = a2.sqrt().max(n2.sqrt());
        if den > 0.0 {
            worst = worst.max(diff2.sqrt() / den);
        }
    }
    Ok(worst)
}

/// Random values at least `gap` away from zero, so ReLU kinks stay out of
/// reach of the difference step.
fn away_from_zero(shape: [usize; 4], gap: f64, rng: &mut ChaCha8Rng) -> Tensor4 {
    let mut t = random_tensor(shape, rng);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 {
                -gap - v.abs()
            } else {
                gap + v.abs()
            };
        }
    }
    t
}

/// `b` shifted so that `|a − b| ≥ gap` elementwise.
fn apart_from(a: &Tensor4, gap: f64, rng: &mut ChaCha8Rng) -> Tensor4 {
    let mut b = random_tensor(a.shape(), rng);
    for (x, y) in a.data().iter().zip(b.data_mut()) {
        if (*x - *y).abs() < gap {
            *y = x + if *y < *x { -gap } else { gap };
        }
    }
    b
}

/// Finite-difference checks of every tape operation and of the ensemble
/// forward paths of a tiny model.
pub fn gradients(seed: u64, tol: f64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(String, Vec<Tensor4>, Box<Build<'static>>)> = Vec::new();
    let s = [2, 3, 4, 4];
    let a = random_tensor(s, &mut rng);
    let b = random_tensor(s, &mut rng);
    cases.push((
        "add".into(),
        vec![a.clone(), b.clone()],
        Box::new(|t, v| t.add(v[0], v[1])),
    ));
    cases.push((
        "mul".into(),
        vec![a.clone(), b],
        Box::new(|t, v| t.mul(v[0], v[1])),
    ));
    let c = apart_from(&a, 1e-3, &mut rng);
    cases.push((
        "max".into(),
        vec![a.clone(), c],
        Box::new(|t, v| t.max(v[0], v[1])),
    ));
    cases.push((
        "scale".into(),
        vec![a.clone()],
        Box::new(|t, v| t.scale(v[0], -1.75)),
    ));
    cases.push(("sum".into(), vec![a.clone()], Box::new(|t, v| t.sum(v[0]))));
    cases.push((
        "mean".into(),
        vec![a.clone()],
        Box::new(|t, v| t.mean(v[0])),
    ));
    cases.push((
        "relu".into(),
        vec![away_from_zero(s, 1e-3, &mut rng)],
        Box::new(|t, v| t.relu(v[0])),
    ));
    cases.push((
        "maxpool2".into(),
        vec![random_tensor([2, 2, 6, 6], &mut rng)],
        Box::new(|t, v| t.maxpool2(v[0])),
    ));
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 0), (1, 1, 0), (5, 2, 2)] {
        let x = random_tensor([2, 2, 7, 7], &mut rng);
        let w = random_tensor([3, 2, k, k], &mut rng);
        let bias = random_tensor([3, 1, 1, 1], &mut rng);
        cases.push((
            format!("conv2d k{k} s{stride} p{pad}"),
            vec![x, w, bias],
            Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad)),
        ));
    }
    cases.push((
        "global_avg_pool".into(),
        vec![a.clone()],
        Box::new(|t, v| t.global_avg_pool(v[0])),
    ));
    cases.push((
        "linear".into(),
        vec![
            a.clone(),
            random_tensor([5, 48, 1, 1], &mut rng),
            random_tensor([5, 1, 1, 1], &mut rng),
        ],
        Box::new(|t, v| t.linear(v[0], v[1], v[2])),
    ));
    cases.push((
        "softmax_cross_entropy".into(),
        vec![random_tensor([4, 5, 1, 1], &mut rng)],
        Box::new(|t, v| t.softmax_cross_entropy(v[0], &[0, 3, 4, 3])),
    ));
    for turn in QuarterTurn::ALL {
        cases.push((
            format!("rot90 {turn}"),
            vec![random_tensor([2, 2, 5, 5], &mut rng)],
            Box::new(move |t, v| t.rot90(v[0], turn)),
        ));
    }
    let b1 = random_tensor(s, &mut rng);
    let b2 = apart_from(&b1, 1e-3, &mut rng);
    let b3 = {
        // keep the third branch clear of both others
        let mut t = apart_from(&b1, 1e-3, &mut rng);
        for (x, y) in b2.data().iter().zip(t.data_mut()) {
            if (*x - *y).abs() < 1e-3 {
                *y = x + 2e-3;
            }
        }
        t
    };
    let stacked = vec![b1, b2, b3];
    cases.push((
        "stack_max".into(),
        stacked.clone(),
        Box::new(|t, v| t.stack_max(v)),
    ));
    cases.push((
        "stack_mean".into(),
        stacked,
        Box::new(|t, v| t.stack_mean(v)),
    ));

    let mut out = Vec::new();
    for (i, (name, inputs, build)) in cases.iter().enumerate() {
        let err = fd_error(inputs, build.as_ref(), seed.wrapping_add(i as u64)).map_err(other)?;
        out.push(Check::new(
            format!("gradient {name}"),
            err < tol,
            format!("rel err {err:.3e} (limit {tol:.0e})"),
        ));
    }
    for kind in [ModeKind::Plain, ModeKind::OursMax, ModeKind::OursMean] {
        let err = model_fd_error(kind, seed)?;
        out.push(Check::new(
            format!("gradient {kind} tiny model"),
            err < tol,
            format!("rel err {err:.3e} (limit {tol:.0e})"),
        ));
    }
    Ok(out)
}

/// Tiny model with its parameters and the input treated as the variables
/// of `sum(logits · r)` under `kind`'s training path.
fn model_fd_error(kind: ModeKind, seed: u64) -> Result<f64> {
    let model = build_small_cnn(3, [1, 8, 8], [2, 3, 3, 4], seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x71);
    let x = random_tensor([2, 1, 8, 8], &mut rng);
    let mode = InferenceMode::new(kind, QuarterTurn::ALL.to_vec())?;
    let mut inputs: Vec<Tensor4> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
    inputs.push(x);
    let model_err = |e: rotens::model::ModelError| TensorError::InvalidShape {
        op: "model",
        detail: e.to_string(),
    };
    let build = |tape: &mut Tape, vars: &[Var]| -> std::result::Result<Var, TensorError> {
        let (xv, params) = vars.split_last().expect("input var");
        let binding = model.bind_vars(tape, params).map_err(model_err)?;
        model
            .training_logits(tape, &binding, *xv, &mode)
            .map_err(model_err)
    };
    fd_error(&inputs, &build, seed).map_err(other)
}

/// Reference combine over branches by direct loops.
fn naive_combine(branches: &[Tensor4], combine: Combine) -> Vec<f64> {
    let len = branches[0].len();
    (0..len)
        .map(|j| match combine {
            Combine::Max => {
                let mut best = branches[0].data()[j];
                for b in &branches[1..] {
                    if b.data()[j] > best {
                        best = b.data()[j];
                    }
                }
                best
            }
            Combine::Mean => {
                let mut s = 0.0;
                for b in branches {
                    s += b.data()[j];
                }
                s / branches.len() as f64
            }
        })
        .collect()
}

fn naive_softmax(t: &Tensor4) -> Tensor4 {
    let [n, classes, _, _] = t.shape();
    let mut out = t.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * classes..(i + 1) * classes];
        let mut m = f64::NEG_INFINITY;
        for &v in row.iter() {
            m = m.max(v);
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// `feature_max`, `feature_mean` and `score_combine` against direct loops on
/// `sets` random branch sets of random size and shape.
pub fn ensemble_oracles(sets: usize, seed: u64, mean_tol: f64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_exact = true;
    let mut score_max_exact = true;
    let mut worst_mean = 0.0_f64;
    let mut worst_score_mean = 0.0_f64;
    let rel = |got: &[f64], want: &[f64]| {
        got.iter()
            .zip(want)
            .map(|(g, w)| if g == w { 0.0 } else { (g - w).abs() / w.abs() })
            .fold(0.0, f64::max)
    };
    for _ in 0..sets {
        let count = rng.gen_range(1..=6);
        let shape = [
            rng.gen_range(1..=3),
            rng.gen_range(1..=4),
            rng.gen_range(1..=5),
            rng.gen_range(1..=5),
        ];
        let branches: Vec<Tensor4> = (0..count).map(|_| random_tensor(shape, &mut rng)).collect();
        let set = BranchSet::new(branches.clone()).map_err(other)?;
        let got = feature_combine(&set, Combine::Max);
        max_exact &= got.data() == naive_combine(&branches, Combine::Max).as_slice();
        let got = feature_combine(&set, Combine::Mean);
        worst_mean = worst_mean.max(rel(got.data(), &naive_combine(&branches, Combine::Mean)));

        let score_shape = [shape[0], rng.gen_range(1..=10), 1, 1];
        let scores: Vec<Tensor4> = (0..count)
            .map(|_| random_tensor(score_shape, &mut rng).scale(4.0))
            .collect();
        let probs: Vec<Tensor4> = scores.iter().map(naive_softmax).collect();
        let sset = ScoreSet::new(scores).map_err(other)?;
        let got = score_combine(&sset, Combine::Max);
        score_max_exact &= got.data() == naive_combine(&probs, Combine::Max).as_slice();
        let got = score_combine(&sset, Combine::Mean);
        worst_score_mean =
            worst_score_mean.max(rel(got.data(), &naive_combine(&probs, Combine::Mean)));
    }
    Ok(vec![
        Check::new(
            "feature_max oracle",
            max_exact,
            format!("{sets} sets, exact={max_exact}"),
        ),
        Check::new(
            "feature_mean oracle",
            worst_mean <= mean_tol,
            format!("{sets} sets, max rel dev {worst_mean:.3e} (limit {mean_tol:.0e})"),
        ),
        Check::new(
            "score_combine max oracle",
            score_max_exact,
            format!("{sets} sets, exact={score_max_exact}"),
        ),
        Check::new(
            "score_combine mean oracle",
            worst_score_mean <= mean_tol,
            format!("{sets} sets, max rel dev {worst_score_mean:.3e} (limit {mean_tol:.0e})"),
        ),
    ])
}

/// Every suite with its default sizes and limits.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut checks = invariance(100, seed, 1e-9)?;
    checks.extend(equivariance(100, seed, 1e-12)?);
    checks.extend(gradients(seed, 1e-6)?);
    checks.extend(ensemble_oracles(1000, seed, 1e-15)?);
    Ok(checks)
}
