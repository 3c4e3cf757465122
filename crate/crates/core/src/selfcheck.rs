//! Finite-difference checks of every differentiable operator and loss, plus
//! analytic loss oracles.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_forward, AttentionKind, AttentionParams};
use crate::error::Result;
use crate::gradcheck::{grad_check_many_with_fault, separated_uniform, DEFAULT_STEP};
use crate::graph::{Fault, Graph, PoolMode, Var};
use crate::losses::{
    argmax_pseudo_loss, cdkd_loss, ce_loss, dice_loss, entropy, kl_map, one_hot, sup_loss, t_softmax, um_loss,
    um_prime_loss, KlDirection,
};
use crate::tensor::Tensor;

/// Maximum relative error accepted by a gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Absolute tolerance of the analytic oracles.
pub const ORACLE_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst relative gradient error, or the oracle deviation.
    pub error: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfCheckReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

type Body = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct GradCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    body: Body,
}

/// Weighted sum with fixed random weights, so that every output element
/// gets a distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = separated_uniform(g.shape(y), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let yw = g.mul(y, w)?;
    Ok(g.sum(yw))
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    rng: &mut ChaCha8Rng,
    body: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs: shapes.iter().map(|s| separated_uniform(s, -1.0, 1.0, rng)).collect(),
        body: Box::new(body),
    }
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    separated_uniform(shape, 0.2, 1.5, rng)
}

/// Fixed 0/1 labels on a `[1, 2, 3]` grid, both classes present.
fn labels() -> Tensor<f64> {
    Tensor::new([1, 2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).expect("static shape")
}

fn operator_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut cases = vec![
        case("conv2d", &[&[2, 2, 4, 4], &[3, 2, 3, 3], &[3]], rng, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            project(g, y, 1)
        }),
        case("conv2d_strided", &[&[1, 2, 5, 5], &[2, 2, 3, 3], &[2]], rng, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 0, 2)?;
            project(g, y, 2)
        }),
        case("max_pool2d", &[&[2, 2, 4, 4]], rng, |g, v| {
            let y = g.max_pool2d(v[0], 2, 2)?;
            project(g, y, 3)
        }),
        case("spatial_pool_avg", &[&[2, 3, 2, 3]], rng, |g, v| {
            let y = g.spatial_pool(v[0], PoolMode::Avg)?;
            project(g, y, 4)
        }),
        case("spatial_pool_max", &[&[2, 3, 2, 3]], rng, |g, v| {
            let y = g.spatial_pool(v[0], PoolMode::Max)?;
            project(g, y, 5)
        }),
        case("channel_pool_avg", &[&[2, 3, 2, 3]], rng, |g, v| {
            let y = g.channel_pool(v[0], PoolMode::Avg)?;
            project(g, y, 6)
        }),
        case("channel_pool_max", &[&[2, 3, 2, 3]], rng, |g, v| {
            let y = g.channel_pool(v[0], PoolMode::Max)?;
            project(g, y, 7)
        }),
        case("concat_channels", &[&[2, 1, 2, 2], &[2, 3, 2, 2]], rng, |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            project(g, y, 8)
        }),
        case("upsample_nearest", &[&[1, 2, 2, 3]], rng, |g, v| {
            let y = g.upsample_nearest(v[0], 2)?;
            project(g, y, 9)
        }),
        case("linear", &[&[3, 4], &[2, 4], &[2]], rng, |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, 10)
        }),
        case("sigmoid", &[&[2, 5]], rng, |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, 11)
        }),
        case("relu", &[&[2, 5]], rng, |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 12)
        }),
        case("softmax_channel", &[&[2, 3, 2, 2]], rng, |g, v| {
            let y = g.softmax_channel(v[0])?;
            project(g, y, 13)
        }),
        case("add_sub_mul", &[&[2, 3], &[2, 3], &[2, 3]], rng, |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[2])?;
            let m = g.mul(s, v[1])?;
            project(g, m, 14)
        }),
        case("mul_broadcast", &[&[2, 3, 2, 2], &[2, 3, 1, 1]], rng, |g, v| {
            let y = g.mul_broadcast(v[0], v[1])?;
            project(g, y, 16)
        }),
        case("mul_broadcast_spatial", &[&[2, 3, 2, 2], &[2, 1, 2, 2]], rng, |g, v| {
            let y = g.mul_broadcast(v[0], v[1])?;
            project(g, y, 17)
        }),
        case("scale_add_scalar", &[&[2, 3]], rng, |g, v| {
            let s = g.scale(v[0], -1.7);
            let y = g.add_scalar(s, 0.3);
            project(g, y, 18)
        }),
        case("mean", &[&[3, 4]], rng, |g, v| {
            let m = g.mean(v[0]);
            Ok(g.scale(m, 2.5))
        }),
        case("reshape_slices", &[&[3, 4, 2, 1]], rng, |g, v| {
            let c = g.slice_channels(v[0], 1, 2)?;
            let b = g.slice_batch(c, 1, 2)?;
            let r = g.reshape(b, [2, 4])?;
            project(g, r, 19)
        }),
        case("dropout", &[&[2, 3, 2, 2]], rng, |g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(20);
            let y = g.dropout(v[0], 0.5, &mut r, true)?;
            project(g, y, 20)
        }),
        case("feature_noise", &[&[2, 3, 2, 2]], rng, |g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(21);
            let y = g.feature_noise(v[0], 0.3, &mut r, true)?;
            project(g, y, 21)
        }),
    ];
    let p = positive(&[2, 3], rng);
    let q = positive(&[2, 3], rng);
    cases.push(GradCase {
        name: "div",
        inputs: vec![p, q],
        body: Box::new(|g, v| {
            let y = g.div(v[0], v[1])?;
            project(g, y, 15)
        }),
    });
    cases.push(GradCase {
        name: "log_clamped",
        inputs: vec![positive(&[2, 4], rng)],
        body: Box::new(|g, v| {
            let y = g.log_clamped(v[0], 1e-8);
            project(g, y, 22)
        }),
    });
    for (name, kind) in [
        ("attention_ca", AttentionKind::Ca),
        ("attention_sa", AttentionKind::Sa),
        ("attention_csa", AttentionKind::Csa),
    ] {
        let mut slots = Vec::new();
        AttentionParams::<()>::build(kind, "a", 4, 2, 3, &mut |s| {
            slots.push(s);
            Ok(())
        })
        .expect("static layout");
        let mut inputs = vec![separated_uniform(&[2, 4, 3, 3], -1.0, 1.0, rng)];
        inputs.extend(slots.iter().map(|s| separated_uniform(&s.shape, -1.0, 1.0, rng)));
        cases.push(GradCase {
            name,
            inputs,
            body: Box::new(move |g, v| {
                let mut it = v[1..].iter().copied();
                let p = AttentionParams::build(kind, "a", 4, 2, 3, &mut |_| Ok(it.next().expect("one var per slot")))?;
                let y = attention_forward(g, v[0], &p)?;
                project(g, y, 23)
            }),
        });
    }
    cases
}

/// Logits `[1, 2, 2, 3]` for three branches; losses see their softmax.
fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let z: &[usize] = &[1, 2, 2, 3];
    let y = one_hot(&labels(), 2).expect("binary labels");
    let teacher = |g: &mut Graph<f64>, seed: u64| -> Var {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        g.constant(separated_uniform(&[1, 2, 2, 3], -2.0, 2.0, &mut r))
    };
    let y1 = y.clone();
    let y2 = y.clone();
    let y3 = y;
    vec![
        case("t_softmax_t10", &[z], rng, |g, v| {
            let p = t_softmax(g, v[0], 10.0)?;
            project(g, p, 30)
        }),
        case("t_softmax_t05", &[z], rng, |g, v| {
            let p = t_softmax(g, v[0], 0.5)?;
            project(g, p, 31)
        }),
        case("kl_map", &[z], rng, move |g, v| {
            let tz = teacher(g, 39);
            let t = g.softmax_channel(tz)?;
            let s = g.softmax_channel(v[0])?;
            kl_map(g, t, s)
        }),
        case("cdkd_teacher_student", &[z], rng, move |g, v| {
            let zs = [v[0], teacher(g, 32), teacher(g, 33)];
            Ok(cdkd_loss(g, &zs, 10.0, KlDirection::TeacherStudent)?.per_branch[0])
        }),
        case("cdkd_student_teacher", &[z], rng, move |g, v| {
            let zs = [v[0], teacher(g, 34), teacher(g, 35)];
            Ok(cdkd_loss(g, &zs, 10.0, KlDirection::StudentTeacher)?.per_branch[0])
        }),
        case("argmax_pseudo", &[z], rng, move |g, v| {
            let zs = [v[0], teacher(g, 36), teacher(g, 37)];
            let ps = zs.iter().map(|&z| g.softmax_channel(z)).collect::<Result<Vec<_>>>()?;
            Ok(argmax_pseudo_loss(g, &ps)?.per_branch[0])
        }),
        case("entropy", &[z], rng, |g, v| {
            let p = g.softmax_channel(v[0])?;
            let e = entropy(g, p)?;
            project(g, e, 38)
        }),
        case("um", &[z, z, z], rng, |g, v| {
            let ps = v.iter().map(|&z| g.softmax_channel(z)).collect::<Result<Vec<_>>>()?;
            um_loss(g, &ps)
        }),
        case("um_prime", &[z, z, z], rng, |g, v| {
            let ps = v.iter().map(|&z| g.softmax_channel(z)).collect::<Result<Vec<_>>>()?;
            um_prime_loss(g, &ps)
        }),
        case("dice", &[z], rng, move |g, v| {
            let p = g.softmax_channel(v[0])?;
            let yv = g.constant(y1.clone());
            dice_loss(g, p, yv)
        }),
        case("cross_entropy", &[z], rng, move |g, v| {
            let p = g.softmax_channel(v[0])?;
            let yv = g.constant(y2.clone());
            ce_loss(g, p, yv)
        }),
        case("supervised", &[z, z, z], rng, move |g, v| {
            let ps = v.iter().map(|&z| g.softmax_channel(z)).collect::<Result<Vec<_>>>()?;
            let yv = g.constant(y3.clone());
            Ok(sup_loss(g, &ps, yv)?.total)
        }),
    ]
}

fn pixels(px: &[[f64; 2]]) -> Tensor<f64> {
    let n = px.len();
    let mut d = vec![0.0; 2 * n];
    for (i, v) in px.iter().enumerate() {
        d[i] = v[0];
        d[n + i] = v[1];
    }
    Tensor::new([1, 2, 1, n], d).expect("static shape")
}

fn oracle(name: &str, got: f64, want: f64) -> CheckResult {
    let error = (got - want).abs();
    CheckResult {
        name: name.into(),
        error,
        passed: error <= ORACLE_TOLERANCE,
        detail: format!("got {got:.6}, expected {want:.6}"),
    }
}

fn mean_entropy_at(t: f64, z: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let p = t_softmax(&mut g, zv, t)?;
    let e = entropy(&mut g, p)?;
    let m = g.mean(e);
    Ok(g.value(m).item())
}

fn oracle_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut g = Graph::new();
    let t = g.constant(pixels(&[[0.5, 0.5]]));
    let s = g.constant(pixels(&[[0.75, 0.25]]));
    let kl = kl_map(&mut g, t, s)?;
    out.push(oracle("oracle_kl", g.value(kl).item(), 0.5 * (0.5f64 / 0.75).ln() + 0.5 * 2f64.ln()));

    let ps: Vec<Var> = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]
        .iter()
        .map(|p| g.constant(pixels(&[*p])))
        .collect();
    let um = um_loss(&mut g, &ps)?;
    let (a, b) = (2.0f64 / 3.0, 1.0f64 / 3.0);
    out.push(oracle("oracle_um_conflict", g.value(um).item(), -(a * a.ln() + b * b.ln())));

    let z = g.constant(pixels(&[[2.0, 0.0]]));
    let p = t_softmax(&mut g, z, 10.0)?;
    let e = 0.2f64.exp();
    out.push(oracle("oracle_t_softmax", g.value(p).data()[0], e / (e + 1.0)));

    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let zr = separated_uniform(&[2, 3, 3, 3], -3.0, 3.0, &mut rng);
    let zv = g.constant(zr.clone());
    let plain = g.softmax_channel(zv)?;
    let t1 = t_softmax(&mut g, zv, 1.0)?;
    let same = g.value(plain).data().iter().zip(g.value(t1).data()).all(|(a, b)| a.to_bits() == b.to_bits());
    out.push(CheckResult {
        name: "t1_is_softmax_bitwise".into(),
        error: if same { 0.0 } else { 1.0 },
        passed: same,
        detail: String::new(),
    });

    let temps = [0.5, 1.0, 2.0, 5.0, 10.0, 20.0];
    let ents = temps.iter().map(|&t| mean_entropy_at(t, &zr)).collect::<Result<Vec<_>>>()?;
    let monotone = ents.windows(2).all(|w| w[0] < w[1]);
    out.push(CheckResult {
        name: "entropy_increases_with_temperature".into(),
        error: if monotone { 0.0 } else { 1.0 },
        passed: monotone,
        detail: format!("{ents:.4?}"),
    });
    Ok(out)
}

/// Runs every check; `fault` corrupts the named backward rule to
/// demonstrate detection.
pub fn run_selfcheck(fault: Option<Fault>) -> Result<SelfCheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let mut results = Vec::new();
    let mut cases = operator_cases(&mut rng);
    cases.extend(loss_cases(&mut rng));
    for c in cases {
        let error = grad_check_many_with_fault(&c.body, &c.inputs, DEFAULT_STEP, fault)?;
        results.push(CheckResult {
            name: format!("grad_{}", c.name),
            error,
            passed: error < GRAD_TOLERANCE,
            detail: format!("max relative error {error:.3e}"),
        });
    }
    results.extend(oracle_checks()?);
    Ok(SelfCheckReport {
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}
