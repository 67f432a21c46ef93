//! Acceptance battery: one line per criterion, `[PASS]` or `[FAIL]`.
//!
//! Criteria that miss their target are reported, not hidden; the process exits
//! non-zero on a failure only when `BTW_ACCEPTANCE_STRICT=1` is set, so the
//! battery can sit in `cargo test` as a report.

use std::time::Instant;

use btw_core::env::{explore, additive_martingale, EnvTree, ExploreCaps};
use btw_core::ltgw::{
    sample_max_type, sample_offspring_quenched, sample_tree, stopping_line, OffspringSampler, TreeCaps,
};
use btw_core::rng::{derive_seed, stream};
use btw_core::rw1d::{default_battery, many_to_one_check, sample_path, tilt};
use btw_core::spine::{estimate_ka, exact_ka, killed_walk_beta, sample_qstar_env, KilledWalkCaps, PijTable};
use btw_core::stats::{
    chi_square_gof_categorical, chi_square_homogeneity, ecdf, hill_auto, ks_distance_to_cdf, ks_two_sample,
    log_grid, loglog_intercept_fixed_slope, mean_se, tail_slope_fit, TailEstimate,
};
use btw_core::walk::{local_time_tree, run_excursions, WalkCaps, WalkTrace};
use btw_core::{par, Kappa, ReproductionLaw};

const SEED: u64 = 0x00b1_a5ed_3a1c;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

/// Shared between criteria 9 and 10: c* from the ENV-B tail of max L̄_{τ₁}.
#[derive(Default)]
struct Shared {
    c_star_b: Option<f64>,
}

fn laws() -> [(&'static str, ReproductionLaw); 3] {
    [("ENV-A", ReproductionLaw::env_a()), ("ENV-B", ReproductionLaw::env_b()), ("ENV-C", ReproductionLaw::env_c())]
}

fn fmt_hill(e: &TailEstimate) -> String {
    let plateau = e
        .plateau
        .as_ref()
        .map(|p| format!(", plateau {:.3} on k∈[{}, {}]", p.index, p.k_range.0, p.k_range.1))
        .unwrap_or_default();
    format!("α̂={:.3}±{:.3} (k={}, censored {:.2e}{plateau})", e.index, e.se, e.k_order, e.censored_fraction)
}

fn c1_exact_arithmetic(_: &mut Shared) -> Outcome {
    let law = ReproductionLaw::env_a();
    let one = law.psi_exact(1).is_some_and(|r| r == num_rational_one());
    let three = law.psi_exact(3).is_some_and(|r| r == num_rational_one());
    let kappa = law.solve_kappa(64.0, 1e-13).map(|k| k.value.as_f64()).unwrap_or(f64::NAN);
    Outcome::new(
        one && three && (kappa - 3.0).abs() < 1e-9,
        format!("ψ(1)=1 exact: {one}, ψ(3)=1 exact: {three}, κ={kappa:.12}"),
    )
}

fn num_rational_one() -> num_rational::BigRational {
    num_rational::BigRational::from_integer(1.into())
}

fn c2_negative_multinomial(_: &mut Shared) -> Outcome {
    let n = 100_000u64;
    let mut pass = true;
    let mut parts = Vec::new();
    for weights in [vec![1.0], vec![0.6, 0.4], vec![1.25]] {
        for k in [1u64, 3] {
            let walk: Vec<Vec<u64>> = par::map_with(
                n,
                || (EnvTree::star(&weights), WalkTrace::new(WalkCaps::default())),
                |(env, trace), i| {
                    let mut rng = stream(SEED, "c2-walk", i);
                    let stats = run_excursions(env, trace, k, &mut rng);
                    assert!(!stats.censored);
                    env.children(0).unwrap().map(|c| trace.local_time(c)).collect()
                },
            );
            let urn: Vec<Vec<u64>> = par::map(n, |i| {
                let mut rng = stream(SEED, "c2-urn", i);
                let mut out = Vec::new();
                sample_offspring_quenched(k, &weights, OffspringSampler::default(), &mut rng, &mut out).unwrap();
                out
            });
            let r = chi_square_homogeneity(&walk, &urn).unwrap();
            pass &= r.p_value > 1e-3;
            parts.push(format!("{weights:?}/k={k}: p={:.3}", r.p_value));
        }
    }
    Outcome::new(pass, parts.join("; "))
}

fn c3_annealed_tree(_: &mut Shared) -> Outcome {
    let n = 100_000u64;
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, law) in laws().into_iter().take(2) {
        let walk: Vec<Option<(u32, u64)>> = par::map_with(
            n,
            || (EnvTree::new(&law, 0), WalkTrace::new(WalkCaps::default())),
            |(env, trace), i| {
                env.reset(derive_seed(SEED, "c3-env", i));
                let mut rng = stream(SEED, "c3-walk", i);
                if run_excursions(env, trace, 1, &mut rng).censored {
                    return None;
                }
                let t = local_time_tree(env, trace).unwrap();
                Some((t.children(0).len() as u32, t.z(1)))
            },
        );
        let censored = walk.iter().filter(|x| x.is_none()).count();
        let walk: Vec<(u32, u64)> = walk.into_iter().flatten().collect();
        let caps = TreeCaps { max_depth: 1, ..TreeCaps::default() };
        let direct: Vec<(u32, u64)> = par::map(n, |i| {
            let mut rng = stream(SEED, "c3-tree", i);
            let t = sample_tree(1, &law, &caps, &mut rng).unwrap();
            (t.children(0).len() as u32, t.z(1))
        });
        let r = chi_square_homogeneity(&walk, &direct).unwrap();
        pass &= r.p_value > 1e-3;
        parts.push(format!("{name}: p={:.3} (dof {}, {censored} censored walks excluded)", r.p_value, r.dof.unwrap_or(0)));
    }
    Outcome::new(pass, parts.join("; "))
}

fn c4_martingales(_: &mut Shared) -> Outcome {
    let law = ReproductionLaw::env_a();
    let n = 100_000u64;
    let mut pass = true;
    let mut worst = 0.0f64;
    let caps = TreeCaps { max_depth: 3, ..TreeCaps::default() };
    for k in [1u64, 2, 5] {
        let z: Vec<[f64; 3]> = par::map(n, |i| {
            let mut rng = stream(SEED, "c4-tree", i * 8 + k);
            let t = sample_tree(k, &law, &caps, &mut rng).unwrap();
            [1, 2, 3].map(|g| t.z(g) as f64 / k as f64)
        });
        for g in 0..3 {
            let (m, se) = mean_se(&z.iter().map(|x| x[g]).collect::<Vec<_>>());
            let dev = (m - 1.0).abs() / se;
            worst = worst.max(dev);
            pass &= dev < 4.0;
        }
    }
    let w: Vec<[f64; 3]> = par::map_with(
        n,
        || EnvTree::new(&law, 0),
        |env, i| {
            env.reset(derive_seed(SEED, "c4-env", i));
            [1, 2, 3].map(|g| additive_martingale(env, g).unwrap())
        },
    );
    let mut wparts = Vec::new();
    for g in 0..3 {
        let (m, se) = mean_se(&w.iter().map(|x| x[g]).collect::<Vec<_>>());
        let dev = (m - 1.0).abs() / se;
        worst = worst.max(dev);
        pass &= dev < 4.0;
        wparts.push(format!("W_{}={m:.4}±{se:.4}", g + 1));
    }
    Outcome::new(pass, format!("max |Ê−1|/SE over 12 checks = {worst:.2}; {}", wparts.join(", ")))
}

fn c5_step_identity(_: &mut Shared) -> Outcome {
    let runs = 10_000u64;
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, law) in laws() {
        let res: Vec<Option<bool>> = par::map_with(
            runs,
            || (EnvTree::new(&law, 0), WalkTrace::new(WalkCaps::default())),
            |(env, trace), i| {
                env.reset(derive_seed(SEED, "c5-env", i));
                let mut rng = stream(SEED, "c5-walk", i);
                let n = 1 + i % 3;
                let st = run_excursions(env, trace, n, &mut rng);
                if st.censored {
                    return None;
                }
                let increasing = st.tau.windows(2).all(|w| w[0] < w[1]);
                Some(increasing && st.tau.last() == Some(&(2 * n + 2 * trace.local_time_sum())))
            },
        );
        let censored = res.iter().filter(|r| r.is_none()).count();
        let bad = res.iter().filter(|r| **r == Some(false)).count();
        pass &= bad == 0;
        parts.push(format!("{name}: {bad} violations, {censored} censored"));
    }
    Outcome::new(pass, parts.join("; "))
}

fn c6_many_to_one(_: &mut Shared) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, law) in laws() {
        let r = many_to_one_check(&law, &default_battery(), 1_000_000, SEED).unwrap();
        let z = r.max_abs_z();
        pass &= z < 4.0;
        parts.push(format!(
            "{name}: max|z|={z:.2} over {} comparisons",
            r.many_to_one.len() + r.change_of_measure.len()
        ));
    }
    Outcome::new(pass, parts.join("; "))
}

fn c7_spine(_: &mut Shared) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    // (a)
    let mut worst = 0.0f64;
    for (_, law) in laws() {
        let table = PijTable::new(&law, 10);
        for i in 1..=10 {
            worst = worst.max((table.row(i).unwrap().sum() - 1.0).abs());
        }
    }
    pass &= worst < 1e-6;
    parts.push(format!("(a) max|Σp−1|={worst:.1e}"));
    // (b)
    let law = ReproductionLaw::env_a();
    let table = PijTable::new(&law, 10);
    let row = table.row(1).unwrap();
    let n = 100_000u64;
    let draws: Vec<Option<u64>> = par::map(n, |i| {
        let mut q = sample_qstar_env(&law, 1, derive_seed(SEED, "c7-env", i)).unwrap();
        let mut rng = stream(SEED, "c7-walk", i);
        let t = killed_walk_beta(&mut q, 1, &KilledWalkCaps::default(), &mut rng).unwrap();
        (!t.censored).then(|| t.spine_beta[1])
    });
    let censored = draws.iter().filter(|d| d.is_none()).count();
    let draws: Vec<u64> = draws.into_iter().flatten().collect();
    let probs: Vec<f64> = (0..=row.j_max()).map(|j| row.p(j)).collect();
    let r = chi_square_gof_categorical(&draws, &probs).unwrap();
    pass &= r.p_value > 1e-3;
    parts.push(format!("(b) ENV-A β(w₁) vs p_1j: p={:.3} ({censored} censored)", r.p_value));
    // (c)
    for (name, law) in laws().into_iter().take(2) {
        let s = tilt(&law, 1.0).unwrap();
        let spine: Vec<f64> =
            par::map(n, |i| sample_qstar_env(&law, 1, derive_seed(SEED, "c7-q", i)).unwrap().displacements()[0]);
        let walk: Vec<f64> = par::map(n, |i| sample_path(&s, 1, &mut stream(SEED, "c7-s", i))[0]);
        let r = ks_two_sample(&spine, &walk).unwrap();
        pass &= r.p_value > 1e-3;
        parts.push(format!("(c) {name} KS p={:.3}", r.p_value));
    }
    Outcome::new(pass, parts.join("; "))
}

fn c8_w_and_me(_: &mut Shared) -> Outcome {
    let law = ReproductionLaw::env_a();
    let caps = ExploreCaps::for_law(&law).unwrap();
    let n = 200_000u64;
    let pairs: Vec<(f64, f64, bool)> = par::map_with(
        n,
        || EnvTree::new(&law, 0),
        |env, i| {
            env.reset(derive_seed(SEED, "c8-env", i));
            env.set_max_nodes(caps.max_nodes);
            let mut rng = stream(SEED, "c8-tie", i);
            let p = explore(env, &caps, &mut rng).pair;
            (p.w_inf, p.m_e, p.censored)
        },
    );
    let cens: Vec<bool> = pairs.iter().map(|p| p.2).collect();
    let w: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let me: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let hw = hill_auto(&w, Some(&cens)).unwrap();
    let hm = hill_auto(&me, Some(&cens)).unwrap();
    let pass = (hw.index - 3.0).abs() <= 0.3 && (hm.index - 3.0).abs() <= 0.3;
    Outcome::new(pass, format!("W∞: {}; M_e: {}", fmt_hill(&hw), fmt_hill(&hm)))
}

fn walk_max_samples(law: &ReproductionLaw, n: u64, label: &str) -> (Vec<f64>, Vec<bool>) {
    let res: Vec<(f64, bool)> = par::map_with(
        n,
        || (EnvTree::new(law, 0), WalkTrace::new(WalkCaps::default())),
        |(env, trace), i| {
            env.reset(derive_seed(SEED, label, i));
            let mut rng = stream(SEED, label, i);
            let st = run_excursions(env, trace, 1, &mut rng);
            (st.max_edge_lt as f64, st.censored)
        },
    );
    res.into_iter().unzip()
}

fn c9_max_local_time(shared: &mut Shared) -> Outcome {
    let n = 100_000u64;
    let mut pass = true;
    let mut parts = Vec::new();
    let [(_, a), (_, b), (_, c)] = laws();
    for (name, law, target, tol) in [("ENV-B", &b, -1.0, 0.2), ("ENV-A", &a, -1.5, 0.3)] {
        let (x, cens) = walk_max_samples(law, n, &format!("c9-{name}"));
        let fit = tail_slope_fit(&x, Some(&cens), 1e-2, 100, 12).unwrap();
        pass &= (fit.fit.slope - target).abs() <= tol;
        if name == "ENV-B" {
            let icpt = loglog_intercept_fixed_slope(&fit.curve, fit.range, -1.0).unwrap();
            shared.c_star_b = Some(icpt.exp());
        }
        parts.push(format!(
            "{name}: slope {:.3} on [{:.0}, {:.0}] (r²={:.3}, {} censored)",
            fit.fit.slope,
            fit.range.0,
            fit.range.1,
            fit.fit.r2,
            cens.iter().filter(|c| **c).count()
        ));
    }
    let (x, cens) = walk_max_samples(&c, n, "c9-ENV-C");
    let moment = |v: &[f64], p: i32| v.iter().map(|x| x.powi(p)).sum::<f64>() / v.len() as f64;
    let half = &x[..x.len() / 2];
    let mut worst = 0.0f64;
    let mut ms = Vec::new();
    for p in 1..=4 {
        let (m_half, m_full) = (moment(half, p), moment(&x, p));
        let rel = (m_full - m_half).abs() / m_full;
        worst = worst.max(rel);
        pass &= m_full.is_finite() && rel < 0.1;
        ms.push(format!("m{p}={m_full:.3e}"));
    }
    parts.push(format!(
        "ENV-C: {} , max relative change n/2→n {worst:.3} ({} censored)",
        ms.join(" "),
        cens.iter().filter(|c| **c).count()
    ));
    Outcome::new(pass, parts.join("; "))
}

fn max_type_over_n(law: &ReproductionLaw, n: u64, replicas: u64, label: &str) -> (Vec<f64>, usize) {
    let res: Vec<(f64, bool)> = par::map(replicas, |i| {
        let mut rng = stream(SEED, label, i);
        let m = sample_max_type(n, law, OffspringSampler::GammaPoisson, 20_000_000, &mut rng).unwrap();
        (m.max_type as f64 / n as f64, m.censored)
    });
    let censored = res.iter().filter(|r| r.1).count();
    (res.into_iter().map(|r| r.0).collect(), censored)
}

fn me_pairs(law: &ReproductionLaw, count: u64, label: &str) -> Vec<(f64, f64)> {
    let caps = ExploreCaps::for_law(law).unwrap();
    par::map_with(
        count,
        || EnvTree::new(law, 0),
        |env, i| {
            env.reset(derive_seed(SEED, label, i));
            env.set_max_nodes(caps.max_nodes);
            let p = explore(env, &caps, &mut stream(SEED, label, i)).pair;
            (p.w_inf, p.m_e)
        },
    )
}

fn c10_maxln(shared: &mut Shared) -> Outcome {
    let n = 500u64;
    let replicas = 5_000u64;
    let mut pass = true;
    let mut parts = Vec::new();
    let [(_, a), (_, b), _] = laws();

    let (ratio, censored) = max_type_over_n(&a, n, replicas, "c10-A");
    let me: Vec<f64> = me_pairs(&a, 20_000, "c10-A-env").into_iter().map(|p| p.1).collect();
    let ks = ks_two_sample(&ratio, &me).unwrap();
    pass &= ks.statistic < 0.08;
    parts.push(format!("ENV-A: KS(max/n, M_e)={:.4} ({censored} censored replicas)", ks.statistic));

    let (ratio, censored) = max_type_over_n(&b, n, replicas, "c10-B");
    let pairs = me_pairs(&b, 20_000, "c10-B-env");
    let mut me: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    me.sort_by(f64::total_cmp);
    let mut sorted_ratio = ratio.clone();
    sorted_ratio.sort_by(f64::total_cmp);
    let lo = me[me.len() / 100].min(sorted_ratio[sorted_ratio.len() / 100]).max(1.0);
    let hi = me[me.len() * 99 / 100].max(sorted_ratio[sorted_ratio.len() * 99 / 100]);
    let grid = log_grid(lo, hi.max(lo * 1.01), 20);
    let excess = grid.iter().map(|&t| ecdf(&sorted_ratio, t) - ecdf(&me, t)).fold(f64::MIN, f64::max);
    pass &= excess <= 0.03;
    parts.push(format!("ENV-B: max_t [F_max/n − F_Me](t)={excess:.4} ({censored} censored)"));

    match shared.c_star_b {
        Some(c) => {
            let f = |t: f64| pairs.iter().map(|&(w, m)| if m <= t { (-c * w / t).exp() } else { 0.0 }).sum::<f64>() / pairs.len() as f64;
            let d = ks_distance_to_cdf(&ratio, f).unwrap();
            pass &= d < 0.1;
            parts.push(format!("ENV-B self-consistency: ĉ*={c:.4}, KS={d:.4}"));
        }
        None => {
            pass = false;
            parts.push("ENV-B self-consistency: no ĉ* from criterion 9".into());
        }
    }
    Outcome::new(pass, parts.join("; "))
}

fn line_stats(law: &ReproductionLaw, k: u64, n: u64, label: &str) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let caps = TreeCaps { stop_at_line: true, ..TreeCaps::default() };
    let res: Vec<(f64, f64, bool)> = par::map(n, |i| {
        let mut rng = stream(SEED, label, i);
        let s = stopping_line(&sample_tree(k, law, &caps, &mut rng).unwrap());
        (s.l1 as f64, s.m1 as f64, s.censored)
    });
    let mut l1 = Vec::with_capacity(res.len());
    let mut m1 = Vec::with_capacity(res.len());
    let mut c = Vec::with_capacity(res.len());
    for (l, m, cc) in res {
        l1.push(l);
        m1.push(m);
        c.push(cc);
    }
    (l1, m1, c)
}

fn c11_line_tails(_: &mut Shared) -> Outcome {
    let law = ReproductionLaw::env_a();
    let (l1, m1, cens) = line_stats(&law, 1, 200_000, "c11");
    let hl = hill_auto(&l1, Some(&cens)).unwrap();
    let hm = hill_auto(&m1, Some(&cens)).unwrap();
    let pass = (hl.index - 3.0).abs() <= 0.3 && (hm.index - 3.0).abs() <= 0.4;
    Outcome::new(pass, format!("L₁: {}; M₁: {}", fmt_hill(&hl), fmt_hill(&hm)))
}

fn c12_moment_bounds(_: &mut Shared) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, law) in laws().into_iter().take(2) {
        let kappa = law.kappa().unwrap().value.as_f64();
        let alpha = (kappa - 1.0) / 2.0;
        let mut rl = Vec::new();
        let mut rm = Vec::new();
        for i in [1u64, 2, 4, 8] {
            let (l1, m1, _) = line_stats(&law, i, 100_000, &format!("c12-{name}-{i}"));
            let norm = (i as f64).powf(1.0 + alpha);
            rl.push(l1.iter().map(|x| x.powf(1.0 + alpha)).sum::<f64>() / l1.len() as f64 / norm);
            rm.push(m1.iter().map(|x| x.powf(1.0 + alpha)).sum::<f64>() / m1.len() as f64 / norm);
        }
        let ok = |r: &[f64]| r.iter().all(|&x| x <= 3.0 * r[0]);
        pass &= ok(&rl) && ok(&rm);
        let f = |r: &[f64]| r.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",");
        parts.push(format!("{name} (α={alpha:.3}): L₁ ratios [{}], M₁ ratios [{}]", f(&rl), f(&rm)));
    }
    Outcome::new(pass, parts.join("; "))
}

fn c13_ka(_: &mut Shared) -> Outcome {
    let law = ReproductionLaw::env_a();
    let kappa = match law.kappa().unwrap().value {
        Kappa::Finite(k) => k,
        Kappa::Infinite => unreachable!(),
    };
    let table = PijTable::new(&law, 32);
    let mut rng = stream(SEED, "c13", 0);
    let est: Vec<(u64, f64, f64, f64)> = [4u64, 8, 16, 32]
        .iter()
        .map(|&a| {
            let e = estimate_ka(&table, a, kappa, 400_000, &mut rng).unwrap();
            (a, e.mean, e.se, exact_ka(&table, a, kappa).unwrap())
        })
        .collect();
    let increasing = est.windows(2).all(|w| w[1].1 > w[0].1);
    let (k16, k32) = (est[2].1, est[3].1);
    let rel = (k32 - k16).abs() / k32;
    let list: Vec<String> =
        est.iter().map(|(a, m, se, ex)| format!("K_{a}={m:.2}±{se:.2} (linear solve {ex:.2})")).collect();
    Outcome::new(
        increasing && rel < 0.2,
        format!("{}; increasing: {increasing}; |K_32−K_16|/K_32={rel:.3}", list.join(", ")),
    )
}

type Criterion = (u32, &'static str, f64, fn(&mut Shared) -> Outcome);

fn main() {
    // cargo passes harness flags such as --nocapture; they do not apply here
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 13] = [
        (1, "exact arithmetic (ψ, κ)", 1.0, c1_exact_arithmetic),
        (2, "negative multinomial equivalence", 30.0, c2_negative_multinomial),
        (3, "annealed tree equivalence", 120.0, c3_annealed_tree),
        (4, "martingale identities", 60.0, c4_martingales),
        (5, "walk step identity", 60.0, c5_step_identity),
        (6, "many-to-one and change of measure", 120.0, c6_many_to_one),
        (7, "spine consistency", 180.0, c7_spine),
        (8, "tails of W∞ and M_e", 300.0, c8_w_and_me),
        (9, "tail regimes of max local time", 1200.0, c9_max_local_time),
        (10, "max local time over n excursions", 1800.0, c10_maxln),
        (11, "stopping line tails", 600.0, c11_line_tails),
        (12, "moment-bound probes", 300.0, c12_moment_bounds),
        (13, "K_A stabilization", 300.0, c13_ka),
    ];
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    let mut ran = 0;
    println!("acceptance battery on {} worker thread(s)", par::threads());
    for (id, name, limit, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == &id.to_string()) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let out = run(&mut shared);
        let secs = start.elapsed().as_secs_f64();
        let in_time = secs < limit;
        let pass = out.pass && in_time;
        if !pass {
            failed.push(id);
        }
        let timing = if in_time { format!("{secs:.1}s") } else { format!("{secs:.1}s, over the {limit}s limit") };
        println!(
            "[{}] {id:>2} {name}: {} ({timing})",
            if pass { "PASS" } else { "FAIL" },
            out.detail
        );
    }
    println!("{}/{ran} criteria passed; failed: {failed:?}", ran - failed.len());
    if !failed.is_empty() && std::env::var("BTW_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
