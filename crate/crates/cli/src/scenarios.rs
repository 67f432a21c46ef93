//! The scenarios behind each subcommand.
//!
//! Draw `g` of a run belongs to replica `g / samples` and takes its randomness
//! from a stream keyed by (seed, replica, label, g mod samples), so output
//! depends only on the configuration and never on scheduling.

use std::collections::BTreeMap;

use btw_core::env::{explore, EnvTree, ExploreCaps};
use btw_core::ltgw::{nbm_moment_probe, sample_max_type, sample_offspring_quenched, sample_tree, OffspringSampler, TreeCaps};
use btw_core::rng::{derive_seed, stream, Stream};
use btw_core::rw1d::{default_battery, ladder_renewal, many_to_one_check, sample_path, tilt, LadderCaps, LadderKind};
use btw_core::spine::{estimate_ka, exact_ka, killed_walk_beta, sample_qstar_env, KilledWalkCaps, PijTable};
use btw_core::stats::{
    chi_square_gof_categorical, chi_square_homogeneity, ecdf, hill_auto, ks_distance_to_cdf, ks_two_sample, log_grid,
    loglog_intercept_fixed_slope, survival_curve, tail_slope_fit, SurvivalPoint,
};
use btw_core::walk::{local_time_tree, run_excursions, WalkCaps, WalkTrace};
use btw_core::{par, Kappa, ReproductionLaw};
use serde_json::{json, Map, Value};

use crate::config::{RunConfig, Scenario};
use crate::output::{Assertion, Report, Table};
use crate::plot::{FitLine, Plot};
use crate::CliError;

/// p-value below which an equivalence check fails.
const P_MIN: f64 = 1e-3;

fn replica(cfg: &RunConfig, g: u64) -> (u64, u64) {
    (derive_seed(cfg.seed, "replica", g / cfg.samples), g % cfg.samples)
}

fn rng_for(cfg: &RunConfig, label: &str, g: u64) -> Stream {
    let (seed, i) = replica(cfg, g);
    stream(seed, label, i)
}

fn seed_for(cfg: &RunConfig, label: &str, g: u64) -> u64 {
    let (seed, i) = replica(cfg, g);
    derive_seed(seed, label, i)
}

fn walk_caps(cfg: &RunConfig) -> WalkCaps {
    let d = WalkCaps::default();
    WalkCaps {
        max_steps: cfg.caps.max_steps.unwrap_or(d.max_steps),
        max_nodes: cfg.caps.max_nodes.map_or(d.max_nodes, |m| m as usize),
    }
}

fn explore_caps(cfg: &RunConfig) -> Result<ExploreCaps, CliError> {
    let mut c = ExploreCaps::for_law(cfg.law())?;
    if let Some(b) = cfg.caps.barrier {
        c.barrier = b;
    }
    if let Some(m) = cfg.caps.max_nodes {
        c.max_nodes = m as usize;
    }
    if let Some(d) = cfg.caps.depth_cap {
        c.max_depth = d;
    }
    if let Some(t) = cfg.params.t_trunc {
        c.w_depth_cap = t;
    }
    Ok(c)
}

fn kappa(law: &ReproductionLaw) -> Result<Kappa, CliError> {
    Ok(law.kappa()?.value)
}

fn kappa_json(k: Kappa) -> Value {
    match k {
        Kappa::Finite(v) => json!(v),
        Kappa::Infinite => json!("infinite"),
    }
}

fn base_summary(cfg: &RunConfig) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("scenario".into(), json!(cfg.scenario.name()));
    m.insert("law".into(), json!(cfg.law_source));
    m.insert("seed".into(), json!(cfg.seed));
    m.insert("samples_per_replica".into(), json!(cfg.samples));
    m.insert("replicas".into(), json!(cfg.replicas));
    if let Some(law) = &cfg.law {
        if let Ok(k) = law.kappa() {
            m.insert("kappa".into(), kappa_json(k.value));
        }
    }
    m
}

fn run_line(cfg: &RunConfig) -> String {
    format!(
        "law {}, seed {}, {} replica(s) x {} samples",
        cfg.law_source.as_deref().unwrap_or("none"),
        cfg.seed,
        cfg.replicas,
        cfg.samples
    )
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn hill_json(samples: &[f64], censored: Option<&[bool]>) -> Value {
    match hill_auto(samples, censored) {
        Ok(e) => to_json(&e),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn count(flags: &[bool]) -> usize {
    flags.iter().filter(|c| **c).count()
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Upper end of a survival grid: the value still exceeded by ~10 samples.
fn tail_top(v: &[f64]) -> f64 {
    let s = sorted(v);
    s[s.len().saturating_sub(10)]
}

pub fn run(cfg: &RunConfig) -> Result<Report, CliError> {
    match cfg.scenario {
        Scenario::EnvReport => env_report(cfg),
        Scenario::TailWM => tail_w_m(cfg),
        Scenario::TailMaxl => tail_maxl(cfg),
        Scenario::MaxlnConverge => maxln_converge(cfg),
        Scenario::NbmCheck => nbm_check(cfg),
        Scenario::TreeEquivalence => tree_equivalence(cfg),
        Scenario::SpineCheck => spine_check(cfg),
        Scenario::PijTable => pij_table(cfg),
        Scenario::MtoCheck => mto_check(cfg),
        Scenario::LadderReport => ladder_report(cfg),
    }
}

fn env_report(cfg: &RunConfig) -> Result<Report, CliError> {
    let law = cfg.law();
    let cond = law.conditions();
    let t_hi = match &cond.kappa {
        Ok(k) if k.value.is_finite() => (k.value.as_f64().ceil() + 1.0).clamp(4.0, 64.0),
        _ => 4.0,
    };
    let mut psi = Table::new("", &["t", "psi", "psi_exact"])
        .note("psi(t) = E[sum_|u|=1 e^{-t V(u)}]; psi_exact is the exact rational value at integer t")
        .note(format!("law {}", cfg.law_source.as_deref().unwrap_or("none")));
    let steps = (t_hi * 4.0) as u32;
    let mut points = Vec::new();
    for s in 0..=steps {
        let t = s as f64 / 4.0;
        let exact = if s % 4 == 0 { law.psi_exact(s / 4).map(|r| r.to_string()).unwrap_or_default() } else { String::new() };
        let v = law.psi(t);
        psi.push(vec![t.into(), v.into(), exact.into()]);
        points.push((t, v));
    }
    let kappa_text = match &cond.kappa {
        Ok(k) => match k.value {
            Kappa::Finite(v) => format!("{v}"),
            Kappa::Infinite => "infinite".into(),
        },
        Err(e) => format!("error: {e}"),
    };
    let mut conditions = Table::new("conditions", &["condition", "value", "holds"])
        .note("hard conditions: supercritical, normalized, negative derivative, kappa, moments; non-lattice is a warning");
    let rows: [(&str, String, bool); 6] = [
        ("supercritical psi(0) > 1", cond.psi0.to_string(), cond.supercritical),
        (
            "normalized psi(1) = 1",
            match cond.psi1_exact_one {
                Some(e) => format!("{} (exact: {e})", cond.psi1),
                None => cond.psi1.to_string(),
            },
            cond.normalized,
        ),
        ("negative derivative psi'(1) < 0", cond.psi_prime1.to_string(), cond.negative_derivative),
        ("kappa root of psi = 1 on (1, inf]", kappa_text, cond.kappa.is_ok()),
        ("moment condition", "finite support".into(), cond.finite_moments),
        (
            "non-lattice support",
            cond.lattice.witness.map(|(a, b)| format!("witness {a} / {b}")).unwrap_or_else(|| "lattice".into()),
            cond.lattice.non_lattice,
        ),
    ];
    for (name, value, holds) in rows {
        conditions.push(vec![name.into(), value.into(), holds.into()]);
    }
    let mut summary = base_summary(cfg);
    summary.insert(
        "conditions".into(),
        json!({
            "psi0": cond.psi0,
            "psi1": cond.psi1,
            "psi1_exact_one": cond.psi1_exact_one,
            "psi_prime1": cond.psi_prime1,
            "kappa": cond.kappa.as_ref().map(to_json).unwrap_or_else(|e| json!({ "error": e.to_string() })),
            "lattice": to_json(&cond.lattice),
            "all_required_hold": cond.all_required_hold(),
            "first_violation": cond.first_violation(),
        }),
    );
    let plot = Plot::new("psi(t)", "t", "psi(t)").with_series("psi", points.into_iter().filter(|p| p.0 > 0.0));
    Ok(Report { tables: vec![psi, conditions], summary, plot, assertion: None })
}

fn w_pairs(cfg: &RunConfig, count: u64, label: &str) -> Result<Vec<(f64, f64, bool)>, CliError> {
    let law = cfg.law();
    let caps = explore_caps(cfg)?;
    Ok(par::map_with(
        count,
        || EnvTree::new(law, 0),
        |env, g| {
            env.reset(seed_for(cfg, label, g));
            env.set_max_nodes(caps.max_nodes);
            let p = explore(env, &caps, &mut rng_for(cfg, label, g)).pair;
            (p.w_inf, p.m_e, p.censored)
        },
    ))
}

fn tail_w_m(cfg: &RunConfig) -> Result<Report, CliError> {
    let pairs = w_pairs(cfg, cfg.total_samples(), "w-m")?;
    let w: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let me: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let cens: Vec<bool> = pairs.iter().map(|p| p.2).collect();
    let n = pairs.len() as f64;
    let grid = log_grid(1.0, tail_top(&me).max(2.0), cfg.params.grid_points.unwrap_or(30));
    let scales = cfg.params.scales.clone().unwrap_or_else(|| vec![0.0, 0.5, 1.0, 2.0]);
    let kappa = kappa(cfg.law())?;

    let mut joint = Table::new("", &["a", "x", "survival", "exceedances", "series"])
        .note("survival = empirical P(W_inf >= a x, M_e >= x), M_e = exp(-min V); a = 0 is the tail of M_e")
        .note("explorations stopped by the node budget are counted with their truncated values (see summary)")
        .note(run_line(cfg));
    let mut plot = Plot::new("joint tail of (W_inf, M_e)", "x", "P(W_inf >= a x, M_e >= x)");
    let mut gamma = Map::new();
    for &a in &scales {
        let name = format!("a={a}");
        let mut pts = Vec::new();
        for &x in &grid {
            let c = pairs.iter().filter(|p| p.1 >= x && p.0 >= a * x).count();
            joint.push(vec![a.into(), x.into(), (c as f64 / n).into(), c.into(), name.clone().into()]);
            pts.push(SurvivalPoint { x, s: c as f64 / n, exceedances: c });
        }
        // x^κ P(…) averaged over the upper half of the usable grid
        if let Kappa::Finite(k) = kappa {
            let usable: Vec<&SurvivalPoint> = pts.iter().filter(|p| p.exceedances >= 100).collect();
            let upper = &usable[usable.len() / 2..];
            let g = if upper.is_empty() {
                Value::Null
            } else {
                json!(upper.iter().map(|p| p.x.powf(k) * p.s).sum::<f64>() / upper.len() as f64)
            };
            gamma.insert(name.clone(), g);
        }
        plot = plot.with_series(&name, pts.iter().map(|p| (p.x, p.s)));
    }
    let wgrid = log_grid(tail_top(&w).min(1.0).max(1e-3), tail_top(&w).max(2.0), cfg.params.grid_points.unwrap_or(30));
    let mut wt = Table::new("w_inf", &["x", "survival", "exceedances", "series"])
        .note("survival = Kaplan-Meier P(W_inf >= x); budget-stopped explorations are right-censored")
        .note(run_line(cfg));
    for p in survival_curve(&w, Some(&cens), &wgrid)? {
        wt.push(vec![p.x.into(), p.s.into(), p.exceedances.into(), "w_inf".into()]);
    }
    let mut summary = base_summary(cfg);
    summary.insert("censored".into(), json!(count(&cens)));
    summary.insert("hill_w_inf".into(), hill_json(&w, Some(&cens)));
    summary.insert("hill_m_e".into(), hill_json(&me, Some(&cens)));
    summary.insert("gamma_hat".into(), Value::Object(gamma));
    summary.insert("mean_w_inf".into(), json!(w.iter().sum::<f64>() / n));
    Ok(Report { tables: vec![joint, wt], summary, plot, assertion: None })
}

fn walk_maxima(cfg: &RunConfig, n: u64, label: &str) -> (Vec<f64>, Vec<bool>) {
    let law = cfg.law();
    let caps = walk_caps(cfg);
    par::map_with(
        cfg.total_samples(),
        || (EnvTree::new(law, 0), WalkTrace::new(caps)),
        |(env, trace), g| {
            env.reset(seed_for(cfg, label, g));
            let st = run_excursions(env, trace, n, &mut rng_for(cfg, label, g));
            (st.max_edge_lt as f64, st.censored)
        },
    )
    .into_iter()
    .unzip()
}

fn tail_maxl(cfg: &RunConfig) -> Result<Report, CliError> {
    let n = cfg.params.n_excursions.unwrap_or(1);
    let (x, cens) = walk_maxima(cfg, n, "maxl");
    let kappa = kappa(cfg.law())?;
    let grid = log_grid(1.0, tail_top(&x).max(2.0), cfg.params.grid_points.unwrap_or(40));
    let curve = survival_curve(&x, Some(&cens), &grid)?;
    let mut surv = Table::new("", &["x", "survival", "exceedances", "series"])
        .note(format!("x = max over edges of the local time after {n} excursion(s), in crossings"))
        .note("survival = Kaplan-Meier P(max >= x); runs stopped by the step or node budget are right-censored at their value")
        .note(run_line(cfg));
    for p in &curve {
        surv.push(vec![p.x.into(), p.s.into(), p.exceedances.into(), "max_local_time".into()]);
    }

    let predicted = match kappa {
        Kappa::Finite(k) if k < 2.0 => Some(-1.0),
        Kappa::Finite(k) if k > 2.0 => Some(-k / 2.0),
        Kappa::Finite(_) => Some(-1.0),
        Kappa::Infinite => None,
    };
    let mut fits = Table::new("fits", &["quantity", "value", "detail"])
        .note("log-log survival fits and moments of the maximal edge local time")
        .note(run_line(cfg));
    let mut summary = base_summary(cfg);
    let start = cfg.params.fit_start.unwrap_or(1e-2);
    let min_exc = cfg.params.fit_min_exceedances.unwrap_or(100);
    let mut fit_line = None;
    match tail_slope_fit(&x, Some(&cens), start, min_exc, 12) {
        Ok(f) => {
            let detail = format!("survival from {start} down to {min_exc} exceedances");
            fits.push(vec!["loglog_slope".into(), f.fit.slope.into(), detail.into()]);
            fits.push(vec!["fit_range_lo".into(), f.range.0.into(), "".into()]);
            fits.push(vec!["fit_range_hi".into(), f.range.1.into(), "".into()]);
            fits.push(vec!["fit_r2".into(), f.fit.r2.into(), "".into()]);
            if kappa.is_finite() && kappa.as_f64() < 2.0 {
                if let Ok(c) = loglog_intercept_fixed_slope(&f.curve, f.range, -1.0) {
                    fits.push(vec!["c_star".into(), c.exp().into(), "intercept with slope held at -1".into()]);
                    summary.insert("c_star".into(), json!(c.exp()));
                }
            }
            fit_line = Some(FitLine { slope: f.fit.slope, intercept: f.fit.intercept, x_range: f.range });
            summary.insert("tail_fit".into(), json!({ "fit": to_json(&f.fit), "range": [f.range.0, f.range.1] }));
        }
        Err(e) => {
            summary.insert("tail_fit".into(), json!({ "error": e.to_string() }));
        }
    }
    if let Some(p) = predicted {
        fits.push(vec!["predicted_slope".into(), p.into(), "-1 for kappa < 2, -kappa/2 for kappa > 2".into()]);
        summary.insert("predicted_slope".into(), json!(p));
    }
    match hill_auto(&x, Some(&cens)) {
        Ok(h) => fits.push(vec!["hill_index".into(), h.index.into(), format!("k = {}", h.k_order).into()]),
        Err(e) => fits.push(vec!["hill_index".into(), f64::NAN.into(), e.to_string().into()]),
    }
    let half = &x[..x.len() / 2];
    let moment = |v: &[f64], p: i32| v.iter().map(|x| x.powi(p)).sum::<f64>() / v.len().max(1) as f64;
    let mut moments = Vec::new();
    for p in 1..=4 {
        let full = moment(&x, p);
        let rel = (full - moment(half, p)).abs() / full;
        fits.push(vec![format!("moment_{p}").into(), full.into(), format!("relative change from first half: {rel}").into()]);
        moments.push(json!({ "order": p, "value": full, "relative_change_from_half": rel }));
    }
    summary.insert("moments".into(), Value::Array(moments));
    summary.insert("censored".into(), json!(count(&cens)));
    summary.insert("n_excursions".into(), json!(n));
    let mut plot = Plot::new("tail of the maximal edge local time", "x", "P(max L >= x)")
        .with_series("max_local_time", curve.iter().map(|p| (p.x, p.s)));
    plot.fit = fit_line;
    Ok(Report { tables: vec![surv, fits], summary, plot, assertion: None })
}

fn maxln_converge(cfg: &RunConfig) -> Result<Report, CliError> {
    let law = cfg.law();
    let n = cfg.params.n_excursions.unwrap_or(500);
    let method = cfg.params.method.clone().unwrap_or_else(|| "tree".into());
    let (ratio, cens): (Vec<f64>, Vec<bool>) = if method == "walk" {
        let (x, c) = walk_maxima(cfg, n, "maxln-walk");
        (x.into_iter().map(|v| v / n as f64).collect(), c)
    } else {
        let max_nodes = cfg.caps.max_nodes.unwrap_or(20_000_000);
        let res: Vec<btw_core::Result<(f64, bool)>> = par::map(cfg.total_samples(), |g| {
            let m = sample_max_type(n, law, OffspringSampler::GammaPoisson, max_nodes, &mut rng_for(cfg, "maxln-tree", g))?;
            Ok((m.max_type as f64 / n as f64, m.censored))
        });
        res.into_iter().collect::<btw_core::Result<Vec<_>>>()?.into_iter().unzip()
    };
    let me_count = cfg.total_samples() * cfg.params.me_ratio.unwrap_or(4);
    let pairs = w_pairs(cfg, me_count, "maxln-env")?;
    let me: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (sr, sm) = (sorted(&ratio), sorted(&me));
    let lo = sr[0].min(sm[0]).max(1e-3);
    let hi = sr[sr.len() - 1].max(sm[sm.len() - 1]).max(lo * 2.0);
    let grid = log_grid(lo, hi, cfg.params.grid_points.unwrap_or(40));

    let mut t = Table::new("", &["x", "series", "survival", "cdf"])
        .note(format!("max_over_n = (max edge local time after n = {n} excursions) / n, method {method}"))
        .note("m_e = exp(-min V) from independent environments; survival = P(X >= x), cdf = P(X <= x), empirical")
        .note("budget-stopped samples keep their truncated values and are counted in the summary")
        .note(run_line(cfg));
    let mut excess = f64::MIN;
    let mut plot = Plot::new("max local time over n excursions vs M_e", "x", "P(X >= x)");
    for (name, s) in [("max_over_n", &sr), ("m_e", &sm)] {
        let mut pts = Vec::new();
        for &x in &grid {
            let surv = 1.0 - s.partition_point(|v| *v < x) as f64 / s.len() as f64;
            t.push(vec![x.into(), name.into(), surv.into(), ecdf(s, x).into()]);
            pts.push((x, surv));
        }
        plot = plot.with_series(name, pts);
    }
    for &x in &grid {
        excess = excess.max(ecdf(&sr, x) - ecdf(&sm, x));
    }
    let ks = ks_two_sample(&ratio, &me)?;
    let mut summary = base_summary(cfg);
    summary.insert("n_excursions".into(), json!(n));
    summary.insert("method".into(), json!(method));
    summary.insert("censored".into(), json!(count(&cens)));
    summary.insert("env_censored".into(), json!(pairs.iter().filter(|p| p.2).count()));
    summary.insert("ks_max_over_n_vs_m_e".into(), to_json(&ks));
    summary.insert("max_cdf_excess_over_m_e".into(), json!(excess));
    if let (Some(c), Kappa::Finite(k)) = (cfg.params.c_star, kappa(law)?) {
        if k < 2.0 {
            let f = |t: f64| {
                pairs.iter().map(|&(w, m, _)| if m <= t { (-c * w / t).exp() } else { 0.0 }).sum::<f64>() / pairs.len() as f64
            };
            summary.insert("self_consistency_ks".into(), json!({ "c_star": c, "distance": ks_distance_to_cdf(&ratio, f)? }));
        }
    }
    Ok(Report { tables: vec![t], summary, plot, assertion: None })
}

fn nbm_check(cfg: &RunConfig) -> Result<Report, CliError> {
    let stars = cfg.params.stars.clone().unwrap_or_else(|| vec![vec![1.0], vec![0.6, 0.4], vec![1.25]]);
    let ks = cfg.params.k_list.clone().unwrap_or_else(|| vec![1, 3]);
    let total = cfg.total_samples();
    let caps = walk_caps(cfg);
    let mut t = Table::new("", &["star", "k", "statistic", "dof", "p_value", "pass"])
        .note("chi-square homogeneity of children crossing counts: walk on a quenched star vs the urn sampler")
        .note(format!("star = children weights A_j; k = crossings of the root edge; pass means p > {P_MIN}"))
        .note(run_line(cfg));
    let mut all = true;
    let mut plot = Plot::new("first child's crossings", "m", "P(beta >= m)");
    for (si, weights) in stars.iter().enumerate() {
        let label = format!("{weights:?}");
        for (ki, &k) in ks.iter().enumerate() {
            let walk: Vec<Option<Vec<u64>>> = par::map_with(
                total,
                || (EnvTree::star(weights), WalkTrace::new(caps)),
                |(env, trace), g| {
                    let st = run_excursions(env, trace, k, &mut rng_for(cfg, &format!("nbm-walk-{si}-{k}"), g));
                    (!st.censored).then(|| env.children(0).unwrap().map(|c| trace.local_time(c)).collect())
                },
            );
            let walk: Vec<Vec<u64>> = walk.into_iter().flatten().collect();
            let urn: Vec<btw_core::Result<Vec<u64>>> = par::map(total, |g| {
                let mut out = Vec::new();
                let mut rng = rng_for(cfg, &format!("nbm-urn-{si}-{k}"), g);
                sample_offspring_quenched(k, weights, OffspringSampler::default(), &mut rng, &mut out)?;
                Ok(out)
            });
            let urn = urn.into_iter().collect::<btw_core::Result<Vec<_>>>()?;
            let r = chi_square_homogeneity(&walk, &urn)?;
            let pass = r.p_value > P_MIN;
            all &= pass;
            t.push(vec![label.clone().into(), k.into(), r.statistic.into(), r.dof.unwrap_or(0).into(), r.p_value.into(), pass.into()]);
            if si == 0 && ki == 0 {
                for (name, v) in [("walk", &walk), ("sampler", &urn)] {
                    let first: Vec<f64> = v.iter().map(|c| c[0] as f64).collect();
                    let top = first.iter().copied().fold(1.0, f64::max);
                    let grid: Vec<f64> = (1..=top as u64).map(|m| m as f64).collect();
                    let curve = survival_curve(&first, None, &grid)?;
                    plot = plot.with_series(name, curve.iter().map(|p| (p.x, p.s)));
                }
            }
        }
    }
    let alpha = cfg.params.alpha.unwrap_or(2.0);
    let mut probe = Table::new("moments", &["star", "n", "lhs", "lhs_se", "rhs_base", "ratio"])
        .note(format!("E|sum z_j zeta_j - n sum A_j z_j|^alpha with z = 1, alpha = {alpha}, against the bound's shape"))
        .note("ratio = lhs / rhs_base; a bounded ratio across n is the expected behaviour");
    let mut fitted = Vec::new();
    for (si, weights) in stars.iter().enumerate() {
        let z = vec![1.0; weights.len()];
        let mut rng = stream(cfg.seed, "nbm-probe", si as u64);
        let rep = nbm_moment_probe(weights, &z, &[1, 2, 4, 8, 16, 32], alpha, total as usize, &mut rng)?;
        for r in &rep.rows {
            probe.push(vec![format!("{weights:?}").into(), r.n.into(), r.lhs.into(), r.lhs_se.into(), r.rhs_base.into(), r.ratio.into()]);
        }
        fitted.push(json!({ "star": weights, "fitted_c2": rep.fitted_c2 }));
    }
    let mut summary = base_summary(cfg);
    summary.insert("moment_probe".into(), Value::Array(fitted));
    let assertion = Assertion { passed: all, detail: format!("every chi-square p-value above {P_MIN}: {all}") };
    Ok(Report { tables: vec![t, probe], summary, plot, assertion: Some(assertion) })
}

fn tree_equivalence(cfg: &RunConfig) -> Result<Report, CliError> {
    let law = cfg.law();
    let total = cfg.total_samples();
    let caps = walk_caps(cfg);
    let walk: Vec<btw_core::Result<Option<(u64, u64)>>> = par::map_with(
        total,
        || (EnvTree::new(law, 0), WalkTrace::new(caps)),
        |(env, trace), g| {
            env.reset(seed_for(cfg, "tree-eq-env", g));
            if run_excursions(env, trace, 1, &mut rng_for(cfg, "tree-eq-walk", g)).censored {
                return Ok(None);
            }
            let t = local_time_tree(env, trace)?;
            Ok(Some((t.children(0).len() as u64, t.z(1))))
        },
    );
    let walk = walk.into_iter().collect::<btw_core::Result<Vec<_>>>()?;
    let censored = walk.iter().filter(|w| w.is_none()).count();
    let walk: Vec<(u64, u64)> = walk.into_iter().flatten().collect();
    let tcaps = TreeCaps { max_depth: 1, ..TreeCaps::default() };
    let direct: Vec<btw_core::Result<(u64, u64)>> = par::map(total, |g| {
        let t = sample_tree(1, law, &tcaps, &mut rng_for(cfg, "tree-eq-tree", g))?;
        Ok((t.children(0).len() as u64, t.z(1)))
    });
    let direct = direct.into_iter().collect::<btw_core::Result<Vec<_>>>()?;
    let r = chi_square_homogeneity(&walk, &direct)?;

    let mut tally: BTreeMap<(u64, u64), (u64, u64)> = BTreeMap::new();
    for k in &walk {
        tally.entry(*k).or_default().0 += 1;
    }
    for k in &direct {
        tally.entry(*k).or_default().1 += 1;
    }
    let mut t = Table::new("", &["children", "z1", "walk", "tree"])
        .note("joint counts of (number of root children, Z_1) after one excursion vs the direct tree sampler")
        .note(format!("{censored} walk runs stopped by the budget are excluded"))
        .note(run_line(cfg));
    for (k, (wc, dc)) in &tally {
        t.push(vec![k.0.into(), k.1.into(), (*wc).into(), (*dc).into()]);
    }
    let mut plot = Plot::new("Z_1 under walk and tree sampler", "m", "P(Z_1 >= m)");
    for (name, v) in [("walk", &walk), ("tree", &direct)] {
        let z: Vec<f64> = v.iter().map(|p| p.1 as f64).collect();
        let top = z.iter().copied().fold(1.0, f64::max);
        let grid: Vec<f64> = (1..=top as u64).map(|m| m as f64).collect();
        let curve = survival_curve(&z, None, &grid)?;
        plot = plot.with_series(name, curve.iter().map(|p| (p.x, p.s)));
    }
    let mut summary = base_summary(cfg);
    summary.insert("chi_square".into(), to_json(&r));
    summary.insert("censored".into(), json!(censored));
    let passed = r.p_value > P_MIN;
    let assertion = Assertion { passed, detail: format!("chi-square p = {} (threshold {P_MIN})", r.p_value) };
    Ok(Report { tables: vec![t], summary, plot, assertion: Some(assertion) })
}

fn spine_check(cfg: &RunConfig) -> Result<Report, CliError> {
    let law = cfg.law();
    let total = cfg.total_samples();
    let i_max = cfg.params.i_max.unwrap_or(10);
    let a_list = cfg.params.a_list.clone().unwrap_or_else(|| vec![4, 8, 16, 32]);
    let table = PijTable::new(law, i_max.max(a_list.iter().copied().max().unwrap_or(0)));
    let mut checks = Table::new("", &["check", "statistic", "p_value", "pass"])
        .note("row_sums: max |sum_j p_ij - 1| over i <= i_max; killed_walk: chi-square of beta(w_1) against p_1j")
        .note("qstar_displacement: KS between the spine's first displacement and the tilted walk's first step")
        .note("killed walks stopped by the budget are excluded (count in summary)")
        .note(run_line(cfg));
    let mut rows = Table::new("row_sums", &["i", "sum", "tail_bound", "j_max"]).note("p_ij rows truncated where the tail bound drops below 1e-9");
    let mut worst = 0.0f64;
    for i in 1..=i_max {
        let r = table.row(i)?;
        worst = worst.max((r.sum() - 1.0).abs());
        rows.push(vec![i.into(), r.sum().into(), r.tail_bound.into(), r.j_max().into()]);
    }
    let rows_ok = worst < 1e-6;
    checks.push(vec!["row_sums".into(), worst.into(), f64::NAN.into(), rows_ok.into()]);

    let kcaps = KilledWalkCaps {
        max_steps: cfg.caps.max_steps.unwrap_or(KilledWalkCaps::default().max_steps),
        max_nodes: cfg.caps.max_nodes.map_or(KilledWalkCaps::default().max_nodes, |m| m as usize),
    };
    let draws: Vec<btw_core::Result<Option<u64>>> = par::map(total, |g| {
        let mut q = sample_qstar_env(law, 1, seed_for(cfg, "spine-env", g))?;
        let t = killed_walk_beta(&mut q, 1, &kcaps, &mut rng_for(cfg, "spine-walk", g))?;
        Ok((!t.censored).then(|| t.spine_beta[1]))
    });
    let draws = draws.into_iter().collect::<btw_core::Result<Vec<_>>>()?;
    let censored = draws.iter().filter(|d| d.is_none()).count();
    let draws: Vec<u64> = draws.into_iter().flatten().collect();
    let row1 = table.row(1)?;
    let probs: Vec<f64> = (0..=row1.j_max()).map(|j| row1.p(j)).collect();
    let chi = chi_square_gof_categorical(&draws, &probs)?;
    let chi_ok = chi.p_value > P_MIN;
    checks.push(vec!["killed_walk".into(), chi.statistic.into(), chi.p_value.into(), chi_ok.into()]);

    let s1 = tilt(law, 1.0)?;
    let spine: Vec<btw_core::Result<f64>> =
        par::map(total, |g| Ok(sample_qstar_env(law, 1, seed_for(cfg, "spine-q", g))?.displacements()[0]));
    let spine = spine.into_iter().collect::<btw_core::Result<Vec<_>>>()?;
    let walk: Vec<f64> = par::map(total, |g| sample_path(&s1, 1, &mut rng_for(cfg, "spine-s", g))[0]);
    let ks = ks_two_sample(&spine, &walk)?;
    let ks_ok = ks.p_value > P_MIN;
    checks.push(vec!["qstar_displacement".into(), ks.statistic.into(), ks.p_value.into(), ks_ok.into()]);

    let mut ka = Table::new("ka", &["a", "estimate", "se", "hit_fraction", "exact"])
        .note("K_A = E[(beta(w_sigma_A) - 1)^(kappa-1); sigma_A < tau_hat_1] for the spine type chain from state 1")
        .note("exact = linear solve over states 2..A of the truncated kernel");
    let mut plot = Plot::new("K_A", "A", "K_A");
    let mut ka_json = Vec::new();
    if let Kappa::Finite(k) = kappa(law)? {
        let ka_samples = cfg.params.ka_samples.unwrap_or(100_000) as usize;
        let mut est = Vec::new();
        let mut ex = Vec::new();
        for &a in &a_list {
            let e = estimate_ka(&table, a, k, ka_samples, &mut stream(cfg.seed, "ka", a))?;
            let x = exact_ka(&table, a, k)?;
            ka.push(vec![a.into(), e.mean.into(), e.se.into(), e.hit_fraction.into(), x.into()]);
            est.push((a as f64, e.mean));
            ex.push((a as f64, x));
            ka_json.push(json!({ "a": a, "estimate": e.mean, "se": e.se, "exact": x }));
        }
        plot = plot.with_series("estimate", est).with_series("exact", ex);
    }
    let mut summary = base_summary(cfg);
    summary.insert("row_sum_max_error".into(), json!(worst));
    summary.insert("killed_walk_chi_square".into(), to_json(&chi));
    summary.insert("killed_walk_censored".into(), json!(censored));
    summary.insert("qstar_ks".into(), to_json(&ks));
    summary.insert("ka".into(), Value::Array(ka_json));
    let passed = rows_ok && chi_ok && ks_ok;
    let assertion = Assertion {
        passed,
        detail: format!("row sums {rows_ok}, killed walk {chi_ok}, displacement {ks_ok}"),
    };
    Ok(Report { tables: vec![checks, rows, ka], summary, plot, assertion: Some(assertion) })
}

fn pij_table(cfg: &RunConfig) -> Result<Report, CliError> {
    let law = cfg.law();
    let i_max = cfg.params.i_max.unwrap_or(10);
    let table = PijTable::new(law, i_max);
    let mut t = Table::new("", &["i", "j", "p_ij", "row_tail_bound"])
        .note("p_ij = C(i+j-1, i) sum_b prob_b sum_k A_k^j / (1 + A_k)^(i+j): spine type chain kernel")
        .note("each row stops where the bound on the remaining mass (row_tail_bound) drops below 1e-9")
        .note(format!("law {}", cfg.law_source.as_deref().unwrap_or("none")));
    let mut plot = Plot::new("spine kernel rows", "j", "p_ij");
    for i in 1..=i_max {
        let r = table.row(i)?;
        let j_hi = cfg.params.j_max.map_or(r.j_max(), |j| j.min(r.j_max()));
        for j in 0..=j_hi {
            t.push(vec![i.into(), j.into(), r.p(j).into(), r.tail_bound.into()]);
        }
        if i == 1 || i == i_max {
            plot = plot.with_series(&format!("i={i}"), (1..=j_hi).map(|j| (j as f64, r.p(j))));
        }
    }
    let mut summary = base_summary(cfg);
    summary.insert("i_max".into(), json!(i_max));
    Ok(Report { tables: vec![t], summary, plot, assertion: None })
}

fn mto_check(cfg: &RunConfig) -> Result<Report, CliError> {
    let law = cfg.law();
    let rep = many_to_one_check(law, &default_battery(), cfg.total_samples(), cfg.seed)?;
    let mut t = Table::new("", &["identity", "box", "n", "lhs", "lhs_se", "rhs", "rhs_se", "z"])
        .note("many_to_one: E[sum_|z|=n 1{path in box}] vs E[e^{S_n} 1{S in box}]")
        .note("change_of_measure: E[1{S in box}] vs E[e^{(kappa-1) S^kappa_n} 1{S^kappa in box}]")
        .note("z = (lhs - rhs) / combined standard error")
        .note(run_line(cfg));
    let mut plot = Plot::new("many-to-one identities", "rhs", "lhs");
    for (name, rows) in [("many_to_one", &rep.many_to_one), ("change_of_measure", &rep.change_of_measure)] {
        for r in rows.iter() {
            t.push(vec![name.into(), r.name.clone().into(), r.n.into(), r.lhs.into(), r.lhs_se.into(), r.rhs.into(), r.rhs_se.into(), r.z.into()]);
        }
        plot = plot.with_series(name, rows.iter().map(|r| (r.rhs, r.lhs)));
    }
    let z = rep.max_abs_z();
    let mut summary = base_summary(cfg);
    summary.insert("max_abs_z".into(), json!(z));
    let assertion = Assertion { passed: z < 4.0, detail: format!("max |z| = {z} (threshold 4)") };
    Ok(Report { tables: vec![t], summary, plot, assertion: Some(assertion) })
}

fn ladder_report(cfg: &RunConfig) -> Result<Report, CliError> {
    let law = cfg.law();
    let exponent = match (cfg.params.tilt_exponent, kappa(law)?) {
        (Some(t), _) => t,
        (None, Kappa::Finite(k)) => k,
        (None, Kappa::Infinite) => {
            return Err(CliError::Config {
                field: "params.tilt_exponent".into(),
                message: "kappa is infinite; give the tilt exponent explicitly".into(),
            })
        }
    };
    let tilted = tilt(law, exponent)?;
    let points = cfg.params.grid_points.unwrap_or(21);
    let x_max = cfg.params.x_max.unwrap_or(5.0);
    let grid: Vec<f64> = (0..points).map(|i| x_max * i as f64 / (points - 1) as f64).collect();
    let caps = LadderCaps { epoch_cap: cfg.caps.max_steps.unwrap_or(LadderCaps::default().epoch_cap), ..LadderCaps::default() };
    let mut t = Table::new("", &["x", "estimate", "se", "kind"])
        .note(format!("renewal functions U([0, x]) of the ladder processes of the walk tilted by exponent {exponent}"))
        .note("strict+/weak+: visits of S to [0,x] before S_k <= 0 / < 0; strict-/weak-: visits of -S before S_k >= 0 / > 0")
        .note("descending sums stop once S falls below -(x_max + ln(1e9)/theta); the neglected mass is below 1e-9")
        .note(run_line(cfg));
    let mut plot = Plot::new("ladder renewal functions", "x", "U([0, x])");
    let mut kinds = Map::new();
    for kind in LadderKind::ALL {
        let e = ladder_renewal(&tilted, kind, &grid, cfg.total_samples(), &caps, derive_seed(cfg.seed, "ladder", 0))?;
        for ((x, v), se) in e.grid.iter().zip(&e.values).zip(&e.se) {
            t.push(vec![(*x).into(), (*v).into(), (*se).into(), kind.label().into()]);
        }
        plot = plot.with_series(kind.label(), e.grid.iter().copied().zip(e.values.iter().copied()));
        kinds.insert(
            kind.label().into(),
            json!({ "mean_steps": e.mean_steps, "truncated_fraction": e.truncated_fraction }),
        );
    }
    let mut summary = base_summary(cfg);
    summary.insert("tilt_exponent".into(), json!(exponent));
    summary.insert("drift".into(), json!(tilted.mean()));
    summary.insert("kinds".into(), Value::Object(kinds));
    Ok(Report { tables: vec![t], summary, plot, assertion: None })
}
