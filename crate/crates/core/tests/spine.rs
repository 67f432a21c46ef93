use btw_core::ltgw::{sample_tree, TreeCaps};
use btw_core::rng::stream;
use btw_core::spine::{
    chain_hitting, compute_pij, estimate_ka, exact_ka, killed_walk_beta, sample_qstar_env, sample_spine_chain,
    KilledWalkCaps, PijTable, DEFAULT_OVERFLOW_GUARD,
};
use btw_core::stats::mean_se;
use btw_core::ReproductionLaw;
use proptest::prelude::*;

#[test]
fn qstar_root_offspring_mean_is_the_size_biased_mean() {
    let law = ReproductionLaw::env_a();
    let n: Vec<f64> = (0..100_000u64)
        .map(|s| {
            let sp = sample_qstar_env(&law, 1, s).unwrap();
            sp.env.node(0).n_children as f64
        })
        .collect();
    let (m, _) = mean_se(&n);
    assert!((m / 1.75 - 1.0).abs() < 0.01, "{m}");
}

#[test]
fn mean_spine_increment() {
    let law = ReproductionLaw::env_a();
    let want = 0.625 * -(1.25f64.ln()) + 0.375 * 4f64.ln();
    assert!((want - 0.38040).abs() < 1e-5);
    assert!((want + law.psi_prime(1.0)).abs() < 1e-12);
    let d: Vec<f64> = (0..50_000u64).flat_map(|s| sample_qstar_env(&law, 4, s).unwrap().displacements()).collect();
    let (m, se) = mean_se(&d);
    assert!((m - want).abs() < 4.0 * se, "{m} ± {se}");
}

#[test]
fn killed_walk_types_are_positive_on_the_spine() {
    let law = ReproductionLaw::env_b();
    for s in 0..300u64 {
        let mut sp = sample_qstar_env(&law, 6, s).unwrap();
        let t = killed_walk_beta(&mut sp, 6, &KilledWalkCaps::default(), &mut stream(s, "killed", 0)).unwrap();
        if t.censored {
            continue;
        }
        assert_eq!(t.spine_beta[0], 1);
        assert!(t.spine_beta.iter().all(|&b| b >= 1), "{:?}", t.spine_beta);
    }
}

#[test]
fn size_biased_mean_z1() {
    // E_{P̂₁}[Z₁] = E_{P₁}[Z₁²]; ENV-C keeps both sides with finite variance
    let law = ReproductionLaw::env_c();
    let caps = TreeCaps { max_depth: 1, ..TreeCaps::default() };
    let sq: Vec<f64> = (0..200_000u64)
        .map(|s| {
            let z = sample_tree(1, &law, &caps, &mut stream(s, "plain", 0)).unwrap().z(1) as f64;
            z * z
        })
        .collect();
    let biased: Vec<f64> = (0..100_000u64)
        .filter_map(|s| {
            let mut sp = sample_qstar_env(&law, 1, s).unwrap();
            let t = killed_walk_beta(&mut sp, 1, &KilledWalkCaps::default(), &mut stream(s, "killed", 0)).unwrap();
            (!t.censored).then(|| t.z1() as f64)
        })
        .collect();
    let (a, sa) = mean_se(&sq);
    let (b, sb) = mean_se(&biased);
    assert!((a - b).abs() < 4.0 * (sa * sa + sb * sb).sqrt(), "E[Z1²]={a}±{sa}, Ê[Z1]={b}±{sb}");
}

#[test]
fn chain_stays_positive() {
    let law = ReproductionLaw::env_a();
    let table = PijTable::new(&law, 400);
    for s in 0..20u64 {
        let path = sample_spine_chain(&table, 1, 200, &mut stream(s, "chain", 0));
        // the chain may leave the table; every state visited is still ≥ 1
        if let Ok(p) = path {
            assert!(p.iter().all(|&b| b >= 1));
        }
    }
}

#[test]
fn mean_return_time_is_stable_across_seeds() {
    let law = ReproductionLaw::env_a();
    let a = 1000;
    let table = PijTable::new(&law, a);
    let means: Vec<f64> = (0..3u64)
        .map(|seed| {
            let mut rng = stream(seed, "return", 0);
            let times: Vec<f64> = (0..4_000)
                .filter_map(|_| chain_hitting(&table, a, 1_000_000, &mut rng).unwrap().tau_hat_1)
                .map(|t| t as f64)
                .collect();
            assert!(times.len() > 3_900);
            mean_se(&times).0
        })
        .collect();
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(0.0, f64::max);
    assert!(lo.is_finite() && hi / lo < 1.3, "{means:?}");
}

#[test]
fn escape_before_return_is_nested_in_a() {
    let law = ReproductionLaw::env_a();
    let table = PijTable::new(&law, 64);
    let freq = |a: u64| {
        (0..20_000u64).filter(|&s| chain_hitting(&table, a, 1_000_000, &mut stream(s, "nested", 0)).unwrap().hit_before).count()
    };
    let f: Vec<usize> = [2, 4, 8, 16, 32].into_iter().map(freq).collect();
    assert!(f.windows(2).all(|w| w[0] >= w[1]), "{f:?}");
    assert!(f[0] > f[4]);
}

#[test]
fn ka_increases_over_small_a() {
    let law = ReproductionLaw::env_a();
    let kappa = 3.0;
    let table = PijTable::new(&law, 64);
    let exact: Vec<f64> = [4, 8, 16].into_iter().map(|a| exact_ka(&table, a, kappa).unwrap()).collect();
    assert!(exact.windows(2).all(|w| w[0] < w[1]), "{exact:?}");
    for (i, a) in [4u64, 8, 16].into_iter().enumerate() {
        let est = estimate_ka(&table, a, kappa, 40_000, &mut stream(a, "ka", 0)).unwrap();
        assert!(est.mean.is_finite());
        assert!((est.mean - exact[i]).abs() < 4.0 * est.se, "A={a}: {est:?} vs {}", exact[i]);
    }
}

fn any_law() -> impl Strategy<Value = ReproductionLaw> {
    prop_oneof![Just(ReproductionLaw::env_a()), Just(ReproductionLaw::env_b()), Just(ReproductionLaw::env_c())]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn table_agrees_with_direct_entries(law in any_law(), i in 1u64..=10, j in 1u64..30) {
        let table = PijTable::new(&law, 10);
        let row = table.row(i).unwrap();
        prop_assert!((row.sum() - 1.0).abs() <= row.tail_bound + 1e-12);
        prop_assert!(row.tail_bound <= table.tol());
        let direct = compute_pij(&law, i, j, DEFAULT_OVERFLOW_GUARD).unwrap();
        let tabled = if j <= row.j_max() { row.p(j) } else { 0.0 };
        prop_assert!((direct - tabled).abs() <= 1e-12 + row.tail_bound);
    }
}
