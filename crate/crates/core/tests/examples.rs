mod common;

use std::fs;

use common::*;
use ridematch::indices::{build_index_table, boundary_sweep, whittle_indices, IndexTable};
use ridematch::mdp::{Solver, SubProcess, SubState};
use ridematch::network::{
    build_services, fixture_catalog, generate_uniform_network, load_real_network, read_demand_table, HexLayout,
    RsService, ServiceCatalog, UNIFORM_TYPES,
};
use ridematch::policies::{admissible_services, bi_decide, jlq_decide, myopic_decide, SystemState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn default_layout_has_105_types_at_constant_rate() {
    let net = generate_uniform_network(&HexLayout::default(), 0.3).unwrap();
    assert_eq!(net.len(), UNIFORM_TYPES);
    for t in &net.types {
        assert_eq!(t.arrival_profile.rates, vec![0.3]);
        assert_eq!(t.arrival_profile.rate_at(12345.0), 0.3);
    }
}

#[test]
fn uniform_service_count_golden() {
    let (_, cat) = uniform(0.3, 7.0);
    assert_eq!(cat.n_types(), 105);
    assert_eq!(cat.len(), 694);
    assert!((cat.len() as f64 - 698.0).abs() <= 0.1 * 698.0);
}

#[test]
fn melbourne_types_and_service_count_golden() {
    let (net, cat) = melbourne(7.0);
    assert_eq!(net.len(), 165);
    assert_eq!(cat.len(), 2070);
    assert_eq!(net.n_intervals(), 24);
}

#[test]
fn melbourne_demand_row() {
    let rows = read_demand_table(&data_path("melbourne_demand.csv")).unwrap();
    let r = rows.iter().find(|r| r.name == "Melbourne").unwrap();
    assert_eq!(r.index, 105);
    assert_eq!(r.weight, 0.147);
}

fn write_real_network(dir: &std::path::Path, centroids: &str, demand: &str, profile: &str) -> [std::path::PathBuf; 3] {
    let p = [dir.join("d.csv"), dir.join("c.csv"), dir.join("p.csv")];
    fs::write(&p[0], demand).unwrap();
    fs::write(&p[1], centroids).unwrap();
    fs::write(&p[2], profile).unwrap();
    p
}

fn profile(rate: f64) -> String {
    let mut s = String::from("hour,rate\n");
    for h in 0..24 {
        s += &format!("{h},{rate}\n");
    }
    s
}

#[test]
fn centroid_distance_is_euclidean() {
    let tmp = tempfile::tempdir().unwrap();
    let [d, c, p] = write_real_network(
        tmp.path(),
        "index,x,y\n0,0,0\n1,3,4\n",
        "index,name,demand\n1,A,1.0\n",
        &profile(2.0),
    );
    let net = load_real_network(&d, &c, &p, 1.0).unwrap();
    assert_eq!(net.types[0].distance, 5.0);
}

#[test]
fn equal_weights_split_total_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let [d, c, p] = write_real_network(
        tmp.path(),
        "index,x,y\n0,0,0\n1,3,4\n2,-3,4\n",
        "index,name,demand\n1,A,1\n2,B,1\n",
        &profile(6.0),
    );
    let net = load_real_network(&d, &c, &p, 1.0).unwrap();
    for t in &net.types {
        assert_eq!(t.arrival_profile.rates, vec![3.0; 24]);
    }
}

#[test]
fn appendix_partner_queue_index_order() {
    // the partner-queue ordering of the exact solver on the reference service
    let (cat, arr) = fixture_catalog();
    let sp = SubProcess::from_service(cat.service(3), cat.n_max, (arr[0], arr[1]));
    let idx = whittle_indices(&sp, 0, Solver::Exact).unwrap();
    let partner: Vec<f64> = (1..=5)
        .map(|k| idx.iter().find(|(s, _)| *s == SubState::new(0, k)).unwrap().1)
        .collect();
    let want = [45.52, 45.83, 46.38, 47.28, 48.58];
    for (g, w) in partner.iter().zip(want) {
        assert!((g - w).abs() < 5e-3, "{partner:?}");
    }
    assert!(partner.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn zero_reward_process_has_zero_indices() {
    let sp = SubProcess {
        self_shared: false,
        n_max: 3,
        lambda: (1.0, 2.0),
        mu: (0.5, 0.5),
        reward: 0.0,
        renege: (0.0, 0.0),
    };
    for role in [0, 1] {
        for (s, eta) in whittle_indices(&sp, role, Solver::Exact).unwrap() {
            assert!(eta.abs() < 1e-9, "{s}: {eta}");
        }
    }
}

#[test]
fn degenerate_reward_split_has_finite_crossings() {
    let svc = RsService {
        id: 3,
        types: (1, 2),
        self_shared: false,
        shared_distance: 1.0,
        reward: 2.0,
        ns_rewards: (1.0, 1.0),
        reneging_rates: (1.0, 1.0),
        penalties: (0.0, 0.0),
    };
    let curves = boundary_sweep(&svc, 3, (2.0, 2.0), &[-50.0, -10.0], Solver::Exact).unwrap();
    for c in curves {
        for (_, y) in c.samples {
            assert!(y.unwrap().is_finite());
        }
    }
}

#[test]
fn uniform_table_has_one_entry_per_controllable_state() {
    let (net, cat) = uniform(0.3, 7.0);
    let rates = net.rates_in_interval(0);
    let t = build_index_table(&cat, &rates, Solver::Exact, 0.999, 1e-6).unwrap();
    let mut want = 0;
    for svc in &cat.services {
        want += if svc.self_shared { 2 } else { 2 * 2 * cat.n_max };
    }
    assert_eq!(t.n_finite(), want);
    let again = build_index_table(&cat, &rates, Solver::Exact, 0.999, 1e-6).unwrap();
    assert_eq!(t, again);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("t.txt");
    t.save(&path, &cat).unwrap();
    assert_eq!(IndexTable::load(&path, &cat, &t.key).unwrap(), t);
}

#[test]
fn self_shared_only_catalog_uses_closed_form() {
    let svc = |id| RsService {
        id,
        types: (id, id),
        self_shared: true,
        shared_distance: 1.0,
        reward: 10.0,
        ns_rewards: (1.0, 1.0),
        reneging_rates: (1.0, 1.0),
        penalties: (0.0, 0.0),
    };
    let cat = ServiceCatalog::from_services(vec![svc(1), svc(2)], 2, 5).unwrap();
    // an invalid value-iteration setting would fail if it were ever used
    let bad = Solver::ValueIteration(ridematch::mdp::ViParams { beta: 2.0, sigma: -1.0, max_sweeps: 0 });
    let t = build_index_table(&cat, &[5.0, 5.0], bad, 2.0, -1.0).unwrap();
    for row in &t.entries {
        assert_eq!(row[0].len(), 2);
        for v in &row[0] {
            assert!((v - 255.0 / 11.0).abs() < 1e-12);
        }
    }
}

/// Types 1..3; services 1..3 self-shared, 4 = (1,2), 5 = (1,3).
fn small_catalog() -> ServiceCatalog {
    let svc = |id, types: (usize, usize), reward| RsService {
        id,
        types,
        self_shared: types.0 == types.1,
        shared_distance: 1.0,
        reward,
        ns_rewards: (1.0, 1.0),
        reneging_rates: (0.5, 0.5),
        penalties: (0.0, 0.0),
    };
    ServiceCatalog::from_services(
        vec![
            svc(1, (1, 1), 10.0),
            svc(2, (2, 2), 10.0),
            svc(3, (3, 3), 10.0),
            svc(4, (1, 2), 15.0),
            svc(5, (1, 3), 15.0),
        ],
        3,
        2,
    )
    .unwrap()
}

/// Table for type 1 where service `by_type[0][k]` has index `v[k]` everywhere.
fn flat_table(cat: &ServiceCatalog, v: [f64; 3]) -> IndexTable {
    let mut entries: Vec<Vec<Vec<f64>>> = cat
        .by_type
        .iter()
        .map(|js| {
            js.iter()
                .map(|&j| vec![0.0; if cat.service(j).self_shared { 2 } else { 2 * cat.n_max + 1 }])
                .collect()
        })
        .collect();
    for (k, x) in v.iter().enumerate() {
        let n = entries[0][k].len();
        entries[0][k] = vec![*x; n];
    }
    IndexTable {
        n_max: cat.n_max,
        catalog_hash: cat.hash(),
        key: String::new(),
        beta: 0.999,
        sigma: 1e-6,
        solver: "exact".into(),
        entries,
    }
}

#[test]
fn bi_takes_highest_index() {
    let cat = small_catalog();
    let st = SystemState::empty(&cat);
    let t = flat_table(&cat, [255.0 / 11.0, 12.0, 1.0]);
    assert_eq!(bi_decide(&t, &st, 1, &cat).unwrap().service, 1);
}

#[test]
fn bi_ties_go_to_smallest_id() {
    let cat = small_catalog();
    let st = SystemState::empty(&cat);
    let t = flat_table(&cat, [1.0, 7.0, 7.0]);
    assert_eq!(bi_decide(&t, &st, 1, &cat).unwrap().service, 4);
}

#[test]
fn bi_skips_uncontrollable_best() {
    let cat = small_catalog();
    let mut st = SystemState::empty(&cat);
    st.states[3] = SubState::new(2, 0);
    let t = flat_table(&cat, [1.0, 9.0, 5.0]);
    assert_eq!(bi_decide(&t, &st, 1, &cat).unwrap().service, 5);
}

#[test]
fn self_shared_with_one_waiter_stays_admissible() {
    let cat = small_catalog();
    let mut st = SystemState::empty(&cat);
    st.states[0] = SubState::new(1, 0);
    assert!(admissible_services(&st, 1, &cat).unwrap().contains(&1));
    // and counts as one waiting partner
    assert_eq!(jlq_decide(&st, 1, &cat).unwrap().service, 1);
}

#[test]
fn myopic_takes_positive_return() {
    let cat = small_catalog();
    let mut st = SystemState::empty(&cat);
    st.states[0] = SubState::new(1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        // returns (10 * 1.5, 0, 0)
        assert_eq!(myopic_decide(&st, 1, &cat, 1.5, &mut rng).unwrap().service, 1);
    }
}

#[test]
fn myopic_splits_equal_returns_by_seed() {
    let cat = small_catalog();
    let mut st = SystemState::empty(&cat);
    st.states[3] = SubState::new(0, 1);
    st.states[4] = SubState::new(0, 1);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..40)
            .map(|_| myopic_decide(&st, 1, &cat, 1.0, &mut rng).unwrap().service)
            .collect::<Vec<_>>()
    };
    let a = draw(11);
    assert_eq!(a, draw(11));
    assert!(a.contains(&4) && a.contains(&5) && !a.contains(&1));
}

#[test]
fn catalog_rejects_bad_econ() {
    let net = generate_uniform_network(&HexLayout::default(), 0.3).unwrap();
    let mut e = uniform_econ(7.0);
    e.beta = 0.01;
    assert!(build_services(&net, &e).is_err());
}
