use coem_core::pool::{ema_update, Fragment, FragmentId, KnowledgePool, PoolConfig, PoolError, OPTIMISTIC_VALUE};
use proptest::prelude::*;

fn config(alpha: f64) -> PoolConfig {
    PoolConfig {
        alpha,
        ..PoolConfig::default()
    }
}

fn pool_of(n: usize, alpha: f64) -> (KnowledgePool, Vec<FragmentId>) {
    let mut pool = KnowledgePool::new(config(alpha)).unwrap();
    let ids = (0..n)
        .map(|i| pool.add_fragment(&format!("fragment {i}"), "test").unwrap())
        .collect();
    (pool, ids)
}

#[test]
fn hand_computed_updates() {
    assert_eq!(ema_update(1.0, 0.03, 1.0, 1.0), 1.0);
    assert_eq!(ema_update(1.0, 0.03, 1.0, -1.0), 0.94);
    assert_eq!(ema_update(1.0, 0.03, 0.5, 1.0), 0.985);
}

#[test]
fn add_fragment_examples() {
    let mut pool = KnowledgePool::new(PoolConfig::default()).unwrap();
    let id = pool.add_fragment("Fed raises rates", "news").unwrap();
    assert_eq!(pool.get(id).unwrap().value, OPTIMISTIC_VALUE);
    assert_eq!(pool.add_fragment("  fed   RAISES rates ", "other").unwrap(), id);
    assert_eq!(pool.total_count(), 1);
    assert!(matches!(pool.add_fragment("   ", "news"), Err(PoolError::EmptyText)));
}

#[test]
fn apply_feedback_errors_name_the_id() {
    let (mut pool, ids) = pool_of(2, 0.03);
    let err = pool.apply_feedback(&[FragmentId(9)], &[1.0], 1.0).unwrap_err();
    assert_eq!(err, PoolError::UnknownFragment(FragmentId(9)));
    assert!(err.to_string().contains('9'));
    assert!(matches!(
        pool.apply_feedback(&ids, &[1.0], 1.0),
        Err(PoolError::LengthMismatch { .. })
    ));
    pool.prune_ids(&[ids[0]]).unwrap();
    assert_eq!(
        pool.apply_feedback(&[ids[0]], &[1.0], 1.0),
        Err(PoolError::PrunedFragment(ids[0]))
    );
}

#[test]
fn prune_examples() {
    let frag = |id: u64, value: f64, sessions: u64| Fragment {
        id: FragmentId(id),
        text: format!("f{id}"),
        source: "t".into(),
        value,
        session_count: sessions,
        feedback_count: sessions,
        created_iteration: 0,
        alive: true,
    };
    let mut pool = KnowledgePool::from_parts(
        PoolConfig::default(),
        0,
        3,
        [frag(0, 0.4, 7), frag(1, 0.6, 7), frag(2, 0.4, 2)],
    )
    .unwrap();
    assert_eq!(pool.prune(), vec![FragmentId(0)]);
    assert!(pool.get(FragmentId(1)).unwrap().alive);
    assert!(pool.get(FragmentId(2)).unwrap().alive);
}

#[test]
fn high_value_fraction_examples() {
    let (mut pool, ids) = pool_of(3, 0.5);
    assert_eq!(pool.high_value_fraction(0.5).unwrap(), 1.0);
    // 1 -> 0.6 and 1 -> 0.2 with alpha 0.5, weight 1
    pool.apply_feedback(&[ids[1]], &[1.0], 0.2).unwrap();
    pool.apply_feedback(&[ids[2]], &[1.0], -0.6).unwrap();
    let oracle = pool.fragments().filter(|f| f.value >= 0.5).count() as f64 / 3.0;
    assert_eq!(pool.high_value_fraction(0.5).unwrap(), oracle);
    assert_eq!(oracle, 2.0 / 3.0);
    assert_eq!(pool.high_value_fraction(-1.0).unwrap(), 1.0);
    let empty = KnowledgePool::new(PoolConfig::default()).unwrap();
    assert_eq!(empty.high_value_fraction(0.5), Err(PoolError::EmptyPool));
}

#[test]
fn pruned_text_can_return_with_new_id() {
    let (mut pool, ids) = pool_of(1, 0.03);
    pool.prune_ids(&ids).unwrap();
    let again = pool.add_fragment("fragment 0", "extracted").unwrap();
    assert_ne!(again, ids[0]);
    assert_eq!(pool.get(again).unwrap().value, OPTIMISTIC_VALUE);
}

/// Exhaustive grid over values x session counts x thresholds.
#[test]
fn prune_grid_is_exact() {
    let values = [-1.0, -0.5, 0.0, 0.25, 0.49, 0.5, 0.51, 0.75, 1.0];
    let counts = 0..=8u64;
    for &theta in &[-0.5, 0.0, 0.5, 0.9] {
        for n in 1..=6u64 {
            let cfg = PoolConfig {
                theta,
                min_sessions_before_prune: n,
                ..PoolConfig::default()
            };
            let mut frags = Vec::new();
            for &v in &values {
                for c in counts.clone() {
                    let id = frags.len() as u64;
                    frags.push(Fragment {
                        id: FragmentId(id),
                        text: format!("grid {id}"),
                        source: "grid".into(),
                        value: v,
                        session_count: c,
                        feedback_count: c,
                        created_iteration: 0,
                        alive: true,
                    });
                }
            }
            let expected: Vec<FragmentId> = frags
                .iter()
                .filter(|f| f.value < theta && f.session_count >= n)
                .map(|f| f.id)
                .collect();
            let mut pool = KnowledgePool::from_parts(cfg, 0, frags.len() as u64, frags.clone()).unwrap();
            let removed = pool.prune();
            assert_eq!(removed, expected, "theta {theta} n {n}");
            for f in pool.fragments() {
                assert_eq!(f.alive, !expected.contains(&f.id));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn ema_matches_direct_arithmetic(v in -1.0f64..=1.0, alpha in 1e-6f64..1.0, p in 0.0f64..=1.0, r in -1.0f64..=1.0) {
        let direct = v - alpha * (v - p * r);
        prop_assert!((ema_update(v, alpha, p, r) - direct).abs() <= 1e-12);
    }
}

#[derive(Debug, Clone)]
struct Update {
    members: Vec<usize>,
    weights: Vec<f64>,
    r: f64,
}

fn update_strategy(n: usize) -> impl Strategy<Value = Update> {
    (proptest::sample::subsequence((0..n).collect::<Vec<_>>(), 1..=n.min(4)), -1.0f64..=1.0)
        .prop_flat_map(|(members, r)| {
            let len = members.len();
            (Just(members), proptest::collection::vec(0.0f64..=1.0, len), Just(r))
        })
        .prop_map(|(members, weights, r)| Update { members, weights, r })
}

fn apply(pool: &mut KnowledgePool, ids: &[FragmentId], u: &Update) {
    let subset: Vec<FragmentId> = u.members.iter().map(|&i| ids[i]).collect();
    pool.apply_feedback(&subset, &u.weights, u.r).unwrap();
}

proptest! {
    #[test]
    fn values_stay_in_range(alpha in 0.001f64..0.999, updates in proptest::collection::vec(update_strategy(6), 0..60)) {
        let (mut pool, ids) = pool_of(6, alpha);
        for u in &updates {
            apply(&mut pool, &ids, u);
            for f in pool.fragments() {
                prop_assert!((-1.0..=1.0).contains(&f.value));
                prop_assert!(f.feedback_count <= f.session_count);
            }
        }
        prop_assert_eq!(pool.iteration(), updates.len() as u64);
    }

    #[test]
    fn updates_are_local(alpha in 0.001f64..0.999, u in update_strategy(8)) {
        let (mut pool, ids) = pool_of(8, alpha);
        let before = pool.clone();
        apply(&mut pool, &ids, &u);
        for (i, id) in ids.iter().enumerate() {
            let (a, b) = (before.get(*id).unwrap(), pool.get(*id).unwrap());
            if !u.members.contains(&i) {
                prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
                prop_assert_eq!(a.session_count, b.session_count);
                prop_assert_eq!(a.feedback_count, b.feedback_count);
            } else {
                prop_assert_eq!(b.session_count, a.session_count + 1);
                prop_assert_eq!(b.feedback_count, a.feedback_count + 1);
            }
        }
    }

    #[test]
    fn monotone_pull(v in -1.0f64..=1.0, alpha in 0.001f64..0.999, p in 0.0f64..=1.0, r in -1.0f64..=1.0) {
        let next = ema_update(v, alpha, p, r);
        let target = p * r;
        if target < v {
            prop_assert!(next < v);
        } else if target > v {
            prop_assert!(next > v);
        } else {
            prop_assert_eq!(next, v);
        }
    }

    #[test]
    fn commuted_updates_differ_by_at_most_two_alpha_squared(
        v in -1.0f64..=1.0,
        alpha in 0.001f64..0.999,
        (p1, r1) in (0.0f64..=1.0, -1.0f64..=1.0),
        (p2, r2) in (0.0f64..=1.0, -1.0f64..=1.0),
    ) {
        let a = ema_update(ema_update(v, alpha, p1, r1), alpha, p2, r2);
        let b = ema_update(ema_update(v, alpha, p2, r2), alpha, p1, r1);
        prop_assert!((a - b).abs() <= 2.0 * alpha * alpha + 1e-15);
    }

    #[test]
    fn prune_is_safe(alpha in 0.05f64..0.999, updates in proptest::collection::vec(update_strategy(6), 0..40)) {
        let (mut pool, ids) = pool_of(6, alpha);
        let n = pool.config().min_sessions_before_prune;
        for u in &updates {
            let alive: Vec<usize> = u.members.iter().copied().filter(|&i| pool.get(ids[i]).unwrap().alive).collect();
            if alive.is_empty() {
                continue;
            }
            let weights: Vec<f64> = alive.iter().map(|i| u.weights[u.members.iter().position(|m| m == i).unwrap()]).collect();
            let subset: Vec<FragmentId> = alive.iter().map(|&i| ids[i]).collect();
            pool.apply_feedback(&subset, &weights, u.r).unwrap();
            let snapshot = pool.clone();
            for id in pool.prune() {
                let f = snapshot.get(id).unwrap();
                prop_assert!(f.session_count >= n && f.value < pool.config().theta);
            }
        }
        let pruned: Vec<FragmentId> = pool.fragments().filter(|f| !f.alive).map(|f| f.id).collect();
        for id in pruned {
            prop_assert!(pool.apply_feedback(&[id], &[1.0], 1.0).is_err());
        }
    }

    #[test]
    fn duplicates_collapse(text in "[a-z]{1,8}( [a-z]{1,8}){0,4}", copies in 1usize..20, pad in 0usize..3) {
        let mut pool = KnowledgePool::new(PoolConfig::default()).unwrap();
        let first = pool.add_fragment(&text, "a").unwrap();
        for i in 0..copies {
            let variant = if i % 2 == 0 { text.to_uppercase() } else { format!("{}{}{}", " ".repeat(pad), text.replace(' ', "  "), " ".repeat(pad)) };
            prop_assert_eq!(pool.add_fragment(&variant, "b").unwrap(), first);
        }
        prop_assert_eq!(pool.alive_count(), 1);
    }
}
