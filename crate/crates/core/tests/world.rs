use calrank::world::{generate_world, QueryStream, SyntheticWorld, WorldConfig};
use calrank::Error;

fn tiny() -> WorldConfig {
    WorldConfig {
        num_users: 10,
        num_items: 20,
        query_dim: 3,
        item_dim: 3,
        candidates_per_query: (20, 20),
        latent_dim: 2,
        logit_bias: -1.0,
        noise_scale: 0.3,
        signal_scale: 1.5,
        feature_noise: 0.1,
        seed: 11,
    }
}

#[test]
fn empirical_click_rates_match_true_ctr() {
    let world = generate_world(&tiny()).unwrap();
    let mut clicks = vec![[0u64; 2]; 10 * 20];
    let mut stream = QueryStream::new(&world, 3, 1000, 0);
    for _ in 0..100_000 {
        let g = stream.next_group().unwrap();
        for (&item, &y) in g.item_ids.iter().zip(&g.labels) {
            let c = &mut clicks[g.user_id * 20 + item];
            c[0] += u64::from(y);
            c[1] += 1;
        }
    }
    for u in 0..10 {
        for i in 0..20 {
            let [pos, n] = clicks[u * 20 + i];
            assert!(n > 5_000, "pair ({u},{i}) drawn only {n} times");
            let p = world.true_ctr(u, i).unwrap();
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let rate = pos as f64 / n as f64;
            assert!((rate - p).abs() < 5.0 * se + 1e-9, "pair ({u},{i}): rate {rate} vs ctr {p}");
        }
    }
}

#[test]
fn groups_carry_consistent_features_and_ctrs() {
    let world = generate_world(&tiny()).unwrap();
    let g = QueryStream::new(&world, 1, 2, 42).next_group().unwrap();
    assert_eq!(g.query_id, 42);
    assert_eq!(g.query_features, world.user_features.row(g.user_id));
    for (k, &item) in g.item_ids.iter().enumerate() {
        assert_eq!(g.item_features[k], world.item_features.row(item));
        assert_eq!(g.true_ctrs[k], world.true_ctr(g.user_id, item).unwrap());
    }
    let mut ids = g.item_ids.clone();
    ids.sort();
    assert_eq!(ids, (0..20).collect::<Vec<_>>());
}

#[test]
fn streams_are_deterministic_and_independent() {
    let world = generate_world(&tiny()).unwrap();
    let a = QueryStream::new(&world, 5, 2, 0).take_groups(50).unwrap();
    let b = QueryStream::new(&world, 5, 2, 0).take_groups(50).unwrap();
    let c = QueryStream::new(&world, 5, 3, 0).take_groups(50).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn different_seeds_give_different_worlds() {
    let a = generate_world(&tiny()).unwrap();
    let b = generate_world(&WorldConfig { seed: 12, ..tiny() }).unwrap();
    assert_ne!(a.content_hash(), b.content_hash());
}

#[test]
fn lookups_outside_the_world_fail() {
    let world = generate_world(&tiny()).unwrap();
    assert!(matches!(world.true_ctr(10, 0), Err(Error::Lookup(_))));
    assert!(matches!(world.true_ctr(0, 20), Err(Error::Lookup(_))));
}

#[test]
fn directory_round_trip_and_tamper_detection() {
    let world = generate_world(&tiny()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    world.write_to_dir(dir.path()).unwrap();
    let back = SyntheticWorld::read_from_dir(dir.path()).unwrap();
    assert_eq!(back, world);
    let path = dir.path().join("world.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(SyntheticWorld::read_from_dir(dir.path()), Err(Error::Format(_))));
}
