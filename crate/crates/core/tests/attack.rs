use ntsim::attack::*;
use ntsim::config::SimConfig;
use ntsim::memory::NtEncoding;
use proptest::prelude::*;

fn off() -> SimConfig {
    SimConfig {
        context_enabled: false,
        ..SimConfig::default()
    }
}

#[test]
fn matrix_default_config_passes() {
    let m = sweep_matrix(&SimConfig::default(), DEFAULT_SECRET, DEFAULT_ROUNDS).unwrap();
    assert!(m.pass, "{}", m.table());
    assert_eq!(m.cells.len(), 20);
    assert_eq!(m.cells.iter().filter(|c| c.expect_leak).count(), 5);
}

#[test]
fn sabotaged_taint_tracking_fails_matrix() {
    let cfg = SimConfig {
        taint_propagation: false,
        ..SimConfig::default()
    };
    let m = sweep_matrix(&cfg, DEFAULT_SECRET, 1).unwrap();
    assert!(!m.pass);
    assert_eq!(m.failing().count(), 15);
}

#[test]
fn no_window_no_leak() {
    let cfg = SimConfig {
        window: 0,
        ..SimConfig::default()
    };
    let m = sweep_matrix(&cfg, DEFAULT_SECRET, 1).unwrap();
    assert!(m.pass, "{}", m.table());
    assert!(m.cells.iter().all(|c| c.accuracy == 0.0));
}

#[test]
fn threshold_above_miss_is_flagged() {
    let mut cfg = SimConfig::default();
    cfg.latencies.threshold = cfg.latencies.miss + 1;
    assert!(matches!(
        sweep_matrix(&cfg, DEFAULT_SECRET, 1),
        Err(AttackError::ReceiverMisconfigured)
    ));
    let r = run_attack(&AttackScenario::new(Variant::Pht, b"S"), &cfg, 1).unwrap();
    assert!(r.receiver_misconfigured);
    assert_eq!(r.hit_lines[0][0].len(), 256);
}

#[test]
fn pht_channel_has_exactly_one_hit_per_round() {
    let r = run_attack(
        &AttackScenario::new(Variant::Pht, DEFAULT_SECRET),
        &off(),
        3,
    )
    .unwrap();
    assert_eq!(r.accuracy, 1.0);
    for (i, rounds) in r.hit_lines.iter().enumerate() {
        for h in rounds {
            assert_eq!(h, &vec![DEFAULT_SECRET[i]]);
        }
    }
    assert_eq!(r.multi_hit_rounds, 0);
}

#[test]
fn pht_defended_hits_only_dummy_line() {
    let r = run_attack(
        &AttackScenario::new(Variant::Pht, DEFAULT_SECRET),
        &SimConfig::default(),
        3,
    )
    .unwrap();
    assert_eq!(r.accuracy, 0.0);
    assert_eq!(r.recovered, vec![0; 6]);
    for h in r.hit_lines.iter().flatten() {
        assert_eq!(h, &vec![0u8]);
    }
}

#[test]
fn zero_secret_collides_with_dummy() {
    for v in Variant::ALL {
        let r = run_attack(&AttackScenario::new(v, &[0, 0]), &SimConfig::default(), 1).unwrap();
        assert_eq!(r.recovered, vec![0, 0], "{v}");
        assert_eq!(r.accuracy, 1.0);
    }
}

#[test]
fn barrier_placement() {
    let r = run_serialized_baseline(DEFAULT_SECRET, &off(), 1).unwrap();
    assert_eq!(r.accuracy, 0.0);
    assert!(r.only_dummy_line());
    let s = AttackScenario::new(Variant::Pht, DEFAULT_SECRET).with_barrier(Barrier::Misplaced);
    assert_eq!(run_attack(&s, &off(), 1).unwrap().accuracy, 1.0);
    let r = run_serialized_baseline(&[0], &off(), 1).unwrap();
    assert_eq!(r.recovered, vec![0]);
}

#[test]
fn defense_comparison() {
    let f = compare_defenses(&SimConfig::default(), DEFAULT_SECRET, 1).unwrap();
    let leaked: Vec<bool> = f.columns.iter().map(|c| c.leaked).collect();
    assert_eq!(leaked, vec![true, false, false, false]);
    assert!(f.pass);
    assert!(f.light_register_gap);
}

#[test]
fn reports_are_reproducible_and_echo_config() {
    let s = AttackScenario::new(Variant::Stl, b"ab");
    let cfg = SimConfig {
        nt_encoding: NtEncoding::PatMemoryType,
        ..SimConfig::default()
    };
    let a = serde_json::to_string(&run_attack(&s, &cfg, 2).unwrap()).unwrap();
    let b = serde_json::to_string(&run_attack(&s, &cfg, 2).unwrap()).unwrap();
    assert_eq!(a, b);
    let back: LeakReport = serde_json::from_str(&a).unwrap();
    assert_eq!(back.config, cfg);
}

#[test]
fn receiver_decision_rule() {
    assert_eq!(Receiver::decide(&[7]), Some(7));
    assert_eq!(Receiver::decide(&[0]), Some(0));
    assert_eq!(Receiver::decide(&[0, 9]), Some(9));
    assert_eq!(Receiver::decide(&[3, 9]), None);
    assert_eq!(Receiver::decide(&[]), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // With the defense on, which probe lines fill does not depend on the secret.
    #[test]
    fn defended_channel_independent_of_secret(a in 1u8..=255, b in 1u8..=255, v in 0usize..5) {
        let variant = Variant::ALL[v];
        let cfg = SimConfig::default();
        let ra = run_attack(&AttackScenario::new(variant, &[a]), &cfg, 1).unwrap();
        let rb = run_attack(&AttackScenario::new(variant, &[b]), &cfg, 1).unwrap();
        prop_assert_eq!(&ra.hit_lines, &rb.hit_lines);
        prop_assert_eq!(&ra.per_byte_latencies, &rb.per_byte_latencies);
    }
}
