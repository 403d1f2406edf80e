use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svt_harness::data::*;
use svt_harness::HarnessError;

fn spec(task: Task, classes: usize) -> SyntheticVideoSpec {
    SyntheticVideoSpec {
        frames: 8,
        height: 32,
        width: 32,
        task,
        num_classes: classes,
        sprite_fraction: 0.1,
        noise_sigma: 0.05,
        train_size: 48,
        val_size: 16,
        seed: 9,
    }
}

#[test]
fn same_seed_same_bits() {
    let s = spec(Task::Motion, 8);
    assert_eq!(generate_dataset(&s).unwrap(), generate_dataset(&s).unwrap());
    let other = SyntheticVideoSpec { seed: 10, ..s.clone() };
    assert_ne!(generate_dataset(&s).unwrap().train, generate_dataset(&other).unwrap().train);
}

#[test]
fn classes_are_exactly_balanced() {
    let d = generate_dataset(&spec(Task::Motion, 8)).unwrap();
    for split in [&d.train, &d.val] {
        let mut counts = [0; 8];
        split.iter().for_each(|c| counts[c.label] += 1);
        assert!(counts.iter().all(|&n| n == split.len() / 8), "{counts:?}");
    }
}

#[test]
fn foreground_stays_small_for_every_motion() {
    let s = spec(Task::Motion, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for m in MOTIONS.iter().chain([&Motion::Still]) {
        for _ in 0..20 {
            let track = sprite_track(&s, *m, &mut rng);
            assert_eq!(track.len(), s.frames);
            for (top, left, side) in track {
                assert!(top + side <= s.height && left + side <= s.width);
                assert!(((side * side) as f64) < MAX_FOREGROUND * (s.height * s.width) as f64);
            }
        }
    }
}

#[test]
fn motions_move_the_way_they_say() {
    let s = spec(Task::Motion, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ends = |m| {
        let t = sprite_track(&s, m, &mut rng);
        (t[0], t[s.frames - 1])
    };
    let ((_, l0, _), (_, l1, _)) = ends(Motion::Right);
    assert!(l1 > l0);
    let ((_, l0, _), (_, l1, _)) = ends(Motion::Left);
    assert!(l1 < l0);
    let ((t0, _, _), (t1, _, _)) = ends(Motion::Down);
    assert!(t1 > t0);
    let ((_, _, s0), (_, _, s1)) = ends(Motion::Grow);
    assert!(s1 > s0);
    let ((_, _, s0), (_, _, s1)) = ends(Motion::Shrink);
    assert!(s1 < s0);
    let (a, b) = ends(Motion::Still);
    assert_eq!(a, b);
}

#[test]
fn static_and_moving_separate_on_frame_differences() {
    let d = generate_dataset(&SyntheticVideoSpec {
        train_size: 64,
        ..spec(Task::StaticVsMoving, 2)
    })
    .unwrap();
    let diff = |label| d.train.iter().filter(move |c| c.label == label).map(temporal_difference);
    let still = diff(0).fold(f64::NEG_INFINITY, f64::max);
    let moving = diff(1).fold(f64::INFINITY, f64::min);
    assert!(still < moving, "{still} vs {moving}");
}

#[test]
fn sprite_larger_than_frame_is_a_spec_error() {
    let s = SyntheticVideoSpec {
        height: 2,
        width: 64,
        ..spec(Task::Motion, 8)
    };
    assert!(matches!(generate_dataset(&s), Err(HarnessError::Config(_))));
}

#[test]
fn invalid_specs_are_rejected() {
    let base = spec(Task::Motion, 8);
    let bad = [
        SyntheticVideoSpec { sprite_fraction: 0.2, ..base.clone() },
        SyntheticVideoSpec { train_size: 50, ..base.clone() },
        SyntheticVideoSpec { num_classes: 9, ..base.clone() },
        SyntheticVideoSpec { frames: 1, ..base.clone() },
        SyntheticVideoSpec {
            task: Task::StaticVsMoving,
            ..base.clone()
        },
    ];
    for s in bad {
        assert!(matches!(s.validate(), Err(HarnessError::Config(_))), "{s:?}");
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let mut v = serde_json::to_value(spec(Task::Motion, 8)).unwrap();
    assert!(serde_json::from_value::<SyntheticVideoSpec>(v.clone()).is_ok());
    v["colour"] = serde_json::json!(true);
    assert!(serde_json::from_value::<SyntheticVideoSpec>(v).is_err());
}

#[test]
fn split_files_round_trip() {
    let d = generate_dataset(&spec(Task::Motion, 8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("val.bin");
    write_split(&path, &d.val).unwrap();
    assert_eq!(read_split(&path).unwrap(), d.val);
    std::fs::write(&path, b"nope").unwrap();
    assert!(read_split(&path).is_err());
}

proptest::proptest! {
    #[test]
    fn any_valid_geometry_keeps_sprites_inside(
        frames in 2usize..10,
        height in 8usize..48,
        width in 8usize..48,
        seed in proptest::prelude::any::<u64>(),
        motion in 0usize..9,
    ) {
        let s = SyntheticVideoSpec { frames, height, width, seed, ..spec(Task::Motion, 8) };
        proptest::prop_assume!(s.validate().is_ok());
        let m = MOTIONS.get(motion).copied().unwrap_or(Motion::Still);
        let track = sprite_track(&s, m, &mut ChaCha8Rng::seed_from_u64(seed));
        proptest::prop_assert_eq!(track.len(), frames);
        for (top, left, side) in track {
            proptest::prop_assert!(side >= 1 && top + side <= height && left + side <= width);
        }
    }
}
