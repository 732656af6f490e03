//! Property tests over the simulator, dataset codec, retrieval index and planner traces.

use std::sync::OnceLock;

use gwmpc::dataset::{decode_trajectory, encode_trajectory};
use gwmpc::grounding::{build_oracle_encoder, GroundedEncoder};
use gwmpc::harness::chi_square_uniform;
use gwmpc::knn::{brute_force, ProprioIndex};
use gwmpc::mpc::{replay, EpisodeTrace, PlanMode, Planner, PlannerConfig};
use gwmpc::vocab::Vocabulary;
use gwmpc::wiser::{collect_demos_for, generate_suite, BenchConfig, DemoDataset, TaskSuite, TrajectoryRecord};
use gwmpc::world::{keyframe_indices, step, step_kinematics, Action, Cell, Gripper, GripperCmd, Proprio, Rollout, GRID_H, GRID_W};
use proptest::prelude::*;

struct Fixture {
    train: TaskSuite,
    test: TaskSuite,
    ds: DemoDataset,
    oracle: GroundedEncoder,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let vocab = Vocabulary::standard();
        let (train, test) = generate_suite(&BenchConfig::default(), &vocab, 0).unwrap();
        let ids: Vec<u32> = (0..24).collect();
        let ds = collect_demos_for(&train, &ids, 2, 0).unwrap();
        let oracle = build_oracle_encoder(&vocab, &vocab.render_config()).unwrap();
        Fixture { train, test, ds, oracle }
    })
}

fn action() -> impl Strategy<Value = Action> {
    (0u8..27).prop_map(|i| Action::from_index(i).unwrap())
}

fn proprio() -> impl Strategy<Value = Proprio> {
    (0..GRID_W, 0..GRID_H, any::<bool>()).prop_map(|(x, y, open)| Proprio {
        cell: Cell::new(x, y),
        gripper: if open { Gripper::Open } else { Gripper::Closed },
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_play_keeps_the_world_consistent(task in 0u32..288, actions in prop::collection::vec(action(), 0..80)) {
        let mut s = fixture().train.task(task).unwrap().initial_state();
        for (i, a) in actions.iter().enumerate() {
            let next = step(&s, *a);
            let kin = step_kinematics(s.proprio(), *a);
            prop_assert_eq!(next.agent, kin.cell);
            // Only a refused open over another cube leaves the gripper shut.
            let refused = a.grip == GripperCmd::Open && s.held.is_some() && s.resting_cube_at(next.agent).is_some();
            prop_assert_eq!(next.gripper == kin.gripper, !refused);
            prop_assert_eq!(next.step_count, i as u32 + 1);
            prop_assert_eq!(next.marks, s.marks);
            if let Err(e) = next.check_invariants() {
                return Err(TestCaseError::fail(e));
            }
            s = next;
        }
    }

    #[test]
    fn outcome_flags_are_nested(task in 0u32..288, actions in prop::collection::vec(action(), 1..60)) {
        let spec = fixture().test.task(task).unwrap();
        let mut r = Rollout::new(spec.initial_state());
        for a in &actions {
            r.apply(*a);
        }
        let o = r.outcome(spec.goal);
        prop_assert!(o.success <= o.grasp && o.success <= o.reach);
    }

    #[test]
    fn trajectory_codec_round_trips(src in 0usize..48, actions in prop::collection::vec(action(), 0..120), frames in any::<bool>()) {
        let base = &fixture().ds.trajectories[src];
        let mut s = base.initial_state();
        let mut proprio = vec![s.proprio()];
        for a in &actions {
            s = step(&s, *a);
            proprio.push(s.proprio());
        }
        let t = TrajectoryRecord { proprio, actions, frames, ..base.clone() };
        let bytes = encode_trajectory(&t);
        prop_assert_eq!(decode_trajectory(&bytes).unwrap(), t);
        prop_assert!(decode_trajectory(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn index_agrees_with_brute_force(at in proprio(), n in 1usize..40, horizon in 1usize..16) {
        let ds = &fixture().ds;
        let index = ProprioIndex::build(ds, horizon).unwrap();
        let got = index.query(ds, at, n).unwrap();
        prop_assert!(!got.is_empty() && got.len() <= n);
        prop_assert!(got.iter().enumerate().all(|(i, a)| got[..i].iter().all(|b| b.chunk != a.chunk)));
        prop_assert!(got.windows(2).all(|w| w[0].distance <= w[1].distance));
        prop_assert!(got.iter().all(|c| c.chunk.len() == horizon));
        prop_assert_eq!(got, brute_force(ds, at, n, horizon));
    }

    #[test]
    fn keyframes_are_increasing_and_end_the_chunk(c in 1usize..40, k in 1usize..40) {
        prop_assume!(k <= c);
        let idx = keyframe_indices(c, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx[0] >= 1);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(*idx.last().unwrap(), c);
    }

    #[test]
    fn uniform_counts_are_not_rejected(bins in 2usize..20, per in 1u64..500) {
        let (stat, p) = chi_square_uniform(&vec![per; bins]).unwrap();
        prop_assert!(stat.abs() < 1e-12);
        prop_assert!(p > 0.99);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn planner_traces_replay_and_round_trip(task in 0u32..24, seed in any::<u64>(), random in any::<bool>()) {
        let f = fixture();
        let mode = if random { PlanMode::Random } else { PlanMode::Gt };
        let planner = Planner::new(PlannerConfig { mode, ..PlannerConfig::default() }, &f.oracle, &f.ds, None).unwrap();
        let spec = f.train.task(task).unwrap();
        let trace = planner.run_episode(spec, seed).unwrap();
        prop_assert_eq!(&planner.run_episode(spec, seed).unwrap(), &trace);
        prop_assert_eq!(replay(&trace, spec).unwrap(), trace.outcome);
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        prop_assert_eq!(EpisodeTrace::read_jsonl(&mut buf.as_slice()).unwrap(), trace);
    }
}

#[test]
fn skewed_counts_are_rejected() {
    let mut counts = vec![100u64; 12];
    counts[0] = 400;
    let (_, p) = chi_square_uniform(&counts).unwrap();
    assert!(p < 1e-6);
    assert!(chi_square_uniform(&[5]).is_err());
    assert!(chi_square_uniform(&[0, 0]).is_err());
}
