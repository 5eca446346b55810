use procalloc::eval::{run_episode, Dynamics};
use procalloc::model::{build_scenario, compose, ScenarioKind, ScenarioSpec};
use procalloc::policy::{Heuristic, Policy};
use procalloc::reward::{self, RewardKind, Transition};
use procalloc::sim::{Event, ExecutionState};
use procalloc::{ProcessModel, RngStream};

fn scenarios() -> Vec<ProcessModel> {
    ScenarioKind::ALL
        .iter()
        .map(|&k| build_scenario(&ScenarioSpec::reference(k)).unwrap())
        .collect()
}

#[test]
fn every_scenario_and_heuristic_drains_all_cases() {
    for model in scenarios() {
        for h in [Heuristic::Spt, Heuristic::Fifo, Heuristic::Random, Heuristic::Greedy] {
            for dynamics in [Dynamics::Ctmdp, Dynamics::Uniformized { kappa: 0.5 }] {
                let r = run_episode(&model, &h, 300, &RngStream::new(4), dynamics).unwrap();
                assert_eq!(r.cycle_times.len(), 300, "{} {h} {dynamics:?}", model.name());
                assert!(r.cycle_times.iter().all(|&c| c > 0.0));
            }
        }
    }
}

/// Steps the simulator by hand, checking invariants after every step and
/// that the per-step dense rewards add up to minus the total cycle time.
#[test]
fn manual_episodes_keep_invariants_and_reward_identity() {
    let models = scenarios();
    let stages = compose(&models[..3]).unwrap();
    for (i, model) in models.iter().chain([&stages]).enumerate() {
        let mut state = ExecutionState::with_arrival_limit(model, &RngStream::new(i as u64), 120);
        let mut rng = RngStream::new(99);
        let mut trajectory = Vec::new();
        let mut cycle_total = 0.0;
        let mut completed = 0;
        let mut steps = 0;
        while !state.is_terminal() {
            let mask = state.feasible_actions(model);
            let action = Heuristic::Random.choose(&state, model, &mask, &mut rng);
            let out = state.step(model, action).unwrap();
            state.check_invariants(model).unwrap();
            cycle_total += out.completions.iter().map(|c| c.cycle_time).sum::<f64>();
            completed += out.completions.len();
            trajectory.push(Transition::from(&out));
            steps += 1;
            assert!(steps < 1_000_000, "episode does not terminate");
        }
        assert_eq!(completed, 120);
        let ret = reward::episode_return(RewardKind::DenseActiveCases, &trajectory).unwrap();
        assert!((ret + cycle_total).abs() <= 1e-9 * cycle_total, "{}", model.name());
        let per_completion = reward::episode_return(RewardKind::PerCompletion, &trajectory).unwrap();
        assert_eq!(per_completion, 120.0);
    }
}

/// Two copies of a state driven by the same stream see the same arrival
/// times whatever they decide.
#[test]
fn common_streams_share_arrivals_across_decisions() {
    let model = build_scenario(&ScenarioSpec::reference(ScenarioKind::NSystem)).unwrap();
    let mut root = ExecutionState::new(&model, &RngStream::new(1));
    while root.num_active_cases() < 3 {
        root.step(&model, model.postpone_index()).unwrap();
    }
    let stream = RngStream::new(42);
    let arrivals = |first: usize| {
        let mut s = root.clone();
        s.reseed(&model, &stream);
        let mut times = Vec::new();
        let mut clock = s.clock();
        let mut action = first;
        let mut rng = RngStream::new(0);
        while times.len() < 20 {
            let out = s.step(&model, action).unwrap();
            clock += out.dt;
            if let Event::Arrival { .. } = out.event {
                times.push(clock);
            }
            action = Heuristic::Spt.choose(&s, &model, &s.feasible_actions(&model), &mut rng);
        }
        times
    };
    let mask = root.feasible_actions(&model);
    let options: Vec<usize> = mask.indices().collect();
    assert!(options.len() >= 2);
    let reference = arrivals(options[0]);
    for &a in &options[1..] {
        let other = arrivals(a);
        for (x, y) in reference.iter().zip(&other) {
            assert!((x - y).abs() <= 1e-9 * x.max(1.0), "{x} vs {y}");
        }
    }
}

#[test]
fn mm1_long_run_matches_little() {
    // 50 episodes of 4000 cases: mean cycle time 1 / (mu - lambda) = 2.5
    let model = ProcessModel::mm1(0.6, 1.0).unwrap();
    let means: Vec<f64> = (0..50)
        .map(|e| {
            let r = run_episode(&model, &Heuristic::Fifo, 4000, &RngStream::new(e), Dynamics::Ctmdp).unwrap();
            r.mean_cycle_time()
        })
        .collect();
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    assert!((mean - 2.5).abs() / 2.5 < 0.05, "{mean}");
}
