// Instrumented single episodes: watch conditioning + selection dynamics.
use atd_core::domain::{query, GridSpec, ObservationSet};
use atd_core::harness::config::{Method, CONFIG_SCHEMA};
use atd_core::harness::ExperimentConfig;
use atd_core::permanent::TrainBuffer;
use atd_core::policy::{score_candidates, select_greedy, select_query};
use atd_core::posterior::sample_posterior;
use atd_core::reward::{reward_update, RewardModel, SupervisedStore};
use atd_core::seed::derive;
use atd_core::transient::{clamp_to_observations, train_h, HModel, HTrainOpts, UpdateScheduler};

fn main() {
    let mut cfg = ExperimentConfig { schema: CONFIG_SCHEMA, ..Default::default() };
    cfg.permanent.corpus_n = 128;
    let budget = 150usize;
    let seed = 0u64;
    let task = cfg.build_task(seed, budget).unwrap();
    let model = cfg.build_permanent(32, 32).unwrap();
    let grid = GridSpec::new(32, 32, 1, 1).unwrap();
    let scheduler = UpdateScheduler::adaptive(budget, 30, 1.0).unwrap();
    println!("update steps: {:?}", &scheduler.indices[..8.min(scheduler.indices.len())]);

    for method in [Method::Ga, Method::EmPtdm] {
        let mut h = Some(HModel::new(32, 32, &[32, 64], 32, derive(seed, "h-model", 0)));
        let mut reward = RewardModel::new(1, 1, derive(seed, "reward", 0));
        let mut store = SupervisedStore::new();
        let mut obs = ObservationSet::empty(&grid);
        let mut visited = vec![false; 1024];
        let mut cum = 0.0;
        let mut first_hit: Option<usize> = None;
        for t in 0..budget {
            if scheduler.contains(t) {
                let mut ens = sample_posterior(&model, h.as_ref(), &obs, 16, derive(seed, "h-buffer", t as u64)).unwrap();
                clamp_to_observations(&mut ens.samples, &obs);
                let buffer = TrainBuffer::from_samples(ens.samples).unwrap();
                let opts = HTrainOpts { epochs: 30, lr: 1e-3, momentum: 0.9, tau_loss: 1e-6, clip: 100.0, batch_size: 4 };
                let (h2, _) = train_h(h.as_ref().unwrap(), &model, &buffer, &obs, &opts, derive(seed, "h-train", t as u64)).unwrap();
                h = Some(h2);
            }
            let ens = sample_posterior(&model, h.as_ref(), &obs, 16, derive(seed, "ensemble", t as u64)).unwrap();
            let b = score_candidates(&ens, &grid, &reward, &cfg.policy_config(), t, budget).unwrap();
            let q = match method { Method::Ga => select_greedy(&b, &visited).unwrap(), _ => select_query(&b, &visited).unwrap() };
            let (fb, next) = query(&task, &obs, q).unwrap();
            obs = next; visited[q] = true; cum += fb.outcome;
            if fb.outcome > 0.0 && first_hit.is_none() { first_hit = Some(t); }
            store.push(fb.patch_values.clone(), fb.outcome).unwrap();
            let (r2, _) = reward_update(&reward, &store, 3, 0.01, derive(seed, "reward-update", t as u64)).unwrap();
            reward = r2;
            if t % 25 == 0 || t == budget - 1 {
                // conditioning probe: posterior mean at first discovered ball pixel
                let probe = obs
                    .queried
                    .iter()
                    .find(|&&qq| {
                        let (r, c) = (qq / 32, qq % 32);
                        task.content[[r, c]] > 0.5
                    })
                    .copied();
                let cond = probe.map(|qq| {
                    let (r, c) = (qq / 32, qq % 32);
                    ens.samples.iter().map(|s| s[[r, c]]).sum::<f64>() / 16.0
                });
                println!("{:?} t={t:3} cum={cum:5.1} hit0={first_hit:?} mean@firstball={cond:?} chose q={q} y={:.2}", method, fb.outcome);
            }
        }
        let u = task.discoverable(0.0);
        println!("{:?}: final cum {cum:.1}, SR {:.4}\n", method, cum / budget.min(u) as f64);
    }
}
