use proptest::prelude::*;

use rlvr_lab::config::TrainConfig;
use rlvr_lab::error::Error;
use rlvr_lab::objectives::{KlMode, Method};
use rlvr_lab::rollout::Task;

fn config() -> impl Strategy<Value = TrainConfig> {
    (
        prop::sample::select(Method::ALL.to_vec()),
        prop::sample::select(vec![KlMode::None, KlMode::Reference, KlMode::Old]),
        0.01f64..5.0,
        0.0f64..0.5,
        1u32..7,
        1usize..5,
        (1u64..10_000, 1usize..6, 2usize..10, any::<u64>()),
        (1e-4f64..0.1, 0.1f64..2.0),
    )
        .prop_map(
            |(method, kl, tau, beta, bits, order, (steps, minis, g, seed), (lr, temp))| {
                let mut c = TrainConfig::for_method(method);
                c.task = Task::Parity { bits };
                c.context_order = order;
                c.loss.kl_mode = kl;
                c.loss.tau = tau;
                c.loss.beta = beta;
                c.steps = steps;
                c.mini_batch_size = 4;
                c.batch_size = 4 * minis;
                c.group_size = g;
                c.seed = seed;
                c.adam.learning_rate = lr;
                c.temperature = temp;
                c
            },
        )
}

proptest! {
    #[test]
    fn text_round_trips(c in config()) {
        prop_assume!(c.validate().is_ok());
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn overrides_win(c in config(), seed in any::<u64>()) {
        prop_assume!(c.validate().is_ok());
        let over = [format!("seed={seed}")];
        let back = TrainConfig::from_text_with_overrides(&c.to_text(), &over).unwrap();
        prop_assert_eq!(back.seed, seed);
    }
}

#[test]
fn every_unknown_key_is_listed() {
    let err = TrainConfig::from_text("method = real\nzeta = 1\nalpha = 2\n").unwrap_err();
    match err {
        Error::UnknownKeys(keys) => assert_eq!(keys, vec!["alpha".to_string(), "zeta".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "cfg") {
            let text = std::fs::read_to_string(&path).unwrap();
            TrainConfig::from_text(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 9);
}
