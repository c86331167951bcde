use proptest::prelude::*;
use semsr::config::{parse_config, RunConfig};
use semsr::sampler::LreStart;
use semsr::Error;

fn configs() -> impl Strategy<Value = RunConfig> {
    (
        0u64..=i64::MAX as u64,
        prop::sample::select(vec![16usize, 32, 64]),
        0.0f64..4.0,
        1usize..=64,
        any::<bool>(),
        0.0f64..=1.0,
        1usize..=1000,
        any::<bool>(),
    )
        .prop_map(|(seed, lr, lambda, rank, lre, threshold, steps, train_max)| {
            let mut c = RunConfig::minimal(seed, format!("runs/{seed}"));
            c.data.lr_size = lr;
            c.data.hr_size = lr * 4;
            c.dape.lambda = lambda;
            c.dape.lora_rank = rank;
            c.sampler.use_lre = lre;
            c.sampler.steps = steps;
            c.sampler.lre_start = if train_max { LreStart::TrainMax } else { LreStart::MaxSpaced };
            c.eval.threshold = threshold;
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialize_then_parse_is_identity(cfg in configs()) {
        let text = cfg.to_toml_string().unwrap();
        prop_assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg.clone());
        prop_assert_eq!(RunConfig::from_toml_str(&text).unwrap().hash().unwrap(), cfg.hash().unwrap());
    }
}

#[test]
fn shipped_toy_config_is_valid() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.toml");
    let cfg = parse_config(path).unwrap();
    assert_eq!((cfg.data.hr_size, cfg.data.lr_size), (64, 16));
    assert!(cfg.data.test_count >= 64);
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(parse_config("/nonexistent/run.toml"), Err(Error::Io { .. })));
}

#[test]
fn unknown_nested_key_is_named() {
    let err = RunConfig::from_toml_str("seed = 1\nout_dir = \"o\"\n[sampler]\nstep = 3\n").unwrap_err();
    assert!(err.is_usage());
    assert!(err.to_string().contains("step"));
}
