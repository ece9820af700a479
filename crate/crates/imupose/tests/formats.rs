use imupose::checkpoint::{decode, encode};
use imupose::config::{extract_overrides, RunConfig};
use imupose::run::init_model;
use imupose_core::synth::default_layout;
use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> RunConfig {
    let o = [
        ("model.encoder.dim", "8"),
        ("model.encoder.global_dim", "8"),
        ("model.encoder.proj_dim", "8"),
        ("model.encoder.frames", "10"),
        ("model.encoder.patch_len", "2"),
        ("model.encoder.conv_channels", "[4]"),
        ("model.encoder.ffn_hidden", "8"),
        ("model.encoder.agg_hidden", "8"),
        ("model.mtp_hidden", "8"),
    ]
    .map(|(k, v)| (k.to_string(), v.to_string()));
    RunConfig::resolve(None, &o).unwrap()
}

proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed: u64, jitter in 0.0f64..3.0) {
        let cfg = small();
        let (model, mut ps) = init_model(&cfg, &default_layout()).unwrap();
        ps.jitter(jitter, &mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = encode(&model.spec, &cfg.to_json(), &ps).unwrap();
        let back = decode(&bytes, std::path::Path::new("mem")).unwrap();
        for (a, b) in back.params.params().iter().zip(ps.params()) {
            prop_assert!(a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(encode(&back.header.model, &back.header.config, &back.params).unwrap(), bytes);
    }

    #[test]
    fn overrides_reach_the_config(seed: u64, batch in 2usize..4096, lr in 1e-6f64..1.0) {
        let args = vec![
            "imupose".to_string(), "train".into(),
            "--train.seed".into(), seed.to_string(),
            format!("--train.batch_size={batch}"),
            "--out".into(), "x".into(),
            "--train.learning_rate".into(), lr.to_string(),
        ];
        let (rest, o) = extract_overrides(args).unwrap();
        prop_assert_eq!(rest, vec!["imupose", "train", "--out", "x"]);
        let c = RunConfig::resolve(None, &o).unwrap();
        prop_assert_eq!(c.train.seed, seed);
        prop_assert_eq!(c.train.batch_size, batch);
        prop_assert_eq!(c.train.learning_rate, lr);
    }
}
