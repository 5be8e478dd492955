use motion_mae::checkpoint::{Checkpoint, CheckpointHeader, ModelKind};
use motion_mae::config::{ConfigFormat, ExperimentConfig};
use motion_mae::scenario_json::{from_json, to_json};
use motion_mae_core::numerics::{ParamStore, RngStream, Tensor};
use motion_mae_core::scene::{generate_synthetic_scenario, GenConfig};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
}

fn store(values: &[Vec<f64>], step: u64) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, v) in values.iter().enumerate() {
        s.insert(&format!("p{i:02}.weight"), Tensor::new(&[v.len()], v.clone()).unwrap()).unwrap();
    }
    for e in s.entries_mut() {
        // distinct moments so a swapped field would show up
        e.m = Tensor::new(e.value.shape(), e.value.data().iter().map(|x| x * 0.5).collect()).unwrap();
        e.v = Tensor::new(e.value.shape(), e.value.data().iter().map(|x| x * x).collect()).unwrap();
    }
    s.set_step_count(step);
    s
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scenario_json_keeps_every_float_bit(seed: u64, noise in prop::collection::vec(finite(), 1..64)) {
        let cfg = GenConfig { max_agents: 4, ..GenConfig::default() };
        let mut raw = generate_synthetic_scenario(&cfg, &mut RngStream::new(seed)).unwrap();
        let poses = raw.agents.iter_mut().flat_map(|a| a.poses.iter_mut());
        for (p, &x) in poses.zip(noise.iter().cycle()) {
            p.x = x;
            p.theta = -x;
        }
        let text = to_json(&raw).unwrap();
        let back = from_json(&text).unwrap();
        for (a, b) in raw.agents.iter().zip(&back.agents) {
            for (p, q) in a.poses.iter().zip(&b.poses) {
                prop_assert_eq!((p.x.to_bits(), p.y.to_bits(), p.theta.to_bits()), (q.x.to_bits(), q.y.to_bits(), q.theta.to_bits()));
            }
        }
        prop_assert_eq!(to_json(&back).unwrap(), text);
    }

    #[test]
    fn checkpoints_restore_every_bit(
        values in prop::collection::vec(prop::collection::vec(finite(), 1..20), 1..6), step: u64,
    ) {
        let ckpt = Checkpoint {
            header: CheckpointHeader { kind: ModelKind::Pretrain, config: ExperimentConfig::desk() },
            params: store(&values, step),
        };
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.params.step_count(), step);
        prop_assert_eq!(&back.header, &ckpt.header);
        for (a, b) in ckpt.params.entries().iter().zip(back.params.entries()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(bits(&a.value), bits(&b.value));
            prop_assert_eq!(bits(&a.m), bits(&b.m));
            prop_assert_eq!(bits(&a.v), bits(&b.v));
        }
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn any_flipped_checkpoint_byte_is_rejected(pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let ckpt = Checkpoint {
            header: CheckpointHeader { kind: ModelKind::Forecast, config: ExperimentConfig::desk() },
            params: store(&[vec![1.0, -2.0, 3.5]], 7),
        };
        let mut bytes = ckpt.to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn config_overlays_survive_a_json_round_trip(lr in 1e-5f64..1e-1, alpha in 0.0f64..=1.0, seed: u64) {
        let text = format!("seed = {}\n[train]\nlr = {lr:e}\n[masking]\nalpha = {alpha:e}\n", seed >> 1);
        let cfg = ExperimentConfig::parse(&text, ConfigFormat::Toml).unwrap();
        prop_assert_eq!(cfg.train.lr.to_bits(), lr.to_bits());
        prop_assert_eq!(cfg.masking.alpha.to_bits(), alpha.to_bits());
        prop_assert_eq!(cfg.seed, seed >> 1);
        let again = ExperimentConfig::parse(&cfg.to_json(), ConfigFormat::Json).unwrap();
        prop_assert_eq!(again.hash(), cfg.hash());
        prop_assert_eq!(again, cfg);
    }
}

#[test]
fn desk_and_full_profiles_hash_differently() {
    assert_ne!(ExperimentConfig::desk().hash(), ExperimentConfig::full().hash());
    assert_eq!(ExperimentConfig::desk().hash(), ExperimentConfig::desk().hash());
}
