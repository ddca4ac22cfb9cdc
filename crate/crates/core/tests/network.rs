use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use starflow::network::{count_parameters, StarCellState};
use starflow::{no_grad, Binder, ModelConfig, StarFlow, TemporalMode, Tensor};

fn images(n: usize, side: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Tensor::new(
                &[1, 3, side, side],
                (0..3 * side * side).map(|_| rng.random::<f64>()).collect(),
            )
            .unwrap()
        })
        .collect()
}

fn with(mode: TemporalMode, occ: bool, share: bool) -> ModelConfig {
    ModelConfig {
        temporal_mode: mode,
        use_occlusion: occ,
        share_decoder: share,
        ..ModelConfig::tiny()
    }
}

#[test]
fn closed_form_count_matches_built_model() {
    for mode in [TemporalMode::None, TemporalMode::TrFlow, TemporalMode::TrFeat] {
        for occ in [false, true] {
            for share in [false, true] {
                for cfg in [with(mode, occ, share), ModelConfig { temporal_mode: mode, use_occlusion: occ, share_decoder: share, ..ModelConfig::default() }] {
                    let model = StarFlow::new(cfg.clone(), 0).unwrap();
                    assert_eq!(count_parameters(&cfg).total, model.params.num_scalars(), "{cfg:?}");
                }
            }
        }
    }
}

#[test]
fn shared_decoder_count_is_independent_of_depth() {
    let counts: Vec<usize> = [3usize, 4, 5]
        .iter()
        .map(|&levels| {
            let cfg = ModelConfig {
                levels,
                encoder_widths: vec![16; levels],
                ..ModelConfig::default()
            };
            count_parameters(&cfg).decoder
        })
        .collect();
    assert_eq!(counts[0], counts[1]);
    assert_eq!(counts[1], counts[2]);
}

#[test]
fn occlusion_head_adds_one_output_channel_per_decoder() {
    for share in [true, false] {
        let base = ModelConfig {
            use_occlusion: false,
            share_decoder: share,
            ..ModelConfig::default()
        };
        let occ = ModelConfig {
            use_occlusion: true,
            ..base.clone()
        };
        let (a, b) = (count_parameters(&base), count_parameters(&occ));
        let k = base.kernel;
        let per_instance = k * k * base.penultimate_width() + 1;
        assert_eq!(b.total - a.total, per_instance * a.decoder_instances);
        if share {
            assert!(((b.total - a.total) as f64) < 0.01 * a.total as f64);
        }
    }
}

#[test]
fn scale_sharing_divides_decoder_by_depth() {
    for levels in [3usize, 4, 5] {
        let shared = ModelConfig {
            levels,
            encoder_widths: vec![16; levels],
            ..ModelConfig::default()
        };
        let unshared = ModelConfig {
            share_decoder: false,
            ..shared.clone()
        };
        let (s, u) = (count_parameters(&shared), count_parameters(&unshared));
        assert_eq!(u.decoder, levels * s.decoder);
        assert!(u.total > s.total);
    }
}

#[test]
fn trfeat_is_larger_than_trflow_is_larger_than_two_frame() {
    let c = |m| count_parameters(&ModelConfig { temporal_mode: m, ..ModelConfig::default() }).total;
    assert!(c(TemporalMode::TrFeat) > c(TemporalMode::TrFlow));
    assert!(c(TemporalMode::TrFlow) > c(TemporalMode::None));
}

/// A TRFeat model carrying the weights of `two_frame` with every weight that
/// reads the temporal input set to zero.
fn trfeat_twin(two_frame: &StarFlow) -> StarFlow {
    let mut cfg = two_frame.config.clone();
    cfg.temporal_mode = TemporalMode::TrFeat;
    let mut twin = StarFlow::new(cfg, 99).unwrap();
    for p in twin.params.iter_mut() {
        let Some(src) = two_frame.params.by_name(&p.name) else {
            continue;
        };
        if src.shape == p.shape {
            p.value.clone_from(&src.value);
            continue;
        }
        // estimator input layer: the temporal channels come last
        let (cout, cin_new, k) = (p.shape[0], p.shape[1], p.shape[2]);
        let cin_old = src.shape[1];
        let kk = k * k;
        for co in 0..cout {
            for ci in 0..cin_new {
                for t in 0..kk {
                    p.value[(co * cin_new + ci) * kk + t] = if ci < cin_old {
                        src.value[(co * cin_old + ci) * kk + t]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    twin
}

#[test]
fn trfeat_with_invalid_state_and_zero_temporal_weights_is_two_frame() {
    let two_frame = StarFlow::new(with(TemporalMode::None, true, true), 5).unwrap();
    let twin = trfeat_twin(&two_frame);
    for seed in 0..10 {
        let ims = images(2, 16, seed);
        let run = |m: &StarFlow| {
            no_grad(|| {
                let b = Binder::frozen(&m.params);
                m.forward_images(&b, &ims[0], &ims[1], &StarCellState::invalid()).unwrap()
            })
        };
        let (a, b) = (run(&two_frame), run(&twin));
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            assert_eq!(la.flow.tensor().data(), lb.flow.tensor().data());
            assert_eq!(
                la.occ.as_ref().unwrap().tensor().data(),
                lb.occ.as_ref().unwrap().tensor().data()
            );
        }
    }
}

#[test]
fn prediction_pyramid_is_coarse_to_fine_ending_at_half_resolution() {
    let model = StarFlow::new(with(TemporalMode::TrFeat, true, true), 0).unwrap();
    let ims = images(2, 32, 1);
    let b = Binder::frozen(&model.params);
    let out = no_grad(|| model.forward_images(&b, &ims[0], &ims[1], &StarCellState::invalid())).unwrap();
    let sides: Vec<usize> = out.levels.iter().map(|l| l.flow.dims().1).collect();
    assert_eq!(sides, vec![4, 8, 16]);
    for l in &out.levels {
        let o = l.occ.as_ref().unwrap().tensor();
        assert!(o.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn untrained_flow_is_small() {
    let model = StarFlow::new(ModelConfig::tiny(), 3).unwrap();
    let ims = images(2, 32, 2);
    let b = Binder::frozen(&model.params);
    let out = no_grad(|| model.forward_images(&b, &ims[0], &ims[1], &StarCellState::invalid())).unwrap();
    let max = out.finest().flow.tensor().data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max < 0.5, "{max}");
}

#[test]
fn sequence_threads_temporal_state_after_the_first_pair() {
    for mode in [TemporalMode::None, TemporalMode::TrFlow, TemporalMode::TrFeat] {
        let model = StarFlow::new(with(mode, true, true), 0).unwrap();
        for n in 2..=6 {
            let ims = images(n, 16, n as u64);
            let b = Binder::frozen(&model.params);
            let out = no_grad(|| model.forward_sequence(&b, &ims)).unwrap();
            assert_eq!(out.steps.len(), n - 1);
            let expected = if mode == TemporalMode::None { 0 } else { n - 2 };
            assert_eq!(out.temporal_steps, expected, "{mode:?} n={n}");
            assert_eq!(out.backward_passes, expected);
        }
    }
}

#[test]
fn three_frames_use_the_temporal_state_once() {
    let model = StarFlow::new(with(TemporalMode::TrFeat, true, true), 0).unwrap();
    let b = Binder::frozen(&model.params);
    let out = no_grad(|| model.forward_sequence(&b, &images(3, 16, 0))).unwrap();
    assert_eq!(out.temporal_steps, 1);
}

#[test]
fn every_time_step_touches_the_same_parameters() {
    for share in [true, false] {
        let model = StarFlow::new(with(TemporalMode::TrFeat, true, share), 0).unwrap();
        let b = Binder::trainable(&model.params);
        let out = model.forward_sequence(&b, &images(4, 16, 0)).unwrap();
        assert_eq!(out.touched.len(), 3);
        assert!(out.touched.windows(2).all(|w| w[0] == w[1]));
        // nothing is left unused
        assert_eq!(out.touched[0].len(), model.params.len());
    }
}

#[test]
fn first_pair_of_a_sequence_matches_a_standalone_pair() {
    let model = StarFlow::new(with(TemporalMode::TrFeat, true, true), 4).unwrap();
    let ims = images(3, 16, 8);
    let b = Binder::frozen(&model.params);
    let seq = no_grad(|| model.forward_sequence(&b, &ims)).unwrap();
    let pair = no_grad(|| model.forward_images(&b, &ims[0], &ims[1], &StarCellState::invalid())).unwrap();
    assert_eq!(seq.steps[0].finest().flow.tensor().data(), pair.finest().flow.tensor().data());
}

#[test]
fn image_size_must_be_a_multiple_of_the_pyramid() {
    let model = StarFlow::new(ModelConfig::tiny(), 0).unwrap();
    let ims = images(2, 12, 0);
    let b = Binder::frozen(&model.params);
    assert!(model.forward_sequence(&b, &ims).is_err());
    assert!(model.forward_sequence(&b, &ims[..1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn count_matches_model_for_random_widths(
        levels in 2usize..5,
        enc in 2usize..10, feat in 1usize..8, est in prop::collection::vec(1usize..10, 1..4),
        ctx in 1usize..8, tw in 1usize..6, disp in 1usize..3,
        mode in prop::sample::select(vec![TemporalMode::None, TemporalMode::TrFlow, TemporalMode::TrFeat]),
        occ: bool, share: bool,
    ) {
        let cfg = ModelConfig {
            levels,
            encoder_widths: vec![enc; levels],
            feature_width: feat,
            estimator_widths: est,
            context_width: ctx,
            context_dilations: vec![1, 2, 1],
            max_disp: disp,
            temporal_width: tw,
            temporal_mode: mode,
            use_occlusion: occ,
            share_decoder: share,
            ..ModelConfig::default()
        };
        let model = StarFlow::new(cfg.clone(), 0).unwrap();
        prop_assert_eq!(count_parameters(&cfg).total, model.params.num_scalars());
    }
}
