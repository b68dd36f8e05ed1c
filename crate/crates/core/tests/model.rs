use streamvq::model::{clip_batch, Container, ModelConfig, Network, TemporalOutput, TemporalState};
use streamvq::nn::Tensor;
use streamvq::synth::generate_clip;
use streamvq::Error;

fn clips_tensor(n: usize, t: usize, size: usize) -> Tensor<f32> {
    let clips: Vec<_> = (0..n)
        .map(|i| generate_clip(11, &format!("c{i}"), t, size, size).unwrap())
        .collect();
    clip_batch(&clips.iter().collect::<Vec<_>>()).unwrap()
}

fn frame_slice(x: &Tensor<f32>, clip: usize, range: std::ops::Range<usize>) -> Vec<f32> {
    let s = x.shape();
    let per = s[2..].iter().product::<usize>();
    let base = clip * s[1] * per;
    x.data()[base + range.start * per..base + range.end * per].to_vec()
}

fn sub_clip(x: &Tensor<f32>, range: std::ops::Range<usize>) -> Tensor<f32> {
    let s = x.shape().to_vec();
    let mut data = Vec::new();
    for b in 0..s[0] {
        data.extend(frame_slice(x, b, range.clone()));
    }
    Tensor::from_vec(&[s[0], range.len(), s[2], s[3], s[4]], data).unwrap()
}

#[test]
fn encoder_shapes_follow_strides() {
    let net = Network::<f32>::new(ModelConfig::default()).unwrap();
    let x = clips_tensor(1, 8, 96).reshape(&[8, 3, 96, 96]).unwrap();
    let f = net.encode(&x).unwrap();
    assert_eq!(f.x1.shape(), &[8, 32, 24, 24]);
    assert_eq!(f.x2.shape(), &[8, 32, 24, 24]);
    assert_eq!(f.x3.shape(), &[8, 64, 12, 12]);
    assert_eq!(f.x4.shape(), &[8, 128, 6, 6]);
    let bad = Tensor::<f32>::zeros(&[1, 3, 40, 48]);
    assert!(matches!(net.encode(&bad), Err(Error::Shape(_))));
    let zeros = net.encode(&Tensor::<f32>::zeros(&[2, 3, 32, 32])).unwrap();
    assert!(zeros.x4.all_finite());
}

#[test]
fn identical_frames_give_identical_features() {
    let net = Network::<f32>::new(ModelConfig::default()).unwrap();
    let one = clips_tensor(1, 1, 32);
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let x = Tensor::from_vec(&[2, 3, 32, 32], data).unwrap();
    let f = net.encode(&x).unwrap();
    let half = f.x4.len() / 2;
    assert_eq!(&f.x4.data()[..half], &f.x4.data()[half..]);
}

#[test]
fn forward_shape_and_open_unit_range() {
    for cfg in [ModelConfig::default(), ModelConfig::baseline()] {
        let net = Network::<f32>::new(cfg).unwrap();
        let (y, state) = net.forward(&clips_tensor(2, 4, 64), None).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(state.all_finite());
    }
    let net = Network::<f32>::new(ModelConfig::default()).unwrap();
    for (h, w) in [(32, 32), (48, 80)] {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, h, w]);
        assert_eq!(net.forward(&x, None).unwrap().0.shape(), &[1, 2, 3]);
    }
}

#[test]
fn carried_state_matches_full_sequence() {
    let net = Network::<f32>::new(ModelConfig::default()).unwrap();
    let x = clips_tensor(1, 6, 32);
    let (full, _) = net.forward(&x, None).unwrap();
    let (a, st) = net.forward(&sub_clip(&x, 0..2), None).unwrap();
    let (b, _) = net.forward(&sub_clip(&x, 2..6), Some(&st)).unwrap();
    let joined: Vec<f32> = a.data().iter().chain(b.data()).copied().collect();
    let diff = full.data().iter().zip(&joined).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn future_frames_do_not_affect_the_past() {
    let net = Network::<f32>::new(ModelConfig::default()).unwrap();
    let x = clips_tensor(1, 5, 32);
    let (y, _) = net.forward(&x, None).unwrap();
    let mut data = x.data().to_vec();
    let per = 3 * 32 * 32;
    for v in &mut data[3 * per..] {
        *v = 1.0 - *v;
    }
    let (z, _) = net.forward(&Tensor::from_vec(x.shape(), data).unwrap(), None).unwrap();
    assert_eq!(&y.data()[..9], &z.data()[..9]);
    assert_ne!(&y.data()[9..], &z.data()[9..]);
}

#[test]
fn batch_order_does_not_leak_between_clips() {
    let net = Network::<f32>::new(ModelConfig::default()).unwrap();
    let x = clips_tensor(2, 3, 32);
    let (y, _) = net.forward(&x, None).unwrap();
    let mut swapped = frame_slice(&x, 1, 0..3);
    swapped.extend(frame_slice(&x, 0, 0..3));
    let (z, _) = net.forward(&Tensor::from_vec(x.shape(), swapped).unwrap(), None).unwrap();
    assert_eq!(&y.data()[..9], &z.data()[9..]);
    assert_eq!(&y.data()[9..], &z.data()[..9]);
}

#[test]
fn baseline_is_frame_independent() {
    let net = Network::<f32>::new(ModelConfig::baseline()).unwrap();
    let x = clips_tensor(1, 4, 32);
    let (y, _) = net.forward(&x, None).unwrap();
    let order = [2usize, 0, 3, 1];
    let mut data = Vec::new();
    for &i in &order {
        data.extend(frame_slice(&x, 0, i..i + 1));
    }
    let (z, _) = net.forward(&Tensor::from_vec(x.shape(), data).unwrap(), None).unwrap();
    for (k, &i) in order.iter().enumerate() {
        assert_eq!(&z.data()[3 * k..3 * k + 3], &y.data()[3 * i..3 * i + 3]);
    }
}

#[test]
fn zero_input_recurrence_is_spatially_uniform() {
    let net = Network::<f64>::new(ModelConfig::default()).unwrap();
    let feats = net.encode(&Tensor::zeros(&[3, 3, 32, 32])).unwrap();
    let zero = streamvq::model::EncoderFeatures {
        x1: Tensor::zeros(feats.x1.shape()),
        x2: Tensor::zeros(feats.x2.shape()),
        x3: Tensor::zeros(feats.x3.shape()),
        x4: feats.x4,
    };
    let st = TemporalState::zeros(&net, 1, 32, 32);
    let (out, next) = net.temporal_forward(&zero, 1, &st).unwrap();
    for m in &out.maps {
        let (_, c, h, w) = m.dims4();
        for plane in m.data().chunks(h * w) {
            assert!(plane.iter().all(|&v| v == plane[0] && v.is_finite()));
        }
        assert!(c > 0);
    }
    assert!(next.all_finite());
    let wrong = TemporalState::zeros(&net, 2, 32, 32);
    assert!(matches!(net.temporal_forward(&zero, 1, &wrong), Err(Error::Shape(_))));
}

#[test]
fn pooling_ignores_spatial_size_of_constant_maps() {
    let net = Network::<f64>::new(ModelConfig::default()).unwrap();
    let make = |s: usize| {
        let maps = [32usize, 32, 64].map(|c| Tensor::from_vec(&[2, c, s, s], vec![0.3; 2 * c * s * s]).unwrap());
        let x4 = Tensor::from_vec(&[2, 128, s, s], vec![0.7; 2 * 128 * s * s]).unwrap();
        net.predict(&TemporalOutput { maps }, &x4, 1).unwrap()
    };
    let (a, b) = (make(3), make(6));
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-12));
    assert_eq!(make(3).shape(), &[1, 2, 3]);
}

#[test]
fn group_size_has_no_numerical_effect() {
    let x = clips_tensor(1, 3, 32);
    let mut net = Network::<f32>::new(ModelConfig::default()).unwrap();
    let (a, _) = net.forward(&x, None).unwrap();
    for g in [1, 7, 10_000] {
        net.set_group_size(g);
        assert_eq!(net.forward(&x, None).unwrap().0, a);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.nvq");
    let net = Network::<f32>::new(ModelConfig { init_seed: 5, ..ModelConfig::default() }).unwrap();
    net.save_checkpoint(&path).unwrap();
    let back = Network::<f32>::load_checkpoint(&path).unwrap();
    let x = clips_tensor(1, 3, 32);
    assert_eq!(net.forward(&x, None).unwrap().0, back.forward(&x, None).unwrap().0);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Network::<f32>::load_checkpoint(&path), Err(Error::Integrity(_))));

    std::fs::write(&path, &bytes).unwrap();
    let err = Network::<f32>::load_checkpoint_expecting(&path, &ModelConfig { init_seed: 5, ..ModelConfig::baseline() });
    assert!(matches!(err, Err(Error::ConfigMismatch(_))));
}

#[test]
fn checkpoint_rejects_missing_tensors() {
    let net = Network::<f32>::new(ModelConfig::default()).unwrap();
    let mut c: Container = net.to_container();
    c.tensors.pop();
    assert!(matches!(Network::<f32>::from_container(&c), Err(Error::Integrity(_))));
    let mut c = net.to_container();
    let (name, _) = c.tensors[0].clone();
    c.tensors[0] = (name, Tensor::zeros(&[1]));
    assert!(matches!(Network::<f32>::from_container(&c), Err(Error::Integrity(_))));
}

#[test]
fn init_is_seeded() {
    let a = Network::<f32>::new(ModelConfig::default()).unwrap();
    let b = Network::<f32>::new(ModelConfig::default()).unwrap();
    let c = Network::<f32>::new(ModelConfig { init_seed: 1, ..ModelConfig::default() }).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for cfg in [ModelConfig::default(), ModelConfig::baseline()] {
        let net = Network::<f64>::new(cfg).unwrap();
        let x: Tensor<f64> = clips_tensor(1, 2, 32).cast();
        let weights: Vec<f64> = (0..6).map(|i| 1.0 - 0.3 * i as f64).collect();
        let loss = |n: &Network<f64>| {
            let (y, _) = n.forward_train(&x, 3).unwrap();
            y.data().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, tape) = net.forward_train(&x, 3).unwrap();
        let dout = Tensor::from_vec(&[1, 2, 3], weights.clone()).unwrap();
        let grads = net.backward(&tape, &dout).unwrap();
        let ids: Vec<_> = net.params().ids().collect();
        for (k, &id) in ids.iter().enumerate().step_by(ids.len() / 8) {
            let len = net.params().get(id).len();
            let i = (k * 7919) % len;
            // small step: larger ones cross ReLU / max-pool switch points in early layers
            let eps = 1e-6;
            let mut p = net.clone();
            p.params_mut().get_mut(id).data_mut()[i] += eps;
            let mut m = net.clone();
            m.params_mut().get_mut(id).data_mut()[i] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            let an = grads.get(id)[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            assert!(rel < 1e-4, "{}[{i}]: fd {fd} analytic {an}", net.params().name(id));
        }
    }
}
