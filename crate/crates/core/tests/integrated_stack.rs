use pktstack::config::TrainConfig;
use pktstack::learner::{build_base_model, freeze_and_truncate, TRUNK_WIDTH};
use pktstack::nn::{save_checkpoint, GraphBuilder, LayerSpec, ModelGraph, Tensor};
use pktstack::stack::*;
use pktstack::train::image_batch;
use pktstack::transform::{transform_payload, GrayscaleImage, LabeledImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trunks<T: pktstack::Scalar>(n: usize, seed: u64) -> Vec<ModelGraph<T>> {
    (0..n).map(|c| freeze_and_truncate(build_base_model(c, seed + c as u64)).unwrap()).collect()
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("class{c}")).collect()
}

fn random_images(n: usize, seed: u64) -> Vec<GrayscaleImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..400);
            let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            transform_payload(&payload)
        })
        .collect()
}

fn labeled(n: usize, classes: usize, seed: u64) -> Vec<LabeledImage> {
    random_images(n, seed).into_iter().enumerate().map(|(i, image)| LabeledImage { class_id: (i % classes) as u16, image }).collect()
}

fn small_config() -> TrainConfig {
    TrainConfig { meta_epochs: 3, meta_batch_size: 16, ..TrainConfig::default() }
}

#[test]
fn meta_widths() {
    let cfg = TrainConfig::default();
    let m: IntegratedModel<f32> = build_integrated(trunks(2, 0), names(2), &cfg, 1).unwrap();
    assert_eq!(m.meta_input_width(), 32);
    assert_eq!(m.meta_head().trainable_parameter_count(), m.meta_head().parameter_count());
    assert!(m.trunks().iter().all(|t| t.trainable_parameter_count() == 0));
}

#[test]
fn construction_errors() {
    let cfg = TrainConfig::default();
    let mut ts: Vec<ModelGraph<f32>> = trunks(3, 0);
    ts[1].set_trainable(true);
    assert!(matches!(build_integrated(ts, names(3), &cfg, 0), Err(StackError::TrainableTrunk(1))));
    assert!(matches!(build_integrated(trunks::<f32>(1, 0), names(1), &cfg, 0), Err(StackError::TooFewTrunks(1))));

    let mut b = GraphBuilder::new(&[16, 16, 1]);
    b.then("flat", LayerSpec::Flatten).unwrap().then("d", LayerSpec::Dense { out_units: 8 }).unwrap();
    let mut narrow: ModelGraph<f32> = b.build(0).unwrap();
    narrow.set_trainable(false);
    let mut ts = trunks(2, 0);
    ts.push(narrow);
    assert!(matches!(build_integrated(ts, names(3), &cfg, 0), Err(StackError::TrunkShapeMismatch { index: 2, .. })));
}

#[test]
fn freeze_contract() {
    let cfg = small_config();
    let mut m: IntegratedModel<f32> = build_integrated(trunks(3, 10), names(3), &cfg, 2).unwrap();
    let before: Vec<Vec<u8>> = m.trunks().iter().map(save_checkpoint).collect();
    let head_before = m.meta_head().clone();
    m.train_meta(&labeled(48, 3, 1), &cfg, 3).unwrap();
    let after: Vec<Vec<u8>> = m.trunks().iter().map(save_checkpoint).collect();
    assert_eq!(before, after);
    assert_ne!(&head_before, m.meta_head());

    let imgs = random_images(4, 2);
    let refs: Vec<&GrayscaleImage> = imgs.iter().collect();
    let (out, cache) = m.forward_train(&image_batch(&refs), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let grads = m.backward(&cache, &Tensor::filled(out.shape(), 1.0)).unwrap();
    assert!(grads.trunks.iter().all(|g| g.allocated() == 0));
    assert_eq!(grads.meta.allocated(), 6);
}

#[test]
fn composition_identity() {
    let m: IntegratedModel<f64> = build_integrated(trunks(4, 20), names(4), &TrainConfig::default(), 5).unwrap();
    let imgs = random_images(100, 3);
    let refs: Vec<&GrayscaleImage> = imgs.iter().collect();
    let batch = image_batch::<f64>(&refs);
    let whole = m.infer(&batch).unwrap();
    let parts: Vec<Tensor<f64>> = m.trunks().iter().map(|t| t.infer(&batch).unwrap()).collect();
    let mut features = Vec::new();
    for i in 0..100 {
        for p in &parts {
            features.extend_from_slice(p.sample(i));
        }
    }
    let manual = m.meta_head().infer(&Tensor::new(vec![100, 4 * TRUNK_WIDTH], features).unwrap()).unwrap();
    let worst = whole.data().iter().zip(manual.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn predictions_lie_on_the_simplex() {
    let m: IntegratedModel<f32> = build_integrated(trunks(5, 30), names(5), &TrainConfig::default(), 6).unwrap();
    let imgs = random_images(20, 4);
    let refs: Vec<&GrayscaleImage> = imgs.iter().collect();
    for p in m.predict_batch(&refs).unwrap() {
        assert_eq!(p.probabilities.len(), 5);
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        assert!(p.probabilities.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(p.class_id, argmax(&p.probabilities));
        assert_eq!(p.class_name, format!("class{}", p.class_id));
    }
}

#[test]
fn exact_tie_picks_lowest_class() {
    let mut m: IntegratedModel<f32> = build_integrated(trunks(3, 40), names(3), &TrainConfig::default(), 7).unwrap();
    let head = m.meta_head_mut();
    let last = head.nodes().len() - 2;
    for p in &mut head.nodes_mut()[last].params {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let p = m.predict(&random_images(1, 5)[0]).unwrap();
    assert_eq!(p.probabilities, vec![f64::from(1.0_f32 / 3.0); 3]);
    assert_eq!(p.class_id, 0);
}

#[test]
fn train_meta_errors_and_determinism() {
    let cfg = small_config();
    let mut m: IntegratedModel<f32> = build_integrated(trunks(2, 50), names(2), &cfg, 8).unwrap();
    assert!(matches!(m.train_meta(&[], &cfg, 0), Err(StackError::EmptyDataset)));
    let bad = vec![LabeledImage { class_id: 2, image: GrayscaleImage::zeros() }];
    assert!(matches!(m.train_meta(&bad, &cfg, 0), Err(StackError::LabelOutOfRange { label: 2, classes: 2 })));

    let data = labeled(40, 2, 9);
    let run = || {
        let mut m: IntegratedModel<f32> = build_integrated(trunks(2, 50), names(2), &cfg, 8).unwrap();
        let log = m.train_meta(&data, &cfg, 11).unwrap();
        (save_checkpoint(m.meta_head()), log)
    };
    assert_eq!(run(), run());
}

#[test]
fn bundle_round_trip_and_damage() {
    let cfg = small_config();
    let mut m: IntegratedModel<f32> = build_integrated(trunks(3, 60), names(3), &cfg, 9).unwrap();
    m.train_meta(&labeled(30, 3, 2), &cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_integrated(&m, dir.path()).unwrap();
    let back: IntegratedModel<f32> = load_integrated(dir.path()).unwrap();
    assert_eq!(back, m);
    let probes = random_images(10, 6);
    let refs: Vec<&GrayscaleImage> = probes.iter().collect();
    assert_eq!(back.predict_batch(&refs).unwrap(), m.predict_batch(&refs).unwrap());

    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("classes\t3"));

    let corrupt = tempfile::tempdir().unwrap();
    save_integrated(&m, corrupt.path()).unwrap();
    let meta = corrupt.path().join(META_FILE);
    let mut bytes = std::fs::read(&meta).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&meta, bytes).unwrap();
    assert!(matches!(load_integrated::<f32>(corrupt.path()), Err(StackError::ChecksumMismatch(f)) if f == META_FILE));

    std::fs::remove_file(dir.path().join(trunk_file_name(1))).unwrap();
    assert!(matches!(load_integrated::<f32>(dir.path()), Err(StackError::ManifestMismatch(_))));
}
