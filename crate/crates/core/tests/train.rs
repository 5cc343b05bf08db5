use grapedet::data::{load_samples, synth_vineyard, Sample, SynthProfile};
use grapedet::geometry::BBox;
use grapedet::model::{Detector, ModelConfig};
use grapedet::tensor::{Tape, Tensor};
use grapedet::train::{assign_targets, batch_loss, fit, total_loss, LossWeights, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn canvas_box(size: f64) -> impl Strategy<Value = BBox> {
    (0.0..size, 0.0..size, 2.0..size / 2.0, 2.0..size / 2.0)
        .prop_map(move |(x, y, w, h)| BBox::new(x, y, (x + w).min(size), (y + h).min(size)))
}

fn samples(n: usize, seed: u64, size: u32) -> Vec<Sample> {
    let dir = tempfile::tempdir().unwrap();
    let profile = SynthProfile { width: 64, height: 64, ..SynthProfile::default() };
    let m = synth_vineyard(n, seed, &profile, dir.path()).unwrap();
    load_samples(&m, size).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_ignores_box_order_and_stays_on_the_grid(
        boxes in prop::collection::vec(canvas_box(128.0), 0..8),
        rot in 0usize..8,
    ) {
        let cfg = ModelConfig::tiny().with_input_size(128);
        let a = assign_targets(&[boxes.clone()], &cfg, 4.0);
        let mut shuffled = boxes.clone();
        shuffled.rotate_left(rot.min(boxes.len()));
        shuffled.reverse();
        prop_assert_eq!(&assign_targets(&[shuffled], &cfg, 4.0), &a);
        for st in &a.scales {
            for e in &st.entries {
                prop_assert!(e.grid_x < st.grid && e.grid_y < st.grid);
                prop_assert!(e.anchor < 3 && e.image == 0);
                for o in e.offset {
                    prop_assert!((-0.5..=1.5).contains(&o));
                }
                for k in 0..2 {
                    let r = e.size[k] / e.anchor_size[k];
                    prop_assert!(r.max(1.0 / r) < 4.0);
                }
            }
        }
    }

    #[test]
    fn loss_is_non_negative_and_finite(seed in any::<u64>(), boxes in prop::collection::vec(canvas_box(64.0), 0..4)) {
        let cfg = ModelConfig::tiny().with_input_size(64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::<f64>::new();
        let preds: Vec<_> = [8usize, 4, 2]
            .iter()
            .map(|&g| {
                let shape = [1, 3, g, g, cfg.outputs_per_anchor()];
                let n = shape.iter().product();
                t.constant(Tensor::new(&shape, (0..n).map(|_| rng.random_range(-6.0..6.0)).collect()).unwrap())
            })
            .collect();
        let targets = assign_targets(&[boxes], &cfg, 4.0);
        let l = total_loss(&mut t, &preds, &targets, &cfg, &LossWeights::default()).unwrap();
        let c = l.components;
        prop_assert!(c.box_ >= 0.0 && c.obj >= 0.0 && c.cls >= 0.0);
        prop_assert!(c.total.is_finite() && c.total >= 0.0);
    }
}

#[test]
fn a_tiny_gradient_step_does_not_increase_the_loss() {
    let cfg = ModelConfig::gradcheck();
    let mut det = Detector::<f64>::build(&cfg, 8).unwrap();
    let data = samples(2, 4, cfg.input_size as u32);
    let images: Vec<_> = data.iter().map(|s| &s.image).collect();
    let x = grapedet::train::batch_tensor::<f64>(&images).unwrap();
    let gt: Vec<Vec<BBox>> = data.iter().map(|s| s.boxes.clone()).collect();
    let tc = TrainConfig::default();
    let (before, _) = batch_loss(&mut det, &x, &gt, &tc, true).unwrap();
    let lr = 1e-6;
    for p in det.params.iter_mut().filter(|p| p.kind.trainable()) {
        let g = p.grad.data().to_vec();
        for (v, g) in p.value.data_mut().iter_mut().zip(g) {
            *v -= lr * g;
        }
    }
    let (after, _) = batch_loss(&mut det, &x, &gt, &tc, false).unwrap();
    assert!(after.total <= before.total + 1e-6, "{} -> {}", before.total, after.total);
}

#[test]
fn zero_epochs_returns_the_initial_weights() {
    let cfg = ModelConfig::gradcheck();
    let det = Detector::<f32>::build(&cfg, 3).unwrap();
    let data = samples(3, 2, cfg.input_size as u32);
    let tc = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let r = fit(det.clone(), &data, &[], &tc).unwrap();
    assert!(r.history.epochs.is_empty());
    assert_eq!(r.best_epoch, None);
    let x = grapedet::train::batch_tensor::<f32>(&data.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    assert_eq!(r.last.predict(&x).unwrap(), det.predict(&x).unwrap());
    assert!(r.history.to_csv().unwrap().starts_with(b"epoch,"));
}

#[test]
fn fit_is_deterministic_and_tracks_the_best_epoch() {
    let cfg = ModelConfig::gradcheck();
    let train = samples(4, 6, cfg.input_size as u32);
    let val = samples(2, 9, cfg.input_size as u32);
    let tc = TrainConfig { epochs: 3, batch_size: 2, seed: 4, ..TrainConfig::default() };
    let run = || fit(Detector::<f32>::build(&cfg, 1).unwrap(), &train, &val, &tc).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.epochs.len(), 3);
    let best = a.best_epoch.expect("validation ran");
    let maps: Vec<f64> = a.history.epochs.iter().map(|e| e.val_map50.unwrap()).collect();
    assert_eq!(Some(maps[best - a.history.epochs[0].epoch]), a.best_map50);
    assert!(maps.iter().all(|&m| m <= a.best_map50.unwrap()));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("history.csv");
    a.history.write_csv(&p).unwrap();
    assert_eq!(grapedet::train::History::read_csv(&p).unwrap(), a.history);
}
