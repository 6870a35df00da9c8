use super::*;
use crate::features::{split_gcd, synth_generate, GcdSplit, SynthSpec};

fn split(images: usize) -> GcdSplit {
    let spec = SynthSpec {
        images_per_class: images,
        ..SynthSpec::default()
    };
    split_gcd(&synth_generate(&spec).unwrap().0, 0.5).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 2,
        ..TrainConfig::default()
    }
}

fn assignment<'g>(g: &'g Graph, rows: &[Vec<f64>], empty: &[bool]) -> PartAssignment<'g> {
    let t = rows.len();
    PartAssignment {
        hard: g.constant(Tensor::zeros(t, 1)),
        soft: g.constant(Tensor::zeros(t, 1)),
        part_features: g.constant(Tensor::from_rows(rows)),
        occupancy: empty.iter().map(|&e| usize::from(!e)).collect(),
        empty_mask: empty.to_vec(),
        winners: vec![0],
    }
}

#[test]
fn pooling_examples() {
    let g = Graph::new();
    let one = assignment(&g, &[vec![0.0, 0.0], vec![1.0, 2.0]], &[true, false]);
    assert_eq!(pool_parts(&one).unwrap().value().data(), &[1.0, 2.0]);
    let two = assignment(&g, &[vec![1.0, 0.0], vec![3.0, 2.0]], &[false, false]);
    assert_eq!(pool_parts(&two).unwrap().value().data(), &[2.0, 1.0]);
    let same = assignment(&g, &vec![vec![0.5, -1.0]; 3], &[false, false, false]);
    assert_eq!(pool_parts(&same).unwrap().value().data(), &[0.5, -1.0]);
}

#[test]
fn batch_composition() {
    let s = split(10);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = make_batch(&s.labeled, &s.unlabeled, &small_cfg(), &mut rng).unwrap();
    assert_eq!(b.records.len(), 8);
    assert_eq!(b.records.iter().filter(|r| r.is_labeled).count(), 4);
    for pair in b.records.chunks(2) {
        assert_eq!(pair[0].image_id, pair[1].image_id);
        assert_ne!(pair[0].view_id, pair[1].view_id);
    }
}

#[test]
fn all_labeled_when_unlabeled_pool_is_empty() {
    let s = split(10);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = make_batch(&s.labeled, &[], &small_cfg(), &mut rng).unwrap();
    assert_eq!(b.records.len(), 8);
    assert!(b.records.iter().all(|r| r.is_labeled));
}

#[test]
fn batches_are_seeded() {
    let s = split(10);
    let draw = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        (0..3)
            .map(|_| make_batch(&s.labeled, &s.unlabeled, &small_cfg(), &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(), draw());
}

fn setup() -> (GcdSplit, TrainConfig, ModelState) {
    let s = split(6);
    let cfg = small_cfg();
    let state = ModelState::init(&cfg, 32, 4);
    (s, cfg, state)
}

#[test]
fn zero_learning_rate_is_a_null_update() {
    let (s, mut cfg, mut state) = setup();
    cfg.learning_rate = 0.0;
    let before: Vec<Tensor> = state.params().into_iter().map(|(_, t)| t.clone()).collect();
    let batch = make_batch(&s.labeled, &s.unlabeled, &cfg, &mut state.rng).unwrap();
    let mut twin = state.clone();
    let a = train_step(&mut state, &batch, &cfg, 10).unwrap();
    let after: Vec<Tensor> = state.params().into_iter().map(|(_, t)| t.clone()).collect();
    assert_eq!(before, after);
    let b = train_step(&mut twin, &batch, &cfg, 10).unwrap();
    assert_eq!(a, b);
}

#[test]
fn step_moves_parameters_against_numeric_gradient() {
    let (s, mut cfg, state) = setup();
    cfg.schedule = Schedule::Constant;
    cfg.weight_decay = 0.0;
    cfg.learning_rate = 0.01;
    let mut state = state;
    let batch = make_batch(&s.labeled, &s.unlabeled, &cfg, &mut state.rng).unwrap();

    // Record the base pass to freeze every discrete decision.
    let rng0 = state.rng.clone();
    let g = Graph::new();
    let mut r = rng0.clone();
    forward(&g, state.bind(&g), &batch, &cfg, &mut r).unwrap();
    let tape = g.take_replay();

    let loss_with = |classifier: &Tensor| {
        let mut st = state.clone();
        st.classifier = classifier.clone();
        let g = Graph::replaying(tape.clone());
        let mut r = rng0.clone();
        forward(&g, st.bind(&g), &batch, &cfg, &mut r)
            .unwrap()
            .loss
            .item()
    };
    let (i, j) = (5, 2);
    let h = 1e-5;
    let mut plus = state.classifier.clone();
    plus.set(i, j, plus.get(i, j) + h);
    let mut minus = state.classifier.clone();
    minus.set(i, j, minus.get(i, j) - h);
    let numeric = (loss_with(&plus) - loss_with(&minus)) / (2.0 * h);

    let before = state.classifier.get(i, j);
    train_step(&mut state, &batch, &cfg, 10).unwrap();
    let delta = state.classifier.get(i, j) - before;
    let want = -cfg.learning_rate * numeric;
    assert!(
        (delta - want).abs() <= 1e-6 * want.abs().max(1e-8),
        "{delta} vs {want}"
    );
}

#[test]
fn zero_epochs_leave_state_alone() {
    let (s, mut cfg, mut state) = setup();
    cfg.epochs = 0;
    let before = write_checkpoint(&state, &cfg).unwrap();
    let log = fit(&mut state, &s.labeled, &s.unlabeled, &cfg, &mut ()).unwrap();
    assert!(log.is_empty());
    assert_eq!(write_checkpoint(&state, &cfg).unwrap(), before);
}

#[test]
fn fit_is_bit_reproducible() {
    let run = || {
        let (s, cfg, mut state) = setup();
        fit(&mut state, &s.labeled, &s.unlabeled, &cfg, &mut ()).unwrap();
        write_checkpoint(&state, &cfg).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_then_step() {
    let (s, mut cfg, _) = setup();
    cfg.adapter = true;
    let mut state = ModelState::init(&cfg, 32, 4);
    fit(
        &mut state,
        &s.labeled,
        &s.unlabeled,
        &TrainConfig {
            epochs: 1,
            ..cfg.clone()
        },
        &mut (),
    )
    .unwrap();
    let bytes = write_checkpoint(&state, &cfg).unwrap();
    let (mut back, cfg_back) = read_checkpoint(&bytes).unwrap();
    assert_eq!(cfg_back, cfg);
    assert_eq!(write_checkpoint(&back, &cfg_back).unwrap(), bytes);

    let batch = make_batch(&s.labeled, &s.unlabeled, &cfg, &mut state.rng).unwrap();
    let batch_b = make_batch(&s.labeled, &s.unlabeled, &cfg, &mut back.rng).unwrap();
    assert_eq!(batch, batch_b);
    let a = train_step(&mut state, &batch, &cfg, 20).unwrap();
    let b = train_step(&mut back, &batch, &cfg, 20).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        write_checkpoint(&state, &cfg).unwrap(),
        write_checkpoint(&back, &cfg).unwrap()
    );
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (s, cfg, mut full) = setup();
    fit(&mut full, &s.labeled, &s.unlabeled, &cfg, &mut ()).unwrap();

    // Interrupt mid-schedule, round-trip the state, and finish.
    let (_, _, mut a) = setup();
    let mut stop = StopAfter(6);
    let _ = fit(&mut a, &s.labeled, &s.unlabeled, &cfg, &mut stop);
    let (mut b, _) = read_checkpoint(&write_checkpoint(&a, &cfg).unwrap()).unwrap();
    fit(&mut b, &s.labeled, &s.unlabeled, &cfg, &mut ()).unwrap();
    assert_eq!(
        write_checkpoint(&b, &cfg).unwrap(),
        write_checkpoint(&full, &cfg).unwrap()
    );
}

struct StopAfter(u64);

impl FitObserver for StopAfter {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        if r.step + 1 >= self.0 {
            return Err(TrainError::Stopped { epoch: r.epoch });
        }
        Ok(())
    }
}

#[test]
fn ablations_change_the_objective() {
    let (s, cfg, state) = setup();
    let run = |a: Ablation| {
        let mut st = state.clone();
        let c = cfg.clone().with_ablation(a);
        let batch = make_batch(&s.labeled, &s.unlabeled, &c, &mut st.rng).unwrap();
        train_step(&mut st, &batch, &c, 10).unwrap()
    };
    let full = run(Ablation::None);
    assert!(full.all_min != 0.0 && full.diversity >= 0.0);
    assert_eq!(run(Ablation::NoAllmin).all_min_weight, 0.0);
    assert_eq!(run(Ablation::NoDiversity).diversity_weight, 0.0);
    let np = run(Ablation::NoParts);
    assert_eq!((np.all_min, np.diversity), (0.0, 0.0));
    assert_ne!(run(Ablation::AllAll).all_min, full.all_min);
    assert_eq!("no-parts".parse::<Ablation>().unwrap(), Ablation::NoParts);
    assert!("bogus".parse::<Ablation>().is_err());
}

#[test]
fn frozen_inputs_have_no_gradient_slots() {
    let (_, _, state) = setup();
    let names: Vec<&str> = state.params().into_iter().map(|(n, _)| n).collect();
    assert!(names.iter().all(|n| PARAM_NAMES.contains(n)));
    assert_eq!(names.len(), state.slots.len());
}

#[test]
fn bad_checkpoint_magic() {
    let (_, cfg, state) = setup();
    let mut b = write_checkpoint(&state, &cfg).unwrap();
    b[0] = b'X';
    assert!(read_checkpoint(&b)
        .unwrap_err()
        .to_string()
        .contains("APLC"));
}
