use udma::dataio::PriorCategory;
use udma::experiment::{Dataset, ExperimentConfig};
use udma::losses::{instance_adv_losses, instance_adv_total, scene_adv_losses, scene_adv_total, PriorPixelSets};
use udma::model::{DiscKind, ModelConfig};
use udma::autodiff::Tensor;
use udma::training::{StepMetrics, TargetExample, TrainConfig, Trainer};

fn small() -> (ExperimentConfig, Dataset) {
    let mut cfg = ExperimentConfig::desk_scale(3);
    cfg.n_source = 3;
    cfg.n_target = 3;
    cfg.n_eval = 1;
    cfg.n_holdout = 1;
    cfg.model = ModelConfig {
        feature_dim: 4,
        knn: 3,
        enc1: 4,
        enc2: 8,
        disc_hidden: 16,
        ..ModelConfig::default()
    };
    let data = Dataset::generate(&cfg).unwrap();
    (cfg, data)
}

fn trainer(cfg: &ExperimentConfig, train: TrainConfig) -> Trainer {
    Trainer::new(cfg.model, train)
}

fn snapshot(ts: &[Tensor]) -> Vec<Vec<f64>> {
    ts.iter().map(|t| t.data().to_vec()).collect()
}

#[test]
fn generator_step_leaves_discriminators_untouched() {
    let (cfg, data) = small();
    let mut t = trainer(&cfg, cfg.train);
    let disc = snapshot(t.discriminators.params.tensors());
    let gen = snapshot(t.generator.params.tensors());
    let mut m = StepMetrics::default();
    t.generator_step(&data.source[0], &data.target[0], &mut m).unwrap();
    assert_eq!(snapshot(t.discriminators.params.tensors()), disc);
    assert_ne!(snapshot(t.generator.params.tensors()), gen);
}

#[test]
fn discriminator_step_leaves_generator_untouched() {
    let (cfg, data) = small();
    let mut t = trainer(&cfg, cfg.train);
    let mut m = StepMetrics::default();
    let (fs, ft) = t.generator_step(&data.source[0], &data.target[0], &mut m).unwrap();
    let disc = snapshot(t.discriminators.params.tensors());
    let gen = snapshot(t.generator.params.tensors());
    t.discriminator_step(&data.source[0], &data.target[0], fs, ft, &mut m).unwrap();
    assert_eq!(snapshot(t.generator.params.tensors()), gen);
    assert_ne!(snapshot(t.discriminators.params.tensors()), disc);
}

#[test]
fn zero_alignment_weights_ignore_the_target() {
    let (cfg, data) = small();
    let train = TrainConfig {
        lambda_sa: 0.0,
        lambda_ia: 0.0,
        ..cfg.train
    };
    let mut a = trainer(&cfg, train);
    let mut b = trainer(&cfg, train);
    a.train_step(&data.source[0], &data.target[0]).unwrap();
    b.train_step(&data.source[0], &data.target[1]).unwrap();
    assert_eq!(snapshot(a.generator.params.tensors()), snapshot(b.generator.params.tensors()));
}

#[test]
fn absent_category_discriminator_gets_no_update() {
    let (cfg, data) = small();
    let mut t = trainer(&cfg, cfg.train);
    // strip the car prior from both sides
    let mut src = data.source[0].clone();
    let mut tgt: TargetExample = data.target[0].clone();
    let car = PriorCategory::Car.index();
    src.priors = PriorPixelSets {
        sets: std::array::from_fn(|i| if i == car { vec![false; src.valid.len()] } else { src.priors.sets[i].clone() }),
    };
    tgt.priors = PriorPixelSets {
        sets: std::array::from_fn(|i| if i == car { vec![false; tgt.valid.len()] } else { tgt.priors.sets[i].clone() }),
    };
    let prefix = format!("{}.", DiscKind::Category(PriorCategory::Car).name());
    let store = &t.discriminators.params;
    let ids: Vec<usize> = (0..store.len()).filter(|&i| store.names()[i].starts_with(&prefix)).collect();
    assert!(!ids.is_empty());
    let before: Vec<Vec<f64>> = ids.iter().map(|&i| store.tensors()[i].data().to_vec()).collect();
    let others = snapshot(store.tensors());
    let m = t.train_step(&src, &tgt).unwrap();
    assert!(!m.y_source[car] && !m.y_target[car]);
    let store = &t.discriminators.params;
    let after: Vec<Vec<f64>> = ids.iter().map(|&i| store.tensors()[i].data().to_vec()).collect();
    assert_eq!(after, before);
    assert_ne!(snapshot(store.tensors()), others);
}

#[test]
fn logged_adversarial_parts_resum() {
    let (cfg, data) = small();
    let mut t = trainer(&cfg, cfg.train);
    for step in 0..6 {
        let m = t.train_step(&data.source[step % 3], &data.target[step % 3]).unwrap();
        let (gen, disc) = scene_adv_losses(m.d_target, m.d_source).unwrap();
        assert!((gen - m.sa_gen).abs() <= 1e-12);
        assert!((disc - m.sa_disc).abs() <= 1e-12);
        assert!((m.sa_gen + m.sa_disc - scene_adv_total(m.d_target, m.d_source).unwrap()).abs() <= 1e-12);
        let terms = m.category_terms();
        let (ig, id) = instance_adv_losses(&terms).unwrap();
        assert!((ig - m.ia_gen).abs() <= 1e-12);
        assert!((id - m.ia_disc).abs() <= 1e-12);
        assert!((m.ia_gen + m.ia_disc - instance_adv_total(&terms).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (cfg, data) = small();
        let mut t = trainer(&cfg, cfg.train);
        let mut log = Vec::new();
        for step in 0..4 {
            log.push(t.train_step(&data.source[step % 3], &data.target[step % 3]).unwrap().to_json());
        }
        for step in 0..2 {
            log.push(t.fine_tune_step(&data.target[step % 3]).unwrap().to_json());
        }
        let mut ckpt = Vec::new();
        t.save(&mut ckpt).unwrap();
        (log, ckpt)
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip() {
    let (cfg, data) = small();
    let mut t = trainer(&cfg, cfg.train);
    t.train_step(&data.source[0], &data.target[0]).unwrap();
    let mut buf = Vec::new();
    t.save(&mut buf).unwrap();
    let mut u = trainer(&cfg, TrainConfig { seed: 99, ..cfg.train });
    u.load(&buf[..]).unwrap();
    assert_eq!(snapshot(u.generator.params.tensors()), snapshot(t.generator.params.tensors()));
    let e = &data.eval[0];
    assert_eq!(t.predict(&e.example.input, &e.example.masks).unwrap(), u.predict(&e.example.input, &e.example.masks).unwrap());
}
