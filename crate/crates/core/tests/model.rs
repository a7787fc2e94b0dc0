use dclimba::autodiff::Tape;
use dclimba::encoders::{
    patch_theta, spatial_attend, temporal_encode, BiasNet, EncoderConfig, NormalizationStats,
    PAIR_FEATURES,
};
use dclimba::gridio::{select_neighbors, GridField};
use dclimba::losses::LossWeights;
use dclimba::par::Exec;
use dclimba::synth::{generate, SynthConfig, SynthWorld};
use dclimba::training::{
    batch_gradients, batch_loss, epoch_batches, prepare, train_with, Adam, TrainConfig, TrainData,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        hidden: 8,
        model_dim: 8,
        geo_hidden: 4,
        neighbors: 4,
        ..EncoderConfig::default()
    }
}

fn world(seed: u64) -> SynthWorld {
    generate(&SynthConfig {
        nlat: 4,
        nlon: 4,
        years: 2,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

#[test]
fn attention_rows_are_stochastic_and_respect_the_mask() {
    let cfg = tiny_encoder();
    let (n, t) = (cfg.patch_nodes(), 7);
    let net = BiasNet::init(&cfg, 30.0, 3).unwrap();
    let tape = Tape::new();
    let vars = net.bind(&tape, false).unwrap();
    let h = tape
        .constant(uniform(n * cfg.model_dim * t, 1), &[n, cfg.model_dim, t])
        .unwrap();
    let pairs = uniform(n * n * PAIR_FEATURES, 2);
    let mask = [true, true, false, true, false];
    let att = spatial_attend(&vars, &cfg, &h, &pairs, &mask).unwrap();
    let w = att.weights.unwrap();
    assert_eq!(w.shape(), vec![cfg.heads * t, n, n]);
    for row in w.to_vec().chunks(n) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (j, m) in mask.iter().enumerate() {
            if !m {
                assert_eq!(row[j], 0.0);
            }
        }
    }
    let none = spatial_attend(&vars, &cfg, &h, &pairs, &[false; 5]).unwrap();
    assert!(none.weights.is_none());
}

#[test]
fn full_size_patch_has_the_documented_shapes() {
    let cfg = EncoderConfig::default();
    let (n, t) = (cfg.patch_nodes(), 365);
    assert_eq!((n, cfg.theta_len()), (17, 26));
    let net = BiasNet::init(&cfg, 50.0, 0).unwrap();
    let tape = Tape::new();
    let vars = net.bind(&tape, false).unwrap();
    let x = tape
        .constant(
            uniform(n * cfg.in_channels() * t, 5),
            &[n, cfg.in_channels(), t],
        )
        .unwrap();
    assert_eq!(
        temporal_encode(&vars, &x).unwrap().shape(),
        vec![n, cfg.hidden, t]
    );
    let raw = patch_theta(
        &vars,
        &cfg,
        &x,
        &uniform(n * n * PAIR_FEATURES, 6),
        &[true; 17],
    )
    .unwrap();
    assert_eq!(raw.shape(), vec![t * n, 26]);
    assert!(raw.to_vec().iter().all(|v| v.is_finite()));
}

#[test]
fn small_adam_steps_reduce_the_batch_loss() {
    let w = world(31);
    let tc = TrainConfig {
        lr: 1e-4,
        batch: 2,
        seqlen: 60,
        train_window: (0, 365),
        steps_per_epoch: Some(100),
        encoder: tiny_encoder(),
        loss: LossWeights {
            levels: 40,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    };
    let graph = select_neighbors(&w.gcm, tc.encoder.neighbors, tc.train_window, None).unwrap();
    let data = TrainData {
        reference: &w.reference,
        gcm: &w.gcm,
        attrs: &w.attrs,
        graph: &graph,
    };
    let prep = prepare(&data, &tc).unwrap();
    let mut net = BiasNet::init(&tc.encoder, prep.norm.precip_q999, 7).unwrap();
    let mut adam = Adam::new(&net.params, tc.lr, tc.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batches = epoch_batches(&prep.targets, &tc, &mut rng);
    let mut decreased = 0;
    for b in &batches {
        let (before, grads) = batch_gradients(
            &net,
            &prep.builder,
            &prep.reference,
            b,
            tc.seqlen,
            &tc.loss,
            Exec::Sequential,
        )
        .unwrap();
        adam.step(&mut net.params, &grads).unwrap();
        let after = batch_loss(
            &net,
            &prep.builder,
            &prep.reference,
            b,
            tc.seqlen,
            &tc.loss,
            Exec::Sequential,
        )
        .unwrap();
        if after.l < before.l {
            decreased += 1;
        }
    }
    assert!(
        decreased >= 95,
        "loss fell on {decreased} of {} batches",
        batches.len()
    );
}

#[test]
fn inputs_outside_the_train_window_do_not_leak() {
    let w = world(41);
    let window = (100, 465);
    let cfg = tiny_encoder();
    let mut vals = w.gcm.values().to_vec();
    let nc = w.gcm.ncells();
    for (i, v) in vals.iter_mut().enumerate() {
        let t = i / nc;
        if !(window.0..window.1).contains(&t) {
            *v = *v * 3.0 + 1.0;
        }
    }
    let altered = GridField::new(
        w.gcm.start_date(),
        w.gcm.lats().to_vec(),
        w.gcm.lons().to_vec(),
        w.gcm.ntime(),
        vals,
    )
    .unwrap();
    let g1 = select_neighbors(&w.gcm, cfg.neighbors, window, None).unwrap();
    let g2 = select_neighbors(&altered, cfg.neighbors, window, None).unwrap();
    let sliced = w.gcm.time_slice(window.0, window.1).unwrap();
    let g3 = select_neighbors(&sliced, cfg.neighbors, (0, window.1 - window.0), None).unwrap();
    assert_eq!(g1, g2);
    assert_eq!(g1, g3);
    let n1 = NormalizationStats::compute(&w.gcm, &w.attrs, &g1, window).unwrap();
    let n2 = NormalizationStats::compute(&altered, &w.attrs, &g2, window).unwrap();
    let n3 = NormalizationStats::compute(&sliced, &w.attrs, &g3, (0, window.1 - window.0)).unwrap();
    assert_eq!(n1, n2);
    assert_eq!(NormalizationStats { window, ..n3 }, n1);
}

#[test]
fn training_is_deterministic_across_runs_and_strategies() {
    let w = world(51);
    let tc = TrainConfig {
        lr: 1e-3,
        batch: 3,
        seqlen: 50,
        epochs: 2,
        seed: 5,
        train_window: (0, 365),
        val_window: Some((365, 730)),
        steps_per_epoch: Some(3),
        encoder: tiny_encoder(),
        ..TrainConfig::default()
    };
    let graph = select_neighbors(&w.gcm, tc.encoder.neighbors, tc.train_window, None).unwrap();
    let data = TrainData {
        reference: &w.reference,
        gcm: &w.gcm,
        attrs: &w.attrs,
        graph: &graph,
    };
    let a = train_with(&data, &tc, Exec::Sequential).unwrap();
    let b = train_with(&data, &tc, Exec::Sequential).unwrap();
    let c = train_with(&data, &tc, Exec::Parallel).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    let mut other = tc.clone();
    other.seed = 6;
    let d = train_with(&data, &other, Exec::Sequential).unwrap();
    assert_ne!(a.net.params, d.net.params);
}
