use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{sample_minibatch, synth_generate, BatchRequest, SynthData, SynthParams};
use crate::model::conv_stack_spec;

fn tiny_data(seed: u64, bias_shift: f64) -> SynthData {
    let p = SynthParams { classes: 4, n_labeled: 24, n_unlabeled: 40, n_test: 16, bias_shift, size: 8, noise: 0.05 };
    synth_generate(seed, &p).unwrap()
}

fn tiny_model(seed: u64) -> Model {
    build(&conv_stack_spec([3, 8, 8], &[4, 4], 4), seed).unwrap()
}

fn tiny_config() -> PipelineConfig {
    PipelineConfig {
        iterations_sparse: 6,
        iterations_finetune: Some(3),
        batch_labeled: 4,
        batch_unlabeled: 4,
        log_every: 1,
        lr_sparse: 0.01,
        lr_finetune: 0.01,
        weights: LossWeights { beta: 0.1, eta: 0.01, ..LossWeights::default() },
        ..PipelineConfig::default()
    }
}

#[test]
fn zero_lr_discriminator_step_is_noop() {
    let d0 = Discriminator::new(&[4, 2, 2], 3, 0.9).unwrap();
    let mut d = d0.clone();
    let f = Tensor::full(&[3, 4, 2, 2], 0.2);
    discriminator_step(&mut d, &f, &f.map(|v| -v), 2.0, 0.0).unwrap();
    assert_eq!(d.net, d0.net);
}

#[test]
fn zero_auxiliary_weights_match_plain_supervised_step() {
    let data = tiny_data(1, 0.3);
    let teacher = tiny_model(9);
    let norm = Normalization::identity(3);
    let mut config = tiny_config();
    config.weights = LossWeights { lambda: 0.0, alpha: 0.0, beta: 0.0, eta: 0.0, tau: 3.0 };
    let obj = Objective::new(&config, 0.0, 1.0);
    let req = BatchRequest { labeled_size: 5, unlabeled_size: 5, augment: true, normalization: &norm, teacher: Some((&teacher, 3.0, 3.0)) };
    let batch = sample_minibatch(&data.labeled, Some(&data.unlabeled), &req, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();

    let mut a = tiny_model(4);
    let mut opt_a = Sgd::new(&a, 0.9, 1e-4);
    let plain_batch = crate::data::Batch { unlabeled: None, teacher: None, ..batch.clone() };
    student_step(&mut a, &mut opt_a, &plain_batch, &obj, None, 0.05, 0.0).unwrap();

    // Reference: cross-entropy on the labeled rows, SGD written out here.
    let mut b = tiny_model(4);
    let mut tape = Tape::new();
    let bound = b.bind(&mut tape, true);
    let x = tape.constant(batch.labeled.clone());
    let (logits, updates) = b.forward(&mut tape, &bound, x, Mode::Train).unwrap();
    let loss = losses::supervision_loss(&mut tape, logits, &batch.labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g: Vec<Tensor> = bound.params.iter().flatten().map(|v| grads.get(*v).unwrap().clone()).collect();
    for ((_, kind, w), g) in b.params_mut().into_iter().zip(&g) {
        let wd = if kind == ParamKind::Weight { 1e-4 } else { 0.0 };
        for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
            let v = 0.9 * 0.0 + gi + wd * *wi;
            *wi -= 0.05 * v;
        }
    }
    b.absorb(&updates);
    assert_eq!(a, b);

    // The same objective with the unlabeled rows present leaves the
    // unlabeled data out of the forward pass entirely.
    let mut c = tiny_model(4);
    let mut opt_c = Sgd::new(&c, 0.9, 1e-4);
    assert!(!obj.uses_unlabeled());
    student_step(&mut c, &mut opt_c, &batch, &obj, None, 0.05, 0.0).unwrap();
    assert_eq!(a, c);
}

#[test]
fn sgd_momentum_and_decay() {
    let mut m = tiny_model(0);
    let before = m.clone();
    let mut opt = Sgd::new(&m, 0.5, 0.1);
    let grads: Vec<Tensor> = m.params().iter().map(|(_, _, t)| Tensor::full(t.shape(), 1.0)).collect();
    opt.step(&mut m, &grads, 0.1);
    opt.step(&mut m, &grads, 0.1);
    for ((_, kind, w0), (_, _, w2)) in before.params().iter().zip(m.params()) {
        let (a, b) = (w0.data()[0], w2.data()[0]);
        let wd = if *kind == ParamKind::Weight { 0.1 } else { 0.0 };
        let v1 = 1.0 + wd * a;
        let w1 = a - 0.1 * v1;
        let v2 = 0.5 * v1 + 1.0 + wd * w1;
        assert_eq!(b, w1 - 0.1 * v2);
    }
}

#[test]
fn zero_iterations_leave_model_untouched() {
    let data = tiny_data(2, 0.0);
    let model = tiny_model(1);
    let norm = Normalization::identity(3);
    let td = TrainData { labeled: &data.labeled, unlabeled: Some(&data.unlabeled), test: None, normalization: &norm };
    let config = PipelineConfig { iterations_sparse: 0, ..tiny_config() };
    let out = sparse_retrain(model.clone(), Some(&model), td, &config, &mut MetricsSink::memory()).unwrap();
    assert_eq!(out, model);
}

#[test]
fn sparsity_pressure_shrinks_gamma() {
    let data = tiny_data(3, 0.0);
    let model = tiny_model(2);
    let norm = Normalization::identity(3);
    let td = TrainData { labeled: &data.labeled, unlabeled: None, test: None, normalization: &norm };
    let mut config = PipelineConfig { iterations_sparse: 30, toggles: Toggles::NONE, ..tiny_config() };
    config.weights.lambda = 0.0;
    let free = sparse_retrain(model.clone(), None, td, &config, &mut MetricsSink::memory()).unwrap();
    config.weights.lambda = 1.0;
    let sparse = sparse_retrain(model.clone(), None, td, &config, &mut MetricsSink::memory()).unwrap();
    assert!(gamma_l1(&sparse) < gamma_l1(&free));
    assert!(gamma_l1(&sparse) < gamma_l1(&model));
}

#[test]
fn full_pipeline_runs_and_is_reproducible() {
    let data = tiny_data(4, 0.3);
    let teacher = tiny_model(5);
    let norm = Normalization::compute(&data.labeled.images).unwrap();
    let td = TrainData { labeled: &data.labeled, unlabeled: Some(&data.unlabeled), test: Some(&data.test), normalization: &norm };
    let config = tiny_config();
    let mut sink = MetricsSink::memory();
    let a = run_pipeline(&teacher, td, &config, &mut sink).unwrap();
    let b = run_pipeline(&teacher, td, &config, &mut MetricsSink::memory()).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(sink.records.len(), 9);
    assert!(sink.records.windows(2).all(|w| w[0].iteration < w[1].iteration));
    assert!(sink.records.iter().any(|r| r.discriminator.is_some() && r.parts.aligner != 0.0));
    assert!(sink.records.iter().all(|r| r.parts.distillation > 0.0 && r.parts.rademacher > 0.0));
    assert!(sink.records.iter().filter(|r| r.stage == "finetune").all(|r| r.parts.l1 > 0.0));
    assert_eq!(a.report.pruned_count(), 6);
    assert!(a.final_model().param_count() < teacher.param_count());
}

#[test]
fn constant_predictor_accuracy() {
    let data = tiny_data(5, 0.0);
    let mut m = tiny_model(0);
    if let Some(Layer::Dense(d)) = m.layers_mut().last_mut() {
        d.weight = Tensor::zeros(d.weight.shape());
        d.bias.data_mut()[2] = 1.0;
    }
    let test = data.test.take(16).unwrap();
    let acc = evaluate(&m, &test, &Normalization::identity(3)).unwrap();
    let expected = test.labels.iter().filter(|&&y| y == 2).count() as f64 / 16.0;
    assert_eq!(acc, expected);
    assert_eq!(acc, 0.25);
}
