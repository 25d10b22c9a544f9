//! Oracle runs for the baseline estimator and single-example overfit.

use semlogue::corpus::EOS_ID;
use semlogue::losses::{l_bse, pool_distributions, BaselineEstimator};
use semlogue::model::{Architecture, BoundParams, Model, ModelConfig};
use semlogue::tensor::{Graph, Tensor};
use semlogue::trainer::{Adam, AdamConfig};

#[test]
fn bse_regresses_to_constant_half_within_2000_steps() {
    // fixed pooled-distribution inputs, constant target 0.5
    let vocab = 12;
    let batch = 8;
    let mut bse = BaselineEstimator::<f64>::new(vocab, 32, 99);
    let mut data = vec![0.0; batch * vocab];
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for row in data.chunks_mut(vocab) {
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = rng.gen_range(0.0..1.0);
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    let pooled_fixed = Tensor::new(vec![batch, vocab], data).unwrap();
    let targets = vec![0.5; batch];

    let shapes: Vec<&[usize]> = bse.params().tensors().map(|t| t.shape()).collect();
    let mut opt = Adam::new(
        AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        &shapes,
    );

    let mut final_mean = 0.0;
    for _ in 0..2000 {
        let mut g = Graph::new();
        let pooled = g.constant(pooled_fixed.clone());
        let bound = bse.bind(&mut g, true);
        let scores = bse.forward(&mut g, &bound, pooled).unwrap();
        let loss = l_bse(&mut g, scores, &targets).unwrap();
        let grads = g.backward(loss).unwrap();
        let grad_tensors: Vec<Tensor<f64>> = bound
            .ids()
            .iter()
            .map(|&id| grads.get(id).unwrap().clone())
            .collect();
        let params: Vec<&mut Tensor<f64>> = bse.params_mut().tensors_mut().collect();
        opt.apply(params, &grad_tensors, 1.0);
        final_mean = {
            let t = g.value(scores);
            t.data().iter().sum::<f64>() / batch as f64
        };
    }
    assert!(
        (final_mean - 0.5).abs() < 0.02,
        "mean estimator output {final_mean} after 2000 steps"
    );
}

#[test]
fn overfitting_one_example_reproduces_it_greedily() {
    let config = ModelConfig {
        vocab_size: 20,
        embed_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ff_dim: 32,
        max_source_len: 8,
        max_target_len: 8,
        architecture: Architecture::EncoderDecoder,
    };
    let mut model = Model::<f64>::new(config, 17).unwrap();
    let src = vec![4usize, 5, 6, 7];
    let gold = vec![9usize, 10, 11, 12, EOS_ID];

    let shapes: Vec<&[usize]> = model.params().tensors().map(|t| t.shape()).collect();
    let mut opt = Adam::new(
        AdamConfig {
            lr: 5e-3,
            ..AdamConfig::default()
        },
        &shapes,
    );

    let mut all_argmax_match = false;
    for _ in 0..500 {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let tf = model
            .forward_teacher_forced(&mut g, &bound, &[src.clone()], &[gold.clone()])
            .unwrap();
        let (loss, _) = semlogue::losses::cross_entropy(&mut g, &tf).unwrap();
        let grads = g.backward(loss).unwrap();
        let grad_tensors: Vec<Tensor<f64>> = bound
            .ids()
            .iter()
            .map(|&id| grads.get(id).unwrap().clone())
            .collect();
        let params: Vec<&mut Tensor<f64>> = model.params_mut().tensors_mut().collect();
        opt.apply(params, &grad_tensors, 1.0);

        // argmax at every teacher-forced step vs gold
        let logits = g.value(tf.logits);
        all_argmax_match = gold.iter().enumerate().all(|(t, &gt)| {
            let row = &logits.data()[t * 20..(t + 1) * 20];
            semlogue::model::argmax_lowest(row) == gt
        });
    }
    assert!(all_argmax_match, "teacher-forced argmax should match gold");
    let decoded = model.generate_greedy(&src, 8).unwrap();
    assert_eq!(decoded, gold[..gold.len() - 1].to_vec());
}

#[test]
fn all_parameters_get_nonzero_gradient_on_a_smoke_batch() {
    let config = ModelConfig {
        vocab_size: 20,
        embed_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ff_dim: 32,
        max_source_len: 8,
        max_target_len: 8,
        architecture: Architecture::EncoderDecoder,
    };
    let model = Model::<f64>::new(config, 23).unwrap();
    let mut g = Graph::new();
    let bound: BoundParams = model.bind(&mut g, true);
    let tf = model
        .forward_teacher_forced(
            &mut g,
            &bound,
            &[vec![4, 5, 6], vec![7, 8, 9]],
            &[vec![10, 11, EOS_ID], vec![12, EOS_ID]],
        )
        .unwrap();
    let (loss, _) = semlogue::losses::cross_entropy(&mut g, &tf).unwrap();
    let grads = g.backward(loss).unwrap();
    for (i, &id) in bound.ids().iter().enumerate() {
        let max = grads.get(id).unwrap().max_abs();
        assert!(
            max > 0.0,
            "parameter {} has an all-zero gradient",
            model.params().name(i)
        );
    }
}
