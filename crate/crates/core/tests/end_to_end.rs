//! Library-level integration: analytic gradients checked through a full
//! two-layer encoder for both loss heads, and a miniature run composing
//! corpus generation, quantization, teacher training, and distillation.

use cobert_core::autodiff::Graph;
use cobert_core::corpus::{generate, CorpusConfig, EmitMode};
use cobert_core::encoder::{
    bind_params, collect_grads, encode, BoundParams, EncoderConfig, EncoderInput, FrontEnd,
};
use cobert_core::gradcheck::check_gradients;
use cobert_core::kmeans::kmeans;
use cobert_core::metrics::{joint_counts, phone_probe, quality};
use cobert_core::objectives::{mlm_loss, regression_loss};
use cobert_core::params::ParamSet;
use cobert_core::rng::Stream;
use cobert_core::tensor::Tensor;
use cobert_core::train::{
    build_mlm_model, frozen_targets, init_train, plan_batches, train_one_update, Objective,
    TrainConfig, UttExample, UttInput,
};

fn two_layer(vocab: usize, in_dim: usize, stack: usize) -> EncoderConfig {
    EncoderConfig {
        dim: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 16,
        max_len: 32,
        vocab,
        in_dim,
        stack,
        dropout: 0.0,
        ln_eps: 1e-5,
        top_l: 2,
    }
}

/// Forward pass for the masked-prediction loss with the parameters as given;
/// used both as the finite-difference closure and (bound trainable) for the
/// analytic gradient pass.
fn mlm_forward(
    params: &ParamSet,
    cfg: &EncoderConfig,
    codes: &[usize],
    mask: &[bool],
    trainable: bool,
) -> cobert_core::Result<(Graph, Vec<cobert_core::autodiff::Var>, cobert_core::autodiff::Var, f64)>
{
    let mut g = Graph::new();
    let vars = bind_params(&mut g, params, trainable);
    let bound = BoundParams::new(params, &vars);
    let out = encode(&mut g, cfg, &bound, &EncoderInput::Codes(codes), Some(mask), None)?;
    let w = bound.var("head.mlm.w")?;
    let b = bound.var("head.mlm.b")?;
    let logits = g.matmul(out.final_out, w)?;
    let logits = g.add_bias(logits, b)?;
    let term = mlm_loss(&mut g, logits, codes, mask)?;
    let var = term.var.expect("mask has positions");
    Ok((g, vars, var, term.value))
}

#[test]
fn gradcheck_mlm_loss_through_two_layer_encoder() {
    let cfg = two_layer(5, 1, 1);
    let model = build_mlm_model(&cfg, FrontEnd::Code, 21).unwrap();
    let codes: Vec<usize> = (0..14).map(|i| (i * 3 + 1) % 5).collect();
    let mask: Vec<bool> = (0..14).map(|i| i % 3 != 2).collect();

    let mut params = model.params.clone();
    params.zero_grads();
    let (g, vars, var, _) = mlm_forward(&params, &cfg, &codes, &mask, true).unwrap();
    let mut g = g;
    g.backward(var, 1.0).unwrap();
    collect_grads(&g, &mut params, &vars);

    let report = check_gradients(
        &mut params,
        |ps| mlm_forward(ps, &cfg, &codes, &mask, false).map(|r| r.3),
        1e-5,
        4,
        1e-6,
        77,
    )
    .unwrap();
    assert!(report.checked > 50, "only {} coordinates checked", report.checked);
    assert!(
        report.worst_rel < 1e-4,
        "worst relative error {} at {}[{}]",
        report.worst_rel,
        report.worst_param,
        report.worst_coord
    );
}

fn reg_forward(
    params: &ParamSet,
    cfg: &EncoderConfig,
    frames: &Tensor,
    target: &Tensor,
    mask: &[bool],
    trainable: bool,
) -> cobert_core::Result<(Graph, Vec<cobert_core::autodiff::Var>, cobert_core::autodiff::Var, f64)>
{
    let mut g = Graph::new();
    let vars = bind_params(&mut g, params, trainable);
    let bound = BoundParams::new(params, &vars);
    let out = encode(&mut g, cfg, &bound, &EncoderInput::Features(frames), Some(mask), None)?;
    let w = bound.var("head.reg.w")?;
    let b = bound.var("head.reg.b")?;
    let pred = g.matmul(out.final_out, w)?;
    let pred = g.add_bias(pred, b)?;
    let term = regression_loss(&mut g, pred, target, mask)?;
    let var = term.var.expect("mask has positions");
    Ok((g, vars, var, term.value))
}

#[test]
fn gradcheck_regression_loss_through_two_layer_encoder() {
    // Speech front with stack 2 so the check crosses the frame-stacking op.
    let cfg = two_layer(5, 3, 2);
    let model =
        cobert_core::train::build_self_distill_model(&cfg, FrontEnd::Speech, 22).unwrap();
    let mut s = Stream::open(5, "gc-data", &[]);
    let frames = Tensor::matrix(24, 3, (0..24 * 3).map(|_| s.normal()).collect()).unwrap();
    let t = 12; // 24 raw frames stacked by 2
    let target = Tensor::matrix(t, 8, (0..t * 8).map(|_| 0.7 * s.normal()).collect()).unwrap();
    let mask: Vec<bool> = (0..t).map(|i| i % 2 == 0).collect();

    let mut params = model.params.clone();
    params.zero_grads();
    let (g, vars, var, _) = reg_forward(&params, &cfg, &frames, &target, &mask, true).unwrap();
    let mut g = g;
    g.backward(var, 1.0).unwrap();
    collect_grads(&g, &mut params, &vars);

    let report = check_gradients(
        &mut params,
        |ps| reg_forward(ps, &cfg, &frames, &target, &mask, false).map(|r| r.3),
        1e-5,
        4,
        1e-6,
        78,
    )
    .unwrap();
    assert!(report.checked > 50, "only {} coordinates checked", report.checked);
    assert!(
        report.worst_rel < 1e-4,
        "worst relative error {} at {}[{}]",
        report.worst_rel,
        report.worst_param,
        report.worst_coord
    );
}

/// Miniature end-to-end composition: synthetic corpus -> k-means codes ->
/// masked-prediction code teacher -> cross-modal distillation into a speech
/// student -> quality metrics and probe on the student's representations.
#[test]
fn pieces_compose_into_a_miniature_pipeline() {
    let corpus_cfg = CorpusConfig {
        n_utts: 6,
        min_frames: 24,
        max_frames: 30,
        n_phones: 4,
        feature_dim: 5,
        stickiness: 0.85,
        noise: 0.25,
        gain_noise: 0.5,
        mean_scale: 1.5,
        mode: EmitMode::Features,
    };
    let corpus = generate(&corpus_cfg, None, 11).unwrap();

    // Quantize pooled frames; assign per utterance.
    let k = 6;
    let (book, _, report) = kmeans(&corpus.stacked_frames(), k, 25, 1e-7, 11).unwrap();
    assert!(report.iterations >= 1);
    let codes: Vec<Vec<usize>> =
        corpus.utterances.iter().map(|u| book.assign(&u.frames).unwrap()).collect();

    // Code teacher: masked prediction over the code streams.
    let teacher_enc = two_layer(k, 1, 1);
    let mut teacher_cfg = TrainConfig::mlm(40, 11);
    teacher_cfg.frame_budget = 400;
    let mut teacher = init_train(&teacher_cfg, &teacher_enc, FrontEnd::Code, None).unwrap();
    let lengths: Vec<usize> = codes.iter().map(|c| c.len()).collect();
    let batches = plan_batches(&lengths, teacher_cfg.frame_budget);
    let mut first = f64::NAN;
    let mut last = f64::NAN;
    for step in 0..40 {
        let b = &batches[step % batches.len()];
        let batch: Vec<UttExample<'_>> = b
            .iter()
            .map(|&i| UttExample { id: i, input: UttInput::Codes(&codes[i]), codes: &codes[i] })
            .collect();
        let r = train_one_update(&mut teacher, None, &batch, &teacher_cfg).unwrap();
        let l = r.l_mlm.unwrap();
        assert!(l.is_finite());
        if step == 0 {
            first = l;
        }
        last = l;
    }
    assert!(last < first, "teacher loss did not descend: {first} -> {last}");

    // Distill the frozen teacher into a speech-front student.
    let student_enc = two_layer(k, 5, 1);
    let mut student_cfg = TrainConfig::cobert(15, 12);
    student_cfg.frame_budget = 400;
    assert_eq!(student_cfg.objective, Objective::Cobert);
    let mut student =
        init_train(&student_cfg, &student_enc, FrontEnd::Speech, Some(teacher_enc.dim)).unwrap();
    for step in 0..15 {
        let b = &batches[step % batches.len()];
        let batch: Vec<UttExample<'_>> = b
            .iter()
            .map(|&i| UttExample {
                id: i,
                input: UttInput::Frames(&corpus.utterances[i].frames),
                codes: &codes[i],
            })
            .collect();
        let r = train_one_update(&mut student, Some(&teacher.model), &batch, &student_cfg)
            .unwrap();
        assert!(r.l_cobert.unwrap().is_finite());
    }

    // The student's target representations feed the metrics stack.
    let mut reps: Vec<Tensor> = Vec::new();
    for u in &corpus.utterances {
        let r = frozen_targets(
            &student.model.cfg,
            &student.model.params,
            &EncoderInput::Features(&u.frames),
        )
        .unwrap();
        assert_eq!(r.rows(), u.frames.rows());
        assert_eq!(r.cols(), student_enc.dim);
        reps.push(r);
    }
    let pairs: Vec<(&[usize], &[usize])> = codes
        .iter()
        .zip(&corpus.utterances)
        .map(|(c, u)| (c.as_slice(), u.phones.as_slice()))
        .collect();
    let joint = joint_counts(&pairs, corpus.n_phones, k).unwrap();
    let q = quality(&joint).unwrap();
    assert!(q.phone_purity > 0.0 && q.phone_purity <= 1.0);
    assert!(q.cluster_purity > 0.0 && q.cluster_purity <= 1.0);
    assert!((0.0..=1.0).contains(&q.pnmi));

    let mut all_reps = Vec::new();
    let mut all_phones = Vec::new();
    for (r, u) in reps.iter().zip(&corpus.utterances) {
        all_reps.extend_from_slice(r.data());
        all_phones.extend_from_slice(&u.phones);
    }
    let n = all_phones.len();
    let rep_mat = Tensor::matrix(n, student_enc.dim, all_reps).unwrap();
    let acc = phone_probe(&rep_mat, &all_phones, corpus.n_phones, 13).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
