mod common;

#[test]
fn two_layer_model_gradients_match_central_differences() {
    for seed in [0, 1] {
        let (err, name) = common::max_param_rel_err(seed);
        assert!(err < 1e-3, "seed {seed}: {name} rel err {err}");
        println!("seed {seed}: worst {name} {err:.2e}");
    }
}

#[test]
fn tape_forward_matches_f64_reference() {
    use selfloop::model::{Mode, ModelConfig, ModelState};
    use selfloop::tokenizer::encode;
    let text = encode("It was the best of times, it was the worst of times.");
    for (m, label) in [
        (common::gradcheck_model(3), "perturbed"),
        (ModelState::init(&ModelConfig::tiny(), 5).unwrap(), "tiny"),
    ] {
        let cfg = m.config().clone();
        let ids = &text.ids()[..text.len().min(cfg.block_size)];
        let seq = selfloop::tokenizer::TokenSequence::new(ids.to_vec());
        let got = m.forward(&seq, Mode::Eval).unwrap();
        let p = common::reference::RefParams::from_model(&m);
        let want = common::reference::logits(&p, cfg.n_layer, cfg.n_head, cfg.n_embd, ids);
        let worst = got
            .data()
            .iter()
            .zip(&want)
            .map(|(&a, b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-5, "{label}: max abs diff {worst}");
    }
}
