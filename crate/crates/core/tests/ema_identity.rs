use proptest::prelude::*;
use timescale::harness::{ConfigFile, Trainer};
use timescale::{adamw_step, ema_form_update, EmaView, HyperParams, OptState, ScheduleSpec, Tensor};

/// Both forms agree to a few ulps of the larger term of the update.
fn assert_identified(prev: &Tensor, stepped: &Tensor, state: &OptState, hp: &HyperParams) {
    let (m_hat, v_hat) = state.bias_corrected(hp.beta1, hp.beta2);
    let eta = hp.eta_for_step(state.t);
    let view = EmaView::new(&m_hat, &v_hat, eta, hp.lambda, hp.epsilon);
    let ema = ema_form_update(prev, &view);
    for (i, ((a, b), (w, q))) in stepped
        .data()
        .iter()
        .zip(ema.data())
        .zip(prev.data().iter().zip(view.target.data()))
        .enumerate()
    {
        let scale = w.abs() + (view.rate * q).abs();
        assert!(
            (a - b).abs() <= 8.0 * f64::EPSILON * scale,
            "step {} element {i}: adamw {a:e}, ema {b:e}",
            state.t
        );
    }
}

fn schedule(kind: u8, total: u64) -> ScheduleSpec {
    match kind {
        0 => ScheduleSpec::constant(total),
        1 => ScheduleSpec::cosine_to_zero(total),
        _ => ScheduleSpec::cosine_to_fraction(0.1, total),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn adamw_step_is_an_ema_step(
        log_eta in -5.0f64..-1.0,
        log_lambda in -3.0f64..1.0,
        beta1 in 0.0f64..0.99,
        beta2 in 0.9f64..0.9999,
        log_eps in -12.0f64..-2.0,
        kind in 0u8..3,
        w0 in prop::collection::vec(-3.0f64..3.0, 6),
        grads in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 6), 1..40),
    ) {
        let eta0 = 10f64.powf(log_eta);
        let lambda = 10f64.powf(log_lambda);
        prop_assume!(eta0 * lambda < 1.0);
        let hp = HyperParams {
            eta0,
            lambda,
            beta1,
            beta2,
            epsilon: 10f64.powf(log_eps),
            schedule: schedule(kind, grads.len() as u64),
        };
        let mut w = Tensor::new(vec![2, 3], w0).unwrap();
        let mut state = OptState::new(&[2, 3]);
        for g in grads {
            let g = Tensor::new(vec![2, 3], g).unwrap();
            let (next_state, next_w) = adamw_step("w", &state, &w, &g, &hp).unwrap();
            assert_identified(&w, &next_w, &next_state, &hp);
            state = next_state;
            w = next_w;
        }
    }
}

#[test]
fn every_training_step_is_an_ema_step() {
    let text = "n_train = 200\nn_test = 50\nbatch_size = 50\ninput_dim = 6\nclasses = 3\nwidths = [8, 3]\n\
                epochs = 5\nlambda = 0.5\nschedule = \"cosine-to-zero\"\nnorm_affine = true\n";
    let cfg = ConfigFile::parse(text).unwrap().run_config().unwrap();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let decayed: Vec<(String, HyperParams)> = trainer
        .groups()
        .iter()
        .filter(|g| g.apply_decay)
        .flat_map(|g| g.params.iter().map(|p| (p.clone(), g.effective(&cfg.hp))))
        .collect();
    assert!(!decayed.is_empty());
    for _ in 0..cfg.total_steps() {
        let prev = trainer.params().clone();
        trainer.step().unwrap();
        for (name, hp) in &decayed {
            let state = trainer.optimizer().state(name).unwrap();
            assert_identified(&prev[name], &trainer.params()[name], state, hp);
        }
    }
}
