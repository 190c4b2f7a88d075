use rand::Rng;
use rsrdiff::degradation::{gen_phantom, make_pair, PhantomKind, PhantomSpec};
use rsrdiff::nn::{init_params, NetConfig};
use rsrdiff::rng::{gaussian_image, stream_rng};
use rsrdiff::trainer::{loss_and_grads, loss_value, train};
use rsrdiff::{build_schedule, forward_marginal, Pair64, ScheduleConfig, TrainConfig, Variant};

fn small_net(variant: Variant) -> NetConfig {
    NetConfig {
        base_channels: 8,
        depth: 2,
        use_window_attention: true,
        window_size: 4,
        heads: 2,
        time_embed_dim: 16,
    }
    .with_variant(variant)
}

fn pair(seed: u64) -> Pair64 {
    let hr =
        gen_phantom::<f64>(&PhantomSpec::new(16, 16, PhantomKind::CheckerLesion, seed)).unwrap();
    make_pair(&hr, 4).unwrap()
}

/// Fidelity averaged over every timestep with fixed noise.
fn sweep_fidelity(params: &rsrdiff::Params32, net: &NetConfig, p: &rsrdiff::Pair32) -> f64 {
    let sched = build_schedule(&ScheduleConfig::default()).unwrap();
    let mut rng = stream_rng(99, 0);
    let mut total = 0.0;
    for t in 1..=sched.steps() {
        let noise = gaussian_image::<f32>(16, 16, 1, &mut rng);
        let x_t = forward_marginal(p.hr(), p.residual(), t, &sched, &noise).unwrap();
        total += loss_value(params, net, &x_t, p.lr(), p.hr(), t, 10.0)
            .unwrap()
            .fidelity;
    }
    total / sched.steps() as f64
}

#[test]
fn single_pair_overfits() {
    let net = small_net(Variant::Swin);
    let p = pair(1).cast::<f32>();
    let sched = build_schedule(&ScheduleConfig::default()).unwrap();
    let params = init_params::<f32>(&net, 0).unwrap();
    let before = sweep_fidelity(&params, &net, &p);
    let cfg = TrainConfig {
        lr_max: 3e-3,
        warmup_steps: 25,
        total_steps: 500,
        batch_size: 1,
        seed: 4,
        ..TrainConfig::default()
    };
    let out = train(std::slice::from_ref(&p), params, &sched, &net, &cfg, None).unwrap();
    let after = sweep_fidelity(&out.params, &net, &p);
    assert!(
        after * 10.0 < before,
        "fidelity {before:.4e} -> {after:.4e}"
    );
}

#[test]
fn f32_gradients_match_f64_differences() {
    let sched = build_schedule(&ScheduleConfig::default()).unwrap();
    let p = pair(2);
    let noise = gaussian_image::<f64>(16, 16, 1, &mut stream_rng(5, 0));
    let t = 9;
    let x_t = forward_marginal(p.hr(), p.residual(), t, &sched, &noise).unwrap();
    let p32 = p.cast::<f32>();
    let x_t32 = x_t.cast::<f32>();
    let x_t_ref = x_t32.cast::<f64>();
    let p_ref = p32.cast::<f64>();
    for variant in [Variant::Conv, Variant::Swin] {
        let net = small_net(variant);
        let params = init_params::<f64>(&net, 3).unwrap();
        let params32 = params.cast::<f32>();
        let (_, grads) =
            loss_and_grads(&params32, &net, &x_t32, p32.lr(), p32.hr(), t, 10.0).unwrap();
        let names: Vec<(String, usize)> = params
            .iter()
            .map(|(n, a)| (n.to_string(), a.len()))
            .collect();
        let mut rng = stream_rng(8, variant as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (name, len) = &names[rng.gen_range(0..names.len())];
            let idx = rng.gen_range(0..*len);
            // The reference evaluates the f32-rounded parameters in f64.
            let base = params32.cast::<f64>();
            let v0 = base.scalar_at(name, idx).unwrap();
            let h = 1e-2 * v0.abs().max(0.1);
            let at = |v: f64| {
                let mut q = base.clone();
                q.set_scalar(name, idx, v).unwrap();
                loss_value(&q, &net, &x_t_ref, p_ref.lr(), p_ref.hr(), t, 10.0)
                    .unwrap()
                    .total
            };
            let d = |h: f64| (at(v0 + h) - at(v0 - h)) / (2.0 * h);
            let fd = (4.0 * d(h / 2.0) - d(h)) / 3.0;
            let an = grads.scalar_at(name, idx).unwrap() as f64;
            let denom = an.abs().max(fd.abs()).max(1e-4);
            worst = worst.max((an - fd).abs() / denom);
        }
        assert!(worst < 1e-3, "{variant}: worst relative error {worst:.2e}");
    }
}
