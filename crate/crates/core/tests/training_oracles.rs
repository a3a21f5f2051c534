use opae::neural::{mse, mse_grad, Activation, AdamConfig, AdamState, Matrix, Mlp};
use opae::operator_model::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()).collect())
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Flat parameter list: encoder, decoder, operator.
fn flat(m: &OperatorAEModel) -> Vec<f64> {
    let mut v: Vec<f64> = m.encoder.params().concat();
    v.extend(m.decoder.params().concat());
    v.extend_from_slice(m.operator.as_slice());
    v
}

fn set_flat(m: &mut OperatorAEModel, idx: usize, value: f64) {
    let mut i = idx;
    for net in [&mut m.encoder, &mut m.decoder] {
        for t in net.params_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
    }
    m.operator.as_mut_slice()[i] = value;
}

fn total_loss(m: &OperatorAEModel, u: &Matrix, u1: &Matrix, alpha: f64) -> f64 {
    let (l, _) = pair_gradients(m, u, u1, alpha, ReconTarget::Both, true).unwrap();
    l.recon + l.operator
}

#[test]
fn stacked_network_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let acts = [Activation::Relu, Activation::Relu, Activation::Relu, Activation::Sigmoid];
    let mut net = Mlp::random(&[45, 31, 16, 31, 45], &acts, &mut rng).unwrap();
    let x = uniform(&mut rng, 3, 45);
    let loss = |n: &Mlp| mse(&n.infer(&x).unwrap(), &x).unwrap();
    let (y, cache) = net.forward(&x).unwrap();
    let g = net.backward(&cache, &mse_grad(&y, &x, 1.0).unwrap()).unwrap();
    let analytic: Vec<f64> = g.slices().concat();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for idx in (0..analytic.len()).step_by(7) {
        let orig = net.params().concat()[idx];
        let bump = |v: f64, n: &mut Mlp| {
            let mut i = idx;
            for t in n.params_mut() {
                if i < t.len() {
                    t[i] = v;
                    return;
                }
                i -= t.len();
            }
        };
        bump(orig + h, &mut net);
        let lp = loss(&net);
        bump(orig - h, &mut net);
        let lm = loss(&net);
        bump(orig, &mut net);
        worst = worst.max(rel_err(analytic[idx], (lp - lm) / (2.0 * h)));
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

/// Random biases keep pre-activations off the ReLU kink, where the loss has
/// no derivative for finite differences to approximate.
fn randomize_model(m: &mut OperatorAEModel, rng: &mut ChaCha8Rng) {
    for net in [&mut m.encoder, &mut m.decoder] {
        for (t, p) in net.params_mut().into_iter().enumerate() {
            if t % 2 == 1 {
                for b in p {
                    *b = rng.random_range(-0.1..0.1);
                }
            }
        }
    }
    for v in m.operator.as_mut_slice() {
        *v += rng.random_range(-0.3..0.3);
    }
}

fn full_model_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = build_model(6, 4, seed);
    assert_eq!(m.spec.hidden_dim, 5);
    randomize_model(&mut m, &mut rng);
    let u = uniform(&mut rng, 2, 6);
    let u1 = uniform(&mut rng, 2, 6);
    let (_, g) = pair_gradients(&m, &u, &u1, 20.0, ReconTarget::Both, true).unwrap();
    let mut analytic: Vec<f64> = g.encoder.slices().concat();
    analytic.extend(g.decoder.slices().concat());
    analytic.extend_from_slice(g.operator.as_slice());
    let base = flat(&m);
    assert_eq!(base.len(), analytic.len());
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        set_flat(&mut m, i, base[i] + h);
        let lp = total_loss(&m, &u, &u1, 20.0);
        set_flat(&mut m, i, base[i] - h);
        let lm = total_loss(&m, &u, &u1, 20.0);
        set_flat(&mut m, i, base[i]);
        let n = (lp - lm) / (2.0 * h);
        worst = worst.max(rel_err(a, n));
    }
    worst
}

#[test]
fn full_model_gradient_check() {
    for seed in 0..10 {
        let e = full_model_check(seed);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

// ---------------------------------------------------------------------------
// Straight-line reimplementation of one training epoch.

struct ScalarNet {
    w: Vec<Vec<Vec<f64>>>,
    b: Vec<Vec<f64>>,
    act: Vec<Activation>,
}

impl ScalarNet {
    fn from(m: &Mlp) -> Self {
        let mut w = Vec::new();
        let mut b = Vec::new();
        let mut act = Vec::new();
        for l in m.layers() {
            let rows = (0..l.weights.rows())
                .map(|o| (0..l.weights.cols()).map(|i| l.weights.get(o, i)).collect())
                .collect();
            w.push(rows);
            b.push(l.bias.clone());
            act.push(l.activation);
        }
        Self { w, b, act }
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in 0..self.w.len() {
            for row in &self.w[l] {
                v.extend(row);
            }
            v.extend(&self.b[l]);
        }
        v
    }

    /// Per-layer (input, pre-activation) and output.
    fn forward(&self, x: &[f64]) -> (Vec<(Vec<f64>, Vec<f64>)>, Vec<f64>) {
        let mut trace = Vec::new();
        let mut cur = x.to_vec();
        for l in 0..self.w.len() {
            let mut z = vec![0.0; self.w[l].len()];
            for o in 0..z.len() {
                let mut s = self.b[l][o];
                for i in 0..cur.len() {
                    s += self.w[l][o][i] * cur[i];
                }
                z[o] = s;
            }
            let y: Vec<f64> = z
                .iter()
                .map(|&v| match self.act[l] {
                    Activation::Relu => v.max(0.0),
                    Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                    Activation::Identity => v,
                })
                .collect();
            trace.push((cur, z));
            cur = y;
        }
        (trace, cur)
    }

    /// Accumulates weight/bias gradients; returns d(input).
    fn backward(
        &self,
        trace: &[(Vec<f64>, Vec<f64>)],
        out: &[f64],
        dy: &[f64],
        gw: &mut [Vec<Vec<f64>>],
        gb: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let mut delta = dy.to_vec();
        let mut y = out.to_vec();
        for l in (0..self.w.len()).rev() {
            let (x, z) = &trace[l];
            for o in 0..delta.len() {
                delta[o] *= match self.act[l] {
                    Activation::Relu => {
                        if z[o] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Activation::Sigmoid => y[o] * (1.0 - y[o]),
                    Activation::Identity => 1.0,
                };
            }
            let mut dx = vec![0.0; x.len()];
            for o in 0..delta.len() {
                gb[l][o] += delta[o];
                for i in 0..x.len() {
                    gw[l][o][i] += delta[o] * x[i];
                    dx[i] += delta[o] * self.w[l][o][i];
                }
            }
            delta = dx;
            y = x.clone();
        }
        delta
    }

    fn zero_grads(&self) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
        (
            self.w.iter().map(|l| l.iter().map(|r| vec![0.0; r.len()]).collect()).collect(),
            self.b.iter().map(|b| vec![0.0; b.len()]).collect(),
        )
    }
}

struct ScalarAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ScalarAdam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, p: &mut [&mut f64], g: &[f64], lr: f64) {
        self.t += 1;
        for i in 0..g.len() {
            self.m[i] = 0.9 * self.m[i] + 0.1 * g[i];
            self.v[i] = 0.999 * self.v[i] + 0.001 * g[i] * g[i];
            let mh = self.m[i] / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v[i] / (1.0 - 0.999f64.powi(self.t));
            *p[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

fn params_of(net: &mut ScalarNet) -> Vec<&mut f64> {
    let mut v = Vec::new();
    for (w, b) in net.w.iter_mut().zip(net.b.iter_mut()) {
        for row in w.iter_mut() {
            v.extend(row.iter_mut());
        }
        v.extend(b.iter_mut());
    }
    v
}

fn flat_grads(gw: &[Vec<Vec<f64>>], gb: &[Vec<f64>]) -> Vec<f64> {
    let mut v = Vec::new();
    for l in 0..gw.len() {
        for row in &gw[l] {
            v.extend(row);
        }
        v.extend(&gb[l]);
    }
    v
}

#[test]
fn two_epochs_match_scalar_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (m_in, d, alpha, lr) = (6usize, 3usize, 20.0, 0.01);
    let data = TrainingData {
        u_t: uniform(&mut rng, 2, m_in),
        u_t1: uniform(&mut rng, 2, m_in),
    };
    let cfg = TrainConfig {
        lr,
        alpha,
        operator_delay_epochs: 1,
        batch_size: 1,
        epochs: 2,
        rng_seed: 17,
        latent_dim: d,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(m_in, cfg.clone()).unwrap();
    let mut enc = ScalarNet::from(&trainer.model.encoder);
    let mut dec = ScalarNet::from(&trainer.model.decoder);
    let mut op: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let n_ae = enc.flat().len() + dec.flat().len();
    let mut adam_ae = ScalarAdam::new(n_ae);
    let mut adam_op = ScalarAdam::new(d * d);

    for epoch in 0..2 {
        let active = epoch >= 1;
        let mut ae_losses = Vec::new();
        for rows in epoch_batches(cfg.rng_seed, epoch, 2, 1) {
            let r = rows[0];
            let ut = data.u_t.row(r).to_vec();
            let ut1 = data.u_t1.row(r).to_vec();
            let (et, vt) = enc.forward(&ut);
            let (et1, vt1) = enc.forward(&ut1);
            let (dt, ht) = dec.forward(&vt);
            let (dt1, ht1) = dec.forward(&vt1);
            let mut se = 0.0;
            for i in 0..m_in {
                se += (ht[i] - ut[i]).powi(2) + (ht1[i] - ut1[i]).powi(2);
            }
            ae_losses.push(0.5 * se / m_in as f64);

            let (mut egw, mut egb) = enc.zero_grads();
            let (mut dgw, mut dgb) = dec.zero_grads();
            let dht: Vec<f64> = (0..m_in).map(|i| (ht[i] - ut[i]) / m_in as f64).collect();
            let dht1: Vec<f64> = (0..m_in).map(|i| (ht1[i] - ut1[i]) / m_in as f64).collect();
            let mut dvt = dec.backward(&dt, &ht, &dht, &mut dgw, &mut dgb);
            let mut dvt1 = dec.backward(&dt1, &ht1, &dht1, &mut dgw, &mut dgb);
            let mut gop = vec![0.0; d * d];
            if active {
                let p: Vec<f64> = (0..d).map(|i| (0..d).map(|j| op[i][j] * vt[j]).sum()).collect();
                let dp: Vec<f64> = (0..d).map(|i| 2.0 * alpha * (p[i] - vt1[i]) / d as f64).collect();
                for i in 0..d {
                    for j in 0..d {
                        gop[i * d + j] = dp[i] * vt[j];
                        dvt[j] += dp[i] * op[i][j];
                    }
                    dvt1[i] -= dp[i];
                }
            }
            enc.backward(&et, &vt, &dvt, &mut egw, &mut egb);
            enc.backward(&et1, &vt1, &dvt1, &mut egw, &mut egb);

            let mut g = flat_grads(&egw, &egb);
            g.extend(flat_grads(&dgw, &dgb));
            let mut p = params_of(&mut enc);
            p.extend(params_of(&mut dec));
            adam_ae.step(&mut p, &g, lr);
            if active {
                let mut p: Vec<&mut f64> = op.iter_mut().flat_map(|r| r.iter_mut()).collect();
                adam_op.step(&mut p, &gop, lr);
            }
        }
        let rec = trainer.step_epoch(&data).unwrap();
        let mean = ae_losses.iter().sum::<f64>() / ae_losses.len() as f64;
        assert!((rec.loss_ae - mean).abs() < 1e-10);
    }

    let mut expected = enc.flat();
    expected.extend(dec.flat());
    expected.extend(op.concat());
    let got = flat(&trainer.model);
    assert_eq!(got.len(), expected.len());
    let worst = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "max parameter deviation {worst}");
    assert_ne!(trainer.model.operator, Matrix::identity(d));
}

// ---------------------------------------------------------------------------

fn toy(n: usize, m: usize, seed: u64) -> TrainingData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u_t = uniform(&mut rng, n, m);
    let data = u_t
        .as_slice()
        .iter()
        .map(|x| (x * 0.97 + 0.01 * rng.random::<f64>()).clamp(0.0, 1.0))
        .collect();
    TrainingData { u_t1: Matrix::from_vec(n, m, data), u_t }
}

#[test]
fn alpha_zero_is_plain_autoencoder() {
    let data = toy(40, 10, 3);
    let cfg = TrainConfig {
        alpha: 0.0,
        operator_delay_epochs: 1,
        epochs: 4,
        batch_size: 8,
        latent_dim: 5,
        rng_seed: 9,
        ..TrainConfig::default()
    };
    let mut with_op = Trainer::new(10, cfg.clone()).unwrap();
    with_op.run(&data, |_| {}).unwrap();

    let mut plain = build_model_with(cfg.model_spec(10), cfg.rng_seed);
    let mut shapes: Vec<&[f64]> = plain.encoder.params();
    shapes.extend(plain.decoder.params());
    let mut adam = AdamState::for_params(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &shapes);
    for epoch in 0..cfg.epochs {
        for rows in epoch_batches(cfg.rng_seed, epoch, data.len(), cfg.batch_size) {
            let (u, u1) = data.batch(&rows);
            let (_, g) = pair_gradients(&plain, &u, &u1, 0.0, ReconTarget::Both, false).unwrap();
            let mut gs = g.encoder.slices();
            gs.extend(g.decoder.slices());
            let mut p = plain.encoder.params_mut();
            p.extend(plain.decoder.params_mut());
            adam.update(&mut p, &gs).unwrap();
        }
    }
    assert_eq!(with_op.model.encoder, plain.encoder);
    assert_eq!(with_op.model.decoder, plain.decoder);
    assert_eq!(with_op.model.operator, Matrix::identity(5));
    assert!(with_op.history.iter().all(|r| r.loss_op == 0.0));
}

#[test]
fn operator_bit_identical_through_delay() {
    let data = toy(30, 10, 4);
    let cfg = TrainConfig {
        operator_delay_epochs: 3,
        epochs: 5,
        batch_size: 7,
        latent_dim: 4,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(10, cfg).unwrap();
    let init = tr.model.operator.clone();
    for _ in 0..3 {
        tr.step_epoch(&data).unwrap();
        assert_eq!(tr.model.operator, init);
        assert_eq!(tr.optimizers.operator.step, 0);
    }
    tr.step_epoch(&data).unwrap();
    assert_ne!(tr.model.operator, init);
}

#[test]
fn stationary_pairs_give_no_operator_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u = uniform(&mut rng, 6, 10);
    let m = build_model(10, 4, 2);
    let (l, g) = pair_gradients(&m, &u, &u, 20.0, ReconTarget::Both, true).unwrap();
    assert_eq!(l.operator, 0.0);
    assert!(g.operator.as_slice().iter().all(|&x| x == 0.0));
    let (_, g0) = pair_gradients(&m, &u, &u, 20.0, ReconTarget::Both, false).unwrap();
    assert_eq!(g.encoder, g0.encoder);
}

#[test]
fn recorded_loss_is_mean_of_batch_losses() {
    let data = toy(50, 10, 6);
    let cfg = TrainConfig {
        operator_delay_epochs: 0,
        epochs: 2,
        batch_size: 16,
        latent_dim: 4,
        ..TrainConfig::default()
    };
    let mut model = build_model_with(cfg.model_spec(10), 1);
    let frozen = AdamConfig { lr: 0.0, ..AdamConfig::default() };
    let mut opt = Optimizers::new(&model, frozen);
    let before = model.clone();
    let rec = train_epoch(&mut model, &data, &cfg, 1, &mut opt).unwrap();
    assert_eq!(model, before);
    let batches = epoch_batches(cfg.rng_seed, 1, data.len(), cfg.batch_size);
    assert_eq!(batches.len(), 4);
    let (mut ae, mut op) = (0.0, 0.0);
    for rows in &batches {
        let (u, u1) = data.batch(rows);
        let acts = forward_pair(&model, &u, &u1).unwrap();
        ae += loss_recon(&acts.u_hat_t, &u, &acts.u_hat_t1, &u1).unwrap();
        op += loss_op(&acts.mv_t, &acts.v_t1, cfg.alpha).unwrap();
    }
    assert_eq!(rec.loss_ae, ae / 4.0);
    assert_eq!(rec.loss_op, op / 4.0);
    assert_eq!(rec.alpha_scaled_ae, cfg.alpha * rec.loss_ae);
}

#[test]
fn loss_recon_matches_elementwise_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = uniform(&mut rng, 4, 45);
    let b = uniform(&mut rng, 4, 45);
    let c = uniform(&mut rng, 4, 45);
    let e = uniform(&mut rng, 4, 45);
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for i in 0..a.as_slice().len() {
        s1 += (a.as_slice()[i] - b.as_slice()[i]).powi(2);
        s2 += (c.as_slice()[i] - e.as_slice()[i]).powi(2);
    }
    let expect = 0.5 * (s1 / 180.0 + s2 / 180.0);
    assert!((loss_recon(&a, &b, &c, &e).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn two_step_prediction_composes_operator() {
    let mut m = build_model(10, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for v in m.operator.as_mut_slice() {
        *v += rng.random_range(-0.2..0.2);
    }
    let u = uniform(&mut rng, 3, 10);
    let manual = m.decode(&m.advance(&m.advance(&m.encode(&u).unwrap()).unwrap()).unwrap()).unwrap();
    assert_eq!(m.predict_next(&u, 2).unwrap(), manual);
}

#[test]
fn non_finite_input_reports_divergence_context() {
    let mut data = toy(20, 6, 2);
    data.u_t.set(3, 2, f64::NAN);
    let cfg = TrainConfig {
        operator_delay_epochs: 0,
        epochs: 1,
        batch_size: 20,
        latent_dim: 3,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(6, cfg).unwrap();
    match tr.step_epoch(&data) {
        Err(TrainError::Diverged { epoch: 0, batch: 0, .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn training_is_deterministic() {
    let data = toy(60, 10, 7);
    let cfg = TrainConfig {
        operator_delay_epochs: 1,
        epochs: 3,
        batch_size: 16,
        latent_dim: 6,
        rng_seed: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let mut t = Trainer::new(10, cfg.clone()).unwrap();
        t.run(&data, |_| {}).unwrap();
        t
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
    let other = Trainer::new(10, TrainConfig { rng_seed: 5, ..cfg.clone() }).unwrap();
    assert_ne!(other.model.encoder, Trainer::new(10, cfg).unwrap().model.encoder);
}

#[test]
fn latent_relu_flag_controls_encoder_output() {
    let lin = build_model_with(ModelSpec { latent_relu: false, ..ModelSpec::new(10, 4) }, 0);
    assert_eq!(lin.encoder.layers()[1].activation, Activation::Identity);
    let relu = build_model(10, 4, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let v = relu.encode(&uniform(&mut rng, 20, 10)).unwrap();
    assert!(v.as_slice().iter().all(|&x| x >= 0.0));
}

#[test]
fn first_element_mode_ignores_second_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let m = build_model(6, 3, 1);
    let u = uniform(&mut rng, 2, 6);
    let u1 = uniform(&mut rng, 2, 6);
    let (l, _) = pair_gradients(&m, &u, &u1, 20.0, ReconTarget::First, false).unwrap();
    let acts = forward_pair(&m, &u, &u1).unwrap();
    assert_eq!(l.recon, mse(&acts.u_hat_t, &u).unwrap());
}
