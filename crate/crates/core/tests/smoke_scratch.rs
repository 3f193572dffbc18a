use mdic::mask::mask_aux_loss;
use mdic::pipeline::*;
use mdic::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn detach(t: &Tensor) -> Tensor {
    Tensor::from_vec(t.to_vec(), &t.shape().to_vec()).unwrap()
}

fn accuracy(model: &Model, heldout: &[SyntheticScene]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in heldout {
        let z_y = detach(&model.vae.encode(&s.side).unwrap());
        let a_y = model.align_y.forward(&z_y).unwrap();
        let mc = model.vocab.mask_caption(&s.caption).unwrap();
        let Some(logits) = model.mask_pred.predict(&model.text_enc, &mc, &a_y).unwrap() else {
            continue;
        };
        let rows = logits.to_vec();
        for (si, &truth) in mc.truths.iter().enumerate() {
            let row = &rows[si * 6..(si + 1) * 6];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if best == truth {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}

fn probe_trunk(
    model: &Model,
    train_set: &[SyntheticScene],
    heldout: &[SyntheticScene],
    steps: u64,
    rng: &mut ChaCha8Rng,
) {
    let mut params = model.mask_pred.params();
    params.extend(model.text_enc.params());
    params.extend(model.align_y.params());
    let mut opt = AdamW::new(vec![ParamGroup { params, lr_scale: 1.0 }]);
    for step in 0..steps {
        let mut loss: Option<Tensor> = None;
        for _ in 0..8 {
            let s = &train_set[rng.gen_range(0..train_set.len())];
            let z_y = detach(&model.vae.encode(&s.side).unwrap());
            let a_y = model.align_y.forward(&z_y).unwrap();
            let mc = model.vocab.mask_caption(&s.caption).unwrap();
            let logits = model.mask_pred.predict(&model.text_enc, &mc, &a_y).unwrap();
            let l = mask_aux_loss(logits.as_ref(), &mc.truths).unwrap();
            loss = Some(match loss {
                Some(acc) => acc.add(&l).unwrap(),
                None => l,
            });
        }
        let l = loss.unwrap().scale(1.0 / 8.0);
        if step % 200 == 0 || step + 1 == steps {
            println!("    [trunk] step {step}: loss {:.4}", l.item());
        }
        l.backward().unwrap();
        opt.step(2e-3);
        opt.zero_grads();
        model.codebook.refresh_dead(&used, &pool, rng);
        if (step + 1) % 400 == 0 {
            println!("    [trunk] step {}: heldout acc {:.3}", step + 1, accuracy(model, heldout));
        }
    }
}

#[test]
fn smoke() {
    let mut cfg = Config::default();
    cfg.train_scenes = 2048;
    cfg.heldout_scenes = 64;
    cfg.pretrain_steps = 300;

    let (train_set, heldout) = build_dataset(&cfg).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(&cfg, default_vocabulary(), AblationMode::Full, &mut rng).unwrap();

    let hist = pretrain_vae(&model, &train_set, cfg.pretrain_steps, 4, &mut rng).unwrap();
    println!("pretrain recon {:.4} -> {:.4}", hist[0], hist.last().unwrap());
    init_codebook(&mut model, &train_set, &mut rng).unwrap();

    probe_trunk(&model, &train_set, &heldout, 2000, &mut rng);
}
