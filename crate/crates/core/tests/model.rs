use clearhug::mask::{sample_masked, EncoderPolicy, MaskMatrix, MaskSpec, TokenLayout, Variant};
use clearhug::model::*;
use clearhug::tensor::Mat;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec_for(rec: &clearhug::tokenizer::TokenizedRecord, ratio: f64, variant: Variant, seed: u64) -> MaskSpec {
    let layout = TokenLayout::new(rec.n_beats);
    let k = sample_masked(layout, &rec.valid, ratio, &mut ChaCha8Rng::seed_from_u64(seed));
    MaskSpec::new(layout, &rec.valid, &k, variant).unwrap()
}

#[test]
fn grad_check_toy_clear() {
    let r = grad_check(&ModelConfig::toy(), Variant::Clear, EncoderPolicy::PaperLiteral, 200, 7).unwrap();
    println!("{:#?}", r.per_class);
    assert!(
        r.max_rel_error < 1e-3,
        "worst {} at {} {:?}",
        r.max_rel_error,
        r.worst,
        r.worst_values
    );
}

#[test]
fn grad_check_zero_fill_and_consistent() {
    let mut cfg = ModelConfig::toy();
    cfg.mask_fill = MaskFill::Zero;
    cfg.enc_layers = 2;
    let r = grad_check(&cfg, Variant::NoIc, EncoderPolicy::Consistent, 60, 3).unwrap();
    assert!(
        r.max_rel_error < 1e-3,
        "worst {} at {} {:?}",
        r.max_rel_error,
        r.worst,
        r.worst_values
    );
}

#[test]
fn embed_lengths() {
    let cfg = ModelConfig {
        n_beats: 15,
        beat_len: 8,
        ..ModelConfig::toy()
    };
    let p: Params<f32> = Params::init(&cfg, 0).unwrap();
    let rec = &toy_records(&cfg, 1, 0)[0];
    let e = embed(&p, rec, &spec_for(rec, 0.0, Variant::Clear, 0)).unwrap();
    assert_eq!(e.encoder_input.rows, 192);
    let e = embed(&p, rec, &spec_for(rec, 0.8, Variant::Clear, 0)).unwrap();
    assert_eq!(e.encoder_input.rows, 48);
    assert_eq!(e.decoder_positions.len(), 192);
}

#[test]
fn swapping_two_leads_only_touches_their_rows() {
    let cfg = ModelConfig::toy();
    let p: Params<f64> = Params::init(&cfg, 2).unwrap();
    let rec = toy_records(&cfg, 1, 5).remove(0);
    let mut swapped = rec.clone();
    for j in 0..cfg.n_beats {
        let a = rec.beat(10, j).to_vec();
        let b = rec.beat(11, j).to_vec();
        swapped.beat_mut(10, j).copy_from_slice(&b);
        swapped.beat_mut(11, j).copy_from_slice(&a);
    }
    let spec = MaskSpec::unmasked(TokenLayout::new(cfg.n_beats), Variant::Clear);
    let a = embed(&p, &rec, &spec).unwrap();
    let b = embed(&p, &swapped, &spec).unwrap();
    let layout = spec.layout;
    for (r, &pos) in a.encoder_positions.iter().enumerate() {
        let touched = (10..12).any(|lead| (0..cfg.n_beats).any(|j| layout.beat(lead, j) == pos));
        let same = a.encoder_input.row(r) == b.encoder_input.row(r);
        assert_eq!(same, !touched, "row {r}");
    }
}

#[test]
fn zero_head_reconstructs_zero() {
    let cfg = ModelConfig::toy();
    let mut p: Params<f32> = Params::init(&cfg, 0).unwrap();
    p.recon_head = Linear::zeros(cfg.d_t, cfg.beat_len);
    let rec = &toy_records(&cfg, 1, 0)[0];
    let out = forward_reconstruct(
        &p,
        rec,
        &spec_for(rec, 0.5, Variant::Clear, 1),
        &ForwardOptions::default(),
    )
    .unwrap();
    assert!(out.beats.iter().all(|&v| v == 0.0));
}

#[test]
fn full_variant_matches_plain_mae() {
    let cfg = ModelConfig::toy();
    let p: Params<f64> = Params::init(&cfg, 4).unwrap();
    for (i, rec) in toy_records(&cfg, 4, 9).iter().enumerate() {
        let spec = spec_for(rec, 0.5, Variant::Full, i as u64);
        for policy in EncoderPolicy::ALL {
            let sparse = forward_reconstruct(&p, rec, &spec, &ForwardOptions::new(policy)).unwrap();
            let plain = forward_reconstruct(
                &p,
                rec,
                &spec,
                &ForwardOptions {
                    kernel: Kernel::Unmasked,
                    ..ForwardOptions::new(policy)
                },
            )
            .unwrap();
            let diff = sparse
                .beats
                .iter()
                .zip(&plain.beats)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-6, "diff {diff}");
        }
    }
}

#[test]
fn loss_examples() {
    let target = vec![0.5f32; 12 * 2 * 4];
    let recon: Vec<f64> = target.iter().map(|&v| v as f64).collect();
    let sel = vec![12, 13, 20];
    assert_eq!(reconstruction_loss(&recon, &target, &sel, 4).unwrap(), 0.0);
    let plus: Vec<f64> = recon.iter().map(|v| v + 1.0).collect();
    assert_eq!(reconstruction_loss(&plus, &target, &sel, 4).unwrap(), 1.0);
    assert!(reconstruction_loss(&plus, &target, &[], 4).is_err());

    let layout = TokenLayout::new(2);
    let all: Vec<usize> = (12..36).collect();
    let spec = MaskSpec::new(layout, &[true, true], &all, Variant::Clear).unwrap();
    assert_eq!(
        LossScope::Masked.selection(&spec).unwrap(),
        LossScope::All.selection(&spec).unwrap()
    );
    let none = MaskSpec::new(layout, &[true, true], &[], Variant::Clear).unwrap();
    assert!(LossScope::Masked
        .selection(&none)
        .unwrap_err()
        .to_string()
        .contains("empty selection"));
}

#[test]
fn other_lead_parameters_get_no_gradient_without_conduction() {
    let cfg = ModelConfig::toy();
    let p: Params<f64> = Params::init(&cfg, 8).unwrap();
    let rec = &toy_records(&cfg, 1, 2)[0];
    let layout = TokenLayout::new(cfg.n_beats);
    let target = layout.beat(4, 1);
    for (variant, expect_zero) in [(Variant::NoIc, true), (Variant::Clear, false)] {
        let masked = vec![target, layout.beat(7, 0)];
        let spec = MaskSpec::new(layout, &rec.valid, &masked, variant).unwrap();
        let mut g = p.zeros_like();
        let opts = ForwardOptions::new(EncoderPolicy::Consistent);
        record_loss_grad(&p, rec, &spec, &[target], &opts, &mut g, None).unwrap();
        for lead in (0..12).filter(|&l| l != 4) {
            let lead_zero = g.lead_embed.row(lead).iter().all(|&v| v == 0.0);
            let cls_zero = g.cls_tokens.row(lead).iter().all(|&v| v == 0.0);
            assert!(cls_zero || !expect_zero, "cls {lead}");
            if expect_zero {
                assert!(lead_zero, "lead {lead} under {variant}");
            }
        }
        let any_other = (0..12)
            .filter(|&l| l != 4)
            .any(|l| g.lead_embed.row(l).iter().any(|&v| v != 0.0));
        assert_eq!(any_other, !expect_zero);
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.chck");
    let ck = Checkpoint {
        params: Params::init(&ModelConfig::toy(), 11).unwrap(),
        variant: Variant::NoIv,
        policy: EncoderPolicy::Consistent,
        rng_seed: 99,
        epoch: 4,
    };
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    for ((na, a), (nb, b)) in ck.params.tensors().into_iter().zip(back.params.tensors()) {
        assert_eq!(na, nb);
        let bits_a: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "{na}");
    }
    assert_eq!(back, ck);

    let mut bytes = ck.to_bytes();
    bytes.truncate(bytes.len() - 3);
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Mat<f64>, MaskMatrix, Block<f64>, usize) {
    let heads = rng.random_range(1..=3);
    let d = heads * rng.random_range(1..=4);
    let n = rng.random_range(1..=20);
    let mut allowed = vec![false; n * n];
    let density: f64 = rng.random_range(0.05..1.0);
    for r in 0..n {
        for c in 0..n {
            allowed[r * n + c] = r == c || rng.random::<f64>() < density;
        }
    }
    let mask = MaskMatrix::from_dense(n, &allowed).unwrap();
    let x = Mat::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect());
    let block = Block::new(d, 4, rng);
    (x, mask, block, heads)
}

#[test]
fn sparse_and_dense_attention_agree_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let (x, mask, block, heads) = random_instance(&mut rng);
        let (dense, w) = masked_attention(&x, &mask, &block, heads).unwrap();
        let (sparse, pairs) = sparse_attention(&x, &mask, &block, heads).unwrap();
        let n = mask.n();
        assert_eq!(pairs, mask.to_dense().iter().filter(|&&b| b).count());
        for (a, b) in dense.data.iter().zip(&sparse.data) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-12) + 1e-12);
        }
        let allowed = mask.to_dense();
        for h in 0..heads {
            for r in 0..n {
                let row = &w[(h * n + r) * n..(h * n + r + 1) * n];
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-6);
                for c in 0..n {
                    if !allowed[r * n + c] {
                        assert_eq!(row[c], 0.0);
                    }
                }
            }
        }
        let all = MaskMatrix::all_allowed(n);
        let (masked_all, _) = masked_attention(&x, &all, &block, heads).unwrap();
        let (plain, _) = unmasked_attention(&x, &block, heads);
        assert!(masked_all.max_abs_diff(&plain) <= 1e-6);
    }
}

#[test]
fn kernel_backward_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let (x, mask, block, heads) = random_instance(&mut rng);
        let q = linear_fwd(&x, &block.q);
        let k = linear_fwd(&x, &block.k);
        let v = linear_fwd(&x, &block.v);
        let dctx = Mat::from_vec(
            x.rows,
            x.cols,
            (0..x.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let f = |q: &Mat<f64>, k: &Mat<f64>, v: &Mat<f64>| {
            let (c, _) = sparse_kernel(q, k, v, &mask, heads).unwrap();
            c.data.iter().zip(&dctx.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, w) = sparse_kernel(&q, &k, &v, &mask, heads).unwrap();
        let (dq, dk, dv) = kernel_bwd(&q, &k, &v, &mask, &w, &dctx, heads);
        let h = 1e-5;
        for i in 0..q.data.len() {
            for (which, grad) in [(0, &dq), (1, &dk), (2, &dv)] {
                let mut qs = [q.clone(), k.clone(), v.clone()];
                qs[which].data[i] += h;
                let up = f(&qs[0], &qs[1], &qs[2]);
                qs[which].data[i] -= 2.0 * h;
                let down = f(&qs[0], &qs[1], &qs[2]);
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (fd - grad.data[i]).abs() < 1e-6,
                    "{which} {i}: {fd} vs {}",
                    grad.data[i]
                );
            }
        }
    }
}

#[test]
fn batch_gradient_is_thread_count_independent() {
    let cfg = ModelConfig::toy();
    let p: Params<f32> = Params::init(&cfg, 1).unwrap();
    let recs = toy_records(&cfg, 6, 3);
    let items: Vec<BatchItem> = recs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let spec = spec_for(r, 0.5, Variant::Clear, i as u64);
            let selection = LossScope::Masked.selection(&spec).unwrap();
            BatchItem {
                record: r,
                spec,
                selection,
                seed: i as u64,
            }
        })
        .collect();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| batch_loss_grad(&p, &items, &ForwardOptions::default()).unwrap())
    };
    let (la, ga) = run(1);
    let (lb, gb) = run(3);
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(ga, gb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trace_rows_are_distributions(seed in 0u64..1000, ratio in 0.0f64..1.0, v in 0usize..5, consistent: bool) {
        let cfg = ModelConfig::toy();
        let p: Params<f64> = Params::init(&cfg, seed).unwrap();
        let rec = &toy_records(&cfg, 2, seed)[1];
        let spec = spec_for(rec, ratio, Variant::ALL[v], seed);
        let policy = if consistent { EncoderPolicy::Consistent } else { EncoderPolicy::PaperLiteral };
        let opts = ForwardOptions { trace: true, ..ForwardOptions::new(policy) };
        let out = forward_reconstruct(&p, rec, &spec, &opts).unwrap();
        let trace = out.trace.unwrap();
        for layer in trace.encoder.iter().chain(&trace.decoder) {
            let n = layer.n();
            for h in 0..layer.heads {
                for r in 0..n {
                    let row = layer.row(h, r);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                    for c in 0..n {
                        if !layer.allowed[r * n + c] {
                            prop_assert_eq!(row[c], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unreachable_inputs_do_not_move_reconstructions(seed in 0u64..1000, ratio in 0.3f64..0.9, v in 0usize..5, consistent: bool) {
        let cfg = ModelConfig { enc_layers: 2, ..ModelConfig::toy() };
        let p: Params<f64> = Params::init(&cfg, seed).unwrap();
        let rec = toy_records(&cfg, 1, seed).remove(0);
        let spec = spec_for(&rec, ratio, Variant::ALL[v], seed);
        let policy = if consistent { EncoderPolicy::Consistent } else { EncoderPolicy::PaperLiteral };
        let opts = ForwardOptions::new(policy);
        let masked = spec.masked_positions();
        prop_assume!(!masked.is_empty());
        let target = masked[(seed as usize) % masked.len()];
        let reach = influencing_inputs(&spec, policy, cfg.enc_layers, cfg.dec_layers, target);
        let base = forward_reconstruct(&p, &rec, &spec, &opts).unwrap();
        let tb = cfg.beat_len;
        let slot = (target - 12) * tb..(target - 12 + 1) * tb;
        for q in spec.visible_positions().into_iter().filter(|&q| q >= 12) {
            let mut moved = rec.clone();
            let o = (q - 12) * tb;
            moved.beats[o..o + tb].iter_mut().for_each(|x| *x += 1.0);
            let out = forward_reconstruct(&p, &moved, &spec, &opts).unwrap();
            let diff = out.beats[slot.clone()].iter().zip(&base.beats[slot.clone()]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if !reach.contains(&q) {
                prop_assert!(diff <= 1e-6, "position {} moved {}", q, diff);
            }
        }
    }
}
