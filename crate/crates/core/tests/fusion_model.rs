mod common;

use common::{random_m, rng, M, P};
use proptest::prelude::*;
use simfuse::data::Sample;
use simfuse::fusion::{fuse, FusionKind};
use simfuse::interaction::FfnRole;
use simfuse::model::{Checkpoint, Model, ModelVariant};
use simfuse::numerics::{gradient_check, Tape, Tensor, DEFAULT_STEP};
use simfuse::params::{Bound, ParamSet};

fn small(fusion: FusionKind, use_sim: bool) -> ModelVariant {
    ModelVariant {
        use_sim,
        fusion,
        width: 8,
        tokens: 3,
        heads: 2,
        hidden: Some(12),
        classes: 3,
        classifier: vec![10, 6],
        ..ModelVariant::default()
    }
}

fn jittered(model: &Model, seed: u64) -> ParamSet {
    let mut p = model.init(seed);
    common::jitter_params(&mut p, seed + 100);
    p
}

fn fused_by_crate(
    kind: FusionKind,
    params: &ParamSet,
    text: &M,
    image: &M,
    heads: usize,
) -> Vec<f64> {
    let tape = Tape::new();
    let b = params.bind(&tape);
    let t = tape.leaf(text.to_tensor());
    let i = tape.leaf(image.to_tensor());
    fuse(kind, t, i, &b, "fuse", heads)
        .unwrap()
        .tensor()
        .into_data()
}

fn oracle_fuse(kind: FusionKind, p: &P, text: &M, image: &M, heads: usize) -> Vec<f64> {
    match kind {
        FusionKind::Sfm => common::sfm(p, text, image, heads),
        FusionKind::MergeAttention => common::merge(p, text, image, heads),
        FusionKind::CoAttention => common::co_attention(p, text, image, heads),
        FusionKind::AsymCoAttention => common::asym(p, text, image, heads),
        FusionKind::Concat => common::concat(text, image),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn every_head_matches_its_oracle() {
    let mut r = rng(1);
    for kind in FusionKind::ALL {
        let model = Model::new(small(kind, false)).unwrap();
        let params = jittered(&model, 2);
        for l in [2, 3] {
            let text = random_m(l, 8, 1.0, &mut r);
            let image = random_m(l, 8, 1.0, &mut r);
            let got = fused_by_crate(kind, &params, &text, &image, 2);
            let want = oracle_fuse(kind, &P(&params), &text, &image, 2);
            assert_eq!(got.len(), kind.output_width(8));
            assert!(max_diff(&got, &want) < 1e-12, "{kind}");
        }
    }
}

fn set(params: &mut ParamSet, name: &str, t: Tensor) {
    params.insert(name, t);
}

#[test]
fn sfm_single_token_identity_collapses_to_a_sum() {
    let model = Model::new(small(FusionKind::Sfm, false)).unwrap();
    let mut params = model.init(5);
    for n in params.names().map(str::to_string).collect::<Vec<_>>() {
        if n.starts_with("fuse.") {
            set(&mut params, &n, Tensor::identity(8));
        }
    }
    let mut r = rng(6);
    let text = random_m(1, 8, 1.0, &mut r);
    let image = random_m(1, 8, 1.0, &mut r);
    for heads in [1, 2, 8] {
        let got = fused_by_crate(FusionKind::Sfm, &params, &text, &image, heads);
        assert!(max_diff(&got, &text.add(&image).v) < 1e-15);
    }
}

#[test]
fn sfm_on_identical_streams_doubles_one_branch() {
    let model = Model::new(small(FusionKind::Sfm, false)).unwrap();
    let mut params = jittered(&model, 7);
    for w in ["wq", "wk", "wv", "wo"] {
        let t = params.get(&format!("fuse.text.{w}")).unwrap().clone();
        set(&mut params, &format!("fuse.image.{w}"), t);
    }
    let x = random_m(3, 8, 1.0, &mut rng(8));
    let got = fused_by_crate(FusionKind::Sfm, &params, &x, &x, 2);
    let p = P(&params);
    let one = p.attend(&x, &x, "fuse.text", "fuse.text.wo", 2).mean_rows();
    let twice: Vec<f64> = one.iter().map(|v| 2.0 * v).collect();
    assert!(max_diff(&got, &twice) < 1e-14);
}

#[test]
fn merge_examples() {
    let model = Model::new(small(FusionKind::MergeAttention, false)).unwrap();
    let params = jittered(&model, 9);
    let zeros = M::zeros(3, 8);
    assert!(
        fused_by_crate(FusionKind::MergeAttention, &params, &zeros, &zeros, 2)
            .iter()
            .all(|&v| v == 0.0)
    );

    let x = random_m(1, 8, 1.0, &mut rng(10));
    let got = fused_by_crate(FusionKind::MergeAttention, &params, &x, &x, 2);
    let p = P(&params);
    let want = x.matmul(&p.m("fuse.wv")).matmul(&p.m("fuse.wo"));
    assert!(max_diff(&got, &want.v) < 1e-14);
}

fn mirrored(params: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        let swapped = if name.contains(".text") {
            name.replacen(".text", ".image", 1)
        } else if name.contains(".image") {
            name.replacen(".image", ".text", 1)
        } else {
            name.to_string()
        };
        out.insert(swapped, t.clone());
    }
    out
}

#[test]
fn co_attention_is_symmetric_under_mirrored_parameters() {
    let model = Model::new(small(FusionKind::CoAttention, false)).unwrap();
    let params = jittered(&model, 11);
    let mut r = rng(12);
    let text = random_m(3, 8, 1.0, &mut r);
    let image = random_m(3, 8, 1.0, &mut r);
    let a = fused_by_crate(FusionKind::CoAttention, &params, &text, &image, 2);
    let b = fused_by_crate(
        FusionKind::CoAttention,
        &mirrored(&params),
        &image,
        &text,
        2,
    );
    assert!(max_diff(&a, &b) < 1e-15);
}

#[test]
fn co_attention_with_zero_weights_is_the_norm_path() {
    let model = Model::new(small(FusionKind::CoAttention, false)).unwrap();
    let mut params = jittered(&model, 13);
    for n in params.names().map(str::to_string).collect::<Vec<_>>() {
        if n.starts_with("fuse.") && !n.contains(".ln_") {
            let shape = params.get(&n).unwrap().shape().to_vec();
            set(&mut params, &n, Tensor::zeros(&shape));
        }
    }
    let mut r = rng(14);
    let text = random_m(3, 8, 1.0, &mut r);
    let image = random_m(3, 8, 1.0, &mut r);
    let p = P(&params);
    let path = |x: &M, m: &str| {
        let x = p.ln(x, &format!("fuse.{m}.sa"));
        let x = p.ln(&x, &format!("fuse.{m}.ca"));
        p.ln(&x, &format!("fuse.{m}.ffn")).mean_rows()
    };
    let want: Vec<f64> = path(&text, "text")
        .iter()
        .zip(path(&image, "image"))
        .map(|(a, b)| a + b)
        .collect();
    let got = fused_by_crate(FusionKind::CoAttention, &params, &text, &image, 2);
    assert!(max_diff(&got, &want) < 1e-12);
    assert_eq!(
        got,
        fused_by_crate(FusionKind::CoAttention, &params, &text, &image, 2)
    );
}

#[test]
fn asym_with_zero_text_is_pooled_image_plus_a_constant() {
    let model = Model::new(small(FusionKind::AsymCoAttention, false)).unwrap();
    let params = jittered(&model, 15);
    let p = P(&params);
    let mut r = rng(16);
    let zeros = M::zeros(3, 8);
    let image = random_m(3, 8, 1.0, &mut r);
    // the text stream input is zero, so self-attention adds nothing and its norm emits the bias
    let st = p.ln(&zeros, "fuse.text.sa");
    let ca = p.attend(&st, &image, "fuse.text.ca", "fuse.text.ca.wo", 2);
    let ct = p.ln(&st.add(&ca), "fuse.text.ca");
    let stream = p.plain_ffn(&ct, "fuse.text.ffn").mean_rows();
    let want: Vec<f64> = stream
        .iter()
        .zip(image.mean_rows())
        .map(|(a, b)| a + b)
        .collect();
    let got = fused_by_crate(FusionKind::AsymCoAttention, &params, &zeros, &image, 2);
    assert!(max_diff(&got, &want) < 1e-12);
    let bias = p.vec("fuse.text.sa.ln_b");
    assert!(max_diff(st.row(0), &bias) < 1e-15);
}

#[test]
fn asym_is_the_co_attention_text_stream_without_the_image_stream() {
    let co = Model::new(small(FusionKind::CoAttention, false)).unwrap();
    let params = jittered(&co, 17);
    let mut r = rng(18);
    let text = random_m(3, 8, 1.0, &mut r);
    let image = random_m(3, 8, 1.0, &mut r);
    let asym = fused_by_crate(FusionKind::AsymCoAttention, &params, &text, &image, 2);
    let p = P(&params);
    let st = p.ln(
        &text.add(&p.attend(&text, &text, "fuse.text.sa", "fuse.text.sa.wo", 2)),
        "fuse.text.sa",
    );
    let ct = p.ln(
        &st.add(&p.attend(&st, &image, "fuse.text.ca", "fuse.text.ca.wo", 2)),
        "fuse.text.ca",
    );
    let stream = p.plain_ffn(&ct, "fuse.text.ffn").mean_rows();
    let want: Vec<f64> = stream
        .iter()
        .zip(image.mean_rows())
        .map(|(a, b)| a + b)
        .collect();
    assert!(max_diff(&asym, &want) < 1e-12);
}

#[test]
fn concat_order_matters() {
    let mut r = rng(19);
    let text = random_m(2, 4, 1.0, &mut r);
    let image = random_m(2, 4, 1.0, &mut r);
    let params = ParamSet::new();
    let ab = fused_by_crate(FusionKind::Concat, &params, &text, &image, 1);
    let ba = fused_by_crate(FusionKind::Concat, &params, &image, &text, 1);
    assert_eq!(ab[..4], ba[4..]);
    assert_eq!(ab[4..], ba[..4]);
    let zeros = M::zeros(2, 4);
    assert!(
        fused_by_crate(FusionKind::Concat, &params, &text, &zeros, 1)[4..]
            .iter()
            .all(|&v| v == 0.0)
    );
}

#[test]
fn gradients_through_every_head() {
    for kind in FusionKind::ALL {
        let model = Model::new(ModelVariant {
            width: 4,
            tokens: 2,
            hidden: Some(6),
            ..small(kind, false)
        })
        .unwrap();
        let params = jittered(&model, 20);
        let names: Vec<String> = params
            .names()
            .filter(|n| n.starts_with("fuse."))
            .map(str::to_string)
            .collect();
        let mut r = rng(21);
        let mut tensors: Vec<Tensor> = names
            .iter()
            .map(|n| params.get(n).unwrap().clone())
            .collect();
        tensors.push(random_m(2, 4, 1.0, &mut r).to_tensor());
        tensors.push(random_m(2, 4, 1.0, &mut r).to_tensor());
        let n = names.len();
        let err = gradient_check(
            |tape, vars| {
                let b = Bound::from_vars(&names, &vars[..n]);
                let f = fuse(kind, vars[n], vars[n + 1], &b, "fuse", 2)?;
                let w = tape.leaf(Tensor::vector(
                    (0..f.shape()[0]).map(|i| 0.3 + i as f64 * 0.1).collect(),
                )?);
                f.mul(f)?.mul(w)?.sum()
            },
            &tensors,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "{kind}: {err:e}");
    }
}

fn samples(n: usize, l: usize, d: usize, classes: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            Sample::new(
                random_m(l, d, 1.0, &mut r).to_tensor(),
                random_m(l, d, 1.0, &mut r).to_tensor(),
                i % classes,
            )
            .unwrap()
        })
        .collect()
}

fn oracle_probs(model: &Model, params: &ParamSet, s: &Sample) -> Vec<f64> {
    let v = &model.variant;
    let p = P(params);
    let mut t = M::from_tensor(s.text.tokens());
    let mut i = M::from_tensor(s.image.tokens());
    if v.use_sim {
        for layer in 0..v.depth {
            (t, i) = common::sim_layer(
                &p,
                &format!("sim{layer}"),
                &t,
                &i,
                v.heads,
                v.ffn_role == FfnRole::TextWise,
            );
        }
    }
    let fused = oracle_fuse(v.fusion, &p, &t, &i, v.heads);
    common::classifier(&p, &fused, v.classifier.len() + 1)
}

#[test]
fn forward_matches_oracle_for_every_variant() {
    let batch = samples(3, 3, 8, 3, 22);
    let refs: Vec<&Sample> = batch.iter().collect();
    for kind in FusionKind::ALL {
        for use_sim in [false, true] {
            for (role, depth) in [
                (FfnRole::TextWise, 1),
                (FfnRole::ImageWise, 1),
                (FfnRole::TextWise, 2),
            ] {
                if !use_sim && (role != FfnRole::TextWise || depth != 1) {
                    continue;
                }
                let model = Model::new(ModelVariant {
                    ffn_role: role,
                    depth,
                    ..small(kind, use_sim)
                })
                .unwrap();
                let params = jittered(&model, 23);
                let probs = model.forward(&params, &refs).unwrap();
                for (k, s) in batch.iter().enumerate() {
                    let want = oracle_probs(&model, &params, s);
                    assert!(
                        max_diff(probs.row(k), &want) < 1e-12,
                        "{kind} sim={use_sim} {role:?} depth={depth}"
                    );
                }
            }
        }
    }
}

#[test]
fn forward_shape_and_normalization() {
    let model = Model::new(ModelVariant {
        classes: 7,
        ..small(FusionKind::Sfm, true)
    })
    .unwrap();
    let params = model.init(24);
    let batch = samples(4, 3, 8, 7, 25);
    let refs: Vec<&Sample> = batch.iter().collect();
    let probs = model.forward(&params, &refs).unwrap();
    assert_eq!(probs.shape(), [4, 7]);
    for k in 0..4 {
        let row = probs.row(k);
        assert!(row.iter().all(|&p| p > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    assert!(model.forward(&params, &[]).is_err());
}

#[test]
fn forward_rejects_mismatched_extents() {
    let model = Model::new(small(FusionKind::Sfm, true)).unwrap();
    let params = model.init(26);
    let wrong = samples(1, 2, 8, 3, 27);
    assert!(model.forward(&params, &[&wrong[0]]).is_err());
}

/// Per-modality self-attention blocks followed by the concat classifier,
/// computed entirely in the oracle.
#[test]
fn degenerate_sim_with_concat_equals_independent_reference() {
    let mut model = Model::new(small(FusionKind::Concat, true)).unwrap();
    model.mask_override = Some(0.0);
    let mut params = jittered(&model, 28);
    params
        .get_mut("sim0.guided.w3")
        .unwrap()
        .data_mut()
        .fill(0.0);
    let p = P(&params);
    let batch = samples(3, 3, 8, 3, 29);
    let refs: Vec<&Sample> = batch.iter().collect();
    let probs = model.forward(&params, &refs).unwrap();
    for (k, s) in batch.iter().enumerate() {
        let block = |x: &M, m: &str, ffn: &str| {
            let pre = format!("sim0.{m}");
            let x = p.ln(&p.attend(x, x, &pre, "sim0.ws", 2).add(x), &pre);
            p.plain_ffn(&x, ffn)
        };
        let t = block(&M::from_tensor(s.text.tokens()), "text", "sim0.guided");
        let i = block(&M::from_tensor(s.image.tokens()), "image", "sim0.plain");
        let want = common::classifier(&p, &common::concat(&t, &i), 3);
        assert!(max_diff(probs.row(k), &want) <= 1e-9);
    }
}

#[test]
fn image_wise_role_mirrors_text_wise() {
    let tw = Model::new(small(FusionKind::Sfm, true)).unwrap();
    let iw = Model::new(small(FusionKind::Sfm, true).with_role(FfnRole::ImageWise)).unwrap();
    let params = jittered(&tw, 30);
    let swapped = mirrored(&params);
    let batch = samples(4, 3, 8, 3, 31);
    let flipped: Vec<Sample> = batch
        .iter()
        .map(|s| Sample::new(s.image.tokens().clone(), s.text.tokens().clone(), s.label).unwrap())
        .collect();

    for s in &batch {
        let tape = Tape::new();
        let (b, bs) = (params.bind(&tape), swapped.bind(&tape));
        let (t, i) = (
            tape.leaf(s.text.tokens().clone()),
            tape.leaf(s.image.tokens().clone()),
        );
        let (a_t, a_i) = tw.encode(&b, t, i).unwrap();
        let (b_t, b_i) = iw.encode(&bs, i, t).unwrap();
        assert_eq!(a_t.tensor(), b_i.tensor());
        assert_eq!(a_i.tensor(), b_t.tensor());
    }
    let p1 = tw
        .forward(&params, &batch.iter().collect::<Vec<_>>())
        .unwrap();
    let p2 = iw
        .forward(&swapped, &flipped.iter().collect::<Vec<_>>())
        .unwrap();
    assert!(p1.max_abs_diff(&p2) <= 1e-14);
}

fn closed_form_count(v: &ModelVariant) -> usize {
    let d = v.width;
    let dh = v.hidden.unwrap_or(4 * d);
    let norm = 2 * d;
    let ffn = d * dh + dh + dh * d + d + norm;
    let sim = 6 * d * d + 2 * d * d + 2 * norm + (ffn + d * dh) + ffn;
    let attn_block = 4 * d * d + norm;
    let stream = 2 * attn_block + ffn;
    let head = match v.fusion {
        FusionKind::Sfm => 8 * d * d,
        FusionKind::MergeAttention => 4 * d * d,
        FusionKind::CoAttention => 2 * stream,
        FusionKind::AsymCoAttention => stream,
        FusionKind::Concat => 0,
    };
    let mut widths = vec![v.fusion.output_width(d)];
    widths.extend(&v.classifier);
    widths.push(v.classes);
    let cls: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let layers = if v.use_sim { v.depth } else { 0 };
    layers * sim + head + cls
}

#[test]
fn parameter_count_has_a_closed_form() {
    for kind in FusionKind::ALL {
        for (use_sim, depth) in [(false, 1), (true, 1), (true, 3)] {
            for v in [
                ModelVariant {
                    use_sim,
                    depth,
                    fusion: kind,
                    ..ModelVariant::default()
                },
                ModelVariant {
                    use_sim,
                    depth,
                    ..small(kind, use_sim)
                },
            ] {
                let model = Model::new(v.clone()).unwrap();
                assert_eq!(model.init(0).scalar_count(), closed_form_count(&v), "{v:?}");
            }
        }
    }
    // the full default variant at d = 64
    let d = 64;
    let dh = 256;
    let sim = 8 * d * d + 4 * d + 3 * d * dh + dh + d + 2 * d + 2 * d * dh + dh + d + 2 * d;
    let cls = 64 * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64 + 64 * 32 + 32 + 32 * 7 + 7;
    assert_eq!(
        Model::new(ModelVariant::full())
            .unwrap()
            .init(0)
            .scalar_count(),
        sim + 8 * d * d + cls
    );
}

#[test]
fn end_to_end_gradient_check() {
    let variant = ModelVariant {
        width: 8,
        tokens: 2,
        heads: 2,
        ..ModelVariant::full()
    };
    let model = Model::new(variant).unwrap();
    let params = jittered(&model, 32);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let batch = samples(2, 2, 8, 7, 33);
    let refs: Vec<&Sample> = batch.iter().collect();
    let err = gradient_check(
        |_, vars| model.batch_loss(&Bound::from_vars(&names, vars), &refs),
        &tensors,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn heads_are_token_order_invariant(seed in 0u64..500, pt in Just(vec![0usize, 1, 2]).prop_shuffle(), pi in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let mut r = rng(seed);
        let text = random_m(3, 8, 1.0, &mut r);
        let image = random_m(3, 8, 1.0, &mut r);
        let perm = |m: &M, p: &[usize]| M::vcat(&p.iter().map(|&k| M::new(1, m.c, m.row(k).to_vec())).collect::<Vec<_>>());
        for kind in FusionKind::ALL {
            let model = Model::new(small(kind, false)).unwrap();
            let params = jittered(&model, seed);
            let a = fused_by_crate(kind, &params, &text, &image, 2);
            let b = fused_by_crate(kind, &params, &perm(&text, &pt), &perm(&image, &pi), 2);
            prop_assert!(max_diff(&a, &b) < 1e-12, "{}", kind);
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..10_000, kind in 0usize..5, use_sim: bool) {
        let variant = small(FusionKind::ALL[kind], use_sim);
        let model = Model::new(variant.clone()).unwrap();
        let params = jittered(&model, seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::new(&variant, &params).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        prop_assert_eq!(&back.variant, &variant);
        let restored = back.params().unwrap();
        prop_assert_eq!(restored.len(), params.len());
        for ((n1, t1), (n2, t2)) in params.iter().zip(restored.iter()) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            let same = t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }

    #[test]
    fn loss_is_non_negative(seed in 0u64..500) {
        let model = Model::new(small(FusionKind::Sfm, true)).unwrap();
        let params = jittered(&model, seed);
        let batch = samples(3, 3, 8, 3, seed);
        let refs: Vec<&Sample> = batch.iter().collect();
        let tape = Tape::new();
        let loss = model.batch_loss(&params.bind(&tape), &refs).unwrap().tensor().data()[0];
        prop_assert!(loss > 0.0 && loss.is_finite());
    }
}
