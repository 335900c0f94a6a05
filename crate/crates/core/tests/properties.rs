use std::sync::Arc;

use crossmpt_core::channel::{self, CodewordPolicy, NoiseSpec};
use crossmpt_core::gf2::{systematic_form, BinaryMatrix};
use crossmpt_core::mask::build_crossmpt_masks;
use crossmpt_core::model::{Batch, CodeContext, CodeDims, Model, ModelConfig, Variant};
use crossmpt_core::{bp_decode, registry, BpConfig, Code, CodeClass, Graph, TannerGraph, Tensor};
use proptest::prelude::*;

/// Random `m x n` matrices with no empty row or column.
fn toy_pcm() -> impl Strategy<Value = BinaryMatrix> {
    (2usize..6, 4usize..10).prop_flat_map(|(m, n)| {
        proptest::collection::vec(proptest::collection::vec(0u8..2, n), m).prop_map(move |mut rows| {
            for (r, row) in rows.iter_mut().enumerate() {
                row[r % n] = 1;
            }
            for c in 0..n {
                rows[c % m][c] = 1;
            }
            BinaryMatrix::from_rows(&rows).unwrap()
        })
    })
}

fn full_rank_code(h: BinaryMatrix) -> Option<Code> {
    let r = h.rank();
    if r == 0 || r >= h.cols() {
        return None;
    }
    Code::from_pcm("toy", h, CodeClass::Other, false, None).ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masked_softmax_is_exactly_local(h in toy_pcm(), seed in 0u64..1000) {
        let masks = build_crossmpt_masks(&h);
        for mask in [masks.bit_to_check, masks.check_to_bit] {
            let (r, c) = (mask.rows(), mask.cols());
            let mut rng = channel::stream_rng(seed, 0);
            use rand::Rng;
            let scores = Tensor::from_fn([2, r, c], |_, _, _| rng.random_range(-4.0..4.0));
            let mut g = Graph::new();
            let x = g.input(scores);
            let p = g.masked_softmax(x, Arc::new(mask.clone())).unwrap();
            let flat = g.reshape(p, [1, 1, 2 * r * c]).unwrap();
            let target: Vec<u8> = (0..2 * r * c).map(|i| (i % 3 == 0) as u8).collect();
            let loss = g.flip_loss(flat, &target, 1.0).unwrap();
            g.backward(loss).unwrap();
            let probs = g.value(p).clone();
            let grad = g.grad(x).unwrap();
            for b in 0..2 {
                for i in 0..r {
                    let mut sum = 0.0;
                    for j in 0..c {
                        let v = probs.get(b, i, j);
                        if mask.is_allowed(i, j) {
                            sum += v;
                        } else {
                            prop_assert_eq!(v.to_bits(), 0u64);
                            prop_assert_eq!(grad[(b * r + i) * c + j].to_bits(), 0u64);
                        }
                    }
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn systematic_form_keeps_row_space(h in toy_pcm()) {
        let Some(code) = full_rank_code(h) else { return Ok(()) };
        let sys = systematic_form(code.pcm(), code.redundancy()).unwrap();
        code.check_equivalent(&sys.matrix).unwrap();
        prop_assert_eq!(sys.matrix.vstack(code.pcm()).unwrap().rank(), code.redundancy());
    }

    #[test]
    fn encoded_words_have_zero_syndrome(h in toy_pcm(), bits in proptest::collection::vec(0u8..2, 10)) {
        let Some(code) = full_rank_code(h) else { return Ok(()) };
        let x = code.encode(&bits[..code.k().min(bits.len())].iter().copied().chain(std::iter::repeat(0)).take(code.k()).collect::<Vec<_>>());
        prop_assert!(code.is_codeword(&x));
    }

    #[test]
    fn bp_output_moves_with_the_codeword(seed in 0u64..500) {
        let code = registry::load("bch_31_16").unwrap();
        let g = TannerGraph::new(code.pcm());
        let spec = NoiseSpec::fixed(2.0, code.rate(), seed).unwrap();
        let base = channel::sample(&code, &spec, CodewordPolicy::AllZero, 0);
        let mut rng = channel::stream_rng(seed, 1);
        let c = channel::random_codeword(&code, &mut rng);
        let moved = channel::make_invariance_pair(&code, &base, &c).unwrap();
        let cfg = BpConfig::sum_product(15);
        let a = bp_decode(&channel::llr(&base.y, 0.8), &g, &cfg);
        let b = bp_decode(&channel::llr(&moved.y, 0.8), &g, &cfg);
        let shifted: Vec<u8> = a.x_hat.iter().zip(&c).map(|(x, y)| x ^ y).collect();
        prop_assert_eq!(b.x_hat, shifted);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn decoder_inputs_and_logits_are_codeword_invariant(seed in 0u64..10_000, variant in 0usize..3) {
        let code = registry::load("bch_31_16").unwrap();
        let v = [Variant::CrossMpt, Variant::Ecct, Variant::FCrossMpt][variant];
        let model = Model::init(ModelConfig::new(v, 1, 16), Some(CodeDims::of(&code)), seed).unwrap();
        let ctx = CodeContext::new(&code).unwrap();
        let spec = NoiseSpec::fixed(3.0, code.rate(), seed).unwrap();
        let base = channel::sample(&code, &spec, CodewordPolicy::AllZero, 0);
        let run = |s: &channel::ChannelSample| {
            let f = model.forward(&ctx, &Batch::from_samples(std::slice::from_ref(s))).unwrap();
            f.logits().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        let want = run(&base);
        let mut rng = channel::stream_rng(seed, 9);
        for _ in 0..3 {
            let c = channel::random_codeword(&code, &mut rng);
            let s = channel::make_invariance_pair(&code, &base, &c).unwrap();
            prop_assert_eq!(&s.mag, &base.mag);
            prop_assert_eq!(&s.syndromes, &base.syndromes);
            prop_assert_eq!(run(&s), want.clone());
        }
    }
}
