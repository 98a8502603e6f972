use icafusion::cfe::{attention_maps, cfe_forward, cross_attention, CfeParams};
use icafusion::complexity::{attention_cost, shrink_reduction, CostExpr, Variant};
use icafusion::io::{decode_weights, encode_weights};
use icafusion::ops::{bilinear_resize, matmul, pool2d, softmax_rows, PoolKind};
use icafusion::sfs::{shrink_pool, MixedPoolParam};
use icafusion::tokens::{detokenize, tokenize, PositionalEmbedding, TokenSeq};
use icafusion::{dmff::DmffConfig, dmff::DmffWeights, Parameters, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Vec<usize>, bound: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-bound..bound, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

/// A feature map whose extents are multiples of `s`.
fn pooled_map() -> impl Strategy<Value = (Tensor<f64>, usize)> {
    (1usize..=3, 1usize..=3, 1usize..=3, 1usize..=3).prop_flat_map(|(hb, wb, c, s)| {
        tensor(vec![hb * s, wb * s, c], 10.0).prop_map(move |t| (t, s))
    })
}

/// Row `i` of the result is row `perm[i]` of `m`.
fn permute_rows(m: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (_, c) = m.dims2().unwrap();
    let mut out = m.clone();
    for (dst, &src) in perm.iter().enumerate() {
        for j in 0..c {
            out.set(&[dst, j], m.get(&[src, j]));
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(m, k, n, p)| {
            (tensor(vec![m, k], 2.0), tensor(vec![k, n], 2.0), tensor(vec![n, p], 2.0))
        })
    ) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn softmax_rows_are_distributions_even_for_extreme_logits(
        m in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| tensor(vec![r, c], 1e4))
    ) {
        let p = softmax_rows(&m).unwrap();
        let (rows, cols) = p.dims2().unwrap();
        for r in 0..rows {
            let row: Vec<f64> = (0..cols).map(|c| p.get(&[r, c])).collect();
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn max_pool_dominates_avg_pool((map, s) in pooled_map()) {
        let (avg, _) = pool2d(&map, s, PoolKind::Avg).unwrap();
        let (max, _) = pool2d(&map, s, PoolKind::Max).unwrap();
        for (a, m) in avg.data().iter().zip(max.data()) {
            prop_assert!(m + 1e-12 >= *a);
        }
    }

    #[test]
    fn mixed_pool_lies_between_avg_and_max((map, s) in pooled_map(), raw in -30.0f64..30.0) {
        let (avg, _) = pool2d(&map, s, PoolKind::Avg).unwrap();
        let (max, _) = pool2d(&map, s, PoolKind::Max).unwrap();
        let mixed = shrink_pool(&map, s, &MixedPoolParam::with_raw(raw)).unwrap();
        for ((a, m), x) in avg.data().iter().zip(max.data()).zip(mixed.data()) {
            prop_assert!(*x >= a - 1e-12 && *x <= m + 1e-12);
        }
    }

    #[test]
    fn bilinear_output_stays_within_input_range(
        map in (1usize..6, 1usize..6, 1usize..3).prop_flat_map(|(h, w, c)| tensor(vec![h, w, c], 5.0)),
        ho in 1usize..12,
        wo in 1usize..12,
    ) {
        let out = bilinear_resize(&map, ho, wo).unwrap();
        prop_assert_eq!(out.shape(), &[ho, wo, map.shape()[2]][..]);
        prop_assert!(out.min() >= map.min() - 1e-12);
        prop_assert!(out.max() <= map.max() + 1e-12);
    }

    #[test]
    fn tokenize_round_trip_is_bit_exact(
        map in (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(h, w, c)| tensor(vec![h, w, c], 1e3))
    ) {
        let back = detokenize(&tokenize(&map, None).unwrap()).unwrap();
        prop_assert_eq!(back, map);
    }

    #[test]
    fn positional_embedding_add_then_subtract_restores_tokens(
        (map, table) in (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(h, w, c)| {
            (tensor(vec![h, w, c], 1.0), tensor(vec![h * w, c], 0.02))
        })
    ) {
        let pe = PositionalEmbedding { table: table.clone() };
        let with_pe = tokenize(&map, Some(&pe)).unwrap();
        let plain = tokenize(&map, None).unwrap();
        let restored = with_pe.tokens.sub(&table).unwrap();
        prop_assert!(restored.max_abs_diff(&plain.tokens) < 1e-15);
    }

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), t in 1usize..7, heads in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 2 * heads;
        let p = CfeParams::<f64>::random(c, 4, heads, &mut rng).unwrap();
        let q = TokenSeq::new(Tensor::uniform(&[t, c], 3.0, &mut rng), t, 1).unwrap();
        let kv = TokenSeq::new(Tensor::uniform(&[t, c], 3.0, &mut rng), t, 1).unwrap();
        for m in attention_maps(&q, &kv, &p).unwrap() {
            for r in 0..t {
                let s: f64 = (0..t).map(|j| m.get(&[r, j])).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_ignores_key_value_order(
        seed in any::<u64>(),
        perm in (2usize..7).prop_flat_map(|t| Just((0..t).collect::<Vec<_>>()).prop_shuffle()),
        t_q in 1usize..5,
    ) {
        let t = perm.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = CfeParams::<f64>::random(4, 8, 2, &mut rng).unwrap();
        let q = TokenSeq::new(Tensor::uniform(&[t_q, 4], 1.0, &mut rng), t_q, 1).unwrap();
        let kv = Tensor::<f64>::uniform(&[t, 4], 1.0, &mut rng);
        let shuffled = permute_rows(&kv, &perm);
        let z = cross_attention(&q, &TokenSeq::new(kv, t, 1).unwrap(), &p).unwrap();
        let z_perm = cross_attention(&q, &TokenSeq::new(shuffled, t, 1).unwrap(), &p).unwrap();
        prop_assert!(z.max_abs_diff(&z_perm) < 1e-9);
    }

    #[test]
    fn attention_rows_follow_query_order(
        seed in any::<u64>(),
        perm in (2usize..7).prop_flat_map(|t| Just((0..t).collect::<Vec<_>>()).prop_shuffle()),
    ) {
        let t = perm.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = CfeParams::<f64>::random(4, 8, 2, &mut rng).unwrap();
        let q = Tensor::<f64>::uniform(&[t, 4], 1.0, &mut rng);
        let kv = TokenSeq::new(Tensor::uniform(&[3, 4], 1.0, &mut rng), 3, 1).unwrap();
        let z = cross_attention(&TokenSeq::new(q.clone(), t, 1).unwrap(), &kv, &p).unwrap();
        let z_perm = cross_attention(&TokenSeq::new(permute_rows(&q, &perm), t, 1).unwrap(), &kv, &p).unwrap();
        prop_assert!(permute_rows(&z, &perm).max_abs_diff(&z_perm) < 1e-12);
    }

    #[test]
    fn enhancement_without_residual_ignores_key_value_order(
        seed in any::<u64>(),
        perm in (2usize..7).prop_flat_map(|t| Just((0..t).collect::<Vec<_>>()).prop_shuffle()),
    ) {
        let t = perm.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = CfeParams::<f64>::random(4, 8, 2, &mut rng).unwrap();
        p.set_coefficients(1.0, 0.0, 1.0, 1.0);
        let target = Tensor::<f64>::uniform(&[t, 4], 1.0, &mut rng);
        let aux = TokenSeq::new(Tensor::uniform(&[t, 4], 1.0, &mut rng), t, 1).unwrap();
        let base = cfe_forward(&TokenSeq::new(target.clone(), t, 1).unwrap(), &aux, &p).unwrap();
        let shuffled = TokenSeq::new(permute_rows(&target, &perm), t, 1).unwrap();
        let out = cfe_forward(&shuffled, &aux, &p).unwrap();
        prop_assert!(out.tokens.max_abs_diff(&base.tokens) < 1e-9);
    }

    #[test]
    fn ours_attention_is_half_of_cft(t in 1u64..500, c in 1u64..256) {
        let ours = attention_cost(Variant::Ours, t, c).unwrap().total().eval(t, c);
        let cft = attention_cost(Variant::Cft, t, c).unwrap().total().eval(t, c);
        prop_assert_eq!(2 * ours, cft);
    }

    #[test]
    fn shrink_scales_attention_by_square_and_linear_by_factor(
        wh in 1u64..16, s_pow in 0u32..4, c in 1u64..64
    ) {
        let s = 1u64 << s_pow;
        let (w, h) = (wh * s, 1);
        let r = shrink_reduction(w, h, c, s).unwrap();
        prop_assert_eq!(r.before.coefficient(0, 1), s * s * r.after.coefficient(0, 1));
        prop_assert_eq!(r.before.coefficient(0, 2), s * r.after.coefficient(0, 2));
    }

    #[test]
    fn cost_eval_is_additive(a in 0u64..100, b in 0u64..100, t in 0u64..1000, c in 0u64..1000) {
        let x = CostExpr::monomial(a, 2, 1);
        let y = CostExpr::monomial(b, 1, 2);
        prop_assert_eq!(x.add(&y).eval(t, c), x.eval(t, c) + y.eval(t, c));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn weight_files_round_trip_arbitrary_values(seed in any::<u64>(), scale in -1e30f32..1e30) {
        let cfg = DmffConfig { channels: 4, heads: 2, ffn_hidden: 4, ..Default::default() };
        let mut w = DmffWeights::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        w.visit_mut("", &mut |_, _, t| {
            for v in t.data_mut() {
                *v *= scale;
            }
        });
        let back = decode_weights::<f32>(&encode_weights(&cfg, &w).unwrap()).unwrap().weights().unwrap();
        for ((_, _, a), (_, _, b)) in w.named_tensors().iter().zip(back.named_tensors()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(&b));
        }
    }
}
