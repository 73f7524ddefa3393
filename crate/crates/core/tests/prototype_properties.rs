use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rspu_core::rspu::{form_prototypes, rspu_forward, BankVars};
use rspu_core::{Graph, Tensor};

struct Instance {
    c: usize,
    m: usize,
    x: Tensor,
    a: Tensor,
    b: Tensor,
}

fn instance(seed: u64, h: usize, w: usize, c: usize, m: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |shape: &[usize], span: f64| Tensor::from_fn(shape, |_| rng.random_range(-span..span)).unwrap();
    Instance {
        c,
        m,
        x: fill(&[h, w, c], 2.0),
        a: fill(&[c, m], 1.0),
        b: fill(&[m], 1.0),
    }
}

struct Forward {
    weights: Tensor,
    prototypes: Tensor,
    relevance: Tensor,
    fused: Tensor,
}

fn forward(x: &Tensor, a: &Tensor, b: &Tensor) -> Forward {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let bank = BankVars {
        weights: g.constant(a.clone()),
        bias: g.constant(b.clone()),
    };
    let out = rspu_forward(&mut g, xv, bank).unwrap();
    Forward {
        weights: g.value(out.weights).clone(),
        prototypes: g.value(out.prototypes).clone(),
        relevance: g.value(out.relevance).clone(),
        fused: g.value(out.fused).clone(),
    }
}

fn dims() -> impl Strategy<Value = (u64, usize, usize, usize, usize)> {
    (any::<u64>(), 1usize..=4, 1usize..=4, 1usize..=4, 2usize..=4)
}

/// Moves pixel `k` to position `perm[k]` of a `[K, n]` row-major buffer.
fn permute_rows(t: &Tensor, perm: &[usize], shape: &[usize]) -> Tensor {
    let n = t.len() / perm.len();
    let mut out = vec![0.0; t.len()];
    for (k, &to) in perm.iter().enumerate() {
        out[to * n..][..n].copy_from_slice(&t.data()[k * n..][..n]);
    }
    Tensor::new(shape, out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn prototypes_lie_in_the_hull_of_the_encoding((seed, h, w, c, m) in dims()) {
        let inst = instance(seed, h, w, c, m);
        let f = forward(&inst.x, &inst.a, &inst.b);
        for mi in 0..inst.m {
            for ci in 0..inst.c {
                let column = (0..h * w).map(|k| inst.x.data()[k * c + ci]);
                let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), v| (l.min(v), u.max(v)));
                let p = f.prototypes.data()[mi * c + ci];
                prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn relevance_rows_are_distributions((seed, h, w, c, m) in dims()) {
        let inst = instance(seed, h, w, c, m);
        let f = forward(&inst.x, &inst.a, &inst.b);
        for row in f.relevance.data().chunks(m) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn pixel_permutations_commute_with_the_unit((seed, h, w, c, m) in dims(), shift in 0usize..16) {
        let inst = instance(seed, h, w, c, m);
        let k = h * w;
        let perm: Vec<usize> = (0..k).map(|i| (i * 5 + shift) % k).collect();
        let mut seen = vec![false; k];
        perm.iter().for_each(|&p| seen[p] = true);
        prop_assume!(seen.iter().all(|&s| s));

        let base = forward(&inst.x, &inst.a, &inst.b);
        let moved = forward(&permute_rows(&inst.x, &perm, &[h, w, c]), &inst.a, &inst.b);
        prop_assert!(moved.prototypes.max_abs_diff(&base.prototypes).unwrap() <= 1e-12);
        let expect_fused = permute_rows(&base.fused, &perm, &[h, w, c]);
        prop_assert!(moved.fused.max_abs_diff(&expect_fused).unwrap() <= 1e-12);
        let expect_weights = permute_rows(&base.weights, &perm, &[h, w, m]);
        prop_assert!(moved.weights.max_abs_diff(&expect_weights).unwrap() <= 1e-12);
    }

    #[test]
    fn prototypes_ignore_attention_scale((seed, h, w, c, m) in dims(), scale in 0.01f64..100.0) {
        let inst = instance(seed, h, w, c, m);
        let f = forward(&inst.x, &inst.a, &inst.b);
        let scaled = Tensor::new(f.weights.shape(), f.weights.data().iter().map(|v| v * scale).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(inst.x.clone());
        let wv = g.constant(scaled);
        let p = form_prototypes(&mut g, xv, wv).unwrap();
        let diff = g.value(p).max_abs_diff(&f.prototypes).unwrap();
        prop_assert!(diff <= 1e-12 * (1.0 + inst.x.data().iter().fold(0.0f64, |a, v| a.max(v.abs()))));
    }
}
