use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tristream::attention::sdpa;
use tristream::block::Variant;
use tristream::cache::StaticCache;
use tristream::cost::{analytic_block_macs, block_cost, CostDims, Meter, SWEEP_VARIANTS};
use tristream::denoise::{
    draw_drops, sample, toy_cases, CondInput, DropoutPolicy, ModelConfig, ModelParams, SamplerConfig,
};
use tristream::linalg::Matrix;
use tristream::tokens::LabelGrid;

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

fn small_params(v: Variant, side: usize, seed: u64) -> ModelParams<f64> {
    let cfg = ModelConfig {
        d: 8,
        heads: 2,
        depth: 2,
        grid: (side, side),
        variant: v,
        lora_rank: 2,
        ..ModelConfig::default()
    };
    let mut p = ModelParams::init(cfg, seed).unwrap();
    p.perturb(0.1, seed + 1);
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_of_constant_values_is_constant(
        q in prop::collection::vec(-3.0f64..3.0, 12),
        k in prop::collection::vec(-3.0f64..3.0, 20),
        c in -5.0f64..5.0,
    ) {
        let q = Matrix::from_vec(3, 4, q);
        let k = Matrix::from_vec(5, 4, k);
        let v = Matrix::filled(5, 4, c);
        let o = sdpa(&q, &k, &v, 2, &Meter::off()).unwrap();
        for x in o.as_slice() {
            prop_assert!((x - c).abs() < 1e-12);
        }
    }

    #[test]
    fn cache_is_invisible(v in variant(), seed in 0u64..1000, steps in 1usize..5) {
        let p = small_params(v, 2, seed);
        let case = toy_cases(1, 2, seed).remove(0);
        let cond = p.embed_conditions(&case.cond(), p.null_style(&DropoutPolicy::default())).unwrap();
        let cfg = SamplerConfig { steps, seed, variant: v, use_cache: true };
        let cache = StaticCache::new();
        let on = sample(&p, &cond, &cfg, &cache, &Meter::off()).unwrap();
        let off = sample(&p, &cond, &SamplerConfig { use_cache: false, ..cfg }, &StaticCache::new(), &Meter::off()).unwrap();
        prop_assert!(on.bitwise_eq(&off));
        let stats = cache.stats();
        let blocks = if v.is_decoupled() { 2 } else { 0 };
        prop_assert_eq!(stats.misses, blocks);
        prop_assert_eq!(stats.hits, blocks * (steps as u64 - 1));
    }

    #[test]
    fn static_cost_is_paid_once(
        v in prop::sample::select(SWEEP_VARIANTS.to_vec()), n in 1u64..5000, l in 0u64..600, t in 1u64..60, depth in 0u64..30,
    ) {
        let dims = CostDims { n, l, t, d: 64, heads: 4, depth };
        let r = analytic_block_macs(v, dims).unwrap();
        let b = block_cost(v, n, l, 64).unwrap();
        prop_assert_eq!(r.total_macs, depth as u128 * (t as u128 * b.dynamic_total() + b.static_total()));
        prop_assert_eq!(*r.cumulative_total.last().unwrap(), r.total_macs);
        prop_assert!(r.cumulative_total.windows(2).all(|w| w[0] <= w[1]));
    }

    // with a single step the decoupled static pass is not amortized
    #[test]
    fn holistic_costs_the_most(l in 0u64..600, extra in 0u64..5000, t in 2u64..60) {
        let n = l + extra + 1;
        let dims = CostDims { n, l, t, d: 64, heads: 4, depth: 1 };
        let b = analytic_block_macs(Variant::Holistic, dims).unwrap().total_macs;
        for v in [Variant::Vanilla, Variant::HardDecoupled, Variant::Decoupled] {
            prop_assert!(analytic_block_macs(v, dims).unwrap().total_macs <= b);
        }
    }

    #[test]
    fn dropout_rate_is_bounded(p in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let drops = (0..400).map(|_| draw_drops(p, &mut rng)).collect::<Vec<_>>();
        let text = drops.iter().filter(|e| e.text).count() as f64 / 400.0;
        prop_assert!((text - p).abs() < 0.11);
        if p == 0.0 {
            prop_assert!(drops.iter().all(|e| !e.text && !e.mask));
        }
    }

    #[test]
    fn label_grid_csv_round_trip(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let labels = (0..h * w).map(|i| ((seed >> (i % 60)) % 4) as u32).collect();
        let g = LabelGrid::new(h, w, labels).unwrap();
        prop_assert_eq!(LabelGrid::parse_csv(&g.to_csv()).unwrap(), g);
    }
}

#[test]
fn checkpoint_survives_disk_for_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    for v in Variant::ALL {
        let p = small_params(v, 2, 3);
        let path = dir.path().join(v.code());
        p.save(&path).unwrap();
        let q = ModelParams::<f64>::load(&path).unwrap();
        assert_eq!(q.cfg.variant, v);
        let f = p.cast::<f32>().cast::<f64>();
        assert_eq!(q.weight_digest(), f.weight_digest());
    }
}

#[test]
fn dropped_conditions_change_the_sample() {
    let p = small_params(Variant::Decoupled, 2, 5);
    let case = toy_cases(1, 2, 5).remove(0);
    let null = p.null_style(&DropoutPolicy::default());
    let cfg = SamplerConfig { steps: 3, seed: 5, variant: Variant::Decoupled, use_cache: true };
    let run = |c: CondInput| {
        let cond = p.embed_conditions(&c, null).unwrap();
        sample(&p, &cond, &cfg, &StaticCache::new(), &Meter::off()).unwrap()
    };
    let full = run(case.cond());
    let no_mask = run(CondInput { mask: None, ..case.cond() });
    let no_text = run(CondInput { text: None, ..case.cond() });
    assert!(!full.bitwise_eq(&no_mask));
    assert!(!full.bitwise_eq(&no_text));
}
