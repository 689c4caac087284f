use std::collections::BTreeSet;

use kaa_cal::cal::{
    annotate_and_move, baseline_kcenter, baseline_random, select_by_consistency, AnnotationRequest, EmbeddingSet,
    LabeledItem, Oracle, PoolItem, Pools,
};
use kaa_cal::kaa::{index_map, index_unmap, stability_alpha, LrConfig};
use kaa_cal::objectives::pari_beta;
use proptest::prelude::*;

struct Zeros(usize);

impl Oracle for Zeros {
    fn annotate(&mut self, request: &AnnotationRequest) -> kaa_cal::Result<Vec<Vec<i32>>> {
        Ok(request.ids.iter().map(|_| vec![0; self.0]).collect())
    }
}

fn points(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec((-5i32..=5).prop_map(|x| x as f32), dim), n)
}

proptest! {
    #[test]
    fn pools_conserve_items(
        sources in prop::collection::vec(0usize..4, 1..60),
        budgets in prop::collection::vec(0usize..10, 1..6),
        seed in any::<u64>(),
    ) {
        let unlabeled: Vec<PoolItem> = sources.iter().enumerate().map(|(i, &s)| PoolItem { id: 3 * i as u64 + 1, source: s }).collect();
        let test = vec![LabeledItem { id: 0, labels: vec![0, 0] }];
        let mut pools = Pools::new(test, unlabeled).unwrap();
        let mut taken = BTreeSet::new();
        for (it, &b) in budgets.iter().enumerate() {
            let b = b.min(pools.unlabeled().len());
            let batch = baseline_random(pools.unlabeled(), b, seed, it as u64 + 1).unwrap();
            prop_assert_eq!(batch.len(), b);
            for id in batch.ids() {
                prop_assert!(taken.insert(id));
            }
            annotate_and_move(&batch, &mut Zeros(2), &mut pools, &[2, 2], it + 1, None).unwrap();
            pools.check().unwrap();
        }
        let labeled: BTreeSet<u64> = pools.labeled().iter().map(|l| l.id).collect();
        prop_assert_eq!(labeled, taken);
        prop_assert_eq!(pools.labeled().len() + pools.unlabeled().len(), sources.len());
    }

    #[test]
    fn random_baseline_is_proportional(
        sources in prop::collection::vec(0usize..5, 1..80),
        frac in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let pool: Vec<PoolItem> = sources.iter().enumerate().map(|(i, &s)| PoolItem { id: i as u64, source: s }).collect();
        let b = (frac * pool.len() as f64) as usize;
        let batch = baseline_random(&pool, b, seed, 1).unwrap();
        for s in 0..5 {
            let have = pool.iter().filter(|p| p.source == s).count();
            let got = batch.ids().iter().filter(|&&id| pool[id as usize].source == s).count();
            let share = b as f64 * have as f64 / pool.len() as f64;
            prop_assert!(got as f64 >= share.floor() && got as f64 <= share.ceil());
        }
    }

    #[test]
    fn consistency_selection_is_well_formed_and_translation_invariant(
        (test, pool, b) in (1usize..12, 1usize..15, 1usize..4).prop_flat_map(|(nt, np, d)| {
            (points(nt, d), points(np, d), 0..=np)
        }),
        shift in prop::collection::vec(-3i32..=3, 3),
    ) {
        let tids: Vec<u64> = (0..test.len() as u64).collect();
        let pids: Vec<u64> = (100..100 + pool.len() as u64).collect();
        let select = |t: &[Vec<f32>], p: &[Vec<f32>]| {
            let ts = EmbeddingSet::new(&tids, t.iter().map(Vec::as_slice).collect()).unwrap();
            let ps = EmbeddingSet::new(&pids, p.iter().map(Vec::as_slice).collect()).unwrap();
            select_by_consistency(&ts, &ps, b).unwrap()
        };
        let batch = select(&test, &pool);
        let ids = batch.ids();
        prop_assert_eq!(ids.len(), b);
        prop_assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), b);
        prop_assert!(ids.iter().all(|id| pids.contains(id)));
        let scores: Vec<f64> = batch.items.iter().map(|s| s.score.unwrap()).collect();
        prop_assert!(scores.iter().all(|&s| s <= 0.0));
        prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));

        let moved = |rows: &[Vec<f32>]| -> Vec<Vec<f32>> {
            rows.iter().map(|r| r.iter().zip(&shift).map(|(&x, &s)| x + s as f32).collect()).collect()
        };
        prop_assert_eq!(select(&moved(&test), &moved(&pool)).ids(), ids);
    }

    #[test]
    fn kcenter_picks_distinct_items(
        (pool, centers, b) in (1usize..15, 1usize..6, 1usize..4).prop_flat_map(|(np, nc, d)| {
            (points(np, d), points(nc, d), 0..=np)
        }),
    ) {
        let pids: Vec<u64> = (0..pool.len() as u64).collect();
        let ps = EmbeddingSet::new(&pids, pool.iter().map(Vec::as_slice).collect()).unwrap();
        let crefs: Vec<&[f32]> = centers.iter().map(Vec::as_slice).collect();
        let ids = baseline_kcenter(&ps, &crefs, b).unwrap().ids();
        prop_assert_eq!(ids.len(), b);
        prop_assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), b);
    }

    #[test]
    fn alpha_is_bounded_and_nondecreasing(total in 1u64..500) {
        let mut prev = 0.0;
        for t in 0..=total {
            let a = stability_alpha(t, total).unwrap();
            prop_assert!((0.9..=1.0).contains(&a));
            prop_assert!(a >= prev);
            prev = a;
        }
    }

    #[test]
    fn beta_decreases_in_confidence(p in 0.0f64..=1.0, q in 0.0f64..=1.0, psi in 0.5f64..8.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let (bl, bh) = (pari_beta(lo, psi).unwrap(), pari_beta(hi, psi).unwrap());
        prop_assert!((0.0..=1.0).contains(&bl) && (0.0..=1.0).contains(&bh));
        prop_assert!(bl >= bh);
    }

    #[test]
    fn lr_stays_within_endpoints(total in 10u64..2000, frac in 0.0f64..=1.0) {
        let cfg = LrConfig::kaa();
        let s = cfg.schedule(total).unwrap();
        let lr = s.lr_at((frac * total as f64) as u64).unwrap();
        prop_assert!(lr >= cfg.start.min(cfg.end) && lr <= cfg.peak);
    }

    #[test]
    fn index_round_trip(i in 1u64..u32::MAX as u64, m_total in 1usize..16) {
        let (t, m) = index_map(i, m_total).unwrap();
        prop_assert!((1..=m_total).contains(&m));
        prop_assert_eq!(index_unmap(t, m, m_total).unwrap(), i);
    }
}
