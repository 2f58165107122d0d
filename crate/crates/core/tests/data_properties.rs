use fuxi_mme::data::{self, Event, IngestOptions, InteractionStore, SequenceBatch, UserHistory};
use fuxi_mme::embedding::PAD as PAD_ITEM;
use fuxi_mme::seed;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn store_strategy() -> impl Strategy<Value = InteractionStore> {
    (4usize..30, prop::collection::vec(prop::collection::vec((1usize..30, 0i64..1_000), 3..25), 1..20)).prop_map(
        |(num_items, users)| InteractionStore {
            num_items,
            raw_items: (0..num_items as u64).collect(),
            users: users
                .into_iter()
                .enumerate()
                .map(|(u, evs)| {
                    let mut t = 0;
                    UserHistory {
                        user: u as u64 + 1,
                        events: evs
                            .into_iter()
                            .map(|(i, dt)| {
                                t += dt;
                                Event {
                                    item: 1 + (i - 1) % (num_items - 1),
                                    ts: t,
                                }
                            })
                            .collect(),
                    }
                })
                .collect(),
        },
    )
}

fn chi_square_uniform(counts: &[u64]) -> (f64, f64) {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((counts.len() - 1) as f64).unwrap().inverse_cdf(0.999);
    (stat, critical)
}

#[test]
fn negatives_are_uniform_over_the_complement() {
    let (num_items, positive) = (52, 17);
    let mut rng = seed::rng(3, seed::STREAM_NEGATIVES, 0);
    let mut counts = vec![0u64; num_items];
    for _ in 0..1_000_000 {
        for i in data::sample_negatives(&mut rng, 1, positive, num_items).unwrap() {
            counts[i] += 1;
        }
    }
    assert_eq!(counts[0], 0);
    assert_eq!(counts[positive], 0);
    let rest: Vec<u64> = (1..num_items).filter(|&i| i != positive).map(|i| counts[i]).collect();
    let (stat, critical) = chi_square_uniform(&rest);
    assert!(stat < critical, "χ² {stat} ≥ {critical}");

    // every slot of a multi-draw is marginally uniform as well
    let mut counts = vec![0u64; num_items];
    for _ in 0..100_000 {
        for i in data::sample_negatives(&mut rng, 10, positive, num_items).unwrap() {
            counts[i] += 1;
        }
    }
    let rest: Vec<u64> = (1..num_items).filter(|&i| i != positive).map(|i| counts[i]).collect();
    let (stat, critical) = chi_square_uniform(&rest);
    assert!(stat < critical, "χ² {stat} ≥ {critical}");
}

proptest! {
    #[test]
    fn unpad_recovers_the_recent_suffix(store in store_strategy(), n in 2usize..12) {
        let seqs = data::build_sequences(&store, n).unwrap();
        for (u, p) in store.users.iter().zip(&seqs) {
            let items = u.items();
            let keep = items.len().min(n);
            prop_assert_eq!(p.items.len(), n);
            prop_assert_eq!(p.unpad(), &items[items.len() - keep..]);
            prop_assert!(p.items[..n - keep].iter().all(|&i| i == PAD_ITEM));
        }
    }

    #[test]
    fn leave_one_out_has_no_leakage(store in store_strategy()) {
        let split = data::split_leave_one_out(&store).unwrap();
        for (i, u) in store.users.iter().enumerate() {
            let items = u.items();
            let m = items.len();
            let (train, valid, test) = (&split.train[i], &split.valid[i], &split.test[i]);
            prop_assert_eq!(&train.items[..], &items[..m - 2]);
            prop_assert_eq!(valid.target, items[m - 2]);
            prop_assert_eq!(&valid.items, &train.items);
            prop_assert_eq!(test.target, items[m - 1]);
            prop_assert_eq!(&test.items[..], &items[..m - 1]);

            // training targets never reach the held-out positions
            let batch = SequenceBatch::for_training(&[train], 64);
            let targets: Vec<usize> = batch.targets.iter().copied().filter(|&t| t != PAD_ITEM).collect();
            prop_assert_eq!(&targets[..], &items[1..m - 2]);
        }
    }

    #[test]
    fn tsv_round_trip_preserves_histories(store in store_strategy()) {
        let opts = IngestOptions { min_user_len: 3, min_item_count: 1 };
        let back = data::parse_tsv(&store.to_tsv(), opts).unwrap();
        prop_assert_eq!(back.users.len(), store.users.len());
        for (a, b) in store.users.iter().zip(&back.users) {
            prop_assert_eq!(a.user, b.user);
            let ta: Vec<i64> = a.times();
            let mut sorted = ta.clone();
            sorted.sort();
            prop_assert_eq!(b.times(), sorted);
            let raw: Vec<u64> = b.items().iter().map(|&i| back.raw_items[i]).collect();
            let mut want: Vec<(i64, u64)> = a.events.iter().map(|e| (e.ts, e.item as u64)).collect();
            want.sort_by_key(|&(t, _)| t);
            prop_assert_eq!(raw, want.into_iter().map(|(_, i)| i).collect::<Vec<_>>());
        }
    }
}
