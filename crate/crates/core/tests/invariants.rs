use proptest::prelude::*;

use vfe_tps::alignment::{cmpm_loss, identity_labels, total_loss, LossParts, LossWeights};
use vfe_tps::tensor::{Graph, ParamStore, Rng, Tensor};
use vfe_tps::tgmim::{pixel_shuffle, pixel_unshuffle, AttentionScale, MultiHeadCrossAttention, PatchMask};

fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = Rng::seeded(seed);
    Tensor::new([rows, cols], (0..rows * cols).map(|_| 3.0 * rng.normal()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..8, cols in 1usize..12, seed in any::<u64>()) {
        let mut g = Graph::new();
        let x = g.constant(matrix(rows, cols, seed));
        let p = g.softmax(x);
        for row in g.value(p).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn pixel_shuffle_round_trip(batch in 1usize..3, channels in 1usize..4, patch in 1usize..4,
                                gh in 1usize..4, gw in 1usize..4, seed in any::<u64>()) {
        let cells = matrix(batch * gh * gw, channels * patch * patch, seed);
        let image = pixel_shuffle(&cells, channels, patch, (gh, gw)).unwrap();
        prop_assert_eq!(image.shape(), &[batch, channels, gh * patch, gw * patch][..]);
        prop_assert_eq!(pixel_unshuffle(&image, patch).unwrap(), cells);
    }

    #[test]
    fn mask_cardinality(n in 1usize..200, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let mask = PatchMask::sample(n, ratio, &mut Rng::seeded(seed)).unwrap();
        prop_assert_eq!(mask.len(), n);
        prop_assert_eq!(mask.num_masked(), (ratio * n as f64).round() as usize);
    }

    #[test]
    fn cross_attention_ignores_text_order(lv in 1usize..6, lt in 2usize..7, seed in any::<u64>()) {
        let d = 8;
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seeded(seed);
        let mca = MultiHeadCrossAttention::new(&mut store, "mca", d, 2, AttentionScale::Model, &mut rng).unwrap();
        let visual = matrix(lv, d, seed ^ 1);
        let text = matrix(lt, d, seed ^ 2);
        let mut order: Vec<usize> = (0..lt).collect();
        rng.shuffle(&mut order);
        let permuted = Tensor::new([lt, d], order.iter().flat_map(|&i| text.row(i).to_vec()).collect()).unwrap();
        let a = mca.apply(&store, &visual, &text).unwrap();
        let b = mca.apply(&store, &visual, &permuted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn weighted_total_is_sum_of_enabled_terms(
        with_mim in any::<bool>(), with_cal in any::<bool>(),
        wm in 0.0f64..3.0, wc in 0.0f64..3.0, wa in 0.1f64..3.0,
        vm in 0.0f64..10.0, vc in 0.0f64..10.0, seed in any::<u64>(),
    ) {
        let mut g = Graph::<f64>::new();
        let pids = [0u32, 0, 1, 2];
        let img = g.constant(matrix(4, 5, seed));
        let txt = g.constant(matrix(4, 5, seed ^ 7));
        let cmpm = cmpm_loss(&mut g, img, txt, &identity_labels(&pids, &pids), 0.1, 1e-8).unwrap();
        let parts = LossParts {
            tgmim: with_mim.then(|| g.constant(Tensor::scalar(vm))),
            isgvfc: with_cal.then(|| g.constant(Tensor::scalar(vc))),
            cmpm: Some(cmpm),
        };
        let weights = LossWeights { tgmim: wm, isgvfc: wc, cmpm: wa };
        let (total, log) = total_loss(&mut g, &parts, &weights, 1, 0).unwrap();
        let expected = wa * log.l_cmpm
            + if with_mim { wm * vm } else { 0.0 }
            + if with_cal { wc * vc } else { 0.0 };
        prop_assert!((g.scalar(total) - expected).abs() < 1e-9);
        prop_assert!((log.total - expected).abs() < 1e-9);
        prop_assert!((log.l_cmpm - log.l_i2t - log.l_t2i).abs() < 1e-9);
        if !with_mim { prop_assert_eq!(log.l_tgmim, 0.0); }
        if !with_cal { prop_assert_eq!(log.l_isgvfc, 0.0); }
    }
}
