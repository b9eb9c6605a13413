mod common;

use common::suites;
use common::{cloud, random_tensor};
use pcflow_autograd::Tensor;
use pcflow_core::geom::knn_radius;
use pcflow_core::losses::{cfs_loss, lfc_loss, supervised_loss, without_self};
use pcflow_core::nn::{Ctx, ParamStore};
use proptest::prelude::*;

#[test]
fn warp_by_zero_is_bitwise_identity() {
    suites::warp_zero_is_identity().unwrap();
}

#[test]
fn attention_and_pooling_rows_are_normalised() {
    suites::attention_rows_sum_to_one().unwrap();
}

#[test]
fn aggregations_ignore_neighbour_order() {
    suites::neighbor_order_invariance().unwrap();
}

#[test]
fn losses_are_zero_at_their_optimum() {
    suites::losses_vanish_on_their_optimum().unwrap();
}

#[test]
fn relaxed_accuracy_is_at_least_strict() {
    suites::relaxed_accuracy_dominates_strict(200).unwrap();
}

fn flows(n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_non_negative(pred in flows(12), gt in flows(12), f in flows(12), g in flows(12), seed in 0u64..1000) {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, false);
        let p = ctx.constant(Tensor::from_points(&pred));
        let sup = supervised_loss(&mut ctx, &[p], &[Tensor::from_points(&gt)], None, &[0.02]).unwrap();
        prop_assert!(ctx.value(sup).item() >= 0.0);
        let pts = cloud(12, seed);
        let nb = knn_radius(&pts, &pts, 4, 0.5).unwrap();
        let lfc = lfc_loss(&mut ctx, p, &without_self(&nb), None).unwrap();
        prop_assert!(ctx.value(lfc.value).item() >= 0.0);
        let (fv, gv) = (ctx.constant(Tensor::from_points(&f)), ctx.constant(Tensor::from_points(&g)));
        let cfs = cfs_loss(&mut ctx, fv, gv, &nb, 0.95, None).unwrap();
        prop_assert!(ctx.value(cfs.value).item() >= 0.0);
    }

    #[test]
    fn supervised_loss_scales_linearly_with_error(pred in flows(10), gt in flows(10), c in 1.0f64..8.0) {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, false);
        let scaled: Vec<[f64; 3]> = pred.iter().zip(&gt).map(|(p, g)| [0, 1, 2].map(|a| g[a] + c * (p[a] - g[a]))).collect();
        let gts = [Tensor::from_points(&gt)];
        let (a, b) = (ctx.constant(Tensor::from_points(&pred)), ctx.constant(Tensor::from_points(&scaled)));
        let la = supervised_loss(&mut ctx, &[a], &gts, None, &[0.02]).unwrap();
        let lb = supervised_loss(&mut ctx, &[b], &gts, None, &[0.02]).unwrap();
        let (la, lb) = (ctx.value(la).item(), ctx.value(lb).item());
        prop_assert!((lb - c * la).abs() <= 1e-12 * lb.abs().max(1e-12));
    }

    #[test]
    fn supervised_loss_vanishes_only_at_equality(gt in flows(8), i in 0usize..8, e in 1e-6f64..1.0) {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, false);
        let mut pred = gt.clone();
        pred[i][0] += e;
        let p = ctx.constant(Tensor::from_points(&pred));
        let l = supervised_loss(&mut ctx, &[p], &[Tensor::from_points(&gt)], None, &[0.02]).unwrap();
        prop_assert!(ctx.value(l).item() > 0.0);
    }

    #[test]
    fn lfc_is_invariant_to_scene_translation(flow in flows(16), shift in prop::array::uniform3(-10.0f64..10.0), seed in 0u64..1000) {
        let pts = cloud(16, seed);
        let moved = pcflow_core::geom::PointSet::new(pts.points().iter().map(|p| [0, 1, 2].map(|a| p[a] + shift[a])).collect()).unwrap();
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, false);
        let f = ctx.constant(Tensor::from_points(&flow));
        let a = without_self(&knn_radius(&pts, &pts, 5, 0.5).unwrap());
        let b = without_self(&knn_radius(&moved, &moved, 5, 0.5).unwrap());
        let la = lfc_loss(&mut ctx, f, &a, None).unwrap().value;
        let lb = lfc_loss(&mut ctx, f, &b, None).unwrap().value;
        prop_assert!((ctx.value(la).item() - ctx.value(lb).item()).abs() <= 1e-9);
    }
}

#[test]
fn lfc_of_a_constant_field_is_zero_for_any_grouping() {
    let pts = cloud(20, 5);
    let store = ParamStore::new();
    let mut ctx = Ctx::new(&store, false);
    let offset = random_tensor(1, 3, 6);
    let f = ctx.constant(Tensor::from_rows(&vec![offset.row(0).to_vec(); 20]));
    for r in [0.05, 0.2, 1.0] {
        let nb = without_self(&knn_radius(&pts, &pts, 6, r).unwrap());
        let l = lfc_loss(&mut ctx, f, &nb, None).unwrap().value;
        assert_eq!(ctx.value(l).item(), 0.0);
    }
}
