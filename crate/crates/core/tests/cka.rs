mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use sta_unet::eval::{block_similarity, cka, dice_score, iou_score, ActivationDump, Bandwidth, LabelMap, Matrix};

fn random_matrix(r: &mut impl Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| r.gen_range(-1.0..1.0))
}

fn to_matrix(m: &DMatrix<f64>) -> Matrix {
    let data = (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
    Matrix::new(m.nrows(), m.ncols(), data).unwrap()
}

fn orthogonal(r: &mut impl Rng, d: usize) -> DMatrix<f64> {
    random_matrix(r, d, d).qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cka_invariances(seed in any::<u64>(), n in 4usize..20, d in 1usize..8, e in 1usize..8) {
        let mut r = common::rng(seed);
        let x = random_matrix(&mut r, n, d);
        let y = random_matrix(&mut r, n, e);
        for bw in [Bandwidth::Unit, Bandwidth::Median] {
            let (xm, ym) = (to_matrix(&x), to_matrix(&y));
            prop_assert!((cka(&xm, &xm, bw).unwrap() - 1.0).abs() < 1e-6);
            let xy = cka(&xm, &ym, bw).unwrap();
            prop_assert!((xy - cka(&ym, &xm, bw).unwrap()).abs() < 1e-12);
            prop_assert!((-1e-12..=1.0 + 1e-9).contains(&xy));

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut r);
            let px = DMatrix::from_fn(n, d, |i, j| x[(perm[i], j)]);
            let py = DMatrix::from_fn(n, e, |i, j| y[(perm[i], j)]);
            prop_assert!((cka(&to_matrix(&px), &to_matrix(&py), bw).unwrap() - xy).abs() < 1e-6);

            let shift = DMatrix::from_fn(1, d, |_, _| r.gen_range(-3.0..3.0));
            let mut tx = &x * orthogonal(&mut r, d);
            for mut row in tx.row_iter_mut() {
                row += &shift;
            }
            prop_assert!((cka(&to_matrix(&tx), &ym, bw).unwrap() - xy).abs() < 1e-5);
        }
    }
}

#[test]
fn block_matrix_is_symmetric_with_unit_diagonal() {
    let mut r = common::rng(11);
    let blocks = (0..4)
        .map(|b| (format!("b{b}"), to_matrix(&random_matrix(&mut r, 16, 3 + b))))
        .collect();
    let m = block_similarity(&ActivationDump { blocks }, Bandwidth::Median).unwrap();
    for i in 0..4 {
        assert!((m.values.at(i, i) - 1.0).abs() < 1e-9);
        for j in 0..4 {
            assert_eq!(m.values.at(i, j), m.values.at(j, i));
        }
    }
    let mm = m.min_max();
    let lo = mm.values.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mm.values.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!((lo, hi), (0.0, 1.0));
    let gray = mm.to_gray();
    assert_eq!(gray.len(), 16);
    assert!(gray.contains(&0) && gray.contains(&255));
}

#[test]
fn mismatched_sample_counts_are_rejected() {
    let a = Matrix::new(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let b = Matrix::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
    assert!(cka(&a, &b, Bandwidth::Unit).is_err());
}

#[test]
fn dice_and_iou_on_known_masks() {
    let gt = LabelMap::new(1, 2, 4, vec![0, 0, 1, 1, 0, 2, 2, 1]).unwrap();
    let pred = LabelMap::new(1, 2, 4, vec![0, 1, 1, 1, 0, 2, 0, 1]).unwrap();
    let d = dice_score(&pred, &gt, 3, &[]).unwrap();
    let i = iou_score(&pred, &gt, 3, &[]).unwrap();
    // class 0: |P|=3 |G|=3 inter 2; class 1: |P|=4 |G|=3 inter 3; class 2: |P|=1 |G|=2 inter 1
    let want_d = [4.0 / 6.0, 6.0 / 7.0, 2.0 / 3.0];
    let want_i = [2.0 / 4.0, 3.0 / 4.0, 1.0 / 2.0];
    for c in 0..3 {
        assert!((d.per_class[c] - want_d[c]).abs() < 1e-12);
        assert!((i.per_class[c] - want_i[c]).abs() < 1e-12);
    }
    let fg = dice_score(&pred, &gt, 3, &[0]).unwrap();
    assert!((fg.mean - (want_d[1] + want_d[2]) / 2.0).abs() < 1e-12);
}
