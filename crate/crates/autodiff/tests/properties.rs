use egflow_autodiff::*;
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, k in 1usize..10, vals in proptest::collection::vec(-10.0f64..10.0, 60)) {
        let mut t = Tape::new(Precision::F64, Mode::Train);
        let x = t.constant(&[rows, k], vals[..rows * k].to_vec()).unwrap();
        let y = t.softmax(x).unwrap();
        for r in 0..rows {
            let row = &t.data(y)[r * k..(r + 1) * k];
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(k == 1 || row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn stop_gradient_contributes_nothing(vals in proptest::collection::vec(-5.0f64..5.0, 8)) {
        let mut t = Tape::new(Precision::F64, Mode::Train);
        let x = t.input(&[8], vals.clone()).unwrap();
        let sx = t.stop_gradient(x);
        prop_assert_eq!(t.data(sx), &vals[..]);
        let sq = t.mul(sx, sx).unwrap();
        let y = t.add(sq, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        prop_assert_eq!(g.wrt(&t, x), vec![1.0; 8]);
    }

    #[test]
    fn polar_rotation_is_proper_rotation(vals in proptest::collection::vec(-3.0f64..3.0, 9)) {
        let mut t = Tape::new(Precision::F64, Mode::Train);
        let h = t.constant(&[3, 3], vals).unwrap();
        if let Ok(r) = t.polar_rotation(h, 1e-6) {
            let m = nalgebra::Matrix3::from_row_slice(t.data(r));
            prop_assert!((m.transpose() * m - nalgebra::Matrix3::identity()).norm() < 1e-9);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
        }
    }
}
