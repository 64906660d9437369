use focus_tensor::{Graph, Tensor, TensorError};
use proptest::prelude::*;

#[test]
fn masked_softmax_zeroes_masked_position() {
    let g = Graph::new();
    let x = g.constant(&[2], vec![1.0, 2.0]).unwrap();
    let s = g.softmax(x, Some(&[0.0, f64::NEG_INFINITY])).unwrap();
    assert_eq!(&*g.data(s), &[1.0, 0.0]);
}

#[test]
fn fully_masked_row_falls_back_to_plain_softmax() {
    let g = Graph::new();
    let x = g.constant(&[2, 2], vec![0.0, 0.0, 1.0, 3.0]).unwrap();
    let ninf = f64::NEG_INFINITY;
    let s = g.softmax(x, Some(&[ninf, ninf, 0.0, ninf])).unwrap();
    let d = g.data(s);
    assert_eq!(&d[..2], &[0.5, 0.5]);
    assert_eq!(&d[2..], &[1.0, 0.0]);
    assert!(d.iter().all(|v| v.is_finite()));
}

#[test]
fn identity_matmul() {
    let g = Graph::new();
    let a: Vec<f64> = (0..9).map(|i| i as f64 * 0.7 - 2.0).collect();
    let i3 = g.leaf(&Tensor::eye(3));
    let av = g.constant(&[3, 3], a.clone()).unwrap();
    let p = g.matmul(i3, av).unwrap();
    assert_eq!(&*g.data(p), a.as_slice());
}

#[test]
fn grid_sample_linear_field_at_quarter() {
    let (h, w) = (3, 4);
    let field: Vec<f64> = (0..h * w).map(|i| (i % w) as f64).collect();
    let g = Graph::new();
    let v = g.constant(&[h * w, 1], field).unwrap();
    let c = g.constant(&[1, 2], vec![0.25, 1.0]).unwrap();
    let s = g.grid_sample(v, h, w, c).unwrap();
    assert_eq!(g.item(s), 0.25);
}

#[test]
fn shape_errors_name_the_operation() {
    let g = Graph::new();
    let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    match g.matmul(a, b) {
        Err(TensorError::ShapeMismatch { op, shapes }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    let c = g.constant(&[4], vec![0.0; 4]).unwrap();
    let msg = g.add(a, c).unwrap_err().to_string();
    assert!(msg.contains("add"), "{msg}");
}

#[test]
fn backward_errors() {
    let g = Graph::new();
    let x = g.input(&[2], vec![1.0, 2.0], true).unwrap();
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    let l = g.sum(x);
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(TensorError::BackwardTwice)));
    g.reset_grads();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);

    let empty = Graph::new();
    let other = Graph::new();
    let v = other.scalar_const(1.0);
    assert!(matches!(empty.backward(v), Err(TensorError::EmptyGraph)));
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::new();
    let x = g.input(&[2], vec![1.0, 2.0], true).unwrap();
    let c = g.constant(&[2], vec![3.0, 4.0]).unwrap();
    let l = g.sum(g.mul(x, c).unwrap());
    g.backward(l).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
    let d = g.detach(x);
    assert!(!g.requires_grad(d));
}

fn run_pipeline(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut s = seed;
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
        ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    };
    let x: Vec<f64> = (0..3 * 40 * 40).map(|_| next()).collect();
    let w: Vec<f64> = (0..8 * 3 * 3 * 3).map(|_| next()).collect();
    let g = Graph::new();
    let xv = g.input(&[3, 40, 40], x, true).unwrap();
    let wv = g.input(&[8, 3, 3, 3], w, true).unwrap();
    let y = g.conv2d(xv, wv, 1, 1, false).unwrap();
    let y = g.resize_bilinear(g.gelu(y), 17, 23).unwrap();
    let y = g.reshape(y, &[8, 17 * 23]).unwrap();
    let t = g.transpose(y).unwrap();
    let a = g.softmax(g.matmul(t, y).unwrap(), None).unwrap();
    let l = g.mean(a);
    let out = g.data(a).to_vec();
    g.backward(l).unwrap();
    (out, g.grad(wv).unwrap().into_data())
}

#[test]
fn bit_identical_reruns() {
    let (a1, g1) = run_pipeline(11);
    let (a2, g2) = run_pipeline(11);
    assert!(a1.iter().zip(&a2).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(g1.iter().zip(&g2).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        masked in prop::collection::vec(any::<bool>(), 36),
    ) {
        let mut s = seed;
        let vals: Vec<f64> = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 40.0
            })
            .collect();
        let mask: Vec<f64> = (0..rows * cols)
            .map(|i| if masked[i % 36] { f64::NEG_INFINITY } else { 0.0 })
            .collect();
        let g = Graph::new();
        let x = g.constant(&[rows, cols], vals).unwrap();
        let sm = g.softmax(x, Some(&mask)).unwrap();
        let d = g.data(sm);
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let mrow = &mask[r * cols..(r + 1) * cols];
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            if mrow.iter().any(|m| *m == 0.0) {
                for (p, m) in row.iter().zip(mrow) {
                    if *m == f64::NEG_INFINITY {
                        prop_assert_eq!(*p, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn grid_sample_reproduces_affine_fields(
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        c in -3.0f64..3.0,
        pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20),
    ) {
        let (h, w) = (6, 9);
        let field: Vec<f64> = (0..h * w)
            .map(|i| a * (i % w) as f64 + b * (i / w) as f64 + c)
            .collect();
        let coords: Vec<f64> = pts
            .iter()
            .flat_map(|(u, v)| [u * (w - 1) as f64, v * (h - 1) as f64])
            .collect();
        let g = Graph::new();
        let vals = g.constant(&[h * w, 1], field).unwrap();
        let cv = g.constant(&[pts.len(), 2], coords.clone()).unwrap();
        let s = g.grid_sample(vals, h, w, cv).unwrap();
        for (i, got) in g.data(s).iter().enumerate() {
            let want = a * coords[2 * i] + b * coords[2 * i + 1] + c;
            prop_assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
        }
    }

    #[test]
    fn broadcast_add_matches_manual_loop(
        rows in 1usize..5,
        cols in 1usize..5,
        seed in any::<u32>(),
    ) {
        let a: Vec<f64> = (0..rows * cols).map(|i| (i as f64 + seed as f64).sin()).collect();
        let b: Vec<f64> = (0..cols).map(|j| (j as f64 * 1.3 + seed as f64).cos()).collect();
        let g = Graph::new();
        let av = g.constant(&[rows, cols], a.clone()).unwrap();
        let bv = g.constant(&[cols], b.clone()).unwrap();
        let s = g.add(av, bv).unwrap();
        for (i, v) in g.data(s).iter().enumerate() {
            prop_assert_eq!(*v, a[i] + b[i % cols]);
        }
    }
}
