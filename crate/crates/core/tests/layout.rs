use mfpinet::nn::{pixel_shuffle, pixel_unshuffle};
use mfpinet::stack_io::plane_depths;
use mfpinet::{fold_stack, unfold_stack, FocalStack, Tensor};

#[test]
fn fold_is_plane_major() {
    let planes: Vec<Tensor<f32>> = (0..2)
        .map(|z| {
            Tensor::from_fn(3, 2, 2, |c, y, x| {
                (z * 100 + c * 10 + y * 2 + x) as f32 / 200.0
            })
        })
        .collect();
    let stack = FocalStack::from_planes(&planes, plane_depths(2, 1.0)).unwrap();
    let folded = fold_stack(&stack);
    assert_eq!(folded.shape(), (6, 2, 2));
    for (z, plane) in planes.iter().enumerate() {
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(folded.at(z * 3 + c, y, x), plane.at(c, y, x));
                }
            }
        }
    }
    let back = unfold_stack(&folded, plane_depths(2, 1.0)).unwrap();
    assert_eq!(back, stack);
    assert_eq!(fold_stack(&back), folded);
    assert!(unfold_stack(&folded, plane_depths(3, 1.0)).is_err());
}

#[test]
fn pixel_shuffle_matches_scatter_oracle() {
    let r = 2;
    for c in 1..=2 {
        for h in 1..=4 {
            for w in 1..=4 {
                let cin = c * r * r;
                let x = Tensor::from_fn(cin, h, w, |k, y, xx| (k * 1000 + y * 10 + xx) as f64);
                let mut want = Tensor::<f64>::zeros(c, h * r, w * r);
                for k in 0..cin {
                    let (oc, i, j) = (k / (r * r), (k / r) % r, k % r);
                    for y in 0..h {
                        for xx in 0..w {
                            *want.at_mut(oc, y * r + i, xx * r + j) = x.at(k, y, xx);
                        }
                    }
                }
                let got = pixel_shuffle(&x, r).unwrap();
                assert_eq!(got, want, "c={c} h={h} w={w}");
                assert_eq!(pixel_unshuffle(&got, r).unwrap(), x);
            }
        }
    }
}

#[test]
fn pixel_shuffle_hand_case() {
    let x = Tensor::from_vec(4, 1, 1, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(pixel_shuffle(&x, 2).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    assert!(pixel_shuffle(&Tensor::<f32>::zeros(3, 1, 1), 2).is_err());
}
