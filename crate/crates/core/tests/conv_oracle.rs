//! im2col convolution against direct nested loops, forward and adjoint,
//! over strides, paddings and kernel sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotens::nn::{self, ConvParams};
use rotens::{Tape, Tensor4};

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    let n = shape.iter().product();
    Tensor4::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_conv(x: &Tensor4, w: &Tensor4, b: &Tensor4, stride: usize, pad: usize) -> Tensor4 {
    let [n, c, h, wd] = x.shape();
    let [o, _, k, _] = w.shape();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor4::zeros([n, o, oh, ow]).unwrap();
    for ni in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[oc];
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(ni, ci, iy as usize, ix as usize)
                                        * w.at(oc, ci, ki, kj);
                                }
                            }
                        }
                    }
                    let i = out.offset(ni, oc, oy, ox);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    out
}

/// Gradients of `sum(conv(x) * r)` with respect to `x` and `w` by direct
/// accumulation.
fn naive_adjoint(
    x: &Tensor4,
    w: &Tensor4,
    r: &Tensor4,
    stride: usize,
    pad: usize,
) -> (Tensor4, Tensor4) {
    let [n, c, h, wd] = x.shape();
    let [o, _, k, _] = w.shape();
    let [_, _, oh, ow] = r.shape();
    let mut dx = Tensor4::zeros(x.shape()).unwrap();
    let mut dw = Tensor4::zeros(w.shape()).unwrap();
    for ni in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = r.at(ni, oc, oy, ox);
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    let (iy, ix) = (iy as usize, ix as usize);
                                    let xi = dx.offset(ni, ci, iy, ix);
                                    dx.data_mut()[xi] += g * w.at(oc, ci, ki, kj);
                                    let wi = dw.offset(oc, ci, ki, kj);
                                    dw.data_mut()[wi] += g * x.at(ni, ci, iy, ix);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn close(a: &Tensor4, b: &Tensor4, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}");
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!(
            (x - y).abs() <= 1e-12 * (1.0 + y.abs()),
            "{what}[{i}]: {x} vs {y}"
        );
    }
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for &(k, stride, pad, side) in &[
        (1, 1, 0, 5),
        (3, 1, 1, 7),
        (3, 2, 1, 7),
        (3, 2, 0, 8),
        (5, 1, 2, 6),
        (5, 3, 1, 9),
        (3, 1, 3, 4),
    ] {
        let x = random([2, 3, side, side], &mut rng);
        let w = random([4, 3, k, k], &mut rng);
        let b = random([4, 1, 1, 1], &mut rng);
        let p = ConvParams::new(w.clone(), b.clone(), stride, pad).unwrap();
        let what = format!("k{k} s{stride} p{pad} side{side}");
        close(
            &nn::conv2d(&x, &p).unwrap(),
            &naive_conv(&x, &w, &b, stride, pad),
            &what,
        );

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().with_requires_grad(true));
        let wv = tape.leaf(w.clone().with_requires_grad(true));
        let bv = tape.leaf(b.clone().with_requires_grad(true));
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        let r = random(tape.shape(y).unwrap(), &mut rng);
        let rv = tape.constant(r.clone());
        let m = tape.mul(y, rv).unwrap();
        let s = tape.sum(m).unwrap();
        let grads = tape.backward(s).unwrap();
        let (dx, dw) = naive_adjoint(&x, &w, &r, stride, pad);
        close(grads.get(xv).unwrap(), &dx, &format!("dx {what}"));
        close(grads.get(wv).unwrap(), &dw, &format!("dw {what}"));
        let [rn, o, rh, rw] = r.shape();
        for oc in 0..o {
            let mut per = 0.0;
            for ni in 0..rn {
                for yy in 0..rh {
                    for xx in 0..rw {
                        per += r.at(ni, oc, yy, xx);
                    }
                }
            }
            let got = grads.get(bv).unwrap().data()[oc];
            assert!((got - per).abs() <= 1e-12 * (1.0 + per.abs()), "db {what}");
        }
    }
}
