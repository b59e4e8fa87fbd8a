use super::*;
use crate::encoder::{init_params, vision_encode, EncoderConfig};
use crate::numerics::GaussianStream;

const EPS: f64 = 1e-5;

fn toy(seed: u64) -> EncoderParams {
    init_params(&EncoderConfig::default(), seed).unwrap()
}

/// Interior image, away from the clamp boundary.
fn image(seed: u64) -> ImageTensor {
    let mut g = GaussianStream::new(seed);
    let px = (0..3072).map(|_| 0.2 + 0.6 * g.uniform()).collect();
    ImageTensor::new(32, 32, 3, px).unwrap()
}

fn gaussian(n: usize, g: &mut GaussianStream) -> Vec<f64> {
    (0..n).map(|_| g.next()).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = crate::numerics::norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn shifted(img: &ImageTensor, dir: &[f64], t: f64) -> ImageTensor {
    let px = img.pixels().iter().zip(dir).map(|(p, d)| p + t * d).collect();
    ImageTensor::unclamped(img.shape().0, img.shape().1, img.shape().2, px).unwrap()
}

fn embed_diff(p: &EncoderParams, img: &ImageTensor, dir: &[f64], t: f64) -> Vec<f64> {
    let a = vision_encode(p, &shifted(img, dir, t)).unwrap();
    let b = vision_encode(p, &shifted(img, dir, -t)).unwrap();
    a.sub(&b).0
}

fn surrogate(seed: u64) -> (LinearSurrogate, ImageTensor) {
    let mut g = GaussianStream::new(seed);
    let a = Matrix::from_vec(5, 12, gaussian(60, &mut g)).unwrap();
    let x = ImageTensor::new(2, 2, 3, (0..12).map(|_| g.uniform()).collect()).unwrap();
    (LinearSurrogate::new(a, (2, 2, 3)).unwrap(), x)
}

#[test]
fn zero_cotangent_zero_gradient() {
    let p = toy(0);
    let g = vjp(&p, &image(1), &[0.0; 32]).unwrap();
    assert_eq!(g.len(), 3072);
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn cotangent_length_checked() {
    let p = toy(0);
    assert!(matches!(
        vjp(&p, &image(1), &[1.0; 31]),
        Err(Error::Shape { .. })
    ));
    let bad = Embedding(vec![0.0; 7]);
    assert!(matches!(
        loss_grad(&p, &image(1), &bad),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn linear_surrogate_is_exact() {
    let (s, x) = surrogate(3);
    let mut g = GaussianStream::new(4);
    let v = gaussian(5, &mut g);
    let got = vjp(&s, &x, &v).unwrap();
    for (i, gi) in got.iter().enumerate() {
        let want: f64 = (0..5).map(|r| s.a.get(r, i) * v[r]).sum();
        assert!((gi - want).abs() <= 1e-12);
    }

    let t = Embedding(gaussian(5, &mut g));
    let lg = loss_grad(&s, &x, &t).unwrap();
    let r: Vec<f64> = (0..5)
        .map(|i| (0..12).map(|j| s.a.get(i, j) * x.pixels()[j]).sum::<f64>() - t.0[i])
        .collect();
    assert!((lg.loss - 0.5 * r.iter().map(|v| v * v).sum::<f64>()).abs() <= 1e-12);
    for (j, gj) in lg.grad.iter().enumerate() {
        let want: f64 = (0..5).map(|i| s.a.get(i, j) * r[i]).sum();
        assert!((gj - want).abs() <= 1e-12);
    }

    let rep = jacobian(&s, &x).unwrap();
    assert!(rep.j.max_abs_diff(&s.a) <= 1e-12);
}

#[test]
fn directional_derivatives_match_central_differences() {
    let p = toy(2);
    let x = image(5);
    let mut g = GaussianStream::new(6);
    for trial in 0..20 {
        let u = unit(gaussian(3072, &mut g));
        let v = gaussian(32, &mut g);
        let fd = dot(&v, &embed_diff(&p, &x, &u, EPS)) / (2.0 * EPS);
        let ad = dot(&u, &vjp(&p, &x, &v).unwrap());
        let rel = (fd - ad).abs() / ad.abs().max(1e-12);
        assert!(rel <= 1e-4, "trial {trial}: fd {fd} vs ad {ad}");
    }
}

#[test]
fn matching_loss_fixed_point() {
    let p = toy(3);
    let x = image(7);
    let t = vision_encode(&p, &x).unwrap();
    let lg = loss_grad(&p, &x, &t).unwrap();
    assert!(lg.loss.abs() <= 1e-14);
    assert!(lg.grad.iter().all(|v| v.abs() <= 1e-14));
}

#[test]
fn loss_gradient_coordinates_match_finite_differences() {
    let p = toy(4);
    let x = image(8);
    let t = vision_encode(&p, &image(9)).unwrap();
    let lg = loss_grad(&p, &x, &t).unwrap();
    let loss = |img: &ImageTensor| {
        let r = vision_encode(&p, img).unwrap().sub(&t);
        0.5 * dot(r.as_slice(), r.as_slice())
    };
    let mut g = GaussianStream::new(10);
    let mut e = vec![0.0; 3072];
    for _ in 0..50 {
        let i = g.below(3072);
        e[i] = 1.0;
        let fd = (loss(&shifted(&x, &e, EPS)) - loss(&shifted(&x, &e, -EPS))) / (2.0 * EPS);
        e[i] = 0.0;
        let rel = (fd - lg.grad[i]).abs() / lg.grad[i].abs().max(1e-8);
        assert!(rel <= 1e-4, "pixel {i}: fd {fd} vs {}", lg.grad[i]);
    }
}

#[test]
fn jacobian_shape_and_directional_check() {
    let p = toy(5);
    let x = image(11);
    let rep = jacobian(&p, &x).unwrap();
    assert_eq!(rep.j.shape(), (32, 3072));
    assert_eq!(rep.embedding, vision_encode(&p, &x).unwrap());
    let mut g = GaussianStream::new(12);
    for _ in 0..10 {
        let u = unit(gaussian(3072, &mut g));
        let ju = rep.j.matvec(&u).unwrap();
        let fd: Vec<f64> = embed_diff(&p, &x, &u, EPS)
            .into_iter()
            .map(|v| v / (2.0 * EPS))
            .collect();
        let err: f64 = ju.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let rel = err / crate::numerics::norm(&fd);
        assert!(rel <= 1e-3, "rel {rel}");
    }
}

#[test]
fn vjp_is_linear_in_the_cotangent() {
    let p = toy(6);
    let x = image(13);
    let mut g = GaussianStream::new(14);
    let (v, w) = (gaussian(32, &mut g), gaussian(32, &mut g));
    let (a, b) = (1.7, -0.4);
    let mix: Vec<f64> = v.iter().zip(&w).map(|(vi, wi)| a * vi + b * wi).collect();
    let gv = vjp(&p, &x, &v).unwrap();
    let gw = vjp(&p, &x, &w).unwrap();
    let gm = vjp(&p, &x, &mix).unwrap();
    for i in 0..3072 {
        assert!((gm[i] - (a * gv[i] + b * gw[i])).abs() <= 1e-10);
    }
}

#[test]
fn jacobian_transpose_reproduces_vjp() {
    let p = toy(7);
    let x = image(15);
    let rep = jacobian(&p, &x).unwrap();
    let mut g = GaussianStream::new(16);
    for _ in 0..3 {
        let v = gaussian(32, &mut g);
        let jt = rep.j.tr_matvec(&v).unwrap();
        let direct = vjp(&p, &x, &v).unwrap();
        for (a, b) in jt.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn null_and_normal_space_response() {
    let p = toy(8);
    let x = image(17);
    let rep = jacobian(&p, &x).unwrap();
    let eta = 1e-4;
    let f0 = vision_encode(&p, &x).unwrap();
    let response = |dir: &[f64]| {
        vision_encode(&p, &shifted(&x, dir, eta)).unwrap().distance(&f0) / eta
    };

    let s = &rep.svd.s;
    let top = rep.svd.v.column(0);
    let r = response(&top);
    assert!(r >= 0.5 * s[0] && r <= 1.5 * s[0], "{r} vs s_max {}", s[0]);

    // unit-norm outputs make the radial direction an exact null direction,
    // so the smallest retained value is the smallest non-negligible one
    let s_small = *s.iter().rev().find(|&&v| v > 1e-10 * s[0]).unwrap();
    assert!(response(&rep.svd.v.column(s.len() - 1)) <= 2.0 * s_small);
    let k_small = s.iter().rposition(|&v| v == s_small).unwrap();
    assert!(response(&rep.svd.v.column(k_small)) <= 2.0 * s_small);

    // a direction orthogonal to every right singular vector
    let mut g = GaussianStream::new(18);
    let mut d = gaussian(3072, &mut g);
    for c in 0..s.len() {
        let vc = rep.svd.v.column(c);
        let proj = dot(&d, &vc);
        crate::numerics::axpy(-proj, &vc, &mut d);
    }
    let d = unit(d);
    let r_null = response(&d);
    assert!(r_null <= 2.0 * s_small);
    // second order: shrinking the step shrinks the ratio
    let f_tenth = vision_encode(&p, &shifted(&x, &d, eta / 10.0)).unwrap();
    assert!(f_tenth.distance(&f0) / (eta / 10.0) < 0.2 * r_null);
}
