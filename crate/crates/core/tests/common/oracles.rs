//! Every loss and keypoint op against a scalar brute-force reimplementation,
//! each on at least 100 random small inputs.

use candle_core::Tensor;
use jokr_core::keypoints::{
    apply_affine, expect_keypoints, project_keypoints, spatial_softmax, AffineParams, ConfidenceParams,
    DistanceExponent, HeatmapStack,
};
use jokr_core::losses::{
    downsample_mask, equivariance_from_keypoints, loss_discriminator, loss_domain_confusion, loss_l1, loss_lpips,
    loss_seg, loss_separation, loss_silhouette, loss_temporal, ConfusionMode, IdentityFeatures, LinearFeatures,
};
use jokr_core::models::KeypointCritic;
use jokr_core::warp::warp_images;
use jokr_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{center, max_rel_err, rel_err, scalar, t, uniform, vals, Check};

pub const CASES: usize = 100;
pub const TOL: f64 = 1e-6;
pub const TOL_RESAMPLING: f64 = 1e-4;

fn run(name: &str, tol: f64, seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_err = (0..CASES).map(|_| case(&mut rng)).fold(0.0, f64::max);
    Check {
        name: name.to_string(),
        cases: CASES,
        max_err,
        tol,
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (
        rng.random_range(1..4),
        rng.random_range(1..5),
        rng.random_range(2..7),
        rng.random_range(2..7),
    )
}

fn oracle_softmax(logits: &[f64], n: usize, k: usize, hw: usize, temp: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for c in 0..n * k {
        let s = &logits[c * hw..(c + 1) * hw];
        let m = s.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = s.iter().map(|x| ((x - m) / temp).exp()).collect();
        let z: f64 = e.iter().sum();
        for (i, v) in e.iter().enumerate() {
            out[c * hw + i] = v / z;
        }
    }
    out
}

pub fn spatial_softmax_check() -> Check {
    run("spatial_softmax", TOL, 1, |rng| {
        let (n, k, h, w) = dims(rng);
        let temp = rng.random_range(0.05..1.0);
        let logits = uniform(rng, n * k * h * w, -2.0, 2.0);
        let got = vals(spatial_softmax(&t(logits.clone(), &[n, k, h, w]), temp).unwrap().tensor());
        max_rel_err(&got, &oracle_softmax(&logits, n, k, h * w, temp))
    })
}

pub fn expect_keypoints_check() -> Check {
    run("expect_keypoints", TOL, 2, |rng| {
        let (n, k, h, w) = dims(rng);
        let probs = oracle_softmax(&uniform(rng, n * k * h * w, -3.0, 3.0), n, k, h * w, 1.0);
        let heat = HeatmapStack::new(t(probs.clone(), &[n, k, h, w])).unwrap();
        let got = vals(&expect_keypoints(&heat).unwrap());
        let mut want = Vec::new();
        for c in 0..n * k {
            let (mut u, mut v) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let p = probs[c * h * w + i * w + j];
                    u += p * center(j, w);
                    v += p * center(i, h);
                }
            }
            want.push(u);
            want.push(v);
        }
        max_rel_err(&got, &want)
    })
}

pub fn project_keypoints_check() -> Check {
    run("project_keypoints", TOL, 3, |rng| {
        let (n, k, h, w) = dims(rng);
        let params = ConfidenceParams {
            alpha: rng.random_range(0.5..2.0),
            sigma: rng.random_range(0.1..0.6),
            exponent: if rng.random_bool(0.5) {
                DistanceExponent::Euclidean
            } else {
                DistanceExponent::Squared
            },
        };
        let kp = uniform(rng, n * k * 2, -1.0, 1.0);
        let got = vals(&project_keypoints(&t(kp.clone(), &[n, k, 2]), (h, w), &params).unwrap());
        let mut want = Vec::new();
        for c in 0..n * k {
            let (ku, kv) = (kp[2 * c], kp[2 * c + 1]);
            for i in 0..h {
                for j in 0..w {
                    let d = ((center(j, w) - ku).powi(2) + (center(i, h) - kv).powi(2)).sqrt();
                    let e = match params.exponent {
                        DistanceExponent::Euclidean => d,
                        DistanceExponent::Squared => d * d,
                    };
                    want.push((-e / (params.sigma * params.sigma)).exp() / params.alpha);
                }
            }
        }
        max_rel_err(&got, &want)
    })
}

fn random_affine(rng: &mut ChaCha8Rng) -> [f64; 6] {
    loop {
        let m: Vec<f64> = uniform(rng, 6, -1.5, 1.5);
        if (m[0] * m[4] - m[1] * m[3]).abs() > 0.2 {
            return [m[0], m[1], m[2], m[3], m[4], m[5]];
        }
    }
}

fn map_point(m: &[f64; 6], u: f64, v: f64) -> (f64, f64) {
    (m[0] * u + m[1] * v + m[2], m[3] * u + m[4] * v + m[5])
}

pub fn apply_affine_check() -> Check {
    run("apply_affine", TOL, 4, |rng| {
        let n = rng.random_range(1..4);
        let k = rng.random_range(1..6);
        let kp = uniform(rng, n * k * 2, -1.0, 1.0);
        let shared = rng.random_bool(0.5);
        let mats: Vec<[f64; 6]> = (0..if shared { 1 } else { n }).map(|_| random_affine(rng)).collect();
        let tt = if shared {
            t(mats[0].to_vec(), &[2, 3])
        } else {
            t(mats.iter().flatten().copied().collect(), &[n, 2, 3])
        };
        let got = vals(&apply_affine(&t(kp.clone(), &[n, k, 2]), &tt).unwrap());
        let mut want = Vec::new();
        for b in 0..n {
            let m = &mats[if shared { 0 } else { b }];
            for l in 0..k {
                let (u, v) = map_point(m, kp[(b * k + l) * 2], kp[(b * k + l) * 2 + 1]);
                want.push(u);
                want.push(v);
            }
        }
        max_rel_err(&got, &want)
    })
}

/// Bilinear sample of one channel at continuous pixel coordinates, zero outside.
fn bilinear(img: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let px = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            img[yy as usize * w + xx as usize]
        }
    };
    px(y0, x0) * (1.0 - fx) * (1.0 - fy)
        + px(y0, x0 + 1.0) * fx * (1.0 - fy)
        + px(y0 + 1.0, x0) * (1.0 - fx) * fy
        + px(y0 + 1.0, x0 + 1.0) * fx * fy
}

pub fn warp_check() -> Check {
    run("warp_images", TOL_RESAMPLING, 5, |rng| {
        let (n, c, h, w) = dims(rng);
        let img = uniform(rng, n * c * h * w, 0.0, 1.0);
        let mats: Vec<AffineParams> = (0..n)
            .map(|_| {
                AffineParams::similarity(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(0.7..1.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                )
            })
            .collect();
        let got = vals(&warp_images(&t(img.clone(), &[n, c, h, w]), &mats).unwrap());
        let mut want = Vec::new();
        for (b, tr) in mats.iter().enumerate() {
            let [[a, bb, tx], [cc, d, ty]] = tr.matrix;
            let det = a * d - bb * cc;
            for ch in 0..c {
                let plane = &img[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        // Solve [a b; c d] p = q - t for the source point.
                        let (qu, qv) = (center(j, w) - tx, center(i, h) - ty);
                        let pu = (d * qu - bb * qv) / det;
                        let pv = (-cc * qu + a * qv) / det;
                        let x = (pu + 1.0) * w as f64 / 2.0 - 0.5;
                        let y = (pv + 1.0) * h as f64 / 2.0 - 0.5;
                        want.push(bilinear(plane, h, w, x, y));
                    }
                }
            }
        }
        // Pixel values live in [0, 1]; compare on that scale.
        got.iter().zip(&want).map(|(g, e)| (g - e).abs()).fold(0.0, f64::max)
    })
}

pub fn seg_l1_check() -> Check {
    run("loss_seg + loss_l1", TOL, 6, |rng| {
        let (n, c, h, w) = dims(rng);
        let len = n * c * h * w;
        let a = uniform(rng, len, -1.0, 1.0);
        let b = uniform(rng, len, -1.0, 1.0);
        let shape = [n, c, h, w];
        let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / len as f64;
        let mae = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / len as f64;
        let ta = t(a, &shape);
        let tb = t(b, &shape);
        rel_err(scalar(&loss_seg(&ta, &tb).unwrap()), mse).max(rel_err(scalar(&loss_l1(&ta, &tb).unwrap()), mae))
    })
}

pub fn lpips_check() -> Check {
    run("loss_lpips (stub features)", TOL, 7, |rng| {
        let (n, c, h, w) = dims(rng);
        let d = c * h * w;
        let m = rng.random_range(1..6);
        let a = uniform(rng, n * d, 0.0, 1.0);
        let b = uniform(rng, n * d, 0.0, 1.0);
        let wt = uniform(rng, m * d, -1.0, 1.0);
        let shape = [n, c, h, w];
        let feats = |x: &[f64]| -> Vec<f64> {
            let mut f = Vec::new();
            for s in 0..n {
                for r in 0..m {
                    f.push((0..d).map(|i| wt[r * d + i] * x[s * d + i]).sum());
                }
            }
            f
        };
        let (fa, fb) = (feats(&a), feats(&b));
        let want_linear = fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / fa.len() as f64;
        let want_identity = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
        let linear = LinearFeatures {
            weight: t(wt.clone(), &[m, d]),
        };
        let ta = t(a, &shape);
        let tb = t(b, &shape);
        let got_linear = scalar(&loss_lpips(&ta, &tb, &linear).unwrap());
        let got_identity = scalar(&loss_lpips(&ta, &tb, &IdentityFeatures).unwrap());
        rel_err(got_linear, want_linear).max(rel_err(got_identity, want_identity))
    })
}

/// `logits = tanh(x W1 + b1) · w2 + b2` with all parameters in one flat
/// vector, so the gradient suite can differentiate through it.
pub struct MlpCritic {
    pub theta: Tensor,
    pub inputs: usize,
    pub hidden: usize,
}

impl MlpCritic {
    pub fn param_count(inputs: usize, hidden: usize) -> usize {
        inputs * hidden + hidden + hidden + 1
    }

    pub fn oracle_logit(theta: &[f64], inputs: usize, hidden: usize, x: &[f64]) -> f64 {
        let w1 = &theta[..inputs * hidden];
        let b1 = &theta[inputs * hidden..inputs * hidden + hidden];
        let w2 = &theta[inputs * hidden + hidden..inputs * hidden + 2 * hidden];
        let b2 = theta[inputs * hidden + 2 * hidden];
        let mut z = b2;
        for j in 0..hidden {
            let a: f64 = (0..inputs).map(|i| x[i] * w1[i * hidden + j]).sum::<f64>() + b1[j];
            z += a.tanh() * w2[j];
        }
        z
    }
}

impl KeypointCritic for MlpCritic {
    fn logits(&self, kp: &Tensor) -> Result<Tensor> {
        let (n, ih) = (kp.dim(0)?, self.inputs * self.hidden);
        let x = kp.reshape((n, self.inputs))?;
        let w1 = self.theta.narrow(0, 0, ih)?.reshape((self.inputs, self.hidden))?;
        let b1 = self.theta.narrow(0, ih, self.hidden)?;
        let w2 = self.theta.narrow(0, ih + self.hidden, self.hidden)?.reshape((self.hidden, 1))?;
        let b2 = self.theta.narrow(0, ih + 2 * self.hidden, 1)?;
        let h = x.matmul(&w1)?.broadcast_add(&b1)?.tanh()?;
        Ok(h.matmul(&w2)?.reshape(n)?.broadcast_add(&b2)?)
    }
}

fn oracle_bce(z: f64, q: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    -(q * p.ln() + (1.0 - q) * (1.0 - p).ln())
}

pub fn adversarial_check() -> Check {
    run("loss_domain_confusion + loss_D", TOL, 8, |rng| {
        let k = rng.random_range(1..5);
        let hidden = rng.random_range(1..5);
        let (na, nb) = (rng.random_range(1..5), rng.random_range(1..5));
        let theta = uniform(rng, MlpCritic::param_count(2 * k, hidden), -1.0, 1.0);
        let kpa = uniform(rng, na * k * 2, -1.0, 1.0);
        let kpb = uniform(rng, nb * k * 2, -1.0, 1.0);
        let critic = MlpCritic {
            theta: t(theta.clone(), &[theta.len()]),
            inputs: 2 * k,
            hidden,
        };
        let za: Vec<f64> = kpa
            .chunks(2 * k)
            .map(|x| MlpCritic::oracle_logit(&theta, 2 * k, hidden, x))
            .collect();
        let zb: Vec<f64> = kpb
            .chunks(2 * k)
            .map(|x| MlpCritic::oracle_logit(&theta, 2 * k, hidden, x))
            .collect();
        let pair = |qa: f64, qb: f64| {
            (za.iter().map(|z| oracle_bce(*z, qa)).sum::<f64>() + zb.iter().map(|z| oracle_bce(*z, qb)).sum::<f64>())
                / (na + nb) as f64
        };
        let ta = t(kpa, &[na, k, 2]);
        let tb = t(kpb, &[nb, k, 2]);
        let dc = scalar(&loss_domain_confusion(&critic, &ta, &tb, ConfusionMode::BothToOne).unwrap());
        let dc_swapped = scalar(&loss_domain_confusion(&critic, &ta, &tb, ConfusionMode::Swapped).unwrap());
        let d = scalar(&loss_discriminator(&critic, &ta, &tb).unwrap());
        rel_err(dc, pair(1.0, 1.0))
            .max(rel_err(dc_swapped, pair(1.0, 0.0)))
            .max(rel_err(d, pair(0.0, 1.0)))
    })
}

pub fn temporal_check() -> Check {
    run("loss_temporal", TOL, 9, |rng| {
        let (n, k) = (rng.random_range(1..5), rng.random_range(1..7));
        let a = uniform(rng, n * k * 2, -1.0, 1.0);
        let b = uniform(rng, n * k * 2, -1.0, 1.0);
        let want = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (n * k) as f64;
        rel_err(scalar(&loss_temporal(&t(a, &[n, k, 2]), &t(b, &[n, k, 2])).unwrap()), want)
    })
}

pub fn equivariance_check() -> Check {
    run("loss_equivariance", TOL, 10, |rng| {
        let (n, k) = (rng.random_range(1..5), rng.random_range(1..7));
        let kp = uniform(rng, n * k * 2, -1.0, 1.0);
        let kw = uniform(rng, n * k * 2, -1.0, 1.0);
        let mats: Vec<[f64; 6]> = (0..n).map(|_| random_affine(rng)).collect();
        let params: Vec<AffineParams> = mats.iter().map(|m| AffineParams::from_flat(m).unwrap()).collect();
        let mut sum = 0.0;
        for b in 0..n {
            for l in 0..k {
                let i = (b * k + l) * 2;
                let (u, v) = map_point(&mats[b], kp[i], kp[i + 1]);
                sum += (u - kw[i]).abs() + (v - kw[i + 1]).abs();
            }
        }
        let want = sum / (n * k * 2) as f64;
        let got = scalar(&equivariance_from_keypoints(&t(kp, &[n, k, 2]), &t(kw, &[n, k, 2]), &params).unwrap());
        rel_err(got, want)
    })
}

pub fn separation_check() -> Check {
    run("loss_separation", TOL, 11, |rng| {
        let (n, k) = (rng.random_range(1..4), rng.random_range(1..7));
        let delta = rng.random_range(0.01..0.5);
        let kp = uniform(rng, n * k * 2, -0.5, 0.5);
        let mut sum = 0.0;
        for b in 0..n {
            for l in 0..k {
                for r in 0..k {
                    if l != r {
                        let (i, j) = ((b * k + l) * 2, (b * k + r) * 2);
                        let d2 = (kp[i] - kp[j]).powi(2) + (kp[i + 1] - kp[j + 1]).powi(2);
                        sum += (delta - d2).max(0.0);
                    }
                }
            }
        }
        let want = sum / (n * k * k) as f64;
        rel_err(scalar(&loss_separation(&t(kp, &[n, k, 2]), delta).unwrap()), want)
    })
}

pub fn silhouette_check() -> Check {
    run("loss_silhouette", TOL, 12, |rng| {
        let (n, k, h, w) = dims(rng);
        let heat = oracle_softmax(&uniform(rng, n * k * h * w, -3.0, 3.0), n, k, h * w, 1.0);
        let mask: Vec<f64> = (0..n * h * w)
            .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        let mut sum = 0.0;
        for b in 0..n {
            for l in 0..k {
                let mass: f64 = (0..h * w).map(|p| heat[(b * k + l) * h * w + p] * mask[b * h * w + p]).sum();
                sum += -mass.max(1e-8).ln();
            }
        }
        let want = sum / (n * k) as f64;
        let got = scalar(&loss_silhouette(&t(heat, &[n, k, h, w]), &t(mask, &[n, 1, h, w])).unwrap());
        rel_err(got, want)
    })
}

pub fn downsample_check() -> Check {
    run("downsample_mask", TOL, 13, |rng| {
        let n = rng.random_range(1..3);
        let (h, w, f) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let mask = uniform(rng, n * h * f * w * f, 0.0, 1.0);
        let got = vals(&downsample_mask(&t(mask.clone(), &[n, 1, h * f, w * f]), (h, w)).unwrap());
        let mut want = Vec::new();
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let mut s = 0.0;
                    for di in 0..f {
                        for dj in 0..f {
                            s += mask[b * h * f * w * f + (i * f + di) * w * f + j * f + dj];
                        }
                    }
                    want.push(s / (f * f) as f64);
                }
            }
        }
        max_rel_err(&got, &want)
    })
}

pub fn all() -> Vec<Check> {
    vec![
        spatial_softmax_check(),
        expect_keypoints_check(),
        project_keypoints_check(),
        apply_affine_check(),
        warp_check(),
        seg_l1_check(),
        lpips_check(),
        adversarial_check(),
        temporal_check(),
        equivariance_check(),
        separation_check(),
        silhouette_check(),
        downsample_check(),
    ]
}

