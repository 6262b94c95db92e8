//! Autodiff gradients against central finite differences in f64.

use candle_core::{Tensor, Var};
use jokr_core::keypoints::{
    expect_keypoints, project_keypoints, spatial_softmax, AffineParams, ConfidenceParams, DistanceExponent,
    HeatmapStack,
};
use jokr_core::losses::{
    equivariance_from_keypoints, loss_discriminator, loss_domain_confusion, loss_equivariance, loss_l1, loss_lpips,
    loss_seg, loss_separation, loss_silhouette, loss_temporal, ConfusionMode, KeypointExtractor, LinearFeatures,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::MlpCritic;
use super::{center, t, uniform, Check};

pub const STEP: f64 = 1e-4;
pub const TOL_LOSS: f64 = 1e-3;
pub const TOL_KEYPOINT: f64 = 1e-4;
/// Components smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-5;
const CASES: usize = 4;

type Input = (Vec<f64>, Vec<usize>);

/// Largest per-component error between backprop and central differences
/// over every entry of every input.
pub fn gradient_error(inputs: &[Input], f: impl Fn(&[Tensor]) -> Tensor) -> f64 {
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(v, s)| Var::from_tensor(&t(v.clone(), s)).unwrap())
        .collect();
    let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&tensors).backward().unwrap();

    let eval = |which: usize, idx: usize, delta: f64| -> f64 {
        let ts: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, (v, s))| {
                let mut v = v.clone();
                if i == which {
                    v[idx] += delta;
                }
                t(v, s)
            })
            .collect();
        super::scalar(&f(&ts))
    };

    let mut worst: f64 = 0.0;
    for (i, (v, _)) in inputs.iter().enumerate() {
        let analytic = match grads.get(vars[i].as_tensor()) {
            Some(g) => super::vals(g),
            None => vec![0.0; v.len()],
        };
        for (j, a) in analytic.iter().enumerate() {
            let numeric = (eval(i, j, STEP) - eval(i, j, -STEP)) / (2.0 * STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

fn run(name: &str, tol: f64, seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_err = (0..CASES).map(|_| case(&mut rng)).fold(0.0, f64::max);
    Check {
        name: format!("grad {name}"),
        cases: CASES,
        max_err,
        tol,
    }
}

/// Scalar readout `Σ r ⊙ y` so tensor-valued ops can be checked too.
fn readout(y: &Tensor, r: &[f64]) -> Tensor {
    (y * t(r.to_vec(), y.dims())).unwrap().sum_all().unwrap()
}

/// Pairs whose difference stays clear of the kink in `|x|`.
fn separated_pair(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let a = uniform(rng, n, -1.0, 1.0);
    let b = a
        .iter()
        .map(|x| {
            let d = rng.random_range(0.05..0.5);
            if rng.random_bool(0.5) {
                x + d
            } else {
                x - d
            }
        })
        .collect();
    (a, b)
}

const IMG: [usize; 4] = [4, 3, 8, 8];

pub fn seg() -> Check {
    run("L_seg", TOL_LOSS, 21, |rng| {
        let n = IMG.iter().product();
        let (a, b) = (uniform(rng, n, -1.0, 1.0), uniform(rng, n, -1.0, 1.0));
        gradient_error(&[(a, IMG.to_vec()), (b, IMG.to_vec())], |x| loss_seg(&x[0], &x[1]).unwrap())
    })
}

pub fn l1() -> Check {
    run("L_L1", TOL_LOSS, 22, |rng| {
        let (a, b) = separated_pair(rng, IMG.iter().product());
        gradient_error(&[(a, IMG.to_vec()), (b, IMG.to_vec())], |x| loss_l1(&x[0], &x[1]).unwrap())
    })
}

pub fn lpips() -> Check {
    run("L_LPIPS (stub)", TOL_LOSS, 23, |rng| {
        let shape = vec![2, 3, 4, 4];
        let d = 48;
        let m = 5;
        let weight = LinearFeatures {
            weight: t(uniform(rng, m * d, -1.0, 1.0), &[m, d]),
        };
        let a = uniform(rng, 2 * d, 0.0, 1.0);
        let b = uniform(rng, 2 * d, 0.0, 1.0);
        // The target side is detached by design, so only the prediction is checked.
        let target = t(b, &shape);
        gradient_error(&[(a, shape)], |x| loss_lpips(&x[0], &target, &weight).unwrap())
    })
}

const K: usize = 4;
const HIDDEN: usize = 3;

fn critic_inputs(rng: &mut ChaCha8Rng) -> Vec<Input> {
    let p = MlpCritic::param_count(2 * K, HIDDEN);
    vec![
        (uniform(rng, p, -1.0, 1.0), vec![p]),
        (uniform(rng, 3 * K * 2, -1.0, 1.0), vec![3, K, 2]),
        (uniform(rng, 2 * K * 2, -1.0, 1.0), vec![2, K, 2]),
    ]
}

fn critic(theta: &Tensor) -> MlpCritic {
    MlpCritic {
        theta: theta.clone(),
        inputs: 2 * K,
        hidden: HIDDEN,
    }
}

pub fn domain_confusion() -> Check {
    run("L_DC", TOL_LOSS, 24, |rng| {
        let inputs = critic_inputs(rng);
        gradient_error(&inputs, |x| {
            loss_domain_confusion(&critic(&x[0]), &x[1], &x[2], ConfusionMode::BothToOne).unwrap()
        })
        .max(gradient_error(&inputs, |x| {
            loss_domain_confusion(&critic(&x[0]), &x[1], &x[2], ConfusionMode::Swapped).unwrap()
        }))
    })
}

pub fn discriminator() -> Check {
    run("L_D", TOL_LOSS, 25, |rng| {
        let inputs = critic_inputs(rng);
        let (kpa, kpb) = (t(inputs[1].0.clone(), &inputs[1].1), t(inputs[2].0.clone(), &inputs[2].1));
        gradient_error(&inputs[..1], |x| loss_discriminator(&critic(&x[0]), &kpa, &kpb).unwrap())
    })
}

pub fn temporal() -> Check {
    run("L_tmp", TOL_LOSS, 26, |rng| {
        let s = vec![4, 6, 2];
        let (a, b) = (uniform(rng, 48, -1.0, 1.0), uniform(rng, 48, -1.0, 1.0));
        gradient_error(&[(a, s.clone()), (b, s)], |x| loss_temporal(&x[0], &x[1]).unwrap())
    })
}

fn random_similarity(rng: &mut ChaCha8Rng) -> AffineParams {
    AffineParams::similarity(
        rng.random_range(-0.4..0.4),
        rng.random_range(0.8..1.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
    )
}

pub fn equivariance() -> Check {
    run("L_eq", TOL_LOSS, 27, |rng| {
        let s = vec![3, 5, 2];
        let kp = uniform(rng, 30, -0.8, 0.8);
        let ts: Vec<AffineParams> = (0..3).map(|_| random_similarity(rng)).collect();
        // Place the warped set a clear margin away from t(kp) per coordinate.
        let mapped: Vec<f64> = kp
            .chunks(2)
            .enumerate()
            .flat_map(|(i, p)| ts[i / 5].apply_point([p[0], p[1]]))
            .collect();
        let kw: Vec<f64> = mapped
            .iter()
            .map(|m| m + rng.random_range(0.05..0.3) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        gradient_error(&[(kp, s.clone()), (kw, s)], |x| {
            equivariance_from_keypoints(&x[0], &x[1], &ts).unwrap()
        })
    })
}

/// Per-pixel linear scores, spatial softmax, then soft centroid.
pub struct CentroidExtractor {
    /// `(K, C)` channel weights.
    pub weight: Tensor,
    pub temperature: f64,
}

impl KeypointExtractor for CentroidExtractor {
    fn keypoints(&self, images: &Tensor) -> jokr_core::Result<Tensor> {
        let (n, c, h, w) = images.dims4()?;
        let k = self.weight.dim(0)?;
        let flat = images.reshape((n, c, h * w))?;
        let wt = self.weight.unsqueeze(0)?.broadcast_as((n, k, c))?.contiguous()?;
        let logits = wt.matmul(&flat)?.reshape((n, k, h, w))?;
        expect_keypoints(&spatial_softmax(&logits, self.temperature)?)
    }
}

pub fn equivariance_through_extractor() -> Check {
    run("L_eq (extractor)", TOL_LOSS, 28, |rng| {
        let shape = vec![2, 3, 8, 8];
        let frames = uniform(rng, 2 * 3 * 64, 0.0, 1.0);
        let weight = uniform(rng, 3 * 3, -2.0, 2.0);
        let ts: Vec<AffineParams> = (0..2).map(|_| random_similarity(rng)).collect();
        gradient_error(&[(frames, shape), (weight, vec![3, 3])], |x| {
            let ex = CentroidExtractor {
                weight: x[1].clone(),
                temperature: 0.5,
            };
            loss_equivariance(&ex, &x[0], &ts).unwrap()
        })
    })
}

pub fn separation() -> Check {
    run("L_sep", TOL_LOSS, 29, |rng| {
        let (n, k, delta) = (3, 6, 0.1);
        // Resample until no pair sits on the hinge.
        let kp = loop {
            let kp = uniform(rng, n * k * 2, -0.4, 0.4);
            let clear = (0..n).all(|b| {
                (0..k).all(|l| {
                    (0..k).all(|r| {
                        let (i, j) = ((b * k + l) * 2, (b * k + r) * 2);
                        let d2 = (kp[i] - kp[j]).powi(2) + (kp[i + 1] - kp[j + 1]).powi(2);
                        l == r || (d2 - delta).abs() > 1e-2
                    })
                })
            });
            if clear {
                break kp;
            }
        };
        gradient_error(&[(kp, vec![n, k, 2])], |x| loss_separation(&x[0], delta).unwrap())
    })
}

pub fn silhouette() -> Check {
    run("L_sill", TOL_LOSS, 30, |rng| {
        let shape = vec![4, 3, 8, 8];
        let logits = uniform(rng, 4 * 3 * 64, -2.0, 2.0);
        let mask = uniform(rng, 4 * 64, 0.05, 1.0);
        gradient_error(&[(logits, shape), (mask, vec![4, 1, 8, 8])], |x| {
            let heat = spatial_softmax(&x[0], 1.0).unwrap();
            loss_silhouette(heat.tensor(), &x[1]).unwrap()
        })
    })
}

pub fn expect() -> Check {
    run("expect_keypoints", TOL_KEYPOINT, 31, |rng| {
        let shape = vec![2, 3, 8, 8];
        let logits = t(uniform(rng, 2 * 3 * 64, -2.0, 2.0), &shape);
        let probs = super::vals(spatial_softmax(&logits, 1.0).unwrap().tensor());
        let r = uniform(rng, 2 * 3 * 2, -1.0, 1.0);
        gradient_error(&[(probs, shape)], |x| {
            let kp = expect_keypoints(&HeatmapStack::new(x[0].clone()).unwrap()).unwrap();
            readout(&kp, &r)
        })
    })
}

pub fn project() -> Check {
    run("project_keypoints", TOL_KEYPOINT, 32, |rng| {
        let (n, k, h, w) = (2, 3, 8, 8);
        // Keep keypoints off pixel centers, where |p - k| is not smooth.
        let kp: Vec<f64> = loop {
            let kp = uniform(rng, n * k * 2, -0.9, 0.9);
            let clear = kp.chunks(2).all(|p| {
                (0..h).all(|i| (0..w).all(|j| (p[0] - center(j, w)).hypot(p[1] - center(i, h)) > 0.02))
            });
            if clear {
                break kp;
            }
        };
        let r = uniform(rng, n * k * h * w, -1.0, 1.0);
        let mut worst: f64 = 0.0;
        for exponent in [DistanceExponent::Euclidean, DistanceExponent::Squared] {
            let params = ConfidenceParams {
                alpha: 1.0,
                sigma: 0.5,
                exponent,
            };
            worst = worst.max(gradient_error(&[(kp.clone(), vec![n, k, 2])], |x| {
                readout(&project_keypoints(&x[0], (h, w), &params).unwrap(), &r)
            }));
        }
        worst
    })
}

pub fn all() -> Vec<Check> {
    vec![
        seg(),
        l1(),
        lpips(),
        domain_confusion(),
        discriminator(),
        temporal(),
        equivariance(),
        equivariance_through_extractor(),
        separation(),
        silhouette(),
        expect(),
        project(),
    ]
}
