use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use starflow::loss::{
    flow_loss, occ_loss, sequence_loss, GtPyramid, LambdaMode, LossWeights, OccLossForm, Supervision,
};
use starflow::network::{LevelOutput, OcclusionMap, PairOutput, TemporalCarry};
use starflow::{FlowField, Tensor};

const TOL: f64 = 1e-12;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * (1.0 + a.abs().max(b.abs()))
}

fn naive_flow_loss(p: &[f64], g: &[f64], b: usize, hw: usize) -> f64 {
    let mut s = 0.0;
    for bi in 0..b {
        for i in 0..hw {
            let du = p[bi * 2 * hw + i] - g[bi * 2 * hw + i];
            let dv = p[bi * 2 * hw + hw + i] - g[bi * 2 * hw + hw + i];
            s += (du * du + dv * dv).sqrt();
        }
    }
    s
}

fn naive_occ_loss(p: &[f64], g: &[f64], b: usize, hw: usize) -> f64 {
    let n = hw as f64;
    let mut total = 0.0;
    for bi in 0..b {
        let (mut sp, mut sg) = (0.0, 0.0);
        for i in 0..hw {
            sp += p[bi * hw + i];
            sg += g[bi * hw + i];
        }
        let w = n / (sp + sg);
        let wbar = n / ((n - sp) + (n - sg));
        let mut s = 0.0;
        for i in 0..hw {
            let (pi, gi) = (p[bi * hw + i], g[bi * hw + i]);
            s += w * gi * pi.ln() + wbar * (1.0 - gi) * (1.0 - pi).ln();
        }
        total += -0.5 * s;
    }
    total
}

/// Average of each 2x2 block, halved.
fn naive_flow_down(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 0..planes {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let at = |dy: usize, dx: usize| x[p * h * w + (2 * y + dy) * w + 2 * xx + dx];
                out.push(0.5 * 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)));
            }
        }
    }
    out
}

fn naive_max_down(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 0..planes {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let at = |dy: usize, dx: usize| x[p * h * w + (2 * y + dy) * w + 2 * xx + dx];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn flow_loss_matches_scalar_loop(seed: u64, b in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * 2 * 64;
        let (p, g) = (uniform(&mut rng, n, -5.0, 5.0), uniform(&mut rng, n, -5.0, 5.0));
        let pred = FlowField::new(Tensor::new(&[b, 2, 8, 8], p.clone()).unwrap()).unwrap();
        let got = flow_loss(&pred, &Tensor::new(&[b, 2, 8, 8], g.clone()).unwrap()).unwrap().item();
        prop_assert!(close(got, naive_flow_loss(&p, &g, b, 64)));
    }

    #[test]
    fn occ_loss_matches_scalar_loop(seed: u64, b in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * 64;
        let (p, g) = (uniform(&mut rng, n, 0.01, 0.99), binary(&mut rng, n));
        let pred = OcclusionMap::new(Tensor::new(&[b, 1, 8, 8], p.clone()).unwrap()).unwrap();
        let gt = Tensor::new(&[b, 1, 8, 8], g.clone()).unwrap();
        let got = occ_loss(&pred, &gt, OccLossForm::Standard).unwrap().item();
        prop_assert!(close(got, naive_occ_loss(&p, &g, b, 64)), "{} vs {}", got, naive_occ_loss(&p, &g, b, 64));
    }

    #[test]
    fn occ_loss_gradient_matches_differences_of_scalar_loop(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, g) = (uniform(&mut rng, 64, 0.05, 0.95), binary(&mut rng, 64));
        let x = Tensor::variable(&[1, 1, 8, 8], p.clone()).unwrap();
        let gt = Tensor::new(&[1, 1, 8, 8], g.clone()).unwrap();
        let l = occ_loss(&OcclusionMap::new(x.clone()).unwrap(), &gt, OccLossForm::Standard).unwrap();
        l.backward().unwrap();
        let grad = x.grad().unwrap();
        let eps = 1e-6;
        for i in [0usize, 17, 42, 63] {
            let (mut a, mut c) = (p.clone(), p.clone());
            a[i] += eps;
            c[i] -= eps;
            let fd = (naive_occ_loss(&a, &g, 1, 64) - naive_occ_loss(&c, &g, 1, 64)) / (2.0 * eps);
            prop_assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{} vs {}", fd, grad[i]);
        }
    }

    #[test]
    fn gt_pyramid_matches_block_pooling(seed: u64, levels in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = 16;
        let f = uniform(&mut rng, 2 * side * side, -8.0, 8.0);
        let o = binary(&mut rng, side * side);
        let pyr = GtPyramid::build(
            &Tensor::new(&[1, 2, side, side], f.clone()).unwrap(),
            Some(&Tensor::new(&[1, 1, side, side], o.clone()).unwrap()),
            levels,
        ).unwrap();
        let (mut ef, mut eo, mut s) = (f, o, side);
        let occs = pyr.occs.unwrap();
        // fine to coarse
        for l in (0..levels).rev() {
            ef = naive_flow_down(&ef, 2, s, s);
            eo = naive_max_down(&eo, 1, s, s);
            s /= 2;
            prop_assert_eq!(pyr.flows[l].shape(), &[1, 2, s, s]);
            for (a, b) in pyr.flows[l].data().iter().zip(&ef) {
                prop_assert!(close(*a, *b));
            }
            prop_assert_eq!(occs[l].data(), &eo[..]);
        }
    }

    #[test]
    fn sequence_loss_matches_scalar_loop(seed: u64, steps in 1usize..4, lambda in 0.0f64..1.0, last_only: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 2usize;
        let alphas = vec![0.3, 0.7];
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let mut expect = 0.0;
        for t in 0..steps {
            let mut outs = Vec::new();
            let mut gflows = Vec::new();
            let mut goccs = Vec::new();
            let supervised = !last_only || t + 1 == steps;
            for (l, alpha) in alphas.iter().enumerate() {
                let s = 4 << l;
                let hw = s * s;
                let (pf, gf) = (uniform(&mut rng, b * 2 * hw, -3.0, 3.0), uniform(&mut rng, b * 2 * hw, -3.0, 3.0));
                let (po, go) = (uniform(&mut rng, b * hw, 0.02, 0.98), binary(&mut rng, b * hw));
                if supervised {
                    expect += alpha * (naive_flow_loss(&pf, &gf, b, hw) + lambda * naive_occ_loss(&po, &go, b, hw));
                }
                outs.push(LevelOutput {
                    flow: FlowField::new(Tensor::new(&[b, 2, s, s], pf).unwrap()).unwrap(),
                    occ: Some(OcclusionMap::new(Tensor::new(&[b, 1, s, s], po).unwrap()).unwrap()),
                });
                gflows.push(Tensor::new(&[b, 2, s, s], gf).unwrap());
                goccs.push(Tensor::new(&[b, 1, s, s], go).unwrap());
            }
            preds.push(PairOutput { levels: outs, carry: TemporalCarry::None });
            gts.push(Some(GtPyramid { flows: gflows, occs: Some(goccs) }));
        }
        expect /= (steps * b) as f64;
        let weights = LossWeights {
            alphas,
            lambda: LambdaMode::Fixed { lambda },
            occ_form: OccLossForm::Standard,
        };
        let sup = if last_only { Supervision::LastStep } else { Supervision::AllSteps };
        let got = sequence_loss(&preds, &gts, &weights, sup).unwrap();
        prop_assert!(close(got.total.item(), expect), "{} vs {}", got.total.item(), expect);
    }
}

#[test]
fn auto_lambda_balances_the_two_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = 8;
    let pf = uniform(&mut rng, 2 * s * s, -3.0, 3.0);
    let po = uniform(&mut rng, s * s, 0.1, 0.9);
    let pred = PairOutput {
        levels: vec![LevelOutput {
            flow: FlowField::new(Tensor::new(&[1, 2, s, s], pf).unwrap()).unwrap(),
            occ: Some(OcclusionMap::new(Tensor::new(&[1, 1, s, s], po).unwrap()).unwrap()),
        }],
        carry: TemporalCarry::None,
    };
    let gt = GtPyramid {
        flows: vec![Tensor::zeros(&[1, 2, s, s])],
        occs: Some(vec![Tensor::new(&[1, 1, s, s], binary(&mut rng, s * s)).unwrap()]),
    };
    let weights = LossWeights {
        alphas: vec![1.0],
        lambda: LambdaMode::Auto { fraction: 0.25 },
        occ_form: OccLossForm::Standard,
    };
    let t = sequence_loss(&[pred], &[Some(gt)], &weights, Supervision::AllSteps).unwrap();
    assert!(close(t.lambda * t.occ, 0.25 * t.flow));
    assert!(close(t.total.item(), 1.25 * t.flow));
}

#[test]
fn mismatched_level_weights_are_rejected() {
    let pred = PairOutput {
        levels: vec![LevelOutput {
            flow: FlowField::zeros(1, 4, 4),
            occ: None,
        }],
        carry: TemporalCarry::None,
    };
    let gt = GtPyramid {
        flows: vec![Tensor::zeros(&[1, 2, 4, 4])],
        occs: None,
    };
    let weights = LossWeights {
        alphas: vec![1.0, 2.0],
        ..LossWeights::default()
    };
    assert!(sequence_loss(&[pred.clone()], &[Some(gt.clone())], &weights, Supervision::AllSteps).is_err());
    assert!(sequence_loss(&[pred], &[None], &LossWeights { alphas: vec![1.0], ..LossWeights::default() }, Supervision::AllSteps).is_err());
}
