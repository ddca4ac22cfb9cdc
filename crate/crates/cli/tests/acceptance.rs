//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria 6 and 7 train the toy ablation (about an hour on one core).
//! Setting `STARFLOW_ACCEPTANCE_SKIP_ABLATION=1` reports them as SKIP.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use starflow::data::{decode_flo, encode_flo, read_kitti_png, write_kitti_png, Dataset, GenerateSpec, Image};
use starflow::flow_ops::{correlation, displacement_channel, warp};
use starflow::loss::{flow_loss, occ_loss, sequence_loss, GtPyramid, LambdaMode, LossWeights, OccLossForm, Supervision};
use starflow::network::{count_parameters, LevelOutput, OcclusionMap, PairOutput, StarCellState, TemporalCarry};
use starflow::train::{evaluate, run_ablation, AblationConfig, AblationReport};
use starflow::{no_grad, Binder, FlowField, ModelConfig, StarFlow, TemporalMode, Tensor};
use walkdir::WalkDir;

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn starflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_starflow"))
        .args(args)
        .current_dir(dir)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env_remove("STARFLOW_OUT")
        .output()
        .expect("binary runs")
}

fn run_ok(dir: &Path, args: &[&str]) -> Result<Output, String> {
    let o = starflow(dir, args);
    match o.status.code() {
        Some(0) => Ok(o),
        c => Err(format!("{args:?} exited with {c:?}: {}", String::from_utf8_lossy(&o.stderr).trim())),
    }
}

fn exit_code(dir: &Path, args: &[&str]) -> Option<i32> {
    starflow(dir, args).status.code()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn gradient_correctness() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = starflow(dir.path(), &["gradcheck"]);
    let elapsed = start.elapsed();
    let text = String::from_utf8_lossy(&o.stdout).to_string();
    ensure(o.status.code() == Some(0), format!("gradcheck exited with {:?}: {}", o.status.code(), text.trim()))?;
    let checks = text.lines().filter(|l| l.contains(" PASS ")).count();
    ensure(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!("{checks} checks passed in {:.1}s", elapsed.as_secs_f64()))
}

fn constant_flow(h: usize, w: usize, dx: f64, dy: f64) -> FlowField {
    let mut v = vec![dx; h * w];
    v.extend(vec![dy; h * w]);
    FlowField::new(Tensor::new(&[1, 2, h, w], v).unwrap()).unwrap()
}

fn unit_features(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    for p in 0..h * w {
        let n = (0..c).map(|ch| v[ch * h * w + p].powi(2)).sum::<f64>().sqrt();
        (0..c).for_each(|ch| v[ch * h * w + p] /= n);
    }
    v
}

fn warp_and_correlation_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (c, h, w) = (rng.random_range(1..5), rng.random_range(2..12), rng.random_range(2..12));
        let x = random_tensor(&[1, c, h, w], &mut rng, -1.0, 1.0);
        let y = warp(&x, &constant_flow(h, w, 0.0, 0.0)).unwrap();
        ensure(y.data() == x.data(), "zero-flow warp is not the identity")?;

        let (dx, dy) = (rng.random_range(-3i64..=3), rng.random_range(-3i64..=3));
        let y = warp(&x, &constant_flow(h, w, dx as f64, dy as f64)).unwrap();
        for ch in 0..c {
            for py in 0..h as i64 {
                for px in 0..w as i64 {
                    let (sx, sy) = (px + dx, py + dy);
                    let expected = if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                        0.0
                    } else {
                        x.data()[(ch * h + sy as usize) * w + sx as usize]
                    };
                    ensure(
                        y.data()[(ch * h + py as usize) * w + px as usize] == expected,
                        format!("shift ({dx}, {dy}) differs at ({px}, {py})"),
                    )?;
                }
            }
        }
    }
    let (c, h, w, d) = (8usize, 9usize, 10usize, 3usize);
    for _ in 0..20 {
        let (dx, dy) = (rng.random_range(-3i64..=3) as isize, rng.random_range(-3i64..=3) as isize);
        let f1 = unit_features(c, h, w, &mut rng);
        let mut f2 = unit_features(c, h, w, &mut rng);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (tx, ty) = (x + dx, y + dy);
                if tx >= 0 && ty >= 0 && tx < w as isize && ty < h as isize {
                    for ch in 0..c {
                        f2[(ch * h + ty as usize) * w + tx as usize] = f1[(ch * h + y as usize) * w + x as usize];
                    }
                }
            }
        }
        let t = |v| Tensor::new(&[1, c, h, w], v).unwrap();
        let cv = correlation(&t(f1), &t(f2), d).unwrap();
        let want = displacement_channel(dx, dy, d);
        for y in 0..h as isize {
            for x in 0..w as isize {
                if x + dx < 0 || y + dy < 0 || x + dx >= w as isize || y + dy >= h as isize {
                    continue;
                }
                let p = y as usize * w + x as usize;
                let best = (0..(2 * d + 1).pow(2))
                    .max_by(|&a, &b| cv.data()[a * h * w + p].total_cmp(&cv.data()[b * h * w + p]))
                    .unwrap();
                ensure(best == want, format!("argmax {best} for shift ({dx}, {dy})"))?;
            }
        }
    }
    Ok("20 identity, 20 integer-shift and 20 argmax cases".into())
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
        let (wpos, wneg) = (n / (sp + sg), n / ((n - sp) + (n - sg)));
        let mut s = 0.0;
        for i in 0..hw {
            let (pi, gi) = (p[bi * hw + i], g[bi * hw + i]);
            s += wpos * gi * pi.ln() + wneg * (1.0 - gi) * (1.0 - pi).ln();
        }
        total += -0.5 * s;
    }
    total
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

fn loss_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut track = |a: f64, b: f64| -> Result<(), String> {
        worst = worst.max((a - b).abs() / (1.0 + a.abs().max(b.abs())));
        ensure(close(a, b), format!("{a} vs oracle {b}"))
    };
    for case in 0..100 {
        let (s, b) = (8usize, 2usize);
        let hw = s * s;
        let pf: Vec<f64> = (0..b * 2 * hw).map(|_| rng.random_range(-4.0..4.0)).collect();
        let gf: Vec<f64> = (0..b * 2 * hw).map(|_| rng.random_range(-4.0..4.0)).collect();
        let po: Vec<f64> = (0..b * hw).map(|_| rng.random_range(0.01..0.99)).collect();
        let go: Vec<f64> = (0..b * hw).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
        let flow = FlowField::new(Tensor::new(&[b, 2, s, s], pf.clone()).unwrap()).unwrap();
        let occ = OcclusionMap::new(Tensor::new(&[b, 1, s, s], po.clone()).unwrap()).unwrap();
        let gflow = Tensor::new(&[b, 2, s, s], gf.clone()).unwrap();
        let gocc = Tensor::new(&[b, 1, s, s], go.clone()).unwrap();
        let (lf, lo) = (naive_flow_loss(&pf, &gf, b, hw), naive_occ_loss(&po, &go, b, hw));
        track(flow_loss(&flow, &gflow).unwrap().item(), lf)?;
        track(occ_loss(&occ, &gocc, OccLossForm::Standard).unwrap().item(), lo)?;

        // one step, one level: the sequence loss is the batch mean of both terms
        let lambda = 0.05 + 0.01 * case as f64;
        let pred = PairOutput {
            levels: vec![LevelOutput { flow, occ: Some(occ) }],
            carry: TemporalCarry::None,
        };
        let gt = GtPyramid { flows: vec![gflow], occs: Some(vec![gocc]) };
        let weights = LossWeights {
            alphas: vec![0.32],
            lambda: LambdaMode::Fixed { lambda },
            occ_form: OccLossForm::Standard,
        };
        let total = sequence_loss(&[pred], &[Some(gt)], &weights, Supervision::AllSteps).unwrap().total.item();
        track(total, 0.32 * (lf + lambda * lo) / b as f64)?;

        // pyramid: 2x2 block mean halved for flow, block max for occlusion
        let fine_f: Vec<f64> = (0..2 * 4 * hw).map(|_| rng.random_range(-4.0..4.0)).collect();
        let fine_o: Vec<f64> = (0..4 * hw).map(|_| f64::from(u8::from(rng.random_bool(0.2)))).collect();
        let pyr = GtPyramid::build(
            &Tensor::new(&[1, 2, 2 * s, 2 * s], fine_f.clone()).unwrap(),
            Some(&Tensor::new(&[1, 1, 2 * s, 2 * s], fine_o.clone()).unwrap()),
            1,
        )
        .unwrap();
        let w2 = 2 * s;
        for ch in 0..2 {
            for y in 0..s {
                for x in 0..s {
                    let at = |dy: usize, dx: usize| fine_f[(ch * w2 + 2 * y + dy) * w2 + 2 * x + dx];
                    let mean = 0.5 * 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                    track(pyr.flows[0].data()[(ch * s + y) * s + x], mean)?;
                }
            }
        }
        let occs = pyr.occs.unwrap();
        for y in 0..s {
            for x in 0..s {
                let at = |dy: usize, dx: usize| fine_o[(2 * y + dy) * w2 + 2 * x + dx];
                let max = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                ensure(occs[0].data()[y * s + x] == max, "occlusion pyramid differs")?;
            }
        }
    }
    Ok(format!("100 cases, worst relative difference {worst:.1e}"))
}

fn structural_parameter_claims() -> Verdict {
    let def = ModelConfig::default();
    let deep = |levels: usize| ModelConfig {
        levels,
        encoder_widths: vec![16; levels],
        ..def.clone()
    };
    // (a)
    let decoders: Vec<usize> = [3, 4, 5].iter().map(|&l| count_parameters(&deep(l)).decoder).collect();
    ensure(decoders.iter().all(|&d| d == decoders[0]), format!("shared decoder sizes {decoders:?}"))?;
    // (b)
    let base = count_parameters(&ModelConfig { use_occlusion: false, ..def.clone() });
    let occ = count_parameters(&ModelConfig { use_occlusion: true, ..def.clone() });
    let per_instance = def.kernel * def.kernel * def.penultimate_width() + 1;
    let delta = occ.total - base.total;
    ensure(delta == per_instance * base.decoder_instances, format!("occlusion adds {delta}, expected {per_instance}"))?;
    ensure(100 * delta < base.total, format!("occlusion adds {delta} of {}", base.total))?;
    for l in [3, 4, 5] {
        let b = count_parameters(&ModelConfig { use_occlusion: false, ..deep(l) });
        let o = count_parameters(&ModelConfig { use_occlusion: true, ..deep(l) });
        ensure(o.total - b.total == per_instance, format!("L={l}: occlusion delta {}", o.total - b.total))?;
    }
    // (c)
    let mut factors = Vec::new();
    for l in [3, 4, 5] {
        let s = count_parameters(&deep(l)).decoder;
        let u = count_parameters(&ModelConfig { share_decoder: false, ..deep(l) }).decoder;
        ensure(u == l * s, format!("L={l}: unshared {u} vs shared {s}"))?;
        let factor = u as f64 / s as f64;
        ensure(factor >= l as f64 - 0.01, format!("L={l}: factor {factor}"))?;
        factors.push(factor);
    }
    // (d)
    let total = |m| count_parameters(&ModelConfig { temporal_mode: m, ..def.clone() }).total;
    let (two, trflow, trfeat) = (total(TemporalMode::None), total(TemporalMode::TrFlow), total(TemporalMode::TrFeat));
    ensure(trfeat - two > trflow - two, format!("TRFeat +{} vs TRFlow +{}", trfeat - two, trflow - two))?;
    Ok(format!(
        "decoder {} for L=3..5, occlusion +{delta} (+{:.2}%), sharing factors {factors:?}, TRFlow +{} TRFeat +{}",
        decoders[0],
        100.0 * delta as f64 / base.total as f64,
        trflow - two,
        trfeat - two
    ))
}

fn temporal_equivalence() -> Verdict {
    let cfg = ModelConfig {
        temporal_mode: TemporalMode::None,
        ..ModelConfig::tiny()
    };
    let two = StarFlow::new(cfg.clone(), 5).unwrap();
    let mut twin = StarFlow::new(ModelConfig { temporal_mode: TemporalMode::TrFeat, ..cfg }, 9).unwrap();
    let mut reshaped = 0;
    for p in twin.params.iter_mut() {
        let src = two.params.by_name(&p.name).ok_or(format!("{} missing from the two-frame model", p.name));
        let Ok(src) = src else { continue };
        if src.shape == p.shape {
            p.value.clone_from(&src.value);
            continue;
        }
        // temporal inputs are the trailing input channels
        reshaped += 1;
        let (cout, cin, kk) = (p.shape[0], p.shape[1], p.shape[2] * p.shape[3]);
        let cin_old = src.shape[1];
        for co in 0..cout {
            for ci in 0..cin {
                for t in 0..kk {
                    p.value[(co * cin + ci) * kk + t] =
                        if ci < cin_old { src.value[(co * cin_old + ci) * kk + t] } else { 0.0 };
                }
            }
        }
    }
    ensure(reshaped == 1, format!("{reshaped} reshaped parameters"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..10 {
        let i1 = random_tensor(&[1, 3, 16, 16], &mut rng, 0.0, 1.0);
        let i2 = random_tensor(&[1, 3, 16, 16], &mut rng, 0.0, 1.0);
        let run = |m: &StarFlow| {
            no_grad(|| {
                let b = Binder::frozen(&m.params);
                m.forward_images(&b, &i1, &i2, &StarCellState::invalid()).unwrap()
            })
        };
        let (a, b) = (run(&two), run(&twin));
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            ensure(la.flow.tensor().data() == lb.flow.tensor().data(), format!("flow differs on input {case}"))?;
            let (oa, ob) = (la.occ.as_ref().unwrap().tensor(), lb.occ.as_ref().unwrap().tensor());
            ensure(oa.data() == ob.data(), format!("occlusion differs on input {case}"))?;
        }
    }
    Ok("10 inputs bit-identical".into())
}

fn load_spec(name: &str) -> GenerateSpec {
    toml::from_str(&fs::read_to_string(repo_root().join("configs").join(name)).unwrap()).unwrap()
}

struct AblationRun {
    report: AblationReport,
    elapsed: Duration,
    /// Occlusion-region EPE of every trained TRFeat model for N' = 2..=6.
    sweeps: Vec<Result<Vec<f64>, String>>,
}

fn run_toy_ablation() -> AblationRun {
    let cfg: AblationConfig =
        toml::from_str(&fs::read_to_string(repo_root().join("configs/toy_ablation.toml")).unwrap()).unwrap();
    let start = Instant::now();
    let train_set = Dataset::generate(&load_spec("toy_train.toml"), 1000).unwrap();
    let test = Dataset::generate(&load_spec("toy_test.toml"), 64).unwrap();
    let mut sweeps = Vec::new();
    let report = run_ablation(&cfg, &train_set, &test, |arm, seed, model, r| {
        eprintln!(
            "  trained {} seed {seed}: epe_all {:.4} epe_occ {:.4} after {:.0}s",
            arm.name,
            r.epe_all.unwrap_or(f64::NAN),
            r.epe_occ.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
        if arm.temporal_mode == TemporalMode::TrFeat {
            let sweep = (2..=test.frames())
                .map(|n| {
                    evaluate(model, &test, n)
                        .map_err(|e| format!("N'={n}: {e}"))
                        .and_then(|ev| ev.summary.epe_occ.ok_or(format!("N'={n}: no occluded pixels")))
                })
                .collect();
            sweeps.push(sweep);
        }
    })
    .unwrap();
    AblationRun {
        report,
        elapsed: start.elapsed(),
        sweeps,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn directional_ablation(run: &AblationRun) -> Verdict {
    let r = &run.report;
    let get = |arm: &str| r.row(arm).ok_or(format!("no arm {arm}")).map(|row| &row.median);
    let (noocc, occ) = (get("2F-noocc-shared")?, get("2F-occ-shared")?);
    let (trflow, trfeat) = (get("TRFlow-occ-shared")?, get("TRFeat-occ-shared")?);
    let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
    let detail = format!(
        "all-EPE 2F {:.4} -> 2F+occ {:.4}; occ-EPE 2F {:.4}, TRFlow {:.4}, TRFeat {:.4}; {:.0}s",
        v(noocc.epe_all),
        v(occ.epe_all),
        v(occ.epe_occ),
        v(trflow.epe_occ),
        v(trfeat.epe_occ),
        run.elapsed.as_secs_f64()
    );
    let mut failed = Vec::new();
    if !(v(occ.epe_all) < v(noocc.epe_all)) {
        failed.push("(i)");
    }
    if !(v(trfeat.epe_occ) < v(occ.epe_occ)) {
        failed.push("(ii)");
    }
    if !(v(trfeat.epe_occ) <= v(trflow.epe_occ)) {
        failed.push("(iii)");
    }
    if run.elapsed >= Duration::from_secs(2 * 3600) {
        failed.push("runtime");
    }
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{} not met: {detail}", failed.join(" ")))
    }
}

fn frame_sweep(run: &AblationRun) -> Verdict {
    let mut per_seed = Vec::new();
    for s in &run.sweeps {
        per_seed.push(s.clone()?);
    }
    ensure(!per_seed.is_empty(), "no TRFeat model was trained")?;
    let at = |n: usize| median(per_seed.iter().map(|s| s[n - 2]).collect());
    let curve: Vec<String> = (2..2 + per_seed[0].len()).map(|n| format!("N'={n} {:.4}", at(n))).collect();
    ensure(at(4) <= at(2), format!("occ-EPE rises from N'=2 to N'=4: {}", curve.join(", ")))?;
    Ok(format!("median occ-EPE {}", curve.join(", ")))
}

fn parser_round_trips() -> Verdict {
    const FIXTURE: [u8; 28] = [
        0x50, 0x49, 0x45, 0x48, 2, 0, 0, 0, 1, 0, 0, 0, 0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0x3f, 0x00,
        0x00, 0x80, 0xbf, 0x00, 0x00, 0x00, 0x00,
    ];
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let data = (0..2 * h * w).map(|_| f64::from(rng.random_range(0u16..u16::MAX)) / 64.0 - 512.0).collect();
        let flow = Image::from_vec(2, h, w, data).unwrap();
        let back = decode_flo(&encode_flo(&flow).unwrap(), Path::new("x.flo")).unwrap();
        ensure(back == flow, ".flo round trip differs")?;
        write_kitti_png(&flow, None, &d.join("k.png")).unwrap();
        ensure(read_kitti_png(&d.join("k.png")).unwrap().0 == flow, "KITTI round trip differs")?;
    }
    fs::write(d.join("fixture.flo"), FIXTURE).unwrap();
    run_ok(d, &["convert", "fixture.flo", "fixture.png"])?;
    run_ok(d, &["convert", "fixture.png", "back.flo"])?;
    ensure(fs::read(d.join("back.flo")).unwrap() == FIXTURE, "fixture changed through KITTI PNG")?;

    let mut bad = FIXTURE;
    bad[0] = 0;
    fs::write(d.join("magic.flo"), bad).unwrap();
    fs::write(d.join("short.flo"), &FIXTURE[..20]).unwrap();
    fs::write(d.join("junk.png"), b"junk").unwrap();
    run_ok(d, &["convert", "fixture.flo", "rgb.png", "--color"])?;
    for input in ["magic.flo", "short.flo", "junk.png", "rgb.png"] {
        let c = exit_code(d, &["convert", input, "out.flo"]);
        ensure(c == Some(2), format!("{input} exited with {c:?}"))?;
    }
    Ok("50 random fields, 28-byte fixture, 4 malformed files rejected with exit 2".into())
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    WalkDir::new(root)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(root).unwrap().to_path_buf(), fs::read(e.path()).unwrap()))
        .collect()
}

fn reproducibility() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("suite.toml"), "frames = 4\nseed = 3\n[suite]\nwidth = 16\nheight = 16\n").unwrap();
    fs::write(
        d.join("exp.toml"),
        "[model]\nlevels = 3\nencoder_widths = [8, 12, 12]\nfeature_width = 8\nestimator_widths = [12, 8]\n\
         context_width = 8\ncontext_dilations = [1, 2, 1]\nmax_disp = 1\ntemporal_width = 4\ntemporal_mode = \"trfeat\"\n\
         [train]\niterations = 3\nbatch_size = 2\nlearning_rate = 1e-3\nseq_len = 3\n",
    )
    .unwrap();
    fs::write(
        d.join("abl.toml"),
        "pretrain_iterations = 1\nseeds = [0, 1]\neval_frames = 3\n[base.model]\nlevels = 3\n\
         encoder_widths = [8, 12, 12]\nfeature_width = 8\nestimator_widths = [12, 8]\ncontext_width = 8\n\
         context_dilations = [1, 2, 1]\nmax_disp = 1\ntemporal_width = 4\n[base.train]\niterations = 1\nbatch_size = 2\nseq_len = 3\n",
    )
    .unwrap();
    run_ok(d, &["generate", "--spec", "suite.toml", "--count", "3", "--out", "ds"])?;
    run_ok(d, &["train", "--config", "exp.toml", "--data", "ds", "--out", "tr"])?;
    run_ok(d, &["convert", "ds/seq_00000/flow_00.flo", "f.flo"])?;
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("generate", vec!["generate", "--spec", "suite.toml", "--count", "2", "--out"]),
        ("train", vec!["train", "--config", "exp.toml", "--data", "ds", "--pretrain-iterations", "2", "--validation", "ds", "--out"]),
        ("eval", vec!["eval", "--checkpoint", "tr/model.ckpt", "--data", "ds", "--frames", "2", "--frames", "4", "--viz", "--per-sample", "--out"]),
        ("gradcheck", vec!["gradcheck", "--config", "exp.toml", "--samples", "4", "--out"]),
        ("params", vec!["params", "--config", "exp.toml", "--arms", "full", "--out"]),
        ("ablate", vec!["ablate", "--config", "abl.toml", "--train", "ds", "--test", "ds", "--out"]),
    ];
    for (name, args) in &commands {
        let mut trees = Vec::new();
        for run in ["a", "b"] {
            let out = format!("{run}/{name}");
            let mut full = args.clone();
            full.push(&out);
            run_ok(d, &full)?;
            trees.push(tree(&d.join(&out)));
        }
        ensure(trees[0] == trees[1], format!("{name} outputs differ between runs"))?;
    }
    let single: Vec<(&str, Vec<&str>)> = vec![
        ("infer", vec!["infer", "--checkpoint", "tr/model.ckpt", "ds/seq_00000/frame_00.png", "ds/seq_00000/frame_01.png", "ds/seq_00000/frame_02.png", "--out"]),
        ("convert", vec!["convert", "f.flo", "--color"]),
    ];
    for (name, args) in &single {
        let mut files = Vec::new();
        for run in ["a", "b"] {
            fs::create_dir_all(d.join(run)).unwrap();
            let out = format!("{run}/{name}.{}", if *name == "infer" { "flo" } else { "png" });
            let mut full = args.clone();
            if *name == "convert" {
                full.insert(2, &out);
            } else {
                full.push(&out);
            }
            run_ok(d, &full)?;
            let manifest = format!("{out}.manifest.json");
            files.push((fs::read(d.join(&out)).unwrap(), fs::read(d.join(manifest)).unwrap()));
        }
        ensure(files[0] == files[1], format!("{name} outputs differ between runs"))?;
    }
    Ok(format!("{} commands rerun byte-identically", commands.len() + single.len()))
}

fn report(number: usize, name: &str, verdict: std::thread::Result<Verdict>) -> bool {
    let (status, detail, pass) = match verdict {
        Ok(Ok(d)) => ("PASS", d, true),
        Ok(Err(d)) => ("FAIL", d, false),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            ("FAIL", format!("panicked: {msg}"), false)
        }
    };
    println!("criterion {number} {name}: {status} ({detail})");
    pass
}

fn check(number: usize, name: &str, f: &dyn Fn() -> Verdict) -> bool {
    report(number, name, catch_unwind(AssertUnwindSafe(f)))
}

fn main() {
    let mut all = true;
    all &= check(1, "gradient correctness", &gradient_correctness);
    all &= check(2, "warp and correlation oracles", &warp_and_correlation_oracles);
    all &= check(3, "loss oracle equivalence", &loss_oracles);
    all &= check(4, "structural parameter claims", &structural_parameter_claims);
    all &= check(5, "temporal equivalence", &temporal_equivalence);
    if std::env::var_os("STARFLOW_ACCEPTANCE_SKIP_ABLATION").is_some() {
        println!("criterion 6 directional ablation: SKIP (STARFLOW_ACCEPTANCE_SKIP_ABLATION set)");
        println!("criterion 7 frame-count sweep: SKIP (STARFLOW_ACCEPTANCE_SKIP_ABLATION set)");
    } else {
        match catch_unwind(run_toy_ablation) {
            Ok(run) => {
                all &= check(6, "directional ablation", &|| directional_ablation(&run));
                all &= check(7, "frame-count sweep", &|| frame_sweep(&run));
            }
            Err(_) => {
                println!("criterion 6 directional ablation: FAIL (ablation run panicked)");
                println!("criterion 7 frame-count sweep: FAIL (ablation run panicked)");
                all = false;
            }
        }
    }
    all &= check(8, "parser round trips", &parser_round_trips);
    all &= check(9, "reproducibility", &reproducibility);
    if !all {
        std::process::exit(1);
    }
}
