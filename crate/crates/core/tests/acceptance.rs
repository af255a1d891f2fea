//! Acceptance suite. Every criterion runs in sequence inside one test so the
//! timing-sensitive ones are not competing with each other for the CPU, and
//! each prints a single PASS/FAIL line.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use injectnet::config::{Profile, StageSchedule, TrainConfig};
use injectnet::detection::{batch_pool, roi_sampler, RoiBatch};
use injectnet::eval::{average_precision, iou, ScoredPrediction};
use injectnet::experiment::{self, DetectionTask};
use injectnet::grad_check::{run_suite, SuiteConfig, REGISTERED_OPS};
use injectnet::network::{
    self, ArchConfig, InjectionSite, NetworkParams, EVENT, NONRIGID, RIGID, SHARED,
};
use injectnet::synth::{self, generate_dataset, GeneratorConfig, Sample};
use injectnet::{BBox, Error, Tape, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok_or<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn short_schedule(iters: [usize; 3]) -> TrainConfig {
    let mut cfg = TrainConfig::for_profile(Profile::Desk);
    for (s, n) in cfg.stages.iter_mut().zip(iters) {
        // keep the desk step/iteration ratio of 0.6
        *s = StageSchedule {
            lr: s.lr,
            iters: n,
            step: (n * 3 / 5).max(1),
        };
    }
    cfg
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let reports = ok_or(run_suite(&SuiteConfig::default()))?;
    let elapsed = start.elapsed();
    check(reports.len() == REGISTERED_OPS.len(), || {
        format!("{} reports", reports.len())
    })?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        check(r.passed(), || {
            format!("{} failed: {:?}", r.op, r.max_rel_error)
        })?;
        check(r.instances >= 20, || {
            format!("{} ran {} instances", r.op, r.instances)
        })?;
        if let Some(e) = r.max_rel_error {
            check(e < 1e-4, || format!("{} max rel error {}", r.op, e))?;
            worst = worst.max(e);
        }
    }
    check(elapsed < Duration::from_secs(60), || {
        format!("took {:?}", elapsed)
    })?;
    Ok(format!(
        "{} ops x 20 instances, worst rel error {:.2e}, {:.1}s",
        reports.len(),
        worst,
        elapsed.as_secs_f64()
    ))
}

fn batch_pool_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let n = rng.random_range(1..=6);
        let shape = [
            rng.random_range(1..=4),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
        ];
        // a coarse value grid makes exact ties between maps common
        let maps: Vec<Tensor> = (0..n)
            .map(|_| {
                let len = shape.iter().product();
                let data = (0..len)
                    .map(|_| rng.random_range(-4..4) as f64 * 0.25)
                    .collect();
                Tensor::new(shape.to_vec(), data).unwrap()
            })
            .collect();
        let batch = ok_or(RoiBatch::new(
            maps.clone(),
            vec![0.5; n],
            vec![BBox::whole(8.0, 8.0); n],
        ))?;
        let out = ok_or(batch_pool(&batch))?;
        for (i, &v) in out.data().iter().enumerate() {
            let brute = maps
                .iter()
                .map(|m| m.data()[i])
                .fold(f64::NEG_INFINITY, f64::max);
            check(v == brute, || {
                format!("case {} element {}: {} vs {}", case, i, v, brute)
            })?;
        }

        let mut stacked_shape = vec![n];
        stacked_shape.extend_from_slice(&shape);
        let stacked = Tensor::new(
            stacked_shape,
            maps.iter().flat_map(|m| m.data().to_vec()).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.variable(stacked);
        let pooled = ok_or(tape.batch_pool(x))?;
        let weights: Vec<f64> = (0..out.numel())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let loss = ok_or(tape.weighted_sum(pooled, &weights))?;
        ok_or(tape.backward(loss))?;
        let grad = tape.grad(x).unwrap_or(&[]);
        check(grad.iter().all(|g| g.to_bits() == 0), || {
            format!("case {}: nonzero gradient reached the pooled maps", case)
        })?;
    }
    Ok("100 batches equal brute-force max; input gradients exactly +0".into())
}

fn wiring_audit() -> Outcome {
    let base = ArchConfig::default();
    check(base.c7 == 32, || "default c7 is not 32".into())?;
    let shared = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32);
    let branch = |c7_in: usize, fc_in: usize, k: usize| {
        (32 * 32 * 9 + 32) + (32 * c7_in * 9 + 32) + (k * fc_in + k)
    };
    let mut widths = Vec::new();
    for (site, c7_in, fc_in) in [
        (InjectionSite::None, 32, 32),
        (InjectionSite::C6, 96, 32),
        (InjectionSite::C7, 32, 96),
        (InjectionSite::Both, 96, 96),
    ] {
        let p = ok_or(network::build(&base.with_injection(site), 0))?;
        let fc = p.get(EVENT, "fc.weight").shape().to_vec();
        check(fc == [2, fc_in], || {
            format!("{}: FC_e weight {:?}", site, fc)
        })?;
        let c7 = p.get(EVENT, "c7.weight").shape().to_vec();
        check(c7 == [32, c7_in, 3, 3], || {
            format!("{}: C7_e weight {:?}", site, c7)
        })?;
        let expected = shared + branch(32, 32, 4) + branch(32, 32, 3) + branch(c7_in, fc_in, 2);
        check(p.num_values() == expected, || {
            format!(
                "{}: {} parameters, audit expects {}",
                site,
                p.num_values(),
                expected
            )
        })?;
        widths.push(format!("{}={}", site, fc_in));
    }
    Ok(format!("FC_e input widths {}", widths.join(" ")))
}

fn group_bytes(p: &NetworkParams, group: &str) -> Vec<u8> {
    p.group(group)
        .iter()
        .flat_map(|(name, t)| name.bytes().chain(t.to_dten()))
        .collect()
}

fn stage_discipline() -> Outcome {
    let data = ok_or(generate_dataset(&GeneratorConfig::default(), 24, 24, 11))?;
    let cfg = short_schedule([30, 15, 15]);
    let set = ok_or(experiment::training_set(&cfg, &data.train))?;
    let (_, stage2) = ok_or(experiment::train_stages_1_2(&cfg, &set))?;
    let stage2_file = stage2.to_bytes();
    let stage2 = ok_or(NetworkParams::from_bytes(&stage2_file, &cfg.arch))?;
    let inputs = ok_or(experiment::stage3_inputs(stage2.clone(), set))?;
    let mut lines = Vec::new();
    for site in [InjectionSite::C7, InjectionSite::Both] {
        let stage3 = ok_or(experiment::train_stage3(&cfg, &inputs, site))?;
        for g in [SHARED, RIGID, NONRIGID] {
            check(group_bytes(&stage3, g) == group_bytes(&stage2, g), || {
                format!("{}: group {} differs from the stage-2 checkpoint", site, g)
            })?;
        }
        check(
            group_bytes(&stage3, EVENT) != group_bytes(&stage2, EVENT),
            || format!("{}: event branch did not train", site),
        )?;
        let f2 = ok_or(experiment::split_features(&stage2, &data.test))?;
        let f3 = ok_or(experiment::split_features(&stage3, &data.test))?;
        for task in [DetectionTask::Rigid, DetectionTask::NonRigid] {
            let a = ok_or(experiment::detection_map(&f2, &data.test, task))?;
            let b = ok_or(experiment::detection_map(&f3, &data.test, task))?;
            check(a.to_bits() == b.to_bits(), || {
                format!("{}: {:?} AP {} vs {}", site, task, a, b)
            })?;
        }
        lines.push(site.to_string());
    }
    Ok(format!(
        "frozen groups byte-identical and detection APs equal for {}",
        lines.join(", ")
    ))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn trend() -> Outcome {
    let start = Instant::now();
    let (mut none, mut c7) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let data = ok_or(generate_dataset(
            &GeneratorConfig::default(),
            400,
            400,
            seed,
        ))?;
        let mut cfg = TrainConfig::for_profile(Profile::Desk);
        cfg.seed = seed;
        let rows = ok_or(experiment::ablate(
            &cfg,
            &data.train,
            &data.test,
            &[InjectionSite::None, InjectionSite::C7],
        ))?;
        report(format_args!(
            "  seed {}: event AP none {:.4}, c7 {:.4} (fused {:.4} / {:.4}); rigid AP {:.4}, non-rigid AP {:.4}",
            seed,
            rows[0].event_ap,
            rows[1].event_ap,
            rows[0].event_fused_ap,
            rows[1].event_fused_ap,
            rows[0].rigid_ap,
            rows[0].nonrigid_ap
        ));
        none.push(rows[0].event_ap);
        c7.push(rows[1].event_ap);
    }
    let elapsed = start.elapsed();
    let (m_none, m_c7) = (median(&mut none), median(&mut c7));
    let summary = format!(
        "median event AP none {:.4}, c7 {:.4}, gap {:+.4}, {:.0}s",
        m_none,
        m_c7,
        m_c7 - m_none,
        elapsed.as_secs_f64()
    );
    check(m_c7 >= m_none, || {
        format!("injection did not help: {}", summary)
    })?;
    check(m_none > 0.80 && m_c7 > 0.80, || {
        format!("AP below 0.80: {}", summary)
    })?;
    check(elapsed < Duration::from_secs(15 * 60), || {
        format!("too slow: {}", summary)
    })?;
    Ok(summary)
}

/// Precision/recall at every threshold, counted by brute force: the item at
/// each position of the (score desc, index asc) order sees exactly the items
/// ranked at or above it.
fn sweep_ap(preds: &[ScoredPrediction]) -> f64 {
    let num_pos = preds.iter().filter(|p| p.is_positive).count();
    let mut total = 0.0;
    for (i, p) in preds.iter().enumerate() {
        if !p.is_positive {
            continue;
        }
        let above: Vec<usize> = (0..preds.len())
            .filter(|&j| preds[j].score > p.score || (preds[j].score == p.score && j <= i))
            .collect();
        let hits = above.iter().filter(|&&j| preds[j].is_positive).count();
        total += hits as f64 / above.len() as f64;
    }
    total / num_pos as f64
}

fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..32 {
        for x in 0..32 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let in_a = px > a.x0 && px < a.x1 && py > a.y0 && py < a.y1;
            let in_b = px > b.x0 && px < b.x1 && py > b.y0 && py < b.y1;
            inter += (in_a && in_b) as u32;
            union += (in_a || in_b) as u32;
        }
    }
    inter as f64 / union as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = rng.random_range(1..60);
        let coarse = case % 2 == 0;
        let mut preds: Vec<ScoredPrediction> = (0..n)
            .map(|_| ScoredPrediction {
                score: if coarse {
                    rng.random_range(0..5) as f64
                } else {
                    rng.random()
                },
                is_positive: rng.random_bool(0.4),
            })
            .collect();
        preds[rng.random_range(0..n)].is_positive = true;
        let got = ok_or(average_precision(&preds))?;
        let diff = (got - sweep_ap(&preds)).abs();
        worst = worst.max(diff);
        check(diff < 1e-12, || {
            format!("AP case {}: off by {}", case, diff)
        })?;
    }
    let random_box = |rng: &mut ChaCha8Rng| {
        let (x0, y0) = (rng.random_range(0..28), rng.random_range(0..28));
        let (x1, y1) = (rng.random_range(x0 + 1..=32), rng.random_range(y0 + 1..=32));
        BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).unwrap()
    };
    for case in 0..500 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let diff = (iou(&a, &b) - pixel_iou(&a, &b)).abs();
        check(diff < 1e-9, || {
            format!("IoU case {}: {:?} {:?} off by {}", case, a, b, diff)
        })?;
    }
    Ok(format!(
        "200 AP cases (worst diff {:.1e}), 500 IoU cases match oracles",
        worst
    ))
}

fn no_panic<T>(f: impl FnOnce() -> injectnet::Result<T>) -> Result<bool, String> {
    panic::catch_unwind(AssertUnwindSafe(f))
        .map(|r| r.is_err())
        .map_err(|_| "decoder panicked".to_string())
}

fn train_all(cfg: &TrainConfig, train: &[Sample]) -> Result<Vec<Vec<u8>>, String> {
    let set = ok_or(experiment::training_set(cfg, train))?;
    let (p1, p2) = ok_or(experiment::train_stages_1_2(cfg, &set))?;
    let inputs = ok_or(experiment::stage3_inputs(p2.clone(), set))?;
    let p3 = ok_or(experiment::train_stage3(cfg, &inputs, InjectionSite::Both))?;
    Ok(vec![p1.to_bytes(), p2.to_bytes(), p3.to_bytes()])
}

fn determinism_and_serialization() -> Outcome {
    let data = ok_or(generate_dataset(&GeneratorConfig::default(), 12, 4, 3))?;
    let again = ok_or(generate_dataset(&GeneratorConfig::default(), 12, 4, 3))?;
    check(data.train == again.train && data.test == again.test, || {
        "dataset generation differs".into()
    })?;
    let cfg = short_schedule([12, 6, 6]);
    let first = train_all(&cfg, &data.train)?;
    let second = train_all(&cfg, &data.train)?;
    check(first == second, || {
        "checkpoints differ between identical runs".into()
    })?;

    let arch3 = cfg.arch.with_injection(InjectionSite::Both);
    for (bytes, arch) in first.iter().zip([&cfg.arch, &cfg.arch, &arch3]) {
        let back = ok_or(NetworkParams::from_bytes(bytes, arch))?;
        check(&back.to_bytes() == bytes, || {
            "DODC round trip is not byte-exact".into()
        })?;
    }
    for s in &data.train {
        let bytes = s.image.to_dten();
        let (t, used) = ok_or(Tensor::from_dten(&bytes))?;
        check(used == bytes.len() && t.to_dten() == bytes, || {
            "DTEN round trip is not byte-exact".into()
        })?;
    }

    // damaged checkpoints: every truncation point and random byte flips
    let ckpt = &first[2];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rejected = 0;
    for cut in (0..ckpt.len()).step_by(97) {
        check(
            no_panic(|| NetworkParams::from_bytes(&ckpt[..cut], &arch3))?,
            || format!("truncation at {} accepted", cut),
        )?;
        rejected += 1;
    }
    for _ in 0..300 {
        let mut bad = ckpt.clone();
        for _ in 0..rng.random_range(1..4) {
            let i = rng.random_range(0..bad.len());
            bad[i] ^= 1 << rng.random_range(0..8);
        }
        // a flip inside a float payload still decodes; it just must not panic
        no_panic(|| NetworkParams::from_bytes(&bad, &arch3))?;
    }
    let header_flip = {
        let mut bad = ckpt.clone();
        bad[6] ^= 0xff;
        bad
    };
    check(
        matches!(
            NetworkParams::from_bytes(&header_flip, &arch3),
            Err(Error::ConfigHash { .. })
        ),
        || "corrupted config hash accepted".into(),
    )?;

    // damaged dataset directories
    let dir = ok_or(tempfile::tempdir())?;
    ok_or(synth::write_dataset(dir.path(), &data))?;
    let image = dir.path().join("train/images/00003.dten");
    let bytes = ok_or(std::fs::read(&image))?;
    ok_or(std::fs::write(&image, &bytes[..bytes.len() - 5]))?;
    check(no_panic(|| synth::read_dataset(dir.path()))?, || {
        "truncated image accepted".into()
    })?;
    ok_or(std::fs::write(&image, &bytes))?;
    let ann = dir.path().join("test/annotations.json");
    let text = ok_or(std::fs::read_to_string(&ann))?;
    for cut in [0, 1, text.len() / 3, text.len() - 2] {
        ok_or(std::fs::write(&ann, &text[..cut]))?;
        check(
            matches!(
                panic::catch_unwind(|| synth::read_dataset(dir.path())),
                Ok(Err(Error::Dataset { .. }))
            ),
            || format!("annotations cut at {} not reported as a dataset error", cut),
        )?;
    }
    ok_or(std::fs::write(&ann, &text))?;
    check(synth::read_dataset(dir.path()).is_ok(), || {
        "restored dataset unreadable".into()
    })?;

    Ok(format!(
        "3 checkpoints bit-identical across runs; round trips exact; {} truncations and 300 bit-flip cases handled",
        rejected
    ))
}

/// Repeatedly takes the highest remaining score, lowest index first.
fn selection_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(scores.len()) {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if !taken[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

fn sampler_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut with_ties, mut short) = (0, 0);
    for case in 0..1000 {
        let n = rng.random_range(1..12);
        let k = rng.random_range(1..8);
        let scores: Vec<f64> = if case % 2 == 0 {
            (0..n)
                .map(|_| rng.random_range(0..4) as f64 / 4.0)
                .collect()
        } else {
            let mut s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            s.shuffle(&mut rng);
            s
        };
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        with_ties += sorted.windows(2).any(|w| w[0] == w[1]) as usize;
        short += (n < k) as usize;
        let maps: Vec<Tensor> = (0..n).map(|i| Tensor::full(&[1, 1, 1], i as f64)).collect();
        let boxes: Vec<BBox> = (0..n)
            .map(|i| BBox::new(0.0, 0.0, 1.0 + i as f64, 1.0).unwrap())
            .collect();
        let batch = ok_or(RoiBatch::new(maps, scores.clone(), boxes))?;
        let picked = ok_or(roi_sampler(&batch, k))?;
        let expected = selection_oracle(&scores, k);
        let got: Vec<usize> = picked.maps().iter().map(|m| m.data()[0] as usize).collect();
        check(got == expected, || {
            format!(
                "case {}: scores {:?} k {}: {:?} vs {:?}",
                case, scores, k, got, expected
            )
        })?;
        let want_scores: Vec<f64> = expected.iter().map(|&i| scores[i]).collect();
        check(picked.scores() == want_scores.as_slice(), || {
            format!("case {}: scores out of order", case)
        })?;
        check(
            picked
                .source_boxes()
                .iter()
                .zip(&expected)
                .all(|(b, &i)| b.x1 == 1.0 + i as f64),
            || format!("case {}: boxes not carried with their maps", case),
        )?;
    }
    Ok(format!(
        "1000 cases match the selection oracle ({} with ties, {} with N < k)",
        with_ties, short
    ))
}

/// Result lines go straight to stdout so they show up even when libtest
/// captures the output of a passing test.
fn report(line: std::fmt::Arguments) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", line);
    let _ = out.flush();
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 8] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 batch pooling oracle", batch_pool_oracle),
        ("3 injection wiring", wiring_audit),
        ("4 stage discipline", stage_discipline),
        ("5 injection trend", trend),
        ("6 metric oracles", metric_oracles),
        (
            "7 determinism and serialization",
            determinism_and_serialization,
        ),
        ("8 sampler contract", sampler_contract),
    ];
    // ACCEPTANCE_CRITERIA=1,6 runs a subset; the default is all of them
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let id = name.split(' ').next().unwrap();
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            report(format_args!("SKIP  criterion {}", name));
            continue;
        }
        let outcome = panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {}", msg))
        });
        match outcome {
            Ok(detail) => report(format_args!("PASS  criterion {}: {}", name, detail)),
            Err(detail) => {
                report(format_args!("FAIL  criterion {}: {}", name, detail));
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {:?}", failed);
}
