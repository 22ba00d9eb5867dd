//! Acceptance suite: one check per criterion, each printing a PASS/FAIL line.
//! Runs as a plain binary so the lines are always visible; it exits non-zero
//! when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{anchor_grid, atss_oracle, brute_force_min, corner_set, grid_box, tal_oracle};
use densup::assign::{atss_assign, hungarian_match, task_aligned_assign, CostMatrix, TaskAlignedParams};
use densup::data::{DatasetSpec, Image, SyntheticSpec};
use densup::eval::{evaluate_ap, interpolated_ap, GroundTruth};
use densup::geometry::{diff, BoxFormat, BoxSet};
use densup::losses::{
    box_regression_loss, decode_distribution, detection_loss, distribution_focal_loss, total_loss, varifocal_loss,
    DetectionLossWeights, LossWeights, VarifocalParams,
};
use densup::masks::{compose_full_mask, generate_masks, FullMask, GroupLayout, MaskMode, PerturbationMask, BLOCKED};
use densup::model::{
    Attention, Decoder, DecoderDims, Detection, Detector, ForwardOptions, MaskVars, ModelConfig, ParamStore,
    AUX_PREFIX, AUX_SCOPE,
};
use densup::train::{
    batch_loss, save_run, train, Branches, RunConfig, TrainingRun, CHECKPOINT_FILE, LOSSES_FILE,
};
use densup_tensor::gradcheck::{check_gradients, DEFAULT_STEP};
use densup_tensor::{Result as TResult, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random values with magnitude in [0.1, 2): keeps kinked ops off their kinks.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(0.1..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn instance_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed * 7919 + 13)
}

fn lift<T>(r: densup::Result<T>) -> TResult<T> {
    r.map_err(|e| match e {
        densup::Error::Tensor(t) => t,
        other => panic!("{other}"),
    })
}

fn weighted_sum(t: &mut Tape, v: Var, seed: u64) -> TResult<Var> {
    let shape = t.shape(v)?.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = t.constant(uniform(&mut rng, &shape, -1.0, 1.0))?;
    let p = t.mul(v, w)?;
    t.sum(p)
}

type MakeInputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Build = Box<dyn Fn(&mut Tape, &[Var], u64) -> TResult<Var>>;

fn op(make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static, f: impl Fn(&mut Tape, &[Var]) -> TResult<Var> + 'static) -> (MakeInputs, Build) {
    (
        Box::new(make),
        Box::new(move |t: &mut Tape, v: &[Var], seed: u64| {
            let out = f(t, v)?;
            weighted_sum(t, out, seed)
        }),
    )
}

fn smooth_boxes(rng: &mut ChaCha8Rng, n: usize) -> (Tensor, BoxSet) {
    'outer: loop {
        let pred = uniform(rng, &[n, 4], 0.2, 0.8);
        let target: Vec<[f64; 4]> = (0..n)
            .map(|_| [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5)])
            .collect();
        for (r, t) in target.iter().enumerate() {
            let p = pred.row(r);
            let pc = [p[0] - p[2] / 2.0, p[1] - p[3] / 2.0, p[0] + p[2] / 2.0, p[1] + p[3] / 2.0];
            let tc = [t[0] - t[2] / 2.0, t[1] - t[3] / 2.0, t[0] + t[2] / 2.0, t[1] + t[3] / 2.0];
            let overlaps = [pc[2].min(tc[2]) - pc[0].max(tc[0]), pc[3].min(tc[3]) - pc[1].max(tc[1])];
            let near_kink = (0..4)
                .map(|k| (p[k] - t[k]).abs())
                .chain((0..4).map(|k| (pc[k] - tc[k]).abs()))
                .chain(overlaps.iter().map(|o| o.abs()))
                .any(|g| g < 1e-3);
            if near_kink {
                continue 'outer;
            }
        }
        return (pred, BoxSet::center_size(target).unwrap());
    }
}

fn gradient_cases() -> Vec<(&'static str, MakeInputs, Build)> {
    let mut cases: Vec<(&'static str, MakeInputs, Build)> = Vec::new();
    let mut push = |name: &'static str, (m, b): (MakeInputs, Build)| cases.push((name, m, b));
    let one = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 4], -2.0, 2.0)];
    let two = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)];
    push("add", op(two, |t, v| t.add(v[0], v[1])));
    push("sub", op(two, |t, v| t.sub(v[0], v[1])));
    push("mul", op(two, |t, v| t.mul(v[0], v[1])));
    push("div", op(|r| vec![uniform(r, &[3, 4], -2.0, 2.0), off_zero(r, &[3, 4])], |t, v| t.div(v[0], v[1])));
    push("minimum", op(|r| { let a = uniform(r, &[3, 4], -2.0, 2.0); let b = a.map(|x| x + 0.5); vec![a, b.map(|x| if x > 1.0 { x - 1.0 } else { x })] }, |t, v| t.minimum(v[0], v[1])));
    push("maximum", op(|r| { let a = uniform(r, &[3, 4], -2.0, 2.0); let b = a.map(|x| x + 0.5); vec![a, b.map(|x| if x > 1.0 { x - 1.0 } else { x })] }, |t, v| t.maximum(v[0], v[1])));
    push("add_row", op(|r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[4], -2.0, 2.0)], |t, v| t.add_row(v[0], v[1])));
    push("mul_row", op(|r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[4], -2.0, 2.0)], |t, v| t.mul_row(v[0], v[1])));
    push("scale", op(one, |t, v| t.scale(v[0], -1.3)));
    push("add_scalar", op(one, |t, v| t.add_scalar(v[0], 0.7)));
    push("neg", op(one, |t, v| t.neg(v[0])));
    push("one_minus", op(one, |t, v| t.one_minus(v[0])));
    push("square", op(one, |t, v| t.square(v[0])));
    push("matmul", op(|r| vec![uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[5, 2], -1.0, 1.0)], |t, v| t.matmul(v[0], v[1])));
    push("transpose", op(one, |t, v| t.transpose(v[0])));
    push("reshape", op(one, |t, v| t.reshape(v[0], vec![2, 6])));
    push("sigmoid", op(one, |t, v| t.sigmoid(v[0])));
    push("log_sigmoid", op(one, |t, v| t.log_sigmoid(v[0])));
    push("relu", op(|r| vec![off_zero(r, &[3, 4])], |t, v| t.relu(v[0])));
    push("abs", op(|r| vec![off_zero(r, &[3, 4])], |t, v| t.abs(v[0])));
    push("exp", op(one, |t, v| t.exp(v[0])));
    push("log", op(|r| vec![uniform(r, &[3, 4], 0.2, 3.0)], |t, v| t.log(v[0])));
    push("softmax", op(one, |t, v| t.softmax(v[0], 1)));
    push("log_softmax", op(one, |t, v| t.log_softmax(v[0], 0)));
    push("layer_norm", op(one, |t, v| t.layer_norm(v[0], 1e-5)));
    push("sum", op(one, |t, v| t.sum(v[0])));
    push("mean", op(one, |t, v| t.mean(v[0])));
    push("sum_axis", op(one, |t, v| t.sum_axis(v[0], 0)));
    push("gather_rows", op(one, |t, v| t.gather_rows(v[0], &[2, 0, 2])));
    push("concat", op(two, |t, v| t.concat(&[v[0], v[1]], 1)));
    push("narrow", op(one, |t, v| t.narrow(v[0], 1, 1, 2)));

    push("varifocal", op(|r| vec![uniform(r, &[5, 3], -4.0, 4.0)], |t, v| {
        let mut target = Tensor::zeros(vec![5, 3]);
        target.data_mut()[1] = 0.7;
        target.data_mut()[6] = 0.2;
        target.data_mut()[14] = 1.0;
        lift(varifocal_loss(t, v[0], &target, 3, &VarifocalParams::default()))
    }));
    push("distribution_focal", op(|r| vec![uniform(r, &[4, 9], -2.0, 2.0)], |t, v| {
        lift(distribution_focal_loss(t, v[0], &[0.3, 7.9, 4.5, 2.0]))
    }));
    push("decode_distribution", op(|r| vec![uniform(r, &[4, 9], -2.0, 2.0)], |t, v| lift(decode_distribution(t, v[0]))));
    // Box losses: the target for each instance is regenerated from the same seed
    // as the prediction, so both stay clear of the L1 and GIoU kinks.
    for (name, pick) in [("l1_loss", 0usize), ("giou_loss", 1)] {
        push(
            name,
            (
                Box::new(|r: &mut ChaCha8Rng| vec![smooth_boxes(r, 3).0]),
                Box::new(move |t: &mut Tape, v: &[Var], seed: u64| {
                    let (_, target) = smooth_boxes(&mut instance_rng(seed), 3);
                    let (l1, giou) = lift(box_regression_loss(t, v[0], &target))?;
                    let loss = if pick == 0 { l1 } else { giou };
                    weighted_sum(t, loss, seed)
                }),
            ),
        );
    }
    push("giou_rows", op(
        |r| {
            let (p, target) = smooth_boxes(r, 3);
            vec![p, target.convert(BoxFormat::Corner).to_tensor()]
        },
        |t, v| {
            let a = lift(diff::center_to_corner(t, v[0]))?;
            lift(diff::giou_rows(t, a, v[1]))
        },
    ));
    push("detection_loss", op(|r| vec![uniform(r, &[4, 3], -3.0, 3.0)], |t, v| {
        let boxes = t.constant(Tensor::from_rows(&[[0.5, 0.5, 0.3, 0.3], [0.2, 0.7, 0.1, 0.2], [0.6, 0.35, 0.4, 0.3], [0.8, 0.8, 0.2, 0.2]])?)?;
        let gt = BoxSet::corner(vec![[0.3, 0.3, 0.65, 0.7], [0.1, 0.55, 0.3, 0.8]]).unwrap();
        lift(detection_loss(t, v[0], boxes, &[(0, 0), (1, 1)], &gt, &[2, 0], &DetectionLossWeights::default(), &VarifocalParams::default()))
    }));
    push("total_loss", op(
        |r| (0..5).map(|_| Tensor::scalar(r.gen_range(0.0..3.0))).collect(),
        |t, v| Ok(lift(total_loss(t, v[0], &v[2..], v[1], LossWeights { alpha: 0.7, beta: 1.3, gamma: 0.4 }))?.total),
    ));
    push("masked_attention", op(
        |r| vec![uniform(r, &[6, 8], -1.0, 1.0), uniform(r, &[6, 8], -1.0, 1.0)],
        |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut store = ParamStore::new();
            let attn = Attention::new(&mut store, &mut rng, "a", 8, 2);
            let layout = GroupLayout::new(2, 3).unwrap();
            let mask = compose_full_mask(&generate_masks(layout, 0.6, MaskMode::Additive, 3, 1).unwrap(), layout).unwrap();
            let p = store.tensors().iter().map(|w| t.constant(w.clone())).collect::<TResult<Vec<_>>>()?;
            let m = lift(MaskVars::new(t, &mask))?;
            lift(attn.forward(t, &p, v[0], v[1], v[1], Some(m)))
        },
    ));
    cases
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cases = gradient_cases();
    let mut worst = (0.0f64, 0.0f64);
    for (name, make, build) in &cases {
        for seed in 0..20u64 {
            let mut rng = instance_rng(seed);
            let inputs = make(&mut rng);
            let report = check_gradients(&inputs, DEFAULT_STEP, |t, v| build(t, v, seed)).map_err(|e| format!("{name}: {e}"))?;
            ensure(report.passes(1e-4, 1e-6), || format!("{name} instance {seed}: {report:?}"))?;
            worst = (worst.0.max(report.max_rel_err), worst.1.max(report.max_abs_err));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "{} operations x 20 instances, max rel err {:.1e}, max abs err {:.1e}, {secs:.1}s",
        cases.len(),
        worst.0,
        worst.1
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..500 {
        let g = rng.gen_range(1..=7);
        let p = rng.gen_range(1..=9);
        let rows: Vec<Vec<f64>> = (0..p).map(|_| (0..g).map(|_| rng.gen_range(0..50) as f64).collect()).collect();
        let cost = CostMatrix::from_values(Tensor::from_rows(&rows).unwrap()).unwrap();
        let got = cost.total(&hungarian_match(&cost).unwrap());
        let want = brute_force_min(&rows);
        ensure(got == want, || format!("case {case} ({p}x{g}): {got} vs brute force {want}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.0}s"))?;
    Ok(format!("500 matrices match brute force exactly, {secs:.1}s"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut positives = 0;
    for case in 0..200 {
        let anchors = anchor_grid(rng.gen_range(1..=3), rng.gen_range(2.0..6.0));
        let gts: Vec<[f64; 4]> = (0..rng.gen_range(1..=5)).map(|_| grid_box(&mut rng, 16)).collect();
        let k = rng.gen_range(1..=9);
        let got = atss_assign(&anchors, &corner_set(&gts), k);
        positives += got.positives();
        ensure(got.assignment == atss_oracle(&anchors, &gts, k), || format!("ATSS case {case} differs"))?;
    }
    let mut tal_pos = 0;
    for case in 0..200 {
        let p = rng.gen_range(1..=40);
        let pred: Vec<[f64; 4]> = (0..p).map(|_| grid_box(&mut rng, 8)).collect();
        let gts: Vec<[f64; 4]> = (0..rng.gen_range(1..=5)).map(|_| grid_box(&mut rng, 8)).collect();
        let labels: Vec<usize> = gts.iter().map(|_| rng.gen_range(0..3)).collect();
        let scores = Tensor::new(vec![p, 3], (0..3 * p).map(|_| rng.gen_range(0..=10) as f64 / 10.0).collect()).unwrap();
        let centers: Vec<[f64; 2]> = pred.iter().map(|b| [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0]).collect();
        let params = TaskAlignedParams {
            top_q: rng.gen_range(1..=13),
            ..Default::default()
        };
        let c = (case % 2 == 0).then_some(centers.as_slice());
        let got = task_aligned_assign(&scores, &corner_set(&pred), &corner_set(&gts), &labels, &params, c).unwrap();
        tal_pos += got.positives();
        ensure(got.assignment == tal_oracle(&scores, &pred, &gts, &labels, &params, c), || {
            format!("task-aligned case {case} differs")
        })?;
    }
    Ok(format!("200 ATSS ({positives} positives) and 200 task-aligned ({tal_pos} positives) instances agree"))
}

const D: usize = 16;

fn random_decoder(seed: u64) -> (Decoder, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let dims = DecoderDims {
        d: D,
        heads: 2,
        ffn: 32,
        layers: 2,
        classes: 3,
    };
    let dec = Decoder::new(&mut store, &mut rng, dims).unwrap();
    for t in store.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    (dec, store)
}

/// Concatenated per-layer logits and boxes of the first `rows` queries.
fn decode(dec: &Decoder, store: &ParamStore, content: &Tensor, refs: &Tensor, memory: &Tensor, mask: Option<&FullMask>, rows: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let c = tape.constant(content.clone()).unwrap();
    let m = tape.constant(memory.clone()).unwrap();
    let mask = mask.map(|f| MaskVars::new(&mut tape, f).unwrap());
    let out = dec.forward(&mut tape, &p, c, refs.clone(), m, m, mask).unwrap();
    let mut v = Vec::new();
    for l in &out {
        for var in [l.logits, l.boxes] {
            let t = tape.value(var).unwrap();
            v.extend_from_slice(&t.data()[..rows * t.cols()]);
        }
    }
    v
}

fn stack(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.rows() + b.rows(), a.cols()], data).unwrap()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    // (a) identity masks.
    let mut max_dev = 0.0f64;
    for seed in 0..5 {
        let (dec, store) = random_decoder(seed);
        let q = 8;
        let content = uniform(&mut rng, &[q, D], -1.0, 1.0);
        let refs = uniform(&mut rng, &[q, 4], 0.1, 0.9);
        let memory = uniform(&mut rng, &[21, D], -1.0, 1.0);
        let plain = decode(&dec, &store, &content, &refs, &memory, None, q);
        for mode in [MaskMode::Additive, MaskMode::Multiply] {
            let layout = GroupLayout::new(1, q).unwrap();
            let full = compose_full_mask(&generate_masks(layout, 1.0, mode, seed, 0).unwrap(), layout).unwrap();
            let masked = decode(&dec, &store, &content, &refs, &memory, Some(&full), q);
            for (a, b) in plain.iter().zip(&masked) {
                max_dev = max_dev.max((a - b).abs());
            }
        }
    }
    ensure(max_dev < 1e-9, || format!("(a) identity mask deviates by {max_dev:e}"))?;

    // (b) group isolation.
    let mut comparisons = 0;
    for seed in 0..5 {
        let (dec, store) = random_decoder(100 + seed);
        let (n, q) = (3, 6);
        for mode in [MaskMode::Additive, MaskMode::Multiply] {
            let layout = GroupLayout::new(n, q).unwrap();
            let masks = generate_masks(layout, 0.7, mode, seed, 9).unwrap();
            let full = compose_full_mask(&masks, layout).unwrap();
            let solo = compose_full_mask(&masks[..1], GroupLayout::new(1, q).unwrap()).unwrap();
            let content = uniform(&mut rng, &[q, D], -1.0, 1.0);
            let refs = uniform(&mut rng, &[q, 4], 0.1, 0.9);
            let memory = uniform(&mut rng, &[21, D], -1.0, 1.0);
            let alone = decode(&dec, &store, &content, &refs, &memory, Some(&solo), q);
            for _ in 0..4 {
                let oc = uniform(&mut rng, &[(n - 1) * q, D], -3.0, 3.0);
                let or = uniform(&mut rng, &[(n - 1) * q, 4], 0.05, 0.95);
                let together = decode(&dec, &store, &stack(&content, &oc), &stack(&refs, &or), &memory, Some(&full), q);
                ensure(together == alone, || format!("(b) group 0 changed with other groups ({mode:?}, seed {seed})"))?;
                comparisons += 1;
            }
        }
    }

    // (c) additive mode with every off-diagonal entry blocked.
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, &mut rng, "sa", D, 4);
    let q = 7;
    let mut matrix = Tensor::full(vec![q, q], BLOCKED);
    for i in 0..q {
        matrix.data_mut()[i * q + i] = 0.0;
    }
    let mask = PerturbationMask {
        group: 0,
        matrix,
        mode: MaskMode::Additive,
        keep_probability: 0.0,
    };
    let full = compose_full_mask(&[mask], GroupLayout::new(1, q).unwrap()).unwrap();
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let v = tape.constant(x.clone()).unwrap();
        let m = MaskVars::new(&mut tape, &full).unwrap();
        let out = attn.forward(&mut tape, &p, v, v, v, Some(m)).unwrap();
        tape.value(out).unwrap().clone()
    };
    let x = uniform(&mut rng, &[q, D], -1.0, 1.0);
    let base = run(&x);
    let mut sensitivity = 0.0f64;
    for j in 0..q {
        let mut y = x.clone();
        for k in 0..D {
            y.data_mut()[j * D + k] += rng.gen_range(-2.0..2.0);
        }
        let out = run(&y);
        for i in (0..q).filter(|&i| i != j) {
            for (a, b) in out.row(i).iter().zip(base.row(i)) {
                sensitivity = sensitivity.max((a - b).abs());
            }
        }
    }
    ensure(sensitivity == 0.0, || format!("(c) off-diagonal sensitivity {sensitivity:e}"))?;
    Ok(format!(
        "(a) max deviation {max_dev:.1e}; (b) {comparisons} bit-identical comparisons; (c) off-diagonal sensitivity 0"
    ))
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d_model: D,
        n_heads: 2,
        ffn_dim: 32,
        queries_per_group: 8,
        ..ModelConfig::default()
    }
}

fn criterion_5() -> Outcome {
    let images: Vec<Image> = SyntheticSpec::new(55, 3, 64, 64).generate().unwrap().into_iter().map(|s| s.image).collect();
    let q = toy_model_config().queries_per_group;
    let mut checks = 0;
    for seed in 0..3 {
        // Any checkpoint: start from a fresh model and perturb every weight.
        let mut model = Detector::new(toy_model_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 9);
        for t in model.params_mut().tensors_mut() {
            for x in t.data_mut() {
                *x += rng.gen_range(-0.1..0.1);
            }
        }
        let stripped = model.strip_training_branches();
        ensure(stripped.params().names().iter().all(|n| !n.starts_with(AUX_PREFIX)), || "aux weights survived stripping".into())?;
        for image in &images {
            let mut t_inf = Tape::new();
            let p = stripped.bind_constants(&mut t_inf).unwrap();
            let inf = stripped.forward(&mut t_inf, &p, image).unwrap();
            let counts = t_inf.op_counts_by_scope();
            ensure(!counts.contains_key(AUX_SCOPE), || format!("stripped forward ran aux ops: {counts:?}"))?;
            let values = |tape: &Tape, out: &densup::model::ForwardOutput| -> Vec<f64> {
                out.layers
                    .iter()
                    .flat_map(|l| {
                        [l.logits, l.boxes].map(|v| {
                            let t = tape.value(v).unwrap();
                            t.data()[..q * t.cols()].to_vec()
                        })
                    })
                    .flatten()
                    .collect()
            };
            let want = values(&t_inf, &inf);
            for (n, o2m) in [(1, false), (3, true)] {
                let opts = ForwardOptions {
                    n_groups: n,
                    keep_probability: 1.0,
                    o2m,
                    aux: true,
                    ..ForwardOptions::inference()
                };
                let mut tape = Tape::new();
                let p = model.params().bind(&mut tape).unwrap();
                let out = model.forward(&mut tape, &p, image, &opts).unwrap();
                ensure(values(&tape, &out) == want, || format!("training group 0 differs (N={n}, o2m={o2m})"))?;
                ensure(tape.op_counts_by_scope().get(AUX_SCOPE).copied().unwrap_or(0) > 0, || "aux head did not run in training".into())?;
                checks += 1;
            }
            let mut t_plain = Tape::new();
            let p = model.params().bind(&mut t_plain).unwrap();
            model.forward(&mut t_plain, &p, image, &ForwardOptions::inference()).unwrap();
            ensure(t_plain.op_counts_by_scope() == counts, || "stripped op counts differ from the single-group path".into())?;
        }
    }
    Ok(format!("{checks} bit-identical training/inference comparisons, 0 aux ops in stripped forwards"))
}

fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.model = toy_model_config();
    cfg.train_data = DatasetSpec::Synthetic(SyntheticSpec::new(61, 8, 64, 64));
    cfg.eval_data = DatasetSpec::Synthetic(SyntheticSpec::new(62, 4, 64, 64));
    cfg
}

fn criterion_6() -> Outcome {
    let cfg = small_run_config();
    let (run, _) = train(&cfg).map_err(|e| e.to_string())?;
    let worst = run.history.iter().map(|r| r.invariant_error()).fold(0.0, f64::max);
    ensure(worst < 1e-12, || format!("invariant error {worst:e}"))?;
    ensure(run.history.len() == 2 * run.steps_per_epoch, || "history length".into())?;

    let mut cfg = small_run_config();
    cfg.loss_weights.beta = 0.0;
    cfg.branches.o2m = false;
    let model = Detector::new(cfg.model, 3).unwrap();
    let scenes = cfg.train_data.load().unwrap();
    let batch: Vec<_> = scenes.iter().take(2).collect();
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape).unwrap();
    let loss = batch_loss(&mut tape, &model, &p, &cfg, &batch, 0, 0).map_err(|e| e.to_string())?;
    tape.backward(loss.total).unwrap();
    let g = tape.grad(loss.o2o).unwrap().map_or(0.0, |g| g.item());
    ensure(g == 0.0, || format!("o2o gradient {g}"))?;
    let mut zeroed = 0;
    for (name, &v) in model.params().names().iter().zip(&p) {
        if name.starts_with("dec.") || name.starts_with("sel.") {
            let nz = tape.grad(v).unwrap().is_some_and(|g| g.data().iter().any(|&x| x != 0.0));
            ensure(!nz, || format!("{name} has a gradient with beta = 0"))?;
            zeroed += 1;
        }
    }
    Ok(format!(
        "{} steps, max invariant error {worst:.1e}; beta = 0 leaves {zeroed} group-only tensors at exactly zero gradient",
        run.history.len()
    ))
}

/// Trained runs shared by the convergence and ablation criteria.
struct RunCache {
    runs: BTreeMap<(String, u64), TrainingRun>,
    spent: Duration,
}

impl RunCache {
    fn get(&mut self, branches: Branches, seed: u64) -> Result<&TrainingRun, String> {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.branches = branches;
        let key = (densup::train::variant_name(&cfg), seed);
        if !self.runs.contains_key(&key) {
            let start = Instant::now();
            let (run, _) = train(&cfg).map_err(|e| format!("{} seed {seed}: {e}", key.0))?;
            self.spent += start.elapsed();
            println!(
                "    trained {:<28} seed {seed}: AP curve {:?} ({:.0}s)",
                key.0,
                run.ap_curve().iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                start.elapsed().as_secs_f64()
            );
            self.runs.insert(key.clone(), run);
        }
        Ok(&self.runs[&key])
    }
}

fn criterion_7(cache: &mut RunCache) -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..5 {
        let base = cache.get(Branches::NONE, seed)?.clone();
        let full = cache.get(Branches::ALL, seed)?;
        let threshold = 0.9 * base.final_ap();
        let b = base.epochs_to(threshold);
        let f = full.epochs_to(threshold);
        let win = match (f, b) {
            (Some(f), Some(b)) => f < b,
            (Some(_), None) => true,
            _ => false,
        };
        wins += usize::from(win);
        let show = |e: Option<usize>| e.map_or("-".to_string(), |e| e.to_string());
        detail.push(format!("seed {seed}: full {} vs baseline {}", show(f), show(b)));
    }
    let summary = format!("{wins}/5 seeds faster [{}]", detail.join("; "));
    ensure(wins >= 4, || summary.clone())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 1800.0, || format!("took {secs:.0}s"))?;
    Ok(summary)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_8(cache: &mut RunCache) -> Outcome {
    let variants = [
        ("baseline", Branches::NONE),
        ("aux_cnn", Branches { aux_cnn: true, ..Branches::NONE }),
        ("o2m", Branches { o2m: true, ..Branches::NONE }),
        ("perturbation_groups", Branches { perturbation_groups: true, ..Branches::NONE }),
        ("all", Branches::ALL),
    ];
    let mut med = BTreeMap::new();
    for (name, b) in variants {
        let aps = (0..3).map(|s| cache.get(b, s).map(TrainingRun::final_ap)).collect::<Result<Vec<_>, _>>()?;
        med.insert(name, median(aps));
    }
    let summary = variants
        .iter()
        .map(|(n, _)| format!("{n} {:.4}", med[n]))
        .collect::<Vec<_>>()
        .join(", ");
    for single in ["aux_cnn", "o2m", "perturbation_groups"] {
        ensure(med[single] >= med["baseline"] - 0.005, || format!("{single} below baseline: {summary}"))?;
        ensure(med["all"] >= med[single] - 0.01, || format!("all-on below {single}: {summary}"))?;
    }
    Ok(format!("3-seed median final AP: {summary}"))
}

fn det(bbox: [f64; 4], score: f64, label: usize) -> Detection {
    Detection { bbox, score, label }
}

fn truth(boxes: &[[f64; 4]], labels: &[usize]) -> GroundTruth {
    GroundTruth {
        boxes: BoxSet::corner(boxes.to_vec()).unwrap(),
        labels: labels.to_vec(),
    }
}

fn criterion_9() -> Outcome {
    const A: [f64; 4] = [0.0, 0.0, 0.5, 0.5];
    const B: [f64; 4] = [0.5, 0.5, 1.0, 1.0];
    // 1. A higher-scored miss ahead of the only hit: AP@0.5 = 0.5.
    let r = evaluate_ap(&[vec![det(A, 0.9, 0), det(B, 0.95, 0)]], &[truth(&[A], &[0])], 1);
    ensure(r.ap50() == 0.5 && interpolated_ap(&[false, true], 1) == 0.5, || format!("case 1: {}", r.ap50()))?;
    // 2. No predictions.
    let r = evaluate_ap(&[vec![]], &[truth(&[A], &[0])], 1);
    ensure(r.mean_ap == 0.0, || "case 2".into())?;
    // 3. TP, FP, TP over two gts: 51 recall points at precision 1, 50 at 2/3.
    let want = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    let r = evaluate_ap(&[vec![det(A, 0.9, 0), det([0.2, 0.6, 0.3, 0.7], 0.8, 0), det(B, 0.7, 0)]], &[truth(&[A, B], &[0, 0])], 1);
    ensure((r.mean_ap - want).abs() < 1e-12, || format!("case 3: {} vs {want}", r.mean_ap))?;
    // 4. IoU 0.78 hits at thresholds 0.50..0.75 only.
    let r = evaluate_ap(&[vec![det([0.0, 0.0, 0.5, 0.39], 0.9, 0)]], &[truth(&[A], &[0])], 1);
    let per: Vec<f64> = (0..10).map(|i| if i < 6 { 1.0 } else { 0.0 }).collect();
    ensure(r.ap_per_threshold == per, || format!("case 4: {:?}", r.ap_per_threshold))?;
    // 5. Ranking across images: a miss in image 1 outranks the hit in image 0.
    let r = evaluate_ap(&[vec![det(A, 0.6, 0)], vec![det(A, 0.9, 0)]], &[truth(&[A], &[0]), truth(&[B], &[0])], 1);
    ensure(r.ap_per_threshold == vec![25.5 / 101.0; 10], || format!("case 5: {:?}", r.ap_per_threshold))?;
    // Perfect predictions.
    let r = evaluate_ap(
        &[vec![det(A, 1.0, 0), det(B, 1.0, 1)], vec![det(B, 1.0, 2)]],
        &[truth(&[A, B], &[0, 1]), truth(&[B], &[2])],
        3,
    );
    ensure(r.mean_ap == 1.0, || format!("perfect: {}", r.mean_ap))?;
    Ok("5 micro-cases reproduce the hand-computed values; perfect predictions give AP 1.0".into())
}

fn criterion_10() -> Outcome {
    let cfg = small_run_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let (mut run, model) = train(&cfg).map_err(|e| e.to_string())?;
        save_run(&mut run, &model, d.path()).map_err(|e| e.to_string())?;
    }
    let mut bytes = 0;
    for f in [LOSSES_FILE, CHECKPOINT_FILE] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        ensure(a == b, || format!("{f} differs"))?;
        bytes += a.len();
    }
    Ok(format!("loss CSVs and checkpoints byte-identical ({bytes} bytes)"))
}

fn main() {
    let mut cache = RunCache {
        runs: BTreeMap::new(),
        spent: Duration::ZERO,
    };
    let criteria: Vec<(&str, Box<dyn FnMut() -> Outcome + '_>)> = vec![
        ("gradient correctness", Box::new(criterion_1)),
        ("Hungarian optimality", Box::new(criterion_2)),
        ("assignment oracles", Box::new(criterion_3)),
        ("mask identities", Box::new(criterion_4)),
        ("training-only equivalence", Box::new(criterion_5)),
        ("loss algebra", Box::new(criterion_6)),
    ];
    let mut failed = 0;
    let mut report = |i: usize, name: &str, outcome: std::thread::Result<Outcome>, secs: f64| {
        let outcome = outcome.unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        match outcome {
            Ok(msg) => println!("criterion {i:>2} {name}: PASS ({msg}) [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("criterion {i:>2} {name}: FAIL ({msg}) [{secs:.1}s]");
            }
        }
    };
    for (i, (name, mut f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(&mut f));
        report(i + 1, name, out, start.elapsed().as_secs_f64());
    }
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(|| criterion_7(&mut cache)));
    report(7, "convergence ordering", out, start.elapsed().as_secs_f64());
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(|| criterion_8(&mut cache)));
    report(8, "ablation monotonicity", out, start.elapsed().as_secs_f64());
    for (i, name, f) in [(9, "evaluator correctness", criterion_9 as fn() -> Outcome), (10, "determinism", criterion_10)] {
        let start = Instant::now();
        let out = catch_unwind(f);
        report(i, name, out, start.elapsed().as_secs_f64());
    }
    println!(
        "acceptance: {} of 10 criteria passed ({:.0}s of shared training runs)",
        10 - failed,
        cache.spent.as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
