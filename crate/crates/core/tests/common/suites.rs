//! Property suites shared by the per-module tests and the acceptance gate.
//! Each returns a short summary on success and the first violation on failure.

use neuroscan::dataset::{distribution_from_counts, LabeledSet, Sample};
use neuroscan::denoise::{denoise, diffuse_step, Conductance, DiffusionParams};
use neuroscan::imaging::Image;
use neuroscan::metrics::{auc, confusion, f1_score, precision_recall_f1, accuracy, roc_curve, round_half_even};
use neuroscan::rng::Stream;
use neuroscan::smote::{balance_detailed, knn_indices, synthesize, Gap, SmoteParams, Target};

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- diffusion

fn random_params(rng: &mut Stream) -> DiffusionParams {
    DiffusionParams {
        iterations: rng.below(8) as usize,
        lambda: rng.uniform(0.0, 0.25),
        kappa: rng.uniform(1.0, 100.0),
        variant: if rng.below(2) == 0 { Conductance::Exponential } else { Conductance::Rational },
    }
}

fn random_image(rng: &mut Stream, lo: f64, hi: f64) -> Image {
    let h = 1 + rng.below(12) as usize;
    let w = 1 + rng.below(12) as usize;
    Image::from_fn(h, w, |_, _| rng.uniform(lo, hi))
}

/// Values drawn from a handful of levels, so edges and flat runs both occur.
fn blocky_image(rng: &mut Stream) -> Image {
    let h = 2 + rng.below(10) as usize;
    let w = 2 + rng.below(10) as usize;
    Image::from_fn(h, w, |_, _| 40.0 * rng.below(7) as f64)
}

pub fn diffusion_constant_fixed_point() -> Outcome {
    let mut rng = Stream::new(11);
    for case in 0..100 {
        let p = random_params(&mut rng);
        let c = rng.uniform(-1000.0, 1000.0);
        let img = Image::filled(1 + rng.below(9) as usize, 1 + rng.below(9) as usize, 1, c);
        let out = denoise(&img, &p).map_err(|e| e.to_string())?;
        ensure(out == img, || format!("case {case}: constant {c} moved under {p:?}"))?;
    }
    Ok("100 constant images unchanged".into())
}

pub fn diffusion_lambda_zero_identity() -> Outcome {
    let mut rng = Stream::new(12);
    for case in 0..100 {
        let mut p = random_params(&mut rng);
        p.lambda = 0.0;
        p.iterations = 1 + rng.below(6) as usize;
        let img = random_image(&mut rng, 0.0, 255.0);
        let out = denoise(&img, &p).map_err(|e| e.to_string())?;
        ensure(out == img, || format!("case {case}: lambda = 0 changed the image"))?;
    }
    Ok("100 images unchanged at lambda = 0".into())
}

/// Image and shifted image both stay inside [128, 256), where every value is
/// a multiple of the same unit in the last place and the shift is an even
/// multiple of it, so each rounding step commutes with the shift.
pub fn diffusion_gray_shift() -> Outcome {
    let mut rng = Stream::new(13);
    for case in 0..100 {
        let mut p = random_params(&mut rng);
        p.iterations = 1 + rng.below(6) as usize;
        let img = random_image(&mut rng, 128.0, 190.0);
        let c = rng.below(64 * 64) as f64 / 64.0;
        let shifted = img.map(|v| v + c);
        let a = denoise(&shifted, &p).map_err(|e| e.to_string())?;
        let b = denoise(&img, &p).map_err(|e| e.to_string())?.map(|v| v + c);
        ensure(a == b, || format!("case {case}: shift by {c} not equivariant under {p:?}"))?;
    }
    Ok("100 shifted images equivariant".into())
}

pub fn diffusion_max_principle() -> Outcome {
    let mut rng = Stream::new(14);
    for case in 0..100 {
        let mut p = random_params(&mut rng);
        p.iterations = 1 + rng.below(10) as usize;
        if case % 10 == 0 {
            p.lambda = 0.25;
        }
        let img = if case % 2 == 0 {
            random_image(&mut rng, 0.0, 255.0)
        } else {
            blocky_image(&mut rng)
        };
        let (lo, hi) = img.min_max();
        let out = denoise(&img, &p).map_err(|e| e.to_string())?;
        let (olo, ohi) = out.min_max();
        ensure(olo >= lo && ohi <= hi, || {
            format!("case {case}: output [{olo}, {ohi}] escapes input [{lo}, {hi}]")
        })?;
    }
    Ok("100 random images stay in range".into())
}

pub fn diffusion_flip_equivariance() -> Outcome {
    let mut rng = Stream::new(15);
    for case in 0..100 {
        let p = random_params(&mut rng);
        let img = if case % 2 == 0 {
            random_image(&mut rng, 0.0, 255.0)
        } else {
            blocky_image(&mut rng)
        };
        let out = denoise(&img, &p).map_err(|e| e.to_string())?;
        let h = denoise(&img.flip_horizontal(), &p).map_err(|e| e.to_string())?;
        let v = denoise(&img.flip_vertical(), &p).map_err(|e| e.to_string())?;
        ensure(h == out.flip_horizontal(), || format!("case {case}: horizontal flip"))?;
        ensure(v == out.flip_vertical(), || format!("case {case}: vertical flip"))?;
    }
    Ok("100 images commute with both flips".into())
}

/// A unit impulse in the centre of a 3×3 zero image, λ = 1/4, κ = 1.
///
/// Centre: four gradients of -1 each. Edge-adjacent pixels: one gradient of
/// +1 towards the centre (replicated borders contribute nothing). Corners
/// see only zeros. With conductance value `g` at |∇| = 1 the step gives
/// `1 - g` at the centre and `g / 4` beside it.
pub fn diffusion_impulse_step() -> Outcome {
    let impulse = Image::new(3, 3, 1, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let mut worst: f64 = 0.0;
    for (variant, g) in [
        (Conductance::Rational, 0.5),
        (Conductance::Exponential, (-1.0f64).exp()),
    ] {
        let p = DiffusionParams { iterations: 1, lambda: 0.25, kappa: 1.0, variant };
        let e = g / 4.0;
        let expected = [0.0, e, 0.0, e, 1.0 - g, e, 0.0, e, 0.0];
        let out = diffuse_step(&impulse, &p).map_err(|e| e.to_string())?;
        for (a, b) in out.data().iter().zip(expected) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-12, || format!("max abs error {worst:e}"))?;
    Ok(format!("max abs error {worst:e}"))
}

pub const DIFFUSION: &[(&str, fn() -> Outcome)] = &[
    ("constant fixed point", diffusion_constant_fixed_point),
    ("lambda = 0 identity", diffusion_lambda_zero_identity),
    ("gray-shift equivariance", diffusion_gray_shift),
    ("max principle", diffusion_max_principle),
    ("flip equivariance", diffusion_flip_equivariance),
    ("3x3 impulse step", diffusion_impulse_step),
];

// -------------------------------------------------------------------- smote

/// Random class sizes over short vectors shaped as 1×d images. Some classes
/// use a coarse integer lattice so duplicates and distance ties occur.
fn random_set(rng: &mut Stream) -> LabeledSet {
    let classes = 2 + rng.below(3) as usize;
    let d = 1 + rng.below(6) as usize;
    let mut samples = Vec::new();
    for c in 0..classes {
        let n = 2 + rng.below(15) as usize;
        let coarse = rng.below(2) == 0;
        for _ in 0..n {
            let data: Vec<f64> = (0..d)
                .map(|_| if coarse { rng.below(4) as f64 } else { rng.uniform(-5.0, 5.0) })
                .collect();
            samples.push(Sample::new(Image::new(1, d, 1, data).unwrap(), c));
        }
    }
    rng.shuffle(&mut samples);
    let names = (0..classes).map(|c| format!("c{c}")).collect();
    LabeledSet::new(names, samples).unwrap()
}

fn random_smote(rng: &mut Stream, set: &LabeledSet) -> SmoteParams {
    let max = set.counts().into_iter().max().unwrap();
    SmoteParams {
        k_neighbors: 1 + rng.below(6) as usize,
        target: if rng.below(3) == 0 {
            Target::MaxClass
        } else {
            Target::Count(1 + rng.below(2 * max as u64) as usize)
        },
        seed: rng.next_u64(),
    }
}

fn within(s: &[f64], a: &[f64], b: &[f64]) -> bool {
    s.iter().zip(a).zip(b).all(|((&v, &x), &y)| x.min(y) <= v && v <= x.max(y))
}

pub fn smote_convexity() -> Outcome {
    let mut rng = Stream::new(21);
    // The primitive itself, on random vectors and gaps.
    for case in 0..500 {
        let d = 1 + rng.below(10) as usize;
        let a: Vec<f64> = (0..d).map(|_| rng.uniform(-1e3, 1e3)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.uniform(-1e3, 1e3)).collect();
        let u = rng.next_f64();
        let s = synthesize(&a, &b, u).map_err(|e| e.to_string())?;
        ensure(within(&s, &a, &b), || format!("synthesize case {case} left the hull"))?;
    }
    // Every synthetic in a balanced set lies in the box of some member and
    // one of that member's k nearest neighbours.
    let mut checked = 0;
    for case in 0..100 {
        let set = random_set(&mut rng);
        let params = random_smote(&mut rng, &set);
        let out = balance_detailed(&set, &params, Gap::Uniform).map_err(|e| e.to_string())?;
        for s in out.set.samples().iter().filter(|s| s.synthetic) {
            let members: Vec<&[f64]> = set
                .samples()
                .iter()
                .filter(|m| m.label == s.label)
                .map(|m| m.image.data())
                .collect();
            let k = params.k_neighbors.min(members.len() - 1);
            let found = (0..members.len()).any(|p| {
                knn_indices(&members, p, k)
                    .unwrap()
                    .iter()
                    .any(|&q| within(s.image.data(), members[p], members[q]))
            });
            ensure(found, || format!("balance case {case}: synthetic outside every parent box"))?;
            checked += 1;
        }
    }
    Ok(format!("500 interpolations and {checked} synthetic samples in bounds"))
}

pub fn smote_exact_counts() -> Outcome {
    let mut rng = Stream::new(22);
    for case in 0..100 {
        let set = random_set(&mut rng);
        let params = random_smote(&mut rng, &set);
        let out = balance_detailed(&set, &params, Gap::Uniform).map_err(|e| e.to_string())?;
        let before = set.counts();
        let after = out.set.counts();
        ensure(after.iter().all(|&n| n == out.target), || {
            format!("case {case}: counts {after:?} for target {}", out.target)
        })?;
        for c in 0..before.len() {
            let synthetic = out.set.samples().iter().filter(|s| s.label == c && s.synthetic).count();
            ensure(synthetic == out.synthesized[c], || format!("case {case}: synthetic tally"))?;
            ensure(
                before[c] + out.synthesized[c] - out.removed[c] == out.target,
                || format!("case {case}: class {c} bookkeeping"),
            )?;
        }
    }
    Ok("100 random sets balanced exactly".into())
}

pub fn smote_zero_gap() -> Outcome {
    let mut rng = Stream::new(23);
    let mut checked = 0;
    for case in 0..100 {
        let set = random_set(&mut rng);
        let params = random_smote(&mut rng, &set);
        let out = balance_detailed(&set, &params, Gap::Fixed(0.0)).map_err(|e| e.to_string())?;
        for s in out.set.samples().iter().filter(|s| s.synthetic) {
            let copy = set
                .samples()
                .iter()
                .any(|m| m.label == s.label && m.image.data() == s.image.data());
            ensure(copy, || format!("case {case}: u = 0 sample is not an original"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} synthetic samples equal an original"))
}

/// Exhaustive oracle: order all other points by (distance, index).
fn brute_force_knn(points: &[Vec<f64>], query: usize, k: usize) -> Vec<usize> {
    let dist = |i: usize| -> f64 {
        let mut s = 0.0;
        for j in 0..points[i].len() {
            let d = points[i][j] - points[query][j];
            s += d * d;
        }
        s
    };
    let mut others: Vec<usize> = (0..points.len()).filter(|&i| i != query).collect();
    // Insertion sort keeps the oracle free of library ordering helpers.
    for i in 1..others.len() {
        let mut j = i;
        while j > 0 && (dist(others[j]) < dist(others[j - 1])
            || (dist(others[j]) == dist(others[j - 1]) && others[j] < others[j - 1]))
        {
            others.swap(j, j - 1);
            j -= 1;
        }
    }
    others.truncate(k);
    others
}

pub fn smote_knn_brute_force() -> Outcome {
    let mut rng = Stream::new(24);
    for case in 0..200 {
        let n = 2 + rng.below(49) as usize;
        let d = 1 + rng.below(8) as usize;
        let coarse = case % 3 == 0;
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| if coarse { rng.below(3) as f64 } else { rng.uniform(-1.0, 1.0) })
                    .collect()
            })
            .collect();
        let query = rng.below(n as u64) as usize;
        let k = 1 + rng.below(n as u64 - 1) as usize;
        let got = knn_indices(&points, query, k).map_err(|e| e.to_string())?;
        let want = brute_force_knn(&points, query, k);
        ensure(got == want, || format!("case {case}: {got:?} vs {want:?}"))?;
    }
    Ok("200 random instances agree".into())
}

pub const SMOTE: &[(&str, fn() -> Outcome)] = &[
    ("convexity", smote_convexity),
    ("exact target counts", smote_exact_counts),
    ("u = 0 degeneracy", smote_zero_gap),
    ("k-NN vs brute force", smote_knn_brute_force),
];

// ------------------------------------------------------------------ metrics

/// P(s+ > s-) + P(s+ = s-) / 2 over every positive/negative pair.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn auc_matches_pairwise() -> Outcome {
    let mut rng = Stream::new(31);
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let n = 2 + rng.below(29) as usize;
        let classes = 2 + rng.below(3) as usize;
        let mut truth: Vec<usize> = (0..n).map(|_| rng.below(classes as u64) as usize).collect();
        // Guarantee at least one positive and one negative for class 0.
        truth[0] = 0;
        truth[1] = 1 + rng.below(classes as u64 - 1) as usize;
        // Two in three instances draw from a few levels so ties are common.
        let levels = if case % 3 == 2 { 0 } else { 1 + rng.below(4) };
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..classes)
                    .map(|_| if levels == 0 { rng.next_f64() } else { rng.below(levels + 1) as f64 / levels as f64 })
                    .collect()
            })
            .collect();
        let curve = roc_curve(&scores, &truth, 0).map_err(|e| e.to_string())?;
        let got = auc(&curve).map_err(|e| e.to_string())?;
        let col: Vec<f64> = scores.iter().map(|r| r[0]).collect();
        let pos: Vec<bool> = truth.iter().map(|&t| t == 0).collect();
        let want = pairwise_auc(&col, &pos);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() < 1e-9, || format!("case {case}: {got} vs {want}"))?;
    }
    Ok(format!("500 instances, max abs difference {worst:e}"))
}

fn random_labels(rng: &mut Stream, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes as u64) as usize).collect()
}

pub fn weighted_recall_identity() -> Outcome {
    let mut rng = Stream::new(32);
    for case in 0..500 {
        let classes = 1 + rng.below(6) as usize;
        let n = 1 + rng.below(60) as usize;
        let truth = random_labels(&mut rng, n, classes);
        let pred = random_labels(&mut rng, n, classes);
        let m = confusion(&truth, &pred, classes).map_err(|e| e.to_string())?;
        let acc = accuracy(&m).map_err(|e| e.to_string())?;
        let weighted: f64 = precision_recall_f1(&m)
            .iter()
            .enumerate()
            .map(|(c, s)| s.recall * m.row_sum(c) as f64)
            .sum::<f64>()
            / n as f64;
        ensure((acc - weighted).abs() < 1e-12, || format!("case {case}: {acc} vs {weighted}"))?;
        for c in 0..classes {
            let support = truth.iter().filter(|&&t| t == c).count() as u64;
            ensure(m.row_sum(c) == support, || format!("case {case}: row {c} sum"))?;
        }
    }
    Ok("500 random matrices".into())
}

pub fn permutation_equivariance() -> Outcome {
    let mut rng = Stream::new(33);
    for case in 0..500 {
        let classes = 1 + rng.below(6) as usize;
        let n = rng.below(60) as usize;
        let truth = random_labels(&mut rng, n, classes);
        let pred = random_labels(&mut rng, n, classes);
        let mut perm: Vec<usize> = (0..classes).collect();
        rng.shuffle(&mut perm);
        let m = confusion(&truth, &pred, classes).map_err(|e| e.to_string())?;
        let pt: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
        let pp: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        let mp = confusion(&pt, &pp, classes).map_err(|e| e.to_string())?;
        for i in 0..classes {
            for j in 0..classes {
                ensure(mp.get(perm[i], perm[j]) == m.get(i, j), || {
                    format!("case {case}: cell ({i}, {j})")
                })?;
            }
        }
    }
    Ok("500 relabelings".into())
}

/// Reciprocal of the mean reciprocal.
pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    1.0 / ((1.0 / p + 1.0 / r) / 2.0)
}

pub fn f1_harmonic_mean() -> Outcome {
    let mut rng = Stream::new(34);
    for case in 0..1000 {
        let p = rng.uniform(1e-3, 1.0);
        let r = rng.uniform(1e-3, 1.0);
        let (got, want) = (f1_score(p, r), harmonic_mean(p, r));
        ensure((got - want).abs() < 1e-12, || format!("case {case}: {got} vs {want}"))?;
    }
    Ok("1000 random pairs".into())
}

pub const METRICS: &[(&str, fn() -> Outcome)] = &[
    ("AUC vs pairwise ranking", auc_matches_pairwise),
    ("weighted-recall identity", weighted_recall_identity),
    ("permutation equivariance", permutation_equivariance),
    ("F1 harmonic mean", f1_harmonic_mean),
];

// ---------------------------------------------------------- reference values

pub const FOUR_CLASS_COUNTS: [usize; 4] = [833, 841, 814, 849];

pub fn distribution_percentages() -> Outcome {
    let names = ["glioma", "meningioma", "notumor", "pituitary"].map(String::from).to_vec();
    let d = distribution_from_counts(names, FOUR_CLASS_COUNTS.to_vec()).map_err(|e| e.to_string())?;
    let expected = [24.96, 25.20, 24.39, 25.44];
    for (c, (&p, want)) in d.percents.iter().zip(expected).enumerate() {
        let shown = round_half_even(p, 2);
        ensure((shown - want).abs() <= 0.005, || format!("class {c}: {shown} vs {want}"))?;
    }
    let csv = d.to_csv();
    let csv_shares: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    ensure(csv_shares == ["24.96", "25.20", "24.39", "25.44"], || format!("csv shows {csv_shares:?}"))?;
    let total: f64 = d.percents.iter().sum();
    ensure((total - 100.0).abs() <= 0.01, || format!("shares sum to {total}"))?;
    Ok(format!("{csv_shares:?}"))
}

pub fn f1_rounding_example() -> Outcome {
    let (p, r) = (1.00, 0.97);
    let f1 = f1_score(p, r);
    let oracle = harmonic_mean(p, r);
    ensure((f1 - oracle).abs() < 1e-12, || format!("{f1} vs oracle {oracle}"))?;
    let shown = round_half_even(f1, 2);
    ensure(shown == 0.98, || format!("F1 {f1} displays as {shown}"))?;
    Ok(format!("F1 {f1:.6} shows as {shown:.2}"))
}

// ----------------------------------------------------------------- training

/// Eight pure-noise 32×32 images with labels 0..3 twice over: nothing to
/// learn but the samples themselves.
pub fn memorization_set() -> LabeledSet {
    let mut rng = Stream::new(808);
    let samples = (0..8)
        .map(|i| Sample::new(Image::from_fn(32, 32, |_, _| rng.next_f64()), i % 4))
        .collect();
    LabeledSet::new((0..4).map(|c| format!("c{c}")).collect(), samples).unwrap()
}

/// Trains a MiniCNN one epoch at a time until a full pass classifies all
/// eight samples correctly.
pub fn overfit_eight() -> Outcome {
    use neuroscan::nn::{build_mini_cnn, TrainConfig, Trainer};
    let set = memorization_set();
    let mut model = build_mini_cnn(4, 32, 1).map_err(|e| e.to_string())?;
    let config = TrainConfig { epochs: 200, batch_size: 8, seed: 1, ..TrainConfig::default() };
    let mut trainer = Trainer::new(&mut model, config).map_err(|e| e.to_string())?;
    trainer.preflight(&set).map_err(|e| e.to_string())?;
    for epoch in 1..=200 {
        trainer.run_epoch(&set).map_err(|e| e.to_string())?;
        let model = trainer.model();
        let correct = set
            .samples()
            .iter()
            .filter(|s| neuroscan::metrics::argmax(&model.predict(&s.image).unwrap()) == s.label)
            .count();
        if correct == 8 {
            return Ok(format!("8/8 after {epoch} epochs"));
        }
    }
    Err("not memorized within 200 epochs".into())
}
