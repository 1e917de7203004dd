//! Exit criteria. Every test prints one PASS/FAIL line to stderr (written to
//! the raw handle so it shows up even when output is captured).

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use evifuse::data::{self, Dataset, Sample, Split, SyntheticSpec};
use evifuse::losses::{
    adjusted_cross_entropy, annealing_coefficient, evidential_ce, grad_evidential_ce, kl_to_uniform, OneHotLabel,
};
use evifuse::metrics::{evaluate, quadratic_weighted_kappa, uncertainty_report, ConfusionMatrix, StageLabel};
use evifuse::model::{ModelConfig, StageMask, ToyHybridModel};
use evifuse::opinion::{fuse_belief_uncertainty, fuse_chain, fuse_pair, opinion_from_evidence, Branch};
use evifuse::training::{self, TrainConfig};
use evifuse::{DirichletOpinion, EvidenceVector, FusionMode, SourceTag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

fn report(id: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "[{}] criterion {id}: {name} ({:.2}s) {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut err = std::io::stderr().lock();
    let _ = err.write_all(line.as_bytes());
    let _ = err.flush();
}

fn random_evidence(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = rng.random_range(2..=10);
    (0..k)
        .map(|_| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.0..100.0)
            }
        })
        .collect()
}

fn opinion(e: &[f64]) -> DirichletOpinion {
    opinion_from_evidence(&EvidenceVector::new(e.to_vec()).unwrap())
}

#[test]
fn criterion_1_opinion_algebra() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_norm = 0.0f64;
    let mut monotone = true;
    for _ in 0..10_000 {
        let e = random_evidence(&mut rng);
        let m = opinion(&e);
        let total = m.uncertainty() + m.belief().iter().sum::<f64>();
        worst_norm = worst_norm.max((total - 1.0).abs());

        let k = rng.random_range(0..e.len());
        let mut more = e.clone();
        more[k] += rng.random_range(0.01..10.0);
        let m2 = opinion(&more);
        monotone &= m2.belief()[k] > m.belief()[k] && m2.uncertainty() < m.uncertainty();
    }
    let mut zero_ok = true;
    for k in 2..=10 {
        let m = opinion(&vec![0.0; k]);
        zero_ok &= m.uncertainty() == 1.0 && m.belief().iter().all(|&b| b == 0.0);
    }
    let elapsed = start.elapsed();
    let pass = worst_norm <= 1e-12 && monotone && zero_ok && elapsed < Duration::from_secs(5);
    report(
        1,
        "opinion algebra",
        pass,
        elapsed,
        &format!("max |u+Σb−1| = {worst_norm:.2e}, monotone = {monotone}, zero evidence = {zero_ok}"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_fusion_consistency() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_route = 0.0f64;
    let mut commutative = true;
    let mut bounded = true;
    for _ in 0..10_000 {
        let e1 = random_evidence(&mut rng);
        let e2: Vec<f64> = (0..e1.len()).map(|_| rng.random_range(0.0..100.0)).collect();
        let (m1, m2) = (opinion(&e1), opinion(&e2));
        let fused = fuse_pair(&m1, &m2).unwrap();
        let (b, u) = fuse_belief_uncertainty(&m1.belief(), m1.uncertainty(), &m2.belief(), m2.uncertainty());
        worst_route = worst_route.max((u - fused.uncertainty()).abs());
        for (x, y) in b.iter().zip(fused.belief()) {
            worst_route = worst_route.max((x - y).abs());
        }
        commutative &= fused == fuse_pair(&m2, &m1).unwrap();
        // harmonic mean of two positives lies between them
        let (lo, hi) = (m1.uncertainty().min(m2.uncertainty()), m1.uncertainty().max(m2.uncertainty()));
        bounded &= fused.uncertainty() >= lo * (1.0 - 1e-15) && fused.uncertainty() <= hi * (1.0 + 1e-15);
    }

    let ms: Vec<DirichletOpinion> = [[2.0, 1.0], [4.0, 1.0], [8.0, 1.0]]
        .iter()
        .map(|a| DirichletOpinion::from_alpha(a.to_vec()).unwrap())
        .collect();
    let left = fuse_chain(&ms).unwrap();
    let right = fuse_pair(&ms[0], &fuse_pair(&ms[1], &ms[2]).unwrap()).unwrap();
    let witness = left.alpha() == [5.5, 1.0] && right.alpha() == [4.0, 1.0];

    let elapsed = start.elapsed();
    let pass = worst_route <= 1e-12 && commutative && bounded && witness && elapsed < Duration::from_secs(5);
    report(
        2,
        "fusion consistency",
        pass,
        elapsed,
        &format!(
            "max route gap = {worst_route:.2e}, commutative = {commutative}, u bounds = {bounded}, \
             left fold {:?} vs right fold {:?}",
            left.alpha(),
            right.alpha()
        ),
    );
    assert!(pass);
}

/// Sample mean and standard error of `−ln p_y` under `Dir(α)`, drawing
/// Dirichlet vectors as normalized Gamma variates.
fn monte_carlo_ace(alpha: &[f64], y: usize, n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let gammas: Vec<Gamma<f64>> = alpha.iter().map(|&a| Gamma::new(a, 1.0).unwrap()).collect();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let draws: Vec<f64> = gammas.iter().map(|g| g.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        let v = total.ln() - draws[y].ln();
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean) * n as f64 / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

#[test]
fn criterion_3_loss_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_z = 0.0f64;
    for _ in 0..20 {
        let k = rng.random_range(2..=6);
        let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..20.0)).collect();
        let y = rng.random_range(0..k);
        let closed = adjusted_cross_entropy(&alpha, &OneHotLabel::new(y, k).unwrap()).unwrap();
        let (mean, se) = monte_carlo_ace(&alpha, y, 1_000_000, &mut rng);
        worst_z = worst_z.max((closed - mean).abs() / se);
    }

    let mut kl_ok = true;
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let a: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..30.0)).collect();
        kl_ok &= kl_to_uniform(&a).unwrap() > 0.0;
    }
    for k in 2..=8 {
        kl_ok &= kl_to_uniform(&vec![1.0; k]).unwrap() == 0.0;
    }

    let schedule_ok = annealing_coefficient(0) == 0.0
        && annealing_coefficient(5) == 0.5
        && [10, 11, 37, 1000].iter().all(|&t| annealing_coefficient(t) == 1.0);

    let elapsed = start.elapsed();
    let pass = worst_z <= 3.0 && kl_ok && schedule_ok && elapsed < Duration::from_secs(60);
    report(
        3,
        "loss oracles",
        pass,
        elapsed,
        &format!("worst |closed − MC| = {worst_z:.2}σ, KL ≥ 0 = {kl_ok}, λ table = {schedule_ok}"),
    );
    assert!(pass);
}

fn relative_gap(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn miniature_model(seed: u64) -> (ToyHybridModel, Vec<(Vec<f64>, OneHotLabel)>) {
    let mut config = ModelConfig::two_view(3, 4, 4, vec![6, 5, 4]);
    config.stage_mask = StageMask::new(vec![
        SourceTag::new(Branch::Local, 2),
        SourceTag::new(Branch::Local, 3),
        SourceTag::new(Branch::Global, 1),
        SourceTag::new(Branch::Global, 3),
    ])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ToyHybridModel::new(config, &mut rng).unwrap();
    let batch = (0..4)
        .map(|i| {
            let x = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
            (x, OneHotLabel::new(i % 3, 3).unwrap())
        })
        .collect();
    (model, batch)
}

#[test]
#[allow(clippy::needless_range_loop)]
fn criterion_4_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    let mut worst_ece = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..=6);
        let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(1.05..30.0)).collect();
        let y = OneHotLabel::new(rng.random_range(0..k), k).unwrap();
        let epoch = rng.random_range(0..15);
        let analytic = grad_evidential_ce(&alpha, &y, epoch).unwrap();
        for j in 0..k {
            let h = 1e-5 * alpha[j];
            let (mut up, mut down) = (alpha.clone(), alpha.clone());
            up[j] += h;
            down[j] -= h;
            let numeric = (evidential_ce(&up, &y, epoch).unwrap() - evidential_ce(&down, &y, epoch).unwrap()) / (2.0 * h);
            worst_ece = worst_ece.max(relative_gap(analytic[j], numeric, 1e-8));
        }
    }

    let step = 1e-4;
    let mut worst_model = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..5 {
        let (mut model, batch) = miniature_model(seed);
        let batch: Vec<(&[f64], OneHotLabel)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let (epoch, gamma) = (5, 0.7);
        let (_, grads) = model.backward(&batch, epoch, gamma).unwrap();
        let analytic = grads.flatten();
        let base = model.params().clone();
        for i in 0..base.num_scalars() {
            let mut eval = |delta: f64| {
                let mut p = base.clone();
                *p.scalar_mut(i) += delta;
                model.set_params(p).unwrap();
                model.loss(&batch, epoch, gamma).unwrap().l_total
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            // entries below 1e-6 are compared against that floor
            worst_model = worst_model.max(relative_gap(analytic[i], numeric, 1e-6));
            checked += 1;
        }
        model.set_params(base).unwrap();
    }

    let elapsed = start.elapsed();
    let pass = worst_ece < 1e-4 && worst_model < 1e-3 && elapsed < Duration::from_secs(120);
    report(
        4,
        "gradient checks",
        pass,
        elapsed,
        &format!("loss-gradient worst rel = {worst_ece:.2e}; model worst rel = {worst_model:.2e} over {checked} parameters"),
    );
    assert!(pass);
}

const SEEDS: [u64; 3] = [1, 2, 3];
const MARGIN: f64 = 0.05;
const OOD_COUNT: usize = 400;

struct SeedRun {
    seed: u64,
    fused: f64,
    local: f64,
    global: f64,
    balanced: f64,
    /// Mean test uncertainty per stage tag, then fused OOD vs test.
    stage_u: Vec<(StageLabel, f64)>,
    fused_u_test: f64,
    fused_u_ood: f64,
}

struct EndToEnd {
    runs: Vec<SeedRun>,
    elapsed: Duration,
}

fn test_accuracy(model: &ToyHybridModel, dataset: &Dataset) -> evifuse::metrics::Evaluation {
    let test: Vec<&Sample> = dataset.split(Split::Test).collect();
    evaluate(model, &test).unwrap()
}

fn end_to_end() -> &'static EndToEnd {
    static RUNS: OnceLock<EndToEnd> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let spec = SyntheticSpec::default();
        let dataset = data::generate(&spec).unwrap();
        let ood = data::sample_ood(&spec, OOD_COUNT).unwrap();
        let model_config = ModelConfig::two_view(spec.num_classes, spec.dim_local, spec.dim_global, vec![16; 4]);
        let runs = SEEDS
            .iter()
            .map(|&seed| {
                let train = |mode| {
                    let cfg = TrainConfig {
                        seed,
                        fusion_mode: mode,
                        ..TrainConfig::default()
                    };
                    let model = training::init_model(model_config.clone(), &cfg).unwrap();
                    training::train(model, &dataset, &cfg).unwrap().best_model
                };
                let trusted = train(FusionMode::LeftFold);
                let balanced = train(FusionMode::Balanced);
                let eval = test_accuracy(&trusted, &dataset);

                let test_x: Vec<&[f64]> = dataset.split(Split::Test).map(|s| s.x.as_slice()).collect();
                let ood_x: Vec<&[f64]> = ood.iter().map(|s| s.x.as_slice()).collect();
                let report = uncertainty_report(&trusted, &test_x, &ood_x).unwrap();
                let stage_u = report
                    .in_distribution
                    .values
                    .keys()
                    .map(|&label| (label, report.in_distribution.mean(label).unwrap()))
                    .collect();
                SeedRun {
                    seed,
                    fused: eval.fused.accuracy,
                    local: eval.local.accuracy,
                    global: eval.global.accuracy,
                    balanced: test_accuracy(&balanced, &dataset).fused.accuracy,
                    stage_u,
                    fused_u_test: report.in_distribution.mean(StageLabel::Fused).unwrap(),
                    fused_u_ood: report.ood.mean(StageLabel::Fused).unwrap(),
                }
            })
            .collect();
        EndToEnd {
            runs,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_5_fusion_benefit() {
    let e2e = end_to_end();
    let mut passed = 0;
    let mut detail = Vec::new();
    for r in &e2e.runs {
        let best_single = r.local.max(r.global);
        let ok = r.fused - best_single >= MARGIN && r.fused > r.balanced;
        passed += usize::from(ok);
        detail.push(format!(
            "seed {}: fused {:.4}, local {:.4}, global {:.4}, balanced {:.4} [{}]",
            r.seed,
            r.fused,
            r.local,
            r.global,
            r.balanced,
            if ok { "ok" } else { "miss" }
        ));
    }
    let pass = passed == SEEDS.len() && e2e.elapsed < Duration::from_secs(600);
    report(
        5,
        "fusion benefit",
        pass,
        e2e.elapsed,
        &format!("{passed}/{} seeds; {}", SEEDS.len(), detail.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_6_uncertainty_behaviour() {
    let e2e = end_to_end();
    let mask = TrainConfig::default().stage_mask;
    let mut all_ok = true;
    let mut detail = Vec::new();
    for r in &e2e.runs {
        let mean_of = |tag: SourceTag| {
            r.stage_u
                .iter()
                .find(|(l, _)| *l == StageLabel::Stage(tag))
                .map(|(_, u)| *u)
                .unwrap()
        };
        let mut ok = r.fused_u_ood > r.fused_u_test;
        for branch in [Branch::Local, Branch::Global] {
            let tags: Vec<SourceTag> = mask.tags().iter().copied().filter(|t| t.branch == branch).collect();
            let (first, last) = (tags[0], *tags.last().unwrap());
            ok &= mean_of(last) <= mean_of(first);
            detail.push(format!("seed {} {first} {:.4} → {last} {:.4}", r.seed, mean_of(first), mean_of(last)));
        }
        detail.push(format!(
            "seed {} fused u test {:.4} ood {:.4}",
            r.seed, r.fused_u_test, r.fused_u_ood
        ));
        all_ok &= ok;
    }
    report(6, "uncertainty behaviour", all_ok, e2e.elapsed, &detail.join("; "));
    assert!(all_ok);
}

#[test]
fn criterion_7_kappa() {
    let start = Instant::now();
    let diag = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 7, 0], vec![0, 0, 3]]).unwrap();
    let perfect = quadratic_weighted_kappa(&diag).unwrap();

    // counts are an exact outer product of marginals
    let (r, c) = ([1u64, 2, 3], [2u64, 3, 5]);
    let rows: Vec<Vec<u64>> = r.iter().map(|ri| c.iter().map(|cj| ri * cj).collect()).collect();
    let independent = quadratic_weighted_kappa(&ConfusionMatrix::from_rows(&rows).unwrap()).unwrap();

    let hand = [vec![2u64, 1, 0], vec![1, 2, 1], vec![0, 1, 2]];
    let value = quadratic_weighted_kappa(&ConfusionMatrix::from_rows(&hand).unwrap()).unwrap();
    // integer evaluation: κ = 1 − N·Σ d²·O / Σ d²·r_i·c_j
    let n: i64 = hand.iter().flatten().map(|&v| v as i64).sum();
    let row_sums: Vec<i64> = hand.iter().map(|r| r.iter().map(|&v| v as i64).sum()).collect();
    let col_sums: Vec<i64> = (0..3).map(|j| hand.iter().map(|r| r[j] as i64).sum()).collect();
    let (mut observed, mut expected) = (0i64, 0i64);
    for i in 0..3 {
        for j in 0..3 {
            let d2 = (i as i64 - j as i64).pow(2);
            observed += d2 * hand[i][j] as i64;
            expected += d2 * row_sums[i] * col_sums[j];
        }
    }
    let oracle = 1.0 - (n * observed) as f64 / expected as f64;
    const FROZEN: f64 = 2.0 / 3.0;

    let elapsed = start.elapsed();
    let pass = perfect == 1.0
        && independent.abs() <= 1e-12
        && (oracle - FROZEN).abs() <= 1e-12
        && (value - FROZEN).abs() <= 1e-12;
    report(
        7,
        "kappa",
        pass,
        elapsed,
        &format!("diagonal {perfect}, independent {independent:.2e}, 3×3 {value:.15} (oracle {oracle:.15})"),
    );
    assert!(pass);
}

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_evifuse"))
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "evifuse {args:?} failed");
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    std::fs::read(a).unwrap() == std::fs::read(b).unwrap()
}

#[test]
fn criterion_8_determinism() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_cli(&["generate", "--out", data_dir.to_str().unwrap()]);
    for out in [&a, &b] {
        run_cli(&["train", "--data", data_dir.to_str().unwrap(), "--out", out.to_str().unwrap(), "--epochs", "20"]);
    }
    let logs = same_bytes(&a.join("loss_log.csv"), &b.join("loss_log.csv"));
    let ckpts = same_bytes(&a.join("checkpoint.json"), &b.join("checkpoint.json"));
    let elapsed = start.elapsed();
    let pass = logs && ckpts;
    report(
        8,
        "determinism",
        pass,
        elapsed,
        &format!("loss logs identical = {logs}, checkpoints identical = {ckpts}"),
    );
    assert!(pass);
}
