//! Acceptance report: one PASS/FAIL line per criterion under the default
//! configuration, then a nonzero exit if any criterion failed.

mod support;

use std::time::Instant;

use dcr_core::autodiff::Graph;
use dcr_core::config::RunConfig;
use dcr_core::data::make_synthetic_task;
use dcr_core::engine::{teacher_logits, training_step, MethodConfig, MethodKind};
use dcr_core::gates::GateSchedule;
use dcr_core::harness::{compare, make_teacher, ranking_table, RunRecord};
use dcr_core::model::{
    model_forward, uniform_gates, Backbone, ForwardOptions, Mix, Model, Trainable,
};
use dcr_core::rng::stream;
use dcr_core::tensor::Tensor;
use dcr_core::theory::{
    curvature_suite, empirical_gate_variance, hard_gate_variance_check, make_snapshot, path_suite,
    probe_batches, soft_gate_check, GateKind, GradFamily,
};

struct Report {
    results: Vec<(usize, bool)>,
}

impl Report {
    fn record(&mut self, n: usize, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {n}: {verdict} {detail}");
        self.results.push((n, pass));
    }
}

fn schedules(report: &mut Report) {
    let dcr = GateSchedule::dcr_aggr20();
    let th = GateSchedule::theseus_aggr20();
    let ts = [0.0, 0.10, 0.20, 1.0];
    let a: Vec<f64> = ts.iter().map(|&t| dcr.value(t).unwrap()).collect();
    let p: Vec<f64> = ts.iter().map(|&t| th.value(t).unwrap()).collect();
    let pass = a == [1.0, 0.3, 0.0, 0.0] && p == [0.1, 0.7, 1.0, 1.0];
    report.record(10, pass, format!("dcr_aggr20 {a:?}, theseus_aggr20 {p:?}"));
}

fn autodiff(report: &mut Report) {
    let cases = support::all();
    let (name, worst) = cases
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty");
    let pass = cases.iter().all(|c| c.1 <= support::TOL);
    report.record(
        6,
        pass,
        format!(
            "{} cases x 10 seeds, worst relative error {worst:.2e} ({name}), tolerance {:.0e}",
            cases.len(),
            support::TOL
        ),
    );
}

fn structural(report: &mut Report, cfg: &RunConfig) {
    let spec = cfg.model.clone();
    let backbone = Backbone::init(&spec, 5).unwrap();
    let model = Model::with_students(spec.clone(), backbone, 6).unwrap();
    let (train, _) = make_synthetic_task(&cfg.task).unwrap();
    let batch = train.batch(&(0..16).collect::<Vec<_>>());
    let step = |kind, t| {
        let mut rng = stream(7, &[1]);
        training_step(&model, &batch, &MethodConfig::new(kind), t, &mut rng).unwrap()
    };

    let at_one = step(MethodKind::Dcr, 0.0);
    let teacher = teacher_logits(&model, &batch.tokens).unwrap();
    let endpoint_one = at_one.logits.data() == teacher.data();

    let at_zero = step(MethodKind::Dcr, 0.5);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, Trainable::Students);
    let gates = uniform_gates(&spec, Mix::Blend { alpha: 0.0 });
    let opts = ForwardOptions {
        both_branches: true,
    };
    let fwd = model_forward(&mut g, &spec, &bound, &batch.tokens, &gates, opts).unwrap();
    let loss = g
        .cross_entropy(fwd.logits, &batch.labels, cfg.label_smoothing)
        .unwrap();
    g.backward(loss, &Tensor::scalar(1.0)).unwrap();
    let same_grads = bound.students.iter().all(|(layer, att)| {
        let full: Vec<Vec<f64>> = att
            .vars()
            .iter()
            .map(|&v| g.grad(v).unwrap().to_vec())
            .collect();
        full == at_zero.student_grads[layer]
    });
    let endpoint_zero =
        at_zero.lambda == 0.0 && at_zero.teacher_cost.branch_evals == 0 && same_grads;

    let mut frozen = true;
    let mut additive = true;
    for kind in MethodKind::ALL {
        for t in [0.0, 0.05, 0.15, 0.5, 1.0] {
            let out = step(kind, t);
            frozen &= out.teacher_grad_sq == 0.0;
            additive &= out.total_loss == out.task_loss + out.lambda * out.dfg_loss;
        }
    }
    report.record(
        7,
        endpoint_one && endpoint_zero && frozen && additive,
        format!(
            "alpha=1 logits bit-identical {endpoint_one}, alpha=0 skip exact {endpoint_zero}, \
             teacher gradients zero {frozen}, total = task + lambda*dfg {additive}"
        ),
    );
}

fn hard_gate(report: &mut Report, seed: u64) {
    let t0 = Instant::now();
    let mut checks = Vec::new();
    for family in GradFamily::ALL {
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            checks.push(hard_gate_variance_check(family, p, 100_000, seed).unwrap());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.z()).fold(0.0, f64::max);
    let pass = checks.iter().all(|c| c.pass) && secs < 30.0;
    report.record(
        1,
        pass,
        format!(
            "{} cases within 3 SE {}, worst |z| {worst:.2}, {secs:.1}s (limit 30s)",
            checks.len(),
            checks.iter().all(|c| c.pass)
        ),
    );
}

fn soft_gate(report: &mut Report, seed: u64) {
    let (rows, monotone) = soft_gate_check(&[0.1, 0.5, 1.0, 2.0], 100_000, seed).unwrap();
    let within = rows.iter().all(|r| r.excess.pass);
    let detail: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "tau {} Var(r) {:.4} |z| {:.2}",
                r.tau,
                r.var_r,
                r.excess.z()
            )
        })
        .collect();
    report.record(
        3,
        monotone && within,
        format!(
            "monotone {monotone}, excess within 3 SE {within}; {}",
            detail.join(", ")
        ),
    );
}

fn curvature(report: &mut Report, seed: u64) {
    let s = curvature_suite(100, seed).unwrap();
    let pass = s.violations == 0 && s.isotropic_gap <= 1e-12 && s.max_dcr_bias == 0.0;
    report.record(
        4,
        pass,
        format!(
            "{} probes, {} violations, worst bias/bound {:.4}, quadratic equality gap {:.1e}, DCR bias {}",
            s.probes, s.violations, s.worst_ratio, s.isotropic_gap, s.max_dcr_bias
        ),
    );
}

fn live_theory(report: &mut Report, cfg: &RunConfig, teacher: &Backbone) {
    let t0 = Instant::now();
    let th = &cfg.theory;
    let snap = make_snapshot(cfg, teacher).unwrap();
    let (train, _) = make_synthetic_task(&cfg.task).unwrap();
    let batches = probe_batches(&train, th.batches, th.batch_size, cfg.seed);
    let mut rng = stream(cfg.seed, &[11]);
    let dcr =
        empirical_gate_variance(&snap, GateKind::Dcr, th.p, &batches, th.draws, &mut rng).unwrap();
    let theseus = empirical_gate_variance(
        &snap,
        GateKind::Bernoulli,
        th.p,
        &batches,
        th.draws,
        &mut rng,
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let gap = theseus.gate_induced - dcr.gate_induced;
    let rel = (gap - theseus.closed_form).abs() / theseus.closed_form;
    report.record(
        2,
        dcr.gate_induced == 0.0 && rel <= 0.1 && secs < 300.0,
        format!(
            "DCR gate-induced {}, Theseus gap {gap:.4e} vs closed form {:.4e} (relative error {rel:.3}, limit 0.1), \
             {} batches x {} draws at p={}, {secs:.0}s (limit 300s)",
            dcr.gate_induced, theseus.closed_form, th.batches, th.draws, th.p
        ),
    );

    let path = path_suite(&snap, &train, 20, th.batch_size, cfg.seed).unwrap();
    report.record(
        5,
        path.violations == 0,
        format!(
            "{} pairs x {} grid points, {} violations, max |f(y(a)) - f(y(0))| - L a D = {:.3e}",
            path.pairs, path.grid_points, path.violations, path.max_violation
        ),
    );
}

fn find(records: &[RunRecord], kind: MethodKind) -> &RunRecord {
    records
        .iter()
        .find(|r| r.summary.method == kind)
        .expect("method in the grid")
}

fn grid(report: &mut Report, cfg: &RunConfig, teacher: &Backbone) {
    let t0 = Instant::now();
    let records = compare(cfg, teacher).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    println!("{}", ranking_table(&records));

    // never reaching the threshold counts as slower than any step count,
    // ties broken by lower final student accuracy
    let key = |r: &RunRecord| {
        (
            r.summary.steps_to_threshold.unwrap_or(usize::MAX),
            -r.summary.final_student_val_acc,
        )
    };
    let steps = |k| find(&records, k).summary.steps_to_threshold;
    let (dfg, dcr, theseus) = (
        key(find(&records, MethodKind::DcrDfg)),
        key(find(&records, MethodKind::Dcr)),
        key(find(&records, MethodKind::TheseusBernoulli)),
    );
    let student = key(find(&records, MethodKind::StudentOnly));
    let student_last = records
        .iter()
        .filter(|r| r.summary.method != MethodKind::StudentOnly)
        .all(|r| key(r) < student);
    let ordered = dfg.0 <= dcr.0 && dcr < theseus && dcr.0 < theseus.0 && student_last;
    report.record(
        8,
        ordered && secs < 900.0,
        format!(
            "steps to threshold dcr_dfg {:?}, dcr {:?}, theseus_bernoulli {:?}, student_only {:?}; \
             ordering {ordered}, grid {secs:.0}s (limit 900s)",
            steps(MethodKind::DcrDfg),
            steps(MethodKind::Dcr),
            steps(MethodKind::TheseusBernoulli),
            steps(MethodKind::StudentOnly)
        ),
    );

    let ours = &find(&records, MethodKind::DcrDfg).summary.final_cos;
    let theirs = &find(&records, MethodKind::TheseusBernoulli)
        .summary
        .final_cos;
    let all_high = ours.iter().all(|c| c.1 >= 0.9);
    let wins = ours.iter().zip(theirs).filter(|(a, b)| a.1 >= b.1).count();
    let fmt = |v: &[(usize, f64)]| {
        v.iter()
            .map(|c| format!("{}:{:.3}", c.0, c.1))
            .collect::<Vec<_>>()
            .join(" ")
    };
    report.record(
        9,
        all_high && wins >= 3,
        format!(
            "dcr_dfg final cosine [{}] all >= 0.9 {all_high}; >= theseus_bernoulli [{}] on {wins} of {} blocks",
            fmt(ours),
            fmt(theirs),
            ours.len()
        ),
    );
}

fn main() {
    let cfg = RunConfig::default();
    let mut report = Report {
        results: Vec::new(),
    };
    schedules(&mut report);
    autodiff(&mut report);
    structural(&mut report, &cfg);
    hard_gate(&mut report, cfg.seed);
    soft_gate(&mut report, cfg.seed);
    curvature(&mut report, cfg.seed);

    let t0 = Instant::now();
    let teacher = make_teacher(&cfg).unwrap();
    println!(
        "teacher: validation accuracy {:.4} after {} epochs, {:.0}s",
        teacher.val_acc,
        cfg.teacher_training.epochs,
        t0.elapsed().as_secs_f64()
    );
    live_theory(&mut report, &cfg, &teacher.backbone);
    grid(&mut report, &cfg, &teacher.backbone);

    report.results.sort();
    let failed: Vec<usize> = report
        .results
        .iter()
        .filter(|r| !r.1)
        .map(|r| r.0)
        .collect();
    println!(
        "acceptance: {} of {} criteria pass",
        report.results.len() - failed.len(),
        report.results.len()
    );
    if !failed.is_empty() {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
