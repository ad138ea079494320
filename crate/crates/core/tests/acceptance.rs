//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any gating criterion fails. Criterion 13 is exploratory and only
//! reported.

use std::time::{Duration, Instant};

use otmetric::elliptic::{
    integration_by_parts_defect, null_space_test, solve, DivFormOperator, SolverConfig,
};
use otmetric::grid::{GridSpec, MetricField, ScalarField};
use otmetric::ot::{self, OtConfig, OtSource};
use otmetric::reconstruction::{gauge_compare, reconstruct, GaugeReport, ReconstructionResult};
use otmetric::scenario::{simulate, ScenarioConfig, Truth};
use otmetric::Sym2;

struct Outcome {
    id: &'static str,
    title: &'static str,
    pass: bool,
    gating: bool,
    detail: String,
}

struct Run {
    cfg: ScenarioConfig,
    truth: Truth,
    result: ReconstructionResult,
    gauge: GaugeReport,
    ibp_max: f64,
    simulate_time: Duration,
    reconstruct_time: Duration,
}

fn run(text: &str) -> Run {
    let cfg = ScenarioConfig::parse(text).expect("scenario parses");
    let truth = Truth::synthesize(&cfg).expect("truth");
    let t = Instant::now();
    let (ms, dict) = simulate(&cfg, &truth).expect("probe solves");
    let simulate_time = t.elapsed();
    let op = DivFormOperator::assemble(&truth.g, &truth.h).unwrap();
    let ibp_max = dict
        .entries
        .iter()
        .map(|e| integration_by_parts_defect(&op, &e.phi).abs())
        .fold(0.0, f64::max);
    let t = Instant::now();
    let result = reconstruct(&ms, &cfg.patch_cover().unwrap(), &cfg.recon).expect("reconstruction");
    let reconstruct_time = t.elapsed();
    let gauge = gauge_compare(&result.ghat, &truth.g, &result.mask).unwrap();
    Run {
        cfg,
        truth,
        result,
        gauge,
        ibp_max,
        simulate_time,
        reconstruct_time,
    }
}

/// Relative L2 distance on the mask after removing each field's masked mean.
fn masked_rel_l2(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    let n = mask.iter().filter(|&&m| m).count() as f64;
    let mean = |v: &[f64]| {
        v.iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(x, _)| x)
            .sum::<f64>()
            / n
    };
    let (ma, mb) = (mean(a), mean(b));
    let (mut num, mut den) = (0.0, 0.0);
    for k in (0..mask.len()).filter(|&k| mask[k]) {
        num += ((a[k] - ma) - (b[k] - mb)).powi(2);
        den += (b[k] - mb).powi(2);
    }
    (num / den).sqrt()
}

fn criterion_1() -> Outcome {
    let mut errs = Vec::new();
    let mut slowest = Duration::ZERO;
    for n in [64, 128] {
        let g = GridSpec::torus(n).unwrap();
        let id = MetricField::identity(g);
        let one = ScalarField::constant(g, 1.0);
        let src = ScalarField::from_fn(g, |x, _| -x.sin());
        let t = Instant::now();
        let op = DivFormOperator::assemble(&id, &one).unwrap();
        let (phi, _) = solve(&op, &src, &one, &id, &SolverConfig::default()).unwrap();
        slowest = slowest.max(t.elapsed());
        let exact = ScalarField::from_fn(g, |x, _| x.sin());
        errs.push(
            phi.values
                .iter()
                .zip(&exact.values)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())),
        );
    }
    let ratio = errs[0] / errs[1];
    Outcome {
        id: "1",
        title: "elliptic convergence",
        pass: (3.2..=4.8).contains(&ratio) && slowest < Duration::from_secs(10),
        gating: true,
        detail: format!(
            "Linf 64^2 {:.3e}, 128^2 {:.3e}, ratio {ratio:.3} in [3.2, 4.8]; slowest solve {slowest:.2?} < 10 s",
            errs[0], errs[1]
        ),
    }
}

fn criterion_2() -> Outcome {
    let g = GridSpec::torus(64).unwrap();
    let cases = [
        (MetricField::identity(g), ScalarField::constant(g, 1.0)),
        (
            MetricField::from_fn(g, |_, y| {
                let m = 0.2 * y.sin();
                Sym2::new(m.exp(), 0.1 * y.cos(), (-m).exp())
            }),
            ScalarField::from_fn(g, |_, y| 1.0 + 0.3 * y.sin()),
        ),
        (
            MetricField::from_fn(g, |x, y| {
                Sym2::scaled_identity((0.3 * x.sin() * y.sin()).exp())
            }),
            ScalarField::from_fn(g, |x, _| 1.0 + 0.5 * x.cos()),
        ),
    ];
    let worst = cases
        .iter()
        .enumerate()
        .map(|(i, (m, h))| {
            null_space_test(&DivFormOperator::assemble(m, h).unwrap(), 1e-13, i as u64)
        })
        .fold(0.0, f64::max);
    Outcome {
        id: "2",
        title: "null space is the constants",
        pass: worst <= 1e-8,
        gating: true,
        detail: format!("worst residual iterate {worst:.3e} <= 1e-8 over 3 metric/density pairs"),
    }
}

fn criterion_3(runs: &[&Run]) -> Outcome {
    let worst = runs.iter().map(|r| r.ibp_max).fold(0.0, f64::max);
    Outcome {
        id: "3",
        title: "integration by parts on every probe",
        pass: worst <= 1e-8,
        gating: true,
        detail: format!(
            "max |defect| {worst:.3e} <= 1e-8 over {} probe sets",
            runs.len()
        ),
    }
}

fn criterion_4(aniso: &Run) -> Outcome {
    let ginv = aniso.truth.g.inverse().unwrap();
    let cmp = gauge_compare(&aniso.result.gtilde, &ginv, &aniso.result.mask).unwrap();
    let cov = aniso.result.coverage();
    let t = aniso.reconstruct_time;
    Outcome {
        id: "4",
        title: "unit-determinant tensor recovery",
        pass: cmp.median <= 0.05 && cov >= 0.7 && t < Duration::from_secs(60),
        gating: true,
        detail: format!(
            "median relerr {:.3e} <= 5e-2, coverage {cov:.4} >= 0.7, reconstruction {t:.2?} < 60 s (probe solves {:.2?})",
            cmp.median, aniso.simulate_time
        ),
    }
}

fn criterion_5(conf: &Run) -> Outcome {
    let truth: Vec<f64> = (0..conf.cfg.grid.len())
        .map(|k| -0.5 * conf.truth.g.at(k).det().ln())
        .collect();
    let rel = masked_rel_l2(&conf.result.logbeta.values, &truth, &conf.result.mask);
    Outcome {
        id: "5",
        title: "log beta recovery",
        pass: rel <= 0.05,
        gating: true,
        detail: format!("relative L2 {rel:.3e} <= 5e-2 against -2 lambda"),
    }
}

fn criterion_6(conf: &Run, scaled: &Run) -> Outcome {
    let ratio = conf.gauge.s / scaled.gauge.s;
    let dev = (ratio * 3.0 - 1.0).abs();
    let diff = conf
        .gauge
        .relerr
        .values
        .iter()
        .zip(&scaled.gauge.relerr.values)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Outcome {
        id: "6",
        title: "multiplicative gauge",
        pass: dev <= 0.02 && diff <= 1e-6,
        gating: true,
        detail: format!(
            "s(g) / s(3g) = {ratio:.6} (1/3 within 2%: deviation {dev:.2e}); relerr fields differ by {diff:.2e} <= 1e-6"
        ),
    }
}

fn criterion_7(coarse: &Run, fine: &Run) -> Outcome {
    let ratio = fine.gauge.median / coarse.gauge.median;
    Outcome {
        id: "7",
        title: "refinement",
        pass: ratio <= 0.6,
        gating: true,
        detail: format!(
            "median relerr 128^2 {:.3e}, 256^2 {:.3e}, ratio {ratio:.3} <= 0.6",
            coarse.gauge.median, fine.gauge.median
        ),
    }
}

fn criterion_8(conf: &Run) -> Outcome {
    let frac = conf.result.gap_fraction(10.0);
    Outcome {
        id: "8",
        title: "codimension-one gap",
        pass: frac >= 0.7,
        gating: true,
        detail: format!("gap >= 10 on {:.2}% of nodes (>= 70%)", 100.0 * frac),
    }
}

fn criterion_9(conf: &Run) -> Outcome {
    let r = &conf.result;
    let (mut num, mut den) = (0.0, 0.0);
    for k in (0..r.mask.len()).filter(|&k| r.mask[k]) {
        num += (r.f.c1[k] - r.f_alt.c1[k]).powi(2) + (r.f.c2[k] - r.f_alt.c2[k]).powi(2);
        den += r.f.c1[k].powi(2) + r.f.c2[k].powi(2);
    }
    let rel = (num / den).sqrt();
    Outcome {
        id: "9",
        title: "pairing and wedge paths agree",
        pass: rel <= 0.02,
        gating: true,
        detail: format!("relative L2 {rel:.3e} <= 2e-2"),
    }
}

fn criteria_10_to_12() -> Vec<Outcome> {
    let cfg = OtConfig::default();
    let t = Instant::now();
    let report = ot::validate(&cfg).expect("transport validation");
    let elapsed = t.elapsed();
    let l = &report.linearization;
    let errors: Vec<String> = l.rows.iter().map(|r| format!("{:.2e}", r.error)).collect();

    // the bare sin x source with plain floor subtraction, for the record
    let literal = OtConfig {
        source: OtSource::SinX { amplitude: 0.5 },
        debias: false,
        ..cfg.clone()
    };
    let grid = GridSpec::torus(literal.n).unwrap();
    let h = ScalarField::constant(grid, 1.0 / (grid.lx * grid.ly));
    let sk = ot::SinkhornConfig {
        reg: literal.reg,
        max_iter: literal.max_iter,
        tol: literal.tol,
    };
    let lit = ot::linearization_check(
        &h,
        &literal.source.field(grid),
        &literal.eps,
        1.0,
        &sk,
        false,
    )
    .unwrap();

    let h25 = ot::cost_hessian_check(&grid, 2.5).unwrap();
    let x25 = ot::cost_cross_hessian_check(&grid, 2.5).unwrap();
    let hess = report.hessian_error.max(h25);
    vec![
        Outcome {
            id: "10",
            title: "transport linearization order",
            pass: l.slope >= 1.7 && elapsed < Duration::from_secs(300),
            gating: true,
            detail: format!(
                "source {} on 64^2, reg {} with reg-halving extrapolation: errors [{}], slope {:.3} >= 1.7 (floor {:.1e}); {elapsed:.1?} < 300 s",
                cfg.source.name(),
                cfg.reg,
                errors.join(", "),
                l.slope,
                l.floor
            ),
        },
        Outcome {
            id: "10*",
            title: "linearization, 0.5 sin x without extrapolation",
            pass: lit.slope >= 1.7,
            gating: false,
            detail: format!(
                "slope {:.3}: the exact map is linear in eps here, so only the O(eps reg) entropic bias remains",
                lit.slope
            ),
        },
        Outcome {
            id: "11",
            title: "map invariance under c0 -> 4 c0",
            pass: report.scaling.matched == 0.0 && report.scaling.unmatched_cells <= 2.0,
            gating: true,
            detail: format!(
                "matched kernels Linf {:.1e} (identical), unmatched {:.3} cells <= 2",
                report.scaling.matched, report.scaling.unmatched_cells
            ),
        },
        Outcome {
            id: "12",
            title: "cost Hessian equals the metric",
            pass: hess <= 1e-5,
            gating: true,
            detail: format!(
                "max |Hess - c0 I| {hess:.2e} <= 1e-5 for c0 in {{1, 2.5}}; cross term {:.2e}",
                report.cross_hessian_error.max(x25)
            ),
        },
    ]
}

fn criterion_13() -> Outcome {
    let noisy = run("noise.sigma = 0.01\nrun.seed = 11\nrecon.smooth_mu = true\n");
    Outcome {
        id: "13",
        title: "one percent noise with smoothing",
        pass: noisy.gauge.median <= 0.15,
        gating: false,
        detail: format!(
            "median relerr {:.3e} <= 0.15, coverage {:.4}",
            noisy.gauge.median,
            noisy.result.coverage()
        ),
    }
}

fn main() {
    let start = Instant::now();
    let mut out = vec![criterion_1(), criterion_2()];

    let conf = run("scenario.name = conformal\n");
    let aniso = run("metric.family = anisotropic\nmetric.amplitude = 0.2\n");
    let scaled = run("metric.scale = 3\n");
    let fine = run("grid.n = 256\n");

    out.push(criterion_3(&[&conf, &aniso, &scaled, &fine]));
    out.push(criterion_4(&aniso));
    out.push(criterion_5(&conf));
    out.push(criterion_6(&conf, &scaled));
    out.push(criterion_7(&conf, &fine));
    out.push(criterion_8(&conf));
    out.push(criterion_9(&conf));
    out.extend(criteria_10_to_12());
    out.push(criterion_13());

    let mut failed = 0;
    println!();
    for o in &out {
        let tag = match (o.pass, o.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "INFO",
        };
        if !o.pass && o.gating {
            failed += 1;
        }
        println!("[{tag}] criterion {:>3} {}: {}", o.id, o.title, o.detail);
    }
    println!("acceptance finished in {:.1?}", start.elapsed());
    if failed > 0 {
        println!("{failed} gating criteria failed");
        std::process::exit(1);
    }
}
