use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use cclab::calibration::{build_calibration_with, verify_calibration, CalibrationField, CalibrationOptions};
use cclab::diameter::{diameter_sweep, SweepOptions};
use cclab::distance::{distance_oracle_graph, distance_sandwich, OracleOutcome, UpperOptions};
use cclab::hamiltonian::integrate_extremal;
use cclab::quasicalib::{build_quasicalibration_with, measure_quasicalibration_bounds, QuasiCalibration, QuasiOptions};
use cclab::structures::BUILTIN_NAMES;
use cclab::{builtin, CotangentState, DistanceStatus, Regularity, SRStructure};

use crate::config::{merge_from, ConfigFile};
use crate::output::OutDir;
use crate::Failure;

pub struct Ctx {
    pub structure: SRStructure,
    pub structure_spec: Value,
    pub seed: u64,
    pub out: OutDir,
    pub json: bool,
}

impl Ctx {
    fn manifest(&self, command: &str, section: Value) -> Result<(), Failure> {
        let resolved = json!({
            "structure": self.structure_spec,
            "seed": self.seed,
            command: section,
        });
        self.out.manifest(command, resolved).map(|_| ())
    }

    fn point(&self, p: Option<Vec<f64>>, what: &str) -> Result<Vec<f64>, Failure> {
        let p = p.unwrap_or_else(|| vec![0.0; self.structure.n]);
        if p.len() != self.structure.n {
            return Err(Failure::Config(format!(
                "{what} has {} coordinates, {} has dimension {}",
                p.len(),
                self.structure.name,
                self.structure.n
            )));
        }
        Ok(p)
    }

    fn emit(&self, summary: &Value, human: impl FnOnce()) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(summary).unwrap_or_default());
        } else {
            human();
        }
    }
}

fn fmt_point(p: &[f64]) -> String {
    let parts: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
    format!("({})", parts.join(", "))
}

fn core<T>(r: cclab::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::from_core)
}

pub fn list_structures(as_json: bool) -> Result<(), Failure> {
    let rows: Vec<Value> = BUILTIN_NAMES
        .iter()
        .map(|name| {
            let s = builtin(name).expect("builtin names resolve");
            json!({
                "name": name,
                "n": s.n,
                "m": s.m,
                "regularity": s.regularity,
                "domain": { "min": s.domain.min, "max": s.domain.max },
            })
        })
        .collect();
    if as_json {
        println!("{}", serde_json::to_string_pretty(&rows).unwrap_or_default());
        return Ok(());
    }
    println!("{:<16} {:>2} {:>2}  {:<4} domain", "name", "n", "m", "reg");
    for name in BUILTIN_NAMES {
        let s = builtin(name).expect("builtin names resolve");
        let c = s.domain.half_widths()[0];
        println!(
            "{:<16} {:>2} {:>2}  {:<4} [-{c}, {c}]^{}",
            name,
            s.n,
            s.m,
            s.regularity.to_string(),
            s.n
        );
    }
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtremalArgs {
    /// Initial point, comma separated [default: origin].
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub point: Option<Vec<f64>>,
    /// Initial covector, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub covector: Option<Vec<f64>>,
    /// Final time, may be negative [default: 1].
    #[arg(long, allow_negative_numbers = true)]
    pub time: Option<f64>,
    /// RK4 steps [default: 1000].
    #[arg(long)]
    pub steps: Option<usize>,
}

pub fn extremal(ctx: &Ctx, mut a: ExtremalArgs, file: &ConfigFile) -> Result<(), Failure> {
    merge_from!(a, &file.extremal; point, covector, time, steps);
    let s = &ctx.structure;
    let point = ctx.point(a.point, "point")?;
    let covector = a
        .covector
        .ok_or_else(|| Failure::Config("extremal needs --covector".into()))?;
    if covector.len() != s.n {
        return Err(Failure::Config(format!("covector needs {} entries", s.n)));
    }
    let time = a.time.unwrap_or(1.0);
    let steps = a.steps.unwrap_or(1000);
    ctx.manifest(
        "extremal",
        json!({ "point": point, "covector": covector, "time": time, "steps": steps }),
    )?;
    let traj = core(integrate_extremal(
        s,
        &CotangentState::new(point, covector),
        time,
        steps,
    ))?;
    let path = ctx.out.write("extremal.csv", &traj.to_csv())?;
    let last = traj.final_state();
    let summary = json!({
        "file": path,
        "rows": traj.states.len(),
        "status": traj.status,
        "h_drift": traj.h_drift,
        "drift_bound": traj.drift_bound,
        "final_q": last.q,
        "final_lambda": last.lam,
    });
    ctx.emit(&summary, || {
        println!(
            "wrote {} ({} rows, status {:?})",
            path.display(),
            traj.states.len(),
            traj.status
        );
        println!("final q = {}", fmt_point(&last.q));
        println!("H drift = {:e} (bound {:e})", traj.h_drift, traj.drift_bound);
    });
    if !(traj.h_drift <= traj.drift_bound) {
        return Err(Failure::Compute(format!(
            "Hamiltonian drift {:e} exceeds {:e}",
            traj.h_drift, traj.drift_bound
        )));
    }
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateArgs {
    /// Base point [default: origin].
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub point: Option<Vec<f64>>,
    /// Flow half-time [default: a quarter of the smallest domain half-width].
    #[arg(long)]
    pub eps: Option<f64>,
    /// Half-width of the transversal seed box [default: as eps].
    #[arg(long)]
    pub uprime: Option<f64>,
    /// Seed grid points per transversal axis [default: 17].
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Tabulated times per flow line, odd [default: 65].
    #[arg(long)]
    pub time_samples: Option<usize>,
    /// RK4 steps between tabulated times [default: 4].
    #[arg(long)]
    pub substeps: Option<usize>,
    /// Control direction of the calibrated field at the base point.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub direction: Option<Vec<f64>>,
    /// Run the verification suite on this many samples after building [default: 0].
    #[arg(long)]
    pub verify: Option<usize>,
}

pub fn calibrate(ctx: &Ctx, mut a: CalibrateArgs, file: &ConfigFile) -> Result<(), Failure> {
    merge_from!(a, &file.calibrate; point, eps, uprime, resolution, time_samples, substeps, direction, verify);
    let s = &ctx.structure;
    let point = ctx.point(a.point, "point")?;
    let d = CalibrationOptions::default();
    let opts = CalibrationOptions {
        eps: a.eps,
        uprime_half: a.uprime,
        resolution: a.resolution.unwrap_or(d.resolution),
        time_samples: a.time_samples.unwrap_or(d.time_samples),
        substeps: a.substeps.unwrap_or(d.substeps),
        direction: a.direction.clone(),
        ..d
    };
    let verify = a.verify.unwrap_or(0);
    ctx.manifest(
        "calibrate",
        json!({
            "point": point,
            "eps": opts.eps,
            "uprime": opts.uprime_half,
            "resolution": opts.resolution,
            "time_samples": opts.time_samples,
            "substeps": opts.substeps,
            "direction": opts.direction,
            "verify": verify,
        }),
    )?;
    let cf = core(build_calibration_with(s, &point, &opts))?;
    let path = ctx.out.write("calibration.json", &core(cf.to_json())?)?;
    let report = (verify > 0).then(|| verify_calibration(&cf, verify, ctx.seed));
    if let Some(r) = &report {
        ctx.out.write_json("calibration_report.json", r)?;
    }
    let summary = json!({
        "file": path,
        "eps": cf.settings.eps,
        "uprime": cf.settings.uprime_half,
        "shrink_rounds": cf.shrink_rounds,
        "w_box": cf.w_box,
        "min_det": cf.min_det,
        "max_unit_defect": cf.max_unit_defect,
        "margin": report.as_ref().map(|r| r.margin),
        "unit_error": report.as_ref().map(|r| r.unit_error),
    });
    ctx.emit(&summary, || {
        println!("wrote {}", path.display());
        println!(
            "eps = {}, U' half-width = {}, shrink rounds = {}",
            cf.settings.eps, cf.settings.uprime_half, cf.shrink_rounds
        );
        println!("W = {} .. {}", fmt_point(&cf.w_box.min), fmt_point(&cf.w_box.max));
        println!(
            "min det DQ = {:.6}, max unit defect = {:e}",
            cf.min_det, cf.max_unit_defect
        );
        if let Some(r) = &report {
            println!("margin = {:.15}, unit error = {:e}", r.margin, r.unit_error);
        }
    });
    match report {
        Some(r) if !r.passed(1e-6) => Err(Failure::Compute(format!(
            "verification failed: margin {}, unit error {:e}, {} failures",
            r.margin, r.unit_error, r.failures
        ))),
        _ => Ok(()),
    }
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuasiArgs {
    /// Base point [default: origin].
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub point: Option<Vec<f64>>,
    /// Target slack for both inequalities [default: 0.05].
    #[arg(long)]
    pub target_eps: Option<f64>,
    /// Samples used to measure the slacks [default: 2048].
    #[arg(long)]
    pub samples: Option<usize>,
}

pub fn quasi_calibrate(ctx: &Ctx, mut a: QuasiArgs, file: &ConfigFile) -> Result<(), Failure> {
    merge_from!(a, &file.quasi_calibrate; point, target_eps, samples);
    let s = &ctx.structure;
    let point = ctx.point(a.point, "point")?;
    let target = a.target_eps.unwrap_or(0.05);
    let samples = a.samples.unwrap_or(2048);
    ctx.manifest(
        "quasi-calibrate",
        json!({ "point": point, "target_eps": target, "samples": samples }),
    )?;
    let qc = core(build_quasicalibration_with(
        s,
        &point,
        target,
        &QuasiOptions {
            sample_count: samples,
            seed: ctx.seed,
        },
    ))?;
    let path = ctx.out.write("quasicalibration.json", &core(qc.to_json())?)?;
    let summary = json!({
        "file": path,
        "pivot": qc.pivot,
        "hbar": qc.hbar,
        "lambda": qc.lambda,
        "omega": qc.omega,
        "u": qc.u,
        "eps1": qc.eps1,
        "eps2": qc.eps2,
        "rounds": qc.rounds,
    });
    ctx.emit(&summary, || {
        println!("wrote {}", path.display());
        println!("pivot X{}, |hbar| = {}", qc.pivot, cclab::linalg::norm(&qc.hbar));
        println!("lambda = {}, omega = {}", fmt_point(&qc.lambda), fmt_point(&qc.omega));
        println!("U = {} .. {}", fmt_point(&qc.u.min), fmt_point(&qc.u.max));
        println!("eps1 = {:e}, eps2 = {:e}", qc.eps1, qc.eps2);
    });
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyArgs {
    /// Stored calibration or quasi-calibration.
    #[arg(long)]
    pub file: Option<PathBuf>,
    /// Verification samples [default: 10000].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Allowed margin and unit-error excess [default: 1e-6].
    #[arg(long)]
    pub tol: Option<f64>,
}

pub fn verify(mut a: VerifyArgs, file: &ConfigFile, seed: u64, out: &OutDir, as_json: bool) -> Result<(), Failure> {
    merge_from!(a, &file.verify; file, samples, tol);
    let path = a.file.ok_or_else(|| Failure::Config("verify needs --file".into()))?;
    let samples = a.samples.unwrap_or(10_000);
    let tol = a.tol.unwrap_or(1e-6);
    let resolved = json!({
        "seed": seed,
        "verify": { "file": path, "samples": samples, "tol": tol },
    });
    out.manifest("verify", resolved)?;
    let text =
        std::fs::read_to_string(&path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let format = serde_json::from_str::<Value>(&text)
        .map_err(|e| Failure::Compute(format!("{}: schema error: not JSON: {e}", path.display())))?
        .get("format")
        .and_then(Value::as_str)
        .map(str::to_owned);
    let schema = |e: cclab::Error| Failure::Compute(format!("{}: schema error: {e}", path.display()));
    match format.as_deref() {
        Some("cclab-calibration/1") => {
            let cf = CalibrationField::from_json(&text).map_err(schema)?;
            let r = verify_calibration(&cf, samples, seed);
            out.write_json("verify.json", &r)?;
            let ok = r.passed(tol);
            let summary = json!({
                "kind": "calibration",
                "structure": r.structure,
                "margin": r.margin,
                "unit_error": r.unit_error,
                "failures": r.failures,
                "loop_decay_ok": r.loop_decay_ok(),
                "loop_constant": r.loop_constant,
                "passed": ok,
            });
            emit(as_json, &summary, || {
                println!("calibration of {} ({} samples)", r.structure, r.samples);
                println!("margin s = {:.15}", r.margin);
                println!("unit error = {:e}", r.unit_error);
                println!(
                    "loop residual decay ok = {}, constant = {:e}",
                    r.loop_decay_ok(),
                    r.loop_constant
                );
                println!("{}", if ok { "PASS" } else { "FAIL" });
            });
            if !ok {
                return Err(Failure::Compute("calibration verification failed".into()));
            }
        }
        Some("cclab-quasicalibration/1") => {
            let (qc, s): (QuasiCalibration, SRStructure) = QuasiCalibration::from_json(&text).map_err(schema)?;
            let (eps1, eps2) = core(measure_quasicalibration_bounds(&qc, &s, &qc.u, samples, seed))?;
            let ok = eps1 <= qc.target_eps && eps2 <= qc.target_eps && qc.null_defect <= 1e-10;
            let summary = json!({
                "kind": "quasi-calibration",
                "structure": s.name,
                "eps1": eps1,
                "eps2": eps2,
                "target_eps": qc.target_eps,
                "null_defect": qc.null_defect,
                "passed": ok,
            });
            out.write_json("verify.json", &summary)?;
            emit(as_json, &summary, || {
                println!("quasi-calibration of {} ({} samples)", s.name, samples);
                println!("eps1 = {:e}, eps2 = {:e} (target {})", eps1, eps2, qc.target_eps);
                println!("null defect = {:e}", qc.null_defect);
                println!("{}", if ok { "PASS" } else { "FAIL" });
            });
            if !ok {
                return Err(Failure::Compute("quasi-calibration slacks exceed the target".into()));
            }
        }
        other => {
            return Err(Failure::Compute(format!(
                "{}: schema error: unrecognised format {:?}",
                path.display(),
                other
            )))
        }
    }
    Ok(())
}

fn emit(as_json: bool, summary: &Value, human: impl FnOnce()) {
    if as_json {
        println!("{}", serde_json::to_string_pretty(summary).unwrap_or_default());
    } else {
        human();
    }
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceArgs {
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub from: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub to: Option<Vec<f64>>,
    /// Control segments of the discretised curve [default: 32].
    #[arg(long)]
    pub segments: Option<usize>,
    /// Optimizer restarts [default: 4].
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Samples used to verify the lower-bound calibration [default: 2000].
    #[arg(long)]
    pub verify_samples: Option<usize>,
    /// Also run the lattice oracle with this step.
    #[arg(long)]
    pub oracle_step: Option<f64>,
    /// Euclidean radius around `from` explored by the oracle [default: 2 |to - from| + step].
    #[arg(long)]
    pub oracle_cap: Option<f64>,
}

pub fn distance(ctx: &Ctx, mut a: DistanceArgs, file: &ConfigFile) -> Result<(), Failure> {
    merge_from!(a, &file.distance; from, to, segments, restarts, verify_samples, oracle_step, oracle_cap);
    let s = &ctx.structure;
    let p = ctx.point(a.from, "from")?;
    let q = a.to.ok_or_else(|| Failure::Config("distance needs --to".into()))?;
    let q = ctx.point(Some(q), "to")?;
    let d = UpperOptions::default();
    let opts = UpperOptions {
        segments: a.segments.unwrap_or(d.segments),
        restarts: a.restarts.unwrap_or(d.restarts),
        seed: ctx.seed,
        ..d
    };
    let verify_samples = a.verify_samples.unwrap_or(2000);
    let chord = cclab::linalg::dist(&p, &q);
    let oracle_cap = a.oracle_step.map(|h| a.oracle_cap.unwrap_or(2.0 * chord + h));
    ctx.manifest(
        "distance",
        json!({
            "from": p,
            "to": q,
            "segments": opts.segments,
            "restarts": opts.restarts,
            "verify_samples": verify_samples,
            "oracle_step": a.oracle_step,
            "oracle_cap": oracle_cap,
        }),
    )?;
    let est = core(distance_sandwich(s, &p, &q, &opts, verify_samples))?;
    let oracle = match (a.oracle_step, oracle_cap) {
        (Some(h), Some(cap)) => Some(core(distance_oracle_graph(s, &p, &q, h, cap))?),
        _ => None,
    };
    let mut doc = serde_json::to_value(&est).map_err(|e| Failure::Compute(e.to_string()))?;
    doc["oracle"] = serde_json::to_value(&oracle).map_err(|e| Failure::Compute(e.to_string()))?;
    let path = ctx.out.write_json("distance.json", &doc)?;
    if let Some(w) = &est.witness {
        ctx.out.write("witness.csv", &w.to_csv())?;
    }
    ctx.emit(&doc, || {
        println!("wrote {}", path.display());
        match est.status {
            DistanceStatus::InftyCertified => {
                let l = est.diagnostics.conserved_functional.clone().unwrap_or_default();
                println!(
                    "d = +inf (certified: l = {} is constant along admissible curves)",
                    fmt_point(&l)
                );
            }
            DistanceStatus::InftySuspect => {
                println!("d in [{}, +inf) (no feasible curve found)", est.lower);
            }
            DistanceStatus::Finite => {
                println!("d in [{}, {}]", est.lower, est.upper.unwrap_or(f64::INFINITY));
            }
        }
        println!("status {:?}, method {}", est.status, est.method);
        if let Some(note) = &est.diagnostics.note {
            println!("note: {note}");
        }
        match &oracle {
            Some(OracleOutcome::Reached { distance, expanded }) => {
                println!("lattice oracle: {distance} ({expanded} vertices)")
            }
            Some(OracleOutcome::Unreachable { expanded }) => {
                println!("lattice oracle: unreachable ({expanded} vertices)")
            }
            None => {}
        }
    });
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum RegimeArg {
    #[value(name = "C11")]
    C11,
    #[value(name = "C0")]
    C0,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiameterArgs {
    /// Base point [default: origin].
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub point: Option<Vec<f64>>,
    /// Strictly decreasing radii [default: 0.1,0.05,0.025 for C11, 0.05,0.025 for C0].
    #[arg(long, value_delimiter = ',')]
    pub radii: Option<Vec<f64>>,
    /// Certificate type [default: the structure's regularity].
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
    /// delta as a fraction of r [default: 0.001].
    #[arg(long)]
    pub delta_fraction: Option<f64>,
    /// Fixed delta for every radius (overrides --delta-fraction).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Extra base points near the base [default: 5].
    #[arg(long)]
    pub cloud: Option<usize>,
    /// Quasi-calibration target slack [default: 0.05].
    #[arg(long)]
    pub target_eps: Option<f64>,
    /// Minimal certified ratio [default: 0.98, or 0.98 (1 - target_eps) for C0].
    #[arg(long)]
    pub target_ratio: Option<f64>,
    /// Samples for the calibration margin [default: 2000].
    #[arg(long)]
    pub verify_samples: Option<usize>,
    /// Compare each bound with an optimizer distance between the endpoints [default: true].
    #[arg(long)]
    pub cross_check: Option<bool>,
}

pub fn diameter(ctx: &Ctx, mut a: DiameterArgs, file: &ConfigFile) -> Result<(), Failure> {
    merge_from!(
        a, &file.diameter;
        point, radii, regime, delta_fraction, delta, cloud, target_eps, target_ratio, verify_samples, cross_check
    );
    let s = &ctx.structure;
    let point = ctx.point(a.point, "point")?;
    let regime = match a.regime {
        Some(RegimeArg::C11) => Regularity::C11,
        Some(RegimeArg::C0) => Regularity::C0,
        None => s.regularity,
    };
    let radii = a.radii.unwrap_or_else(|| match regime {
        Regularity::C11 => vec![0.1, 0.05, 0.025],
        Regularity::C0 => vec![0.05, 0.025],
    });
    let d = SweepOptions::default();
    let opts = SweepOptions {
        delta_fraction: a.delta_fraction.unwrap_or(d.delta_fraction),
        delta: a.delta,
        cloud: a.cloud.unwrap_or(d.cloud),
        seed: ctx.seed,
        verify_samples: a.verify_samples.unwrap_or(d.verify_samples),
        target_eps: a.target_eps.unwrap_or(d.target_eps),
        cross_check: a.cross_check.unwrap_or(true),
        ..d
    };
    let target = a.target_ratio.unwrap_or(match regime {
        Regularity::C11 => 0.98,
        Regularity::C0 => 0.98 * (1.0 - opts.target_eps),
    });
    ctx.manifest(
        "diameter",
        json!({
            "point": point,
            "radii": radii,
            "regime": regime,
            "delta_fraction": opts.delta_fraction,
            "delta": opts.delta,
            "cloud": opts.cloud,
            "target_eps": opts.target_eps,
            "target_ratio": target,
            "verify_samples": opts.verify_samples,
            "cross_check": opts.cross_check,
        }),
    )?;
    let sweep = core(diameter_sweep(s, &point, &radii, regime, &opts))?;
    let csv = ctx.out.write("diameter.csv", &sweep.to_csv())?;
    ctx.out.write("diameter.json", &core(sweep.to_json())?)?;
    let summary = json!({
        "file": csv,
        "margin": sweep.margin,
        "eps1": sweep.eps1,
        "eps2": sweep.eps2,
        "target_ratio": target,
        "rows": sweep.rows,
    });
    ctx.emit(&summary, || {
        println!("wrote {}", csv.display());
        if let Some(m) = sweep.margin {
            println!("calibration margin s = {m:.15}");
        }
        if let (Some(e1), Some(e2)) = (sweep.eps1, sweep.eps2) {
            println!("slacks eps1 = {e1:e}, eps2 = {e2:e}");
        }
        println!(
            "{:>10} {:>10} {:>16} {:>10} {:>12}  q",
            "r", "delta", "lower", "ratio", "budget"
        );
        for row in &sweep.rows {
            println!(
                "{:>10} {:>10.3e} {:>16.12} {:>10.6} {:>12.3e}  {}",
                row.r,
                row.delta,
                row.lower,
                row.ratio,
                row.budget,
                fmt_point(&row.q)
            );
        }
    });
    if let Some(rep) = sweep
        .reports
        .iter()
        .find(|rep| rep.cross_check.is_some_and(|up| rep.certified_lower() > up + 1e-6))
    {
        return Err(Failure::Compute(format!(
            "certified lower bound {} exceeds the optimizer distance {:?} at q = {}, r = {}",
            rep.certified_lower(),
            rep.cross_check,
            fmt_point(&rep.q),
            rep.r
        )));
    }
    if let Some(row) = sweep.first_below(target) {
        return Err(Failure::Compute(format!(
            "row q = {}, r = {} has ratio {} below the target {target}",
            fmt_point(&row.q),
            row.r,
            row.ratio
        )));
    }
    Ok(())
}
