//! The `covlab` command line: resolves a scenario from a config file and
//! flags, runs one stage of the pipeline and writes its reports.

use crate::carleson::{cmsup_norm, BoxFamily, CarlesonReport};
use crate::config::{Scenario, SCHEMA_VERSION};
use crate::cov::{build_cov, check_boundary_and_bijection};
use crate::error::{Error, Result};
use crate::frame::{build_frame, candidate_dt, candidate_dv, candidate_dy, transversal_fields, FrameField};
use crate::geometry::{build_domain, recover_graph, BiLipMap, GraphDomain, GraphFamily, MapSpec};
use crate::green::{check_gradient_bound, solve_green, GreenData, GreenOptions};
use crate::grid::Field;
use crate::io::{save_field, write_csv, write_json};
use crate::perturb::{beta_table, boundary_displacement, decompose_b_c, smooth_lambda, Mollifier, PerturbationData};
use crate::solvability::{
    check_g_omega_comparison, convex_gradient_bound, kappa_density, kappa_self_consistency, rh_table, standard_balls,
    stability_experiment_with, ExperimentSpec,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "covlab", version, about = "Green-function change of variables laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

/// Overrides applied on top of the config file.
#[derive(Debug, Default, Args)]
pub struct Flags {
    /// Scenario config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Graph family: flat, tilted:<m>, cone[:<M>], sine:<amp>,<freq>.
    #[arg(long, global = true)]
    pub domain: Option<String>,
    /// Perturbation: identity, shear, wavy, rotation:<angle>, translation:<a>,<b>.
    #[arg(long, global = true)]
    pub phi: Option<String>,
    /// ε values, comma separated and strictly increasing.
    #[arg(long, global = true, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    #[arg(long = "grid-n", global = true)]
    pub grid_n: Option<usize>,
    /// Reverse-Hölder exponents, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub p: Option<Vec<f64>>,
    /// Carleson box radii, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub radii: Option<Vec<f64>>,
    /// Output root; defaults to $COVLAB_OUT, then ./out.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Scenario name, the subdirectory of the output root.
    #[arg(long, global = true)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Green function with pole at infinity and its closed-form errors.
    SolveGreen,
    /// Frame, transversal fields and the non-degeneracy constants.
    VerifyFrame,
    /// λ, the B/C split and β numbers for each ε.
    Perturb,
    /// ρ, J, A_ρ, A₀ and the bijectivity checks for each ε.
    BuildCov,
    /// CMsup estimate of one candidate field.
    Carleson {
        #[arg(long, value_enum, default_value_t = Candidate::HessianRatio)]
        field: Candidate,
    },
    /// κ, reverse-Hölder constants, G/ω comparability and the convex bound.
    Rh,
    /// Full base-versus-perturbed experiment for each ε.
    Pipeline,
    /// Prints a summary of the reports already written for the scenario.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SolveGreen => "solve-green",
            Command::VerifyFrame => "verify-frame",
            Command::Perturb => "perturb",
            Command::BuildCov => "build-cov",
            Command::Carleson { .. } => "carleson",
            Command::Rh => "rh",
            Command::Pipeline => "pipeline",
            Command::Report => "report",
        }
    }
}

/// Carleson candidates selectable with `--field`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Candidate {
    HessianRatio,
    DeltaGradV,
    GradTMinusVn,
    GradY,
    DvnLambda,
    C,
    TGradB,
    TGradO,
    TGradJ0,
    TGradA,
    J1,
    ARhoMinusA0,
}

impl Candidate {
    fn needs_map(self) -> bool {
        !matches!(self, Candidate::HessianRatio | Candidate::DeltaGradV | Candidate::GradTMinusVn | Candidate::GradY)
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| Error::InvalidInput(format!("{v:?}: {e}")))).collect()
}

/// `flat`, `tilted:<m>`, `cone[:<M>]`, `sine:<amp>,<freq>`.
pub fn parse_domain(s: &str) -> Result<GraphFamily> {
    let (name, args) = s.split_once(':').map_or((s, None), |(a, b)| (a, Some(b)));
    let args = args.map(parse_list).transpose()?.unwrap_or_default();
    let bad = || Error::InvalidInput(format!("cannot parse domain {s:?}"));
    Ok(match (name, args.as_slice()) {
        ("flat", []) => GraphFamily::Flat,
        ("tilted", [m]) => GraphFamily::Tilted { slope: *m },
        ("cone", []) => GraphFamily::Cone { lip: 1.0 },
        ("cone", [m]) => GraphFamily::Cone { lip: *m },
        ("sine", [a, f]) => GraphFamily::Sine { amp: *a, freq: *f },
        _ => return Err(bad()),
    })
}

/// `identity`, `shear`, `wavy`, `rotation:<angle>`, `translation:<a>,<b>`.
pub fn parse_map(s: &str) -> Result<MapSpec> {
    let (name, args) = s.split_once(':').map_or((s, None), |(a, b)| (a, Some(b)));
    let args = args.map(parse_list).transpose()?.unwrap_or_default();
    Ok(match (name, args.as_slice()) {
        ("identity", []) => MapSpec::Identity,
        ("shear", []) => MapSpec::Shear,
        ("wavy", []) => MapSpec::Wavy,
        ("rotation", [a]) => MapSpec::Rotation { angle: *a },
        ("translation", [a, b]) => MapSpec::Translation { c: [*a, *b] },
        _ => return Err(Error::InvalidInput(format!("cannot parse map {s:?}"))),
    })
}

/// Config file, then flags.
pub fn resolve(flags: &Flags) -> Result<Scenario> {
    let mut s = match (&flags.config, &flags.domain) {
        (Some(path), _) => Scenario::load(path)?,
        (None, Some(d)) => Scenario::new(&d.replace([':', ','], "_"), parse_domain(d)?),
        (None, None) => return Err(Error::InvalidInput("either --config or --domain is required".into())),
    };
    if let (Some(_), Some(d)) = (&flags.config, &flags.domain) {
        s.domain = parse_domain(d)?;
    }
    if let Some(m) = &flags.phi {
        s.map = parse_map(m)?;
    }
    if let Some(e) = &flags.eps {
        s.eps_sweep = e.clone();
    }
    if let Some(n) = flags.grid_n {
        s.grid_n = n;
    }
    if let Some(p) = &flags.p {
        s.p_list = p.clone();
    }
    if let Some(r) = &flags.radii {
        s.radii = r.clone();
    }
    if let Some(o) = &flags.out {
        s.output_dir = Some(o.clone());
    }
    if let Some(seed) = flags.seed {
        s.seed = seed;
    }
    if let Some(n) = &flags.name {
        s.name = n.clone();
    }
    s.validate()?;
    Ok(s)
}

/// Every JSON summary: the resolved scenario, the outcome and the result.
#[derive(Serialize)]
struct Envelope<'a> {
    schema_version: u32,
    command: &'a str,
    config: &'a Scenario,
    status: &'a str,
    error: Option<String>,
    result: Value,
}

struct Run {
    scenario: Scenario,
    dir: PathBuf,
}

impl Run {
    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn domain(&self) -> Result<GraphDomain> {
        build_domain(self.scenario.domain.clone(), 2, self.scenario.r, self.scenario.grid_n)
    }

    fn green(&self, dom: &GraphDomain, richardson: bool) -> Result<GreenData> {
        solve_green(dom, self.scenario.grid_n, &GreenOptions { richardson })
    }

    fn frame(&self, gd: &GreenData) -> Result<FrameField> {
        transversal_fields(gd, build_frame(gd)?)
    }

    fn family(&self, dom: &GraphDomain, gd: &GreenData) -> Result<BoxFamily> {
        BoxFamily::standard(dom, &self.scenario.radii, gd.h)
    }

    fn save<T: crate::io::Components>(&self, file: &str, f: &Field<T>) -> Result<()> {
        save_field(&self.path(file), f, 2, self.scenario.grid_n as u32)
    }

    fn perturbation(&self, dom: &GraphDomain, ff: &FrameField, gd: &GreenData, eps: f64) -> Result<PerturbationData> {
        let map = BiLipMap::new(self.scenario.map.clone(), eps)?;
        let disp = boundary_displacement(dom, &map)?;
        let moll = Mollifier::default();
        moll.check()?;
        let mut pd = smooth_lambda(&disp, &moll, ff, &gd.delta)?;
        decompose_b_c(&disp, &moll, ff, &mut pd, self.scenario.seed)?;
        Ok(pd)
    }
}

fn eps_tag(eps: f64) -> String {
    format!("eps{eps:.4}")
}

fn norm_entry(name: &str, r: &CarlesonReport) -> Value {
    json!({
        "name": name,
        "norm": r.norm(),
        "maximizer": r.maximizer,
        "unreliable": r.unreliable,
        "modeled_collar_fraction": r.modeled_collar_fraction,
        "skipped_boxes": r.skipped_boxes,
    })
}

fn solve_green_cmd(run: &Run) -> Result<Value> {
    let dom = run.domain()?;
    dom.write_boundary_csv(&run.path("boundary.csv"))?;
    let gd = run.green(&dom, true)?;
    run.save("green.bin", &gd.g)?;
    run.save("grad_green.bin", &gd.grad)?;
    run.save("delta.bin", &gd.delta)?;
    #[derive(Serialize)]
    struct Row {
        exclude_radius: f64,
        relative_error: Option<f64>,
    }
    let rows: Vec<Row> = [0.0, 0.1, 0.25, 0.5]
        .into_iter()
        .map(|r| Row { exclude_radius: r, relative_error: gd.closed_form_error(r) })
        .collect();
    write_csv(&run.path("closed_form_error.csv"), &rows)?;
    Ok(json!({
        "grid": gd.grid,
        "h": gd.h,
        "max_g": gd.max_g(),
        "max_grad": gd.max_grad(),
        "solve_residual": gd.solve_residual,
        "laplacian_residual": gd.laplacian_residual(),
        "farfield_model": gd.farfield_model,
        "richardson": gd.richardson,
        "warning": gd.warning,
        "gradient_bound": check_gradient_bound(&gd)?,
        "closed_form_error": rows,
    }))
}

fn verify_frame_cmd(run: &Run) -> Result<Value> {
    let dom = run.domain()?;
    let gd = run.green(&dom, false)?;
    let ff = run.frame(&gd)?;
    run.save("frame.bin", &ff.v)?;
    run.save("t.bin", &ff.t)?;
    run.save("y.bin", &ff.y)?;
    let fam = run.family(&dom, &gd)?;
    let mut norms = Vec::new();
    for (name, f) in [
        ("hessian_ratio", gd.hessian_ratio()),
        ("delta_grad_v", candidate_dv(&gd, &ff)),
        ("grad_t_minus_vn", candidate_dt(&ff)),
        ("grad_y", candidate_dy(&ff)),
    ] {
        norms.push(norm_entry(name, &cmsup_norm(&f, &fam)?));
    }
    Ok(json!({
        "h1h2": ff.h1h2,
        "min_tilde": ff.min_tilde,
        "dv_ratio": ff.dv_ratio,
        "t_over_delta": ff.t_over_delta,
        "cmsup": norms,
    }))
}

fn perturb_cmd(run: &Run) -> Result<Value> {
    let dom = run.domain()?;
    let gd = run.green(&dom, false)?;
    let ff = run.frame(&gd)?;
    let fam = run.family(&dom, &gd)?;
    let mut out = Vec::new();
    for &eps in &run.scenario.eps_sweep {
        let pd = run.perturbation(&dom, &ff, &gd, eps)?;
        run.save(&format!("lambda_{}.bin", eps_tag(eps)), &pd.lambda)?;
        let disp = boundary_displacement(&dom, &BiLipMap::new(run.scenario.map.clone(), eps)?)?;
        let t_top = (0.5 * dom.r).min(1.0);
        let beta = beta_table(&disp, t_top, (t_top / 8.0).max(4.0 * dom.sample_spacing()))?;
        write_csv(&run.path(&format!("beta_{}.csv", eps_tag(eps))), &beta.cells)?;
        let mut norms = Vec::new();
        for (name, f) in [
            ("dvn_lambda", pd.candidate_dvn_lambda(&ff)),
            ("c", pd.candidate_c()),
            ("t_grad_b", pd.candidate_t_grad_b(&ff)),
        ] {
            norms.push(norm_entry(name, &cmsup_norm(&f, &fam)?));
        }
        out.push(json!({
            "eps": eps,
            "lip_h": pd.lip_h,
            "sup_grad_lambda": pd.sup_grad_lambda(),
            "sup_b": pd.sup_b(),
            "fd_residual": pd.fd_residual,
            "fd_relative": pd.fd_relative,
            "anchor_constant": pd.anchor_constant,
            "mean_invariance": pd.mean_invariance,
            "partition_residual": pd.partition_residual,
            "vn_b": pd.vn_b,
            "beta": {
                "carleson": beta.carleson,
                "ratio": beta.ratio,
                "maximizer": beta.maximizer,
                "excluded": beta.excluded,
                "inclusion_ratio": beta.inclusion_ratio,
            },
            "cmsup": norms,
        }));
    }
    Ok(Value::Array(out))
}

fn build_cov_cmd(run: &Run) -> Result<Value> {
    let dom = run.domain()?;
    let gd = run.green(&dom, false)?;
    let ff = run.frame(&gd)?;
    let fam = run.family(&dom, &gd)?;
    let mut out = Vec::new();
    for &eps in &run.scenario.eps_sweep {
        let map = BiLipMap::new(run.scenario.map.clone(), eps)?;
        let pd = run.perturbation(&dom, &ff, &gd, eps)?;
        let cf = build_cov(&gd, &ff, &pd)?;
        let disp = boundary_displacement(&dom, &map)?;
        let dom_p = recover_graph(&dom, &map)?;
        let bij = check_boundary_and_bijection(&cf, &ff, &disp, &dom_p, run.scenario.inversion_targets, run.scenario.seed)?;
        run.save(&format!("rho_{}.bin", eps_tag(eps)), &cf.rho)?;
        run.save(&format!("a_rho_{}.bin", eps_tag(eps)), &cf.a_rho)?;
        let mut norms = Vec::new();
        for (name, f) in [
            ("t_grad_o", cf.candidate_t_grad_o(&ff)),
            ("t_grad_j0", cf.candidate_t_grad_j0(&ff)),
            ("t_grad_a", cf.candidate_t_grad_a(&ff)),
            ("j1", cf.candidate_j1()),
            ("a_rho_minus_a0", cf.candidate_a_rho_minus_a0()),
        ] {
            norms.push(norm_entry(name, &cmsup_norm(&f, &fam)?));
        }
        out.push(json!({ "eps": eps, "cov": cf.report, "bijection": bij, "cmsup": norms }));
    }
    Ok(Value::Array(out))
}

fn carleson_cmd(run: &Run, which: Candidate) -> Result<Value> {
    let dom = run.domain()?;
    let gd = run.green(&dom, false)?;
    let ff = run.frame(&gd)?;
    let fam = run.family(&dom, &gd)?;
    let eps = run.scenario.eps_sweep[0];
    let field = if which.needs_map() {
        let pd = run.perturbation(&dom, &ff, &gd, eps)?;
        match which {
            Candidate::DvnLambda => pd.candidate_dvn_lambda(&ff),
            Candidate::C => pd.candidate_c(),
            Candidate::TGradB => pd.candidate_t_grad_b(&ff),
            _ => {
                let cf = build_cov(&gd, &ff, &pd)?;
                match which {
                    Candidate::TGradO => cf.candidate_t_grad_o(&ff),
                    Candidate::TGradJ0 => cf.candidate_t_grad_j0(&ff),
                    Candidate::TGradA => cf.candidate_t_grad_a(&ff),
                    Candidate::J1 => cf.candidate_j1(),
                    _ => cf.candidate_a_rho_minus_a0(),
                }
            }
        }
    } else {
        match which {
            Candidate::HessianRatio => gd.hessian_ratio(),
            Candidate::DeltaGradV => candidate_dv(&gd, &ff),
            Candidate::GradTMinusVn => candidate_dt(&ff),
            _ => candidate_dy(&ff),
        }
    };
    let report = cmsup_norm(&field, &fam)?;
    let name = which.to_possible_value().map(|v| v.get_name().to_owned()).unwrap_or_default();
    report.write_csv(std::fs::File::create(run.path(&format!("carleson_{name}.csv")))?)?;
    Ok(json!({ "field": name, "eps": which.needs_map().then_some(eps), "norm": report.norm(), "report": report }))
}

fn rh_cmd(run: &Run) -> Result<Value> {
    let dom = run.domain()?;
    let gd = run.green(&dom, false)?;
    let kappa = kappa_density(&gd, 0.5 * dom.r);
    write_csv(&run.path("kappa.csv"), &kappa)?;
    let balls = standard_balls(&dom, &run.scenario.ball_radii);
    let table = rh_table(&dom, &kappa, &run.scenario.p_list, &balls)?;
    #[derive(Serialize)]
    struct Row {
        p: f64,
        x0: f64,
        r: f64,
        ratio: f64,
        samples: usize,
    }
    let rows = table.iter().flat_map(|t| {
        t.per_ball.iter().map(move |b| Row { p: t.p, x0: b.x0, r: b.r, ratio: b.ratio, samples: b.samples })
    });
    write_csv(&run.path("rh_balls.csv"), rows)?;
    let convex = match convex_gradient_bound(&gd) {
        Ok(b) => json!(b),
        Err(Error::NotConvex(..)) => Value::Null,
        Err(e) => return Err(e),
    };
    Ok(json!({
        "kappa_flagged": kappa.iter().filter(|k| k.flagged).count(),
        "kappa_self_consistency": kappa_self_consistency(&kappa),
        "rh": table,
        "g_omega": check_g_omega_comparison(&gd, &kappa)?,
        "convex_gradient_bound": convex,
    }))
}

fn pipeline_cmd(run: &Run) -> Result<Value> {
    let dom = run.domain()?;
    let sc = &run.scenario;
    let spec = ExperimentSpec {
        grid_n: sc.grid_n,
        ps: sc.p_list.clone(),
        radii: sc.radii.clone(),
        ball_radii: sc.ball_radii.clone(),
        inversion_targets: sc.inversion_targets,
        seed: sc.seed,
    };
    let mut reports = Vec::new();
    #[derive(Serialize)]
    struct RhRow {
        eps: f64,
        p: f64,
        base: f64,
        perturbed: f64,
        relative_change: f64,
    }
    #[derive(Serialize)]
    struct NormRow<'a> {
        eps: f64,
        name: &'a str,
        norm: f64,
        unreliable: bool,
    }
    let (mut rh_rows, mut norm_rows) = (Vec::new(), Vec::new());
    for &eps in &sc.eps_sweep {
        let map = BiLipMap::new(sc.map.clone(), eps)?;
        let stage_dir = run.path(&eps_tag(eps));
        std::fs::create_dir_all(&stage_dir)?;
        let mut sink = |stage: &str, v: Value| write_json(&stage_dir.join(format!("{stage}.json")), &v);
        let r = stability_experiment_with(&dom, &map, &spec, &mut sink)?;
        rh_rows.extend(r.comparison.iter().map(|c| RhRow {
            eps,
            p: c.p,
            base: c.base,
            perturbed: c.perturbed,
            relative_change: c.relative_change,
        }));
        reports.push(serde_json::to_value(&r)?);
        norm_rows.push(r);
    }
    write_csv(&run.path("rh_comparison.csv"), &rh_rows)?;
    let rows = norm_rows.iter().flat_map(|r| {
        r.candidates.iter().map(move |c| NormRow { eps: r.eps, name: c.name, norm: c.norm, unreliable: c.report.unreliable })
    });
    write_csv(&run.path("candidates.csv"), rows)?;
    Ok(Value::Array(reports))
}

/// One line per summary in the scenario directory, then the pipeline's
/// reverse-Hölder comparison if present.
fn report_cmd(run: &Run) -> Result<Value> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&run.dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.file_stem().is_some_and(|s| s != "report"))
        .collect();
    entries.sort();
    let mut seen = Vec::new();
    for path in &entries {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let status = v["status"].as_str().unwrap_or("?");
        let err = v["error"].as_str().map(|e| format!(" ({e})")).unwrap_or_default();
        println!("{:<14} {status}{err}", v["command"].as_str().unwrap_or("?"));
        seen.push(json!({ "command": v["command"], "status": status }));
        if v["command"] == "pipeline" {
            for r in v["result"].as_array().into_iter().flatten() {
                for c in r["comparison"].as_array().into_iter().flatten() {
                    println!(
                        "  eps {:<6} p {:<4} C_p base {:.4} perturbed {:.4} change {:.2}%",
                        r["eps"],
                        c["p"],
                        c["base"].as_f64().unwrap_or(f64::NAN),
                        c["perturbed"].as_f64().unwrap_or(f64::NAN),
                        100.0 * c["relative_change"].as_f64().unwrap_or(f64::NAN)
                    );
                }
            }
        }
    }
    Ok(Value::Array(seen))
}

fn dispatch(cmd: Command, run: &Run) -> Result<Value> {
    match cmd {
        Command::SolveGreen => solve_green_cmd(run),
        Command::VerifyFrame => verify_frame_cmd(run),
        Command::Perturb => perturb_cmd(run),
        Command::BuildCov => build_cov_cmd(run),
        Command::Carleson { field } => carleson_cmd(run, field),
        Command::Rh => rh_cmd(run),
        Command::Pipeline => pipeline_cmd(run),
        Command::Report => report_cmd(run),
    }
}

/// Runs one command and writes `<command>.json` in the scenario directory,
/// also when the command fails. Returns the summary path.
pub fn execute(cmd: Command, flags: &Flags) -> Result<PathBuf> {
    let scenario = resolve(flags)?;
    let dir = scenario.run_dir();
    std::fs::create_dir_all(&dir)?;
    let run = Run { scenario, dir };
    let outcome = dispatch(cmd, &run);
    let summary = run.path(&format!("{}.json", cmd.name()));
    let (status, error, result) = match &outcome {
        Ok(v) => ("ok", None, v.clone()),
        Err(e) => ("failed", Some(e.to_string()), Value::Null),
    };
    let env = Envelope { schema_version: SCHEMA_VERSION, command: cmd.name(), config: &run.scenario, status, error, result };
    write_json(&summary, &env)?;
    outcome.map(|_| summary)
}

/// 0 on success, 2 when an invariant fails, 1 on any other error.
pub fn exit_code(r: &Result<PathBuf>) -> u8 {
    match r {
        Ok(_) => 0,
        Err(e) if e.is_assertion() => 2,
        Err(_) => 1,
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.flags.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("covlab: cannot size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    let r = execute(cli.command, &cli.flags);
    match &r {
        Ok(p) => eprintln!("covlab: wrote {}", p.display()),
        Err(e) if e.is_assertion() => eprintln!("covlab: assertion failed: {e}"),
        Err(e) => eprintln!("covlab: {e}"),
    }
    ExitCode::from(exit_code(&r))
}
