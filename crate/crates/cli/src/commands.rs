use std::fs;
use std::path::Path;

use magic_primes::complexity::{system_complexity, ComplexityMode};
use magic_primes::ehrhart::{self, cache_path, interpolate_quasipolynomial, CountTable, Counter, EhrhartError, Quasipolynomial};
use magic_primes::exact_linalg::{format_rational, is_prime_u64};
use magic_primes::local_factors::LocalFactorTable;
use magic_primes::polytope::{enumerate_vertices, MAX_VERTEX_DIMENSION};
use magic_primes::prime_census::{census, census_resume, CensusError, CensusOptions, ResumeToken};
use magic_primes::singular_series::{prefactor_decimal, singular_constant_sharded};
use magic_primes::{build_system, verify_z_basis, FormSystem, Rational};
use serde_json::json;

use crate::config::{parse_prime_range, Command, RunConfig, SystemArgs};
use crate::report::{table, Report};
use crate::CliError;

fn load_system(args: &SystemArgs) -> Result<FormSystem, CliError> {
    match (&args.system, args.n) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
        }
        (None, Some(n)) => build_system(n).map_err(|e| CliError::Validation(e.to_string())),
        (None, None) => Err(CliError::Validation("one of --n or --system is required".into())),
    }
}

fn side_label(sys: &FormSystem) -> String {
    sys.side().map_or_else(|| "custom".into(), |n| format!("{n}x{n}"))
}

pub fn dispatch(cfg: &RunConfig) -> Result<Report, CliError> {
    match &cfg.command {
        Command::Basis(args) => basis(&load_system(args)?),
        Command::Complexity(args) => complexity(&load_system(args)?),
        Command::Vertices(args) => vertices(&load_system(args)?),
        Command::Ehrhart { system, period, values_only, to, budget } => {
            let sys = load_system(system)?;
            if *values_only {
                values(&sys, to.unwrap_or(0), *budget, cfg.cache_dir.as_deref())
            } else {
                quasipolynomial(&sys, *period, *budget, cfg.cache_dir.as_deref())
            }
        }
        Command::LocalFactors { system, p } => local_factors(&load_system(system)?, p),
        Command::Constant { system, p_max, precision } => {
            constant(&load_system(system)?, *p_max, *precision, cfg.jobs, cfg.cache_dir.as_deref())
        }
        Command::Census { system, bound, budget, resume, token_out, constant } => {
            let sys = load_system(system)?;
            let opts = CensusOptions { budget: *budget, batch: None, singular_constant: *constant };
            let outcome = match resume {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
                    let token: ResumeToken =
                        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
                    census_resume(&sys, &token, &opts)
                }
                None => census(&sys, bound.unwrap_or(0), &opts),
            };
            match outcome {
                Ok(r) => {
                    let fmt = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v:.6e}"));
                    let row = vec![
                        r.bound.to_string(),
                        r.total_count.to_string(),
                        r.distinct_entries_count.to_string(),
                        fmt(r.predicted),
                        fmt(r.ratio),
                    ];
                    let header = ["N", "total", "distinct", "predicted", "ratio"];
                    let pretty = table(&header.map(String::from), std::slice::from_ref(&row));
                    Ok(Report::new(serde_json::to_value(&r)?, &header, vec![row], pretty))
                }
                Err(CensusError::BudgetExceeded { budget, token }) => {
                    let text = serde_json::to_string(&token)?;
                    match token_out {
                        Some(path) => fs::write(path, &text).map_err(anyhow::Error::from)?,
                        None => eprintln!("{text}"),
                    }
                    Err(CliError::Budget(format!(
                        "census stopped after {budget} search nodes at top-level index {}",
                        token.next_index
                    )))
                }
                Err(e) => Err(CliError::Validation(e.to_string())),
            }
        }
    }
}

fn basis(sys: &FormSystem) -> Result<Report, CliError> {
    let verified = verify_z_basis(sys);
    let skeleton = sys.skeleton();
    let header: Vec<String> =
        ["cell", "kind"].iter().map(|s| s.to_string()).chain((1..=sys.d()).map(|j| format!("x{j}"))).collect();
    let rows: Vec<Vec<String>> = sys
        .forms()
        .iter()
        .map(|f| {
            let kind = if skeleton.contains(&f.cell) { "trivial" } else { "nontrivial" };
            [f.cell.to_string(), kind.to_string()].into_iter().chain(f.coefficients.iter().map(i64::to_string)).collect()
        })
        .collect();
    let mut pretty = format!(
        "{} system: d = {}, t = {}, skeleton cells {:?}\n",
        side_label(sys),
        sys.d(),
        sys.t(),
        skeleton
    );
    pretty.push_str(&table(&header, &rows));
    pretty.push_str(&format!("Z-basis verified: {verified}\n"));
    if !verified {
        print!("{pretty}");
        return Err(CliError::Validation("the system is not a verified Z-basis".into()));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    Ok(Report::new(serde_json::to_value(sys)?, &header, rows, pretty))
}

fn complexity(sys: &FormSystem) -> Result<Report, CliError> {
    let r = system_complexity(sys).map_err(|e| CliError::Validation(e.to_string()))?;
    let rows: Vec<Vec<String>> = r
        .certificates
        .iter()
        .map(|c| {
            let blocks = c
                .blocks
                .iter()
                .map(|b| b.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(" "))
                .collect::<Vec<_>>()
                .join(" | ");
            vec![(c.form_index + 1).to_string(), c.bound().to_string(), blocks]
        })
        .collect();
    let header = ["form", "bound", "blocks"];
    let mode = match r.mode {
        ComplexityMode::Exhaustive => "exhaustive search",
        ComplexityMode::Certificate => "verified certificates",
    };
    let value = r.complexity.map_or_else(|| "infinite".into(), |s| s.to_string());
    let mut pretty = format!("{} system: complexity {value} ({mode})\n", side_label(sys));
    pretty.push_str(&table(&header.map(String::from), &rows));
    Ok(Report::new(serde_json::to_value(&r)?, &header, rows, pretty))
}

fn vertices(sys: &FormSystem) -> Result<Report, CliError> {
    let vs = enumerate_vertices(sys).map_err(|e| CliError::Validation(e.to_string()))?;
    let header: Vec<String> = (1..=sys.d()).map(|j| format!("x{j}")).collect();
    let rows: Vec<Vec<String>> = vs.vertices.iter().map(|v| v.coordinates.iter().map(format_rational).collect()).collect();
    let mut pretty = format!("{} vertices, denominator lcm {}\n", vs.len(), vs.denominator_lcm);
    pretty.push_str(&table(&header, &rows));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    Ok(Report::new(serde_json::to_value(&vs)?, &header, rows, pretty))
}

fn ehrhart_error(e: EhrhartError) -> CliError {
    match e {
        EhrhartError::BudgetExceeded { .. } => CliError::Budget(e.to_string()),
        EhrhartError::Io(_) | EhrhartError::Json(_) => CliError::Other(e.into()),
        other => CliError::Validation(other.to_string()),
    }
}

fn load_table(sys: &FormSystem, cache: Option<&Path>) -> Result<CountTable, CliError> {
    let mut t = CountTable::new(sys);
    if let Some(dir) = cache {
        t.load_jsonl(&cache_path(dir, sys)).map_err(ehrhart_error)?;
    }
    Ok(t)
}

fn save_table(sys: &FormSystem, t: &CountTable, cache: Option<&Path>) -> Result<(), CliError> {
    if let Some(dir) = cache {
        t.append_jsonl(&cache_path(dir, sys)).map_err(ehrhart_error)?;
    }
    Ok(())
}

fn values(sys: &FormSystem, to: u64, budget: Option<u64>, cache: Option<&Path>) -> Result<Report, CliError> {
    if let Some(b) = budget {
        if to > b {
            return Err(CliError::Budget(format!("E(N) up to N = {to} requested, budget allows N <= {b}")));
        }
    }
    let mut t = load_table(sys, cache)?;
    let counter = Counter::new(sys).map_err(ehrhart_error)?;
    let rows: Vec<Vec<String>> =
        (0..=to).map(|n| vec![n.to_string(), t.ensure_direct(&counter, n).to_string()]).collect();
    save_table(sys, &t, cache)?;
    let json = json!(rows.iter().map(|r| json!({"N": r[0].parse::<u64>().unwrap(), "count": r[1]})).collect::<Vec<_>>());
    let header = ["N", "count"];
    let pretty = table(&header.map(String::from), &rows);
    Ok(Report::new(json, &header, rows, pretty))
}

/// Refusal text for sides whose vertex denominators are out of reach.
fn infeasible(sys: &FormSystem) -> String {
    match sys.side() {
        Some(5) => "refusing n = 5: the period is at least 840, so interpolation would need (15 + 1) * 840 = 13440 \
                    values of E(N), far beyond reach"
            .into(),
        _ => format!(
            "refusing: vertex enumeration is limited to d <= {MAX_VERTEX_DIMENSION} (d = {}); pass --period to \
             interpolate anyway or use --values-only",
            sys.d()
        ),
    }
}

pub fn compute_quasipolynomial(
    sys: &FormSystem,
    period: Option<usize>,
    budget: Option<u64>,
    cache: Option<&Path>,
) -> Result<(Quasipolynomial, CountTable), CliError> {
    let period = match period {
        Some(p) => p,
        None if sys.d() <= MAX_VERTEX_DIMENSION => {
            let vs = enumerate_vertices(sys).map_err(|e| CliError::Validation(e.to_string()))?;
            vs.denominator_lcm.to_string().parse().map_err(|_| CliError::Validation("period too large".into()))?
        }
        None => return Err(CliError::Validation(infeasible(sys))),
    };
    if sys.side().is_some_and(|n| n >= 5) {
        return Err(CliError::Validation(infeasible(sys)));
    }
    let mut t = load_table(sys, cache)?;
    let qp = interpolate_quasipolynomial(sys, period, &mut t, budget);
    save_table(sys, &t, cache)?;
    Ok((qp.map_err(ehrhart_error)?, t))
}

fn render_poly(coefficients: &[Rational]) -> String {
    let terms: Vec<String> = coefficients
        .iter()
        .enumerate()
        .rev()
        .filter(|(_, c)| *c != &Rational::from_integer(0.into()))
        .map(|(k, c)| match k {
            0 => format_rational(c),
            1 => format!("({}) N", format_rational(c)),
            _ => format!("({}) N^{k}", format_rational(c)),
        })
        .collect();
    if terms.is_empty() {
        "0".into()
    } else {
        terms.join(" + ")
    }
}

fn quasipolynomial(sys: &FormSystem, period: Option<usize>, budget: Option<u64>, cache: Option<&Path>) -> Result<Report, CliError> {
    let (qp, t) = compute_quasipolynomial(sys, period, budget, cache)?;
    let vol = ehrhart::volume(&qp).map_err(ehrhart_error)?;
    let mut rows = Vec::new();
    for r in 0..qp.period {
        for (k, c) in qp.branch(r).iter().enumerate() {
            rows.push(vec![r.to_string(), k.to_string(), format_rational(c)]);
        }
    }
    let counts: Vec<_> = t
        .entries
        .iter()
        .map(|(n, e)| json!({"N": n, "count": e.count.to_string(), "provenance": e.provenance}))
        .collect();
    let json = json!({
        "n": sys.side(),
        "volume": format_rational(&vol),
        "quasipolynomial": qp,
        "counts": counts,
    });
    let mut pretty = format!("degree {}, period {}, volume {}\n", qp.degree, qp.period, format_rational(&vol));
    for r in 0..qp.period {
        pretty.push_str(&format!("N = {r} mod {}: {}\n", qp.period, render_poly(qp.branch(r))));
    }
    Ok(Report::new(json, &["residue", "power", "coefficient"], rows, pretty))
}

fn local_table(sys: &FormSystem) -> Result<LocalFactorTable, CliError> {
    LocalFactorTable::new(sys).map_err(|e| CliError::Validation(e.to_string()))
}

fn local_factors(sys: &FormSystem, range: &str) -> Result<Report, CliError> {
    let (lo, hi) = parse_prime_range(range)?;
    let table_ = local_table(sys)?;
    let mut factors = Vec::new();
    let mut rows = Vec::new();
    for p in (lo..=hi).filter(|&p| is_prime_u64(p)) {
        let lf = table_.local_factor(p).map_err(|e| CliError::Validation(e.to_string()))?;
        rows.push(vec![
            p.to_string(),
            lf.nonvanishing_count.to_string(),
            format_rational(&lf.beta),
            prefactor_decimal(&lf.beta, 12).to_string(),
        ]);
        factors.push(lf);
    }
    let header = ["p", "count", "beta", "beta_decimal"];
    let mut pretty = format!(
        "stable for p >= {}: count(p) = {}\n",
        table_.p0(),
        table_.polynomial.render()
    );
    pretty.push_str(&table(&header.map(String::from), &rows));
    let json = json!({"p0": table_.p0(), "polynomial": table_.polynomial, "factors": factors});
    Ok(Report::new(json, &header, rows, pretty))
}

fn constant(sys: &FormSystem, p_max: u64, precision: u32, jobs: usize, cache: Option<&Path>) -> Result<Report, CliError> {
    local_table(sys)?;
    let (qp, _) = compute_quasipolynomial(sys, None, None, cache)?;
    let vol = ehrhart::volume(&qp).map_err(ehrhart_error)?;
    let r = singular_constant_sharded(sys, &vol, p_max, precision, jobs)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let row = vec![
        format_rational(&r.volume),
        format_rational(&r.exceptional_prefactor),
        r.tail_cutoff.to_string(),
        r.value.to_string(),
        format!("{:.3e}", r.tail_error_estimate),
    ];
    let pretty = format!(
        "volume                {}\nexceptional prefactor {} = {}\nstable product p in [{}, {}] {}\nsingular constant     {} (tail bound {:.3e})\n",
        format_rational(&r.volume),
        format_rational(&r.exceptional_prefactor),
        prefactor_decimal(&r.exceptional_prefactor, 6),
        r.p0,
        r.tail_cutoff,
        r.truncated_product,
        r.value,
        r.tail_error_estimate
    );
    Ok(Report::new(
        serde_json::to_value(&r)?,
        &["volume", "prefactor", "p_max", "value", "tail_error"],
        vec![row],
        pretty,
    ))
}
