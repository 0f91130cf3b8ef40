use std::fs;
use std::io::BufReader;
use std::path::Path;

use geolp::calculus::{eigendecompose, FunctionalCalculus, DENSE_LIMIT};
use geolp::field::{read_field_csv, TensorField};
use geolp::frac_calculus::{besov_norm, sobolev_norm, write_norm_table, NormRow};
use geolp::geometry::l2_norm;
use geolp::lp::{base_symbol, lp_band, normalize_bank, reconstruct, write_decomposition, BandInterval, Normalization};
use geolp::operators::write_spectrum;
use geolp::report::{write_reports_csv, EstimateReport};
use geolp::sample::{generate, SampleSpec};
use geolp::verify::{run_suite, suite_passes};
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, EXIT_FIELD, EXIT_SOLVER, EXIT_VERIFY};

pub const REPORTS_JSON: &str = "reports.json";
pub const REPORTS_CSV: &str = "reports.csv";

/// Write via a temporary sibling and rename, so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(&path.display().to_string(), e))
}

fn prepare(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(&out.display().to_string(), e))
}

fn to_json(v: &impl serde::Serialize) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("reports serialize");
    s.push(b'\n');
    s
}

pub fn spectrum(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let m = cfg.manifold()?;
    let op = m.laplacian(cfg.grid.rank)?;
    let dim = op.dim();
    let count = cfg.grid.spectrum_count.unwrap_or(if dim <= DENSE_LIMIT { dim } else { 64 });
    let basis = eigendecompose(op, Some(count))?;
    let residual = (0..basis.count()).map(|i| basis.residual(i)).fold(0.0, f64::max);
    let mut csv = Vec::new();
    write_spectrum(&basis.eigenvalues, &mut csv)?;
    prepare(out)?;
    write_atomic(&out.join("spectrum.csv"), &csv)?;
    let meta = json!({
        "n1": cfg.grid.n1,
        "n2": cfg.grid.n2,
        "rank": cfg.grid.rank,
        "metric": cfg.metric_label(),
        "dim": dim,
        "count": basis.count(),
        "complete": basis.is_complete(),
        "lambda_max": basis.spectral_radius(),
        "max_residual": residual,
    });
    write_atomic(&out.join("basis.json"), &to_json(&meta))?;
    println!("eigenvalues={} dim={dim} first={:e}", basis.count(), basis.eigenvalues.first().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn load_field(path: &Path, cfg: &RunConfig) -> Result<TensorField, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::new(EXIT_FIELD, "field", format!("{}: {e}", path.display())))?;
    let f = read_field_csv(BufReader::new(file))
        .map_err(|e| CliError::new(EXIT_FIELD, "field", format!("{}: {e}", path.display())))?;
    if (f.n1, f.n2) != (cfg.grid.n1, cfg.grid.n2) {
        return Err(CliError::new(
            EXIT_FIELD,
            "field",
            format!("field grid {}x{} does not match configured grid {}x{}", f.n1, f.n2, cfg.grid.n1, cfg.grid.n2),
        ));
    }
    Ok(f)
}

pub fn decompose(cfg: &RunConfig, field: &Path, out: &Path) -> Result<(), CliError> {
    let f = load_field(field, cfg)?;
    let m = cfg.manifold()?;
    let bank = cfg.bank()?;
    let calc = m.calculus(f.rank)?;
    let mut csv = Vec::new();
    write_decomposition(&f, &bank, calc.as_ref(), &mut csv)?;
    let norm = l2_norm(&m.cache, &f);
    let diff = l2_norm(&m.cache, &reconstruct(&f, &bank, calc.as_ref())?.sub(&f));
    let err = if norm > 0.0 { diff / norm } else { diff };
    let low = match bank.mode {
        Normalization::SumToIdentity => {
            Some(l2_norm(&m.cache, &lp_band(&f, BandInterval::Below(bank.k_min), &bank, calc.as_ref())?))
        }
        _ => None,
    };
    prepare(out)?;
    write_atomic(&out.join("decomposition.csv"), &csv)?;
    let meta = json!({
        "rank": f.rank,
        "k_min": bank.k_min,
        "k_max": bank.k_max,
        "mode": bank.mode,
        "l2_norm": norm,
        "low_band_l2": low,
        "reconstruction_error": err,
    });
    write_atomic(&out.join("decomposition.json"), &to_json(&meta))?;
    println!("reconstruction_error={err:e}");
    Ok(())
}

pub fn norms(cfg: &RunConfig, field: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let fields = match field {
        Some(p) => vec![load_field(p, cfg)?],
        None => {
            let e = &cfg.experiments;
            let spec = SampleSpec::fourier(cfg.seed, cfg.norms.samples.max(1), cfg.grid.rank, e.max_wavenumber)
                .decay(e.spectral_decay);
            let m = cfg.manifold()?;
            generate(&m.cache, None, &spec)?
        }
    };
    let m = cfg.manifold()?;
    let bank = cfg.bank()?;
    let squares = normalize_bank(base_symbol(&bank.symbol), Normalization::SquaresToIdentity, bank.k_min, bank.k_max)
        .map_err(CliError::config_from)?;
    let mut rows = Vec::new();
    for (id, f) in fields.iter().enumerate() {
        let row = |space: &str, a: f64, p: f64, q: f64, value: f64| NormRow { field_id: id, space: space.into(), a, p, q, value };
        rows.push(row("L", 0.0, 2.0, 2.0, l2_norm(&m.cache, f)));
        for &a in &cfg.norms.sobolev {
            rows.push(row("H", a, 2.0, 2.0, sobolev_norm(&m, f, a)?));
        }
        for s in cfg.besov_specs() {
            rows.push(row("B", s.a, s.p, s.q, besov_norm(&m, f, s, &squares)?));
        }
    }
    let mut csv = Vec::new();
    write_norm_table(&rows, &mut csv)?;
    prepare(out)?;
    write_atomic(&out.join("norms.csv"), &csv)?;
    println!("fields={} rows={}", fields.len(), rows.len());
    Ok(())
}

pub fn verify(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<(), CliError> {
    let coarse = cfg.manifold()?;
    let fine = cfg.fine_manifold()?;
    let bank = cfg.bank()?;
    let opts = cfg.suite_options();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::new(EXIT_SOLVER, "solver", e.to_string()))?;
    // Each experiment is deterministic on its own; results are concatenated in configured order.
    let parts: Vec<_> = pool.install(|| {
        opts.experiments
            .par_iter()
            .map(|&e| {
                let o = geolp::verify::SuiteOptions { experiments: vec![e], ..opts.clone() };
                run_suite(&coarse, fine.as_ref(), &bank, &o)
            })
            .collect()
    });
    let mut reports: Vec<EstimateReport> = Vec::new();
    for p in parts {
        reports.extend(p?);
    }
    prepare(out)?;
    write_atomic(&out.join(REPORTS_JSON), &to_json(&reports))?;
    let mut csv = Vec::new();
    write_reports_csv(&reports, &mut csv).map_err(|e| CliError::new(EXIT_SOLVER, "io", e.to_string()))?;
    write_atomic(&out.join(REPORTS_CSV), &csv)?;
    for r in &reports {
        println!("{} {} worst={:e}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.worst_ratio);
    }
    gate(&reports)
}

fn gate(reports: &[EstimateReport]) -> Result<(), CliError> {
    if suite_passes(reports) {
        return Ok(());
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    Err(CliError::new(
        EXIT_VERIFY,
        "verify",
        format!("{} of {} gated checks failed: {}", failed.len(), reports.len(), failed.join(" ")),
    ))
}

pub fn report(input: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(input).map_err(|e| CliError::io(&input.display().to_string(), e))?;
    let reports: Vec<EstimateReport> =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", input.display())))?;
    let stdout = std::io::stdout();
    write_reports_csv(&reports, stdout.lock()).map_err(|e| CliError::new(EXIT_SOLVER, "io", e.to_string()))?;
    gate(&reports)
}
