//! JSON instances and reports, CSV trajectories and runs.
//!
//! Floats are written with 17 significant digits (`{:.16e}`); `nan` marks a column that
//! does not apply to the row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::bounds::{self, BoundConstants, BoundReport};
use crate::error::Result;
use crate::flow::FlowTrajectory;
use crate::geometry;
use crate::mdp::{self, MdpInstance, RawMdp};
use crate::npg::NpgRun;

pub const FLOW_COLUMNS: [&str; 9] = [
    "t",
    "reward",
    "reward_gap",
    "dk_to_pistar",
    "dk_to_central_path",
    "upper_bound_thm42",
    "lower_bound_thm42",
    "upper_bound_thm44",
    "lower_bound_thm44",
];

pub const NPG_COLUMNS: [&str; 11] = [
    "k",
    "reward",
    "reward_gap",
    "log_gap",
    "min_Z",
    "q_dist_tau",
    "logpi_dist_tau",
    "bound_upper",
    "bound_lower",
    "progress_lhs",
    "progress_rhs",
];

pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    fmt_float(x.unwrap_or(f64::NAN))
}

fn write_row<W: Write>(w: &mut W, cells: &[String]) -> Result<()> {
    writeln!(w, "{}", cells.join(","))?;
    Ok(())
}

pub fn read_mdp(path: &Path) -> Result<MdpInstance> {
    let raw: RawMdp = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    mdp::validate_mdp(&raw)
}

pub fn parse_mdp(json: &str) -> Result<MdpInstance> {
    let raw: RawMdp = serde_json::from_str(json)?;
    mdp::validate_mdp(&raw)
}

pub fn write_mdp(path: &Path, mdp: &MdpInstance) -> Result<()> {
    write_json(path, &mdp.to_raw())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Trajectory CSV. Bound columns are filled for `t ≥ 1` when constants are supplied.
pub fn write_flow_csv<W: Write>(
    w: &mut W,
    mdp: &MdpInstance,
    traj: &FlowTrajectory,
    consts: Option<&BoundConstants>,
) -> Result<()> {
    writeln!(w, "{}", FLOW_COLUMNS.join(","))?;
    for ((&t, pi), d) in traj.times.iter().zip(&traj.policies).zip(&traj.diagnostics) {
        let (mut u42, mut l42, mut u44, mut l44) = (None, None, None, None);
        if let Some(c) = consts.filter(|_| t >= 1.0) {
            let occ = geometry::occupancy_of(mdp, pi)?;
            let (u, l) = bounds::thm42_bounds(c, t, c.min_d_offmass(&occ.d))?;
            u42 = Some(u);
            l42 = Some(l);
            let (u, l) = bounds::thm44_bounds(c, t)?;
            u44 = u;
            l44 = Some(l);
        }
        write_row(
            w,
            &[
                fmt_float(t),
                fmt_float(d.reward),
                fmt_float(d.reward_gap),
                fmt_float(d.dk_to_pistar),
                fmt_opt(d.dk_to_central_path),
                fmt_opt(u42),
                fmt_opt(l42),
                fmt_opt(u44),
                fmt_opt(l44),
            ],
        )?;
    }
    Ok(())
}

/// Run CSV. For unregularized runs the bound columns hold the value sandwich (constants
/// need a stepsize); for regularized runs `bound_upper` holds the overall error bound
/// (constants need the contraction constant) and `bound_lower` is `nan`.
pub fn write_npg_csv<W: Write>(
    w: &mut W,
    mdp: &MdpInstance,
    run: &NpgRun,
    consts: Option<&BoundConstants>,
) -> Result<()> {
    writeln!(w, "{}", NPG_COLUMNS.join(","))?;
    for (i, d) in run.diagnostics.iter().enumerate() {
        let (mut upper, mut lower) = (None, None);
        if let Some(c) = consts {
            if run.tau == 0.0 && d.k >= 1 && c.c_npg.is_some() {
                let occ = geometry::occupancy_of(mdp, &run.iterates[i])?;
                let (u, l) = bounds::thm47_bounds(c, d.k, c.min_d_offmass(&occ.d))?;
                upper = Some(u);
                lower = Some(l);
            } else if run.tau > 0.0 && run.tau <= 1.0 && d.k >= 2 && c.c_cen.is_some() {
                upper = Some(bounds::thm61_overall(c, d.k - 1, run.eta, run.tau)?);
            }
        }
        let log_gap = if d.reward_gap > 0.0 { d.reward_gap.ln() } else { f64::NAN };
        write_row(
            w,
            &[
                d.k.to_string(),
                fmt_float(d.reward),
                fmt_float(d.reward_gap),
                fmt_float(log_gap),
                fmt_opt(d.min_z),
                fmt_opt(d.q_dist_tau),
                fmt_opt(d.logpi_dist_tau),
                fmt_opt(upper),
                fmt_opt(lower),
                fmt_opt(d.progress_lhs),
                fmt_opt(d.progress_rhs),
            ],
        )?;
    }
    Ok(())
}

pub fn write_report_rows_csv<W: Write>(w: &mut W, report: &BoundReport) -> Result<()> {
    writeln!(w, "check,x,quantity,lower,upper,pass")?;
    for r in &report.rows {
        write_row(
            w,
            &[
                r.check.clone(),
                fmt_float(r.x),
                fmt_float(r.quantity),
                fmt_opt(r.lower),
                fmt_opt(r.upper),
                r.pass.to_string(),
            ],
        )?;
    }
    Ok(())
}

/// Writes `<stem>.json` and `<stem>_rows.csv` into `dir`.
pub fn write_report(dir: &Path, stem: &str, report: &BoundReport) -> Result<()> {
    write_json(&dir.join(format!("{stem}.json")), report)?;
    let mut w = BufWriter::new(File::create(dir.join(format!("{stem}_rows.csv")))?);
    write_report_rows_csv(&mut w, report)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv_file<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut w = BufWriter::new(File::create(path)?);
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow;
    use crate::generators;
    use crate::mdp::Policy;

    #[test]
    fn float_format_roundtrips() {
        for x in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, std::f64::consts::PI] {
            let s = fmt_float(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(fmt_float(f64::NAN), "nan");
    }

    #[test]
    fn flow_csv_shape() {
        let mdp = generators::bandit(&[1.0, 0.5, 0.0]).unwrap();
        let pi0 = Policy::uniform(1, 3);
        let (consts, reference) = BoundConstants::for_instance(&mdp, &pi0).unwrap();
        let traj =
            flow::integrate_kakade_flow_with(&mdp, &reference, &pi0, &[0.0, 0.5, 1.0, 2.0], 1e-10)
                .unwrap();
        let mut buf = Vec::new();
        write_flow_csv(&mut buf, &mdp, &traj, Some(&consts)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], FLOW_COLUMNS.join(","));
        assert_eq!(lines.len(), 5);
        assert!(lines[1].split(',').nth(5).unwrap() == "nan");
        // Upper bound at t = 1 is 2‖r‖/(1−γ).
        let upper: f64 = lines[3].split(',').nth(5).unwrap().parse().unwrap();
        assert!((upper - 2.0).abs() < 1e-15);
    }

    #[test]
    fn mdp_json_roundtrip() {
        let mdp = generators::garnet(3, 2, 2, 0.7, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        write_mdp(&path, &mdp).unwrap();
        assert_eq!(read_mdp(&path).unwrap(), mdp);
        assert!(parse_mdp("{ not json").is_err());
    }
}
