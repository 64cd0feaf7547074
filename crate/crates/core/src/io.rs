//! CSV writers. Every real number is written with 17 significant digits so
//! files round-trip bit-exactly and compare byte-for-byte across runs.

use std::io::{self, Write};

use crate::fokker_planck::DensityPath;
use crate::measures::{EmpiricalMeasure, GridDensity};
use crate::mfg::{Comparison, IterationRow, ReductionTable, ValueField};
use crate::particle_sim::{ChaosRow, MetricRow, TrajectoryRecord};

/// `x` with 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn coord_header(prefix: &str, d: usize) -> String {
    (0..d).map(|k| format!("{prefix}{k}")).collect::<Vec<_>>().join(",")
}

fn write_atoms(w: &mut impl Write, lead: &str, pop: usize, m: &EmpiricalMeasure) -> io::Result<()> {
    for j in 0..m.len() {
        write!(w, "{lead}{pop},{j}")?;
        for x in m.point(j) {
            write!(w, ",{}", num(*x))?;
        }
        writeln!(w, ",{}", num(m.weight(j)))?;
    }
    Ok(())
}

/// Rows `pop,idx,x0,...,weight`.
pub fn write_empirical(w: &mut impl Write, measures: &[EmpiricalMeasure]) -> io::Result<()> {
    let d = measures.first().map_or(0, |m| m.dim());
    writeln!(w, "pop,idx,{},weight", coord_header("x", d))?;
    for (p, m) in measures.iter().enumerate() {
        write_atoms(w, "", p, m)?;
    }
    Ok(())
}

/// Empirical rows for every recorded time, with a leading `t` column.
pub fn write_snapshots(w: &mut impl Write, record: &TrajectoryRecord) -> io::Result<()> {
    let d = record.snapshots.first().map_or(0, |s| s.dim());
    writeln!(w, "t,pop,idx,{},weight", coord_header("x", d))?;
    for (t, s) in record.times.iter().zip(&record.snapshots) {
        let lead = format!("{},", num(*t));
        for (p, m) in s.measures().map_err(io::Error::other)?.iter().enumerate() {
            write_atoms(w, &lead, p, m)?;
        }
    }
    Ok(())
}

pub fn write_metrics(w: &mut impl Write, rows: &[MetricRow]) -> io::Result<()> {
    writeln!(w, "t,metric_name,value")?;
    for r in rows {
        writeln!(w, "{},{},{}", num(r.t), r.name, num(r.value))?;
    }
    Ok(())
}

fn write_cell(w: &mut impl Write, g: &GridDensity, c: usize, mid: &mut [f64]) -> io::Result<()> {
    let grid = g.grid();
    let idx = grid.multi_index(c);
    for i in &idx[..grid.dim()] {
        write!(w, ",{i}")?;
    }
    grid.midpoint_into(c, mid);
    for x in mid.iter() {
        write!(w, ",{}", num(*x))?;
    }
    Ok(())
}

/// Rows `pop,cell indices...,midpoints...,value`.
pub fn write_grid(w: &mut impl Write, fields: &[GridDensity]) -> io::Result<()> {
    let d = fields.first().map_or(0, |g| g.grid().dim());
    writeln!(w, "pop,{},{},value", coord_header("cell", d), coord_header("mid", d))?;
    let mut mid = vec![0.0; d];
    for (p, g) in fields.iter().enumerate() {
        for (c, v) in g.values().iter().enumerate() {
            write!(w, "{p}")?;
            write_cell(w, g, c, &mut mid)?;
            writeln!(w, ",{}", num(*v))?;
        }
    }
    Ok(())
}

/// A `# key=value` block followed by rows `t,pop,cell...,midpoint...,value`.
pub fn write_density_path(w: &mut impl Write, path: &DensityPath, meta: &[(String, String)]) -> io::Result<()> {
    for (k, v) in meta {
        writeln!(w, "# {k}={v}")?;
    }
    let d = path.fields.first().and_then(|f| f.first()).map_or(0, |g| g.grid().dim());
    writeln!(w, "t,pop,{},{},value", coord_header("cell", d), coord_header("mid", d))?;
    let mut mid = vec![0.0; d];
    for (t, fields) in path.times.iter().zip(&path.fields) {
        for (p, g) in fields.iter().enumerate() {
            for (c, v) in g.values().iter().enumerate() {
                write!(w, "{},{p}", num(*t))?;
                write_cell(w, g, c, &mut mid)?;
                writeln!(w, ",{}", num(*v))?;
            }
        }
    }
    Ok(())
}

/// Rows `t,cell...,midpoint...,w`.
pub fn write_value_field(w: &mut impl Write, field: &ValueField) -> io::Result<()> {
    let grid = &field.grid;
    let d = grid.dim();
    writeln!(w, "t,{},{},w", coord_header("cell", d), coord_header("mid", d))?;
    let mut mid = vec![0.0; d];
    for (t, vals) in field.times.iter().zip(&field.values) {
        for (c, v) in vals.iter().enumerate() {
            write!(w, "{}", num(*t))?;
            let idx = grid.multi_index(c);
            for i in &idx[..d] {
                write!(w, ",{i}")?;
            }
            grid.midpoint_into(c, &mut mid);
            for x in &mid {
                write!(w, ",{}", num(*x))?;
            }
            writeln!(w, ",{}", num(*v))?;
        }
    }
    Ok(())
}

pub fn write_iteration_log(w: &mut impl Write, log: &[IterationRow]) -> io::Result<()> {
    writeln!(w, "iter,residual")?;
    for r in log {
        writeln!(w, "{},{}", r.iter, num(r.residual))?;
    }
    Ok(())
}

pub fn write_chaos_table(w: &mut impl Write, rows: &[ChaosRow]) -> io::Result<()> {
    writeln!(w, "n,mean_w1,std,std_error,seeds")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.n, num(r.mean_w1), num(r.std), num(r.std_error), r.seeds)?;
    }
    Ok(())
}

pub fn write_reduction_table(w: &mut impl Write, table: &ReductionTable) -> io::Result<()> {
    writeln!(w, "dt,sup_error")?;
    for r in &table.rows {
        writeln!(w, "{},{}", num(r.dt), num(r.error))?;
    }
    Ok(())
}

pub fn write_comparison(w: &mut impl Write, cmp: &Comparison) -> io::Result<()> {
    writeln!(w, "t,w1")?;
    for (t, d) in cmp.times.iter().zip(&cmp.w1) {
        writeln!(w, "{},{}", num(*t), num(*d))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::FvGrid;

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(num(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
        assert_eq!(num(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn empirical_rows() {
        let m = EmpiricalMeasure::uniform(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut out = Vec::new();
        write_empirical(&mut out, &[m]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "pop,idx,x0,x1,weight");
        assert_eq!(lines[2], "0,1,3.0000000000000000e0,4.0000000000000000e0,5.0000000000000000e-1");
    }

    #[test]
    fn grid_rows_name_cells_and_midpoints() {
        let g = GridDensity::from_fn(FvGrid::uniform_1d(0.0, 1.0, 8).unwrap(), |_| 1.0).unwrap();
        let mut out = Vec::new();
        write_grid(&mut out, &[g]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 9);
        assert!(text.lines().nth(1).unwrap().starts_with("0,0,6.2500000000000000e-2,"));
    }
}
