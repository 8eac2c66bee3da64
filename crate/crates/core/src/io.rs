//! Field, solution and path-ensemble serialization.
//!
//! Binary fields: little-endian header {magic "MFGF", u32 version, u32 d, u32 nx,
//! u32 nt, f64 T, u8 kind} followed by the f64 payload in storage order.
//! Ensembles: {magic "MFGP", u64 N, u32 nt+1, u32 d}, the coordinates
//! [path][node][axis], then kinetic, running and terminal actions (N each).

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::duality::GapReport;
use crate::error::{Error, Result};
use crate::flows::PathEnsemble;
use crate::grid::{FieldRole, GridSpec, MomentumField, ScalarField, TimeLayout};
use crate::solver::{Diagnostics, IterRecord, Solution};

pub const FIELD_MAGIC: &[u8; 4] = b"MFGF";
pub const ENSEMBLE_MAGIC: &[u8; 4] = b"MFGP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4 + 8 + 1;

/// Layout code in the low nibble, role code in the high nibble; 0x0F marks momentum.
fn kind_byte(role: FieldRole, layout: TimeLayout) -> u8 {
    let l = match layout {
        TimeLayout::Nodes => 0,
        TimeLayout::Intervals => 1,
        TimeLayout::Interior => 2,
        TimeLayout::Single => 3,
    };
    let r = match role {
        FieldRole::Density => 0,
        FieldRole::Value => 1,
        FieldRole::Price => 2,
        FieldRole::Generic => 3,
    };
    r << 4 | l
}

const MOMENTUM_KIND: u8 = 0x0F;

fn parse_kind(b: u8) -> Result<(FieldRole, TimeLayout)> {
    let layout = match b & 0x0F {
        0 => TimeLayout::Nodes,
        1 => TimeLayout::Intervals,
        2 => TimeLayout::Interior,
        3 => TimeLayout::Single,
        _ => return Err(Error::Format(format!("unknown field kind {b:#04x}"))),
    };
    let role = match b >> 4 {
        0 => FieldRole::Density,
        1 => FieldRole::Value,
        2 => FieldRole::Price,
        3 => FieldRole::Generic,
        _ => return Err(Error::Format(format!("unknown field kind {b:#04x}"))),
    };
    Ok((role, layout))
}

fn header(grid: &GridSpec, kind: u8) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_LEN);
    h.extend_from_slice(FIELD_MAGIC);
    for v in [VERSION, grid.d as u32, grid.nx as u32, grid.nt as u32] {
        h.extend_from_slice(&v.to_le_bytes());
    }
    h.extend_from_slice(&grid.t_final.to_le_bytes());
    h.push(kind);
    h
}

fn push_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    buf.reserve(vals.len() * 8);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_f64s(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn scalar_to_bytes(f: &ScalarField) -> Vec<u8> {
    let mut b = header(&f.grid, kind_byte(f.role, f.layout));
    push_f64s(&mut b, &f.values);
    b
}

pub fn momentum_to_bytes(w: &MomentumField) -> Vec<u8> {
    let mut b = header(&w.grid, MOMENTUM_KIND);
    push_f64s(&mut b, &w.values);
    b
}

fn parse_header(b: &[u8]) -> Result<(GridSpec, u8)> {
    if b.len() < HEADER_LEN || &b[0..4] != FIELD_MAGIC {
        return Err(Error::Format("not a field file".into()));
    }
    let version = read_u32(b, 4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported field version {version}")));
    }
    let t = f64::from_le_bytes(b[20..28].try_into().unwrap());
    let grid = GridSpec::new(read_u32(b, 8) as usize, read_u32(b, 12) as usize, read_u32(b, 16) as usize, t)?;
    Ok((grid, b[28]))
}

pub fn scalar_from_bytes(b: &[u8]) -> Result<ScalarField> {
    let (grid, kind) = parse_header(b)?;
    if kind == MOMENTUM_KIND {
        return Err(Error::Format("file holds a momentum field".into()));
    }
    let (role, layout) = parse_kind(kind)?;
    ScalarField::from_values(grid, role, layout, read_f64s(&b[HEADER_LEN..]))
}

pub fn momentum_from_bytes(b: &[u8]) -> Result<MomentumField> {
    let (grid, kind) = parse_header(b)?;
    if kind != MOMENTUM_KIND {
        return Err(Error::Format("file holds a scalar field".into()));
    }
    MomentumField::from_values(grid, read_f64s(&b[HEADER_LEN..]))
}

fn grid_comment(grid: &GridSpec) -> String {
    format!("# grid: d={} nx={} nt={} T={} dx={} dt={}\n", grid.d, grid.nx, grid.nt, grid.t_final, grid.dx(), grid.dt())
}

fn coords(grid: &GridSpec, c: usize) -> String {
    let x = grid.cell_center(c);
    if grid.d == 1 {
        format!("{}", x[0])
    } else {
        format!("{},{}", x[0], x[1])
    }
}

fn units(role: FieldRole) -> &'static str {
    match role {
        FieldRole::Density => "mass per unit volume",
        FieldRole::Value => "cost",
        FieldRole::Price => "cost per unit time",
        FieldRole::Generic => "dimensionless",
    }
}

/// One row per (time, cell); time and space in problem units on the unit torus.
pub fn scalar_to_csv(f: &ScalarField, name: &str) -> String {
    let grid = f.grid;
    let mut s = String::new();
    s.push_str(&format!("# field: {name} layout={:?}\n", f.layout));
    s.push_str(&format!("# units: t [time], x [torus length 1], value [{}]\n", units(f.role)));
    s.push_str(&grid_comment(&grid));
    s.push_str(if grid.d == 1 { "t,x,value\n" } else { "t,x,y,value\n" });
    for k in 0..f.slices() {
        let t = f.layout.time(&grid, k);
        for (c, v) in f.slice(k).iter().enumerate() {
            let _ = writeln!(s, "{t},{},{v}", coords(&grid, c));
        }
    }
    s
}

/// One row per (interval, face); x is the face position along `axis`.
pub fn momentum_to_csv(w: &MomentumField) -> String {
    let grid = w.grid;
    let n = grid.cells();
    let mut s = String::new();
    s.push_str("# field: w (face momenta at time midpoints)\n");
    s.push_str("# units: t [time], x [torus length 1], value [mass per unit volume x length per time]\n");
    s.push_str(&grid_comment(&grid));
    s.push_str(if grid.d == 1 { "t,axis,x,value\n" } else { "t,axis,x,y,value\n" });
    for k in 0..grid.nt {
        let t = (k as f64 + 0.5) * grid.dt();
        for a in 0..grid.d {
            for c in 0..n {
                let mut x = grid.cell_center(c);
                x[a] += 0.5 * grid.dx();
                let pos = if grid.d == 1 { format!("{}", x[0]) } else { format!("{},{}", x[0], x[1]) };
                let _ = writeln!(s, "{t},{a},{pos},{}", w.slice(k)[a * n + c]);
            }
        }
    }
    s
}

pub fn history_to_csv(history: &[IterRecord]) -> String {
    let mut s = String::from("# units: residuals and gap estimate are dimensionless\niter,primal,dual,feas,gap_estimate\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{}", r.iter, r.primal, r.dual, r.feas, r.gap_estimate);
    }
    s
}

pub fn history_from_csv(text: &str) -> Result<Vec<IterRecord>> {
    let bad = |l: &str| Error::Format(format!("bad history row: {l}"));
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("iter") && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(l));
            }
            let x = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad(l));
            Ok(IterRecord {
                iter: f[0].trim().parse().map_err(|_| bad(l))?,
                primal: x(1)?,
                dual: x(2)?,
                feas: x(3)?,
                gap_estimate: x(4)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Formats {
    pub csv: bool,
    pub bin: bool,
}

impl Default for Formats {
    fn default() -> Self {
        Formats { csv: true, bin: true }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

/// Writes a solution directory; only the binary files can be reloaded.
pub fn save_solution(dir: &Path, sol: &Solution, formats: Formats) -> Result<()> {
    fs::create_dir_all(dir)?;
    let scalars: [(&str, &ScalarField); 7] = [
        ("u", &sol.u),
        ("m", &sol.m),
        ("beta", &sol.beta),
        ("beta_t", &sol.beta_t),
        ("beta_raw", &sol.beta_raw),
        ("beta_t_raw", &sol.beta_t_raw),
        ("m_terminal", &terminal(&sol.m)),
    ];
    for (name, f) in scalars {
        if formats.bin && name != "m_terminal" {
            write(&dir.join(format!("{name}.bin")), &scalar_to_bytes(f))?;
        }
        if formats.csv {
            write(&dir.join(format!("{name}.csv")), scalar_to_csv(f, name).as_bytes())?;
        }
    }
    if formats.bin {
        write(&dir.join("w.bin"), &momentum_to_bytes(&sol.w))?;
    }
    if formats.csv {
        write(&dir.join("w.csv"), momentum_to_csv(&sol.w).as_bytes())?;
    }
    write(&dir.join("history.csv"), history_to_csv(&sol.history).as_bytes())?;
    let diag = toml::to_string(&sol.diagnostics).map_err(|e| Error::Format(e.to_string()))?;
    write(&dir.join("diagnostics.toml"), diag.as_bytes())?;
    Ok(())
}

fn terminal(m: &ScalarField) -> ScalarField {
    let nt = m.grid.nt;
    ScalarField::from_values(m.grid, m.role, TimeLayout::Single, m.slice(nt).to_vec()).expect("terminal slice")
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn load_solution(dir: &Path) -> Result<Solution> {
    let s = |name: &str| -> Result<ScalarField> { scalar_from_bytes(&read(&dir.join(format!("{name}.bin")))?) };
    let u = s("u")?;
    let diagnostics: Diagnostics = match fs::read_to_string(dir.join("diagnostics.toml")) {
        Ok(t) => toml::from_str(&t).map_err(|e| Error::Format(e.to_string()))?,
        Err(_) => Diagnostics::default(),
    };
    Ok(Solution {
        grid: u.grid,
        m: s("m")?,
        w: momentum_from_bytes(&read(&dir.join("w.bin"))?)?,
        beta: s("beta")?,
        beta_t: s("beta_t")?,
        beta_raw: s("beta_raw")?,
        beta_t_raw: s("beta_t_raw")?,
        u,
        diagnostics,
        history: match fs::read_to_string(dir.join("history.csv")) {
            Ok(t) => history_from_csv(&t)?,
            Err(_) => Vec::new(),
        },
    })
}

pub fn save_gap_report(path: &Path, rep: &GapReport) -> Result<()> {
    write(path, rep.to_kv().as_bytes())
}

pub fn load_gap_report(path: &Path) -> Result<GapReport> {
    GapReport::from_kv(&fs::read_to_string(path)?)
}

pub fn ensemble_to_bytes(e: &PathEnsemble) -> Vec<u8> {
    let mut b = Vec::with_capacity(20 + 8 * (e.points.len() + 3 * e.len()) + 16);
    b.extend_from_slice(ENSEMBLE_MAGIC);
    b.extend_from_slice(&(e.len() as u64).to_le_bytes());
    b.extend_from_slice(&((e.nt + 1) as u32).to_le_bytes());
    b.extend_from_slice(&(e.d as u32).to_le_bytes());
    push_f64s(&mut b, &e.points);
    push_f64s(&mut b, &e.kinetic);
    push_f64s(&mut b, &e.running);
    push_f64s(&mut b, &e.terminal);
    push_f64s(&mut b, &[e.t_final]);
    b.extend_from_slice(&e.seed.to_le_bytes());
    b
}

pub fn ensemble_from_bytes(b: &[u8]) -> Result<PathEnsemble> {
    if b.len() < 20 || &b[0..4] != ENSEMBLE_MAGIC {
        return Err(Error::Format("not an ensemble file".into()));
    }
    let n = u64::from_le_bytes(b[4..12].try_into().unwrap()) as usize;
    let nodes = read_u32(b, 12) as usize;
    let d = read_u32(b, 16) as usize;
    let np = n * nodes * d;
    let need = 20 + 8 * (np + 3 * n) + 16;
    if nodes < 2 || !(1..=2).contains(&d) || b.len() != need {
        return Err(Error::Format(format!("ensemble file of {} bytes, expected {need}", b.len())));
    }
    let vals = read_f64s(&b[20..need - 8]);
    let (points, rest) = vals.split_at(np);
    Ok(PathEnsemble {
        d,
        nt: nodes - 1,
        t_final: rest[3 * n],
        seed: u64::from_le_bytes(b[need - 8..].try_into().unwrap()),
        points: points.to_vec(),
        kinetic: rest[..n].to_vec(),
        running: rest[n..2 * n].to_vec(),
        terminal: rest[2 * n..3 * n].to_vec(),
    })
}

pub fn save_ensemble(path: &Path, e: &PathEnsemble) -> Result<()> {
    write(path, &ensemble_to_bytes(e))
}

pub fn load_ensemble(path: &Path) -> Result<PathEnsemble> {
    ensemble_from_bytes(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(d: usize) -> ScalarField {
        let g = GridSpec::new(d, 4, 3, 0.5).unwrap();
        let mut f = ScalarField::zeros(g, FieldRole::Price, TimeLayout::Interior);
        f.values.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.25 - 1.0);
        f
    }

    #[test]
    fn binary_round_trip() {
        for d in [1, 2] {
            let f = field(d);
            let b = scalar_to_bytes(&f);
            assert_eq!(&b[0..4], b"MFGF");
            assert_eq!(b.len(), HEADER_LEN + 8 * f.values.len());
            assert_eq!(scalar_from_bytes(&b).unwrap(), f);
            let mut w = MomentumField::zeros(f.grid);
            w.values.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin());
            let b = momentum_to_bytes(&w);
            assert_eq!(momentum_from_bytes(&b).unwrap(), w);
            assert!(scalar_from_bytes(&b).is_err());
        }
        assert!(scalar_from_bytes(b"MFGX").is_err());
    }

    #[test]
    fn csv_has_metadata_and_rows() {
        let f = field(2);
        let s = scalar_to_csv(&f, "beta");
        let lines: Vec<&str> = s.lines().collect();
        assert!(lines[0].starts_with("# field: beta"));
        assert!(lines[1].starts_with("# units:"));
        assert!(lines[2].contains("nx=4"));
        assert_eq!(lines[3], "t,x,y,value");
        assert_eq!(lines.len(), 4 + f.values.len());
        assert!(lines[4].starts_with("0.16666"));
    }

    #[test]
    fn ensemble_round_trip() {
        let e = PathEnsemble {
            d: 1,
            nt: 2,
            t_final: 1.0,
            seed: 9,
            points: vec![0.1, 0.2, 0.3, 0.5, 0.6, 0.7],
            kinetic: vec![1.0, 2.0],
            running: vec![0.0, 0.5],
            terminal: vec![-1.0, 1.0],
        };
        let b = ensemble_to_bytes(&e);
        assert_eq!(&b[0..4], b"MFGP");
        assert_eq!(ensemble_from_bytes(&b).unwrap(), e);
        assert!(ensemble_from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn solution_directory_round_trip() {
        let p = crate::problems::tp1();
        let grid = p.grid(8, 8).unwrap();
        let opts = crate::solver::SolverOptions { max_iters: 30, check_every: 10, ..Default::default() };
        let sol = crate::solver::run(&p, &grid, &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_solution(dir.path(), &sol, Formats::default()).unwrap();
        let back = load_solution(dir.path()).unwrap();
        assert_eq!(back.m, sol.m);
        assert_eq!(back.w, sol.w);
        assert_eq!(back.u, sol.u);
        assert_eq!(back.beta_t_raw, sol.beta_t_raw);
        assert_eq!(back.diagnostics, sol.diagnostics);
        assert_eq!(back.history, sol.history);
        let rep = crate::duality::certify(&sol, &p).unwrap();
        save_gap_report(&dir.path().join("gap.txt"), &rep).unwrap();
        assert_eq!(load_gap_report(&dir.path().join("gap.txt")).unwrap(), rep);

        let csv_only = tempfile::tempdir().unwrap();
        save_solution(csv_only.path(), &sol, Formats { csv: true, bin: false }).unwrap();
        assert!(load_solution(csv_only.path()).is_err());
    }
}
