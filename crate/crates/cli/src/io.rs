//! CSV and JSON emission. Floats are written with 17 significant digits so
//! every file re-parses to the exact values that were written.

use std::path::Path;

use ddnpc_core::plant::{BrunovskyStructure, Trajectory};
use ddnpc_core::trajlib::Sequence;
use serde::Serialize;

use crate::Failure;

pub fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::io(path, e))?;
    w.write_record(header).map_err(|e| Failure::io(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| Failure::io(path, e))?;
    }
    w.flush().map_err(|e| Failure::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::io(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn channel_header(prefix: &str, m: usize) -> Vec<String> {
    (1..=m).map(|i| format!("{prefix}_{i}")).collect()
}

/// Columns `k, u_1..u_m, y_1..y_m`; cells past the end of a channel are empty.
pub fn write_io_csv(path: &Path, inputs: &Sequence, outputs: &[Vec<f64>]) -> Result<(), Failure> {
    let m = outputs.len();
    let rows_n = outputs.iter().map(Vec::len).max().unwrap_or(0).max(inputs.len());
    let mut header = vec!["k".to_string()];
    header.extend(channel_header("u", inputs.channels()));
    header.extend(channel_header("y", m));
    let rows: Vec<Vec<String>> = (0..rows_n)
        .map(|k| {
            let mut r = vec![k.to_string()];
            for j in 0..inputs.channels() {
                r.push(if k < inputs.len() { fmt(inputs.matrix()[(k, j)]) } else { String::new() });
            }
            for y in outputs {
                r.push(y.get(k).map(|&v| fmt(v)).unwrap_or_default());
            }
            r
        })
        .collect();
    write_table(path, &header, &rows)
}

/// Parsed `k, u.., y..` table.
#[derive(Debug, Clone, PartialEq)]
pub struct IoTable {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

pub fn read_io_csv(path: &Path) -> Result<IoTable, Failure> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Failure::io(path, e))?;
    let header = rdr.headers().map_err(|e| Failure::io(path, e))?.clone();
    let m_u = header.iter().filter(|h| h.starts_with("u_")).count();
    let m_y = header.iter().filter(|h| h.starts_with("y_")).count();
    let expected: Vec<String> =
        std::iter::once("k".to_string()).chain(channel_header("u", m_u)).chain(channel_header("y", m_y)).collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Failure::config(format!("{}: header must be {}", path.display(), expected.join(","))));
    }
    let mut inputs = Vec::new();
    let mut outputs = vec![Vec::new(); m_y];
    let mut u_done = false;
    let mut y_done = vec![false; m_y];
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| Failure::config(format!("{}:{line}: {e}", path.display())))?;
        let cell = |c: usize| -> Result<Option<f64>, Failure> {
            let s = rec.get(c).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| Failure::config(format!("{}:{line}: column {} is not a number: {s:?}", path.display(), c + 1)))
        };
        if rec.get(0).and_then(|s| s.trim().parse::<usize>().ok()) != Some(idx) {
            return Err(Failure::config(format!("{}:{line}: expected k = {idx}", path.display())));
        }
        let u: Vec<Option<f64>> = (0..m_u).map(|j| cell(1 + j)).collect::<Result<_, _>>()?;
        if u.iter().all(Option::is_some) && !u_done {
            inputs.push(u.into_iter().flatten().collect());
        } else if u.iter().all(Option::is_none) {
            u_done = true;
        } else {
            return Err(Failure::config(format!("{}:{line}: incomplete input row", path.display())));
        }
        for i in 0..m_y {
            match cell(1 + m_u + i)? {
                Some(v) if !y_done[i] => outputs[i].push(v),
                Some(_) => return Err(Failure::config(format!("{}:{line}: gap in y_{}", path.display(), i + 1))),
                None => y_done[i] = true,
            }
        }
    }
    Ok(IoTable { inputs, outputs })
}

/// Data CSV with measured outputs plus an optional clean-output companion.
pub fn write_trajectory(path: &Path, clean_path: Option<&Path>, data: &Trajectory) -> Result<(), Failure> {
    write_io_csv(path, &data.inputs, &data.noisy_outputs)?;
    if let (Some(p), Some(y)) = (clean_path, &data.outputs) {
        write_io_csv(p, &data.inputs, y)?;
    }
    Ok(())
}

pub fn read_trajectory(path: &Path, structure: &BrunovskyStructure) -> Result<Trajectory, Failure> {
    let table = read_io_csv(path)?;
    if table.outputs.len() != structure.m() || table.inputs.first().map(Vec::len) != Some(structure.m()) {
        return Err(Failure::config(format!("{}: expected {} input and output channels", path.display(), structure.m())));
    }
    let inputs = Sequence::from_rows(&table.inputs)?;
    Ok(Trajectory::from_parts(structure.clone(), inputs, table.outputs, None)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0, -0.0] {
            assert_eq!(fmt(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }
}
