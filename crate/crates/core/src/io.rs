//! Field serialisation: flat little-endian `f64` binaries with a JSON sidecar,
//! and CSV exports of 1D slices, interface fluxes and tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityField, Grid, InterfaceFlux, MomentumField, Topology};

/// Sidecar describing a binary field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    /// `density`, `momentum`, `flux` or `cap`.
    pub kind: String,
    /// Leading entry is the number of time levels or slabs (1 for static fields),
    /// followed by cells per axis (or faces for momentum, interface faces for flux).
    pub shape: Vec<usize>,
    pub dx: Vec<f64>,
    pub dt: f64,
    pub origin: Vec<f64>,
    pub topology: Topology,
}

impl FieldMeta {
    fn for_grid(kind: &str, leading: usize, trailing: Vec<usize>, g: &Grid) -> Self {
        let mut shape = vec![leading];
        shape.extend(trailing);
        FieldMeta {
            kind: kind.into(),
            shape,
            dx: g.dx().to_vec(),
            dt: g.dt(),
            origin: g.origin().to_vec(),
            topology: g.topology(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn density(g: &Grid) -> Self {
        Self::for_grid("density", g.nt() + 1, g.cells_per_axis().to_vec(), g)
    }

    pub fn momentum(g: &Grid) -> Self {
        Self::for_grid("momentum", g.nt(), vec![g.num_faces()], g)
    }

    pub fn flux(g: &Grid) -> Self {
        Self::for_grid("flux", g.nt(), vec![g.interface_faces().len()], g)
    }

    pub fn cap(g: &Grid) -> Self {
        Self::for_grid("cap", 1, g.cells_per_axis().to_vec(), g)
    }
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.bin")), dir.join(format!("{name}.json")))
}

/// Writes `name.bin` and `name.json` under `dir`; returns the two file names.
pub fn write_field(dir: &Path, name: &str, values: &[f64], meta: &FieldMeta) -> Result<Vec<String>> {
    if values.len() != meta.len() {
        return Err(Error::Shape(format!("{} values for shape {:?}", values.len(), meta.shape)));
    }
    let (bin, side) = paths(dir, name);
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin, bytes)?;
    fs::write(&side, serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(vec![format!("{name}.bin"), format!("{name}.json")])
}

pub fn read_field(dir: &Path, name: &str) -> Result<(Vec<f64>, FieldMeta)> {
    let (bin, side) = paths(dir, name);
    let meta: FieldMeta = serde_json::from_str(&fs::read_to_string(side)?)?;
    let bytes = fs::read(bin)?;
    if bytes.len() != 8 * meta.len() {
        return Err(Error::Shape(format!(
            "{} bytes on disk, sidecar shape {:?} needs {}",
            bytes.len(),
            meta.shape,
            8 * meta.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((values, meta))
}

pub fn write_density(dir: &Path, name: &str, rho: &DensityField, g: &Grid) -> Result<Vec<String>> {
    write_field(dir, name, rho.values(), &FieldMeta::density(g))
}

pub fn write_momentum(dir: &Path, name: &str, v: &MomentumField, g: &Grid) -> Result<Vec<String>> {
    write_field(dir, name, v.values(), &FieldMeta::momentum(g))
}

/// `x,value` rows for a 1D slice at cell centres.
pub fn slice_csv(slice: &[f64], g: &Grid) -> Result<String> {
    if g.dim() != 1 || slice.len() != g.num_cells() {
        return Err(Error::Shape("CSV slices are one-dimensional and match the grid".into()));
    }
    let mut out = String::from("x,value\n");
    for (c, v) in slice.iter().enumerate() {
        out.push_str(&format!("{},{}\n", g.cell_center(c)[0], v));
    }
    Ok(out)
}

/// `t,cell,value` rows: one per time slab and interface face, `t` at the slab midpoint,
/// `cell` the index of the face along the membrane.
pub fn flux_csv(flux: &InterfaceFlux, g: &Grid) -> String {
    let k = flux.num_faces();
    let mut out = String::from("t,cell,value\n");
    for s in 0..g.nt() {
        let t = (s as f64 + 0.5) * g.dt();
        for (j, v) in flux.slab(s).iter().enumerate().take(k) {
            out.push_str(&format!("{t},{j},{v}\n"));
        }
    }
    out
}

/// Generic CSV with a header row.
pub fn table_csv(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::torus(&[4, 3], 2).unwrap();
        let values: Vec<f64> = (0..36).map(|i| i as f64 * 0.25 + 1e-3).collect();
        let rho = DensityField::from_values(&g, values.clone()).unwrap();
        let files = write_density(dir.path(), "rho", &rho, &g).unwrap();
        assert_eq!(files, ["rho.bin", "rho.json"]);
        let (back, meta) = read_field(dir.path(), "rho").unwrap();
        assert_eq!(back, values);
        assert_eq!(meta.shape, vec![3, 4, 3]);
        assert_eq!(meta.topology, Topology::Periodic);
        assert_eq!(meta, FieldMeta::density(&g));
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::torus(&[4], 1).unwrap();
        assert!(write_field(dir.path(), "c", &[1.0; 3], &FieldMeta::cap(&g)).is_err());
        write_field(dir.path(), "c", &[1.0; 4], &FieldMeta::cap(&g)).unwrap();
        fs::write(dir.path().join("c.bin"), [0u8; 24]).unwrap();
        assert!(read_field(dir.path(), "c").is_err());
    }

    #[test]
    fn csv_exports() {
        let g = Grid::boxed(&[2], &[0.0], &[1.0], 1).unwrap();
        assert_eq!(slice_csv(&[1.0, 2.0], &g).unwrap(), "x,value\n0.25,1\n0.75,2\n");
        let s = Grid::split(&[4], &[-1.0], &[1.0], 2).unwrap();
        let flux = InterfaceFlux::from_values(&s, vec![0.5, -1.0]).unwrap();
        assert_eq!(flux_csv(&flux, &s), "t,cell,value\n0.25,0,0.5\n0.75,0,-1\n");
        assert_eq!(table_csv(&["a", "b"], &[vec![1.0, 2.5]]), "a,b\n1,2.5\n");
    }
}
