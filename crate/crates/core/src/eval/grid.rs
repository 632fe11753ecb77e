use std::io::Write;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::flows::FlowStack;
use crate::mixture::MixtureModel;
use crate::rng;
use crate::tensor::Tensor;

/// Points evaluated per model call when filling a grid.
const CHUNK: usize = 4096;

/// Anything with a per-row log-density.
pub trait DensityModel {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &Tensor) -> Result<Tensor>;
}

/// A single flow with the store holding its parameters.
pub struct StackDensity<'a> {
    pub stack: &'a FlowStack,
    pub store: &'a ParamStore,
}

impl DensityModel for StackDensity<'_> {
    fn dim(&self) -> usize {
        self.stack.dim()
    }

    fn log_density(&self, x: &Tensor) -> Result<Tensor> {
        self.stack.log_prob_values(self.store, x)
    }
}

impl DensityModel for MixtureModel {
    fn dim(&self) -> usize {
        MixtureModel::dim(self)
    }

    fn log_density(&self, x: &Tensor) -> Result<Tensor> {
        self.exact_log_evidence(x)
    }
}

/// Values at the centres of a `resolution × resolution` lattice over a box.
///
/// Row-major with rows running along `y` from `lo` to `hi`; `values[r·res + c]`
/// belongs to the cell centred at `(x_c, y_r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub x_bounds: (f64, f64),
    pub y_bounds: (f64, f64),
    pub resolution: usize,
    pub values: Vec<T>,
}

impl<T: Copy + std::fmt::Display> Grid<T> {
    pub fn cell_area(&self) -> f64 {
        let n = self.resolution as f64;
        (self.x_bounds.1 - self.x_bounds.0) / n * (self.y_bounds.1 - self.y_bounds.0) / n
    }

    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        cell_center(self.x_bounds, self.y_bounds, self.resolution, row, col)
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.resolution + col]
    }

    /// CSV with header `x,y,value`, one line per cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("x,y,value\n");
        for r in 0..self.resolution {
            for c in 0..self.resolution {
                let (x, y) = self.center(r, c);
                out.push_str(&format!("{x},{y},{}\n", self.get(r, c)));
            }
        }
        std::fs::File::create(path).and_then(|mut f| f.write_all(out.as_bytes())).map_err(|e| Error::io(path, e))
    }
}

impl Grid<f64> {
    /// `Σ exp(v)·cell_area`, the quadrature estimate of the total mass.
    pub fn mass(&self) -> f64 {
        self.values.iter().map(|v| v.exp()).sum::<f64>() * self.cell_area()
    }
}

fn cell_center(xb: (f64, f64), yb: (f64, f64), res: usize, row: usize, col: usize) -> (f64, f64) {
    let n = res as f64;
    let x = xb.0 + (col as f64 + 0.5) * (xb.1 - xb.0) / n;
    let y = yb.0 + (row as f64 + 0.5) * (yb.1 - yb.0) / n;
    (x, y)
}

fn check(dim: usize, xb: (f64, f64), yb: (f64, f64), res: usize) -> Result<()> {
    if dim != 2 {
        return Err(Error::Unsupported(format!("grids are two-dimensional, model has dimension {dim}")));
    }
    if res == 0 {
        return Err(Error::Contract("grid resolution must be at least 1".into()));
    }
    if !(xb.0 < xb.1 && yb.0 < yb.1) {
        return Err(Error::Contract(format!("empty grid bounds {xb:?} x {yb:?}")));
    }
    Ok(())
}

fn fill<T>(
    xb: (f64, f64),
    yb: (f64, f64),
    res: usize,
    mut eval: impl FnMut(&Tensor) -> Result<Vec<T>>,
) -> Result<Vec<T>> {
    let cells: Vec<(usize, usize)> = (0..res).flat_map(|r| (0..res).map(move |c| (r, c))).collect();
    let mut values = Vec::with_capacity(cells.len());
    for chunk in cells.chunks(CHUNK) {
        let mut pts = Vec::with_capacity(2 * chunk.len());
        for &(r, c) in chunk {
            let (x, y) = cell_center(xb, yb, res, r, c);
            pts.extend([x, y]);
        }
        values.extend(eval(&Tensor::new(vec![chunk.len(), 2], pts)?)?);
    }
    Ok(values)
}

/// Log-density at every cell centre.
pub fn density_grid(model: &impl DensityModel, x_bounds: (f64, f64), y_bounds: (f64, f64), resolution: usize) -> Result<Grid<f64>> {
    check(model.dim(), x_bounds, y_bounds, resolution)?;
    let values = fill(x_bounds, y_bounds, resolution, |pts| Ok(model.log_density(pts)?.into_data()))?;
    Ok(Grid { x_bounds, y_bounds, resolution, values })
}

/// Cluster assigned by the posterior network at every cell centre.
pub fn partition_grid(model: &MixtureModel, x_bounds: (f64, f64), y_bounds: (f64, f64), resolution: usize) -> Result<Grid<usize>> {
    check(model.dim(), x_bounds, y_bounds, resolution)?;
    let values = fill(x_bounds, y_bounds, resolution, |pts| model.assign_cluster(pts))?;
    Ok(Grid { x_bounds, y_bounds, resolution, values })
}

/// `n` samples from every component, stacked in component order, with the
/// component of each row. Component `k` draws from sub-stream `k` of `seed`.
pub fn sample_all(model: &MixtureModel, n: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    let d = model.dim();
    let mut data = Vec::with_capacity(n * d * model.num_components());
    let mut tags = Vec::new();
    for (k, comp) in model.components().iter().enumerate() {
        let s = comp.sample_with(model.store(), n, &mut rng::derive(seed, k as u64))?;
        data.extend_from_slice(s.data());
        tags.extend(std::iter::repeat_n(k, n));
    }
    Ok((Tensor::new(vec![tags.len(), d], data)?, tags))
}

/// Writes [`sample_all`] as CSV with header `x0,..,x{D-1},component`.
pub fn sample_dump(model: &MixtureModel, n: usize, seed: u64, path: &Path) -> Result<()> {
    let (x, tags) = sample_all(model, n, seed)?;
    write_tagged_csv(&x, &tags, path)
}

pub(crate) fn write_tagged_csv(x: &Tensor, tags: &[usize], path: &Path) -> Result<()> {
    let d = x.shape()[1];
    let mut out: String = (0..d).map(|j| format!("x{j},")).collect();
    out.push_str("component\n");
    for (r, t) in tags.iter().enumerate() {
        for v in x.row(r) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{t}\n"));
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(out.as_bytes())).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::LayerSpec;
    use crate::mixture::ModelSpec;

    fn empty_model(k: usize) -> MixtureModel {
        MixtureModel::new(ModelSpec { components: k, dim: 2, flow: vec![], posterior_hidden: vec![] }, 0).unwrap()
    }

    #[test]
    fn gaussian_peak_and_mass() {
        let m = empty_model(1);
        let g = density_grid(&m, (-8.0, 8.0), (-8.0, 8.0), 41).unwrap();
        let best = (0..g.values.len()).max_by(|&a, &b| g.values[a].total_cmp(&g.values[b])).unwrap();
        assert_eq!(best, 20 * 41 + 20);
        assert!((g.mass() - 1.0).abs() < 0.02);
    }

    #[test]
    fn single_cell_and_constant_partition() {
        let m = empty_model(1);
        let g = partition_grid(&m, (-3.0, 3.0), (-3.0, 3.0), 1).unwrap();
        assert_eq!(g.values, vec![0]);
        assert_eq!(g.center(0, 0), (0.0, 0.0));
        let mut m3 = empty_model(3);
        m3.zero_posterior();
        assert!(partition_grid(&m3, (-3.0, 3.0), (-3.0, 3.0), 7).unwrap().values.iter().all(|&v| v == 0));
    }

    #[test]
    fn non_planar_rejected() {
        let m = MixtureModel::new(ModelSpec { components: 1, dim: 3, flow: LayerSpec::maf(1, &[4]), posterior_hidden: vec![] }, 0)
            .unwrap();
        assert!(matches!(density_grid(&m, (-1.0, 1.0), (-1.0, 1.0), 3), Err(Error::Unsupported(_))));
        assert!(matches!(partition_grid(&m, (-1.0, 1.0), (-1.0, 1.0), 3), Err(Error::Unsupported(_))));
    }

    #[test]
    fn dump_header_only_and_deterministic() {
        let m = empty_model(2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        sample_dump(&m, 0, 1, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "x0,x1,component\n");
        let (a, ta) = sample_all(&m, 5, 9).unwrap();
        let (b, _) = sample_all(&m, 5, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }
}
