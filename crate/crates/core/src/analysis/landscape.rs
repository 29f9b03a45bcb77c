use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::merge::linear_interpolate;
use crate::nets::{evaluate, ParamVector, Precision};
use crate::parallel;

/// One evaluation along an interpolation path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub alpha: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// `n` uniform points from `start` to `end`, both included.
pub fn alpha_grid(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    end
                } else {
                    start + (end - start) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Evaluates `model(α)` for every α of the grid on `data`.
pub fn alpha_sweep_with<F>(grid: &[f64], data: &Dataset, precision: Precision, model: F) -> Result<Vec<CurvePoint>>
where
    F: Fn(f64) -> Result<ParamVector> + Sync,
{
    if grid.len() < 3 {
        return Err(Error::Config(format!("α grid needs at least 3 points, got {}", grid.len())));
    }
    parallel::par_map(grid, |&alpha| {
        let m = evaluate(&model(alpha)?, data, precision)?;
        Ok(CurvePoint {
            alpha,
            loss: m.loss,
            accuracy: m.accuracy,
        })
    })
    .into_iter()
    .collect()
}

/// Linear interpolation sweep between two models.
pub fn alpha_sweep(a: &ParamVector, b: &ParamVector, grid: &[f64], data: &Dataset, precision: Precision) -> Result<Vec<CurvePoint>> {
    a.ensure_compatible(b)?;
    alpha_sweep_with(grid, data, precision, |alpha| linear_interpolate(a, b, alpha))
}

/// Extents and resolution of a loss-plane grid, in plane coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneGrid {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub resolution: usize,
}

/// Losses on the plane through `θ_base`, `θ_A` and `θ_B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPlane {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major, `losses[iy * xs.len() + ix]`.
    pub losses: Vec<f64>,
    /// Plane coordinates of base, A and B.
    pub anchors: [(f64, f64); 3],
    base: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl LossPlane {
    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Model at plane coordinates `(x, y)`; statistics are taken from `like`.
    pub fn model_at(&self, like: &ParamVector, x: f64, y: f64) -> Result<ParamVector> {
        let values = self
            .base
            .iter()
            .zip(self.u.iter().zip(&self.v))
            .map(|(b, (u, v))| (b + x * u + y * v) as f32)
            .collect();
        like.with_values(values)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt plane `θ_base + x·u + y·v` with `u` along `θ_A − θ_base`.
///
/// Grid models use the running statistics of `θ_base`. With `grid == None`
/// the extents cover the three anchors with a 25% margin.
pub fn loss_plane(
    base: &ParamVector,
    a: &ParamVector,
    b: &ParamVector,
    grid: Option<PlaneGrid>,
    resolution: usize,
    data: &Dataset,
    precision: Precision,
) -> Result<LossPlane> {
    base.ensure_compatible(a)?;
    base.ensure_compatible(b)?;
    if resolution < 2 {
        return Err(Error::Config("plane resolution must be at least 2".into()));
    }
    let theta0 = base.values_as::<f64>();
    let da: Vec<f64> = a.values_as::<f64>().iter().zip(&theta0).map(|(x, y)| x - y).collect();
    let db: Vec<f64> = b.values_as::<f64>().iter().zip(&theta0).map(|(x, y)| x - y).collect();
    let na = dot(&da, &da).sqrt();
    if na == 0.0 {
        return Err(Error::Config("θ_A coincides with the base model".into()));
    }
    let u: Vec<f64> = da.iter().map(|x| x / na).collect();
    let proj = dot(&db, &u);
    let w: Vec<f64> = db.iter().zip(&u).map(|(d, u)| d - proj * u).collect();
    let nw = dot(&w, &w).sqrt();
    if nw < 1e-9 * dot(&db, &db).sqrt() || nw == 0.0 {
        return Err(Error::Config("θ_A − θ_base and θ_B − θ_base are parallel".into()));
    }
    let v: Vec<f64> = w.iter().map(|x| x / nw).collect();
    let anchors = [(0.0, 0.0), (na, 0.0), (proj, nw)];
    let grid = grid.unwrap_or_else(|| {
        let (xlo, xhi) = (0.0f64.min(proj), na.max(proj));
        let (mx, my) = (0.25 * (xhi - xlo), 0.25 * nw);
        PlaneGrid {
            x: (xlo - mx, xhi + mx),
            y: (-my, nw + my),
            resolution,
        }
    });
    let xs = alpha_grid(grid.x.0, grid.x.1, grid.resolution);
    let ys = alpha_grid(grid.y.0, grid.y.1, grid.resolution);
    let mut plane = LossPlane {
        xs,
        ys,
        losses: Vec::new(),
        anchors,
        base: theta0,
        u,
        v,
    };
    let cells: Vec<(f64, f64)> = plane.ys.iter().flat_map(|&y| plane.xs.iter().map(move |&x| (x, y))).collect();
    let losses = parallel::par_map(&cells, |&(x, y)| -> Result<f64> {
        Ok(evaluate(&plane.model_at(base, x, y)?, data, precision)?.loss)
    });
    plane.losses = losses.into_iter().collect::<Result<_>>()?;
    Ok(plane)
}
