//! Synthetic non-convex landscapes and exhaustive grid oracles.

use std::f64::consts::PI;

use rayon::prelude::*;
use thiserror::Error;

use crate::objective::{Evaluation, Objective, ObjectiveError};
use crate::space::{ConfigSpace, Configuration, ParamKind, ParamSpec, ParamValue, Scale, SpaceError};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error(transparent)]
    Domain(#[from] SpaceError),
    #[error("grid CSV: {0}")]
    GridCsv(String),
    #[error("grid oracle supports at most 3 dimensions, got {0}")]
    TooManyDimensions(usize),
    #[error("grid resolution must be >= 2, got {0}")]
    Resolution(usize),
    #[error("landscape export needs a 2-D objective, got {0} dimensions")]
    NotTwoDimensional(usize),
}

/// Bilinear interpolation over a complete rectangular grid of nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSurface {
    x1: Vec<f64>,
    x2: Vec<f64>,
    /// `values[i * x2.len() + j]` is the node at `(x1[i], x2[j])`.
    values: Vec<f64>,
}

impl GridSurface {
    /// Parse `x1,x2,value` rows (header required, any row order).
    pub fn from_csv(text: &str) -> Result<Self, SyntheticError> {
        let bad = |m: String| SyntheticError::GridCsv(m);
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["x1", "x2", "value"] {
            return Err(bad(format!(
                "expected header x1,x2,value, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let parse = |k: usize| -> Result<f64, SyntheticError> {
                let v: f64 = rec
                    .get(k)
                    .ok_or_else(|| bad(format!("line {}: missing column {}", i + 2, k + 1)))?
                    .parse()
                    .map_err(|_| bad(format!("line {}: column {} is not a number", i + 2, k + 1)))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(bad(format!("line {}: column {} is not finite", i + 2, k + 1)))
                }
            };
            rows.push((parse(0)?, parse(1)?, parse(2)?));
        }
        let axis = |pick: fn(&(f64, f64, f64)) -> f64| {
            let mut v: Vec<f64> = rows.iter().map(pick).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let x1 = axis(|r| r.0);
        let x2 = axis(|r| r.1);
        if x1.len() < 2 || x2.len() < 2 {
            return Err(bad("need at least 2 distinct values per axis".into()));
        }
        if rows.len() != x1.len() * x2.len() {
            return Err(bad(format!(
                "{} rows do not form a complete {}x{} grid",
                rows.len(),
                x1.len(),
                x2.len()
            )));
        }
        let mut values = vec![f64::NAN; rows.len()];
        for (a, b, v) in rows {
            let i = x1.binary_search_by(|p| p.total_cmp(&a)).expect("value from axis");
            let j = x2.binary_search_by(|p| p.total_cmp(&b)).expect("value from axis");
            let slot = &mut values[i * x2.len() + j];
            if !slot.is_nan() {
                return Err(bad(format!("duplicate node ({a}, {b})")));
            }
            *slot = v;
        }
        Ok(Self { x1, x2, values })
    }

    fn locate(axis: &[f64], v: f64) -> (usize, f64) {
        let i = axis.partition_point(|&p| p <= v).saturating_sub(1).min(axis.len() - 2);
        (i, (v - axis[i]) / (axis[i + 1] - axis[i]))
    }

    pub fn eval(&self, a: f64, b: f64) -> f64 {
        let (i, t) = Self::locate(&self.x1, a);
        let (j, u) = Self::locate(&self.x2, b);
        let n2 = self.x2.len();
        let v = |ii: usize, jj: usize| self.values[ii * n2 + jj];
        v(i, j) * (1.0 - t) * (1.0 - u)
            + v(i + 1, j) * t * (1.0 - u)
            + v(i, j + 1) * (1.0 - t) * u
            + v(i + 1, j + 1) * t * u
    }

    pub fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        (
            (self.x1[0], *self.x1.last().unwrap()),
            (self.x2[0], *self.x2.last().unwrap()),
        )
    }

    /// Max adjacent-node difference divided by the smallest node spacing.
    pub fn lipschitz_bound(&self) -> f64 {
        let n2 = self.x2.len();
        let mut worst: f64 = 0.0;
        for i in 0..self.x1.len() {
            for j in 0..n2 {
                let here = self.values[i * n2 + j];
                if i + 1 < self.x1.len() {
                    let d = (self.values[(i + 1) * n2 + j] - here).abs() / (self.x1[i + 1] - self.x1[i]);
                    worst = worst.max(d);
                }
                if j + 1 < n2 {
                    let d = (self.values[i * n2 + j + 1] - here).abs() / (self.x2[j + 1] - self.x2[j]);
                    worst = worst.max(d);
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Landscape {
    Branin,
    StyblinskiTang2d,
    InterpolatedGrid(GridSurface),
}

#[derive(Debug, Clone)]
pub struct SyntheticObjective {
    name: String,
    space: ConfigSpace,
    landscape: Landscape,
}

pub fn branin(x1: f64, x2: f64) -> f64 {
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

pub fn styblinski_tang(xs: &[f64]) -> f64 {
    0.5 * xs.iter().map(|x| x.powi(4) - 16.0 * x * x + 5.0 * x).sum::<f64>()
}

fn two_d_space(a: (f64, f64), b: (f64, f64)) -> ConfigSpace {
    ConfigSpace::new(vec![
        ParamSpec::continuous("x1", a.0, a.1, Scale::Linear).expect("valid bounds"),
        ParamSpec::continuous("x2", b.0, b.1, Scale::Linear).expect("valid bounds"),
    ])
    .expect("distinct names")
}

impl SyntheticObjective {
    pub fn branin() -> Self {
        Self {
            name: "branin".into(),
            space: two_d_space((-5.0, 10.0), (0.0, 15.0)),
            landscape: Landscape::Branin,
        }
    }

    pub fn styblinski_tang_2d() -> Self {
        Self {
            name: "styblinski_tang_2d".into(),
            space: two_d_space((-5.0, 5.0), (-5.0, 5.0)),
            landscape: Landscape::StyblinskiTang2d,
        }
    }

    pub fn interpolated_grid(surface: GridSurface) -> Self {
        let (a, b) = surface.bounds();
        Self {
            name: "interpolated_grid".into(),
            space: two_d_space(a, b),
            landscape: Landscape::InterpolatedGrid(surface),
        }
    }

    pub fn landscape(&self) -> &Landscape {
        &self.landscape
    }

    /// Evaluate at a configuration of this objective's space.
    pub fn eval(&self, config: &Configuration) -> Result<f64, SyntheticError> {
        self.space.validate(config)?;
        let xs: Vec<f64> = config
            .values
            .iter()
            .map(|v| match v {
                ParamValue::Real(x) => *x,
                ParamValue::Int(i) => *i as f64,
                ParamValue::Choice(i) => *i as f64,
            })
            .collect();
        Ok(self.eval_point(&xs))
    }

    fn eval_point(&self, xs: &[f64]) -> f64 {
        match &self.landscape {
            Landscape::Branin => branin(xs[0], xs[1]),
            Landscape::StyblinskiTang2d => styblinski_tang(xs),
            Landscape::InterpolatedGrid(g) => g.eval(xs[0], xs[1]),
        }
    }
}

impl Objective for SyntheticObjective {
    fn name(&self) -> &str {
        &self.name
    }

    fn space(&self) -> &ConfigSpace {
        &self.space
    }

    fn evaluate(&self, config: &Configuration, _seed: u64) -> Result<Evaluation, ObjectiveError> {
        self.eval(config)
            .map(Evaluation::score)
            .map_err(|e| ObjectiveError(e.to_string()))
    }
}

/// Exhaustive evaluation over a bounds-inclusive grid that is uniform on
/// each parameter's encoded scale. Categoricals enumerate their choices.
#[derive(Debug, Clone)]
pub struct GridOracle {
    pub resolution: usize,
    pub axes: Vec<Vec<ParamValue>>,
    /// Row-major over `axes`, first parameter slowest.
    pub values: Vec<f64>,
    pub best_index: usize,
    pub best_value: f64,
    pub best_config: Configuration,
}

impl GridOracle {
    pub fn config_at(&self, mut index: usize) -> Configuration {
        let mut values = vec![ParamValue::Int(0); self.axes.len()];
        for (d, axis) in self.axes.iter().enumerate().rev() {
            values[d] = axis[index % axis.len()];
            index /= axis.len();
        }
        Configuration::new(values)
    }
}

pub fn grid_axes(space: &ConfigSpace, resolution: usize) -> Vec<Vec<ParamValue>> {
    space
        .params()
        .iter()
        .map(|p| match &p.kind {
            ParamKind::Categorical { choices } => (0..choices.len()).map(ParamValue::Choice).collect(),
            ParamKind::Integer { .. } => {
                let mut axis: Vec<ParamValue> = (0..resolution)
                    .map(|i| p.value_at_unit(i as f64 / (resolution - 1) as f64))
                    .collect();
                axis.dedup();
                axis
            }
            ParamKind::Continuous { .. } => (0..resolution)
                .map(|i| p.value_at_unit(i as f64 / (resolution - 1) as f64))
                .collect(),
        })
        .collect()
}

pub fn grid_oracle(obj: &SyntheticObjective, resolution: usize) -> Result<GridOracle, SyntheticError> {
    let dims = obj.space.len();
    if dims > 3 {
        return Err(SyntheticError::TooManyDimensions(dims));
    }
    if resolution < 2 {
        return Err(SyntheticError::Resolution(resolution));
    }
    let axes = grid_axes(&obj.space, resolution);
    let total: usize = axes.iter().map(Vec::len).product();
    let mut oracle = GridOracle {
        resolution,
        axes,
        values: Vec::new(),
        best_index: 0,
        best_value: f64::INFINITY,
        best_config: Configuration::new(Vec::new()),
    };
    oracle.values = (0..total)
        .into_par_iter()
        .map(|i| obj.eval(&oracle.config_at(i)).expect("grid point lies in the space"))
        .collect();
    // first minimum in row-major order
    for (i, &v) in oracle.values.iter().enumerate() {
        if v < oracle.best_value {
            oracle.best_value = v;
            oracle.best_index = i;
        }
    }
    oracle.best_config = oracle.config_at(oracle.best_index);
    Ok(oracle)
}

/// `x1,x2,value` rows for a 2-D objective, `x1` slowest.
pub fn landscape_csv(obj: &SyntheticObjective, resolution: usize) -> Result<String, SyntheticError> {
    if obj.space.len() != 2 {
        return Err(SyntheticError::NotTwoDimensional(obj.space.len()));
    }
    let oracle = grid_oracle(obj, resolution)?;
    let mut out = String::from("x1,x2,value\n");
    for (i, v) in oracle.values.iter().enumerate() {
        let c = oracle.config_at(i);
        out.push_str(&format!("{},{},{}\n", c.values[0], c.values[1], v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(a: f64, b: f64) -> Configuration {
        Configuration::new(vec![ParamValue::Real(a), ParamValue::Real(b)])
    }

    #[test]
    fn branin_minimum_value() {
        let f = SyntheticObjective::branin();
        assert!((f.eval(&at(PI, 2.275)).unwrap() - 0.397887).abs() < 1e-6);
        assert!((f.eval(&at(-PI, 12.275)).unwrap() - 0.397887).abs() < 1e-6);
    }

    #[test]
    fn styblinski_tang_minimum_value() {
        let f = SyntheticObjective::styblinski_tang_2d();
        let v = f.eval(&at(-2.903534, -2.903534)).unwrap();
        assert!((v + 78.332).abs() < 1e-3, "{v}");
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let f = SyntheticObjective::branin();
        assert!(f.eval(&at(11.0, 0.0)).is_err());
        assert!(f.evaluate(&at(0.0, -1.0), 0).is_err());
    }

    #[test]
    fn corner_grid() {
        let f = SyntheticObjective::branin();
        let oracle = grid_oracle(&f, 2).unwrap();
        assert_eq!(oracle.values.len(), 4);
        let corners = [(-5.0, 0.0), (-5.0, 15.0), (10.0, 0.0), (10.0, 15.0)];
        let best = corners.iter().map(|&(a, b)| branin(a, b)).fold(f64::INFINITY, f64::min);
        assert_eq!(oracle.best_value, best);
        for (i, &(a, b)) in corners.iter().enumerate() {
            assert_eq!(oracle.values[i], branin(a, b));
        }
    }

    #[test]
    fn nested_grids_only_improve() {
        let f = SyntheticObjective::branin();
        let coarse = grid_oracle(&f, 11).unwrap().best_value;
        let mid = grid_oracle(&f, 101).unwrap().best_value;
        let fine = grid_oracle(&f, 1001).unwrap().best_value;
        assert!(mid <= coarse && fine <= mid, "{coarse} {mid} {fine}");
    }

    #[test]
    fn oracle_minimum_is_consistent_with_its_table() {
        let f = SyntheticObjective::styblinski_tang_2d();
        let oracle = grid_oracle(&f, 41).unwrap();
        assert!(oracle.values.iter().all(|&v| oracle.best_value <= v));
        assert_eq!(f.eval(&oracle.best_config).unwrap(), oracle.best_value);
    }

    #[test]
    fn oracle_dimension_guard() {
        let space = ConfigSpace::new(
            (0..4)
                .map(|i| ParamSpec::continuous(&format!("p{i}"), 0.0, 1.0, Scale::Linear).unwrap())
                .collect(),
        )
        .unwrap();
        let obj = SyntheticObjective {
            name: "four".into(),
            space,
            landscape: Landscape::Branin,
        };
        assert!(matches!(
            grid_oracle(&obj, 3),
            Err(SyntheticError::TooManyDimensions(4))
        ));
    }

    const SMALL_GRID: &str = "x1,x2,value\n0,0,1\n0,1,2\n1,0,3\n1,1,5\n2,0,0\n2,1,-1\n";

    #[test]
    fn interpolation_hits_nodes_exactly() {
        let g = GridSurface::from_csv(SMALL_GRID).unwrap();
        let obj = SyntheticObjective::interpolated_grid(g);
        for (a, b, v) in [
            (0.0, 0.0, 1.0),
            (0.0, 1.0, 2.0),
            (1.0, 0.0, 3.0),
            (1.0, 1.0, 5.0),
            (2.0, 1.0, -1.0),
        ] {
            assert_eq!(obj.eval(&at(a, b)).unwrap(), v);
        }
        // cell centre averages its four corners
        assert!((obj.eval(&at(0.5, 0.5)).unwrap() - 2.75).abs() < 1e-15);
    }

    #[test]
    fn interpolation_respects_lipschitz_bound() {
        let g = GridSurface::from_csv(SMALL_GRID).unwrap();
        let lip = g.lipschitz_bound();
        let obj = SyntheticObjective::interpolated_grid(g);
        let delta = 0.01;
        for i in 0..190 {
            for j in 0..99 {
                let (a, b) = (i as f64 * 0.01, j as f64 * 0.01);
                let here = obj.eval(&at(a, b)).unwrap();
                let right = obj.eval(&at(a + delta, b)).unwrap();
                let up = obj.eval(&at(a, b + delta)).unwrap();
                assert!((here - right).abs() <= lip * delta + 1e-12);
                assert!((here - up).abs() <= lip * delta + 1e-12);
            }
        }
    }

    #[test]
    fn grid_csv_errors() {
        assert!(GridSurface::from_csv("a,b,c\n0,0,1\n").is_err());
        assert!(GridSurface::from_csv("x1,x2,value\n0,0,1\n0,1,2\n1,0,3\n").is_err());
        assert!(GridSurface::from_csv("x1,x2,value\n0,0,1\n0,1,x\n1,0,3\n1,1,4\n").is_err());
    }

    #[test]
    fn landscape_export_row_count() {
        let text = landscape_csv(&SyntheticObjective::branin(), 5).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x1,x2,value");
        assert_eq!(lines.len(), 26);
        assert_eq!(lines[1], format!("-5,0,{}", branin(-5.0, 0.0)));
        // exported landscape reloads as an interpolated grid reproducing the nodes
        let g = GridSurface::from_csv(&text).unwrap();
        assert_eq!(g.eval(10.0, 15.0), branin(10.0, 15.0));
    }

    #[test]
    fn evaluation_is_pure() {
        let f = SyntheticObjective::branin();
        let c = at(1.2345, 6.789);
        assert_eq!(f.eval(&c).unwrap().to_bits(), f.eval(&c).unwrap().to_bits());
    }
}
