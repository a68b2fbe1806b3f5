//! Convolution matrices `C_i(A)` and the interpolated filter `sum_i lambda_i C_i(A)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{HcdcError, Result};
use crate::linalg::{power_iteration, Mat};

pub const POWER_TOL: f64 = 1e-9;
pub const POWER_MAX_ITER: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Filter {
    Identity,
    Adjacency,
    GcnNorm,
    /// `L^k` of the normalized Laplacian.
    LaplacianPower(u32),
    /// The `s`-th Chebyshev basis matrix (1-based, `C^(1) = I`).
    ChebBasis(u32),
    /// `P^k`, a cyclic shift by `k` positions.
    CyclicShift(i64),
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Filter::Identity => write!(f, "identity"),
            Filter::Adjacency => write!(f, "adj"),
            Filter::GcnNorm => write!(f, "gcn"),
            Filter::LaplacianPower(k) => write!(f, "lap:{k}"),
            Filter::ChebBasis(s) => write!(f, "cheb:{s}"),
            Filter::CyclicShift(k) => write!(f, "shift:{k}"),
        }
    }
}

impl FromStr for Filter {
    type Err = HcdcError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || HcdcError::InvalidArgument(format!("unknown filter descriptor `{s}`"));
        match s {
            "identity" => return Ok(Filter::Identity),
            "adj" => return Ok(Filter::Adjacency),
            "gcn" => return Ok(Filter::GcnNorm),
            _ => {}
        }
        let (head, arg) = s.split_once(':').ok_or_else(bad)?;
        match head {
            "lap" => Ok(Filter::LaplacianPower(arg.parse().map_err(|_| bad())?)),
            "cheb" => {
                let order: u32 = arg.parse().map_err(|_| bad())?;
                if order == 0 {
                    return Err(HcdcError::InvalidArgument(
                        "Chebyshev basis index starts at 1".into(),
                    ));
                }
                Ok(Filter::ChebBasis(order))
            }
            "shift" => Ok(Filter::CyclicShift(arg.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Filter {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Filter {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMax {
    #[default]
    Estimate,
    /// Use the large-graph approximation `lambda_max = 2`.
    Two,
}

/// Ordered, duplicate-free list of filters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterFamily {
    pub members: Vec<Filter>,
    #[serde(default)]
    pub lambda_max: LambdaMax,
}

impl FilterFamily {
    pub fn new(members: Vec<Filter>) -> Result<Self> {
        let fam = FilterFamily {
            members,
            lambda_max: LambdaMax::Estimate,
        };
        fam.validate()?;
        Ok(fam)
    }

    pub fn parse(descriptors: &[&str]) -> Result<Self> {
        let members = descriptors
            .iter()
            .map(|d| d.parse())
            .collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }

    pub fn p(&self) -> usize {
        self.members.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(HcdcError::InvalidArgument("filter family is empty".into()));
        }
        for (i, a) in self.members.iter().enumerate() {
            if self.members[..i].contains(a) {
                return Err(HcdcError::InvalidArgument(format!(
                    "duplicate filter `{a}` in family"
                )));
            }
        }
        Ok(())
    }

    /// Member matrices `C_i(A)` in family order.
    pub fn build(&self, adjacency: &Mat) -> Result<Vec<Mat>> {
        self.validate()?;
        let n = adjacency.nrows();
        let needs_lap = self
            .members
            .iter()
            .any(|f| matches!(f, Filter::LaplacianPower(_) | Filter::ChebBasis(_)));
        let lap = needs_lap.then(|| normalized_laplacian(adjacency));
        let max_cheb = self
            .members
            .iter()
            .filter_map(|f| match f {
                Filter::ChebBasis(s) => Some(*s as usize),
                _ => None,
            })
            .max();
        let cheb = match max_cheb {
            Some(s) => Some(cheb_from_laplacian(lap.as_ref().unwrap(), s, self.lambda_max)?),
            None => None,
        };
        self.members
            .iter()
            .map(|f| {
                Ok(match f {
                    Filter::Identity => Mat::identity(n, n),
                    Filter::Adjacency => adjacency.clone(),
                    Filter::GcnNorm => gcn_norm(adjacency),
                    Filter::LaplacianPower(k) => matrix_power(lap.as_ref().unwrap(), *k),
                    Filter::ChebBasis(s) => cheb.as_ref().unwrap()[*s as usize - 1].clone(),
                    Filter::CyclicShift(k) => cyclic_shift(n, *k)?,
                })
            })
            .collect()
    }
}

fn matrix_power(m: &Mat, k: u32) -> Mat {
    let n = m.nrows();
    let mut out = Mat::identity(n, n);
    for _ in 0..k {
        out = &out * m;
    }
    out
}

fn inv_sqrt_degrees(a: &Mat) -> Vec<f64> {
    (0..a.nrows())
        .map(|i| {
            let deg: f64 = a.row(i).iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect()
}

/// `D~^{-1/2} (A + I) D~^{-1/2}` with `D~` the degrees of `A + I`.
pub fn gcn_norm(a: &Mat) -> Mat {
    let n = a.nrows();
    let tilde = a + Mat::identity(n, n);
    let deg: Vec<f64> = (0..n).map(|i| tilde.row(i).iter().sum()).collect();
    Mat::from_fn(n, n, |i, j| tilde[(i, j)] / (deg[i] * deg[j]).sqrt())
}

/// `I - D^{-1/2} A D^{-1/2}`; isolated nodes get `D^{-1/2} = 0`.
pub fn normalized_laplacian(a: &Mat) -> Mat {
    let n = a.nrows();
    let s = inv_sqrt_degrees(a);
    Mat::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - s[i] * a[(i, j)] * s[j]
    })
}

/// Largest eigenvalue of the normalized Laplacian by power iteration.
pub fn laplacian_lambda_max(lap: &Mat) -> Result<f64> {
    let n = lap.nrows();
    power_iteration(|v| lap * v, n, 1, POWER_TOL, POWER_MAX_ITER)
}

fn cheb_from_laplacian(lap: &Mat, s: usize, mode: LambdaMax) -> Result<Vec<Mat>> {
    let n = lap.nrows();
    let mut out = vec![Mat::identity(n, n)];
    if s == 1 {
        return Ok(out);
    }
    let lmax = match mode {
        LambdaMax::Two => 2.0,
        LambdaMax::Estimate => laplacian_lambda_max(lap)?,
    };
    if !(lmax > 0.0) {
        return Err(HcdcError::InvalidArgument(
            "graph Laplacian has no positive eigenvalue (edgeless graph); use lambda_max = 2"
                .into(),
        ));
    }
    let c2 = lap * (2.0 / lmax) - Mat::identity(n, n);
    out.push(c2.clone());
    while out.len() < s {
        let k = out.len();
        let next = (&c2 * &out[k - 1]) * 2.0 - &out[k - 2];
        out.push(next);
    }
    Ok(out)
}

/// First `s` Chebyshev basis matrices `C^(1) .. C^(s)`.
pub fn cheb_basis(a: &Mat, s: usize, mode: LambdaMax) -> Result<Vec<Mat>> {
    if s == 0 {
        return Err(HcdcError::InvalidArgument("Chebyshev order must be >= 1".into()));
    }
    cheb_from_laplacian(&normalized_laplacian(a), s, mode)
}

/// `P^k` where `P e_i = e_{(i+1) mod n}`.
pub fn cyclic_shift(n: usize, k: i64) -> Result<Mat> {
    if k.unsigned_abs() as usize >= n.max(1) {
        return Err(HcdcError::InvalidArgument(format!(
            "shift {k} out of range for n = {n}"
        )));
    }
    let k = k.rem_euclid(n as i64) as usize;
    Ok(Mat::from_fn(n, n, |i, j| if i == (j + k) % n { 1.0 } else { 0.0 }))
}

/// `sum_i lambda_i mats[i]`.
pub fn combine(mats: &[Mat], lambda: &[f64]) -> Result<Mat> {
    if mats.len() != lambda.len() {
        return Err(HcdcError::shape(
            "interpolate",
            format!("{} weights", mats.len()),
            format!("{} weights", lambda.len()),
        ));
    }
    let (r, c) = mats.first().map_or((0, 0), |m| m.shape());
    let mut out = Mat::zeros(r, c);
    for (m, l) in mats.iter().zip(lambda) {
        out += m * *l;
    }
    Ok(out)
}

/// `C(A; lambda) = sum_i lambda_i C_i(A)`.
pub fn interpolate(family: &FilterFamily, a: &Mat, lambda: &[f64]) -> Result<Mat> {
    if lambda.len() != family.p() {
        return Err(HcdcError::shape(
            "interpolate",
            format!("{} weights", family.p()),
            format!("{} weights", lambda.len()),
        ));
    }
    combine(&family.build(a)?, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::cycle_adjacency;
    use crate::linalg::{gaussian, seeded_rng, sym_eig_range};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn edge() -> Mat {
        Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
    }

    fn random_graph(n: usize, p: f64, seed: u64) -> Mat {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        let mut a = Mat::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    a[(i, j)] = 1.0;
                    a[(j, i)] = 1.0;
                }
            }
        }
        a
    }

    #[test]
    fn gcn_norm_examples() {
        assert_eq!(gcn_norm(&edge()), Mat::from_element(2, 2, 0.5));
        assert_eq!(gcn_norm(&Mat::zeros(2, 2)), Mat::identity(2, 2));
    }

    #[test]
    fn gcn_norm_spectral_radius_at_most_one() {
        let c = gcn_norm(&random_graph(16, 0.3, 4));
        let (lo, hi) = sym_eig_range(&c);
        assert!(hi <= 1.0 + 1e-12 && lo >= -1.0 - 1e-12);
        let rho = power_iteration(|v| &c * &c * v, 16, 1, 1e-12, 100_000).unwrap().sqrt();
        assert!(rho <= 1.0 + 1e-12, "rho = {rho}");
    }

    #[test]
    fn cheb_base_case_and_edge_graph() {
        let a = random_graph(5, 0.5, 1);
        assert_eq!(cheb_basis(&a, 1, LambdaMax::Estimate).unwrap(), vec![Mat::identity(5, 5)]);
        let basis = cheb_basis(&edge(), 2, LambdaMax::Two).unwrap();
        assert_eq!(basis[1], Mat::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]));
    }

    #[test]
    fn cheb_matches_polynomial_on_eigenbasis() {
        let a = cycle_adjacency(8);
        let basis = cheb_basis(&a, 4, LambdaMax::Estimate).unwrap();
        let shifted = normalized_laplacian(&a) - Mat::identity(8, 8);
        let eig = shifted.clone().symmetric_eigen();
        for (s, c) in basis.iter().enumerate() {
            // T_s(x) = cos(s * acos(x)) on [-1, 1].
            let vals = eig
                .eigenvalues
                .map(|x| (s as f64 * x.clamp(-1.0, 1.0).acos()).cos());
            let poly = &eig.eigenvectors * Mat::from_diagonal(&vals) * eig.eigenvectors.transpose();
            // lambda_max carries the 1e-9 power-iteration tolerance.
            assert_abs_diff_eq!(c, &poly, epsilon = 1e-8);
        }
    }

    #[test]
    fn cheb_members_commute() {
        for seed in 0..10 {
            let basis = cheb_basis(&random_graph(12, 0.4, seed), 4, LambdaMax::Estimate).unwrap();
            for x in &basis {
                for y in &basis {
                    assert!((x * y - y * x).amax() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn cyclic_shift_examples() {
        assert_eq!(cyclic_shift(3, 0).unwrap(), Mat::identity(3, 3));
        let p = cyclic_shift(3, 1).unwrap();
        for i in 0..3 {
            let mut e = Mat::zeros(3, 1);
            e[i] = 1.0;
            let out = &p * e;
            assert_eq!(out[(i + 1) % 3], 1.0);
        }
        let p2 = cyclic_shift(4, 2).unwrap();
        assert_eq!(&p2 * &p2, cyclic_shift(4, 0).unwrap());
        assert_eq!(&p * cyclic_shift(3, -1).unwrap(), Mat::identity(3, 3));
        assert!(cyclic_shift(3, 3).is_err());
    }

    #[test]
    fn interpolate_examples() {
        let fam = FilterFamily::parse(&["identity", "gcn"]).unwrap();
        let c = interpolate(&fam, &edge(), &[0.3, 0.7]).unwrap();
        assert_abs_diff_eq!(c, Mat::from_row_slice(2, 2, &[0.65, 0.35, 0.35, 0.65]), epsilon = 1e-15);
        assert_eq!(interpolate(&fam, &edge(), &[0.0, 1.0]).unwrap(), gcn_norm(&edge()));
        assert_eq!(interpolate(&fam, &edge(), &[0.0, 0.0]).unwrap(), Mat::zeros(2, 2));
        assert!(interpolate(&fam, &edge(), &[1.0]).is_err());
    }

    #[test]
    fn descriptors_round_trip() {
        for d in ["identity", "adj", "gcn", "lap:2", "cheb:3", "shift:-1"] {
            let f: Filter = d.parse().unwrap();
            assert_eq!(f.to_string(), d);
            let json = serde_json::to_string(&f).unwrap();
            assert_eq!(json, format!("\"{d}\""));
        }
        assert!("cheb:0".parse::<Filter>().is_err());
        assert!("conv".parse::<Filter>().is_err());
        assert!(FilterFamily::parse(&["gcn", "gcn"]).is_err());
    }

    proptest! {
        #[test]
        fn interpolate_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let fam = FilterFamily::parse(&["identity", "adj", "gcn", "lap:1"]).unwrap();
            let adj = random_graph(6, 0.5, seed);
            let mut rng = seeded_rng(seed);
            let l1 = gaussian(&mut rng, 4, 1, 1.0);
            let l2 = gaussian(&mut rng, 4, 1, 1.0);
            let mix: Vec<f64> = (0..4).map(|i| a * l1[i] + b * l2[i]).collect();
            let lhs = interpolate(&fam, &adj, &mix).unwrap();
            let rhs = interpolate(&fam, &adj, l1.as_slice()).unwrap() * a
                + interpolate(&fam, &adj, l2.as_slice()).unwrap() * b;
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }

        #[test]
        fn members_are_square_and_finite(seed in 0u64..1000) {
            let fam = FilterFamily::parse(&["identity", "adj", "gcn", "lap:2", "cheb:3", "shift:1"]).unwrap();
            let adj = random_graph(7, 0.4, seed);
            for m in fam.build(&adj).unwrap() {
                prop_assert_eq!(m.shape(), (7, 7));
                prop_assert!(m.iter().all(|x| x.is_finite()));
            }
        }
    }
}
