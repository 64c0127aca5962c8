//! P1 finite element operators for `−Δu + u` with boundary flux terms.

use std::ops::{Deref, DerefMut};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condensed::{BoundaryCondensation, LinearSolveError};
use crate::mesh::MeshGeometry;
use crate::nonlinearity::{EvalError, PowerSum};
use crate::sparse::CsrMatrix;

/// Two-point Gauss rule on an edge, as barycentric weights of the start
/// vertex. Both points carry half the edge length.
const GAUSS_EDGE: [f64; 2] = [0.788_675_134_594_812_9, 0.211_324_865_405_187_1];

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("triangle {triangle} is degenerate (area {area:e})")]
    DegenerateTriangle { triangle: usize, area: f64 },
    #[error("vector has length {got}, mesh has {expected} vertices")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Linear(#[from] LinearSolveError),
}

/// Nodal values of a P1 function, one per mesh vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DofVector(Vec<f64>);

impl DofVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn sup_norm(&self) -> f64 {
        crate::sparse::sup_norm(&self.0)
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl From<Vec<f64>> for DofVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for DofVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DofVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    InteriorH1,
    BoundaryMass,
    BoundaryWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteOperator {
    pub kind: OperatorKind,
    pub matrix: CsrMatrix,
}

impl DiscreteOperator {
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(x)
    }
}

fn check_len(mesh: &MeshGeometry, u: &[f64]) -> Result<(), AssemblyError> {
    if u.len() != mesh.num_vertices() {
        return Err(AssemblyError::LengthMismatch { expected: mesh.num_vertices(), got: u.len() });
    }
    Ok(())
}

/// Stiffness plus mass matrix `∫ ∇ψᵢ·∇ψⱼ + ψᵢψⱼ`.
pub fn assemble_interior_form(mesh: &MeshGeometry) -> Result<DiscreteOperator, AssemblyError> {
    let v = mesh.vertices();
    let tris = mesh.triangles();
    let mean = mesh.total_area() / tris.len() as f64;
    let mut trip = Vec::with_capacity(9 * tris.len());
    for (t, tri) in tris.iter().enumerate() {
        let area = mesh.signed_area(t);
        if !(area > 1e-14 * mean) {
            return Err(AssemblyError::DegenerateTriangle { triangle: t, area });
        }
        let p = tri.map(|k| v[k]);
        // gradient of the hat function at vertex i is rot90(opposite edge)/(2·area)
        let g: [[f64; 2]; 3] = std::array::from_fn(|i| {
            let a = p[(i + 1) % 3];
            let b = p[(i + 2) % 3];
            [(a[1] - b[1]) / (2.0 * area), (b[0] - a[0]) / (2.0 * area)]
        });
        for i in 0..3 {
            for j in 0..3 {
                let stiff = area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                let mass = area / 12.0 * if i == j { 2.0 } else { 1.0 };
                trip.push((tri[i], tri[j], stiff + mass));
            }
        }
    }
    Ok(DiscreteOperator {
        kind: OperatorKind::InteriorH1,
        matrix: CsrMatrix::from_triplets(mesh.num_vertices(), &trip),
    })
}

/// Visits every boundary Gauss point: `(edge, length, weights of the two
/// edge vertices)`.
fn for_each_gauss_point(mesh: &MeshGeometry, mut visit: impl FnMut([usize; 2], f64, [f64; 2])) {
    for &edge in mesh.boundary_edges() {
        let half = 0.5 * mesh.edge_length(edge);
        for &w in &GAUSS_EDGE {
            visit(edge, half, [w, 1.0 - w]);
        }
    }
}

/// Weighted boundary matrix `∫_∂Ω w(u_h) ψᵢψⱼ`, two Gauss points per edge.
fn weighted_triplets(
    mesh: &MeshGeometry,
    weight: impl Fn(f64) -> Result<f64, EvalError>,
    u: Option<&[f64]>,
) -> Result<Vec<(usize, usize, f64)>, EvalError> {
    let mut trip = Vec::with_capacity(8 * mesh.boundary_edges().len());
    let mut err = None;
    for_each_gauss_point(mesh, |[a, b], half, psi| {
        if err.is_some() {
            return;
        }
        let val = u.map_or(0.0, |u| psi[0] * u[a] + psi[1] * u[b]);
        match weight(val) {
            Ok(w) => {
                let idx = [a, b];
                for i in 0..2 {
                    for j in 0..2 {
                        trip.push((idx[i], idx[j], half * w * (psi[i] * psi[j])));
                    }
                }
            }
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(trip),
    }
}

/// Boundary mass matrix `∫_∂Ω ψᵢψⱼ`.
pub fn assemble_boundary_mass(mesh: &MeshGeometry) -> DiscreteOperator {
    let trip = weighted_triplets(mesh, |_| Ok(1.0), None).expect("constant weight");
    DiscreteOperator { kind: OperatorKind::BoundaryMass, matrix: CsrMatrix::from_triplets(mesh.num_vertices(), &trip) }
}

/// `∫_∂Ω w(u_h) ψᵢψⱼ`.
pub fn assemble_boundary_weighted(
    mesh: &MeshGeometry,
    weight: impl Fn(f64) -> Result<f64, EvalError>,
    u: &[f64],
) -> Result<DiscreteOperator, AssemblyError> {
    check_len(mesh, u)?;
    let trip = weighted_triplets(mesh, weight, Some(u))?;
    Ok(DiscreteOperator {
        kind: OperatorKind::BoundaryWeighted,
        matrix: CsrMatrix::from_triplets(mesh.num_vertices(), &trip),
    })
}

/// Load vector `∫_∂Ω g(u_h) ψᵢ`, two Gauss points per edge.
pub fn boundary_load(
    mesh: &MeshGeometry,
    g: impl Fn(f64) -> Result<f64, EvalError>,
    u: &[f64],
) -> Result<DofVector, EvalError> {
    assert_eq!(u.len(), mesh.num_vertices(), "vector length must match the mesh");
    let mut out = vec![0.0; u.len()];
    let mut err = None;
    for_each_gauss_point(mesh, |[a, b], half, psi| {
        if err.is_some() {
            return;
        }
        match g(psi[0] * u[a] + psi[1] * u[b]) {
            Ok(val) => {
                out[a] += half * val * psi[0];
                out[b] += half * val * psi[1];
            }
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(DofVector(out)),
    }
}

/// `A u − λ ∫_∂Ω f(u_h) ψᵢ`.
pub fn residual(
    a: &DiscreteOperator,
    mesh: &MeshGeometry,
    u: &[f64],
    lambda: f64,
    f: &PowerSum,
) -> Result<DofVector, EvalError> {
    let load = boundary_load(mesh, |s| f.eval(s), u)?;
    let au = a.apply(u);
    Ok(DofVector(au.iter().zip(load.iter()).map(|(x, l)| x - lambda * l).collect()))
}

/// `A − λ ∫_∂Ω f′(u_h) ψᵢψⱼ` as a sparse matrix.
pub fn jacobian(
    a: &DiscreteOperator,
    mesh: &MeshGeometry,
    u: &[f64],
    lambda: f64,
    f: &PowerSum,
) -> Result<CsrMatrix, EvalError> {
    let w = weighted_triplets(mesh, |s| f.eval_prime(s), Some(u))?;
    let n = a.dim();
    let mut trip: Vec<(usize, usize, f64)> =
        (0..n).flat_map(|i| a.matrix.row(i).map(move |(j, v)| (i, j, v))).collect();
    trip.extend(w.into_iter().map(|(i, j, v)| (i, j, -lambda * v)));
    Ok(CsrMatrix::from_triplets(n, &trip))
}

/// A mesh with its assembled operators and the condensed direct solver.
#[derive(Debug, Clone)]
pub struct Discretization {
    mesh: MeshGeometry,
    interior_form: DiscreteOperator,
    boundary_mass: DiscreteOperator,
    condensed: BoundaryCondensation,
}

impl Discretization {
    pub fn new(mesh: MeshGeometry) -> Result<Self, AssemblyError> {
        let interior_form = assemble_interior_form(&mesh)?;
        let boundary_mass = assemble_boundary_mass(&mesh);
        let condensed = BoundaryCondensation::new(&interior_form.matrix, mesh.boundary_vertices())?;
        Ok(Self { mesh, interior_form, boundary_mass, condensed })
    }

    pub fn mesh(&self) -> &MeshGeometry {
        &self.mesh
    }

    pub fn interior_form(&self) -> &DiscreteOperator {
        &self.interior_form
    }

    pub fn boundary_mass(&self) -> &DiscreteOperator {
        &self.boundary_mass
    }

    pub fn condensed(&self) -> &BoundaryCondensation {
        &self.condensed
    }

    pub fn num_dofs(&self) -> usize {
        self.mesh.num_vertices()
    }

    /// `A u − ∫_∂Ω h(u_h) ψᵢ` for an arbitrary power sum `h`.
    pub fn residual(&self, u: &[f64], h: &PowerSum) -> Result<Vec<f64>, EvalError> {
        Ok(residual(&self.interior_form, &self.mesh, u, 1.0, h)?.into_inner())
    }

    pub fn load(&self, u: &[f64], h: &PowerSum) -> Result<Vec<f64>, EvalError> {
        Ok(boundary_load(&self.mesh, |s| h.eval(s), u)?.into_inner())
    }

    /// Dense boundary block of `∫_∂Ω h′(u_h) ψᵢψⱼ`, indexed by boundary slot.
    pub fn boundary_jacobian_block(&self, u: &[f64], h: &PowerSum) -> Result<DMatrix<f64>, EvalError> {
        let nb = self.condensed.boundary().len();
        let mut m = DMatrix::zeros(nb, nb);
        for (i, j, v) in weighted_triplets(&self.mesh, |s| h.eval_prime(s), Some(u))? {
            let (bi, bj) = (self.slot(i), self.slot(j));
            m[(bi, bj)] += v;
        }
        Ok(m)
    }

    /// Dense boundary block of the boundary mass matrix.
    pub fn boundary_mass_block(&self) -> DMatrix<f64> {
        let nb = self.condensed.boundary().len();
        let mut m = DMatrix::zeros(nb, nb);
        for (k, &i) in self.condensed.boundary().iter().enumerate() {
            for (j, v) in self.boundary_mass.matrix.row(i) {
                m[(k, self.slot(j))] += v;
            }
        }
        m
    }

    fn slot(&self, dof: usize) -> usize {
        self.condensed.boundary_slot(dof).expect("boundary edge vertex is a boundary dof")
    }

    /// `∫_∂Ω g(u_h) u_h`, by the same quadrature as the load vector.
    pub fn boundary_integral(&self, u: &[f64], g: impl Fn(f64) -> Result<f64, EvalError>) -> Result<f64, EvalError> {
        let load = boundary_load(&self.mesh, g, u)?;
        Ok(crate::sparse::dot(&load, u))
    }

    /// `(∫ |∇u_h|² + u_h²)^{1/2}`.
    pub fn h1_norm(&self, u: &[f64]) -> f64 {
        self.interior_form.matrix.quad_form(u).max(0.0).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_disk_mesh, generate_rectangle_mesh};
    use crate::oracle_radial::{bessel_i0, bessel_i1};
    use proptest::prelude::*;

    fn cubic() -> PowerSum {
        PowerSum::new([
            crate::nonlinearity::PowerTerm { coefficient: 1.0, exponent: 1.0 },
            crate::nonlinearity::PowerTerm { coefficient: -1.0, exponent: 2.0 },
            crate::nonlinearity::PowerTerm { coefficient: 1.0, exponent: 3.0 },
        ])
    }

    fn power(e: f64) -> PowerSum {
        PowerSum::new([crate::nonlinearity::PowerTerm { coefficient: 1.0, exponent: e }])
    }

    #[test]
    fn constant_energy_is_area() {
        let mesh = generate_disk_mesh(1.0, 3).unwrap();
        let a = assemble_interior_form(&mesh).unwrap();
        let one = vec![1.0; mesh.num_vertices()];
        assert!((a.matrix.quad_form(&one) - mesh.total_area()).abs() < 1e-12);
        assert!(a.matrix.is_symmetric());
    }

    #[test]
    fn stiffness_annihilates_linears() {
        let mesh = generate_rectangle_mesh(2.0, 1.0, 6, 4).unwrap();
        let a = assemble_interior_form(&mesh).unwrap();
        let x: Vec<f64> = mesh.vertices().iter().map(|v| 3.0 * v[0] - v[1]).collect();
        // ∫|∇x|² = |(3,-1)|²·area, ∫x² from the mass part
        let mass_part: f64 = {
            let mut m = a.matrix.quad_form(&x);
            m -= 10.0 * mesh.total_area();
            m
        };
        let exact_mass = {
            // ∫_0^2∫_0^1 (3x−y)² dy dx
            let f = |x: f64| 9.0 * x * x - 3.0 * x + 1.0 / 3.0;
            // Simpson is exact for quadratics
            (2.0 / 6.0) * (f(0.0) + 4.0 * f(1.0) + f(2.0))
        };
        // P1 mass matrix integrates the interpolant exactly, which equals x here
        assert!((mass_part - exact_mass).abs() < 1e-12);
    }

    #[test]
    fn energy_of_bessel_interpolant_converges() {
        let exact = 2.0 * std::f64::consts::PI * bessel_i0(1.0).unwrap() * bessel_i1(1.0).unwrap();
        let mut errs = Vec::new();
        for level in 2..=5 {
            let mesh = generate_disk_mesh(1.0, level).unwrap();
            let a = assemble_interior_form(&mesh).unwrap();
            let u: Vec<f64> = mesh.vertices().iter().map(|v| bessel_i0(v[0].hypot(v[1]).min(1.0)).unwrap()).collect();
            errs.push((a.matrix.quad_form(&u) - exact).abs());
        }
        for w in errs.windows(2) {
            assert!(w[1] < 0.6 * w[0], "{errs:?}");
        }
        assert!(errs[3] < 2e-2);
    }

    #[test]
    fn boundary_mass_sums_to_perimeter() {
        let mesh = generate_disk_mesh(1.5, 3).unwrap();
        let b = assemble_boundary_mass(&mesh);
        let total: f64 = b.matrix.row_sums().iter().sum();
        assert!((total - mesh.perimeter()).abs() < 1e-12);
        for v in 0..mesh.num_vertices() {
            if !mesh.is_boundary_vertex(v) {
                assert!(b.matrix.row(v).all(|(_, x)| x == 0.0));
            }
        }
        assert!(b.matrix.is_symmetric());
    }

    #[test]
    fn loads_match_mass_matrix() {
        let mesh = generate_disk_mesh(1.0, 2).unwrap();
        let b = assemble_boundary_mass(&mesh);
        let u: Vec<f64> = mesh.vertices().iter().map(|v| 1.0 + v[0] + 0.5 * v[1]).collect();
        let ones = boundary_load(&mesh, |_| Ok(1.0), &u).unwrap();
        let expect = b.matrix.row_sums();
        for (x, y) in ones.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-14);
        }
        let lin = boundary_load(&mesh, Ok, &u).unwrap();
        for (x, y) in lin.iter().zip(b.apply(&u)) {
            assert!((x - y).abs() < 1e-14);
        }
        // two-point Gauss is exact for the cubic integrand u_h²ψ
        let sq = boundary_load(&mesh, |s| Ok(s * s), &u).unwrap();
        let exact: Vec<f64> = {
            let mut out = vec![0.0; u.len()];
            for &[a, c] in mesh.boundary_edges() {
                let l = mesh.edge_length([a, c]);
                let (ua, uc) = (u[a], u[c]);
                // ∫_0^1 (ua(1−t)+uc t)² (1−t) dt and the mirror
                out[a] += l * (ua * ua / 4.0 + ua * uc / 6.0 + uc * uc / 12.0);
                out[c] += l * (uc * uc / 4.0 + ua * uc / 6.0 + ua * ua / 12.0);
            }
            out
        };
        for (x, y) in sq.iter().zip(&exact) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn pure_power_load_is_homogeneous() {
        let mesh = generate_disk_mesh(1.0, 2).unwrap();
        let u: Vec<f64> = mesh.vertices().iter().map(|v| 0.3 + v[0] * v[0]).collect();
        for &(p, c) in &[(2.0, 3.0), (2.5, 0.7), (3.0, 11.0)] {
            let h = power(p);
            let base = boundary_load(&mesh, |s| h.eval(s), &u).unwrap();
            let cu: Vec<f64> = u.iter().map(|x| c * x).collect();
            let scaled = boundary_load(&mesh, |s| h.eval(s), &cu).unwrap();
            let factor = c.powf(p);
            for (x, y) in scaled.iter().zip(base.iter()) {
                assert!((x - factor * y).abs() <= 1e-12 * factor * y.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn residual_ignores_boundary_data_in_interior_rows() {
        let mesh = generate_disk_mesh(1.0, 2).unwrap();
        let a = assemble_interior_form(&mesh).unwrap();
        let u = vec![0.5; mesh.num_vertices()];
        let r1 = residual(&a, &mesh, &u, 1.0, &cubic()).unwrap();
        let r2 = residual(&a, &mesh, &u, 3.0, &cubic()).unwrap();
        for v in 0..mesh.num_vertices() {
            if !mesh.is_boundary_vertex(v) {
                assert_eq!(r1[v], r2[v]);
            }
        }
    }

    #[test]
    fn degenerate_triangle_rejected() {
        let mesh = MeshGeometry::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.5, -1e-17]],
            vec![[0, 1, 2], [0, 3, 1]],
            vec![[0, 3], [3, 1], [1, 2], [2, 0]],
            crate::mesh::DomainTag::External,
        )
        .unwrap();
        assert!(matches!(assemble_interior_form(&mesh), Err(AssemblyError::DegenerateTriangle { triangle: 1, .. })));
    }

    #[test]
    fn dense_blocks_match_sparse_operators() {
        let mesh = generate_disk_mesh(1.0, 1).unwrap();
        let disc = Discretization::new(mesh).unwrap();
        let u: Vec<f64> = disc.mesh().vertices().iter().map(|v| 0.2 + v[1] * v[1]).collect();
        let h = cubic();
        let jac = jacobian(disc.interior_form(), disc.mesh(), &u, 1.0, &h).unwrap();
        let block = disc.boundary_jacobian_block(&u, &h).unwrap();
        let bnd = disc.condensed().boundary();
        for (k, &i) in bnd.iter().enumerate() {
            for (l, &j) in bnd.iter().enumerate() {
                let expect = disc.interior_form().matrix.get(i, j) - jac.get(i, j);
                assert!((block[(k, l)] - expect).abs() < 1e-14);
            }
        }
        let bm = disc.boundary_mass_block();
        for (k, &i) in bnd.iter().enumerate() {
            for (l, &j) in bnd.iter().enumerate() {
                assert_eq!(bm[(k, l)], disc.boundary_mass().matrix.get(i, j));
            }
        }
    }

    fn fd_check(u: &[f64], lambda: f64, mesh: &MeshGeometry, a: &DiscreteOperator, h: &PowerSum) -> f64 {
        let jac = jacobian(a, mesh, u, lambda, h).unwrap();
        let n = u.len();
        let dir: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        let eps = 1e-6;
        let up: Vec<f64> = u.iter().zip(&dir).map(|(x, d)| x + eps * d).collect();
        let um: Vec<f64> = u.iter().zip(&dir).map(|(x, d)| x - eps * d).collect();
        let rp = residual(a, mesh, &up, lambda, h).unwrap();
        let rm = residual(a, mesh, &um, lambda, h).unwrap();
        let jd = jac.mul_vec(&dir);
        let mut err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..n {
            let fd = (rp[i] - rm[i]) / (2.0 * eps);
            err = err.max((fd - jd[i]).abs());
            scale = scale.max(jd[i].abs());
        }
        err / scale.max(1.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn jacobian_matches_finite_differences(seed in any::<u64>(), lambda in 0.1f64..3.0) {
            use rand::{Rng, SeedableRng};
            let mesh = generate_disk_mesh(1.0, 2).unwrap();
            let a = assemble_interior_form(&mesh).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..mesh.num_vertices()).map(|_| rng.gen_range(0.05..2.0)).collect();
            prop_assert!(fd_check(&u, lambda, &mesh, &a, &cubic()) < 1e-5);
            prop_assert!(fd_check(&u, lambda, &mesh, &a, &power(2.5)) < 1e-5);
        }

        #[test]
        fn interior_perturbation_leaves_boundary_load(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mesh = generate_disk_mesh(1.0, 2).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..mesh.num_vertices()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut v = u.clone();
            for (i, x) in v.iter_mut().enumerate() {
                if !mesh.is_boundary_vertex(i) {
                    *x += rng.gen_range(-1.0..1.0);
                }
            }
            let h = cubic();
            let lu = boundary_load(&mesh, |s| h.eval(s), &u).unwrap();
            let lv = boundary_load(&mesh, |s| h.eval(s), &v).unwrap();
            prop_assert_eq!(lu, lv);
        }

        #[test]
        fn interior_form_is_coercive(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mesh = generate_disk_mesh(1.0, 2).unwrap();
            let a = assemble_interior_form(&mesh).unwrap();
            let b = assemble_boundary_mass(&mesh);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..mesh.num_vertices()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // the lowest Steklov eigenvalue bounds A from below by B
            prop_assert!(a.matrix.quad_form(&u) >= 0.4 * b.matrix.quad_form(&u));
            prop_assert!(a.matrix.quad_form(&u) > 0.0);
        }
    }
}
