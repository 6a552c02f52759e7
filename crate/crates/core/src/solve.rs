//! Sparse systems of the form `(diag(d) + s I - R) x = b` for many complex `s`.
//!
//! Small systems use a sparse LU whose symbolic analysis is shared by every
//! shift. Larger ones use restarted GMRES preconditioned by ILU(0); `A(s)` is
//! strictly diagonally dominant for `Re s > 0`, which keeps ILU(0) stable.
//! GMRES falls back to the LU if it fails to converge.

use std::sync::OnceLock;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat};
use faer::Mat;
use num_complex::Complex64;

use crate::error::{Error, Result};

type C = Complex64;

const ZERO: C = C::new(0.0, 0.0);

/// Systems at most this large are always factorized directly.
pub const DIRECT_LIMIT: usize = 1500;
const RESTART: usize = 40;
const MAX_RESTARTS: usize = 50;
/// Relative residual targeted by GMRES.
const GMRES_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Auto,
    Direct,
    Iterative,
}

/// Compressed rows with merged duplicates and an explicit diagonal.
#[derive(Debug, Clone)]
struct Csr {
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
    diag: Vec<usize>,
}

impl Csr {
    fn new(n: usize, diag: &[f64], off: &[(usize, usize, f64)]) -> Csr {
        let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, diag[i])]).collect();
        for &(i, j, r) in off {
            rows[i].push((j, -r));
        }
        let mut csr = Csr {
            row_ptr: vec![0],
            col: Vec::new(),
            val: Vec::new(),
            diag: Vec::with_capacity(n),
        };
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|e| e.0);
            for (j, v) in row {
                if csr.col.len() > *csr.row_ptr.last().unwrap() && *csr.col.last().unwrap() == j {
                    *csr.val.last_mut().unwrap() += v;
                } else {
                    if j == i {
                        csr.diag.push(csr.col.len());
                    }
                    csr.col.push(j);
                    csr.val.push(v);
                }
            }
            csr.row_ptr.push(csr.col.len());
        }
        csr
    }

    fn shifted(&self, s: C) -> Vec<C> {
        let mut v: Vec<C> = self.val.iter().map(|&x| C::new(x, 0.0)).collect();
        for &d in &self.diag {
            v[d] += s;
        }
        v
    }

    fn matvec(&self, vals: &[C], x: &[C], y: &mut [C]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = ZERO;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += vals[p] * x[self.col[p]];
            }
            *yi = acc;
        }
    }

    /// In-place ILU(0) on the sparsity pattern; unit lower factor implied.
    fn ilu0(&self, mut vals: Vec<C>) -> Result<Vec<C>> {
        let n = self.diag.len();
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
            for p in lo..hi {
                pos[self.col[p]] = p;
            }
            for p in lo..self.diag[i] {
                let k = self.col[p];
                let pivot = vals[self.diag[k]];
                if pivot.norm() == 0.0 {
                    return Err(Error::Solver("zero pivot in incomplete factorization".into()));
                }
                let l = vals[p] / pivot;
                vals[p] = l;
                for q in self.diag[k] + 1..self.row_ptr[k + 1] {
                    let at = pos[self.col[q]];
                    if at != usize::MAX {
                        let u = vals[q];
                        vals[at] -= l * u;
                    }
                }
            }
            for p in lo..hi {
                pos[self.col[p]] = usize::MAX;
            }
        }
        Ok(vals)
    }

    fn ilu_apply(&self, lu: &[C], x: &mut [C]) {
        let n = x.len();
        for i in 0..n {
            let mut acc = x[i];
            for p in self.row_ptr[i]..self.diag[i] {
                acc -= lu[p] * x[self.col[p]];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for p in self.diag[i] + 1..self.row_ptr[i + 1] {
                acc -= lu[p] * x[self.col[p]];
            }
            x[i] = acc / lu[self.diag[i]];
        }
    }
}

struct Direct {
    symbolic: SymbolicSparseColMat<usize>,
    argsort: Argsort<usize>,
    base: Vec<C>,
    diagonal: Vec<usize>,
    lu_symbolic: SymbolicLu<usize>,
}

pub struct ShiftedSystem {
    n: usize,
    method: Method,
    csr: Csr,
    csr_t: Csr,
    diag: Vec<f64>,
    off: Vec<(usize, usize, f64)>,
    direct: OnceLock<std::result::Result<Direct, String>>,
}

impl std::fmt::Debug for ShiftedSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShiftedSystem")
            .field("n", &self.n)
            .field("nnz", &self.csr.col.len())
            .field("method", &self.method)
            .finish()
    }
}

impl ShiftedSystem {
    /// `off` yields `(row, col, rate)` entries of `R`; duplicates are summed.
    pub fn new<I>(diag: &[f64], off: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        Self::with_method(diag, off, Method::Auto)
    }

    pub fn with_method<I>(diag: &[f64], off: I, method: Method) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let n = diag.len();
        let off: Vec<(usize, usize, f64)> = off.into_iter().collect();
        if let Some(&(i, j, _)) = off.iter().find(|(i, j, _)| *i >= n || *j >= n) {
            return Err(Error::Solver(format!("entry ({i}, {j}) outside a {n}x{n} system")));
        }
        let transposed: Vec<(usize, usize, f64)> = off.iter().map(|&(i, j, r)| (j, i, r)).collect();
        let method = match method {
            Method::Auto if n <= DIRECT_LIMIT => Method::Direct,
            Method::Auto => Method::Iterative,
            m => m,
        };
        Ok(ShiftedSystem {
            n,
            method,
            csr: Csr::new(n, diag, &off),
            csr_t: Csr::new(n, diag, &transposed),
            diag: diag.to_vec(),
            off,
            direct: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn direct(&self) -> Result<&Direct> {
        self.direct
            .get_or_init(|| {
                let mut idx = Vec::with_capacity(self.n + self.off.len());
                let mut base = Vec::with_capacity(self.n + self.off.len());
                let mut diagonal = Vec::with_capacity(self.n);
                for (i, &d) in self.diag.iter().enumerate() {
                    diagonal.push(idx.len());
                    idx.push(Pair { row: i, col: i });
                    base.push(C::new(d, 0.0));
                }
                for &(i, j, r) in &self.off {
                    idx.push(Pair { row: i, col: j });
                    base.push(C::new(-r, 0.0));
                }
                let (symbolic, argsort) =
                    SymbolicSparseColMat::try_new_from_indices(self.n, self.n, &idx).map_err(|e| format!("{e:?}"))?;
                let lu_symbolic = SymbolicLu::try_new(symbolic.as_ref()).map_err(|e| format!("{e:?}"))?;
                Ok(Direct {
                    symbolic,
                    argsort,
                    base,
                    diagonal,
                    lu_symbolic,
                })
            })
            .as_ref()
            .map_err(|e| Error::Solver(e.clone()))
    }

    fn factor_direct(&self, s: C) -> Result<Lu<usize, C>> {
        let d = self.direct()?;
        let mut vals = d.base.clone();
        for &k in &d.diagonal {
            vals[k] += s;
        }
        let mat = SparseColMat::new_from_argsort(d.symbolic.clone(), &d.argsort, &vals)
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        Lu::try_new_with_symbolic(d.lu_symbolic.clone(), mat.as_ref())
            .map_err(|e| Error::Solver(format!("factorization at s = {s}: {e:?}")))
    }

    /// Prepares solves at shift `s`.
    pub fn factor(&self, s: C) -> Result<Factored<'_>> {
        if self.n == 0 {
            return Ok(Factored {
                sys: self,
                s,
                lu: OnceLock::new(),
                ilu: OnceLock::new(),
                ilu_t: OnceLock::new(),
            });
        }
        let lu = OnceLock::new();
        if self.method == Method::Direct {
            let _ = lu.set(self.factor_direct(s)?);
        }
        Ok(Factored {
            sys: self,
            s,
            lu,
            ilu: OnceLock::new(),
            ilu_t: OnceLock::new(),
        })
    }
}

/// A shifted system ready for solves with either `A(s)` or its transpose.
pub struct Factored<'a> {
    sys: &'a ShiftedSystem,
    s: C,
    lu: OnceLock<Lu<usize, C>>,
    ilu: OnceLock<Result<(Vec<C>, Vec<C>)>>,
    ilu_t: OnceLock<Result<(Vec<C>, Vec<C>)>>,
}

impl Factored<'_> {
    pub fn solve(&self, rhs: &[C]) -> Result<Vec<C>> {
        self.run(rhs, false)
    }

    pub fn solve_transpose(&self, rhs: &[C]) -> Result<Vec<C>> {
        self.run(rhs, true)
    }

    fn run(&self, rhs: &[C], transpose: bool) -> Result<Vec<C>> {
        let n = self.sys.n;
        if rhs.len() != n {
            return Err(Error::Solver(format!("right-hand side has length {}, expected {n}", rhs.len())));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let out = if self.lu.get().is_some() {
            self.run_direct(rhs, transpose)
        } else {
            match self.run_gmres(rhs, transpose)? {
                Some(x) => x,
                None => {
                    let lu = self.sys.factor_direct(self.s)?;
                    let _ = self.lu.set(lu);
                    self.run_direct(rhs, transpose)
                }
            }
        };
        if out.iter().any(|x| !(x.re.is_finite() && x.im.is_finite())) {
            return Err(Error::Solver("solution is not finite".into()));
        }
        Ok(out)
    }

    fn run_direct(&self, rhs: &[C], transpose: bool) -> Vec<C> {
        let lu = self.lu.get().expect("direct factorization present");
        let mut b = Mat::<C>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        if transpose {
            lu.solve_transpose_in_place(b.as_mut());
        } else {
            lu.solve_in_place(b.as_mut());
        }
        (0..rhs.len()).map(|i| b[(i, 0)]).collect()
    }

    /// `None` when GMRES did not reach the tolerance.
    fn run_gmres(&self, rhs: &[C], transpose: bool) -> Result<Option<Vec<C>>> {
        let (csr, cell) = if transpose { (&self.sys.csr_t, &self.ilu_t) } else { (&self.sys.csr, &self.ilu) };
        let (vals, lu) = match cell.get_or_init(|| {
            let vals = csr.shifted(self.s);
            let lu = csr.ilu0(vals.clone())?;
            Ok((vals, lu))
        }) {
            Ok(x) => x,
            Err(e) => return Err(Error::Solver(e.to_string())),
        };
        Ok(gmres(csr, vals, lu, rhs))
    }
}

fn norm(x: &[C]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Right-preconditioned restarted GMRES.
fn gmres(csr: &Csr, vals: &[C], lu: &[C], b: &[C]) -> Option<Vec<C>> {
    let n = b.len();
    let bnorm = norm(b);
    let mut x = vec![ZERO; n];
    if bnorm == 0.0 {
        return Some(x);
    }
    let target = GMRES_TOL * bnorm;
    let mut r = vec![ZERO; n];
    let mut w = vec![ZERO; n];
    let mut z = vec![ZERO; n];
    let mut basis: Vec<Vec<C>> = Vec::with_capacity(RESTART + 1);
    let mut h = vec![vec![ZERO; RESTART]; RESTART + 1];
    for _ in 0..MAX_RESTARTS {
        csr.matvec(vals, &x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = *bi - *ri;
        }
        let beta = norm(&r);
        if beta <= target {
            return Some(x);
        }
        basis.clear();
        basis.push(r.iter().map(|v| v / beta).collect());
        let mut g = vec![ZERO; RESTART + 1];
        g[0] = C::new(beta, 0.0);
        let mut cs = vec![0.0; RESTART];
        let mut sn = vec![ZERO; RESTART];
        let mut steps = 0;
        for j in 0..RESTART {
            z.copy_from_slice(&basis[j]);
            csr.ilu_apply(lu, &mut z);
            csr.matvec(vals, &z, &mut w);
            for i in 0..=j {
                let hij: C = basis[i].iter().zip(&w).map(|(v, x)| v.conj() * x).sum();
                h[i][j] = hij;
                for (wk, vk) in w.iter_mut().zip(&basis[i]) {
                    *wk -= hij * vk;
                }
            }
            let hn = norm(&w);
            h[j + 1][j] = C::new(hn, 0.0);
            for i in 0..j {
                let (a, c) = (h[i][j], h[i + 1][j]);
                h[i][j] = cs[i] * a + sn[i] * c;
                h[i + 1][j] = -sn[i].conj() * a + cs[i] * c;
            }
            let (a, c) = (h[j][j], h[j + 1][j]);
            let rho = (a.norm_sqr() + c.norm_sqr()).sqrt();
            if rho == 0.0 {
                return None;
            }
            if a.norm() == 0.0 {
                cs[j] = 0.0;
                sn[j] = C::new(1.0, 0.0);
            } else {
                cs[j] = a.norm() / rho;
                sn[j] = (a / a.norm()) * c.conj() / rho;
            }
            h[j][j] = cs[j] * a + sn[j] * c;
            h[j + 1][j] = ZERO;
            g[j + 1] = -sn[j].conj() * g[j];
            g[j] *= cs[j];
            steps = j + 1;
            if g[j + 1].norm() <= target || hn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        let mut y = vec![ZERO; steps];
        for i in (0..steps).rev() {
            let mut acc = g[i];
            for k in i + 1..steps {
                acc -= h[i][k] * y[k];
            }
            y[i] = acc / h[i][i];
        }
        z.iter_mut().for_each(|v| *v = ZERO);
        for (yi, v) in y.iter().zip(&basis) {
            for (zk, vk) in z.iter_mut().zip(v) {
                *zk += yi * vk;
            }
        }
        csr.ilu_apply(lu, &mut z);
        for (xk, zk) in x.iter_mut().zip(&z) {
            *xk += zk;
        }
    }
    csr.matvec(vals, &x, &mut r);
    let res = r.iter().zip(b).map(|(a, c)| (c - a).norm_sqr()).sum::<f64>().sqrt();
    (res <= target).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_state_system() {
        // [[2+s, -1], [-1, 3+s]] x = [1, 0] at s = 1
        let sys = ShiftedSystem::new(&[2.0, 3.0], [(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let f = sys.factor(C::new(1.0, 0.0)).unwrap();
        let x = f.solve(&[C::new(1.0, 0.0), ZERO]).unwrap();
        // det = 12 - 1 = 11
        assert!((x[0].re - 4.0 / 11.0).abs() < 1e-14);
        assert!((x[1].re - 1.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn transpose_and_duplicates() {
        // R has two entries (0,1) summing to 2
        for method in [Method::Direct, Method::Iterative] {
            let sys = ShiftedSystem::with_method(&[2.0, 1.0], [(0, 1, 1.5), (0, 1, 0.5)], method).unwrap();
            let f = sys.factor(C::new(0.0, 1.0)).unwrap();
            let b = [C::new(1.0, 0.0), C::new(2.0, 0.0)];
            let x = f.solve_transpose(&b).unwrap();
            // A^T = [[2+i, 0], [-2, 1+i]]
            let x0 = b[0] / C::new(2.0, 1.0);
            let x1 = (b[1] + 2.0 * x0) / C::new(1.0, 1.0);
            assert!((x[0] - x0).norm() < 1e-13 && (x[1] - x1).norm() < 1e-13);
        }
    }

    #[test]
    fn iterative_matches_direct_on_a_ring() {
        // birth-death ring with uneven rates
        let n = 300;
        let mut diag = vec![0.0; n];
        let mut off = Vec::new();
        for i in 0..n {
            let (up, down) = (1.0 + (i % 7) as f64, 0.5 + (i % 3) as f64);
            off.push((i, (i + 1) % n, up));
            off.push((i, (i + n - 1) % n, down));
            diag[i] = up + down;
        }
        let s = C::new(0.05, 0.8);
        let b: Vec<C> = (0..n).map(|i| C::new((i % 5) as f64, 1.0)).collect();
        let d = ShiftedSystem::with_method(&diag, off.clone(), Method::Direct).unwrap();
        let it = ShiftedSystem::with_method(&diag, off, Method::Iterative).unwrap();
        let (fd, fi) = (d.factor(s).unwrap(), it.factor(s).unwrap());
        for t in [false, true] {
            let (xd, xi) = if t {
                (fd.solve_transpose(&b).unwrap(), fi.solve_transpose(&b).unwrap())
            } else {
                (fd.solve(&b).unwrap(), fi.solve(&b).unwrap())
            };
            let err = xd.iter().zip(&xi).map(|(a, c)| (a - c).norm()).fold(0.0, f64::max);
            assert!(err < 1e-9, "max deviation {err}");
        }
    }
}
