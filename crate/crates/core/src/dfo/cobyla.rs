//! COBYLA after Powell (1994), "A direct search optimization method that
//! models the objective and constraint functions by linear interpolation".
//!
//! The control flow follows the reference implementation closely; comments
//! name the stage rather than the original statement labels.

use std::ops::{Index, IndexMut};

use super::{DfoError, SolverConfig, SolverResult, StopReason};

const ALPHA: f64 = 0.25;
const BETA: f64 = 2.1;
const GAMMA: f64 = 0.5;
const DELTA: f64 = 1.1;

/// Dense column-major matrix.
#[derive(Debug, Clone)]
struct Mat {
    rows: usize,
    data: Vec<f64>,
}

impl Mat {
    fn new(rows: usize, cols: usize) -> Self {
        Mat { rows, data: vec![0.0; rows * cols] }
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn swap_cols(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for i in 0..self.rows {
            self.data.swap(a * self.rows + i, b * self.rows + i);
        }
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[j * self.rows + i]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[j * self.rows + i]
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Tracks the best point seen: feasible beats infeasible, then lower value.
struct Incumbent {
    point: Vec<f64>,
    value: f64,
    violation: f64,
    set: bool,
}

impl Incumbent {
    fn offer(&mut self, x: &[f64], value: f64, violation: f64) -> bool {
        let better = !self.set || violation < self.violation || (violation == self.violation && value < self.value);
        if better {
            self.point.clear();
            self.point.extend_from_slice(x);
            self.value = value;
            self.violation = violation;
            self.set = true;
        }
        better
    }
}

/// Reusable COBYLA workspace for problems of a fixed size.
#[derive(Debug, Clone)]
pub struct Cobyla {
    n: usize,
    m: usize,
    config: SolverConfig,
    sim: Mat,
    simi: Mat,
    simi_t: Mat,
    datmat: Mat,
    a: Mat,
    b: Vec<f64>,
    vsig: Vec<f64>,
    veta: Vec<f64>,
    sigbar: Vec<f64>,
    dx: Vec<f64>,
    w: Vec<f64>,
    con: Vec<f64>,
    x: Vec<f64>,
    lp: Trstlp,
}

enum Next {
    Evaluate,
    PickVertex,
    TrustRegionStep,
    AfterTrial,
    ReduceRho,
    Finish(StopReason),
}

impl Cobyla {
    pub fn new(n: usize, m: usize, config: SolverConfig) -> Result<Self, DfoError> {
        config.validate()?;
        if n == 0 {
            return Err(DfoError::InvalidConfig("problem has no variables".into()));
        }
        let np = n + 1;
        Ok(Cobyla {
            n,
            m,
            config,
            sim: Mat::new(n, np),
            simi: Mat::new(n, n),
            simi_t: Mat::new(n, n),
            datmat: Mat::new(m + 2, np),
            a: Mat::new(n, m + 1),
            b: vec![0.0; m + 1],
            vsig: vec![0.0; n],
            veta: vec![0.0; n],
            sigbar: vec![0.0; n],
            dx: vec![0.0; n],
            w: vec![0.0; n],
            con: vec![0.0; m + 2],
            x: vec![0.0; n],
            lp: Trstlp::new(n, m),
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    /// Runs one minimisation. `eval` returns the objective and writes the
    /// `m` constraint values into its second argument.
    pub fn minimize<F>(
        &mut self,
        mut eval: F,
        x0: &[f64],
        mut early_stop: Option<&mut dyn FnMut(&[f64]) -> bool>,
    ) -> Result<SolverResult, DfoError>
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        let (n, m) = (self.n, self.m);
        if x0.len() != n {
            return Err(DfoError::DimensionMismatch { expected: n, got: x0.len() });
        }
        let np = n + 1;
        let (mp, mpp) = (m + 1, m + 2);
        let (row_f, row_res) = (m, m + 1);
        let maxfun = self.config.max_iterations;
        let rhoend = self.config.rho_end;

        let mut rho = self.config.rho_begin;
        let mut parmu = 0.0f64;
        let mut nfvals = 0usize;
        let mut trace = self.config.record_trace.then(|| Vec::with_capacity(maxfun));
        let mut best =
            Incumbent { point: Vec::with_capacity(n), value: f64::INFINITY, violation: f64::INFINITY, set: false };
        let (mut f_lo, mut f_hi) = (f64::INFINITY, f64::NEG_INFINITY);

        self.x.copy_from_slice(x0);
        self.sim.data.fill(0.0);
        self.simi.data.fill(0.0);
        for i in 0..n {
            self.sim[(i, n)] = x0[i];
            self.sim[(i, i)] = rho;
            self.simi[(i, i)] = 1.0 / rho;
        }
        let mut jdrop = n;
        let mut ibrnch = false;
        let mut iflag = false;
        let mut f;
        let mut resmax;
        let mut prerec = 0.0;
        let mut prerem = 0.0;

        let mut next = Next::Evaluate;
        loop {
            match next {
                Next::Evaluate => {
                    if nfvals >= maxfun {
                        next = Next::Finish(StopReason::MaxIterations);
                        continue;
                    }
                    nfvals += 1;
                    let raw = eval(&self.x, &mut self.con[..m]);
                    if nfvals == 1 && !raw.is_finite() {
                        return Err(DfoError::NonFiniteStart(raw));
                    }
                    f = if raw.is_finite() {
                        f_lo = f_lo.min(raw);
                        f_hi = f_hi.max(raw);
                        raw
                    } else {
                        f_hi + (f_hi - f_lo).abs().max(1.0)
                    };
                    resmax = 0.0f64;
                    for k in 0..m {
                        let c = self.con[k];
                        let c = if c.is_finite() { c } else { -1e300 };
                        self.con[k] = c;
                        resmax = resmax.max(-c);
                    }
                    self.con[row_f] = f;
                    self.con[row_res] = resmax;

                    let improved = raw.is_finite() && best.offer(&self.x, f, resmax);
                    if let Some(t) = trace.as_mut() {
                        t.push(best.value);
                    }
                    if improved {
                        if let Some(pred) = early_stop.as_mut() {
                            if pred(&best.point) {
                                next = Next::Finish(StopReason::EarlyStop);
                                continue;
                            }
                        }
                    }

                    if ibrnch {
                        next = Next::AfterTrial;
                        continue;
                    }
                    self.datmat.col_mut(jdrop).copy_from_slice(&self.con);
                    if nfvals > np {
                        ibrnch = true;
                        next = Next::PickVertex;
                        continue;
                    }
                    // Building the initial simplex: keep whichever of the
                    // base and the new vertex is lower as the base.
                    if jdrop < n {
                        if self.datmat[(row_f, n)] <= f {
                            self.x[jdrop] = self.sim[(jdrop, n)];
                        } else {
                            self.sim[(jdrop, n)] = self.x[jdrop];
                            for k in 0..mpp {
                                self.datmat[(k, jdrop)] = self.datmat[(k, n)];
                                self.datmat[(k, n)] = self.con[k];
                            }
                            for k in 0..=jdrop {
                                self.sim[(jdrop, k)] = -rho;
                                let mut temp = 0.0;
                                for i in k..=jdrop {
                                    temp -= self.simi[(i, k)];
                                }
                                self.simi[(jdrop, k)] = temp;
                            }
                        }
                    }
                    if nfvals <= n {
                        jdrop = nfvals - 1;
                        self.x[jdrop] += rho;
                        next = Next::Evaluate;
                        continue;
                    }
                    ibrnch = true;
                    next = Next::PickVertex;
                }

                Next::PickVertex => {
                    // Move the vertex with the least merit into the base slot.
                    let mut phimin = self.datmat[(row_f, n)] + parmu * self.datmat[(row_res, n)];
                    let mut nbest = n;
                    for j in 0..n {
                        let temp = self.datmat[(row_f, j)] + parmu * self.datmat[(row_res, j)];
                        if temp < phimin {
                            nbest = j;
                            phimin = temp;
                        } else if temp == phimin
                            && parmu == 0.0
                            && self.datmat[(row_res, j)] < self.datmat[(row_res, nbest)]
                        {
                            nbest = j;
                        }
                    }
                    if nbest < n {
                        self.datmat.swap_cols(n, nbest);
                        for i in 0..n {
                            let temp = self.sim[(i, nbest)];
                            self.sim[(i, nbest)] = 0.0;
                            self.sim[(i, n)] += temp;
                            let mut tempa = 0.0;
                            for k in 0..n {
                                self.sim[(i, k)] -= temp;
                                tempa -= self.simi[(k, i)];
                            }
                            self.simi[(nbest, i)] = tempa;
                        }
                    }

                    if self.inverse_error() > 0.1 {
                        log::debug!("cobyla: simplex inverse lost accuracy, stopping");
                        next = Next::Finish(StopReason::Converged);
                        continue;
                    }

                    // Linear models: column k of A is the gradient of
                    // constraint k, the last column is minus the objective gradient.
                    // Each entry is summed in the same order as a plain
                    // row-times-column product, several entries at a time.
                    for j in 0..n {
                        for i in 0..n {
                            self.simi_t[(i, j)] = self.simi[(j, i)];
                        }
                    }
                    for k in 0..mp {
                        let base = self.datmat[(k, n)];
                        self.b[k] = -base;
                        let acc = self.a.col_mut(k);
                        acc.fill(0.0);
                        for j in 0..n {
                            let wj = self.datmat[(k, j)] - base;
                            for (a, s) in acc.iter_mut().zip(self.simi_t.col(j)) {
                                *a += wj * s;
                            }
                        }
                        if k == row_f {
                            acc.iter_mut().for_each(|a| *a = -*a);
                        }
                    }

                    // Simplex acceptability.
                    iflag = true;
                    let parsig = ALPHA * rho;
                    let pareta = BETA * rho;
                    for j in 0..n {
                        let mut wsig = 0.0;
                        let mut weta = 0.0;
                        for k in 0..n {
                            wsig += self.simi[(j, k)] * self.simi[(j, k)];
                            weta += self.sim[(k, j)] * self.sim[(k, j)];
                        }
                        self.vsig[j] = 1.0 / wsig.sqrt();
                        self.veta[j] = weta.sqrt();
                        if self.vsig[j] < parsig || self.veta[j] > pareta {
                            iflag = false;
                        }
                    }

                    if ibrnch || iflag {
                        next = Next::TrustRegionStep;
                        continue;
                    }

                    // Geometry step: replace the vertex that most damages the
                    // simplex shape.
                    let mut jd = usize::MAX;
                    let mut temp = pareta;
                    for j in 0..n {
                        if self.veta[j] > temp {
                            jd = j;
                            temp = self.veta[j];
                        }
                    }
                    if jd == usize::MAX {
                        for j in 0..n {
                            if self.vsig[j] < temp {
                                jd = j;
                                temp = self.vsig[j];
                            }
                        }
                    }
                    jdrop = jd;
                    let scale = GAMMA * rho * self.vsig[jdrop];
                    for i in 0..n {
                        self.dx[i] = scale * self.simi[(jdrop, i)];
                    }
                    let mut cvmaxp = 0.0f64;
                    let mut cvmaxm = 0.0f64;
                    let mut sum = 0.0;
                    for k in 0..mp {
                        sum = dot(self.a.col(k), &self.dx);
                        if k < m {
                            let temp = self.datmat[(k, n)];
                            cvmaxp = cvmaxp.max(-sum - temp);
                            cvmaxm = cvmaxm.max(sum - temp);
                        }
                    }
                    let dxsign = if parmu * (cvmaxp - cvmaxm) > sum + sum { -1.0 } else { 1.0 };
                    for i in 0..n {
                        self.dx[i] *= dxsign;
                    }
                    self.replace_vertex(jdrop);
                    for j in 0..n {
                        self.x[j] = self.sim[(j, n)] + self.dx[j];
                    }
                    next = Next::Evaluate;
                }

                Next::TrustRegionStep => {
                    let ifull = self.lp.solve(&self.a, &self.b, rho, &mut self.dx);
                    if !ifull {
                        let len2 = dot(&self.dx, &self.dx);
                        if len2 < 0.25 * rho * rho {
                            ibrnch = true;
                            next = Next::ReduceRho;
                            continue;
                        }
                    }
                    // Predicted objective change and constraint violation.
                    let mut resnew = 0.0f64;
                    self.b[row_f] = 0.0;
                    let mut sum = 0.0;
                    for k in 0..mp {
                        sum = self.b[k] - dot(self.a.col(k), &self.dx);
                        if k < m {
                            resnew = resnew.max(sum);
                        }
                    }
                    let mut barmu = 0.0;
                    prerec = self.datmat[(row_res, n)] - resnew;
                    if prerec > 0.0 {
                        barmu = sum / prerec;
                    }
                    if parmu < 1.5 * barmu {
                        parmu = 2.0 * barmu;
                        let phi = self.datmat[(row_f, n)] + parmu * self.datmat[(row_res, n)];
                        let mut switch = false;
                        for j in 0..n {
                            let temp = self.datmat[(row_f, j)] + parmu * self.datmat[(row_res, j)];
                            if temp < phi
                                || (temp == phi
                                    && parmu == 0.0
                                    && self.datmat[(row_res, j)] < self.datmat[(row_res, n)])
                            {
                                switch = true;
                                break;
                            }
                        }
                        if switch {
                            next = Next::PickVertex;
                            continue;
                        }
                    }
                    prerem = parmu * prerec - sum;
                    for i in 0..n {
                        self.x[i] = self.sim[(i, n)] + self.dx[i];
                    }
                    ibrnch = true;
                    next = Next::Evaluate;
                }

                Next::AfterTrial => {
                    let f = self.con[row_f];
                    let resmax = self.con[row_res];
                    let vmold = self.datmat[(row_f, n)] + parmu * self.datmat[(row_res, n)];
                    let vmnew = f + parmu * resmax;
                    let mut trured = vmold - vmnew;
                    if parmu == 0.0 && f == self.datmat[(row_f, n)] {
                        prerem = prerec;
                        trured = self.datmat[(row_res, n)] - resmax;
                    }

                    // Choose the vertex the trial point replaces, if any.
                    let mut ratio = if trured <= 0.0 { 1.0 } else { 0.0 };
                    let mut jd = usize::MAX;
                    for j in 0..n {
                        let mut temp = 0.0;
                        for i in 0..n {
                            temp += self.simi[(j, i)] * self.dx[i];
                        }
                        let temp = temp.abs();
                        if temp > ratio {
                            jd = j;
                            ratio = temp;
                        }
                        self.sigbar[j] = temp * self.vsig[j];
                    }
                    let parsig = ALPHA * rho;
                    let mut edgmax = DELTA * rho;
                    let mut l = usize::MAX;
                    for j in 0..n {
                        if self.sigbar[j] >= parsig || self.sigbar[j] >= self.vsig[j] {
                            let mut temp = self.veta[j];
                            if trured > 0.0 {
                                temp = 0.0;
                                for i in 0..n {
                                    let d = self.dx[i] - self.sim[(i, j)];
                                    temp += d * d;
                                }
                                temp = temp.sqrt();
                            }
                            if temp > edgmax {
                                l = j;
                                edgmax = temp;
                            }
                        }
                    }
                    if l != usize::MAX {
                        jd = l;
                    }
                    if jd == usize::MAX {
                        next = Next::ReduceRho;
                        continue;
                    }
                    jdrop = jd;
                    self.replace_vertex(jdrop);
                    self.datmat.col_mut(jdrop).copy_from_slice(&self.con);
                    if trured > 0.0 && trured >= 0.1 * prerem {
                        next = Next::PickVertex;
                        continue;
                    }
                    next = Next::ReduceRho;
                }

                Next::ReduceRho => {
                    if !iflag {
                        ibrnch = false;
                        next = Next::PickVertex;
                        continue;
                    }
                    if rho > rhoend {
                        rho *= 0.5;
                        if rho <= 1.5 * rhoend {
                            rho = rhoend;
                        }
                        if parmu > 0.0 {
                            let mut denom = 0.0f64;
                            let (mut cmin, mut cmax) = (0.0f64, 0.0f64);
                            for k in 0..mp {
                                cmin = self.datmat[(k, n)];
                                cmax = cmin;
                                for i in 0..n {
                                    cmin = cmin.min(self.datmat[(k, i)]);
                                    cmax = cmax.max(self.datmat[(k, i)]);
                                }
                                if k < m && cmin < 0.5 * cmax {
                                    let temp = cmax.max(0.0) - cmin;
                                    denom = if denom <= 0.0 { temp } else { denom.min(temp) };
                                }
                            }
                            if denom == 0.0 {
                                parmu = 0.0;
                            } else if cmax - cmin < parmu * denom {
                                parmu = (cmax - cmin) / denom;
                            }
                        }
                        next = Next::PickVertex;
                        continue;
                    }
                    next = Next::Finish(StopReason::Converged);
                }

                Next::Finish(reason) => {
                    return Ok(SolverResult {
                        best_point: best.point,
                        best_value: best.value,
                        best_violation: best.violation,
                        iterations_used: nfvals,
                        stop_reason: reason,
                        trace,
                    });
                }
            }
        }
    }

    /// Puts `dx` in column `j` of the simplex and updates the inverse.
    fn replace_vertex(&mut self, j: usize) {
        let n = self.n;
        let mut temp = 0.0;
        for i in 0..n {
            self.sim[(i, j)] = self.dx[i];
            temp += self.simi[(j, i)] * self.dx[i];
        }
        for i in 0..n {
            self.simi[(j, i)] /= temp;
        }
        for r in 0..n {
            if r != j {
                let mut t = 0.0;
                for i in 0..n {
                    t += self.simi[(r, i)] * self.dx[i];
                }
                for i in 0..n {
                    let v = self.simi[(j, i)];
                    self.simi[(r, i)] -= t * v;
                }
            }
        }
    }

    fn inverse_error(&mut self) -> f64 {
        let n = self.n;
        let mut error = 0.0f64;
        for j in 0..n {
            let acc = &mut self.w;
            acc.fill(0.0);
            acc[j] = -1.0;
            for k in 0..n {
                let s = self.sim[(k, j)];
                for (a, v) in acc.iter_mut().zip(self.simi.col(k)) {
                    *a += v * s;
                }
            }
            error = acc.iter().fold(error, |e, a| e.max(a.abs()));
        }
        error
    }
}

/// Trust-region linear program: first the shortest step that minimises the
/// largest linearised constraint violation within `|dx| <= rho`, then any
/// leftover freedom spent reducing the linear objective without increasing
/// that violation. Active constraints are kept orthogonalised in `z`.
#[derive(Debug, Clone)]
struct Trstlp {
    n: usize,
    m: usize,
    iact: Vec<usize>,
    z: Mat,
    zdota: Vec<f64>,
    vmultc: Vec<f64>,
    sdirn: Vec<f64>,
    dxnew: Vec<f64>,
    vmultd: Vec<f64>,
}

enum Lp {
    Restart,
    Iterate,
    Step,
    StageTwo,
    Leftover,
}

#[inline]
fn negligible(abs_sum: f64, value: f64) -> bool {
    let acca = abs_sum + 0.1 * value.abs();
    let accb = abs_sum + 0.2 * value.abs();
    abs_sum >= acca || acca >= accb
}

impl Trstlp {
    fn new(n: usize, m: usize) -> Self {
        Trstlp {
            n,
            m,
            iact: vec![0; m + 1],
            z: Mat::new(n, n),
            zdota: vec![0.0; n],
            vmultc: vec![0.0; m + 1],
            sdirn: vec![0.0; n],
            dxnew: vec![0.0; n],
            vmultd: vec![0.0; m + 1],
        }
    }

    /// Givens rotation that makes column `kp` of `z` orthogonal to the
    /// gradient of constraint `kk`, shifting it into column `k`.
    fn rotate_pair(&mut self, a: &Mat, k: usize, kp: usize, kk: usize) {
        let sp = dot(self.z.col(k), a.col(kk));
        let temp = sp.hypot(self.zdota[kp]);
        let alpha = self.zdota[kp] / temp;
        let beta = sp / temp;
        self.zdota[kp] = alpha * self.zdota[k];
        self.zdota[k] = temp;
        for i in 0..self.n {
            let zk = self.z[(i, k)];
            let zkp = self.z[(i, kp)];
            self.z[(i, kp)] = alpha * zk - beta * zkp;
            self.z[(i, k)] = alpha * zkp + beta * zk;
        }
    }

    /// Moves the active constraint at position `from` to position `nact - 1`.
    fn cycle_to_end(&mut self, a: &Mat, from: usize, nact: usize) {
        if from + 1 >= nact {
            return;
        }
        let isave = self.iact[from];
        let vsave = self.vmultc[from];
        let mut k = from;
        while k + 1 < nact {
            let kp = k + 1;
            let kk = self.iact[kp];
            self.rotate_pair(a, k, kp, kk);
            self.iact[k] = kk;
            self.vmultc[k] = self.vmultc[kp];
            k = kp;
        }
        self.iact[k] = isave;
        self.vmultc[k] = vsave;
    }

    /// Returns `true` when the step reaches the trust-region boundary.
    fn solve(&mut self, a: &Mat, b: &[f64], rho: f64, dx: &mut [f64]) -> bool {
        let (n, m) = (self.n, self.m);
        let obj = m;
        let mut mcon = m;
        let mut nact = 0usize;
        let mut resmax = 0.0f64;
        let mut resold = 0.0f64;
        self.z.data.fill(0.0);
        for i in 0..n {
            self.z[(i, i)] = 1.0;
            dx[i] = 0.0;
        }
        let mut icon = 0usize;
        for k in 0..m {
            if b[k] > resmax {
                resmax = b[k];
                icon = k;
            }
        }
        for k in 0..m {
            self.iact[k] = k;
            self.vmultc[k] = resmax - b[k];
        }

        let mut optold = 0.0f64;
        let mut icount = 0u32;
        let mut nactx = 0usize;

        let mut state = if resmax == 0.0 {
            Lp::StageTwo
        } else {
            self.sdirn.fill(0.0);
            Lp::Restart
        };

        loop {
            match state {
                Lp::Restart => {
                    optold = 0.0;
                    icount = 0;
                    state = Lp::Iterate;
                }

                Lp::Iterate => {
                    let optnew = if mcon == m { resmax } else { -dot(dx, a.col(obj)) };
                    if icount == 0 || optnew < optold {
                        optold = optnew;
                        nactx = nact;
                        icount = 3;
                    } else if nact > nactx {
                        nactx = nact;
                        icount = 3;
                    } else {
                        icount -= 1;
                        if icount == 0 {
                            state = Lp::Leftover;
                            continue;
                        }
                    }

                    if icon < nact {
                        // Drop constraint iact[icon] from the active set.
                        self.cycle_to_end(a, icon, nact);
                        nact -= 1;
                        if mcon > m {
                            self.stage_two_direction(nact);
                        } else {
                            let temp = dot(&self.sdirn, self.z.col(nact));
                            for i in 0..n {
                                self.sdirn[i] -= temp * self.z[(i, nact)];
                            }
                        }
                        state = Lp::Step;
                        continue;
                    }

                    // Add constraint iact[icon]: rotate the trailing columns
                    // of z to be orthogonal to its gradient.
                    let kk = self.iact[icon];
                    self.dxnew.copy_from_slice(a.col(kk));
                    let mut tot = 0.0f64;
                    for k in (nact..n).rev() {
                        let mut sp = 0.0;
                        let mut spabs = 0.0;
                        for i in 0..n {
                            let temp = self.z[(i, k)] * self.dxnew[i];
                            sp += temp;
                            spabs += temp.abs();
                        }
                        if negligible(spabs, sp) {
                            sp = 0.0;
                        }
                        if tot == 0.0 {
                            tot = sp;
                        } else {
                            let kp = k + 1;
                            let temp = sp.hypot(tot);
                            let alpha = sp / temp;
                            let beta = tot / temp;
                            tot = temp;
                            for i in 0..n {
                                let zk = self.z[(i, k)];
                                let zkp = self.z[(i, kp)];
                                self.z[(i, k)] = alpha * zk + beta * zkp;
                                self.z[(i, kp)] = alpha * zkp - beta * zk;
                            }
                        }
                    }

                    if tot != 0.0 {
                        nact += 1;
                        self.zdota[nact - 1] = tot;
                        self.vmultc[icon] = self.vmultc[nact - 1];
                        self.vmultc[nact - 1] = 0.0;
                    } else {
                        // The new gradient is dependent on the active ones:
                        // make room by removing one of them.
                        let mut ratio = -1.0f64;
                        let mut iout = usize::MAX;
                        for k in (0..nact).rev() {
                            let mut zdotv = 0.0;
                            let mut zdvabs = 0.0;
                            for i in 0..n {
                                let temp = self.z[(i, k)] * self.dxnew[i];
                                zdotv += temp;
                                zdvabs += temp.abs();
                            }
                            if !negligible(zdvabs, zdotv) {
                                let temp = zdotv / self.zdota[k];
                                if temp > 0.0 && self.iact[k] < m {
                                    let tempa = self.vmultc[k] / temp;
                                    if ratio < 0.0 || tempa < ratio {
                                        ratio = tempa;
                                        iout = k;
                                    }
                                }
                                if k >= 1 {
                                    let kw = self.iact[k];
                                    for i in 0..n {
                                        self.dxnew[i] -= temp * a[(i, kw)];
                                    }
                                }
                                self.vmultd[k] = temp;
                            } else {
                                self.vmultd[k] = 0.0;
                            }
                        }
                        if ratio < 0.0 {
                            state = Lp::Leftover;
                            continue;
                        }
                        for k in 0..nact {
                            self.vmultc[k] = (self.vmultc[k] - ratio * self.vmultd[k]).max(0.0);
                        }
                        self.cycle_to_end(a, iout, nact);
                        let temp = dot(self.z.col(nact - 1), a.col(kk));
                        if temp == 0.0 {
                            state = Lp::Leftover;
                            continue;
                        }
                        self.zdota[nact - 1] = temp;
                        self.vmultc[icon] = 0.0;
                        self.vmultc[nact - 1] = ratio;
                    }

                    // Record the addition; in stage two keep the objective
                    // as the last active constraint.
                    self.iact[icon] = self.iact[nact - 1];
                    self.iact[nact - 1] = kk;
                    if mcon > m && kk != obj {
                        let k = nact - 2;
                        self.rotate_pair(a, k, nact - 1, kk);
                        self.iact[nact - 1] = self.iact[k];
                        self.iact[k] = kk;
                        self.vmultc.swap(k, nact - 1);
                    }

                    if mcon > m {
                        self.stage_two_direction(nact);
                    } else {
                        let kk = self.iact[nact - 1];
                        let mut temp = dot(&self.sdirn, a.col(kk)) - 1.0;
                        temp /= self.zdota[nact - 1];
                        for i in 0..n {
                            self.sdirn[i] -= temp * self.z[(i, nact - 1)];
                        }
                    }
                    state = Lp::Step;
                }

                Lp::Step => {
                    let mut dd = rho * rho;
                    let mut sd = 0.0;
                    let mut ss = 0.0;
                    for i in 0..n {
                        if dx[i].abs() >= 1e-6 * rho {
                            dd -= dx[i] * dx[i];
                        }
                        sd += dx[i] * self.sdirn[i];
                        ss += self.sdirn[i] * self.sdirn[i];
                    }
                    if dd <= 0.0 {
                        state = Lp::Leftover;
                        continue;
                    }
                    let mut temp = (ss * dd).sqrt();
                    if sd.abs() >= 1e-6 * temp {
                        temp = (ss * dd + sd * sd).sqrt();
                    }
                    let stpful = dd / (temp + sd);
                    let mut step = stpful;
                    if mcon == m {
                        let acca = step + 0.1 * resmax;
                        let accb = step + 0.2 * resmax;
                        if step >= acca || acca >= accb {
                            state = Lp::StageTwo;
                            continue;
                        }
                        step = step.min(resmax);
                    }

                    for i in 0..n {
                        self.dxnew[i] = dx[i] + step * self.sdirn[i];
                    }
                    if mcon == m {
                        resold = resmax;
                        resmax = 0.0;
                        for k in 0..nact {
                            let kk = self.iact[k];
                            let temp = b[kk] - dot(a.col(kk), &self.dxnew);
                            resmax = resmax.max(temp);
                        }
                    }

                    // Multipliers the active set would have at dxnew.
                    for k in (0..nact).rev() {
                        let mut zdotw = 0.0;
                        let mut zdwabs = 0.0;
                        for i in 0..n {
                            let temp = self.z[(i, k)] * self.dxnew[i];
                            zdotw += temp;
                            zdwabs += temp.abs();
                        }
                        if negligible(zdwabs, zdotw) {
                            zdotw = 0.0;
                        }
                        self.vmultd[k] = zdotw / self.zdota[k];
                        if k >= 1 {
                            let kk = self.iact[k];
                            let v = self.vmultd[k];
                            for i in 0..n {
                                self.dxnew[i] -= v * a[(i, kk)];
                            }
                        }
                    }
                    if mcon > m && nact > 0 {
                        self.vmultd[nact - 1] = self.vmultd[nact - 1].max(0.0);
                    }

                    // Residuals of the inactive constraints at dxnew.
                    for i in 0..n {
                        self.dxnew[i] = dx[i] + step * self.sdirn[i];
                    }
                    for k in nact..mcon {
                        let kk = self.iact[k];
                        let mut sum = resmax - b[kk];
                        let mut sumabs = resmax + b[kk].abs();
                        for i in 0..n {
                            let temp = a[(i, kk)] * self.dxnew[i];
                            sum += temp;
                            sumabs += temp.abs();
                        }
                        if negligible(sumabs, sum) {
                            sum = 0.0;
                        }
                        self.vmultd[k] = sum;
                    }

                    // Fraction of the step that keeps every multiplier and
                    // residual non-negative.
                    let mut ratio = 1.0f64;
                    let mut blocking = None;
                    for k in 0..mcon {
                        if self.vmultd[k] < 0.0 {
                            let temp = self.vmultc[k] / (self.vmultc[k] - self.vmultd[k]);
                            if temp < ratio {
                                ratio = temp;
                                blocking = Some(k);
                            }
                        }
                    }
                    let keep = 1.0 - ratio;
                    for i in 0..n {
                        dx[i] = keep * dx[i] + ratio * self.dxnew[i];
                    }
                    for k in 0..mcon {
                        self.vmultc[k] = (keep * self.vmultc[k] + ratio * self.vmultd[k]).max(0.0);
                    }
                    if mcon == m {
                        resmax = resold + ratio * (resmax - resold);
                    }

                    if let Some(k) = blocking {
                        icon = k;
                        state = Lp::Iterate;
                        continue;
                    }
                    if step == stpful {
                        return true;
                    }
                    state = Lp::StageTwo;
                }

                Lp::StageTwo => {
                    mcon = m + 1;
                    icon = obj;
                    self.iact[obj] = obj;
                    self.vmultc[obj] = 0.0;
                    state = Lp::Restart;
                }

                Lp::Leftover => {
                    if mcon == m {
                        state = Lp::StageTwo;
                        continue;
                    }
                    return false;
                }
            }
        }
    }

    fn stage_two_direction(&mut self, nact: usize) {
        let temp = 1.0 / self.zdota[nact - 1];
        for i in 0..self.n {
            self.sdirn[i] = temp * self.z[(i, nact - 1)];
        }
    }
}
