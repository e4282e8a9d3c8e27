//! Fixed-step integration of `dx/dt = f(x, t)` from `t = 0` to `t = 1`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Midpoint,
}

impl Method {
    /// Field evaluations per step.
    pub fn evals_per_step(self) -> usize {
        match self {
            Method::Euler => 1,
            Method::Midpoint => 2,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "midpoint" => Ok(Method::Midpoint),
            other => Err(Error::InvalidConfig(format!("unknown solver {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub steps: usize,
    pub record_trajectory: bool,
}

impl Default for SolverConfig {
    /// Midpoint with 3 steps, 6 field evaluations.
    fn default() -> Self {
        Self {
            method: Method::Midpoint,
            steps: 3,
            record_trajectory: false,
        }
    }
}

impl SolverConfig {
    pub fn new(method: Method, steps: usize) -> Self {
        Self {
            method,
            steps,
            record_trajectory: false,
        }
    }

    /// Config spending exactly `nfe` evaluations; midpoint needs an even count.
    pub fn from_nfe(method: Method, nfe: usize) -> Result<Self> {
        let per = method.evals_per_step();
        if nfe == 0 || nfe % per != 0 {
            return Err(Error::InvalidConfig(format!("NFE {nfe} is not a positive multiple of {per} for {method}")));
        }
        Ok(Self::new(method, nfe / per))
    }

    pub fn with_trajectory(mut self) -> Self {
        self.record_trajectory = true;
        self
    }

    pub fn nfe(&self) -> usize {
        self.steps * self.method.evals_per_step()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverRun {
    pub endpoint: Vec<f64>,
    pub nfe: usize,
    /// `(t, state)` at every grid time including 0 and 1, when recorded.
    pub trajectory: Option<Vec<(f64, Vec<f64>)>>,
}

fn check_finite(state: &[f64], step: usize) -> Result<()> {
    if state.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: "ODE state",
            step,
        })
    }
}

/// Integrate `field` over `[0, 1]` on a uniform grid of `cfg.steps` steps.
pub fn solve<F>(mut field: F, x0: &[f64], cfg: &SolverConfig) -> Result<SolverRun>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if cfg.steps == 0 {
        return Err(Error::InvalidConfig("solver needs at least one step".into()));
    }
    let h = 1.0 / cfg.steps as f64;
    let mut x = x0.to_vec();
    let mut nfe = 0;
    let mut trajectory = cfg.record_trajectory.then(|| vec![(0.0, x.clone())]);

    for step in 0..cfg.steps {
        let t = step as f64 * h;
        let k1 = field(&x, t)?;
        nfe += 1;
        if k1.len() != x.len() {
            return Err(Error::shape("field output", x.len(), k1.len()));
        }
        let slope = match cfg.method {
            Method::Euler => k1,
            Method::Midpoint => {
                let mid: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + 0.5 * h * k).collect();
                check_finite(&mid, step)?;
                let k2 = field(&mid, t + 0.5 * h)?;
                nfe += 1;
                if k2.len() != x.len() {
                    return Err(Error::shape("field output", x.len(), k2.len()));
                }
                k2
            }
        };
        for (a, k) in x.iter_mut().zip(&slope) {
            *a += h * k;
        }
        check_finite(&x, step)?;
        if let Some(tr) = trajectory.as_mut() {
            let t_next = if step + 1 == cfg.steps { 1.0 } else { (step + 1) as f64 * h };
            tr.push((t_next, x.clone()));
        }
    }
    Ok(SolverRun {
        endpoint: x,
        nfe,
        trajectory,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrderEstimate {
    /// Both step counts reproduced the solution exactly.
    Exact,
    Order(f64),
}

/// Convergence order from the error ratio between `base_steps` and `2 * base_steps`.
pub fn empirical_order<F>(
    field: F,
    x0: &[f64],
    exact_endpoint: &[f64],
    method: Method,
    base_steps: usize,
) -> Result<OrderEstimate>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    let err = |steps: usize| -> Result<f64> {
        let run = solve(&field, x0, &SolverConfig::new(method, steps))?;
        Ok(run
            .endpoint
            .iter()
            .zip(exact_endpoint)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    };
    let coarse = err(base_steps)?;
    let fine = err(2 * base_steps)?;
    if coarse == 0.0 && fine == 0.0 {
        return Ok(OrderEstimate::Exact);
    }
    Ok(OrderEstimate::Order((coarse / fine).log2()))
}

/// CSV with a header `t,x0,x1,...` and one row per recorded time.
pub fn write_trajectory_csv<W: Write>(out: W, trajectory: &[(f64, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = trajectory.first().map_or(0, |(_, s)| s.len());
    let mut header = vec!["t".to_string()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (t, state) in trajectory {
        let mut row = vec![t.to_string()];
        row.extend(state.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trajectory_csv(path: impl AsRef<Path>, trajectory: &[(f64, Vec<f64>)]) -> Result<()> {
    write_trajectory_csv(std::fs::File::create(path)?, trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn decay(x: &[f64], _t: f64) -> Result<Vec<f64>> {
        Ok(x.iter().map(|v| -v).collect())
    }

    #[test]
    fn constant_field_is_exact() {
        for method in [Method::Euler, Method::Midpoint] {
            for steps in [1, 3, 7, 50] {
                let run = solve(|_x: &[f64], _t| Ok(vec![0.5, -2.0]), &[1.0, 1.0], &SolverConfig::new(method, steps)).unwrap();
                assert!((run.endpoint[0] - 1.5).abs() < 1e-14);
                assert!((run.endpoint[1] + 1.0).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn linear_decay_converges_to_inverse_e() {
        let exact = (-1.0f64).exp();
        let e_err = |n| (solve(decay, &[1.0], &SolverConfig::new(Method::Euler, n)).unwrap().endpoint[0] - exact).abs();
        let m_err = |n| (solve(decay, &[1.0], &SolverConfig::new(Method::Midpoint, n)).unwrap().endpoint[0] - exact).abs();
        assert!(m_err(64) < 1e-4);
        assert!(e_err(64) < 5e-3);
        assert!(m_err(10) < e_err(10));
        // Closed forms for the linear test equation.
        let n = 10;
        let euler = solve(decay, &[1.0], &SolverConfig::new(Method::Euler, n)).unwrap().endpoint[0];
        assert!((euler - (1.0 - 0.1f64).powi(n as i32)).abs() < 1e-14);
        let mid = solve(decay, &[1.0], &SolverConfig::new(Method::Midpoint, n)).unwrap().endpoint[0];
        assert!((mid - (1.0 - 0.1 + 0.005f64).powi(n as i32)).abs() < 1e-14);
    }

    #[test]
    fn orders_of_accuracy() {
        let exact = [(-1.0f64).exp()];
        match empirical_order(decay, &[1.0], &exact, Method::Euler, 32).unwrap() {
            OrderEstimate::Order(p) => assert!((0.8..=1.2).contains(&p), "{p}"),
            OrderEstimate::Exact => panic!(),
        }
        match empirical_order(decay, &[1.0], &exact, Method::Midpoint, 32).unwrap() {
            OrderEstimate::Order(p) => assert!((1.8..=2.2).contains(&p), "{p}"),
            OrderEstimate::Exact => panic!(),
        }
        let c = empirical_order(|_: &[f64], _| Ok(vec![1.0]), &[0.0], &[1.0], Method::Midpoint, 4).unwrap();
        assert_eq!(c, OrderEstimate::Exact);
    }

    #[test]
    fn nfe_matches_call_count() {
        for (method, steps, expect) in [(Method::Midpoint, 3, 6), (Method::Euler, 6, 6), (Method::Midpoint, 25, 50)] {
            let calls = Cell::new(0usize);
            let run = solve(
                |x: &[f64], _t| {
                    calls.set(calls.get() + 1);
                    Ok(x.to_vec())
                },
                &[1.0],
                &SolverConfig::new(method, steps),
            )
            .unwrap();
            assert_eq!(run.nfe, expect);
            assert_eq!(calls.get(), expect);
        }
        assert_eq!(SolverConfig::default().nfe(), 6);
        assert!(SolverConfig::from_nfe(Method::Midpoint, 5).is_err());
        assert_eq!(SolverConfig::from_nfe(Method::Midpoint, 6).unwrap().steps, 3);
    }

    #[test]
    fn trajectory_is_ordered_and_ends_at_endpoint() {
        let run = solve(decay, &[1.0, 2.0], &SolverConfig::new(Method::Midpoint, 5).with_trajectory()).unwrap();
        let tr = run.trajectory.as_ref().unwrap();
        assert_eq!(tr.len(), 6);
        assert_eq!(tr[0].0, 0.0);
        assert_eq!(tr.last().unwrap().0, 1.0);
        assert!(tr.windows(2).all(|w| w[1].0 > w[0].0));
        assert_eq!(tr.last().unwrap().1, run.endpoint);
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, tr).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x0,x1\n0,1,2\n"));
    }

    #[test]
    fn non_finite_state_reports_step() {
        let err = solve(
            |_x: &[f64], t| Ok(vec![if t > 0.45 { f64::INFINITY } else { 1.0 }]),
            &[0.0],
            &SolverConfig::new(Method::Euler, 10),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 5, .. }));
    }

    #[test]
    fn affine_equivariance() {
        // f(x, t) = [sin(x1) + t, x0 * x1]; A = [[2, 1], [0, 3]], b = [0.5, -1].
        let f = |x: &[f64], t: f64| -> Result<Vec<f64>> { Ok(vec![x[1].sin() + t, 0.3 * x[0] * x[1]]) };
        let a = [[2.0, 1.0], [0.0, 3.0]];
        let b = [0.5, -1.0];
        let apply = |x: &[f64]| vec![a[0][0] * x[0] + a[0][1] * x[1] + b[0], a[1][0] * x[0] + a[1][1] * x[1] + b[1]];
        let lin = |x: &[f64]| vec![a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]];
        let inv = |z: &[f64]| {
            let (u, v) = (z[0] - b[0], z[1] - b[1]);
            let x1 = v / 3.0;
            vec![(u - x1) / 2.0, x1]
        };
        let g = |z: &[f64], t: f64| -> Result<Vec<f64>> { Ok(lin(&f(&inv(z), t)?)) };
        let x0 = [0.2, -0.4];
        for method in [Method::Euler, Method::Midpoint] {
            let cfg = SolverConfig::new(method, 7);
            let direct = apply(&solve(f, &x0, &cfg).unwrap().endpoint);
            let conj = solve(g, &apply(&x0), &cfg).unwrap().endpoint;
            for i in 0..2 {
                assert!((direct[i] - conj[i]).abs() < 1e-12);
            }
        }
    }
}
